fn main() {
    std::process::exit(xvecnorm::cli::run(std::env::args_os()));
}
