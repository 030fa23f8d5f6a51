//! Command-line front-end. Exit codes: 0 on success, 1 for usage errors,
//! 2 for data or model errors (printing the underlying module error).

use std::collections::HashMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::PipelineConfig;
use crate::dataio::{
    load_model, read_embeddings, read_scores, read_trials, save_model, write_embeddings,
    write_scores, write_trials, EmbeddingFormat, EmbeddingSet, Model,
};
use crate::error::{Error, Result};
use crate::evalkit::{gaussianity_report, report_from_scores, score_trials, TrialScore};
use crate::experiment::{generate_desk, run_experiment_to_dir};
use crate::normalizer::{
    adapt_normalizer, fit_normalizer, length_normalize, NormKind, Normalizer,
};
use crate::plda::{adapt_uat, fit_plda};
use crate::vae_norm::{AdaptConfig, AdaptMode, VaeConfig};

#[derive(Parser)]
#[command(
    name = "xvecnorm",
    version,
    about = "Speaker-embedding normalization, PLDA scoring, and domain adaptation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic desk populations and trial lists.
    Gen(GenArgs),
    /// Fit an embedding normalizer on labeled training embeddings.
    FitNorm(FitNormArgs),
    /// Apply a fitted normalizer to an embedding set.
    ApplyNorm(ApplyNormArgs),
    /// Fit the two-covariance PLDA back-end.
    FitPlda(FitPldaArgs),
    /// Adapt a fitted model to out-of-domain data (PLDA: unsupervised
    /// covariance adaptation; retraining is fit-plda on the adaptation set).
    Adapt(AdaptArgs),
    /// Score a trial list with a normalizer and PLDA model.
    Score(ScoreArgs),
    /// Compute EER and DET points from a score file and labeled trials.
    Eval(EvalArgs),
    /// Report per-dimension gaussianity diagnostics for an embedding set.
    Diagnose(DiagnoseArgs),
    /// Run the experiment matrix and write aggregated results.
    Experiment(ExperimentArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Population preset; only `desk` is defined.
    #[arg(long, default_value = "desk")]
    preset: String,
    #[arg(long)]
    seed: u64,
    /// Output directory for the embedding and trial files.
    #[arg(long)]
    out: PathBuf,
    /// Embedding file format: binary (.evf1) or csv.
    #[arg(long, default_value = "binary")]
    format: String,
}

#[derive(Args)]
struct FitNormArgs {
    /// Normalizer kind: none, pca, lda, vae, or cvae.
    #[arg(long)]
    kind: String,
    /// Labeled training embeddings (.evf1 or .csv).
    #[arg(long)]
    train: PathBuf,
    /// Output dimension.
    #[arg(long, default_value_t = 8)]
    k: usize,
    /// VAE family: hidden layer widths.
    #[arg(long, value_delimiter = ',', default_values_t = [64usize, 64usize])]
    hidden: Vec<usize>,
    /// VAE family: training epochs.
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    /// VAE family: minibatch size.
    #[arg(long, default_value_t = 128)]
    batch_size: usize,
    /// VAE family: Adam learning rate.
    #[arg(long, default_value_t = 1e-3)]
    learning_rate: f64,
    /// C-VAE only: weight of the cohesive loss term.
    #[arg(long, default_value_t = 0.1)]
    cohesive_weight: f64,
    /// VAE family: training seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output model file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ApplyNormArgs {
    /// Fitted normalizer model file.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Length-normalize after the model transform.
    #[arg(long)]
    length_norm: bool,
}

#[derive(Args)]
struct FitPldaArgs {
    /// Labeled (already normalized) training embeddings.
    #[arg(long)]
    train: PathBuf,
    /// EM iterations on top of the scatter initialization.
    #[arg(long, default_value_t = 10)]
    iterations: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AdaptArgs {
    /// Fitted model file (normalizer or PLDA).
    #[arg(long)]
    model: PathBuf,
    /// Adaptation embeddings (unlabeled is enough for PLDA).
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// PLDA: within-covariance adaptation weight in [0, 1].
    #[arg(long, default_value_t = 0.5)]
    alpha_within: f64,
    /// PLDA: between-covariance adaptation weight in [0, 1].
    #[arg(long, default_value_t = 0.5)]
    alpha_between: f64,
    /// Normalizer: retrain or finetune.
    #[arg(long, default_value = "finetune")]
    mode: String,
    /// Normalizer (VAE family): adaptation epochs.
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    /// Normalizer (VAE family): minibatch size.
    #[arg(long, default_value_t = 128)]
    batch_size: usize,
    /// Normalizer (VAE family): Adam learning rate.
    #[arg(long, default_value_t = 1e-4)]
    learning_rate: f64,
    /// Normalizer (VAE family): adaptation seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Finetune: recompute input standardization on the adaptation set.
    #[arg(long, value_parser = clap::value_parser!(bool), default_value = "true")]
    refresh_standardization: bool,
}

#[derive(Args)]
struct ScoreArgs {
    /// Normalizer model; omit to score raw embeddings.
    #[arg(long)]
    norm: Option<PathBuf>,
    #[arg(long)]
    plda: PathBuf,
    /// Embeddings covering every trial utterance.
    #[arg(long)]
    embeddings: PathBuf,
    #[arg(long)]
    trials: PathBuf,
    /// Output score file.
    #[arg(long)]
    out: PathBuf,
    /// Length-normalize between the normalizer and PLDA.
    #[arg(long)]
    length_norm: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    scores: PathBuf,
    /// Labeled trial list supplying the target/nontarget key.
    #[arg(long)]
    trials: PathBuf,
    /// Optional DET curve output (threshold,far,frr CSV).
    #[arg(long)]
    det: Option<PathBuf>,
}

#[derive(Args)]
struct DiagnoseArgs {
    #[arg(long)]
    input: PathBuf,
    /// Optional CSV output; the report always prints to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExperimentArgs {
    /// Flat `key = value` config file; flags override file values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for results.csv, results.md, and config.resolved.
    #[arg(long)]
    out: PathBuf,
    /// Override one config key (repeatable), e.g. --set dim=16.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Shorthand for --set seeds=...
    #[arg(long)]
    seeds: Option<String>,
    /// Shorthand for --set normalizer=...
    #[arg(long)]
    normalizer: Option<String>,
    /// Shorthand for --set adaptation=...
    #[arg(long)]
    adaptation: Option<String>,
}

/// Runs the CLI against the given argument list and returns the process
/// exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests arrive here too; clap knows which
            // stream and status they deserve.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{e}");
            match e {
                Error::Usage(_) => 1,
                _ => 2,
            }
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Gen(args) => cmd_gen(args),
        Command::FitNorm(args) => cmd_fit_norm(args),
        Command::ApplyNorm(args) => cmd_apply_norm(args),
        Command::FitPlda(args) => cmd_fit_plda(args),
        Command::Adapt(args) => cmd_adapt(args),
        Command::Score(args) => cmd_score(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Diagnose(args) => cmd_diagnose(args),
        Command::Experiment(args) => cmd_experiment(args),
    }
}

/// CSV by extension, EVF1 binary otherwise.
fn sniff_format(path: &Path) -> EmbeddingFormat {
    match path.extension().and_then(|e| e.to_str()) {
        Some("csv") => EmbeddingFormat::Csv,
        _ => EmbeddingFormat::Binary,
    }
}

fn load_normalizer(path: &Path) -> Result<Normalizer> {
    load_model(path)?.into_normalizer()
}

fn maybe_length_norm(set: EmbeddingSet, on: bool) -> EmbeddingSet {
    if on {
        length_normalize(&set)
    } else {
        set
    }
}

fn cmd_gen(args: GenArgs) -> Result<()> {
    if args.preset != "desk" {
        return Err(Error::Usage(format!(
            "unknown preset {:?} (only `desk` is defined)",
            args.preset
        )));
    }
    let (format, ext) = match args.format.as_str() {
        "binary" => (EmbeddingFormat::Binary, "evf1"),
        "csv" => (EmbeddingFormat::Csv, "csv"),
        other => {
            return Err(Error::Usage(format!(
                "unknown format {other:?} (expected binary|csv)"
            )));
        }
    };
    let data = generate_desk(&PipelineConfig::default(), args.seed)?;
    fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    for (name, set) in [
        ("ind_train", &data.ind_train),
        ("ind_test", &data.ind_test),
        ("ood_adapt", &data.ood_adapt),
        ("ood_test", &data.ood_test),
    ] {
        write_embeddings(set, args.out.join(format!("{name}.{ext}")), format)?;
    }
    write_trials(&data.ind_trials, args.out.join("ind_trials.txt"))?;
    write_trials(&data.ood_trials, args.out.join("ood_trials.txt"))?;
    println!("wrote desk populations for seed {} to {}", args.seed, args.out.display());
    Ok(())
}

fn cmd_fit_norm(args: FitNormArgs) -> Result<()> {
    let kind: NormKind = args.kind.parse()?;
    let train = read_embeddings(&args.train, sniff_format(&args.train))?;
    let vae = VaeConfig {
        latent_dim: args.k,
        hidden: args.hidden,
        epochs: args.epochs,
        batch_size: args.batch_size,
        learning_rate: args.learning_rate,
        cohesive_weight: args.cohesive_weight,
        seed: args.seed,
    };
    let (norm, _) = fit_normalizer(kind, &train, args.k, &vae)?;
    save_model(&Model::Norm(norm), &args.out)?;
    println!("wrote {} model to {}", kind.as_str(), args.out.display());
    Ok(())
}

fn cmd_apply_norm(args: ApplyNormArgs) -> Result<()> {
    let norm = load_normalizer(&args.model)?;
    let input = read_embeddings(&args.input, sniff_format(&args.input))?;
    let out = maybe_length_norm(norm.apply(&input)?, args.length_norm);
    write_embeddings(&out, &args.out, sniff_format(&args.out))?;
    println!("wrote {} normalized vectors to {}", out.len(), args.out.display());
    Ok(())
}

fn cmd_fit_plda(args: FitPldaArgs) -> Result<()> {
    let train = read_embeddings(&args.train, sniff_format(&args.train))?;
    let plda = fit_plda(&train, args.iterations)?;
    save_model(&Model::Plda(plda), &args.out)?;
    println!("wrote plda model to {}", args.out.display());
    Ok(())
}

fn cmd_adapt(args: AdaptArgs) -> Result<()> {
    let data = read_embeddings(&args.data, sniff_format(&args.data))?;
    let adapted = match load_model(&args.model)? {
        Model::Plda(plda) => Model::Plda(adapt_uat(
            &plda,
            &data.unlabeled(),
            args.alpha_within,
            args.alpha_between,
        )?),
        Model::Norm(norm) => {
            let mode = match args.mode.as_str() {
                "retrain" => AdaptMode::Retrain,
                "finetune" => AdaptMode::Finetune,
                other => {
                    return Err(Error::Usage(format!(
                        "unknown adaptation mode {other:?} (expected retrain|finetune)"
                    )));
                }
            };
            let config = AdaptConfig {
                mode,
                epochs: args.epochs,
                batch_size: args.batch_size,
                learning_rate: args.learning_rate,
                seed: args.seed,
                refresh_standardization: args.refresh_standardization,
            };
            Model::Norm(adapt_normalizer(&norm, &data, &config)?.0)
        }
    };
    save_model(&adapted, &args.out)?;
    println!("wrote adapted {} model to {}", adapted.kind(), args.out.display());
    Ok(())
}

fn cmd_score(args: ScoreArgs) -> Result<()> {
    let norm = match &args.norm {
        Some(path) => load_normalizer(path)?,
        None => Normalizer::None,
    };
    let plda = load_model(&args.plda)?.into_plda()?;
    let embeddings = read_embeddings(&args.embeddings, sniff_format(&args.embeddings))?;
    let trials = read_trials(&args.trials)?;
    // Project first so the optional length normalization sits between the
    // normalizer and PLDA, exactly as in training.
    let projected = maybe_length_norm(norm.apply(&embeddings)?, args.length_norm);
    let report = score_trials(&Normalizer::None, &plda, &projected, &trials)?;
    write_scores(&report.score_lines(), &args.out)?;
    println!("wrote {} scores to {}", report.trial_scores.len(), args.out.display());
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let scores = read_scores(&args.scores)?;
    let trials = read_trials(&args.trials)?;
    let mut key: HashMap<(&str, &str), bool> = HashMap::new();
    for t in &trials {
        let label = t.is_target.ok_or_else(|| {
            Error::invalid(format!(
                "trial {} {} carries no target label",
                t.enroll_utterance_id, t.test_utterance_id
            ))
        })?;
        key.insert(
            (
                t.enroll_utterance_id.as_str(),
                t.test_utterance_id.as_str(),
            ),
            label,
        );
    }
    let trial_scores = scores
        .into_iter()
        .map(|s| {
            let label = key
                .get(&(
                    s.enroll_utterance_id.as_str(),
                    s.test_utterance_id.as_str(),
                ))
                .copied()
                .ok_or_else(|| {
                    Error::invalid(format!(
                        "score for unknown trial {} {}",
                        s.enroll_utterance_id, s.test_utterance_id
                    ))
                })?;
            Ok(TrialScore {
                enroll_utterance_id: s.enroll_utterance_id,
                test_utterance_id: s.test_utterance_id,
                score: s.score,
                is_target: Some(label),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let report = report_from_scores(trial_scores);
    if report.eer.is_none() {
        return Err(Error::invalid(
            "EER is undefined: scores cover only one trial class",
        ));
    }
    print!("{}", report.metrics_csv());
    if let Some(det) = &args.det {
        fs::write(det, report.det_csv()).map_err(|e| Error::io(det, e))?;
    }
    Ok(())
}

fn cmd_diagnose(args: DiagnoseArgs) -> Result<()> {
    let input = read_embeddings(&args.input, sniff_format(&args.input))?;
    let report = gaussianity_report(&input)?;
    let csv = report.csv();
    print!("{csv}");
    if let Some(out) = &args.out {
        fs::write(out, csv).map_err(|e| Error::io(out, e))?;
    }
    Ok(())
}

fn cmd_experiment(args: ExperimentArgs) -> Result<()> {
    let mut config = PipelineConfig::default();
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        config.apply_text(&text)?;
    }
    for assignment in &args.set {
        let (key, value) = assignment.split_once('=').ok_or_else(|| {
            Error::Usage(format!("--set expects KEY=VALUE, got {assignment:?}"))
        })?;
        config.set(key.trim(), value.trim())?;
    }
    for (key, value) in [
        ("seeds", &args.seeds),
        ("normalizer", &args.normalizer),
        ("adaptation", &args.adaptation),
    ] {
        if let Some(value) = value {
            config.set(key, value)?;
        }
    }
    let result = run_experiment_to_dir(&config, &args.out)?;
    for w in &result.warnings {
        eprintln!("warning: {w}");
    }
    print!("{}", result.markdown());
    println!("wrote results.csv, results.md, config.resolved to {}", args.out.display());
    Ok(())
}
