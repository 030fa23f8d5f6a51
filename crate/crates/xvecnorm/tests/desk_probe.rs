use std::time::Instant;

use xvecnorm::config::PipelineConfig;
use xvecnorm::experiment::{generate_desk, run_experiment, EerRow, MomentStage};
use xvecnorm::normalizer::{fit_normalizer, NormKind};
use xvecnorm::numstats::{moments, sym_eig, Matrix};
use xvecnorm::plda::fit_plda;
use xvecnorm::synthgen::derive_seed;
use xvecnorm::vae_norm::VaeConfig;

#[test]
#[ignore]
fn desk_probe() {
    let config = PipelineConfig::default();
    let t0 = Instant::now();
    let result = run_experiment(&config).unwrap();
    println!("elapsed: {:.1}s", t0.elapsed().as_secs_f64());
    println!("{}", result.markdown());
    for kind in [NormKind::Vae, NormKind::Cvae] {
        let ood = &result.eer[&(EerRow::OodPlda, kind)].values;
        let uat = &result.eer[&(EerRow::OodPldaUat, kind)].values;
        println!("{:?} per-seed OOD {:?}", kind, ood);
        println!("{:?} per-seed UAT {:?}", kind, uat);
        let su = &result.abs_skew[&(MomentStage::Unadapted, kind)].values;
        let sa = &result.abs_skew[&(MomentStage::Adapted, kind)].values;
        let ku = &result.abs_kurt[&(MomentStage::Unadapted, kind)].values;
        let ka = &result.abs_kurt[&(MomentStage::Adapted, kind)].values;
        println!("{:?} skew unadapted {:?}", kind, su);
        println!("{:?} skew adapted   {:?}", kind, sa);
        println!("{:?} kurt unadapted {:?}", kind, ku);
        println!("{:?} kurt adapted   {:?}", kind, ka);
    }
}

/// Eigenvalues of T_model^{-1} S_ood in the VAE latent space: > 1 means the
/// OOD latents are inflated relative to the model total covariance.
#[test]
#[ignore]
fn latent_inflation_probe() {
    let config = PipelineConfig::default();
    for seed in [1u64, 2, 3] {
        let data = generate_desk(&config, seed).unwrap();
        for kind in [NormKind::Vae, NormKind::Cvae] {
            let vae = VaeConfig {
                latent_dim: config.latent_dim,
                hidden: config.vae_hidden.clone(),
                epochs: config.vae_epochs,
                batch_size: config.vae_batch_size,
                learning_rate: config.vae_learning_rate,
                cohesive_weight: config.cohesive_weight,
                seed: derive_seed(seed, if kind == NormKind::Cvae { 6 } else { 5 }),
            };
            let (norm, _) = fit_normalizer(kind, &data.ind_train, config.latent_dim, &vae).unwrap();
            let ind_n = norm.apply(&data.ind_train).unwrap();
            let plda = fit_plda(&ind_n, config.plda_iterations).unwrap();
            let ood_n = norm.apply(&data.ood_adapt).unwrap();
            let s_ood = moments(&ood_n.vectors()).unwrap().covariance;
            let t_model = plda.between_cov.add(&plda.within_cov);
            let (t_vals, t_vecs) = sym_eig(&t_model.symmetrized()).unwrap();
            let d = config.latent_dim;
            // T^{-1/2} from the eigendecomposition, then whiten S.
            let mut w = vec![vec![0.0; d]; d];
            for i in 0..d {
                for j in 0..d {
                    let mut acc = 0.0;
                    for k in 0..d {
                        acc += t_vecs[(i, k)] * t_vecs[(j, k)] / t_vals[k].sqrt();
                    }
                    w[i][j] = acc;
                }
            }
            let mut m = vec![0.0; d * d];
            for i in 0..d {
                for j in 0..d {
                    let mut acc = 0.0;
                    for a in 0..d {
                        for b in 0..d {
                            acc += w[i][a] * s_ood[(a, b)] * w[j][b];
                        }
                    }
                    m[i * d + j] = acc;
                }
            }
            let m = Matrix::from_vec(d, d, m).unwrap();
            let (vals, _) = sym_eig(&m.symmetrized()).unwrap();
            println!(
                "seed {seed} {:?}: whitened OOD eigs {:?}",
                kind,
                vals.iter()
                    .map(|v| (v * 100.0).round() / 100.0)
                    .collect::<Vec<_>>()
            );
        }
    }
}

/// Adapted-moment sweep over finetune epochs and learning rate: per config,
/// median |skew| and |kurt| of the full OOD set before and after adaptation,
/// plus how many seeds improve pairwise.
#[test]
#[ignore]
fn finetune_sweep() {
    use xvecnorm::evalkit::gaussianity_report;
    use xvecnorm::normalizer::adapt_normalizer;
    use xvecnorm::vae_norm::{AdaptConfig, AdaptMode};

    let config = PipelineConfig::default();
    let seeds: Vec<u64> = vec![1, 2, 3, 4, 5];
    let grid: Vec<(usize, f64)> = vec![
        (50, 1e-4),
        (100, 1e-4),
        (200, 1e-4),
        (100, 3e-4),
        (200, 3e-4),
        (400, 3e-4),
    ];
    let median = |mut v: Vec<f64>| -> f64 {
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = v.len();
        if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        }
    };
    for kind in [NormKind::Vae, NormKind::Cvae] {
        let mut unad: Vec<(f64, f64)> = Vec::new();
        let mut per_cfg: Vec<Vec<(f64, f64)>> = vec![Vec::new(); grid.len()];
        for &seed in &seeds {
            let data = generate_desk(&config, seed).unwrap();
            let vae = VaeConfig {
                latent_dim: config.latent_dim,
                hidden: config.vae_hidden.clone(),
                epochs: config.vae_epochs,
                batch_size: config.vae_batch_size,
                learning_rate: config.vae_learning_rate,
                cohesive_weight: config.cohesive_weight,
                seed: derive_seed(seed, if kind == NormKind::Cvae { 6 } else { 5 }),
            };
            let (norm, _) = fit_normalizer(kind, &data.ind_train, config.latent_dim, &vae).unwrap();
            let base = gaussianity_report(&norm.apply(&data.ood_all).unwrap()).unwrap();
            unad.push((base.mean_abs_skewness, base.mean_abs_kurtosis));
            for (i, &(epochs, lr)) in grid.iter().enumerate() {
                let adapt = AdaptConfig {
                    mode: AdaptMode::Finetune,
                    epochs,
                    batch_size: config.vae_batch_size,
                    learning_rate: lr,
                    seed: derive_seed(seed, if kind == NormKind::Cvae { 8 } else { 7 }),
                    refresh_standardization: true,
                };
                let (ad, _) = adapt_normalizer(&norm, &data.ood_adapt, &adapt).unwrap();
                let rep = gaussianity_report(&ad.apply(&data.ood_all).unwrap()).unwrap();
                per_cfg[i].push((rep.mean_abs_skewness, rep.mean_abs_kurtosis));
            }
        }
        let s0 = median(unad.iter().map(|p| p.0).collect());
        let k0 = median(unad.iter().map(|p| p.1).collect());
        println!("{kind:?} unadapted: skew {s0:.4} kurt {k0:.4}");
        for (i, &(epochs, lr)) in grid.iter().enumerate() {
            let s = median(per_cfg[i].iter().map(|p| p.0).collect());
            let k = median(per_cfg[i].iter().map(|p| p.1).collect());
            let sw = per_cfg[i]
                .iter()
                .zip(&unad)
                .filter(|(a, u)| a.0 < u.0)
                .count();
            let kw = per_cfg[i]
                .iter()
                .zip(&unad)
                .filter(|(a, u)| a.1 < u.1)
                .count();
            println!(
                "{kind:?} ep {epochs:3} lr {lr:.0e}: skew {s:.4} ({sw}/5 improve) kurt {k:.4} ({kw}/5 improve)"
            );
        }
    }
}

/// C-VAE finetune with the cohesive term disabled during the gradient steps:
/// does removing the centroid pull let the KL term Gaussianize the aggregate?
#[test]
#[ignore]
fn cohesive_free_finetune_probe() {
    use xvecnorm::evalkit::gaussianity_report;
    use xvecnorm::normalizer::Normalizer;
    use xvecnorm::vae_norm::{adapt_vae, AdaptConfig, AdaptMode};

    let config = PipelineConfig::default();
    let seeds: Vec<u64> = vec![1, 2, 3, 4, 5];
    let grid: Vec<(usize, f64)> = vec![(50, 1e-4), (100, 1e-4), (200, 1e-4), (100, 3e-4)];
    let median = |mut v: Vec<f64>| -> f64 {
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        v[v.len() / 2]
    };
    let mut unad: Vec<(f64, f64)> = Vec::new();
    let mut per_cfg: Vec<Vec<(f64, f64)>> = vec![Vec::new(); grid.len()];
    for &seed in &seeds {
        let data = generate_desk(&config, seed).unwrap();
        let vae = VaeConfig {
            latent_dim: config.latent_dim,
            hidden: config.vae_hidden.clone(),
            epochs: config.vae_epochs,
            batch_size: config.vae_batch_size,
            learning_rate: config.vae_learning_rate,
            cohesive_weight: config.cohesive_weight,
            seed: derive_seed(seed, 6),
        };
        let (norm, _) =
            fit_normalizer(NormKind::Cvae, &data.ind_train, config.latent_dim, &vae).unwrap();
        let base = gaussianity_report(&norm.apply(&data.ood_all).unwrap()).unwrap();
        unad.push((base.mean_abs_skewness, base.mean_abs_kurtosis));
        let model = match &norm {
            Normalizer::Vae(m) => m.clone(),
            _ => unreachable!(),
        };
        let mut free = model.clone();
        free.cohesive_weight = 0.0;
        for (i, &(epochs, lr)) in grid.iter().enumerate() {
            let adapt = AdaptConfig {
                mode: AdaptMode::Finetune,
                epochs,
                batch_size: config.vae_batch_size,
                learning_rate: lr,
                seed: derive_seed(seed, 8),
                refresh_standardization: true,
            };
            let (mut ad, _) = adapt_vae(&free, &data.ood_adapt, &adapt).unwrap();
            ad.cohesive_weight = model.cohesive_weight;
            let rep =
                gaussianity_report(&Normalizer::Vae(ad).apply(&data.ood_all).unwrap()).unwrap();
            per_cfg[i].push((rep.mean_abs_skewness, rep.mean_abs_kurtosis));
        }
    }
    let s0 = median(unad.iter().map(|p| p.0).collect());
    let k0 = median(unad.iter().map(|p| p.1).collect());
    println!("Cvae unadapted: skew {s0:.4} kurt {k0:.4}");
    for (i, &(epochs, lr)) in grid.iter().enumerate() {
        let s = median(per_cfg[i].iter().map(|p| p.0).collect());
        let k = median(per_cfg[i].iter().map(|p| p.1).collect());
        let sw = per_cfg[i]
            .iter()
            .zip(&unad)
            .filter(|(a, u)| a.0 < u.0)
            .count();
        let kw = per_cfg[i]
            .iter()
            .zip(&unad)
            .filter(|(a, u)| a.1 < u.1)
            .count();
        println!(
            "cohesive-free ep {epochs:3} lr {lr:.0e}: skew {s:.4} ({sw}/5) kurt {k:.4} ({kw}/5)"
        );
    }
}

/// Full decision table for norm adaptation: per mode/epochs/lr, the adapted
/// moments and the NA+RET EER against the plain RET EER.
#[test]
#[ignore]
fn norm_adapt_mode_probe() {
    use xvecnorm::evalkit::{gaussianity_report, score_trials};
    use xvecnorm::normalizer::{adapt_normalizer, Normalizer};
    use xvecnorm::vae_norm::{AdaptConfig, AdaptMode};

    let config = PipelineConfig::default();
    let seeds: Vec<u64> = vec![1, 2, 3, 4, 5];
    let grid: Vec<(AdaptMode, usize, f64)> = vec![
        (AdaptMode::Finetune, 100, 1e-4),
        (AdaptMode::Retrain, 100, 1e-3),
        (AdaptMode::Retrain, 200, 1e-3),
        (AdaptMode::Retrain, 400, 1e-3),
    ];
    let median = |mut v: Vec<f64>| -> f64 {
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        v[v.len() / 2]
    };
    for kind in [NormKind::Vae, NormKind::Cvae] {
        let mut unad: Vec<(f64, f64)> = Vec::new();
        let mut ret_eer: Vec<f64> = Vec::new();
        let mut per_cfg: Vec<Vec<(f64, f64, f64)>> = vec![Vec::new(); grid.len()];
        for &seed in &seeds {
            let data = generate_desk(&config, seed).unwrap();
            let vae = VaeConfig {
                latent_dim: config.latent_dim,
                hidden: config.vae_hidden.clone(),
                epochs: config.vae_epochs,
                batch_size: config.vae_batch_size,
                learning_rate: config.vae_learning_rate,
                cohesive_weight: config.cohesive_weight,
                seed: derive_seed(seed, if kind == NormKind::Cvae { 6 } else { 5 }),
            };
            let (norm, _) = fit_normalizer(kind, &data.ind_train, config.latent_dim, &vae).unwrap();
            let base = gaussianity_report(&norm.apply(&data.ood_all).unwrap()).unwrap();
            unad.push((base.mean_abs_skewness, base.mean_abs_kurtosis));
            let adapt_n = norm.apply(&data.ood_adapt).unwrap();
            let test_n = norm.apply(&data.ood_test).unwrap();
            let ret = fit_plda(&adapt_n, config.plda_iterations).unwrap();
            ret_eer.push(
                score_trials(&Normalizer::None, &ret, &test_n, &data.ood_trials)
                    .unwrap()
                    .eer
                    .unwrap(),
            );
            for (i, &(mode, epochs, lr)) in grid.iter().enumerate() {
                let adapt = AdaptConfig {
                    mode,
                    epochs,
                    batch_size: config.vae_batch_size,
                    learning_rate: lr,
                    seed: derive_seed(seed, if kind == NormKind::Cvae { 8 } else { 7 }),
                    refresh_standardization: true,
                };
                let (ad, _) = adapt_normalizer(&norm, &data.ood_adapt, &adapt).unwrap();
                let rep = gaussianity_report(&ad.apply(&data.ood_all).unwrap()).unwrap();
                let adapt_ad = ad.apply(&data.ood_adapt).unwrap();
                let test_ad = ad.apply(&data.ood_test).unwrap();
                let naret = fit_plda(&adapt_ad, config.plda_iterations).unwrap();
                let eer = score_trials(&Normalizer::None, &naret, &test_ad, &data.ood_trials)
                    .unwrap()
                    .eer
                    .unwrap();
                per_cfg[i].push((rep.mean_abs_skewness, rep.mean_abs_kurtosis, eer));
            }
        }
        let s0 = median(unad.iter().map(|p| p.0).collect());
        let k0 = median(unad.iter().map(|p| p.1).collect());
        let r0 = median(ret_eer.clone());
        println!("{kind:?} unadapted: skew {s0:.4} kurt {k0:.4} | RET EER {:.2}%", r0 * 100.0);
        for (i, &(mode, epochs, lr)) in grid.iter().enumerate() {
            let s = median(per_cfg[i].iter().map(|p| p.0).collect());
            let k = median(per_cfg[i].iter().map(|p| p.1).collect());
            let e = median(per_cfg[i].iter().map(|p| p.2).collect());
            let sw = per_cfg[i].iter().zip(&unad).filter(|(a, u)| a.0 < u.0).count();
            let kw = per_cfg[i].iter().zip(&unad).filter(|(a, u)| a.1 < u.1).count();
            let ew = per_cfg[i]
                .iter()
                .zip(&ret_eer)
                .filter(|(a, r)| a.2 < **r)
                .count();
            println!(
                "{kind:?} {mode:?} ep {epochs:3} lr {lr:.0e}: skew {s:.4} ({sw}/5) kurt {k:.4} ({kw}/5) NA+RET {:.2}% ({ew}/5 beat RET)",
                e * 100.0
            );
        }
    }
}

/// Decomposes the finetune into refresh-only and steps-only, and extends the
/// epoch range, tracking adapted moments plus the NA+RET EER per variant.
#[test]
#[ignore]
fn finetune_decomposition_probe() {
    use xvecnorm::evalkit::{gaussianity_report, score_trials};
    use xvecnorm::normalizer::{adapt_normalizer, Normalizer};
    use xvecnorm::vae_norm::{AdaptConfig, AdaptMode};

    let config = PipelineConfig::default();
    let seeds: Vec<u64> = vec![1, 2, 3, 4, 5];
    // (label, epochs, lr, refresh); epochs 0 = refresh-only (manual).
    let grid: Vec<(&str, usize, f64, bool)> = vec![
        ("refresh-only", 0, 0.0, true),
        ("ft50  1e-4 +r", 50, 1e-4, true),
        ("ft50  1e-4 -r", 50, 1e-4, false),
        ("ft400 3e-4 +r", 400, 3e-4, true),
        ("ft800 3e-4 +r", 800, 3e-4, true),
    ];
    let median = |mut v: Vec<f64>| -> f64 {
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        v[v.len() / 2]
    };
    let standardize = |vectors: &[Vec<f64>]| -> (Vec<f64>, Vec<f64>) {
        let d = vectors[0].len();
        let n = vectors.len() as f64;
        let mut mean = vec![0.0; d];
        for v in vectors {
            for (m, x) in mean.iter_mut().zip(v) {
                *m += x;
            }
        }
        for m in &mut mean {
            *m /= n;
        }
        let mut var = vec![0.0; d];
        for v in vectors {
            for ((s, x), m) in var.iter_mut().zip(v).zip(&mean) {
                let r = x - m;
                *s += r * r;
            }
        }
        let std = var
            .iter()
            .map(|s| {
                let sd: f64 = (s / n).sqrt();
                if sd < 1e-12 {
                    1.0
                } else {
                    sd
                }
            })
            .collect();
        (mean, std)
    };
    for kind in [NormKind::Vae, NormKind::Cvae] {
        let mut unad: Vec<(f64, f64)> = Vec::new();
        let mut ret_eer: Vec<f64> = Vec::new();
        let mut per_cfg: Vec<Vec<(f64, f64, f64)>> = vec![Vec::new(); grid.len()];
        for &seed in &seeds {
            let data = generate_desk(&config, seed).unwrap();
            let vae = VaeConfig {
                latent_dim: config.latent_dim,
                hidden: config.vae_hidden.clone(),
                epochs: config.vae_epochs,
                batch_size: config.vae_batch_size,
                learning_rate: config.vae_learning_rate,
                cohesive_weight: config.cohesive_weight,
                seed: derive_seed(seed, if kind == NormKind::Cvae { 6 } else { 5 }),
            };
            let (norm, _) = fit_normalizer(kind, &data.ind_train, config.latent_dim, &vae).unwrap();
            let base = gaussianity_report(&norm.apply(&data.ood_all).unwrap()).unwrap();
            unad.push((base.mean_abs_skewness, base.mean_abs_kurtosis));
            let adapt_n = norm.apply(&data.ood_adapt).unwrap();
            let test_n = norm.apply(&data.ood_test).unwrap();
            let ret = fit_plda(&adapt_n, config.plda_iterations).unwrap();
            ret_eer.push(
                score_trials(&Normalizer::None, &ret, &test_n, &data.ood_trials)
                    .unwrap()
                    .eer
                    .unwrap(),
            );
            for (i, &(_, epochs, lr, refresh)) in grid.iter().enumerate() {
                let ad = if epochs == 0 {
                    let mut m = match &norm {
                        Normalizer::Vae(m) => m.clone(),
                        _ => unreachable!(),
                    };
                    let (mean, std) = standardize(&data.ood_adapt.vectors());
                    m.input_mean = mean;
                    m.input_std = std;
                    Normalizer::Vae(m)
                } else {
                    let adapt = AdaptConfig {
                        mode: AdaptMode::Finetune,
                        epochs,
                        batch_size: config.vae_batch_size,
                        learning_rate: lr,
                        seed: derive_seed(seed, if kind == NormKind::Cvae { 8 } else { 7 }),
                        refresh_standardization: refresh,
                    };
                    adapt_normalizer(&norm, &data.ood_adapt, &adapt).unwrap().0
                };
                let rep = gaussianity_report(&ad.apply(&data.ood_all).unwrap()).unwrap();
                let adapt_ad = ad.apply(&data.ood_adapt).unwrap();
                let test_ad = ad.apply(&data.ood_test).unwrap();
                let naret = fit_plda(&adapt_ad, config.plda_iterations).unwrap();
                let eer = score_trials(&Normalizer::None, &naret, &test_ad, &data.ood_trials)
                    .unwrap()
                    .eer
                    .unwrap();
                per_cfg[i].push((rep.mean_abs_skewness, rep.mean_abs_kurtosis, eer));
            }
        }
        let s0 = median(unad.iter().map(|p| p.0).collect());
        let k0 = median(unad.iter().map(|p| p.1).collect());
        let r0 = median(ret_eer.clone());
        println!(
            "{kind:?} unadapted: skew {s0:.4} kurt {k0:.4} | RET EER {:.2}%",
            r0 * 100.0
        );
        for (i, &(label, ..)) in grid.iter().enumerate() {
            let s = median(per_cfg[i].iter().map(|p| p.0).collect());
            let k = median(per_cfg[i].iter().map(|p| p.1).collect());
            let e = median(per_cfg[i].iter().map(|p| p.2).collect());
            let sw = per_cfg[i].iter().zip(&unad).filter(|(a, u)| a.0 < u.0).count();
            let kw = per_cfg[i].iter().zip(&unad).filter(|(a, u)| a.1 < u.1).count();
            let ew = per_cfg[i]
                .iter()
                .zip(&ret_eer)
                .filter(|(a, r)| a.2 < **r)
                .count();
            println!(
                "{kind:?} {label}: skew {s:.4} ({sw}/5) kurt {k:.4} ({kw}/5) NA+RET {:.2}% ({ew}/5 beat RET)",
                e * 100.0
            );
        }
    }
}
