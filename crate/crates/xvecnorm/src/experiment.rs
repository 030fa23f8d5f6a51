//! Experiment matrix runner: per seed, generates the desk populations, fits
//! every requested system on IND data, applies each adaptation strategy on
//! the OOD adaptation split, and scores held-out trials; numbers aggregate
//! across seeds as median + IQR. Training never sees OOD test speakers; the
//! audit is a hard assert, not an error return.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use crate::config::{AdaptFilter, AdaptationMode, OodShift, PipelineConfig, SystemFilter};
use crate::dataio::{fmt_f64, EmbeddingRecord, EmbeddingSet};
use crate::error::{Error, Result};
use crate::evalkit::{gaussianity_report, score_trials};
use crate::normalizer::{
    adapt_normalizer, fit_normalizer, length_normalize, NormKind, Normalizer,
};
use crate::plda::{adapt_uat, fit_plda, PldaModel};
use crate::synthgen::{
    derive_seed, generate_domain, make_trials, pair_counts, split_by_speaker, DomainSpec, Shift,
    SplitSpec,
};
use crate::vae_norm::{AdaptConfig, AdaptMode, VaeConfig};

/// Scoring condition identifying one table row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum EerRow {
    IndPlda,
    OodPlda,
    OodPldaRet,
    OodPldaUat,
    OodNormAdapt,
    OodNormAdaptRet,
}

impl EerRow {
    pub fn as_str(self) -> &'static str {
        match self {
            EerRow::IndPlda => "ind/plda",
            EerRow::OodPlda => "ood/plda",
            EerRow::OodPldaRet => "ood/plda-ret",
            EerRow::OodPldaUat => "ood/plda-uat",
            EerRow::OodNormAdapt => "ood/norm-adapt",
            EerRow::OodNormAdaptRet => "ood/norm-adapt+plda-ret",
        }
    }

    fn label(self) -> &'static str {
        match self {
            EerRow::IndPlda => "IND PLDA",
            EerRow::OodPlda => "OOD PLDA",
            EerRow::OodPldaRet => "OOD PLDA-RET",
            EerRow::OodPldaUat => "OOD PLDA-UAT",
            EerRow::OodNormAdapt => "OOD Norm-Adapt",
            EerRow::OodNormAdaptRet => "OOD Norm-Adapt+PLDA-RET",
        }
    }
}

/// Which snapshot of the full OOD set a moment row describes; `Unadapted`
/// under the baseline system is the raw-embedding row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum MomentStage {
    Unadapted,
    Adapted,
}

impl MomentStage {
    pub fn as_str(self) -> &'static str {
        match self {
            MomentStage::Unadapted => "unadapted",
            MomentStage::Adapted => "adapted",
        }
    }
}

/// Per-seed values (in config seed order) with their median and IQR.
#[derive(Clone, Debug, PartialEq)]
pub struct SeedStats {
    pub values: Vec<f64>,
    pub median: f64,
    pub iqr: f64,
}

/// Linear-interpolation quantile on a sorted slice, matching the common
/// `(n - 1) * p` convention.
fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

impl SeedStats {
    fn from_values(values: Vec<f64>) -> SeedStats {
        let mut sorted = values.clone();
        sorted.sort_by(f64::total_cmp);
        let median = quantile(&sorted, 0.5);
        let iqr = quantile(&sorted, 0.75) - quantile(&sorted, 0.25);
        SeedStats {
            values,
            median,
            iqr,
        }
    }
}

pub fn system_label(kind: NormKind) -> &'static str {
    match kind {
        NormKind::None => "baseline",
        other => other.as_str(),
    }
}

fn column_label(kind: NormKind) -> &'static str {
    match kind {
        NormKind::None => "Baseline",
        NormKind::Pca => "PCA",
        NormKind::Lda => "LDA",
        NormKind::Vae => "VAE",
        NormKind::Cvae => "C-VAE",
    }
}

/// Aggregated experiment output; EERs are fractions, moments are means of
/// per-dimension absolute values over the full OOD set.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentResult {
    pub config: PipelineConfig,
    pub systems: Vec<NormKind>,
    pub rows: Vec<EerRow>,
    pub eer: BTreeMap<(EerRow, NormKind), SeedStats>,
    pub abs_skew: BTreeMap<(MomentStage, NormKind), SeedStats>,
    pub abs_kurt: BTreeMap<(MomentStage, NormKind), SeedStats>,
    pub warnings: Vec<String>,
}

/// One seed's worth of table cells.
#[derive(Default)]
struct SeedOutcome {
    eer: BTreeMap<(EerRow, NormKind), f64>,
    abs_skew: BTreeMap<(MomentStage, NormKind), f64>,
    abs_kurt: BTreeMap<(MomentStage, NormKind), f64>,
}

fn systems_for(filter: SystemFilter) -> Vec<NormKind> {
    match filter {
        SystemFilter::All => vec![
            NormKind::None,
            NormKind::Pca,
            NormKind::Lda,
            NormKind::Vae,
            NormKind::Cvae,
        ],
        SystemFilter::One(kind) => vec![kind],
    }
}

/// Adapted rows to run; the unadapted IND and OOD rows are always produced
/// because every comparison is against them.
fn adapted_rows_for(filter: AdaptFilter) -> Vec<EerRow> {
    match filter {
        AdaptFilter::All => vec![EerRow::OodPldaRet, EerRow::OodPldaUat, EerRow::OodNormAdaptRet],
        AdaptFilter::One(AdaptationMode::None) => Vec::new(),
        AdaptFilter::One(AdaptationMode::PldaRet) => vec![EerRow::OodPldaRet],
        AdaptFilter::One(AdaptationMode::PldaUat) => vec![EerRow::OodPldaUat],
        AdaptFilter::One(AdaptationMode::NormAdapt) => vec![EerRow::OodNormAdapt],
        AdaptFilter::One(AdaptationMode::NormAdaptPldaRet) => vec![EerRow::OodNormAdaptRet],
    }
}

fn domain_spec(config: &PipelineConfig, n_speakers: usize, seed: u64, ood: bool) -> DomainSpec {
    DomainSpec {
        dim: config.dim,
        n_speakers,
        utts_per_speaker: config.utts_per_speaker,
        between_scale: config.between_scale,
        within_scale: config.within_scale,
        warp_strength: config.warp_strength,
        shift: match (ood, config.ood_shift) {
            (true, OodShift::Composed) => Shift::Composed,
            _ => Shift::None,
        },
        heavy_tail_dof: config.heavy_tail_dof,
        seed,
        between_rank: config.between_rank,
        channel_rank: if ood { config.ood_channel_rank } else { 0 },
        channel_scale: if ood { config.ood_channel_scale } else { 0.0 },
    }
}

/// Domain prefix on every id so an IND speaker can never alias an OOD one
/// and the disjointness audit is a plain string check.
fn prefix_ids(set: &EmbeddingSet, prefix: &str) -> EmbeddingSet {
    let records = set
        .records()
        .iter()
        .map(|r| EmbeddingRecord {
            utterance_id: format!("{prefix}-{}", r.utterance_id),
            speaker_id: format!("{prefix}-{}", r.speaker_id),
            vector: r.vector.clone(),
        })
        .collect();
    EmbeddingSet::from_records(set.dim(), records).expect("relabeling preserves shape")
}

fn audit_no_test_speakers(train: &EmbeddingSet, held_out: &HashSet<String>, what: &str) {
    for s in train.speakers() {
        assert!(
            !held_out.contains(&s),
            "{what} would train on held-out OOD test speaker {s:?}"
        );
    }
}

/// Normalize and, when enabled, length-normalize: the exact representation
/// both PLDA training and scoring operate on.
fn project(
    norm: &Normalizer,
    set: &EmbeddingSet,
    config: &PipelineConfig,
) -> Result<EmbeddingSet> {
    let out = norm.apply(set)?;
    Ok(if config.length_norm {
        length_normalize(&out)
    } else {
        out
    })
}

fn trials_for(
    set: &EmbeddingSet,
    config: &PipelineConfig,
    seed: u64,
) -> Result<Vec<crate::dataio::Trial>> {
    let (same, cross) = pair_counts(set);
    if same == 0 {
        return Err(Error::invalid(
            "evaluation set has no same-speaker pairs to use as target trials",
        ));
    }
    make_trials(set, same, config.n_nontarget_trials.min(cross), seed)
}

fn eer_of(
    norm_kind: &'static str,
    plda: &PldaModel,
    set: &EmbeddingSet,
    trials: &[crate::dataio::Trial],
) -> Result<f64> {
    // `set` is already projected; scoring applies no further transform.
    let report = score_trials(&Normalizer::None, plda, set, trials)?;
    report.eer.ok_or_else(|| {
        Error::invalid(format!("trials for {norm_kind} produced no operating point"))
    })
}

fn moment_pair(set: &EmbeddingSet) -> Result<(f64, f64)> {
    let report = gaussianity_report(set)?;
    Ok((report.mean_abs_skewness, report.mean_abs_kurtosis))
}

/// One seed's populations and trial lists; `gen` writes exactly these, so a
/// file-based pipeline sees the same data as an experiment replica.
pub struct DeskData {
    pub ind_train: EmbeddingSet,
    pub ind_test: EmbeddingSet,
    pub ood_all: EmbeddingSet,
    pub ood_adapt: EmbeddingSet,
    pub ood_test: EmbeddingSet,
    pub ind_trials: Vec<crate::dataio::Trial>,
    pub ood_trials: Vec<crate::dataio::Trial>,
}

/// Seed streams: 0-2 domains, 3-4 trials (5-8 are reserved for VAE/C-VAE
/// training and adaptation).
pub fn generate_desk(config: &PipelineConfig, seed: u64) -> Result<DeskData> {
    config.validate()?;
    let ind_train = prefix_ids(
        &generate_domain(&domain_spec(
            config,
            config.ind_train_speakers,
            derive_seed(seed, 0),
            false,
        ))?,
        "ind",
    );
    let ind_test = prefix_ids(
        &generate_domain(&domain_spec(
            config,
            config.ind_test_speakers,
            derive_seed(seed, 1),
            false,
        ))?,
        "ind-eval",
    );
    let ood_all = prefix_ids(
        &generate_domain(&domain_spec(
            config,
            config.ood_speakers,
            derive_seed(seed, 2),
            true,
        ))?,
        "ood",
    );
    let (ood_adapt, ood_test) = split_by_speaker(
        &ood_all,
        &SplitSpec {
            adaptation_speakers: config.ood_adapt_speakers,
            test_speakers: config.ood_test_speakers,
        },
    )?;
    let ind_trials = trials_for(&ind_test, config, derive_seed(seed, 3))?;
    let ood_trials = trials_for(&ood_test, config, derive_seed(seed, 4))?;
    Ok(DeskData {
        ind_train,
        ind_test,
        ood_all,
        ood_adapt,
        ood_test,
        ind_trials,
        ood_trials,
    })
}

fn run_seed(config: &PipelineConfig, seed: u64) -> Result<SeedOutcome> {
    let systems = systems_for(config.normalizer);
    let adapted_rows = adapted_rows_for(config.adaptation);
    let needs_norm_adapt = adapted_rows
        .iter()
        .any(|r| matches!(r, EerRow::OodNormAdapt | EerRow::OodNormAdaptRet));

    let DeskData {
        ind_train,
        ind_test,
        ood_all,
        ood_adapt,
        ood_test,
        ind_trials,
        ood_trials,
    } = generate_desk(config, seed)?;
    let held_out: HashSet<String> = ood_test.speakers().into_iter().collect();
    audit_no_test_speakers(&ind_train, &held_out, "ind fit");
    audit_no_test_speakers(&ood_adapt, &held_out, "ood adaptation");

    let mut out = SeedOutcome::default();
    for kind in systems {
        let vae_config = VaeConfig {
            latent_dim: config.latent_dim,
            hidden: config.vae_hidden.clone(),
            epochs: config.vae_epochs,
            batch_size: config.vae_batch_size,
            learning_rate: config.vae_learning_rate,
            cohesive_weight: config.cohesive_weight,
            seed: derive_seed(seed, if kind == NormKind::Cvae { 6 } else { 5 }),
        };
        let (norm, _) = fit_normalizer(kind, &ind_train, config.latent_dim, &vae_config)?;

        let ind_train_n = project(&norm, &ind_train, config)?;
        let plda = fit_plda(&ind_train_n, config.plda_iterations)?;

        let ind_test_n = project(&norm, &ind_test, config)?;
        out.eer.insert(
            (EerRow::IndPlda, kind),
            eer_of(kind.as_str(), &plda, &ind_test_n, &ind_trials)?,
        );

        let ood_test_n = project(&norm, &ood_test, config)?;
        out.eer.insert(
            (EerRow::OodPlda, kind),
            eer_of(kind.as_str(), &plda, &ood_test_n, &ood_trials)?,
        );

        let ood_all_n = project(&norm, &ood_all, config)?;
        let (skew, kurt) = moment_pair(&ood_all_n)?;
        out.abs_skew.insert((MomentStage::Unadapted, kind), skew);
        out.abs_kurt.insert((MomentStage::Unadapted, kind), kurt);

        let ood_adapt_n = project(&norm, &ood_adapt, config)?;
        for row in &adapted_rows {
            match row {
                EerRow::OodPldaRet => {
                    let ret = fit_plda(&ood_adapt_n, config.plda_iterations)?;
                    out.eer.insert(
                        (EerRow::OodPldaRet, kind),
                        eer_of(kind.as_str(), &ret, &ood_test_n, &ood_trials)?,
                    );
                }
                EerRow::OodPldaUat => {
                    let uat = adapt_uat(
                        &plda,
                        &ood_adapt_n.unlabeled(),
                        config.uat_alpha_within,
                        config.uat_alpha_between,
                    )?;
                    out.eer.insert(
                        (EerRow::OodPldaUat, kind),
                        eer_of(kind.as_str(), &uat, &ood_test_n, &ood_trials)?,
                    );
                }
                _ => {}
            }
        }

        if needs_norm_adapt {
            let adapt_config = AdaptConfig {
                mode: if config.norm_adapt_mode == "retrain" {
                    AdaptMode::Retrain
                } else {
                    AdaptMode::Finetune
                },
                epochs: config.norm_adapt_epochs,
                batch_size: config.vae_batch_size,
                learning_rate: config.norm_adapt_learning_rate,
                seed: derive_seed(seed, if kind == NormKind::Cvae { 8 } else { 7 }),
                refresh_standardization: config.norm_adapt_refresh_standardization,
            };
            let (norm_ad, _) = adapt_normalizer(&norm, &ood_adapt, &adapt_config)?;
            let ood_test_ad = project(&norm_ad, &ood_test, config)?;
            if kind != NormKind::None {
                let ood_all_ad = project(&norm_ad, &ood_all, config)?;
                let (skew, kurt) = moment_pair(&ood_all_ad)?;
                out.abs_skew.insert((MomentStage::Adapted, kind), skew);
                out.abs_kurt.insert((MomentStage::Adapted, kind), kurt);
            }
            for row in &adapted_rows {
                match row {
                    EerRow::OodNormAdapt => {
                        out.eer.insert(
                            (EerRow::OodNormAdapt, kind),
                            eer_of(kind.as_str(), &plda, &ood_test_ad, &ood_trials)?,
                        );
                    }
                    EerRow::OodNormAdaptRet => {
                        let ood_adapt_ad = project(&norm_ad, &ood_adapt, config)?;
                        let ret = fit_plda(&ood_adapt_ad, config.plda_iterations)?;
                        out.eer.insert(
                            (EerRow::OodNormAdaptRet, kind),
                            eer_of(kind.as_str(), &ret, &ood_test_ad, &ood_trials)?,
                        );
                    }
                    _ => {}
                }
            }
        }
    }
    Ok(out)
}

/// Runs the configured matrix over every seed and aggregates.
pub fn run_experiment(config: &PipelineConfig) -> Result<ExperimentResult> {
    config.validate()?;
    let systems = systems_for(config.normalizer);
    let mut rows = vec![EerRow::IndPlda, EerRow::OodPlda];
    rows.extend(adapted_rows_for(config.adaptation));

    let mut warnings = Vec::new();
    if config.seeds.len() < 5 {
        warnings.push(format!(
            "medians over {} seed(s) are noisy; headline numbers should use >= 5 seeds",
            config.seeds.len()
        ));
    }

    let outcomes = config
        .seeds
        .iter()
        .map(|&s| run_seed(config, s))
        .collect::<Result<Vec<_>>>()?;

    // Every seed produces the same cell set, so the first outcome's keys
    // enumerate the table.
    fn aggregate<K: Ord + Copy>(
        outcomes: &[SeedOutcome],
        get: impl Fn(&SeedOutcome) -> &BTreeMap<K, f64>,
    ) -> BTreeMap<K, SeedStats> {
        get(&outcomes[0])
            .keys()
            .map(|key| {
                let values = outcomes.iter().map(|o| get(o)[key]).collect();
                (*key, SeedStats::from_values(values))
            })
            .collect()
    }
    Ok(ExperimentResult {
        config: config.clone(),
        systems,
        rows,
        eer: aggregate(&outcomes, |o| &o.eer),
        abs_skew: aggregate(&outcomes, |o| &o.abs_skew),
        abs_kurt: aggregate(&outcomes, |o| &o.abs_kurt),
        warnings,
    })
}

impl ExperimentResult {
    /// Long-format CSV: one line per seed value plus median/iqr lines.
    pub fn csv(&self) -> String {
        let mut out = String::from("table,row,system,metric,seed,value\n");
        let seeds = &self.config.seeds;
        let mut push = |table: &str, row: &str, system: &str, metric: &str, stats: &SeedStats| {
            for (s, v) in seeds.iter().zip(&stats.values) {
                out.push_str(&format!("{table},{row},{system},{metric},{s},{}\n", fmt_f64(*v)));
            }
            out.push_str(&format!(
                "{table},{row},{system},{metric},median,{}\n",
                fmt_f64(stats.median)
            ));
            out.push_str(&format!(
                "{table},{row},{system},{metric},iqr,{}\n",
                fmt_f64(stats.iqr)
            ));
        };
        for ((row, kind), stats) in &self.eer {
            push("eer", row.as_str(), system_label(*kind), "eer", stats);
        }
        for ((stage, kind), stats) in &self.abs_skew {
            push("moments", stage.as_str(), system_label(*kind), "abs_skew", stats);
        }
        for ((stage, kind), stats) in &self.abs_kurt {
            push("moments", stage.as_str(), system_label(*kind), "abs_kurt", stats);
        }
        out
    }

    /// Human-readable tables; EERs as percents, medians with IQR in
    /// parentheses.
    pub fn markdown(&self) -> String {
        let pct = |s: &SeedStats| format!("{:.2} ({:.2})", 100.0 * s.median, 100.0 * s.iqr);
        let raw = |s: &SeedStats| format!("{:.3} ({:.3})", s.median, s.iqr);
        let seeds = self
            .config
            .seeds
            .iter()
            .map(u64::to_string)
            .collect::<Vec<_>>()
            .join(", ");
        let mut out = String::from("# Experiment results\n\n");
        out.push_str(&format!(
            "Seeds: {seeds}. Cells are medians over seeds with IQR in parentheses.\n\n"
        ));
        for w in &self.warnings {
            out.push_str(&format!("> warning: {w}\n\n"));
        }

        out.push_str("## EER (%) by condition and system\n\n");
        out.push_str("| Condition |");
        for kind in &self.systems {
            out.push_str(&format!(" {} |", column_label(*kind)));
        }
        out.push_str("\n|---|");
        out.push_str(&"---|".repeat(self.systems.len()));
        out.push('\n');
        for row in &self.rows {
            out.push_str(&format!("| {} |", row.label()));
            for kind in &self.systems {
                match self.eer.get(&(*row, *kind)) {
                    Some(stats) => out.push_str(&format!(" {} |", pct(stats))),
                    None => out.push_str(" - |"),
                }
            }
            out.push('\n');
        }

        out.push_str(
            "\n## Gaussianity of the full OOD set (mean |skew| / mean |excess kurtosis|)\n\n",
        );
        out.push_str("| System | Unadapted | Adapted |\n|---|---|---|\n");
        for kind in &self.systems {
            let label = if *kind == NormKind::None {
                "raw"
            } else {
                system_label(*kind)
            };
            out.push_str(&format!("| {label} |"));
            for stage in [MomentStage::Unadapted, MomentStage::Adapted] {
                match (
                    self.abs_skew.get(&(stage, *kind)),
                    self.abs_kurt.get(&(stage, *kind)),
                ) {
                    (Some(s), Some(k)) => out.push_str(&format!(" {} / {} |", raw(s), raw(k))),
                    _ => out.push_str(" - |"),
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Runs the experiment and writes `results.csv`, `results.md`, and the
/// resolved config next to them.
pub fn run_experiment_to_dir(
    config: &PipelineConfig,
    out_dir: impl AsRef<Path>,
) -> Result<ExperimentResult> {
    let out_dir = out_dir.as_ref();
    let result = run_experiment(config)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    for (name, text) in [
        ("results.csv", result.csv()),
        ("results.md", result.markdown()),
        ("config.resolved", config.resolved()),
    ] {
        let path = out_dir.join(name);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    Ok(result)
}
