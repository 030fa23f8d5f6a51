//! Flat `key = value` pipeline configuration: one typed struct with desk
//! defaults, strict unknown-key rejection, and a resolved-config emitter
//! whose output parses back to the identical config (the provenance file
//! written next to every experiment's outputs).

use std::collections::HashSet;

use crate::dataio::fmt_f64;
use crate::error::{Error, Result};
use crate::normalizer::NormKind;

/// Experiment row selector: the adaptation applied on top of the IND system.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum AdaptationMode {
    None,
    PldaRet,
    PldaUat,
    NormAdapt,
    NormAdaptPldaRet,
}

impl AdaptationMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            AdaptationMode::None => "none",
            AdaptationMode::PldaRet => "plda-ret",
            AdaptationMode::PldaUat => "plda-uat",
            AdaptationMode::NormAdapt => "norm-adapt",
            AdaptationMode::NormAdaptPldaRet => "norm-adapt+plda-ret",
        }
    }
}

impl std::str::FromStr for AdaptationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<AdaptationMode> {
        match s {
            "none" => Ok(AdaptationMode::None),
            "plda-ret" => Ok(AdaptationMode::PldaRet),
            "plda-uat" => Ok(AdaptationMode::PldaUat),
            "norm-adapt" => Ok(AdaptationMode::NormAdapt),
            "norm-adapt+plda-ret" => Ok(AdaptationMode::NormAdaptPldaRet),
            other => Err(Error::invalid(format!(
                "unknown adaptation mode {other:?} (expected \
                 none|plda-ret|plda-uat|norm-adapt|norm-adapt+plda-ret)"
            ))),
        }
    }
}

/// Restricts the experiment matrix to one column / one row; `All` runs the
/// full table.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SystemFilter {
    All,
    One(NormKind),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdaptFilter {
    All,
    One(AdaptationMode),
}

/// OOD domain-shift selector (the generator's richer `Shift` values are for
/// library use; experiments choose between the realistic default and a
/// no-shift boundary run).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OodShift {
    None,
    Composed,
}

/// Fully-typed experiment configuration; `Default` is the desk preset.
#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub seeds: Vec<u64>,
    pub normalizer: SystemFilter,
    pub adaptation: AdaptFilter,
    // Generator geometry.
    pub dim: usize,
    pub between_rank: usize,
    pub between_scale: f64,
    pub within_scale: f64,
    pub warp_strength: f64,
    pub heavy_tail_dof: f64,
    pub utts_per_speaker: usize,
    // Population sizes and the OOD speaker split.
    pub ind_train_speakers: usize,
    pub ind_test_speakers: usize,
    pub ood_speakers: usize,
    pub ood_adapt_speakers: usize,
    pub ood_test_speakers: usize,
    pub ood_shift: OodShift,
    pub ood_channel_rank: usize,
    pub ood_channel_scale: f64,
    // Normalizers.
    pub latent_dim: usize,
    pub vae_hidden: Vec<usize>,
    pub vae_epochs: usize,
    pub vae_batch_size: usize,
    pub vae_learning_rate: f64,
    pub cohesive_weight: f64,
    pub length_norm: bool,
    // Back-end and adaptation.
    pub plda_iterations: usize,
    pub uat_alpha_within: f64,
    pub uat_alpha_between: f64,
    pub norm_adapt_mode: String,
    pub norm_adapt_epochs: usize,
    pub norm_adapt_learning_rate: f64,
    pub norm_adapt_refresh_standardization: bool,
    // Evaluation.
    pub n_nontarget_trials: usize,
}

impl Default for PipelineConfig {
    fn default() -> PipelineConfig {
        PipelineConfig {
            seeds: vec![1, 2, 3, 4, 5],
            normalizer: SystemFilter::All,
            adaptation: AdaptFilter::All,
            dim: 32,
            between_rank: 8,
            between_scale: 1.4,
            within_scale: 0.7,
            warp_strength: 0.5,
            heavy_tail_dof: 3.0,
            utts_per_speaker: 10,
            ind_train_speakers: 200,
            ind_test_speakers: 66,
            ood_speakers: 73,
            ood_adapt_speakers: 40,
            ood_test_speakers: 33,
            ood_shift: OodShift::Composed,
            ood_channel_rank: 6,
            ood_channel_scale: 2.0,
            latent_dim: 8,
            vae_hidden: vec![64, 64],
            vae_epochs: 50,
            vae_batch_size: 128,
            vae_learning_rate: 1e-3,
            cohesive_weight: 0.1,
            length_norm: false,
            plda_iterations: 10,
            uat_alpha_within: 0.5,
            uat_alpha_between: 0.5,
            norm_adapt_mode: "finetune".to_string(),
            norm_adapt_epochs: 50,
            norm_adapt_learning_rate: 1e-4,
            norm_adapt_refresh_standardization: true,
            n_nontarget_trials: 20_000,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::invalid(format!("bad value {value:?} for key {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(Error::invalid(format!(
            "bad value {other:?} for key {key} (expected true|false)"
        ))),
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value
        .split(',')
        .map(|tok| parse_num(key, tok.trim()))
        .collect()
}

fn fmt_list<T: std::fmt::Display>(items: &[T]) -> String {
    items
        .iter()
        .map(T::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

impl PipelineConfig {
    /// Applies one `key = value` assignment; unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seeds" => self.seeds = parse_list(key, value)?,
            "normalizer" => {
                self.normalizer = if value == "all" {
                    SystemFilter::All
                } else {
                    SystemFilter::One(value.parse()?)
                }
            }
            "adaptation" => {
                self.adaptation = if value == "all" {
                    AdaptFilter::All
                } else {
                    AdaptFilter::One(value.parse()?)
                }
            }
            "dim" => self.dim = parse_num(key, value)?,
            "between_rank" => self.between_rank = parse_num(key, value)?,
            "between_scale" => self.between_scale = parse_num(key, value)?,
            "within_scale" => self.within_scale = parse_num(key, value)?,
            "warp_strength" => self.warp_strength = parse_num(key, value)?,
            "heavy_tail_dof" => {
                self.heavy_tail_dof = if value == "inf" {
                    f64::INFINITY
                } else {
                    parse_num(key, value)?
                }
            }
            "utts_per_speaker" => self.utts_per_speaker = parse_num(key, value)?,
            "ind_train_speakers" => self.ind_train_speakers = parse_num(key, value)?,
            "ind_test_speakers" => self.ind_test_speakers = parse_num(key, value)?,
            "ood_speakers" => self.ood_speakers = parse_num(key, value)?,
            "ood_adapt_speakers" => self.ood_adapt_speakers = parse_num(key, value)?,
            "ood_test_speakers" => self.ood_test_speakers = parse_num(key, value)?,
            "ood_shift" => {
                self.ood_shift = match value {
                    "none" => OodShift::None,
                    "composed" => OodShift::Composed,
                    other => {
                        return Err(Error::invalid(format!(
                            "bad value {other:?} for key ood_shift (expected none|composed)"
                        )));
                    }
                }
            }
            "ood_channel_rank" => self.ood_channel_rank = parse_num(key, value)?,
            "ood_channel_scale" => self.ood_channel_scale = parse_num(key, value)?,
            "latent_dim" => self.latent_dim = parse_num(key, value)?,
            "vae_hidden" => self.vae_hidden = parse_list(key, value)?,
            "vae_epochs" => self.vae_epochs = parse_num(key, value)?,
            "vae_batch_size" => self.vae_batch_size = parse_num(key, value)?,
            "vae_learning_rate" => self.vae_learning_rate = parse_num(key, value)?,
            "cohesive_weight" => self.cohesive_weight = parse_num(key, value)?,
            "length_norm" => self.length_norm = parse_bool(key, value)?,
            "plda_iterations" => self.plda_iterations = parse_num(key, value)?,
            "uat_alpha_within" => self.uat_alpha_within = parse_num(key, value)?,
            "uat_alpha_between" => self.uat_alpha_between = parse_num(key, value)?,
            "norm_adapt_mode" => match value {
                "retrain" | "finetune" => self.norm_adapt_mode = value.to_string(),
                other => {
                    return Err(Error::invalid(format!(
                        "bad value {other:?} for key norm_adapt_mode (expected retrain|finetune)"
                    )));
                }
            },
            "norm_adapt_epochs" => self.norm_adapt_epochs = parse_num(key, value)?,
            "norm_adapt_learning_rate" => {
                self.norm_adapt_learning_rate = parse_num(key, value)?
            }
            "norm_adapt_refresh_standardization" => {
                self.norm_adapt_refresh_standardization = parse_bool(key, value)?
            }
            "n_nontarget_trials" => self.n_nontarget_trials = parse_num(key, value)?,
            other => {
                return Err(Error::invalid(format!("unknown config key {other:?}")));
            }
        }
        Ok(())
    }

    /// Applies a whole `key = value` file on top of the current values.
    /// `#` comments and blank lines are skipped; duplicate keys within one
    /// source are rejected (overriding is for separate sources, file < CLI).
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut seen: HashSet<String> = HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let lineno = i + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::parse_line(lineno, format!("expected `key = value`, found {line:?}"))
            })?;
            let key = key.trim();
            let value = value.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::parse_line(lineno, format!("duplicate key {key:?}")));
            }
            self.set(key, value)
                .map_err(|e| Error::parse_line(lineno, e.to_string()))?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<PipelineConfig> {
        let mut config = PipelineConfig::default();
        config.apply_text(text)?;
        config.validate()?;
        Ok(config)
    }

    /// Every key with its current value, in registry order; parsing the
    /// output reproduces this config exactly.
    pub fn resolved(&self) -> String {
        let normalizer = match self.normalizer {
            SystemFilter::All => "all",
            SystemFilter::One(kind) => kind.as_str(),
        };
        let adaptation = match self.adaptation {
            AdaptFilter::All => "all".to_string(),
            AdaptFilter::One(mode) => mode.as_str().to_string(),
        };
        let dof = if self.heavy_tail_dof.is_infinite() {
            "inf".to_string()
        } else {
            fmt_f64(self.heavy_tail_dof)
        };
        let shift = match self.ood_shift {
            OodShift::None => "none",
            OodShift::Composed => "composed",
        };
        let mut out = String::new();
        let mut put = |k: &str, v: String| out.push_str(&format!("{k} = {v}\n"));
        put("seeds", fmt_list(&self.seeds));
        put("normalizer", normalizer.to_string());
        put("adaptation", adaptation);
        put("dim", self.dim.to_string());
        put("between_rank", self.between_rank.to_string());
        put("between_scale", fmt_f64(self.between_scale));
        put("within_scale", fmt_f64(self.within_scale));
        put("warp_strength", fmt_f64(self.warp_strength));
        put("heavy_tail_dof", dof);
        put("utts_per_speaker", self.utts_per_speaker.to_string());
        put("ind_train_speakers", self.ind_train_speakers.to_string());
        put("ind_test_speakers", self.ind_test_speakers.to_string());
        put("ood_speakers", self.ood_speakers.to_string());
        put("ood_adapt_speakers", self.ood_adapt_speakers.to_string());
        put("ood_test_speakers", self.ood_test_speakers.to_string());
        put("ood_shift", shift.to_string());
        put("ood_channel_rank", self.ood_channel_rank.to_string());
        put("ood_channel_scale", fmt_f64(self.ood_channel_scale));
        put("latent_dim", self.latent_dim.to_string());
        put("vae_hidden", fmt_list(&self.vae_hidden));
        put("vae_epochs", self.vae_epochs.to_string());
        put("vae_batch_size", self.vae_batch_size.to_string());
        put("vae_learning_rate", fmt_f64(self.vae_learning_rate));
        put("cohesive_weight", fmt_f64(self.cohesive_weight));
        put("length_norm", self.length_norm.to_string());
        put("plda_iterations", self.plda_iterations.to_string());
        put("uat_alpha_within", fmt_f64(self.uat_alpha_within));
        put("uat_alpha_between", fmt_f64(self.uat_alpha_between));
        put("norm_adapt_mode", self.norm_adapt_mode.clone());
        put("norm_adapt_epochs", self.norm_adapt_epochs.to_string());
        put(
            "norm_adapt_learning_rate",
            fmt_f64(self.norm_adapt_learning_rate),
        );
        put(
            "norm_adapt_refresh_standardization",
            self.norm_adapt_refresh_standardization.to_string(),
        );
        put("n_nontarget_trials", self.n_nontarget_trials.to_string());
        out
    }

    /// Cross-field checks the per-key parser cannot see.
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::invalid("seeds must list at least one seed"));
        }
        let mut uniq: HashSet<u64> = HashSet::new();
        if !self.seeds.iter().all(|s| uniq.insert(*s)) {
            return Err(Error::invalid("seeds must be distinct"));
        }
        if self.utts_per_speaker < 2 {
            return Err(Error::invalid(
                "utts_per_speaker must be >= 2 (target trials and PLDA both need \
                 repeated utterances)",
            ));
        }
        if self.ind_train_speakers < 2 || self.ind_test_speakers < 2 {
            return Err(Error::invalid("ind populations must have >= 2 speakers"));
        }
        if self.ood_adapt_speakers + self.ood_test_speakers > self.ood_speakers {
            return Err(Error::invalid(format!(
                "ood split {}+{} exceeds ood_speakers {}",
                self.ood_adapt_speakers, self.ood_test_speakers, self.ood_speakers
            )));
        }
        if self.ood_adapt_speakers < 2 || self.ood_test_speakers < 2 {
            return Err(Error::invalid(
                "ood split sizes must be >= 2 (retraining and nontarget trials \
                 need multiple speakers on both sides)",
            ));
        }
        if self.latent_dim == 0 || self.latent_dim > self.dim {
            return Err(Error::invalid(format!(
                "latent_dim must be in 1..={}, got {}",
                self.dim, self.latent_dim
            )));
        }
        for (name, v) in [
            ("uat_alpha_within", self.uat_alpha_within),
            ("uat_alpha_between", self.uat_alpha_between),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(format!("{name} must be in [0, 1]")));
            }
        }
        if !(self.cohesive_weight.is_finite() && self.cohesive_weight >= 0.0) {
            return Err(Error::invalid("cohesive_weight must be finite and >= 0"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_resolved_round_trips_exactly() {
        let config = PipelineConfig::default();
        let text = config.resolved();
        let back = PipelineConfig::parse(&text).unwrap();
        assert_eq!(config, back);
        assert_eq!(text, back.resolved());
    }

    #[test]
    fn overrides_apply_and_round_trip() {
        let text = "\
# comment line
seeds = 7, 8, 9
normalizer = cvae
adaptation = plda-uat
uat_alpha_within = 0
heavy_tail_dof = inf
vae_hidden = 16
length_norm = true
";
        let config = PipelineConfig::parse(text).unwrap();
        assert_eq!(config.seeds, vec![7, 8, 9]);
        assert_eq!(config.normalizer, SystemFilter::One(NormKind::Cvae));
        assert_eq!(config.adaptation, AdaptFilter::One(AdaptationMode::PldaUat));
        assert_eq!(config.uat_alpha_within, 0.0);
        assert!(config.heavy_tail_dof.is_infinite());
        assert_eq!(config.vae_hidden, vec![16]);
        assert!(config.length_norm);
        let back = PipelineConfig::parse(&config.resolved()).unwrap();
        assert_eq!(config, back);
    }

    #[test]
    fn unknown_key_is_rejected_with_line() {
        let err = PipelineConfig::parse("dim = 8\nfrobnicate = 3\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("frobnicate"), "{msg}");
        assert!(msg.contains("line 2"), "{msg}");
    }

    #[test]
    fn duplicate_key_is_rejected() {
        let err = PipelineConfig::parse("dim = 8\ndim = 9\n").unwrap_err();
        assert!(err.to_string().contains("duplicate"), "{err}");
    }

    #[test]
    fn bad_values_are_rejected() {
        for text in [
            "dim = eight\n",
            "length_norm = yes\n",
            "normalizer = qda\n",
            "adaptation = plda-rot\n",
            "ood_shift = affine\n",
            "norm_adapt_mode = full\n",
        ] {
            assert!(PipelineConfig::parse(text).is_err(), "{text:?}");
        }
    }

    #[test]
    fn cross_field_validation() {
        assert!(PipelineConfig::parse("seeds = \n").is_err());
        assert!(PipelineConfig::parse("seeds = 1,1\n").is_err());
        assert!(PipelineConfig::parse("ood_adapt_speakers = 60\nood_test_speakers = 20\n").is_err());
        assert!(PipelineConfig::parse("latent_dim = 40\n").is_err());
        assert!(PipelineConfig::parse("uat_alpha_between = 1.5\n").is_err());
    }

    #[test]
    fn flags_override_file_values() {
        let mut config = PipelineConfig::default();
        config.apply_text("dim = 16\nlatent_dim = 4\n").unwrap();
        // A later source may override keys the file already set.
        config.set("latent_dim", "6").unwrap();
        config.validate().unwrap();
        assert_eq!((config.dim, config.latent_dim), (16, 6));
    }
}
