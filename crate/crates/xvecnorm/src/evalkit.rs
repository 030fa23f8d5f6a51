//! Trial scoring orchestration, EER computation, DET operating points, and
//! Gaussianity diagnostics (per-dimension skewness and excess kurtosis with
//! three aggregation conventions: signed mean, mean of absolute values, and
//! all entries pooled into one scalar distribution).

use std::collections::HashMap;

use crate::dataio::{fmt_f64, EmbeddingSet, ScoreLine, Trial};
use crate::error::{Error, Result};
use crate::normalizer::Normalizer;
use crate::numstats::moments;
use crate::plda::{PldaModel, PldaScorer};

/// One scored trial with its label carried through from the trial list.
#[derive(Clone, Debug, PartialEq)]
pub struct TrialScore {
    pub enroll_utterance_id: String,
    pub test_utterance_id: String,
    pub score: f64,
    pub is_target: Option<bool>,
}

/// One DET operating point: FAR = fraction of nontargets >= threshold,
/// FRR = fraction of targets < threshold.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetPoint {
    pub threshold: f64,
    pub far: f64,
    pub frr: f64,
}

/// Scoring outcome; `eer`, `eer_threshold`, and `det_points` are present only
/// when the trials carry both target and nontarget labels.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreReport {
    pub trial_scores: Vec<TrialScore>,
    pub eer: Option<f64>,
    pub eer_threshold: Option<f64>,
    pub det_points: Vec<DetPoint>,
}

impl ScoreReport {
    /// Per-trial lines in input order, ready for `dataio::write_scores`.
    pub fn score_lines(&self) -> Vec<ScoreLine> {
        self.trial_scores
            .iter()
            .map(|t| ScoreLine {
                enroll_utterance_id: t.enroll_utterance_id.clone(),
                test_utterance_id: t.test_utterance_id.clone(),
                score: t.score,
            })
            .collect()
    }

    /// `metric,value` CSV with trial counts and, when labeled, the EER.
    pub fn metrics_csv(&self) -> String {
        let n_target = self.count_label(Some(true));
        let n_nontarget = self.count_label(Some(false));
        let mut out = String::from("metric,value\n");
        out.push_str(&format!("n_trials,{}\n", self.trial_scores.len()));
        out.push_str(&format!("n_target,{n_target}\n"));
        out.push_str(&format!("n_nontarget,{n_nontarget}\n"));
        if let Some(eer) = self.eer {
            out.push_str(&format!("eer,{}\n", fmt_f64(eer)));
        }
        if let Some(t) = self.eer_threshold {
            out.push_str(&format!("eer_threshold,{}\n", fmt_f64(t)));
        }
        out
    }

    /// `threshold,far,frr` CSV of the DET operating points.
    pub fn det_csv(&self) -> String {
        let mut out = String::from("threshold,far,frr\n");
        for p in &self.det_points {
            out.push_str(&format!(
                "{},{},{}\n",
                fmt_f64(p.threshold),
                fmt_f64(p.far),
                fmt_f64(p.frr)
            ));
        }
        out
    }

    fn count_label(&self, label: Option<bool>) -> usize {
        self.trial_scores
            .iter()
            .filter(|t| t.is_target == label)
            .count()
    }
}

/// Normalizes the embeddings, scores every trial with the PLDA model, and
/// assembles the report; the baseline pipeline is `Normalizer::None`.
pub fn score_trials(
    normalizer: &Normalizer,
    plda: &PldaModel,
    embeddings: &EmbeddingSet,
    trials: &[Trial],
) -> Result<ScoreReport> {
    let normalized = normalizer.apply(embeddings)?;
    if normalized.dim() != plda.dim {
        return Err(Error::invalid(format!(
            "normalized dimension {} does not match plda dimension {}",
            normalized.dim(),
            plda.dim
        )));
    }
    let scorer = PldaScorer::new(plda)?;
    let index: HashMap<&str, usize> = normalized
        .records()
        .iter()
        .enumerate()
        .map(|(i, r)| (r.utterance_id.as_str(), i))
        .collect();
    let resolve = |id: &str| {
        index
            .get(id)
            .copied()
            .ok_or_else(|| Error::invalid(format!("trial references unknown utterance {id:?}")))
    };
    let mut trial_scores = Vec::with_capacity(trials.len());
    for t in trials {
        let e = resolve(&t.enroll_utterance_id)?;
        let s = resolve(&t.test_utterance_id)?;
        let score = scorer.score(
            &normalized.records()[e].vector,
            &normalized.records()[s].vector,
        )?;
        trial_scores.push(TrialScore {
            enroll_utterance_id: t.enroll_utterance_id.clone(),
            test_utterance_id: t.test_utterance_id.clone(),
            score,
            is_target: t.is_target,
        });
    }
    Ok(report_from_scores(trial_scores))
}

/// Builds a report from already-computed trial scores (the `eval` entry for
/// score files written earlier); EER appears only when both classes occur.
pub fn report_from_scores(trial_scores: Vec<TrialScore>) -> ScoreReport {
    let pick = |label: bool| -> Vec<f64> {
        trial_scores
            .iter()
            .filter(|t| t.is_target == Some(label))
            .map(|t| t.score)
            .collect()
    };
    let targets = pick(true);
    let nontargets = pick(false);
    if targets.is_empty() || nontargets.is_empty() {
        return ScoreReport {
            trial_scores,
            eer: None,
            eer_threshold: None,
            det_points: Vec::new(),
        };
    }
    // Nonempty on both sides, so the sweep cannot fail.
    let det_points = operating_points(&targets, &nontargets).unwrap();
    let (eer, eer_threshold) = eer_from_points(&det_points);
    ScoreReport {
        trial_scores,
        eer: Some(eer),
        eer_threshold: Some(eer_threshold),
        det_points,
    }
}

/// DET operating points at every distinct score, in increasing threshold
/// order; FAR is non-increasing and FRR non-decreasing along the sweep.
pub fn operating_points(
    target_scores: &[f64],
    nontarget_scores: &[f64],
) -> Result<Vec<DetPoint>> {
    if target_scores.is_empty() || nontarget_scores.is_empty() {
        return Err(Error::invalid(
            "EER sweep requires nonempty target and nontarget score lists",
        ));
    }
    if target_scores
        .iter()
        .chain(nontarget_scores)
        .any(|s| !s.is_finite())
    {
        return Err(Error::invalid("non-finite score in EER sweep"));
    }
    let mut targets = target_scores.to_vec();
    targets.sort_by(f64::total_cmp);
    let mut nontargets = nontarget_scores.to_vec();
    nontargets.sort_by(f64::total_cmp);
    let mut thresholds: Vec<f64> = targets.iter().chain(&nontargets).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    let nt = nontargets.len() as f64;
    let tg = targets.len() as f64;
    Ok(thresholds
        .into_iter()
        .map(|t| DetPoint {
            threshold: t,
            far: (nontargets.len() - nontargets.partition_point(|&x| x < t)) as f64 / nt,
            frr: targets.partition_point(|&x| x < t) as f64 / tg,
        })
        .collect())
}

/// Equal error rate and its threshold.
///
/// FAR - FRR is non-increasing along the sweep and starts at +1; the crossing
/// is located exactly when it hits an operating point (ties break toward the
/// lower threshold) and by linear interpolation between the two adjacent
/// points otherwise. A sentinel above the top score (FAR 0, FRR 1) covers
/// score sets whose sweep never reaches the crossing. The rate lies in
/// [0, 0.5] for any better-than-chance scorer.
pub fn compute_eer(target_scores: &[f64], nontarget_scores: &[f64]) -> Result<(f64, f64)> {
    let points = operating_points(target_scores, nontarget_scores)?;
    Ok(eer_from_points(&points))
}

fn eer_from_points(points: &[DetPoint]) -> (f64, f64) {
    let last = points[points.len() - 1];
    let sentinel = DetPoint {
        threshold: last.threshold,
        far: 0.0,
        frr: 1.0,
    };
    // points[0] has FAR 1 and FRR 0, so the scan starts strictly above zero.
    let mut prev = points[0];
    for p in points[1..].iter().copied().chain([sentinel]) {
        let diff = p.far - p.frr;
        if diff > 0.0 {
            prev = p;
            continue;
        }
        if diff == 0.0 {
            return (p.far, p.threshold);
        }
        let d0 = prev.far - prev.frr;
        let s = d0 / (d0 - diff);
        let far = prev.far + s * (p.far - prev.far);
        let frr = prev.frr + s * (p.frr - prev.frr);
        let threshold = prev.threshold + s * (p.threshold - prev.threshold);
        return ((far + frr) / 2.0, threshold);
    }
    unreachable!("sentinel has FAR - FRR = -1");
}

/// Gaussianity diagnostics of an embedding set: per-dimension standardized
/// moments plus the three aggregates (signed mean over dimensions, mean of
/// absolute values, and the pooled scalar distribution of all entries).
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianityReport {
    pub skewness: Vec<f64>,
    pub excess_kurtosis: Vec<f64>,
    /// True where a dimension has zero variance (its moments contribute 0).
    pub degenerate: Vec<bool>,
    pub aggregate_skewness: f64,
    pub aggregate_kurtosis: f64,
    pub mean_abs_skewness: f64,
    pub mean_abs_kurtosis: f64,
    pub pooled_skewness: f64,
    pub pooled_kurtosis: f64,
}

impl GaussianityReport {
    /// `metric,value` CSV: aggregates first, then per-dimension rows.
    pub fn csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        out.push_str(&format!("n_dimensions,{}\n", self.skewness.len()));
        out.push_str(&format!(
            "n_degenerate_dimensions,{}\n",
            self.degenerate.iter().filter(|d| **d).count()
        ));
        for (name, v) in [
            ("aggregate_skewness", self.aggregate_skewness),
            ("aggregate_kurtosis", self.aggregate_kurtosis),
            ("mean_abs_skewness", self.mean_abs_skewness),
            ("mean_abs_kurtosis", self.mean_abs_kurtosis),
            ("pooled_skewness", self.pooled_skewness),
            ("pooled_kurtosis", self.pooled_kurtosis),
        ] {
            out.push_str(&format!("{name},{}\n", fmt_f64(v)));
        }
        for (j, s) in self.skewness.iter().enumerate() {
            out.push_str(&format!("skewness_dim_{j},{}\n", fmt_f64(*s)));
        }
        for (j, k) in self.excess_kurtosis.iter().enumerate() {
            out.push_str(&format!("excess_kurtosis_dim_{j},{}\n", fmt_f64(*k)));
        }
        out
    }
}

/// Skewness and excess kurtosis of a scalar sample (0, 0 when degenerate).
fn scalar_skew_kurt(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
    for v in values {
        let c = v - mean;
        let c2 = c * c;
        m2 += c2;
        m3 += c2 * c;
        m4 += c2 * c2;
    }
    m2 /= n;
    m3 /= n;
    m4 /= n;
    if m2 <= 0.0 {
        return (0.0, 0.0);
    }
    (m3 / (m2 * m2.sqrt()), m4 / (m2 * m2) - 3.0)
}

pub fn gaussianity_report(set: &EmbeddingSet) -> Result<GaussianityReport> {
    if set.dim() == 0 {
        return Err(Error::invalid("gaussianity diagnostics require dimension >= 1"));
    }
    if set.len() < 3 {
        return Err(Error::invalid(format!(
            "gaussianity diagnostics require at least 3 vectors, got {}",
            set.len()
        )));
    }
    let m = moments(&set.vectors())?;
    let d = set.dim() as f64;
    let mean_of = |v: &[f64]| v.iter().sum::<f64>() / d;
    let abs: Vec<f64> = m.skewness.iter().map(|s| s.abs()).collect();
    let abs_k: Vec<f64> = m.excess_kurtosis.iter().map(|k| k.abs()).collect();
    let pooled: Vec<f64> = set
        .records()
        .iter()
        .flat_map(|r| r.vector.iter().copied())
        .collect();
    let (pooled_skewness, pooled_kurtosis) = scalar_skew_kurt(&pooled);
    Ok(GaussianityReport {
        aggregate_skewness: mean_of(&m.skewness),
        aggregate_kurtosis: mean_of(&m.excess_kurtosis),
        mean_abs_skewness: mean_of(&abs),
        mean_abs_kurtosis: mean_of(&abs_k),
        pooled_skewness,
        pooled_kurtosis,
        skewness: m.skewness,
        excess_kurtosis: m.excess_kurtosis,
        degenerate: m.degenerate,
    })
}
