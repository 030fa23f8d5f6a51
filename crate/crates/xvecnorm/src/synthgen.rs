//! Synthetic embedding populations with controllable domain shift.
//!
//! Speaker means live on a fixed orthonormal manifold (shared across domains
//! so a shifted domain is the same task, not a new one), within-speaker noise
//! is a per-speaker t scale mixture normalized to unit variance, and the
//! population is made non-Gaussian by an elementwise cubic warp. Domains can
//! add low-rank per-utterance channel offsets (before the warp) and an
//! affine/nonlinear shift (after it). Shift parameters and the channel
//! subspace are fixed per shape, like the manifold, so one out-of-domain
//! condition exists and seeds only resample from it; all sampling flows from
//! the spec seed through splitmix64-derived per-speaker substreams.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Gamma, StandardNormal};

use crate::dataio::{EmbeddingRecord, EmbeddingSet, Trial};
use crate::error::{Error, Result};
use crate::numstats::{dot, sym_eig, Matrix};

/// Constant stream for the structural draws (speaker-manifold basis, channel
/// subspace, composed-shift parameters); deliberately independent of the
/// domain seed so every domain of a given shape shares one geometry and seeds
/// vary only the sampled speakers and utterances.
const GEOMETRY_SEED: u64 = 424242;

/// Composed-shift constants: rotation size, per-dimension scale range, bias
/// scale, and the trailing nonlinear strength.
const ROTATION_TAU: f64 = 0.4;
// Scales stay >= 1 so the mismatch is variance-adding, as with real channel
// or corpus changes; inflate-only covariance adaptation then has purchase.
const SCALE_RANGE: (f64, f64) = (1.0, 2.0);
const BIAS_SCALE: f64 = 1.0;
const COMPOSED_NONLINEAR: f64 = 1.0;

/// Largest enumerable cross-pair population; beyond it nontarget trials are
/// rejection-sampled instead of shuffled.
const ENUMERATE_LIMIT: usize = 200_000;

/// splitmix64 step: the standard 64-bit seeding mixer (stable across
/// releases, unlike the std hasher).
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Decorrelated child seed for a numbered substream.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut state = seed;
    let mixed = splitmix64(&mut state);
    state = mixed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    splitmix64(&mut state)
}

/// Domain shift applied after the warp.
#[derive(Clone, Debug, PartialEq)]
pub enum Shift {
    None,
    /// x -> a x + b; `a` must be invertible (condition number < 1e6).
    Affine { a: Matrix, b: Vec<f64> },
    /// x -> x + strength * x^2 / (1 + |x|) elementwise (skew-injecting).
    Nonlinear { strength: f64 },
    /// Bounded random rotation, per-dimension scale in [1, 2], unit-scale
    /// Gaussian bias, then nonlinear strength 0.5; parameters come from the
    /// fixed geometry stream, so this is one concrete condition, not a family.
    /// The out-of-domain default.
    Composed,
}

/// Full recipe for one synthetic domain.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainSpec {
    pub dim: usize,
    pub n_speakers: usize,
    pub utts_per_speaker: usize,
    /// Speaker-mean spread along the manifold.
    pub between_scale: f64,
    pub within_scale: f64,
    /// Elementwise warp x -> x + w * x^3 / (1 + x^2); 0 keeps the population
    /// Gaussian.
    pub warp_strength: f64,
    pub shift: Shift,
    /// Within-noise t-distribution degrees of freedom (> 2); infinity means
    /// Gaussian noise.
    pub heavy_tail_dof: f64,
    pub seed: u64,
    /// Rank of the speaker-mean subspace; `dim` (the default choice) makes
    /// the between-speaker covariance isotropic.
    pub between_rank: usize,
    /// Per-utterance offsets in a fixed random subspace, added before the
    /// warp; rank 0 disables them.
    pub channel_rank: usize,
    pub channel_scale: f64,
}

impl DomainSpec {
    /// In-domain desk population: 32-dim embeddings, rank-8 speaker manifold,
    /// heavy tails and warp but no shift or channel.
    pub fn desk_ind(seed: u64) -> DomainSpec {
        DomainSpec {
            dim: 32,
            n_speakers: 200,
            utts_per_speaker: 10,
            between_scale: 1.4,
            within_scale: 0.7,
            warp_strength: 0.5,
            shift: Shift::None,
            heavy_tail_dof: 3.0,
            seed,
            between_rank: 8,
            channel_rank: 0,
            channel_scale: 0.0,
        }
    }

    /// Held-out in-domain evaluation population.
    pub fn desk_ind_test(seed: u64) -> DomainSpec {
        DomainSpec {
            n_speakers: 66,
            ..DomainSpec::desk_ind(seed)
        }
    }

    /// Out-of-domain desk population: same manifold, plus rank-6 channel
    /// offsets and the composed shift.
    pub fn desk_ood(seed: u64) -> DomainSpec {
        DomainSpec {
            n_speakers: 73,
            shift: Shift::Composed,
            channel_rank: 6,
            channel_scale: 2.0,
            ..DomainSpec::desk_ind(seed)
        }
    }

    fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.n_speakers == 0 || self.utts_per_speaker == 0 {
            return Err(Error::invalid(
                "dim, n_speakers, and utts_per_speaker must all be >= 1",
            ));
        }
        for (name, v) in [
            ("between_scale", self.between_scale),
            ("within_scale", self.within_scale),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(format!("{name} must be finite and > 0")));
            }
        }
        if !(self.warp_strength.is_finite() && self.warp_strength >= 0.0) {
            return Err(Error::invalid("warp_strength must be finite and >= 0"));
        }
        if !(self.heavy_tail_dof > 2.0) {
            return Err(Error::invalid("heavy_tail_dof must be > 2"));
        }
        if self.between_rank == 0 || self.between_rank > self.dim {
            return Err(Error::invalid(format!(
                "between_rank must be in 1..={}, got {}",
                self.dim, self.between_rank
            )));
        }
        if self.channel_rank > self.dim {
            return Err(Error::invalid(format!(
                "channel_rank must be <= dim {}, got {}",
                self.dim, self.channel_rank
            )));
        }
        if !(self.channel_scale.is_finite() && self.channel_scale >= 0.0) {
            return Err(Error::invalid("channel_scale must be finite and >= 0"));
        }
        if let Shift::Nonlinear { strength } = self.shift {
            if !strength.is_finite() {
                return Err(Error::invalid("nonlinear shift strength must be finite"));
            }
        }
        Ok(())
    }
}

/// Speaker-disjoint adaptation/test partition sizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitSpec {
    pub adaptation_speakers: usize,
    pub test_speakers: usize,
}

fn gaussian_vec(rng: &mut ChaCha20Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Modified Gram-Schmidt on the given columns; Gaussian draws are full rank
/// almost surely, so a tiny pivot is a numeric failure.
fn orthonormalize(cols: &mut [Vec<f64>]) -> Result<()> {
    for i in 0..cols.len() {
        let (done, rest) = cols.split_at_mut(i);
        let col = &mut rest[0];
        for prev in done.iter() {
            let proj = dot(col, prev);
            for (c, p) in col.iter_mut().zip(prev) {
                *c -= proj * p;
            }
        }
        let norm = dot(col, col).sqrt();
        if norm < 1e-8 {
            return Err(Error::numeric("degenerate basis draw in Gram-Schmidt"));
        }
        for c in col.iter_mut() {
            *c /= norm;
        }
    }
    Ok(())
}

/// d x rank matrix with orthonormal columns drawn from `seed`.
fn random_basis(dim: usize, rank: usize, seed: u64) -> Result<Matrix> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut cols: Vec<Vec<f64>> = (0..rank).map(|_| gaussian_vec(&mut rng, dim)).collect();
    orthonormalize(&mut cols)?;
    let mut m = Matrix::zeros(dim, rank);
    for (c, col) in cols.iter().enumerate() {
        for (r, v) in col.iter().enumerate() {
            m[(r, c)] = *v;
        }
    }
    Ok(m)
}

/// Resolved shift: optional affine part followed by a nonlinear strength.
struct ShiftOp {
    affine: Option<(Matrix, Vec<f64>)>,
    nonlinear: f64,
}

impl ShiftOp {
    fn build(shift: &Shift, dim: usize, seed: u64) -> Result<ShiftOp> {
        match shift {
            Shift::None => Ok(ShiftOp {
                affine: None,
                nonlinear: 0.0,
            }),
            Shift::Nonlinear { strength } => Ok(ShiftOp {
                affine: None,
                nonlinear: *strength,
            }),
            Shift::Affine { a, b } => {
                if a.rows() != dim || a.cols() != dim || b.len() != dim {
                    return Err(Error::invalid(format!(
                        "affine shift must be {dim}x{dim} with a length-{dim} bias"
                    )));
                }
                let gram = a.transpose().matmul(a);
                let (vals, _) = sym_eig(&gram)?;
                let (max, min) = (vals[0], vals[vals.len() - 1]);
                if min <= 0.0 || (max / min).sqrt() >= 1e6 {
                    return Err(Error::invalid(
                        "affine shift matrix must have condition number < 1e6",
                    ));
                }
                Ok(ShiftOp {
                    affine: Some((a.clone(), b.clone())),
                    nonlinear: 0.0,
                })
            }
            Shift::Composed => {
                let mut rng = ChaCha20Rng::seed_from_u64(seed);
                // Rotation near the identity: Q from QR(I + tau G / sqrt(d)).
                let mut cols: Vec<Vec<f64>> = (0..dim)
                    .map(|c| {
                        let mut col = gaussian_vec(&mut rng, dim);
                        let t = ROTATION_TAU / (dim as f64).sqrt();
                        for v in col.iter_mut() {
                            *v *= t;
                        }
                        col[c] += 1.0;
                        col
                    })
                    .collect();
                orthonormalize(&mut cols)?;
                let scales: Vec<f64> = (0..dim)
                    .map(|_| rng.random_range(SCALE_RANGE.0..SCALE_RANGE.1))
                    .collect();
                // Row i of A = scale_i * row i of Q.
                let mut a = Matrix::zeros(dim, dim);
                for (c, col) in cols.iter().enumerate() {
                    for (r, v) in col.iter().enumerate() {
                        a[(r, c)] = scales[r] * v;
                    }
                }
                let b: Vec<f64> = gaussian_vec(&mut rng, dim)
                    .into_iter()
                    .map(|v| BIAS_SCALE * v)
                    .collect();
                Ok(ShiftOp {
                    affine: Some((a, b)),
                    nonlinear: COMPOSED_NONLINEAR,
                })
            }
        }
    }

    fn apply(&self, x: &mut Vec<f64>) {
        if let Some((a, b)) = &self.affine {
            let mut y = a.matvec(x);
            for (yi, bi) in y.iter_mut().zip(b) {
                *yi += bi;
            }
            *x = y;
        }
        if self.nonlinear != 0.0 {
            for v in x.iter_mut() {
                *v += self.nonlinear * *v * *v / (1.0 + v.abs());
            }
        }
    }
}

/// Generates one labeled domain according to the spec.
///
/// Per speaker s (substream `derive_seed(derive_seed(seed, 3), s)`): mean =
/// between_scale * U z with z standard normal on the manifold; a chi-square
/// scale g makes the within-noise t-distributed with the configured dof,
/// normalized to unit variance so the total covariance is dof-independent;
/// utterances add channel offsets before the warp and the shift after it.
pub fn generate_domain(spec: &DomainSpec) -> Result<EmbeddingSet> {
    spec.validate()?;
    let d = spec.dim;
    let basis = random_basis(d, spec.between_rank, GEOMETRY_SEED)?;
    let channel = if spec.channel_rank > 0 && spec.channel_scale > 0.0 {
        Some(random_basis(
            d,
            spec.channel_rank,
            derive_seed(GEOMETRY_SEED, 1),
        )?)
    } else {
        None
    };
    let shift = ShiftOp::build(&spec.shift, d, derive_seed(GEOMETRY_SEED, 2))?;
    let speaker_base = derive_seed(spec.seed, 3);
    let dof = spec.heavy_tail_dof;
    let chi2 = if dof.is_finite() {
        Some(Gamma::new(dof / 2.0, 2.0).map_err(|e| Error::numeric(e.to_string()))?)
    } else {
        None
    };

    let mut records = Vec::with_capacity(spec.n_speakers * spec.utts_per_speaker);
    for s in 0..spec.n_speakers {
        let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(speaker_base, s as u64));
        let z = gaussian_vec(&mut rng, spec.between_rank);
        let mean: Vec<f64> = basis
            .matvec(&z)
            .into_iter()
            .map(|v| spec.between_scale * v)
            .collect();
        // Unit-variance t mixture: Var(z/sqrt(g)) = dof/(dof-2), cancelled
        // by the leading factor.
        let within = match &chi2 {
            Some(g) => {
                let scale = (rng.sample(*g) / dof).max(1e-12);
                spec.within_scale * ((dof - 2.0) / dof).sqrt() / scale.sqrt()
            }
            None => spec.within_scale,
        };
        let speaker_id = format!("s{s:04}");
        for u in 0..spec.utts_per_speaker {
            let mut x: Vec<f64> = gaussian_vec(&mut rng, d)
                .into_iter()
                .zip(&mean)
                .map(|(e, m)| m + within * e)
                .collect();
            if let Some(v) = &channel {
                let coeffs = gaussian_vec(&mut rng, spec.channel_rank);
                for (xi, ci) in x.iter_mut().zip(v.matvec(&coeffs)) {
                    *xi += spec.channel_scale * ci;
                }
            }
            if spec.warp_strength > 0.0 {
                for v in x.iter_mut() {
                    *v += spec.warp_strength * *v * *v * *v / (1.0 + *v * *v);
                }
            }
            shift.apply(&mut x);
            records.push(EmbeddingRecord {
                utterance_id: format!("{speaker_id}-u{u:02}"),
                speaker_id: speaker_id.clone(),
                vector: x,
            });
        }
    }
    EmbeddingSet::from_records(d, records)
}

/// Splits by speaker in first-appearance order: the first
/// `adaptation_speakers` go to adaptation, the next `test_speakers` to test.
pub fn split_by_speaker(
    set: &EmbeddingSet,
    split: &SplitSpec,
) -> Result<(EmbeddingSet, EmbeddingSet)> {
    let speakers = set.speakers();
    if !set.is_labeled() {
        return Err(Error::invalid("split_by_speaker requires a labeled set"));
    }
    let want = split.adaptation_speakers + split.test_speakers;
    if want > speakers.len() {
        return Err(Error::invalid(format!(
            "split wants {want} speakers, set has {}",
            speakers.len()
        )));
    }
    let adapt: HashSet<&str> = speakers[..split.adaptation_speakers]
        .iter()
        .map(String::as_str)
        .collect();
    let test: HashSet<&str> = speakers[split.adaptation_speakers..want]
        .iter()
        .map(String::as_str)
        .collect();
    Ok((
        set.filter_speakers(|s| adapt.contains(s)),
        set.filter_speakers(|s| test.contains(s)),
    ))
}

/// Same-speaker and cross-speaker unordered pair counts (the achievable
/// maxima for `make_trials`).
pub fn pair_counts(set: &EmbeddingSet) -> (usize, usize) {
    let mut per_speaker: Vec<usize> = Vec::new();
    let mut index: std::collections::HashMap<&str, usize> = std::collections::HashMap::new();
    for r in set.records() {
        match index.get(r.speaker_id.as_str()) {
            Some(&i) => per_speaker[i] += 1,
            None => {
                index.insert(r.speaker_id.as_str(), per_speaker.len());
                per_speaker.push(1);
            }
        }
    }
    let same: usize = per_speaker.iter().map(|n| n * (n - 1) / 2).sum();
    let n = set.len();
    (same, n * (n - 1) / 2 - same)
}

/// Uniform without-replacement target and nontarget trials; enroll and test
/// utterances always differ, targets come first, and the list is fully
/// determined by the seed.
pub fn make_trials(
    set: &EmbeddingSet,
    n_target: usize,
    n_nontarget: usize,
    seed: u64,
) -> Result<Vec<Trial>> {
    if !set.is_labeled() || set.is_empty() {
        return Err(Error::invalid(
            "make_trials requires a nonempty, fully labeled set",
        ));
    }
    let (max_same, max_cross) = pair_counts(set);
    if n_target > max_same {
        return Err(Error::invalid(format!(
            "requested {n_target} target trials, only {max_same} same-speaker pairs exist"
        )));
    }
    if n_nontarget > max_cross {
        return Err(Error::invalid(format!(
            "requested {n_nontarget} nontarget trials, only {max_cross} cross-speaker pairs exist"
        )));
    }
    let records = set.records();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let trial = |i: usize, j: usize, is_target: bool| Trial {
        enroll_utterance_id: records[i].utterance_id.clone(),
        test_utterance_id: records[j].utterance_id.clone(),
        is_target: Some(is_target),
    };

    let mut same: Vec<(usize, usize)> = Vec::with_capacity(max_same);
    for i in 0..records.len() {
        for j in (i + 1)..records.len() {
            if records[i].speaker_id == records[j].speaker_id {
                same.push((i, j));
            }
        }
    }
    let (picked, _) = same.partial_shuffle(&mut rng, n_target);
    let mut trials: Vec<Trial> = picked.iter().map(|&(i, j)| trial(i, j, true)).collect();

    if max_cross <= ENUMERATE_LIMIT {
        let mut cross: Vec<(usize, usize)> = Vec::with_capacity(max_cross);
        for i in 0..records.len() {
            for j in (i + 1)..records.len() {
                if records[i].speaker_id != records[j].speaker_id {
                    cross.push((i, j));
                }
            }
        }
        let (picked, _) = cross.partial_shuffle(&mut rng, n_nontarget);
        trials.extend(picked.iter().map(|&(i, j)| trial(i, j, false)));
    } else {
        // Far more pairs than requests: rejection sampling with dedupe.
        let mut seen: HashSet<(usize, usize)> = HashSet::with_capacity(n_nontarget);
        while seen.len() < n_nontarget {
            let i = rng.random_range(0..records.len());
            let j = rng.random_range(0..records.len());
            if i == j || records[i].speaker_id == records[j].speaker_id {
                continue;
            }
            let key = (i.min(j), i.max(j));
            if seen.insert(key) {
                trials.push(trial(key.0, key.1, false));
            }
        }
    }
    Ok(trials)
}
