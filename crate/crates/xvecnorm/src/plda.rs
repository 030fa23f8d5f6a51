//! Two-covariance PLDA: EM training, LLR scoring, and unsupervised adaptation.

use std::collections::HashMap;

use crate::dataio::EmbeddingSet;
use crate::error::{Error, Result};
use crate::numstats::{moments, sym_eig, Cholesky, Matrix, LN_2PI};

/// Generative model x = mean + y + eps with y ~ N(0, between_cov) shared per
/// speaker and eps ~ N(0, within_cov) per utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct PldaModel {
    pub mean: Vec<f64>,
    pub between_cov: Matrix,
    pub within_cov: Matrix,
    pub dim: usize,
}

fn add_outer(acc: &mut Matrix, v: &[f64], w: f64) {
    let d = v.len();
    for i in 0..d {
        let wi = w * v[i];
        for j in 0..d {
            acc[(i, j)] += wi * v[j];
        }
    }
}

fn centered(x: &[f64], m: &[f64]) -> Vec<f64> {
    x.iter().zip(m).map(|(a, b)| a - b).collect()
}

/// Symmetrizes and floors eigenvalues at `floor`; prints a repair notice only
/// when a genuinely negative eigenvalue was clipped.
fn repair_psd(m: &Matrix, floor: f64, label: &str) -> Result<Matrix> {
    let sym = m.symmetrized();
    let (vals, vecs) = sym_eig(&sym)?;
    if vals.iter().all(|&v| v >= floor) {
        return Ok(sym);
    }
    if vals.iter().any(|&v| v < 0.0) {
        eprintln!(
            "plda: repaired {label} (min eigenvalue {:.3e} clipped to {floor:.3e})",
            vals.last().unwrap()
        );
    }
    let clipped: Vec<f64> = vals.iter().map(|&v| v.max(floor)).collect();
    Ok(vecs.matmul(&Matrix::diag(&clipped)).matmul(&vecs.transpose()))
}

fn within_floor(w: &Matrix) -> f64 {
    1e-10 * w.trace() / w.rows() as f64
}

struct Grouped {
    dim: usize,
    mean: Vec<f64>,
    /// Per speaker: (count, mean of that speaker's centered utterances).
    speakers: Vec<(usize, Vec<f64>)>,
    /// Per speaker: utterances centered about the global mean.
    utterances: Vec<Vec<Vec<f64>>>,
}

fn group_by_speaker(set: &EmbeddingSet) -> Result<Grouped> {
    if !set.is_labeled() {
        return Err(Error::invalid("plda requires every record to be labeled"));
    }
    if set.is_empty() {
        return Err(Error::invalid("plda requires a nonempty set"));
    }
    let d = set.dim();
    let n = set.len() as f64;
    let mut mean = vec![0.0; d];
    for r in set.records() {
        for (m, v) in mean.iter_mut().zip(&r.vector) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    let order = set.speakers();
    let index: HashMap<&str, usize> = order
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i))
        .collect();
    let mut utterances: Vec<Vec<Vec<f64>>> = vec![Vec::new(); order.len()];
    for r in set.records() {
        utterances[index[r.speaker_id.as_str()]].push(centered(&r.vector, &mean));
    }
    let speakers = utterances
        .iter()
        .map(|us| {
            let mut sm = vec![0.0; d];
            for u in us {
                for (a, b) in sm.iter_mut().zip(u) {
                    *a += b;
                }
            }
            for a in &mut sm {
                *a /= us.len() as f64;
            }
            (us.len(), sm)
        })
        .collect();
    Ok(Grouped {
        dim: d,
        mean,
        speakers,
        utterances,
    })
}

fn scatter_init(g: &Grouped) -> (Matrix, Matrix) {
    let d = g.dim;
    let mut between = Matrix::zeros(d, d);
    for (_, sm) in &g.speakers {
        add_outer(&mut between, sm, 1.0);
    }
    between = between.scale(1.0 / g.speakers.len() as f64);
    let mut within = Matrix::zeros(d, d);
    let mut n = 0usize;
    for (us, (_, sm)) in g.utterances.iter().zip(&g.speakers) {
        for u in us {
            add_outer(&mut within, &centered(u, sm), 1.0);
            n += 1;
        }
    }
    (between, within.scale(1.0 / n as f64))
}

/// Fits a two-covariance PLDA model by EM, holding the mean at the global
/// mean; `iterations = 0` returns the scatter-matrix initialization.
pub fn fit_plda(set: &EmbeddingSet, iterations: usize) -> Result<PldaModel> {
    let g = group_by_speaker(set)?;
    if g.speakers.len() < 2 {
        return Err(Error::invalid("plda requires at least 2 speakers"));
    }
    if g.speakers.iter().all(|(n, _)| *n < 2) {
        return Err(Error::invalid(
            "plda requires at least one speaker with 2 or more utterances",
        ));
    }
    let (mut between, mut within) = scatter_init(&g);
    between = repair_psd(&between, 0.0, "between_cov")?;
    within = repair_psd(&within, within_floor(&within), "within_cov")?;

    let d = g.dim;
    let total: usize = g.speakers.iter().map(|(n, _)| n).sum();
    for _ in 0..iterations {
        // E-step: per-speaker posterior over the latent y, expressed without
        // inverting between_cov so a rank-deficient B stays valid:
        //   P_n = B - B (B + W/n)^-1 B,   y_i = B (B + W/n)^-1 (xbar_i - m).
        let mut post_cov: HashMap<usize, Matrix> = HashMap::new();
        let mut chols: HashMap<usize, Cholesky> = HashMap::new();
        for &(n, _) in &g.speakers {
            if chols.contains_key(&n) {
                continue;
            }
            let c = between.add(&within.scale(1.0 / n as f64)).symmetrized();
            let chol = Cholesky::new(&c)?;
            let p = between.sub(&between.matmul(&chol.solve_mat(&between)));
            post_cov.insert(n, p.symmetrized());
            chols.insert(n, chol);
        }

        let mut b_new = Matrix::zeros(d, d);
        let mut w_new = Matrix::zeros(d, d);
        for (us, (n, sm)) in g.utterances.iter().zip(&g.speakers) {
            let p = &post_cov[n];
            let y = between.matvec(&chols[n].solve_vec(sm));
            b_new = b_new.add(p);
            add_outer(&mut b_new, &y, 1.0);
            for u in us {
                add_outer(&mut w_new, &centered(u, &y), 1.0);
            }
            w_new = w_new.add(&p.scale(*n as f64));
        }
        between = repair_psd(
            &b_new.scale(1.0 / g.speakers.len() as f64),
            0.0,
            "between_cov",
        )?;
        let w_scaled = w_new.scale(1.0 / total as f64);
        within = repair_psd(&w_scaled, within_floor(&w_scaled), "within_cov")?;
    }
    Ok(PldaModel {
        mean: g.mean,
        between_cov: between,
        within_cov: within,
        dim: d,
    })
}

/// Caches the three Cholesky factors the LLR needs so trial batches pay the
/// decompositions once.
pub struct PldaScorer {
    mean: Vec<f64>,
    dim: usize,
    sum_same: Cholesky,
    diff_same: Cholesky,
    either_diff: Cholesky,
}

impl PldaScorer {
    pub fn new(model: &PldaModel) -> Result<Self> {
        let b = &model.between_cov;
        let w = &model.within_cov;
        Ok(PldaScorer {
            mean: model.mean.clone(),
            dim: model.dim,
            sum_same: Cholesky::new(&b.scale(4.0).add(&w.scale(2.0)).symmetrized())?,
            diff_same: Cholesky::new(&w.scale(2.0).symmetrized())?,
            either_diff: Cholesky::new(&b.scale(2.0).add(&w.scale(2.0)).symmetrized())?,
        })
    }

    /// LLR of same-speaker vs different-speaker hypotheses in the rotated
    /// coordinates u = e' + t', v = e' - t' (primes are mean-centered); the
    /// hypotheses differ only in the covariances assigned to u and v.
    pub fn score(&self, enroll: &[f64], test: &[f64]) -> Result<f64> {
        if enroll.len() != self.dim || test.len() != self.dim {
            return Err(Error::invalid(format!(
                "trial vectors of dim {}/{} against model dim {}",
                enroll.len(),
                test.len(),
                self.dim
            )));
        }
        let mut u = vec![0.0; self.dim];
        let mut v = vec![0.0; self.dim];
        for i in 0..self.dim {
            let e = enroll[i] - self.mean[i];
            let t = test[i] - self.mean[i];
            u[i] = e + t;
            v[i] = e - t;
        }
        // Same-speaker: u ~ N(0, 4B+2W), v ~ N(0, 2W); different-speaker:
        // both N(0, 2B+2W). The 2 pi constants cancel pairwise.
        let quads = 0.5
            * (self.either_diff.quadform(&u) + self.either_diff.quadform(&v)
                - self.sum_same.quadform(&u)
                - self.diff_same.quadform(&v));
        let dets =
            self.either_diff.logdet() - 0.5 * self.sum_same.logdet() - 0.5 * self.diff_same.logdet();
        Ok(dets + quads)
    }
}

/// Single-trial convenience wrapper; batch callers should keep a PldaScorer.
pub fn score_llr(model: &PldaModel, enroll: &[f64], test: &[f64]) -> Result<f64> {
    PldaScorer::new(model)?.score(enroll, test)
}

/// Multi-session enrollment: the enrollment vectors are averaged before
/// scoring.
pub fn score_llr_multi(model: &PldaModel, enrolls: &[Vec<f64>], test: &[f64]) -> Result<f64> {
    if enrolls.is_empty() {
        return Err(Error::invalid(
            "multi-session enrollment needs at least one vector",
        ));
    }
    let d = enrolls[0].len();
    if enrolls.iter().any(|e| e.len() != d) {
        return Err(Error::invalid("enrollment vectors have mixed dimensions"));
    }
    let mut avg = vec![0.0; d];
    for e in enrolls {
        for (a, x) in avg.iter_mut().zip(e) {
            *a += x;
        }
    }
    for a in &mut avg {
        *a /= enrolls.len() as f64;
    }
    score_llr(model, &avg, test)
}

/// Unsupervised adaptation: distributes the PSD part of the OOD covariance
/// excess over the two covariances and recenters the model on the OOD mean.
pub fn adapt_uat(
    model: &PldaModel,
    ood_unlabeled: &EmbeddingSet,
    alpha_within: f64,
    alpha_between: f64,
) -> Result<PldaModel> {
    if ood_unlabeled.dim() != model.dim {
        return Err(Error::invalid(format!(
            "adaptation set dim {} against model dim {}",
            ood_unlabeled.dim(),
            model.dim
        )));
    }
    for (name, a) in [
        ("alpha_within", alpha_within),
        ("alpha_between", alpha_between),
    ] {
        if !(0.0..=1.0).contains(&a) {
            return Err(Error::invalid(format!("{name}={a} outside [0, 1]")));
        }
    }
    let d = model.dim;
    let n = ood_unlabeled.len();
    let m = moments(&ood_unlabeled.vectors())?;
    let mut phi = m.covariance;
    if n < d + 1 {
        // Too few samples for a stable full covariance: shrink toward the
        // diagonal before taking the excess.
        let gamma = d as f64 / (d as f64 + n as f64);
        eprintln!(
            "plda: adaptation set has {n} samples for dim {d}; shrinking covariance (gamma={gamma:.3})"
        );
        let mut shrunk = phi.scale(1.0 - gamma);
        for i in 0..d {
            shrunk[(i, i)] += gamma * phi[(i, i)];
        }
        phi = shrunk;
    }
    let delta = phi
        .sub(&model.between_cov.add(&model.within_cov))
        .symmetrized();
    let (vals, vecs) = sym_eig(&delta)?;
    let clipped: Vec<f64> = vals.iter().map(|v| v.max(0.0)).collect();
    let delta_pos = vecs
        .matmul(&Matrix::diag(&clipped))
        .matmul(&vecs.transpose())
        .symmetrized();
    Ok(PldaModel {
        mean: m.mean,
        between_cov: model.between_cov.add(&delta_pos.scale(alpha_between)),
        within_cov: model.within_cov.add(&delta_pos.scale(alpha_within)),
        dim: d,
    })
}

/// Exact marginal log-likelihood with the per-speaker latent integrated out.
///
/// Each speaker block splits into within-mean residuals and the speaker mean:
/// n-1 degrees of freedom carry covariance W, the mean carries W/n + B, giving
///   -1/2 [ n d ln 2pi + (n-1) logdet W + logdet(W + nB)
///          + sum_j r_j' W^-1 r_j + n (xbar - m)' (W + nB)^-1 (xbar - m) ].
pub fn loglik(model: &PldaModel, set: &EmbeddingSet) -> Result<f64> {
    if set.dim() != model.dim {
        return Err(Error::invalid(format!(
            "set dim {} against model dim {}",
            set.dim(),
            model.dim
        )));
    }
    let g = group_by_speaker(set)?;
    let d = model.dim as f64;
    let chol_w = Cholesky::new(&model.within_cov)?;
    let mut chols: HashMap<usize, Cholesky> = HashMap::new();
    // Utterances in `g` are centered on the set's own mean; re-center speaker
    // means on the model mean.
    let shift: Vec<f64> = g.mean.iter().zip(&model.mean).map(|(a, b)| a - b).collect();
    let mut total = 0.0;
    for (us, (n, sm)) in g.utterances.iter().zip(&g.speakers) {
        let nf = *n as f64;
        if !chols.contains_key(n) {
            let c = model
                .within_cov
                .add(&model.between_cov.scale(nf))
                .symmetrized();
            chols.insert(*n, Cholesky::new(&c)?);
        }
        let cm = &chols[n];
        let sm_model: Vec<f64> = sm.iter().zip(&shift).map(|(a, b)| a + b).collect();
        let mut quad_within = 0.0;
        for u in us {
            quad_within += chol_w.quadform(&centered(u, sm));
        }
        total -= 0.5
            * (nf * d * LN_2PI
                + (nf - 1.0) * chol_w.logdet()
                + cm.logdet()
                + quad_within
                + nf * cm.quadform(&sm_model));
    }
    Ok(total)
}
