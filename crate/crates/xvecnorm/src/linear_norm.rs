//! Linear normalization models (PCA, LDA); adaptation is re-fitting on new data.

use crate::dataio::EmbeddingSet;
use crate::error::{Error, Result};
use crate::numstats::{moments, sym_eig, Matrix};

/// PCA projection onto the top-k eigenvectors of the total covariance.
#[derive(Clone, Debug, PartialEq)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// k x d; rows are eigenvectors in descending eigenvalue order.
    pub projection: Matrix,
    pub k: usize,
}

/// LDA projection maximizing the between/within Rayleigh quotient.
#[derive(Clone, Debug, PartialEq)]
pub struct LdaModel {
    pub mean: Vec<f64>,
    /// k x d; rows are whitened-space eigenvector directions mapped back.
    pub projection: Matrix,
    pub k: usize,
    /// Generalized eigenvalues (between-class variance in whitened space).
    pub eigenvalues: Vec<f64>,
    /// Set when the between-class scatter is numerically zero (identical
    /// class means); the projection is then arbitrary within the within-class
    /// null structure but still valid.
    pub degenerate: bool,
}

fn project(mean: &[f64], projection: &Matrix, set: &EmbeddingSet) -> Result<EmbeddingSet> {
    if set.dim() != mean.len() {
        return Err(Error::invalid(format!(
            "set dimension {} does not match model dimension {}",
            set.dim(),
            mean.len()
        )));
    }
    let k = projection.rows();
    let vectors = set
        .records()
        .iter()
        .map(|r| {
            let centered: Vec<f64> = r.vector.iter().zip(mean).map(|(x, m)| x - m).collect();
            projection.matvec(&centered)
        })
        .collect();
    set.with_vectors(k, vectors)
}

impl PcaModel {
    /// z = projection (x - mean); labels and utterance ids preserved.
    pub fn transform(&self, set: &EmbeddingSet) -> Result<EmbeddingSet> {
        project(&self.mean, &self.projection, set)
    }
}

impl LdaModel {
    pub fn transform(&self, set: &EmbeddingSet) -> Result<EmbeddingSet> {
        project(&self.mean, &self.projection, set)
    }
}

/// Fits PCA on the total covariance of `set`.
pub fn fit_pca(set: &EmbeddingSet, k: usize) -> Result<PcaModel> {
    let d = set.dim();
    if k == 0 || k > d {
        return Err(Error::invalid(format!("pca k={k} out of range 1..={d}")));
    }
    if set.len() < k + 1 {
        return Err(Error::invalid(format!(
            "pca requires at least {} records, got {}",
            k + 1,
            set.len()
        )));
    }
    let m = moments(&set.vectors())?;
    let (_, vectors) = sym_eig(&m.covariance)?;
    let mut projection = Matrix::zeros(k, d);
    for i in 0..k {
        for j in 0..d {
            projection[(i, j)] = vectors[(j, i)];
        }
    }
    Ok(PcaModel {
        mean: m.mean,
        projection,
        k,
    })
}

/// Symmetric inverse square root via eigendecomposition.
fn inv_sqrt(m: &Matrix) -> Result<Matrix> {
    let (vals, vecs) = sym_eig(m)?;
    if vals.iter().any(|&v| v <= 0.0) {
        return Err(Error::numeric("inverse sqrt of a non-PD matrix"));
    }
    let d = Matrix::diag(&vals.iter().map(|v| 1.0 / v.sqrt()).collect::<Vec<_>>());
    Ok(vecs.matmul(&d).matmul(&vecs.transpose()))
}

/// Fits LDA by whitening the ridge-regularized within-class scatter and
/// eigendecomposing the whitened between-class scatter.
pub fn fit_lda(set: &EmbeddingSet, k: usize) -> Result<LdaModel> {
    let d = set.dim();
    if !set.is_labeled() {
        return Err(Error::invalid("lda requires every record to be labeled"));
    }
    let speakers = set.speakers();
    let c = speakers.len();
    if c < 2 {
        return Err(Error::invalid("lda requires at least 2 classes"));
    }
    if k == 0 || k > d || k >= c {
        return Err(Error::invalid(format!(
            "lda k={k} out of range 1..=min(d={d}, classes-1={})",
            c - 1
        )));
    }

    let n = set.len() as f64;
    let mut class_sums: Vec<Vec<f64>> = vec![vec![0.0; d]; c];
    let mut class_counts = vec![0usize; c];
    let index: std::collections::HashMap<&str, usize> = speakers
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i))
        .collect();
    for r in set.records() {
        let ci = index[r.speaker_id.as_str()];
        class_counts[ci] += 1;
        for (a, v) in class_sums[ci].iter_mut().zip(&r.vector) {
            *a += v;
        }
    }
    if let Some(i) = class_counts.iter().position(|&n| n < 2) {
        return Err(Error::invalid(format!(
            "lda class {} has fewer than 2 samples",
            speakers[i]
        )));
    }
    let class_means: Vec<Vec<f64>> = class_sums
        .iter()
        .zip(&class_counts)
        .map(|(s, &n)| s.iter().map(|v| v / n as f64).collect())
        .collect();
    let mut mean = vec![0.0; d];
    for r in set.records() {
        for (m, v) in mean.iter_mut().zip(&r.vector) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n;
    }

    let mut s_w = Matrix::zeros(d, d);
    for r in set.records() {
        let cm = &class_means[index[r.speaker_id.as_str()]];
        let centered: Vec<f64> = r.vector.iter().zip(cm).map(|(x, m)| x - m).collect();
        for i in 0..d {
            for j in 0..d {
                s_w[(i, j)] += centered[i] * centered[j];
            }
        }
    }
    let mut s_b = Matrix::zeros(d, d);
    for (cm, &cnt) in class_means.iter().zip(&class_counts) {
        let centered: Vec<f64> = cm.iter().zip(&mean).map(|(x, m)| x - m).collect();
        let w = cnt as f64;
        for i in 0..d {
            for j in 0..d {
                s_b[(i, j)] += w * centered[i] * centered[j];
            }
        }
    }
    for v in 0..d {
        for u in 0..d {
            s_w[(v, u)] /= n;
            s_b[(v, u)] /= n;
        }
    }

    // Ridge keeps the whitening invertible on small adaptation sets.
    let eps = 1e-6 * s_w.trace() / d as f64;
    for i in 0..d {
        s_w[(i, i)] += eps;
    }

    let w = inv_sqrt(&s_w)?;
    let whitened_b = w.matmul(&s_b).matmul(&w).symmetrized();
    let (vals, vecs) = sym_eig(&whitened_b)?;
    let degenerate = vals.iter().all(|v| v.abs() <= 1e-10 * (1.0 + s_b.trace()));

    // Row i of the projection is (W u_i)ᵀ so z = U_kᵀ W (x - mean).
    let mut projection = Matrix::zeros(k, d);
    for i in 0..k {
        let ui: Vec<f64> = (0..d).map(|j| vecs[(j, i)]).collect();
        let row = w.matvec(&ui);
        for j in 0..d {
            projection[(i, j)] = row[j];
        }
    }
    Ok(LdaModel {
        mean,
        projection,
        k,
        eigenvalues: vals[..k].to_vec(),
        degenerate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::EmbeddingRecord;

    fn set_from(vectors: &[(&str, &[f64])]) -> EmbeddingSet {
        let dim = vectors[0].1.len();
        let records = vectors
            .iter()
            .enumerate()
            .map(|(i, (spk, v))| EmbeddingRecord {
                utterance_id: format!("u{i}"),
                speaker_id: spk.to_string(),
                vector: v.to_vec(),
            })
            .collect();
        EmbeddingSet::from_records(dim, records).unwrap()
    }

    fn diagonal_line_set() -> EmbeddingSet {
        set_from(&[
            ("a", &[1.0, 1.0]),
            ("a", &[-1.0, -1.0]),
            ("b", &[2.0, 2.0]),
            ("b", &[-2.0, -2.0]),
        ])
    }

    #[test]
    fn pca_finds_diagonal_direction() {
        let model = fit_pca(&diagonal_line_set(), 1).unwrap();
        let r = 0.5_f64.sqrt();
        assert!((model.projection[(0, 0)] - r).abs() < 1e-10);
        assert!((model.projection[(0, 1)] - r).abs() < 1e-10);
        let out = model.transform(&diagonal_line_set()).unwrap();
        assert!((out.records()[0].vector[0] - 2.0_f64.sqrt()).abs() < 1e-10);
    }

    #[test]
    fn pca_transform_of_mean_is_zero() {
        let model = fit_pca(&diagonal_line_set(), 1).unwrap();
        let probe = set_from(&[("", &model.mean.clone())]);
        let out = model.transform(&probe).unwrap();
        assert!(out.records()[0].vector[0].abs() < 1e-12);
    }

    #[test]
    fn pca_rejects_bad_k() {
        assert!(fit_pca(&diagonal_line_set(), 0).is_err());
        assert!(fit_pca(&diagonal_line_set(), 3).is_err());
    }

    #[test]
    fn pca_requires_enough_records() {
        let set = set_from(&[("a", &[1.0, 0.0]), ("a", &[0.0, 1.0])]);
        assert!(fit_pca(&set, 2).is_err());
    }

    #[test]
    fn pca_full_rank_preserves_distances() {
        // Deterministic cloud; orthonormal full-rank projection is an isometry.
        let mut state = 1u64;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        let vectors: Vec<Vec<f64>> = (0..40).map(|_| (0..4).map(|_| next()).collect()).collect();
        let records: Vec<EmbeddingRecord> = vectors
            .iter()
            .enumerate()
            .map(|(i, v)| EmbeddingRecord {
                utterance_id: format!("u{i}"),
                speaker_id: String::new(),
                vector: v.clone(),
            })
            .collect();
        let set = EmbeddingSet::from_records(4, records).unwrap();
        let model = fit_pca(&set, 4).unwrap();
        let out = model.transform(&set).unwrap();
        let dist = |a: &[f64], b: &[f64]| {
            a.iter()
                .zip(b)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt()
        };
        for i in 0..10 {
            for j in (i + 1)..10 {
                let d0 = dist(&set.records()[i].vector, &set.records()[j].vector);
                let d1 = dist(&out.records()[i].vector, &out.records()[j].vector);
                assert!((d0 - d1).abs() < 1e-8, "{d0} vs {d1}");
            }
        }
    }

    #[test]
    fn pca_training_covariance_is_diagonal() {
        let set = diagonal_line_set();
        let model = fit_pca(&set, 2).unwrap();
        let out = model.transform(&set).unwrap();
        let m = moments(&out.vectors()).unwrap();
        assert!(m.covariance[(0, 1)].abs() < 1e-6);
        assert!(m.covariance[(1, 0)].abs() < 1e-6);
    }

    #[test]
    fn pca_refit_is_bit_identical() {
        let a = fit_pca(&diagonal_line_set(), 2).unwrap();
        let b = fit_pca(&diagonal_line_set(), 2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn pca_empty_transform_keeps_output_dim() {
        let model = fit_pca(&diagonal_line_set(), 1).unwrap();
        let out = model.transform(&EmbeddingSet::empty(2)).unwrap();
        assert_eq!(out.dim(), 1);
        assert!(out.is_empty());
    }

    fn two_class_set() -> EmbeddingSet {
        // Full-rank, uncorrelated within-class scatter keeps the ridge term
        // negligible and the discriminant axis on x.
        set_from(&[
            ("a", &[1.07, 0.3]),
            ("a", &[1.03, -0.2]),
            ("a", &[0.97, 0.5]),
            ("a", &[0.93, 0.0]),
            ("b", &[-0.92, 0.1]),
            ("b", &[-0.98, -0.4]),
            ("b", &[-1.02, 0.4]),
            ("b", &[-1.08, -0.1]),
        ])
    }

    #[test]
    fn lda_finds_separating_axis() {
        let model = fit_lda(&two_class_set(), 1).unwrap();
        let p = model.projection.row(0);
        let norm = (p[0] * p[0] + p[1] * p[1]).sqrt();
        let cos = p[0].abs() / norm;
        assert!(cos > (5.0_f64.to_radians()).cos(), "direction {p:?}");
        assert!(!model.degenerate);
    }

    #[test]
    fn lda_identical_means_is_degenerate() {
        let set = set_from(&[
            ("a", &[0.5, 1.0]),
            ("a", &[-0.5, -1.0]),
            ("b", &[1.0, 0.5]),
            ("b", &[-1.0, -0.5]),
        ]);
        let model = fit_lda(&set, 1).unwrap();
        assert!(model.degenerate);
        assert!(model.eigenvalues[0].abs() < 1e-8);
    }

    #[test]
    fn lda_rejects_k_at_class_count() {
        assert!(fit_lda(&two_class_set(), 2).is_err());
    }

    #[test]
    fn lda_rejects_unlabeled_records() {
        let set = set_from(&[
            ("a", &[1.0, 0.0]),
            ("a", &[1.1, 0.0]),
            ("", &[-1.0, 0.0]),
            ("b", &[-1.0, 0.1]),
            ("b", &[-0.9, 0.1]),
        ]);
        assert!(fit_lda(&set, 1).is_err());
    }

    #[test]
    fn lda_rejects_singleton_class() {
        let set = set_from(&[
            ("a", &[1.0, 0.0]),
            ("a", &[1.1, 0.0]),
            ("b", &[-1.0, 0.1]),
        ]);
        assert!(fit_lda(&set, 1).is_err());
    }

    #[test]
    fn lda_eigenvalue_is_affine_invariant() {
        let set = two_class_set();
        let model = fit_lda(&set, 1).unwrap();
        // Invertible affine map of the inputs; the generalized eigenvalue of
        // (S_b, S_w) must not change (ridge perturbs it only at 1e-6).
        let a = Matrix::from_vec(2, 2, vec![2.0, 0.5, -0.3, 1.5]).unwrap();
        let b = [3.0, -1.0];
        let mapped_vecs: Vec<Vec<f64>> = set
            .records()
            .iter()
            .map(|r| {
                let y = a.matvec(&r.vector);
                vec![y[0] + b[0], y[1] + b[1]]
            })
            .collect();
        let mapped = set.with_vectors(2, mapped_vecs).unwrap();
        let model2 = fit_lda(&mapped, 1).unwrap();
        let (e1, e2) = (model.eigenvalues[0], model2.eigenvalues[0]);
        assert!((e1 - e2).abs() < 1e-4 * e1.max(e2), "{e1} vs {e2}");
        assert!(e1 > 1.0, "classes should be well separated, got {e1}");
    }
}
