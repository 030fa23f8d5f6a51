//! Unified normalizer front-end dispatching to PCA, LDA, or the VAE family.

use std::str::FromStr;

use crate::dataio::EmbeddingSet;
use crate::error::{Error, Result};
use crate::linear_norm::{fit_lda, fit_pca, LdaModel, PcaModel};
use crate::vae_norm::{adapt_vae, normalize, train_vae, AdaptConfig, VaeConfig, VaeModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum NormKind {
    None,
    Pca,
    Lda,
    Vae,
    Cvae,
}

impl NormKind {
    pub fn as_str(self) -> &'static str {
        match self {
            NormKind::None => "none",
            NormKind::Pca => "pca",
            NormKind::Lda => "lda",
            NormKind::Vae => "vae",
            NormKind::Cvae => "cvae",
        }
    }
}

impl FromStr for NormKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<NormKind> {
        match s {
            "none" => Ok(NormKind::None),
            "pca" => Ok(NormKind::Pca),
            "lda" => Ok(NormKind::Lda),
            "vae" => Ok(NormKind::Vae),
            "cvae" => Ok(NormKind::Cvae),
            other => Err(Error::invalid(format!(
                "unknown normalizer kind {other:?} (expected none|pca|lda|vae|cvae)"
            ))),
        }
    }
}

/// A fitted normalization model; the C-VAE is a Vae with cohesive weight > 0.
#[derive(Clone, Debug, PartialEq)]
pub enum Normalizer {
    None,
    Pca(PcaModel),
    Lda(LdaModel),
    Vae(VaeModel),
}

impl Normalizer {
    pub fn kind(&self) -> &'static str {
        match self {
            Normalizer::None => "none",
            Normalizer::Pca(_) => "pca",
            Normalizer::Lda(_) => "lda",
            Normalizer::Vae(m) if m.cohesive_weight > 0.0 => "cvae",
            Normalizer::Vae(_) => "vae",
        }
    }

    pub fn output_dim(&self, input_dim: usize) -> usize {
        match self {
            Normalizer::None => input_dim,
            Normalizer::Pca(m) => m.k,
            Normalizer::Lda(m) => m.k,
            Normalizer::Vae(m) => m.latent_dim,
        }
    }

    pub fn apply(&self, set: &EmbeddingSet) -> Result<EmbeddingSet> {
        match self {
            Normalizer::None => Ok(set.clone()),
            Normalizer::Pca(m) => m.transform(set),
            Normalizer::Lda(m) => m.transform(set),
            Normalizer::Vae(m) => normalize(m, set),
        }
    }
}

/// Fits a normalizer of the requested kind; `k` is the output dimension and
/// `vae` supplies the training recipe for the VAE family (its latent_dim and
/// cohesive_weight are overridden by `kind`/`k`). The loss curve is empty for
/// the non-iterative kinds.
pub fn fit_normalizer(
    kind: NormKind,
    set: &EmbeddingSet,
    k: usize,
    vae: &VaeConfig,
) -> Result<(Normalizer, Vec<f64>)> {
    match kind {
        NormKind::None => Ok((Normalizer::None, Vec::new())),
        NormKind::Pca => Ok((Normalizer::Pca(fit_pca(set, k)?), Vec::new())),
        NormKind::Lda => Ok((Normalizer::Lda(fit_lda(set, k)?), Vec::new())),
        NormKind::Vae | NormKind::Cvae => {
            let mut config = vae.clone();
            config.latent_dim = k;
            config.cohesive_weight = match kind {
                NormKind::Cvae if vae.cohesive_weight > 0.0 => vae.cohesive_weight,
                NormKind::Cvae => 0.1,
                _ => 0.0,
            };
            let (model, losses) = train_vae(set, &config)?;
            Ok((Normalizer::Vae(model), losses))
        }
    }
}

/// Adapts a normalizer to out-of-domain data: linear models re-fit from
/// scratch with their original output dimension, the VAE family follows the
/// adapt config (retrain or finetune).
pub fn adapt_normalizer(
    norm: &Normalizer,
    ood_set: &EmbeddingSet,
    config: &AdaptConfig,
) -> Result<(Normalizer, Vec<f64>)> {
    match norm {
        Normalizer::None => Ok((Normalizer::None, Vec::new())),
        Normalizer::Pca(m) => Ok((Normalizer::Pca(fit_pca(ood_set, m.k)?), Vec::new())),
        Normalizer::Lda(m) => Ok((Normalizer::Lda(fit_lda(ood_set, m.k)?), Vec::new())),
        Normalizer::Vae(m) => {
            let (model, losses) = adapt_vae(m, ood_set, config)?;
            Ok((Normalizer::Vae(model), losses))
        }
    }
}

/// Scales every vector to norm sqrt(d) (zero vectors pass through); optional
/// step between normalization and PLDA, off by default.
pub fn length_normalize(set: &EmbeddingSet) -> EmbeddingSet {
    let target = (set.dim() as f64).sqrt();
    let vectors = set
        .records()
        .iter()
        .map(|r| {
            let norm = r.vector.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                r.vector.clone()
            } else {
                r.vector.iter().map(|v| v * target / norm).collect()
            }
        })
        .collect();
    set.with_vectors(set.dim(), vectors)
        .expect("length normalization preserves shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::EmbeddingRecord;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn labeled_cloud(seed: u64, n: usize, dim: usize, speakers: usize) -> EmbeddingSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let records = (0..n)
            .map(|i| EmbeddingRecord {
                utterance_id: format!("u{i}"),
                speaker_id: format!("s{}", i % speakers),
                vector: (0..dim)
                    .map(|j| {
                        let center = ((i % speakers) as f64 - 1.0) * (j as f64 + 1.0);
                        center + rng.sample::<f64, _>(StandardNormal)
                    })
                    .collect(),
            })
            .collect();
        EmbeddingSet::from_records(dim, records).unwrap()
    }

    #[test]
    fn kind_strings_round_trip() {
        for kind in ["none", "pca", "lda", "vae", "cvae"] {
            assert_eq!(NormKind::from_str(kind).unwrap().as_str(), kind);
        }
        assert!(NormKind::from_str("plda").is_err());
    }

    #[test]
    fn fitted_kind_reports_cvae_for_positive_weight() {
        let set = labeled_cloud(1, 40, 3, 4);
        let mut vae = VaeConfig::desk(1);
        vae.hidden = vec![6];
        vae.epochs = 1;
        vae.batch_size = 16;
        let (plain, _) = fit_normalizer(NormKind::Vae, &set, 2, &vae).unwrap();
        assert_eq!(plain.kind(), "vae");
        let (cohesive, _) = fit_normalizer(NormKind::Cvae, &set, 2, &vae).unwrap();
        assert_eq!(cohesive.kind(), "cvae");
        match &cohesive {
            Normalizer::Vae(m) => assert_eq!(m.cohesive_weight, 0.1),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(plain.output_dim(3), 2);
    }

    #[test]
    fn none_passes_through_unchanged() {
        let set = labeled_cloud(2, 10, 3, 2);
        let out = Normalizer::None.apply(&set).unwrap();
        assert_eq!(out, set);
        assert_eq!(Normalizer::None.kind(), "none");
    }

    #[test]
    fn apply_matches_direct_calls() {
        let set = labeled_cloud(3, 60, 4, 3);
        let pca = fit_pca(&set, 2).unwrap();
        let via_enum = Normalizer::Pca(pca.clone()).apply(&set).unwrap();
        assert_eq!(via_enum, pca.transform(&set).unwrap());
        let lda = fit_lda(&set, 2).unwrap();
        let via_enum = Normalizer::Lda(lda.clone()).apply(&set).unwrap();
        assert_eq!(via_enum, lda.transform(&set).unwrap());
    }

    #[test]
    fn linear_adaptation_refits_on_ood() {
        let ind = labeled_cloud(4, 60, 4, 3);
        let ood = labeled_cloud(5, 50, 4, 5);
        let (norm, _) = fit_normalizer(NormKind::Pca, &ind, 2, &VaeConfig::desk(4)).unwrap();
        let (adapted, _) = adapt_normalizer(&norm, &ood, &AdaptConfig::retrain(4)).unwrap();
        assert_eq!(adapted, Normalizer::Pca(fit_pca(&ood, 2).unwrap()));
        assert_ne!(adapted, norm);
    }

    #[test]
    fn length_normalization_hits_target_norm() {
        let set = labeled_cloud(6, 8, 4, 2);
        let out = length_normalize(&set);
        for r in out.records() {
            let norm = r.vector.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 2.0).abs() < 1e-12, "{norm}");
        }
        let zero = EmbeddingSet::from_records(
            2,
            vec![EmbeddingRecord {
                utterance_id: "z".into(),
                speaker_id: String::new(),
                vector: vec![0.0, 0.0],
            }],
        )
        .unwrap();
        assert_eq!(length_normalize(&zero).records()[0].vector, vec![0.0, 0.0]);
    }
}
