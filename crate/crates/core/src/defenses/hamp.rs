//! HAMP: high-entropy soft labels at training time plus rank-preserving
//! confidence masking at query time.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{check_labels, train_soft_targets, TrainConfig};
use crate::domain::Example;
use crate::error::{Error, Result};
use crate::model::{ClassifierKind, MaskedModel, Model};
use crate::rng::rng_from;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HampConfig {
    pub train: TrainConfig,
    /// Label-smoothing weight towards the uniform distribution, in `[0, 1)`.
    pub entropy_smoothing: f64,
    #[serde(default = "default_masking")]
    pub masking: bool,
    #[serde(default)]
    pub model: ClassifierKind,
}

fn default_masking() -> bool {
    true
}

/// Indices ordered by descending value, ties by lower index.
fn rank_order(v: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[b].total_cmp(&v[a]));
    idx
}

/// Replaces a probability vector by a random one with the same class ranking.
///
/// The replacement is a flat-Dirichlet draw (spacings of sorted uniforms),
/// sorted descending and assigned to classes in the input's rank order, so it
/// carries no information beyond the ranking.
pub fn hamp_mask(probs: &[f64], seed: u64) -> Result<Vec<f64>> {
    if probs.is_empty() {
        return Err(Error::InvalidInput("empty probability vector".into()));
    }
    if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::InvalidInput(
            "probabilities must be finite and non-negative".into(),
        ));
    }
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidInput(format!(
            "probabilities sum to {sum}, expected 1"
        )));
    }
    let k = probs.len();
    let mut rng = rng_from(seed);
    let mut cuts: Vec<f64> = (0..k - 1).map(|_| rng.random::<f64>()).collect();
    cuts.sort_by(f64::total_cmp);
    let mut masses = Vec::with_capacity(k);
    let mut prev = 0.0;
    for c in cuts {
        masses.push(c - prev);
        prev = c;
    }
    masses.push(1.0 - prev);
    masses.sort_by(|a, b| b.total_cmp(a));
    let mut out = vec![0.0; k];
    for (rank, &class) in rank_order(probs).iter().enumerate() {
        out[class] = masses[rank];
    }
    Ok(out)
}

pub fn train_hamp(train: &[Example], num_classes: usize, cfg: &HampConfig) -> Result<Model> {
    let ls = cfg.entropy_smoothing;
    if !(0.0..1.0).contains(&ls) {
        return Err(Error::InvalidConfig(format!(
            "entropy_smoothing must be in [0, 1), got {ls}"
        )));
    }
    check_labels(train, num_classes)?;
    let uniform = ls / num_classes as f64;
    let features: Vec<&[f64]> = train.iter().map(|e| e.features.as_slice()).collect();
    let targets: Vec<Vec<f64>> = train
        .iter()
        .map(|e| {
            let mut t = vec![uniform; num_classes];
            t[e.label] += 1.0 - ls;
            t
        })
        .collect();
    let net = train_soft_targets(&features, &targets, num_classes, &cfg.train, cfg.model)?;
    Ok(Model::Masked(MaskedModel::new(
        net,
        cfg.train.seed,
        cfg.masking,
    )))
}
