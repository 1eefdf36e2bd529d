//! Positive-pair similarity attack against contrastive encoders.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AugmentationPolicy, Model};
use crate::rng::{derived_rng, tags};

/// Number of augmentation pairs averaged per query.
pub const DEFAULT_REPEATS: usize = 6;
const RHO_CLAMP: f64 = 1.0 - 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SimilarityMode {
    /// Compares encoder embeddings.
    WhiteBox,
    /// Compares the deployed model's logits.
    BlackBox,
}

/// `ln((1 + rho) / (1 - rho))` with `rho` clamped inside `(-1, 1)`.
pub fn fisher_transform(rho: f64) -> f64 {
    let r = rho.clamp(-RHO_CLAMP, RHO_CLAMP);
    r.ln_1p() - (-r).ln_1p()
}

fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNormOutput);
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
}

/// Mean Fisher-transformed cosine similarity between outputs on two random
/// augmentations of `x`, over `repeats` pairs. Repeat `r` draws from a
/// stream keyed by `(seed, r)`, so callers pick `seed` per audit sample.
pub fn contrastive_similarity_score(
    model: &Model,
    x: &[f64],
    repeats: usize,
    augmentation: &AugmentationPolicy,
    flip_from: usize,
    mode: SimilarityMode,
    seed: u64,
) -> Result<f64> {
    if repeats == 0 {
        return Err(Error::InvalidConfig("repeats must be >= 1".into()));
    }
    let output = |v: &[f64]| match mode {
        SimilarityMode::WhiteBox => model
            .embed(v)
            .ok_or(Error::Unsupported("embedding queries")),
        SimilarityMode::BlackBox => model.logits(v).ok_or(Error::Unsupported("logit queries")),
    };
    let mut total = 0.0;
    for r in 0..repeats {
        let mut rng = derived_rng(seed, &[tags::SIMILARITY, r as u64]);
        let a = output(&augmentation.apply(x, flip_from, &mut rng))?;
        let b = output(&augmentation.apply(x, flip_from, &mut rng))?;
        total += fisher_transform(cosine(&a, &b)?);
    }
    Ok(total / repeats as f64)
}
