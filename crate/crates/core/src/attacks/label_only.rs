//! Label-only attack: correctness bits under fixed query augmentations,
//! classified per audit sample with L2-regularized logistic regression.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::domain::Example;
use crate::error::{Error, Result};
use crate::model::{argmax, Model, QueryAugmentation};
use crate::rng::derive_seed;

/// Inverse L2 strength of the per-sample logistic regression.
pub const RIDGE_C: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LabelOnlyFeature {
    pub bits: Vec<bool>,
}

impl LabelOnlyFeature {
    pub fn as_reals(&self) -> Vec<f64> {
        self.bits
            .iter()
            .map(|&b| if b { 1.0 } else { 0.0 })
            .collect()
    }
}

/// Bit `i` is set iff the model's top class on `augs[i](x)` is `x.label`.
///
/// Only the argmax is read, so rank-preserving confidence masking cannot
/// change the result; `query_seed` keys any masking randomness anyway.
pub fn label_only_features(
    model: &Model,
    x: &Example,
    augs: &[QueryAugmentation],
    flip_from: usize,
    query_seed: u64,
) -> LabelOnlyFeature {
    let bits = augs
        .iter()
        .enumerate()
        .map(|(i, aug)| {
            let p = model.predict_seeded(
                &aug.apply(&x.features, flip_from),
                derive_seed(query_seed, &[i as u64]),
            );
            argmax(&p) == x.label
        })
        .collect();
    LabelOnlyFeature { bits }
}

/// Binary logistic regression minimizing
/// `0.5 |w|^2 + c * sum_i logloss_i` (intercept unpenalized), fit by Newton steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticRegression {
    pub weights: Vec<f64>,
    pub intercept: f64,
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^t)` without overflow.
fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

impl LogisticRegression {
    pub fn fit(x: &[Vec<f64>], y: &[bool], c: f64) -> Result<Self> {
        let n = x.len();
        if n == 0 || n != y.len() {
            return Err(Error::InvalidInput(
                "logistic regression needs matching non-empty inputs".into(),
            ));
        }
        let d = x[0].len();
        if x.iter().any(|r| r.len() != d) {
            return Err(Error::InvalidInput("ragged feature rows".into()));
        }
        let design = DMatrix::from_fn(n, d + 1, |i, j| if j < d { x[i][j] } else { 1.0 });
        let target = DVector::from_fn(n, |i, _| if y[i] { 1.0 } else { 0.0 });
        let objective = |theta: &DVector<f64>| {
            let eta = &design * theta;
            let data: f64 = eta
                .iter()
                .zip(target.iter())
                .map(|(e, t)| softplus(*e) - t * e)
                .sum();
            0.5 * theta.rows(0, d).norm_squared() + c * data
        };
        let mut theta = DVector::zeros(d + 1);
        let mut current = objective(&theta);
        for _ in 0..100 {
            let p = (&design * &theta).map(sigmoid);
            let mut grad = design.transpose() * (&p - &target) * c;
            let mut hess = design.transpose()
                * DMatrix::from_diagonal(&p.map(|v| v * (1.0 - v)))
                * &design
                * c;
            for j in 0..d {
                grad[j] += theta[j];
                hess[(j, j)] += 1.0;
            }
            hess[(d, d)] += 1e-12;
            if grad.norm() < 1e-10 {
                break;
            }
            let step = match hess.clone().cholesky() {
                Some(ch) => ch.solve(&grad),
                None => match hess.lu().solve(&grad) {
                    Some(s) => s,
                    None => break,
                },
            };
            let mut t = 1.0;
            let mut improved = false;
            while t > 1e-10 {
                let candidate = &theta - &step * t;
                let value = objective(&candidate);
                if value <= current {
                    theta = candidate;
                    improved = value < current;
                    current = value;
                    break;
                }
                t *= 0.5;
            }
            if !improved {
                break;
            }
        }
        Ok(Self {
            weights: theta.rows(0, d).iter().copied().collect(),
            intercept: theta[d],
        })
    }

    pub fn predict_proba(&self, x: &[f64]) -> f64 {
        let eta: f64 = self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.intercept;
        sigmoid(eta)
    }
}

/// Membership probability for the victim's bit vector from a regression fit
/// on the shadow models' vectors for the same audit sample.
pub fn label_only_attack(
    shadow: &[&LabelOnlyFeature],
    shadow_is_member: &[bool],
    victim: &LabelOnlyFeature,
) -> Result<f64> {
    if shadow.len() != shadow_is_member.len() {
        return Err(Error::InvalidInput(
            "shadow features and memberships differ in length".into(),
        ));
    }
    let members = shadow_is_member.iter().filter(|&&m| m).count();
    if members < 2 {
        return Err(Error::InsufficientScores {
            side: "in",
            count: members,
        });
    }
    let non = shadow.len() - members;
    if non < 2 {
        return Err(Error::InsufficientScores {
            side: "out",
            count: non,
        });
    }
    let x: Vec<Vec<f64>> = shadow.iter().map(|f| f.as_reals()).collect();
    let lr = LogisticRegression::fit(&x, shadow_is_member, RIDGE_C)?;
    Ok(lr.predict_proba(&victim.as_reals()))
}
