//! Exact ROC curves over attack scores.

use crate::attacks::AttackScoreRecord;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    /// Records with score `>= threshold` are guessed members; `+inf` for the
    /// initial point.
    pub threshold: f64,
    pub tpr: f64,
    pub fpr: f64,
}

/// Points sorted by descending threshold, one per distinct score, preceded by
/// `(+inf, 0, 0)`. Tied scores share one point.
#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
    pub positives: usize,
    pub negatives: usize,
}

/// Operating point read off a curve at a target FPR.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OperatingPoint {
    pub tpr: f64,
    pub fpr: f64,
    pub threshold: f64,
}

impl RocCurve {
    /// Builds the curve from `(score, is_member)` pairs; consumes the buffer
    /// to sort it in place.
    pub fn from_pairs(mut pairs: Vec<(f64, bool)>) -> Result<Self> {
        if pairs.iter().any(|(s, _)| s.is_nan()) {
            return Err(Error::InvalidInput("NaN attack score".into()));
        }
        let positives = pairs.iter().filter(|p| p.1).count();
        let negatives = pairs.len() - positives;
        if positives == 0 || negatives == 0 {
            return Err(Error::OneClass);
        }
        pairs.sort_unstable_by(|a, b| b.0.total_cmp(&a.0));
        let mut points = Vec::with_capacity(pairs.len() + 1);
        points.push(RocPoint {
            threshold: f64::INFINITY,
            tpr: 0.0,
            fpr: 0.0,
        });
        let (mut tp, mut fp) = (0usize, 0usize);
        let mut i = 0;
        while i < pairs.len() {
            let s = pairs[i].0;
            while i < pairs.len() && pairs[i].0 == s {
                if pairs[i].1 {
                    tp += 1;
                } else {
                    fp += 1;
                }
                i += 1;
            }
            points.push(RocPoint {
                threshold: s,
                tpr: tp as f64 / positives as f64,
                fpr: fp as f64 / negatives as f64,
            });
        }
        Ok(Self {
            points,
            positives,
            negatives,
        })
    }

    /// Whether `alpha` is backed by at least one negative guess, i.e.
    /// `negatives * alpha >= 1`.
    pub fn resolves(&self, alpha: f64) -> bool {
        self.negatives as f64 * alpha >= 1.0
    }

    /// Highest-TPR point whose FPR does not exceed `alpha`.
    pub fn operating_point(&self, alpha: f64) -> Result<OperatingPoint> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::InvalidInput(format!(
                "FPR target {alpha} outside [0, 1]"
            )));
        }
        let p = self
            .points
            .iter()
            .take_while(|p| p.fpr <= alpha)
            .last()
            .expect("curve starts at fpr 0");
        Ok(OperatingPoint {
            tpr: p.tpr,
            fpr: p.fpr,
            threshold: p.threshold,
        })
    }
}

pub fn roc_curve(records: &[AttackScoreRecord]) -> Result<RocCurve> {
    RocCurve::from_pairs(
        records
            .iter()
            .map(|r| (r.attack_score, r.is_member))
            .collect(),
    )
}

/// TPR of the lowest threshold whose FPR is at most `alpha` (step function,
/// no interpolation).
pub fn tpr_at_fpr(curve: &RocCurve, alpha: f64) -> Result<f64> {
    Ok(curve.operating_point(alpha)?.tpr)
}
