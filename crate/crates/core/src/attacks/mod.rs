//! Membership scores and attacks.
//!
//! Every attack emits [`AttackScoreRecord`]s where a higher score means
//! "more likely a member".

pub mod contrastive;
pub mod label_only;
pub mod lira;

use serde::{Deserialize, Serialize};

use crate::domain::{MembershipMatrix, ScoreTensor};
use crate::error::{Error, Result};

pub use contrastive::{contrastive_similarity_score, fisher_transform, SimilarityMode};
pub use label_only::{
    label_only_attack, label_only_features, LabelOnlyFeature, LogisticRegression,
};
pub use lira::{
    fit_gaussian_pair, fit_multivariate_pair, lira_attack, lira_score, GaussianPair, LiraMode,
    MultivariatePair,
};

/// Probabilities are clamped to `[P_EPS, 1 - P_EPS]` before taking logs.
pub const P_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackScoreRecord {
    pub victim_index: usize,
    pub audit_index: usize,
    pub attack_score: f64,
    pub is_member: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreKind {
    Logit,
    Hinge,
}

impl ScoreKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ScoreKind::Logit => "logit",
            ScoreKind::Hinge => "hinge",
        }
    }
}

fn check_label(label: usize, k: usize) -> Result<()> {
    if label >= k {
        return Err(Error::IndexOutOfRange {
            index: label,
            len: k,
        });
    }
    Ok(())
}

/// `ln p_y - ln(1 - p_y)` with `p_y` clamped away from 0 and 1.
pub fn logit_score(probs: &[f64], label: usize) -> Result<f64> {
    check_label(label, probs.len())?;
    let p = probs[label].clamp(P_EPS, 1.0 - P_EPS);
    Ok(p.ln() - (-p).ln_1p())
}

/// `z_y - max_{j != y} z_j`.
pub fn hinge_score(logits: &[f64], label: usize) -> Result<f64> {
    check_label(label, logits.len())?;
    if logits.len() < 2 {
        return Err(Error::InvalidInput(
            "hinge score needs at least 2 classes".into(),
        ));
    }
    let other = logits
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != label)
        .map(|(_, z)| *z)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(logits[label] - other)
}

/// Hinge score when only probabilities are observable: log-probabilities are
/// logits up to a shared shift, which the hinge cancels.
pub fn hinge_from_probs(probs: &[f64], label: usize) -> Result<f64> {
    let logp: Vec<f64> = probs
        .iter()
        .map(|p| p.max(f64::MIN_POSITIVE).ln())
        .collect();
    hinge_score(&logp, label)
}

/// Baseline attack: the victim's raw score (first variant) with no
/// per-sample calibration.
pub fn global_threshold_scores(
    scores: &ScoreTensor,
    membership: &MembershipMatrix,
    victim_index: usize,
) -> Result<Vec<AttackScoreRecord>> {
    check_victim(scores, membership, victim_index)?;
    Ok((0..scores.num_audit())
        .map(|j| AttackScoreRecord {
            victim_index,
            audit_index: j,
            attack_score: scores.get(victim_index, j, 0),
            is_member: membership.get(victim_index, j),
        })
        .collect())
}

pub(crate) fn check_victim(
    scores: &ScoreTensor,
    membership: &MembershipMatrix,
    victim: usize,
) -> Result<()> {
    if scores.num_models() != membership.num_models()
        || scores.num_audit() != membership.num_audit()
    {
        return Err(Error::InvalidInput(format!(
            "score tensor is {}x{} but membership matrix is {}x{}",
            scores.num_models(),
            scores.num_audit(),
            membership.num_models(),
            membership.num_audit()
        )));
    }
    if victim >= scores.num_models() {
        return Err(Error::IndexOutOfRange {
            index: victim,
            len: scores.num_models(),
        });
    }
    Ok(())
}
