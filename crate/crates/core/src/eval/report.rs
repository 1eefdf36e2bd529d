//! Population-level and sample-level audit reports.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::roc::{roc_curve, RocCurve};
use crate::attacks::AttackScoreRecord;
use crate::data::CanaryFamily;
use crate::error::{Error, Result};

/// Bumped whenever the serialized report layout changes.
pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Default FPR targets.
pub const DEFAULT_FPR_TARGETS: [f64; 3] = [0.001, 0.01, 0.1];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    Population,
    SampleLevel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SampleMode {
    /// One ROC over all canary guesses.
    PooledCanaries,
    /// One ROC per audit sample across victims; reports the maximum.
    PerSample,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TprAt {
    pub fpr: f64,
    pub tpr: f64,
    /// Decision threshold used; `None` when no finite threshold satisfies the
    /// target (nothing is flagged) or for per-sample maxima.
    pub threshold: Option<f64>,
    /// Fewer than `1 / fpr` negative guesses back this value.
    pub under_resolved: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleTpr {
    pub audit_index: usize,
    pub negatives: usize,
    /// Aligned with the report's `tpr_at`.
    pub tpr: Vec<f64>,
}

/// Identity of the audited configuration, copied into every report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub canary_family: CanaryFamily,
    pub defense: String,
    pub attack: String,
    pub num_models: usize,
    pub num_audit: usize,
    pub seeds: BTreeMap<String, u64>,
    pub mechanism: BTreeMap<String, f64>,
    pub test_accuracy: Option<f64>,
    pub config_hash: Option<String>,
}

impl Default for ReportMeta {
    fn default() -> Self {
        Self {
            canary_family: CanaryFamily::None,
            defense: String::new(),
            attack: String::new(),
            num_models: 0,
            num_audit: 0,
            seeds: BTreeMap::new(),
            mechanism: BTreeMap::new(),
            test_accuracy: None,
            config_hash: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub schema_version: u32,
    pub engine_version: String,
    pub protocol: Protocol,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_mode: Option<SampleMode>,
    #[serde(flatten)]
    pub meta: ReportMeta,
    pub num_records: usize,
    pub num_positives: usize,
    pub num_negatives: usize,
    pub tpr_at: Vec<TprAt>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub per_sample: Vec<SampleTpr>,
}

impl AuditReport {
    /// Entry for the target closest to `fpr` (within 1e-12).
    pub fn at(&self, fpr: f64) -> Option<&TprAt> {
        self.tpr_at.iter().find(|t| (t.fpr - fpr).abs() < 1e-12)
    }

    pub fn fpr_targets(&self) -> Vec<f64> {
        self.tpr_at.iter().map(|t| t.fpr).collect()
    }
}

fn check_targets(targets: &[f64]) -> Result<()> {
    if targets.is_empty() {
        return Err(Error::InvalidConfig(
            "at least one FPR target is required".into(),
        ));
    }
    if let Some(t) = targets.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(Error::InvalidConfig(format!(
            "FPR target {t} outside [0, 1]"
        )));
    }
    Ok(())
}

fn curve_entries(curve: &RocCurve, targets: &[f64]) -> Result<Vec<TprAt>> {
    targets
        .iter()
        .map(|&a| {
            let op = curve.operating_point(a)?;
            Ok(TprAt {
                fpr: a,
                tpr: op.tpr,
                threshold: op.threshold.is_finite().then_some(op.threshold),
                under_resolved: !curve.resolves(a),
            })
        })
        .collect()
}

fn pooled(
    records: &[AttackScoreRecord],
    targets: &[f64],
    meta: ReportMeta,
    protocol: Protocol,
) -> Result<AuditReport> {
    check_targets(targets)?;
    if records.is_empty() {
        return Err(Error::InvalidInput("no attack records".into()));
    }
    let curve = roc_curve(records)?;
    Ok(AuditReport {
        schema_version: REPORT_SCHEMA_VERSION,
        engine_version: crate::ENGINE_VERSION.to_string(),
        protocol,
        sample_mode: (protocol == Protocol::SampleLevel).then_some(SampleMode::PooledCanaries),
        meta,
        num_records: records.len(),
        num_positives: curve.positives,
        num_negatives: curve.negatives,
        tpr_at: curve_entries(&curve, targets)?,
        per_sample: Vec::new(),
    })
}

/// One ROC over every record.
pub fn population_report(
    records: &[AttackScoreRecord],
    targets: &[f64],
    meta: ReportMeta,
) -> Result<AuditReport> {
    pooled(records, targets, meta, Protocol::Population)
}

/// Report built directly from a pooled curve, for callers that never
/// materialize records.
pub fn report_from_curve(
    curve: &RocCurve,
    protocol: Protocol,
    targets: &[f64],
    meta: ReportMeta,
) -> Result<AuditReport> {
    check_targets(targets)?;
    Ok(AuditReport {
        schema_version: REPORT_SCHEMA_VERSION,
        engine_version: crate::ENGINE_VERSION.to_string(),
        protocol,
        sample_mode: (protocol == Protocol::SampleLevel).then_some(SampleMode::PooledCanaries),
        meta,
        num_records: curve.positives + curve.negatives,
        num_positives: curve.positives,
        num_negatives: curve.negatives,
        tpr_at: curve_entries(curve, targets)?,
        per_sample: Vec::new(),
    })
}

/// Sample-level report: either one ROC over canary records, or one ROC per
/// audit sample with the maximum TPR reported.
///
/// Per-sample entries are flagged under-resolved when any sample has fewer
/// than `1 / fpr` negatives; samples lacking a member or non-member guess are
/// left out and also flag every entry.
pub fn sample_level_report(
    records: &[AttackScoreRecord],
    mode: SampleMode,
    targets: &[f64],
    meta: ReportMeta,
) -> Result<AuditReport> {
    match mode {
        SampleMode::PooledCanaries => {
            if meta.canary_family == CanaryFamily::None {
                return Err(Error::InvalidInput(
                    "pooled-canaries protocol needs a canary family".into(),
                ));
            }
            pooled(records, targets, meta, Protocol::SampleLevel)
        }
        SampleMode::PerSample => {
            check_targets(targets)?;
            if records.is_empty() {
                return Err(Error::InvalidInput("no attack records".into()));
            }
            let mut groups: BTreeMap<usize, Vec<(f64, bool)>> = BTreeMap::new();
            for r in records {
                groups
                    .entry(r.audit_index)
                    .or_default()
                    .push((r.attack_score, r.is_member));
            }
            per_sample_report(groups, targets, meta)
        }
    }
}

/// Per-sample report from `(audit_index, pairs)` groups, one ROC per group.
pub fn per_sample_report(
    groups: impl IntoIterator<Item = (usize, Vec<(f64, bool)>)>,
    targets: &[f64],
    meta: ReportMeta,
) -> Result<AuditReport> {
    check_targets(targets)?;
    let mut per_sample = Vec::new();
    let mut incomplete = false;
    let (mut pos, mut neg) = (0, 0);
    for (audit_index, pairs) in groups {
        let p = pairs.iter().filter(|x| x.1).count();
        pos += p;
        neg += pairs.len() - p;
        let curve = match RocCurve::from_pairs(pairs) {
            Ok(c) => c,
            Err(Error::OneClass) => {
                incomplete = true;
                continue;
            }
            Err(e) => return Err(e),
        };
        let tpr = targets
            .iter()
            .map(|&a| tpr_of(&curve, a))
            .collect::<Result<Vec<_>>>()?;
        per_sample.push(SampleTpr {
            audit_index,
            negatives: curve.negatives,
            tpr,
        });
    }
    if pos + neg == 0 {
        return Err(Error::InvalidInput("no attack records".into()));
    }
    let min_neg = per_sample.iter().map(|s| s.negatives).min().unwrap_or(0);
    let tpr_at = targets
        .iter()
        .enumerate()
        .map(|(k, &a)| TprAt {
            fpr: a,
            tpr: per_sample.iter().map(|s| s.tpr[k]).fold(0.0, f64::max),
            threshold: None,
            under_resolved: incomplete || per_sample.is_empty() || (min_neg as f64) * a < 1.0,
        })
        .collect();
    Ok(AuditReport {
        schema_version: REPORT_SCHEMA_VERSION,
        engine_version: crate::ENGINE_VERSION.to_string(),
        protocol: Protocol::SampleLevel,
        sample_mode: Some(SampleMode::PerSample),
        meta,
        num_records: pos + neg,
        num_positives: pos,
        num_negatives: neg,
        tpr_at,
        per_sample,
    })
}

fn tpr_of(curve: &RocCurve, alpha: f64) -> Result<f64> {
    Ok(curve.operating_point(alpha)?.tpr)
}
