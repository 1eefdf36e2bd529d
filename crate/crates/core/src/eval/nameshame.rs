//! Simulation of the name-and-shame mechanism: it outputs the membership bit
//! of one fixed target and nothing about anyone else.

use rand::Rng as _;

use super::report::{per_sample_report, report_from_curve, AuditReport, Protocol, ReportMeta};
use super::roc::RocCurve;
use crate::domain::assign_memberships;
use crate::error::{Error, Result};
use crate::rng::{derived_rng, tags};

pub const DEFENSE_ID: &str = "name-and-shame";
pub const ATTACK_ID: &str = "output-bit";

#[derive(Debug, Clone, PartialEq)]
pub struct NameShameReports {
    /// One ROC over every (trial, sample) guess.
    pub population: AuditReport,
    /// One ROC per sample across trials; the target is `per_sample[target]`.
    pub sample_level: AuditReport,
}

/// Runs `trials` training runs over a dataset of `dataset_size` samples, each
/// sample in exactly half the runs. The attack score of the target is the
/// mechanism output (its membership bit); every other sample gets an
/// independent uniform coin.
pub fn name_and_shame_sim(
    dataset_size: usize,
    target: usize,
    trials: usize,
    seed: u64,
    targets: &[f64],
) -> Result<NameShameReports> {
    if dataset_size < 2 {
        return Err(Error::InvalidInput(format!(
            "dataset size must be >= 2, got {dataset_size}"
        )));
    }
    if target >= dataset_size {
        return Err(Error::IndexOutOfRange {
            index: target,
            len: dataset_size,
        });
    }
    let membership = assign_memberships(trials, dataset_size, seed)?;
    let mut scores = vec![0.0; trials * dataset_size];
    for (t, row) in scores.chunks_mut(dataset_size).enumerate() {
        let mut rng = derived_rng(seed, &[tags::NAME_SHAME, t as u64]);
        for (j, s) in row.iter_mut().enumerate() {
            let coin: f64 = rng.random();
            *s = if j == target {
                f64::from(u8::from(membership.get(t, j)))
            } else {
                coin
            };
        }
    }
    let bits = membership.bits();
    let meta = ReportMeta {
        defense: DEFENSE_ID.to_string(),
        attack: ATTACK_ID.to_string(),
        num_models: trials,
        num_audit: dataset_size,
        seeds: [("experiment".to_string(), seed)].into_iter().collect(),
        ..ReportMeta::default()
    };

    let pairs: Vec<(f64, bool)> = scores.iter().copied().zip(bits.iter().copied()).collect();
    let curve = RocCurve::from_pairs(pairs)?;
    let population = report_from_curve(&curve, Protocol::Population, targets, meta.clone())?;
    drop(curve);

    let groups = (0..dataset_size).map(|j| {
        let col = (0..trials)
            .map(|t| (scores[t * dataset_size + j], bits[t * dataset_size + j]))
            .collect();
        (j, col)
    });
    let sample_level = per_sample_report(groups, targets, meta)?;
    Ok(NameShameReports {
        population,
        sample_level,
    })
}
