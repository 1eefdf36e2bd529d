//! The `run` and `roc-dump` commands.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use miaudit::eval::protocol::{fleet_accuracy, records_from_scores, standard_reports};
use miaudit::eval::{audit_fleet, prepare, roc_curve, train_fleet, LeaveOneOut};
use miaudit::parallel::Exec;

use crate::artifacts::{
    encode_miat, load_scores, roc_csv, to_json_bytes, write_atomic, ReportsFile, ScoresSidecar,
    CONFIG_FILE, REPORTS_FILE, ROC_FILE, SCORES_FILE, SIDECAR_FILE,
};
use crate::cache::FleetCache;
use crate::config::ExperimentConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub config_hash: String,
    pub cache_hit: bool,
    pub files: Vec<PathBuf>,
}

#[derive(serde::Serialize)]
struct ConfigEcho<'a> {
    engine_version: &'a str,
    config_hash: &'a str,
    config: &'a ExperimentConfig,
}

pub fn run_experiment(
    config: &ExperimentConfig,
    out_dir: &Path,
    cache: Option<&FleetCache>,
) -> Result<RunSummary> {
    let spec = &config.experiment;
    let hash = config.hash();
    let exec = Exec::Parallel;
    let prepared = prepare(spec)?;

    let key = config.fleet_key();
    let cached = cache.and_then(|c| c.load(&key, spec.num_models));
    let cache_hit = cached.is_some();
    let models = match cached {
        Some(m) => m,
        None => {
            let m = train_fleet(
                &prepared.dataset,
                &prepared.membership,
                &spec.defense,
                spec.seed,
                exec,
            )?;
            if let Some(c) = cache {
                c.store(&key, &m).context("writing fleet cache")?;
            }
            m
        }
    };

    let run = audit_fleet(
        &prepared,
        &models,
        spec.attack,
        &spec.attack_params,
        &spec.fpr_targets,
        spec.seed,
        exec,
    )?;
    let test_accuracy = fleet_accuracy(&models, &prepared.holdout, exec);
    let loo = LeaveOneOut {
        prepared,
        models,
        run,
        test_accuracy,
    };
    let mut reports = standard_reports(spec, &loo)?;
    for r in &mut reports {
        r.meta.config_hash = Some(hash.clone());
    }
    let curve = roc_curve(&loo.run.records)?;

    std::fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let sidecar = ScoresSidecar::new(
        &hash,
        &loo.run.scores,
        &loo.run.membership,
        loo.run.attack,
        &loo.run.eval_mask,
    );
    let echo = ConfigEcho {
        engine_version: miaudit::ENGINE_VERSION,
        config_hash: &hash,
        config,
    };
    let reports = ReportsFile {
        engine_version: miaudit::ENGINE_VERSION.to_string(),
        config_hash: hash.clone(),
        reports,
    };
    let artifacts: [(&str, Vec<u8>); 5] = [
        (CONFIG_FILE, to_json_bytes(&echo)?),
        (SCORES_FILE, encode_miat(&loo.run.scores)),
        (SIDECAR_FILE, to_json_bytes(&sidecar)?),
        (REPORTS_FILE, to_json_bytes(&reports)?),
        (ROC_FILE, roc_csv(&curve, &hash)?),
    ];
    let mut files = Vec::with_capacity(artifacts.len());
    for (name, bytes) in artifacts {
        let path = out_dir.join(name);
        write_atomic(&path, &bytes)?;
        files.push(path);
    }
    Ok(RunSummary {
        out_dir: out_dir.to_path_buf(),
        config_hash: hash,
        cache_hit,
        files,
    })
}

/// Replays the attack from a run directory's persisted scores and returns the
/// pooled ROC as CSV.
pub fn roc_dump(run_dir: &Path) -> Result<Vec<u8>> {
    let (scores, side) = load_scores(run_dir)?;
    let membership = side.membership()?;
    let records = records_from_scores(
        side.attack,
        &scores,
        &membership,
        &side.eval_mask,
        Exec::Parallel,
    )?;
    roc_csv(&roc_curve(&records)?, &side.config_hash)
}
