//! Side-by-side comparison of audit reports.

use std::cmp::Ordering;
use std::path::Path;

use anyhow::{bail, Context, Result};
use miaudit::eval::report::REPORT_SCHEMA_VERSION;
use miaudit::eval::{AuditReport, Protocol};
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const UNDER_RESOLVED: &str = "under-resolved";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub fpr: f64,
    /// `None` when the report has no entry for this target.
    pub tpr: Option<f64>,
    pub under_resolved: bool,
}

impl Cell {
    fn render(&self) -> String {
        match self.tpr {
            Some(t) if !self.under_resolved => t.to_string(),
            _ => UNDER_RESOLVED.to_string(),
        }
    }

    fn resolved_tpr(&self) -> Option<f64> {
        self.tpr.filter(|_| !self.under_resolved)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub defense: String,
    pub attack: String,
    pub canary_family: String,
    pub protocol: Protocol,
    pub sample_mode: Option<String>,
    pub num_models: usize,
    pub test_accuracy: Option<f64>,
    pub config_hash: Option<String>,
    pub cells: Vec<Cell>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub fpr_grid: Vec<f64>,
    /// Target whose sample-level TPR orders the rows.
    pub sort_fpr: f64,
    pub rows: Vec<Row>,
}

/// Accepts a `reports.json` run file, a bare report, or an array of reports.
pub fn load_reports(path: &Path) -> Result<Vec<AuditReport>> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let value: Value =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let items = match value {
        Value::Object(ref m) if m.contains_key("reports") => {
            m["reports"].as_array().cloned().unwrap_or_default()
        }
        Value::Array(a) => a,
        other => vec![other],
    };
    items
        .into_iter()
        .map(|v| {
            let version = v.get("schema_version").and_then(Value::as_u64);
            if version != Some(u64::from(REPORT_SCHEMA_VERSION)) {
                bail!(
                    "{}: report schema version {version:?}, expected {REPORT_SCHEMA_VERSION}",
                    path.display()
                );
            }
            serde_json::from_value(v)
                .with_context(|| format!("decoding report in {}", path.display()))
        })
        .collect()
}

fn union_grid(reports: &[AuditReport]) -> Result<Vec<f64>> {
    let mut grid: Vec<f64> = reports.iter().flat_map(|r| r.fpr_targets()).collect();
    grid.sort_by(f64::total_cmp);
    grid.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
    // Reports may omit targets of a shared grid, but some report must carry
    // the full grid.
    let covers = |r: &AuditReport| grid.iter().all(|&g| r.at(g).is_some());
    if !reports.iter().any(covers) {
        let listed: Vec<String> = reports
            .iter()
            .map(|r| format!("{:?}", r.fpr_targets()))
            .collect();
        bail!("incompatible FPR grids: {}", listed.join(", "));
    }
    Ok(grid)
}

fn row_of(r: &AuditReport, grid: &[f64]) -> Row {
    let cells = grid
        .iter()
        .map(|&a| match r.at(a) {
            Some(t) => Cell {
                fpr: a,
                tpr: Some(t.tpr),
                under_resolved: t.under_resolved,
            },
            None => Cell {
                fpr: a,
                tpr: None,
                under_resolved: true,
            },
        })
        .collect();
    Row {
        defense: r.meta.defense.clone(),
        attack: r.meta.attack.clone(),
        canary_family: r.meta.canary_family.as_str().to_string(),
        protocol: r.protocol,
        sample_mode: r.sample_mode.map(|m| {
            serde_json::to_value(m)
                .ok()
                .and_then(|v| v.as_str().map(String::from))
                .unwrap_or_default()
        }),
        num_models: r.meta.num_models,
        test_accuracy: r.meta.test_accuracy,
        config_hash: r.meta.config_hash.clone(),
        cells,
    }
}

fn same_run(a: &Row, b: &Row) -> bool {
    a.defense == b.defense
        && a.attack == b.attack
        && a.canary_family == b.canary_family
        && a.config_hash == b.config_hash
}

pub fn compare(reports: &[AuditReport]) -> Result<Comparison> {
    if reports.len() < 2 {
        bail!("compare needs at least 2 reports, got {}", reports.len());
    }
    let grid = union_grid(reports)?;
    let rows: Vec<Row> = reports.iter().map(|r| row_of(r, &grid)).collect();
    let sample: Vec<&Row> = rows
        .iter()
        .filter(|r| r.protocol == Protocol::SampleLevel)
        .collect();
    let basis: Vec<&Row> = if sample.is_empty() {
        rows.iter().collect()
    } else {
        sample
    };
    let k = (0..grid.len())
        .find(|&k| basis.iter().all(|r| r.cells[k].resolved_tpr().is_some()))
        .unwrap_or(grid.len() - 1);

    let leakage = |row: &Row| -> f64 {
        let source = rows
            .iter()
            .find(|o| o.protocol == Protocol::SampleLevel && same_run(o, row))
            .unwrap_or(row);
        source.cells[k].tpr.unwrap_or(-1.0)
    };
    let mut keyed: Vec<(f64, Row)> = rows.iter().map(|r| (leakage(r), r.clone())).collect();
    keyed.sort_by(|(ka, a), (kb, b)| {
        kb.total_cmp(ka)
            .then_with(|| a.defense.cmp(&b.defense))
            .then_with(|| a.attack.cmp(&b.attack))
            .then_with(|| protocol_rank(a.protocol).cmp(&protocol_rank(b.protocol)))
            .then(Ordering::Equal)
    });
    Ok(Comparison {
        sort_fpr: grid[k],
        fpr_grid: grid,
        rows: keyed.into_iter().map(|(_, r)| r).collect(),
    })
}

fn protocol_rank(p: Protocol) -> u8 {
    match p {
        Protocol::SampleLevel => 0,
        Protocol::Population => 1,
    }
}

impl Comparison {
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header: Vec<String> = [
            "defense",
            "attack",
            "canary_family",
            "protocol",
            "sample_mode",
            "num_models",
            "test_accuracy",
        ]
        .map(String::from)
        .to_vec();
        header.extend(self.fpr_grid.iter().map(|a| format!("tpr@{a}")));
        w.write_record(&header)?;
        for r in &self.rows {
            let protocol = match r.protocol {
                Protocol::Population => "population",
                Protocol::SampleLevel => "sample-level",
            };
            let mut rec = vec![
                r.defense.clone(),
                r.attack.clone(),
                r.canary_family.clone(),
                protocol.to_string(),
                r.sample_mode.clone().unwrap_or_default(),
                r.num_models.to_string(),
                r.test_accuracy.map(|a| a.to_string()).unwrap_or_default(),
            ];
            rec.extend(r.cells.iter().map(Cell::render));
            w.write_record(&rec)?;
        }
        Ok(w.into_inner().map_err(|e| e.into_error())?)
    }
}
