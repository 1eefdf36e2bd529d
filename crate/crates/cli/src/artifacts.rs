//! On-disk artifact formats.
//!
//! Score tensors are a flat little-endian block: magic `MIAT`, u32 format
//! version, u32 S, u32 C, u32 A, then S*C*A f64 values in row-major
//! (model, audit, variant) order. Everything else lives in a JSON sidecar.

use std::io::Write;
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use miaudit::domain::{MembershipMatrix, ScoreTensor};
use miaudit::eval::roc::RocCurve;
use miaudit::eval::{AttackId, AuditReport};
use serde::{Deserialize, Serialize};

pub const MIAT_MAGIC: &[u8; 4] = b"MIAT";
pub const MIAT_VERSION: u32 = 1;

pub const CONFIG_FILE: &str = "config.json";
pub const SCORES_FILE: &str = "scores.miat";
pub const SIDECAR_FILE: &str = "scores.json";
pub const REPORTS_FILE: &str = "reports.json";
pub const ROC_FILE: &str = "roc.csv";

pub fn encode_miat(scores: &ScoreTensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + 8 * scores.values().len());
    out.extend_from_slice(MIAT_MAGIC);
    for v in [
        MIAT_VERSION,
        scores.num_models() as u32,
        scores.num_audit() as u32,
        scores.num_variants() as u32,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for x in scores.values() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

/// Decodes a MIAT block; variant names are placeholders until the sidecar
/// supplies the real ones.
pub fn decode_miat(bytes: &[u8]) -> Result<ScoreTensor> {
    ensure!(
        bytes.len() >= 20 && &bytes[..4] == MIAT_MAGIC,
        "not a MIAT score file"
    );
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    let (version, s, c, a) = (
        word(0),
        word(1) as usize,
        word(2) as usize,
        word(3) as usize,
    );
    ensure!(
        version == MIAT_VERSION,
        "unsupported MIAT version {version}"
    );
    let body = &bytes[20..];
    ensure!(
        body.len() == 8 * s * c * a,
        "MIAT body holds {} bytes, expected {}",
        body.len(),
        8 * s * c * a
    );
    let values = body
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect();
    let names = (0..a).map(|i| format!("v{i}")).collect();
    Ok(ScoreTensor::new(values, s, c, names)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoresSidecar {
    pub engine_version: String,
    pub config_hash: String,
    pub format: String,
    pub format_version: u32,
    pub num_models: usize,
    pub num_audit: usize,
    pub variants: Vec<String>,
    /// Concrete attack that produced the records from these scores.
    pub attack: AttackId,
    pub eval_mask: Vec<bool>,
    /// One string of `0`/`1` per model.
    pub membership: Vec<String>,
}

impl ScoresSidecar {
    pub fn new(
        config_hash: &str,
        scores: &ScoreTensor,
        membership: &MembershipMatrix,
        attack: AttackId,
        eval_mask: &[bool],
    ) -> Self {
        let membership = (0..membership.num_models())
            .map(|m| {
                membership
                    .row(m)
                    .iter()
                    .map(|&b| if b { '1' } else { '0' })
                    .collect()
            })
            .collect();
        Self {
            engine_version: miaudit::ENGINE_VERSION.to_string(),
            config_hash: config_hash.to_string(),
            format: "MIAT".into(),
            format_version: MIAT_VERSION,
            num_models: scores.num_models(),
            num_audit: scores.num_audit(),
            variants: scores.variant_names().to_vec(),
            attack,
            eval_mask: eval_mask.to_vec(),
            membership,
        }
    }

    pub fn membership(&self) -> Result<MembershipMatrix> {
        let mut bits = Vec::with_capacity(self.num_models * self.num_audit);
        for row in &self.membership {
            ensure!(
                row.len() == self.num_audit,
                "membership row has {} entries, expected {}",
                row.len(),
                self.num_audit
            );
            for ch in row.chars() {
                bits.push(match ch {
                    '0' => false,
                    '1' => true,
                    other => bail!("membership row holds {other:?}"),
                });
            }
        }
        Ok(MembershipMatrix::from_bits(
            bits,
            self.num_models,
            self.num_audit,
        )?)
    }
}

/// Loads the tensor and sidecar of a run directory, checking they agree.
pub fn load_scores(dir: &Path) -> Result<(ScoreTensor, ScoresSidecar)> {
    let side: ScoresSidecar = read_json(&dir.join(SIDECAR_FILE))?;
    let bytes = std::fs::read(dir.join(SCORES_FILE))
        .with_context(|| format!("reading {}", dir.join(SCORES_FILE).display()))?;
    let raw = decode_miat(&bytes)?;
    ensure!(
        raw.num_models() == side.num_models
            && raw.num_audit() == side.num_audit
            && raw.num_variants() == side.variants.len(),
        "score tensor shape disagrees with its sidecar"
    );
    let scores = ScoreTensor::new(
        raw.values().to_vec(),
        side.num_models,
        side.num_audit,
        side.variants.clone(),
    )?;
    Ok((scores, side))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportsFile {
    pub engine_version: String,
    pub config_hash: String,
    pub reports: Vec<AuditReport>,
}

/// ROC points as CSV; the first line is a comment with version and hash.
pub fn roc_csv(curve: &RocCurve, config_hash: &str) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    writeln!(
        out,
        "# miaudit {} config {}",
        miaudit::ENGINE_VERSION,
        config_hash
    )?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["threshold", "tpr", "fpr"])?;
    for p in &curve.points {
        w.write_record([
            p.threshold.to_string(),
            p.tpr.to_string(),
            p.fpr.to_string(),
        ])?;
    }
    Ok(w.into_inner().map_err(|e| e.into_error())?)
}

pub fn to_json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    Ok(bytes)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Writes through a temporary file so readers never see partial artifacts.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    std::fs::rename(&tmp, path).with_context(|| format!("renaming to {}", path.display()))?;
    Ok(())
}
