//! Fleet training, attack scoring and the leave-one-out audit protocol.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::report::{population_report, sample_level_report, AuditReport, ReportMeta, SampleMode};
use super::roc::roc_curve;
use crate::attacks::{
    contrastive_similarity_score, global_threshold_scores, hinge_from_probs, hinge_score,
    label_only_attack, label_only_features, lira_attack, logit_score, AttackScoreRecord,
    LabelOnlyFeature, LiraMode, ScoreKind, SimilarityMode,
};
use crate::data::{gen_holdout, gen_synthetic, CanaryFamily, CanarySpec, SyntheticSpec};
use crate::defenses::{accuracy, DefenseConfig};
use crate::domain::{
    assign_memberships, training_set_for, Dataset, Example, MembershipMatrix, ScoreTensor,
};
use crate::error::{Error, Result};
use crate::model::{
    flip_start, query_augmentations, softmax, AugmentationPolicy, Model, QueryAugmentation,
};
use crate::parallel::Exec;
use crate::rng::{derive_seed, tags};

/// Which training-set memberships vary across the fleet.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MembershipMode {
    /// Only audit slots vary; the fixed set is in every model.
    #[default]
    FixNonAudit,
    /// The fixed set becomes extra audit columns with their own balanced
    /// memberships. Only the original audit slots are scored.
    VaryAll,
}

/// Registered attack identifiers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AttackId {
    /// Best of the four LiRA variants by TPR at the smallest resolvable target.
    Lira,
    LiraVariant(ScoreKind, LiraMode),
    GlobalThreshold,
    LabelOnly,
    ContrastiveWhite,
    ContrastiveBlack,
}

impl AttackId {
    pub const IDS: [&'static str; 9] = [
        "lira",
        "lira-hinge-single",
        "lira-hinge-multi",
        "lira-logit-single",
        "lira-logit-multi",
        "global-threshold",
        "label-only",
        "contrastive-white",
        "contrastive-black",
    ];

    pub const LIRA_VARIANTS: [AttackId; 4] = [
        AttackId::LiraVariant(ScoreKind::Hinge, LiraMode::Single),
        AttackId::LiraVariant(ScoreKind::Hinge, LiraMode::Multivariate),
        AttackId::LiraVariant(ScoreKind::Logit, LiraMode::Single),
        AttackId::LiraVariant(ScoreKind::Logit, LiraMode::Multivariate),
    ];
}

impl fmt::Display for AttackId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AttackId::Lira => f.write_str("lira"),
            AttackId::LiraVariant(k, m) => write!(f, "lira-{}-{}", k.as_str(), m.as_str()),
            AttackId::GlobalThreshold => f.write_str("global-threshold"),
            AttackId::LabelOnly => f.write_str("label-only"),
            AttackId::ContrastiveWhite => f.write_str("contrastive-white"),
            AttackId::ContrastiveBlack => f.write_str("contrastive-black"),
        }
    }
}

impl FromStr for AttackId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "lira" => AttackId::Lira,
            "lira-hinge-single" => AttackId::LIRA_VARIANTS[0],
            "lira-hinge-multi" => AttackId::LIRA_VARIANTS[1],
            "lira-logit-single" => AttackId::LIRA_VARIANTS[2],
            "lira-logit-multi" => AttackId::LIRA_VARIANTS[3],
            "global-threshold" => AttackId::GlobalThreshold,
            "label-only" => AttackId::LabelOnly,
            "contrastive-white" => AttackId::ContrastiveWhite,
            "contrastive-black" => AttackId::ContrastiveBlack,
            other => {
                return Err(Error::InvalidConfig(format!(
                    "unknown attack id {other:?}; known: {}",
                    AttackId::IDS.join(", ")
                )))
            }
        })
    }
}

impl Serialize for AttackId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for AttackId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Query-side attack settings shared by every model in an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackParams {
    /// Fixed query augmentations (identity first) for multivariate LiRA and
    /// label-only features.
    pub num_augmentations: usize,
    /// Std of the fixed additive offsets of the query augmentations.
    pub query_noise: f64,
    /// Augmentation pairs per contrastive similarity query.
    pub repeats: usize,
    pub similarity_augmentation: AugmentationPolicy,
}

impl Default for AttackParams {
    fn default() -> Self {
        Self {
            num_augmentations: 18,
            query_noise: 0.5,
            repeats: crate::attacks::contrastive::DEFAULT_REPEATS,
            similarity_augmentation: AugmentationPolicy::default(),
        }
    }
}

impl AttackParams {
    pub fn validate(&self) -> Result<()> {
        if self.num_augmentations == 0 || self.repeats == 0 {
            return Err(Error::InvalidConfig(
                "num_augmentations and repeats must be >= 1".into(),
            ));
        }
        if !(self.query_noise >= 0.0) || !self.query_noise.is_finite() {
            return Err(Error::InvalidConfig(
                "query_noise must be finite and >= 0".into(),
            ));
        }
        self.similarity_augmentation.validate()
    }
}

/// Everything that determines one audit run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub dataset: SyntheticSpec,
    pub canaries: CanarySpec,
    pub defense: DefenseConfig,
    pub attack: AttackId,
    #[serde(default)]
    pub attack_params: AttackParams,
    pub num_models: usize,
    #[serde(default = "default_targets")]
    pub fpr_targets: Vec<f64>,
    pub seed: u64,
    #[serde(default)]
    pub membership_mode: MembershipMode,
    /// Held-out examples per class for test accuracy; 0 disables it.
    #[serde(default = "default_holdout")]
    pub holdout_per_class: usize,
}

fn default_targets() -> Vec<f64> {
    super::report::DEFAULT_FPR_TARGETS.to_vec()
}

fn default_holdout() -> usize {
    250
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.attack_params.validate()?;
        if self.num_models < 2 || self.num_models % 2 == 1 {
            return Err(Error::Balance(self.num_models));
        }
        if self.num_models < 4 {
            return Err(Error::InvalidConfig(format!(
                "leave-one-out needs at least 4 models, got {}",
                self.num_models
            )));
        }
        if self.fpr_targets.is_empty() || self.fpr_targets.iter().any(|t| !(0.0..=1.0).contains(t))
        {
            return Err(Error::InvalidConfig(format!(
                "FPR targets must lie in [0, 1]: {:?}",
                self.fpr_targets
            )));
        }
        Ok(())
    }
}

/// Dataset with canaries applied, memberships and the evaluated columns:
/// everything needed before training.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedAudit {
    pub dataset: Dataset,
    pub family: CanaryFamily,
    pub membership: MembershipMatrix,
    /// Per membership column: whether its records are scored.
    pub eval_mask: Vec<bool>,
    /// Columns before the original audit slots (non-zero under vary-all).
    pub audit_offset: usize,
    pub holdout: Vec<Example>,
}

pub fn prepare(spec: &ExperimentSpec) -> Result<PreparedAudit> {
    spec.validate()?;
    let base = gen_synthetic(&spec.dataset)?;
    let canaries = spec.canaries.build(&base, spec.seed)?;
    let canaried = canaries.apply(&base)?;
    let (dataset, eval_mask, audit_offset) = match spec.membership_mode {
        MembershipMode::FixNonAudit => (canaried, canaries.eval_mask.clone(), 0),
        MembershipMode::VaryAll => {
            let offset = canaried.fixed.len();
            let audit: Vec<Example> = canaried
                .fixed
                .iter()
                .chain(&canaried.audit)
                .cloned()
                .collect();
            let mask = std::iter::repeat_n(false, offset)
                .chain(canaries.eval_mask.iter().copied())
                .collect();
            (
                Dataset::new(Vec::new(), audit, canaried.num_classes, canaried.dim)?,
                mask,
                offset,
            )
        }
    };
    let membership = assign_memberships(spec.num_models, dataset.num_audit(), spec.seed)?;
    let holdout = if spec.holdout_per_class > 0 {
        gen_holdout(&spec.dataset, spec.holdout_per_class)?
    } else {
        Vec::new()
    };
    Ok(PreparedAudit {
        dataset,
        family: canaries.family,
        membership,
        eval_mask,
        audit_offset,
        holdout,
    })
}

pub fn model_seed(experiment_seed: u64, model_index: usize) -> u64 {
    derive_seed(experiment_seed, &[tags::MODEL, model_index as u64])
}

/// Trains one model per membership row, in parallel across models.
pub fn train_fleet(
    dataset: &Dataset,
    membership: &MembershipMatrix,
    defense: &DefenseConfig,
    seed: u64,
    exec: Exec,
) -> Result<Vec<Model>> {
    exec.try_map(membership.num_models(), |i| {
        let train = training_set_for(dataset, membership, i)?;
        defense.train(&train, dataset.num_classes, model_seed(seed, i))
    })
}

/// Mean test accuracy over the fleet.
pub fn fleet_accuracy(models: &[Model], holdout: &[Example], exec: Exec) -> Option<f64> {
    if holdout.is_empty() || models.is_empty() {
        return None;
    }
    let accs = exec.map(models.len(), |i| accuracy(&models[i], holdout));
    Some(accs.iter().sum::<f64>() / models.len() as f64)
}

fn query_seed(seed: u64, audit: usize, variant: usize) -> u64 {
    derive_seed(seed, &[tags::QUERY, audit as u64, variant as u64])
}

/// One statistic per (model, audit sample, query augmentation). Masked models
/// are scored from their (masked) probabilities.
pub fn query_scores(
    models: &[Model],
    audit: &[Example],
    kind: ScoreKind,
    augs: &[QueryAugmentation],
    flip_from: usize,
    seed: u64,
    exec: Exec,
) -> Result<ScoreTensor> {
    let rows = exec.try_map(models.len(), |m| {
        let model = &models[m];
        let mut row = Vec::with_capacity(audit.len() * augs.len());
        for (j, x) in audit.iter().enumerate() {
            for (a, aug) in augs.iter().enumerate() {
                let q = aug.apply(&x.features, flip_from);
                let s = match (kind, model.logits(&q)) {
                    (ScoreKind::Hinge, Some(z)) => hinge_score(&z, x.label)?,
                    (ScoreKind::Logit, Some(z)) => logit_score(&softmax(&z), x.label)?,
                    (ScoreKind::Hinge, None) => hinge_from_probs(
                        &model.predict_seeded(&q, query_seed(seed, j, a)),
                        x.label,
                    )?,
                    (ScoreKind::Logit, None) => {
                        logit_score(&model.predict_seeded(&q, query_seed(seed, j, a)), x.label)?
                    }
                };
                row.push(s);
            }
        }
        Ok::<_, Error>(row)
    })?;
    let names = augs.iter().enumerate().map(|(i, a)| a.name(i)).collect();
    ScoreTensor::new(rows.concat(), models.len(), audit.len(), names)
}

/// Label-only correctness bits stored as 0/1 entries of a score tensor.
pub fn label_only_tensor(
    models: &[Model],
    audit: &[Example],
    augs: &[QueryAugmentation],
    flip_from: usize,
    seed: u64,
    exec: Exec,
) -> Result<ScoreTensor> {
    let rows = exec.map(models.len(), |m| {
        audit
            .iter()
            .enumerate()
            .flat_map(|(j, x)| {
                let f = label_only_features(
                    &models[m],
                    x,
                    augs,
                    flip_from,
                    derive_seed(seed, &[tags::QUERY, j as u64]),
                );
                f.bits.into_iter().map(|b| if b { 1.0 } else { 0.0 })
            })
            .collect::<Vec<f64>>()
    });
    let names = augs.iter().enumerate().map(|(i, a)| a.name(i)).collect();
    ScoreTensor::new(rows.concat(), models.len(), audit.len(), names)
}

/// Contrastive similarity per (model, audit sample); augmentation draws depend
/// only on the audit index, so every model sees the same query pairs.
pub fn similarity_tensor(
    models: &[Model],
    audit: &[Example],
    params: &AttackParams,
    mode: SimilarityMode,
    flip_from: usize,
    seed: u64,
    exec: Exec,
) -> Result<ScoreTensor> {
    let rows = exec.try_map(models.len(), |m| {
        audit
            .iter()
            .enumerate()
            .map(|(j, x)| {
                contrastive_similarity_score(
                    &models[m],
                    &x.features,
                    params.repeats,
                    &params.similarity_augmentation,
                    flip_from,
                    mode,
                    derive_seed(seed, &[tags::SIMILARITY, j as u64]),
                )
            })
            .collect::<Result<Vec<f64>>>()
    })?;
    let name = match mode {
        SimilarityMode::WhiteBox => "embedding-similarity",
        SimilarityMode::BlackBox => "logit-similarity",
    };
    ScoreTensor::new(
        rows.concat(),
        models.len(),
        audit.len(),
        vec![name.to_string()],
    )
}

fn masked(
    records: Vec<AttackScoreRecord>,
    eval_mask: &[bool],
) -> impl Iterator<Item = AttackScoreRecord> + '_ {
    records
        .into_iter()
        .filter(move |r| eval_mask[r.audit_index])
}

/// Leave-one-out records for a concrete (non-"best of") attack on a
/// precomputed tensor: every model is the victim once, the rest are shadows.
/// Records come victim-major, audit index ascending.
pub fn records_from_scores(
    attack: AttackId,
    scores: &ScoreTensor,
    membership: &MembershipMatrix,
    eval_mask: &[bool],
    exec: Exec,
) -> Result<Vec<AttackScoreRecord>> {
    if eval_mask.len() != scores.num_audit() {
        return Err(Error::InvalidInput(
            "eval mask length differs from the audit count".into(),
        ));
    }
    let per_victim = exec.try_map(scores.num_models(), |v| -> Result<Vec<AttackScoreRecord>> {
        let recs = match attack {
            AttackId::LiraVariant(_, mode) => lira_attack(scores, membership, v, mode)?,
            AttackId::GlobalThreshold => global_threshold_scores(scores, membership, v)?,
            AttackId::ContrastiveWhite | AttackId::ContrastiveBlack => {
                lira_attack(scores, membership, v, LiraMode::Single)?
            }
            AttackId::LabelOnly => label_only_victim(scores, membership, v, eval_mask),
            AttackId::Lira => {
                return Err(Error::InvalidInput(
                    "resolve the best LiRA variant before replaying scores".into(),
                ))
            }
        };
        Ok(masked(recs, eval_mask).collect())
    })?;
    Ok(per_victim.concat())
}

fn label_only_victim(
    scores: &ScoreTensor,
    membership: &MembershipMatrix,
    victim: usize,
    eval_mask: &[bool],
) -> Vec<AttackScoreRecord> {
    let feature = |m: usize, j: usize| LabelOnlyFeature {
        bits: scores.cell(m, j).iter().map(|&b| b > 0.5).collect(),
    };
    let mut out = Vec::new();
    for j in (0..scores.num_audit()).filter(|&j| eval_mask[j]) {
        let shadows: Vec<usize> = (0..scores.num_models()).filter(|&m| m != victim).collect();
        let feats: Vec<LabelOnlyFeature> = shadows.iter().map(|&m| feature(m, j)).collect();
        let refs: Vec<&LabelOnlyFeature> = feats.iter().collect();
        let members: Vec<bool> = shadows.iter().map(|&m| membership.get(m, j)).collect();
        match label_only_attack(&refs, &members, &feature(victim, j)) {
            Ok(s) => out.push(AttackScoreRecord {
                victim_index: victim,
                audit_index: j,
                attack_score: s,
                is_member: membership.get(victim, j),
            }),
            Err(e) => log::warn!("skipping audit sample {j} for victim {victim}: {e}"),
        }
    }
    out
}

/// Output of one leave-one-out audit.
#[derive(Debug, Clone, PartialEq)]
pub struct AuditRun {
    /// Concrete attack that produced `records` (the winning variant for `lira`).
    pub attack: AttackId,
    pub scores: ScoreTensor,
    pub membership: MembershipMatrix,
    pub eval_mask: Vec<bool>,
    pub records: Vec<AttackScoreRecord>,
}

/// Smallest target that the records can resolve, else the largest target.
pub fn smallest_resolvable(records: &[AttackScoreRecord], targets: &[f64]) -> f64 {
    let negatives = records.iter().filter(|r| !r.is_member).count() as f64;
    let mut sorted = targets.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted
        .iter()
        .copied()
        .find(|a| negatives * a >= 1.0)
        .unwrap_or(*sorted.last().unwrap_or(&1.0))
}

fn pooled_tpr(records: &[AttackScoreRecord], alpha: f64) -> f64 {
    roc_curve(records)
        .and_then(|c| c.operating_point(alpha))
        .map(|p| p.tpr)
        .unwrap_or(0.0)
}

/// Scores a trained fleet with `attack` and returns leave-one-out records.
pub fn audit_fleet(
    prepared: &PreparedAudit,
    models: &[Model],
    attack: AttackId,
    params: &AttackParams,
    fpr_targets: &[f64],
    seed: u64,
    exec: Exec,
) -> Result<AuditRun> {
    let ds = &prepared.dataset;
    let flip_from = flip_start(ds.num_classes);
    let augs = query_augmentations(ds.dim, params.num_augmentations, params.query_noise, seed);
    let run = |attack: AttackId, scores: ScoreTensor| -> Result<AuditRun> {
        let records = records_from_scores(
            attack,
            &scores,
            &prepared.membership,
            &prepared.eval_mask,
            exec,
        )?;
        Ok(AuditRun {
            attack,
            scores,
            membership: prepared.membership.clone(),
            eval_mask: prepared.eval_mask.clone(),
            records,
        })
    };
    match attack {
        AttackId::Lira => {
            let mut best: Option<(f64, AuditRun)> = None;
            for kind in [ScoreKind::Hinge, ScoreKind::Logit] {
                let scores = query_scores(models, &ds.audit, kind, &augs, flip_from, seed, exec)?;
                for mode in [LiraMode::Single, LiraMode::Multivariate] {
                    let r = run(AttackId::LiraVariant(kind, mode), scores.clone())?;
                    let tpr = pooled_tpr(&r.records, smallest_resolvable(&r.records, fpr_targets));
                    if best.as_ref().is_none_or(|(b, _)| tpr > *b) {
                        best = Some((tpr, r));
                    }
                }
            }
            Ok(best.expect("four variants evaluated").1)
        }
        AttackId::LiraVariant(kind, _) => run(
            attack,
            query_scores(models, &ds.audit, kind, &augs, flip_from, seed, exec)?,
        ),
        AttackId::GlobalThreshold => {
            let scores = query_scores(
                models,
                &ds.audit,
                ScoreKind::Logit,
                &augs[..1],
                flip_from,
                seed,
                exec,
            )?;
            run(attack, scores)
        }
        AttackId::LabelOnly => run(
            attack,
            label_only_tensor(models, &ds.audit, &augs, flip_from, seed, exec)?,
        ),
        AttackId::ContrastiveWhite => run(
            attack,
            similarity_tensor(
                models,
                &ds.audit,
                params,
                SimilarityMode::WhiteBox,
                flip_from,
                seed,
                exec,
            )?,
        ),
        AttackId::ContrastiveBlack => run(
            attack,
            similarity_tensor(
                models,
                &ds.audit,
                params,
                SimilarityMode::BlackBox,
                flip_from,
                seed,
                exec,
            )?,
        ),
    }
}

/// Trained fleet plus the audit of one attack.
#[derive(Debug, Clone)]
pub struct LeaveOneOut {
    pub prepared: PreparedAudit,
    pub models: Vec<Model>,
    pub run: AuditRun,
    pub test_accuracy: Option<f64>,
}

/// Prepares data, trains `S` models and runs the attack with each model as
/// the victim once.
pub fn run_leave_one_out(spec: &ExperimentSpec, exec: Exec) -> Result<LeaveOneOut> {
    let prepared = prepare(spec)?;
    let models = train_fleet(
        &prepared.dataset,
        &prepared.membership,
        &spec.defense,
        spec.seed,
        exec,
    )?;
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
    Ok(LeaveOneOut {
        prepared,
        models,
        run,
        test_accuracy,
    })
}

/// Metadata for reports of `spec`'s run.
pub fn report_meta(
    spec: &ExperimentSpec,
    run: &AuditRun,
    family: CanaryFamily,
    test_accuracy: Option<f64>,
) -> ReportMeta {
    let mut seeds = std::collections::BTreeMap::new();
    seeds.insert("experiment".to_string(), spec.seed);
    seeds.insert("dataset".to_string(), spec.dataset.seed);
    ReportMeta {
        canary_family: family,
        defense: spec.defense.id().to_string(),
        attack: run.attack.to_string(),
        num_models: run.membership.num_models(),
        num_audit: run.eval_mask.iter().filter(|&&m| m).count(),
        seeds,
        mechanism: spec.defense.mechanism_params(),
        test_accuracy,
        config_hash: None,
    }
}

/// Population report plus the sample-level report matching the canary
/// family: pooled over canaries when there are canaries, per-sample otherwise.
pub fn standard_reports(spec: &ExperimentSpec, loo: &LeaveOneOut) -> Result<Vec<AuditReport>> {
    let meta = report_meta(spec, &loo.run, loo.prepared.family, loo.test_accuracy);
    let population = population_report(&loo.run.records, &spec.fpr_targets, meta.clone())?;
    let mode = if loo.prepared.family == CanaryFamily::None {
        SampleMode::PerSample
    } else {
        SampleMode::PooledCanaries
    };
    let sample = sample_level_report(&loo.run.records, mode, &spec.fpr_targets, meta)?;
    Ok(vec![population, sample])
}

/// Runs `spec` under both membership regimes and returns the population
/// reports `(fix-non-audit, vary-all)` over the same scored slots.
pub fn membership_mode_check(
    spec: &ExperimentSpec,
    exec: Exec,
) -> Result<(AuditReport, AuditReport)> {
    let mut out = Vec::with_capacity(2);
    for mode in [MembershipMode::FixNonAudit, MembershipMode::VaryAll] {
        let s = ExperimentSpec {
            membership_mode: mode,
            ..spec.clone()
        };
        let loo = run_leave_one_out(&s, exec)?;
        let mut records = loo.run.records.clone();
        for r in &mut records {
            r.audit_index -= loo.prepared.audit_offset;
        }
        let meta = report_meta(&s, &loo.run, loo.prepared.family, loo.test_accuracy);
        out.push(population_report(&records, &s.fpr_targets, meta)?);
    }
    let vary = out.pop().expect("two runs");
    Ok((out.pop().expect("two runs"), vary))
}
