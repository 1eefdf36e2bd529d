//! Synthetic data and the canary families.
//!
//! Class means sit on scaled basis vectors `(s / sqrt 2) e_k`, so every pair is
//! exactly `s` apart and all class structure lives in the first `num_classes`
//! coordinates. The remaining "nuisance" coordinates are pure N(0, 1) noise and
//! hence symmetric under sign flips, which is what the flip augmentation
//! relies on (see [`crate::model::flip_start`]).

use rand::seq::index::sample;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::domain::{Dataset, Example};
use crate::error::{Error, Result};
use crate::rng::{derived_rng, tags, Rng};

/// Distance of a tail sub-cluster from its class mean, in within-class stds.
pub const TAIL_DISPLACEMENT: f64 = 3.0;

/// Holdout ids live far above any training id.
pub const HOLDOUT_ID_BASE: u64 = 1 << 62;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub dim: usize,
    /// Examples per class (fixed + audit together).
    pub per_class: usize,
    /// Pairwise distance between class means.
    pub separation: f64,
    /// Fraction of each class drawn from its displaced tail sub-cluster.
    pub tail_fraction: f64,
    /// Number of examples designated as audit slots.
    pub audit_count: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: 4,
            dim: 8,
            per_class: 500,
            separation: 6.0,
            tail_fraction: 0.05,
            audit_count: 500,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::InvalidConfig("num_classes must be >= 2".into()));
        }
        if self.dim < 2 {
            return Err(Error::InvalidConfig("dim must be >= 2".into()));
        }
        if self.dim < self.num_classes {
            return Err(Error::InvalidConfig(format!(
                "dim {} too small to place {} equidistant class means (need dim >= num_classes)",
                self.dim, self.num_classes
            )));
        }
        if self.per_class == 0 {
            return Err(Error::InvalidConfig("per_class must be >= 1".into()));
        }
        if !(self.separation >= 0.0) || !self.separation.is_finite() {
            return Err(Error::InvalidConfig(
                "separation must be finite and >= 0".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.tail_fraction) {
            return Err(Error::InvalidConfig(
                "tail_fraction must be in [0, 1)".into(),
            ));
        }
        let total = self.num_classes * self.per_class;
        if self.audit_count == 0 || self.audit_count > total {
            return Err(Error::InvalidConfig(format!(
                "audit_count must be in [1, {total}], got {}",
                self.audit_count
            )));
        }
        Ok(())
    }

    fn class_means(&self) -> Vec<Vec<f64>> {
        let scale = self.separation / std::f64::consts::SQRT_2;
        (0..self.num_classes)
            .map(|k| {
                let mut m = vec![0.0; self.dim];
                m[k] = scale;
                m
            })
            .collect()
    }

    /// Tail sub-cluster means: class mean plus a random unit direction in the
    /// class-signal subspace, scaled by [`TAIL_DISPLACEMENT`].
    fn tail_means(&self) -> Vec<Vec<f64>> {
        let mut rng = derived_rng(self.seed, &[tags::DATA, 0]);
        self.class_means()
            .into_iter()
            .map(|mut m| {
                let dir = unit_vector(&mut rng, self.num_classes);
                for (mi, di) in m.iter_mut().zip(dir) {
                    *mi += TAIL_DISPLACEMENT * di;
                }
                m
            })
            .collect()
    }

    fn draw_class(
        &self,
        rng: &mut Rng,
        count: usize,
        class: usize,
        means: &[Vec<f64>],
        tails: &[Vec<f64>],
    ) -> Vec<(Vec<f64>, usize)> {
        let n_tail = (self.tail_fraction * count as f64).round() as usize;
        (0..count)
            .map(|i| {
                let center = if i < n_tail {
                    &tails[class]
                } else {
                    &means[class]
                };
                (gaussian_around(rng, center, 1.0), class)
            })
            .collect()
    }
}

fn unit_vector(rng: &mut Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn gaussian_around(rng: &mut Rng, center: &[f64], std: f64) -> Vec<f64> {
    center
        .iter()
        .map(|&c| {
            let z: f64 = StandardNormal.sample(rng);
            c + std * z
        })
        .collect()
}

/// Draws the dataset; ids follow generation order, audit slots are a uniformly
/// random subset listed in id order.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let means = spec.class_means();
    let tails = spec.tail_means();
    let mut rng = derived_rng(spec.seed, &[tags::DATA, 1]);
    let mut all = Vec::with_capacity(spec.num_classes * spec.per_class);
    for k in 0..spec.num_classes {
        all.extend(spec.draw_class(&mut rng, spec.per_class, k, &means, &tails));
    }
    let examples: Vec<Example> = all
        .into_iter()
        .enumerate()
        .map(|(i, (f, y))| Example::new(f, y, i as u64))
        .collect();

    let mut audit_rng = derived_rng(spec.seed, &[tags::DATA, 2]);
    let mut is_audit = vec![false; examples.len()];
    for i in sample(&mut audit_rng, examples.len(), spec.audit_count) {
        is_audit[i] = true;
    }
    let (audit, fixed): (Vec<_>, Vec<_>) =
        examples.into_iter().zip(is_audit).partition(|(_, a)| *a);
    Dataset::new(
        fixed.into_iter().map(|(e, _)| e).collect(),
        audit.into_iter().map(|(e, _)| e).collect(),
        spec.num_classes,
        spec.dim,
    )
}

/// Fresh held-out examples from the same distribution, for measuring utility.
pub fn gen_holdout(spec: &SyntheticSpec, per_class: usize) -> Result<Vec<Example>> {
    spec.validate()?;
    let means = spec.class_means();
    let tails = spec.tail_means();
    let mut rng = derived_rng(spec.seed, &[tags::HOLDOUT]);
    let mut out = Vec::with_capacity(per_class * spec.num_classes);
    for k in 0..spec.num_classes {
        out.extend(spec.draw_class(&mut rng, per_class, k, &means, &tails));
    }
    Ok(out
        .into_iter()
        .enumerate()
        .map(|(i, (f, y))| Example::new(f, y, HOLDOUT_ID_BASE + i as u64))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CanaryFamily {
    None,
    Mislabeled,
    MislabeledDuplicate,
    Ood,
    Uniform,
}

impl CanaryFamily {
    pub fn as_str(self) -> &'static str {
        match self {
            CanaryFamily::None => "none",
            CanaryFamily::Mislabeled => "mislabeled",
            CanaryFamily::MislabeledDuplicate => "mislabeled-duplicate",
            CanaryFamily::Ood => "ood",
            CanaryFamily::Uniform => "uniform",
        }
    }
}

/// Replacement audit slots plus the mask of slots that are actually scored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CanarySet {
    pub family: CanaryFamily,
    pub examples: Vec<Example>,
    pub eval_mask: Vec<bool>,
}

impl CanarySet {
    /// The untouched audit set, every slot scored.
    pub fn none(dataset: &Dataset) -> Self {
        Self {
            family: CanaryFamily::None,
            examples: dataset.audit.clone(),
            eval_mask: vec![true; dataset.audit.len()],
        }
    }

    pub fn num_evaluated(&self) -> usize {
        self.eval_mask.iter().filter(|&&m| m).count()
    }

    /// `dataset` with its audit slots replaced by the canaries.
    pub fn apply(&self, dataset: &Dataset) -> Result<Dataset> {
        dataset.with_audit(self.examples.clone())
    }
}

fn random_other_label(rng: &mut Rng, label: usize, num_classes: usize) -> usize {
    let offset = rng.random_range(1..num_classes);
    (label + offset) % num_classes
}

/// Relabels every audit example with a uniformly random class other than its own.
pub fn make_mislabeled(dataset: &Dataset, seed: u64) -> Result<CanarySet> {
    if dataset.num_classes < 2 {
        return Err(Error::InvalidInput(
            "mislabeling needs at least 2 classes".into(),
        ));
    }
    let mut rng = derived_rng(seed, &[tags::CANARY, 1]);
    let examples = dataset
        .audit
        .iter()
        .map(|e| {
            let label = random_other_label(&mut rng, e.label, dataset.num_classes);
            Example::new(e.features.clone(), label, e.id)
        })
        .collect::<Vec<_>>();
    Ok(CanarySet {
        family: CanaryFamily::Mislabeled,
        eval_mask: vec![true; examples.len()],
        examples,
    })
}

/// Pairs the first half of the audit set with exact feature copies carrying a
/// fresh id and a wrong label. Slot `2i` holds the correctly labeled original,
/// slot `2i + 1` the mislabeled copy; only copies are scored.
pub fn make_duplicated_mislabeled(dataset: &Dataset, seed: u64) -> Result<CanarySet> {
    let c = dataset.num_audit();
    if c % 2 != 0 {
        return Err(Error::InvalidInput(format!(
            "duplicated canaries need an even audit size, got {c}"
        )));
    }
    if dataset.num_classes < 2 {
        return Err(Error::InvalidInput(
            "mislabeling needs at least 2 classes".into(),
        ));
    }
    let mut rng = derived_rng(seed, &[tags::CANARY, 2]);
    let mut next_id = dataset.next_id();
    let mut examples = Vec::with_capacity(c);
    let mut eval_mask = Vec::with_capacity(c);
    for original in &dataset.audit[..c / 2] {
        let wrong = random_other_label(&mut rng, original.label, dataset.num_classes);
        examples.push(original.clone());
        eval_mask.push(false);
        examples.push(Example::new(original.features.clone(), wrong, next_id));
        eval_mask.push(true);
        next_id += 1;
    }
    Ok(CanarySet {
        family: CanaryFamily::MislabeledDuplicate,
        examples,
        eval_mask,
    })
}

/// Out-of-distribution canaries: each drawn from N(center, I) where the center
/// is the global data mean displaced by `shift` along its own random direction.
pub fn make_ood(dataset: &Dataset, shift: f64, seed: u64) -> Result<CanarySet> {
    if !(shift >= 0.0) || !shift.is_finite() {
        return Err(Error::InvalidInput(
            "OOD shift must be finite and >= 0".into(),
        ));
    }
    let d = dataset.dim;
    let n = (dataset.fixed.len() + dataset.audit.len()) as f64;
    let mut mean = vec![0.0; d];
    for e in dataset.fixed.iter().chain(&dataset.audit) {
        for (m, x) in mean.iter_mut().zip(&e.features) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);

    let mut rng = derived_rng(seed, &[tags::CANARY, 3]);
    let examples = dataset
        .audit
        .iter()
        .map(|e| {
            let dir = unit_vector(&mut rng, d);
            let center: Vec<f64> = mean.iter().zip(&dir).map(|(m, u)| m + shift * u).collect();
            let features = gaussian_around(&mut rng, &center, 1.0);
            let label = rng.random_range(0..dataset.num_classes);
            Example::new(features, label, e.id)
        })
        .collect::<Vec<_>>();
    Ok(CanarySet {
        family: CanaryFamily::Ood,
        eval_mask: vec![true; examples.len()],
        examples,
    })
}

/// Canaries with i.i.d. uniform features on `[lo, hi]^d` and uniform labels.
pub fn make_uniform(dataset: &Dataset, lo: f64, hi: f64, seed: u64) -> Result<CanarySet> {
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::InvalidInput(format!(
            "uniform canaries need lo < hi, got [{lo}, {hi}]"
        )));
    }
    let mut rng = derived_rng(seed, &[tags::CANARY, 4]);
    let examples = dataset
        .audit
        .iter()
        .map(|e| {
            let features = (0..dataset.dim)
                .map(|_| rng.random_range(lo..=hi))
                .collect();
            let label = rng.random_range(0..dataset.num_classes);
            Example::new(features, label, e.id)
        })
        .collect::<Vec<_>>();
    Ok(CanarySet {
        family: CanaryFamily::Uniform,
        eval_mask: vec![true; examples.len()],
        examples,
    })
}

/// Serializable canary choice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum CanarySpec {
    None,
    Mislabeled,
    MislabeledDuplicate,
    Ood { shift: f64 },
    Uniform { lo: f64, hi: f64 },
}

impl CanarySpec {
    pub fn family(&self) -> CanaryFamily {
        match self {
            CanarySpec::None => CanaryFamily::None,
            CanarySpec::Mislabeled => CanaryFamily::Mislabeled,
            CanarySpec::MislabeledDuplicate => CanaryFamily::MislabeledDuplicate,
            CanarySpec::Ood { .. } => CanaryFamily::Ood,
            CanarySpec::Uniform { .. } => CanaryFamily::Uniform,
        }
    }

    pub fn build(&self, dataset: &Dataset, seed: u64) -> Result<CanarySet> {
        match *self {
            CanarySpec::None => Ok(CanarySet::none(dataset)),
            CanarySpec::Mislabeled => make_mislabeled(dataset, seed),
            CanarySpec::MislabeledDuplicate => make_duplicated_mislabeled(dataset, seed),
            CanarySpec::Ood { shift } => make_ood(dataset, shift, seed),
            CanarySpec::Uniform { lo, hi } => make_uniform(dataset, lo, hi, seed),
        }
    }
}
