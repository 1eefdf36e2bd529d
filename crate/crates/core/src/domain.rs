//! Shared domain types and balanced membership assignment.

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derived_rng, tags};

/// One labeled feature vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub features: Vec<f64>,
    pub label: usize,
    pub id: u64,
}

impl Example {
    pub fn new(features: Vec<f64>, label: usize, id: u64) -> Self {
        Self {
            features,
            label,
            id,
        }
    }
}

/// Training data split into examples every model sees (`fixed`) and audit
/// slots whose membership varies across the fleet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub fixed: Vec<Example>,
    pub audit: Vec<Example>,
    pub num_classes: usize,
    pub dim: usize,
}

impl Dataset {
    pub fn new(
        fixed: Vec<Example>,
        audit: Vec<Example>,
        num_classes: usize,
        dim: usize,
    ) -> Result<Self> {
        let ds = Self {
            fixed,
            audit,
            num_classes,
            dim,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.audit.is_empty() {
            return Err(Error::EmptyAudit);
        }
        if self.num_classes == 0 {
            return Err(Error::InvalidInput("num_classes must be positive".into()));
        }
        let mut ids = std::collections::BTreeSet::new();
        for ex in self.fixed.iter().chain(&self.audit) {
            if ex.features.len() != self.dim {
                return Err(Error::InvalidInput(format!(
                    "example {} has dimension {}, expected {}",
                    ex.id,
                    ex.features.len(),
                    self.dim
                )));
            }
            if ex.features.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidInput(format!(
                    "example {} has non-finite features",
                    ex.id
                )));
            }
            if ex.label >= self.num_classes {
                return Err(Error::InvalidInput(format!(
                    "example {} has label {} >= {}",
                    ex.id, ex.label, self.num_classes
                )));
            }
            if !ids.insert(ex.id) {
                return Err(Error::InvalidInput(format!(
                    "duplicate example id {}",
                    ex.id
                )));
            }
        }
        Ok(())
    }

    pub fn num_audit(&self) -> usize {
        self.audit.len()
    }

    /// Same fixed set, different audit slots.
    pub fn with_audit(&self, audit: Vec<Example>) -> Result<Self> {
        Self::new(self.fixed.clone(), audit, self.num_classes, self.dim)
    }

    /// Smallest id not used by any example; callers minting new ids start here.
    pub fn next_id(&self) -> u64 {
        self.fixed
            .iter()
            .chain(&self.audit)
            .map(|e| e.id + 1)
            .max()
            .unwrap_or(0)
    }
}

/// S x C membership bits, row = model, column = audit sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MembershipMatrix {
    bits: Vec<bool>,
    num_models: usize,
    num_audit: usize,
}

impl MembershipMatrix {
    /// Builds a matrix from row-major bits, checking that every column is balanced.
    pub fn from_bits(bits: Vec<bool>, num_models: usize, num_audit: usize) -> Result<Self> {
        if num_models < 2 || num_models % 2 != 0 {
            return Err(Error::Balance(num_models));
        }
        if num_audit == 0 {
            return Err(Error::EmptyAudit);
        }
        if bits.len() != num_models * num_audit {
            return Err(Error::InvalidInput(format!(
                "expected {} membership bits, got {}",
                num_models * num_audit,
                bits.len()
            )));
        }
        let m = Self {
            bits,
            num_models,
            num_audit,
        };
        for j in 0..num_audit {
            let sum = m.column_sum(j);
            if sum != num_models / 2 {
                return Err(Error::InvalidInput(format!(
                    "column {j} sums to {sum}, expected {}",
                    num_models / 2
                )));
            }
        }
        Ok(m)
    }

    pub fn num_models(&self) -> usize {
        self.num_models
    }

    pub fn num_audit(&self) -> usize {
        self.num_audit
    }

    pub fn get(&self, model: usize, audit: usize) -> bool {
        self.bits[model * self.num_audit + audit]
    }

    pub fn row(&self, model: usize) -> &[bool] {
        &self.bits[model * self.num_audit..(model + 1) * self.num_audit]
    }

    pub fn column_sum(&self, audit: usize) -> usize {
        (0..self.num_models).filter(|&m| self.get(m, audit)).count()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }
}

/// Draws, for each audit column independently, a uniformly random set of
/// exactly `num_models / 2` member rows.
pub fn assign_memberships(
    num_models: usize,
    num_audit: usize,
    seed: u64,
) -> Result<MembershipMatrix> {
    if num_models < 2 || num_models % 2 != 0 {
        return Err(Error::Balance(num_models));
    }
    if num_audit == 0 {
        return Err(Error::EmptyAudit);
    }
    let mut bits = vec![false; num_models * num_audit];
    for j in 0..num_audit {
        let mut rng = derived_rng(seed, &[tags::MEMBERSHIP, j as u64]);
        for m in sample(&mut rng, num_models, num_models / 2) {
            bits[m * num_audit + j] = true;
        }
    }
    Ok(MembershipMatrix {
        bits,
        num_models,
        num_audit,
    })
}

/// Training data of model `model_index`: the fixed set followed by its member
/// audit samples in audit order.
pub fn training_set_for(
    dataset: &Dataset,
    membership: &MembershipMatrix,
    model_index: usize,
) -> Result<Vec<Example>> {
    if model_index >= membership.num_models() {
        return Err(Error::IndexOutOfRange {
            index: model_index,
            len: membership.num_models(),
        });
    }
    if membership.num_audit() != dataset.num_audit() {
        return Err(Error::InvalidInput(format!(
            "membership has {} audit columns, dataset has {}",
            membership.num_audit(),
            dataset.num_audit()
        )));
    }
    let row = membership.row(model_index);
    let mut out = dataset.fixed.clone();
    out.extend(
        dataset
            .audit
            .iter()
            .zip(row)
            .filter(|(_, &m)| m)
            .map(|(e, _)| e.clone()),
    );
    Ok(out)
}

/// S models x C audit samples x A query variants of attack statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreTensor {
    values: Vec<f64>,
    num_models: usize,
    num_audit: usize,
    variant_names: Vec<String>,
}

impl ScoreTensor {
    pub fn new(
        values: Vec<f64>,
        num_models: usize,
        num_audit: usize,
        variant_names: Vec<String>,
    ) -> Result<Self> {
        let a = variant_names.len();
        if a == 0 {
            return Err(Error::InvalidInput(
                "score tensor needs at least one variant".into(),
            ));
        }
        if values.len() != num_models * num_audit * a {
            return Err(Error::InvalidInput(format!(
                "score tensor expects {} values, got {}",
                num_models * num_audit * a,
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "non-finite score at flat index {pos}"
            )));
        }
        Ok(Self {
            values,
            num_models,
            num_audit,
            variant_names,
        })
    }

    pub fn num_models(&self) -> usize {
        self.num_models
    }

    pub fn num_audit(&self) -> usize {
        self.num_audit
    }

    pub fn num_variants(&self) -> usize {
        self.variant_names.len()
    }

    pub fn variant_names(&self) -> &[String] {
        &self.variant_names
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, model: usize, audit: usize, variant: usize) -> f64 {
        self.values[self.offset(model, audit) + variant]
    }

    /// All variants for one (model, audit sample) cell.
    pub fn cell(&self, model: usize, audit: usize) -> &[f64] {
        let o = self.offset(model, audit);
        &self.values[o..o + self.num_variants()]
    }

    fn offset(&self, model: usize, audit: usize) -> usize {
        (model * self.num_audit + audit) * self.num_variants()
    }

    /// Keeps only the first `count` variants.
    pub fn truncate_variants(&self, count: usize) -> Result<Self> {
        if count == 0 || count > self.num_variants() {
            return Err(Error::InvalidInput(format!("cannot keep {count} variants")));
        }
        let mut values = Vec::with_capacity(self.num_models * self.num_audit * count);
        for m in 0..self.num_models {
            for j in 0..self.num_audit {
                values.extend_from_slice(&self.cell(m, j)[..count]);
            }
        }
        Self::new(
            values,
            self.num_models,
            self.num_audit,
            self.variant_names[..count].to_vec(),
        )
    }

    /// Reorders the model axis: row `i` of the result is row `order[i]` of `self`.
    pub fn permute_models(&self, order: &[usize]) -> Self {
        let mut values = Vec::with_capacity(self.values.len());
        for &m in order {
            for j in 0..self.num_audit {
                values.extend_from_slice(self.cell(m, j));
            }
        }
        Self {
            values,
            num_models: order.len(),
            num_audit: self.num_audit,
            variant_names: self.variant_names.clone(),
        }
    }
}

impl MembershipMatrix {
    /// Reorders rows like [`ScoreTensor::permute_models`].
    pub fn permute_models(&self, order: &[usize]) -> Self {
        let mut bits = Vec::with_capacity(self.bits.len());
        for &m in order {
            bits.extend_from_slice(self.row(m));
        }
        Self {
            bits,
            num_models: self.num_models,
            num_audit: self.num_audit,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_dataset(fixed: usize, audit: usize) -> Dataset {
        let mk = |i: usize| Example::new(vec![i as f64, 0.0], i % 2, i as u64);
        Dataset::new(
            (0..fixed).map(mk).collect(),
            (fixed..fixed + audit).map(mk).collect(),
            2,
            2,
        )
        .unwrap()
    }

    #[test]
    fn columns_are_exactly_half() {
        let m = assign_memberships(2, 3, 0).unwrap();
        for j in 0..3 {
            assert_eq!(m.column_sum(j), 1);
        }
        let m = assign_memberships(64, 500, 7).unwrap();
        assert!((0..500).all(|j| m.column_sum(j) == 32));
    }

    #[test]
    fn odd_or_empty_rejected() {
        assert!(matches!(
            assign_memberships(3, 1, 0),
            Err(Error::Balance(3))
        ));
        assert!(matches!(
            assign_memberships(0, 1, 0),
            Err(Error::Balance(0))
        ));
        assert!(matches!(
            assign_memberships(4, 0, 0),
            Err(Error::EmptyAudit)
        ));
    }

    #[test]
    fn assignment_is_deterministic() {
        assert_eq!(
            assign_memberships(8, 20, 3).unwrap(),
            assign_memberships(8, 20, 3).unwrap()
        );
        assert_ne!(
            assign_memberships(8, 20, 3).unwrap(),
            assign_memberships(8, 20, 4).unwrap()
        );
    }

    #[test]
    fn inclusion_frequency_is_one_half() {
        // Row 0 / column 0 inclusion over 2000 seeds; binomial sd = sqrt(n/4).
        let n = 2000;
        let hits = (0..n)
            .filter(|&s| assign_memberships(6, 1, s as u64).unwrap().get(0, 0))
            .count() as f64;
        let sd = (n as f64 * 0.25).sqrt();
        assert!((hits - n as f64 / 2.0).abs() <= 3.0 * sd, "hits = {hits}");
    }

    #[test]
    fn training_set_composition() {
        let ds = toy_dataset(100, 10);
        let zeros =
            MembershipMatrix::from_bits([vec![false; 10], vec![true; 10]].concat(), 2, 10).unwrap();
        assert_eq!(training_set_for(&ds, &zeros, 0).unwrap(), ds.fixed);
        let all = training_set_for(&ds, &zeros, 1).unwrap();
        assert_eq!(all.len(), 110);
        assert_eq!(&all[100..], &ds.audit[..]);

        let half: Vec<bool> = (0..10).map(|j| j % 2 == 0).collect();
        let flipped: Vec<bool> = half.iter().map(|b| !b).collect();
        let m = MembershipMatrix::from_bits([half, flipped].concat(), 2, 10).unwrap();
        assert_eq!(training_set_for(&ds, &m, 0).unwrap().len(), 105);
        assert_eq!(
            training_set_for(&ds, &m, 0).unwrap(),
            training_set_for(&ds, &m, 0).unwrap()
        );
        assert!(matches!(
            training_set_for(&ds, &m, 2),
            Err(Error::IndexOutOfRange { index: 2, len: 2 })
        ));
    }

    #[test]
    fn dataset_rejects_duplicate_ids_and_bad_labels() {
        let e = Example::new(vec![0.0], 0, 1);
        assert!(Dataset::new(vec![e.clone()], vec![e.clone()], 2, 1).is_err());
        let bad = Example::new(vec![0.0], 5, 2);
        assert!(Dataset::new(vec![], vec![bad], 2, 1).is_err());
        assert!(matches!(
            Dataset::new(vec![e], vec![], 2, 1),
            Err(Error::EmptyAudit)
        ));
    }

    #[test]
    fn score_tensor_indexing() {
        let vals: Vec<f64> = (0..2 * 3 * 2).map(|v| v as f64).collect();
        let t = ScoreTensor::new(vals, 2, 3, vec!["a".into(), "b".into()]).unwrap();
        assert_eq!(t.get(1, 2, 1), 11.0);
        assert_eq!(t.cell(0, 1), &[2.0, 3.0]);
        let t1 = t.truncate_variants(1).unwrap();
        assert_eq!(t1.get(1, 2, 0), 10.0);
        assert!(ScoreTensor::new(vec![f64::NAN], 1, 1, vec!["a".into()]).is_err());
    }
}
