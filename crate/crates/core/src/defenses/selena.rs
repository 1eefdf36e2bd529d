//! SELENA: Split-AI teacher ensemble distilled into a single student.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use super::{check_labels, train_soft_targets, TrainConfig};
use crate::domain::Example;
use crate::error::{Error, Result};
use crate::model::{one_hot, softmax, ClassifierKind, Model, SelenaModel};
use crate::rng::{derive_seed, derived_rng, tags};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelenaConfig {
    /// Teacher and student optimizer settings; `epochs` applies to teachers.
    pub train: TrainConfig,
    pub num_teachers: usize,
    /// Teachers excluded from (and later queried for) each training example.
    pub queries: usize,
    pub distill_epochs: usize,
    #[serde(default)]
    pub model: ClassifierKind,
}

impl SelenaConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.queries == 0 || self.queries >= self.num_teachers {
            return Err(Error::InvalidConfig(format!(
                "need 1 <= queries < num_teachers, got queries={} num_teachers={}",
                self.queries, self.num_teachers
            )));
        }
        if self.distill_epochs == 0 {
            return Err(Error::InvalidConfig("distill_epochs must be >= 1".into()));
        }
        Ok(())
    }
}

fn draw_excluders(seed: u64, tag_tail: &[u64], k: usize, l: usize) -> Vec<usize> {
    let mut rng = derived_rng(seed, tag_tail);
    let mut v = sample(&mut rng, k, l).into_vec();
    v.sort_unstable();
    v
}

fn mean_softmax(model: &SelenaModel, teachers: &[usize], x: &[f64]) -> Vec<f64> {
    let k = model.student.output_dim();
    let mut out = vec![0.0; k];
    for &t in teachers {
        for (o, p) in out.iter_mut().zip(softmax(&model.teachers[t].output_of(x))) {
            *o += p;
        }
    }
    let n = teachers.len() as f64;
    out.iter_mut().for_each(|o| *o /= n);
    out
}

/// Split-AI answer: the mean softmax over the teachers that never saw `x`.
///
/// Ids outside the training set get `queries` teachers picked by a
/// deterministic draw keyed on the id.
pub fn split_ai_predict(model: &SelenaModel, x: &Example) -> Vec<f64> {
    match model.exclusions.get(&x.id) {
        Some(excl) => mean_softmax(model, excl, &x.features),
        None => {
            let excl = draw_excluders(
                model.seed,
                &[tags::EXCLUSION, x.id],
                model.teachers.len(),
                model.queries,
            );
            mean_softmax(model, &excl, &x.features)
        }
    }
}

pub fn train_selena(train: &[Example], num_classes: usize, cfg: &SelenaConfig) -> Result<Model> {
    cfg.validate()?;
    check_labels(train, num_classes)?;
    let (k, l) = (cfg.num_teachers, cfg.queries);
    let seed = cfg.train.seed;
    let mut excl_rng = derived_rng(seed, &[tags::EXCLUSION]);
    let excluded: Vec<Vec<usize>> = train
        .iter()
        .map(|_| {
            let mut v = sample(&mut excl_rng, k, l).into_vec();
            v.sort_unstable();
            v
        })
        .collect();

    let mut teachers = Vec::with_capacity(k);
    for t in 0..k {
        let chunk: Vec<&Example> = train
            .iter()
            .zip(&excluded)
            .filter(|(_, ex)| !ex.contains(&t))
            .map(|(e, _)| e)
            .collect();
        if chunk.is_empty() {
            return Err(Error::EmptyTrainingSet);
        }
        let features: Vec<&[f64]> = chunk.iter().map(|e| e.features.as_slice()).collect();
        let targets: Vec<Vec<f64>> = chunk
            .iter()
            .map(|e| one_hot(e.label, num_classes))
            .collect();
        let tc = cfg
            .train
            .with_seed(derive_seed(seed, &[tags::TEACHER, t as u64]));
        teachers.push(train_soft_targets(
            &features,
            &targets,
            num_classes,
            &tc,
            cfg.model,
        )?);
    }

    let exclusions: BTreeMap<u64, Vec<usize>> = train
        .iter()
        .zip(&excluded)
        .map(|(e, ex)| (e.id, ex.clone()))
        .collect();
    let mut model = SelenaModel {
        teachers,
        exclusions,
        student: cfg.model.build(train[0].features.len(), num_classes, seed),
        queries: l,
        seed,
    };
    let features: Vec<&[f64]> = train.iter().map(|e| e.features.as_slice()).collect();
    let soft: Vec<Vec<f64>> = train.iter().map(|e| split_ai_predict(&model, e)).collect();
    let sc = TrainConfig {
        epochs: cfg.distill_epochs,
        seed: derive_seed(seed, &[tags::STUDENT]),
        ..cfg.train.clone()
    };
    model.student = train_soft_targets(&features, &soft, num_classes, &sc, cfg.model)?;
    Ok(Model::Selena(model))
}
