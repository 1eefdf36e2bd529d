//! Desk-scale trainers for the undefended baseline and each defense.
//!
//! All trainers are single-threaded and bitwise deterministic given
//! `(config, data, seed)`; fleets parallelize across models instead.

pub mod contrastive;
pub mod dpsgd;
pub mod hamp;
pub mod relaxloss;
pub mod selena;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::domain::Example;
use crate::error::{Error, Result};
use crate::model::{
    flip_start, one_hot, soft_ce_grad, softmax, AugmentationPolicy, Classifier, ClassifierKind,
    Model, Network,
};
use crate::rng::{derived_rng, tags, Rng};

pub use contrastive::{train_contrastive, ContrastiveConfig};
pub use dpsgd::{train_dpsgd, train_dpsgd_audited, ClipEvent, DpSgdConfig};
pub use hamp::{hamp_mask, train_hamp, HampConfig};
pub use relaxloss::{train_relaxloss, train_relaxloss_audited, RelaxLossConfig, RelaxStep};
pub use selena::{split_ai_predict, train_selena, SelenaConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub augmentation: Option<AugmentationPolicy>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            learning_rate: 0.05,
            momentum: 0.9,
            weight_decay: 0.0,
            seed: 0,
            augmentation: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidConfig(
                "learning_rate must be finite and >= 0".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidConfig(
                "momentum must be in [0, 1) and weight_decay >= 0".into(),
            ));
        }
        if let Some(aug) = &self.augmentation {
            aug.validate()?;
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }
}

/// Heavy-ball SGD: `v <- mu v + g + wd theta; theta <- theta - lr v`.
pub(crate) struct Sgd {
    velocity: Vec<f64>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
}

impl Sgd {
    pub(crate) fn new(num_params: usize, cfg: &TrainConfig) -> Self {
        Self {
            velocity: vec![0.0; num_params],
            lr: cfg.learning_rate,
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
        }
    }

    pub(crate) fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        for ((p, v), g) in params.iter_mut().zip(&mut self.velocity).zip(grad) {
            *v = self.momentum * *v + g + self.weight_decay * *p;
            *p -= self.lr * *v;
        }
    }
}

/// Epoch/batch driver shared by the supervised trainers. `batch_grad` writes
/// the batch gradient into a zeroed buffer; the driver applies the update.
pub(crate) fn run_sgd<F>(
    net: &mut Network,
    n: usize,
    cfg: &TrainConfig,
    rng: &mut Rng,
    mut batch_grad: F,
) where
    F: FnMut(&Network, &[usize], &mut [f64], &mut Rng),
{
    let mut opt = Sgd::new(net.num_params(), cfg);
    let mut grad = vec![0.0; net.num_params()];
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for batch in order.chunks(cfg.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            batch_grad(net, batch, &mut grad, rng);
            opt.step(net.params_mut(), &grad);
        }
    }
}

/// Input seen by the network for one training draw.
pub(crate) fn training_view(
    x: &[f64],
    cfg: &TrainConfig,
    num_classes: usize,
    rng: &mut Rng,
) -> Vec<f64> {
    match &cfg.augmentation {
        Some(aug) => aug.apply(x, flip_start(num_classes), rng),
        None => x.to_vec(),
    }
}

/// Mini-batch SGD on soft-target cross-entropy. Used directly by the
/// undefended baseline (one-hot targets), HAMP (smoothed targets) and the
/// SELENA teachers/student.
pub(crate) fn train_soft_targets(
    features: &[&[f64]],
    targets: &[Vec<f64>],
    num_classes: usize,
    cfg: &TrainConfig,
    kind: ClassifierKind,
) -> Result<Network> {
    cfg.validate()?;
    if features.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    let dim = features[0].len();
    let mut net = kind.build(dim, num_classes, cfg.seed);
    let mut rng = derived_rng(cfg.seed, &[tags::SHUFFLE]);
    let mut act = net.activations();
    let mut gout = vec![0.0; num_classes];
    run_sgd(
        &mut net,
        features.len(),
        cfg,
        &mut rng,
        |net, batch, grad, rng| {
            for &i in batch {
                let x = training_view(features[i], cfg, num_classes, rng);
                net.forward(&x, &mut act);
                let p = softmax(&act.output);
                soft_ce_grad(&p, &targets[i], &mut gout);
                net.backward(&x, &mut act, &gout, grad);
            }
            let scale = 1.0 / batch.len() as f64;
            grad.iter_mut().for_each(|g| *g *= scale);
        },
    );
    Ok(net)
}

fn check_labels(train: &[Example], num_classes: usize) -> Result<()> {
    if train.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    if let Some(e) = train.iter().find(|e| e.label >= num_classes) {
        return Err(Error::InvalidInput(format!(
            "label {} >= num_classes {num_classes}",
            e.label
        )));
    }
    Ok(())
}

/// Plain mini-batch SGD with momentum on cross-entropy.
pub fn train_undefended(
    train: &[Example],
    num_classes: usize,
    cfg: &TrainConfig,
    kind: ClassifierKind,
) -> Result<Model> {
    check_labels(train, num_classes)?;
    let features: Vec<&[f64]> = train.iter().map(|e| e.features.as_slice()).collect();
    let targets: Vec<Vec<f64>> = train
        .iter()
        .map(|e| one_hot(e.label, num_classes))
        .collect();
    let net = train_soft_targets(&features, &targets, num_classes, cfg, kind)?;
    Ok(Model::Classifier(Classifier {
        net,
        seed: cfg.seed,
    }))
}

/// Fraction of `examples` whose argmax prediction equals the label.
pub fn accuracy(model: &Model, examples: &[Example]) -> f64 {
    if examples.is_empty() {
        return f64::NAN;
    }
    let correct = examples
        .iter()
        .enumerate()
        .filter(|(i, e)| {
            crate::model::argmax(&model.predict_seeded(&e.features, *i as u64)) == e.label
        })
        .count();
    correct as f64 / examples.len() as f64
}

/// Serializable defense registry entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "id", rename_all = "kebab-case")]
pub enum DefenseConfig {
    Undefended {
        train: TrainConfig,
        #[serde(default)]
        model: ClassifierKind,
    },
    DpSgd(DpSgdConfig),
    Relaxloss(RelaxLossConfig),
    Hamp(HampConfig),
    Selena(SelenaConfig),
    Contrastive(ContrastiveConfig),
}

impl DefenseConfig {
    pub const IDS: [&'static str; 6] = [
        "undefended",
        "dp-sgd",
        "relaxloss",
        "hamp",
        "selena",
        "contrastive",
    ];

    pub fn id(&self) -> &'static str {
        match self {
            DefenseConfig::Undefended { .. } => "undefended",
            DefenseConfig::DpSgd(_) => "dp-sgd",
            DefenseConfig::Relaxloss(_) => "relaxloss",
            DefenseConfig::Hamp(_) => "hamp",
            DefenseConfig::Selena(_) => "selena",
            DefenseConfig::Contrastive(_) => "contrastive",
        }
    }

    /// Trains one model with every random stream keyed by `seed`.
    pub fn train(&self, train: &[Example], num_classes: usize, seed: u64) -> Result<Model> {
        match self {
            DefenseConfig::Undefended { train: cfg, model } => {
                train_undefended(train, num_classes, &cfg.with_seed(seed), *model)
            }
            DefenseConfig::DpSgd(c) => {
                let c = DpSgdConfig {
                    train: c.train.with_seed(seed),
                    ..c.clone()
                };
                train_dpsgd(train, num_classes, &c)
            }
            DefenseConfig::Relaxloss(c) => {
                let c = RelaxLossConfig {
                    train: c.train.with_seed(seed),
                    ..c.clone()
                };
                train_relaxloss(train, num_classes, &c)
            }
            DefenseConfig::Hamp(c) => {
                let c = HampConfig {
                    train: c.train.with_seed(seed),
                    ..c.clone()
                };
                train_hamp(train, num_classes, &c)
            }
            DefenseConfig::Selena(c) => {
                let c = SelenaConfig {
                    train: c.train.with_seed(seed),
                    ..c.clone()
                };
                train_selena(train, num_classes, &c)
            }
            DefenseConfig::Contrastive(c) => {
                let c = ContrastiveConfig {
                    encoder: c.encoder.with_seed(seed),
                    head: c.head.with_seed(seed),
                    ..c.clone()
                };
                train_contrastive(train, num_classes, &c)
            }
        }
    }

    /// Mechanism parameters worth recording next to audit results.
    pub fn mechanism_params(&self) -> BTreeMap<String, f64> {
        let mut m = BTreeMap::new();
        let train = match self {
            DefenseConfig::Undefended { train, .. } => train,
            DefenseConfig::DpSgd(c) => {
                m.insert("clip_norm".into(), c.clip_norm);
                m.insert("noise_multiplier".into(), c.noise_multiplier);
                &c.train
            }
            DefenseConfig::Relaxloss(c) => {
                m.insert("loss_threshold".into(), c.loss_threshold);
                &c.train
            }
            DefenseConfig::Hamp(c) => {
                m.insert("entropy_smoothing".into(), c.entropy_smoothing);
                m.insert("masking".into(), if c.masking { 1.0 } else { 0.0 });
                &c.train
            }
            DefenseConfig::Selena(c) => {
                m.insert("num_teachers".into(), c.num_teachers as f64);
                m.insert("queries".into(), c.queries as f64);
                &c.train
            }
            DefenseConfig::Contrastive(c) => {
                m.insert("temperature".into(), c.temperature);
                m.insert("embedding_dim".into(), c.embedding_dim as f64);
                &c.encoder
            }
        };
        m.insert("epochs".into(), train.epochs as f64);
        m.insert("batch_size".into(), train.batch_size as f64);
        m.insert("learning_rate".into(), train.learning_rate);
        m
    }
}
