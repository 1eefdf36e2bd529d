//! Toy self-supervised pipeline: an NT-Xent encoder trained without labels,
//! then a linear head fit on frozen embeddings.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{check_labels, train_soft_targets, Sgd, TrainConfig};
use crate::domain::Example;
use crate::error::{Error, Result};
use crate::model::{
    flip_start, one_hot, AugmentationPolicy, ClassifierKind, ContrastiveModel, Model, Network,
};
use crate::rng::{derive_seed, derived_rng, tags};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveConfig {
    /// Pretraining optimizer settings; `epochs` is the number of pretraining epochs.
    pub encoder: TrainConfig,
    /// Linear-probe settings. Its augmentation field is ignored.
    pub head: TrainConfig,
    pub embedding_dim: usize,
    #[serde(default)]
    pub hidden: Option<usize>,
    pub temperature: f64,
    pub augmentation: AugmentationPolicy,
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.head.validate()?;
        self.augmentation.validate()?;
        if self.augmentation.is_degenerate() {
            return Err(Error::InvalidConfig(
                "contrastive pretraining needs a non-degenerate augmentation".into(),
            ));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "temperature must be > 0, got {}",
                self.temperature
            )));
        }
        if self.embedding_dim == 0 {
            return Err(Error::InvalidConfig("embedding_dim must be >= 1".into()));
        }
        if self.encoder.batch_size < 2 {
            return Err(Error::InvalidConfig(
                "contrastive batch_size must be >= 2 to have negatives".into(),
            ));
        }
        Ok(())
    }
}

/// NT-Xent loss over `2n` views (view `2i` pairs with `2i + 1`) and its
/// gradient with respect to the raw embeddings.
pub(crate) fn nt_xent(z: &[Vec<f64>], temperature: f64) -> (f64, Vec<Vec<f64>>) {
    let m = z.len();
    let norms: Vec<f64> = z
        .iter()
        .map(|v| v.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12))
        .collect();
    let u: Vec<Vec<f64>> = z
        .iter()
        .zip(&norms)
        .map(|(v, n)| v.iter().map(|a| a / n).collect())
        .collect();
    let mut p = vec![vec![0.0; m]; m];
    let mut loss = 0.0;
    for a in 0..m {
        let s: Vec<f64> = (0..m)
            .map(|b| {
                if a == b {
                    f64::NEG_INFINITY
                } else {
                    dot(&u[a], &u[b]) / temperature
                }
            })
            .collect();
        let max = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = s.iter().map(|v| (v - max).exp()).sum();
        for b in 0..m {
            p[a][b] = (s[b] - max).exp() / sum;
        }
        loss += max + sum.ln() - s[a ^ 1];
    }
    let scale = 1.0 / (m as f64 * temperature);
    let grads = (0..m)
        .map(|a| {
            let mut g = vec![0.0; u[a].len()];
            for b in 0..m {
                let w = if b == a { 0.0 } else { p[a][b] + p[b][a] }
                    - if b == a ^ 1 { 2.0 } else { 0.0 };
                if w != 0.0 {
                    for (gi, ui) in g.iter_mut().zip(&u[b]) {
                        *gi += w * ui;
                    }
                }
            }
            g.iter_mut().for_each(|gi| *gi *= scale);
            let radial = dot(&g, &u[a]);
            g.iter()
                .zip(&u[a])
                .map(|(gi, ui)| (gi - radial * ui) / norms[a])
                .collect()
        })
        .collect();
    (loss / m as f64, grads)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Stage 1: label-free NT-Xent pretraining. Only `num_classes` is used, to
/// locate the flip-augmented coordinates.
pub fn pretrain_encoder(
    features: &[&[f64]],
    num_classes: usize,
    cfg: &ContrastiveConfig,
) -> Result<Network> {
    cfg.validate()?;
    if features.len() < 2 {
        return Err(Error::InvalidInput(
            "contrastive pretraining needs at least 2 examples".into(),
        ));
    }
    let tc = &cfg.encoder;
    let mut net = Network::new(features[0].len(), cfg.hidden, cfg.embedding_dim, tc.seed);
    let mut rng = derived_rng(tc.seed, &[tags::ENCODER]);
    let mut opt = Sgd::new(net.num_params(), tc);
    let mut grad = vec![0.0; net.num_params()];
    let mut acts: Vec<_> = Vec::new();
    let mut order: Vec<usize> = (0..features.len()).collect();
    let flip_from = flip_start(num_classes);
    for _ in 0..tc.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(tc.batch_size) {
            if batch.len() < 2 {
                continue;
            }
            let views: Vec<Vec<f64>> = batch
                .iter()
                .flat_map(|&i| {
                    [0, 1].map(|_| cfg.augmentation.apply(features[i], flip_from, &mut rng))
                })
                .collect();
            acts.resize_with(views.len(), || net.activations());
            let z: Vec<Vec<f64>> = views
                .iter()
                .zip(acts.iter_mut())
                .map(|(v, act)| {
                    net.forward(v, act);
                    act.output.clone()
                })
                .collect();
            let (_, gz) = nt_xent(&z, cfg.temperature);
            grad.iter_mut().for_each(|g| *g = 0.0);
            for ((v, act), g) in views.iter().zip(acts.iter_mut()).zip(&gz) {
                net.backward(v, act, g, &mut grad);
            }
            opt.step(net.params_mut(), &grad);
        }
    }
    Ok(net)
}

pub fn train_contrastive(
    train: &[Example],
    num_classes: usize,
    cfg: &ContrastiveConfig,
) -> Result<Model> {
    check_labels(train, num_classes)?;
    let features: Vec<&[f64]> = train.iter().map(|e| e.features.as_slice()).collect();
    let encoder = pretrain_encoder(&features, num_classes, cfg)?;
    let embedded: Vec<Vec<f64>> = features.iter().map(|x| encoder.output_of(x)).collect();
    let emb_refs: Vec<&[f64]> = embedded.iter().map(Vec::as_slice).collect();
    let targets: Vec<Vec<f64>> = train
        .iter()
        .map(|e| one_hot(e.label, num_classes))
        .collect();
    let hc = TrainConfig {
        seed: derive_seed(cfg.head.seed, &[tags::HEAD]),
        augmentation: None,
        ..cfg.head.clone()
    };
    let head = train_soft_targets(
        &emb_refs,
        &targets,
        num_classes,
        &hc,
        ClassifierKind::LinearSoftmax,
    )?;
    Ok(Model::Contrastive(ContrastiveModel {
        encoder,
        head,
        seed: cfg.encoder.seed,
    }))
}
