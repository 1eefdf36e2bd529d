//! RelaxLoss: keep the mean training loss near a target threshold.
//!
//! Batches with loss above the threshold take a normal descent step. Otherwise
//! the step ascends on the cross-entropy of correctly classified examples and
//! descends towards a flattened posterior for misclassified ones (true-class
//! probability kept, remaining mass spread uniformly). If the flattening
//! component would cancel part of the ascent, its component along the ascent
//! direction is projected out, so every triggered step increases the loss of
//! the correctly classified examples to first order.

use serde::{Deserialize, Serialize};

use super::{check_labels, run_sgd, training_view, TrainConfig};
use crate::domain::Example;
use crate::error::{Error, Result};
use crate::model::{
    argmax, cross_entropy, one_hot, soft_ce_grad, softmax, Classifier, ClassifierKind, Model,
};
use crate::rng::{derived_rng, tags};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelaxLossConfig {
    pub train: TrainConfig,
    pub loss_threshold: f64,
    #[serde(default)]
    pub model: ClassifierKind,
}

/// Per-step trace for auditing the mechanism.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelaxStep {
    pub step: usize,
    pub batch_loss: f64,
    /// Whether the modified (ascent / flattening) step was taken.
    pub triggered: bool,
    /// `<update direction, grad of CE over correctly classified examples>`;
    /// zero on untriggered steps.
    pub ascent_alignment: f64,
}

pub fn train_relaxloss(
    train: &[Example],
    num_classes: usize,
    cfg: &RelaxLossConfig,
) -> Result<Model> {
    train_relaxloss_audited(train, num_classes, cfg, &mut |_| {})
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn train_relaxloss_audited(
    train: &[Example],
    num_classes: usize,
    cfg: &RelaxLossConfig,
    hook: &mut dyn FnMut(&RelaxStep),
) -> Result<Model> {
    cfg.train.validate()?;
    if !(cfg.loss_threshold >= 0.0) || !cfg.loss_threshold.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "loss_threshold must be >= 0, got {}",
            cfg.loss_threshold
        )));
    }
    check_labels(train, num_classes)?;
    let tc = &cfg.train;
    let dim = train[0].features.len();
    let mut net = cfg.model.build(dim, num_classes, tc.seed);
    let mut rng = derived_rng(tc.seed, &[tags::SHUFFLE]);
    let n_params = net.num_params();
    let mut act = net.activations();
    let mut gout = vec![0.0; num_classes];
    let mut ascent = vec![0.0; n_params];
    let mut flatten = vec![0.0; n_params];
    let targets: Vec<Vec<f64>> = train
        .iter()
        .map(|e| one_hot(e.label, num_classes))
        .collect();
    let mut step = 0usize;

    run_sgd(
        &mut net,
        train.len(),
        tc,
        &mut rng,
        |net, batch, grad, rng| {
            let views: Vec<Vec<f64>> = batch
                .iter()
                .map(|&i| training_view(&train[i].features, tc, num_classes, rng))
                .collect();
            let outputs: Vec<Vec<f64>> = views.iter().map(|x| net.output_of(x)).collect();
            let batch_loss = batch
                .iter()
                .zip(&outputs)
                .map(|(&i, z)| cross_entropy(z, train[i].label))
                .sum::<f64>()
                / batch.len() as f64;
            let scale = 1.0 / batch.len() as f64;

            if batch_loss > cfg.loss_threshold {
                for (&i, x) in batch.iter().zip(&views) {
                    net.forward(x, &mut act);
                    let p = softmax(&act.output);
                    soft_ce_grad(&p, &targets[i], &mut gout);
                    net.backward(x, &mut act, &gout, grad);
                }
                grad.iter_mut().for_each(|g| *g *= scale);
                hook(&RelaxStep {
                    step,
                    batch_loss,
                    triggered: false,
                    ascent_alignment: 0.0,
                });
            } else {
                ascent.iter_mut().for_each(|g| *g = 0.0);
                flatten.iter_mut().for_each(|g| *g = 0.0);
                for ((&i, x), z) in batch.iter().zip(&views).zip(&outputs) {
                    let y = train[i].label;
                    net.forward(x, &mut act);
                    let p = softmax(&act.output);
                    if argmax(z) == y {
                        soft_ce_grad(&p, &targets[i], &mut gout);
                        net.backward(x, &mut act, &gout, &mut ascent);
                    } else {
                        let rest = (1.0 - p[y]) / (num_classes - 1) as f64;
                        let mut flat = vec![rest; num_classes];
                        flat[y] = p[y];
                        soft_ce_grad(&p, &flat, &mut gout);
                        net.backward(x, &mut act, &gout, &mut flatten);
                    }
                }
                ascent.iter_mut().for_each(|g| *g *= scale);
                flatten.iter_mut().for_each(|g| *g *= scale);
                let aa = dot(&ascent, &ascent);
                if aa > 0.0 {
                    // Two passes guard against rounding leaving a positive residual.
                    for _ in 0..2 {
                        let fa = dot(&flatten, &ascent);
                        if fa > 0.0 {
                            let c = fa / aa;
                            for (f, a) in flatten.iter_mut().zip(&ascent) {
                                *f -= c * a;
                            }
                        }
                    }
                }
                // The driver descends along `grad`; descending on -ascent ascends.
                for ((g, a), f) in grad.iter_mut().zip(&ascent).zip(&flatten) {
                    *g = f - a;
                }
                let alignment = -dot(grad, &ascent);
                hook(&RelaxStep {
                    step,
                    batch_loss,
                    triggered: true,
                    ascent_alignment: alignment,
                });
            }
            step += 1;
        },
    );
    Ok(Model::Classifier(Classifier { net, seed: tc.seed }))
}
