//! Small dense networks, vector augmentations and the deployable [`Model`].

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::defenses::hamp::hamp_mask;
use crate::rng::{derive_seed, derived_rng, tags, Rng};

/// Dense network with an optional tanh hidden layer and a linear output layer.
///
/// Parameters are stored flat: `[W1 (h x d), b1 (h), W2 (o x h), b2 (o)]`, or
/// `[W (o x d), b (o)]` without a hidden layer. Matrices are row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    input: usize,
    hidden: Option<usize>,
    output: usize,
    params: Vec<f64>,
}

/// Scratch buffers for one forward/backward pass.
#[derive(Debug, Clone, Default)]
pub struct Activations {
    pub hidden: Vec<f64>,
    pub output: Vec<f64>,
    delta: Vec<f64>,
}

impl Network {
    /// Gaussian init with std `1/sqrt(fan_in)`, zero biases.
    pub fn new(input: usize, hidden: Option<usize>, output: usize, seed: u64) -> Self {
        let mut rng = derived_rng(seed, &[tags::INIT]);
        let n = Self::count_params(input, hidden, output);
        let mut params = vec![0.0; n];
        let mut fill = |slice: &mut [f64], fan_in: usize| {
            let std = 1.0 / (fan_in as f64).sqrt();
            for p in slice {
                let z: f64 = StandardNormal.sample(&mut rng);
                *p = std * z;
            }
        };
        match hidden {
            Some(h) => {
                fill(&mut params[..h * input], input);
                let w2 = h * input + h;
                fill(&mut params[w2..w2 + output * h], h);
            }
            None => fill(&mut params[..output * input], input),
        }
        Self {
            input,
            hidden,
            output,
            params,
        }
    }

    fn count_params(input: usize, hidden: Option<usize>, output: usize) -> usize {
        match hidden {
            Some(h) => h * input + h + output * h + output,
            None => output * input + output,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input
    }

    pub fn hidden_width(&self) -> Option<usize> {
        self.hidden
    }

    pub fn output_dim(&self) -> usize {
        self.output
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn activations(&self) -> Activations {
        Activations {
            hidden: vec![0.0; self.hidden.unwrap_or(0)],
            output: vec![0.0; self.output],
            delta: vec![0.0; self.hidden.unwrap_or(0)],
        }
    }

    pub fn forward(&self, x: &[f64], act: &mut Activations) {
        debug_assert_eq!(x.len(), self.input);
        let (d, o) = (self.input, self.output);
        match self.hidden {
            Some(h) => {
                let (w1, rest) = self.params.split_at(h * d);
                let (b1, rest) = rest.split_at(h);
                let (w2, b2) = rest.split_at(o * h);
                for j in 0..h {
                    act.hidden[j] = (b1[j] + dot(&w1[j * d..(j + 1) * d], x)).tanh();
                }
                for k in 0..o {
                    act.output[k] = b2[k] + dot(&w2[k * h..(k + 1) * h], &act.hidden);
                }
            }
            None => {
                let (w, b) = self.params.split_at(o * d);
                for k in 0..o {
                    act.output[k] = b[k] + dot(&w[k * d..(k + 1) * d], x);
                }
            }
        }
    }

    pub fn output_of(&self, x: &[f64]) -> Vec<f64> {
        let mut act = self.activations();
        self.forward(x, &mut act);
        act.output
    }

    /// Accumulates `d loss / d params` into `grad` given `grad_out = d loss / d output`.
    /// `act` must hold the forward pass of `x`.
    pub fn backward(&self, x: &[f64], act: &mut Activations, grad_out: &[f64], grad: &mut [f64]) {
        let (d, o) = (self.input, self.output);
        match self.hidden {
            Some(h) => {
                let w2_off = h * d + h;
                let b2_off = w2_off + o * h;
                for j in 0..h {
                    let mut back = 0.0;
                    for k in 0..o {
                        back += grad_out[k] * self.params[w2_off + k * h + j];
                    }
                    act.delta[j] = back * (1.0 - act.hidden[j] * act.hidden[j]);
                }
                for k in 0..o {
                    let g = grad_out[k];
                    let row = &mut grad[w2_off + k * h..w2_off + (k + 1) * h];
                    for (r, hj) in row.iter_mut().zip(&act.hidden) {
                        *r += g * hj;
                    }
                    grad[b2_off + k] += g;
                }
                for j in 0..h {
                    let dj = act.delta[j];
                    let row = &mut grad[j * d..(j + 1) * d];
                    for (r, xi) in row.iter_mut().zip(x) {
                        *r += dj * xi;
                    }
                    grad[h * d + j] += dj;
                }
            }
            None => {
                for k in 0..o {
                    let g = grad_out[k];
                    let row = &mut grad[k * d..(k + 1) * d];
                    for (r, xi) in row.iter_mut().zip(x) {
                        *r += g * xi;
                    }
                    grad[o * d + k] += g;
                }
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Cross-entropy `-ln softmax(z)_y`, computed as `ln(1 + sum_{j != y} e^{z_j - z_y})`
/// when `z_y` is the maximum so it stays strictly positive.
pub fn cross_entropy(logits: &[f64], label: usize) -> f64 {
    let zy = logits[label];
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if zy >= max {
        let rest: f64 = logits
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != label)
            .map(|(_, z)| (z - zy).exp())
            .sum();
        rest.ln_1p()
    } else {
        let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        lse - zy
    }
}

/// Soft-target cross-entropy gradient w.r.t. logits: `softmax(z) - t`.
pub fn soft_ce_grad(probs: &[f64], target: &[f64], out: &mut [f64]) {
    for ((o, p), t) in out.iter_mut().zip(probs).zip(target) {
        *o = p - t;
    }
}

pub fn one_hot(label: usize, k: usize) -> Vec<f64> {
    let mut v = vec![0.0; k];
    v[label] = 1.0;
    v
}

/// Index of the first maximum.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// First coordinate affected by the sign-flip augmentation. Synthetic class
/// structure occupies coordinates `0..num_classes`; the rest are symmetric noise.
pub fn flip_start(num_classes: usize) -> usize {
    num_classes
}

/// Random training-time augmentation: sign flip of the nuisance coordinates
/// with probability `flip_prob`, then additive N(0, noise_std^2) noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentationPolicy {
    pub noise_std: f64,
    pub flip_prob: f64,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        Self {
            noise_std: 0.1,
            flip_prob: 0.5,
        }
    }
}

impl AugmentationPolicy {
    pub fn is_degenerate(&self) -> bool {
        self.noise_std <= 0.0 && self.flip_prob <= 0.0
    }

    pub fn validate(&self) -> crate::Result<()> {
        if !(self.noise_std >= 0.0) || !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(crate::Error::InvalidConfig(format!(
                "augmentation needs noise_std >= 0 and flip_prob in [0, 1], got {self:?}"
            )));
        }
        Ok(())
    }

    pub fn apply(&self, x: &[f64], flip_from: usize, rng: &mut Rng) -> Vec<f64> {
        let flip = self.flip_prob > 0.0 && rng.random_bool(self.flip_prob);
        x.iter()
            .enumerate()
            .map(|(i, &v)| {
                let v = if flip && i >= flip_from { -v } else { v };
                if self.noise_std > 0.0 {
                    let z: f64 = StandardNormal.sample(rng);
                    v + self.noise_std * z
                } else {
                    v
                }
            })
            .collect()
    }
}

/// One fixed, deterministic query augmentation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryAugmentation {
    pub flip: bool,
    pub offset: Vec<f64>,
}

impl QueryAugmentation {
    pub fn apply(&self, x: &[f64], flip_from: usize) -> Vec<f64> {
        x.iter()
            .zip(&self.offset)
            .enumerate()
            .map(|(i, (&v, &o))| {
                if self.flip && i >= flip_from {
                    -v + o
                } else {
                    v + o
                }
            })
            .collect()
    }

    pub fn name(&self, index: usize) -> String {
        match (index, self.flip) {
            (0, _) => "identity".to_string(),
            (_, true) => format!("aug{index}-flip"),
            (_, false) => format!("aug{index}"),
        }
    }
}

/// The fixed query set shared by every model in an experiment: index 0 is the
/// identity, index 1 the pure flip, then alternating unflipped / flipped
/// versions with fixed N(0, noise_std^2) offsets.
pub fn query_augmentations(
    dim: usize,
    count: usize,
    noise_std: f64,
    seed: u64,
) -> Vec<QueryAugmentation> {
    let mut rng = derived_rng(seed, &[tags::QUERY]);
    (0..count)
        .map(|i| {
            let flip = i % 2 == 1;
            let offset = if i < 2 {
                vec![0.0; dim]
            } else {
                (0..dim)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        noise_std * z
                    })
                    .collect()
            };
            QueryAugmentation { flip, offset }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    LinearSoftmax,
    Mlp1Hidden,
    DistilledStudent,
    ContrastiveEncoderHead,
    MaskedWrapper,
}

/// Architecture choice for supervised trainers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "kebab-case")]
pub enum ClassifierKind {
    LinearSoftmax,
    Mlp { hidden: usize },
}

impl Default for ClassifierKind {
    fn default() -> Self {
        ClassifierKind::Mlp { hidden: 64 }
    }
}

impl ClassifierKind {
    pub fn hidden(self) -> Option<usize> {
        match self {
            ClassifierKind::LinearSoftmax => None,
            ClassifierKind::Mlp { hidden } => Some(hidden),
        }
    }

    pub fn build(self, dim: usize, num_classes: usize, seed: u64) -> Network {
        Network::new(dim, self.hidden(), num_classes, seed)
    }
}

/// Test-time confidence masking around a trained network.
#[derive(Debug, Default, Serialize, Deserialize)]
pub struct MaskedModel {
    pub inner: Network,
    pub seed: u64,
    pub masking: bool,
    #[serde(skip)]
    queries: AtomicU64,
}

impl Default for Network {
    fn default() -> Self {
        Self {
            input: 0,
            hidden: None,
            output: 0,
            params: Vec::new(),
        }
    }
}

impl MaskedModel {
    pub fn new(inner: Network, seed: u64, masking: bool) -> Self {
        Self {
            inner,
            seed,
            masking,
            queries: AtomicU64::new(0),
        }
    }

    /// Masked confidences with randomness keyed by `query_seed`.
    pub fn predict_seeded(&self, x: &[f64], query_seed: u64) -> Vec<f64> {
        let probs = softmax(&self.inner.output_of(x));
        if !self.masking {
            return probs;
        }
        hamp_mask(&probs, derive_seed(self.seed, &[tags::MASK, query_seed]))
            .expect("softmax output is normalized")
    }
}

impl Clone for MaskedModel {
    fn clone(&self) -> Self {
        Self::new(self.inner.clone(), self.seed, self.masking)
    }
}

impl PartialEq for MaskedModel {
    fn eq(&self, other: &Self) -> bool {
        self.inner == other.inner && self.seed == other.seed && self.masking == other.masking
    }
}

/// SELENA: Split-AI teacher ensemble plus the distilled student that is deployed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelenaModel {
    pub teachers: Vec<Network>,
    /// Training example id -> sorted indices of the teachers NOT trained on it.
    pub exclusions: BTreeMap<u64, Vec<usize>>,
    pub student: Network,
    pub queries: usize,
    pub seed: u64,
}

/// Contrastive encoder with a linear classification head on frozen embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveModel {
    pub encoder: Network,
    pub head: Network,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classifier {
    pub net: Network,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Model {
    Classifier(Classifier),
    Selena(SelenaModel),
    Contrastive(ContrastiveModel),
    Masked(MaskedModel),
}

impl Model {
    pub fn kind(&self) -> ModelKind {
        match self {
            Model::Classifier(c) if c.net.hidden_width().is_none() => ModelKind::LinearSoftmax,
            Model::Classifier(_) => ModelKind::Mlp1Hidden,
            Model::Selena(_) => ModelKind::DistilledStudent,
            Model::Contrastive(_) => ModelKind::ContrastiveEncoderHead,
            Model::Masked(_) => ModelKind::MaskedWrapper,
        }
    }

    pub fn seed(&self) -> u64 {
        match self {
            Model::Classifier(c) => c.seed,
            Model::Selena(s) => s.seed,
            Model::Contrastive(c) => c.seed,
            Model::Masked(m) => m.seed,
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            Model::Classifier(c) => c.net.output_dim(),
            Model::Selena(s) => s.student.output_dim(),
            Model::Contrastive(c) => c.head.output_dim(),
            Model::Masked(m) => m.inner.output_dim(),
        }
    }

    /// Raw logits, unavailable behind confidence masking.
    pub fn logits(&self, x: &[f64]) -> Option<Vec<f64>> {
        match self {
            Model::Classifier(c) => Some(c.net.output_of(x)),
            Model::Selena(s) => Some(s.student.output_of(x)),
            Model::Contrastive(c) => Some(c.head.output_of(&c.encoder.output_of(x))),
            Model::Masked(_) => None,
        }
    }

    /// Encoder output; only contrastive models expose one.
    pub fn embed(&self, x: &[f64]) -> Option<Vec<f64>> {
        match self {
            Model::Contrastive(c) => Some(c.encoder.output_of(x)),
            _ => None,
        }
    }

    /// Probability vector. Masked models draw fresh masking randomness per call.
    pub fn predict(&self, x: &[f64]) -> Vec<f64> {
        match self {
            Model::Masked(m) => {
                let q = m.queries.fetch_add(1, Ordering::Relaxed);
                m.predict_seeded(x, q)
            }
            _ => self.predict_seeded(x, 0),
        }
    }

    /// Probability vector with any query randomness keyed by `query_seed`, so
    /// audits are reproducible regardless of call order.
    pub fn predict_seeded(&self, x: &[f64], query_seed: u64) -> Vec<f64> {
        match self {
            Model::Masked(m) => m.predict_seeded(x, query_seed),
            _ => softmax(&self.logits(x).expect("unmasked models expose logits")),
        }
    }
}
