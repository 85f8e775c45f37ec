//! Client-side probability-mask training.
//!
//! A client keeps an unbounded score per weight, maps it through the sigmoid to a
//! Bernoulli probability, samples a binary mask for every forward pass and
//! back-propagates through the sample with a straight-through estimator.

use ndarray::Axis;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::nn::{backward, forward, loss_and_grad, FrozenWeights, NetworkArch};
use crate::{Error, Result};

/// Probabilities are kept inside `[EPS_THETA, 1 - EPS_THETA]`.
pub const EPS_THETA: f64 = 1e-6;

#[inline]
pub fn clamp_theta(p: f64) -> f64 {
    p.clamp(EPS_THETA, 1.0 - EPS_THETA)
}

/// Unbounded score per weight.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMask(Vec<f64>);

impl ScoreMask {
    pub fn new(scores: Vec<f64>) -> Result<Self> {
        if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
            return Err(Error::Precondition(format!("score {i} is not finite")));
        }
        Ok(Self(scores))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Bernoulli probability per weight, always clamped.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMask(Vec<f64>);

impl ProbMask {
    /// Clamp raw probabilities into `[EPS_THETA, 1 - EPS_THETA]`. NaN is rejected.
    pub fn new(raw: Vec<f64>) -> Result<Self> {
        if let Some(i) = raw.iter().position(|p| p.is_nan()) {
            return Err(Error::Precondition(format!("probability {i} is NaN")));
        }
        Ok(Self::from_raw_unchecked(raw))
    }

    pub(crate) fn from_raw_unchecked(mut raw: Vec<f64>) -> Self {
        raw.iter_mut().for_each(|p| *p = clamp_theta(*p));
        Self(raw)
    }

    pub fn constant(d: usize, p: f64) -> Self {
        Self::from_raw_unchecked(vec![p; d])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask(Vec<bool>);

impl BinaryMask {
    pub fn from_bits(bits: Vec<bool>) -> Self {
        Self(bits)
    }

    pub fn zeros(d: usize) -> Self {
        Self(vec![false; d])
    }

    pub fn ones(d: usize) -> Self {
        Self(vec![true; d])
    }

    pub fn bits(&self) -> &[bool] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn count_ones(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    /// Fraction of ones; zero for an empty mask.
    pub fn ones_frequency(&self) -> f64 {
        if self.0.is_empty() {
            0.0
        } else {
            self.count_ones() as f64 / self.0.len() as f64
        }
    }
}

/// Update rule for the local scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    /// `s ← s − η·g`.
    Sgd,
    /// Adam with `β1 = 0.9`, `β2 = 0.999`, `ε = 1e-8`; moments start at zero every local run.
    #[default]
    Adam,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
}

impl Adam {
    fn new(d: usize) -> Self {
        Self {
            m: vec![0.0; d],
            v: vec![0.0; d],
            step: 0,
        }
    }

    fn apply(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.step += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.step);
        let c2 = 1.0 - ADAM_BETA2.powi(self.step);
        for (((p, &g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
        }
    }
}

/// Local optimizer settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClientConfig {
    pub learning_rate: f64,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub optimizer: Optimizer,
}

impl Default for ClientConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            local_epochs: 3,
            batch_size: 128,
            optimizer: Optimizer::default(),
        }
    }
}

impl ClientConfig {
    pub fn validate(&self) -> Result<()> {
        // η = 0 is allowed: it degenerates to sampling the broadcast mask.
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if self.local_epochs == 0 {
            return Err(Error::Config("local_epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

#[inline]
fn sigmoid_scalar(s: f64) -> f64 {
    if s >= 0.0 {
        1.0 / (1.0 + (-s).exp())
    } else {
        let e = s.exp();
        e / (1.0 + e)
    }
}

fn probabilities(scores: &[f64]) -> ProbMask {
    ProbMask(scores.iter().map(|&s| clamp_theta(sigmoid_scalar(s))).collect())
}

pub fn sigmoid(scores: &ScoreMask) -> ProbMask {
    probabilities(&scores.0)
}

pub fn inv_sigmoid(theta: &ProbMask) -> ScoreMask {
    ScoreMask(
        theta
            .0
            .iter()
            .map(|&p| {
                let p = clamp_theta(p);
                (p / (1.0 - p)).ln()
            })
            .collect(),
    )
}

/// One independent Bernoulli draw per coordinate, consuming one `f64` per entry.
pub fn sample_mask<R: Rng + ?Sized>(theta: &ProbMask, rng: &mut R) -> BinaryMask {
    BinaryMask(theta.0.iter().map(|&p| rng.random::<f64>() < p).collect())
}

pub fn masked_weights(mask: &BinaryMask, w: &FrozenWeights) -> Result<Vec<f64>> {
    if mask.len() != w.len() {
        return Err(Error::Shape(format!(
            "mask has {} entries but the network has {} weights",
            mask.len(),
            w.len()
        )));
    }
    Ok(mask
        .0
        .iter()
        .zip(w.values())
        .map(|(&m, &v)| if m { v } else { 0.0 })
        .collect())
}

/// Score gradient via the identity straight-through estimator:
/// `grad_s = grad_ẇ ⊙ w ⊙ θ ⊙ (1 - θ)`.
pub fn ste_score_grad(grad_w_dot: &[f64], w: &FrozenWeights, theta: &ProbMask) -> Result<Vec<f64>> {
    if grad_w_dot.len() != w.len() || theta.len() != w.len() {
        return Err(Error::Shape(format!(
            "gradient ({}), weights ({}) and probabilities ({}) differ in length",
            grad_w_dot.len(),
            w.len(),
            theta.len()
        )));
    }
    Ok(grad_w_dot
        .iter()
        .zip(w.values())
        .zip(&theta.0)
        .map(|((&g, &wi), &p)| g * wi * p * (1.0 - p))
        .collect())
}

/// Outcome of local score training before the uplink sample is drawn.
#[derive(Debug, Clone)]
pub struct LocalRun {
    /// Final local probabilities `sigmoid(s)`.
    pub theta: ProbMask,
    /// Mean minibatch loss of each local epoch.
    pub epoch_losses: Vec<f64>,
}

/// Uplink payload plus training diagnostics.
#[derive(Debug, Clone)]
pub struct LocalUpdate {
    pub mask: BinaryMask,
    pub epoch_losses: Vec<f64>,
}

/// Run the local score updates starting from the broadcast probabilities.
pub fn train_local_scores<R: Rng + ?Sized>(
    theta_global: &ProbMask,
    w: &FrozenWeights,
    arch: &NetworkArch,
    dataset: &Dataset,
    cfg: &ClientConfig,
    rng: &mut R,
) -> Result<LocalRun> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Client("local dataset is empty".into()));
    }
    if theta_global.len() != arch.param_count() || w.len() != arch.param_count() {
        return Err(Error::Shape(format!(
            "probabilities ({}) and weights ({}) must both have {} entries",
            theta_global.len(),
            w.len(),
            arch.param_count()
        )));
    }
    let mut scores = inv_sigmoid(theta_global).0;
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.local_epochs);
    let mut adam = (cfg.optimizer == Optimizer::Adam).then(|| Adam::new(scores.len()));
    for _ in 0..cfg.local_epochs {
        order.shuffle(rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let theta = probabilities(&scores);
            let mask = sample_mask(&theta, rng);
            let effective = masked_weights(&mask, w)?;
            let x = dataset.samples().select(Axis(0), chunk);
            let y: Vec<usize> = chunk.iter().map(|&i| dataset.labels()[i]).collect();
            let (logits, cache) = forward(arch, &effective, x.view())?;
            let (loss, grad_logits) = loss_and_grad(logits.view(), &y)?;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    round: None,
                    client: None,
                    detail: format!("non-finite loss {loss}"),
                });
            }
            let grad_w = backward(arch, &cache, grad_logits.view())?;
            let grad_s = ste_score_grad(&grad_w, w, &theta)?;
            match adam.as_mut() {
                Some(adam) => adam.apply(&mut scores, &grad_s, cfg.learning_rate),
                None => scores
                    .iter_mut()
                    .zip(&grad_s)
                    .for_each(|(s, g)| *s -= cfg.learning_rate * g),
            }
            loss_sum += loss;
            batches += 1;
        }
        epoch_losses.push(loss_sum / batches as f64);
    }
    let theta = probabilities(&scores);
    Ok(LocalRun { theta, epoch_losses })
}

/// Local training followed by one fresh Bernoulli sample of the final probabilities.
pub fn local_train<R: Rng + ?Sized>(
    theta_global: &ProbMask,
    w: &FrozenWeights,
    arch: &NetworkArch,
    dataset: &Dataset,
    cfg: &ClientConfig,
    rng: &mut R,
) -> Result<LocalUpdate> {
    let run = train_local_scores(theta_global, w, arch, dataset, cfg, rng)?;
    let mask = sample_mask(&run.theta, rng);
    Ok(LocalUpdate {
        mask,
        epoch_losses: run.epoch_losses,
    })
}
