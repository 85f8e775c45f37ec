//! Server-side aggregation of binary uplinks.
//!
//! Two strategies: the plain mean of the received masks, which is an unbiased
//! estimate of the mean client probability, and a Beta–Bernoulli posterior per
//! weight whose mode is broadcast. With a uniform prior reset every round the
//! two coincide.

use crate::mask::{clamp_theta, BinaryMask, ProbMask};
use crate::{Error, Result};

/// Coordinatewise vote count `Σ_k m^k`.
pub fn sum_masks(masks: &[BinaryMask]) -> Result<Vec<u32>> {
    let first = masks
        .first()
        .ok_or_else(|| Error::Aggregation("no masks to aggregate".into()))?;
    let d = first.len();
    let mut votes = vec![0u32; d];
    for (k, m) in masks.iter().enumerate() {
        if m.len() != d {
            return Err(Error::Aggregation(format!(
                "mask {k} has {} entries, expected {d}",
                m.len()
            )));
        }
        for (v, &b) in votes.iter_mut().zip(m.bits()) {
            *v += u32::from(b);
        }
    }
    Ok(votes)
}

/// Mean of the received masks, clamped.
pub fn simple_aggregate(masks: &[BinaryMask]) -> Result<ProbMask> {
    let votes = sum_masks(masks)?;
    let k = masks.len() as f64;
    Ok(ProbMask::from_raw_unchecked(
        votes.into_iter().map(|v| v as f64 / k).collect(),
    ))
}

/// Upper bound `d / (4K)` on the expected squared error of [`simple_aggregate`].
pub fn estimation_error_bound(d: usize, k: usize) -> f64 {
    d as f64 / (4.0 * k as f64)
}

/// How often the Beta parameters return to the prior.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResetPolicy {
    /// Rounds between resets; `None` never resets.
    gamma: Option<u32>,
}

impl ResetPolicy {
    pub fn every(gamma: u32) -> Result<Self> {
        if gamma == 0 {
            return Err(Error::Config("reset period gamma must be at least 1".into()));
        }
        Ok(Self { gamma: Some(gamma) })
    }

    pub fn never() -> Self {
        Self { gamma: None }
    }

    pub fn gamma(&self) -> Option<u32> {
        self.gamma
    }
}

/// Per-weight Beta posterior.
#[derive(Debug, Clone, PartialEq)]
pub struct BetaState {
    alpha: Vec<f64>,
    beta: Vec<f64>,
    lambda0: f64,
    rounds_since_reset: u32,
}

impl BetaState {
    pub fn new(d: usize, lambda0: f64) -> Result<Self> {
        if !(lambda0 > 0.0 && lambda0.is_finite()) {
            return Err(Error::Config(format!("lambda0 must be positive, got {lambda0}")));
        }
        Ok(Self {
            alpha: vec![lambda0; d],
            beta: vec![lambda0; d],
            lambda0,
            rounds_since_reset: 0,
        })
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn lambda0(&self) -> f64 {
        self.lambda0
    }

    pub fn rounds_since_reset(&self) -> u32 {
        self.rounds_since_reset
    }

    pub fn len(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty()
    }
}

/// Conjugate update with the round's vote counts from `k` clients.
pub fn bayes_update(mut state: BetaState, votes: &[u32], k: u32) -> Result<BetaState> {
    if votes.len() != state.len() {
        return Err(Error::Protocol(format!(
            "{} vote counts for {} parameters",
            votes.len(),
            state.len()
        )));
    }
    if let Some(i) = votes.iter().position(|&v| v > k) {
        return Err(Error::Protocol(format!(
            "vote count {} at {i} exceeds the {k} participating clients",
            votes[i]
        )));
    }
    let k = k as f64;
    for ((a, b), &v) in state.alpha.iter_mut().zip(&mut state.beta).zip(votes) {
        let v = v as f64;
        *a += v;
        *b += k - v;
    }
    state.rounds_since_reset += 1;
    Ok(state)
}

/// Posterior mode `(α - 1) / (α + β - 2)`, 0.5 where the denominator vanishes, clamped.
pub fn beta_mode(state: &BetaState) -> ProbMask {
    ProbMask::from_raw_unchecked(
        state
            .alpha
            .iter()
            .zip(&state.beta)
            .map(|(&a, &b)| {
                let denom = a + b - 2.0;
                if denom == 0.0 {
                    0.5
                } else {
                    clamp_theta((a - 1.0) / denom)
                }
            })
            .collect(),
    )
}

/// Return to the prior once `gamma` updates have accumulated.
pub fn maybe_reset(mut state: BetaState, policy: ResetPolicy) -> BetaState {
    if let Some(gamma) = policy.gamma {
        if state.rounds_since_reset >= gamma {
            state.alpha.fill(state.lambda0);
            state.beta.fill(state.lambda0);
            state.rounds_since_reset = 0;
        }
    }
    state
}

/// Reset period `round(1/ρ)`, at least 1.
pub fn suggest_gamma(rho: f64) -> Result<u32> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(Error::Config(format!(
            "participation ratio must be in (0, 1], got {rho}"
        )));
    }
    Ok(((1.0 / rho).round() as u32).max(1))
}

/// Server aggregation strategy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Aggregation {
    Simple,
    Bayes { lambda0: f64, reset: ResetPolicy },
}

/// Stateful aggregator driven once per round.
#[derive(Debug, Clone)]
pub enum Aggregator {
    Simple,
    Bayes { state: BetaState, reset: ResetPolicy },
}

impl Aggregator {
    pub fn new(kind: Aggregation, d: usize) -> Result<Self> {
        Ok(match kind {
            Aggregation::Simple => Aggregator::Simple,
            Aggregation::Bayes { lambda0, reset } => Aggregator::Bayes {
                state: BetaState::new(d, lambda0)?,
                reset,
            },
        })
    }

    /// Fold one round of decoded uplinks into the global probability mask.
    pub fn aggregate(&mut self, masks: &[BinaryMask]) -> Result<ProbMask> {
        match self {
            Aggregator::Simple => simple_aggregate(masks),
            Aggregator::Bayes { state, reset } => {
                let votes = sum_masks(masks)?;
                let current = std::mem::replace(state, BetaState::new(0, 1.0)?);
                let updated = bayes_update(maybe_reset(current, *reset), &votes, masks.len() as u32)?;
                *state = updated;
                Ok(beta_mode(state))
            }
        }
    }
}
