//! Differential-privacy toolkit for probability masks.
//!
//! Clients add Gaussian noise to `θ ∈ [c, 1-c]^d` and clip back into that box.
//! Clipping biases the mean, so the server inverts the closed-form expectation of
//! the clipped value through a lookup table. Releasing only a Bernoulli sample of
//! the privatized mask amplifies the Rényi-DP guarantee. All logarithms are natural.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::mask::ProbMask;
use crate::{Error, Result};

/// Privacy budget and clipping parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DpConfig {
    pub epsilon: f64,
    pub delta: f64,
    pub clip: f64,
    pub d: usize,
}

impl DpConfig {
    pub fn new(epsilon: f64, delta: f64, clip: f64, d: usize) -> Result<Self> {
        if !(epsilon > 0.0) {
            return Err(Error::Config(format!("epsilon must be positive, got {epsilon}")));
        }
        if !(delta > 0.0 && delta < 1.0) {
            return Err(Error::Config(format!("delta must be in (0, 1), got {delta}")));
        }
        if !(clip > 0.0 && clip < 0.5) {
            return Err(Error::Config(format!("clip must be in (0, 0.5), got {clip}")));
        }
        if d == 0 {
            return Err(Error::Config("dimension must be at least 1".into()));
        }
        Ok(Self {
            epsilon,
            delta,
            clip,
            d,
        })
    }

    /// L2 sensitivity `(1 - 2c) √d` of a mask confined to `[c, 1-c]^d`.
    pub fn sensitivity(&self) -> f64 {
        (1.0 - 2.0 * self.clip) * (self.d as f64).sqrt()
    }
}

/// Noise scale of the Gaussian mechanism: `σ = √(2 ln(1.25/δ)) Δ₂ / ε`.
pub fn gaussian_sigma(cfg: &DpConfig) -> f64 {
    (2.0 * (1.25 / cfg.delta).ln()).sqrt() * cfg.sensitivity() / cfg.epsilon
}

/// Clip into `[c, 1-c]`.
#[inline]
pub fn clip_value(x: f64, c: f64) -> f64 {
    x.clamp(c, 1.0 - c)
}

/// Add `N(0, σ²)` to every entry and clip into `[c, 1-c]`.
pub fn privatize<R: Rng + ?Sized>(theta: &[f64], sigma: f64, c: f64, rng: &mut R) -> Result<Vec<f64>> {
    if !(c > 0.0 && c <= 0.5) {
        return Err(Error::Precondition(format!("clip must be in (0, 0.5], got {c}")));
    }
    if let Some((i, &t)) = theta.iter().enumerate().find(|(_, &t)| !(t >= c && t <= 1.0 - c)) {
        return Err(Error::Precondition(format!(
            "theta[{i}] = {t} lies outside [{c}, {}]",
            1.0 - c
        )));
    }
    if sigma == 0.0 {
        return Ok(theta.to_vec());
    }
    let noise = Normal::new(0.0, sigma)
        .map_err(|e| Error::Precondition(format!("invalid noise scale {sigma}: {e}")))?;
    Ok(theta
        .iter()
        .map(|&t| clip_value(t + noise.sample(rng), c))
        .collect())
}

/// [`privatize`] for a probability mask; the result is clamped like any other mask.
pub fn privatize_mask<R: Rng + ?Sized>(theta: &ProbMask, sigma: f64, c: f64, rng: &mut R) -> Result<ProbMask> {
    ProbMask::new(privatize(theta.as_slice(), sigma, c, rng)?)
}

/// Zero-mean Gaussian CDF with standard deviation `sigma`.
fn gaussian_cdf(x: f64, sigma: f64) -> f64 {
    0.5 * libm::erfc(-x / (sigma * std::f64::consts::SQRT_2))
}

/// `E[clip(θ + η)]` for `η ~ N(0, σ²)`:
///
/// `c Φ(c-θ) + θ [Φ(1-c-θ) - Φ(c-θ)] - σ/√(2π) [e^{-(1-c-θ)²/2σ²} - e^{-(c-θ)²/2σ²}] + (1-c)(1 - Φ(1-c-θ))`
pub fn expected_clipped(theta: f64, sigma: f64, c: f64) -> f64 {
    if sigma == 0.0 {
        return clip_value(theta, c);
    }
    let upper = 1.0 - c - theta;
    let lower = c - theta;
    let phi_u = gaussian_cdf(upper, sigma);
    let phi_l = gaussian_cdf(lower, sigma);
    let two_var = 2.0 * sigma * sigma;
    let density_term = sigma / (2.0 * std::f64::consts::PI).sqrt()
        * ((-upper * upper / two_var).exp() - (-lower * lower / two_var).exp());
    c * phi_l + theta * (phi_u - phi_l) - density_term + (1.0 - c) * (1.0 - phi_u)
}

/// Samples of `x ↦ E[clip(x + η)]` on a uniform grid over `[c, 1-c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasTable {
    points: Vec<f64>,
    values: Vec<f64>,
    monotone: bool,
}

impl BiasTable {
    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn is_monotone(&self) -> bool {
        self.monotone
    }

    /// Grid spacing `(1 - 2c) / (Q - 1)`.
    pub fn resolution(&self) -> f64 {
        self.points[1] - self.points[0]
    }
}

pub const DEFAULT_TABLE_POINTS: usize = 1024;

pub fn build_bias_table(sigma: f64, c: f64, q: usize) -> Result<BiasTable> {
    if q < 2 {
        return Err(Error::Precondition(format!("need at least 2 table points, got {q}")));
    }
    if !(c > 0.0 && c < 0.5) {
        return Err(Error::Precondition(format!("clip must be in (0, 0.5), got {c}")));
    }
    let step = (1.0 - 2.0 * c) / (q - 1) as f64;
    let points: Vec<f64> = (0..q).map(|i| c + step * i as f64).collect();
    let values: Vec<f64> = points.iter().map(|&x| expected_clipped(x, sigma, c)).collect();
    let monotone = values.windows(2).all(|w| w[1] >= w[0]);
    Ok(BiasTable {
        points,
        values,
        monotone,
    })
}

/// Result of inverting the bias table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Corrected {
    pub value: f64,
    /// False when the table was not monotone and the nearest point was used as is.
    pub interpolated: bool,
}

/// Map an observed mean back to the unclipped parameter whose expected clipped
/// value matches it, interpolating linearly between bracketing table points.
pub fn correct_bias(estimate: f64, table: &BiasTable) -> Corrected {
    let values = &table.values;
    let points = &table.points;
    if !table.monotone {
        let nearest = values
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - estimate).abs().total_cmp(&(b.1 - estimate).abs()))
            .map(|(i, _)| i)
            .expect("table has at least two points");
        return Corrected {
            value: points[nearest],
            interpolated: false,
        };
    }
    let last = values.len() - 1;
    let value = if estimate <= values[0] {
        points[0]
    } else if estimate >= values[last] {
        points[last]
    } else {
        // First index whose value exceeds the estimate; values[hi-1] <= estimate < values[hi].
        let hi = values.partition_point(|&v| v <= estimate);
        let lo = hi - 1;
        let span = values[hi] - values[lo];
        if span == 0.0 {
            points[lo]
        } else {
            points[lo] + (estimate - values[lo]) / span * (points[hi] - points[lo])
        }
    };
    Corrected {
        value,
        interpolated: true,
    }
}

/// Rényi divergence of order `alpha` between `Bern(p)` and `Bern(1-p)`, in nats.
pub fn renyi_binary(alpha: f64, p: f64) -> Result<f64> {
    if !(alpha > 1.0) {
        return Err(Error::Precondition(format!("alpha must exceed 1, got {alpha}")));
    }
    if p <= 0.0 || p >= 1.0 {
        return Err(Error::InfiniteDivergence(p));
    }
    let q = 1.0 - p;
    let inner = p.powf(alpha) * q.powf(1.0 - alpha) + q.powf(alpha) * p.powf(1.0 - alpha);
    Ok(inner.ln() / (alpha - 1.0))
}

/// Privacy budget after releasing a Bernoulli sample: `min(ε, d · r_α(c))`.
pub fn amplified_epsilon(eps: f64, d: usize, alpha: f64, c: f64) -> Result<f64> {
    Ok(eps.min(d as f64 * renyi_binary(alpha, c)?))
}

/// Convert `(α, ε)`-RDP to `(ε + ln(1/δ)/(α-1), δ)`-DP.
pub fn rdp_to_dp(alpha: f64, eps_rdp: f64, delta: f64) -> Result<f64> {
    if !(alpha > 1.0) {
        return Err(Error::Precondition(format!("alpha must exceed 1, got {alpha}")));
    }
    if !(delta > 0.0 && delta <= 1.0) {
        return Err(Error::Precondition(format!("delta must be in (0, 1], got {delta}")));
    }
    Ok(eps_rdp + (1.0 / delta).ln() / (alpha - 1.0))
}
