//! Noise schedule and the forward process.

use crate::error::{Error, Result};
use crate::tensor::{DeterministicRng, Tensor};

/// `β_1..β_T` with `α_t = 1 − β_t` and `ᾱ_t = Π_{s≤t} α_s`. Step indices are
/// 1-based; `ᾱ_0 = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

pub fn linear_beta_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::InvalidArgument("schedule needs at least one step".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "need 0 < beta_start <= beta_end < 1 (got {beta_start}, {beta_end})"
        )));
    }
    let betas: Vec<f64> = (0..steps)
        .map(|i| {
            if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
            }
        })
        .collect();
    NoiseSchedule::from_betas(betas)
}

impl NoiseSchedule {
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() || betas.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::InvalidArgument("every beta must lie in (0, 1)".into()));
        }
        let mut alpha_bars = Vec::with_capacity(betas.len() + 1);
        alpha_bars.push(1.0);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Ok(Self { betas, alpha_bars })
    }

    /// Toy-demo default: `T = 100`, `β` from `1e-4` to `2e-2`.
    pub fn toy_default() -> Self {
        linear_beta_schedule(100, 1e-4, 2e-2).expect("valid default schedule")
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::range("timestep", format!("{t} not in 1..={}", self.steps())));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.betas[t - 1]
    }

    /// Defined for `0 ≤ t ≤ T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    /// Posterior variance `β̃_t = β_t (1 − ᾱ_{t−1}) / (1 − ᾱ_t)`.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        self.beta(t) * (1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t))
    }
}

/// `√(1−β_t) z_{t−1} + √β_t ε`.
pub fn forward_diffuse_step(z_prev: &Tensor, t: usize, schedule: &NoiseSchedule, rng: &mut DeterministicRng) -> Result<Tensor> {
    schedule.check(t)?;
    let (a, b) = (schedule.alpha(t).sqrt(), schedule.beta(t).sqrt());
    Ok(z_prev.map(|z| a * z + b * rng.normal()))
}

/// `√ᾱ_t z_0 + √(1−ᾱ_t) ε`.
pub fn forward_diffuse_closed(z0: &Tensor, t: usize, schedule: &NoiseSchedule, noise: &Tensor) -> Result<Tensor> {
    schedule.check(t)?;
    if z0.shape() != noise.shape() {
        return Err(Error::shape("forward_diffuse_closed", z0.shape(), noise.shape()));
    }
    let ab = schedule.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = z0.data().iter().zip(noise.data()).map(|(z, e)| a * z + b * e).collect();
    Tensor::new(z0.shape().to_vec(), data)
}
