//! Discrete variance-preserving noise schedule.
//!
//! Steps are 1-based: `t ∈ {1, …, N}` indexes the noisy states and `t = 0`
//! denotes clean data, with the convention `ᾱ_0 = 1`. Every accessor in this
//! crate that takes a step index uses this mapping.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    #[default]
    Linear,
}

/// Coefficients of an `N`-step DDPM / VP-SDE discretization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    n_steps: usize,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    sampler_stds: Vec<f64>,
}

impl NoiseSchedule {
    /// Builds a schedule whose betas interpolate `beta_min..=beta_max`.
    pub fn build(kind: ScheduleKind, n_steps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if n_steps == 0 {
            return Err(Error::config("n_steps must be at least 1"));
        }
        if !(beta_min > 0.0 && beta_min < 1.0) {
            return Err(Error::config(format!("beta_min = {beta_min} must lie in (0, 1)")));
        }
        if !(beta_max > 0.0 && beta_max < 1.0) {
            return Err(Error::config(format!("beta_max = {beta_max} must lie in (0, 1)")));
        }
        if beta_min > beta_max {
            return Err(Error::config(format!(
                "beta_min = {beta_min} exceeds beta_max = {beta_max}"
            )));
        }

        let betas: Vec<f64> = match kind {
            ScheduleKind::Linear => {
                if n_steps == 1 {
                    vec![beta_min]
                } else {
                    let span = beta_max - beta_min;
                    let last = (n_steps - 1) as f64;
                    (0..n_steps)
                        .map(|i| beta_min + span * (i as f64) / last)
                        .collect()
                }
            }
        };
        Ok(Self::from_valid_betas(betas))
    }

    /// Betas for an `n_steps` discretization that spans the same total noise
    /// as the standard 1000-step DDPM schedule (`1e-4..=0.02`).
    pub fn ddpm_equivalent(n_steps: usize) -> Result<Self> {
        let scale = 1000.0 / n_steps.max(1) as f64;
        Self::build(
            ScheduleKind::Linear,
            n_steps,
            (1e-4 * scale).min(0.999),
            (0.02 * scale).min(0.999),
        )
    }

    /// Schedule with explicit betas, each in `(0, 1)`.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::config("n_steps must be at least 1"));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::config(format!("beta = {b} must lie in (0, 1)")));
        }
        Ok(Self::from_valid_betas(betas))
    }

    fn from_valid_betas(betas: Vec<f64>) -> Self {
        let n_steps = betas.len();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(n_steps);
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        let sampler_stds = (0..n_steps)
            .map(|i| {
                let prev = if i == 0 { 1.0 } else { alpha_bars[i - 1] };
                ((1.0 - prev) / (1.0 - alpha_bars[i]) * betas[i]).max(0.0).sqrt()
            })
            .collect();
        Self { n_steps, betas, alphas, alpha_bars, sampler_stds }
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn sampler_stds(&self) -> &[f64] {
        &self.sampler_stds
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.n_steps {
            return Err(Error::StepIndex { t, n_steps: self.n_steps });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        self.check_step(t)?;
        Ok(self.betas[t - 1])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        self.check_step(t)?;
        Ok(self.alphas[t - 1])
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        if t == 0 {
            return Ok(1.0);
        }
        self.check_step(t)?;
        Ok(self.alpha_bars[t - 1])
    }

    /// `σ̃_t² = (1 − ᾱ_{t−1}) / (1 − ᾱ_t) · β_t`; zero at `t = 1`.
    pub fn sampler_std(&self, t: usize) -> Result<f64> {
        self.check_step(t)?;
        Ok(self.sampler_stds[t - 1])
    }

    /// `x_t = √ᾱ_t · x0 + √(1 − ᾱ_t) · eps`.
    pub fn forward_marginal(&self, x0: &DVector<f64>, t: usize, eps: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_step(t)?;
        let ab = self.alpha_bar(t)?;
        check_len("eps", eps.len(), x0.len())?;
        Ok(x0 * ab.sqrt() + eps * (1.0 - ab).sqrt())
    }
}
