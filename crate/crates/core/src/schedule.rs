//! Per-timestep noise schedules.
//!
//! Observations are sampled as `√β_t·f(z) + √(1−β_t−σ_x²)·ε_ψ(z) + σ_x·ε` and
//! latents as `√α_t·g(x) + √(1−α_t−σ_z²)·ε_ν(z, x) + σ_z·ε`, so every
//! schedule must keep both square roots real.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};

/// Residuals `1 − coef − σ²` within this distance of zero count as exactly zero.
/// `1 − (1 − σ²) − σ²` is not always `0.0` in floating point.
pub const BOUNDARY_TOLERANCE: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub sigma_x: f64,
    pub sigma_z: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleTerm {
    Beta,
    Alpha,
    SigmaX,
    SigmaZ,
    Length,
}

/// One failed check: 1-based timestep (0 for schedule-wide checks) and the term.
#[derive(Clone, Debug, PartialEq)]
pub struct Violation {
    pub step: usize,
    pub term: ScheduleTerm,
    pub detail: String,
}

/// `T` evenly spaced values from `lo` to `hi` inclusive; `[lo]` when `T = 1`.
pub fn linear_schedule(len: usize, lo: f64, hi: f64) -> Result<Vec<f64>> {
    if len == 0 {
        return config_err("schedule length must be at least 1");
    }
    if !(lo >= 0.0) || lo > hi {
        return config_err(format!("schedule endpoints must satisfy 0 <= lo <= hi, got lo={lo}, hi={hi}"));
    }
    if len == 1 {
        return Ok(vec![lo]);
    }
    let step = (hi - lo) / (len - 1) as f64;
    let mut values: Vec<f64> = (0..len).map(|i| lo + step * i as f64).collect();
    values[len - 1] = hi;
    Ok(values)
}

/// Coefficient `√(1 − coef − σ²)`, exactly zero on the admissible boundary.
pub fn noise_coefficient(coef: f64, sigma: f64) -> f64 {
    let residual = 1.0 - coef - sigma * sigma;
    if residual <= BOUNDARY_TOLERANCE {
        0.0
    } else {
        residual.sqrt()
    }
}

impl NoiseSchedule {
    /// Linearly spaced schedules from `lo_frac·(1−σ²)` up to `1−σ²` for both
    /// coefficients.
    pub fn linear(len: usize, sigma_x: f64, sigma_z: f64, lo_frac: f64) -> Result<Self> {
        Self::linear_with(len, sigma_x, sigma_z, lo_frac, lo_frac)
    }

    pub fn linear_with(
        len: usize,
        sigma_x: f64,
        sigma_z: f64,
        beta_lo_frac: f64,
        alpha_lo_frac: f64,
    ) -> Result<Self> {
        check_sigma(sigma_x, "sigma_x")?;
        check_sigma(sigma_z, "sigma_z")?;
        let beta_hi = 1.0 - sigma_x * sigma_x;
        let alpha_hi = 1.0 - sigma_z * sigma_z;
        let schedule = Self {
            beta: linear_schedule(len, beta_lo_frac * beta_hi, beta_hi)?,
            alpha: linear_schedule(len, alpha_lo_frac * alpha_hi, alpha_hi)?,
            sigma_x,
            sigma_z,
        };
        schedule.ensure_valid()?;
        Ok(schedule)
    }

    /// Constant schedule at the boundary where both noise-network
    /// coefficients vanish.
    pub fn vanilla(len: usize, sigma_x: f64, sigma_z: f64) -> Result<Self> {
        check_sigma(sigma_x, "sigma_x")?;
        check_sigma(sigma_z, "sigma_z")?;
        if len == 0 {
            return config_err("schedule length must be at least 1");
        }
        Ok(Self {
            beta: vec![1.0 - sigma_x * sigma_x; len],
            alpha: vec![1.0 - sigma_z * sigma_z; len],
            sigma_x,
            sigma_z,
        })
    }

    pub fn len(&self) -> usize {
        self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
    }

    /// All violated constraints; empty means the schedule is valid.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let mut push = |step, term, detail: String| out.push(Violation { step, term, detail });
        for (term, sigma) in [(ScheduleTerm::SigmaX, self.sigma_x), (ScheduleTerm::SigmaZ, self.sigma_z)] {
            if !(sigma > 0.0 && sigma * sigma < 1.0) {
                push(0, term, format!("sigma {sigma} must satisfy 0 < sigma and sigma^2 < 1"));
            }
        }
        if self.beta.len() != self.alpha.len() || self.beta.is_empty() {
            push(
                0,
                ScheduleTerm::Length,
                format!("beta has {} entries, alpha has {}", self.beta.len(), self.alpha.len()),
            );
        }
        for (series, term, sigma) in [
            (&self.beta, ScheduleTerm::Beta, self.sigma_x),
            (&self.alpha, ScheduleTerm::Alpha, self.sigma_z),
        ] {
            let upper = 1.0 - sigma * sigma;
            for (i, &c) in series.iter().enumerate() {
                if !(c >= 0.0) {
                    push(i + 1, term, format!("coefficient {c} is negative"));
                } else if c - upper > BOUNDARY_TOLERANCE {
                    push(i + 1, term, format!("coefficient {c} + sigma^2 {} exceeds 1", sigma * sigma));
                }
            }
        }
        out
    }

    pub fn ensure_valid(&self) -> Result<()> {
        let violations = self.validate();
        if violations.is_empty() {
            return Ok(());
        }
        let msg = violations
            .iter()
            .map(|v| format!("t={} {:?}: {}", v.step, v.term, v.detail))
            .collect::<Vec<_>>()
            .join("; ");
        config_err(format!("invalid noise schedule: {msg}"))
    }

    fn index(&self, step: usize) -> Result<usize> {
        if step == 0 || step > self.len() {
            return config_err(format!("timestep {step} outside 1..={}", self.len()));
        }
        Ok(step - 1)
    }

    /// `(√β_t, √(1−β_t−σ_x²))` for 1-based `step`.
    pub fn x_coefficients(&self, step: usize) -> Result<(f64, f64)> {
        let b = self.beta[self.index(step)?];
        Ok((b.sqrt(), noise_coefficient(b, self.sigma_x)))
    }

    /// `(√α_t, √(1−α_t−σ_z²))` for 1-based `step`.
    pub fn z_coefficients(&self, step: usize) -> Result<(f64, f64)> {
        let a = self.alpha[self.index(step)?];
        Ok((a.sqrt(), noise_coefficient(a, self.sigma_z)))
    }
}

fn check_sigma(sigma: f64, name: &str) -> Result<()> {
    if !(sigma > 0.0 && sigma < 1.0) {
        return config_err(format!("{name} must lie in (0, 1), got {sigma}"));
    }
    Ok(())
}
