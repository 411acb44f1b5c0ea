//! Noise schedules, sampling time grids and the score reparameterization.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Exponent of the polynomial (Karras-style) time spacing.
pub const EDM_RHO: f64 = 7.0;

/// Samplers stop here instead of at zero; the output is the one-step
/// denoised prediction at this time.
pub const DEFAULT_T_MIN: f64 = 1e-3;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum NoiseSchedule {
    /// `sigma(t) = t`.
    #[default]
    VarianceExploding,
    /// Scaled-linear VP schedule,
    /// `beta(t) = ((beta_max^0.5 - beta_min^0.5) t + beta_min^0.5)^2`.
    VariancePreserving { beta_min: f64, beta_max: f64 },
}

impl NoiseSchedule {
    pub fn variance_preserving(beta_min: f64, beta_max: f64) -> Result<Self> {
        if !(beta_min >= 0.0) || !(beta_max > beta_min) || !beta_max.is_finite() {
            return Err(Error::Argument(format!(
                "VP schedule needs 0 <= beta_min < beta_max, got ({beta_min}, {beta_max})"
            )));
        }
        Ok(NoiseSchedule::VariancePreserving { beta_min, beta_max })
    }

    /// `beta_max^0.5 - beta_min^0.5`; zero for the VE schedule.
    pub fn beta_d(&self) -> f64 {
        match *self {
            NoiseSchedule::VarianceExploding => 0.0,
            NoiseSchedule::VariancePreserving { beta_min, beta_max } => {
                beta_max.sqrt() - beta_min.sqrt()
            }
        }
    }

    /// Noise level at time `t`.
    pub fn sigma(&self, t: f64) -> Result<f64> {
        if !(t >= 0.0) {
            return Err(Error::Domain(format!("time must be >= 0, got {t}")));
        }
        Ok(match *self {
            NoiseSchedule::VarianceExploding => t,
            NoiseSchedule::VariancePreserving { beta_min, .. } => {
                let bd = self.beta_d();
                let exponent =
                    bd * bd * t.powi(3) / 3.0 + bd * beta_min.sqrt() * t * t + beta_min * t;
                exponent.exp_m1().sqrt()
            }
        })
    }
}

/// `sigma_of_t` in free-function form.
pub fn sigma_of_t(schedule: &NoiseSchedule, t: f64) -> Result<f64> {
    schedule.sigma(t)
}

/// Preconditioning used to turn an epsilon-prediction network `F` into a
/// denoiser `D(x; sigma) = c_skip x + c_out F(c_in x; c_noise)` and then into
/// a score `(D - x) / sigma^2`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ScoreReparam;

impl ScoreReparam {
    pub fn c_skip(&self, _sigma: f64) -> f64 {
        1.0
    }

    pub fn c_out(&self, sigma: f64) -> f64 {
        -sigma
    }

    pub fn c_in(&self, sigma: f64) -> f64 {
        1.0 / (sigma * sigma + 1.0).sqrt()
    }

    /// Conditioning input for the network. The analytic denoisers here take
    /// sigma directly, so no schedule inversion happens.
    pub fn c_noise(&self, sigma: f64) -> f64 {
        sigma
    }

    /// Build `D(x; sigma)` from an epsilon-prediction network.
    pub fn denoise<F>(&self, x: &[f64], sigma: f64, network: F) -> Vec<f64>
    where
        F: Fn(&[f64], f64) -> Vec<f64>,
    {
        let c_in = self.c_in(sigma);
        let scaled: Vec<f64> = x.iter().map(|v| v * c_in).collect();
        let eps = network(&scaled, self.c_noise(sigma));
        x.iter()
            .zip(eps)
            .map(|(xi, e)| self.c_skip(sigma) * xi + self.c_out(sigma) * e)
            .collect()
    }

    pub fn score_from_denoised(&self, x: &[f64], denoised: &[f64], sigma: f64) -> Vec<f64> {
        let s2 = sigma * sigma;
        x.iter().zip(denoised).map(|(xi, d)| (d - xi) / s2).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StepRule {
    EdmPolynomial,
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    /// Strictly decreasing; `times[0]` is the start, the last entry the end.
    pub times: Vec<f64>,
    pub step_rule: StepRule,
}

impl TimeGrid {
    pub fn n_steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn start(&self) -> f64 {
        self.times[0]
    }

    pub fn end(&self) -> f64 {
        *self.times.last().expect("grid is non-empty")
    }

    /// Index of the grid point closest to `t`.
    pub fn nearest_index(&self, t: f64) -> usize {
        let mut best = 0;
        for (i, &ti) in self.times.iter().enumerate() {
            if (ti - t).abs() < (self.times[best] - t).abs() {
                best = i;
            }
        }
        best
    }
}

pub fn make_time_grid(n_steps: usize, t_min: f64, t_max: f64, rule: StepRule) -> Result<TimeGrid> {
    if n_steps < 1 {
        return Err(Error::Argument("time grid needs at least one step".into()));
    }
    if !(t_min >= 0.0) || !(t_min < t_max) || !t_max.is_finite() {
        return Err(Error::Argument(format!(
            "time grid needs 0 <= t_min < t_max, got ({t_min}, {t_max})"
        )));
    }
    let n = n_steps as f64;
    let mut times: Vec<f64> = (0..=n_steps)
        .map(|i| {
            let frac = i as f64 / n;
            match rule {
                StepRule::Uniform => t_max + frac * (t_min - t_max),
                StepRule::EdmPolynomial => {
                    let a = t_max.powf(1.0 / EDM_RHO);
                    let b = t_min.powf(1.0 / EDM_RHO);
                    (a + frac * (b - a)).powf(EDM_RHO)
                }
            }
        })
        .collect();
    // pin the endpoints exactly
    times[0] = t_max;
    times[n_steps] = t_min;
    Ok(TimeGrid { times, step_rule: rule })
}
