//! Analytic ground truth `p`, imperfect model `q`, and the object detector.
//!
//! A sample is the concatenation of `M` two-dimensional slots. Under
//! `p(. | c)` slot `i` is `N(mu_present, var_present I)` when object `i` is
//! mentioned in `c` and `N(mu_absent, var_absent I)` otherwise. The model `q`
//! drops a mentioned object with probability `rho_i` (slot drawn from the
//! absent component instead) and inflates every component variance by
//! `gamma`. Slots are independent given `c`, so all densities, scores and
//! posterior means factor per slot and are exact at every noise level.

mod micro;

pub use micro::{exact_pf_target, exact_pf_target_with, DiscreteMicroWorld};

use std::collections::BTreeSet;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SLOT_DIM: usize = 2;
const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlotGaussianPair {
    pub mu_present: [f64; 2],
    pub mu_absent: [f64; 2],
    pub var_present: f64,
    pub var_absent: f64,
}

impl Default for SlotGaussianPair {
    fn default() -> Self {
        Self { mu_present: [2.0, 2.0], mu_absent: [-2.0, -2.0], var_present: 1.0, var_absent: 1.0 }
    }
}

/// Which of the two distributions to evaluate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Which {
    /// Ground truth.
    P,
    /// Model.
    Q,
}

/// Object-mention set `O_C`, zero-based object indices.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Condition {
    pub mentioned: BTreeSet<usize>,
}

impl Condition {
    pub fn new<I: IntoIterator<Item = usize>>(objects: I) -> Self {
        Self { mentioned: objects.into_iter().collect() }
    }

    /// The empty condition; used for unconditional generation.
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn mentions(&self, i: usize) -> bool {
        self.mentioned.contains(&i)
    }

    pub fn is_empty(&self) -> bool {
        self.mentioned.is_empty()
    }

    pub fn mask(&self, n_objects: usize) -> u64 {
        (0..n_objects).filter(|i| self.mentions(*i)).fold(0u64, |m, i| m | (1 << i))
    }

    pub fn from_mask(mask: u64, n_objects: usize) -> Self {
        Self::new((0..n_objects).filter(|i| mask & (1 << i) != 0))
    }
}

/// One isotropic Gaussian component of a slot marginal.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Component {
    pub weight: f64,
    pub mean: [f64; 2],
    pub var: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureWorld {
    pub n_objects: usize,
    pub slot: SlotGaussianPair,
    /// Per-object miss rate `rho_i` of the model.
    pub miss_rates: Vec<f64>,
    /// `gamma >= 1`, multiplies the model's component variances.
    pub quality_inflation: f64,
    /// Probability that each object is mentioned when conditions are drawn.
    pub mention_prob: f64,
}

impl Default for MixtureWorld {
    fn default() -> Self {
        Self {
            n_objects: 3,
            slot: SlotGaussianPair::default(),
            miss_rates: vec![0.3; 3],
            quality_inflation: 1.5,
            mention_prob: 0.5,
        }
    }
}

fn log_normal_iso(x: &[f64], mean: &[f64; 2], var: f64) -> f64 {
    let d2 = (x[0] - mean[0]).powi(2) + (x[1] - mean[1]).powi(2);
    -0.5 * d2 / var - (LN_2PI + var.ln())
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let m = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + values.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

impl MixtureWorld {
    pub fn new(
        n_objects: usize,
        slot: SlotGaussianPair,
        miss_rates: Vec<f64>,
        quality_inflation: f64,
        mention_prob: f64,
    ) -> Result<Self> {
        let w = Self { n_objects, slot, miss_rates, quality_inflation, mention_prob };
        w.validate()?;
        Ok(w)
    }

    /// One object, always-present ground truth, no model error.
    pub fn single_object(slot: SlotGaussianPair, miss_rate: f64, quality_inflation: f64) -> Self {
        Self {
            n_objects: 1,
            slot,
            miss_rates: vec![miss_rate],
            quality_inflation,
            mention_prob: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_objects == 0 || self.n_objects > 16 {
            return Err(Error::Validation(format!("n_objects must be in 1..=16, got {}", self.n_objects)));
        }
        if self.miss_rates.len() != self.n_objects {
            return Err(Error::Validation(format!(
                "expected {} miss rates, got {}",
                self.n_objects,
                self.miss_rates.len()
            )));
        }
        if let Some(r) = self.miss_rates.iter().find(|r| !(**r >= 0.0 && **r < 1.0)) {
            return Err(Error::Validation(format!("miss rate {r} outside [0, 1)")));
        }
        if !(self.quality_inflation >= 1.0) || !self.quality_inflation.is_finite() {
            return Err(Error::Validation(format!(
                "quality inflation must be >= 1, got {}",
                self.quality_inflation
            )));
        }
        if !(self.slot.var_present > 0.0) || !(self.slot.var_absent > 0.0) {
            return Err(Error::Validation("slot variances must be positive".into()));
        }
        if self.slot.mu_present == self.slot.mu_absent {
            return Err(Error::Validation("present and absent means must differ".into()));
        }
        if !(self.mention_prob > 0.0 && self.mention_prob <= 1.0) {
            return Err(Error::Validation(format!(
                "mention probability must be in (0, 1], got {}",
                self.mention_prob
            )));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        SLOT_DIM * self.n_objects
    }

    pub fn check_point(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::Argument(format!("expected a {}-dim point, got {}", self.dim(), x.len())));
        }
        Ok(())
    }

    pub fn check_condition(&self, c: &Condition) -> Result<()> {
        match c.mentioned.iter().find(|i| **i >= self.n_objects) {
            Some(i) => Err(Error::Argument(format!("object {i} out of range 0..{}", self.n_objects))),
            None => Ok(()),
        }
    }

    /// Clean (sigma = 0) mixture components of slot `i`.
    pub fn slot_components(&self, which: Which, c: &Condition, i: usize) -> Vec<Component> {
        let s = &self.slot;
        match (which, c.mentions(i)) {
            (Which::P, true) => vec![Component { weight: 1.0, mean: s.mu_present, var: s.var_present }],
            (Which::P, false) => vec![Component { weight: 1.0, mean: s.mu_absent, var: s.var_absent }],
            (Which::Q, true) => {
                let rho = self.miss_rates[i];
                let g = self.quality_inflation;
                let mut out =
                    vec![Component { weight: 1.0 - rho, mean: s.mu_present, var: g * s.var_present }];
                if rho > 0.0 {
                    out.push(Component { weight: rho, mean: s.mu_absent, var: g * s.var_absent });
                }
                out
            }
            (Which::Q, false) => vec![Component {
                weight: 1.0,
                mean: s.mu_absent,
                var: self.quality_inflation * s.var_absent,
            }],
        }
    }

    fn slot_log_terms(&self, comps: &[Component], xs: &[f64], s2: f64) -> Vec<f64> {
        comps.iter().map(|k| k.weight.ln() + log_normal_iso(xs, &k.mean, k.var + s2)).collect()
    }

    /// `log` of the sigma-noised density.
    pub fn noisy_log_density(&self, c: &Condition, which: Which, x: &[f64], sigma: f64) -> Result<f64> {
        self.check_point(x)?;
        self.check_condition(c)?;
        let s2 = sigma * sigma;
        Ok((0..self.n_objects)
            .map(|i| {
                let comps = self.slot_components(which, c, i);
                log_sum_exp(&self.slot_log_terms(&comps, &x[2 * i..2 * i + 2], s2))
            })
            .sum())
    }

    pub fn noisy_density(&self, c: &Condition, which: Which, x: &[f64], sigma: f64) -> Result<f64> {
        Ok(self.noisy_log_density(c, which, x, sigma)?.exp())
    }

    /// Component responsibilities of slot `i` at a noisy point.
    fn responsibilities(&self, comps: &[Component], xs: &[f64], s2: f64) -> Vec<f64> {
        let logs = self.slot_log_terms(comps, xs, s2);
        let norm = log_sum_exp(&logs);
        logs.iter().map(|l| (l - norm).exp()).collect()
    }

    /// `grad_x log` of the sigma-noised density.
    pub fn noisy_score(&self, c: &Condition, which: Which, x: &[f64], sigma: f64) -> Result<Vec<f64>> {
        self.check_point(x)?;
        self.check_condition(c)?;
        let s2 = sigma * sigma;
        let mut out = vec![0.0; x.len()];
        for i in 0..self.n_objects {
            let xs = &x[2 * i..2 * i + 2];
            let comps = self.slot_components(which, c, i);
            let resp = self.responsibilities(&comps, xs, s2);
            for (k, r) in comps.iter().zip(resp) {
                for a in 0..2 {
                    out[2 * i + a] -= r * (xs[a] - k.mean[a]) / (k.var + s2);
                }
            }
        }
        Ok(out)
    }

    /// Posterior mean `E[X_0 | X_sigma = x]` under `which`.
    pub fn posterior_mean(&self, c: &Condition, which: Which, x: &[f64], sigma: f64) -> Result<Vec<f64>> {
        self.check_point(x)?;
        self.check_condition(c)?;
        if sigma == 0.0 {
            return Ok(x.to_vec());
        }
        let s2 = sigma * sigma;
        let mut out = vec![0.0; x.len()];
        for i in 0..self.n_objects {
            let xs = &x[2 * i..2 * i + 2];
            let comps = self.slot_components(which, c, i);
            let resp = self.responsibilities(&comps, xs, s2);
            for (k, r) in comps.iter().zip(resp) {
                let shrink = k.var / (k.var + s2);
                for a in 0..2 {
                    out[2 * i + a] += r * (k.mean[a] + shrink * (xs[a] - k.mean[a]));
                }
            }
        }
        Ok(out)
    }

    /// MMSE denoiser `f(x_t)` of the model `q`.
    pub fn mmse_denoise(&self, c: &Condition, x: &[f64], sigma: f64) -> Result<Vec<f64>> {
        self.posterior_mean(c, Which::Q, x, sigma)
    }

    /// Exact Bayes posterior (equal priors) that slot `i` of a clean sample
    /// came from the present component.
    pub fn detect_object(&self, x0: &[f64], i: usize) -> Result<f64> {
        self.check_point(x0)?;
        if i >= self.n_objects {
            return Err(Error::Argument(format!("object {i} out of range 0..{}", self.n_objects)));
        }
        let xs = &x0[2 * i..2 * i + 2];
        let lp = log_normal_iso(xs, &self.slot.mu_present, self.slot.var_present);
        let la = log_normal_iso(xs, &self.slot.mu_absent, self.slot.var_absent);
        // logistic of the log-odds, written to stay finite far in the tails
        let z = lp - la;
        Ok(if z >= 0.0 { 1.0 / (1.0 + (-z).exp()) } else { z.exp() / (1.0 + z.exp()) })
    }

    pub fn sample_clean<R: Rng + ?Sized>(&self, c: &Condition, which: Which, rng: &mut R) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dim());
        for i in 0..self.n_objects {
            let comps = self.slot_components(which, c, i);
            let k = if comps.len() == 1 {
                &comps[0]
            } else {
                let u: f64 = rng.random();
                if u < comps[0].weight { &comps[0] } else { &comps[1] }
            };
            let sd = k.var.sqrt();
            for a in 0..2 {
                let z: f64 = StandardNormal.sample(rng);
                out.push(k.mean[a] + sd * z);
            }
        }
        out
    }

    pub fn sample_noisy<R: Rng + ?Sized>(&self, c: &Condition, which: Which, sigma: f64, rng: &mut R) -> Vec<f64> {
        let mut x = self.sample_clean(c, which, rng);
        for v in x.iter_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *v += sigma * z;
        }
        x
    }

    /// Draw a non-empty condition: each object mentioned independently with
    /// `mention_prob`, redrawn until at least one object is mentioned.
    pub fn sample_condition<R: Rng + ?Sized>(&self, rng: &mut R) -> Condition {
        loop {
            let c = Condition::new((0..self.n_objects).filter(|_| rng.random::<f64>() < self.mention_prob));
            if !c.is_empty() {
                return c;
            }
        }
    }

    /// Every non-empty condition with its prior probability under
    /// [`MixtureWorld::sample_condition`].
    pub fn condition_prior(&self) -> Vec<(Condition, f64)> {
        let m = self.n_objects;
        let pi = self.mention_prob;
        let all: Vec<(Condition, f64)> = (1u64..(1 << m))
            .map(|mask| {
                let k = mask.count_ones() as i32;
                (Condition::from_mask(mask, m), pi.powi(k) * (1.0 - pi).powi(m as i32 - k))
            })
            .collect();
        let z: f64 = all.iter().map(|(_, w)| w).sum();
        all.into_iter().map(|(c, w)| (c, w / z)).collect()
    }

    /// `log` of the condition-marginal noisy density `sum_c P(c) p(x | c)`.
    pub fn marginal_log_density(&self, which: Which, x: &[f64], sigma: f64) -> Result<f64> {
        let terms = self
            .condition_prior()
            .iter()
            .map(|(c, w)| Ok(w.ln() + self.noisy_log_density(c, which, x, sigma)?))
            .collect::<Result<Vec<f64>>>()?;
        Ok(log_sum_exp(&terms))
    }
}

#[cfg(test)]
mod tests;
