//! Small discrete Markov world for exact checks of the particle-filter
//! identity `v_t = q_t * phi_t`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::StreamSeed;

const STOCHASTIC_TOL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscreteMicroWorld {
    pub n_states: usize,
    pub horizon: usize,
    /// `q_transitions[t][from][to]` is `q(x_t = to | x_{t+1} = from)`, for
    /// `t = 0..horizon`.
    pub q_transitions: Vec<Vec<Vec<f64>>>,
    /// Distribution of `X_T` under the model.
    pub q_prior: Vec<f64>,
    /// Target marginals `p_t`, indexed by `t = 0..=horizon`.
    pub p_marginals: Vec<Vec<f64>>,
}

fn random_simplex<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    // bounded away from zero so every ratio stays finite
    let raw: Vec<f64> = (0..n).map(|_| 0.05 + rng.random::<f64>()).collect();
    let z: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / z).collect()
}

fn check_distribution(v: &[f64], n: usize, what: &str) -> Result<()> {
    if v.len() != n {
        return Err(Error::Validation(format!("{what}: expected length {n}, got {}", v.len())));
    }
    if v.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) {
        return Err(Error::Validation(format!("{what}: entries must be finite and non-negative")));
    }
    let s: f64 = v.iter().sum();
    if (s - 1.0).abs() > STOCHASTIC_TOL {
        return Err(Error::Validation(format!("{what}: sums to {s}, not 1")));
    }
    Ok(())
}

impl DiscreteMicroWorld {
    /// Seeded random micro-world. `p_T` equals `q_T` (both are "pure noise"),
    /// every other `p_t` is an independent random distribution with full support.
    pub fn random(n_states: usize, horizon: usize, seed: u64) -> Result<Self> {
        if n_states == 0 || n_states > 5 || horizon == 0 || horizon > 4 {
            return Err(Error::Argument(format!(
                "micro-world needs 1 <= S <= 5 and 1 <= T <= 4, got S={n_states}, T={horizon}"
            )));
        }
        let mut rng = StreamSeed::new(seed).rng();
        let q_transitions = (0..horizon)
            .map(|_| (0..n_states).map(|_| random_simplex(&mut rng, n_states)).collect())
            .collect();
        let q_prior = random_simplex(&mut rng, n_states);
        let mut p_marginals: Vec<Vec<f64>> =
            (0..horizon).map(|_| random_simplex(&mut rng, n_states)).collect();
        p_marginals.push(q_prior.clone());
        let w = Self { n_states, horizon, q_transitions, q_prior, p_marginals };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.n_states;
        if s == 0 || self.horizon == 0 {
            return Err(Error::Validation("micro-world needs S >= 1 and T >= 1".into()));
        }
        if self.q_transitions.len() != self.horizon {
            return Err(Error::Validation(format!(
                "expected {} transition matrices, got {}",
                self.horizon,
                self.q_transitions.len()
            )));
        }
        for (t, m) in self.q_transitions.iter().enumerate() {
            if m.len() != s {
                return Err(Error::Validation(format!("transition {t}: expected {s} rows")));
            }
            for (r, row) in m.iter().enumerate() {
                check_distribution(row, s, &format!("transition {t} row {r}"))?;
            }
        }
        check_distribution(&self.q_prior, s, "q prior")?;
        if self.p_marginals.len() != self.horizon + 1 {
            return Err(Error::Validation(format!(
                "expected {} target marginals, got {}",
                self.horizon + 1,
                self.p_marginals.len()
            )));
        }
        for (t, p) in self.p_marginals.iter().enumerate() {
            check_distribution(p, s, &format!("p_{t}"))?;
            if p.iter().any(|v| *v <= 0.0) {
                return Err(Error::Validation(format!("p_{t} must have full support")));
            }
        }
        if self.q_marginals().iter().flatten().any(|v| *v <= 0.0) {
            return Err(Error::Validation("model marginals must have full support".into()));
        }
        Ok(())
    }

    /// Model marginals `q_t`, indexed by `t = 0..=horizon`.
    pub fn q_marginals(&self) -> Vec<Vec<f64>> {
        let s = self.n_states;
        let mut out = vec![Vec::new(); self.horizon + 1];
        out[self.horizon] = self.q_prior.clone();
        for t in (0..self.horizon).rev() {
            let prev = &out[t + 1];
            let mut next = vec![0.0; s];
            for (from, pf) in prev.iter().enumerate() {
                for (to, slot) in next.iter_mut().enumerate() {
                    *slot += pf * self.q_transitions[t][from][to];
                }
            }
            out[t] = next;
        }
        out
    }

    /// Correction terms `phi_t = p_t / q_t`, indexed by `t`.
    pub fn exact_phis(&self) -> Vec<Vec<f64>> {
        self.q_marginals()
            .iter()
            .zip(&self.p_marginals)
            .map(|(q, p)| p.iter().zip(q).map(|(a, b)| a / b).collect())
            .collect()
    }
}

/// Distribution `v(X_t)` induced by the particle filter in the infinite-particle
/// limit, computed by the weight recursion
/// `v_t(x) ∝ sum_y v_{t+1}(y) q(x | y) phi_t(x) / phi_{t+1}(y)`
/// with `v_T ∝ q_T phi_T`, and the given per-time correction terms.
pub fn exact_pf_target_with(micro: &DiscreteMicroWorld, t: usize, phis: &[Vec<f64>]) -> Result<Vec<f64>> {
    micro.validate()?;
    if t > micro.horizon {
        return Err(Error::Argument(format!("time index {t} beyond horizon {}", micro.horizon)));
    }
    if phis.len() != micro.horizon + 1 || phis.iter().any(|p| p.len() != micro.n_states) {
        return Err(Error::Argument("one correction vector per time step is required".into()));
    }
    if phis.iter().flatten().any(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(Error::Invariant("correction terms must be positive and finite".into()));
    }
    let normalize = |v: Vec<f64>| {
        let z: f64 = v.iter().sum();
        v.into_iter().map(|a| a / z).collect::<Vec<f64>>()
    };
    let t_end = micro.horizon;
    let mut v = normalize(micro.q_prior.iter().zip(&phis[t_end]).map(|(q, p)| q * p).collect());
    for s in (t..t_end).rev() {
        let mut next = vec![0.0; micro.n_states];
        for (from, vf) in v.iter().enumerate() {
            for (to, slot) in next.iter_mut().enumerate() {
                *slot += vf * micro.q_transitions[s][from][to] * phis[s][to] / phis[s + 1][from];
            }
        }
        v = normalize(next);
    }
    Ok(v)
}

/// [`exact_pf_target_with`] using the exact corrections `phi_t = p_t / q_t`.
pub fn exact_pf_target(micro: &DiscreteMicroWorld, t: usize) -> Result<Vec<f64>> {
    exact_pf_target_with(micro, t, &micro.exact_phis())
}
