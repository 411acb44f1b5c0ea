//! Comparison methods: best-of-K selection by object detection or by the
//! correction ratio, and score guidance with the log-ratio gradient.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::guidance::{Discriminator, ObjectDetector};
use crate::particlefilter::PhiSource;
use crate::sampling::ScoreProvider;
use crate::toyworld::{Condition, MixtureWorld, Which};

/// Guidance is applied only below this noise level.
pub const DEFAULT_SIGMA_GATE: f64 = 5.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionCriterion {
    ObjectOccurrence,
    LikelihoodRatio,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub chosen_index: usize,
    pub scores: Vec<f64>,
    pub criterion: SelectionCriterion,
    /// The criterion could not distinguish candidates (e.g. nothing mentioned).
    pub degenerate: bool,
}

/// Index of the largest score; ties go to the lowest index.
pub fn argmax_lowest(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, s) in scores.iter().enumerate() {
        if *s > scores[best] {
            best = i;
        }
    }
    best
}

/// Pick the sample whose mentioned objects are most likely all detected.
pub fn object_select(finals: &[Vec<f64>], c: &Condition, detector: &dyn ObjectDetector) -> Result<SelectionResult> {
    if finals.is_empty() {
        return Err(Error::Argument("selection needs at least one candidate".into()));
    }
    let scores: Vec<f64> =
        finals.iter().map(|x| c.mentioned.iter().map(|&i| detector.detect(x, i)).product()).collect();
    Ok(SelectionResult {
        chosen_index: if c.is_empty() { 0 } else { argmax_lowest(&scores) },
        scores,
        criterion: SelectionCriterion::ObjectOccurrence,
        degenerate: c.is_empty(),
    })
}

/// Pick the sample with the largest correction ratio at noise level `sigma`.
pub fn d_select(finals: &[Vec<f64>], c: &Condition, correction: &dyn PhiSource, sigma: f64) -> Result<SelectionResult> {
    if finals.is_empty() {
        return Err(Error::Argument("selection needs at least one candidate".into()));
    }
    let scores = finals.iter().map(|x| correction.phi(x, sigma, c, 0)).collect::<Result<Vec<f64>>>()?;
    let degenerate = scores.iter().all(|s| *s == scores[0]);
    Ok(SelectionResult {
        chosen_index: argmax_lowest(&scores),
        scores,
        criterion: SelectionCriterion::LikelihoodRatio,
        degenerate,
    })
}

/// Source of `grad_x log(p(x_t | c) / q(x_t | c))`.
#[derive(Clone, Copy)]
pub enum CorrectionGradient<'a> {
    Analytic(&'a MixtureWorld),
    /// Gradient of a discriminator's logit.
    Learned(&'a Discriminator),
}

impl CorrectionGradient<'_> {
    pub fn gradient(&self, x: &[f64], sigma: f64, c: &Condition) -> Vec<f64> {
        match self {
            CorrectionGradient::Analytic(w) => {
                let sp = w.noisy_score(c, Which::P, x, sigma).expect("guidance validated dimensions");
                let sq = w.noisy_score(c, Which::Q, x, sigma).expect("guidance validated dimensions");
                sp.iter().zip(sq).map(|(a, b)| a - b).collect()
            }
            CorrectionGradient::Learned(d) => d.logit_grad(x, sigma),
        }
    }
}

/// Model score plus the correction gradient when `sigma < sigma_gate`.
pub fn d_guidance_score(
    x: &[f64],
    sigma: f64,
    c: &Condition,
    provider: &dyn ScoreProvider,
    gradient: &CorrectionGradient,
    sigma_gate: f64,
) -> Vec<f64> {
    let mut s = provider.score(x, sigma, c);
    if sigma < sigma_gate {
        for (si, g) in s.iter_mut().zip(gradient.gradient(x, sigma, c)) {
            *si += g;
        }
    }
    s
}

/// Score provider wrapping a model with ratio guidance.
pub struct GuidedProvider<'a> {
    pub base: &'a dyn ScoreProvider,
    pub gradient: CorrectionGradient<'a>,
    pub sigma_gate: f64,
}

impl ScoreProvider for GuidedProvider<'_> {
    fn dim(&self) -> usize {
        self.base.dim()
    }

    fn score(&self, x: &[f64], sigma: f64, c: &Condition) -> Vec<f64> {
        d_guidance_score(x, sigma, c, self.base, &self.gradient, self.sigma_gate)
    }
}
