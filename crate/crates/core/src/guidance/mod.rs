//! Correction terms `phi_t(x_t | c)` used to weight particles.
//!
//! Three estimators are provided: a logistic discriminator ratio, the hybrid
//! object-aware correction built from a detector and occurrence statistics,
//! and the exact density ratio of the toy world.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{standard_normal_vec, SimRng};
use crate::sampling::{one_step_clean_prediction, ScoreProvider};
use crate::schedules::NoiseSchedule;
use crate::toyworld::{Condition, MixtureWorld, Which, SLOT_DIM};

pub const DEFAULT_RATIO_FLOOR: f64 = 1e-6;
pub const DEFAULT_KAPPA: f64 = 0.5;
pub const DEFAULT_PI: f64 = 0.5;
pub const DETECTION_THRESHOLD: f64 = 0.5;

/// Bounds of the training-time distribution `t ~ U[T_LO, 1]`.
pub const TRAIN_T_LO: f64 = 1e-5;

/// Noise schedule used to draw training noise levels.
pub fn training_schedule() -> NoiseSchedule {
    NoiseSchedule::VariancePreserving { beta_min: 0.85, beta_max: 12.0 }
}

/// Per-object probability that an object is visible in a clean sample.
pub trait ObjectDetector: Sync {
    fn n_objects(&self) -> usize;
    fn detect(&self, x0: &[f64], i: usize) -> f64;
}

impl ObjectDetector for MixtureWorld {
    fn n_objects(&self) -> usize {
        self.n_objects
    }

    fn detect(&self, x0: &[f64], i: usize) -> f64 {
        self.detect_object(x0, i).expect("detector called with a valid point and object")
    }
}

const MONOMIALS: usize = 5;
const SIGMA_BASIS: usize = 3;
const PER_SLOT: usize = MONOMIALS * SIGMA_BASIS;

fn sigma_basis(sigma: f64) -> [f64; SIGMA_BASIS] {
    let u = 1.0 / (1.0 + sigma * sigma);
    [1.0, u, u * u]
}

/// Logistic model `d(x, sigma, c) = logistic(w . phi(x, sigma, c) + b)` on
/// standardized features.
///
/// Features: for each slot `(a, b)` the monomials `a, b, a^2, b^2, ab`, each
/// multiplied by `1, u, u^2` with `u = 1 / (1 + sigma^2)`; then
/// `ln(1 + sigma)`; then one indicator per object when conditional.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Discriminator {
    pub n_slots: usize,
    pub conditional: bool,
    pub feature_mean: Vec<f64>,
    pub feature_scale: Vec<f64>,
    pub weights: Vec<f64>,
    pub bias: f64,
    /// Mean cross-entropy on the training set after the last epoch.
    pub train_loss: f64,
}

pub fn n_features(n_slots: usize, conditional: bool) -> usize {
    n_slots * PER_SLOT + 1 + if conditional { n_slots } else { 0 }
}

pub fn raw_features(n_slots: usize, conditional: bool, x: &[f64], sigma: f64, c: &Condition) -> Vec<f64> {
    let basis = sigma_basis(sigma);
    let mut out = Vec::with_capacity(n_features(n_slots, conditional));
    for j in 0..n_slots {
        let (a, b) = (x[SLOT_DIM * j], x[SLOT_DIM * j + 1]);
        for m in [a, b, a * a, b * b, a * b] {
            for u in basis {
                out.push(m * u);
            }
        }
    }
    out.push((1.0 + sigma).ln());
    if conditional {
        for j in 0..n_slots {
            out.push(if c.mentions(j) { 1.0 } else { 0.0 });
        }
    }
    out
}

fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)`, stable for large `|z|`.
fn softplus(z: f64) -> f64 {
    if z > 0.0 { z + (-z).exp().ln_1p() } else { z.exp().ln_1p() }
}

impl Discriminator {
    pub fn dim(&self) -> usize {
        self.n_slots * SLOT_DIM
    }

    pub fn features(&self, x: &[f64], sigma: f64, c: &Condition) -> Vec<f64> {
        let mut f = raw_features(self.n_slots, self.conditional, x, sigma, c);
        for ((v, m), s) in f.iter_mut().zip(&self.feature_mean).zip(&self.feature_scale) {
            *v = (*v - m) / s;
        }
        f
    }

    /// `ln(d / (1 - d))`, the model's log density ratio.
    pub fn logit(&self, x: &[f64], sigma: f64, c: &Condition) -> f64 {
        self.bias + self.features(x, sigma, c).iter().zip(&self.weights).map(|(f, w)| f * w).sum::<f64>()
    }

    pub fn prob(&self, x: &[f64], sigma: f64, c: &Condition) -> f64 {
        logistic(self.logit(x, sigma, c))
    }

    /// Gradient of [`Discriminator::logit`] with respect to `x`.
    pub fn logit_grad(&self, x: &[f64], sigma: f64) -> Vec<f64> {
        let basis = sigma_basis(sigma);
        let mut g = vec![0.0; x.len()];
        for j in 0..self.n_slots {
            let (a, b) = (x[SLOT_DIM * j], x[SLOT_DIM * j + 1]);
            let da = [1.0, 0.0, 2.0 * a, 0.0, b];
            let db = [0.0, 1.0, 0.0, 2.0 * b, a];
            for m in 0..MONOMIALS {
                for (l, u) in basis.iter().enumerate() {
                    let k = j * PER_SLOT + m * SIGMA_BASIS + l;
                    let coef = self.weights[k] / self.feature_scale[k] * u;
                    g[SLOT_DIM * j] += coef * da[m];
                    g[SLOT_DIM * j + 1] += coef * db[m];
                }
            }
        }
        g
    }

    pub fn ratio(&self, x: &[f64], sigma: f64, c: &Condition, floor: f64) -> f64 {
        ratio_from_discriminator(self.prob(x, sigma, c), floor)
    }

    /// Mean cross-entropy and accuracy on labelled examples.
    pub fn evaluate(&self, examples: &[LabelledExample]) -> (f64, f64) {
        let n = examples.len() as f64;
        let (mut loss, mut correct) = (0.0, 0usize);
        for e in examples {
            let z = self.logit(&e.x, e.sigma, &e.condition);
            loss += if e.real { softplus(-z) } else { softplus(z) };
            if (z > 0.0) == e.real {
                correct += 1;
            }
        }
        (loss / n, correct as f64 / n)
    }
}

/// One noised training example; `real` marks draws from the target.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelledExample {
    pub x: Vec<f64>,
    pub sigma: f64,
    pub condition: Condition,
    pub real: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Total examples, split evenly between the two classes.
    pub n_samples: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { n_samples: 20_000, epochs: 2, lr: 0.1, batch_size: 256 }
    }
}

/// Draw `n_samples / 2` examples from each sampler and noise them at
/// `sigma(t)`, `t ~ U[1e-5, 1]`.
pub fn make_training_set(
    real_sampler: &mut dyn FnMut(&mut SimRng) -> (Vec<f64>, Condition),
    fake_sampler: &mut dyn FnMut(&mut SimRng) -> (Vec<f64>, Condition),
    schedule: &NoiseSchedule,
    n_samples: usize,
    rng: &mut SimRng,
) -> Result<Vec<LabelledExample>> {
    let half = n_samples / 2;
    let mut out = Vec::with_capacity(2 * half);
    for k in 0..2 * half {
        let real = k % 2 == 0;
        let (x0, condition) = if real { real_sampler(rng) } else { fake_sampler(rng) };
        let t = rng.random_range(TRAIN_T_LO..=1.0);
        let sigma = schedule.sigma(t)?;
        let z = standard_normal_vec(rng, x0.len());
        let x = x0.iter().zip(z).map(|(a, e)| a + sigma * e).collect();
        out.push(LabelledExample { x, sigma, condition, real });
    }
    Ok(out)
}

/// Fit the logistic model by minibatch gradient descent on the
/// cross-entropy of real-vs-fake labels.
pub fn fit_discriminator(
    examples: &[LabelledExample],
    n_slots: usize,
    conditional: bool,
    cfg: &TrainConfig,
    rng: &mut SimRng,
) -> Result<Discriminator> {
    let n_real = examples.iter().filter(|e| e.real).count();
    if n_real == 0 || n_real == examples.len() {
        return Err(Error::Training("training data contains a single class".into()));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(Error::Argument("epochs, batch size and learning rate must be positive".into()));
    }
    if let Some(e) = examples.iter().find(|e| e.x.len() != n_slots * SLOT_DIM) {
        return Err(Error::Argument(format!("example of dimension {}, expected {}", e.x.len(), n_slots * SLOT_DIM)));
    }
    let nf = n_features(n_slots, conditional);
    let raw: Vec<Vec<f64>> =
        examples.iter().map(|e| raw_features(n_slots, conditional, &e.x, e.sigma, &e.condition)).collect();
    let n = raw.len() as f64;
    let mean: Vec<f64> = (0..nf).map(|k| raw.iter().map(|f| f[k]).sum::<f64>() / n).collect();
    let scale: Vec<f64> = (0..nf)
        .map(|k| {
            let v = raw.iter().map(|f| (f[k] - mean[k]).powi(2)).sum::<f64>() / n;
            if v > 1e-24 { v.sqrt() } else { 1.0 }
        })
        .collect();
    let feats: Vec<Vec<f64>> = raw
        .into_iter()
        .map(|f| f.iter().zip(&mean).zip(&scale).map(|((v, m), s)| (v - m) / s).collect())
        .collect();
    let labels: Vec<f64> = examples.iter().map(|e| if e.real { 1.0 } else { 0.0 }).collect();

    let mut w = vec![0.0; nf];
    let mut b = 0.0;
    let mut order: Vec<usize> = (0..feats.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for batch in order.chunks(cfg.batch_size) {
            let mut gw = vec![0.0; nf];
            let mut gb = 0.0;
            for &i in batch {
                let z = b + feats[i].iter().zip(&w).map(|(f, wk)| f * wk).sum::<f64>();
                let r = logistic(z) - labels[i];
                gb += r;
                for (g, f) in gw.iter_mut().zip(&feats[i]) {
                    *g += r * f;
                }
            }
            let step = cfg.lr / batch.len() as f64;
            b -= step * gb;
            for (wk, g) in w.iter_mut().zip(&gw) {
                *wk -= step * g;
            }
        }
    }
    let mut disc =
        Discriminator { n_slots, conditional, feature_mean: mean, feature_scale: scale, weights: w, bias: b, train_loss: 0.0 };
    let (loss, _) = disc.evaluate(examples);
    if !loss.is_finite() {
        return Err(Error::Training("training diverged".into()));
    }
    disc.train_loss = loss;
    Ok(disc)
}

/// Sample a training set and fit a discriminator separating `real_sampler`
/// from `fake_sampler` draws.
#[allow(clippy::too_many_arguments)]
pub fn train_discriminator(
    real_sampler: &mut dyn FnMut(&mut SimRng) -> (Vec<f64>, Condition),
    fake_sampler: &mut dyn FnMut(&mut SimRng) -> (Vec<f64>, Condition),
    schedule: &NoiseSchedule,
    n_slots: usize,
    conditional: bool,
    cfg: &TrainConfig,
    rng: &mut SimRng,
) -> Result<Discriminator> {
    if cfg.n_samples < 1000 {
        return Err(Error::Argument(format!("need at least 1000 training samples, got {}", cfg.n_samples)));
    }
    let data = make_training_set(real_sampler, fake_sampler, schedule, cfg.n_samples, rng)?;
    fit_discriminator(&data, n_slots, conditional, cfg, rng)
}

/// Conditional discriminator on the toy world: real draws from `p(x | c)`,
/// fake draws from `q(x | c)`, with `c` from the world's condition prior.
pub fn train_conditional(world: &MixtureWorld, cfg: &TrainConfig, rng: &mut SimRng) -> Result<Discriminator> {
    let w = world.clone();
    let mut real = |r: &mut SimRng| {
        let c = w.sample_condition(r);
        (w.sample_clean(&c, Which::P, r), c)
    };
    let w2 = world.clone();
    let mut fake = |r: &mut SimRng| {
        let c = w2.sample_condition(r);
        (w2.sample_clean(&c, Which::Q, r), c)
    };
    train_discriminator(&mut real, &mut fake, &training_schedule(), world.n_objects, true, cfg, rng)
}

/// Unconditional discriminator: both classes marginalize over conditions.
pub fn train_unconditional(world: &MixtureWorld, cfg: &TrainConfig, rng: &mut SimRng) -> Result<Discriminator> {
    let w = world.clone();
    let mut real = |r: &mut SimRng| {
        let c = w.sample_condition(r);
        (w.sample_clean(&c, Which::P, r), Condition::empty())
    };
    let w2 = world.clone();
    let mut fake = |r: &mut SimRng| {
        let c = w2.sample_condition(r);
        (w2.sample_clean(&c, Which::Q, r), Condition::empty())
    };
    train_discriminator(&mut real, &mut fake, &training_schedule(), world.n_objects, false, cfg, rng)
}

/// Labelled examples on the toy world (real from `p`, fake from `q`), the
/// same distribution the trainers draw from. Used for held-out evaluation.
pub fn world_examples(world: &MixtureWorld, conditional: bool, n: usize, rng: &mut SimRng) -> Result<Vec<LabelledExample>> {
    let keep = |c: Condition| if conditional { c } else { Condition::empty() };
    let mut real = |r: &mut SimRng| {
        let c = world.sample_condition(r);
        (world.sample_clean(&c, Which::P, r), keep(c))
    };
    let mut fake = |r: &mut SimRng| {
        let c = world.sample_condition(r);
        (world.sample_clean(&c, Which::Q, r), keep(c))
    };
    make_training_set(&mut real, &mut fake, &training_schedule(), n, rng)
}

/// Odds `d / (1 - d)` after clamping `d` into `[floor, 1 - floor]`.
pub fn ratio_from_discriminator(d_value: f64, floor: f64) -> f64 {
    let d = d_value.clamp(floor, 1.0 - floor);
    d / (1.0 - d)
}

/// One plain-sampler run seen through the detector: the one-step clean
/// prediction at every resampling event.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KappaRun {
    pub condition: Condition,
    pub predictions: Vec<Vec<f64>>,
}

/// Detection rate of each mentioned object at each resampling event,
/// estimated from plain runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KappaTable {
    pub n_objects: usize,
    /// Noise level of each resampling event the table covers.
    pub event_times: Vec<f64>,
    /// `hits[i][t]`: runs mentioning `i` whose prediction at `t` shows `i`.
    pub hits: Vec<Vec<u64>>,
    /// `mentions[i]`: runs mentioning `i`.
    pub mentions: Vec<u64>,
    pub h_runs: usize,
    pub kappa_default: f64,
}

impl KappaTable {
    pub fn n_events(&self) -> usize {
        self.event_times.len()
    }

    pub fn get(&self, i: usize, t: usize) -> f64 {
        self.lookup(i, t).0
    }

    /// `(kappa, defaulted)`; cells with no supporting runs fall back to the default.
    pub fn lookup(&self, i: usize, t: usize) -> (f64, bool) {
        match self.mentions.get(i) {
            Some(&m) if m > 0 && t < self.n_events() => (self.hits[i][t] as f64 / m as f64, false),
            _ => (self.kappa_default, true),
        }
    }

    pub fn defaulted_cells(&self) -> Vec<(usize, usize)> {
        (0..self.n_objects)
            .flat_map(|i| (0..self.n_events()).map(move |t| (i, t)))
            .filter(|&(i, t)| self.lookup(i, t).1)
            .collect()
    }

    /// Refuse use with a resampling schedule other than the one estimated on.
    pub fn check_schedule(&self, event_times: &[f64]) -> Result<()> {
        let same = self.event_times.len() == event_times.len()
            && self.event_times.iter().zip(event_times).all(|(a, b)| (a - b).abs() <= 1e-12 * a.abs().max(1.0));
        if same {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "kappa table was estimated for resampling times {:?} but the run resamples at {:?}",
                self.event_times, event_times
            )))
        }
    }
}

/// Count, per object and event, how often a mentioned object is detected
/// (probability `>= threshold`) in the clean prediction.
pub fn estimate_kappa(
    runs: &[KappaRun],
    n_objects: usize,
    event_times: &[f64],
    detector: &dyn ObjectDetector,
    threshold: f64,
) -> Result<KappaTable> {
    if runs.is_empty() {
        return Err(Error::Argument("kappa estimation needs at least one run".into()));
    }
    let n_events = event_times.len();
    let mut hits = vec![vec![0u64; n_events]; n_objects];
    let mut mentions = vec![0u64; n_objects];
    for (r, run) in runs.iter().enumerate() {
        if run.predictions.len() != n_events {
            return Err(Error::Argument(format!(
                "run {r} has {} predictions for {n_events} events",
                run.predictions.len()
            )));
        }
        for i in run.condition.mentioned.iter().copied() {
            if i >= n_objects {
                return Err(Error::Argument(format!("run {r} mentions object {i} of {n_objects}")));
            }
            mentions[i] += 1;
            for (t, pred) in run.predictions.iter().enumerate() {
                if detector.detect(pred, i) >= threshold {
                    hits[i][t] += 1;
                }
            }
        }
    }
    Ok(KappaTable {
        n_objects,
        event_times: event_times.to_vec(),
        hits,
        mentions,
        h_runs: runs.len(),
        kappa_default: DEFAULT_KAPPA,
    })
}

/// Detector probability for object `i` on the one-step clean prediction.
pub fn mention_numerator(
    x_t: &[f64],
    sigma: f64,
    c: &Condition,
    i: usize,
    provider: &dyn ScoreProvider,
    detector: &dyn ObjectDetector,
) -> f64 {
    detector.detect(&one_step_clean_prediction(x_t, sigma, provider, c), i)
}

/// `p + (1 - p) * (1 - kappa) pi / ((1 - kappa) pi + 1 - pi)`.
pub fn mention_denominator_from(p_hat: f64, kappa: f64, pi: f64) -> f64 {
    let a = (1.0 - kappa) * pi;
    p_hat + (1.0 - p_hat) * a / (a + 1.0 - pi)
}

#[allow(clippy::too_many_arguments)]
pub fn mention_denominator(
    x_t: &[f64],
    sigma: f64,
    c: &Condition,
    i: usize,
    provider: &dyn ScoreProvider,
    detector: &dyn ObjectDetector,
    kappa: f64,
    pi: f64,
) -> f64 {
    mention_denominator_from(mention_numerator(x_t, sigma, c, i, provider, detector), kappa, pi)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HybridConfig {
    pub pi: f64,
    pub ratio_floor: f64,
    /// Use a trained unconditional discriminator for the condition-free factor.
    pub use_unconditional_discriminator: bool,
    /// Otherwise use the exact marginal ratio of the toy world when set; with
    /// both flags off the factor is 1.
    pub analytic_oracle: bool,
}

impl Default for HybridConfig {
    fn default() -> Self {
        Self { pi: DEFAULT_PI, ratio_floor: DEFAULT_RATIO_FLOOR, use_unconditional_discriminator: true, analytic_oracle: false }
    }
}

impl HybridConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.pi > 0.0 && self.pi < 1.0) {
            return Err(Error::Config(format!("pi must lie in (0, 1), got {}", self.pi)));
        }
        if !(self.ratio_floor > 0.0 && self.ratio_floor <= 1e-3) {
            return Err(Error::Config(format!("ratio floor must lie in (0, 1e-3], got {}", self.ratio_floor)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorrectionMode {
    Discriminator,
    Hybrid,
    Analytic,
}

/// Everything a correction mode may need. Unused fields can stay `None`.
#[derive(Clone, Copy, Default)]
pub struct CorrectionDeps<'a> {
    pub world: Option<&'a MixtureWorld>,
    pub provider: Option<&'a dyn ScoreProvider>,
    pub detector: Option<&'a dyn ObjectDetector>,
    pub conditional: Option<&'a Discriminator>,
    pub unconditional: Option<&'a Discriminator>,
    pub kappa: Option<&'a KappaTable>,
    pub hybrid: HybridConfig,
}

fn missing(mode: CorrectionMode, what: &str) -> Error {
    Error::Config(format!("{mode:?} correction needs {what}"))
}

/// A correction mode bound to its dependencies.
#[derive(Clone, Copy)]
pub struct Correction<'a> {
    pub mode: CorrectionMode,
    pub deps: CorrectionDeps<'a>,
}

impl<'a> Correction<'a> {
    pub fn new(mode: CorrectionMode, deps: CorrectionDeps<'a>) -> Result<Self> {
        let c = Self { mode, deps };
        c.validate()?;
        Ok(c)
    }

    pub fn analytic(world: &'a MixtureWorld) -> Self {
        Self { mode: CorrectionMode::Analytic, deps: CorrectionDeps { world: Some(world), ..Default::default() } }
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.deps;
        d.hybrid.validate()?;
        match self.mode {
            CorrectionMode::Discriminator => {
                let disc = d.conditional.ok_or_else(|| missing(self.mode, "a conditional discriminator"))?;
                if !disc.conditional {
                    return Err(Error::Config("discriminator correction needs a conditional discriminator".into()));
                }
            }
            CorrectionMode::Analytic => {
                d.world.ok_or_else(|| missing(self.mode, "the toy world"))?;
            }
            CorrectionMode::Hybrid => {
                d.provider.ok_or_else(|| missing(self.mode, "a score provider"))?;
                d.detector.ok_or_else(|| missing(self.mode, "an object detector"))?;
                d.kappa.ok_or_else(|| missing(self.mode, "a kappa table"))?;
                if d.hybrid.use_unconditional_discriminator {
                    d.unconditional.ok_or_else(|| missing(self.mode, "an unconditional discriminator"))?;
                } else if d.hybrid.analytic_oracle {
                    d.world.ok_or_else(|| missing(self.mode, "the toy world for the unconditional factor"))?;
                }
            }
        }
        Ok(())
    }

    pub fn floor(&self) -> f64 {
        self.deps.hybrid.ratio_floor
    }

    /// `phi` at the `event`-th resampling point, noise level `sigma`.
    pub fn phi(&self, x: &[f64], sigma: f64, c: &Condition, event: usize) -> Result<f64> {
        calc_correction(x, sigma, c, event, self.mode, &self.deps)
    }
}

fn clamp_ratio(v: f64, floor: f64) -> f64 {
    if v.is_nan() {
        return floor;
    }
    v.clamp(floor, 1.0 / floor)
}

/// Condition-free factor of the hybrid correction.
pub fn unconditional_ratio(x: &[f64], sigma: f64, deps: &CorrectionDeps) -> Result<f64> {
    let h = &deps.hybrid;
    if h.use_unconditional_discriminator {
        let d = deps.unconditional.ok_or_else(|| missing(CorrectionMode::Hybrid, "an unconditional discriminator"))?;
        Ok(d.ratio(x, sigma, &Condition::empty(), h.ratio_floor))
    } else if h.analytic_oracle {
        let w = deps.world.ok_or_else(|| missing(CorrectionMode::Hybrid, "the toy world"))?;
        let lr = w.marginal_log_density(Which::P, x, sigma)? - w.marginal_log_density(Which::Q, x, sigma)?;
        Ok(clamp_ratio(lr.exp(), h.ratio_floor))
    } else {
        Ok(1.0)
    }
}

/// `phi_t(x_t | c)` for the chosen mode, clamped to `[floor, 1 / floor]`.
pub fn calc_correction(
    x: &[f64],
    sigma: f64,
    c: &Condition,
    event: usize,
    mode: CorrectionMode,
    deps: &CorrectionDeps,
) -> Result<f64> {
    let floor = deps.hybrid.ratio_floor;
    let v = match mode {
        CorrectionMode::Discriminator => {
            let d = deps.conditional.ok_or_else(|| missing(mode, "a conditional discriminator"))?;
            d.ratio(x, sigma, c, floor)
        }
        CorrectionMode::Analytic => {
            let w = deps.world.ok_or_else(|| missing(mode, "the toy world"))?;
            let lr = w.noisy_log_density(c, Which::P, x, sigma)? - w.noisy_log_density(c, Which::Q, x, sigma)?;
            lr.exp()
        }
        CorrectionMode::Hybrid => {
            let provider = deps.provider.ok_or_else(|| missing(mode, "a score provider"))?;
            let detector = deps.detector.ok_or_else(|| missing(mode, "an object detector"))?;
            let kappa = deps.kappa.ok_or_else(|| missing(mode, "a kappa table"))?;
            let mut v = unconditional_ratio(x, sigma, deps)?;
            if !c.is_empty() {
                let f = one_step_clean_prediction(x, sigma, provider, c);
                for &i in &c.mentioned {
                    let p_hat = detector.detect(&f, i);
                    let den = mention_denominator_from(p_hat, kappa.get(i, event), deps.hybrid.pi);
                    if den > 0.0 {
                        v *= p_hat / den;
                    }
                }
            }
            v
        }
    };
    Ok(clamp_ratio(v, floor))
}
