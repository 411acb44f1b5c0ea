//! Reverse-time samplers driven by an arbitrary score provider.
//!
//! Both samplers are compiled into a flat [`SamplerPlan`]: a list of
//! integration steps, noise injections and hook events. A single trajectory
//! executes the plan start to finish; the particle filter executes it for all
//! particles in lockstep and stops at hook events to resample.
//!
//! Time and noise level coincide (`sigma(t) = t`). The probability-flow ODE is
//! `dx/dt = -t * score(x, t)`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{standard_normal_vec, StreamSeed};
use crate::schedules::{make_time_grid, StepRule, TimeGrid, DEFAULT_T_MIN};
use crate::toyworld::{Condition, MixtureWorld, Which};

const TAG_INIT: u64 = 0x696e_6974;

pub trait ScoreProvider: Sync {
    fn dim(&self) -> usize;

    /// `grad_x log p(x; sigma | c)`.
    fn score(&self, x: &[f64], sigma: f64, c: &Condition) -> Vec<f64>;

    /// Denoiser `D(x; sigma)`. Must agree with `x + sigma^2 * score`.
    fn denoise(&self, x: &[f64], sigma: f64, c: &Condition) -> Vec<f64> {
        let s = self.score(x, sigma, c);
        x.iter().zip(s).map(|(xi, si)| xi + sigma * sigma * si).collect()
    }
}

/// Closed-form score of one of the toy world's distributions.
#[derive(Clone, Copy, Debug)]
pub struct AnalyticProvider<'a> {
    pub world: &'a MixtureWorld,
    pub which: Which,
}

impl<'a> AnalyticProvider<'a> {
    pub fn new(world: &'a MixtureWorld, which: Which) -> Self {
        Self { world, which }
    }
}

impl ScoreProvider for AnalyticProvider<'_> {
    fn dim(&self) -> usize {
        self.world.dim()
    }

    fn score(&self, x: &[f64], sigma: f64, c: &Condition) -> Vec<f64> {
        self.world.noisy_score(c, self.which, x, sigma).expect("sampler validated dimensions")
    }

    fn denoise(&self, x: &[f64], sigma: f64, c: &Condition) -> Vec<f64> {
        self.world.posterior_mean(c, self.which, x, sigma).expect("sampler validated dimensions")
    }
}

/// One-step prediction of the clean sample, `f(x_t)`.
pub fn one_step_clean_prediction(x: &[f64], sigma: f64, provider: &dyn ScoreProvider, c: &Condition) -> Vec<f64> {
    let f = provider.denoise(x, sigma, c);
    debug_assert!({
        let s = provider.score(x, sigma, c);
        f.iter().zip(x).zip(s).all(|((fi, xi), si)| (fi - (xi + sigma * sigma * si)).abs() <= 1e-6 * (1.0 + fi.abs()))
    });
    f
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Integrator {
    Euler,
    Heun,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Main,
    Restart { interval: usize, repeat: usize },
}

/// Points where a particle filter may attach resampling.
///
/// `block` numbers the noise injections: one per (interval, repetition) for
/// the Restart sampler, one per step for the EDM sampler.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum SamplerEvent {
    BeforeNoise { block: usize, t: f64 },
    AfterNoise { block: usize, t: f64 },
    StepEnd { step: usize, t: f64 },
}

impl SamplerEvent {
    pub fn t(&self) -> f64 {
        match *self {
            SamplerEvent::BeforeNoise { t, .. }
            | SamplerEvent::AfterNoise { t, .. }
            | SamplerEvent::StepEnd { t, .. } => t,
        }
    }
}

impl fmt::Display for SamplerEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SamplerEvent::BeforeNoise { block, t } => write!(f, "before-noise[{block}]@{t}"),
            SamplerEvent::AfterNoise { block, t } => write!(f, "after-noise[{block}]@{t}"),
            SamplerEvent::StepEnd { step, t } => write!(f, "step-end[{step}]@{t}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Segment {
    Step { t_from: f64, t_to: f64, integrator: Integrator, phase: Phase },
    /// Raise the noise level from `t_from` to `t_to` by adding Gaussian noise
    /// of variance `t_to^2 - t_from^2`.
    Noise { t_from: f64, t_to: f64 },
    Event(SamplerEvent),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplerPlan {
    pub t_start: f64,
    pub t_end: f64,
    pub segments: Vec<Segment>,
}

impl SamplerPlan {
    /// Score evaluations per trajectory, including the final denoise.
    pub fn nfe(&self) -> usize {
        1 + self
            .segments
            .iter()
            .map(|s| match s {
                Segment::Step { integrator: Integrator::Euler, .. } => 1,
                Segment::Step { integrator: Integrator::Heun, t_to, .. } => {
                    if *t_to == 0.0 { 1 } else { 2 }
                }
                _ => 0,
            })
            .sum::<usize>()
    }

    pub fn events(&self) -> impl Iterator<Item = &SamplerEvent> {
        self.segments.iter().filter_map(|s| match s {
            Segment::Event(e) => Some(e),
            _ => None,
        })
    }

    pub fn n_blocks(&self) -> usize {
        self.events().filter(|e| matches!(e, SamplerEvent::BeforeNoise { .. })).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RestartInterval {
    pub n_restart: usize,
    pub repeats: usize,
    pub t_min: f64,
    pub t_max: f64,
}

/// How much noise a restart jump injects.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RestartNoise {
    /// Jump from `t_min` all the way to `t_max`.
    #[default]
    Full,
    /// Added variance equals `t_min^2`, i.e. jump to `min(t_max, sqrt(2) t_min)`.
    Reduced,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RestartConfig {
    pub n_main: usize,
    pub intervals: Vec<RestartInterval>,
    /// Start of the main backward pass.
    pub t_max: f64,
    /// Terminal time of the main backward pass.
    pub t_min: f64,
    #[serde(default)]
    pub noise: RestartNoise,
}

impl RestartConfig {
    /// Text-to-image configuration:
    /// `30, {(4, 1, 1.09, 1.92), (4, 2, 0.59, 1.09), (4, 2, 0.30, 0.59), (4, 1, 0.06, 0.30)}`.
    pub fn text_to_image() -> Self {
        Self::parse("30, {(4, 1, 1.09, 1.92), (4, 2, 0.59, 1.09), (4, 2, 0.30, 0.59), (4, 1, 0.06, 0.30)}")
            .expect("built-in configuration parses")
    }

    /// Parse `N_main, [(N_restart, K, t_min, t_max), ...]`; square or curly
    /// brackets are accepted for the list.
    pub fn parse(text: &str) -> Result<Self> {
        let (head, groups) = parse_tuple_syntax(text)?;
        if head.len() != 1 {
            return Err(Error::Config(format!("expected `N_main, [...]`, got {text:?}")));
        }
        let n_main = as_count(head[0], "N_main")?;
        let intervals = groups
            .iter()
            .map(|g| {
                if g.len() != 4 {
                    return Err(Error::Config(format!(
                        "restart interval needs (N_restart, K, t_min, t_max), got {} values",
                        g.len()
                    )));
                }
                Ok(RestartInterval {
                    n_restart: as_count(g[0], "N_restart")?,
                    repeats: as_count(g[1], "K")?,
                    t_min: g[2],
                    t_max: g[3],
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let cfg = Self { n_main, intervals, t_max: 80.0, t_min: DEFAULT_T_MIN, noise: RestartNoise::Full };
        cfg.validate()?;
        Ok(cfg)
    }

    /// The tuple-syntax form of the schedule.
    pub fn to_tuple_string(&self) -> String {
        let groups: Vec<String> = self
            .intervals
            .iter()
            .map(|i| format!("({}, {}, {}, {})", i.n_restart, i.repeats, i.t_min, i.t_max))
            .collect();
        format!("{}, [{}]", self.n_main, groups.join(", "))
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_main == 0 {
            return Err(Error::Config("N_main must be positive".into()));
        }
        if !(self.t_min > 0.0) || !(self.t_min < self.t_max) || !self.t_max.is_finite() {
            return Err(Error::Config(format!(
                "main pass needs 0 < t_min < t_max, got ({}, {})",
                self.t_min, self.t_max
            )));
        }
        let mut prev_max = f64::INFINITY;
        for (k, iv) in self.intervals.iter().enumerate() {
            if iv.n_restart == 0 || iv.repeats == 0 {
                return Err(Error::Config(format!("interval {k}: N_restart and K must be positive")));
            }
            if !(iv.t_min < iv.t_max) {
                return Err(Error::Config(format!("interval {k}: t_min must be < t_max")));
            }
            if iv.t_min < self.t_min || iv.t_max > self.t_max {
                return Err(Error::Config(format!(
                    "interval {k}: [{}, {}] outside [{}, {}]",
                    iv.t_min, iv.t_max, self.t_min, self.t_max
                )));
            }
            if iv.t_max > prev_max {
                return Err(Error::Config("intervals must be ordered by decreasing t_max".into()));
            }
            prev_max = iv.t_max;
        }
        Ok(())
    }

    pub fn main_grid(&self) -> Result<TimeGrid> {
        make_time_grid(self.n_main, self.t_min, self.t_max, StepRule::EdmPolynomial)
    }

    /// Main pass with Euler steps; each interval attaches at the main-grid
    /// point nearest its `t_min` and runs `K` noise-then-Heun excursions.
    pub fn plan(&self) -> Result<SamplerPlan> {
        self.validate()?;
        let grid = self.main_grid()?;
        let attach: Vec<usize> = self.intervals.iter().map(|iv| grid.nearest_index(iv.t_min)).collect();
        let mut segments = Vec::new();
        let mut block = 0;
        for s in 0..grid.n_steps() {
            let (t_from, t_to) = (grid.times[s], grid.times[s + 1]);
            segments.push(Segment::Step { t_from, t_to, integrator: Integrator::Euler, phase: Phase::Main });
            segments.push(Segment::Event(SamplerEvent::StepEnd { step: s, t: t_to }));
            for (k, iv) in self.intervals.iter().enumerate() {
                if attach[k] != s + 1 {
                    continue;
                }
                let t_lo = t_to;
                let t_hi = match self.noise {
                    RestartNoise::Full => iv.t_max,
                    RestartNoise::Reduced => iv.t_max.min(std::f64::consts::SQRT_2 * t_lo),
                };
                if !(t_hi > t_lo) {
                    return Err(Error::Config(format!(
                        "interval {k} attaches at t = {t_lo}, not below its t_max {t_hi}"
                    )));
                }
                let excursion = make_time_grid(iv.n_restart, t_lo, t_hi, StepRule::EdmPolynomial)?;
                for r in 0..iv.repeats {
                    segments.push(Segment::Event(SamplerEvent::BeforeNoise { block, t: t_lo }));
                    segments.push(Segment::Noise { t_from: t_lo, t_to: t_hi });
                    segments.push(Segment::Event(SamplerEvent::AfterNoise { block, t: t_hi }));
                    for w in excursion.times.windows(2) {
                        segments.push(Segment::Step {
                            t_from: w[0],
                            t_to: w[1],
                            integrator: Integrator::Heun,
                            phase: Phase::Restart { interval: k, repeat: r },
                        });
                    }
                    block += 1;
                }
            }
        }
        Ok(SamplerPlan { t_start: grid.start(), t_end: grid.end(), segments })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdmConfig {
    pub n_steps: usize,
    pub s_churn: f64,
    pub s_min: f64,
    pub s_max: f64,
    /// Step indices `{n_i}` at which a particle filter resamples.
    pub resample_steps: Vec<usize>,
    /// Use the maximal churn `sqrt(2) - 1` on the steps where resampling happens.
    pub boost_churn_after_resample: bool,
    pub t_max: f64,
    pub t_min: f64,
}

impl Default for EdmConfig {
    fn default() -> Self {
        Self {
            n_steps: 25,
            s_churn: 0.0,
            s_min: 0.0,
            s_max: f64::INFINITY,
            resample_steps: vec![10, 13, 16, 19],
            boost_churn_after_resample: true,
            t_max: 80.0,
            t_min: DEFAULT_T_MIN,
        }
    }
}

impl EdmConfig {
    /// Parse `N, {n_1, ..., n_m}` into step count and resampling steps,
    /// keeping the other fields at their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let (head, groups) = parse_tuple_syntax(text)?;
        let mut cfg = EdmConfig::default();
        match (head.as_slice(), groups.as_slice()) {
            ([n], [steps]) => {
                cfg.n_steps = as_count(*n, "N")?;
                cfg.resample_steps =
                    steps.iter().map(|v| as_index(*v, "n_i")).collect::<Result<Vec<_>>>()?;
            }
            ([n], []) => cfg.n_steps = as_count(*n, "N")?,
            _ => return Err(Error::Config(format!("expected `N, {{n_1, ...}}`, got {text:?}"))),
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_steps == 0 {
            return Err(Error::Config("N must be positive".into()));
        }
        if !(self.s_churn >= 0.0) || !(self.s_min <= self.s_max) {
            return Err(Error::Config("need S_churn >= 0 and S_min <= S_max".into()));
        }
        if let Some(s) = self.resample_steps.iter().find(|s| **s >= self.n_steps) {
            return Err(Error::Config(format!("resample step {s} outside [0, {})", self.n_steps)));
        }
        if self.resample_steps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("resample steps must be strictly increasing".into()));
        }
        if !(self.t_min > 0.0) || !(self.t_min < self.t_max) {
            return Err(Error::Config("need 0 < t_min < t_max".into()));
        }
        Ok(())
    }

    /// `gamma_churn` used at a step starting at `t`.
    pub fn churn_at(&self, step: usize, t: f64) -> f64 {
        let max = std::f64::consts::SQRT_2 - 1.0;
        if self.boost_churn_after_resample && self.resample_steps.contains(&step) {
            return max;
        }
        if t >= self.s_min && t <= self.s_max {
            (self.s_churn / self.n_steps as f64).min(max)
        } else {
            0.0
        }
    }

    pub fn plan(&self) -> Result<SamplerPlan> {
        self.validate()?;
        let grid = make_time_grid(self.n_steps, self.t_min, self.t_max, StepRule::EdmPolynomial)?;
        let mut segments = Vec::new();
        for s in 0..grid.n_steps() {
            let (t_from, t_to) = (grid.times[s], grid.times[s + 1]);
            let t_hat = t_from * (1.0 + self.churn_at(s, t_from));
            segments.push(Segment::Event(SamplerEvent::BeforeNoise { block: s, t: t_from }));
            if t_hat > t_from {
                segments.push(Segment::Noise { t_from, t_to: t_hat });
            }
            segments.push(Segment::Event(SamplerEvent::AfterNoise { block: s, t: t_hat }));
            let integrator = Integrator::Heun;
            segments.push(Segment::Step { t_from: t_hat, t_to, integrator, phase: Phase::Main });
            segments.push(Segment::Event(SamplerEvent::StepEnd { step: s, t: t_to }));
        }
        Ok(SamplerPlan { t_start: grid.start(), t_end: grid.end(), segments })
    }
}

/// Either sampler.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SamplerConfig {
    Restart(RestartConfig),
    Edm(EdmConfig),
}

impl SamplerConfig {
    pub fn plan(&self) -> Result<SamplerPlan> {
        match self {
            SamplerConfig::Restart(r) => r.plan(),
            SamplerConfig::Edm(e) => e.plan(),
        }
    }

    pub fn t_max(&self) -> f64 {
        match self {
            SamplerConfig::Restart(r) => r.t_max,
            SamplerConfig::Edm(e) => e.t_max,
        }
    }

    /// A variant of this sampler with roughly `factor` times the score
    /// evaluations, obtained by adding main-pass steps.
    pub fn scaled_nfe(&self, factor: usize) -> Result<SamplerConfig> {
        let base = self.plan()?.nfe();
        let target = base * factor.max(1);
        let mut out = self.clone();
        loop {
            let nfe = out.plan()?.nfe();
            if nfe >= target {
                return Ok(out);
            }
            let deficit = target - nfe;
            match &mut out {
                SamplerConfig::Restart(r) => r.n_main += deficit,
                SamplerConfig::Edm(e) => e.n_steps += deficit.div_ceil(2),
            }
        }
    }
}

/// Split `head..., [ (a, b, ...), ... ]` style text into the leading scalars
/// and the bracketed groups. A flat list `{a, b, c}` yields one group.
fn parse_tuple_syntax(text: &str) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let bad = |msg: &str| Error::Config(format!("{msg} in {text:?}"));
    let mut head = Vec::new();
    let mut groups: Vec<Vec<f64>> = Vec::new();
    let mut depth = 0usize;
    let mut current: Vec<f64> = Vec::new();
    let mut flat: Vec<f64> = Vec::new();
    let mut saw_tuple = false;
    let mut token = String::new();
    let flush = |token: &mut String, depth: usize, head: &mut Vec<f64>, current: &mut Vec<f64>, flat: &mut Vec<f64>| -> Result<()> {
        let t = token.trim();
        if !t.is_empty() {
            let v: f64 = t.parse().map_err(|_| bad(&format!("invalid number {t:?}")))?;
            match depth {
                0 => head.push(v),
                1 => flat.push(v),
                _ => current.push(v),
            }
        }
        token.clear();
        Ok(())
    };
    for ch in text.chars() {
        match ch {
            '[' | '{' | '(' => {
                flush(&mut token, depth, &mut head, &mut current, &mut flat)?;
                depth += 1;
                if depth > 2 {
                    return Err(bad("nesting too deep"));
                }
            }
            ']' | '}' | ')' => {
                flush(&mut token, depth, &mut head, &mut current, &mut flat)?;
                if depth == 0 {
                    return Err(bad("unbalanced bracket"));
                }
                if depth == 2 {
                    groups.push(std::mem::take(&mut current));
                    saw_tuple = true;
                }
                depth -= 1;
            }
            ',' => flush(&mut token, depth, &mut head, &mut current, &mut flat)?,
            c if c.is_whitespace() => flush(&mut token, depth, &mut head, &mut current, &mut flat)?,
            c => token.push(c),
        }
    }
    flush(&mut token, depth, &mut head, &mut current, &mut flat)?;
    if depth != 0 {
        return Err(bad("unbalanced bracket"));
    }
    if !flat.is_empty() {
        if saw_tuple {
            return Err(bad("mixed scalars and tuples in list"));
        }
        groups.push(flat);
    }
    Ok((head, groups))
}

fn as_count(v: f64, what: &str) -> Result<usize> {
    if v >= 1.0 && v.fract() == 0.0 {
        Ok(v as usize)
    } else {
        Err(Error::Config(format!("{what} must be a positive integer, got {v}")))
    }
}

fn as_index(v: f64, what: &str) -> Result<usize> {
    if v >= 0.0 && v.fract() == 0.0 {
        Ok(v as usize)
    } else {
        Err(Error::Config(format!("{what} must be a non-negative integer, got {v}")))
    }
}

/// Draw `x_T ~ N(0, sigma_T^2 I)` from a particle's stream.
pub fn initial_state(seed: StreamSeed, dim: usize, sigma_t: f64) -> Vec<f64> {
    let mut rng = seed.child(TAG_INIT, 0).rng();
    standard_normal_vec(&mut rng, dim).into_iter().map(|z| sigma_t * z).collect()
}

fn euler(x: &[f64], t_from: f64, t_to: f64, provider: &dyn ScoreProvider, c: &Condition) -> (Vec<f64>, Vec<f64>) {
    let s = provider.score(x, t_from, c);
    // dx/dt = -t * score
    let d: Vec<f64> = s.iter().map(|v| -t_from * v).collect();
    let h = t_to - t_from;
    (x.iter().zip(&d).map(|(xi, di)| xi + h * di).collect(), d)
}

fn heun(x: &[f64], t_from: f64, t_to: f64, provider: &dyn ScoreProvider, c: &Condition) -> Vec<f64> {
    let (x_euler, d) = euler(x, t_from, t_to, provider, c);
    if t_to == 0.0 {
        return x_euler;
    }
    let s2 = provider.score(&x_euler, t_to, c);
    let h = t_to - t_from;
    x.iter()
        .zip(&d)
        .zip(s2)
        .map(|((xi, d1), s)| xi + 0.5 * h * (d1 - t_to * s))
        .collect()
}

fn add_noise(x: &mut [f64], t_from: f64, t_to: f64, seed: StreamSeed) {
    let std = (t_to * t_to - t_from * t_from).max(0.0).sqrt();
    let mut rng = seed.rng();
    let z = standard_normal_vec(&mut rng, x.len());
    for (xi, z) in x.iter_mut().zip(z) {
        *xi += std * z;
    }
}

/// Apply one non-event segment. `seed` is the particle's stream for this
/// segment index.
pub fn apply_segment(
    segment: &Segment,
    x: &mut Vec<f64>,
    provider: &dyn ScoreProvider,
    c: &Condition,
    seed: StreamSeed,
) {
    match *segment {
        Segment::Step { t_from, t_to, integrator, .. } => {
            *x = match integrator {
                Integrator::Euler => euler(x, t_from, t_to, provider, c).0,
                Integrator::Heun => heun(x, t_from, t_to, provider, c),
            };
        }
        Segment::Noise { t_from, t_to } => add_noise(x, t_from, t_to, seed),
        Segment::Event(_) => {}
    }
}

/// One churn-then-Heun step from `t_from` to `t_to` (Euler when `t_to = 0`).
pub fn edm_step(
    x: &[f64],
    t_from: f64,
    t_to: f64,
    provider: &dyn ScoreProvider,
    c: &Condition,
    churn: f64,
    seed: StreamSeed,
) -> Result<Vec<f64>> {
    if !(t_to < t_from) || t_to < 0.0 {
        return Err(Error::Argument(format!("edm step needs t_from > t_to >= 0, got {t_from} -> {t_to}")));
    }
    if !(churn >= 0.0) {
        return Err(Error::Argument(format!("churn must be >= 0, got {churn}")));
    }
    let t_hat = t_from * (1.0 + churn);
    let mut xh = x.to_vec();
    if t_hat > t_from {
        add_noise(&mut xh, t_from, t_hat, seed);
    }
    Ok(heun(&xh, t_hat, t_to, provider, c))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryPoint {
    pub t: f64,
    pub x: Vec<f64>,
    pub phase: Phase,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    /// State after every integration step.
    pub points: Vec<TrajectoryPoint>,
    pub x_end: Vec<f64>,
    /// One-step clean prediction at the terminal time.
    pub x0: Vec<f64>,
    pub nfe: usize,
}

impl Trajectory {
    pub fn n_main_steps(&self) -> usize {
        self.points.iter().filter(|p| p.phase == Phase::Main).count()
    }

    pub fn n_excursions(&self) -> usize {
        let mut seen: Vec<Phase> = self.points.iter().map(|p| p.phase).filter(|p| *p != Phase::Main).collect();
        seen.dedup();
        seen.len()
    }
}

/// Run a full plan for a single trajectory, firing `hook` at every event.
pub fn run_plan(
    plan: &SamplerPlan,
    x_init: &[f64],
    provider: &dyn ScoreProvider,
    c: &Condition,
    seed: StreamSeed,
    hook: &mut dyn FnMut(&SamplerEvent, &[f64]),
) -> Result<Trajectory> {
    if x_init.len() != provider.dim() {
        return Err(Error::Argument(format!(
            "initial state has dimension {}, provider expects {}",
            x_init.len(),
            provider.dim()
        )));
    }
    let mut x = x_init.to_vec();
    let mut points = Vec::new();
    let mut nfe = 0;
    for (i, seg) in plan.segments.iter().enumerate() {
        match seg {
            Segment::Event(e) => hook(e, &x),
            Segment::Step { t_to, phase, integrator, .. } => {
                apply_segment(seg, &mut x, provider, c, seed.step(i));
                nfe += match integrator {
                    Integrator::Euler => 1,
                    Integrator::Heun if *t_to == 0.0 => 1,
                    Integrator::Heun => 2,
                };
                points.push(TrajectoryPoint { t: *t_to, x: x.clone(), phase: *phase });
            }
            Segment::Noise { .. } => apply_segment(seg, &mut x, provider, c, seed.step(i)),
        }
    }
    let x0 = one_step_clean_prediction(&x, plan.t_end, provider, c);
    nfe += 1;
    Ok(Trajectory { points, x_end: x, x0, nfe })
}

/// Restart sampler for one trajectory.
pub fn restart_run(
    x_init: &[f64],
    provider: &dyn ScoreProvider,
    c: &Condition,
    cfg: &RestartConfig,
    seed: StreamSeed,
    hook: &mut dyn FnMut(&SamplerEvent, &[f64]),
) -> Result<Trajectory> {
    run_plan(&cfg.plan()?, x_init, provider, c, seed, hook)
}

/// Plain sampler: draw `x_T` from the particle stream and run the plan.
pub fn sample_one(
    plan: &SamplerPlan,
    provider: &dyn ScoreProvider,
    c: &Condition,
    seed: StreamSeed,
) -> Result<Trajectory> {
    let x_init = initial_state(seed, provider.dim(), plan.t_start);
    run_plan(plan, &x_init, provider, c, seed, &mut |_, _| {})
}
