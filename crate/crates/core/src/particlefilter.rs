//! Particle filter over a sampler plan: propose with the sampler, weight by
//! ratios of successive corrections, resample multinomially.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::guidance::{Correction, CorrectionMode};
use crate::metrics::ess;
use crate::rng::{SimRng, StreamSeed};
use crate::sampling::{apply_segment, initial_state, one_step_clean_prediction, SamplerEvent, SamplerPlan, ScoreProvider, Segment};
use crate::toyworld::DiscreteMicroWorld;
use crate::toyworld::Condition;

/// Below this many particles the per-segment work is done sequentially.
const PARALLEL_MIN_PARTICLES: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParticleEnsemble {
    pub states: Vec<Vec<f64>>,
    pub phis: Vec<f64>,
    pub ancestors: Vec<usize>,
    pub t: f64,
    pub weights_last: Vec<f64>,
}

impl ParticleEnsemble {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Placement {
    #[default]
    BeforeNoise,
    AfterNoise,
}

/// Which plan events trigger resampling.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ResampleSchedule {
    /// Every noise block of the plan, at the side chosen by the placement.
    /// EDM plans restrict this to their configured resampling steps.
    #[default]
    Blocks,
    /// Only the listed noise blocks.
    BlockList(Vec<usize>),
    /// After every integration step of the main pass.
    EveryStep,
}

/// Which kind of sampler produced a plan; decides the default block set.
#[derive(Clone, Debug, PartialEq)]
pub enum PlanKind {
    Restart,
    Edm { resample_steps: Vec<usize> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PfConfig {
    pub k_particles: usize,
    pub placement: Placement,
    pub correction_mode: CorrectionMode,
    pub schedule: ResampleSchedule,
    /// Resample only when ESS falls below this fraction of K (ablation only).
    #[serde(default)]
    pub ess_trigger: Option<f64>,
}

impl Default for PfConfig {
    fn default() -> Self {
        Self {
            k_particles: 8,
            placement: Placement::BeforeNoise,
            correction_mode: CorrectionMode::Analytic,
            schedule: ResampleSchedule::Blocks,
            ess_trigger: None,
        }
    }
}

/// Per-event, per-particle trace row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub event: usize,
    pub t: f64,
    pub particle: usize,
    pub weight: f64,
    pub phi: f64,
    pub ancestor: usize,
    pub ess: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub rows: Vec<TraceRow>,
    /// ESS at each resampling event.
    pub ess: Vec<f64>,
    /// Whether each event actually resampled (always true without an ESS trigger).
    pub resampled: Vec<bool>,
}

pub trait PhiSource: Sync {
    fn phi(&self, x: &[f64], sigma: f64, c: &Condition, event: usize) -> Result<f64>;
}

impl PhiSource for Correction<'_> {
    fn phi(&self, x: &[f64], sigma: f64, c: &Condition, event: usize) -> Result<f64> {
        Correction::phi(self, x, sigma, c, event)
    }
}

/// `K` particles from `N(0, sigma_T^2 I)` with unit corrections.
pub fn pf_init(k: usize, dim: usize, sigma_t: f64, seed: StreamSeed) -> Result<ParticleEnsemble> {
    if k < 1 {
        return Err(Error::Argument("particle filter needs at least one particle".into()));
    }
    Ok(ParticleEnsemble {
        states: (0..k).map(|p| initial_state(seed.particle(p), dim, sigma_t)).collect(),
        phis: vec![1.0; k],
        ancestors: (0..k).collect(),
        t: sigma_t,
        weights_last: vec![1.0; k],
    })
}

/// `w_k = phi_new_k / phi_prev_k`.
pub fn pf_weights(prev: &[f64], new: &[f64]) -> Result<Vec<f64>> {
    if prev.len() != new.len() {
        return Err(Error::Argument(format!("{} previous corrections, {} new", prev.len(), new.len())));
    }
    if let Some(v) = prev.iter().chain(new).find(|v| !(**v > 0.0) || !v.is_finite()) {
        return Err(Error::Invariant(format!("correction {v} is not positive and finite")));
    }
    Ok(prev.iter().zip(new).map(|(p, n)| n / p).collect())
}

/// `K` ancestor indices drawn independently in proportion to `weights`.
pub fn multinomial_indices(weights: &[f64], k: usize, event: usize, rng: &mut SimRng) -> Result<Vec<usize>> {
    let dist = WeightedIndex::new(weights)
        .map_err(|e| Error::Resampling { step: event, reason: e.to_string() })?;
    Ok((0..k).map(|_| dist.sample(rng)).collect())
}

/// Resample `items` with replacement; returns survivors and their ancestors.
pub fn multinomial_resample<T: Clone>(
    items: &[T],
    weights: &[f64],
    event: usize,
    rng: &mut SimRng,
) -> Result<(Vec<T>, Vec<usize>)> {
    if items.len() != weights.len() {
        return Err(Error::Argument(format!("{} items, {} weights", items.len(), weights.len())));
    }
    let anc = multinomial_indices(weights, items.len(), event, rng)?;
    Ok((anc.iter().map(|&a| items[a].clone()).collect(), anc))
}

/// Plan segment indices of the resampling events, in order.
pub fn scheduled_events(plan: &SamplerPlan, kind: &PlanKind, cfg: &PfConfig) -> Result<Vec<usize>> {
    let wanted_block = |seg: &Segment| match (seg, cfg.placement) {
        (Segment::Event(SamplerEvent::BeforeNoise { block, .. }), Placement::BeforeNoise) => Some(*block),
        (Segment::Event(SamplerEvent::AfterNoise { block, .. }), Placement::AfterNoise) => Some(*block),
        _ => None,
    };
    let n_blocks = plan.n_blocks();
    let blocks: Option<Vec<usize>> = match (&cfg.schedule, kind) {
        (ResampleSchedule::EveryStep, _) => None,
        (ResampleSchedule::Blocks, PlanKind::Restart) => Some((0..n_blocks).collect()),
        (ResampleSchedule::Blocks, PlanKind::Edm { resample_steps }) => Some(resample_steps.clone()),
        (ResampleSchedule::BlockList(list), _) => Some(list.clone()),
    };
    match blocks {
        None => Ok(plan
            .segments
            .iter()
            .enumerate()
            .filter(|(_, s)| matches!(s, Segment::Event(SamplerEvent::StepEnd { .. })))
            .map(|(i, _)| i)
            .collect()),
        Some(list) => {
            if let Some(b) = list.iter().find(|b| **b >= n_blocks) {
                return Err(Error::Config(format!("resampling schedule names block {b}, the sampler has {n_blocks}")));
            }
            Ok(plan
                .segments
                .iter()
                .enumerate()
                .filter(|(_, s)| wanted_block(s).is_some_and(|b| list.contains(&b)))
                .map(|(i, _)| i)
                .collect())
        }
    }
}

/// Noise levels of the scheduled events, used to key occurrence tables.
pub fn event_times(plan: &SamplerPlan, events: &[usize]) -> Vec<f64> {
    events
        .iter()
        .map(|&i| match &plan.segments[i] {
            Segment::Event(e) => e.t(),
            _ => unreachable!("scheduled index is an event"),
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct PfOutput {
    pub ensemble: ParticleEnsemble,
    /// One-step clean prediction of every particle at the terminal time.
    pub finals: Vec<Vec<f64>>,
    /// Index of the particle reported as the run's sample.
    pub chosen: usize,
    pub trace: RunTrace,
    pub nfe: usize,
}

impl PfOutput {
    pub fn sample(&self) -> &[f64] {
        &self.finals[self.chosen]
    }
}

fn for_each_particle<F>(states: &mut [Vec<f64>], f: F)
where
    F: Fn(usize, &mut Vec<f64>) + Sync,
{
    if states.len() >= PARALLEL_MIN_PARTICLES {
        states.par_iter_mut().enumerate().for_each(|(k, x)| f(k, x));
    } else {
        states.iter_mut().enumerate().for_each(|(k, x)| f(k, x));
    }
}

fn map_particles<T, F>(states: &[Vec<f64>], f: F) -> Vec<T>
where
    T: Send,
    F: Fn(&Vec<f64>) -> T + Sync + Send,
{
    if states.len() >= PARALLEL_MIN_PARTICLES {
        states.par_iter().map(&f).collect()
    } else {
        states.iter().map(f).collect()
    }
}

/// Run the particle filter over `plan` for one condition.
///
/// `events` are plan segment indices at which to weight and resample (see
/// [`scheduled_events`]). Particle `k` draws its noise from
/// `seed.particle(k).step(segment)`; the resampler draws from `seed.resample(event)`.
#[allow(clippy::too_many_arguments)]
pub fn pf_run(
    cfg: &PfConfig,
    plan: &SamplerPlan,
    events: &[usize],
    provider: &dyn ScoreProvider,
    correction: &dyn PhiSource,
    c: &Condition,
    seed: StreamSeed,
) -> Result<PfOutput> {
    if let Some(&bad) = events.iter().find(|&&i| !matches!(plan.segments.get(i), Some(Segment::Event(_)))) {
        return Err(Error::Config(format!("segment {bad} is not a sampler event")));
    }
    if let Some(f) = cfg.ess_trigger {
        if !(f > 0.0 && f <= 1.0) {
            return Err(Error::Config(format!("ESS trigger must lie in (0, 1], got {f}")));
        }
    }
    let k = cfg.k_particles;
    let mut ens = pf_init(k, provider.dim(), plan.t_start, seed)?;
    let mut carried = vec![1.0; k];
    let mut trace = RunTrace::default();
    let mut next_event = 0;
    for (si, seg) in plan.segments.iter().enumerate() {
        match seg {
            Segment::Event(e) => {
                if events.get(next_event) != Some(&si) {
                    continue;
                }
                let ev = next_event;
                next_event += 1;
                let sigma = e.t();
                let new_phis = map_particles(&ens.states, |x| correction.phi(x, sigma, c, ev))
                    .into_iter()
                    .collect::<Result<Vec<f64>>>()?;
                let ratio = pf_weights(&ens.phis, &new_phis)?;
                let w: Vec<f64> = ratio.iter().zip(&carried).map(|(r, a)| r * a).collect();
                let e_ss = ess(&w).map_err(|err| Error::Resampling { step: ev, reason: err.to_string() })?;
                let resample = match cfg.ess_trigger {
                    None => true,
                    Some(f) => e_ss < f * k as f64,
                };
                let anc = if resample {
                    let mut rng = seed.resample(ev).rng();
                    multinomial_indices(&w, k, ev, &mut rng)?
                } else {
                    (0..k).collect()
                };
                for (p, &a) in anc.iter().enumerate() {
                    trace.rows.push(TraceRow {
                        event: ev,
                        t: sigma,
                        particle: p,
                        weight: w[p],
                        phi: new_phis[p],
                        ancestor: a,
                        ess: e_ss,
                    });
                }
                trace.ess.push(e_ss);
                trace.resampled.push(resample);
                if resample {
                    ens.states = anc.iter().map(|&a| ens.states[a].clone()).collect();
                    ens.phis = anc.iter().map(|&a| new_phis[a]).collect();
                    carried = vec![1.0; k];
                } else {
                    ens.phis = new_phis;
                    carried = w.clone();
                }
                ens.ancestors = anc;
                ens.weights_last = w;
                ens.t = sigma;
            }
            _ => for_each_particle(&mut ens.states, |p, x| apply_segment(seg, x, provider, c, seed.particle(p).step(si))),
        }
    }
    if next_event != events.len() {
        return Err(Error::Config("resampling events are not in plan order".into()));
    }
    ens.t = plan.t_end;
    let finals = map_particles(&ens.states, |x| one_step_clean_prediction(x, plan.t_end, provider, c));
    let chosen = if carried.iter().all(|w| *w == carried[0]) {
        0
    } else {
        let mut rng = seed.resample(events.len()).rng();
        multinomial_indices(&carried, 1, events.len(), &mut rng)?[0]
    };
    Ok(PfOutput { ensemble: ens, finals, chosen, trace, nfe: plan.nfe() * k })
}

/// Particle filter on a discrete micro-world with the given corrections
/// `phis[t][state]`. Returns the empirical distribution of `X_0`.
pub fn micro_pf_run(micro: &DiscreteMicroWorld, phis: &[Vec<f64>], k: usize, seed: StreamSeed) -> Result<Vec<f64>> {
    micro.validate()?;
    if k < 1 {
        return Err(Error::Argument("particle filter needs at least one particle".into()));
    }
    if phis.len() != micro.horizon + 1 || phis.iter().any(|p| p.len() != micro.n_states) {
        return Err(Error::Argument("one correction vector per time step is required".into()));
    }
    let big_t = micro.horizon;
    let mut rng = seed.particle(0).rng();
    let prior = WeightedIndex::new(&micro.q_prior).map_err(|e| Error::Validation(e.to_string()))?;
    let mut states: Vec<usize> = (0..k).map(|_| prior.sample(&mut rng)).collect();
    let mut cur_phi: Vec<f64> = vec![1.0; k];
    let mut event = 0;
    let mut step = |states: &mut Vec<usize>, cur_phi: &mut Vec<f64>, t: usize| -> Result<()> {
        let new_phi: Vec<f64> = states.iter().map(|&s| phis[t][s]).collect();
        let w = pf_weights(cur_phi, &new_phi)?;
        let mut rr = seed.resample(event).rng();
        let anc = multinomial_indices(&w, k, event, &mut rr)?;
        *states = anc.iter().map(|&a| states[a]).collect();
        *cur_phi = anc.iter().map(|&a| new_phi[a]).collect();
        event += 1;
        Ok(())
    };
    step(&mut states, &mut cur_phi, big_t)?;
    for t in (0..big_t).rev() {
        let kernels: Vec<WeightedIndex<f64>> = micro.q_transitions[t]
            .iter()
            .map(|row| WeightedIndex::new(row).map_err(|e| Error::Validation(e.to_string())))
            .collect::<Result<_>>()?;
        let mut prng = seed.particle(0).step(t).rng();
        for s in states.iter_mut() {
            *s = kernels[*s].sample(&mut prng);
        }
        step(&mut states, &mut cur_phi, t)?;
    }
    let mut hist = vec![0.0; micro.n_states];
    for s in states {
        hist[s] += 1.0;
    }
    Ok(hist.into_iter().map(|h| h / k as f64).collect())
}
