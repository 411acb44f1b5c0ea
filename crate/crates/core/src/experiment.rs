//! End-to-end experiment loop: draw conditions, run one method per
//! condition, and score the samples against direct draws from the target.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{d_select, object_select, CorrectionGradient, GuidedProvider, DEFAULT_SIGMA_GATE};
use crate::error::{Error, Result};
use crate::guidance::{
    estimate_kappa, train_conditional, train_unconditional, Correction, CorrectionDeps, CorrectionMode, Discriminator,
    HybridConfig, KappaRun, KappaTable, TrainConfig, DETECTION_THRESHOLD,
};
use crate::metrics::{frechet_distance, occurrence_rate, FrechetScore, OccurrenceReport};
use crate::particlefilter::{
    event_times, pf_run, scheduled_events, PfConfig, Placement, PlanKind, ResampleSchedule, RunTrace, TraceRow,
};
use crate::rng::StreamSeed;
use crate::sampling::{
    one_step_clean_prediction, run_plan, sample_one, AnalyticProvider, SamplerConfig, SamplerEvent, SamplerPlan,
    ScoreProvider, Segment,
};
use crate::toyworld::{Condition, MixtureWorld, Which};

const TAG_DRAW_CONDITION: u64 = 0x6463;
const TAG_REFERENCE: u64 = 0x72_6566;
const TAG_TRAIN_CONDITIONAL: u64 = 0x7463;
const TAG_TRAIN_UNCONDITIONAL: u64 = 0x7475;
const TAG_KAPPA: u64 = 0x6b61;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Plain,
    PfDiscriminator,
    PfHybrid,
    PfAnalytic,
    ObjectSelect,
    DSelect,
    DGuidance,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Plain,
        Method::PfDiscriminator,
        Method::PfHybrid,
        Method::PfAnalytic,
        Method::ObjectSelect,
        Method::DSelect,
        Method::DGuidance,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Method::Plain => "plain",
            Method::PfDiscriminator => "pf-discriminator",
            Method::PfHybrid => "pf-hybrid",
            Method::PfAnalytic => "pf-analytic",
            Method::ObjectSelect => "object-select",
            Method::DSelect => "d-select",
            Method::DGuidance => "d-guidance",
        }
    }

    pub fn parse(s: &str) -> Result<Method> {
        Method::ALL
            .iter()
            .copied()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }

    pub fn correction_mode(&self) -> Option<CorrectionMode> {
        match self {
            Method::PfDiscriminator => Some(CorrectionMode::Discriminator),
            Method::PfHybrid => Some(CorrectionMode::Hybrid),
            Method::PfAnalytic => Some(CorrectionMode::Analytic),
            _ => None,
        }
    }

    pub fn is_particle_filter(&self) -> bool {
        self.correction_mode().is_some()
    }

    pub fn needs_conditional_discriminator(&self, learned_baselines: bool) -> bool {
        match self {
            Method::PfDiscriminator => true,
            Method::DSelect | Method::DGuidance => learned_baselines,
            _ => false,
        }
    }
}

/// Source of the density ratio for D-select and D-guidance.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RatioSource {
    #[default]
    Learned,
    Analytic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub world: MixtureWorld,
    pub sampler: SamplerConfig,
    pub method: Method,
    pub k_particles: usize,
    pub n_conditions: usize,
    pub seed: u64,
    pub placement: Placement,
    pub schedule: ResampleSchedule,
    pub ess_trigger: Option<f64>,
    pub hybrid: HybridConfig,
    /// Give the plain sampler `K` times the score evaluations of one trajectory.
    pub match_nfe: bool,
    pub sigma_gate: f64,
    pub ratio_source: RatioSource,
    pub train: TrainConfig,
    /// Plain runs used to estimate the occurrence table.
    pub kappa_runs: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            world: MixtureWorld::default(),
            sampler: SamplerConfig::Restart(crate::sampling::RestartConfig::text_to_image()),
            method: Method::PfAnalytic,
            k_particles: 8,
            n_conditions: 1000,
            seed: 0,
            placement: Placement::BeforeNoise,
            schedule: ResampleSchedule::Blocks,
            ess_trigger: None,
            hybrid: HybridConfig::default(),
            match_nfe: true,
            sigma_gate: DEFAULT_SIGMA_GATE,
            ratio_source: RatioSource::Learned,
            train: TrainConfig::default(),
            kappa_runs: 200,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.sampler.plan()?;
        self.hybrid.validate()?;
        if self.k_particles == 0 {
            return Err(Error::Config("k_particles must be positive".into()));
        }
        if self.n_conditions == 0 {
            return Err(Error::Config("n_conditions must be positive".into()));
        }
        if self.method == Method::PfHybrid && self.kappa_runs == 0 {
            return Err(Error::Config("pf-hybrid needs kappa_runs > 0 or a loaded kappa table".into()));
        }
        if !(self.sigma_gate > 0.0) {
            return Err(Error::Config("sigma_gate must be positive".into()));
        }
        if let Some(f) = self.ess_trigger {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::Config(format!("ESS trigger must lie in (0, 1], got {f}")));
            }
        }
        self.resampling_events().map(|_| ())
    }

    pub fn seed(&self) -> StreamSeed {
        StreamSeed::new(self.seed)
    }

    pub fn plan_kind(&self) -> PlanKind {
        match &self.sampler {
            SamplerConfig::Restart(_) => PlanKind::Restart,
            SamplerConfig::Edm(e) => PlanKind::Edm { resample_steps: e.resample_steps.clone() },
        }
    }

    pub fn pf_config(&self) -> Result<PfConfig> {
        Ok(PfConfig {
            k_particles: self.k_particles,
            placement: self.placement,
            correction_mode: self.method.correction_mode().unwrap_or(CorrectionMode::Analytic),
            schedule: self.schedule.clone(),
            ess_trigger: self.ess_trigger,
        })
    }

    /// Plan and resampling events shared by the particle filter and the
    /// occurrence-table estimation.
    pub fn resampling_events(&self) -> Result<(SamplerPlan, Vec<usize>)> {
        let plan = self.sampler.plan()?;
        let events = scheduled_events(&plan, &self.plan_kind(), &self.pf_config()?)?;
        Ok((plan, events))
    }

    pub fn resampling_times(&self) -> Result<Vec<f64>> {
        let (plan, events) = self.resampling_events()?;
        Ok(event_times(&plan, &events))
    }

    pub fn needs_kappa(&self) -> bool {
        self.method == Method::PfHybrid
    }

    pub fn needs_conditional(&self) -> bool {
        self.method.needs_conditional_discriminator(self.ratio_source == RatioSource::Learned)
    }

    pub fn needs_unconditional(&self) -> bool {
        self.method == Method::PfHybrid && self.hybrid.use_unconditional_discriminator
    }

    /// Condition `i` of the run.
    pub fn condition(&self, i: usize) -> Condition {
        let mut rng = self.seed().condition(i).child(TAG_DRAW_CONDITION, 0).rng();
        self.world.sample_condition(&mut rng)
    }

    pub fn conditions(&self) -> Vec<Condition> {
        (0..self.n_conditions).map(|i| self.condition(i)).collect()
    }

    /// One direct draw from `p(x | c_i)` per condition.
    pub fn reference_samples(&self) -> Vec<Vec<f64>> {
        (0..self.n_conditions)
            .map(|i| {
                let mut rng = self.seed().condition(i).child(TAG_REFERENCE, 0).rng();
                self.world.sample_clean(&self.condition(i), Which::P, &mut rng)
            })
            .collect()
    }
}

/// Trained or estimated artifacts a method may depend on.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Resources {
    pub conditional: Option<Discriminator>,
    pub unconditional: Option<Discriminator>,
    pub kappa: Option<KappaTable>,
}

impl Resources {
    /// Fill in whatever the configured method needs and is still missing.
    pub fn prepare(cfg: &ExperimentConfig, mut res: Resources) -> Result<Self> {
        if cfg.needs_conditional() && res.conditional.is_none() {
            let mut rng = cfg.seed().child(TAG_TRAIN_CONDITIONAL, 0).rng();
            res.conditional = Some(train_conditional(&cfg.world, &cfg.train, &mut rng)?);
        }
        if cfg.needs_unconditional() && res.unconditional.is_none() {
            let mut rng = cfg.seed().child(TAG_TRAIN_UNCONDITIONAL, 0).rng();
            res.unconditional = Some(train_unconditional(&cfg.world, &cfg.train, &mut rng)?);
        }
        if cfg.needs_kappa() {
            match &res.kappa {
                Some(k) => k.check_schedule(&cfg.resampling_times()?)?,
                None => res.kappa = Some(estimate_kappa_round(cfg, cfg.kappa_runs)?),
            }
        }
        Ok(res)
    }

    pub fn check(&self, cfg: &ExperimentConfig) -> Result<()> {
        if cfg.needs_conditional() && self.conditional.is_none() {
            return Err(Error::Config(format!("{} needs a conditional discriminator", cfg.method.name())));
        }
        if cfg.needs_unconditional() && self.unconditional.is_none() {
            return Err(Error::Config(format!("{} needs an unconditional discriminator", cfg.method.name())));
        }
        if cfg.needs_kappa() {
            self.kappa
                .as_ref()
                .ok_or_else(|| Error::Config(format!("{} needs a kappa table", cfg.method.name())))?
                .check_schedule(&cfg.resampling_times()?)?;
        }
        Ok(())
    }
}

/// Conditional and unconditional discriminators on the seed streams
/// [`Resources::prepare`] uses.
pub fn train_discriminators(cfg: &ExperimentConfig) -> Result<(Discriminator, Discriminator)> {
    let mut rng = cfg.seed().child(TAG_TRAIN_CONDITIONAL, 0).rng();
    let conditional = train_conditional(&cfg.world, &cfg.train, &mut rng)?;
    let mut rng = cfg.seed().child(TAG_TRAIN_UNCONDITIONAL, 0).rng();
    let unconditional = train_unconditional(&cfg.world, &cfg.train, &mut rng)?;
    Ok((conditional, unconditional))
}

/// Initial round of plain runs, recording the clean prediction at every
/// resampling event, reduced to an occurrence table.
pub fn estimate_kappa_round(cfg: &ExperimentConfig, h_runs: usize) -> Result<KappaTable> {
    if h_runs == 0 {
        return Err(Error::Argument("kappa estimation needs at least one run".into()));
    }
    let (plan, events) = cfg.resampling_events()?;
    let wanted: Vec<SamplerEvent> = events
        .iter()
        .map(|&i| match &plan.segments[i] {
            Segment::Event(e) => *e,
            _ => unreachable!("scheduled index is an event"),
        })
        .collect();
    let provider = AnalyticProvider::new(&cfg.world, Which::Q);
    let root = cfg.seed().child(TAG_KAPPA, 0);
    let runs = (0..h_runs)
        .into_par_iter()
        .map(|r| {
            let seed = root.condition(r);
            let c = cfg.world.sample_condition(&mut seed.child(TAG_DRAW_CONDITION, 0).rng());
            let x_init = crate::sampling::initial_state(seed.particle(0), provider.dim(), plan.t_start);
            let mut predictions = Vec::with_capacity(wanted.len());
            run_plan(&plan, &x_init, &provider, &c, seed.particle(0), &mut |e, x| {
                if wanted.get(predictions.len()) == Some(e) {
                    predictions.push(one_step_clean_prediction(x, e.t(), &provider, &c));
                }
            })?;
            Ok(KappaRun { condition: c, predictions })
        })
        .collect::<Result<Vec<_>>>()?;
    estimate_kappa(&runs, cfg.world.n_objects, &event_times(&plan, &events), &cfg.world, DETECTION_THRESHOLD)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionOutcome {
    pub condition: Condition,
    pub sample: Vec<f64>,
    /// ESS at each resampling event (particle filter methods only).
    pub ess: Vec<f64>,
    /// Per-event particle trace (particle filter methods only).
    pub trace: Vec<TraceRow>,
    pub nfe: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub method: Method,
    pub outcomes: Vec<ConditionOutcome>,
}

impl ExperimentResult {
    pub fn samples(&self) -> Vec<Vec<f64>> {
        self.outcomes.iter().map(|o| o.sample.clone()).collect()
    }

    pub fn conditions(&self) -> Vec<Condition> {
        self.outcomes.iter().map(|o| o.condition.clone()).collect()
    }

    pub fn nfe_per_sample(&self) -> f64 {
        self.outcomes.iter().map(|o| o.nfe as f64).sum::<f64>() / self.outcomes.len() as f64
    }
}

fn plain_plan(cfg: &ExperimentConfig) -> Result<SamplerPlan> {
    if cfg.match_nfe && cfg.k_particles > 1 {
        cfg.sampler.scaled_nfe(cfg.k_particles)?.plan()
    } else {
        cfg.sampler.plan()
    }
}

/// Run the configured method on every condition.
pub fn run_experiment(cfg: &ExperimentConfig, res: &Resources) -> Result<ExperimentResult> {
    cfg.validate()?;
    res.check(cfg)?;
    let world = &cfg.world;
    let q = AnalyticProvider::new(world, Which::Q);
    let root = cfg.seed();
    let conditions = cfg.conditions();
    let (plan, events) = cfg.resampling_events()?;
    let deps = CorrectionDeps {
        world: Some(world),
        provider: Some(&q),
        detector: Some(world),
        conditional: res.conditional.as_ref(),
        unconditional: res.unconditional.as_ref(),
        kappa: res.kappa.as_ref(),
        hybrid: cfg.hybrid,
    };
    let selection_ratio = match cfg.ratio_source {
        RatioSource::Learned => CorrectionMode::Discriminator,
        RatioSource::Analytic => CorrectionMode::Analytic,
    };
    let plain = if cfg.method == Method::Plain { Some(plain_plan(cfg)?) } else { None };
    let pf_cfg = cfg.pf_config()?;
    let outcomes = conditions
        .par_iter()
        .enumerate()
        .map(|(i, c)| -> Result<ConditionOutcome> {
            let seed = root.condition(i);
            let out = |sample: Vec<f64>, trace: Option<RunTrace>, nfe: usize| {
                let (ess, trace) = trace.map(|t| (t.ess, t.rows)).unwrap_or_default();
                ConditionOutcome { condition: c.clone(), sample, ess, trace, nfe }
            };
            match cfg.method {
                Method::Plain => {
                    let t = sample_one(plain.as_ref().expect("plain plan"), &q, c, seed.particle(0))?;
                    Ok(out(t.x0, None, t.nfe))
                }
                Method::PfAnalytic | Method::PfDiscriminator | Method::PfHybrid => {
                    let mode = cfg.method.correction_mode().expect("particle filter method");
                    let corr = Correction::new(mode, deps)?;
                    let r = pf_run(&pf_cfg, &plan, &events, &q, &corr, c, seed)?;
                    Ok(out(r.sample().to_vec(), Some(r.trace), r.nfe))
                }
                Method::ObjectSelect | Method::DSelect => {
                    let runs = (0..cfg.k_particles)
                        .map(|k| sample_one(&plan, &q, c, seed.particle(k)))
                        .collect::<Result<Vec<_>>>()?;
                    let nfe = runs.iter().map(|t| t.nfe).sum();
                    let finals: Vec<Vec<f64>> = runs.into_iter().map(|t| t.x0).collect();
                    let pick = if cfg.method == Method::ObjectSelect {
                        object_select(&finals, c, world)?
                    } else {
                        let corr = Correction::new(selection_ratio, deps)?;
                        d_select(&finals, c, &corr, 0.0)?
                    };
                    Ok(out(finals[pick.chosen_index].clone(), None, nfe))
                }
                Method::DGuidance => {
                    let gradient = match (cfg.ratio_source, res.conditional.as_ref()) {
                        (RatioSource::Analytic, _) => CorrectionGradient::Analytic(world),
                        (RatioSource::Learned, Some(d)) => CorrectionGradient::Learned(d),
                        (RatioSource::Learned, None) => {
                            return Err(Error::Config("d-guidance needs a conditional discriminator".into()))
                        }
                    };
                    let guided = GuidedProvider { base: &q, gradient, sigma_gate: cfg.sigma_gate };
                    let t = sample_one(&plan, &guided, c, seed.particle(0))?;
                    Ok(out(t.x0, None, t.nfe))
                }
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ExperimentResult { method: cfg.method, outcomes })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EssSummary {
    pub mean: f64,
    pub min: f64,
    pub per_event_mean: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub method: Method,
    pub occurrence: OccurrenceReport,
    pub frechet: FrechetScore,
    pub nfe_per_sample: f64,
    pub ess: Option<EssSummary>,
}

pub fn summarize_ess(outcomes: &[ConditionOutcome]) -> Option<EssSummary> {
    let n_events = outcomes.first()?.ess.len();
    if n_events == 0 {
        return None;
    }
    let all: Vec<f64> = outcomes.iter().flat_map(|o| o.ess.iter().copied()).collect();
    let per_event_mean = (0..n_events)
        .map(|e| outcomes.iter().map(|o| o.ess[e]).sum::<f64>() / outcomes.len() as f64)
        .collect();
    Some(EssSummary {
        mean: all.iter().sum::<f64>() / all.len() as f64,
        min: all.iter().copied().fold(f64::INFINITY, f64::min),
        per_event_mean,
    })
}

/// Occurrence, Fréchet distance to direct target draws, cost and ESS.
pub fn summarize(cfg: &ExperimentConfig, result: &ExperimentResult) -> Result<ExperimentSummary> {
    let samples = result.samples();
    let occurrence = occurrence_rate(&samples, &result.conditions(), &cfg.world, DETECTION_THRESHOLD)?;
    let frechet = frechet_distance(&samples, &cfg.reference_samples())?;
    Ok(ExperimentSummary {
        method: result.method,
        occurrence,
        frechet,
        nfe_per_sample: result.nfe_per_sample(),
        ess: summarize_ess(&result.outcomes),
    })
}

/// Prepare resources, run and summarize in one call.
pub fn run_and_summarize(cfg: &ExperimentConfig) -> Result<(ExperimentResult, ExperimentSummary)> {
    let res = Resources::prepare(cfg, Resources::default())?;
    let result = run_experiment(cfg, &res)?;
    let summary = summarize(cfg, &result)?;
    Ok((result, summary))
}
