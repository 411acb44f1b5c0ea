//! Self-contained invariant suite behind `pfdiff verify`.

use std::io::Write;

use rand::{Rng, SeedableRng};

use pfdiff_core::experiment::{run_and_summarize, ExperimentConfig, Method};
use pfdiff_core::guidance::{mention_denominator_from, Correction};
use pfdiff_core::metrics::tv_distance;
use pfdiff_core::particlefilter::{micro_pf_run, pf_run, scheduled_events, PfConfig, PhiSource, Placement};
use pfdiff_core::rng::{standard_normal_vec, SimRng, StreamSeed};
use pfdiff_core::sampling::{sample_one, AnalyticProvider};
use pfdiff_core::toyworld::{exact_pf_target, Condition, DiscreteMicroWorld, Which};
use pfdiff_core::Result;

use crate::config::VerifySection;
use crate::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

impl std::fmt::Display for Check {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "[{}] {}: {}", if self.pass { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

fn check(name: &'static str, r: Result<(bool, String)>) -> Check {
    match r {
        Ok((pass, detail)) => Check { name, pass, detail },
        Err(e) => Check { name, pass: false, detail: e.to_string() },
    }
}

/// Correction that is always negative; used to exercise the positivity check.
struct NegativePhi;

impl PhiSource for NegativePhi {
    fn phi(&self, _: &[f64], _: f64, _: &Condition, _: usize) -> Result<f64> {
        Ok(-1.0)
    }
}

fn micro_enumeration(opts: &VerifySection) -> Result<(bool, String)> {
    let mut worst_exact: f64 = 0.0;
    let mut worst_tv: f64 = 0.0;
    for seed in 0..5 {
        let micro = DiscreteMicroWorld::random(3, 3, seed)?;
        for t in 0..=micro.horizon {
            let v = exact_pf_target(&micro, t)?;
            let err = v.iter().zip(&micro.p_marginals[t]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            worst_exact = worst_exact.max(err);
        }
        let emp = micro_pf_run(&micro, &micro.exact_phis(), opts.micro_particles, StreamSeed::new(1000 + seed))?;
        worst_tv = worst_tv.max(tv_distance(&emp, &micro.p_marginals[0])?);
    }
    Ok((
        worst_exact <= 1e-12 && worst_tv <= 0.02,
        format!("max enumeration error {worst_exact:.2e}, max TV {worst_tv:.4} at K = {}", opts.micro_particles),
    ))
}

fn tweedie(cfg: &ExperimentConfig) -> Result<(bool, String)> {
    let world = &cfg.world;
    let mut rng = SimRng::seed_from_u64(cfg.seed);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let c = world.sample_condition(&mut rng);
        let sigma = 0.05 + 3.0 * rng.random::<f64>();
        let x: Vec<f64> = standard_normal_vec(&mut rng, world.dim()).iter().map(|v| 3.0 * v).collect();
        for which in [Which::P, Which::Q] {
            let s = world.noisy_score(&c, which, &x, sigma)?;
            let f = world.posterior_mean(&c, which, &x, sigma)?;
            for j in 0..x.len() {
                worst = worst.max((f[j] - (x[j] + sigma * sigma * s[j])).abs());
            }
        }
    }
    Ok((worst <= 1e-8, format!("max |f - (x + sigma^2 score)| {worst:.1e}")))
}

fn mention_bounds() -> Result<(bool, String)> {
    let grid: Vec<f64> = (0..=20).map(|i| i as f64 / 20.0).collect();
    let mut violations = Vec::new();
    for &p in &grid {
        for &kappa in &grid {
            for &pi in grid.iter().filter(|v| **v > 0.0 && **v < 1.0) {
                let den = mention_denominator_from(p, kappa, pi);
                if !(den >= p - 1e-15 && den <= 1.0 + 1e-15) {
                    violations.push(format!("denominator {den} outside [{p}, 1]"));
                }
                if p > 0.0 {
                    let r = p / den;
                    let one = (r - 1.0).abs() <= 1e-12;
                    let expect_one = kappa == 1.0 || p == 1.0;
                    if !(r > 0.0 && r <= 1.0 + 1e-12) || one != expect_one {
                        violations.push(format!("ratio {r} at p {p}, kappa {kappa}, pi {pi}"));
                    }
                }
            }
        }
    }
    let pass = violations.is_empty();
    let detail = if pass {
        format!("{} grid points within bounds", grid.len() * grid.len() * (grid.len() - 2))
    } else {
        format!("{} violations, first: {}", violations.len(), violations[0])
    };
    Ok((pass, detail))
}

/// Run the filter on a few conditions and check positivity of every
/// correction and `1 <= ESS <= K` at every event.
fn filter_invariants(cfg: &ExperimentConfig, inject_negative: bool) -> Result<(bool, String)> {
    let q = AnalyticProvider::new(&cfg.world, Which::Q);
    let (plan, events) = cfg.resampling_events()?;
    let pf_cfg = PfConfig { k_particles: 8, ..cfg.pf_config()? };
    let analytic = Correction::analytic(&cfg.world);
    let phi: &dyn PhiSource = if inject_negative { &NegativePhi } else { &analytic };
    let mut n_events = 0;
    for i in 0..10 {
        let out = pf_run(&pf_cfg, &plan, &events, &q, phi, &cfg.condition(i), cfg.seed().condition(i))?;
        for r in &out.trace.rows {
            if !(r.phi > 0.0 && r.phi.is_finite()) {
                return Ok((false, format!("correction {} at event {}", r.phi, r.event)));
            }
        }
        if let Some(e) = out.trace.ess.iter().find(|e| !(**e >= 1.0 - 1e-9 && **e <= 8.0 + 1e-9)) {
            return Ok((false, format!("ESS {e} outside [1, 8]")));
        }
        n_events += out.trace.ess.len();
    }
    Ok((true, format!("{n_events} resampling events over 10 conditions")))
}

fn singleton_filter(cfg: &ExperimentConfig) -> Result<(bool, String)> {
    let q = AnalyticProvider::new(&cfg.world, Which::Q);
    let pf_cfg = PfConfig { k_particles: 1, ..cfg.pf_config()? };
    let plan = cfg.sampler.plan()?;
    let events = scheduled_events(&plan, &cfg.plan_kind(), &pf_cfg)?;
    let analytic = Correction::analytic(&cfg.world);
    let mut same = 0;
    for i in 0..10 {
        let (c, seed) = (cfg.condition(i), cfg.seed().condition(i));
        let pf = pf_run(&pf_cfg, &plan, &events, &q, &analytic, &c, seed)?;
        let plain = sample_one(&plan, &q, &c, seed.particle(0))?;
        if pf.sample() == plain.x0.as_slice() && pf.nfe == plain.nfe {
            same += 1;
        }
    }
    Ok((same == 10, format!("{same}/10 conditions identical to the plain sampler")))
}

fn placement(cfg: &ExperimentConfig, opts: &VerifySection) -> Result<(bool, String)> {
    let mut wins = 0;
    let mut pairs = Vec::new();
    for s in 0..opts.seeds {
        let base = ExperimentConfig {
            method: Method::PfAnalytic,
            k_particles: 4,
            n_conditions: opts.n_conditions,
            seed: cfg.seed + s,
            ..cfg.clone()
        };
        let before = run_and_summarize(&ExperimentConfig { placement: Placement::BeforeNoise, ..base.clone() })?.1;
        let after = run_and_summarize(&ExperimentConfig { placement: Placement::AfterNoise, ..base })?.1;
        if before.frechet.value <= after.frechet.value {
            wins += 1;
        }
        pairs.push(format!("{:.3}/{:.3}", before.frechet.value, after.frechet.value));
    }
    let needed = (opts.seeds * 4).div_ceil(5);
    Ok((
        wins >= needed,
        format!("{wins}/{} seeds with before <= after (need {needed}); Fréchet before/after {}", opts.seeds, pairs.join(" ")),
    ))
}

/// Run every property, printing one line each as it finishes.
pub fn run_suite(cfg: &ExperimentConfig, opts: &VerifySection, out: &mut dyn Write) -> CliResult<Vec<Check>> {
    type Prop<'a> = (&'static str, Box<dyn Fn() -> Result<(bool, String)> + 'a>);
    let props: Vec<Prop> = vec![
        ("micro-world enumeration", Box::new(|| micro_enumeration(opts))),
        ("tweedie identity", Box::new(|| tweedie(cfg))),
        ("mention ratio bounds", Box::new(mention_bounds)),
        ("correction positivity and ESS bounds", Box::new(|| filter_invariants(cfg, opts.inject_negative_phi))),
        ("singleton filter", Box::new(|| singleton_filter(cfg))),
        ("placement ablation", Box::new(|| placement(cfg, opts))),
    ];
    let mut checks = Vec::new();
    for (name, f) in props {
        let c = check(name, f());
        writeln!(out, "{c}").map_err(|e| CliError::io("<stdout>", e))?;
        checks.push(c);
    }
    Ok(checks)
}

pub fn summarize(checks: &[Check]) -> CliResult<()> {
    let failed: Vec<&str> = checks.iter().filter(|c| !c.pass).map(|c| c.name).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Property(format!("failed properties: {}", failed.join(", "))))
    }
}
