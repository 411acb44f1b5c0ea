//! Run configuration file: TOML with one table per concern.
//!
//! ```toml
//! [run]
//! method = "pf-hybrid"
//! k_particles = 5
//!
//! [sampler]
//! kind = "restart"
//! restart = "30, [(4, 1, 1.09, 1.92), (4, 2, 0.59, 1.09), (4, 2, 0.30, 0.59), (4, 1, 0.06, 0.30)]"
//! ```

use std::path::{Path, PathBuf};

use serde::Deserialize;
use toml::Spanned;

use pfdiff_core::experiment::{ExperimentConfig, Method, RatioSource};
use pfdiff_core::guidance::{HybridConfig, TrainConfig};
use pfdiff_core::particlefilter::{Placement, ResampleSchedule};
use pfdiff_core::sampling::{EdmConfig, RestartConfig, RestartNoise, SamplerConfig};
use pfdiff_core::toyworld::{MixtureWorld, SlotGaussianPair};

use crate::{CliError, CliResult};

pub const OUTPUT_ROOT_ENV: &str = "PFDIFF_OUTPUT_ROOT";

const DEFAULT_RESTART: &str =
    "30, [(4, 1, 1.09, 1.92), (4, 2, 0.59, 1.09), (4, 2, 0.30, 0.59), (4, 1, 0.06, 0.30)]";
const DEFAULT_EDM: &str = "25, {10, 13, 16, 19}";

fn default_method() -> Spanned<String> {
    Spanned::new(0..0, "pf-analytic".into())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RunSection {
    method: Spanned<String>,
    k_particles: Spanned<usize>,
    n_conditions: Spanned<usize>,
    seed: u64,
    output: String,
    match_nfe: bool,
    compare: Spanned<Vec<String>>,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            method: default_method(),
            k_particles: Spanned::new(0..0, 8),
            n_conditions: Spanned::new(0..0, 1000),
            seed: 0,
            output: "run".into(),
            match_nfe: true,
            compare: Spanned::new(0..0, vec!["plain".into()]),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct WorldSection {
    n_objects: usize,
    miss_rate: f64,
    miss_rates: Option<Vec<f64>>,
    quality_inflation: f64,
    mention_prob: f64,
    present: [f64; 2],
    absent: [f64; 2],
    var_present: f64,
    var_absent: f64,
}

impl Default for WorldSection {
    fn default() -> Self {
        let w = MixtureWorld::default();
        Self {
            n_objects: w.n_objects,
            miss_rate: w.miss_rates[0],
            miss_rates: None,
            quality_inflation: w.quality_inflation,
            mention_prob: w.mention_prob,
            present: w.slot.mu_present,
            absent: w.slot.mu_absent,
            var_present: w.slot.var_present,
            var_absent: w.slot.var_absent,
        }
    }
}

#[derive(Debug, Deserialize, Clone, Copy, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
enum SamplerKind {
    Restart,
    Edm,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct SamplerSection {
    kind: SamplerKind,
    restart: Spanned<String>,
    edm: Spanned<String>,
    s_churn: f64,
    s_min: f64,
    s_max: f64,
    boost_churn: bool,
    t_max: f64,
    t_min: f64,
    noise: RestartNoise,
}

impl Default for SamplerSection {
    fn default() -> Self {
        let e = EdmConfig::default();
        Self {
            kind: SamplerKind::Restart,
            restart: Spanned::new(0..0, DEFAULT_RESTART.into()),
            edm: Spanned::new(0..0, DEFAULT_EDM.into()),
            s_churn: e.s_churn,
            s_min: e.s_min,
            s_max: e.s_max,
            boost_churn: e.boost_churn_after_resample,
            t_max: e.t_max,
            t_min: e.t_min,
            noise: RestartNoise::Full,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum ScheduleSpec {
    Named(String),
    Blocks(Vec<usize>),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct FilterSection {
    placement: Placement,
    schedule: Spanned<ScheduleSpec>,
    ess_trigger: Option<f64>,
}

impl Default for FilterSection {
    fn default() -> Self {
        Self {
            placement: Placement::BeforeNoise,
            schedule: Spanned::new(0..0, ScheduleSpec::Named("blocks".into())),
            ess_trigger: None,
        }
    }
}

#[derive(Debug, Deserialize, Clone, Copy, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
enum UnconditionalSource {
    Discriminator,
    Analytic,
    None,
}

#[derive(Debug, Deserialize, Clone, Copy, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum KappaSource {
    Estimate,
    Load,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct GuidanceSection {
    pi: Spanned<f64>,
    ratio_floor: Spanned<f64>,
    unconditional: UnconditionalSource,
    ratio_source: RatioSource,
    sigma_gate: f64,
    kappa: KappaSource,
    kappa_path: Option<Spanned<String>>,
    kappa_runs: Spanned<usize>,
    discriminator_path: Option<Spanned<String>>,
}

impl Default for GuidanceSection {
    fn default() -> Self {
        let h = HybridConfig::default();
        Self {
            pi: Spanned::new(0..0, h.pi),
            ratio_floor: Spanned::new(0..0, h.ratio_floor),
            unconditional: UnconditionalSource::Discriminator,
            ratio_source: RatioSource::Learned,
            sigma_gate: pfdiff_core::baselines::DEFAULT_SIGMA_GATE,
            kappa: KappaSource::Estimate,
            kappa_path: None,
            kappa_runs: Spanned::new(0..0, 200),
            discriminator_path: None,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct TrainSection {
    n_samples: usize,
    epochs: usize,
    lr: f64,
    batch_size: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self { n_samples: t.n_samples, epochs: t.epochs, lr: t.lr, batch_size: t.batch_size }
    }
}

#[derive(Debug, Deserialize, Clone)]
#[serde(deny_unknown_fields, default)]
pub struct VerifySection {
    pub seeds: u64,
    pub n_conditions: usize,
    pub micro_particles: usize,
    /// Replace the correction with a negative constant to exercise the
    /// positivity check.
    pub inject_negative_phi: bool,
}

impl Default for VerifySection {
    fn default() -> Self {
        Self { seeds: 10, n_conditions: 1000, micro_particles: 100_000, inject_negative_phi: false }
    }
}

#[derive(Debug, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
struct FileConfig {
    run: RunSection,
    world: WorldSection,
    sampler: SamplerSection,
    filter: FilterSection,
    guidance: GuidanceSection,
    train: TrainSection,
    verify: VerifySection,
}

/// A validated configuration and the file-level options that are not part
/// of the experiment itself.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub experiment: ExperimentConfig,
    pub output_dir: PathBuf,
    pub compare: Vec<Method>,
    pub kappa_source: KappaSource,
    pub kappa_path: Option<PathBuf>,
    pub discriminator_path: Option<PathBuf>,
    pub verify: VerifySection,
    pub source: PathBuf,
}

struct Locator<'a> {
    path: &'a Path,
    text: &'a str,
}

impl Locator<'_> {
    fn line(&self, span: std::ops::Range<usize>) -> Option<usize> {
        if span.start == 0 && span.end == 0 {
            return None;
        }
        Some(self.text[..span.start.min(self.text.len())].matches('\n').count() + 1)
    }

    fn err<T>(&self, span: std::ops::Range<usize>, msg: impl std::fmt::Display) -> CliResult<T> {
        Err(CliError::Usage(match self.line(span) {
            Some(l) => format!("{}:{l}: {msg}", self.path.display()),
            None => format!("{}: {msg}", self.path.display()),
        }))
    }
}

/// Root directory for outputs and artifacts: the environment variable when
/// set, else the current directory.
pub fn output_root(explicit: Option<&Path>) -> PathBuf {
    explicit
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."))
}

pub fn load(path: &Path, seed_override: Option<u64>, root: &Path) -> CliResult<LoadedConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    parse(&text, path, seed_override, root)
}

pub fn parse(text: &str, path: &Path, seed_override: Option<u64>, root: &Path) -> CliResult<LoadedConfig> {
    let loc = Locator { path, text };
    let file: FileConfig = toml::from_str(text).map_err(|e| {
        let line = e.span().and_then(|s| loc.line(s));
        let msg = e.message().to_string();
        CliError::Usage(match line {
            Some(l) => format!("{}:{l}: {msg}", path.display()),
            None => format!("{}: {msg}", path.display()),
        })
    })?;

    let run = &file.run;
    let method = match Method::parse(run.method.get_ref()) {
        Ok(m) => m,
        Err(e) => return loc.err(run.method.span(), e),
    };
    if *run.k_particles.get_ref() == 0 {
        return loc.err(run.k_particles.span(), "k_particles must be positive");
    }
    if *run.n_conditions.get_ref() == 0 {
        return loc.err(run.n_conditions.span(), "n_conditions must be positive");
    }
    let mut compare = Vec::new();
    for name in run.compare.get_ref() {
        match Method::parse(name) {
            Ok(m) if m != method && !compare.contains(&m) => compare.push(m),
            Ok(_) => {}
            Err(e) => return loc.err(run.compare.span(), e),
        }
    }

    let w = &file.world;
    let miss_rates = w.miss_rates.clone().unwrap_or_else(|| vec![w.miss_rate; w.n_objects]);
    let slot = SlotGaussianPair {
        mu_present: w.present,
        mu_absent: w.absent,
        var_present: w.var_present,
        var_absent: w.var_absent,
    };
    let world = MixtureWorld::new(w.n_objects, slot, miss_rates, w.quality_inflation, w.mention_prob)
        .map_err(|e| CliError::Usage(format!("{}: [world] {e}", path.display())))?;

    let s = &file.sampler;
    let sampler = match s.kind {
        SamplerKind::Restart => {
            let mut r = match RestartConfig::parse(s.restart.get_ref()) {
                Ok(r) => r,
                Err(e) => return loc.err(s.restart.span(), e),
            };
            r.t_max = s.t_max;
            r.t_min = s.t_min;
            r.noise = s.noise;
            if let Err(e) = r.validate() {
                return loc.err(s.restart.span(), e);
            }
            SamplerConfig::Restart(r)
        }
        SamplerKind::Edm => {
            let mut e = match EdmConfig::parse(s.edm.get_ref()) {
                Ok(e) => e,
                Err(err) => return loc.err(s.edm.span(), err),
            };
            e.s_churn = s.s_churn;
            e.s_min = s.s_min;
            e.s_max = s.s_max;
            e.boost_churn_after_resample = s.boost_churn;
            e.t_max = s.t_max;
            e.t_min = s.t_min;
            if let Err(err) = e.validate() {
                return loc.err(s.edm.span(), err);
            }
            SamplerConfig::Edm(e)
        }
    };

    let f = &file.filter;
    let schedule = match f.schedule.get_ref() {
        ScheduleSpec::Named(n) if n == "blocks" => ResampleSchedule::Blocks,
        ScheduleSpec::Named(n) if n == "every-step" => ResampleSchedule::EveryStep,
        ScheduleSpec::Named(n) => {
            return loc.err(f.schedule.span(), format!("unknown schedule {n:?}; use \"blocks\", \"every-step\" or a list"))
        }
        ScheduleSpec::Blocks(b) => ResampleSchedule::BlockList(b.clone()),
    };

    let g = &file.guidance;
    let hybrid = HybridConfig {
        pi: *g.pi.get_ref(),
        ratio_floor: *g.ratio_floor.get_ref(),
        use_unconditional_discriminator: g.unconditional == UnconditionalSource::Discriminator,
        analytic_oracle: g.unconditional == UnconditionalSource::Analytic,
    };
    if !(hybrid.pi > 0.0 && hybrid.pi < 1.0) {
        return loc.err(g.pi.span(), "pi must lie strictly between 0 and 1");
    }
    if !(hybrid.ratio_floor > 0.0 && hybrid.ratio_floor <= 1e-3) {
        return loc.err(g.ratio_floor.span(), "ratio_floor must lie in (0, 1e-3]");
    }
    let resolve = |p: &Option<Spanned<String>>| p.as_ref().map(|s| root.join(s.get_ref()));
    let kappa_path = resolve(&g.kappa_path);
    if g.kappa == KappaSource::Load {
        match (&g.kappa_path, &kappa_path) {
            (Some(sp), Some(p)) if !p.exists() => {
                return loc.err(sp.span(), format!("kappa artifact {} does not exist", p.display()))
            }
            (None, _) => return loc.err(0..0, "[guidance] kappa = \"load\" needs kappa_path"),
            _ => {}
        }
    }
    if g.kappa == KappaSource::Estimate && *g.kappa_runs.get_ref() == 0 && method == Method::PfHybrid {
        return loc.err(g.kappa_runs.span(), "kappa_runs must be positive");
    }
    let discriminator_path = resolve(&g.discriminator_path);
    if let (Some(sp), Some(p)) = (&g.discriminator_path, &discriminator_path) {
        if !p.exists() {
            return loc.err(sp.span(), format!("discriminator artifact {} does not exist", p.display()));
        }
    }

    let t = &file.train;
    let experiment = ExperimentConfig {
        world,
        sampler,
        method,
        k_particles: *run.k_particles.get_ref(),
        n_conditions: *run.n_conditions.get_ref(),
        seed: seed_override.unwrap_or(run.seed),
        placement: f.placement,
        schedule,
        ess_trigger: f.ess_trigger,
        hybrid,
        match_nfe: run.match_nfe,
        sigma_gate: g.sigma_gate,
        ratio_source: g.ratio_source,
        train: TrainConfig { n_samples: t.n_samples, epochs: t.epochs, lr: t.lr, batch_size: t.batch_size },
        kappa_runs: *g.kappa_runs.get_ref(),
    };
    if let Err(e) = experiment.resampling_events() {
        return loc.err(f.schedule.span(), e);
    }
    experiment.validate().map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;

    Ok(LoadedConfig {
        experiment,
        output_dir: root.join(&run.output),
        compare,
        kappa_source: g.kappa,
        kappa_path,
        discriminator_path,
        verify: file.verify.clone(),
        source: path.to_path_buf(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse_str(text: &str) -> CliResult<LoadedConfig> {
        parse(text, Path::new("cfg.toml"), None, Path::new("/tmp"))
    }

    #[test]
    fn empty_file_gives_defaults() {
        let c = parse_str("").unwrap();
        assert_eq!(c.experiment, ExperimentConfig::default());
        assert_eq!(c.compare, vec![Method::Plain]);
    }

    #[test]
    fn sections_are_read() {
        let c = parse_str(
            "[run]\nmethod = \"pf-hybrid\"\nk_particles = 5\nseed = 9\n\n[sampler]\nkind = \"edm\"\nedm = \"20, {5, 9}\"\ns_churn = 2.0\n\n[filter]\nplacement = \"after-noise\"\n\n[guidance]\npi = 0.3\nunconditional = \"analytic\"\n",
        )
        .unwrap();
        let e = &c.experiment;
        assert_eq!(e.method, Method::PfHybrid);
        assert_eq!(e.k_particles, 5);
        assert_eq!(e.seed, 9);
        assert_eq!(e.placement, Placement::AfterNoise);
        assert!(e.hybrid.analytic_oracle && !e.hybrid.use_unconditional_discriminator);
        match &e.sampler {
            SamplerConfig::Edm(edm) => {
                assert_eq!(edm.n_steps, 20);
                assert_eq!(edm.resample_steps, vec![5, 9]);
                assert_eq!(edm.s_churn, 2.0);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn errors_name_the_line() {
        let err = parse_str("[run]\nk_particles = 4\nmethod = \"magic\"\n").unwrap_err().to_string();
        assert!(err.starts_with("cfg.toml:3:"), "{err}");
        let err = parse_str("[sampler]\n\nrestart = \"30, [(4, 1, 1.92, 1.09)]\"\n").unwrap_err().to_string();
        assert!(err.starts_with("cfg.toml:3:"), "{err}");
        let err = parse_str("[run]\nbogus = 1\n").unwrap_err().to_string();
        assert!(err.starts_with("cfg.toml:2:"), "{err}");
        let err = parse_str("[guidance]\npi = 1.5\n").unwrap_err().to_string();
        assert!(err.starts_with("cfg.toml:2:"), "{err}");
        let err = parse_str("[filter]\nschedule = [0, 99]\n").unwrap_err().to_string();
        assert!(err.contains("block 99"), "{err}");
    }

    #[test]
    fn seed_override_wins() {
        let c = parse("[run]\nseed = 3\n", Path::new("x"), Some(11), Path::new(".")).unwrap();
        assert_eq!(c.experiment.seed, 11);
    }

    #[test]
    fn missing_artifacts_are_refused() {
        let err = parse_str("[guidance]\nkappa = \"load\"\nkappa_path = \"nope/kappa.json\"\n").unwrap_err();
        assert!(matches!(err, CliError::Usage(_)));
        assert!(err.to_string().starts_with("cfg.toml:3:"));
    }
}
