//! Subcommand bodies. Each returns the data it wrote so tests can inspect it.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use pfdiff_core::experiment::{
    estimate_kappa_round, run_experiment, summarize, train_discriminators, ExperimentConfig, Resources,
};
use pfdiff_core::guidance::{world_examples, Discriminator};
use pfdiff_core::metrics::{frechet_distance, occurrence_rate};
use pfdiff_core::guidance::DETECTION_THRESHOLD;

use crate::artifacts::{self, DiscriminatorArtifact, HeldOut, KappaArtifact};
use crate::config::{KappaSource, LoadedConfig};
use crate::report::{self, ArtifactHashes, RunReport};
use crate::{CliError, CliResult};

pub const KAPPA_FILE: &str = "kappa.json";
pub const DISCRIMINATOR_FILE: &str = "discriminator.json";
pub const RECOMPUTED_FILE: &str = "metrics_recomputed.json";
pub const MIN_KAPPA_RUNS: usize = 50;
const HELDOUT_SAMPLES: usize = 4000;
const TAG_HELDOUT: u64 = 0x686f;

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn file_hash(path: &Path) -> CliResult<String> {
    Ok(artifacts::sha256_hex(&std::fs::read(path).map_err(|e| CliError::io(path, e))?))
}

/// Resources from the declared artifacts; anything else is built by the runner.
fn load_resources(cfg: &LoadedConfig) -> CliResult<(Resources, ArtifactHashes)> {
    let exp = &cfg.experiment;
    let mut res = Resources::default();
    let mut hashes = ArtifactHashes::default();
    if let Some(path) = &cfg.discriminator_path {
        let a: DiscriminatorArtifact = artifacts::load(path)?;
        artifacts::check_world(path, &a.world_hash, &exp.world)?;
        res.conditional = Some(a.conditional);
        res.unconditional = Some(a.unconditional);
        hashes.discriminator = Some(file_hash(path)?);
    }
    if cfg.kappa_source == KappaSource::Load {
        let path = cfg.kappa_path.as_ref().expect("validated config has a kappa path");
        let a: KappaArtifact = artifacts::load(path)?;
        artifacts::check_world(path, &a.world_hash, &exp.world)?;
        a.table.check_schedule(&exp.resampling_times()?).map_err(|e| {
            CliError::Usage(format!("refusing {}: {e}", path.display()))
        })?;
        res.kappa = Some(a.table);
        hashes.kappa = Some(file_hash(path)?);
    }
    Ok((res, hashes))
}

pub fn cmd_run(cfg: &LoadedConfig) -> CliResult<RunReport> {
    let started = Instant::now();
    let exp = &cfg.experiment;
    let (loaded, artifact_hashes) = load_resources(cfg)?;
    let res = Resources::prepare(exp, loaded)?;
    let result = run_experiment(exp, &res)?;
    let summary = summarize(exp, &result)?;

    let mut comparison = Vec::new();
    let mut shared = res.clone();
    for &method in &cfg.compare {
        let other = ExperimentConfig { method, ..exp.clone() };
        shared = Resources::prepare(&other, shared)?;
        let r = run_experiment(&other, &shared)?;
        comparison.push(summarize(&other, &r)?);
    }

    let kappa_defaulted = if exp.needs_kappa() {
        res.kappa.as_ref().map(|k| k.defaulted_cells()).unwrap_or_default()
    } else {
        Vec::new()
    };
    let report = RunReport {
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed: exp.seed,
        config_hash: artifacts::hash_json(exp),
        world_hash: artifacts::world_hash(&exp.world),
        config: exp.clone(),
        artifacts: artifact_hashes,
        summary,
        comparison,
        kappa_defaulted,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    };

    let dir = &cfg.output_dir;
    create_dir(dir)?;
    report::write_samples(&dir.join(report::SAMPLES_FILE), &result)?;
    report::write_trace(&dir.join(report::TRACE_FILE), &result)?;
    report::write_metrics(&dir.join(report::METRICS_FILE), &report.all().collect::<Vec<_>>())?;
    let plot = dir.join(report::PLOT_FILE);
    std::fs::write(&plot, report::plot_script()).map_err(|e| CliError::io(&plot, e))?;
    report::write_report(&dir.join(report::REPORT_FILE), &report)?;
    Ok(report)
}

pub fn cmd_kappa(cfg: &LoadedConfig) -> CliResult<KappaArtifact> {
    let exp = &cfg.experiment;
    if exp.kappa_runs < MIN_KAPPA_RUNS {
        return Err(CliError::Usage(format!(
            "{}: kappa estimation needs at least {MIN_KAPPA_RUNS} runs, got kappa_runs = {}",
            cfg.source.display(),
            exp.kappa_runs
        )));
    }
    let table = estimate_kappa_round(exp, exp.kappa_runs)?;
    let artifact = KappaArtifact { seed: exp.seed, world_hash: artifacts::world_hash(&exp.world), table };
    create_dir(&cfg.output_dir)?;
    artifacts::save(&cfg.output_dir.join(KAPPA_FILE), &artifact)?;
    Ok(artifact)
}

fn held_out(d: &Discriminator, cfg: &ExperimentConfig, conditional: bool) -> CliResult<HeldOut> {
    let mut rng = cfg.seed().child(TAG_HELDOUT, conditional as u64).rng();
    let data = world_examples(&cfg.world, conditional, HELDOUT_SAMPLES, &mut rng)?;
    let (loss, accuracy) = d.evaluate(&data);
    Ok(HeldOut { loss, accuracy, n: data.len() })
}

pub fn cmd_train_disc(cfg: &LoadedConfig) -> CliResult<DiscriminatorArtifact> {
    let exp = &cfg.experiment;
    let (conditional, unconditional) = train_discriminators(exp)?;
    let artifact = DiscriminatorArtifact {
        seed: exp.seed,
        world_hash: artifacts::world_hash(&exp.world),
        conditional_heldout: held_out(&conditional, exp, true)?,
        unconditional_heldout: held_out(&unconditional, exp, false)?,
        conditional,
        unconditional,
    };
    create_dir(&cfg.output_dir)?;
    artifacts::save(&cfg.output_dir.join(DISCRIMINATOR_FILE), &artifact)?;
    Ok(artifact)
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RecomputedMetrics {
    pub method: String,
    pub n_samples: usize,
    pub occurrence: f64,
    pub frechet: f64,
    /// Largest absolute difference from the values stored in the report.
    pub max_abs_difference: f64,
}

/// Recompute occurrence and Fréchet score from a run directory's samples.
pub fn cmd_metrics(run_dir: &Path, out: &mut dyn Write) -> CliResult<RecomputedMetrics> {
    let report_path = run_dir.join(report::REPORT_FILE);
    if !report_path.exists() {
        return Err(CliError::Usage(format!("{} does not exist", report_path.display())));
    }
    let rep: RunReport = artifacts::load(&report_path)?;
    let (conditions, samples) = report::read_samples(&run_dir.join(report::SAMPLES_FILE))?;
    let occurrence = occurrence_rate(&samples, &conditions, &rep.config.world, DETECTION_THRESHOLD)?;
    let frechet = frechet_distance(&samples, &rep.config.reference_samples())?;
    let diff = (occurrence.mean - rep.summary.occurrence.mean)
        .abs()
        .max((frechet.value - rep.summary.frechet.value).abs());
    let m = RecomputedMetrics {
        method: rep.summary.method.name().to_string(),
        n_samples: samples.len(),
        occurrence: occurrence.mean,
        frechet: frechet.value,
        max_abs_difference: diff,
    };
    artifacts::save(&run_dir.join(RECOMPUTED_FILE), &m)?;
    writeln!(
        out,
        "{}: occurrence {:.4}, Fréchet {:.4} over {} samples (max difference from report {:.1e})",
        m.method, m.occurrence, m.frechet, m.n_samples, m.max_abs_difference
    )
    .map_err(|e| CliError::io("<stdout>", e))?;
    Ok(m)
}
