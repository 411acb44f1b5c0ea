//! Run report and the files written next to it.

use std::path::Path;

use serde::{Deserialize, Serialize};

use pfdiff_core::experiment::{ExperimentConfig, ExperimentResult, ExperimentSummary};
use pfdiff_core::toyworld::Condition;

use crate::{CliError, CliResult};

pub const REPORT_FILE: &str = "report.json";
pub const SAMPLES_FILE: &str = "samples.csv";
pub const TRACE_FILE: &str = "trace.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const PLOT_FILE: &str = "occurrence_vs_frechet.gp";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ArtifactHashes {
    pub kappa: Option<String>,
    pub discriminator: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub version: String,
    pub seed: u64,
    pub config_hash: String,
    pub world_hash: String,
    pub config: ExperimentConfig,
    pub artifacts: ArtifactHashes,
    pub summary: ExperimentSummary,
    /// Other methods on the same seed and conditions.
    pub comparison: Vec<ExperimentSummary>,
    /// `(object, event)` cells of the occurrence table that fell back to the default.
    pub kappa_defaulted: Vec<(usize, usize)>,
    pub wall_clock_seconds: f64,
}

impl RunReport {
    /// All summaries, primary method first.
    pub fn all(&self) -> impl Iterator<Item = &ExperimentSummary> {
        std::iter::once(&self.summary).chain(&self.comparison)
    }
}

fn csv_err(path: &Path, e: csv::Error) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

fn mentioned_field(c: &Condition) -> String {
    c.mentioned.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(" ")
}

pub fn write_samples(path: &Path, result: &ExperimentResult) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let dim = result.outcomes.first().map_or(0, |o| o.sample.len());
    let mut header = vec!["condition".to_string(), "mentioned".to_string()];
    header.extend((0..dim).map(|j| format!("x{j}")));
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for (i, o) in result.outcomes.iter().enumerate() {
        let mut row = vec![i.to_string(), mentioned_field(&o.condition)];
        row.extend(o.sample.iter().map(|v| v.to_string()));
        w.write_record(&row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn read_samples(path: &Path) -> CliResult<(Vec<Condition>, Vec<Vec<f64>>)> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut conditions = Vec::new();
    let mut samples = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let bad = |what: &str| CliError::Data(format!("{}: row {}: bad {what}", path.display(), line + 2));
        let mentioned = rec
            .get(1)
            .ok_or_else(|| bad("mentioned column"))?
            .split_whitespace()
            .map(|s| s.parse::<usize>().map_err(|_| bad("object index")))
            .collect::<CliResult<Vec<_>>>()?;
        conditions.push(Condition::new(mentioned));
        samples.push(
            rec.iter().skip(2).map(|s| s.parse::<f64>().map_err(|_| bad("coordinate"))).collect::<CliResult<Vec<_>>>()?,
        );
    }
    Ok((conditions, samples))
}

pub fn write_trace(path: &Path, result: &ExperimentResult) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["condition", "event", "t", "particle", "weight", "phi", "ancestor", "ess"])
        .map_err(|e| csv_err(path, e))?;
    for (i, o) in result.outcomes.iter().enumerate() {
        for r in &o.trace {
            w.write_record([
                i.to_string(),
                r.event.to_string(),
                r.t.to_string(),
                r.particle.to_string(),
                r.weight.to_string(),
                r.phi.to_string(),
                r.ancestor.to_string(),
                r.ess.to_string(),
            ])
            .map_err(|e| csv_err(path, e))?;
        }
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn write_metrics(path: &Path, summaries: &[&ExperimentSummary]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["method", "occurrence", "frechet", "nfe_per_sample", "ess_mean"])
        .map_err(|e| csv_err(path, e))?;
    for s in summaries {
        w.write_record([
            s.method.name().to_string(),
            s.occurrence.mean.to_string(),
            s.frechet.value.to_string(),
            s.nfe_per_sample.to_string(),
            s.ess.as_ref().map(|e| e.mean.to_string()).unwrap_or_default(),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

/// Gnuplot script: occurrence against Fréchet score, one labelled point per method.
pub fn plot_script() -> String {
    format!(
        "set datafile separator ','\n\
         set terminal pngcairo size 800,600\n\
         set output 'occurrence_vs_frechet.png'\n\
         set xlabel 'Frechet score (lower is better)'\n\
         set ylabel 'object occurrence'\n\
         set key off\n\
         set grid\n\
         plot '{METRICS_FILE}' every ::1 using 3:2 with points pt 7 ps 1.5, \\\n     \
         '' every ::1 using 3:2:1 with labels offset 1,1\n"
    )
}

pub fn write_report(path: &Path, report: &RunReport) -> CliResult<()> {
    crate::artifacts::save(path, report)
}
