//! End-to-end runs of the `pfdiff` binary.

use std::path::Path;
use std::process::{Command, Output};

use pfdiff_cli::artifacts::{self, DiscriminatorArtifact, KappaArtifact};
use pfdiff_cli::report::RunReport;
use pfdiff_core::experiment::Method;
use pfdiff_core::guidance::world_examples;
use pfdiff_core::rng::StreamSeed;
use pfdiff_core::toyworld::MixtureWorld;

fn pfdiff(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pfdiff"))
        .args(args)
        .env("PFDIFF_OUTPUT_ROOT", root)
        .output()
        .expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn report(root: &Path, output: &str) -> RunReport {
    artifacts::load(&root.join(output).join("report.json")).unwrap()
}

#[test]
fn missing_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = pfdiff(dir.path(), &["run", "does/not/exist.toml"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("does/not/exist.toml"));
}

#[test]
fn invalid_config_names_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "bad.toml", "[run]\nk_particles = 4\n\n[sampler]\nkind = \"edm\"\nedm = \"25, {10, 30}\"\n");
    let o = pfdiff(dir.path(), &["run", &cfg]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("bad.toml:6:"), "{}", stderr(&o));
    assert!(!dir.path().join("run").exists(), "nothing runs on a bad config");
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(pfdiff(dir.path(), &["frobnicate"]).status.code(), Some(2));
}

#[test]
fn plain_occurrence_matches_the_miss_rate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "plain.toml", "[run]\nmethod = \"plain\"\nk_particles = 1\ncompare = []\noutput = \"plain\"\n");
    let o = pfdiff(dir.path(), &["run", &cfg]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let r = report(dir.path(), "plain");
    let expected = 1.0 - MixtureWorld::default().miss_rates[0];
    assert!((r.summary.occurrence.mean - expected).abs() < 0.05, "{}", r.summary.occurrence.mean);
    assert!(r.comparison.is_empty());
    for f in ["samples.csv", "trace.csv", "metrics.csv", "occurrence_vs_frechet.gp"] {
        assert!(dir.path().join("plain").join(f).exists(), "{f}");
    }
}

#[test]
fn filter_beats_plain_in_the_comparison_block() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "pf.toml", "[run]\nmethod = \"pf-analytic\"\nk_particles = 8\noutput = \"pf\"\n");
    let o = pfdiff(dir.path(), &["run", &cfg]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let r = report(dir.path(), "pf");
    let plain = r.comparison.iter().find(|s| s.method == Method::Plain).expect("plain in comparison");
    assert!(r.summary.frechet.value < plain.frechet.value);
    assert_eq!(r.summary.nfe_per_sample, plain.nfe_per_sample);
    let trace = std::fs::read_to_string(dir.path().join("pf/trace.csv")).unwrap();
    assert!(trace.starts_with("condition,event,t,particle,weight,phi,ancestor,ess\n"));
    assert!(trace.lines().count() > 1000);
}

#[test]
fn reruns_are_identical_apart_from_wall_clock() {
    let dir = tempfile::tempdir().unwrap();
    let text = "[run]\nmethod = \"pf-hybrid\"\nk_particles = 4\nn_conditions = 150\nseed = 5\ncompare = [\"plain\", \"d-select\"]\noutput = \"OUT\"\n";
    let a = write(dir.path(), "a.toml", &text.replace("OUT", "a"));
    let b = write(dir.path(), "b.toml", &text.replace("OUT", "b"));
    assert_eq!(pfdiff(dir.path(), &["run", &a]).status.code(), Some(0));
    assert_eq!(pfdiff(dir.path(), &["run", &b]).status.code(), Some(0));
    let strip = |name: &str| -> String {
        let text = std::fs::read_to_string(dir.path().join(name).join("report.json")).unwrap();
        text.lines().filter(|l| !l.contains("wall_clock_seconds")).collect::<Vec<_>>().join("\n")
    };
    assert_eq!(strip("a"), strip("b"));
    for f in ["samples.csv", "trace.csv", "metrics.csv"] {
        assert_eq!(
            std::fs::read(dir.path().join("a").join(f)).unwrap(),
            std::fs::read(dir.path().join("b").join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn seed_flag_overrides_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "s.toml", "[run]\nmethod = \"plain\"\nn_conditions = 50\nseed = 1\ncompare = []\n");
    assert_eq!(pfdiff(dir.path(), &["--seed", "42", "run", &cfg]).status.code(), Some(0));
    let r = report(dir.path(), "run");
    assert_eq!(r.seed, 42);
    assert_eq!(r.config.seed, 42);
}

#[test]
fn metrics_recompute_from_samples() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "m.toml", "[run]\nmethod = \"object-select\"\nk_particles = 3\nn_conditions = 200\noutput = \"m\"\n");
    assert_eq!(pfdiff(dir.path(), &["run", &cfg]).status.code(), Some(0));
    let o = pfdiff(dir.path(), &["metrics", dir.path().join("m").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let m: pfdiff_cli::commands::RecomputedMetrics = artifacts::load(&dir.path().join("m/metrics_recomputed.json")).unwrap();
    assert_eq!(m.n_samples, 200);
    assert_eq!(m.max_abs_difference, 0.0);
    assert_eq!(pfdiff(dir.path(), &["metrics", "nowhere"]).status.code(), Some(2));
}

#[test]
fn kappa_artifact_is_loaded_and_schedule_checked() {
    let dir = tempfile::tempdir().unwrap();
    let k = write(dir.path(), "k.toml", "[run]\nmethod = \"pf-hybrid\"\noutput = \"arts\"\n\n[guidance]\nkappa_runs = 60\n");
    let o = pfdiff(dir.path(), &["kappa", &k]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let a: KappaArtifact = artifacts::load(&dir.path().join("arts/kappa.json")).unwrap();
    assert_eq!(a.table.h_runs, 60);
    assert_eq!(a.world_hash, artifacts::world_hash(&MixtureWorld::default()));
    assert!(a.table.mentions.iter().all(|&m| m > 0));
    assert!(a.table.hits.iter().zip(&a.table.mentions).all(|(h, &m)| h.iter().all(|&x| x <= m)));

    let load = "[run]\nmethod = \"pf-hybrid\"\nk_particles = 4\nn_conditions = 100\noutput = \"loaded\"\n\n[guidance]\nkappa = \"load\"\nkappa_path = \"arts/kappa.json\"\n";
    let ok = write(dir.path(), "ok.toml", load);
    let o = pfdiff(dir.path(), &["run", &ok]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(report(dir.path(), "loaded").artifacts.kappa.is_some());

    let mismatch = write(dir.path(), "mm.toml", &format!("{load}\n[filter]\nschedule = [0, 2]\n"));
    let o = pfdiff(dir.path(), &["run", &mismatch]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("resampling times"), "{}", stderr(&o));

    let missing = write(dir.path(), "miss.toml", &load.replace("arts/kappa.json", "arts/other.json"));
    assert_eq!(pfdiff(dir.path(), &["run", &missing]).status.code(), Some(2));

    let few = write(dir.path(), "few.toml", "[guidance]\nkappa_runs = 49\n");
    assert_eq!(pfdiff(dir.path(), &["kappa", &few]).status.code(), Some(2));
}

#[test]
fn trained_discriminators_round_trip_and_separate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "d.toml", "[run]\noutput = \"disc\"\n");
    let o = pfdiff(dir.path(), &["train-disc", &cfg]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let path = dir.path().join("disc/discriminator.json");
    let bytes = std::fs::read_to_string(&path).unwrap();
    let a: DiscriminatorArtifact = artifacts::load(&path).unwrap();
    assert_eq!(artifacts::to_json(&a), bytes);
    assert!(a.conditional_heldout.accuracy > 0.5);
    assert!(a.unconditional_heldout.accuracy > 0.5);

    let use_it = write(
        dir.path(),
        "u.toml",
        "[run]\nmethod = \"pf-discriminator\"\nk_particles = 4\nn_conditions = 100\noutput = \"u\"\n\n[guidance]\ndiscriminator_path = \"disc/discriminator.json\"\n",
    );
    assert_eq!(pfdiff(dir.path(), &["run", &use_it]).status.code(), Some(0));
    assert!(report(dir.path(), "u").artifacts.discriminator.is_some());

    let other_world = write(
        dir.path(),
        "w.toml",
        "[run]\nmethod = \"pf-discriminator\"\noutput = \"w\"\n\n[world]\nquality_inflation = 2.0\n\n[guidance]\ndiscriminator_path = \"disc/discriminator.json\"\n",
    );
    let o = pfdiff(dir.path(), &["run", &other_world]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("built for world"));
}

#[test]
fn discriminator_is_uninformative_when_model_equals_target() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "pq.toml", "[run]\noutput = \"pq\"\n\n[world]\nmiss_rate = 0.0\nquality_inflation = 1.0\n");
    assert_eq!(pfdiff(dir.path(), &["train-disc", &cfg]).status.code(), Some(0));
    let a: DiscriminatorArtifact = artifacts::load(&dir.path().join("pq/discriminator.json")).unwrap();
    let world = MixtureWorld::new(3, Default::default(), vec![0.0; 3], 1.0, MixtureWorld::default().mention_prob).unwrap();
    let data = world_examples(&world, true, 4000, &mut StreamSeed::new(9).rng()).unwrap();
    let mean: f64 = data.iter().map(|e| a.conditional.prob(&e.x, e.sigma, &e.condition)).sum::<f64>() / data.len() as f64;
    assert!((mean - 0.5).abs() < 0.02, "{mean}");
    assert!((a.conditional_heldout.accuracy - 0.5).abs() < 0.05);
}

#[test]
fn verify_suite_passes_and_names_injected_faults() {
    let dir = tempfile::tempdir().unwrap();
    let o = pfdiff(dir.path(), &["verify"]);
    let out = String::from_utf8_lossy(&o.stdout);
    assert_eq!(o.status.code(), Some(0), "{out}{}", stderr(&o));
    assert_eq!(out.lines().filter(|l| l.starts_with("[PASS]")).count(), 6, "{out}");
    assert!(out.contains("singleton filter"));

    let cfg = write(dir.path(), "v.toml", "[verify]\nseeds = 1\nn_conditions = 100\ninject_negative_phi = true\n");
    let o = pfdiff(dir.path(), &["verify", &cfg]);
    let out = String::from_utf8_lossy(&o.stdout);
    assert_eq!(o.status.code(), Some(1));
    assert!(out.contains("[FAIL] correction positivity and ESS bounds: invariant violation"), "{out}");
    assert!(stderr(&o).contains("failed properties: correction positivity and ESS bounds"), "{}", stderr(&o));
}
