use std::path::PathBuf;
use std::process::Command;

use ridepool::dispatch::Variant;
use ridepool::harness::{
    ablation_sweep, emit_plot_data, improvement, run_episode, run_variant_on, EpisodeContext, EpisodeSeeds,
    ExperimentConfig, Scenario, SweepAxis,
};
use ridepool::sim::Event;

fn data(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("data").join(name)
}

#[test]
fn default_file_equals_builtin_defaults() {
    let cfg = ExperimentConfig::load(data("default.toml")).unwrap();
    assert_eq!(cfg, ExperimentConfig::default());
}

#[test]
fn unknown_keys_are_rejected() {
    assert!(ExperimentConfig::from_toml("vehicle = 3").is_err());
    assert!(ExperimentConfig::from_toml("[train]\ndiscount = 1.0").is_err());
}

#[test]
fn file_scenario_replays_fixed_requests() {
    let cfg = ExperimentConfig::load(data("small/experiment.toml")).unwrap();
    let scn = Scenario::build(&cfg).unwrap();
    assert_eq!(scn.net.node_count(), 9);
    assert_eq!(scn.grid.region_count(), 2);
    let batches = scn.demand(0).unwrap();
    assert_eq!(batches.iter().map(|b| b.requests.len()).sum::<usize>(), 6);
    assert_eq!(batches, scn.demand(99).unwrap());
    let r = run_variant_on(&scn, Variant::Nod, None).unwrap();
    assert!(r.mean_revenue > 0.0);
}

#[test]
fn revenue_matches_dropoff_events() {
    let mut cfg = ExperimentConfig::default();
    cfg.epochs = 40;
    let scn = Scenario::build(&cfg).unwrap();
    for variant in [Variant::Nod, Variant::Random] {
        let out = run_episode(EpisodeContext {
            scenario: &scn,
            variant,
            seeds: EpisodeSeeds::eval(5, 0),
            learner: None,
            posterior: None,
            training: false,
            temperature: 0.0,
        })
        .unwrap();
        let credited: f64 = out
            .events
            .iter()
            .filter_map(|e| match e {
                Event::Dropoff { price, .. } => Some(*price),
                _ => None,
            })
            .sum();
        assert!(
            (credited - out.revenue).abs() < 1e-9,
            "{variant}: {credited} vs {}",
            out.revenue
        );
        assert_eq!(out.served + out.dropped + out.active, out.generated);
    }
}

#[test]
fn plot_data_and_improvements() {
    let mut cfg = ExperimentConfig::default();
    cfg.seeds = vec![0, 1];
    cfg.eval_episodes = 2;
    cfg.epochs = 30;
    let scn = Scenario::build(&cfg).unwrap();
    let reports: Vec<_> = [Variant::Random, Variant::Nod]
        .into_iter()
        .map(|v| run_variant_on(&scn, v, None).unwrap())
        .collect();
    for r in &reports {
        let mean = r.seeds.iter().map(|s| s.revenue).sum::<f64>() / r.seeds.len() as f64;
        assert_eq!(mean, r.mean_revenue);
        let curve = r.revenue_curve();
        assert_eq!(curve.len(), 30);
        assert!(curve.windows(2).all(|w| w[0] <= w[1]));
    }
    let (a, b) = (reports[1].mean_revenue, reports[0].mean_revenue);
    assert_eq!(improvement(a, b), (a - b) / b);

    let dir = tempfile::tempdir().unwrap();
    let files = emit_plot_data(&reports, dir.path()).unwrap();
    assert_eq!(files.len(), 4);
    let rows = |p: &PathBuf| std::fs::read_to_string(p).unwrap().lines().count();
    assert_eq!(rows(&files[0]), rows(&files[2]));
    // baselines log no MI, so only the header is written
    assert_eq!(rows(&files[1]), 1);
}

#[test]
fn sweep_over_pickup_delay() {
    let mut cfg = ExperimentConfig::default();
    cfg.seeds = vec![0];
    cfg.eval_episodes = 1;
    cfg.epochs = 15;
    let table = ablation_sweep(
        &cfg,
        SweepAxis::PickupDelay,
        &[120.0, 300.0],
        &[Variant::Random, Variant::Nod],
        None,
    )
    .unwrap();
    let records = table.records();
    assert_eq!(records.len(), 2);
    assert_eq!(table.header().len(), records[0].len());
}

#[test]
fn cli_run_writes_logs() {
    let dir = tempfile::tempdir().unwrap();
    let status = Command::new(env!("CARGO_BIN_EXE_ridepool"))
        .args(["run", "--config"])
        .arg(data("small/experiment.toml"))
        .args(["--variant", "NOD", "--variant", "Random", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    let stdout = String::from_utf8_lossy(&status.stdout);
    assert!(stdout.contains("Random/NOD"), "{stdout}");
    for f in [
        "nod/seed0/episode0/events.jsonl",
        "nod/seed0/episode0/metrics.csv",
        "revenue_random.csv",
    ] {
        assert!(dir.path().join(f).exists(), "missing {f}");
    }
    let metrics = std::fs::read_to_string(dir.path().join("nod/seed0/episode0/metrics.csv")).unwrap();
    assert!(metrics.starts_with("epoch,revenue,served,active,dropped"));
}

#[test]
fn cli_rejects_bad_config() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "vehicles = 0\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_ridepool"))
        .args(["run", "--config"])
        .arg(&path)
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}
