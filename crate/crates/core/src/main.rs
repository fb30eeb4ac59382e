use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ridepool::dispatch::Variant;
use ridepool::harness::{
    ablation_sweep, emit_plot_data, improvement, run_variant_on, ExperimentConfig, Scenario, SweepAxis,
};
use ridepool::oracle::run_oracle_suites;

#[derive(Parser)]
#[command(name = "ridepool", version, about = "Ride-pooling dispatch experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate one or more variants.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Variant(s): Random, NOD, DQN, DQN+MI, MFQL, MFQL+MI. Repeatable.
        #[arg(long)]
        variant: Vec<Variant>,
        /// Overrides the config's seed list.
        #[arg(long)]
        seed: Vec<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// One run per value along an axis, written as a table.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        axis: SweepAxis,
        #[arg(long, num_args = 1.., required = true)]
        values: Vec<f64>,
        #[arg(long, default_values = ["Random", "NOD", "DQN", "MFQL", "MFQL+MI"])]
        variants: Vec<Variant>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare fast paths against brute-force references.
    OracleCheck {
        #[arg(long, default_value_t = 2024)]
        seed: u64,
    },
}

fn load(config: Option<PathBuf>) -> ridepool::Result<ExperimentConfig> {
    match config {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn run(cli: Cli) -> ridepool::Result<bool> {
    match cli.command {
        Command::Run {
            config,
            variant,
            seed,
            out,
        } => {
            let mut cfg = load(config)?;
            if !seed.is_empty() {
                cfg.seeds = seed;
            }
            if out.is_some() {
                cfg.output_dir = out;
            }
            let variants = if variant.is_empty() { vec![cfg.variant] } else { variant };
            let scn = Scenario::build(&cfg)?;
            let root = cfg.output_root();
            let mut reports = Vec::new();
            for v in variants {
                let r = run_variant_on(&scn, v, root.as_deref())?;
                println!(
                    "{:<8} revenue {:>10.2}  served {:>7.1}",
                    v.name(),
                    r.mean_revenue,
                    r.mean_served
                );
                reports.push(r);
            }
            for j in 1..reports.len() {
                for i in 0..j {
                    println!(
                        "{}/{}: {:+.2}%",
                        reports[j].variant,
                        reports[i].variant,
                        100.0 * improvement(reports[j].mean_revenue, reports[i].mean_revenue)
                    );
                }
            }
            if let Some(root) = root {
                let files = emit_plot_data(&reports, &root)?;
                println!("wrote {} plot files under {}", files.len(), root.display());
            }
            Ok(true)
        }
        Command::Sweep {
            config,
            axis,
            values,
            variants,
            out,
        } => {
            let cfg = load(config)?;
            let root = out
                .or_else(|| cfg.output_root())
                .unwrap_or_else(|| PathBuf::from("runs"));
            let table = ablation_sweep(&cfg, axis, &values, &variants, Some(&root))?;
            std::fs::create_dir_all(&root)?;
            let path = root.join(format!("sweep_{}.csv", axis.label()));
            table.write_csv(&path)?;
            println!("{}", table.header().join(","));
            for rec in table.records() {
                println!("{}", rec.join(","));
            }
            println!("wrote {}", path.display());
            Ok(true)
        }
        Command::OracleCheck { seed } => {
            let mut ok = true;
            for s in run_oracle_suites(seed)? {
                println!(
                    "{} {:<28} {:>5} cases, {} failures{}",
                    if s.failures == 0 { "PASS" } else { "FAIL" },
                    s.name,
                    s.cases,
                    s.failures,
                    s.detail.map(|d| format!(" ({d})")).unwrap_or_default()
                );
                ok &= s.failures == 0;
            }
            Ok(ok)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
