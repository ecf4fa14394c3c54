use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use modeshift::pipeline::{run_all, run_stage, PipelineConfig, RunReport, Stage};

/// Causal evaluation pipeline for travel mode-shift incentive programs.
#[derive(Parser)]
#[command(name = "modeshift", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Pipeline configuration (JSON). Omitted fields fall back to the
    /// bundled demo scenario.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed; every stage derives its own stream from it.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Artifact directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[arg(long, global = true)]
    verbose: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic scenario (trips, users, zones, ground truth).
    Synth,
    /// Build the monthly low-carbon travel panel.
    Panel,
    /// Propensity-score matching with balance diagnostics.
    Match,
    /// Fixed-effects estimates: average effect, event study, placebos.
    Did,
    /// Counterfactual mode inference and the carbon ledger.
    Counterfactual,
    /// Zone graphs, GCN embeddings, clustering, infrastructure regression.
    Spatial,
    /// Consolidated run report with citywide extrapolation.
    Report,
    /// Run every stage in order.
    All,
}

fn load_config(cli: &Cli) -> modeshift::Result<PipelineConfig> {
    let mut config = match &cli.config {
        Some(path) => {
            let bytes = std::fs::read(path).map_err(|e| {
                modeshift::Error::Config(format!("cannot read config {path:?}: {e}"))
            })?;
            serde_json::from_slice::<PipelineConfig>(&bytes)
                .map_err(|e| modeshift::Error::Config(format!("bad config {path:?}: {e}")))?
        }
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    config.out_dir = cli.out.clone();
    config.threads = cli.threads;
    config.verbose = cli.verbose;
    Ok(config)
}

fn print_headline(report: &RunReport) {
    for stage in &report.stages {
        println!("stage {:<15} {:>8} ms  {}", stage.name, stage.wall_ms, stage.notes.join("; "));
    }
    if let Some(h) = &report.headline {
        println!("--");
        println!("att (matched)     {:+.4}  se {:.4}  t {:+.2}", h.att.estimate, h.att.se, h.att.t);
        println!(
            "att (unmatched)   {:+.4}  se {:.4}  t {:+.2}",
            h.att_naive.estimate, h.att_naive.se, h.att_naive.t
        );
        for p in &h.placebo {
            println!("placebo shift {}   {:+.4}  t {:+.2}", p.shift, p.estimate, p.t);
        }
        println!("forest accuracy   {:.3}", h.forest_accuracy);
        println!("annual CO2        {:.1} t", h.annual_co2_tons);
        if let Some(d) = h.citywide_car_delta {
            println!("citywide car delta {:+.2}%", d * 100.0);
        }
        for c in &h.categories {
            println!(
                "zones {:<3} n = {:<4} mean car reduction {:.3}",
                c.category, c.n_zones, c.mean_car_reduction
            );
        }
    }
}

fn run(cli: &Cli) -> modeshift::Result<()> {
    let config = load_config(cli)?;
    if let Some(n) = config.threads {
        // A pool may already exist when embedded elsewhere; that is fine.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match cli.command {
        Command::All => {
            let report = run_all(&config)?;
            print_headline(&report);
        }
        Command::Synth => drop(run_stage(&config, Stage::Synth)?),
        Command::Panel => drop(run_stage(&config, Stage::Panel)?),
        Command::Match => drop(run_stage(&config, Stage::Match)?),
        Command::Did => drop(run_stage(&config, Stage::Did)?),
        Command::Counterfactual => drop(run_stage(&config, Stage::Counterfactual)?),
        Command::Spatial => drop(run_stage(&config, Stage::Spatial)?),
        Command::Report => {
            let report = run_stage(&config, Stage::Report)?;
            println!("report written ({} artifacts hashed)", report.outputs.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
