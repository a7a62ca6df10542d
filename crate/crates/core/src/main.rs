use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use din_core::ablation::Ablation;
use din_core::config::ExperimentConfig;
use din_core::metrics::MetricOptions;
use din_core::runner;
use din_core::{DinError, Result};

#[derive(Parser)]
#[command(name = "din", about = "Domain-invariant continual zero-shot learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config file.
    config: PathBuf,
    /// Run only this seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// `section.key=value`, repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate every configured seed.
    Run(RunArgs),
    /// Sweep K shots, prompt initialization and placement.
    SweepPrompts(RunArgs),
    /// Run the ablation table with shared seeds.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated presets.
        #[arg(long, value_delimiter = ',')]
        rows: Option<Vec<String>>,
    },
    /// Continual metrics of a saved accuracy matrix.
    Metrics {
        matrix: PathBuf,
        /// Sum accuracies inside each snapshot instead of averaging.
        #[arg(long)]
        raw_sums: bool,
        /// Report the BWT sum instead of its mean.
        #[arg(long)]
        raw_bwt: bool,
    },
}

fn load(args: &RunArgs) -> Result<(ExperimentConfig, PathBuf)> {
    let mut cfg = ExperimentConfig::load(&args.config, &args.overrides)?;
    if let Some(seed) = args.seed {
        cfg.seeds = vec![seed];
    }
    let out = runner::resolve_out_dir(args.out.as_deref(), &cfg);
    Ok((cfg, out))
}

fn fmt_metric(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.2}")).unwrap_or_else(|| "-".into())
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(args) => {
            let (cfg, out) = load(&args)?;
            let summary = runner::run_experiment(&cfg, &out)?;
            for r in &summary.reports {
                let cells: Vec<String> = r.values().iter().map(|(k, v)| format!("{k}={}", fmt_metric(*v))).collect();
                println!("seed {}: {}", r.seed, cells.join(" "));
            }
            println!("wrote {}", out.display());
        }
        Command::SweepPrompts(args) => {
            let (cfg, out) = load(&args)?;
            for r in runner::sweep_prompts(&cfg, &out)? {
                println!("K={} {} {} seed {}: mH={}", r.k, r.variant, r.placement, r.seed, fmt_metric(r.mh));
            }
            println!("wrote {}", out.join("prompt_sweep.csv").display());
        }
        Command::Ablate { run, rows } => {
            let (cfg, out) = load(&run)?;
            let names: Vec<String> = rows.unwrap_or_else(|| Ablation::TABLE.iter().map(|s| s.to_string()).collect());
            for n in &names {
                Ablation::preset(n)?;
            }
            let refs: Vec<&str> = names.iter().map(String::as_str).collect();
            let (table, deltas) = runner::run_ablation(&cfg, &refs, &out)?;
            println!("{:<6} {:>8} {:>8} {:>8}", "row", "LS", "mH", "BWT");
            for r in &table {
                println!("{:<6} {:>8} {:>8} {:>8}", r.name, fmt_metric(r.ls), fmt_metric(r.mh), fmt_metric(r.bwt));
            }
            if let Some(d) = deltas.iter().find(|d| d.row_a == "a6" && d.row_b == "a1") {
                println!("a6 - a1: dLS={} dmH={} dBWT={}", fmt_metric(d.d_ls), fmt_metric(d.d_mh), fmt_metric(d.d_bwt));
            }
            println!("wrote {}", out.join("ablation.csv").display());
        }
        Command::Metrics { matrix, raw_sums, raw_bwt } => {
            let opts = MetricOptions {
                raw_inner_sums: raw_sums,
                raw_bwt,
            };
            let m = runner::matrix_metrics(&matrix, opts)?;
            println!("{}", serde_json::to_string(&m)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("din: {e}");
            ExitCode::from(DinError::exit_code(&e) as u8)
        }
    }
}
