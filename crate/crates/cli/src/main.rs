use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use miaudit::eval::name_and_shame_sim;
use miaudit_cli::artifacts::{to_json_bytes, write_atomic};
use miaudit_cli::cache::{resolve_dir, FleetCache};
use miaudit_cli::compare::{compare, load_reports};
use miaudit_cli::{roc_dump, run_experiment, ExperimentConfig};

#[derive(Parser)]
#[command(
    name = "miaudit",
    version,
    about = "Membership-inference privacy audits"
)]
struct Cli {
    /// Worker threads (default: all cores). Outputs do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a fleet, run the attack leave-one-out and write all artifacts.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; falls back to the config's `output_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Fleet cache directory; MIAUDIT_CACHE overrides it.
        #[arg(long)]
        cache_dir: Option<PathBuf>,
    },
    /// Tabulate reports as CSV and JSON, most leaky first.
    Compare {
        #[arg(required = true, num_args = 2..)]
        reports: Vec<PathBuf>,
        /// Directory for comparison.csv and comparison.json; CSV goes to stdout otherwise.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Recompute the pooled ROC of a run directory from its stored scores.
    RocDump {
        #[arg(long)]
        run: PathBuf,
        /// CSV destination; stdout otherwise.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Simulate the name-and-shame mechanism and write its reports.
    Nameshame {
        #[arg(long, default_value_t = 1000)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        target: usize,
        #[arg(long, default_value_t = 20_000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.001, 0.01, 0.1])]
        fpr: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Run {
            config,
            out,
            cache_dir,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let out = out
                .or_else(|| cfg.output_dir.clone())
                .context("no output directory: pass --out or set output_dir in the config")?;
            let cache = resolve_dir(cache_dir.as_deref()).map(FleetCache::new);
            let summary = run_experiment(&cfg, &out, cache.as_ref())?;
            eprintln!(
                "wrote {} files to {} (config {}, fleet cache {})",
                summary.files.len(),
                summary.out_dir.display(),
                summary.config_hash,
                if summary.cache_hit { "hit" } else { "miss" }
            );
        }
        Command::Compare { reports, out } => {
            let mut all = Vec::new();
            for path in &reports {
                all.extend(load_reports(path)?);
            }
            let table = compare(&all)?;
            let csv = table.to_csv()?;
            match out {
                Some(dir) => {
                    std::fs::create_dir_all(&dir)?;
                    write_atomic(&dir.join("comparison.csv"), &csv)?;
                    write_atomic(&dir.join("comparison.json"), &to_json_bytes(&table)?)?;
                }
                None => print!("{}", String::from_utf8(csv)?),
            }
        }
        Command::RocDump { run, out } => {
            let csv = roc_dump(&run)?;
            match out {
                Some(path) => write_atomic(&path, &csv)?,
                None => print!("{}", String::from_utf8(csv)?),
            }
        }
        Command::Nameshame {
            size,
            target,
            trials,
            seed,
            fpr,
            out,
        } => {
            let r = name_and_shame_sim(size, target, trials, seed, &fpr)?;
            std::fs::create_dir_all(&out)?;
            let file = serde_json::json!({
                "engine_version": miaudit::ENGINE_VERSION,
                "reports": [r.population, r.sample_level],
            });
            write_atomic(&out.join("reports.json"), &to_json_bytes(&file)?)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads.unwrap_or(0))
        .build();
    let result = match pool {
        Ok(pool) => pool.install(|| execute(cli.command)),
        Err(e) => Err(e.into()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
