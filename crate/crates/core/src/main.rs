use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use eki::experiment::{emit_run, emit_sweep, run, sweep, ExperimentConfig};
use eki::{EkiError, Result};

#[derive(Parser)]
#[command(name = "eki", version, about = "Ensemble Kalman inversion experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a single experiment.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long)]
        seed_ensemble: Option<u64>,
        #[arg(long)]
        seed_noise: Option<u64>,
    },
    /// Run every ensemble/noise combination of the configured sweep.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the built-in oracle checks.
    Verify,
}

fn write_config(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| EkiError::Io {
        path: out.display().to_string(),
        source: e,
    })?;
    let path = out.join("config.json");
    std::fs::write(&path, cfg.to_json() + "\n").map_err(|e| EkiError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into())
}

/// Returns the process exit code.
fn execute(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::Run {
            config,
            out,
            seed_ensemble,
            seed_noise,
        } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(s) = seed_ensemble {
                cfg.seeds.ensemble_seed = s;
            }
            if let Some(s) = seed_noise {
                cfg.seeds.noise_seed = s;
            }
            let rec = run(&cfg)?;
            write_config(&cfg, &out)?;
            let files = emit_run(&rec, &out)?;
            for s in &rec.stops {
                println!(
                    "{:<12} time {:>12}  error {:>10}",
                    s.rule.name(),
                    fmt_opt(s.time),
                    fmt_opt(s.parameter_error)
                );
            }
            println!("final t = {}  error {:.4}", rec.final_time, rec.final_error);
            println!("wrote {} files to {}", files.len(), out.display());
            if let Some(msg) = &rec.failure {
                eprintln!("run ended early: {msg}");
                return Ok(2);
            }
            Ok(0)
        }
        Command::Sweep { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let result = sweep(&cfg)?;
            write_config(&cfg, &out)?;
            let files = emit_sweep(&result, &out)?;
            println!(
                "{} runs, {} failed; wrote {} files to {}",
                result.records.len() + result.failures.len(),
                result.failures.len(),
                files.len(),
                out.display()
            );
            for f in &result.failures {
                eprintln!("run e{} n{} failed: {}", f.ensemble_index, f.noise_index, f.message);
            }
            Ok(if result.failures.is_empty() { 0 } else { 2 })
        }
        Command::Verify => {
            let checks = eki::verify::run_all()?;
            for c in &checks {
                println!("[{}] {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            Ok(if checks.iter().all(|c| c.passed) { 0 } else { 2 })
        }
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
