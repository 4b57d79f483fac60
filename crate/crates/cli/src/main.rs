use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fluff_cli::bench::bench;
use fluff_cli::checkpoint;
use fluff_cli::commands::{analyze_config, analyze_model, gen_data, gradcheck};
use fluff_cli::config::{read_json, write_json, DataSpec, RunConfig};
use fluff_cli::eval::run_eval;
use fluff_cli::train::run_train;
use fluff_cli::{CliError, CliResult, EXIT_NUMERIC};
use fluff_core::detector::{detections_to_jsonl, DetectorNet};
use fluff_core::seeded_rng;

#[derive(Parser)]
#[command(name = "fluffnet", version, about = "Latticed dilated-convolution fusion toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parameter, MAC and receptive-field report for a network.
    Analyze {
        #[arg(long, conflicts_with = "model", required_unless_present = "model")]
        config: Option<PathBuf>,
        /// Built-in static model: fluffnet300, vgg16-fc7 or empty.
        #[arg(long)]
        model: Option<String>,
        #[arg(long, default_value_t = 300)]
        input: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic dataset.
    GenData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and write a checkpoint directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// mAP@0.5 of a checkpoint on the test split.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write every detection as JSON lines.
        #[arg(long)]
        detections: Option<PathBuf>,
    },
    /// Time prediction and suppression separately.
    Bench {
        #[arg(long)]
        config: PathBuf,
        /// Randomly initialised from the config seed when absent.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Enable parallel kernels.
        #[arg(long)]
        parallel: bool,
    },
    /// Finite-difference check of every backward pass.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Writes to stdout; a closed pipe (e.g. `| head`) is not an error.
fn emit(text: &str) {
    let _ = std::io::stdout().lock().write_all(text.as_bytes());
}

fn print_json<T: serde::Serialize>(v: &T) {
    emit(&format!("{}\n", serde_json::to_string_pretty(v).expect("report serialises")));
}

fn maybe_write<T: serde::Serialize>(out: &Option<PathBuf>, v: &T) -> CliResult<()> {
    match out {
        Some(p) => write_json(p, v),
        None => Ok(()),
    }
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Analyze { config, model, input, out } => {
            let report = match (config, model) {
                (Some(c), _) => analyze_config(&RunConfig::load(&c)?)?,
                (None, Some(m)) => analyze_model(&m, input)?,
                (None, None) => return Err(CliError::Config("pass --config or --model".into())),
            };
            print_json(&report);
            emit(&report.to_table());
            maybe_write(&out, &report)
        }
        Command::GenData { spec, out } => {
            let spec: DataSpec = read_json(&spec)?;
            let report = gen_data(&spec, &out)?;
            print_json(&report);
            Ok(())
        }
        Command::Train { config, out } => {
            let cfg = RunConfig::load(&config)?;
            run_train(&cfg, &out)?;
            Ok(())
        }
        Command::Eval { config, checkpoint, out, detections } => {
            let cfg = RunConfig::load(&config)?;
            let (report, dets) = run_eval(&cfg, &checkpoint)?;
            print_json(&report);
            if let Some(p) = detections {
                write_text(&p, &detections_to_jsonl(&dets))?;
            }
            maybe_write(&out, &report)
        }
        Command::Bench { config, checkpoint: ckpt, out, parallel } => {
            let mut cfg = RunConfig::load(&config)?;
            cfg.bench.parallel |= parallel;
            let net = match ckpt {
                Some(d) => checkpoint::load(&d, &cfg.network)?,
                None => DetectorNet::new(&cfg.network, &mut seeded_rng(cfg.seed))?,
            };
            let report = bench(&cfg, &net)?;
            print_json(&report);
            emit(&report.to_table());
            maybe_write(&out, &report)
        }
        Command::Gradcheck { seed, out } => {
            let report = gradcheck(seed)?;
            for c in &report.cases {
                emit(&format!(
                    "{} {:<4} {:<48} max rel err {:.3e} ({} checked, {} one-sided, {} skipped)\n",
                    if c.passed { "PASS" } else { "FAIL" },
                    c.precision,
                    c.name,
                    c.max_rel_error,
                    c.checked,
                    c.one_sided,
                    c.skipped
                ));
            }
            maybe_write(&out, &report)?;
            if report.passed {
                Ok(())
            } else {
                Err(CliError::Numeric("gradient check failed".into()))
            }
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("fluffnet: {e}");
            let code = e.exit_code();
            debug_assert!(code != 0 && code <= EXIT_NUMERIC);
            ExitCode::from(code as u8)
        }
    }
}
