//! `clora` — run, measure, and report desk-scale adapter experiments.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use clora_core::harness::{
    checkpoint::{load_checkpoint, save_checkpoint},
    csv, run_continual_experiment, run_measure, run_sweep, run_train, ExperimentConfig, Overrides,
};
use clora_core::trainer::TrainMethod;

#[derive(Parser)]
#[command(
    name = "clora",
    version,
    about = "Desk-scale laboratory for subspace-regularized low-rank adapters"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on the configured task; writes a checkpoint into the output
    /// directory.
    Train {
        #[command(flatten)]
        common: Common,
        /// Stop after this many epochs (0 = initialize only); useful for
        /// producing mid-run checkpoints.
        #[arg(long)]
        stop_after_epoch: Option<usize>,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Train the task sequence one stage at a time and write the accuracy
    /// matrix CSV.
    Continual {
        #[command(flatten)]
        common: Common,
        /// Number of tasks in the sequence (overrides the config).
        #[arg(long)]
        tasks: Option<usize>,
    },
    /// Measure capacity and forgetting of a trained checkpoint on held-out
    /// samples; writes the measurement CSV.
    Measure {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to measure (default: <output_dir>/checkpoint.bin).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train across direction counts and seeds; writes the trend CSV.
    SweepK {
        #[command(flatten)]
        common: Common,
        /// Comma-separated direction counts (overrides the config).
        #[arg(long, value_delimiter = ',')]
        k_values: Option<Vec<usize>>,
        /// Comma-separated seeds (overrides the config).
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Merge CSV reports into one aligned summary table.
    Report {
        /// CSV files to merge.
        #[arg(required = true)]
        files: Vec<PathBuf>,
        /// Write the summary here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Flags shared by every experiment subcommand; each overrides the matching
/// config key.
#[derive(Args)]
struct Common {
    /// Experiment configuration file (TOML).
    #[arg(long, short)]
    config: PathBuf,
    /// Training/init seed (task data keeps its own seed).
    #[arg(long)]
    seed: Option<u64>,
    /// Penalized direction count; 0 removes the penalty.
    #[arg(long)]
    k: Option<usize>,
    /// Orthogonality penalty weight.
    #[arg(long)]
    lambda: Option<f64>,
    /// Adapter rank.
    #[arg(long)]
    rank: Option<usize>,
    /// Training method: lora, clora, or lora_l2.
    #[arg(long)]
    method: Option<String>,
    /// Output directory for checkpoints and CSVs.
    #[arg(long)]
    out: Option<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> clora_core::Result<()> {
    match command {
        Command::Train { common, stop_after_epoch, resume } => {
            let config = load_config(&common)?;
            let out_dir = ensure_out_dir(&config)?;
            let ckpt = out_dir.join("checkpoint.bin");
            let resume_from = if resume {
                if !ckpt.exists() {
                    return Err(clora_core::Error::checkpoint(format!(
                        "nothing to resume: {} does not exist",
                        ckpt.display()
                    )));
                }
                Some(ckpt.as_path())
            } else {
                None
            };
            let outcome = run_train(&config, stop_after_epoch, resume_from)?;
            save_checkpoint(&ckpt, &config, &outcome.model, &outcome.state)?;
            println!(
                "trained {} steps over {} epochs; checkpoint at {}",
                outcome.report.steps,
                outcome.state.completed_epochs,
                ckpt.display()
            );
            match outcome.report.epoch_losses.last() {
                Some(last) => println!("final mean task loss {last:.6}"),
                None => println!("no epochs run; checkpoint holds the initial state"),
            }
            for (target, orth) in &outcome.report.final_orth {
                println!("orthogonality penalty at {target}: {orth:.6}");
            }
            Ok(())
        }
        Command::Continual { common, tasks } => {
            let mut config = load_config(&common)?;
            if let Some(n) = tasks {
                config.continual.num_tasks = n;
            }
            let out_dir = ensure_out_dir(&config)?;
            let report = run_continual_experiment(&config)?;
            let path = out_dir.join("continual.csv");
            std::fs::write(&path, csv::continual_csv(&report))?;
            println!(
                "{} stages done; average final accuracy {:.4}; matrix at {}",
                report.acc.len(),
                report.average_final,
                path.display()
            );
            Ok(())
        }
        Command::Measure { common, checkpoint } => {
            let config = load_config(&common)?;
            let out_dir = ensure_out_dir(&config)?;
            let ckpt = checkpoint.unwrap_or_else(|| out_dir.join("checkpoint.bin"));
            let (model, _state) = load_checkpoint(&ckpt, &config)?;
            let record = run_measure(&config, &model)?;
            let path = out_dir.join("measure.csv");
            std::fs::write(&path, csv::measure_csv(&config.run_label(), &record))?;
            println!(
                "capacity {:.6}, forgetting {:.6} (reference {:.6}); rows at {}",
                record.model_capacity,
                record.model_forgetting,
                record.reference_forgetting,
                path.display()
            );
            for target in &record.skipped {
                println!("note: no usable inputs at {target}; site skipped");
            }
            Ok(())
        }
        Command::SweepK { common, k_values, seeds } => {
            let mut config = load_config(&common)?;
            if let Some(ks) = k_values {
                config.sweep.k_values = ks;
            }
            if let Some(s) = seeds {
                config.sweep.seeds = s;
            }
            let out_dir = ensure_out_dir(&config)?;
            let rows = run_sweep(&config)?;
            let path = out_dir.join("sweep.csv");
            std::fs::write(&path, csv::sweep_csv(&rows))?;
            for r in &rows {
                println!("k={:<4} capacity {:.6}  forgetting {:.6}", r.k, r.capacity, r.forgetting);
            }
            println!("trend at {}", path.display());
            Ok(())
        }
        Command::Report { files, out } => {
            let mut reports = Vec::new();
            for f in &files {
                let name = f
                    .file_name()
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_else(|| f.display().to_string());
                reports.push((name, std::fs::read_to_string(f)?));
            }
            let summary = csv::summarize(&reports)?;
            match out {
                Some(path) => {
                    std::fs::write(&path, &summary)?;
                    println!("summary at {}", path.display());
                }
                None => print!("{summary}"),
            }
            Ok(())
        }
    }
}

fn load_config(common: &Common) -> clora_core::Result<ExperimentConfig> {
    let mut config = ExperimentConfig::load(&common.config)?;
    let method = match &common.method {
        Some(s) => Some(TrainMethod::from_str(s)?),
        None => None,
    };
    config.apply_overrides(&Overrides {
        seed: common.seed,
        k: common.k,
        lambda: common.lambda,
        rank: common.rank,
        method,
        out: common.out.clone(),
    });
    config.validate()?;
    Ok(config)
}

fn ensure_out_dir(config: &ExperimentConfig) -> clora_core::Result<PathBuf> {
    let dir = Path::new(&config.output_dir).to_path_buf();
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}
