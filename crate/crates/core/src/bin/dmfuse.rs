use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dmfuse::cli::{self, CliError, CliResult, Scope};

#[derive(Parser)]
#[command(name = "dmfuse", version, about = "Desk-scale RGBD tracking with cross-modal fusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Constant set to start from.
    #[arg(long, default_value = "desk", value_parser = ["desk", "paper"])]
    profile: String,
    /// `key = value` overrides in [model], [train] and [tracker] sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Worker threads for per-sequence (and per-pair) work.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Render synthetic RGBD sequences described by a spec file.
    Synth {
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Train on every sequence under `--data`.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Directory receiving the checkpoint and the loss log.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: u64,
        /// Start from these weights instead of a fresh initialisation.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Track every sequence under `--data` from its first box.
    Track {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory receiving one prediction file per sequence.
        #[arg(long)]
        out: PathBuf,
        /// Seeds the augmentation of the initial sample set.
        #[arg(long)]
        seed: u64,
        /// Confidence above which frames update the model.
        #[arg(long)]
        gate: Option<f64>,
    },
    /// Score prediction files, or recompute F over a (Pr, Re) table.
    Eval {
        #[arg(long, required_unless_present = "table")]
        data: Option<PathBuf>,
        #[arg(long, requires = "data")]
        predictions: Option<PathBuf>,
        #[arg(long, requires = "data")]
        out: Option<PathBuf>,
        /// Table file of `tracker = pr, re, f` rows.
        #[arg(long, conflicts_with = "data")]
        table: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Run built-in verification suites.
    Verify {
        #[arg(value_parser = ["gradcheck", "metrics", "tables", "all"], default_value = "all")]
        scope: String,
    },
}

fn profile(common: &Common, seed: u64) -> CliResult<cli::config::Profile> {
    let mut p = cli::load_profile(&common.profile, seed, common.config.as_deref())?;
    p.train.jobs = common.jobs;
    Ok(p)
}

fn required<'a>(p: &'a Option<PathBuf>, flag: &str) -> CliResult<&'a Path> {
    p.as_deref()
        .ok_or_else(|| CliError::Usage(dmfuse::Error::InvalidArgument(format!("missing {flag}"))))
}

fn run(command: Command) -> CliResult<()> {
    match command {
        Command::Synth { spec, out, seed, jobs } => {
            let dirs = cli::cmd_synth(&spec, &out, seed, jobs)?;
            println!("wrote {} sequences to {}", dirs.len(), out.display());
        }
        Command::Train {
            common,
            data,
            out,
            seed,
            checkpoint,
        } => {
            let p = profile(&common, seed)?;
            println!("{}", dmfuse::pipeline::LOSS_LOG_HEADER);
            let r = cli::cmd_train(&p, &data, &out, checkpoint.as_deref(), |l| {
                println!("{},{:.6},{:.6},{:.6},{:e}", l.epoch, l.total, l.cls, l.bbox, l.lr)
            })?;
            println!("checkpoint {}", r.checkpoint.display());
            println!("loss log {}", r.loss_log.display());
        }
        Command::Track {
            common,
            data,
            checkpoint,
            out,
            seed,
            gate,
        } => {
            let mut p = profile(&common, seed)?;
            if let Some(g) = gate {
                p.tracker.confidence_gate = g;
            }
            let files = cli::cmd_track(&p, &checkpoint, &data, &out, common.jobs)?;
            println!("wrote {} prediction files to {}", files.len(), out.display());
        }
        Command::Eval {
            data,
            predictions,
            out,
            table,
            jobs,
        } => {
            if let Some(table) = table {
                let (text, checks) = cli::cmd_eval_table(&table)?;
                print!("{text}");
                let failed = checks.iter().filter(|c| !c.passed).count();
                if failed > 0 {
                    for c in checks.iter().filter(|c| !c.passed) {
                        println!("{c}");
                    }
                    return Err(CliError::Verification {
                        failed,
                        total: checks.len(),
                    });
                }
            } else {
                let data = required(&data, "--data")?;
                let summary = cli::cmd_eval(data, required(&predictions, "--predictions")?, required(&out, "--out")?, jobs)?;
                print!("{}", summary.report);
                let o = &summary.overall;
                println!(
                    "overall: Pr={:.3} Re={:.3} F={:.3} AUC={:.3}",
                    o.peak_precision, o.peak_recall, o.peak_f, summary.mean_auc
                );
            }
        }
        Command::Verify { scope } => {
            let scope: Scope = scope.parse().map_err(CliError::Usage)?;
            let checks = cli::cmd_verify(scope, |c| println!("{c}"))?;
            println!("all {} checks passed", checks.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let parsed = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(parsed.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
