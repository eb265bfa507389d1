use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use hyperpredict::config::{DataConfig, RunConfig};
use hyperpredict::experiment::{evaluate, export, run_training, Dataset, ExportKind, Trainer};
use hyperpredict::geometry::distance;
use hyperpredict::model::ModelSpace;
use hyperpredict::selfcheck::{all_pass, render_table, run_selfcheck};
use hyperpredict::Error;

#[derive(Parser, Debug)]
#[command(
    name = "hyperpredict",
    version,
    about = "Hyperbolic predictive coding on synthetic hierarchies"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model from a JSON run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (overrides the config).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum)]
        space: Option<SpaceArg>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Fit per-level probes on a trained model and score val/test.
    Eval {
        #[arg(long)]
        model: PathBuf,
        /// JSON data section replacing the one stored in the checkpoint.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output directory; defaults to the checkpoint's directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also choose a level per test sample from its prediction radius.
        #[arg(long)]
        level_select: bool,
    },
    /// Write trajectories, radius curves or retrieval counts as CSV.
    Export {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum)]
        kind: KindArg,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        /// Output file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the oracle battery and print a pass/fail table.
    Selfcheck,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SpaceArg {
    Hyperbolic,
    Euclidean,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum KindArg {
    Trajectories,
    RadiusCurve,
    Retrieval,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Diverged(_) => 3,
        Error::UnsupportedMode { .. } => 4,
        _ => 2,
    }
}

fn is_broken_pipe(e: &Error) -> bool {
    matches!(e, Error::Io(io) if io.kind() == io::ErrorKind::BrokenPipe)
}

fn load_data(data: Option<&Path>, config: &RunConfig) -> hyperpredict::Result<Dataset> {
    match data {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            let cfg: DataConfig =
                serde_json::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
            Dataset::load(&cfg)
        }
        None => Dataset::load(&config.data),
    }
}

fn run(cmd: Command) -> hyperpredict::Result<ExitCode> {
    match cmd {
        Command::Train {
            config,
            out,
            seed,
            space,
            resume,
        } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(o) = out {
                cfg.output = o;
            }
            if let Some(s) = seed {
                cfg.training.seed = s;
            }
            if let Some(s) = space {
                cfg.space = match s {
                    SpaceArg::Hyperbolic => ModelSpace::Hyperbolic,
                    SpaceArg::Euclidean => ModelSpace::Euclidean,
                };
            }
            cfg.validate()?;
            let resume = resume.map(Trainer::load).transpose()?;
            if let Some(t) = &resume {
                if t.config().space != cfg.space || t.config().dims != cfg.dims {
                    return Err(Error::Config(
                        "checkpoint does not match the config's model".into(),
                    ));
                }
            }
            let summary = run_training(&cfg, resume)?;
            println!(
                "trained {} epochs, final loss {:.6}; metrics at {}, model at {}",
                summary.epochs,
                summary.final_loss,
                summary.metrics.display(),
                summary.model.display()
            );
        }
        Command::Eval {
            model,
            data,
            out,
            level_select,
        } => {
            let trainer = Trainer::load(&model)?;
            let data = load_data(data.as_deref(), trainer.config())?;
            let result = evaluate(
                trainer.model(),
                trainer.config(),
                &data,
                trainer.epoch(),
                level_select,
            )?;
            let dir =
                out.unwrap_or_else(|| model.parent().map(Path::to_path_buf).unwrap_or_default());
            result.write(&dir)?;
            for (split, s) in &result.scores {
                println!(
                    "{split}: acc {:.4}  td_acc {:.4}  bu_acc {:.4}  per level {:?}",
                    s.acc, s.td_acc, s.bu_acc, s.level_acc
                );
            }
            if let Some(sel) = &result.level_selection {
                println!(
                    "level selection: r_low {:.4} r_high {:.4} accuracy {:.4} counts {:?}",
                    sel.r_low, sel.r_high, sel.accuracy, sel.level_counts
                );
            }
        }
        Command::Export {
            model,
            kind,
            data,
            split,
            out,
        } => {
            let trainer = Trainer::load(&model)?;
            let data = load_data(data.as_deref(), trainer.config())?;
            let samples = data.split(&split)?;
            let kind = match kind {
                KindArg::Trajectories => ExportKind::Trajectories,
                KindArg::RadiusCurve => ExportKind::RadiusCurve,
                KindArg::Retrieval => ExportKind::Retrieval,
            };
            match out {
                Some(p) => {
                    let mut w = BufWriter::new(File::create(p)?);
                    export(trainer.model(), samples, kind, &mut w)?;
                    w.flush()?;
                }
                None => export(trainer.model(), samples, kind, io::stdout().lock())?,
            }
        }
        Command::Selfcheck => {
            let results = run_selfcheck(distance);
            print!("{}", render_table(&results));
            if !all_pass(&results) {
                for r in results.iter().filter(|r| !r.pass) {
                    eprintln!("selfcheck failed: {}", r.name);
                }
                return Ok(ExitCode::from(1));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        // a closed stdout (e.g. piped into `head`) is not a failure
        Err(e) if is_broken_pipe(&e) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
