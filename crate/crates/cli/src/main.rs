use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use bgdet_cli::ablation::{self, Sweep};
use bgdet_cli::{cmd_eval, cmd_gen, cmd_train, load_config};
use bgdet_core::config::InferenceMode;
use bgdet_core::trainer::{Stage, TrainOptions};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "bgdet", version, about = "Bidirectional-guided underwater object detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run config; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed and BGDET_SEED.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    A,
    B,
    C,
    D,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    #[value(name = "detect_only", alias = "detect-only")]
    DetectOnly,
    Separate,
    Cascaded,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic underwater dataset.
    Gen {
        #[command(flatten)]
        common: Common,
        /// Replace an existing dataset.
        #[arg(long)]
        force: bool,
    },
    /// Train one stage, or all four in order.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, ignore_case = true)]
        stage: StageArg,
        /// Overrides the guidance weight of the total loss.
        #[arg(long)]
        eta2: Option<f64>,
        /// Continue from the stage's last checkpoint.
        #[arg(long)]
        resume: bool,
        /// Stop after this many epochs.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Evaluate a trained run on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Inference mode; defaults to the config's.
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        /// Run directory holding the stage checkpoints.
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Skip the FPS benchmark.
        #[arg(long)]
        no_fps: bool,
    },
    /// Run a stage-D ablation sweep.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        which: Sweep,
        /// Arms trained concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Gen { common, force } => {
            let cfg = load_config(common.config.as_deref(), common.seed)?;
            let m = cmd_gen(&cfg, force)?;
            println!(
                "dataset {} (seed {}, {} train / {} test, digest {})",
                cfg.dataset.root.display(),
                m.seed,
                m.counts.train,
                m.counts.test,
                m.content_digest
            );
        }
        Command::Train {
            common,
            stage,
            eta2,
            resume,
            stop_after,
        } => {
            let mut cfg = load_config(common.config.as_deref(), common.seed)?;
            if let Some(e) = eta2 {
                cfg.loss.total.eta2 = e;
                cfg.validate()?;
            }
            let stages = match stage {
                StageArg::A => vec![Stage::A],
                StageArg::B => vec![Stage::B],
                StageArg::C => vec![Stage::C],
                StageArg::D => vec![Stage::D],
                StageArg::All => Stage::ALL.to_vec(),
            };
            let opts = TrainOptions {
                resume,
                stop_after,
                ..TrainOptions::default()
            };
            for r in cmd_train(&cfg, &stages, &opts)? {
                println!(
                    "{}: {}/{} epochs, checkpoint {}",
                    r.stage,
                    r.epochs_done,
                    r.stage.plan(&cfg).epochs,
                    r.checkpoint.display()
                );
            }
        }
        Command::Eval {
            common,
            mode,
            weights,
            no_fps,
        } => {
            let cfg = load_config(common.config.as_deref(), common.seed)?;
            let mode = match mode {
                Some(ModeArg::DetectOnly) => InferenceMode::DetectOnly,
                Some(ModeArg::Separate) => InferenceMode::Separate,
                Some(ModeArg::Cascaded) => InferenceMode::Cascaded,
                None => cfg.eval.mode,
            };
            let (r, dir) = cmd_eval(&cfg, mode, weights.as_deref(), !no_fps)?;
            println!(
                "{}: mAP@0.5 {:.4}  mAP@0.5:0.95 {:.4}  P {:.4}  R {:.4}  F1 {:.4}  FPS {:.1}  -> {}",
                mode.as_str(),
                r.map50,
                r.map5095,
                r.precision,
                r.recall,
                r.f1,
                r.fps,
                dir.display()
            );
        }
        Command::Ablate { common, which, jobs } => {
            let cfg = load_config(common.config.as_deref(), common.seed)?;
            let (rows, path) = ablation::cmd_ablate(&cfg, which, jobs)?;
            println!("{}", ablation::CSV_HEADER);
            for r in &rows {
                println!("{}", r.to_csv());
            }
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli).context("bgdet failed") {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<bgdet_core::Error>().map_or(1, |e| e.exit_code());
            ExitCode::from(code as u8)
        }
    }
}
