use std::path::PathBuf;
use std::process::ExitCode;

use acv_cli::commands;
use acv_cli::{CliError, Precision, Result, RunConfig};
use acv_core::evalio::DataSpec;
use acv_core::selftest::SelfTestOptions;
use acv_core::{PipelineConfig, TrainPlan};
use clap::{Args, Parser, Subcommand, ValueEnum};

/// Attention concatenation volume stereo matching.
///
/// Settings come from built-in defaults, then `--config`, then flags.
/// Log verbosity is read from ACV_LOG (error, warn, info, debug, trace).
#[derive(Parser)]
#[command(name = "acvnet", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Network dimensions; replaces the configured pipeline.
    #[arg(long, global = true, value_enum)]
    preset: Option<Preset>,
    /// acvnet, acvnet-fast or concat-baseline.
    #[arg(long, global = true)]
    model: Option<String>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    precision: Option<Precision>,
    /// Read samples from this directory instead of the configured data.
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    DeskRds,
    PaperShapes,
    /// Smallest network, for smoke tests.
    Tiny,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes checkpoint.acv, loss.log and config.json.
    Train {
        /// Replace the configured plan with a single stage of this many steps.
        #[arg(long)]
        steps: Option<usize>,
        /// Learning rate of that single stage.
        #[arg(long, default_value_t = 1e-3, requires = "steps")]
        lr: f64,
    },
    /// Evaluate a checkpoint; writes disparity PFM/PNG files and report.json.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Predict the disparity of one image pair.
    Infer {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        left: PathBuf,
        #[arg(long)]
        right: PathBuf,
    },
    /// Run the operator and invariant self-test suites.
    Selftest {
        /// Random instances per operator.
        #[arg(long, default_value_t = 50)]
        instances: usize,
        /// Corrupt the patch-volume normalisation to confirm the suite notices.
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Finite-difference gradient checks of every differentiable op.
    Gradcheck,
    /// SAD block matching with winner-take-all.
    Baseline {
        /// Odd window side length.
        #[arg(long, default_value_t = 5)]
        window: usize,
        /// Disparities searched; defaults to the pipeline's maximum.
        #[arg(long)]
        max_disp: Option<usize>,
    },
    /// Write the configured synthetic data as image/PFM files.
    GenData,
}

fn resolve(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(p) = common.preset {
        cfg.pipeline = match p {
            Preset::DeskRds => PipelineConfig::desk(),
            Preset::PaperShapes => PipelineConfig::paper_shapes(),
            Preset::Tiny => PipelineConfig::tiny(),
        };
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(m) = &common.model {
        cfg.model = m.clone();
    }
    if let Some(o) = &common.out {
        cfg.out_dir = o.clone();
    }
    if let Some(p) = common.precision {
        cfg.precision = p;
    }
    if let Some(d) = &common.data_dir {
        cfg.data = DataSpec::Directory { path: d.clone() };
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = resolve(&cli.common)?;
    let mut stdout = std::io::stdout().lock();
    match cli.command {
        Command::Train { steps, lr } => {
            if let Some(n) = steps {
                cfg.train = TrainPlan::single(n, lr);
            }
            let s = commands::train(&cfg)?;
            let loss = s.final_loss.map_or("-".to_string(), |l| format!("{l:.6}"));
            println!("{} steps, final loss {loss}, checkpoint {}", s.steps, s.checkpoint.display());
        }
        Command::Eval { checkpoint } => {
            cfg.checkpoint = checkpoint.or(cfg.checkpoint);
            print!("{}", commands::eval(&cfg)?.text());
        }
        Command::Infer { checkpoint, left, right } => {
            cfg.checkpoint = checkpoint.or(cfg.checkpoint);
            let d = commands::infer(&cfg, &left, &right)?;
            println!("{}x{} disparity written to {}", d.shape()[1], d.shape()[0], cfg.out_dir.display());
        }
        Command::Selftest { instances, inject_fault } => {
            let opts = SelfTestOptions {
                seed: cfg.seed,
                instances,
                patch_norm_divisor: inject_fault.then_some(3.0),
            };
            commands::selftest(&opts, &mut stdout)?;
        }
        Command::Gradcheck => commands::gradcheck(cfg.seed, &mut stdout)?,
        Command::Baseline { window, max_disp } => {
            let d = max_disp.unwrap_or(cfg.pipeline.max_disp);
            print!("{}", commands::baseline(&cfg, window, d)?.text());
        }
        Command::GenData => {
            let n = commands::gen_data(&cfg)?;
            println!("{n} samples written to {}", cfg.out_dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("ACV_LOG", "info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Failed(msg)) => {
            eprintln!("{msg}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
