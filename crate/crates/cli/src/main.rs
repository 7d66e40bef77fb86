use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use streamseg::app::{
    cmd_ablate, cmd_cost, cmd_eval, cmd_generate, cmd_render, cmd_train, AblateArgs, EvalArgs, EvalSource, RenderArgs,
    TrainArgs, ABLATION_MODES,
};
use streamseg::config::RunConfig;
use streamseg::ensemble::EnsembleMode;
use streamseg::metrics::EvalConfig;
use streamseg::volume::{PhantomSpec, Shape3};
use streamseg::{Error, Result};

#[derive(Parser)]
#[command(name = "streamseg", version, about = "Ensemble slice segmentation of cardiac cine frames")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Fixed,
    Uncertainty,
    Stacking,
    Bagging,
    Augmenting,
}

impl From<Mode> for EnsembleMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Fixed => EnsembleMode::Fixed,
            Mode::Uncertainty => EnsembleMode::Uncertainty,
            Mode::Stacking => EnsembleMode::Stacking,
            Mode::Bagging => EnsembleMode::Bagging,
            Mode::Augmenting => EnsembleMode::Augmenting,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic phantom dataset.
    Generate {
        /// Phantom parameters (TOML); defaults apply when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        count: usize,
        /// Overrides the seed in the spec.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the configured ensemble.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a trained model or saved predictions against labelled frames.
    Eval {
        #[arg(long, required_unless_present = "predictions", conflicts_with = "predictions")]
        checkpoint: Option<PathBuf>,
        /// Directory of `<frame_id>.pvol` predicted masks.
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Pool with this strategy instead of the trained one.
        #[arg(long, value_enum, requires = "checkpoint")]
        mode: Option<Mode>,
        /// Evaluate a single member alone.
        #[arg(long, requires = "checkpoint")]
        member: Option<usize>,
        /// Evaluation settings (TOML `[eval]` table keys).
        #[arg(long)]
        eval_config: Option<PathBuf>,
        #[arg(long)]
        save_predictions: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Overlay and uncertainty figures of one frame.
    Render {
        /// Frame id in --data, or a portable-volume file.
        #[arg(long)]
        frame: String,
        /// Trained model holding the members.
        #[arg(long, alias = "checkpoint")]
        members: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Parameter and FLOP counts of the configured ensemble.
    Cost {
        #[arg(long)]
        config: PathBuf,
        /// Frame shape as DxHxW; defaults to the configured data shape.
        #[arg(long, value_parser = parse_shape)]
        frame_shape: Option<Shape3>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and score every strategy with 1 to N members.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long, default_value_t = 4)]
        max_members: usize,
        /// Strategies to run; all when omitted.
        #[arg(long, value_enum, value_delimiter = ',')]
        modes: Vec<Mode>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_shape(s: &str) -> std::result::Result<Shape3, String> {
    let dims: Vec<usize> = s
        .split(['x', ','])
        .map(|p| p.trim().parse().map_err(|_| format!("bad dimension `{p}`")))
        .collect::<std::result::Result<_, _>>()?;
    match dims[..] {
        [d, h, w] if d > 0 && h > 0 && w > 0 => Ok(Shape3::new(d, h, w)),
        _ => Err(format!("expected DxHxW, got `{s}`")),
    }
}

fn read_toml<T: serde::de::DeserializeOwned>(path: &PathBuf) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("reading {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn run(cli: Cli) -> Result<()> {
    let log = |line: &str| eprintln!("{line}");
    match cli.command {
        Command::Generate { spec, count, seed, out } => {
            let spec: PhantomSpec = spec.as_ref().map(read_toml).transpose()?.unwrap_or_default();
            let m = cmd_generate(&spec, count, seed, &out)?;
            eprintln!("wrote {} files to {}", m.outputs.len(), out.display());
        }
        Command::Train { config, data, out, resume } => {
            let config = RunConfig::load(&config)?;
            cmd_train(&TrainArgs { config, data, out, resume }, log)?;
        }
        Command::Eval { checkpoint, predictions, data, mode, member, eval_config, save_predictions, out } => {
            let source = match (checkpoint, predictions) {
                (Some(path), _) => EvalSource::Checkpoint { path, mode: mode.map(Into::into), member },
                (None, Some(dir)) => EvalSource::Predictions(dir),
                (None, None) => unreachable!("clap requires one source"),
            };
            let eval: Option<EvalConfig> = eval_config.as_ref().map(read_toml).transpose()?;
            if let Some(e) = &eval {
                e.validate()?;
            }
            let (report, _) = cmd_eval(&EvalArgs { source, data, out, eval, save_predictions })?;
            let a = &report.aggregate;
            println!("frames {} avg_dsc {:.4} ec {:.4}", a.frames, a.average_dsc, a.ec);
        }
        Command::Render { frame, members, data, out } => {
            let (summary, _) = cmd_render(&RenderArgs { checkpoint: members, frame, data, out: out.clone() })?;
            eprintln!("rendered {} slices of {} to {}", summary.slices.len(), summary.frame_id, out.display());
        }
        Command::Cost { config, frame_shape, out } => {
            let config = RunConfig::load(&config)?;
            let (report, _) = cmd_cost(&config, frame_shape, &out)?;
            println!("params {} flops {}", report.total_params, report.total_flops);
        }
        Command::Ablate { config, train, test, max_members, modes, out } => {
            let config = RunConfig::load(&config)?;
            let modes = if modes.is_empty() { ABLATION_MODES.to_vec() } else { modes.into_iter().map(Into::into).collect() };
            cmd_ablate(&AblateArgs { config, train, test, out, max_members, modes }, log)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
