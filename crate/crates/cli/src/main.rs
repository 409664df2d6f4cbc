//! `mvedit`: synthesize data, train the toy denoiser, edit, reconstruct,
//! evaluate and export turntables.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::{EvalInputs, Failure, Outcome};
use config::CliConfig;

#[derive(Parser)]
#[command(name = "mvedit", version, about = "Multi-view consistent garment editing", after_help = config::help_text())]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON config file; keys listed below.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides `seed` and `train.seed`.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Sets one config key, e.g. `--set edit_fit.iters=50`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset (one directory per subject).
    #[command(after_help = config::help_text())]
    Synth {
        #[arg(long)]
        subjects: Option<usize>,
        /// Cameras per subject.
        #[arg(long)]
        views: Option<usize>,
    },
    /// Train the denoiser: single-view stage, then multi-view stage.
    #[command(after_help = config::help_text())]
    Train {
        #[arg(long, value_name = "DIR")]
        dataset: PathBuf,
        /// Continue from a checkpoint; its loss trace is read from the same directory.
        #[arg(long, value_name = "PATH")]
        resume: Option<PathBuf>,
        #[arg(long)]
        single_view_steps: Option<usize>,
        #[arg(long)]
        multi_view_steps: Option<usize>,
        /// `rotation` or `identity`.
        #[arg(long)]
        correlation: Option<String>,
    },
    /// Render a subject's test views and edit them with a trained model.
    #[command(after_help = config::help_text())]
    Edit {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "DIR")]
        dataset: PathBuf,
        /// Subject index in the dataset.
        #[arg(long, default_value_t = 0)]
        subject: usize,
        #[arg(long)]
        ddim_steps: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
    },
    /// Fit the source cloud and the edited cloud from an `edit` output.
    #[command(after_help = config::help_text())]
    Reconstruct {
        #[arg(long, value_name = "DIR")]
        edits: PathBuf,
        #[arg(long)]
        z_threshold: Option<f64>,
    },
    /// Score an edited cloud against its source cloud on a turntable.
    #[command(after_help = config::help_text())]
    Eval {
        /// A `reconstruct` output (source.gspl, cloud.gspl, fit.json).
        #[arg(long, value_name = "DIR")]
        recon: Option<PathBuf>,
        /// Source cloud; overrides the one in --recon.
        #[arg(long, value_name = "PATH")]
        source: Option<PathBuf>,
        /// Edited cloud; overrides the one in --recon.
        #[arg(long, value_name = "PATH")]
        cloud: Option<PathBuf>,
        /// An `edit` output, for the garment images.
        #[arg(long, value_name = "DIR")]
        edits: Option<PathBuf>,
        /// Precomputed embeddings file used instead of the toy embedder.
        #[arg(long, value_name = "PATH")]
        embeddings: Option<PathBuf>,
        #[arg(long)]
        eval_views: Option<usize>,
    },
    /// Render an orbit of a cloud as a PPM sequence.
    #[command(after_help = config::help_text())]
    Turntable {
        #[arg(long, value_name = "PATH")]
        cloud: PathBuf,
        #[arg(long)]
        frames: Option<usize>,
    },
}

fn load_config(common: &Common) -> Result<CliConfig, Failure> {
    let mut cfg = config::load(common.config.as_deref(), &common.sets).map_err(Failure::Config)?;
    if let Some(s) = common.seed {
        cfg.pipeline.seed = s;
        cfg.pipeline.train.seed = s;
    }
    Ok(cfg)
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn run(cli: Cli) -> Outcome {
    let mut cfg = load_config(&cli.common)?;
    let out = cli
        .common
        .out
        .clone()
        .ok_or_else(|| Failure::Config(anyhow::anyhow!("--out is required")))?;
    match &cli.command {
        Command::Synth { subjects, views } => {
            set(&mut cfg.subjects, *subjects);
            set(&mut cfg.views, *views);
        }
        Command::Train {
            single_view_steps,
            multi_view_steps,
            correlation,
            ..
        } => {
            set(&mut cfg.pipeline.single_view_steps, *single_view_steps);
            set(&mut cfg.pipeline.multi_view_steps, *multi_view_steps);
            if let Some(c) = correlation {
                cfg.pipeline.model.correlation = serde_json::from_value(serde_json::Value::String(c.clone()))
                    .map_err(|_| Failure::Config(anyhow::anyhow!("unknown correlation {c:?}")))?;
            }
        }
        Command::Edit { ddim_steps, batch_size, .. } => {
            set(&mut cfg.pipeline.ddim_steps, *ddim_steps);
            set(&mut cfg.pipeline.batch_size, *batch_size);
        }
        Command::Reconstruct { z_threshold, .. } => set(&mut cfg.pipeline.z_threshold, *z_threshold),
        Command::Eval { eval_views, .. } => set(&mut cfg.pipeline.eval_views, *eval_views),
        Command::Turntable { frames, .. } => set(&mut cfg.turntable_frames, *frames),
    }
    // the edit command validates against the checkpoint's model instead
    if !matches!(cli.command, Command::Edit { .. }) {
        cfg.pipeline.validate().map_err(|e| Failure::Config(e.into()))?;
    }
    match &cli.command {
        Command::Synth { .. } => commands::synth(&cfg, &out),
        Command::Train { dataset, resume, .. } => commands::train(&cfg, dataset, resume.as_deref(), &out),
        Command::Edit {
            checkpoint,
            dataset,
            subject,
            ..
        } => commands::edit(&cfg, checkpoint, dataset, *subject, &out),
        Command::Reconstruct { edits, .. } => commands::reconstruct_cmd(&cfg, edits, &out),
        Command::Eval {
            recon,
            source,
            cloud,
            edits,
            embeddings,
            ..
        } => {
            let from_recon = |name: &str| recon.as_ref().map(|r| r.join(name));
            let source = source
                .clone()
                .or_else(|| from_recon("source.gspl"))
                .ok_or_else(|| Failure::Config(anyhow::anyhow!("eval needs --recon or --source")))?;
            let cloud = cloud
                .clone()
                .or_else(|| from_recon("cloud.gspl"))
                .ok_or_else(|| Failure::Config(anyhow::anyhow!("eval needs --recon or --cloud")))?;
            let inputs = EvalInputs {
                source,
                cloud,
                fit: from_recon("fit.json"),
                edits: edits.as_deref(),
                embeddings: embeddings.as_deref(),
            };
            commands::eval(&cfg, &inputs, &out)
        }
        Command::Turntable { cloud, .. } => commands::turntable(&cfg, cloud, &out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("config error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
