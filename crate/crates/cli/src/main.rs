use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use boundary_cli::commands::{self, PhaseArg};
use boundary_cli::config::Settings;
use boundary_engine::eval::EvalConfig;
use boundary_engine::model::Model;
use boundary_engine::pipeline::Ablation;
use boundary_engine::synth::SyntheticSpec;

#[derive(Parser)]
#[command(name = "boundary", version, about = "Region boundary estimation: data, training, evaluation and serving")]
struct Cli {
    /// TOML settings file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random choice.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct DataArgs {
    /// Corpus directory.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Number of leading samples used for training.
    #[arg(long)]
    train: Option<usize>,
    /// Number of samples after those used for validation.
    #[arg(long)]
    val: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus.
    Synth {
        #[arg(long, default_value_t = 400)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        min_height: usize,
        #[arg(long, default_value_t = 40)]
        max_height: usize,
        #[arg(long, default_value_t = 6.0)]
        max_aspect: f64,
    },
    /// Train one phase, or the whole pipeline.
    Train {
        #[arg(long, value_enum, default_value = "all")]
        phase: PhaseArg,
        #[command(flatten)]
        data: DataArgs,
        /// Model bundle directory (read for phases 2, 3, classifier; always written).
        #[arg(long)]
        model: Option<PathBuf>,
        /// Where per-phase CSV logs go; defaults to <model>/logs.
        #[arg(long)]
        logs: Option<PathBuf>,
        /// desk, smoke or reference.
        #[arg(long)]
        preset: Option<String>,
    },
    /// Evaluate a model on the test split (or the whole corpus).
    Eval {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value = "report")]
        out: PathBuf,
        /// Score every sample instead of the test split.
        #[arg(long)]
        all: bool,
        /// Points per ground-truth edge for distance measurement.
        #[arg(long, default_value_t = 1)]
        gt_densify: usize,
    },
    /// Predict the region inside one box of an image.
    Infer {
        #[arg(long = "in")]
        input: PathBuf,
        /// x,y,w,h in image pixels.
        #[arg(long)]
        bbox: String,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Run the HTTP inference service.
    Serve {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        host: Option<String>,
        #[arg(long)]
        port: Option<u16>,
    },
    /// Train and evaluate one ablated variant (omit --flag for the baseline).
    Ablate {
        /// no-focal, no-fm-weighting, no-attention, no-agcn, hops-<k>,
        /// interp-1, iterations-1, nodes-<m>, backbone-features, no-finetune
        #[arg(long)]
        flag: Option<String>,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value = "ablations")]
        out: PathBuf,
        #[arg(long)]
        preset: Option<String>,
    },
}

fn splits(s: &Settings, d: DataArgs) -> Result<commands::Splits, String> {
    commands::load_splits(
        &s.corpus_dir(d.corpus),
        d.train.or(s.train).unwrap_or(300),
        d.val.or(s.val).unwrap_or(50),
    )
}

fn run(cli: Cli) -> Result<(), String> {
    let settings = Settings::load(cli.config.as_deref())?;
    let seed = cli.seed;
    match cli.command {
        Command::Synth {
            count,
            out,
            min_height,
            max_height,
            max_aspect,
        } => {
            let spec = SyntheticSpec {
                count,
                min_height,
                max_height,
                max_aspect,
                ..SyntheticSpec::default()
            };
            commands::synth(&spec, seed.or(settings.seed).unwrap_or(0), &out)
        }
        Command::Train {
            phase,
            data,
            model,
            logs,
            preset,
        } => {
            let cfg = settings.pipeline(preset.as_deref(), seed)?;
            let dir = settings.model_dir(model);
            let logs = logs.unwrap_or_else(|| commands::default_logs(&dir));
            commands::train(phase, &splits(&settings, data)?, &cfg, &dir, &logs)
        }
        Command::Eval {
            data,
            model,
            out,
            all,
            gt_densify,
        } => {
            let s = splits(&settings, data)?;
            let samples = if all {
                [s.train, s.val, s.test].concat()
            } else {
                s.test
            };
            let cfg = EvalConfig {
                gt_densify,
                ..EvalConfig::default()
            };
            commands::eval(&settings.model_dir(model), &samples, &out, &cfg).map(drop)
        }
        Command::Infer {
            input,
            bbox,
            out,
            model,
        } => {
            let dir = settings.model_dir(model);
            let m = Model::load(&dir).map_err(|e| format!("cannot load model from {}: {e}", dir.display()))?;
            let json = commands::infer(&m, &input, commands::parse_bbox(&bbox)?)?;
            match out {
                Some(p) => std::fs::write(&p, json).map_err(|e| format!("{}: {e}", p.display())),
                None => {
                    println!("{json}");
                    Ok(())
                }
            }
        }
        Command::Serve { model, host, port } => {
            let dir = settings.model_dir(model);
            let host = host.or(settings.host.clone()).unwrap_or_else(|| "127.0.0.1".into());
            let port = port.or(settings.port).unwrap_or(8080);
            let rt = tokio::runtime::Runtime::new().map_err(|e| e.to_string())?;
            rt.block_on(commands::serve(&dir, &host, port))
        }
        Command::Ablate {
            flag,
            data,
            out,
            preset,
        } => {
            let flag = flag.map(|f| f.parse::<Ablation>()).transpose().map_err(|e| e.to_string())?;
            let cfg = settings.pipeline(preset.as_deref(), seed)?;
            commands::ablate(flag, &splits(&settings, data)?, cfg, &out).map(drop)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
