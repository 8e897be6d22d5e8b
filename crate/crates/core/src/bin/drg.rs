//! Command-line front end. Exit codes: 0 success, 2 input error,
//! 3 configuration/checkpoint mismatch, 4 numeric failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use drg::pipeline::commands::format_report;
use drg::pipeline::synth::SynthConfig;
use drg::pipeline::{
    cmd_eval, cmd_featurize, cmd_gen_synth, cmd_infer, cmd_train, ConfigOverrides, EvalArgs,
    FeaturizeArgs, GenArgs, InferArgs, RunConfig, TrainArgs,
};

#[derive(Parser)]
#[command(name = "drg", version, about = "Human-object interaction scoring with a dual relation graph")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Dataset profile: vcoco, hico or synthetic.
    #[arg(long, default_value = "vcoco")]
    profile: String,
    /// JSON run configuration; replaces the profile defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    iters_human: Option<usize>,
    #[arg(long)]
    iters_object: Option<usize>,
    #[arg(long)]
    disable_human_graph: bool,
    #[arg(long)]
    disable_object_graph: bool,
    #[arg(long)]
    human_thresh: Option<f64>,
    #[arg(long)]
    object_thresh: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn resolve(&self) -> drg::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::named(&self.profile)?,
        };
        ConfigOverrides {
            iters_human: self.iters_human,
            iters_object: self.iters_object,
            disable_human_graph: self.disable_human_graph,
            disable_object_graph: self.disable_object_graph,
            human_score_thresh: self.human_thresh,
            object_score_thresh: self.object_thresh,
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            max_epochs: self.epochs,
            patience: self.patience,
            seed: self.seed,
        }
        .apply(&mut cfg)?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Compute node features for every human-object pair.
    Featurize {
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, short)]
        output: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Score interactions with a trained checkpoint.
    Infer {
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        appearance: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, conflicts_with = "embeddings")]
        features: Option<PathBuf>,
        #[arg(long)]
        embeddings: Option<PathBuf>,
        #[arg(long, short)]
        output: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train a checkpoint and write its loss curve.
    Train {
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        appearance: PathBuf,
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long, short)]
        output: PathBuf,
        #[arg(long)]
        loss_csv: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Role mAP of a prediction file.
    Eval {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        groundtruth: PathBuf,
        #[arg(long)]
        class_map: Option<PathBuf>,
        /// Only images carrying this tag.
        #[arg(long)]
        subset: Option<String>,
        #[arg(long, short)]
        output: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Generate the synthetic corpus.
    GenSynth {
        #[arg(long)]
        seed: u64,
        #[arg(long, short)]
        output: PathBuf,
        #[arg(long, default_value_t = 200)]
        n_train: usize,
        #[arg(long, default_value_t = 50)]
        n_test: usize,
        #[arg(long, default_value_t = 0.3)]
        context_fraction: f64,
    },
}

fn run(cli: Cli) -> drg::Result<()> {
    match cli.command {
        Command::Featurize {
            detections,
            embeddings,
            checkpoint,
            output,
            cfg,
        } => {
            let meta = cmd_featurize(&FeaturizeArgs {
                detections,
                embeddings,
                checkpoint,
                config: cfg.resolve()?,
                output,
            })?;
            println!("featurized {} images", meta.images.len());
        }
        Command::Infer {
            detections,
            appearance,
            checkpoint,
            features,
            embeddings,
            output,
            cfg,
        } => {
            let p = cmd_infer(&InferArgs {
                detections,
                appearance,
                checkpoint,
                features,
                embeddings,
                config: cfg.resolve()?,
                output,
            })?;
            println!("{} predictions", p.predictions.len());
        }
        Command::Train {
            detections,
            appearance,
            annotations,
            embeddings,
            output,
            loss_csv,
            cfg,
        } => {
            let out = cmd_train(&TrainArgs {
                detections,
                appearance,
                annotations,
                embeddings,
                config: cfg.resolve()?,
                output,
                loss_csv,
            })?;
            println!("trained {} epochs, kept epoch {}", out.history.len(), out.best_epoch);
        }
        Command::Eval {
            predictions,
            groundtruth,
            class_map,
            subset,
            output,
            cfg,
        } => {
            let r = cmd_eval(&EvalArgs {
                predictions,
                groundtruth,
                config: cfg.resolve()?,
                class_map,
                subset,
                output: Some(output),
            })?;
            print!("{}", format_report(&r));
        }
        Command::GenSynth {
            seed,
            output,
            n_train,
            n_test,
            context_fraction,
        } => {
            cmd_gen_synth(&GenArgs {
                synth: SynthConfig {
                    seed,
                    n_train,
                    n_test,
                    context_fraction,
                    ..SynthConfig::default()
                },
                output_dir: output.clone(),
            })?;
            println!("wrote corpus to {}", output.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
