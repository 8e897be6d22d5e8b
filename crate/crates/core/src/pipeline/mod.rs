//! File formats, configuration and the batch commands behind the `drg`
//! binary.

pub mod commands;
pub mod config;
pub mod schema;
pub mod synth;

pub use commands::{
    cmd_eval, cmd_featurize, cmd_gen_synth, cmd_infer, cmd_train, EvalArgs, FeaturizeArgs,
    GenArgs, InferArgs, TrainArgs,
};
pub use config::{ConfigOverrides, DatasetProfile, RunConfig};
