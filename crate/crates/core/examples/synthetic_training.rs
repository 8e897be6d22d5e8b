//! Generates the synthetic corpus, trains with two relation-graph
//! iterations and without any, and compares role mAP, overall and on the
//! scenes that need context to disambiguate.
//!
//! cargo run --release --example synthetic_training [-- <output dir>]

use std::path::PathBuf;

use drg::pipeline::synth::SynthConfig;
use drg::pipeline::{
    cmd_eval, cmd_gen_synth, cmd_infer, cmd_train, ConfigOverrides, EvalArgs, GenArgs, InferArgs,
    RunConfig, TrainArgs,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let tmp = tempfile::tempdir()?;
    let dir = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| tmp.path().to_path_buf());
    std::fs::create_dir_all(&dir)?;
    let paths = cmd_gen_synth(&GenArgs { synth: SynthConfig::default(), output_dir: dir.clone() })?;
    let base = RunConfig::load(&dir.join("config.json"))?;

    for iters in [2, 0] {
        let mut cfg = base.clone();
        ConfigOverrides { iters_human: Some(iters), iters_object: Some(iters), ..Default::default() }
            .apply(&mut cfg)?;
        let ckpt = dir.join(format!("drg{iters}.ckpt"));
        let started = std::time::Instant::now();
        let out = cmd_train(&TrainArgs {
            detections: paths.train_detections.clone(),
            appearance: paths.train_appearance.clone(),
            annotations: paths.train_annotations.clone(),
            embeddings: paths.embeddings.clone(),
            config: cfg.clone(),
            output: ckpt.clone(),
            loss_csv: Some(dir.join(format!("drg{iters}_loss.csv"))),
        })?;
        let preds = dir.join(format!("drg{iters}_predictions.json"));
        cmd_infer(&InferArgs {
            detections: paths.test_detections.clone(),
            appearance: paths.test_appearance.clone(),
            checkpoint: ckpt,
            features: None,
            embeddings: Some(paths.embeddings.clone()),
            config: cfg.clone(),
            output: preds.clone(),
        })?;
        let map = |subset: Option<&str>| {
            cmd_eval(&EvalArgs {
                predictions: preds.clone(),
                groundtruth: paths.test_annotations.clone(),
                config: cfg.clone(),
                class_map: None,
                subset: subset.map(String::from),
                output: None,
            })
            .map(|r| r.mean_ap)
        };
        println!(
            "{iters} iterations: {} epochs in {:.1}s, role mAP {:.4}, context scenes {:.4}",
            out.history.len(),
            started.elapsed().as_secs_f64(),
            map(None)?,
            map(Some("context"))?
        );
    }
    Ok(())
}
