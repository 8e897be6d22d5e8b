//! Saves a freshly initialized model with optimizer state and loads it back.
//!
//! cargo run --example checkpoint

use drg::checkpoint::{load_checkpoint, save_checkpoint};
use drg::model::Model;
use drg::pipeline::RunConfig;
use drg::training::OptimState;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = RunConfig::synthetic();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let model = Model::init(cfg.model, cfg.profile.catalog.clone(), &mut rng)?;
    let optim = OptimState::new(&model.params, cfg.train.sgd);

    let dir = tempfile::tempdir()?;
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&path, &model, Some(&optim), &cfg.hash())?;
    println!("wrote {} bytes to {}", std::fs::metadata(&path)?.len(), path.display());

    let back = load_checkpoint(&path)?;
    println!("config hash {}", back.meta.config_hash);
    for (name, t) in back.model.params.named() {
        println!("  {name:<28} {:?}", t.shape());
    }
    assert_eq!(back.model.params, model.params);
    assert!(back.optim.is_some());
    println!("{} parameters restored exactly", back.model.params.parameter_count());
    Ok(())
}
