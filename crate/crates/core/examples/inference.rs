//! Scores every human-object pair of one image and prints the top triplets.
//!
//! cargo run --example inference

use drg::geometry::{BBox, Detection};
use drg::model::{infer_image, ImageInput, Model, NodeSource};
use drg::pipeline::RunConfig;
use drg::spatial_semantic::EmbeddingTable;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> drg::Result<()> {
    let cfg = RunConfig::synthetic();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let model = Model::init(cfg.model, cfg.profile.catalog.clone(), &mut rng)?;
    let mut table = EmbeddingTable::new(cfg.model.embed_dim);
    for (k, c) in ["ball", "racket", "chair"].iter().enumerate() {
        table.insert(*c, (0..cfg.model.embed_dim).map(|i| ((i + 3 * k) as f64).cos()).collect())?;
    }

    let humans = vec![Detection::new(BBox::new(100.0, 50.0, 180.0, 300.0)?, "person", 0.95)?];
    let objects = vec![
        Detection::new(BBox::new(170.0, 150.0, 200.0, 180.0)?, "ball", 0.8)?,
        Detection::new(BBox::new(90.0, 220.0, 190.0, 330.0)?, "chair", 0.6)?,
    ];
    let app = |s: f64| (0..cfg.model.appearance_dim).map(|i| s * (i as f64 + 1.0).sin()).collect::<Vec<f64>>();
    let input = ImageInput {
        humans: &humans,
        objects: &objects,
        human_appearance: &[app(1.0)],
        object_appearance: &[app(0.5), app(-0.5)],
    };
    // An untrained model: the scores only show the shape of the output.
    let mut triplets = infer_image(&model, 7, &input, NodeSource::Compute(&table))?;
    triplets.sort_by(|a, b| b.score.total_cmp(&a.score));
    for t in triplets.iter().take(6) {
        println!(
            "{:<7} {:<7} {:.4}",
            model.catalog.name(t.action),
            t.object_category.as_deref().unwrap_or("-"),
            t.score
        );
    }
    println!("{} triplets in total", triplets.len());
    Ok(())
}
