//! Finite-difference check of the training loss gradient through the whole
//! model: pair rasters, ConvNet, both relation subgraphs and all heads.
//!
//! cargo run --example gradient_check

use drg::geometry::{BBox, Detection};
use drg::model::{Model, ModelConfig};
use drg::numkernel::{finite_diff_check, FnObjective};
use drg::spatial_semantic::{EmbeddingTable, SpatialConfig};
use drg::streams::ActionCatalog;
use drg::training::{image_loss_and_grad, TrainImage};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> drg::Result<()> {
    let cfg = ModelConfig {
        spatial: SpatialConfig { raster: 12, conv1_channels: 2, conv1_kernel: 5, conv2_channels: 2, conv2_kernel: 3 },
        embed_dim: 4,
        appearance_dim: 3,
        key_dim: 4,
        hidden: 5,
        iters_human: 2,
        iters_object: 2,
        human_graph: true,
        object_graph: true,
    };
    let catalog = ActionCatalog::synthetic();
    let a = catalog.len();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut model = Model::init(cfg, catalog, &mut rng)?;

    let mut table = EmbeddingTable::new(4);
    table.insert("person", vec![0.1, -0.2, 0.3, 0.0])?;
    table.insert("ball", vec![0.5, 0.4, -0.1, 0.2])?;
    table.insert("racket", vec![-0.3, 0.1, 0.2, 0.6])?;
    let det = |x: f64, y: f64, w: f64, h: f64, c: &str, s: f64| Detection::new(BBox::new(x, y, x + w, y + h).unwrap(), c, s).unwrap();
    let mut pair_labels = vec![vec![0.0; a]; 4];
    pair_labels[0][catalog_index(&model, "hold")] = 1.0;
    pair_labels[3][catalog_index(&model, "swing")] = 1.0;
    let mut human_labels = vec![vec![0.0; a]; 2];
    human_labels[1][catalog_index(&model, "stand")] = 1.0;
    let image = TrainImage {
        id: 1,
        humans: vec![det(0.0, 0.0, 30.0, 80.0, "person", 0.9), det(50.0, 5.0, 30.0, 75.0, "person", 0.7)],
        objects: vec![det(25.0, 30.0, 12.0, 12.0, "ball", 0.8), det(75.0, 20.0, 10.0, 35.0, "racket", 0.6)],
        human_appearance: vec![vec![0.2, -0.1, 0.4], vec![-0.3, 0.5, 0.1]],
        object_appearance: vec![vec![0.0, 0.3, -0.2], vec![0.6, -0.4, 0.2]],
        pair_labels,
        human_labels,
    };

    let theta = model.params.flatten();
    let mut f = FnObjective(|p: &[f64]| {
        model.params.assign_flat(p).unwrap();
        let (loss, g) = image_loss_and_grad(&model, &image, &table).unwrap();
        (loss, g.flatten())
    });
    let r = finite_diff_check(&mut f, &theta, 1e-5)?;
    println!(
        "{} parameters, max relative error {:.2e} (at parameter {})",
        r.parameter_count, r.max_relative_error, r.worst_index
    );
    Ok(())
}

fn catalog_index(model: &Model, name: &str) -> usize {
    model.catalog.index_of(name).unwrap()
}
