//! Rasterizes a human/object pair and builds its node feature.
//!
//! cargo run --example spatial_map

use drg::geometry::{rasterize_pair, BBox, Detection};
use drg::spatial_semantic::{build_feature, EmbeddingTable, SpatialConfig, SpatialConvParams};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> drg::Result<()> {
    let human = Detection::new(BBox::new(40.0, 20.0, 120.0, 260.0)?, "person", 0.97)?;
    let cup = Detection::new(BBox::new(110.0, 120.0, 150.0, 170.0)?, "cup", 0.83)?;

    let map = rasterize_pair(&human.bbox, &cup.bbox, 16)?;
    println!("16x16 interaction pattern (H human, O object, # both):");
    let (h, o) = (map.channel(0), map.channel(1));
    for r in 0..16 {
        let row: String = (0..16)
            .map(|c| match (h[r * 16 + c] > 0.0, o[r * 16 + c] > 0.0) {
                (true, true) => '#',
                (true, false) => 'H',
                (false, true) => 'O',
                _ => '.',
            })
            .collect();
        println!("  {row}");
    }

    // The default stack maps 64x64 patterns to 5408 values; a 300-d word
    // vector for the object category is appended.
    let cfg = SpatialConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let params = SpatialConvParams::init(&cfg, &mut rng);
    let mut table = EmbeddingTable::new(300);
    table.insert("cup", (0..300).map(|k| (k as f64 * 0.01).sin()).collect())?;
    let f = build_feature(&human, &cup, &table, &params, &cfg)?;
    println!(
        "feature: {} values = {} spatial + {} embedding",
        f.len(),
        f.spatial().len(),
        f.embedding().len()
    );
    Ok(())
}
