//! Builds the pair graph for a small scene and runs both subgraphs.
//!
//! cargo run --example relation_graph

use drg::drg::{aggregate_once_forward, build_graph, run_drg, DrgParams, SubgraphKind};
use drg::geometry::{BBox, Detection};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> drg::Result<()> {
    let humans = vec![
        Detection::new(BBox::new(0.0, 0.0, 50.0, 150.0)?, "person", 0.9)?,
        Detection::new(BBox::new(120.0, 0.0, 170.0, 150.0)?, "person", 0.8)?,
    ];
    let objects = vec![
        Detection::new(BBox::new(40.0, 60.0, 70.0, 90.0)?, "ball", 0.7)?,
        Detection::new(BBox::new(90.0, 100.0, 130.0, 150.0)?, "chair", 0.6)?,
        Detection::new(BBox::new(160.0, 60.0, 190.0, 90.0)?, "cup", 0.5)?,
    ];
    // Any pair featurizer works; here a toy 4-d geometric summary.
    let graph = build_graph(&humans, &objects, |h, o| {
        let (hx, hy) = h.bbox.center();
        let (ox, oy) = o.bbox.center();
        Ok(vec![(ox - hx) / 100.0, (oy - hy) / 100.0, o.bbox.area() / 1e3, o.score])
    })?
    .expect("both lists are non-empty");

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut params = DrgParams::init(4, 3, &mut rng);
    for kind in SubgraphKind::BOTH {
        params.get_mut(kind).w_q.data_mut().iter_mut().for_each(|v| *v *= rng.random_range(1.0..4.0));
    }

    for kind in SubgraphKind::BOTH {
        println!("{}-centric attention:", kind.name());
        let (_, cache) = aggregate_once_forward(&graph.nodes, kind, &params)?;
        for n in 0..graph.nodes.n_nodes() {
            let (i, j) = (n / objects.len(), n % objects.len());
            match cache.attention(n) {
                Some((nbrs, alpha)) => {
                    let parts: Vec<String> = nbrs
                        .iter()
                        .zip(alpha)
                        .map(|(m, a)| format!("(h{}, {}) {:.3}", m / objects.len(), objects[m % objects.len()].category, a))
                        .collect();
                    println!("  (h{i}, {}) <- {}", objects[j].category, parts.join(", "));
                }
                None => println!("  (h{i}, {}) has no neighbors", objects[j].category),
            }
        }
    }

    let (h_out, o_out) = run_drg(&graph, &params, 2, 2)?;
    println!("after two iterations, node (h0, ball):");
    println!("  human-centric  {:?}", round(h_out.node(0, 0)));
    println!("  object-centric {:?}", round(o_out.node(0, 0)));
    Ok(())
}

fn round(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| (x * 1e4).round() / 1e4).collect()
}
