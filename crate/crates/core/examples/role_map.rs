//! Scores a handful of predicted triplets against ground truth.
//!
//! cargo run --example role_map

use drg::evaluation::{role_map, GroundTruthTriplet, PredictionTriplet, DEFAULT_IOU_THRESHOLD};
use drg::geometry::BBox;
use drg::streams::ActionCatalog;

fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
    BBox::new(x1, y1, x2, y2).unwrap()
}

fn main() {
    let catalog = ActionCatalog::synthetic();
    let hold = catalog.index_of("hold").unwrap();
    let stand = catalog.index_of("stand").unwrap();
    let person = b(0.0, 0.0, 40.0, 100.0);
    let cup = b(35.0, 40.0, 50.0, 55.0);

    let gts = vec![
        GroundTruthTriplet { image_id: 1, human_box: person, action: hold, object_box: Some(cup), object_category: Some("cup".into()) },
        GroundTruthTriplet { image_id: 1, human_box: person, action: stand, object_box: None, object_category: None },
    ];
    let p = |score: f64, action: usize, human_box: BBox, object_box: Option<BBox>| PredictionTriplet {
        image_id: 1,
        human_box,
        action,
        object_box,
        object_category: object_box.map(|_| "cup".to_string()),
        score,
    };
    let preds = vec![
        // right person, object box slightly off: still IoU >= 0.5
        p(0.9, hold, person, Some(b(36.0, 41.0, 51.0, 56.0))),
        // duplicate of the same interaction: false positive
        p(0.8, hold, person, Some(cup)),
        // object box far away: false positive ranked above the human-only hit
        p(0.7, stand, b(60.0, 0.0, 100.0, 100.0), None),
        p(0.6, stand, person, None),
    ];
    let report = role_map(&preds, &gts, &catalog, DEFAULT_IOU_THRESHOLD);
    for c in report.per_class.iter().filter(|c| c.n_gt > 0) {
        println!("{:<6} AP {:.3}  ({} gt, {} predictions)", c.name, c.ap.unwrap(), c.n_gt, c.n_pred);
    }
    println!("role mAP {:.3}", report.mean_ap);
}
