//! Role mean average precision over ⟨human, action, object⟩ triplets.
//!
//! A prediction is a true positive when an unmatched ground truth of the
//! same image and action overlaps its human box and its object box (or both
//! lack an object) with IoU at or above the threshold. Predictions are
//! matched greedily by descending score; among several eligible ground
//! truths the one with the highest `min(human IoU, object IoU)` wins, then
//! the lowest index.

use std::collections::{BTreeMap, HashMap};

use log::warn;
use serde::{Deserialize, Serialize};

use crate::geometry::{iou, BBox};
use crate::streams::ActionCatalog;

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthTriplet {
    pub image_id: u64,
    pub human_box: BBox,
    pub action: usize,
    pub object_box: Option<BBox>,
    pub object_category: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionTriplet {
    pub image_id: u64,
    pub human_box: BBox,
    pub action: usize,
    pub object_box: Option<BBox>,
    pub object_category: Option<String>,
    pub score: f64,
}

/// Overlap used to rank eligible ground truths, or `None` when ineligible.
fn match_quality(p: &PredictionTriplet, g: &GroundTruthTriplet, thresh: f64) -> Option<f64> {
    let h = iou(&p.human_box, &g.human_box);
    if h < thresh {
        return None;
    }
    match (&p.object_box, &g.object_box) {
        (None, None) => Some(h),
        (Some(po), Some(go)) => {
            let o = iou(po, go);
            (o >= thresh).then_some(h.min(o))
        }
        _ => None,
    }
}

/// Stable descending-score order; ties keep input order.
pub fn score_order(preds: &[PredictionTriplet]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].score.total_cmp(&preds[a].score));
    order
}

/// Outcome of greedy matching, one entry per prediction in the given order.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    pub flags: Vec<bool>,
    /// Index of the ground truth each true positive consumed.
    pub assignment: Vec<Option<usize>>,
}

/// Greedy matching of predictions already sorted by descending score.
pub fn match_triplets(
    preds: &[PredictionTriplet],
    gts: &[GroundTruthTriplet],
    iou_thresh: f64,
) -> MatchResult {
    let mut by_key: HashMap<(u64, usize), Vec<usize>> = HashMap::new();
    for (k, g) in gts.iter().enumerate() {
        by_key.entry((g.image_id, g.action)).or_default().push(k);
    }
    let mut used = vec![false; gts.len()];
    let mut flags = Vec::with_capacity(preds.len());
    let mut assignment = Vec::with_capacity(preds.len());
    for p in preds {
        let mut best: Option<(f64, usize)> = None;
        for &k in by_key.get(&(p.image_id, p.action)).map_or(&[][..], Vec::as_slice) {
            if used[k] {
                continue;
            }
            if let Some(q) = match_quality(p, &gts[k], iou_thresh) {
                if best.is_none_or(|(bq, _)| q > bq) {
                    best = Some((q, k));
                }
            }
        }
        if let Some((_, k)) = best {
            used[k] = true;
        }
        flags.push(best.is_some());
        assignment.push(best.map(|(_, k)| k));
    }
    MatchResult { flags, assignment }
}

/// Area under the precision-recall curve with precision made
/// non-increasing from the right.
pub fn average_precision(flags: &[bool], total_gt: usize) -> f64 {
    if total_gt == 0 {
        warn!("average precision requested with no ground truth; reporting 0");
        return 0.0;
    }
    let mut tp = 0usize;
    let mut precision = Vec::with_capacity(flags.len());
    let mut recall = Vec::with_capacity(flags.len());
    for (rank, &f) in flags.iter().enumerate() {
        tp += usize::from(f);
        precision.push(tp as f64 / (rank + 1) as f64);
        recall.push(tp as f64 / total_gt as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        if *r > prev_recall {
            ap += (r - prev_recall) * p;
            prev_recall = *r;
        }
    }
    ap
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub name: String,
    /// `None` when the class has no ground truth.
    pub ap: Option<f64>,
    pub n_gt: usize,
    pub n_pred: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoleMapReport {
    pub per_class: Vec<ClassAp>,
    pub mean_ap: f64,
}

fn evaluate_groups(
    names: Vec<String>,
    preds: &[PredictionTriplet],
    pred_class: impl Fn(&PredictionTriplet) -> Option<usize>,
    gts: &[GroundTruthTriplet],
    gt_class: impl Fn(&GroundTruthTriplet) -> Option<usize>,
    iou_thresh: f64,
) -> RoleMapReport {
    let n = names.len();
    let mut pg: Vec<Vec<PredictionTriplet>> = vec![Vec::new(); n];
    let mut gg: Vec<Vec<GroundTruthTriplet>> = vec![Vec::new(); n];
    for p in preds {
        if let Some(c) = pred_class(p).filter(|&c| c < n) {
            pg[c].push(p.clone());
        }
    }
    for g in gts {
        if let Some(c) = gt_class(g).filter(|&c| c < n) {
            gg[c].push(g.clone());
        }
    }
    let per_class: Vec<ClassAp> = names
        .into_iter()
        .enumerate()
        .map(|(c, name)| {
            let order = score_order(&pg[c]);
            let sorted: Vec<PredictionTriplet> = order.iter().map(|&k| pg[c][k].clone()).collect();
            let ap = (!gg[c].is_empty()).then(|| {
                let m = match_triplets(&sorted, &gg[c], iou_thresh);
                average_precision(&m.flags, gg[c].len())
            });
            ClassAp {
                name,
                ap,
                n_gt: gg[c].len(),
                n_pred: sorted.len(),
            }
        })
        .collect();
    let with_gt: Vec<f64> = per_class.iter().filter_map(|c| c.ap).collect();
    let mean_ap = if with_gt.is_empty() {
        warn!("no class has ground truth; mean AP is 0");
        0.0
    } else {
        with_gt.iter().sum::<f64>() / with_gt.len() as f64
    };
    RoleMapReport { per_class, mean_ap }
}

/// Per-action AP and their mean over actions that have ground truth.
pub fn role_map(
    preds: &[PredictionTriplet],
    gts: &[GroundTruthTriplet],
    catalog: &ActionCatalog,
    iou_thresh: f64,
) -> RoleMapReport {
    let names = catalog.actions().iter().map(|a| a.name.clone()).collect();
    evaluate_groups(
        names,
        preds,
        |p| Some(p.action),
        gts,
        |g| Some(g.action),
        iou_thresh,
    )
}

/// Composite classes keyed by (action, object category), e.g. the 600
/// interaction classes built from 117 actions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HoiClassMap {
    pub classes: Vec<HoiClass>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HoiClass {
    pub name: String,
    pub action: String,
    pub object_category: String,
}

/// AP per composite class; triplets whose key is not in the map are ignored.
pub fn role_map_by_class(
    preds: &[PredictionTriplet],
    gts: &[GroundTruthTriplet],
    catalog: &ActionCatalog,
    classes: &HoiClassMap,
    iou_thresh: f64,
) -> RoleMapReport {
    let mut index: BTreeMap<(usize, &str), usize> = BTreeMap::new();
    for (c, cls) in classes.classes.iter().enumerate() {
        match catalog.index_of(&cls.action) {
            Some(a) => {
                index.insert((a, cls.object_category.as_str()), c);
            }
            None => warn!("class {} names unknown action {}", cls.name, cls.action),
        }
    }
    let lookup = |a: usize, cat: &Option<String>| {
        cat.as_deref().and_then(|c| index.get(&(a, c)).copied())
    };
    let names = classes.classes.iter().map(|c| c.name.clone()).collect();
    evaluate_groups(
        names,
        preds,
        |p| lookup(p.action, &p.object_category),
        gts,
        |g| lookup(g.action, &g.object_category),
        iou_thresh,
    )
}
