//! Shared fixtures and brute-force references for the integration tests
//! and the acceptance runner.
#![allow(dead_code)]

use drg::drg::{DrgParams, NodeFeatures, SubgraphKind};
use drg::evaluation::{GroundTruthTriplet, PredictionTriplet};
use drg::geometry::{iou, BBox, Detection};
use drg::model::{ImageGrads, Model, ModelConfig, NodeSource};
use drg::numkernel::Objective;
use drg::spatial_semantic::{EmbeddingTable, SpatialConfig};
use drg::streams::{fuse_backward, ActionCatalog, ActionSpec, FusionInputs};
use drg::training::{image_loss_and_grad, TrainImage};
use drg::Result;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

// ---------------------------------------------------------------- model ---

/// One human-only action and two object actions.
pub fn tiny_catalog() -> ActionCatalog {
    ActionCatalog::new(vec![
        ActionSpec { name: "stand".into(), requires_object: false },
        ActionSpec { name: "hold".into(), requires_object: true },
        ActionSpec { name: "ride".into(), requires_object: true },
    ])
    .unwrap()
}

/// 12×12 maps through 5×5 and 3×3 convolutions give 2 spatial values;
/// with a 4-wide embedding the node feature has 6 entries.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        spatial: SpatialConfig {
            raster: 12,
            conv1_channels: 2,
            conv1_kernel: 5,
            conv2_channels: 2,
            conv2_kernel: 3,
        },
        embed_dim: 4,
        appearance_dim: 3,
        key_dim: 4,
        hidden: 5,
        iters_human: 2,
        iters_object: 2,
        human_graph: true,
        object_graph: true,
    }
}

pub fn normal_vec<R: Rng>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

pub fn tiny_table<R: Rng>(rng: &mut R) -> EmbeddingTable {
    let mut t = EmbeddingTable::new(4);
    for c in ["person", "cup", "bike"] {
        t.insert(c, normal_vec(4, rng)).unwrap();
    }
    t
}

pub fn random_box<R: Rng>(rng: &mut R) -> BBox {
    let x1 = rng.random_range(0.0..60.0);
    let y1 = rng.random_range(0.0..60.0);
    BBox::new(
        x1,
        y1,
        x1 + rng.random_range(10.0..40.0),
        y1 + rng.random_range(10.0..40.0),
    )
    .unwrap()
}

/// Image with `nh` humans and `no` objects and random labels.
pub fn tiny_image<R: Rng>(nh: usize, no: usize, rng: &mut R) -> TrainImage {
    let cats = ["cup", "bike"];
    let humans: Vec<Detection> = (0..nh)
        .map(|_| Detection::new(random_box(rng), "person", rng.random_range(0.5..1.0)).unwrap())
        .collect();
    let objects: Vec<Detection> = (0..no)
        .map(|k| {
            Detection::new(random_box(rng), cats[k % 2], rng.random_range(0.2..1.0)).unwrap()
        })
        .collect();
    let bit = |rng: &mut R| f64::from(u8::from(rng.random_bool(0.5)));
    TrainImage {
        id: 1,
        human_appearance: (0..nh).map(|_| normal_vec(3, rng)).collect(),
        object_appearance: (0..no).map(|_| normal_vec(3, rng)).collect(),
        pair_labels: (0..nh * no).map(|_| vec![0.0, bit(rng), bit(rng)]).collect(),
        human_labels: (0..nh).map(|_| vec![bit(rng), 0.0, 0.0]).collect(),
        humans,
        objects,
    }
}

/// Training loss of one image plus a random linear probe of every fused
/// pair score, as a function of all model parameters. The probe term sends
/// gradients through the fusion rule as well as the per-stream losses.
pub struct FullObjective {
    pub model: Model,
    pub image: TrainImage,
    pub table: EmbeddingTable,
    pub probes: Vec<Vec<f64>>,
}

impl FullObjective {
    pub fn new<R: Rng>(cfg: ModelConfig, rng: &mut R) -> Self {
        let model = Model::init(cfg, tiny_catalog(), rng).unwrap();
        let table = tiny_table(rng);
        let image = tiny_image(2, 3, rng);
        let probes = (0..6).map(|_| normal_vec(3, rng)).collect();
        Self { model, image, table, probes }
    }

    pub fn params(&self) -> Vec<f64> {
        self.model.params.flatten()
    }
}

impl Objective for FullObjective {
    fn evaluate(&mut self, params: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.model.params.assign_flat(params)?;
        let (mut loss, mut grads) = image_loss_and_grad(&self.model, &self.image, &self.table)?;
        let input = self.image.input();
        let fwd = self.model.forward(&input, NodeSource::Compute(&self.table))?;
        let mut g = ImageGrads::zeros(&fwd, 3);
        let no = input.objects.len();
        for i in 0..input.humans.len() {
            for j in 0..no {
                let n = i * no + j;
                let probe = &self.probes[n];
                let fused = self.model.fused_pair(&input, &fwd, i, j);
                loss += fused.iter().zip(probe).map(|(a, b)| a * b).sum::<f64>();
                let (a_h, a_o, a_sp_h, a_sp_o) = fwd.pair_scores(i, j);
                let fi = FusionInputs {
                    s_h: input.humans[i].score,
                    s_o: input.objects[j].score,
                    a_h: &a_h,
                    a_o: &a_o,
                    a_sp_h: a_sp_h.as_ref(),
                    a_sp_o: a_sp_o.as_ref(),
                };
                let ds = fuse_backward(&fi, &self.model.catalog, probe);
                let streams = [Some(&a_h), Some(&a_o), a_sp_h.as_ref(), a_sp_o.as_ref()];
                for (k, (d, s)) in ds.iter().zip(streams).enumerate() {
                    let Some(s) = s else { continue };
                    let target = match k {
                        0 => &mut g.human[i],
                        1 => &mut g.object[j],
                        2 => &mut g.sp_human[n],
                        _ => &mut g.sp_object[n],
                    };
                    for ((t, dv), sv) in target.iter_mut().zip(d).zip(&s.values) {
                        *t += dv * sv * (1.0 - sv);
                    }
                }
            }
        }
        self.model.backward(&fwd, &g, &mut grads)?;
        Ok((loss, grads.flatten()))
    }
}

// ---------------------------------------------------- aggregation oracle ---

pub fn random_nodes<R: Rng>(nh: usize, no: usize, d: usize, rng: &mut R) -> NodeFeatures {
    NodeFeatures::from_rows(nh, no, (0..nh * no).map(|_| normal_vec(d, rng)).collect()).unwrap()
}

fn mv(w: &[f64], rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
    (0..rows)
        .map(|r| (0..cols).map(|c| w[r * cols + c] * x[c]).sum())
        .collect()
}

/// Direct loop form of one update: softmax attention over the pairs that
/// share the human (or the object), weighted sum, linear map, ReLU,
/// residual and layer normalization.
pub fn brute_force_aggregate(
    x: &NodeFeatures,
    kind: SubgraphKind,
    p: &DrgParams,
) -> Vec<Vec<f64>> {
    let sp = p.get(kind);
    let (nh, no, d) = (x.n_humans(), x.n_objects(), x.dim());
    let dk = sp.w_q.shape()[0];
    let mut out = Vec::new();
    for i in 0..nh {
        for j in 0..no {
            let c = x.node(i, j);
            let nbrs: Vec<&[f64]> = match kind {
                SubgraphKind::HumanCentric => {
                    (0..no).filter(|&m| m != j).map(|m| x.node(i, m)).collect()
                }
                SubgraphKind::ObjectCentric => {
                    (0..nh).filter(|&m| m != i).map(|m| x.node(m, j)).collect()
                }
            };
            if nbrs.is_empty() {
                out.push(c.to_vec());
                continue;
            }
            let key = mv(sp.w_k.data(), dk, d, c);
            let u: Vec<f64> = nbrs
                .iter()
                .map(|m| {
                    let q = mv(sp.w_q.data(), dk, d, m);
                    q.iter().zip(&key).map(|(a, b)| a * b).sum::<f64>() / (dk as f64).sqrt()
                })
                .collect();
            let top = u.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = u.iter().map(|v| (v - top).exp()).collect();
            let z: f64 = e.iter().sum();
            let mut agg = vec![0.0; d];
            for (m, w) in nbrs.iter().zip(&e) {
                for k in 0..d {
                    agg[k] += w / z * m[k];
                }
            }
            let r = mv(sp.w.data(), d, d, &agg);
            let pre: Vec<f64> = (0..d).map(|k| c[k] + r[k].max(0.0)).collect();
            let mean = pre.iter().sum::<f64>() / d as f64;
            let var = pre.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let sd = (var + 1e-5).sqrt();
            out.push(
                (0..d)
                    .map(|k| sp.ln_gain.data()[k] * (pre[k] - mean) / sd + sp.ln_bias.data()[k])
                    .collect(),
            );
        }
    }
    out
}

/// Parameters with a non-trivial layer-norm affine part.
pub fn random_drg_params<R: Rng>(d: usize, dk: usize, rng: &mut R) -> DrgParams {
    let mut p = DrgParams::init(d, dk, rng);
    for kind in SubgraphKind::BOTH {
        let sp = p.get_mut(kind);
        for v in sp.ln_gain.data_mut() {
            *v = rng.random_range(0.5..1.5);
        }
        for v in sp.ln_bias.data_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
    }
    p
}

// ------------------------------------------------------ evaluator oracle ---

pub fn gt(image: u64, h: [f64; 4], action: usize, o: Option<[f64; 4]>) -> GroundTruthTriplet {
    GroundTruthTriplet {
        image_id: image,
        human_box: BBox::new(h[0], h[1], h[2], h[3]).unwrap(),
        action,
        object_box: o.map(|b| BBox::new(b[0], b[1], b[2], b[3]).unwrap()),
        object_category: o.map(|_| "thing".to_string()),
    }
}

pub fn pred(
    image: u64,
    h: [f64; 4],
    action: usize,
    o: Option<[f64; 4]>,
    score: f64,
) -> PredictionTriplet {
    let g = gt(image, h, action, o);
    PredictionTriplet {
        image_id: g.image_id,
        human_box: g.human_box,
        action: g.action,
        object_box: g.object_box,
        object_category: g.object_category,
        score,
    }
}

fn quality(p: &PredictionTriplet, g: &GroundTruthTriplet, t: f64) -> Option<f64> {
    if p.image_id != g.image_id || p.action != g.action {
        return None;
    }
    let h = iou(&p.human_box, &g.human_box);
    let o = match (&p.object_box, &g.object_box) {
        (None, None) => h,
        (Some(a), Some(b)) => iou(a, b),
        _ => return None,
    };
    (h >= t && o >= t).then_some(h.min(o))
}

type Key = Vec<(u8, f64, i64)>;

fn search(
    preds: &[&PredictionTriplet],
    gts: &[GroundTruthTriplet],
    t: f64,
    used: &mut Vec<bool>,
    prefix: &mut Key,
    choice: &mut Vec<Option<usize>>,
    best: &mut Option<(Key, Vec<Option<usize>>)>,
) {
    let k = prefix.len();
    if k == preds.len() {
        let better = match best {
            None => true,
            Some((b, _)) => prefix
                .iter()
                .zip(b.iter())
                .map(|(x, y)| (x.0, x.1, x.2).partial_cmp(&(y.0, y.1, y.2)).unwrap())
                .find(|o| o.is_ne())
                .is_some_and(|o| o.is_gt()),
        };
        if better {
            *best = Some((prefix.clone(), choice.clone()));
        }
        return;
    }
    prefix.push((0, 0.0, 0));
    choice.push(None);
    search(preds, gts, t, used, prefix, choice, best);
    prefix.pop();
    choice.pop();
    for g in 0..gts.len() {
        if used[g] {
            continue;
        }
        if let Some(q) = quality(preds[k], &gts[g], t) {
            used[g] = true;
            prefix.push((1, q, -(g as i64)));
            choice.push(Some(g));
            search(preds, gts, t, used, prefix, choice, best);
            prefix.pop();
            choice.pop();
            used[g] = false;
        }
    }
}

/// Exhaustive matcher: over all injective assignments, the one whose
/// per-prediction key (matched, overlap, −gt index) is lexicographically
/// largest in descending score order. Returns the assignment in that order.
pub fn brute_force_match(
    preds: &[PredictionTriplet],
    gts: &[GroundTruthTriplet],
    t: f64,
) -> Vec<Option<usize>> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].score.total_cmp(&preds[a].score));
    let sorted: Vec<&PredictionTriplet> = order.iter().map(|&k| &preds[k]).collect();
    let mut best = None;
    search(
        &sorted,
        gts,
        t,
        &mut vec![false; gts.len()],
        &mut Vec::new(),
        &mut Vec::new(),
        &mut best,
    );
    best.unwrap().1
}

/// AP as the mean, over ground truths, of the best precision reached at or
/// after the rank where each one was recalled (unrecalled ones count 0).
pub fn brute_force_ap(flags: &[bool], total_gt: usize) -> f64 {
    if total_gt == 0 {
        return 0.0;
    }
    let prec: Vec<f64> = (0..flags.len())
        .map(|r| flags[..=r].iter().filter(|&&f| f).count() as f64 / (r + 1) as f64)
        .collect();
    let mut sum = 0.0;
    for r in 0..flags.len() {
        if flags[r] {
            sum += prec[r..].iter().cloned().fold(0.0, f64::max);
        }
    }
    sum / total_gt as f64
}

/// Brute-force role mAP over actions that have ground truth.
pub fn brute_force_role_map(
    preds: &[PredictionTriplet],
    gts: &[GroundTruthTriplet],
    n_actions: usize,
    t: f64,
) -> f64 {
    let mut aps = Vec::new();
    for a in 0..n_actions {
        let ga: Vec<GroundTruthTriplet> = gts.iter().filter(|g| g.action == a).cloned().collect();
        if ga.is_empty() {
            continue;
        }
        let pa: Vec<PredictionTriplet> = preds.iter().filter(|p| p.action == a).cloned().collect();
        let flags: Vec<bool> = brute_force_match(&pa, &ga, t).iter().map(Option::is_some).collect();
        aps.push(brute_force_ap(&flags, ga.len()));
    }
    if aps.is_empty() {
        0.0
    } else {
        aps.iter().sum::<f64>() / aps.len() as f64
    }
}

/// 30 matcher fixtures: 8 hand-built edge cases then 22 random ones.
pub fn evaluator_fixtures() -> Vec<(Vec<PredictionTriplet>, Vec<GroundTruthTriplet>)> {
    use rand::SeedableRng;
    let h = [0.0, 0.0, 10.0, 10.0];
    let h_shift = [2.0, 0.0, 12.0, 10.0]; // IoU 0.667 with h
    let h_far = [6.0, 0.0, 16.0, 10.0]; // IoU 0.25 with h
    let o = [20.0, 20.0, 30.0, 30.0];
    let o_shift = [21.0, 20.0, 31.0, 30.0]; // IoU 0.818 with o
    let mut cases = vec![
        // exact hit plus a duplicate false positive
        (vec![pred(1, h, 1, Some(o), 0.9), pred(1, h, 1, Some(o), 0.8)], vec![gt(1, h, 1, Some(o))]),
        // object box misses
        (vec![pred(1, h, 1, Some(h_far), 0.9)], vec![gt(1, h, 1, Some(o))]),
        // human-only versus object triplet never match
        (vec![pred(1, h, 0, None, 0.9), pred(1, h, 1, None, 0.8)], vec![gt(1, h, 0, None), gt(1, h, 1, Some(o))]),
        // better overlap wins the contested ground truth
        (
            vec![pred(1, h_shift, 1, Some(o), 0.9)],
            vec![gt(1, h_shift, 1, Some(o_shift)), gt(1, h, 1, Some(o))],
        ),
        // identical ground truths: lowest index first
        (
            vec![pred(1, h, 1, Some(o), 0.7), pred(1, h, 1, Some(o), 0.6), pred(1, h, 1, Some(o), 0.5)],
            vec![gt(1, h, 1, Some(o)), gt(1, h, 1, Some(o))],
        ),
        // wrong image
        (vec![pred(2, h, 1, Some(o), 0.9)], vec![gt(1, h, 1, Some(o))]),
        // tied scores keep input order
        (
            vec![pred(1, h_far, 1, Some(o), 0.5), pred(1, h, 1, Some(o), 0.5)],
            vec![gt(1, h, 1, Some(o))],
        ),
        // greedy by score can be suboptimal: the high scorer ties on both
        // ground truths, takes the lower index, and leaves the low scorer
        // without a match
        (
            vec![pred(1, h_shift, 2, Some(o), 0.9), pred(1, h, 2, Some(o), 0.4)],
            vec![gt(1, h, 2, Some(o)), gt(1, [4.0, 0.0, 14.0, 10.0], 2, Some(o))],
        ),
    ];
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2024);
    let grid = |rng: &mut rand_chacha::ChaCha8Rng, base: f64| {
        let x = base + f64::from(rng.random_range(0..4u8)) * 2.0;
        let y = base + f64::from(rng.random_range(0..3u8)) * 2.0;
        [x, y, x + 10.0, y + 10.0]
    };
    while cases.len() < 30 {
        let n_gt = rng.random_range(1..=4);
        let n_pred = rng.random_range(1..=6);
        let mut gts = Vec::new();
        for _ in 0..n_gt {
            let a = rng.random_range(0..3);
            let o = (a != 0).then(|| grid(&mut rng, 30.0));
            gts.push(gt(rng.random_range(1..=2), grid(&mut rng, 0.0), a, o));
        }
        let mut preds = Vec::new();
        for _ in 0..n_pred {
            let a = rng.random_range(0..3);
            let o = (a != 0).then(|| grid(&mut rng, 30.0));
            // coarse scores so that ties occur
            let s = f64::from(rng.random_range(1..=5u8)) / 5.0;
            preds.push(pred(rng.random_range(1..=2), grid(&mut rng, 0.0), a, o, s));
        }
        cases.push((preds, gts));
    }
    cases
}

// -------------------------------------------------- synthetic protocol ---

use drg::pipeline::synth::{CorpusPaths, SynthConfig};
use drg::pipeline::{
    cmd_eval, cmd_gen_synth, cmd_infer, cmd_train, ConfigOverrides, EvalArgs, GenArgs, InferArgs,
    RunConfig, TrainArgs,
};
use std::path::{Path, PathBuf};

pub fn generate_corpus(dir: &Path, synth: SynthConfig) -> (CorpusPaths, RunConfig) {
    let paths = cmd_gen_synth(&GenArgs { synth, output_dir: dir.to_path_buf() }).unwrap();
    let cfg = RunConfig::load(&dir.join("config.json")).unwrap();
    (paths, cfg)
}

#[derive(Debug, Clone)]
pub struct ProtocolRun {
    pub checkpoint: PathBuf,
    pub predictions: PathBuf,
    pub map: f64,
    pub context_map: f64,
    pub epochs: usize,
}

/// Trains with both graphs at `iters` iterations, scores the test split and
/// evaluates on everything and on the context-tagged images.
pub fn train_and_evaluate(
    paths: &CorpusPaths,
    base: &RunConfig,
    iters: usize,
    out: &Path,
    tag: &str,
) -> drg::Result<ProtocolRun> {
    let mut cfg = base.clone();
    ConfigOverrides {
        iters_human: Some(iters),
        iters_object: Some(iters),
        ..Default::default()
    }
    .apply(&mut cfg)?;
    let checkpoint = out.join(format!("{tag}.ckpt"));
    let outcome = cmd_train(&TrainArgs {
        detections: paths.train_detections.clone(),
        appearance: paths.train_appearance.clone(),
        annotations: paths.train_annotations.clone(),
        embeddings: paths.embeddings.clone(),
        config: cfg.clone(),
        output: checkpoint.clone(),
        loss_csv: Some(out.join(format!("{tag}_loss.csv"))),
    })?;
    let predictions = out.join(format!("{tag}_pred.json"));
    cmd_infer(&InferArgs {
        detections: paths.test_detections.clone(),
        appearance: paths.test_appearance.clone(),
        checkpoint: checkpoint.clone(),
        features: None,
        embeddings: Some(paths.embeddings.clone()),
        config: cfg.clone(),
        output: predictions.clone(),
    })?;
    let eval = |subset: Option<&str>| {
        cmd_eval(&EvalArgs {
            predictions: predictions.clone(),
            groundtruth: paths.test_annotations.clone(),
            config: cfg.clone(),
            class_map: None,
            subset: subset.map(str::to_string),
            output: None,
        })
        .map(|r| r.mean_ap)
    };
    Ok(ProtocolRun {
        map: eval(None)?,
        context_map: eval(Some("context"))?,
        checkpoint,
        predictions,
        epochs: outcome.history.len(),
    })
}
