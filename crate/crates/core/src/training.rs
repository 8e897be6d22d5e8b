//! Multi-label loss, pair sampling, SGD with momentum and the training loop.

use log::{debug, info};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, jitter_box, Detection, JitterConfig};
use crate::model::{ImageForward, ImageGrads, ImageInput, Model, ModelParams, NodeSource};
use crate::numkernel::Tensor;
use crate::spatial_semantic::EmbeddingTable;
use crate::streams::{ActionCatalog, ActionScores};

pub const LOSS_CLAMP: f64 = 1e-12;
pub const DEFAULT_LR: f64 = 0.0025;
pub const DEFAULT_MOMENTUM: f64 = 0.9;
pub const DEFAULT_WEIGHT_DECAY: f64 = 1e-4;
pub const DEFAULT_NEG_RATIO: usize = 3;

fn bce(s: f64, y: f64) -> f64 {
    let s = s.clamp(LOSS_CLAMP, 1.0 - LOSS_CLAMP);
    -(y * s.ln() + (1.0 - y) * (1.0 - s).ln())
}

/// Summed per-class binary cross-entropy.
pub fn multilabel_loss(scores: &ActionScores, labels: &[f64]) -> f64 {
    scores.values.iter().zip(labels).map(|(&s, &y)| bce(s, y)).sum()
}

/// Cross-entropy over the classes where `mask` is set.
pub fn masked_loss(scores: &[f64], labels: &[f64], mask: &[bool]) -> f64 {
    scores
        .iter()
        .zip(labels)
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|((&s, &y), _)| bce(s, y))
        .sum()
}

/// Gradient of [`masked_loss`] with respect to the pre-sigmoid logits,
/// added into `out`. Uses `s − y`, the exact derivative away from the clamp.
pub fn masked_logit_grad(scores: &[f64], labels: &[f64], mask: &[bool], out: &mut [f64]) {
    for (((o, &s), &y), &m) in out.iter_mut().zip(scores).zip(labels).zip(mask) {
        if m {
            *o += s - y;
        }
    }
}

/// Loss of one object-paired example summed over the streams, on the
/// object-requiring classes. Human-only actions are trained once per human
/// through the human stream (see [`train`]). Absent subgraph streams
/// contribute nothing.
pub fn total_loss(
    human: &ActionScores,
    object: &ActionScores,
    sp_human: Option<&ActionScores>,
    sp_object: Option<&ActionScores>,
    labels: &[f64],
    catalog: &ActionCatalog,
) -> f64 {
    let obj = catalog.object_mask();
    let mut l = 0.0;
    for s in [Some(human), Some(object), sp_human, sp_object].into_iter().flatten() {
        l += masked_loss(&s.values, labels, &obj);
    }
    l
}

/// One candidate human-object pair with its labels over all actions.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub human_index: usize,
    pub object_index: usize,
    pub human: Detection,
    pub object: Detection,
    pub labels: Vec<f64>,
    pub is_positive: bool,
}

fn jittered(d: &Detection, rng: &mut ChaCha8Rng, cfg: &JitterConfig) -> Detection {
    Detection {
        bbox: jitter_box(&d.bbox, rng, cfg),
        ..d.clone()
    }
}

/// Every positive once with jittered boxes, plus up to `ratio ×` as many
/// negatives drawn without replacement.
pub fn sample_batch(
    positives: &[TrainingExample],
    negatives: &[TrainingExample],
    ratio: usize,
    rng: &mut ChaCha8Rng,
    jitter: &JitterConfig,
) -> Vec<TrainingExample> {
    if positives.is_empty() {
        return Vec::new();
    }
    let mut batch: Vec<TrainingExample> = positives
        .iter()
        .map(|p| TrainingExample {
            human: jittered(&p.human, rng, jitter),
            object: jittered(&p.object, rng, jitter),
            ..p.clone()
        })
        .collect();
    let want = positives.len() * ratio;
    if negatives.len() < want {
        debug!(
            "only {} negatives available, {} requested",
            negatives.len(),
            want
        );
    }
    batch.extend(negatives.choose_multiple(rng, want).cloned());
    batch
}

/// Learning rate, momentum and coupled weight decay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: DEFAULT_LR,
            momentum: DEFAULT_MOMENTUM,
            weight_decay: DEFAULT_WEIGHT_DECAY,
        }
    }
}

/// `v ← μv + g + λθ; θ ← θ − ηv` on one flat buffer.
pub fn sgd_update(theta: &mut [f64], grad: &[f64], velocity: &mut [f64], cfg: &SgdConfig) {
    for ((t, &g), v) in theta.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = cfg.momentum * *v + g + cfg.weight_decay * *t;
        *t -= cfg.lr * *v;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub config: SgdConfig,
    /// One velocity per parameter tensor, in manifest order.
    pub velocity: Vec<Tensor>,
}

impl OptimState {
    pub fn new(params: &ModelParams, config: SgdConfig) -> Self {
        Self {
            config,
            velocity: params.named().into_iter().map(|(_, t)| t.zeros_like()).collect(),
        }
    }
}

/// Applies one step; a non-finite gradient aborts before anything changes.
pub fn sgd_step(params: &mut ModelParams, grads: &ModelParams, state: &mut OptimState) -> Result<()> {
    let g = grads.named();
    if let Some((name, _)) = g.iter().find(|(_, t)| !t.all_finite()) {
        return Err(Error::Numeric(format!("non-finite gradient in {name}")));
    }
    if state.velocity.len() != g.len() {
        return Err(Error::dim("optimizer state does not match the parameters"));
    }
    let cfg = state.config;
    for ((t, (name, gt)), v) in params.tensors_mut().into_iter().zip(&g).zip(&mut state.velocity) {
        if t.shape() != gt.shape() || t.shape() != v.shape() {
            return Err(Error::dim(format!("shape mismatch in {name}")));
        }
        sgd_update(t.data_mut(), gt.data(), v.data_mut(), &cfg);
    }
    Ok(())
}

/// One training image with labels aligned to its detections.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainImage {
    pub id: u64,
    pub humans: Vec<Detection>,
    pub objects: Vec<Detection>,
    pub human_appearance: Vec<Vec<f64>>,
    pub object_appearance: Vec<Vec<f64>>,
    /// `[n_humans · n_objects]` rows of object-action labels over all classes.
    pub pair_labels: Vec<Vec<f64>>,
    /// Per human, labels of the human-only actions (other entries unused).
    pub human_labels: Vec<Vec<f64>>,
}

impl TrainImage {
    pub fn input(&self) -> ImageInput<'_> {
        ImageInput {
            humans: &self.humans,
            objects: &self.objects,
            human_appearance: &self.human_appearance,
            object_appearance: &self.object_appearance,
        }
    }

    fn is_positive(&self, n: usize) -> bool {
        self.pair_labels[n].iter().any(|&y| y > 0.0)
    }

    fn examples(&self, humans: &[Detection], objects: &[Detection]) -> Vec<TrainingExample> {
        let no = objects.len();
        (0..humans.len() * no)
            .map(|n| TrainingExample {
                human_index: n / no,
                object_index: n % no,
                human: humans[n / no].clone(),
                object: objects[n % no].clone(),
                labels: self.pair_labels[n].clone(),
                is_positive: self.is_positive(n),
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub sgd: SgdConfig,
    pub max_epochs: usize,
    pub patience: usize,
    pub neg_ratio: usize,
    pub jitter: JitterConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            sgd: SgdConfig::default(),
            max_epochs: 30,
            patience: 5,
            neg_ratio: DEFAULT_NEG_RATIO,
            jitter: JitterConfig::default(),
            seed: 0,
        }
    }
}

/// Loss and logit gradients for one image given which pairs are used.
fn image_objective(
    model: &Model,
    image: &TrainImage,
    fwd: &ImageForward,
    pairs: &[usize],
) -> (f64, ImageGrads) {
    let cat = &model.catalog;
    let obj = cat.object_mask();
    let human_only: Vec<bool> = obj.iter().map(|m| !m).collect();
    let mut grads = ImageGrads::zeros(fwd, cat.len());
    let mut loss = 0.0;
    let no = fwd.n_objects();
    for &n in pairs {
        let (i, j) = (n / no, n % no);
        let y = &image.pair_labels[n];
        loss += masked_loss(fwd.human[i].scores(), y, &obj);
        masked_logit_grad(fwd.human[i].scores(), y, &obj, &mut grads.human[i]);
        loss += masked_loss(fwd.object[j].scores(), y, &obj);
        masked_logit_grad(fwd.object[j].scores(), y, &obj, &mut grads.object[j]);
        let (_, _, a_sp_h, a_sp_o) = fwd.pair_scores(i, j);
        if let Some(s) = a_sp_h {
            loss += masked_loss(&s.values, y, &obj);
            masked_logit_grad(&s.values, y, &obj, &mut grads.sp_human[n]);
        }
        if let Some(s) = a_sp_o {
            loss += masked_loss(&s.values, y, &obj);
            masked_logit_grad(&s.values, y, &obj, &mut grads.sp_object[n]);
        }
    }
    if human_only.iter().any(|&h| h) {
        for (i, y) in image.human_labels.iter().enumerate() {
            loss += masked_loss(fwd.human[i].scores(), y, &human_only);
            masked_logit_grad(fwd.human[i].scores(), y, &human_only, &mut grads.human[i]);
        }
    }
    (loss, grads)
}

/// Loss and parameter gradients on one image, all pairs included.
pub fn image_loss_and_grad(
    model: &Model,
    image: &TrainImage,
    table: &EmbeddingTable,
) -> Result<(f64, ModelParams)> {
    let fwd = model.forward(&image.input(), NodeSource::Compute(table))?;
    let pairs: Vec<usize> = (0..image.pair_labels.len()).collect();
    let (loss, g) = image_objective(model, image, &fwd, &pairs);
    let mut acc = model.params.zeros_like();
    model.backward(&fwd, &g, &mut acc)?;
    Ok((loss, acc))
}

/// Summed loss over all pairs without augmentation.
pub fn evaluate_loss(model: &Model, images: &[TrainImage], table: &EmbeddingTable) -> Result<f64> {
    let mut total = 0.0;
    for image in images {
        let fwd = model.forward(&image.input(), NodeSource::Compute(table))?;
        let pairs: Vec<usize> = (0..image.pair_labels.len()).collect();
        total += image_objective(model, image, &fwd, &pairs).0;
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub optim: OptimState,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
}

fn check_finite(loss: f64, what: &str) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("non-finite {what} loss")))
    }
}

/// One image per step: detections jittered once (so pairs sharing a box
/// stay consistent), the full graph built, and the loss taken over all
/// positives plus sampled negatives. Keeps the parameters of the epoch with
/// the lowest validation loss and stops after `patience` epochs without
/// improvement.
pub fn train(
    mut model: Model,
    train_set: &[TrainImage],
    val_set: &[TrainImage],
    table: &EmbeddingTable,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut optim = OptimState::new(&model.params, cfg.sgd);
    let mut best: Option<(f64, ModelParams, OptimState, usize)> = None;
    let mut history = Vec::new();
    let mut stale = 0;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut train_loss = 0.0;
        for &k in &order {
            let image = &train_set[k];
            let humans: Vec<Detection> =
                image.humans.iter().map(|d| jittered(d, &mut rng, &cfg.jitter)).collect();
            let objects: Vec<Detection> =
                image.objects.iter().map(|d| jittered(d, &mut rng, &cfg.jitter)).collect();
            let examples = image.examples(&humans, &objects);
            let (pos, neg): (Vec<_>, Vec<_>) = examples.into_iter().partition(|e| e.is_positive);
            let batch = sample_batch(&pos, &neg, cfg.neg_ratio, &mut rng, &JitterConfig::none());
            let no = objects.len();
            let pairs: Vec<usize> = batch
                .iter()
                .map(|e| e.human_index * no + e.object_index)
                .collect();
            let input = ImageInput {
                humans: &humans,
                objects: &objects,
                human_appearance: &image.human_appearance,
                object_appearance: &image.object_appearance,
            };
            let fwd = model.forward(&input, NodeSource::Compute(table))?;
            let (loss, g) = image_objective(&model, image, &fwd, &pairs);
            check_finite(loss, "training")?;
            train_loss += loss;
            let mut acc = model.params.zeros_like();
            model.backward(&fwd, &g, &mut acc)?;
            sgd_step(&mut model.params, &acc, &mut optim)?;
        }
        let val_loss = if val_set.is_empty() {
            train_loss
        } else {
            evaluate_loss(&model, val_set, table)?
        };
        check_finite(val_loss, "validation")?;
        info!("epoch {epoch}: train loss {train_loss:.4}, validation loss {val_loss:.4}");
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
        });
        if best.as_ref().is_none_or(|(b, ..)| val_loss < *b) {
            best = Some((val_loss, model.params.clone(), optim.clone(), epoch));
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                info!("stopping early after epoch {epoch}");
                break;
            }
        }
    }
    let best_epoch = match best {
        Some((_, params, opt, e)) => {
            model.params = params;
            optim = opt;
            e
        }
        None => 0,
    };
    Ok(TrainOutcome {
        model,
        optim,
        history,
        best_epoch,
    })
}

/// True when a jittered box still overlaps its source above the floor.
pub fn jitter_respects_floor(source: &Detection, jittered: &Detection, floor: f64) -> bool {
    iou(&source.bbox, &jittered.bbox) > floor
}

/// Draws a fresh generator for a sub-task so that adding draws elsewhere
/// does not shift its stream.
pub fn fork_rng(rng: &mut ChaCha8Rng) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(rng.random())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BBox;

    fn scores(v: &[f64]) -> ActionScores {
        ActionScores { values: v.to_vec() }
    }

    #[test]
    fn loss_examples() {
        assert!((multilabel_loss(&scores(&[0.5]), &[1.0]) - 2f64.ln()).abs() < 1e-15);
        assert!(multilabel_loss(&scores(&[1.0]), &[1.0]) < 1e-11);
        let a = multilabel_loss(&scores(&[0.3, 0.8]), &[1.0, 0.0]);
        let b = multilabel_loss(&scores(&[0.7, 0.2]), &[0.0, 1.0]);
        assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn total_loss_examples() {
        let cat = ActionCatalog::new(vec![
            crate::streams::ActionSpec {
                name: "x".into(),
                requires_object: true,
            },
            crate::streams::ActionSpec {
                name: "y".into(),
                requires_object: true,
            },
        ])
        .unwrap();
        let s = scores(&[0.4, 0.9]);
        let y = [1.0, 0.0];
        let single = multilabel_loss(&s, &y);
        let t = total_loss(&s, &s, Some(&s), Some(&s), &y, &cat);
        assert!((t - 4.0 * single).abs() < 1e-12);
        let perfect = scores(&[1.0, 0.0]);
        let t = total_loss(&s, &perfect, Some(&s), Some(&s), &y, &cat);
        assert!((t - 3.0 * single).abs() < 1e-10);
        // Two streams by hand: −ln 0.4 − ln 0.1 − ln 0.5 − ln 0.5.
        let h = scores(&[0.4, 0.9]);
        let o = scores(&[0.5, 0.5]);
        let t = total_loss(&h, &o, None, None, &y, &cat);
        let want = -(0.4f64.ln() + 0.1f64.ln() + 0.5f64.ln() + 0.5f64.ln());
        assert!((t - want).abs() < 1e-12);
    }

    #[test]
    fn human_only_actions_skip_object_streams() {
        let cat = ActionCatalog::synthetic();
        let mut y = vec![0.0; 6];
        y[0] = 1.0;
        let a = scores(&[0.01, 0.2, 0.3, 0.4, 0.5, 0.6]);
        let b = scores(&[0.99, 0.2, 0.3, 0.4, 0.5, 0.6]);
        assert_eq!(
            total_loss(&a, &a, Some(&a), Some(&a), &y, &cat),
            total_loss(&b, &b, Some(&b), Some(&b), &y, &cat)
        );
    }

    #[test]
    fn sgd_examples() {
        let cfg = SgdConfig {
            lr: 0.1,
            momentum: 0.0,
            weight_decay: 0.0,
        };
        let mut t = vec![1.0, 2.0];
        let mut v = vec![0.0; 2];
        sgd_update(&mut t, &[0.5, -1.0], &mut v, &cfg);
        assert!((t[0] - 0.95).abs() < 1e-15 && (t[1] - 2.1).abs() < 1e-15);
        let mut t2 = t.clone();
        sgd_update(&mut t2, &[0.0, 0.0], &mut [0.0; 2], &cfg);
        assert_eq!(t2, t);

        // θ0 = 1, g = 0.5 both steps, μ = 0.9, λ = 0.1, η = 0.1:
        // v1 = 0.5 + 0.1 = 0.6, θ1 = 0.94; v2 = 0.54 + 0.5 + 0.094 = 1.134, θ2 = 0.8266.
        let cfg = SgdConfig {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 0.1,
        };
        let mut t = vec![1.0];
        let mut v = vec![0.0];
        sgd_update(&mut t, &[0.5], &mut v, &cfg);
        assert!((t[0] - 0.94).abs() < 1e-15);
        sgd_update(&mut t, &[0.5], &mut v, &cfg);
        assert!((v[0] - 1.134).abs() < 1e-14 && (t[0] - 0.8266).abs() < 1e-14);
    }

    fn example(k: usize, positive: bool) -> TrainingExample {
        let b = BBox::new(10.0 * k as f64, 0.0, 10.0 * k as f64 + 40.0, 100.0).unwrap();
        let d = Detection::new(b, "cup", 0.9).unwrap();
        TrainingExample {
            human_index: k,
            object_index: 0,
            human: d.clone(),
            object: d,
            labels: vec![f64::from(u8::from(positive))],
            is_positive: positive,
        }
    }

    #[test]
    fn sample_batch_examples() {
        let pos: Vec<_> = (0..4).map(|k| example(k, true)).collect();
        let neg: Vec<_> = (0..20).map(|k| example(k, false)).collect();
        let cfg = JitterConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch = sample_batch(&pos, &neg, 3, &mut rng, &cfg);
        assert_eq!(batch.len(), 16);
        for (b, p) in batch.iter().zip(&pos) {
            assert!(jitter_respects_floor(&p.human, &b.human, cfg.min_iou));
            assert!(jitter_respects_floor(&p.object, &b.object, cfg.min_iou));
        }
        let again = sample_batch(&pos, &neg, 3, &mut ChaCha8Rng::seed_from_u64(1), &cfg);
        assert_eq!(batch, again);
        assert!(sample_batch(&[], &neg, 3, &mut rng, &cfg).is_empty());
        assert_eq!(sample_batch(&pos, &neg[..5], 3, &mut rng, &cfg).len(), 9);
    }
}
