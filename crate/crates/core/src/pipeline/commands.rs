//! Batch commands: featurize, infer, train, eval and synthetic generation.
//!
//! Images are processed on a worker pool sized by `DRG_WORKERS` (default:
//! all cores); results are gathered in input order so outputs do not depend
//! on scheduling.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::checkpoint::{encode, load_checkpoint, read_tensors, save_checkpoint, write_tensors};
use crate::drg::NodeFeatures;
use crate::error::{Error, Result};
use crate::evaluation::{role_map, role_map_by_class, HoiClassMap, PredictionTriplet};
use crate::geometry::{iou, Detection};
use crate::model::{infer_image, ImageInput, Model, ModelConfig, NodeSource};
use crate::numkernel::Tensor;
use crate::pipeline::config::{RunConfig, SCHEMA_VERSION};
use crate::pipeline::schema::{
    read_json, write_json, AnnotationFile, AppearanceFile, DetectionFile, EvalReport,
    ImageDetections, PredictionFile,
};
use crate::pipeline::synth::{generate, write_corpus, CorpusPaths, SynthConfig};
use crate::spatial_semantic::{build_feature, EmbeddingTable, SpatialConvParams};
use crate::training::{train, TrainImage, TrainOutcome};

pub const WORKERS_ENV: &str = "DRG_WORKERS";

/// Thread pool honouring `DRG_WORKERS`.
pub fn worker_pool() -> Result<rayon::ThreadPool> {
    let n = match std::env::var(WORKERS_ENV) {
        Ok(v) => v
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Input(format!("{WORKERS_ENV}={v:?} is not a positive integer")))?,
        Err(_) => 0,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build()
        .map_err(|e| Error::Input(format!("cannot start worker pool: {e}")))
}

/// Hex SHA-256 over the spatial ConvNet tensors.
pub fn spatial_params_hash(p: &SpatialConvParams) -> String {
    let tensors = [
        ("spatial.conv1.weight".to_string(), &p.conv1_weight),
        ("spatial.conv1.bias".to_string(), &p.conv1_bias),
        ("spatial.conv2.weight".to_string(), &p.conv2_weight),
        ("spatial.conv2.bias".to_string(), &p.conv2_bias),
    ];
    hex::encode(Sha256::digest(encode(&json!(null), &tensors)))
}

/// Kept detections of one image, with their indices in the input file.
#[derive(Debug, Clone)]
pub struct PreparedImage {
    pub id: u64,
    pub humans: Vec<Detection>,
    pub objects: Vec<Detection>,
    pub human_index: Vec<usize>,
    pub object_index: Vec<usize>,
    pub human_appearance: Vec<Vec<f64>>,
    pub object_appearance: Vec<Vec<f64>>,
}

impl PreparedImage {
    pub fn input(&self) -> ImageInput<'_> {
        ImageInput {
            humans: &self.humans,
            objects: &self.objects,
            human_appearance: &self.human_appearance,
            object_appearance: &self.object_appearance,
        }
    }
}

fn prepare(
    img: &ImageDetections,
    cfg: &RunConfig,
    appearance: Option<&AppearanceFile>,
) -> Result<PreparedImage> {
    let (hi, oi) = cfg.profile.split(&img.detections);
    let pick = |idx: &[usize]| idx.iter().map(|&k| img.detections[k].clone()).collect();
    let (human_appearance, object_appearance) = match appearance {
        Some(a) => (a.rows(img.id, &hi)?, a.rows(img.id, &oi)?),
        None => (Vec::new(), Vec::new()),
    };
    Ok(PreparedImage {
        id: img.id,
        humans: pick(&hi),
        objects: pick(&oi),
        human_index: hi,
        object_index: oi,
        human_appearance,
        object_appearance,
    })
}

fn load_appearance(path: &Path, cfg: &ModelConfig) -> Result<AppearanceFile> {
    let a = AppearanceFile::load(path)?;
    if a.dim != cfg.appearance_dim {
        return Err(Error::Mismatch(format!(
            "{}: appearance dim {}, model expects {}",
            path.display(),
            a.dim,
            cfg.appearance_dim
        )));
    }
    Ok(a)
}

#[derive(Debug, Clone)]
pub struct FeaturizeArgs {
    pub detections: PathBuf,
    pub embeddings: PathBuf,
    /// Spatial ConvNet weights; a seeded initialization when absent.
    pub checkpoint: Option<PathBuf>,
    pub config: RunConfig,
    pub output: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ArchiveImage {
    pub id: u64,
    pub n_humans: usize,
    pub n_objects: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ArchiveMeta {
    pub schema_version: u32,
    pub config_hash: String,
    pub spatial_hash: String,
    pub node_dim: usize,
    pub images: Vec<ArchiveImage>,
}

fn archive_name(id: u64) -> String {
    format!("image.{id}")
}

/// Node features for every kept human-object pair, as a named-tensor
/// archive with one `[pairs × d]` tensor per image that has both humans and
/// objects.
pub fn cmd_featurize(args: &FeaturizeArgs) -> Result<ArchiveMeta> {
    let cfg = &args.config;
    let dets = DetectionFile::load(&args.detections)?;
    let table = EmbeddingTable::load(&args.embeddings, cfg.model.embed_dim)?;
    let spatial = match &args.checkpoint {
        Some(p) => {
            let ck = load_checkpoint(p)?;
            if ck.model.config.spatial != cfg.model.spatial || ck.model.config.embed_dim != cfg.model.embed_dim {
                return Err(Error::Mismatch(format!(
                    "{}: checkpoint feature dimensions differ from the configuration",
                    p.display()
                )));
            }
            ck.model.params.spatial
        }
        None => SpatialConvParams::init(&cfg.model.spatial, &mut ChaCha8Rng::seed_from_u64(cfg.train.seed)),
    };
    let pool = worker_pool()?;
    let per_image: Vec<(ArchiveImage, Option<Tensor>)> = pool.install(|| {
        dets.images
            .par_iter()
            .map(|img| {
                let p = prepare(img, cfg, None)?;
                let mut rows = Vec::with_capacity(p.humans.len() * p.objects.len());
                for h in &p.humans {
                    for o in &p.objects {
                        let f = build_feature(h, o, &table, &spatial, &cfg.model.spatial)?;
                        rows.extend_from_slice(f.values());
                    }
                }
                let n = p.humans.len() * p.objects.len();
                let t = (n > 0).then(|| {
                    let d = rows.len() / n;
                    Tensor::new(vec![n, d], rows).expect("finite features")
                });
                Ok((
                    ArchiveImage {
                        id: img.id,
                        n_humans: p.humans.len(),
                        n_objects: p.objects.len(),
                    },
                    t,
                ))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let meta = ArchiveMeta {
        schema_version: SCHEMA_VERSION,
        config_hash: cfg.hash(),
        spatial_hash: spatial_params_hash(&spatial),
        node_dim: cfg.model.node_dim()?,
        images: per_image.iter().map(|(m, _)| m.clone()).collect(),
    };
    let named: Vec<(String, &Tensor)> = per_image
        .iter()
        .filter_map(|(m, t)| t.as_ref().map(|t| (archive_name(m.id), t)))
        .collect();
    write_tensors(&args.output, &serde_json::to_value(&meta).expect("serializes"), &named)?;
    info!("wrote features for {} images to {}", meta.images.len(), args.output.display());
    Ok(meta)
}

#[derive(Debug, Clone)]
pub struct InferArgs {
    pub detections: PathBuf,
    pub appearance: PathBuf,
    pub checkpoint: PathBuf,
    /// Archive from `cmd_featurize`; otherwise features are computed from
    /// `embeddings`.
    pub features: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    /// Profile and graph settings; dimensions must match the checkpoint.
    pub config: RunConfig,
    pub output: PathBuf,
}

fn dims_only(m: &ModelConfig) -> ModelConfig {
    ModelConfig {
        iters_human: 0,
        iters_object: 0,
        human_graph: true,
        object_graph: true,
        ..*m
    }
}

/// Loads a checkpoint and applies the graph settings of `cfg` to it.
pub fn model_for(checkpoint: &Path, cfg: &RunConfig) -> Result<Model> {
    let ck = load_checkpoint(checkpoint)?;
    if dims_only(&ck.model.config) != dims_only(&cfg.model) {
        return Err(Error::Mismatch(format!(
            "{}: checkpoint dimensions {:?} differ from configuration {:?}",
            checkpoint.display(),
            dims_only(&ck.model.config),
            dims_only(&cfg.model)
        )));
    }
    if ck.model.catalog != cfg.profile.catalog {
        return Err(Error::Mismatch(format!(
            "{}: checkpoint action catalog differs from the profile",
            checkpoint.display()
        )));
    }
    let mut model = ck.model;
    model.config = cfg.model;
    Ok(model)
}

pub fn cmd_infer(args: &InferArgs) -> Result<PredictionFile> {
    let cfg = &args.config;
    let model = model_for(&args.checkpoint, cfg)?;
    let dets = DetectionFile::load(&args.detections)?;
    let appearance = load_appearance(&args.appearance, &cfg.model)?;
    let archive = match &args.features {
        Some(p) => {
            let nt = read_tensors(p)?;
            let meta: ArchiveMeta = serde_json::from_value(nt.metadata.clone()).map_err(|source| {
                Error::Json {
                    path: p.clone(),
                    source,
                }
            })?;
            if meta.spatial_hash != spatial_params_hash(&model.params.spatial) {
                return Err(Error::Mismatch(format!(
                    "{}: features were computed with different spatial weights",
                    p.display()
                )));
            }
            if meta.node_dim != cfg.model.node_dim()? {
                return Err(Error::Mismatch(format!(
                    "{}: node dim {} differs from the model's {}",
                    p.display(),
                    meta.node_dim,
                    cfg.model.node_dim()?
                )));
            }
            Some(nt)
        }
        None => None,
    };
    let table = match (&archive, &args.embeddings) {
        (Some(_), _) => None,
        (None, Some(p)) => Some(EmbeddingTable::load(p, cfg.model.embed_dim)?),
        (None, None) => {
            return Err(Error::Input("either a feature archive or embeddings is required".into()))
        }
    };
    let pool = worker_pool()?;
    let per_image: Vec<Vec<PredictionTriplet>> = pool.install(|| {
        dets.images
            .par_iter()
            .map(|img| {
                let p = prepare(img, cfg, Some(&appearance))?;
                let nodes = match &archive {
                    Some(nt) if !p.humans.is_empty() && !p.objects.is_empty() => {
                        let t = nt.get(&archive_name(img.id)).ok_or_else(|| {
                            Error::Mismatch(format!("feature archive has no entry for image {}", img.id))
                        })?;
                        let d = t.shape()[1];
                        let rows = t.data().chunks(d).map(<[f64]>::to_vec).collect();
                        Some(
                            NodeFeatures::from_rows(p.humans.len(), p.objects.len(), rows)
                                .map_err(|e| Error::Mismatch(format!("image {}: {e}", img.id)))?,
                        )
                    }
                    _ => None,
                };
                let source = match &table {
                    Some(t) => NodeSource::Compute(t),
                    None => NodeSource::Precomputed(nodes.as_ref()),
                };
                infer_image(&model, img.id, &p.input(), source)
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let triplets: Vec<PredictionTriplet> = per_image.into_iter().flatten().collect();
    let out = PredictionFile::from_triplets(&triplets, &model.catalog, &cfg.hash());
    write_json(&args.output, &out)?;
    info!("wrote {} predictions to {}", triplets.len(), args.output.display());
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct TrainArgs {
    pub detections: PathBuf,
    pub appearance: PathBuf,
    pub annotations: PathBuf,
    pub embeddings: PathBuf,
    pub config: RunConfig,
    pub output: PathBuf,
    /// Loss curve; defaults to the checkpoint path with a `.csv` extension.
    pub loss_csv: Option<PathBuf>,
}

/// Training images with labels transferred from the annotations to the kept
/// detections (best IoU ≥ the configured threshold, same category).
pub fn training_images(
    dets: &DetectionFile,
    appearance: &AppearanceFile,
    annotations: &AnnotationFile,
    cfg: &RunConfig,
) -> Result<Vec<TrainImage>> {
    let cat = &cfg.profile.catalog;
    let mut out = Vec::with_capacity(dets.images.len());
    for img in &dets.images {
        let p = prepare(img, cfg, Some(appearance))?;
        let (nh, no, na) = (p.humans.len(), p.objects.len(), cat.len());
        let mut pair_labels = vec![vec![0.0; na]; nh * no];
        let mut human_labels = vec![vec![0.0; na]; nh];
        let best = |dets: &[Detection], b: &crate::geometry::BBox, category: Option<&str>| {
            dets.iter()
                .enumerate()
                .filter(|(_, d)| category.is_none_or(|c| d.category == c))
                .map(|(k, d)| (k, iou(&d.bbox, b)))
                .filter(|&(_, v)| v >= cfg.iou_thresh)
                .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
                .map(|(k, _)| k)
        };
        let triplets = annotations
            .images
            .iter()
            .filter(|a| a.image_id == img.id)
            .flat_map(|a| &a.triplets);
        for t in triplets {
            let a = cat.index_of(&t.action).ok_or_else(|| {
                Error::Input(format!("image {}: unknown action {:?}", img.id, t.action))
            })?;
            let Some(i) = best(&p.humans, &t.human_box, None) else {
                warn!("image {}: no kept human for a {} annotation", img.id, t.action);
                continue;
            };
            match &t.object_box {
                None => human_labels[i][a] = 1.0,
                Some(ob) => match best(&p.objects, ob, t.object_category.as_deref()) {
                    Some(j) => pair_labels[i * no + j][a] = 1.0,
                    None => warn!("image {}: no kept object for a {} annotation", img.id, t.action),
                },
            }
        }
        out.push(TrainImage {
            id: img.id,
            humans: p.humans,
            objects: p.objects,
            human_appearance: p.human_appearance,
            object_appearance: p.object_appearance,
            pair_labels,
            human_labels,
        });
    }
    Ok(out)
}

/// Deterministic train/validation split.
pub fn split_validation(images: Vec<TrainImage>, fraction: f64, seed: u64) -> (Vec<TrainImage>, Vec<TrainImage>) {
    let n_val = (images.len() as f64 * fraction).round() as usize;
    let mut idx: Vec<usize> = (0..images.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x005E_ED0F_5A11));
    let val_set: std::collections::BTreeSet<usize> = idx[..n_val].iter().copied().collect();
    let (val, train): (Vec<_>, Vec<_>) = images
        .into_iter()
        .enumerate()
        .partition(|(k, _)| val_set.contains(k));
    (
        train.into_iter().map(|(_, i)| i).collect(),
        val.into_iter().map(|(_, i)| i).collect(),
    )
}

pub fn write_loss_csv(path: &Path, outcome: &TrainOutcome, config_hash: &str) -> Result<()> {
    let mut text = Vec::new();
    writeln!(text, "# config_hash={config_hash}").expect("write to memory");
    writeln!(text, "epoch,train_loss,val_loss").expect("write to memory");
    for r in &outcome.history {
        writeln!(text, "{},{:?},{:?}", r.epoch, r.train_loss, r.val_loss).expect("write to memory");
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn cmd_train(args: &TrainArgs) -> Result<TrainOutcome> {
    let cfg = &args.config;
    cfg.validate()?;
    let dets = DetectionFile::load(&args.detections)?;
    let appearance = load_appearance(&args.appearance, &cfg.model)?;
    let annotations = AnnotationFile::load(&args.annotations)?;
    let table = EmbeddingTable::load(&args.embeddings, cfg.model.embed_dim)?;
    let images = training_images(&dets, &appearance, &annotations, cfg)?;
    let (train_set, val_set) = split_validation(images, cfg.val_fraction, cfg.train.seed);
    info!("training on {} images, validating on {}", train_set.len(), val_set.len());
    let model = Model::init(
        cfg.model,
        cfg.profile.catalog.clone(),
        &mut ChaCha8Rng::seed_from_u64(cfg.train.seed),
    )?;
    let outcome = train(model, &train_set, &val_set, &table, &cfg.train)?;
    let hash = cfg.hash();
    save_checkpoint(&args.output, &outcome.model, Some(&outcome.optim), &hash)?;
    let csv = args
        .loss_csv
        .clone()
        .unwrap_or_else(|| args.output.with_extension("csv"));
    write_loss_csv(&csv, &outcome, &hash)?;
    info!(
        "best epoch {} of {}; checkpoint {}",
        outcome.best_epoch,
        outcome.history.len(),
        args.output.display()
    );
    Ok(outcome)
}

#[derive(Debug, Clone)]
pub struct EvalArgs {
    pub predictions: PathBuf,
    pub groundtruth: PathBuf,
    pub config: RunConfig,
    /// Composite (action, category) classes to evaluate instead of actions.
    pub class_map: Option<PathBuf>,
    /// Restrict to images carrying this tag.
    pub subset: Option<String>,
    pub output: Option<PathBuf>,
}

pub fn cmd_eval(args: &EvalArgs) -> Result<EvalReport> {
    let cfg = &args.config;
    let cat = &cfg.profile.catalog;
    let preds = PredictionFile::load(&args.predictions)?.triplets(cat)?;
    let ann = AnnotationFile::load(&args.groundtruth)?;
    let gts = ann.ground_truth(cat)?;
    let (preds, gts) = match &args.subset {
        None => (preds, gts),
        Some(tag) => {
            let ids: std::collections::BTreeSet<u64> = ann.tagged(tag).into_iter().collect();
            (
                preds.into_iter().filter(|p| ids.contains(&p.image_id)).collect(),
                gts.into_iter().filter(|g| ids.contains(&g.image_id)).collect(),
            )
        }
    };
    let report = match &args.class_map {
        None => role_map(&preds, &gts, cat, cfg.iou_thresh),
        Some(p) => {
            let classes: HoiClassMap = read_json(p)?;
            role_map_by_class(&preds, &gts, cat, &classes, cfg.iou_thresh)
        }
    };
    let out = EvalReport {
        schema_version: SCHEMA_VERSION,
        config_hash: cfg.hash(),
        iou_thresh: cfg.iou_thresh,
        subset: args.subset.clone(),
        per_class: report.per_class,
        mean_ap: report.mean_ap,
    };
    if let Some(p) = &args.output {
        write_json(p, &out)?;
    }
    Ok(out)
}

/// Plain-text table of an evaluation report.
pub fn format_report(r: &EvalReport) -> String {
    let mut s = String::new();
    let width = r.per_class.iter().map(|c| c.name.len()).max().unwrap_or(4).max(6);
    s.push_str(&format!("{:<width$}  {:>7}  {:>5}  {:>6}\n", "class", "AP", "#gt", "#pred"));
    for c in &r.per_class {
        let ap = c.ap.map_or("-".to_string(), |v| format!("{:.4}", v));
        s.push_str(&format!("{:<width$}  {:>7}  {:>5}  {:>6}\n", c.name, ap, c.n_gt, c.n_pred));
    }
    s.push_str(&format!("{:<width$}  {:>7.4}\n", "mean", r.mean_ap));
    s
}

#[derive(Debug, Clone)]
pub struct GenArgs {
    pub synth: SynthConfig,
    pub output_dir: PathBuf,
}

/// Writes the corpus plus a matching `config.json`.
pub fn cmd_gen_synth(args: &GenArgs) -> Result<CorpusPaths> {
    let corpus = generate(&args.synth);
    let paths = write_corpus(&corpus, &args.output_dir)?;
    let mut cfg = RunConfig::synthetic();
    cfg.model.embed_dim = args.synth.embed_dim;
    cfg.model.appearance_dim = args.synth.appearance_dim;
    cfg.train.seed = args.synth.seed;
    write_json(&args.output_dir.join("config.json"), &cfg)?;
    Ok(paths)
}
