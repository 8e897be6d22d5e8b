//! Synthetic corpus whose labels are a fixed function of box layout,
//! object category and a human posture signal.
//!
//! Relations are read off the human box `(x, y, w, h)`:
//!
//! * right hand: object's left edge on the human's right edge, vertically
//!   centred at `y + round(0.45h)`;
//! * left hand: mirror image of the right hand;
//! * seat: a chair with top edge at `y + round(0.55h)`;
//! * feet: object's left edge on the human's right edge, bottoms aligned.
//!
//! Labels: cup at hand → `hold`; racket at hand → `swing`; chair at seat →
//! `sit_on`; ball at feet → `kick`; ball at the right hand → `play` when the
//! same human has a racket at the left hand, otherwise `hold`; `stand` when
//! the posture feature is positive.
//!
//! Context scenes hold two equally sized humans, each with a ball at the
//! right hand, and exactly one of them with a racket. The two human-ball
//! pairs have identical layouts and categories but different labels, so no
//! model that looks at one pair at a time can separate them.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::geometry::{BBox, Detection};
use crate::pipeline::config::SCHEMA_VERSION;
use crate::pipeline::schema::{
    write_json, AnnotatedTriplet, AnnotationFile, AppearanceEntry, AppearanceFile, DetectionFile,
    ImageAnnotations, ImageAppearance, ImageDetections,
};
use crate::spatial_semantic::EmbeddingTable;

pub const CONTEXT_TAG: &str = "context";
pub const OBJECT_CATEGORIES: [&str; 5] = ["cup", "chair", "ball", "racket", "book"];
const PERSON: &str = "person";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub context_fraction: f64,
    pub embed_dim: usize,
    pub appearance_dim: usize,
    pub width: u32,
    pub height: u32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            n_train: 200,
            n_test: 50,
            context_fraction: 0.3,
            embed_dim: 16,
            appearance_dim: 8,
            width: 720,
            height: 480,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSplit {
    pub detections: DetectionFile,
    pub appearance: AppearanceFile,
    pub annotations: AnnotationFile,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub train: SynthSplit,
    pub test: SynthSplit,
    pub embeddings: EmbeddingTable,
}

/// Paths written by [`write_corpus`].
#[derive(Debug, Clone)]
pub struct CorpusPaths {
    pub embeddings: PathBuf,
    pub train_detections: PathBuf,
    pub train_appearance: PathBuf,
    pub train_annotations: PathBuf,
    pub test_detections: PathBuf,
    pub test_appearance: PathBuf,
    pub test_annotations: PathBuf,
}

impl CorpusPaths {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            embeddings: dir.join("embeddings.txt"),
            train_detections: dir.join("train_detections.json"),
            train_appearance: dir.join("train_appearance.json"),
            train_annotations: dir.join("train_annotations.json"),
            test_detections: dir.join("test_detections.json"),
            test_appearance: dir.join("test_appearance.json"),
            test_annotations: dir.join("test_annotations.json"),
        }
    }
}

pub fn write_corpus(corpus: &SynthCorpus, dir: &Path) -> Result<CorpusPaths> {
    std::fs::create_dir_all(dir).map_err(|e| crate::Error::io(dir, e))?;
    let p = CorpusPaths::in_dir(dir);
    std::fs::write(&p.embeddings, corpus.embeddings.to_text())
        .map_err(|e| crate::Error::io(&p.embeddings, e))?;
    write_json(&p.train_detections, &corpus.train.detections)?;
    write_json(&p.train_appearance, &corpus.train.appearance)?;
    write_json(&p.train_annotations, &corpus.train.annotations)?;
    write_json(&p.test_detections, &corpus.test.detections)?;
    write_json(&p.test_appearance, &corpus.test.appearance)?;
    write_json(&p.test_annotations, &corpus.test.annotations)?;
    Ok(p)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Relation {
    RightHand,
    LeftHand,
    Seat,
    Feet,
}

fn hand_y(h: &BBox) -> f64 {
    h.y1() + (0.45 * h.height()).round()
}

/// Layout relation of an object to a human, if any.
pub fn relation(human: &BBox, object: &BBox, category: &str) -> Option<Relation> {
    let (w, h) = (human.width(), human.height());
    let cy = (object.y1() + object.y2()) / 2.0;
    let at_hand_height = (cy - hand_y(human)).abs() <= 1.0;
    if category == "chair" {
        let seat = object.y1() == human.y1() + (0.55 * h).round()
            && object.x1() == human.x1() - (0.1 * w).round();
        return seat.then_some(Relation::Seat);
    }
    if object.x1() == human.x2() && object.y2() == human.y2() {
        return Some(Relation::Feet);
    }
    if object.x1() == human.x2() && at_hand_height {
        return Some(Relation::RightHand);
    }
    if object.x2() == human.x1() && at_hand_height {
        return Some(Relation::LeftHand);
    }
    None
}

/// `(human index, action, object index)` triplets implied by the labeling
/// rule. `posture` holds the first appearance value of each detection.
pub fn apply_rule(dets: &[Detection], posture: &[f64]) -> BTreeSet<(usize, &'static str, Option<usize>)> {
    let mut out = BTreeSet::new();
    let humans: Vec<usize> = (0..dets.len()).filter(|&k| dets[k].category == PERSON).collect();
    for &i in &humans {
        if posture[i] > 0.0 {
            out.insert((i, "stand", None));
        }
        let rels: Vec<(usize, Relation)> = (0..dets.len())
            .filter(|&j| dets[j].category != PERSON)
            .filter_map(|j| relation(&dets[i].bbox, &dets[j].bbox, &dets[j].category).map(|r| (j, r)))
            .collect();
        let racket_left = rels
            .iter()
            .any(|&(j, r)| r == Relation::LeftHand && dets[j].category == "racket");
        for &(j, r) in &rels {
            let action = match (dets[j].category.as_str(), r) {
                ("cup", Relation::RightHand | Relation::LeftHand) => Some("hold"),
                ("racket", Relation::RightHand | Relation::LeftHand) => Some("swing"),
                ("chair", Relation::Seat) => Some("sit_on"),
                ("ball", Relation::Feet) => Some("kick"),
                ("ball", Relation::RightHand) if racket_left => Some("play"),
                ("ball", Relation::RightHand) => Some("hold"),
                _ => None,
            };
            if let Some(a) = action {
                out.insert((i, a, Some(j)));
            }
        }
    }
    out
}

fn size_of(category: &str, w: f64, h: f64) -> (f64, f64) {
    match category {
        "cup" => ((0.3 * w).round(), (0.4 * w).round()),
        "ball" => ((0.4 * w).round(), (0.4 * w).round()),
        "racket" => ((0.4 * w).round(), (0.9 * w).round()),
        "book" => ((0.45 * w).round(), (0.35 * w).round()),
        "chair" => ((1.2 * w).round(), (0.5 * h).round()),
        _ => (w, h),
    }
}

fn place(human: &BBox, category: &str, rel: Relation) -> BBox {
    let (w, h) = (human.width(), human.height());
    let (ow, oh) = size_of(category, w, h);
    let top = hand_y(human) - (oh / 2.0).floor();
    let (x1, y1) = match rel {
        Relation::RightHand => (human.x2(), top),
        Relation::LeftHand => (human.x1() - ow, top),
        Relation::Seat => (human.x1() - (0.1 * w).round(), human.y1() + (0.55 * h).round()),
        Relation::Feet => (human.x2(), human.y2() - oh),
    };
    BBox::new(x1, y1, x1 + ow, y1 + oh).expect("positive object size")
}

#[derive(Debug, Clone, Copy)]
enum Activity {
    HoldCup,
    HoldBall,
    Swing,
    Play,
    Sit,
    Kick,
    Idle,
}

const ACTIVITIES: [Activity; 7] = [
    Activity::HoldCup,
    Activity::HoldBall,
    Activity::Swing,
    Activity::Play,
    Activity::Sit,
    Activity::Kick,
    Activity::Idle,
];

struct Scene {
    dets: Vec<Detection>,
    standing: Vec<Option<bool>>,
    context: bool,
}

impl Scene {
    fn push(&mut self, d: Detection, standing: Option<bool>) -> usize {
        self.dets.push(d);
        self.standing.push(standing);
        self.dets.len() - 1
    }
}

fn score(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    (rng.random_range(lo..hi) * 1000.0).round() / 1000.0
}

fn add_object(scene: &mut Scene, rng: &mut ChaCha8Rng, human: &BBox, cat: &str, rel: Relation) {
    let s = score(rng, 0.7, 1.0);
    scene.push(
        Detection::new(place(human, cat, rel), cat, s).expect("valid detection"),
        None,
    );
}

fn human_box(rng: &mut ChaCha8Rng, slot_lo: f64, slot_hi: f64, w: f64, height: f64) -> BBox {
    let h = (2.5 * w).round();
    let lo = (slot_lo + (0.6 * w).ceil() + 2.0) as i64;
    let hi = (slot_hi - (1.6 * w).ceil() - 2.0) as i64;
    let x = rng.random_range(lo..=hi.max(lo)) as f64;
    let y = rng.random_range(60..=(height - h - 20.0) as i64) as f64;
    BBox::new(x, y, x + w, y + h).expect("positive human size")
}

fn add_human(scene: &mut Scene, rng: &mut ChaCha8Rng, b: BBox, standing: bool) {
    let s = score(rng, 0.85, 1.0);
    scene.push(Detection::new(b, PERSON, s).expect("valid detection"), Some(standing));
}

fn normal_scene(rng: &mut ChaCha8Rng, cfg: &SynthConfig) -> Scene {
    let mut scene = Scene {
        dets: Vec::new(),
        standing: Vec::new(),
        context: false,
    };
    let n = rng.random_range(1..=3usize);
    let slot = cfg.width as f64 / n as f64;
    for k in 0..n {
        let w = rng.random_range(40..=70) as f64;
        let hb = human_box(rng, k as f64 * slot, (k + 1) as f64 * slot, w, cfg.height as f64);
        let act = *ACTIVITIES.choose(rng).expect("non-empty");
        let standing = match act {
            Activity::Sit => false,
            _ => rng.random_bool(0.6),
        };
        add_human(&mut scene, rng, hb, standing);
        match act {
            Activity::HoldCup => add_object(&mut scene, rng, &hb, "cup", Relation::RightHand),
            Activity::HoldBall => add_object(&mut scene, rng, &hb, "ball", Relation::RightHand),
            Activity::Swing => add_object(&mut scene, rng, &hb, "racket", Relation::RightHand),
            Activity::Play => {
                add_object(&mut scene, rng, &hb, "ball", Relation::RightHand);
                add_object(&mut scene, rng, &hb, "racket", Relation::LeftHand);
            }
            Activity::Sit => add_object(&mut scene, rng, &hb, "chair", Relation::Seat),
            Activity::Kick => add_object(&mut scene, rng, &hb, "ball", Relation::Feet),
            Activity::Idle => {}
        }
    }
    scene
}

fn context_scene(rng: &mut ChaCha8Rng, cfg: &SynthConfig) -> Scene {
    let mut scene = Scene {
        dets: Vec::new(),
        standing: Vec::new(),
        context: true,
    };
    let w = rng.random_range(40..=70) as f64;
    let player = rng.random_range(0..2usize);
    let slot = cfg.width as f64 / 2.0;
    for k in 0..2 {
        let hb = human_box(rng, k as f64 * slot, (k + 1) as f64 * slot, w, cfg.height as f64);
        let standing = rng.random_bool(0.6);
        add_human(&mut scene, rng, hb, standing);
        add_object(&mut scene, rng, &hb, "ball", Relation::RightHand);
        if k == player {
            add_object(&mut scene, rng, &hb, "racket", Relation::LeftHand);
        }
    }
    scene
}

fn add_clutter(scene: &mut Scene, rng: &mut ChaCha8Rng, cfg: &SynthConfig) {
    for _ in 0..rng.random_range(0..=2usize) {
        let cat = *["book", "ball", "cup"].choose(rng).expect("non-empty");
        let (ow, oh) = size_of(cat, 50.0, 125.0);
        let x = rng.random_range(0..(cfg.width as i64 - ow as i64)) as f64;
        let y = rng.random_range(2..=(50 - oh as i64)) as f64;
        let s = score(rng, 0.7, 1.0);
        let b = BBox::new(x, y, x + ow, y + oh).expect("positive size");
        scene.push(Detection::new(b, cat, s).expect("valid detection"), None);
    }
    if rng.random_bool(0.2) {
        let x = rng.random_range(0..(cfg.width as i64 - 60)) as f64;
        let b = BBox::new(x, 0.0, x + 50.0, 40.0).expect("positive size");
        let s = score(rng, 0.2, 0.4);
        scene.push(Detection::new(b, PERSON, s).expect("valid detection"), Some(false));
    }
    if rng.random_bool(0.2) {
        let x = rng.random_range(0..(cfg.width as i64 - 40)) as f64;
        let b = BBox::new(x, 5.0, x + 20.0, 25.0).expect("positive size");
        let s = score(rng, 0.02, 0.08);
        scene.push(Detection::new(b, "cup", s).expect("valid detection"), None);
    }
}

fn appearance(scene: &Scene, rng: &mut ChaCha8Rng, dim: usize) -> Vec<Vec<f64>> {
    let noise = Normal::new(0.0, 0.1).expect("valid normal");
    let round = |v: f64| (v * 1e4).round() / 1e4;
    scene
        .dets
        .iter()
        .zip(&scene.standing)
        .map(|(d, st)| {
            let mut v: Vec<f64> = (0..dim).map(|_| noise.sample(rng)).collect();
            match st {
                Some(standing) => {
                    v[0] += if *standing { 1.0 } else { -1.0 };
                    if dim > 6 {
                        v[6] += 1.0;
                    }
                }
                None => {
                    let c = OBJECT_CATEGORIES
                        .iter()
                        .position(|&c| c == d.category)
                        .expect("known category");
                    if 1 + c < dim {
                        v[1 + c] += 1.0;
                    }
                }
            }
            v.into_iter().map(round).collect()
        })
        .collect()
}

fn make_split(rng: &mut ChaCha8Rng, cfg: &SynthConfig, first_id: u64, n: usize) -> SynthSplit {
    let mut det_images = Vec::with_capacity(n);
    let mut app_images = Vec::with_capacity(n);
    let mut ann_images = Vec::with_capacity(n);
    let n_context = (n as f64 * cfg.context_fraction).round() as usize;
    let mut kinds: Vec<bool> = (0..n).map(|k| k < n_context).collect();
    kinds.shuffle(rng);
    for (k, &is_context) in kinds.iter().enumerate() {
        let id = first_id + k as u64;
        let mut scene = if is_context {
            context_scene(rng, cfg)
        } else {
            normal_scene(rng, cfg)
        };
        add_clutter(&mut scene, rng, cfg);
        let mut order: Vec<usize> = (0..scene.dets.len()).collect();
        order.shuffle(rng);
        let scene = Scene {
            dets: order.iter().map(|&o| scene.dets[o].clone()).collect(),
            standing: order.iter().map(|&o| scene.standing[o]).collect(),
            context: scene.context,
        };
        let app = appearance(&scene, rng, cfg.appearance_dim);
        let posture: Vec<f64> = app.iter().map(|v| v[0]).collect();
        let triplets = apply_rule(&scene.dets, &posture)
            .into_iter()
            .filter(|&(i, _, _)| scene.dets[i].score > 0.5)
            .map(|(i, a, j)| AnnotatedTriplet {
                human_box: scene.dets[i].bbox,
                action: a.to_string(),
                object_box: j.map(|j| scene.dets[j].bbox),
                object_category: j.map(|j| scene.dets[j].category.clone()),
            })
            .collect();
        ann_images.push(ImageAnnotations {
            image_id: id,
            tags: if scene.context {
                vec![CONTEXT_TAG.to_string()]
            } else {
                Vec::new()
            },
            triplets,
        });
        app_images.push(ImageAppearance {
            id,
            features: app
                .into_iter()
                .enumerate()
                .map(|(index, values)| AppearanceEntry { index, values })
                .collect(),
        });
        det_images.push(ImageDetections {
            id,
            width: cfg.width as f64,
            height: cfg.height as f64,
            detections: scene.dets,
        });
    }
    SynthSplit {
        detections: DetectionFile::new(det_images),
        appearance: AppearanceFile {
            schema_version: SCHEMA_VERSION,
            dim: cfg.appearance_dim,
            images: app_images,
        },
        annotations: AnnotationFile::new(ann_images),
    }
}

/// Deterministic in `cfg`.
pub fn generate(cfg: &SynthConfig) -> SynthCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = Normal::new(0.0, 1.0).expect("valid normal");
    let mut embeddings = EmbeddingTable::new(cfg.embed_dim);
    for cat in std::iter::once(PERSON).chain(OBJECT_CATEGORIES) {
        let v = (0..cfg.embed_dim)
            .map(|_| (normal.sample(&mut rng) * 1e4_f64).round() / 1e4)
            .collect();
        embeddings.insert(cat, v).expect("fresh category");
    }
    let train = make_split(&mut rng, cfg, 1, cfg.n_train);
    let test = make_split(&mut rng, cfg, 100_001, cfg.n_test);
    SynthCorpus {
        train,
        test,
        embeddings,
    }
}
