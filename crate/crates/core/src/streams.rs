//! Action catalog, the per-stream classification heads and score fusion.
//!
//! Four heads score every action: one on the human appearance feature, one
//! on the object appearance feature, and one on each subgraph's refined
//! node feature. At inference the per-action scores are multiplied with the
//! two detection confidences.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::ops::{matvec, matvec_t, outer_accumulate, sigmoid_scalar};
use crate::numkernel::Tensor;
use crate::spatial_semantic::fill_normal;

pub use crate::model::infer_image;

pub const DEFAULT_HIDDEN: usize = 1024;
pub const DEFAULT_APPEARANCE_DIM: usize = 2048;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionSpec {
    pub name: String,
    pub requires_object: bool,
}

/// Ordered action classes. The index of an action is its position here.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionCatalog {
    actions: Vec<ActionSpec>,
}

const VCOCO_HUMAN_ONLY: [&str; 5] = ["stand", "walk", "run", "smile", "point"];
const VCOCO_WITH_OBJECT: [&str; 24] = [
    "hold_obj",
    "sit_instr",
    "ride_instr",
    "look_obj",
    "hit_instr",
    "hit_obj",
    "eat_obj",
    "eat_instr",
    "jump_instr",
    "lay_instr",
    "talk_on_phone_instr",
    "carry_obj",
    "throw_obj",
    "catch_obj",
    "cut_instr",
    "cut_obj",
    "work_on_computer_instr",
    "ski_instr",
    "surf_instr",
    "skateboard_instr",
    "drink_instr",
    "kick_obj",
    "read_obj",
    "snowboard_instr",
];

/// Actions of the synthetic corpus; `stand` is the only human-only one.
pub const SYNTHETIC_ACTIONS: [(&str, bool); 6] = [
    ("stand", false),
    ("hold", true),
    ("sit_on", true),
    ("kick", true),
    ("swing", true),
    ("play", true),
];

impl ActionCatalog {
    pub fn new(actions: Vec<ActionSpec>) -> Result<Self> {
        if actions.is_empty() {
            return Err(Error::Input("action catalog is empty".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for a in &actions {
            if a.name.is_empty() || !seen.insert(a.name.as_str()) {
                return Err(Error::Input(format!("bad or duplicate action name {:?}", a.name)));
            }
        }
        Ok(Self { actions })
    }

    fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, bool)>) -> Self {
        let actions = pairs
            .into_iter()
            .map(|(name, requires_object)| ActionSpec {
                name: name.to_string(),
                requires_object,
            })
            .collect();
        Self { actions }
    }

    /// 29 actions, five of them without an object.
    pub fn vcoco() -> Self {
        Self::from_pairs(
            VCOCO_HUMAN_ONLY
                .iter()
                .map(|&n| (n, false))
                .chain(VCOCO_WITH_OBJECT.iter().map(|&n| (n, true))),
        )
    }

    /// 117 object-agnostic actions. Names are placeholders unless a catalog
    /// file supplies the real vocabulary.
    pub fn hico() -> Self {
        let names: Vec<String> = (0..117).map(|k| format!("action_{k:03}")).collect();
        Self::from_pairs(names.iter().map(|n| (n.as_str(), true)))
    }

    pub fn synthetic() -> Self {
        Self::from_pairs(SYNTHETIC_ACTIONS)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cat: Self = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        Self::new(cat.actions)
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn actions(&self) -> &[ActionSpec] {
        &self.actions
    }

    pub fn name(&self, a: usize) -> &str {
        &self.actions[a].name
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.actions.iter().position(|a| a.name == name)
    }

    pub fn requires_object(&self, a: usize) -> bool {
        self.actions[a].requires_object
    }

    pub fn object_mask(&self) -> Vec<bool> {
        self.actions.iter().map(|a| a.requires_object).collect()
    }

    pub fn human_only_count(&self) -> usize {
        self.actions.iter().filter(|a| !a.requires_object).count()
    }
}

/// One hidden ReLU layer followed by a per-class sigmoid.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamHead {
    /// `[hidden × in]`
    pub mlp_weight: Tensor,
    pub mlp_bias: Tensor,
    /// `[A × hidden]`
    pub cls_weight: Tensor,
    pub cls_bias: Tensor,
}

impl StreamHead {
    pub fn zeros(in_dim: usize, hidden: usize, n_actions: usize) -> Self {
        Self {
            mlp_weight: Tensor::zeros(&[hidden, in_dim]),
            mlp_bias: Tensor::zeros(&[hidden]),
            cls_weight: Tensor::zeros(&[n_actions, hidden]),
            cls_bias: Tensor::zeros(&[n_actions]),
        }
    }

    pub fn init<R: Rng + ?Sized>(in_dim: usize, hidden: usize, n_actions: usize, rng: &mut R) -> Self {
        let mut h = Self::zeros(in_dim, hidden, n_actions);
        fill_normal(&mut h.mlp_weight, (2.0 / in_dim as f64).sqrt(), rng);
        fill_normal(&mut h.cls_weight, (1.0 / hidden as f64).sqrt(), rng);
        h
    }

    pub fn in_dim(&self) -> usize {
        self.mlp_weight.shape()[1]
    }

    pub fn hidden(&self) -> usize {
        self.mlp_weight.shape()[0]
    }

    pub fn n_actions(&self) -> usize {
        self.cls_weight.shape()[0]
    }
}

/// Per-class probabilities from one stream.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionScores {
    pub values: Vec<f64>,
}

impl ActionScores {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct HeadCache {
    input: Vec<f64>,
    hidden: Vec<f64>,
    scores: Vec<f64>,
}

impl HeadCache {
    pub fn scores(&self) -> &[f64] {
        &self.scores
    }
}

pub fn stream_forward(x: &[f64], head: &StreamHead) -> Result<(ActionScores, HeadCache)> {
    if x.len() != head.in_dim() {
        return Err(Error::dim(format!(
            "stream head expects {} inputs, got {}",
            head.in_dim(),
            x.len()
        )));
    }
    let (din, hid, a) = (head.in_dim(), head.hidden(), head.n_actions());
    let mut hidden = matvec(head.mlp_weight.data(), hid, din, x);
    for (h, b) in hidden.iter_mut().zip(head.mlp_bias.data()) {
        *h = (*h + b).max(0.0);
    }
    let logits = matvec(head.cls_weight.data(), a, hid, &hidden);
    let scores: Vec<f64> = logits
        .iter()
        .zip(head.cls_bias.data())
        .map(|(z, b)| sigmoid_scalar(z + b))
        .collect();
    Ok((
        ActionScores {
            values: scores.clone(),
        },
        HeadCache {
            input: x.to_vec(),
            hidden,
            scores,
        },
    ))
}

pub fn stream_scores(x: &[f64], head: &StreamHead) -> Result<ActionScores> {
    stream_forward(x, head).map(|(s, _)| s)
}

/// Backward from gradients on the pre-sigmoid logits. Returns the gradient
/// with respect to the head input.
pub fn stream_backward_logits(
    cache: &HeadCache,
    head: &StreamHead,
    d_logits: &[f64],
    grads: &mut StreamHead,
) -> Vec<f64> {
    let (din, hid, a) = (head.in_dim(), head.hidden(), head.n_actions());
    outer_accumulate(grads.cls_weight.data_mut(), d_logits, &cache.hidden);
    for (g, d) in grads.cls_bias.data_mut().iter_mut().zip(d_logits) {
        *g += d;
    }
    let mut d_hidden = matvec_t(head.cls_weight.data(), a, hid, d_logits);
    for (d, h) in d_hidden.iter_mut().zip(&cache.hidden) {
        if *h <= 0.0 {
            *d = 0.0;
        }
    }
    outer_accumulate(grads.mlp_weight.data_mut(), &d_hidden, &cache.input);
    for (g, d) in grads.mlp_bias.data_mut().iter_mut().zip(&d_hidden) {
        *g += d;
    }
    matvec_t(head.mlp_weight.data(), hid, din, &d_hidden)
}

/// Backward from gradients on the sigmoid outputs.
pub fn stream_backward(
    cache: &HeadCache,
    head: &StreamHead,
    d_scores: &[f64],
    grads: &mut StreamHead,
) -> Vec<f64> {
    let d_logits: Vec<f64> = cache
        .scores
        .iter()
        .zip(d_scores)
        .map(|(s, g)| g * s * (1.0 - s))
        .collect();
    stream_backward_logits(cache, head, &d_logits, grads)
}

/// The per-pair factors entering the fused score. Missing subgraph streams
/// (disabled in the configuration) simply drop out of the product.
#[derive(Debug, Clone, Copy)]
pub struct FusionInputs<'a> {
    pub s_h: f64,
    pub s_o: f64,
    pub a_h: &'a ActionScores,
    pub a_o: &'a ActionScores,
    pub a_sp_h: Option<&'a ActionScores>,
    pub a_sp_o: Option<&'a ActionScores>,
}

impl FusionInputs<'_> {
    fn object_factors(&self, a: usize) -> impl Iterator<Item = f64> + '_ {
        [Some(self.a_h), Some(self.a_o), self.a_sp_h, self.a_sp_o]
            .into_iter()
            .flatten()
            .map(move |s| s.values[a])
    }
}

/// Fused score per action. Actions without an object score `s_h · a_h`.
pub fn fuse_streams(inp: &FusionInputs<'_>, catalog: &ActionCatalog) -> Vec<f64> {
    (0..catalog.len())
        .map(|a| {
            if catalog.requires_object(a) {
                inp.object_factors(a).fold(inp.s_h * inp.s_o, |acc, f| acc * f)
            } else {
                inp.s_h * inp.a_h.values[a]
            }
        })
        .collect()
}

/// Six-factor product with every stream present.
pub fn fuse(
    s_h: f64,
    s_o: f64,
    a_h: &ActionScores,
    a_o: &ActionScores,
    a_sp_h: &ActionScores,
    a_sp_o: &ActionScores,
    catalog: &ActionCatalog,
) -> Vec<f64> {
    fuse_streams(
        &FusionInputs {
            s_h,
            s_o,
            a_h,
            a_o,
            a_sp_h: Some(a_sp_h),
            a_sp_o: Some(a_sp_o),
        },
        catalog,
    )
}

/// Gradients of `Σ_a grad[a] · fused[a]` with respect to each stream's
/// scores, in the order human, object, human-centric, object-centric.
/// Entries for absent streams are empty.
pub fn fuse_backward(
    inp: &FusionInputs<'_>,
    catalog: &ActionCatalog,
    grad: &[f64],
) -> [Vec<f64>; 4] {
    let streams = [Some(inp.a_h), Some(inp.a_o), inp.a_sp_h, inp.a_sp_o];
    let mut out: [Vec<f64>; 4] = std::array::from_fn(|k| match streams[k] {
        Some(s) => vec![0.0; s.len()],
        None => Vec::new(),
    });
    for (a, &g) in grad.iter().enumerate() {
        if !catalog.requires_object(a) {
            out[0][a] += g * inp.s_h;
            continue;
        }
        for k in 0..4 {
            if streams[k].is_none() {
                continue;
            }
            let others = streams
                .iter()
                .enumerate()
                .filter(|&(m, s)| m != k && s.is_some())
                .fold(inp.s_h * inp.s_o, |acc, (_, s)| acc * s.unwrap().values[a]);
            out[k][a] += g * others;
        }
    }
    out
}
