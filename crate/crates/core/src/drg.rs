//! Relation graph over human-object pairs and attentional aggregation on the
//! human-centric and object-centric subgraphs.
//!
//! Every detected human `i` is paired with every object `j`, giving one HOI
//! node per pair. In the human-centric subgraph node `(i, j)` is connected to
//! `(i, j')` for all `j' ≠ j`; in the object-centric subgraph to `(i', j)` for
//! all `i' ≠ i`. One aggregation step updates every node from the previous
//! iteration's snapshot:
//!
//! ```text
//! u_m   = (W_q x_m)ᵀ (W_k x_c) / √d_k        for neighbors m of c
//! α     = softmax(u)
//! x_c'  = LayerNorm(x_c + relu(W Σ_m α_m x_m))
//! ```
//!
//! Nodes without neighbors are passed through untouched. Neighbors are summed
//! in a canonical order (lexicographic by feature value) so that relabeling
//! humans or objects permutes the output bit for bit.

use std::cmp::Ordering;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Detection;
use crate::numkernel::ops::{
    dot, layer_norm_backward, layer_norm_forward, matvec, matvec_t, outer_accumulate,
    softmax, softmax_backward, LayerNormCache, LAYER_NORM_EPS,
};
use crate::numkernel::Tensor;
use crate::spatial_semantic::fill_normal;

pub const DEFAULT_KEY_DIM: usize = 1024;
pub const DEFAULT_ITERATIONS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubgraphKind {
    HumanCentric,
    ObjectCentric,
}

impl SubgraphKind {
    pub const BOTH: [SubgraphKind; 2] = [SubgraphKind::HumanCentric, SubgraphKind::ObjectCentric];

    pub fn name(self) -> &'static str {
        match self {
            SubgraphKind::HumanCentric => "human",
            SubgraphKind::ObjectCentric => "object",
        }
    }
}

/// Per-node feature vectors, stacked row-major with node `(i, j)` at row
/// `i · n_objects + j`.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeFeatures {
    n_humans: usize,
    n_objects: usize,
    dim: usize,
    data: Vec<f64>,
}

impl NodeFeatures {
    pub fn zeros(n_humans: usize, n_objects: usize, dim: usize) -> Self {
        Self {
            n_humans,
            n_objects,
            dim,
            data: vec![0.0; n_humans * n_objects * dim],
        }
    }

    /// Builds from per-node rows in `(i, j)` order.
    pub fn from_rows(n_humans: usize, n_objects: usize, rows: Vec<Vec<f64>>) -> Result<Self> {
        if rows.len() != n_humans * n_objects || rows.is_empty() {
            return Err(Error::dim(format!(
                "{} rows for a {n_humans}x{n_objects} graph",
                rows.len()
            )));
        }
        let dim = rows[0].len();
        if dim == 0 || rows.iter().any(|r| r.len() != dim) {
            return Err(Error::dim("node feature rows differ in length"));
        }
        Ok(Self {
            n_humans,
            n_objects,
            dim,
            data: rows.concat(),
        })
    }

    pub fn n_humans(&self) -> usize {
        self.n_humans
    }

    pub fn n_objects(&self) -> usize {
        self.n_objects
    }

    pub fn n_nodes(&self) -> usize {
        self.n_humans * self.n_objects
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn index(&self, i: usize, j: usize) -> usize {
        i * self.n_objects + j
    }

    pub fn node(&self, i: usize, j: usize) -> &[f64] {
        self.row(self.index(i, j))
    }

    pub fn row(&self, n: usize) -> &[f64] {
        &self.data[n * self.dim..(n + 1) * self.dim]
    }

    pub fn row_mut(&mut self, n: usize) -> &mut [f64] {
        &mut self.data[n * self.dim..(n + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// The stacked `[nodes × d]` matrix.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts(vec![self.n_nodes(), self.dim], self.data.clone())
    }

    fn same_layout(&self, other: &Self) -> bool {
        self.n_humans == other.n_humans && self.n_objects == other.n_objects && self.dim == other.dim
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert!(self.same_layout(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Node indices adjacent to node `n` in the given subgraph.
    pub fn neighbors(&self, kind: SubgraphKind, n: usize) -> Vec<usize> {
        let (i, j) = (n / self.n_objects, n % self.n_objects);
        match kind {
            SubgraphKind::HumanCentric => (0..self.n_objects)
                .filter(|&jj| jj != j)
                .map(|jj| self.index(i, jj))
                .collect(),
            SubgraphKind::ObjectCentric => (0..self.n_humans)
                .filter(|&ii| ii != i)
                .map(|ii| self.index(ii, j))
                .collect(),
        }
    }
}

/// Detections plus one spatial-semantic feature per human-object pair.
#[derive(Debug, Clone)]
pub struct HoiGraph {
    pub humans: Vec<Detection>,
    pub objects: Vec<Detection>,
    pub nodes: NodeFeatures,
}

/// Pairs every human with every object. Returns `Ok(None)` when either list
/// is empty, in which case only human-only actions can be scored.
pub fn build_graph<F>(
    humans: &[Detection],
    objects: &[Detection],
    mut featurize: F,
) -> Result<Option<HoiGraph>>
where
    F: FnMut(&Detection, &Detection) -> Result<Vec<f64>>,
{
    if humans.is_empty() || objects.is_empty() {
        return Ok(None);
    }
    let mut rows = Vec::with_capacity(humans.len() * objects.len());
    for h in humans {
        for o in objects {
            rows.push(featurize(h, o)?);
        }
    }
    let nodes = NodeFeatures::from_rows(humans.len(), objects.len(), rows)?;
    Ok(Some(HoiGraph {
        humans: humans.to_vec(),
        objects: objects.to_vec(),
        nodes,
    }))
}

/// Attention and aggregation weights of one subgraph.
#[derive(Debug, Clone, PartialEq)]
pub struct SubgraphParams {
    /// `[d × d]`
    pub w: Tensor,
    /// `[d_k × d]`, applied to neighbors
    pub w_q: Tensor,
    /// `[d_k × d]`, applied to the center node
    pub w_k: Tensor,
    pub ln_gain: Tensor,
    pub ln_bias: Tensor,
}

impl SubgraphParams {
    pub fn zeros(dim: usize, key_dim: usize) -> Self {
        Self {
            w: Tensor::zeros(&[dim, dim]),
            w_q: Tensor::zeros(&[key_dim, dim]),
            w_k: Tensor::zeros(&[key_dim, dim]),
            ln_gain: Tensor::zeros(&[dim]),
            ln_bias: Tensor::zeros(&[dim]),
        }
    }

    pub fn init<R: Rng + ?Sized>(dim: usize, key_dim: usize, rng: &mut R) -> Self {
        let mut p = Self::zeros(dim, key_dim);
        let std = (1.0 / dim as f64).sqrt();
        fill_normal(&mut p.w, std, rng);
        fill_normal(&mut p.w_q, std, rng);
        fill_normal(&mut p.w_k, std, rng);
        p.ln_gain.data_mut().fill(1.0);
        p
    }

    pub fn dim(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn key_dim(&self) -> usize {
        self.w_q.shape()[0]
    }

    fn check(&self, dim: usize) -> Result<()> {
        let (d, dk) = (self.dim(), self.key_dim());
        if d != dim {
            return Err(Error::dim(format!("subgraph params expect d={d}, features have d={dim}")));
        }
        self.w.expect_shape("W", &[d, d])?;
        self.w_q.expect_shape("W_q", &[dk, d])?;
        self.w_k.expect_shape("W_k", &[dk, d])?;
        self.ln_gain.expect_shape("LayerNorm gain", &[d])?;
        self.ln_bias.expect_shape("LayerNorm bias", &[d])
    }
}

/// Independent parameter sets for the two subgraphs.
#[derive(Debug, Clone, PartialEq)]
pub struct DrgParams {
    pub human: SubgraphParams,
    pub object: SubgraphParams,
}

impl DrgParams {
    pub fn zeros(dim: usize, key_dim: usize) -> Self {
        Self {
            human: SubgraphParams::zeros(dim, key_dim),
            object: SubgraphParams::zeros(dim, key_dim),
        }
    }

    pub fn init<R: Rng + ?Sized>(dim: usize, key_dim: usize, rng: &mut R) -> Self {
        let human = SubgraphParams::init(dim, key_dim, rng);
        let object = SubgraphParams::init(dim, key_dim, rng);
        Self { human, object }
    }

    pub fn get(&self, kind: SubgraphKind) -> &SubgraphParams {
        match kind {
            SubgraphKind::HumanCentric => &self.human,
            SubgraphKind::ObjectCentric => &self.object,
        }
    }

    pub fn get_mut(&mut self, kind: SubgraphKind) -> &mut SubgraphParams {
        match kind {
            SubgraphKind::HumanCentric => &mut self.human,
            SubgraphKind::ObjectCentric => &mut self.object,
        }
    }
}

fn logits(center_key: &[f64], queries: &[&[f64]], key_dim: usize) -> Vec<f64> {
    let scale = 1.0 / (key_dim as f64).sqrt();
    queries.iter().map(|q| dot(q, center_key) * scale).collect()
}

/// Scaled dot-product attention of `center` over `neighbors`: the query
/// projection is applied to each neighbor and the key projection to the
/// center. Panics-free; an empty neighbor list is a dimension error.
pub fn attention_weights(
    center: &[f64],
    neighbors: &[&[f64]],
    p: &DrgParams,
    kind: SubgraphKind,
) -> Result<Vec<f64>> {
    let sp = p.get(kind);
    sp.check(center.len())?;
    if neighbors.is_empty() {
        return Err(Error::dim("attention over an empty neighborhood"));
    }
    let (d, dk) = (sp.dim(), sp.key_dim());
    let key = matvec(sp.w_k.data(), dk, d, center);
    let queries: Vec<Vec<f64>> = neighbors
        .iter()
        .map(|n| {
            if n.len() != d {
                return Err(Error::dim("neighbor feature length differs from d"));
            }
            Ok(matvec(sp.w_q.data(), dk, d, n))
        })
        .collect::<Result<_>>()?;
    let qrefs: Vec<&[f64]> = queries.iter().map(Vec::as_slice).collect();
    softmax(&logits(&key, &qrefs, dk))
}

/// Lexicographic comparison by feature value, falling back to node index.
fn canonical_cmp(feats: &NodeFeatures, a: usize, b: usize) -> Ordering {
    feats
        .row(a)
        .iter()
        .zip(feats.row(b))
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or_else(|| a.cmp(&b))
}

#[derive(Debug, Clone)]
struct NodeCache {
    neighbors: Vec<usize>,
    alpha: Vec<f64>,
    agg: Vec<f64>,
    activated: Vec<f64>,
    ln: LayerNormCache,
}

/// Everything one aggregation step needs to run backwards.
#[derive(Debug, Clone)]
pub struct AggregateCache {
    kind: SubgraphKind,
    input: NodeFeatures,
    queries: Vec<Vec<f64>>,
    keys: Vec<Vec<f64>>,
    nodes: Vec<Option<NodeCache>>,
}

impl AggregateCache {
    /// Attention weights of node `n` in canonical neighbor order, with the
    /// neighbor node indices; `None` for nodes without neighbors.
    pub fn attention(&self, n: usize) -> Option<(&[usize], &[f64])> {
        self.nodes[n]
            .as_ref()
            .map(|c| (c.neighbors.as_slice(), c.alpha.as_slice()))
    }
}

/// One synchronous aggregation step, keeping a cache for backprop.
pub fn aggregate_once_forward(
    feats: &NodeFeatures,
    kind: SubgraphKind,
    p: &DrgParams,
) -> Result<(NodeFeatures, AggregateCache)> {
    let sp = p.get(kind);
    sp.check(feats.dim())?;
    let (d, dk) = (sp.dim(), sp.key_dim());
    let n_nodes = feats.n_nodes();
    let queries: Vec<Vec<f64>> = (0..n_nodes)
        .map(|n| matvec(sp.w_q.data(), dk, d, feats.row(n)))
        .collect();
    let keys: Vec<Vec<f64>> = (0..n_nodes)
        .map(|n| matvec(sp.w_k.data(), dk, d, feats.row(n)))
        .collect();
    let mut out = feats.clone();
    let mut node_caches = Vec::with_capacity(n_nodes);
    for c in 0..n_nodes {
        let mut neighbors = feats.neighbors(kind, c);
        if neighbors.is_empty() {
            node_caches.push(None);
            continue;
        }
        neighbors.sort_by(|&a, &b| canonical_cmp(feats, a, b));
        let qrefs: Vec<&[f64]> = neighbors.iter().map(|&m| queries[m].as_slice()).collect();
        let alpha = softmax(&logits(&keys[c], &qrefs, dk))?;
        let mut agg = vec![0.0; d];
        for (&m, &a) in neighbors.iter().zip(&alpha) {
            for (g, x) in agg.iter_mut().zip(feats.row(m)) {
                *g += a * x;
            }
        }
        let mut activated = matvec(sp.w.data(), d, d, &agg);
        activated.iter_mut().for_each(|v| *v = v.max(0.0));
        let pre: Vec<f64> = feats
            .row(c)
            .iter()
            .zip(&activated)
            .map(|(x, r)| x + r)
            .collect();
        let (y, ln) =
            layer_norm_forward(&pre, sp.ln_gain.data(), sp.ln_bias.data(), LAYER_NORM_EPS)?;
        out.row_mut(c).copy_from_slice(&y);
        node_caches.push(Some(NodeCache {
            neighbors,
            alpha,
            agg,
            activated,
            ln,
        }));
    }
    Ok((
        out,
        AggregateCache {
            kind,
            input: feats.clone(),
            queries,
            keys,
            nodes: node_caches,
        },
    ))
}

pub fn aggregate_once(
    feats: &NodeFeatures,
    kind: SubgraphKind,
    p: &DrgParams,
) -> Result<NodeFeatures> {
    aggregate_once_forward(feats, kind, p).map(|(f, _)| f)
}

/// Backward through one aggregation step. Accumulates parameter gradients
/// into `grads` and returns the gradient with respect to the step's input.
pub fn aggregate_once_backward(
    cache: &AggregateCache,
    p: &DrgParams,
    grad_out: &NodeFeatures,
    grads: &mut DrgParams,
) -> NodeFeatures {
    let sp = p.get(cache.kind);
    let g = grads.get_mut(cache.kind);
    let feats = &cache.input;
    let (d, dk) = (sp.dim(), sp.key_dim());
    let scale = 1.0 / (dk as f64).sqrt();
    let n_nodes = feats.n_nodes();
    let mut d_x = NodeFeatures::zeros(feats.n_humans(), feats.n_objects(), d);
    let mut d_q = vec![vec![0.0; dk]; n_nodes];
    let mut d_k = vec![vec![0.0; dk]; n_nodes];

    for c in 0..n_nodes {
        let dout = grad_out.row(c);
        let Some(nc) = &cache.nodes[c] else {
            for (a, b) in d_x.row_mut(c).iter_mut().zip(dout) {
                *a += b;
            }
            continue;
        };
        let (d_pre, d_gain, d_bias) = layer_norm_backward(&nc.ln, sp.ln_gain.data(), dout);
        for (a, b) in g.ln_gain.data_mut().iter_mut().zip(&d_gain) {
            *a += b;
        }
        for (a, b) in g.ln_bias.data_mut().iter_mut().zip(&d_bias) {
            *a += b;
        }
        for (a, b) in d_x.row_mut(c).iter_mut().zip(&d_pre) {
            *a += b;
        }
        let d_z: Vec<f64> = d_pre
            .iter()
            .zip(&nc.activated)
            .map(|(&gv, &r)| if r > 0.0 { gv } else { 0.0 })
            .collect();
        outer_accumulate(g.w.data_mut(), &d_z, &nc.agg);
        let d_agg = matvec_t(sp.w.data(), d, d, &d_z);
        let mut d_alpha = Vec::with_capacity(nc.neighbors.len());
        for (&m, &a) in nc.neighbors.iter().zip(&nc.alpha) {
            d_alpha.push(dot(&d_agg, feats.row(m)));
            for (dx, da) in d_x.row_mut(m).iter_mut().zip(&d_agg) {
                *dx += a * da;
            }
        }
        let d_u = softmax_backward(&nc.alpha, &d_alpha);
        for (&m, &du) in nc.neighbors.iter().zip(&d_u) {
            let s = du * scale;
            for ((dkc, dqm), (qm, kc)) in d_k[c]
                .iter_mut()
                .zip(d_q[m].iter_mut())
                .zip(cache.queries[m].iter().zip(&cache.keys[c]))
            {
                *dkc += s * qm;
                *dqm += s * kc;
            }
        }
    }

    for n in 0..n_nodes {
        let x = feats.row(n);
        outer_accumulate(g.w_q.data_mut(), &d_q[n], x);
        outer_accumulate(g.w_k.data_mut(), &d_k[n], x);
        let from_q = matvec_t(sp.w_q.data(), dk, d, &d_q[n]);
        let from_k = matvec_t(sp.w_k.data(), dk, d, &d_k[n]);
        for ((dx, a), b) in d_x.row_mut(n).iter_mut().zip(&from_q).zip(&from_k) {
            *dx += a + b;
        }
    }
    d_x
}

/// Cached forward pass of several aggregation steps on one subgraph.
#[derive(Debug, Clone)]
pub struct SubgraphPass {
    pub kind: SubgraphKind,
    pub output: NodeFeatures,
    steps: Vec<AggregateCache>,
}

impl SubgraphPass {
    pub fn steps(&self) -> &[AggregateCache] {
        &self.steps
    }
}

pub fn run_subgraph(
    feats: &NodeFeatures,
    kind: SubgraphKind,
    p: &DrgParams,
    iterations: usize,
) -> Result<SubgraphPass> {
    let mut current = feats.clone();
    let mut steps = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let (next, cache) = aggregate_once_forward(&current, kind, p)?;
        steps.push(cache);
        current = next;
    }
    Ok(SubgraphPass {
        kind,
        output: current,
        steps,
    })
}

/// Returns the gradient with respect to the raw node features.
pub fn run_subgraph_backward(
    pass: &SubgraphPass,
    p: &DrgParams,
    grad_out: &NodeFeatures,
    grads: &mut DrgParams,
) -> NodeFeatures {
    let mut g = grad_out.clone();
    for cache in pass.steps.iter().rev() {
        g = aggregate_once_backward(cache, p, &g, grads);
    }
    g
}

/// Runs both subgraphs from the raw node features, independently.
/// Zero iterations return the raw features.
pub fn run_drg(
    graph: &HoiGraph,
    p: &DrgParams,
    iters_human: usize,
    iters_object: usize,
) -> Result<(NodeFeatures, NodeFeatures)> {
    let h = run_subgraph(&graph.nodes, SubgraphKind::HumanCentric, p, iters_human)?;
    let o = run_subgraph(&graph.nodes, SubgraphKind::ObjectCentric, p, iters_object)?;
    Ok((h.output, o.output))
}
