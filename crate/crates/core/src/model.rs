//! The full scoring model: spatial ConvNet, both relation subgraphs and the
//! four stream heads, with a per-image forward pass and its backward pass.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::drg::{
    run_subgraph, run_subgraph_backward, DrgParams, NodeFeatures, SubgraphKind, SubgraphPass,
    DEFAULT_ITERATIONS, DEFAULT_KEY_DIM,
};
use crate::error::{Error, Result};
use crate::evaluation::PredictionTriplet;
use crate::geometry::{rasterize_pair, Detection};
use crate::numkernel::Tensor;
use crate::spatial_semantic::{
    spatial_features_backward, spatial_features_forward, EmbeddingTable, SpatialCache,
    SpatialConfig, SpatialConvParams, DEFAULT_EMBED_DIM,
};
use crate::streams::{
    fuse_streams, stream_backward_logits, stream_forward, ActionCatalog, ActionScores,
    FusionInputs, HeadCache, StreamHead, DEFAULT_APPEARANCE_DIM, DEFAULT_HIDDEN,
};

/// Architecture and graph settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub spatial: SpatialConfig,
    pub embed_dim: usize,
    pub appearance_dim: usize,
    pub key_dim: usize,
    pub hidden: usize,
    pub iters_human: usize,
    pub iters_object: usize,
    pub human_graph: bool,
    pub object_graph: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            spatial: SpatialConfig::default(),
            embed_dim: DEFAULT_EMBED_DIM,
            appearance_dim: DEFAULT_APPEARANCE_DIM,
            key_dim: DEFAULT_KEY_DIM,
            hidden: DEFAULT_HIDDEN,
            iters_human: DEFAULT_ITERATIONS,
            iters_object: DEFAULT_ITERATIONS,
            human_graph: true,
            object_graph: true,
        }
    }
}

impl ModelConfig {
    pub fn spatial_dim(&self) -> Result<usize> {
        self.spatial.output_dim()
    }

    /// Node feature length `d`.
    pub fn node_dim(&self) -> Result<usize> {
        Ok(self.spatial_dim()? + self.embed_dim)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub spatial: SpatialConvParams,
    pub drg: DrgParams,
    pub human_head: StreamHead,
    pub object_head: StreamHead,
    pub sp_human_head: StreamHead,
    pub sp_object_head: StreamHead,
}

impl ModelParams {
    pub fn zeros(cfg: &ModelConfig, n_actions: usize) -> Result<Self> {
        let d = cfg.node_dim()?;
        Ok(Self {
            spatial: SpatialConvParams::zeros(&cfg.spatial),
            drg: DrgParams::zeros(d, cfg.key_dim),
            human_head: StreamHead::zeros(cfg.appearance_dim, cfg.hidden, n_actions),
            object_head: StreamHead::zeros(cfg.appearance_dim, cfg.hidden, n_actions),
            sp_human_head: StreamHead::zeros(d, cfg.hidden, n_actions),
            sp_object_head: StreamHead::zeros(d, cfg.hidden, n_actions),
        })
    }

    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, n_actions: usize, rng: &mut R) -> Result<Self> {
        let d = cfg.node_dim()?;
        Ok(Self {
            spatial: SpatialConvParams::init(&cfg.spatial, rng),
            drg: DrgParams::init(d, cfg.key_dim, rng),
            human_head: StreamHead::init(cfg.appearance_dim, cfg.hidden, n_actions, rng),
            object_head: StreamHead::init(cfg.appearance_dim, cfg.hidden, n_actions, rng),
            sp_human_head: StreamHead::init(d, cfg.hidden, n_actions, rng),
            sp_object_head: StreamHead::init(d, cfg.hidden, n_actions, rng),
        })
    }

    /// Tensors in checkpoint manifest order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("spatial.conv1.weight".into(), &self.spatial.conv1_weight),
            ("spatial.conv1.bias".into(), &self.spatial.conv1_bias),
            ("spatial.conv2.weight".into(), &self.spatial.conv2_weight),
            ("spatial.conv2.bias".into(), &self.spatial.conv2_bias),
        ];
        for kind in SubgraphKind::BOTH {
            let sp = self.drg.get(kind);
            let k = kind.name();
            out.push((format!("drg.{k}.w"), &sp.w));
            out.push((format!("drg.{k}.w_q"), &sp.w_q));
            out.push((format!("drg.{k}.w_k"), &sp.w_k));
            out.push((format!("drg.{k}.ln_gain"), &sp.ln_gain));
            out.push((format!("drg.{k}.ln_bias"), &sp.ln_bias));
        }
        for (k, h) in self.heads() {
            out.push((format!("head.{k}.mlp.weight"), &h.mlp_weight));
            out.push((format!("head.{k}.mlp.bias"), &h.mlp_bias));
            out.push((format!("head.{k}.cls.weight"), &h.cls_weight));
            out.push((format!("head.{k}.cls.bias"), &h.cls_bias));
        }
        out
    }

    fn heads(&self) -> [(&'static str, &StreamHead); 4] {
        [
            ("human", &self.human_head),
            ("object", &self.object_head),
            ("sp_human", &self.sp_human_head),
            ("sp_object", &self.sp_object_head),
        ]
    }

    /// Mutable tensors in the same order as [`ModelParams::named`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = vec![
            &mut self.spatial.conv1_weight,
            &mut self.spatial.conv1_bias,
            &mut self.spatial.conv2_weight,
            &mut self.spatial.conv2_bias,
        ];
        for sp in [&mut self.drg.human, &mut self.drg.object] {
            out.push(&mut sp.w);
            out.push(&mut sp.w_q);
            out.push(&mut sp.w_k);
            out.push(&mut sp.ln_gain);
            out.push(&mut sp.ln_bias);
        }
        for h in [
            &mut self.human_head,
            &mut self.object_head,
            &mut self.sp_human_head,
            &mut self.sp_object_head,
        ] {
            out.push(&mut h.mlp_weight);
            out.push(&mut h.mlp_bias);
            out.push(&mut h.cls_weight);
            out.push(&mut h.cls_bias);
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.parameter_count());
        for (_, t) in self.named() {
            v.extend_from_slice(t.data());
        }
        v
    }

    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.parameter_count() {
            return Err(Error::dim(format!(
                "{} values for {} parameters",
                flat.len(),
                self.parameter_count()
            )));
        }
        let mut off = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.data_mut().fill(0.0);
        }
        z
    }

    pub fn add_assign(&mut self, other: &Self) {
        let theirs: Vec<Tensor> = other.named().into_iter().map(|(_, t)| t.clone()).collect();
        for (mine, t) in self.tensors_mut().into_iter().zip(&theirs) {
            mine.add_assign(t);
        }
    }

    /// Checks every tensor against the shapes implied by `cfg`.
    pub fn check(&self, cfg: &ModelConfig, n_actions: usize) -> Result<()> {
        let want = Self::zeros(cfg, n_actions)?;
        for ((name, have), (_, w)) in self.named().into_iter().zip(want.named()) {
            have.expect_shape(&name, w.shape())?;
        }
        Ok(())
    }
}

/// Detections and appearance features of one image. Appearance rows are
/// aligned with the detection lists.
#[derive(Debug, Clone, Copy)]
pub struct ImageInput<'a> {
    pub humans: &'a [Detection],
    pub objects: &'a [Detection],
    pub human_appearance: &'a [Vec<f64>],
    pub object_appearance: &'a [Vec<f64>],
}

/// Where raw node features come from.
#[derive(Debug, Clone, Copy)]
pub enum NodeSource<'a> {
    /// Rasterize each pair and run the spatial ConvNet (differentiable).
    Compute(&'a EmbeddingTable),
    /// Features from an archive; no gradient reaches the ConvNet. `None`
    /// for images without a graph.
    Precomputed(Option<&'a NodeFeatures>),
}

#[derive(Debug, Clone)]
pub struct GraphForward {
    pub nodes: NodeFeatures,
    spatial: Vec<SpatialCache>,
    spatial_dim: usize,
    human_pass: Option<SubgraphPass>,
    object_pass: Option<SubgraphPass>,
    sp_human: Vec<HeadCache>,
    sp_object: Vec<HeadCache>,
}

impl GraphForward {
    pub fn human_pass(&self) -> Option<&SubgraphPass> {
        self.human_pass.as_ref()
    }

    pub fn object_pass(&self) -> Option<&SubgraphPass> {
        self.object_pass.as_ref()
    }
}

/// Activations of one image.
#[derive(Debug, Clone)]
pub struct ImageForward {
    pub human: Vec<HeadCache>,
    pub object: Vec<HeadCache>,
    pub graph: Option<GraphForward>,
}

fn as_scores(c: &HeadCache) -> ActionScores {
    ActionScores {
        values: c.scores().to_vec(),
    }
}

impl ImageForward {
    pub fn n_objects(&self) -> usize {
        self.object.len()
    }

    /// Scores of the four streams for pair `(i, j)`; subgraph streams are
    /// `None` when disabled.
    pub fn pair_scores(
        &self,
        i: usize,
        j: usize,
    ) -> (ActionScores, ActionScores, Option<ActionScores>, Option<ActionScores>) {
        let n = i * self.object.len() + j;
        let g = self.graph.as_ref();
        (
            as_scores(&self.human[i]),
            as_scores(&self.object[j]),
            g.and_then(|g| g.sp_human.get(n)).map(as_scores),
            g.and_then(|g| g.sp_object.get(n)).map(as_scores),
        )
    }
}

/// Gradients on the pre-sigmoid logits of every head evaluation.
#[derive(Debug, Clone)]
pub struct ImageGrads {
    pub human: Vec<Vec<f64>>,
    pub object: Vec<Vec<f64>>,
    pub sp_human: Vec<Vec<f64>>,
    pub sp_object: Vec<Vec<f64>>,
}

impl ImageGrads {
    pub fn zeros(fwd: &ImageForward, n_actions: usize) -> Self {
        let z = |n: usize| vec![vec![0.0; n_actions]; n];
        let (nh, no) = (fwd.human.len(), fwd.object.len());
        let (gh, go) = match &fwd.graph {
            Some(g) => (g.sp_human.len(), g.sp_object.len()),
            None => (0, 0),
        };
        Self {
            human: z(nh),
            object: z(no),
            sp_human: z(gh),
            sp_object: z(go),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub catalog: ActionCatalog,
    pub params: ModelParams,
}

impl Model {
    pub fn new(config: ModelConfig, catalog: ActionCatalog, params: ModelParams) -> Result<Self> {
        params.check(&config, catalog.len())?;
        Ok(Self {
            config,
            catalog,
            params,
        })
    }

    pub fn init<R: Rng + ?Sized>(
        config: ModelConfig,
        catalog: ActionCatalog,
        rng: &mut R,
    ) -> Result<Self> {
        let params = ModelParams::init(&config, catalog.len(), rng)?;
        Ok(Self {
            config,
            catalog,
            params,
        })
    }

    /// Raw node features for every human-object pair, with the ConvNet caches.
    pub fn featurize(
        &self,
        humans: &[Detection],
        objects: &[Detection],
        table: &EmbeddingTable,
    ) -> Result<Option<(NodeFeatures, Vec<SpatialCache>)>> {
        if humans.is_empty() || objects.is_empty() {
            return Ok(None);
        }
        if table.dim() != self.config.embed_dim {
            return Err(Error::dim(format!(
                "embedding table has dim {}, model expects {}",
                table.dim(),
                self.config.embed_dim
            )));
        }
        let mut rows = Vec::with_capacity(humans.len() * objects.len());
        let mut caches = Vec::with_capacity(rows.capacity());
        let embeds: Vec<_> = objects
            .iter()
            .map(|o| table.lookup(&o.category))
            .collect::<Result<_>>()?;
        for h in humans {
            for (o, e) in objects.iter().zip(&embeds) {
                let map = rasterize_pair(&h.bbox, &o.bbox, self.config.spatial.raster)?;
                let (mut row, cache) = spatial_features_forward(&map, &self.params.spatial)?;
                row.extend_from_slice(e);
                rows.push(row);
                caches.push(cache);
            }
        }
        let nodes = NodeFeatures::from_rows(humans.len(), objects.len(), rows)?;
        Ok(Some((nodes, caches)))
    }

    fn check_appearance(&self, rows: &[Vec<f64>], n: usize, what: &str) -> Result<()> {
        if rows.len() != n {
            return Err(Error::Input(format!(
                "{n} {what} detections but {} appearance rows",
                rows.len()
            )));
        }
        if let Some(r) = rows.iter().find(|r| r.len() != self.config.appearance_dim) {
            return Err(Error::dim(format!(
                "appearance feature of length {}, expected {}",
                r.len(),
                self.config.appearance_dim
            )));
        }
        Ok(())
    }

    pub fn forward(&self, input: &ImageInput<'_>, source: NodeSource<'_>) -> Result<ImageForward> {
        self.check_appearance(input.human_appearance, input.humans.len(), "human")?;
        self.check_appearance(input.object_appearance, input.objects.len(), "object")?;
        let p = &self.params;
        let human = input
            .human_appearance
            .iter()
            .map(|f| stream_forward(f, &p.human_head).map(|(_, c)| c))
            .collect::<Result<Vec<_>>>()?;
        let object = input
            .object_appearance
            .iter()
            .map(|f| stream_forward(f, &p.object_head).map(|(_, c)| c))
            .collect::<Result<Vec<_>>>()?;

        let raw = match source {
            NodeSource::Compute(table) => self.featurize(input.humans, input.objects, table)?,
            NodeSource::Precomputed(nodes) => {
                let has_graph = !input.humans.is_empty() && !input.objects.is_empty();
                match nodes {
                    None if has_graph => {
                        return Err(Error::Mismatch("no node features for a non-empty graph".into()))
                    }
                    None => None,
                    Some(_) if !has_graph => None,
                    Some(nodes) => {
                        if nodes.n_humans() != input.humans.len()
                            || nodes.n_objects() != input.objects.len()
                        {
                            return Err(Error::Mismatch(format!(
                                "feature archive has a {}x{} graph, detections give {}x{}",
                                nodes.n_humans(),
                                nodes.n_objects(),
                                input.humans.len(),
                                input.objects.len()
                            )));
                        }
                        Some((nodes.clone(), Vec::new()))
                    }
                }
            }
        };
        let graph = match raw {
            None => None,
            Some((nodes, spatial)) => Some(self.graph_forward(nodes, spatial)?),
        };
        Ok(ImageForward {
            human,
            object,
            graph,
        })
    }

    fn graph_forward(&self, nodes: NodeFeatures, spatial: Vec<SpatialCache>) -> Result<GraphForward> {
        let cfg = &self.config;
        let d = cfg.node_dim()?;
        if nodes.dim() != d {
            return Err(Error::Mismatch(format!(
                "node features have d={}, model expects d={d}",
                nodes.dim()
            )));
        }
        let p = &self.params;
        let run = |enabled: bool, kind: SubgraphKind, iters: usize, head: &StreamHead| {
            if !enabled {
                return Ok((None, Vec::new()));
            }
            let pass = run_subgraph(&nodes, kind, &p.drg, iters)?;
            let caches = (0..nodes.n_nodes())
                .map(|n| stream_forward(pass.output.row(n), head).map(|(_, c)| c))
                .collect::<Result<Vec<_>>>()?;
            Ok::<_, Error>((Some(pass), caches))
        };
        let (human_pass, sp_human) = run(
            cfg.human_graph,
            SubgraphKind::HumanCentric,
            cfg.iters_human,
            &p.sp_human_head,
        )?;
        let (object_pass, sp_object) = run(
            cfg.object_graph,
            SubgraphKind::ObjectCentric,
            cfg.iters_object,
            &p.sp_object_head,
        )?;
        Ok(GraphForward {
            nodes,
            spatial,
            spatial_dim: cfg.spatial_dim()?,
            human_pass,
            object_pass,
            sp_human,
            sp_object,
        })
    }

    /// Accumulates parameter gradients for the given logit gradients.
    pub fn backward(
        &self,
        fwd: &ImageForward,
        grads: &ImageGrads,
        acc: &mut ModelParams,
    ) -> Result<()> {
        let p = &self.params;
        for (c, g) in fwd.human.iter().zip(&grads.human) {
            stream_backward_logits(c, &p.human_head, g, &mut acc.human_head);
        }
        for (c, g) in fwd.object.iter().zip(&grads.object) {
            stream_backward_logits(c, &p.object_head, g, &mut acc.object_head);
        }
        let Some(graph) = &fwd.graph else {
            return Ok(());
        };
        let nodes = &graph.nodes;
        let mut d_raw = NodeFeatures::zeros(nodes.n_humans(), nodes.n_objects(), nodes.dim());
        for (pass, caches, head, head_grads, dlog) in [
            (
                &graph.human_pass,
                &graph.sp_human,
                &p.sp_human_head,
                &mut acc.sp_human_head,
                &grads.sp_human,
            ),
            (
                &graph.object_pass,
                &graph.sp_object,
                &p.sp_object_head,
                &mut acc.sp_object_head,
                &grads.sp_object,
            ),
        ] {
            let Some(pass) = pass else { continue };
            let mut d_out = NodeFeatures::zeros(nodes.n_humans(), nodes.n_objects(), nodes.dim());
            let mut any = false;
            for (n, (c, g)) in caches.iter().zip(dlog).enumerate() {
                if g.iter().all(|&v| v == 0.0) {
                    continue;
                }
                any = true;
                let dx = stream_backward_logits(c, head, g, head_grads);
                d_out.row_mut(n).copy_from_slice(&dx);
            }
            if any {
                d_raw.add_assign(&run_subgraph_backward(pass, &p.drg, &d_out, &mut acc.drg));
            }
        }
        for (n, cache) in graph.spatial.iter().enumerate() {
            let d_sp = &d_raw.row(n)[..graph.spatial_dim];
            if d_sp.iter().any(|&v| v != 0.0) {
                spatial_features_backward(cache, &p.spatial, d_sp, &mut acc.spatial)?;
            }
        }
        Ok(())
    }

    /// Per-action fused scores of pair `(i, j)`.
    pub fn fused_pair(&self, input: &ImageInput<'_>, fwd: &ImageForward, i: usize, j: usize) -> Vec<f64> {
        let (a_h, a_o, a_sp_h, a_sp_o) = fwd.pair_scores(i, j);
        fuse_streams(
            &FusionInputs {
                s_h: input.humans[i].score,
                s_o: input.objects[j].score,
                a_h: &a_h,
                a_o: &a_o,
                a_sp_h: a_sp_h.as_ref(),
                a_sp_o: a_sp_o.as_ref(),
            },
            &self.catalog,
        )
    }
}

/// Scores every pair of one image. For each human, triplets for each object
/// and object-requiring action come first (object index, then action
/// index), followed by one triplet per human-only action.
pub fn infer_image(
    model: &Model,
    image_id: u64,
    input: &ImageInput<'_>,
    source: NodeSource<'_>,
) -> Result<Vec<PredictionTriplet>> {
    let fwd = model.forward(input, source)?;
    let cat = &model.catalog;
    let mut out = Vec::new();
    for (i, h) in input.humans.iter().enumerate() {
        for (j, o) in input.objects.iter().enumerate() {
            let fused = model.fused_pair(input, &fwd, i, j);
            for (a, &score) in fused.iter().enumerate() {
                if cat.requires_object(a) {
                    out.push(PredictionTriplet {
                        image_id,
                        human_box: h.bbox,
                        action: a,
                        object_box: Some(o.bbox),
                        object_category: Some(o.category.clone()),
                        score,
                    });
                }
            }
        }
        let a_h = fwd.human[i].scores();
        for a in (0..cat.len()).filter(|&a| !cat.requires_object(a)) {
            out.push(PredictionTriplet {
                image_id,
                human_box: h.bbox,
                action: a,
                object_box: None,
                object_category: None,
                score: h.score * a_h[a],
            });
        }
    }
    Ok(out)
}
