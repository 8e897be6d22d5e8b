//! Spatial-semantic node features: a two-layer ConvNet over the interaction
//! pattern, concatenated with the object category's word embedding.

use std::borrow::Cow;
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use log::warn;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{rasterize_pair, Detection, SpatialMap};
use crate::numkernel::ops::{
    conv2d_valid, conv2d_valid_backward, maxpool2_backward, maxpool2_with_indices, relu_backward,
    relu_inplace,
};
use crate::numkernel::Tensor;

pub const DEFAULT_EMBED_DIM: usize = 300;

/// Shape of the spatial ConvNet. The default maps a 64×64 pattern through
/// 5×5 valid convolutions (2→64→32 channels) and two 2× max-pools to
/// `32·13·13 = 5408` values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpatialConfig {
    pub raster: usize,
    pub conv1_channels: usize,
    pub conv1_kernel: usize,
    pub conv2_channels: usize,
    pub conv2_kernel: usize,
}

impl Default for SpatialConfig {
    fn default() -> Self {
        Self {
            raster: 64,
            conv1_channels: 64,
            conv1_kernel: 5,
            conv2_channels: 32,
            conv2_kernel: 5,
        }
    }
}

impl SpatialConfig {
    /// Side length of the final pooled map, validating every stage.
    pub fn output_side(&self) -> Result<usize> {
        let stage = |side: usize, k: usize, which: &str| -> Result<usize> {
            if k == 0 || side < k {
                return Err(Error::dim(format!("{which}: {side} px input, {k}x{k} kernel")));
            }
            let conv = side - k + 1;
            if !conv.is_multiple_of(2) {
                return Err(Error::dim(format!("{which}: conv output {conv} is odd")));
            }
            Ok(conv / 2)
        };
        let s1 = stage(self.raster, self.conv1_kernel, "conv1")?;
        stage(s1, self.conv2_kernel, "conv2")
    }

    pub fn output_dim(&self) -> Result<usize> {
        let side = self.output_side()?;
        Ok(self.conv2_channels * side * side)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpatialConvParams {
    pub conv1_weight: Tensor,
    pub conv1_bias: Tensor,
    pub conv2_weight: Tensor,
    pub conv2_bias: Tensor,
}

impl SpatialConvParams {
    pub fn zeros(cfg: &SpatialConfig) -> Self {
        let (c1, k1, c2, k2) = (
            cfg.conv1_channels,
            cfg.conv1_kernel,
            cfg.conv2_channels,
            cfg.conv2_kernel,
        );
        Self {
            conv1_weight: Tensor::zeros(&[c1, 2, k1, k1]),
            conv1_bias: Tensor::zeros(&[c1]),
            conv2_weight: Tensor::zeros(&[c2, c1, k2, k2]),
            conv2_bias: Tensor::zeros(&[c2]),
        }
    }

    /// He-normal weights, small positive biases so units start active.
    pub fn init<R: Rng + ?Sized>(cfg: &SpatialConfig, rng: &mut R) -> Self {
        let mut p = Self::zeros(cfg);
        let fan1 = (2 * cfg.conv1_kernel * cfg.conv1_kernel) as f64;
        let fan2 = (cfg.conv1_channels * cfg.conv2_kernel * cfg.conv2_kernel) as f64;
        fill_normal(&mut p.conv1_weight, (2.0 / fan1).sqrt(), rng);
        fill_normal(&mut p.conv2_weight, (2.0 / fan2).sqrt(), rng);
        p.conv1_bias.data_mut().fill(0.01);
        p.conv2_bias.data_mut().fill(0.01);
        p
    }

    pub fn config_matches(&self, cfg: &SpatialConfig) -> Result<()> {
        let want = Self::zeros(cfg);
        for (name, have, want) in [
            ("conv1 weight", &self.conv1_weight, &want.conv1_weight),
            ("conv1 bias", &self.conv1_bias, &want.conv1_bias),
            ("conv2 weight", &self.conv2_weight, &want.conv2_weight),
            ("conv2 bias", &self.conv2_bias, &want.conv2_bias),
        ] {
            have.expect_shape(name, want.shape())?;
        }
        Ok(())
    }
}

pub(crate) fn fill_normal<R: Rng + ?Sized>(t: &mut Tensor, std: f64, rng: &mut R) {
    let normal = Normal::new(0.0, std).expect("finite standard deviation");
    for v in t.data_mut() {
        *v = normal.sample(rng);
    }
}

/// Activations kept for the backward pass of [`spatial_features_forward`].
#[derive(Debug, Clone)]
pub struct SpatialCache {
    input: Tensor,
    act1: Tensor,
    pool1_idx: Vec<usize>,
    pooled1: Tensor,
    act2: Tensor,
    pool2_idx: Vec<usize>,
}

/// conv → relu → pool → conv → relu → pool → flatten.
pub fn spatial_features_forward(
    map: &SpatialMap,
    p: &SpatialConvParams,
) -> Result<(Vec<f64>, SpatialCache)> {
    let input = map.tensor().clone();
    let mut act1 = conv2d_valid(&input, &p.conv1_weight, &p.conv1_bias)?;
    relu_inplace(act1.data_mut());
    let (pooled1, pool1_idx) = maxpool2_with_indices(&act1)?;
    let mut act2 = conv2d_valid(&pooled1, &p.conv2_weight, &p.conv2_bias)?;
    relu_inplace(act2.data_mut());
    let (pooled2, pool2_idx) = maxpool2_with_indices(&act2)?;
    Ok((
        pooled2.into_data(),
        SpatialCache {
            input,
            act1,
            pool1_idx,
            pooled1,
            act2,
            pool2_idx,
        },
    ))
}

pub fn spatial_features(map: &SpatialMap, p: &SpatialConvParams) -> Result<Tensor> {
    let (v, _) = spatial_features_forward(map, p)?;
    let n = v.len();
    Ok(Tensor::from_parts(vec![n], v))
}

/// Accumulates parameter gradients of the spatial stack into `grads`.
pub fn spatial_features_backward(
    cache: &SpatialCache,
    p: &SpatialConvParams,
    grad_out: &[f64],
    grads: &mut SpatialConvParams,
) -> Result<()> {
    let d_act2 = maxpool2_backward(cache.act2.shape(), &cache.pool2_idx, grad_out);
    let d_pre2 = relu_backward(cache.act2.data(), d_act2.data());
    let d_pre2 = Tensor::from_parts(cache.act2.shape().to_vec(), d_pre2);
    let (d_pooled1, dk2, db2) =
        conv2d_valid_backward(&cache.pooled1, &p.conv2_weight, &d_pre2, true)?;
    grads.conv2_weight.add_assign(&dk2);
    grads.conv2_bias.add_assign(&db2);
    let d_pooled1 = d_pooled1.expect("input gradient requested");
    let d_act1 = maxpool2_backward(cache.act1.shape(), &cache.pool1_idx, d_pooled1.data());
    let d_pre1 = relu_backward(cache.act1.data(), d_act1.data());
    let d_pre1 = Tensor::from_parts(cache.act1.shape().to_vec(), d_pre1);
    let (_, dk1, db1) = conv2d_valid_backward(&cache.input, &p.conv1_weight, &d_pre1, false)?;
    grads.conv1_weight.add_assign(&dk1);
    grads.conv1_bias.add_assign(&db1);
    Ok(())
}

/// Word-embedding lookup keyed by category name.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    vectors: BTreeMap<String, Vec<f64>>,
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            vectors: BTreeMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    /// Category names in sorted order.
    pub fn categories(&self) -> impl Iterator<Item = &str> {
        self.vectors.keys().map(String::as_str)
    }

    pub fn insert(&mut self, category: impl Into<String>, vector: Vec<f64>) -> Result<()> {
        let category = category.into();
        if vector.len() != self.dim {
            return Err(Error::Input(format!(
                "embedding for {category:?} has {} values, expected {}",
                vector.len(),
                self.dim
            )));
        }
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input(format!("embedding for {category:?} is not finite")));
        }
        if self.vectors.contains_key(&category) {
            return Err(Error::Input(format!("duplicate embedding for {category:?}")));
        }
        self.vectors.insert(category, vector);
        Ok(())
    }

    /// Exact lookup; multi-word names fall back to the underscore-joined
    /// token and then to the mean of the per-word vectors.
    pub fn lookup(&self, category: &str) -> Result<Cow<'_, [f64]>> {
        if let Some(v) = self.vectors.get(category) {
            return Ok(Cow::Borrowed(v));
        }
        let words: Vec<&str> = category.split_whitespace().collect();
        if words.len() > 1 {
            if let Some(v) = self.vectors.get(&words.join("_")) {
                return Ok(Cow::Borrowed(v));
            }
            if words.iter().all(|w| self.vectors.contains_key(*w)) {
                warn!("no embedding for {category:?}; averaging its {} words", words.len());
                let mut mean = vec![0.0; self.dim];
                for w in &words {
                    for (m, v) in mean.iter_mut().zip(&self.vectors[*w]) {
                        *m += v;
                    }
                }
                let n = words.len() as f64;
                mean.iter_mut().for_each(|m| *m /= n);
                return Ok(Cow::Owned(mean));
            }
        }
        Err(Error::MissingEmbedding(category.to_string()))
    }

    /// Parses the plain-text format: one category per line, the token
    /// followed by `dim` whitespace-separated decimals. Blank lines and lines
    /// starting with `#` are skipped.
    pub fn parse(text: &str, dim: usize, path: &Path) -> Result<Self> {
        let mut table = Self::new(dim);
        let err = |line: usize, msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut fields = line.split_whitespace();
            let token = fields.next().expect("non-empty line has a token");
            let values = fields
                .map(|f| {
                    f.parse::<f64>()
                        .map_err(|e| err(line_no, format!("bad number {f:?}: {e}")))
                })
                .collect::<Result<Vec<f64>>>()?;
            if values.len() != dim {
                return Err(err(
                    line_no,
                    format!("{token:?} has {} values, expected {dim}", values.len()),
                ));
            }
            if values.iter().any(|v| !v.is_finite()) {
                return Err(err(line_no, format!("{token:?} has a non-finite value")));
            }
            if table.vectors.contains_key(token) {
                return Err(err(line_no, format!("duplicate category {token:?}")));
            }
            table.vectors.insert(token.to_string(), values);
        }
        Ok(table)
    }

    pub fn load(path: impl AsRef<Path>, dim: usize) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, dim, path)
    }

    /// Serializes in the format accepted by [`EmbeddingTable::parse`].
    /// Values use the shortest round-tripping decimal form.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.vectors {
            out.push_str(k);
            for x in v {
                out.push(' ');
                out.push_str(&format!("{x:?}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Loads a 300-dimensional embedding file.
pub fn load_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingTable> {
    EmbeddingTable::load(path, DEFAULT_EMBED_DIM)
}

/// Concatenated node feature `[spatial ‖ embedding]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialSemanticFeature {
    values: Tensor,
    spatial_dim: usize,
}

impl SpatialSemanticFeature {
    pub fn values(&self) -> &[f64] {
        self.values.data()
    }

    pub fn spatial(&self) -> &[f64] {
        &self.values.data()[..self.spatial_dim]
    }

    pub fn embedding(&self) -> &[f64] {
        &self.values.data()[self.spatial_dim..]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn into_tensor(self) -> Tensor {
        self.values
    }
}

/// Builds the node feature for one human/object pair.
pub fn build_feature(
    human: &Detection,
    object: &Detection,
    table: &EmbeddingTable,
    params: &SpatialConvParams,
    cfg: &SpatialConfig,
) -> Result<SpatialSemanticFeature> {
    let embed = table.lookup(&object.category)?;
    let map = rasterize_pair(&human.bbox, &object.bbox, cfg.raster)?;
    let (mut values, _) = spatial_features_forward(&map, params)?;
    let spatial_dim = values.len();
    values.extend_from_slice(&embed);
    let n = values.len();
    Ok(SpatialSemanticFeature {
        values: Tensor::from_parts(vec![n], values),
        spatial_dim,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BBox;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn det(x1: f64, y1: f64, x2: f64, y2: f64, cat: &str) -> Detection {
        Detection::new(BBox::new(x1, y1, x2, y2).unwrap(), cat, 0.9).unwrap()
    }

    fn table(dim: usize, cats: &[&str]) -> EmbeddingTable {
        let mut t = EmbeddingTable::new(dim);
        for (i, c) in cats.iter().enumerate() {
            t.insert(*c, (0..dim).map(|k| (i * dim + k) as f64 * 0.01 - 1.0).collect())
                .unwrap();
        }
        t
    }

    #[test]
    fn default_config_gives_5408_spatial_values() {
        assert_eq!(SpatialConfig::default().output_side().unwrap(), 13);
        assert_eq!(SpatialConfig::default().output_dim().unwrap(), 5408);
        let bad = SpatialConfig {
            raster: 12,
            ..SpatialConfig::default()
        };
        assert!(bad.output_dim().is_err());
    }

    #[test]
    fn spatial_features_default_geometry() {
        let cfg = SpatialConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = SpatialConvParams::init(&cfg, &mut rng);
        let h = BBox::new(0.0, 0.0, 50.0, 120.0).unwrap();
        let o = BBox::new(40.0, 60.0, 90.0, 100.0).unwrap();
        let map = rasterize_pair(&h, &o, 64).unwrap();
        let out = spatial_features(&map, &p).unwrap();
        assert_eq!(out.len(), 5408);

        let zeros = SpatialConvParams::zeros(&cfg);
        let out = spatial_features(&map, &zeros).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn spatial_features_are_local() {
        // Final cell (y, x) sees input rows/cols 4y..=4y+15 (two 5x5 convs,
        // two 2x pools), so a change at input (0, 0) only reaches cell (0, 0).
        let cfg = SpatialConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = SpatialConvParams::init(&cfg, &mut rng);
        let h = BBox::new(10.0, 10.0, 40.0, 90.0).unwrap();
        let o = BBox::new(0.0, 0.0, 70.0, 50.0).unwrap();
        let map = rasterize_pair(&h, &o, 64).unwrap();
        let mut flipped = map.tensor().clone();
        flipped.data_mut()[0] = 1.0 - flipped.data()[0];
        let (a, _) = spatial_features_forward(&map, &p).unwrap();
        let map2 = SpatialMap::from_tensor(flipped).unwrap();
        let (b, _) = spatial_features_forward(&map2, &p).unwrap();
        let mut changed_elsewhere = false;
        for c in 0..32 {
            for y in 0..13 {
                for x in 0..13 {
                    let i = (c * 13 + y) * 13 + x;
                    if (y, x) != (0, 0) && a[i] != b[i] {
                        changed_elsewhere = true;
                    }
                }
            }
        }
        assert!(!changed_elsewhere);
    }

    #[test]
    fn build_feature_examples() {
        let cfg = SpatialConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = SpatialConvParams::init(&cfg, &mut rng);
        let t = table(300, &["cup", "dog"]);
        let h = det(100.0, 100.0, 150.0, 220.0, "person");
        let o = det(140.0, 150.0, 170.0, 180.0, "cup");
        let f = build_feature(&h, &o, &t, &p, &cfg).unwrap();
        assert_eq!(f.len(), 5708);
        assert_eq!(f.embedding(), t.lookup("cup").unwrap().as_ref());

        // Same layout shifted and scaled by 2.
        let h2 = det(300.0, 50.0, 400.0, 290.0, "person");
        let o2 = det(380.0, 150.0, 440.0, 210.0, "cup");
        let f2 = build_feature(&h2, &o2, &t, &p, &cfg).unwrap();
        assert_eq!(f, f2);

        let o3 = det(140.0, 150.0, 170.0, 180.0, "dog");
        let f3 = build_feature(&h, &o3, &t, &p, &cfg).unwrap();
        assert_eq!(f.spatial(), f3.spatial());
        assert_ne!(f.embedding(), f3.embedding());

        let o4 = det(140.0, 150.0, 170.0, 180.0, "zebra");
        match build_feature(&h, &o4, &t, &p, &cfg) {
            Err(Error::MissingEmbedding(c)) => assert_eq!(c, "zebra"),
            other => panic!("expected missing embedding, got {other:?}"),
        }
    }

    #[test]
    fn parse_embedding_files() {
        let path = Path::new("emb.txt");
        let line = |tok: &str, n: usize| {
            let nums: Vec<String> = (0..n).map(|i| format!("{}", i as f64 * 0.5)).collect();
            format!("{tok} {}\n", nums.join(" "))
        };
        let t = EmbeddingTable::parse(&line("dog", 300), 300, path).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t.lookup("dog").unwrap()[2], 1.0);

        let text = format!("{}{}", line("dog", 300), line("cat", 299));
        match EmbeddingTable::parse(&text, 300, path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }

        let text = format!("# header\n{}\n{}", line("dog", 300), line("dog", 300));
        match EmbeddingTable::parse(&text, 300, path) {
            Err(Error::Parse { line, msg, .. }) => {
                assert_eq!(line, 4);
                assert!(msg.contains("duplicate"));
            }
            other => panic!("{other:?}"),
        }

        match EmbeddingTable::parse("dog 1.0 abc\n", 2, path) {
            Err(Error::Parse { line: 1, .. }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn multi_word_lookup() {
        let mut t = EmbeddingTable::new(2);
        t.insert("baseball", vec![1.0, 2.0]).unwrap();
        t.insert("bat", vec![3.0, 4.0]).unwrap();
        t.insert("hot_dog", vec![9.0, 9.0]).unwrap();
        assert_eq!(t.lookup("hot dog").unwrap().as_ref(), &[9.0, 9.0]);
        assert_eq!(t.lookup("baseball bat").unwrap().as_ref(), &[2.0, 3.0]);
        assert!(t.lookup("tennis racket").is_err());
    }

    #[test]
    fn text_round_trip() {
        let t = table(5, &["a", "b b", "c"]);
        let back = EmbeddingTable::parse(&t.to_text(), 5, Path::new("x")).unwrap_err();
        // "b b" is not a single token, so it cannot round-trip.
        assert!(matches!(back, Error::Parse { .. }));
        let t = table(5, &["a", "b_b", "c"]);
        let back = EmbeddingTable::parse(&t.to_text(), 5, Path::new("x")).unwrap();
        assert_eq!(back, t);
    }
}
