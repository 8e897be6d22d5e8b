//! Axis-aligned boxes, the two-channel interaction pattern, and box jitter.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::Tensor;

/// Pixel-space box with `x2 > x1`, `y2 > y1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        if ![x1, y1, x2, y2].iter().all(|v| v.is_finite()) {
            return Err(Error::Input(format!(
                "box has non-finite coordinates ({x1}, {y1}, {x2}, {y2})"
            )));
        }
        if x2 <= x1 || y2 <= y1 {
            return Err(Error::Input(format!(
                "degenerate box ({x1}, {y1}, {x2}, {y2})"
            )));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn x1(&self) -> f64 {
        self.x1
    }
    pub fn y1(&self) -> f64 {
        self.y1
    }
    pub fn x2(&self) -> f64 {
        self.x2
    }
    pub fn y2(&self) -> f64 {
        self.y2
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    /// Applies `p ↦ scale·p + (dx, dy)` to both corners; `scale > 0`.
    pub fn affine(&self, scale: f64, dx: f64, dy: f64) -> Result<Self> {
        Self::new(
            self.x1 * scale + dx,
            self.y1 * scale + dy,
            self.x2 * scale + dx,
            self.y2 * scale + dy,
        )
    }

    /// Clips the box to `[0, width] × [0, height]`.
    pub fn clamp_to(&self, width: f64, height: f64) -> Result<Self> {
        Self::new(
            self.x1.clamp(0.0, width),
            self.y1.clamp(0.0, height),
            self.x2.clamp(0.0, width),
            self.y2.clamp(0.0, height),
        )
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = Error;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.to_array()
    }
}

/// A detector output: box, category name, confidence in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub category: String,
    pub score: f64,
}

impl Detection {
    pub fn new(bbox: BBox, category: impl Into<String>, score: f64) -> Result<Self> {
        let category = category.into();
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::Input(format!("detection score {score} outside [0, 1]")));
        }
        if category.is_empty() {
            return Err(Error::Input("empty detection category".into()));
        }
        Ok(Self {
            bbox,
            category,
            score,
        })
    }
}

pub fn intersection_area(a: &BBox, b: &BBox) -> f64 {
    let w = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let h = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    w * h
}

/// Intersection over union.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = intersection_area(a, b);
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Tightest box covering both inputs.
pub fn union_box(a: &BBox, b: &BBox) -> BBox {
    BBox {
        x1: a.x1.min(b.x1),
        y1: a.y1.min(b.y1),
        x2: a.x2.max(b.x2),
        y2: a.y2.max(b.y2),
    }
}

/// Two-channel binary interaction pattern: channel 0 human, channel 1 object.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialMap {
    channels: Tensor,
}

impl SpatialMap {
    /// Wraps a `[2 × S × S]` tensor of zeros and ones.
    pub fn from_tensor(channels: Tensor) -> Result<Self> {
        let s = channels.shape();
        if s.len() != 3 || s[0] != 2 || s[1] != s[2] {
            return Err(Error::dim(format!("spatial map must be 2×S×S, got {s:?}")));
        }
        if channels.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Input("spatial map values must be 0 or 1".into()));
        }
        Ok(Self { channels })
    }

    pub fn size(&self) -> usize {
        self.channels.shape()[1]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.channels
    }

    pub fn into_tensor(self) -> Tensor {
        self.channels
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let s = self.size();
        &self.channels.data()[c * s * s..(c + 1) * s * s]
    }

    pub fn channel_sum(&self, c: usize) -> f64 {
        self.channel(c).iter().sum()
    }
}

/// Minimum rasterization size accepted by [`rasterize_pair`].
pub const MIN_RASTER: usize = 8;

/// Rasterizes a human/object pair inside their union box.
///
/// The union box is mapped onto `[0, size]²`; cell `(r, c)` of a channel is
/// one iff its center lies in the transformed box, with half-open membership
/// `[x1, x2)`. The test is evaluated as `2·size·(x − ux1) ≤ (2c + 1)·uw`,
/// which avoids a division so that integer or dyadic inputs stay exact.
pub fn rasterize_pair(human: &BBox, object: &BBox, size: usize) -> Result<SpatialMap> {
    if size < MIN_RASTER {
        return Err(Error::dim(format!(
            "raster size {size} below minimum {MIN_RASTER}"
        )));
    }
    let u = union_box(human, object);
    let (uw, uh) = (u.width(), u.height());
    let s2 = 2.0 * size as f64;
    let mut data = vec![0.0; 2 * size * size];
    for (ch, b) in [human, object].into_iter().enumerate() {
        let lo_x = s2 * (b.x1 - u.x1);
        let hi_x = s2 * (b.x2 - u.x1);
        let lo_y = s2 * (b.y1 - u.y1);
        let hi_y = s2 * (b.y2 - u.y1);
        let cols: Vec<bool> = (0..size)
            .map(|c| {
                let p = (2 * c + 1) as f64 * uw;
                lo_x <= p && p < hi_x
            })
            .collect();
        for r in 0..size {
            let p = (2 * r + 1) as f64 * uh;
            if !(lo_y <= p && p < hi_y) {
                continue;
            }
            let row = &mut data[(ch * size + r) * size..(ch * size + r + 1) * size];
            for (cell, &inside) in row.iter_mut().zip(&cols) {
                if inside {
                    *cell = 1.0;
                }
            }
        }
    }
    Ok(SpatialMap {
        channels: Tensor::from_parts(vec![2, size, size], data),
    })
}

/// Uniform translation/scale jitter, rejection-sampled against an IoU floor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JitterConfig {
    /// Maximum translation as a fraction of box width/height.
    pub max_shift: f64,
    /// Scale factors are drawn from `[min_scale, max_scale]` per axis.
    pub min_scale: f64,
    pub max_scale: f64,
    /// Accepted boxes satisfy `iou(jittered, original) > min_iou`.
    pub min_iou: f64,
    pub max_tries: usize,
}

impl Default for JitterConfig {
    fn default() -> Self {
        Self {
            max_shift: 0.1,
            min_scale: 0.9,
            max_scale: 1.1,
            min_iou: 0.7,
            max_tries: 20,
        }
    }
}

impl JitterConfig {
    pub fn none() -> Self {
        Self {
            max_shift: 0.0,
            min_scale: 1.0,
            max_scale: 1.0,
            ..Self::default()
        }
    }

    fn is_identity(&self) -> bool {
        self.max_shift == 0.0 && self.min_scale == 1.0 && self.max_scale == 1.0
    }
}

/// Returns a randomly shifted and rescaled copy of `b` whose IoU with `b`
/// exceeds `cfg.min_iou`, or `b` itself after `cfg.max_tries` rejections.
pub fn jitter_box<R: Rng + ?Sized>(b: &BBox, rng: &mut R, cfg: &JitterConfig) -> BBox {
    if cfg.is_identity() {
        return *b;
    }
    let (cx, cy) = b.center();
    let (w, h) = (b.width(), b.height());
    for _ in 0..cfg.max_tries {
        let dx = rng.random_range(-cfg.max_shift..=cfg.max_shift) * w;
        let dy = rng.random_range(-cfg.max_shift..=cfg.max_shift) * h;
        let sw = rng.random_range(cfg.min_scale..=cfg.max_scale);
        let sh = rng.random_range(cfg.min_scale..=cfg.max_scale);
        let (nw, nh) = (0.5 * w * sw, 0.5 * h * sh);
        let Ok(cand) = BBox::new(cx + dx - nw, cy + dy - nh, cx + dx + nw, cy + dy + nh) else {
            continue;
        };
        if iou(&cand, b) > cfg.min_iou {
            return cand;
        }
    }
    *b
}
