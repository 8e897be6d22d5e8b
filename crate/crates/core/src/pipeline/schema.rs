//! JSON interchange formats. Every file carries `schema_version`.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{ClassAp, GroundTruthTriplet, PredictionTriplet};
use crate::geometry::{BBox, Detection};
use crate::pipeline::config::SCHEMA_VERSION;
use crate::streams::ActionCatalog;

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// Pretty-printed with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("schema types serialize");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn check_version(path: &Path, v: u32) -> Result<()> {
    if v == SCHEMA_VERSION {
        Ok(())
    } else {
        Err(Error::Input(format!(
            "{}: schema_version {v}, expected {SCHEMA_VERSION}",
            path.display()
        )))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageDetections {
    pub id: u64,
    pub width: f64,
    pub height: f64,
    pub detections: Vec<Detection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionFile {
    pub schema_version: u32,
    pub images: Vec<ImageDetections>,
}

impl DetectionFile {
    pub fn new(images: Vec<ImageDetections>) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            images,
        }
    }

    /// Parses, validates scores and categories, and clamps boxes to the image.
    pub fn load(path: &Path) -> Result<Self> {
        let mut f: Self = read_json(path)?;
        check_version(path, f.schema_version)?;
        for img in &mut f.images {
            if !(img.width > 0.0 && img.height > 0.0) {
                return Err(Error::Input(format!(
                    "{}: image {} has non-positive size",
                    path.display(),
                    img.id
                )));
            }
            for (k, d) in img.detections.iter_mut().enumerate() {
                let clamped = d.bbox.clamp_to(img.width, img.height).map_err(|e| {
                    Error::Input(format!("{}: image {} detection {k}: {e}", path.display(), img.id))
                })?;
                *d = Detection::new(clamped, d.category.clone(), d.score).map_err(|e| {
                    Error::Input(format!("{}: image {} detection {k}: {e}", path.display(), img.id))
                })?;
            }
        }
        Ok(f)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppearanceEntry {
    /// Position of the detection in the image's detection list.
    pub index: usize,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageAppearance {
    pub id: u64,
    pub features: Vec<AppearanceEntry>,
}

/// Precomputed appearance features, one per detection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppearanceFile {
    pub schema_version: u32,
    pub dim: usize,
    pub images: Vec<ImageAppearance>,
}

impl AppearanceFile {
    pub fn load(path: &Path) -> Result<Self> {
        let f: Self = read_json(path)?;
        check_version(path, f.schema_version)?;
        for img in &f.images {
            for e in &img.features {
                if e.values.len() != f.dim || e.values.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Input(format!(
                        "{}: image {} detection {}: expected {} finite values",
                        path.display(),
                        img.id,
                        e.index,
                        f.dim
                    )));
                }
            }
        }
        Ok(f)
    }

    /// Rows for the given detection indices of one image.
    pub fn rows(&self, image_id: u64, indices: &[usize]) -> Result<Vec<Vec<f64>>> {
        let img = self
            .images
            .iter()
            .find(|i| i.id == image_id)
            .ok_or_else(|| Error::Input(format!("no appearance features for image {image_id}")))?;
        indices
            .iter()
            .map(|&k| {
                img.features
                    .iter()
                    .find(|e| e.index == k)
                    .map(|e| e.values.clone())
                    .ok_or_else(|| {
                        Error::Input(format!(
                            "no appearance feature for image {image_id} detection {k}"
                        ))
                    })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedTriplet {
    pub human_box: BBox,
    pub action: String,
    pub object_box: Option<BBox>,
    pub object_category: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageAnnotations {
    pub image_id: u64,
    #[serde(default)]
    pub tags: Vec<String>,
    pub triplets: Vec<AnnotatedTriplet>,
}

/// Ground-truth interactions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationFile {
    pub schema_version: u32,
    pub images: Vec<ImageAnnotations>,
}

impl AnnotationFile {
    pub fn new(images: Vec<ImageAnnotations>) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            images,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f: Self = read_json(path)?;
        check_version(path, f.schema_version)?;
        Ok(f)
    }

    /// Resolves action names; object presence must match the action.
    pub fn ground_truth(&self, catalog: &ActionCatalog) -> Result<Vec<GroundTruthTriplet>> {
        let mut out = Vec::new();
        for img in &self.images {
            for t in &img.triplets {
                let a = catalog.index_of(&t.action).ok_or_else(|| {
                    Error::Input(format!("image {}: unknown action {:?}", img.image_id, t.action))
                })?;
                if catalog.requires_object(a) != t.object_box.is_some() {
                    return Err(Error::Input(format!(
                        "image {}: action {} {} an object box",
                        img.image_id,
                        t.action,
                        if catalog.requires_object(a) { "needs" } else { "must not have" }
                    )));
                }
                out.push(GroundTruthTriplet {
                    image_id: img.image_id,
                    human_box: t.human_box,
                    action: a,
                    object_box: t.object_box,
                    object_category: t.object_category.clone(),
                });
            }
        }
        Ok(out)
    }

    pub fn tagged(&self, tag: &str) -> Vec<u64> {
        self.images
            .iter()
            .filter(|i| i.tags.iter().any(|t| t == tag))
            .map(|i| i.image_id)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub image_id: u64,
    pub human_box: BBox,
    pub action: String,
    pub object_box: Option<BBox>,
    pub object_category: Option<String>,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionFile {
    pub schema_version: u32,
    pub config_hash: String,
    pub predictions: Vec<PredictionRecord>,
}

impl PredictionFile {
    pub fn from_triplets(
        triplets: &[PredictionTriplet],
        catalog: &ActionCatalog,
        config_hash: &str,
    ) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            config_hash: config_hash.to_string(),
            predictions: triplets
                .iter()
                .map(|t| PredictionRecord {
                    image_id: t.image_id,
                    human_box: t.human_box,
                    action: catalog.name(t.action).to_string(),
                    object_box: t.object_box,
                    object_category: t.object_category.clone(),
                    score: t.score,
                })
                .collect(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f: Self = read_json(path)?;
        check_version(path, f.schema_version)?;
        Ok(f)
    }

    pub fn triplets(&self, catalog: &ActionCatalog) -> Result<Vec<PredictionTriplet>> {
        self.predictions
            .iter()
            .map(|p| {
                let action = catalog.index_of(&p.action).ok_or_else(|| {
                    Error::Input(format!("prediction with unknown action {:?}", p.action))
                })?;
                if !p.score.is_finite() {
                    return Err(Error::Input(format!(
                        "image {}: non-finite prediction score",
                        p.image_id
                    )));
                }
                Ok(PredictionTriplet {
                    image_id: p.image_id,
                    human_box: p.human_box,
                    action,
                    object_box: p.object_box,
                    object_category: p.object_category.clone(),
                    score: p.score,
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub config_hash: String,
    pub iou_thresh: f64,
    /// Image tag the evaluation was restricted to, if any.
    pub subset: Option<String>,
    pub per_class: Vec<ClassAp>,
    pub mean_ap: f64,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x: f64) -> BBox {
        BBox::new(x, 1.0, x + 5.0, 9.0).unwrap()
    }

    #[test]
    fn schemas_round_trip() {
        let det = DetectionFile::new(vec![ImageDetections {
            id: 7,
            width: 100.0,
            height: 50.0,
            detections: vec![Detection::new(b(2.0), "person", 0.9).unwrap()],
        }]);
        let text = serde_json::to_string(&det).unwrap();
        assert!(text.contains("\"box\":[2.0,1.0,7.0,9.0]"));
        let back: DetectionFile = serde_json::from_str(&text).unwrap();
        assert_eq!(back, det);

        let ann = AnnotationFile::new(vec![ImageAnnotations {
            image_id: 7,
            tags: vec!["context".into()],
            triplets: vec![
                AnnotatedTriplet {
                    human_box: b(0.0),
                    action: "hold".into(),
                    object_box: Some(b(10.0)),
                    object_category: Some("cup".into()),
                },
                AnnotatedTriplet {
                    human_box: b(0.0),
                    action: "stand".into(),
                    object_box: None,
                    object_category: None,
                },
            ],
        }]);
        let back: AnnotationFile = serde_json::from_str(&serde_json::to_string(&ann).unwrap()).unwrap();
        assert_eq!(back, ann);
        let cat = ActionCatalog::synthetic();
        let gts = ann.ground_truth(&cat).unwrap();
        assert_eq!(gts.len(), 2);
        assert_eq!(ann.tagged("context"), vec![7]);

        let preds: Vec<PredictionTriplet> = gts
            .iter()
            .map(|g| PredictionTriplet {
                image_id: g.image_id,
                human_box: g.human_box,
                action: g.action,
                object_box: g.object_box,
                object_category: g.object_category.clone(),
                score: 0.5,
            })
            .collect();
        let pf = PredictionFile::from_triplets(&preds, &cat, "h");
        let text = serde_json::to_string(&pf).unwrap();
        let back: PredictionFile = serde_json::from_str(&text).unwrap();
        assert_eq!(back.triplets(&cat).unwrap(), preds);
    }

    #[test]
    fn object_presence_must_match_action() {
        let ann = AnnotationFile::new(vec![ImageAnnotations {
            image_id: 1,
            tags: vec![],
            triplets: vec![AnnotatedTriplet {
                human_box: b(0.0),
                action: "hold".into(),
                object_box: None,
                object_category: None,
            }],
        }]);
        assert!(ann.ground_truth(&ActionCatalog::synthetic()).is_err());
    }

    #[test]
    fn malformed_json_reports_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.json");
        std::fs::write(&p, "{\n \"schema_version\": 1,\n \"images\": [\n  {\"id\": -1}\n ]\n}\n").unwrap();
        let err = DetectionFile::load(&p).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("line 4"), "{err}");
    }
}
