//! Run configuration, dataset profiles and the configuration hash.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::evaluation::DEFAULT_IOU_THRESHOLD;
use crate::geometry::Detection;
use crate::model::ModelConfig;
use crate::spatial_semantic::SpatialConfig;
use crate::streams::ActionCatalog;
use crate::training::TrainConfig;

pub const SCHEMA_VERSION: u32 = 1;

/// Detection filtering and action vocabulary of one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetProfile {
    pub name: String,
    pub human_category: String,
    /// Humans are kept when their score is strictly above this.
    pub human_score_thresh: f64,
    /// Objects are kept when their score is strictly above this.
    pub object_score_thresh: f64,
    /// Whether human detections also enter the object list.
    pub person_as_object: bool,
    pub catalog: ActionCatalog,
}

impl DatasetProfile {
    pub fn vcoco() -> Self {
        Self {
            name: "vcoco".into(),
            human_category: "person".into(),
            human_score_thresh: 0.8,
            object_score_thresh: 0.1,
            person_as_object: true,
            catalog: ActionCatalog::vcoco(),
        }
    }

    pub fn hico() -> Self {
        Self {
            name: "hico".into(),
            human_score_thresh: 0.6,
            object_score_thresh: 0.4,
            catalog: ActionCatalog::hico(),
            ..Self::vcoco()
        }
    }

    pub fn synthetic() -> Self {
        Self {
            name: "synthetic".into(),
            human_score_thresh: 0.5,
            object_score_thresh: 0.1,
            person_as_object: false,
            catalog: ActionCatalog::synthetic(),
            ..Self::vcoco()
        }
    }

    /// Indices (into `dets`) of the kept humans and kept objects.
    pub fn split(&self, dets: &[Detection]) -> (Vec<usize>, Vec<usize>) {
        let mut humans = Vec::new();
        let mut objects = Vec::new();
        for (k, d) in dets.iter().enumerate() {
            let is_person = d.category == self.human_category;
            if is_person && d.score > self.human_score_thresh {
                humans.push(k);
            }
            if (!is_person || self.person_as_object) && d.score > self.object_score_thresh {
                objects.push(k);
            }
        }
        (humans, objects)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub schema_version: u32,
    pub profile: DatasetProfile,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Share of training images held out for early stopping.
    pub val_fraction: f64,
    pub iou_thresh: f64,
}

impl RunConfig {
    pub fn for_profile(profile: DatasetProfile, model: ModelConfig) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            profile,
            model,
            train: TrainConfig::default(),
            val_fraction: 0.1,
            iou_thresh: DEFAULT_IOU_THRESHOLD,
        }
    }

    pub fn vcoco() -> Self {
        Self::for_profile(DatasetProfile::vcoco(), ModelConfig::default())
    }

    pub fn hico() -> Self {
        Self::for_profile(DatasetProfile::hico(), ModelConfig::default())
    }

    /// Desk-scale dimensions for the generated corpus.
    pub fn synthetic() -> Self {
        let model = ModelConfig {
            spatial: SpatialConfig {
                raster: 24,
                conv1_channels: 8,
                conv1_kernel: 5,
                conv2_channels: 16,
                conv2_kernel: 5,
            },
            embed_dim: 16,
            appearance_dim: 8,
            key_dim: 32,
            hidden: 64,
            ..ModelConfig::default()
        };
        let mut cfg = Self::for_profile(DatasetProfile::synthetic(), model);
        cfg.train.max_epochs = 40;
        cfg
    }

    pub fn named(profile: &str) -> Result<Self> {
        match profile {
            "vcoco" => Ok(Self::vcoco()),
            "hico" => Ok(Self::hico()),
            "synthetic" => Ok(Self::synthetic()),
            other => Err(Error::Input(format!(
                "unknown profile {other:?} (expected vcoco, hico or synthetic)"
            ))),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.profile;
        for (what, v) in [
            ("human_score_thresh", p.human_score_thresh),
            ("object_score_thresh", p.object_score_thresh),
            ("val_fraction", self.val_fraction),
            ("iou_thresh", self.iou_thresh),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Input(format!("{what} = {v} is outside [0, 1]")));
            }
        }
        let s = &self.train.sgd;
        if !(s.lr > 0.0 && s.momentum >= 0.0 && s.weight_decay >= 0.0) {
            return Err(Error::Input("optimizer scalars must be positive".into()));
        }
        self.model.node_dim()?;
        Ok(())
    }

    /// Hex SHA-256 of the serialized configuration.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

/// Command-line adjustments layered over a base configuration.
#[derive(Debug, Clone, Default)]
pub struct ConfigOverrides {
    pub iters_human: Option<usize>,
    pub iters_object: Option<usize>,
    pub disable_human_graph: bool,
    pub disable_object_graph: bool,
    pub human_score_thresh: Option<f64>,
    pub object_score_thresh: Option<f64>,
    pub lr: Option<f64>,
    pub momentum: Option<f64>,
    pub weight_decay: Option<f64>,
    pub max_epochs: Option<usize>,
    pub patience: Option<usize>,
    pub seed: Option<u64>,
}

impl ConfigOverrides {
    pub fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        let m = &mut cfg.model;
        if let Some(v) = self.iters_human {
            m.iters_human = v;
        }
        if let Some(v) = self.iters_object {
            m.iters_object = v;
        }
        m.human_graph &= !self.disable_human_graph;
        m.object_graph &= !self.disable_object_graph;
        let p = &mut cfg.profile;
        if let Some(v) = self.human_score_thresh {
            p.human_score_thresh = v;
        }
        if let Some(v) = self.object_score_thresh {
            p.object_score_thresh = v;
        }
        let t = &mut cfg.train;
        if let Some(v) = self.lr {
            t.sgd.lr = v;
        }
        if let Some(v) = self.momentum {
            t.sgd.momentum = v;
        }
        if let Some(v) = self.weight_decay {
            t.sgd.weight_decay = v;
        }
        if let Some(v) = self.max_epochs {
            t.max_epochs = v;
        }
        if let Some(v) = self.patience {
            t.patience = v;
        }
        if let Some(v) = self.seed {
            t.seed = v;
        }
        cfg.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BBox;

    #[test]
    fn profiles_carry_thresholds_and_optimizer_defaults() {
        let v = RunConfig::vcoco();
        assert_eq!(v.profile.human_score_thresh, 0.8);
        assert_eq!(v.profile.object_score_thresh, 0.1);
        assert_eq!(v.profile.catalog.len(), 29);
        assert_eq!(v.model.node_dim().unwrap(), 5708);
        let h = RunConfig::hico();
        assert_eq!((h.profile.human_score_thresh, h.profile.object_score_thresh), (0.6, 0.4));
        assert_eq!(v.train.sgd.lr, 0.0025);
        assert_eq!(v.train.sgd.momentum, 0.9);
        assert_eq!(v.train.sgd.weight_decay, 1e-4);
        assert!(RunConfig::synthetic().validate().is_ok());
        assert!(RunConfig::named("nope").is_err());
    }

    #[test]
    fn thresholds_are_strict() {
        let p = DatasetProfile::vcoco();
        let b = BBox::new(0.0, 0.0, 1.0, 1.0).unwrap();
        let dets = vec![
            Detection::new(b, "person", 0.8).unwrap(),
            Detection::new(b, "person", 0.81).unwrap(),
            Detection::new(b, "cup", 0.1).unwrap(),
            Detection::new(b, "cup", 0.11).unwrap(),
        ];
        let (h, o) = p.split(&dets);
        assert_eq!(h, vec![1]);
        assert_eq!(o, vec![0, 1, 3]);
        let (_, o) = DatasetProfile::synthetic().split(&dets);
        assert_eq!(o, vec![3]);
    }

    #[test]
    fn hash_tracks_content_and_round_trips() {
        let a = RunConfig::synthetic();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        ConfigOverrides {
            iters_human: Some(0),
            ..Default::default()
        }
        .apply(&mut b)
        .unwrap();
        assert_ne!(a.hash(), b.hash());
        let text = serde_json::to_string(&a).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, a);
        assert_eq!(back.hash(), a.hash());
    }

    #[test]
    fn invalid_values_are_rejected() {
        let mut c = RunConfig::vcoco();
        c.profile.human_score_thresh = 1.5;
        assert!(c.validate().is_err());
    }
}
