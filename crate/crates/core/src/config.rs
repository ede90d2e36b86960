//! Run configuration: model sizes, layout, seeds and training recipe.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapter::AdapterConfig;
use crate::backbone::BackboneConfig;
use crate::classifier::ClassifierConfig;
use crate::decoder::DecoderConfig;
use crate::error::{Error, Result};
use crate::tensor::Fnv;

pub const SEED_ENV: &str = "MROVSEG_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub poly_power: f64,
    pub clip_norm: f64,
    pub lambda_cls: f64,
    pub lambda_bce: f64,
    pub lambda_dice: f64,
    pub no_object_weight: f64,
    pub n_images: usize,
    pub n_classes: usize,
    /// Steps between train-set evaluations; 0 disables them.
    pub eval_every: usize,
    /// Stops once the evaluated train mIoU reaches this value.
    pub target_miou: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 200,
            batch_size: 1,
            base_lr: 2e-4,
            weight_decay: 1e-4,
            poly_power: 0.9,
            clip_norm: 1.0,
            lambda_cls: 2.0,
            lambda_bce: 5.0,
            lambda_dice: 5.0,
            no_object_weight: 0.1,
            n_images: 8,
            n_classes: 4,
            eval_every: 0,
            target_miou: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub image_hw: (usize, usize),
    /// Crop ratio; 0 runs on the global view alone.
    pub p: f64,
    pub backbone: BackboneConfig,
    pub adapter: AdapterConfig,
    pub decoder: DecoderConfig,
    pub classifier: ClassifierConfig,
    pub train: TrainConfig,
    pub vocabulary: Option<String>,
    pub checkpoint: Option<String>,
    pub output_dir: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            image_hw: (640, 640),
            p: 0.5,
            backbone: BackboneConfig::default(),
            adapter: AdapterConfig::default(),
            decoder: DecoderConfig::default(),
            classifier: ClassifierConfig::default(),
            train: TrainConfig::default(),
            vocabulary: None,
            checkpoint: None,
            output_dir: None,
        }
    }
}

/// Subsystem a derived seed is used for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SeedUse {
    Backbone,
    Init,
    Data,
    Text,
}

impl RunConfig {
    /// Small preset for CPU training on synthetic images.
    pub fn toy() -> Self {
        RunConfig {
            seed: 0,
            image_hw: (128, 128),
            p: 0.5,
            backbone: BackboneConfig {
                patch: 8,
                dim: 64,
                heads: 4,
                depth: 4,
                mlp_ratio: 2,
                tap_layers: vec![0, 2, 4],
                cls_tap: 2,
                native_window: 64,
                embed_dim: 64,
                init_std: 0.125,
            },
            adapter: AdapterConfig {
                blocks: 3,
                heads: 4,
                dim: 128,
                queries: 20,
                mlp_ratio: 2,
                fusion_layers: vec![0, 2, 4],
                fusion_enabled: true,
                fusion_at_high_res: false,
                init_std: 0.02,
            },
            decoder: DecoderConfig {
                pyramid_width: 32,
                d_pix: 64,
                ladder_steps: 2,
            },
            classifier: ClassifierConfig {
                attn_head_dim: 32,
                ..Default::default()
            },
            train: TrainConfig {
                steps: 1000,
                base_lr: 1e-3,
                eval_every: 50,
                target_miou: Some(0.9),
                ..Default::default()
            },
            vocabulary: None,
            checkpoint: None,
            output_dir: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(0.0..=1.0).contains(&self.p) {
            return bad(format!("crop ratio {} outside [0, 1]", self.p));
        }
        self.backbone.validate()?;
        self.adapter.validate(&self.backbone)?;
        self.decoder.validate()?;
        let (h, w) = self.image_hw;
        let nw = self.backbone.native_window;
        if h < nw || w < nw {
            return bad(format!("image {h}x{w} smaller than the native window {nw}"));
        }
        let t = &self.train;
        if t.batch_size == 0 || t.n_classes == 0 || t.n_images == 0 {
            return bad("training batch, class and image counts must be positive".into());
        }
        if !(t.base_lr >= 0.0 && t.weight_decay >= 0.0 && t.poly_power > 0.0 && t.clip_norm > 0.0) {
            return bad("invalid optimiser settings".into());
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    /// Applies the seed override from the environment, if set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v.trim().parse().map_err(|_| {
                Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer"))
            })?;
        }
        Ok(())
    }

    pub fn derived_seed(&self, usage: SeedUse) -> u64 {
        let mut h = Fnv::new();
        h.write(&self.seed.to_le_bytes());
        h.write(&[usage as u8]);
        h.finish()
    }
}
