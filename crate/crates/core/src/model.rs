//! The full segmentation model: frozen backbone, adapter, mask decoder and
//! mask classifier wired together.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adapter::{Adapter, AdapterOutput};
use crate::autograd::Tape;
use crate::backbone::{Backbone, MultiResFeatures};
use crate::classifier::{ClassifierOutput, MaskClassifier};
use crate::config::{RunConfig, SeedUse};
use crate::decoder::{MaskDecoder, MaskPrediction};
use crate::error::Result;
use crate::geometry::{plan_layout, SliceLayout};
use crate::image::InputImage;
use crate::params::ParameterStore;
use crate::tensor::{kernels, Real, Tensor};
use crate::text::{PromptTemplates, TextEmbedder};

pub const CAT_QUERY_POS: &str = "Query & Positional Embedding";
pub const CAT_VIT_BLOCKS: &str = "ViT Blocks";
pub const CAT_MRF: &str = "MRF Modules";
pub const CAT_MASK_DECODING: &str = "Hierarchical Mask Decoding";
pub const CAT_ATTN_DECODING: &str = "Decoupled Attention Decoding";
pub const CAT_CLASS_HEAD: &str = "Class Embedding Head";

/// Parameter-count category of a trainable parameter.
pub fn param_category(name: &str) -> &'static str {
    let is = |p: &str| name == p || name.starts_with(&format!("{p}."));
    if is("adapter.queries") || is("adapter.pos") || is("classifier.prop_pos") {
        CAT_QUERY_POS
    } else if is("adapter.mrf") {
        CAT_MRF
    } else if is("adapter.mlp_q") || is("decoder") {
        CAT_MASK_DECODING
    } else if is("classifier.mlp_local") || is("classifier.mlp_global") {
        CAT_ATTN_DECODING
    } else if is("adapter") {
        CAT_VIT_BLOCKS
    } else {
        CAT_CLASS_HEAD
    }
}

/// Parameter counts per category plus trainable, frozen and overall totals.
pub fn param_report<T: Real>(store: &ParameterStore<T>) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    for c in [
        CAT_QUERY_POS,
        CAT_VIT_BLOCKS,
        CAT_MRF,
        CAT_MASK_DECODING,
        CAT_ATTN_DECODING,
        CAT_CLASS_HEAD,
    ] {
        out.insert(c.to_string(), 0);
    }
    for (name, t) in store.iter() {
        if !store.is_frozen(name) {
            *out.get_mut(param_category(name)).expect("known category") += t.numel();
        }
    }
    out.insert("Trainable Total".into(), store.count(|_, frozen| !frozen));
    out.insert("Frozen".into(), store.count(|_, frozen| frozen));
    out.insert("Total".into(), store.count(|_, _| true));
    out
}

pub struct ModelOutput<'t, T: Real> {
    pub adapter: AdapterOutput<'t, T>,
    pub masks: MaskPrediction<'t, T>,
    pub classes: ClassifierOutput<'t, T>,
}

/// Detached inference result.
#[derive(Clone, Debug)]
pub struct Prediction {
    /// `[N, K + 1]`.
    pub class_logits: Tensor<f64>,
    /// `[N, H, W]` at image resolution.
    pub mask_logits: Tensor<f64>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: RunConfig,
    pub backbone: Backbone,
    pub adapter: Adapter,
    pub decoder: MaskDecoder,
    pub classifier: MaskClassifier,
}

impl Model {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let backbone = Backbone::new(cfg.backbone.clone())?;
        let grid = layout_for(&cfg, cfg.image_hw)?.grid_hw();
        let adapter = Adapter::new(cfg.adapter.clone(), &cfg.backbone, grid)?;
        let decoder = MaskDecoder::new(cfg.decoder.clone(), cfg.adapter.dim)?;
        let classifier = MaskClassifier::new(
            cfg.classifier.clone(),
            &backbone,
            cfg.adapter.dim,
            cfg.adapter.queries,
        )?;
        Ok(Model {
            cfg,
            backbone,
            adapter,
            decoder,
            classifier,
        })
    }

    pub fn layout(&self, input_hw: (usize, usize)) -> Result<SliceLayout> {
        layout_for(&self.cfg, input_hw)
    }

    /// Registers every parameter: backbone weights from the backbone seed,
    /// the rest from the init seed.
    pub fn init_store<T: Real>(&self) -> Result<ParameterStore<T>> {
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.derived_seed(SeedUse::Backbone));
        self.backbone.register(&mut store, &mut rng)?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.derived_seed(SeedUse::Init));
        self.adapter.register(&mut store, &mut rng)?;
        self.decoder.register(&mut store, &mut rng)?;
        self.classifier.register(&mut store, &mut rng)?;
        Ok(store)
    }

    /// Text encoder seeded for this configuration.
    pub fn text_embedder(&self, templates: PromptTemplates) -> Result<TextEmbedder> {
        TextEmbedder::new(
            self.cfg.backbone.embed_dim,
            self.cfg.derived_seed(SeedUse::Text),
            templates,
        )
    }

    /// Frozen backbone features of one image.
    pub fn encode<T: Real>(
        &self,
        store: &ParameterStore<T>,
        img: &InputImage,
    ) -> Result<MultiResFeatures<T>> {
        if self.cfg.p == 0.0 {
            self.backbone.encode_single_res(store, img)
        } else {
            self.backbone
                .encode_multires(store, img, &self.layout(img.hw())?)
        }
    }

    pub fn forward<'t, T: Real>(
        &self,
        tape: &'t Tape<T>,
        store: &ParameterStore<T>,
        feats: &MultiResFeatures<T>,
        text: &Tensor<T>,
    ) -> Result<ModelOutput<'t, T>> {
        let adapter = self.adapter.forward(tape, store, feats)?;
        let masks = self
            .decoder
            .forward(tape, store, adapter.h, &adapter.fused, adapter.q_f)?;
        let classes = self.classifier.forward(
            tape,
            store,
            &self.backbone,
            feats,
            adapter.h,
            adapter.q_f,
            text,
        )?;
        Ok(ModelOutput {
            adapter,
            masks,
            classes,
        })
    }

    /// Inference with mask logits resampled to `out_hw`.
    pub fn predict_features<T: Real>(
        &self,
        store: &ParameterStore<T>,
        feats: &MultiResFeatures<T>,
        text: &Tensor<T>,
        out_hw: (usize, usize),
    ) -> Result<Prediction> {
        let tape = Tape::new();
        let out = self.forward(&tape, store, feats, text)?;
        let mut masks: Tensor<f64> = out.masks.logits.value().cast();
        let (crop_h, crop_w) = self.mask_content_hw(feats, out.masks.hw);
        if (crop_h, crop_w) != out.masks.hw {
            masks = masks.narrow(1, 0, crop_h)?.narrow(2, 0, crop_w)?;
        }
        Ok(Prediction {
            class_logits: out.classes.logits.value().cast(),
            mask_logits: resize_masks(&masks, out_hw)?,
        })
    }

    /// Part of a mask grid that shows image content rather than padding.
    pub fn mask_content_hw(
        &self,
        feats: &MultiResFeatures<impl Real>,
        mask_hw: (usize, usize),
    ) -> (usize, usize) {
        if self.cfg.p != 0.0 {
            return mask_hw;
        }
        let nw = self.cfg.backbone.native_window as f64;
        let (ch, cw) = feats.global_content_hw;
        let h = ((mask_hw.0 as f64 * ch as f64 / nw).round() as usize).clamp(1, mask_hw.0);
        let w = ((mask_hw.1 as f64 * cw as f64 / nw).round() as usize).clamp(1, mask_hw.1);
        (h, w)
    }

    /// For every mask pixel, the image pixel it samples, or `None` over
    /// padding.
    pub fn mask_to_image(
        &self,
        feats: &MultiResFeatures<impl Real>,
        mask_hw: (usize, usize),
        img_hw: (usize, usize),
    ) -> Vec<Option<usize>> {
        let (ch, cw) = self.mask_content_hw(feats, mask_hw);
        let (h, w) = img_hw;
        let mut out = Vec::with_capacity(mask_hw.0 * mask_hw.1);
        for y in 0..mask_hw.0 {
            for x in 0..mask_hw.1 {
                if y >= ch || x >= cw {
                    out.push(None);
                    continue;
                }
                let sy = ((2 * y + 1) * h / (2 * ch)).min(h - 1);
                let sx = ((2 * x + 1) * w / (2 * cw)).min(w - 1);
                out.push(Some(sy * w + sx));
            }
        }
        out
    }

    pub fn predict<T: Real>(
        &self,
        store: &ParameterStore<T>,
        img: &InputImage,
        text: &Tensor<T>,
    ) -> Result<Prediction> {
        let feats = self.encode(store, img)?;
        self.predict_features(store, &feats, text, img.hw())
    }
}

fn layout_for(cfg: &RunConfig, input_hw: (usize, usize)) -> Result<SliceLayout> {
    if cfg.p == 0.0 {
        let nw = cfg.backbone.native_window;
        plan_layout((nw, nw), 1.0, cfg.backbone.patch)
    } else {
        plan_layout(input_hw, cfg.p, cfg.backbone.patch)
    }
}

/// Bilinear resampling of `[N, h, w]` mask logits.
pub fn resize_masks(masks: &Tensor<f64>, out_hw: (usize, usize)) -> Result<Tensor<f64>> {
    let s = masks.shape();
    if (s[1], s[2]) == out_hw {
        return Ok(masks.clone());
    }
    let data = kernels::resize_bilinear(masks.data(), s[0], s[1], s[2], out_hw.0, out_hw.1);
    Tensor::new(vec![s[0], out_hw.0, out_hw.1], data)
}
