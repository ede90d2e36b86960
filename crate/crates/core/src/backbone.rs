//! Frozen toy vision transformer standing in for a pretrained
//! vision-language image encoder.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::{downsample_pad, plan_layout, slice_image, SliceLayout};
use crate::image::InputImage;
use crate::nn::{register, Block, Init, LayerNorm, Linear};
use crate::params::ParameterStore;
use crate::tensor::{kernels, Real, Tensor};

pub const PREFIX: &str = "backbone";
/// Tap index of the tokens entering the first block.
pub const STEM: usize = 0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub patch: usize,
    pub dim: usize,
    pub heads: usize,
    pub depth: usize,
    pub mlp_ratio: usize,
    /// Recorded layers; 0 is the stem.
    pub tap_layers: Vec<usize>,
    pub cls_tap: usize,
    pub native_window: usize,
    pub embed_dim: usize,
    pub init_std: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            patch: 16,
            dim: 768,
            heads: 12,
            depth: 12,
            mlp_ratio: 4,
            tap_layers: vec![0, 3, 6, 9, 12],
            cls_tap: 9,
            native_window: 320,
            embed_dim: 512,
            init_std: 0.02,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch == 0
            || self.dim == 0
            || self.depth == 0
            || self.embed_dim == 0
            || self.mlp_ratio == 0
        {
            return bad("backbone sizes must be positive".into());
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return bad(format!(
                "backbone dim {} not divisible by {} heads",
                self.dim, self.heads
            ));
        }
        if self.cls_tap == 0 || self.cls_tap > self.depth {
            return bad(format!(
                "cls_tap {} outside 1..={}",
                self.cls_tap, self.depth
            ));
        }
        if let Some(t) = self.tap_layers.iter().find(|&&t| t > self.depth) {
            return bad(format!("tap layer {t} beyond depth {}", self.depth));
        }
        if self.tap_layers.windows(2).any(|w| w[0] >= w[1]) {
            return bad("tap layers must be strictly increasing".into());
        }
        if self.native_window == 0 || !self.native_window.is_multiple_of(self.patch) {
            return bad(format!(
                "native window {} not divisible by patch {}",
                self.native_window, self.patch
            ));
        }
        Ok(())
    }

    pub fn native_grid(&self) -> usize {
        self.native_window / self.patch
    }

    /// Layers recorded during encoding: taps, the stem and the CLS tap.
    pub fn recorded_layers(&self) -> Vec<usize> {
        let mut v = self.tap_layers.clone();
        v.extend([STEM, self.cls_tap]);
        v.sort_unstable();
        v.dedup();
        v
    }
}

/// Tokens of one encoded view at every recorded layer plus its CLS token.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewFeatures<T: Real = f32> {
    pub taps: BTreeMap<usize, Tensor<T>>,
    pub cls: Tensor<T>,
    /// Multiply-accumulates spent encoding the view.
    pub macs: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TapFeatures<T: Real = f32> {
    /// `[Lg, D]` low-resolution tokens of the global view.
    pub global: Tensor<T>,
    /// Per-slice `[L, D]` high-resolution tokens.
    pub slices: Vec<Tensor<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiResFeatures<T: Real = f32> {
    pub layout: SliceLayout,
    pub taps: BTreeMap<usize, TapFeatures<T>>,
    /// `[1, D]` CLS token of the global view at the CLS tap.
    pub cls: Tensor<T>,
    pub global_grid: (usize, usize),
    /// Global-view pixels holding image content (the rest is padding).
    pub global_content_hw: (usize, usize),
    /// Multiply-accumulates spent by the backbone over all views.
    pub backbone_macs: u64,
}

impl<T: Real> MultiResFeatures<T> {
    pub fn tap(&self, layer: usize) -> Result<&TapFeatures<T>> {
        self.taps
            .get(&layer)
            .ok_or_else(|| Error::Config(format!("layer {layer} was not recorded by the backbone")))
    }

    pub fn cast<U: Real>(&self) -> MultiResFeatures<U> {
        MultiResFeatures {
            layout: self.layout.clone(),
            taps: self
                .taps
                .iter()
                .map(|(&k, t)| {
                    (
                        k,
                        TapFeatures {
                            global: t.global.cast(),
                            slices: t.slices.iter().map(Tensor::cast).collect(),
                        },
                    )
                })
                .collect(),
            cls: self.cls.cast(),
            global_grid: self.global_grid,
            global_content_hw: self.global_content_hw,
            backbone_macs: self.backbone_macs,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    pub patch_embed: Linear,
    pub ln_pre: LayerNorm,
    pub blocks: Vec<Block>,
    pub proj: Linear,
}

/// `[3, H, W]` pixels to `[L, 3·p·p]` patch rows, channel-major within a patch.
pub fn patchify<T: Real>(pixels: &Tensor<f32>, patch: usize) -> Result<Tensor<T>> {
    let (h, w) = (pixels.shape()[1], pixels.shape()[2]);
    if h % patch != 0 || w % patch != 0 {
        return Err(Error::dim(
            "patchify",
            format!("{h}x{w} not divisible by patch {patch}"),
        ));
    }
    let (gh, gw) = (h / patch, w / patch);
    let row = 3 * patch * patch;
    let d = pixels.data();
    let mut out = Vec::with_capacity(gh * gw * row);
    for ty in 0..gh {
        for tx in 0..gw {
            for c in 0..3 {
                for py in 0..patch {
                    let base = (c * h + ty * patch + py) * w + tx * patch;
                    out.extend(d[base..base + patch].iter().map(|&v| T::from_f64(v as f64)));
                }
            }
        }
    }
    Tensor::new(vec![gh * gw, row], out)
}

impl Backbone {
    pub fn new(cfg: BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let blocks = (1..=cfg.depth)
            .map(|l| {
                Block::new(
                    &format!("{PREFIX}.blocks.{l}"),
                    d,
                    cfg.heads,
                    d * cfg.mlp_ratio,
                )
            })
            .collect::<Result<_>>()?;
        Ok(Backbone {
            patch_embed: Linear::new(
                format!("{PREFIX}.patch_embed"),
                3 * cfg.patch * cfg.patch,
                d,
                true,
            ),
            ln_pre: LayerNorm::new(format!("{PREFIX}.ln_pre"), d),
            blocks,
            proj: Linear::new(format!("{PREFIX}.proj"), d, cfg.embed_dim, false),
            cfg,
        })
    }

    pub fn cls_name() -> String {
        format!("{PREFIX}.cls")
    }

    pub fn pos_name() -> String {
        format!("{PREFIX}.pos")
    }

    /// Registers every backbone weight as a frozen parameter.
    pub fn register<T: Real, R: Rng + ?Sized>(
        &self,
        store: &mut ParameterStore<T>,
        rng: &mut R,
    ) -> Result<()> {
        let init = Init::Normal(self.cfg.init_std);
        let d = self.cfg.dim;
        let n = self.cfg.native_grid();
        self.patch_embed.register(store, init, true, rng)?;
        register(store, &Self::cls_name(), &[1, d], init, true, rng)?;
        register(store, &Self::pos_name(), &[1 + n * n, d], init, true, rng)?;
        self.ln_pre.register(store, true, rng)?;
        for b in &self.blocks {
            b.register(store, init, true, rng)?;
        }
        self.proj.register(store, init, true, rng)
    }

    /// Positional embeddings for a `gh × gw` token grid, bilinearly
    /// resampled from the native grid when the sizes differ.
    pub fn positional<T: Real>(
        &self,
        store: &ParameterStore<T>,
        gh: usize,
        gw: usize,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let pos = store
            .get(&Self::pos_name())
            .ok_or_else(|| Error::Contract("backbone not registered".into()))?;
        let (n, d) = (self.cfg.native_grid(), self.cfg.dim);
        let cls_pos = pos.narrow(0, 0, 1)?;
        let grid = pos.narrow(0, 1, n * n)?;
        if (gh, gw) == (n, n) {
            return Ok((cls_pos, grid));
        }
        let chw = grid.reshape(&[n, n, d])?.permute(&[2, 0, 1])?;
        let r = kernels::resize_bilinear(chw.data(), d, n, n, gh, gw);
        let resized = Tensor::new(vec![d, gh, gw], r)?
            .permute(&[1, 2, 0])?
            .into_reshaped(&[gh * gw, d])?;
        Ok((cls_pos, resized))
    }

    /// Encodes one view, recording tokens at every recorded layer.
    pub fn encode_view<T: Real>(
        &self,
        store: &ParameterStore<T>,
        img: &InputImage,
    ) -> Result<ViewFeatures<T>> {
        let p = self.cfg.patch;
        let (h, w) = img.hw();
        let (gh, gw) = (h / p, w / p);
        let patches = patchify::<T>(img.pixels(), p)?;
        let (cls_pos, grid_pos) = self.positional(store, gh, gw)?;
        let tape = Tape::new();
        let tokens = self
            .patch_embed
            .forward(&tape, store, tape.constant(patches))?;
        let tokens = tokens.add(tape.constant(grid_pos))?;
        let cls = tape
            .param(store, &Self::cls_name())?
            .add(tape.constant(cls_pos))?;
        let mut x = self
            .ln_pre
            .forward(&tape, store, tape.concat(&[cls, tokens], 0)?)?;
        let recorded = self.cfg.recorded_layers();
        let mut taps = BTreeMap::new();
        let mut cls_out = None;
        let l = gh * gw;
        let mut record = |layer: usize, x: Var<'_, T>| -> Result<()> {
            if recorded.contains(&layer) {
                taps.insert(layer, x.value().narrow(0, 1, l)?);
            }
            if layer == self.cfg.cls_tap {
                cls_out = Some(x.value().narrow(0, 0, 1)?);
            }
            Ok(())
        };
        record(STEM, x)?;
        for (i, b) in self.blocks.iter().enumerate() {
            x = b.forward(&tape, store, x)?;
            record(i + 1, x)?;
        }
        Ok(ViewFeatures {
            taps,
            cls: cls_out.expect("cls tap within depth"),
            macs: tape.macs(),
        })
    }

    /// Runs the shared weights over the padded global view and every slice.
    pub fn encode_multires<T: Real>(
        &self,
        store: &ParameterStore<T>,
        img: &InputImage,
        layout: &SliceLayout,
    ) -> Result<MultiResFeatures<T>> {
        let nw = self.cfg.native_window;
        let (global_img, content) = downsample_pad(img, (nw, nw))?;
        let global = self.encode_view(store, &global_img)?;
        let slices = slice_image(img, layout)?
            .iter()
            .map(|s| self.encode_view(store, s))
            .collect::<Result<Vec<_>>>()?;
        let mut taps = BTreeMap::new();
        for (&layer, g) in &global.taps {
            let s = slices.iter().map(|v| v.taps[&layer].clone()).collect();
            taps.insert(
                layer,
                TapFeatures {
                    global: g.clone(),
                    slices: s,
                },
            );
        }
        let n = self.cfg.native_grid();
        Ok(MultiResFeatures {
            layout: layout.clone(),
            taps,
            backbone_macs: global.macs + slices.iter().map(|v| v.macs).sum::<u64>(),
            cls: global.cls,
            global_grid: (n, n),
            global_content_hw: content,
        })
    }

    /// Single-resolution encoding: the padded global view also serves as
    /// the only slice.
    pub fn encode_single_res<T: Real>(
        &self,
        store: &ParameterStore<T>,
        img: &InputImage,
    ) -> Result<MultiResFeatures<T>> {
        let nw = self.cfg.native_window;
        let (global_img, content) = downsample_pad(img, (nw, nw))?;
        let global = self.encode_view(store, &global_img)?;
        let layout = plan_layout((nw, nw), 1.0, self.cfg.patch)?;
        let taps = global
            .taps
            .iter()
            .map(|(&l, g)| {
                (
                    l,
                    TapFeatures {
                        global: g.clone(),
                        slices: vec![g.clone()],
                    },
                )
            })
            .collect();
        let n = self.cfg.native_grid();
        Ok(MultiResFeatures {
            layout,
            taps,
            cls: global.cls,
            global_grid: (n, n),
            global_content_hw: content,
            backbone_macs: global.macs,
        })
    }

    /// The frozen block at 1-based `layer`, for reuse after the CLS tap.
    pub fn frozen_block(&self, layer: usize) -> Result<&Block> {
        if layer < self.cfg.cls_tap.max(1) || layer > self.cfg.depth {
            return Err(Error::Contract(format!(
                "layer {layer} outside {}..={} (blocks at or after the CLS tap)",
                self.cfg.cls_tap, self.cfg.depth
            )));
        }
        Ok(&self.blocks[layer - 1])
    }

    /// Bias-free projection into the joint embedding space.
    pub fn visual_projection<'t, T: Real>(
        &self,
        tape: &'t Tape<T>,
        store: &ParameterStore<T>,
        x: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        self.proj.forward(tape, store, x)
    }
}
