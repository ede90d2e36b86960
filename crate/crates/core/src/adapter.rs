//! Trainable adapter: learnable queries and slice tokens through ViT
//! blocks, with multi-resolution fusion features injected into the visual
//! token stream.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::backbone::{BackboneConfig, MultiResFeatures, STEM};
use crate::error::{Error, Result};
use crate::geometry::{grid_to_stream, restore_grid_var, SliceLayout};
use crate::nn::{register, Block, Init, LayerNorm, Linear, Mlp};
use crate::params::ParameterStore;
use crate::tensor::{Real, Tensor};

pub const PREFIX: &str = "adapter";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterConfig {
    pub blocks: usize,
    pub heads: usize,
    pub dim: usize,
    pub queries: usize,
    pub mlp_ratio: usize,
    /// Backbone layers feeding fusion, in tap order.
    pub fusion_layers: Vec<usize>,
    pub fusion_enabled: bool,
    pub fusion_at_high_res: bool,
    pub init_std: f64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig {
            blocks: 6,
            heads: 12,
            dim: 768,
            queries: 100,
            mlp_ratio: 4,
            fusion_layers: vec![0, 3, 6, 9, 12],
            fusion_enabled: true,
            fusion_at_high_res: false,
            init_std: 0.02,
        }
    }
}

impl AdapterConfig {
    pub fn validate(&self, backbone: &BackboneConfig) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.blocks == 0 || self.dim == 0 || self.queries == 0 || self.mlp_ratio == 0 {
            return bad("adapter sizes must be positive".into());
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return bad(format!(
                "adapter dim {} not divisible by {} heads",
                self.dim, self.heads
            ));
        }
        if self.fusion_layers.is_empty() {
            return bad("at least one fusion layer is required".into());
        }
        if let Some(l) = self
            .fusion_layers
            .iter()
            .find(|l| !backbone.tap_layers.contains(l))
        {
            return bad(format!("fusion layer {l} is not a backbone tap layer"));
        }
        if self.fusion_layers.windows(2).any(|w| w[0] >= w[1]) {
            return bad("fusion layers must be strictly increasing".into());
        }
        fusion_schedule(self.fusion_layers.len(), self.blocks).map(|_| ())
    }
}

/// Block index (0-based) at whose input each fusion feature is injected:
/// feature `j` of `t` goes to block `⌊j·blocks/t⌋`.
pub fn fusion_schedule(taps: usize, blocks: usize) -> Result<Vec<usize>> {
    if taps > blocks {
        return Err(Error::Config(format!(
            "{taps} fusion layers but only {blocks} adapter blocks to receive them"
        )));
    }
    Ok((0..taps).map(|j| j * blocks / taps).collect())
}

/// Fusion module for one tap layer.
#[derive(Clone, Debug)]
pub struct Mrf {
    pub prefix: String,
    pub dim: usize,
}

/// Output of one fusion module.
pub struct Fused<'t, T: Real> {
    /// `[dim, h, w]` fused feature.
    pub f: Var<'t, T>,
    /// `[1, h, w]` scale-attention weights in `[0, 1]`.
    pub a: Var<'t, T>,
}

impl Mrf {
    pub fn new(layer: usize, dim: usize) -> Self {
        Mrf {
            prefix: format!("{PREFIX}.mrf.{layer}"),
            dim,
        }
    }

    pub fn name(&self, field: &str) -> String {
        format!("{}.{field}", self.prefix)
    }

    pub fn register<T: Real, R: Rng + ?Sized>(
        &self,
        store: &mut ParameterStore<T>,
        rng: &mut R,
    ) -> Result<()> {
        let d = self.dim;
        register(
            store,
            &self.name("dconv.dw"),
            &[d, 3, 3],
            Init::Normal(1.0 / 3.0),
            false,
            rng,
        )?;
        register(
            store,
            &self.name("dconv.pw"),
            &[d, d],
            Init::FanIn,
            false,
            rng,
        )?;
        register(
            store,
            &self.name("dconv.b"),
            &[d, 1, 1],
            Init::Zeros,
            false,
            rng,
        )?;
        register(
            store,
            &self.name("fa.dw"),
            &[d, 3, 3],
            Init::Normal(1.0 / 3.0),
            false,
            rng,
        )?;
        register(store, &self.name("fa.pw"), &[1, d], Init::FanIn, false, rng)?;
        register(
            store,
            &self.name("fa.b"),
            &[1, 1, 1],
            Init::Zeros,
            false,
            rng,
        )
    }

    fn sep_conv<'t, T: Real>(
        &self,
        tape: &'t Tape<T>,
        store: &ParameterStore<T>,
        x: Var<'t, T>,
        part: &str,
    ) -> Result<Var<'t, T>> {
        let dw = tape.param(store, &self.name(&format!("{part}.dw")))?;
        let pw = tape.param(store, &self.name(&format!("{part}.pw")))?;
        let b = tape.param(store, &self.name(&format!("{part}.b")))?;
        x.depthwise_conv2d(dw, 1, 1)?.pointwise_conv2d(pw)?.add(b)
    }

    /// Blends restored high-resolution slice features `[gh, gw, dim]` with
    /// the global feature `[lh, lw, dim]` through sigmoid scale attention.
    pub fn fuse<'t, T: Real>(
        &self,
        tape: &'t Tape<T>,
        store: &ParameterStore<T>,
        h: Var<'t, T>,
        hbar: Var<'t, T>,
        at_high_res: bool,
    ) -> Result<Fused<'t, T>> {
        let (hs, gs) = (h.shape(), hbar.shape());
        if hs.len() != 3 || gs.len() != 3 || hs[2] != self.dim || gs[2] != self.dim {
            return Err(Error::shapes("mrf_fuse", &hs, &gs));
        }
        if gs[0] > hs[0] || gs[1] > hs[1] {
            return Err(Error::dim(
                "mrf_fuse",
                format!("global grid {gs:?} larger than slice grid {hs:?}"),
            ));
        }
        let h = h.hwc_to_chw()?;
        let hbar = hbar.hwc_to_chw()?;
        let hi = self.sep_conv(tape, store, h, "dconv")?;
        let logits = self.sep_conv(tape, store, h, "fa")?;
        if at_high_res {
            let a = logits.sigmoid();
            let up = hbar.resize_bilinear(hs[0], hs[1])?;
            let f = a.mul(hi)?.add(a.rsub_scalar(1.0).mul(up)?)?;
            return Ok(Fused { f, a });
        }
        let a = logits.adaptive_avg_pool2d(gs[0], gs[1])?.sigmoid();
        let pooled = hi.adaptive_avg_pool2d(gs[0], gs[1])?;
        let f = a.mul(pooled)?.add(a.rsub_scalar(1.0).mul(hbar)?)?;
        Ok(Fused { f, a })
    }
}

#[derive(Clone, Debug)]
pub struct Adapter {
    pub cfg: AdapterConfig,
    pub backbone_dim: usize,
    pub grid_hw: (usize, usize),
    pub entry: Linear,
    pub blocks: Vec<Block>,
    pub ln_out: LayerNorm,
    pub mlp_q: Mlp,
    pub mrfs: Vec<Mrf>,
}

pub struct AdapterOutput<'t, T: Real> {
    /// `[N, dim]` projected query features.
    pub q_f: Var<'t, T>,
    /// Fusion features in tap order.
    pub fused: Vec<Var<'t, T>>,
    pub scale_maps: Vec<Var<'t, T>>,
    /// `[gh, gw, dim]` final visual grid.
    pub h: Var<'t, T>,
}

impl Adapter {
    pub fn new(
        cfg: AdapterConfig,
        backbone: &BackboneConfig,
        grid_hw: (usize, usize),
    ) -> Result<Self> {
        cfg.validate(backbone)?;
        let d = cfg.dim;
        let blocks = (0..cfg.blocks)
            .map(|b| {
                Block::new(
                    &format!("{PREFIX}.blocks.{b}"),
                    d,
                    cfg.heads,
                    d * cfg.mlp_ratio,
                )
            })
            .collect::<Result<_>>()?;
        Ok(Adapter {
            backbone_dim: backbone.dim,
            grid_hw,
            entry: Linear::new(format!("{PREFIX}.entry"), backbone.dim, d, true),
            blocks,
            ln_out: LayerNorm::new(format!("{PREFIX}.ln_out"), d),
            mlp_q: Mlp::new(&format!("{PREFIX}.mlp_q"), d, d, d),
            mrfs: cfg.fusion_layers.iter().map(|&l| Mrf::new(l, d)).collect(),
            cfg,
        })
    }

    pub fn queries_name() -> String {
        format!("{PREFIX}.queries")
    }

    pub fn pos_name() -> String {
        format!("{PREFIX}.pos")
    }

    pub fn register<T: Real, R: Rng + ?Sized>(
        &self,
        store: &mut ParameterStore<T>,
        rng: &mut R,
    ) -> Result<()> {
        let d = self.cfg.dim;
        let init = Init::Normal(self.cfg.init_std);
        let entry_init = if self.backbone_dim == d {
            Init::Identity
        } else {
            Init::FanIn
        };
        self.entry.register(store, entry_init, false, rng)?;
        register(
            store,
            &Self::queries_name(),
            &[self.cfg.queries, d],
            Init::Normal(1.0),
            false,
            rng,
        )?;
        let cells = self.grid_hw.0 * self.grid_hw.1;
        register(store, &Self::pos_name(), &[cells, d], init, false, rng)?;
        for b in &self.blocks {
            b.register(store, init, false, rng)?;
        }
        self.ln_out.register(store, false, rng)?;
        self.mlp_q.register(store, Init::FanIn, false, rng)?;
        for m in &self.mrfs {
            m.register(store, rng)?;
        }
        Ok(())
    }

    /// Positional grid `[gh, gw, dim]`, bilinearly resampled when the
    /// token grid differs from the one the table was built for.
    pub fn positional<'t, T: Real>(
        &self,
        tape: &'t Tape<T>,
        store: &ParameterStore<T>,
        grid_hw: (usize, usize),
    ) -> Result<Var<'t, T>> {
        let (h, w) = self.grid_hw;
        let pos = tape
            .param(store, &Self::pos_name())?
            .reshape(&[h, w, self.cfg.dim])?;
        if grid_hw == self.grid_hw {
            return Ok(pos);
        }
        pos.hwc_to_chw()?
            .resize_bilinear(grid_hw.0, grid_hw.1)?
            .chw_to_hwc()
    }

    /// Entry projection of stacked slice tokens and of the global tokens at
    /// one tap, as a `[S·L, dim]` stream and a `[lh, lw, dim]` grid.
    fn project_tap<'t, T: Real>(
        &self,
        tape: &'t Tape<T>,
        store: &ParameterStore<T>,
        feats: &MultiResFeatures<T>,
        layer: usize,
    ) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let tap = feats.tap(layer)?;
        let refs: Vec<&Tensor<T>> = tap.slices.iter().collect();
        let stacked = tape.constant(Tensor::concat(&refs, 0)?);
        let slices = self.entry.forward(tape, store, stacked)?;
        let (lh, lw) = feats.global_grid;
        let global = self
            .entry
            .forward(tape, store, tape.constant(tap.global.clone()))?;
        Ok((slices, global.reshape(&[lh, lw, self.cfg.dim])?))
    }

    /// Fusion feature for one tap layer (by position in `fusion_layers`).
    pub fn mrf_fuse<'t, T: Real>(
        &self,
        tape: &'t Tape<T>,
        store: &ParameterStore<T>,
        feats: &MultiResFeatures<T>,
        index: usize,
    ) -> Result<Fused<'t, T>> {
        let (slices, global) =
            self.project_tap(tape, store, feats, self.cfg.fusion_layers[index])?;
        let h = restore_grid_var(slices, &feats.layout)?;
        self.mrfs[index].fuse(tape, store, h, global, self.cfg.fusion_at_high_res)
    }

    /// Query projection: Linear → GELU → Linear.
    pub fn project_queries<'t, T: Real>(
        &self,
        tape: &'t Tape<T>,
        store: &ParameterStore<T>,
        q: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        self.mlp_q.forward(tape, store, q)
    }

    /// Adds a fusion feature to the visual part of the token stream.
    fn inject<'t, T: Real>(
        &self,
        tape: &'t Tape<T>,
        stream: Var<'t, T>,
        f: Var<'t, T>,
        layout: &SliceLayout,
    ) -> Result<Var<'t, T>> {
        let (gh, gw) = layout.grid_hw();
        let s = f.shape();
        let grid = if (s[1], s[2]) == (gh, gw) {
            f
        } else {
            f.resize_bilinear(gh, gw)?
        };
        let visual = grid_to_stream(grid.chw_to_hwc()?, layout)?;
        let pad = tape.constant(Tensor::zeros(&[self.cfg.queries, self.cfg.dim]));
        stream.add(tape.concat(&[pad, visual], 0)?)
    }

    pub fn forward<'t, T: Real>(
        &self,
        tape: &'t Tape<T>,
        store: &ParameterStore<T>,
        feats: &MultiResFeatures<T>,
    ) -> Result<AdapterOutput<'t, T>> {
        let layout = &feats.layout;
        let (n, d) = (self.cfg.queries, self.cfg.dim);
        let (visual, _) = self.project_tap(tape, store, feats, STEM)?;
        let pos = grid_to_stream(self.positional(tape, store, layout.grid_hw())?, layout)?;
        let q = tape.param(store, &Self::queries_name())?;
        let mut stream = tape.concat(&[q, visual.add(pos)?], 0)?;

        let mut fused = Vec::with_capacity(self.mrfs.len());
        let mut scale_maps = Vec::new();
        for j in 0..self.mrfs.len() {
            if self.cfg.fusion_enabled {
                let out = self.mrf_fuse(tape, store, feats, j)?;
                fused.push(out.f);
                scale_maps.push(out.a);
            } else {
                let (lh, lw) = if self.cfg.fusion_at_high_res {
                    layout.grid_hw()
                } else {
                    feats.global_grid
                };
                fused.push(tape.constant(Tensor::zeros(&[d, lh, lw])));
            }
        }
        let schedule = fusion_schedule(self.mrfs.len(), self.blocks.len())?;
        for (b, block) in self.blocks.iter().enumerate() {
            if self.cfg.fusion_enabled {
                for (j, _) in schedule.iter().enumerate().filter(|(_, &s)| s == b) {
                    stream = self.inject(tape, stream, fused[j], layout)?;
                }
            }
            stream = block.forward(tape, store, stream)?;
        }
        let stream = self.ln_out.forward(tape, store, stream)?;
        let total = stream.shape()[0];
        let h = restore_grid_var(stream.narrow(0, n, total - n)?, layout)?;
        let q_f = self.project_queries(tape, store, stream.narrow(0, 0, n)?)?;
        Ok(AdapterOutput {
            q_f,
            fused,
            scale_maps,
            h,
        })
    }
}
