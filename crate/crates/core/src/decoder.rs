//! Hierarchical mask decoding: a feature pyramid from the fusion features,
//! a concatenate-and-upsample ladder over the adapter grid, a per-pixel
//! MLP and per-query inner products.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{register, Init, Mlp};
use crate::params::ParameterStore;
use crate::tensor::Real;

pub const PREFIX: &str = "decoder";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    pub pyramid_width: usize,
    /// Hidden width of the per-pixel MLP.
    pub d_pix: usize,
    pub ladder_steps: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            pyramid_width: 256,
            d_pix: 256,
            ladder_steps: 3,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pyramid_width == 0 || self.d_pix == 0 || self.ladder_steps == 0 {
            return Err(Error::Config(
                "decoder widths and ladder_steps must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Mask resolution for a `grid_hw` token grid.
    pub fn mask_hw(&self, grid_hw: (usize, usize)) -> (usize, usize) {
        let f = 1 << self.ladder_steps;
        (grid_hw.0 * f, grid_hw.1 * f)
    }
}

pub struct MaskPrediction<'t, T: Real> {
    /// `[N, Hm, Wm]` mask logits.
    pub logits: Var<'t, T>,
    /// `[Hm·Wm, dim]` pixel features.
    pub h_pix: Var<'t, T>,
    pub hw: (usize, usize),
}

#[derive(Clone, Debug)]
pub struct MaskDecoder {
    pub cfg: DecoderConfig,
    pub dim: usize,
    pub mlp_pix: Mlp,
}

impl MaskDecoder {
    pub fn new(cfg: DecoderConfig, dim: usize) -> Result<Self> {
        cfg.validate()?;
        let mlp_pix = Mlp::new(
            &format!("{PREFIX}.mlp_pix"),
            cfg.pyramid_width,
            cfg.d_pix,
            dim,
        );
        Ok(MaskDecoder { cfg, dim, mlp_pix })
    }

    fn lateral(i: usize, field: &str) -> String {
        format!("{PREFIX}.lateral.{i}.{field}")
    }

    fn up(i: usize, field: &str) -> String {
        format!("{PREFIX}.up.{i}.{field}")
    }

    pub fn register<T: Real, R: Rng + ?Sized>(
        &self,
        store: &mut ParameterStore<T>,
        rng: &mut R,
    ) -> Result<()> {
        let (p, d) = (self.cfg.pyramid_width, self.dim);
        for i in 0..self.cfg.ladder_steps {
            register(
                store,
                &Self::lateral(i, "w"),
                &[p, d],
                Init::FanIn,
                false,
                rng,
            )?;
            register(
                store,
                &Self::lateral(i, "b"),
                &[p, 1, 1],
                Init::Zeros,
                false,
                rng,
            )?;
            let cin = if i == 0 { d } else { p } + p;
            register(
                store,
                &Self::up(i, "w"),
                &[cin, p, 2, 2],
                Init::FanIn,
                false,
                rng,
            )?;
            register(
                store,
                &Self::up(i, "b"),
                &[p, 1, 1],
                Init::Zeros,
                false,
                rng,
            )?;
        }
        self.mlp_pix.register(store, Init::FanIn, false, rng)
    }

    /// Pyramid level `i` of fusion features `[dim, h, w]`: channel
    /// reconciliation then bilinear resize to `target_hw`. Levels past the
    /// last feature reuse it.
    pub fn pyramid_level<'t, T: Real>(
        &self,
        tape: &'t Tape<T>,
        store: &ParameterStore<T>,
        fused: &[Var<'t, T>],
        i: usize,
        target_hw: (usize, usize),
    ) -> Result<Var<'t, T>> {
        let f = *fused
            .get(i.min(fused.len().saturating_sub(1)))
            .ok_or_else(|| Error::Contract("no fusion features".into()))?;
        let s = f.shape();
        if s.len() != 3 || s[0] != self.dim {
            return Err(Error::dim(
                "pyramid",
                format!("fusion feature {s:?}, expected [{}, h, w]", self.dim),
            ));
        }
        let w = tape.param(store, &Self::lateral(i, "w"))?;
        let b = tape.param(store, &Self::lateral(i, "b"))?;
        let x = f.pointwise_conv2d(w)?.add(b)?;
        if (s[1], s[2]) == target_hw {
            Ok(x)
        } else {
            x.resize_bilinear(target_hw.0, target_hw.1)
        }
    }

    /// Decodes `[N, Hm, Wm]` mask logits from the adapter grid `h`
    /// `[gh, gw, dim]`, the fusion features and the query features `[N, dim]`.
    pub fn forward<'t, T: Real>(
        &self,
        tape: &'t Tape<T>,
        store: &ParameterStore<T>,
        h: Var<'t, T>,
        fused: &[Var<'t, T>],
        q_f: Var<'t, T>,
    ) -> Result<MaskPrediction<'t, T>> {
        let hs = h.shape();
        if hs.len() != 3 || hs[2] != self.dim {
            return Err(Error::dim(
                "decode_masks",
                format!("grid {hs:?}, expected [gh, gw, {}]", self.dim),
            ));
        }
        let qs = q_f.shape();
        if qs.len() != 2 || qs[1] != self.dim {
            return Err(Error::shapes(
                "decode_masks",
                &qs,
                &[qs.first().copied().unwrap_or(0), self.dim],
            ));
        }
        let mut x = h.hwc_to_chw()?;
        let (mut ch, mut cw) = (hs[0], hs[1]);
        for i in 0..self.cfg.ladder_steps {
            let level = self.pyramid_level(tape, store, fused, i, (ch, cw))?;
            let k = tape.param(store, &Self::up(i, "w"))?;
            let b = tape.param(store, &Self::up(i, "b"))?;
            x = tape
                .concat(&[x, level], 0)?
                .transposed_conv2d(k, 2)?
                .add(b)?
                .gelu();
            ch *= 2;
            cw *= 2;
        }
        let pixels = x
            .chw_to_hwc()?
            .reshape(&[ch * cw, self.cfg.pyramid_width])?;
        let h_pix = self.mlp_pix.forward(tape, store, pixels)?;
        let logits = decode_logits(q_f, h_pix, (ch, cw))?;
        Ok(MaskPrediction {
            logits,
            h_pix,
            hw: (ch, cw),
        })
    }
}

/// `Q_f · H_pixᵀ` reshaped to `[N, Hm, Wm]`.
pub fn decode_logits<'t, T: Real>(
    q_f: Var<'t, T>,
    h_pix: Var<'t, T>,
    hw: (usize, usize),
) -> Result<Var<'t, T>> {
    let n = q_f.shape()[0];
    q_f.matmul(h_pix.transpose()?)?.reshape(&[n, hw.0, hw.1])
}

/// Elementwise sigmoid of mask logits.
pub fn masks_to_probability<'t, T: Real>(logits: Var<'t, T>) -> Var<'t, T> {
    logits.sigmoid()
}
