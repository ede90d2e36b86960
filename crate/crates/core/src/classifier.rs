//! Mask classification: decoupled local/global attention masks, masked
//! cross-attention of CLS-initialised proposal tokens through the frozen
//! blocks after the CLS tap, cosine class logits against text embeddings,
//! and composition of the final maps.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::backbone::{Backbone, MultiResFeatures};
use crate::error::{Error, Result};
use crate::geometry::restore_grid;
use crate::nn::{register, Attention, Init, Mlp};
use crate::params::ParameterStore;
use crate::tensor::kernels::{self, MASK_SENTINEL};
use crate::tensor::{Real, Tensor};

pub const PREFIX: &str = "classifier";
/// Label written for pixels no query claims.
pub const IGNORE_LABEL: u32 = 255;
pub const NORM_EPS: f64 = 1e-12;
pub const PANOPTIC_MIN_SCORE: f64 = 0.5;
pub const PANOPTIC_MIN_AREA: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierConfig {
    pub attn_head_dim: usize,
    /// Masks global-view tokens that only cover padding.
    pub mask_padding: bool,
    pub condition_text: bool,
    pub logit_scale_init: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            attn_head_dim: 64,
            mask_padding: false,
            condition_text: true,
            logit_scale_init: 1.0 / 0.07,
        }
    }
}

#[derive(Clone, Debug)]
pub struct MaskClassifier {
    pub cfg: ClassifierConfig,
    pub heads: usize,
    pub dim: usize,
    pub backbone_dim: usize,
    pub embed_dim: usize,
    pub queries: usize,
    pub layers: Vec<usize>,
    pub mlp_local: Mlp,
    pub mlp_global: Mlp,
    pub text_attn: Attention,
}

pub struct DecoupledMasks<'t, T: Real> {
    /// `[heads, N, L]` bias over the global-view tokens.
    pub global: Var<'t, T>,
    /// `[heads, N, gh·gw]` bias over the restored slice tokens.
    pub local: Var<'t, T>,
}

pub struct ClassifierOutput<'t, T: Real> {
    /// `[N, K + 1]` scaled cosine logits; the last column is no-object.
    pub logits: Var<'t, T>,
    /// `[N, D]` updated proposal tokens.
    pub x_prop: Var<'t, T>,
    pub masks: DecoupledMasks<'t, T>,
}

impl MaskClassifier {
    pub fn new(
        cfg: ClassifierConfig,
        backbone: &Backbone,
        adapter_dim: usize,
        queries: usize,
    ) -> Result<Self> {
        let bb = &backbone.cfg;
        let heads = bb.heads;
        if cfg.attn_head_dim == 0 || heads * cfg.attn_head_dim != adapter_dim {
            return Err(Error::Config(format!(
                "{heads} heads x attn_head_dim {} must equal the adapter dim {adapter_dim}",
                cfg.attn_head_dim
            )));
        }
        if !(cfg.logit_scale_init > 0.0 && cfg.logit_scale_init.is_finite()) {
            return Err(Error::Config("logit_scale_init must be positive".into()));
        }
        let layers: Vec<usize> = (bb.cls_tap + 1..=bb.depth).collect();
        if layers.is_empty() {
            return Err(Error::Config(format!(
                "no backbone blocks after cls_tap {}",
                bb.cls_tap
            )));
        }
        let d_attn = heads * cfg.attn_head_dim;
        Ok(MaskClassifier {
            heads,
            dim: adapter_dim,
            backbone_dim: bb.dim,
            embed_dim: bb.embed_dim,
            queries,
            layers,
            mlp_local: Mlp::new(
                &format!("{PREFIX}.mlp_local"),
                adapter_dim,
                adapter_dim,
                d_attn,
            ),
            mlp_global: Mlp::new(
                &format!("{PREFIX}.mlp_global"),
                adapter_dim,
                adapter_dim,
                d_attn,
            ),
            text_attn: Attention::cross(
                &format!("{PREFIX}.text_attn"),
                bb.embed_dim,
                adapter_dim,
                1,
            )?,
            cfg,
        })
    }

    pub fn prop_pos_name() -> String {
        format!("{PREFIX}.prop_pos")
    }

    pub fn void_name() -> String {
        format!("{PREFIX}.void")
    }

    pub fn logit_scale_name() -> String {
        format!("{PREFIX}.logit_scale")
    }

    pub fn register<T: Real, R: Rng + ?Sized>(
        &self,
        store: &mut ParameterStore<T>,
        rng: &mut R,
    ) -> Result<()> {
        register(
            store,
            &Self::prop_pos_name(),
            &[self.queries, self.backbone_dim],
            Init::Normal(0.02),
            false,
            rng,
        )?;
        register(
            store,
            &Self::void_name(),
            &[1, self.embed_dim],
            Init::Normal(1.0),
            false,
            rng,
        )?;
        register(
            store,
            &Self::logit_scale_name(),
            &[1],
            Init::Const(self.cfg.logit_scale_init),
            false,
            rng,
        )?;
        self.mlp_local.register(store, Init::FanIn, false, rng)?;
        self.mlp_global.register(store, Init::FanIn, false, rng)?;
        if self.cfg.condition_text {
            let a = &self.text_attn;
            a.q.register(store, Init::FanIn, false, rng)?;
            a.k.register(store, Init::FanIn, false, rng)?;
            a.v.register(store, Init::FanIn, false, rng)?;
            a.o.register(store, Init::Zeros, false, rng)?;
        }
        Ok(())
    }

    /// Max-pools the adapter grid `[gh, gw, dim]` down to `low_hw`, returning
    /// `[lh·lw, dim]` tokens.
    pub fn pool_global<'t, T: Real>(
        &self,
        h: Var<'t, T>,
        low_hw: (usize, usize),
    ) -> Result<Var<'t, T>> {
        let s = h.shape();
        let (lh, lw) = low_hw;
        if s.len() != 3
            || lh == 0
            || !s[0].is_multiple_of(lh)
            || !s[1].is_multiple_of(lw)
            || s[0] / lh != s[1] / lw
        {
            return Err(Error::dim(
                "pool_global",
                format!("grid {s:?} does not pool evenly to {lh}x{lw}"),
            ));
        }
        let r = s[0] / lh;
        let pooled = if r == 1 {
            h.hwc_to_chw()?
        } else {
            h.hwc_to_chw()?.max_pool2d(r, r)?
        };
        pooled.chw_to_hwc()?.reshape(&[lh * lw, s[2]])
    }

    /// Per-head inner products of the query features with MLP projections
    /// of the full-resolution grid and of its max-pooled global summary.
    pub fn decode_attention_masks<'t, T: Real>(
        &self,
        tape: &'t Tape<T>,
        store: &ParameterStore<T>,
        h: Var<'t, T>,
        h_bar: Var<'t, T>,
        q_f: Var<'t, T>,
    ) -> Result<DecoupledMasks<'t, T>> {
        let (heads, dh) = (self.heads, self.cfg.attn_head_dim);
        let n = q_f.shape()[0];
        let s = h.shape();
        let cells = s[0] * s[1];
        let a_local = self
            .mlp_local
            .forward(tape, store, h.reshape(&[cells, self.dim])?)?;
        let a_global = self.mlp_global.forward(tape, store, h_bar)?;
        let qh = q_f.reshape(&[n, heads, dh])?.permute(&[1, 0, 2])?;
        let split = |a: Var<'t, T>| -> Result<Var<'t, T>> {
            let rows = a.shape()[0];
            a.reshape(&[rows, heads, dh])?.permute(&[1, 2, 0])
        };
        Ok(DecoupledMasks {
            global: qh.matmul(split(a_global)?)?,
            local: qh.matmul(split(a_local)?)?,
        })
    }

    /// Updates proposal tokens through the frozen blocks after the CLS tap,
    /// attending jointly over global-view and restored slice tokens with the
    /// decoupled masks as additive bias.
    pub fn masked_attention<'t, T: Real>(
        &self,
        tape: &'t Tape<T>,
        store: &ParameterStore<T>,
        backbone: &Backbone,
        x_prop: Var<'t, T>,
        tokens: Var<'t, T>,
        bias: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let mut x = x_prop;
        for &layer in &self.layers {
            let block = backbone.frozen_block(layer)?;
            let q = block.ln1.forward(tape, store, x)?;
            let kv = block.ln1.forward(tape, store, tokens)?;
            x = x.add(block.attn.forward(tape, store, q, kv, Some(bias))?)?;
            x = block.mlp_residual(tape, store, x)?;
        }
        Ok(x)
    }

    /// Masked cross-attention of the proposals over the concatenated
    /// `[tokens_lr; tokens_hr]` key stream with bias `[M_global, M_local]`.
    #[allow(clippy::too_many_arguments)]
    pub fn multigrained_masked_attention<'t, T: Real>(
        &self,
        tape: &'t Tape<T>,
        store: &ParameterStore<T>,
        backbone: &Backbone,
        x_prop: Var<'t, T>,
        tokens_lr: Var<'t, T>,
        tokens_hr: Var<'t, T>,
        masks: &DecoupledMasks<'t, T>,
    ) -> Result<Var<'t, T>> {
        let n = x_prop.shape()[0];
        let (l, lh) = (tokens_lr.shape()[0], tokens_hr.shape()[0]);
        let (gs, ls) = (masks.global.shape(), masks.local.shape());
        if gs != [self.heads, n, l] || ls != [self.heads, n, lh] {
            return Err(Error::dim(
                "multigrained_masked_attention",
                format!(
                    "masks {gs:?} and {ls:?} do not match {n} proposals over {l} + {lh} tokens"
                ),
            ));
        }
        let bias = tape.concat(&[masks.global, masks.local], 2)?;
        let tokens = tape.concat(&[tokens_lr, tokens_hr], 0)?;
        self.masked_attention(tape, store, backbone, x_prop, tokens, bias)
    }

    /// Key/value tokens at the CLS tap, `[L + gh·gw, D]`, and the key-padding
    /// bias for the global-view part when enabled.
    pub fn key_tokens<T: Real>(
        &self,
        backbone: &Backbone,
        feats: &MultiResFeatures<T>,
    ) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
        let tap = feats.tap(backbone.cfg.cls_tap)?;
        let refs: Vec<&Tensor<T>> = tap.slices.iter().collect();
        let hr = restore_grid(&refs, &feats.layout)?;
        let cells = feats.layout.grid_cells();
        let hr = hr.into_reshaped(&[cells, self.backbone_dim])?;
        let tokens = Tensor::concat(&[&tap.global, &hr], 0)?;
        if !self.cfg.mask_padding {
            return Ok((tokens, None));
        }
        let (lh, lw) = feats.global_grid;
        let (ch, cw) = feats.global_content_hw;
        let p = backbone.cfg.patch;
        let n = self.queries;
        let total = lh * lw + cells;
        let pad = Tensor::from_fn(&[self.heads, n, total], |i| {
            let k = i % total;
            let live = k >= lh * lw || ((k / lw) * p < ch && (k % lw) * p < cw);
            if live {
                T::zero()
            } else {
                T::from_f64(MASK_SENTINEL)
            }
        });
        Ok((tokens, Some(pad)))
    }

    /// Image-conditioned text embeddings: one cross-attention layer from
    /// text rows to pooled visual tokens, residual, then re-normalisation.
    pub fn condition_text<'t, T: Real>(
        &self,
        tape: &'t Tape<T>,
        store: &ParameterStore<T>,
        text: Var<'t, T>,
        h_bar: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let upd = self.text_attn.forward(tape, store, text, h_bar, None)?;
        text.add(upd)?.l2_normalize(NORM_EPS)
    }

    /// Scaled cosine similarity of projected proposals against the text rows
    /// and the learned no-object embedding.
    pub fn class_logits<'t, T: Real>(
        &self,
        tape: &'t Tape<T>,
        store: &ParameterStore<T>,
        backbone: &Backbone,
        x_prop: Var<'t, T>,
        text: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        if text.shape()[0] == 0 {
            return Err(Error::Contract("class vocabulary is empty".into()));
        }
        let e = backbone
            .visual_projection(tape, store, x_prop)?
            .l2_normalize(NORM_EPS)?;
        let void = tape.param(store, &Self::void_name())?;
        let t = tape.concat(&[text, void], 0)?.l2_normalize(NORM_EPS)?;
        let scale = tape.param(store, &Self::logit_scale_name())?;
        e.matmul(t.transpose()?)?.mul(scale)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward<'t, T: Real>(
        &self,
        tape: &'t Tape<T>,
        store: &ParameterStore<T>,
        backbone: &Backbone,
        feats: &MultiResFeatures<T>,
        h: Var<'t, T>,
        q_f: Var<'t, T>,
        text: &Tensor<T>,
    ) -> Result<ClassifierOutput<'t, T>> {
        if text.rank() != 2 || text.shape()[1] != self.embed_dim {
            return Err(Error::shapes(
                "class_logits",
                text.shape(),
                &[text.shape().first().copied().unwrap_or(0), self.embed_dim],
            ));
        }
        let h_bar = self.pool_global(h, feats.global_grid)?;
        let masks = self.decode_attention_masks(tape, store, h, h_bar, q_f)?;
        let mut bias = tape.concat(&[masks.global, masks.local], 2)?;
        let (tokens, pad) = self.key_tokens(backbone, feats)?;
        if let Some(pad) = pad {
            bias = bias.add(tape.constant(pad))?;
        }
        let n = self.queries;
        let cls = feats.cls.data().to_vec();
        let dup = Tensor::new(vec![n, self.backbone_dim], cls.repeat(n))?;
        let x0 = tape
            .constant(dup)
            .add(tape.param(store, &Self::prop_pos_name())?)?;
        let x_prop =
            self.masked_attention(tape, store, backbone, x0, tape.constant(tokens), bias)?;
        let mut t = tape.constant(text.clone());
        if self.cfg.condition_text && text.shape()[0] > 0 {
            t = self.condition_text(tape, store, t, h_bar)?;
        }
        let logits = self.class_logits(tape, store, backbone, x_prop, t)?;
        Ok(ClassifierOutput {
            logits,
            x_prop,
            masks,
        })
    }
}

/// One surviving query of panoptic composition.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Segment {
    pub id: u32,
    pub query: usize,
    pub class: u32,
    pub score: f64,
    pub area: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SegmentationOutput {
    pub height: usize,
    pub width: usize,
    /// Per-pixel class index, or [`IGNORE_LABEL`].
    pub labels: Vec<u32>,
    /// Per-pixel segment id (0 = none); panoptic mode only.
    pub segment_ids: Vec<u32>,
    pub segments: Vec<Segment>,
}

fn class_probs(logits: &Tensor<f64>) -> Vec<Vec<f64>> {
    let c = logits.shape()[1];
    let (p, _) = kernels::softmax_rows(logits.data(), c);
    p.chunks(c).map(|r| r[..c - 1].to_vec()).collect()
}

fn check_compose(
    logits: &Tensor<f64>,
    masks: &Tensor<f64>,
) -> Result<(usize, usize, usize, usize)> {
    let (ls, ms) = (logits.shape(), masks.shape());
    if ls.len() != 2 || ms.len() != 3 || ls[0] != ms[0] || ls[1] < 2 {
        return Err(Error::shapes("compose_segmentation", ls, ms));
    }
    let k = ls[1] - 1;
    if k >= IGNORE_LABEL as usize {
        return Err(Error::Contract(format!(
            "{k} classes exceed the label range"
        )));
    }
    Ok((ls[0], k, ms[1], ms[2]))
}

/// Semantic map: class probabilities (no-object column dropped after the
/// softmax) times mask probabilities, summed over queries, argmax per pixel.
/// Returns the label map and the `[K, H, W]` score volume.
pub fn compose_semantic(
    logits: &Tensor<f64>,
    masks: &Tensor<f64>,
) -> Result<(SegmentationOutput, Tensor<f64>)> {
    let (_, k, h, w) = check_compose(logits, masks)?;
    let probs = class_probs(logits);
    let hw = h * w;
    let mut score = vec![0.0; k * hw];
    for (q, pq) in probs.iter().enumerate() {
        let m = &masks.data()[q * hw..(q + 1) * hw];
        for (c, &pc) in pq.iter().enumerate() {
            score[c * hw..(c + 1) * hw]
                .iter_mut()
                .zip(m)
                .for_each(|(s, &v)| *s += pc * kernels::sigmoid(v));
        }
    }
    let labels = (0..hw)
        .map(|px| {
            let mut best = 0;
            for c in 1..k {
                if score[c * hw + px] > score[best * hw + px] {
                    best = c;
                }
            }
            best as u32
        })
        .collect();
    let out = SegmentationOutput {
        height: h,
        width: w,
        labels,
        segment_ids: vec![0; hw],
        segments: vec![],
    };
    Ok((out, Tensor::new(vec![k, h, w], score)?))
}

/// Panoptic map: drops low-confidence or small queries, then gives each
/// pixel to the surviving query with the highest `score·σ(mask)` when its
/// mask probability there is at least one half.
pub fn compose_panoptic(logits: &Tensor<f64>, masks: &Tensor<f64>) -> Result<SegmentationOutput> {
    let (n, _, h, w) = check_compose(logits, masks)?;
    let probs = class_probs(logits);
    let hw = h * w;
    let sig: Vec<f64> = masks.data().iter().map(|&v| kernels::sigmoid(v)).collect();
    let mut kept = Vec::new();
    for (q, pq) in probs.iter().enumerate().take(n) {
        let (class, score) =
            pq.iter()
                .enumerate()
                .fold((0, f64::MIN), |b, (c, &p)| if p > b.1 { (c, p) } else { b });
        let area = sig[q * hw..(q + 1) * hw]
            .iter()
            .filter(|&&s| s >= 0.5)
            .count();
        if score >= PANOPTIC_MIN_SCORE && area >= PANOPTIC_MIN_AREA {
            kept.push((q, class as u32, score));
        }
    }
    let mut labels = vec![IGNORE_LABEL; hw];
    let mut segment_ids = vec![0u32; hw];
    let mut areas = vec![0usize; kept.len()];
    for px in 0..hw {
        let mut best: Option<(usize, f64)> = None;
        for (i, &(q, _, s)) in kept.iter().enumerate() {
            let v = s * sig[q * hw + px];
            if best.is_none_or(|b| v > b.1) {
                best = Some((i, v));
            }
        }
        if let Some((i, _)) = best {
            if sig[kept[i].0 * hw + px] >= 0.5 {
                labels[px] = kept[i].1;
                segment_ids[px] = i as u32 + 1;
                areas[i] += 1;
            }
        }
    }
    let segments = kept
        .iter()
        .zip(&areas)
        .enumerate()
        .filter(|(_, (_, &a))| a > 0)
        .map(|(i, (&(query, class, score), &area))| Segment {
            id: i as u32 + 1,
            query,
            class,
            score,
            area,
        })
        .collect();
    Ok(SegmentationOutput {
        height: h,
        width: w,
        labels,
        segment_ids,
        segments,
    })
}
