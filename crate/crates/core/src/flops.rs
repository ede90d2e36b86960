//! Analytic multiply-accumulate counts per module, checked against the
//! counter kept by the tape.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autograd::Tape;
use crate::classifier::DecoupledMasks;
use crate::error::Result;
use crate::model::Model;
use crate::params::ParameterStore;
use crate::tensor::Tensor;

/// `rows × fan_in → fan_out` affine map.
pub fn linear_macs(rows: usize, fan_in: usize, fan_out: usize) -> u64 {
    (rows * fan_in * fan_out) as u64
}

/// Pre-norm self-attention block over `n` tokens of width `d`.
pub fn block_macs(n: usize, d: usize, hidden: usize) -> u64 {
    4 * linear_macs(n, d, d) + 2 * (n * n * d) as u64 + 2 * linear_macs(n, d, hidden)
}

/// One masked cross-attention layer: `n` proposals over `keys` tokens.
pub fn masked_attention_layer_macs(n: usize, keys: usize, d: usize, hidden: usize) -> u64 {
    let scores = (n * keys * d) as u64;
    let values = (n * keys * d) as u64;
    let projections = 2 * linear_macs(n, d, d) + 2 * linear_macs(keys, d, d);
    let mlp = 2 * linear_macs(n, d, hidden);
    scores + values + projections + mlp
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MaskedAttentionCost {
    pub queries: usize,
    pub low_res_tokens: usize,
    pub high_res_tokens: usize,
    pub layers: usize,
    pub per_layer: u64,
    pub closed_form: u64,
    /// Counted by the tape over a forward pass of random inputs.
    pub measured: u64,
    /// `5·L² + 20·N·L` with `L` low-resolution tokens and `N` queries.
    pub reference_complexity: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FlopsReport {
    pub input_hw: (usize, usize),
    pub p: f64,
    pub classes: usize,
    pub modules: BTreeMap<String, u64>,
    pub total: u64,
    pub masked_attention: MaskedAttentionCost,
}

/// Analytic per-module counts for one image of `input_hw` and `classes`
/// vocabulary entries.
pub fn analytic(
    model: &Model,
    input_hw: (usize, usize),
    classes: usize,
) -> Result<BTreeMap<String, u64>> {
    let cfg = &model.cfg;
    let (bb, ad, dc) = (&cfg.backbone, &cfg.adapter, &cfg.decoder);
    let layout = model.layout(input_hw)?;
    let g = bb.native_grid();
    let lg = g * g;
    let (slices, per_slice) = if cfg.p == 0.0 {
        (1, lg)
    } else {
        (layout.num_slices(), layout.tokens_per_slice())
    };
    let (d, a, n) = (bb.dim, ad.dim, ad.queries);
    let hb = d * bb.mlp_ratio;
    let (gh, gw) = layout.grid_hw();
    let cells = gh * gw;

    let view = |t: usize| {
        linear_macs(t, 3 * bb.patch * bb.patch, d) + bb.depth as u64 * block_macs(t + 1, d, hb)
    };
    let mut backbone = view(lg);
    if cfg.p != 0.0 {
        backbone += slices as u64 * view(per_slice);
    }

    let tap = linear_macs(slices * per_slice + lg, d, a);
    let mrf = 2 * (cells * a * 9) as u64 + linear_macs(cells, a, a) + linear_macs(cells, a, 1);
    let fusions = if ad.fusion_enabled {
        ad.fusion_layers.len() as u64
    } else {
        0
    };
    let adapter = tap * (1 + fusions)
        + fusions * mrf
        + ad.blocks as u64 * block_macs(n + cells, a, a * ad.mlp_ratio)
        + 2 * linear_macs(n, a, a);

    let p = dc.pyramid_width;
    let fused_cells = if ad.fusion_at_high_res { cells } else { lg };
    let (mut ch, mut cw) = (gh, gw);
    let mut decoder = 0;
    for i in 0..dc.ladder_steps {
        let cin = if i == 0 { a } else { p } + p;
        decoder += linear_macs(fused_cells, a, p) + (ch * cw * cin * p * 4) as u64;
        ch *= 2;
        cw *= 2;
    }
    let pixels = ch * cw;
    decoder += linear_macs(pixels, p, dc.d_pix) + linear_macs(pixels, dc.d_pix, a);
    decoder += linear_macs(n, a, pixels);

    let e = bb.embed_dim;
    let c = &model.classifier;
    let mut classifier = 2 * linear_macs(cells, a, a) + 2 * linear_macs(lg, a, a);
    classifier += linear_macs(n, a, lg + cells);
    classifier += c.layers.len() as u64 * masked_attention_layer_macs(n, lg + cells, d, hb);
    if cfg.classifier.condition_text && classes > 0 {
        classifier += 2 * linear_macs(classes, e, e)
            + 2 * linear_macs(lg, a, e)
            + 2 * (classes * lg * e) as u64;
    }
    classifier += linear_macs(n, d, e) + linear_macs(n, e, classes + 1);

    Ok(BTreeMap::from([
        ("backbone".to_string(), backbone),
        ("adapter".to_string(), adapter),
        ("mask_decoder".to_string(), decoder),
        ("mask_classifier".to_string(), classifier),
    ]))
}

/// Runs the masked cross-attention once on random inputs and compares the
/// tape's count with the closed form.
pub fn masked_attention_cost(
    model: &Model,
    store: &ParameterStore<f32>,
    input_hw: (usize, usize),
) -> Result<MaskedAttentionCost> {
    let cfg = &model.cfg;
    let bb = &cfg.backbone;
    let g = bb.native_grid();
    let lg = g * g;
    let cells = model.layout(input_hw)?.grid_cells();
    let (n, d, heads) = (cfg.adapter.queries, bb.dim, bb.heads);
    let layers = model.classifier.layers.len();
    let per_layer = masked_attention_layer_macs(n, lg + cells, d, d * bb.mlp_ratio);

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let tape = Tape::new();
    let mut rand = |shape: &[usize]| tape.constant(Tensor::<f32>::randn(shape, 1.0, &mut rng));
    let x = rand(&[n, d]);
    let lr = rand(&[lg, d]);
    let hr = rand(&[cells, d]);
    let masks = DecoupledMasks {
        global: rand(&[heads, n, lg]),
        local: rand(&[heads, n, cells]),
    };
    let before = tape.macs();
    model.classifier.multigrained_masked_attention(
        &tape,
        store,
        &model.backbone,
        x,
        lr,
        hr,
        &masks,
    )?;
    Ok(MaskedAttentionCost {
        queries: n,
        low_res_tokens: lg,
        high_res_tokens: cells,
        layers,
        per_layer,
        closed_form: per_layer * layers as u64,
        measured: tape.macs() - before,
        reference_complexity: (5 * lg * lg + 20 * n * lg) as u64,
    })
}

pub fn report(
    model: &Model,
    store: &ParameterStore<f32>,
    input_hw: (usize, usize),
    classes: usize,
) -> Result<FlopsReport> {
    let modules = analytic(model, input_hw, classes)?;
    Ok(FlopsReport {
        input_hw,
        p: model.cfg.p,
        classes,
        total: modules.values().sum(),
        modules,
        masked_attention: masked_attention_cost(model, store, input_hw)?,
    })
}
