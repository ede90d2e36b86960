#![allow(dead_code)]

use ovseg_core::adapter::Mrf;
use ovseg_core::backbone::{Backbone, BackboneConfig};
use ovseg_core::classifier::{
    compose_panoptic, compose_semantic, ClassifierConfig, DecoupledMasks, MaskClassifier,
    IGNORE_LABEL,
};
use ovseg_core::decoder::DecoderConfig;
use ovseg_core::gradcheck::tiny_model;
use ovseg_core::tensor::kernels::MASK_SENTINEL;
use ovseg_core::{ParameterStore, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const TOL: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, r)
}

/// Copy of `store` with every value redrawn from `N(0, std²)`.
pub fn randomized(
    store: &ParameterStore<f64>,
    std: f64,
    r: &mut ChaCha8Rng,
) -> ParameterStore<f64> {
    let mut out = ParameterStore::new();
    for (n, t) in store.iter() {
        out.insert(n, Tensor::randn(t.shape(), std, r), store.is_frozen(n))
            .unwrap();
    }
    out
}

pub fn p<'a>(store: &'a ParameterStore<f64>, name: &str) -> &'a [f64] {
    store.get(name).unwrap_or_else(|| panic!("{name}")).data()
}

pub fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

// Reference helpers over row-major matrices.

pub fn linear(
    x: &[f64],
    rows: usize,
    w: &[f64],
    b: Option<&[f64]>,
    fin: usize,
    fout: usize,
) -> Vec<f64> {
    let mut y = vec![0.0; rows * fout];
    for r in 0..rows {
        for o in 0..fout {
            let mut acc = b.map_or(0.0, |b| b[o]);
            for i in 0..fin {
                acc += x[r * fin + i] * w[i * fout + o];
            }
            y[r * fout + o] = acc;
        }
    }
    y
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn mlp(
    store: &ParameterStore<f64>,
    name: &str,
    x: &[f64],
    rows: usize,
    dims: [usize; 3],
) -> Vec<f64> {
    let h = linear(
        x,
        rows,
        p(store, &format!("{name}.fc1.w")),
        Some(p(store, &format!("{name}.fc1.b"))),
        dims[0],
        dims[1],
    );
    let h: Vec<f64> = h.into_iter().map(gelu).collect();
    linear(
        &h,
        rows,
        p(store, &format!("{name}.fc2.w")),
        Some(p(store, &format!("{name}.fc2.b"))),
        dims[1],
        dims[2],
    )
}

pub fn layer_norm(x: &[f64], d: usize, g: &[f64], b: &[f64]) -> Vec<f64> {
    x.chunks(d)
        .flat_map(|row| {
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + 1e-5).sqrt();
            row.iter()
                .enumerate()
                .map(move |(i, v)| (v - mu) * inv * g[i] + b[i])
                .collect::<Vec<_>>()
        })
        .collect()
}

/// `[C, H, W]` depthwise 3×3 convolution with zero padding 1.
pub fn depthwise3(x: &[f64], c: usize, h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; c * h * w];
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                let mut acc = 0.0;
                for ky in 0..3 {
                    for kx in 0..3 {
                        let (yy, xx) = (i as i64 + ky as i64 - 1, j as i64 + kx as i64 - 1);
                        if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                            acc += x[(ch * h + yy as usize) * w + xx as usize]
                                * k[ch * 9 + ky * 3 + kx];
                        }
                    }
                }
                y[(ch * h + i) * w + j] = acc;
            }
        }
    }
    y
}

/// `[C, H, W]` → `[C', H, W]` with kernel `[C', C]` and bias `[C']`.
pub fn pointwise(x: &[f64], c: usize, hw: usize, k: &[f64], b: &[f64], cout: usize) -> Vec<f64> {
    let mut y = vec![0.0; cout * hw];
    for o in 0..cout {
        for px in 0..hw {
            y[o * hw + px] = b[o] + (0..c).map(|i| k[o * c + i] * x[i * hw + px]).sum::<f64>();
        }
    }
    y
}

/// Non-overlapping `r×r` average pooling of `[C, H, W]`.
pub fn avg_pool(x: &[f64], c: usize, h: usize, w: usize, r: usize) -> Vec<f64> {
    let (oh, ow) = (h / r, w / r);
    let mut y = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                let mut s = 0.0;
                for a in 0..r {
                    for b in 0..r {
                        s += x[(ch * h + i * r + a) * w + j * r + b];
                    }
                }
                y[(ch * oh + i) * ow + j] = s / (r * r) as f64;
            }
        }
    }
    y
}

pub fn hwc_to_chw(x: &[f64], h: usize, w: usize, c: usize) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    for i in 0..h * w {
        for ch in 0..c {
            y[ch * h * w + i] = x[i * c + ch];
        }
    }
    y
}

pub struct MrfSetup {
    store: ParameterStore<f64>,
    h: Tensor<f64>,
    hbar: Tensor<f64>,
}

pub const MRF_DIM: usize = 3;

pub fn mrf_setup(seed: u64) -> MrfSetup {
    let mut r = rng(seed);
    let mut store = ParameterStore::new();
    Mrf::new(0, MRF_DIM).register(&mut store, &mut r).unwrap();
    MrfSetup {
        store: randomized(&store, 0.7, &mut r),
        h: randn(&mut r, &[4, 4, MRF_DIM]),
        hbar: randn(&mut r, &[2, 2, MRF_DIM]),
    }
}

/// The fusion formula evaluated step by step: returns `(F, a)` in CHW.
pub fn mrf_reference(s: &MrfSetup, high_res: bool) -> (Vec<f64>, Vec<f64>) {
    let d = MRF_DIM;
    let name = |f: &str| format!("adapter.mrf.0.{f}");
    let h = hwc_to_chw(s.h.data(), 4, 4, d);
    let hbar = hwc_to_chw(s.hbar.data(), 2, 2, d);
    let dc = depthwise3(&h, d, 4, 4, p(&s.store, &name("dconv.dw")));
    let dc = pointwise(
        &dc,
        d,
        16,
        p(&s.store, &name("dconv.pw")),
        p(&s.store, &name("dconv.b")),
        d,
    );
    let fa = depthwise3(&h, d, 4, 4, p(&s.store, &name("fa.dw")));
    let fa = pointwise(
        &fa,
        d,
        16,
        p(&s.store, &name("fa.pw")),
        p(&s.store, &name("fa.b")),
        1,
    );
    if high_res {
        let a: Vec<f64> = fa.iter().map(|&v| sigmoid(v)).collect();
        // Bilinear 2×2 → 4×4 with half-pixel centres.
        let up = |ch: usize, i: usize, j: usize| {
            let src = |o: usize| ((o as f64 + 0.5) * 0.5 - 0.5).clamp(0.0, 1.0);
            let (sy, sx) = (src(i), src(j));
            let at = |y: usize, x: usize| hbar[(ch * 2 + y) * 2 + x];
            let top = at(0, 0) * (1.0 - sx) + at(0, 1) * sx;
            let bot = at(1, 0) * (1.0 - sx) + at(1, 1) * sx;
            top * (1.0 - sy) + bot * sy
        };
        let mut f = vec![0.0; d * 16];
        for ch in 0..d {
            for i in 0..4 {
                for j in 0..4 {
                    let px = i * 4 + j;
                    f[ch * 16 + px] = a[px] * dc[ch * 16 + px] + (1.0 - a[px]) * up(ch, i, j);
                }
            }
        }
        return (f, a);
    }
    let a: Vec<f64> = avg_pool(&fa, 1, 4, 4, 2)
        .iter()
        .map(|&v| sigmoid(v))
        .collect();
    let pooled = avg_pool(&dc, d, 4, 4, 2);
    let f = (0..d * 4)
        .map(|i| a[i % 4] * pooled[i] + (1.0 - a[i % 4]) * hbar[i])
        .collect();
    (f, a)
}

pub fn run_mrf(s: &MrfSetup, high_res: bool) -> (Vec<f64>, Vec<f64>) {
    let tape = Tape::new();
    let out = Mrf::new(0, MRF_DIM)
        .fuse(
            &tape,
            &s.store,
            tape.constant(s.h.clone()),
            tape.constant(s.hbar.clone()),
            high_res,
        )
        .unwrap();
    (out.f.value().to_f64_vec(), out.a.value().to_f64_vec())
}

pub fn mrf_fusion_matches_reference_formula() {
    for seed in 0..5 {
        let s = mrf_setup(seed);
        for high_res in [false, true] {
            let (f, a) = run_mrf(&s, high_res);
            let (rf, ra) = mrf_reference(&s, high_res);
            assert!(max_diff(&f, &rf) < TOL, "F, high_res {high_res}");
            assert!(max_diff(&a, &ra) < TOL, "a, high_res {high_res}");
            assert!(a.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}

pub fn mrf_zero_attention_logits_blend_halves() {
    let mut s = mrf_setup(9);
    for f in ["fa.dw", "fa.pw", "fa.b"] {
        let name = format!("adapter.mrf.0.{f}");
        let shape = s.store.get(&name).unwrap().shape().to_vec();
        s.store.set(&name, Tensor::zeros(&shape)).unwrap();
    }
    let (f, a) = run_mrf(&s, false);
    assert!(a.iter().all(|&v| v == 0.5));
    let (rf, _) = mrf_reference(&s, false);
    assert!(max_diff(&f, &rf) < TOL);
}

pub fn mrf_saturated_attention_keeps_high_res_branch() {
    let mut s = mrf_setup(10);
    s.store
        .set("adapter.mrf.0.fa.b", Tensor::full(&[1, 1, 1], 1e9))
        .unwrap();
    let (f, a) = run_mrf(&s, false);
    assert!(a.iter().all(|&v| v == 1.0));
    let d = MRF_DIM;
    let h = hwc_to_chw(s.h.data(), 4, 4, d);
    let dc = depthwise3(&h, d, 4, 4, p(&s.store, "adapter.mrf.0.dconv.dw"));
    let dc = pointwise(
        &dc,
        d,
        16,
        p(&s.store, "adapter.mrf.0.dconv.pw"),
        p(&s.store, "adapter.mrf.0.dconv.b"),
        d,
    );
    assert!(max_diff(&f, &avg_pool(&dc, d, 4, 4, 2)) < TOL);
}

pub fn mask_logits_are_query_pixel_inner_products() {
    let mut r = rng(3);
    let (model, store, _) = tiny_model(&mut r).unwrap();
    let tape = Tape::new();
    let h = tape.constant(randn(&mut r, &[4, 4, 8]));
    let fused = tape.constant(randn(&mut r, &[8, 2, 2]));
    let q = randn(&mut r, &[3, 8]);
    let out = model
        .decoder
        .forward(&tape, &store, h, &[fused], tape.constant(q.clone()))
        .unwrap();
    assert_eq!(out.hw, (8, 8));
    let hp = out.h_pix.value();
    let logits = out.logits.value();
    for n in 0..3 {
        for px in 0..64 {
            let want: f64 = (0..8).map(|c| q.at(&[n, c]) * hp.at(&[px, c])).sum();
            assert!((logits.data()[n * 64 + px] - want).abs() < TOL);
        }
    }

    // Linear in the queries: a doubled row doubles, a zero row vanishes.
    let mut q2 = q.clone();
    for c in 0..8 {
        q2.data_mut()[c] *= 2.0;
        q2.data_mut()[8 + c] = 0.0;
    }
    let tape2 = Tape::new();
    let out2 = model
        .decoder
        .forward(
            &tape2,
            &store,
            tape2.constant(h.value().as_ref().clone()),
            &[tape2.constant(fused.value().as_ref().clone())],
            tape2.constant(q2),
        )
        .unwrap();
    let l2 = out2.logits.value();
    for px in 0..64 {
        assert_eq!(l2.data()[px], 2.0 * logits.data()[px]);
        assert_eq!(l2.data()[64 + px], 0.0);
        assert_eq!(l2.data()[128 + px], logits.data()[128 + px]);
    }
}

pub fn mask_resolution_follows_ladder() {
    let cfg = DecoderConfig::default();
    assert_eq!(cfg.mask_hw((40, 40)), (320, 320));
    let toy = DecoderConfig {
        ladder_steps: 2,
        ..cfg
    };
    assert_eq!(toy.mask_hw((16, 16)), (64, 64));
}

pub fn decoupled_masks_match_reference() {
    for seed in 0..3 {
        let mut r = rng(20 + seed);
        let (model, store, _) = tiny_model(&mut r).unwrap();
        let c = &model.classifier;
        let h = randn(&mut r, &[4, 4, 8]);
        let q = randn(&mut r, &[3, 8]);
        let tape = Tape::new();
        let hv = tape.constant(h.clone());
        let hbar = c.pool_global(hv, (2, 2)).unwrap();
        let m = c
            .decode_attention_masks(&tape, &store, hv, hbar, tape.constant(q.clone()))
            .unwrap();

        // Max pooling 2×2 down to the global grid.
        let mut pooled = vec![f64::MIN; 4 * 8];
        for y in 0..4 {
            for x in 0..4 {
                for ch in 0..8 {
                    let cell = (y / 2) * 2 + x / 2;
                    pooled[cell * 8 + ch] = pooled[cell * 8 + ch].max(h.at(&[y, x, ch]));
                }
            }
        }
        assert!(max_diff(&hbar.value().to_f64_vec(), &pooled) < TOL);
        let a_local = mlp(&store, "classifier.mlp_local", h.data(), 16, [8, 8, 8]);
        let a_global = mlp(&store, "classifier.mlp_global", &pooled, 4, [8, 8, 8]);
        let (heads, dh) = (2, 4);
        let per_head = |a: &[f64], rows: usize| {
            let mut out = vec![0.0; heads * 3 * rows];
            for hd in 0..heads {
                for n in 0..3 {
                    for l in 0..rows {
                        out[(hd * 3 + n) * rows + l] = (0..dh)
                            .map(|j| q.at(&[n, hd * dh + j]) * a[l * 8 + hd * dh + j])
                            .sum();
                    }
                }
            }
            out
        };
        assert_eq!(m.global.shape(), vec![2, 3, 4]);
        assert_eq!(m.local.shape(), vec![2, 3, 16]);
        assert!(max_diff(&m.global.value().to_f64_vec(), &per_head(&a_global, 4)) < TOL);
        assert!(max_diff(&m.local.value().to_f64_vec(), &per_head(&a_local, 16)) < TOL);
    }
}

pub fn constant_grid_gives_constant_local_masks() {
    let mut r = rng(5);
    let (model, store, _) = tiny_model(&mut r).unwrap();
    let c = &model.classifier;
    let row = randn(&mut r, &[8]);
    let h = Tensor::from_fn(&[4, 4, 8], |i| row.data()[i % 8]);
    let tape = Tape::new();
    let hv = tape.constant(h);
    let hbar = c.pool_global(hv, (2, 2)).unwrap();
    let m = c
        .decode_attention_masks(
            &tape,
            &store,
            hv,
            hbar,
            tape.constant(randn(&mut r, &[3, 8])),
        )
        .unwrap();
    let local = m.local.value();
    for row in local.data().chunks(16) {
        assert!(row.iter().all(|&v| (v - row[0]).abs() < 1e-12));
    }
}

pub fn zero_mask_mlps_give_zero_masks() {
    let mut r = rng(6);
    let (model, mut store, _) = tiny_model(&mut r).unwrap();
    for name in ["classifier.mlp_local.fc2", "classifier.mlp_global.fc2"] {
        for f in ["w", "b"] {
            let n = format!("{name}.{f}");
            let shape = store.get(&n).unwrap().shape().to_vec();
            store.set(&n, Tensor::zeros(&shape)).unwrap();
        }
    }
    let c = &model.classifier;
    let tape = Tape::new();
    let hv = tape.constant(randn(&mut r, &[4, 4, 8]));
    let hbar = c.pool_global(hv, (2, 2)).unwrap();
    let m = c
        .decode_attention_masks(
            &tape,
            &store,
            hv,
            hbar,
            tape.constant(randn(&mut r, &[3, 8])),
        )
        .unwrap();
    assert!(m.global.value().data().iter().all(|&v| v == 0.0));
    assert!(m.local.value().data().iter().all(|&v| v == 0.0));
}

pub struct AttnSetup {
    backbone: Backbone,
    classifier: MaskClassifier,
    store: ParameterStore<f64>,
    d: usize,
    heads: usize,
}

pub fn attn_setup(heads: usize, n: usize, seed: u64) -> AttnSetup {
    let d = 4;
    let cfg = BackboneConfig {
        patch: 4,
        dim: d,
        heads,
        depth: 3,
        mlp_ratio: 2,
        tap_layers: vec![0, 1, 3],
        cls_tap: 1,
        native_window: 8,
        embed_dim: 4,
        init_std: 0.5,
    };
    let backbone = Backbone::new(cfg).unwrap();
    let classifier = MaskClassifier::new(
        ClassifierConfig {
            attn_head_dim: 2,
            ..Default::default()
        },
        &backbone,
        2 * heads,
        n,
    )
    .unwrap();
    let mut r = rng(seed);
    let mut store = ParameterStore::new();
    backbone.register(&mut store, &mut r).unwrap();
    let store = randomized(&store, 0.6, &mut r);
    AttnSetup {
        backbone,
        classifier,
        store,
        d,
        heads,
    }
}

/// Frozen blocks after the CLS tap, one query row and one key at a time.
pub fn attention_reference(
    s: &AttnSetup,
    x0: &[f64],
    n: usize,
    keys: &[f64],
    nk: usize,
    bias: &[f64],
) -> Vec<f64> {
    let (d, heads) = (s.d, s.heads);
    let dh = d / heads;
    let mut x = x0.to_vec();
    for &layer in &s.classifier.layers {
        let b = |f: &str| p(&s.store, &format!("backbone.blocks.{layer}.{f}"));
        let qn = layer_norm(&x, d, b("ln1.gamma"), b("ln1.beta"));
        let kn = layer_norm(keys, d, b("ln1.gamma"), b("ln1.beta"));
        let q = linear(&qn, n, b("attn.q.w"), Some(b("attn.q.b")), d, d);
        let k = linear(&kn, nk, b("attn.k.w"), Some(b("attn.k.b")), d, d);
        let v = linear(&kn, nk, b("attn.v.w"), Some(b("attn.v.b")), d, d);
        let mut ctx = vec![0.0; n * d];
        for hd in 0..heads {
            for i in 0..n {
                let mut scores = vec![0.0; nk];
                for j in 0..nk {
                    let mut dot = 0.0;
                    for c in 0..dh {
                        dot += q[i * d + hd * dh + c] * k[j * d + hd * dh + c];
                    }
                    scores[j] = dot / (dh as f64).sqrt() + bias[(hd * n + i) * nk + j];
                }
                let mx = scores.iter().cloned().fold(f64::MIN, f64::max);
                let z: f64 = scores.iter().map(|s| (s - mx).exp()).sum();
                for j in 0..nk {
                    let w = (scores[j] - mx).exp() / z;
                    for c in 0..dh {
                        ctx[i * d + hd * dh + c] += w * v[j * d + hd * dh + c];
                    }
                }
            }
        }
        let o = linear(&ctx, n, b("attn.o.w"), Some(b("attn.o.b")), d, d);
        for i in 0..n * d {
            x[i] += o[i];
        }
        let h = layer_norm(&x, d, b("ln2.gamma"), b("ln2.beta"));
        let m = mlp(
            &s.store,
            &format!("backbone.blocks.{layer}.mlp"),
            &h,
            n,
            [d, 2 * d, d],
        );
        for i in 0..n * d {
            x[i] += m[i];
        }
    }
    x
}

pub fn run_multigrained(
    s: &AttnSetup,
    x0: &Tensor<f64>,
    lr: &Tensor<f64>,
    hr: &Tensor<f64>,
    global: &Tensor<f64>,
    local: &Tensor<f64>,
) -> Vec<f64> {
    let tape = Tape::new();
    let c = |t: &Tensor<f64>| tape.constant(t.clone());
    let masks = DecoupledMasks {
        global: c(global),
        local: c(local),
    };
    s.classifier
        .multigrained_masked_attention(&tape, &s.store, &s.backbone, c(x0), c(lr), c(hr), &masks)
        .unwrap()
        .value()
        .to_f64_vec()
}

pub fn concat_bias(global: &Tensor<f64>, local: &Tensor<f64>, heads: usize, n: usize) -> Vec<f64> {
    let (l, lh) = (global.shape()[2], local.shape()[2]);
    let mut out = Vec::new();
    for r in 0..heads * n {
        out.extend_from_slice(&global.data()[r * l..(r + 1) * l]);
        out.extend_from_slice(&local.data()[r * lh..(r + 1) * lh]);
    }
    out
}

pub fn multigrained_attention_matches_triple_loop() {
    let mut seed = 0;
    for heads in 1..=2 {
        for n in 2..=4 {
            for l in 3..=6 {
                seed += 1;
                let s = attn_setup(heads, n, seed);
                let mut r = rng(100 + seed);
                let x0 = randn(&mut r, &[n, s.d]);
                let lr = randn(&mut r, &[l, s.d]);
                let hr = randn(&mut r, &[4 * l, s.d]);
                let g = randn(&mut r, &[heads, n, l]);
                let lo = randn(&mut r, &[heads, n, 4 * l]);
                let got = run_multigrained(&s, &x0, &lr, &hr, &g, &lo);
                let keys: Vec<f64> = lr.data().iter().chain(hr.data()).cloned().collect();
                let bias = concat_bias(&g, &lo, heads, n);
                let want = attention_reference(&s, x0.data(), n, &keys, 5 * l, &bias);
                let err = max_diff(&got, &want);
                assert!(err < TOL, "heads {heads} n {n} l {l}: {err}");
            }
        }
    }
}

pub fn masking_limits_match_reference_runs() {
    let (heads, n, l) = (2, 3, 4);
    let s = attn_setup(heads, n, 77);
    let mut r = rng(78);
    let x0 = randn(&mut r, &[n, s.d]);
    let lr = randn(&mut r, &[l, s.d]);
    let hr = randn(&mut r, &[4 * l, s.d]);
    let g = randn(&mut r, &[heads, n, l]);
    let lo = randn(&mut r, &[heads, n, 4 * l]);
    let off_g = Tensor::full(&[heads, n, l], MASK_SENTINEL);
    let off_l = Tensor::full(&[heads, n, 4 * l], MASK_SENTINEL);
    let zero_g = Tensor::zeros(&[heads, n, l]);
    let zero_l = Tensor::zeros(&[heads, n, 4 * l]);

    // Local only: the same as attending over the high-resolution tokens alone.
    let got = run_multigrained(&s, &x0, &lr, &hr, &off_g, &lo);
    let want = attention_reference(&s, x0.data(), n, hr.data(), 4 * l, lo.data());
    assert!(max_diff(&got, &want) < TOL);

    // Global only.
    let got = run_multigrained(&s, &x0, &lr, &hr, &g, &off_l);
    let want = attention_reference(&s, x0.data(), n, lr.data(), l, g.data());
    assert!(max_diff(&got, &want) < TOL);

    // Zero masks: plain cross-attention over all tokens, no bias.
    let got = run_multigrained(&s, &x0, &lr, &hr, &zero_g, &zero_l);
    let tape = Tape::new();
    let tokens = tape.constant(Tensor::concat(&[&lr, &hr], 0).unwrap());
    let mut x = tape.constant(x0.clone());
    for &layer in &s.classifier.layers {
        let block = s.backbone.frozen_block(layer).unwrap();
        let q = block.ln1.forward(&tape, &s.store, x).unwrap();
        let kv = block.ln1.forward(&tape, &s.store, tokens).unwrap();
        x = x
            .add(block.attn.forward(&tape, &s.store, q, kv, None).unwrap())
            .unwrap();
        x = block.mlp_residual(&tape, &s.store, x).unwrap();
    }
    assert!(max_diff(&got, &x.value().to_f64_vec()) < TOL);
}

pub fn attention_rows_sum_to_one_over_all_keys() {
    let (heads, n, l) = (2, 3, 5);
    let s = attn_setup(heads, n, 5);
    let mut r = rng(6);
    let tape = Tape::new();
    let x = tape.constant(randn(&mut r, &[n, s.d]));
    let kv = tape.constant(randn(&mut r, &[5 * l, s.d]));
    let bias = tape.constant(Tensor::randn(&[heads, n, 5 * l], 3.0, &mut r));
    let block = s.backbone.frozen_block(2).unwrap();
    let out = block
        .attn
        .forward_with_probs(&tape, &s.store, x, kv, Some(bias))
        .unwrap();
    for row in out.probs.value().data().chunks(5 * l) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < TOL);
    }
}

pub fn mismatched_masks_are_rejected() {
    let s = attn_setup(1, 2, 1);
    let tape = Tape::new();
    let z = |shape: &[usize]| tape.constant(Tensor::<f64>::zeros(shape));
    let masks = DecoupledMasks {
        global: z(&[1, 2, 3]),
        local: z(&[1, 2, 11]),
    };
    let err = s
        .classifier
        .multigrained_masked_attention(
            &tape,
            &s.store,
            &s.backbone,
            z(&[2, 4]),
            z(&[3, 4]),
            z(&[12, 4]),
            &masks,
        )
        .unwrap_err();
    assert!(err.to_string().contains("multigrained"), "{err}");
}

pub fn cosine_logits_properties() {
    let mut r = rng(8);
    let (model, store, _) = tiny_model(&mut r).unwrap();
    let c = &model.classifier;
    let text = randn(&mut r, &[3, 6]);
    let x = randn(&mut r, &[3, 8]);
    let logits = |x: &Tensor<f64>, t: &Tensor<f64>| {
        let tape = Tape::new();
        c.class_logits(
            &tape,
            &store,
            &model.backbone,
            tape.constant(x.clone()),
            tape.constant(t.clone()),
        )
        .unwrap()
        .value()
        .as_ref()
        .clone()
    };
    let base = logits(&x, &text);
    assert_eq!(base.shape(), &[3, 4]);
    let scaled = logits(&x.map(|v| 3.0 * v), &text);
    assert!(base.max_abs_diff(&scaled) < 1e-9);

    // A text row equal to a proposal's projected embedding wins its row.
    let tape = Tape::new();
    let e = model
        .backbone
        .visual_projection(&tape, &store, tape.constant(x.clone()))
        .unwrap()
        .value();
    let mut t2 = text.clone();
    t2.data_mut()[6..12].copy_from_slice(&e.data()[..6]);
    let l = logits(&x, &t2);
    let row = &l.data()[..3];
    assert!(row[1] > row[0] && row[1] > row[2]);
    let scale = store.get("classifier.logit_scale").unwrap().data()[0];
    assert!((row[1] - scale).abs() < 1e-9);

    // Orthogonal text and proposal embeddings give zero logits.
    let e0: Vec<f64> = e.data()[..6].to_vec();
    let mut orth = vec![0.0; 6];
    orth[0] = e0[1];
    orth[1] = -e0[0];
    let mut t3 = text.clone();
    t3.data_mut()[..6].copy_from_slice(&orth);
    assert!(logits(&x, &t3).data()[0].abs() < 1e-9);
}

pub fn conditioned_text_starts_as_identity_and_stays_unit_norm() {
    let mut r = rng(9);
    let (model, _, _) = tiny_model(&mut r).unwrap();
    let store = model.init_store::<f64>().unwrap();
    let text = randn(&mut r, &[3, 6]).map(|v| v / 2.0);
    let tape = Tape::new();
    let t = tape.constant(text.clone());
    let out = model
        .classifier
        .condition_text(&tape, &store, t, tape.constant(randn(&mut r, &[4, 8])))
        .unwrap()
        .value();
    let norm = t.l2_normalize(1e-12).unwrap().value();
    assert!(out.max_abs_diff(&norm) < 1e-12);
    for row in out.data().chunks(6) {
        assert!((row.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() < TOL);
    }
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::MIN, f64::max);
    let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
    row.iter().map(|v| (v - m).exp() / z).collect()
}

pub fn semantic_composition_matches_reference() {
    let mut r = rng(12);
    let (n, k, h, w) = (4, 3, 5, 6);
    let logits = randn(&mut r, &[n, k + 1]);
    let masks = Tensor::randn(&[n, h, w], 2.0, &mut r);
    let (out, score) = compose_semantic(&logits, &masks).unwrap();
    let mut want = vec![0.0; k * h * w];
    for q in 0..n {
        let pr = softmax(&logits.data()[q * (k + 1)..(q + 1) * (k + 1)]);
        for c in 0..k {
            for px in 0..h * w {
                want[c * h * w + px] += pr[c] * sigmoid(masks.data()[q * h * w + px]);
            }
        }
    }
    assert!(max_diff(score.data(), &want) < TOL);
    for px in 0..h * w {
        let best = (0..k)
            .max_by(|&a, &b| want[a * h * w + px].total_cmp(&want[b * h * w + px]))
            .unwrap();
        assert_eq!(out.labels[px], best as u32);
    }
}

pub fn saturated_masks_paint_exact_regions() {
    let (h, w) = (4, 8);
    // One query, one class, mask on the left half.
    let logits = Tensor::from_f64(&[1, 2], &[5.0, -5.0]).unwrap();
    let masks = Tensor::from_fn(&[1, h, w], |i| if i % w < w / 2 { 1e9 } else { -1e9 });
    let (out, score) = compose_semantic(&logits, &masks).unwrap();
    assert!(out.labels.iter().all(|&l| l == 0));
    for (i, &s) in score.data().iter().enumerate() {
        assert_eq!(s == 0.0, i % w >= w / 2);
    }

    // Two disjoint saturated masks with one-hot classes.
    let (h, w) = (8, 8);
    let logits = Tensor::from_f64(&[2, 3], &[20.0, -20.0, -20.0, -20.0, 20.0, -20.0]).unwrap();
    let masks = Tensor::from_fn(&[2, h, w], |i| {
        let (q, px) = (i / (h * w), i % (h * w));
        if (px < h * w / 2) == (q == 0) {
            1e9
        } else {
            -1e9
        }
    });
    let (out, _) = compose_semantic(&logits, &masks).unwrap();
    for px in 0..h * w {
        assert_eq!(out.labels[px], if px < h * w / 2 { 0 } else { 1 });
    }
    let pan = compose_panoptic(&logits, &masks).unwrap();
    assert_eq!(pan.segments.len(), 2);
    assert!(pan.segments.iter().all(|s| s.area == 32));
    assert_eq!(pan.labels, out.labels);
}

pub fn panoptic_drops_weak_and_small_queries() {
    let (h, w) = (8, 8);
    // Query 0 is confident but covers 31 pixels; query 1 covers all but is
    // unsure; nothing survives.
    let logits = Tensor::from_f64(&[2, 3], &[20.0, -20.0, -20.0, 0.0, 0.0, 0.0]).unwrap();
    let masks = Tensor::from_fn(&[2, h, w], |i| {
        let (q, px) = (i / (h * w), i % (h * w));
        if q == 1 || px < 31 {
            1e9
        } else {
            -1e9
        }
    });
    let pan = compose_panoptic(&logits, &masks).unwrap();
    assert!(pan.segments.is_empty());
    assert!(pan.labels.iter().all(|&l| l == IGNORE_LABEL));
}
