#![allow(dead_code)]

use ovseg_core::config::RunConfig;
use ovseg_core::flops::{analytic, masked_attention_cost, report};
use ovseg_core::gradcheck::tiny_config;
use ovseg_core::{InputImage, Model, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn measured(cfg: RunConfig, classes: usize) -> (Model, u64, u64) {
    let model = Model::new(cfg).unwrap();
    let store = model.init_store::<f32>().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (h, w) = model.cfg.image_hw;
    let img = InputImage::new(Tensor::rand_uniform(&[3, h, w], 0.0, 1.0, &mut rng)).unwrap();
    let feats = model.encode(&store, &img).unwrap();
    let e = model.cfg.backbone.embed_dim;
    let text = Tensor::<f32>::randn(&[classes, e], 1.0, &mut rng);
    let tape = Tape::new();
    model.forward(&tape, &store, &feats, &text).unwrap();
    (model, feats.backbone_macs, tape.macs())
}

pub fn check(cfg: RunConfig, classes: usize) {
    let hw = cfg.image_hw;
    let (model, backbone, heads) = measured(cfg, classes);
    let a = analytic(&model, hw, classes).unwrap();
    assert_eq!(a["backbone"], backbone, "backbone");
    let rest = a["adapter"] + a["mask_decoder"] + a["mask_classifier"];
    assert_eq!(rest, heads, "adapter + decoder + classifier {a:?}");
}

pub fn tiny_counts_match_tape() {
    check(tiny_config(), 3);
}

pub fn tiny_single_resolution_counts_match_tape() {
    check(
        RunConfig {
            p: 0.0,
            ..tiny_config()
        },
        3,
    );
}

pub fn tiny_high_res_fusion_counts_match_tape() {
    let mut cfg = tiny_config();
    cfg.adapter.fusion_at_high_res = true;
    check(cfg, 2);
}

pub fn tiny_without_fusion_counts_match_tape() {
    let mut cfg = tiny_config();
    cfg.adapter.fusion_enabled = false;
    check(cfg, 4);
}

pub fn toy_counts_match_tape() {
    check(RunConfig::toy(), 4);
}

pub fn masked_attention_closed_form_matches_tape() {
    for cfg in [tiny_config(), RunConfig::toy()] {
        let model = Model::new(cfg).unwrap();
        let store = model.init_store::<f32>().unwrap();
        let c = masked_attention_cost(&model, &store, model.cfg.image_hw).unwrap();
        assert_eq!(c.closed_form, c.measured);
        assert_eq!(c.closed_form, c.per_layer * c.layers as u64);
        assert!(c.layers > 0);
    }
}

pub fn single_resolution_is_cheaper() {
    let multi = Model::new(tiny_config()).unwrap();
    let single = Model::new(RunConfig {
        p: 0.0,
        ..tiny_config()
    })
    .unwrap();
    let store = multi.init_store::<f32>().unwrap();
    let hw = multi.cfg.image_hw;
    let m = report(&multi, &store, hw, 3).unwrap();
    let s = report(&single, &store, hw, 3).unwrap();
    assert!(s.total < m.total);
    assert_eq!(m.total, m.modules.values().sum::<u64>());
}
