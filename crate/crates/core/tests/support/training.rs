#![allow(dead_code)]

use std::collections::BTreeMap;

use ovseg_core::config::RunConfig;
use ovseg_core::gradcheck::tiny_config;
use ovseg_core::train::data::make_toy_dataset;
use ovseg_core::train::hungarian::{assign, total_cost};
use ovseg_core::train::loss::{set_loss, LossWeights, Target};
use ovseg_core::train::optim::{poly_lr, AdamW};
use ovseg_core::train::Trainer;
use ovseg_core::{ParameterStore, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Minimum over all injective maps of `g` rows into `n` columns.
pub fn brute_force(cost: &[f64], g: usize, n: usize) -> f64 {
    fn go(cost: &[f64], g: usize, n: usize, row: usize, used: &mut Vec<bool>) -> f64 {
        if row == g {
            return 0.0;
        }
        let mut best = f64::INFINITY;
        for c in 0..n {
            if !used[c] {
                used[c] = true;
                best = best.min(cost[row * n + c] + go(cost, g, n, row + 1, used));
                used[c] = false;
            }
        }
        best
    }
    go(cost, g, n, 0, &mut vec![false; n])
}

pub fn hungarian_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..200 {
        let n = rng.random_range(1..=6);
        let g = rng.random_range(0..=n);
        let cost: Vec<f64> = (0..g * n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let pairs = assign(&cost, g, n).unwrap();
        assert_eq!(pairs.len(), g);
        let mut rows: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let mut cols: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        rows.dedup();
        cols.sort_unstable();
        cols.dedup();
        assert_eq!((rows.len(), cols.len()), (g, g));
        let got = total_cost(&cost, n, &pairs);
        assert!((got - brute_force(&cost, g, n)).abs() < 1e-9);
    }
}

pub fn hungarian_small_examples() {
    let pairs = assign(&[1.0, 2.0, 2.0, 1.0], 2, 2).unwrap();
    assert_eq!(pairs, vec![(0, 0), (1, 1)]);
    assert_eq!(total_cost(&[1.0, 2.0, 2.0, 1.0], 2, &pairs), 2.0);
    let diag = [0.1, 5.0, 6.0, 4.0, 0.2, 7.0, 5.0, 8.0, 0.3];
    assert_eq!(assign(&diag, 3, 3).unwrap(), vec![(0, 0), (1, 1), (2, 2)]);
    assert!(assign(&[], 0, 4).unwrap().is_empty());
    assert!(assign(&[0.0; 6], 3, 2).is_err());
}

pub fn loss_of(class_logits: Tensor<f64>, mask_logits: Tensor<f64>, target: &Target) -> [f64; 4] {
    let tape = Tape::new();
    let pairs: Vec<(usize, usize)> = (0..target.len()).map(|g| (g, g)).collect();
    let t = set_loss(
        &tape,
        tape.constant(class_logits),
        tape.constant(mask_logits),
        target,
        &pairs,
        &LossWeights::default(),
    )
    .unwrap();
    [t.total, t.cls, t.bce, t.dice].map(|v| v.value().data()[0])
}

pub fn perfect_prediction_has_near_zero_loss() {
    // Three queries, two classes plus no-object, four pixels.
    let target = Target {
        classes: vec![1, 0],
        masks: Tensor::from_f64(&[2, 4], &[1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0]).unwrap(),
    };
    let s = 30.0;
    let class_logits = Tensor::from_f64(&[3, 3], &[-s, s, -s, s, -s, -s, -s, -s, s]).unwrap();
    let mask_logits = Tensor::from_fn(&[3, 4], |i| {
        let t = if i < 8 { target.masks.data()[i] } else { 0.0 };
        if t > 0.5 {
            s
        } else {
            -s
        }
    });
    let [total, cls, bce, dice] = loss_of(class_logits, mask_logits, &target);
    assert!(total < 0.01, "{total}");
    assert!(cls < 1e-9 && bce < 1e-9 && dice < 1e-9);
}

pub fn dice_vanishes_for_exact_probability_masks() {
    // Dice in probability space: with p = t exactly, 1 − (2|t|+1)/(2|t|+1) = 0.
    let target = Target {
        classes: vec![0],
        masks: Tensor::from_f64(&[1, 3], &[1.0, 0.0, 1.0]).unwrap(),
    };
    let huge = 1e3;
    let masks = Tensor::from_f64(&[1, 3], &[huge, -huge, huge]).unwrap();
    let [_, _, _, dice] = loss_of(Tensor::zeros(&[1, 2]), masks, &target);
    assert_eq!(dice, 0.0);
}

pub fn poly_schedule_values() {
    let t = 1000;
    assert_eq!(poly_lr(2e-4, 0, t, 0.9), 2e-4);
    assert_eq!(poly_lr(2e-4, t, t, 0.9), 0.0);
    let half = 2e-4 * 0.5f64.powf(0.9);
    assert!((poly_lr(2e-4, t / 2, t, 0.9) - half).abs() < 1e-18);
    let mut prev = f64::INFINITY;
    for s in 0..=t {
        let lr = poly_lr(2e-4, s, t, 0.9);
        assert!(lr <= prev);
        prev = lr;
    }
}

pub fn adamw_step_descends_on_quadratic() {
    let mut store = ParameterStore::<f64>::new();
    store
        .insert(
            "w",
            Tensor::from_f64(&[3], &[2.0, -1.5, 0.5]).unwrap(),
            false,
        )
        .unwrap();
    let mut opt = AdamW::new(1e-4, None);
    for _ in 0..5 {
        let w = store.get("w").unwrap().clone();
        let before: Vec<f64> = w.data().iter().map(|v| v.abs()).collect();
        // Gradient of w²/2 is w.
        let grads = BTreeMap::from([("w".to_string(), w)]);
        opt.update(&mut store, &grads, 1e-2).unwrap();
        for (b, a) in before.iter().zip(store.get("w").unwrap().data()) {
            assert!(a.abs() < *b);
        }
    }
}

pub fn adamw_rejects_non_finite_gradients() {
    let mut store = ParameterStore::<f64>::new();
    store.insert("w", Tensor::zeros(&[2]), false).unwrap();
    let mut opt = AdamW::new(0.0, None);
    let grads = BTreeMap::from([(
        "w".to_string(),
        Tensor::from_f64(&[2], &[1.0, f64::NAN]).unwrap(),
    )]);
    let err = opt.update(&mut store, &grads, 1e-3).unwrap_err();
    assert!(err.to_string().contains("non-finite"));
}

pub fn tiny_trainer(steps: usize) -> Trainer {
    let mut cfg = tiny_config();
    cfg.train.steps = steps;
    cfg.train.n_images = 2;
    cfg.train.n_classes = 3;
    cfg.train.base_lr = 1e-2;
    Trainer::new(cfg).unwrap()
}

pub fn frozen_parameters_survive_a_hundred_steps() {
    let mut tr = tiny_trainer(100);
    let frozen_before = tr.store.frozen_checksum();
    let trainable_before = tr.store.checksum(|_, frozen| !frozen);
    let report = tr.run(None).unwrap();
    assert_eq!(report.steps_run, 100);
    assert_eq!(tr.store.frozen_checksum(), frozen_before);
    assert_eq!(report.frozen_checksum_after, report.frozen_checksum_before);
    assert_ne!(tr.store.checksum(|_, frozen| !frozen), trainable_before);
    let state = tr.opt.state();
    assert!(!state.is_empty());
    for (name, m) in state {
        assert!(!tr.store.is_frozen(name), "{name} has optimiser state");
        assert_eq!(m.m.shape(), tr.store.get(name).unwrap().shape());
    }
    assert!(tr.store.frozen_names().all(|n| !state.contains_key(n)));
}

pub fn single_sample_loss_decreases() {
    let mut cfg = RunConfig::toy();
    cfg.train.n_images = 1;
    cfg.train.steps = 1000;
    cfg.train.base_lr = 1e-4;
    cfg.train.eval_every = 0;
    let mut tr = Trainer::new(cfg).unwrap();
    let losses: Vec<f64> = (0..21).map(|_| tr.train_step().unwrap().loss).collect();
    let rises = losses.windows(2).filter(|w| w[1] > w[0]).count();
    assert!(rises <= 2, "{losses:?}");
}

pub fn toy_dataset_contract() {
    let a = make_toy_dataset(5, 30, (64, 64), 6).unwrap();
    let b = make_toy_dataset(5, 30, (64, 64), 6).unwrap();
    assert_eq!(a, b);
    for s in &a {
        assert!((1..=4).contains(&s.instances.len()));
        let mut cover = vec![0u8; 64 * 64];
        for inst in &s.instances {
            assert!(inst.class < 6);
            assert!(inst.mask.iter().any(|&m| m));
            for (c, &m) in cover.iter_mut().zip(&inst.mask) {
                *c += m as u8;
            }
        }
        assert!(cover.iter().all(|&c| c <= 1));
    }
}
