#![allow(dead_code)]

use ovseg_core::geometry::{downsample_pad, plan_layout, restore_grid, slice_image, SliceLayout};
use ovseg_core::{Error, InputImage, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn ramp_image(h: usize, w: usize) -> InputImage {
    InputImage::new(Tensor::from_fn(&[3, h, w], |i| (i % 251) as f32 / 250.0)).unwrap()
}

pub fn layout_examples() {
    let l = plan_layout((640, 640), 1.0, 16).unwrap();
    assert_eq!(
        (l.window_hw, l.grid_mn, l.stride_hw),
        ((640, 640), (1, 1), (0, 0))
    );
    assert!(!l.overlap);
    let err = plan_layout((640, 640), 0.3, 16).unwrap_err();
    match err {
        Error::Layout { suggested_p, .. } => {
            assert!(plan_layout((640, 640), suggested_p, 16).is_ok());
        }
        other => panic!("{other}"),
    }
}

pub fn crop_ratio_sweep() {
    for p in [0.25, 0.5, 0.625, 0.75, 1.0] {
        let l = plan_layout((640, 640), p, 16).unwrap();
        let window = (p * 640.0_f64).round() as usize;
        assert_eq!(l.window_hw, (window, window));
        assert_eq!(l.overlap, p > 0.5 && p < 1.0, "p {p}");
        let (m, n) = l.grid_mn;
        let origins = l.origins();
        assert_eq!(origins.len(), m * n);
        let last = origins.last().unwrap();
        assert_eq!((last.0 + window, last.1 + window), (640, 640));
        assert!(l.contribution_counts().iter().all(|&c| c >= 1));
        if p <= 0.5 {
            assert_eq!(m * window, 640);
        }
    }
}

pub fn quadrants_reassemble_exactly() {
    let img = InputImage::new(Tensor::from_fn(&[3, 640, 640], |i| {
        let (y, x) = ((i / 640) % 640, i % 640);
        ((y / 20 + x / 20) % 2) as f32
    }))
    .unwrap();
    let l = plan_layout((640, 640), 0.5, 16).unwrap();
    let slices = slice_image(&img, &l).unwrap();
    assert_eq!(slices.len(), 4);
    let mut out = vec![0f32; 3 * 640 * 640];
    for (s, (oy, ox)) in slices.iter().zip(l.origins()) {
        assert_eq!(s.hw(), (320, 320));
        for c in 0..3 {
            for y in 0..320 {
                for x in 0..320 {
                    out[(c * 640 + oy + y) * 640 + ox + x] = s.pixels().at(&[c, y, x]);
                }
            }
        }
    }
    assert_eq!(out, img.pixels().data());
}

pub fn overlapped_pixel_appears_in_every_crop() {
    let img = ramp_image(640, 640);
    let l = plan_layout((640, 640), 0.625, 16).unwrap();
    let slices = slice_image(&img, &l).unwrap();
    let want = img.pixels().at(&[1, 300, 300]);
    for (s, (oy, ox)) in slices.iter().zip(l.origins()) {
        assert!(oy <= 300 && 300 < oy + 400 && ox <= 300 && 300 < ox + 400);
        assert_eq!(s.pixels().at(&[1, 300 - oy, 300 - ox]), want);
    }
}

pub fn constant_image_gives_identical_crops() {
    let img = InputImage::filled(640, 640, 0.25);
    let l = plan_layout((640, 640), 0.625, 16).unwrap();
    for s in slice_image(&img, &l).unwrap() {
        assert!(s.pixels().data().iter().all(|&v| v == 0.25));
    }
}

pub fn slice_tokens(
    l: &SliceLayout,
    d: usize,
    f: impl Fn(usize, usize, usize) -> f32,
) -> Vec<Tensor<f32>> {
    let (th, tw) = l.slice_tokens_hw();
    (0..l.num_slices())
        .map(|s| Tensor::from_fn(&[th * tw, d], |i| f(s, i / d, i % d)))
        .collect()
}

pub fn non_overlapped_round_trip_is_exact() {
    let l = plan_layout((640, 640), 0.5, 16).unwrap();
    assert_eq!(l.slice_tokens_hw(), (20, 20));
    let (oy, ox): (Vec<_>, Vec<_>) = l.origins().into_iter().unzip();
    // Each token carries its own global grid position.
    let toks = slice_tokens(&l, 2, |s, t, c| {
        let (y, x) = (oy[s] / 16 + t / 20, ox[s] / 16 + t % 20);
        if c == 0 {
            y as f32
        } else {
            x as f32
        }
    });
    let refs: Vec<&Tensor<f32>> = toks.iter().collect();
    let grid = restore_grid(&refs, &l).unwrap();
    assert_eq!(grid.shape(), &[40, 40, 2]);
    for y in 0..40 {
        for x in 0..40 {
            assert_eq!(grid.at(&[y, x, 0]), y as f32);
            assert_eq!(grid.at(&[y, x, 1]), x as f32);
        }
    }
}

pub fn overlapped_restore_preserves_constants() {
    let l = plan_layout((640, 640), 0.625, 16).unwrap();
    let toks = slice_tokens(&l, 3, |_, _, _| 1.0);
    let refs: Vec<&Tensor<f32>> = toks.iter().collect();
    let grid = restore_grid(&refs, &l).unwrap();
    assert!(grid.data().iter().all(|&v| v == 1.0));
}

pub fn overlapped_restore_matches_accumulate_and_divide() {
    for p in [0.625, 0.75] {
        let l = plan_layout((640, 640), p, 16).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let d = 3;
        let (th, tw) = l.slice_tokens_hw();
        let toks: Vec<Tensor<f64>> = (0..l.num_slices())
            .map(|_| Tensor::randn(&[th * tw, d], 1.0, &mut rng))
            .collect();
        let (gh, gw) = (40, 40);
        let mut acc = vec![0.0; gh * gw * d];
        let mut cnt = vec![0.0; gh * gw];
        for (t, (oy, ox)) in toks.iter().zip(l.origins()) {
            for ty in 0..th {
                for tx in 0..tw {
                    let cell = (oy / 16 + ty) * gw + ox / 16 + tx;
                    cnt[cell] += 1.0;
                    for c in 0..d {
                        acc[cell * d + c] += t.at(&[ty * tw + tx, c]);
                    }
                }
            }
        }
        let refs: Vec<&Tensor<f64>> = toks.iter().collect();
        let grid = restore_grid(&refs, &l).unwrap();
        for (i, g) in grid.data().iter().enumerate() {
            assert!((g - acc[i] / cnt[i / d]).abs() < 1e-6);
        }
    }
}

pub fn restore_rejects_wrong_token_count() {
    let l = plan_layout((640, 640), 0.5, 16).unwrap();
    let bad = Tensor::<f32>::zeros(&[399, 2]);
    let refs = vec![&bad; 4];
    assert!(restore_grid(&refs, &l).is_err());
}

pub fn downsample_pad_examples() {
    let (out, content) = downsample_pad(&ramp_image(640, 640), (320, 320)).unwrap();
    assert_eq!((out.hw(), content), ((320, 320), (320, 320)));

    let (out, content) = downsample_pad(&InputImage::filled(320, 640, 0.5), (320, 320)).unwrap();
    assert_eq!(content, (160, 320));
    let px = out.pixels();
    for c in 0..3 {
        for y in 0..320 {
            for x in 0..320 {
                let v = px.at(&[c, y, x]);
                if y < 160 {
                    assert!((v - 0.5).abs() < 1e-6);
                } else {
                    assert_eq!(v, 0.0);
                }
            }
        }
    }

    let img = ramp_image(320, 320);
    let (out, _) = downsample_pad(&img, (320, 320)).unwrap();
    assert_eq!(out, img);
}
