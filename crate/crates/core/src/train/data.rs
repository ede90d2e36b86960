//! Synthetic images of coloured boxes and disks on a textured background.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::classifier::IGNORE_LABEL;
use crate::error::{Error, Result};
use crate::image::InputImage;
use crate::tensor::Tensor;

pub const MAX_INSTANCES: usize = 4;
const SHAPES: [&str; 2] = ["box", "disk"];
const COLORS: [(&str, [f32; 3]); 6] = [
    ("red", [0.9, 0.1, 0.1]),
    ("green", [0.1, 0.85, 0.15]),
    ("blue", [0.1, 0.2, 0.95]),
    ("yellow", [0.95, 0.9, 0.1]),
    ("magenta", [0.9, 0.1, 0.9]),
    ("cyan", [0.1, 0.9, 0.9]),
];

#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub class: usize,
    /// Row-major mask at image resolution.
    pub mask: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToySample {
    pub image: InputImage,
    pub instances: Vec<Instance>,
}

impl ToySample {
    /// Semantic label map; background is [`IGNORE_LABEL`].
    pub fn label_map(&self) -> Vec<u32> {
        let mut out = vec![IGNORE_LABEL; self.image.height() * self.image.width()];
        for inst in &self.instances {
            for (o, &m) in out.iter_mut().zip(&inst.mask) {
                if m {
                    *o = inst.class as u32;
                }
            }
        }
        out
    }
}

pub fn max_classes() -> usize {
    SHAPES.len() * COLORS.len()
}

/// Class `c` is shape `c % 2` in colour `c / 2`.
pub fn class_names(n_classes: usize) -> Result<Vec<String>> {
    if n_classes == 0 || n_classes > max_classes() {
        return Err(Error::Config(format!(
            "toy data supports 1..={} classes, got {n_classes}",
            max_classes()
        )));
    }
    Ok((0..n_classes)
        .map(|c| format!("{} {}", COLORS[c / 2].0, SHAPES[c % 2]))
        .collect())
}

fn inside(shape: usize, y: usize, x: usize, top: usize, left: usize, h: usize, w: usize) -> bool {
    if y < top || x < left || y >= top + h || x >= left + w {
        return false;
    }
    if shape == 0 {
        return true;
    }
    let dy = (y - top) as f64 + 0.5 - h as f64 / 2.0;
    let dx = (x - left) as f64 + 0.5 - w as f64 / 2.0;
    (dy / (h as f64 / 2.0)).powi(2) + (dx / (w as f64 / 2.0)).powi(2) <= 1.0
}

fn make_sample(rng: &mut ChaCha8Rng, hw: (usize, usize), n_classes: usize) -> Result<ToySample> {
    let (h, w) = hw;
    let mut px = vec![0f32; 3 * h * w];
    let period = rng.random_range(6..14) as f32;
    let base: f32 = rng.random_range(0.35..0.55);
    for y in 0..h {
        for x in 0..w {
            let stripe = 0.08 * (((x + y) as f32 / period).sin());
            for c in 0..3 {
                let noise: f32 = rng.random_range(-0.05..0.05);
                px[c * h * w + y * w + x] = (base + stripe + noise).clamp(0.0, 1.0);
            }
        }
    }
    let target = rng.random_range(1..=MAX_INSTANCES);
    let mut occupied = vec![false; h * w];
    let mut instances = Vec::new();
    let (lo, hi) = ((h.min(w) / 6).max(4), (h.min(w) / 3).max(5));
    for _ in 0..200 {
        if instances.len() == target {
            break;
        }
        let class = rng.random_range(0..n_classes);
        let (bh, bw) = (rng.random_range(lo..=hi), rng.random_range(lo..=hi));
        let (top, left) = (rng.random_range(0..=h - bh), rng.random_range(0..=w - bw));
        let mask: Vec<bool> = (0..h * w)
            .map(|i| inside(class % 2, i / w, i % w, top, left, bh, bw))
            .collect();
        // One-pixel gap between instances.
        let (t0, l0) = (top.saturating_sub(1), left.saturating_sub(1));
        let clash = (t0..(top + bh + 1).min(h))
            .any(|y| (l0..(left + bw + 1).min(w)).any(|x| occupied[y * w + x]));
        if clash {
            continue;
        }
        let color = COLORS[class / 2].1;
        for (i, &m) in mask.iter().enumerate() {
            if m {
                occupied[i] = true;
                for c in 0..3 {
                    let noise: f32 = rng.random_range(-0.04..0.04);
                    px[c * h * w + i] = (color[c] + noise).clamp(0.0, 1.0);
                }
            }
        }
        instances.push(Instance { class, mask });
    }
    Ok(ToySample {
        image: InputImage::new(Tensor::new(vec![3, h, w], px)?)?,
        instances,
    })
}

/// Deterministic dataset of `n_images` samples with one to four disjoint
/// instances each.
pub fn make_toy_dataset(
    seed: u64,
    n_images: usize,
    hw: (usize, usize),
    n_classes: usize,
) -> Result<Vec<ToySample>> {
    class_names(n_classes)?;
    if hw.0 < 16 || hw.1 < 16 {
        return Err(Error::Config(format!(
            "toy images must be at least 16x16, got {hw:?}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_images)
        .map(|_| make_sample(&mut rng, hw, n_classes))
        .collect()
}
