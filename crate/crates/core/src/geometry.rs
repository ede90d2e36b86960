//! Sliding-window decomposition of a high-resolution image into slices,
//! the padded low-resolution global view, and restoration of slice token
//! grids onto one spatial grid.

use serde::Serialize;

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::image::InputImage;
use crate::tensor::{kernels, Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SliceLayout {
    pub input_hw: (usize, usize),
    pub p: f64,
    pub patch: usize,
    pub window_hw: (usize, usize),
    pub stride_hw: (usize, usize),
    pub grid_mn: (usize, usize),
    pub overlap: bool,
}

struct AxisPlan {
    window: usize,
    stride: usize,
    grid: usize,
    overlap: bool,
}

fn plan_axis(input: usize, p: f64, patch: usize) -> Option<AxisPlan> {
    if p >= 1.0 {
        return Some(AxisPlan {
            window: input,
            stride: 0,
            grid: 1,
            overlap: false,
        });
    }
    let window = (p * input as f64).round() as usize;
    if window == 0 || !window.is_multiple_of(patch) {
        return None;
    }
    if p <= 0.5 {
        let grid = (1.0 / p).round() as usize;
        (grid * window == input).then_some(AxisPlan {
            window,
            stride: window,
            grid,
            overlap: false,
        })
    } else {
        (window < input).then_some(AxisPlan {
            window,
            stride: input - window,
            grid: 2,
            overlap: true,
        })
    }
}

/// Valid crop ratio closest to `p` for the given input.
fn nearest_valid_p(input_hw: (usize, usize), p: f64, patch: usize) -> f64 {
    let n = input_hw.0.max(input_hw.1) / patch.max(1);
    let mut best = 1.0;
    for k in 1..=n {
        let c = (k * patch) as f64 / input_hw.0 as f64;
        if c > 1.0 {
            break;
        }
        let ok =
            plan_axis(input_hw.0, c, patch).is_some() && plan_axis(input_hw.1, c, patch).is_some();
        if ok && (c - p).abs() < (best - p).abs() {
            best = c;
        }
    }
    best
}

pub fn plan_layout(input_hw: (usize, usize), p: f64, patch: usize) -> Result<SliceLayout> {
    let (h, w) = input_hw;
    if patch == 0 || h == 0 || w == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::dim(
            "plan_layout",
            format!("input {h}x{w} is not divisible by patch {patch}"),
        ));
    }
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::Layout {
            detail: format!("crop ratio {p} outside (0, 1]"),
            suggested_p: nearest_valid_p(input_hw, p.clamp(0.0, 1.0), patch),
        });
    }
    match (plan_axis(h, p, patch), plan_axis(w, p, patch)) {
        (Some(a), Some(b)) => Ok(SliceLayout {
            input_hw,
            p,
            patch,
            window_hw: (a.window, b.window),
            stride_hw: (a.stride, b.stride),
            grid_mn: (a.grid, b.grid),
            overlap: a.overlap || b.overlap,
        }),
        _ => Err(Error::Layout {
            detail: format!(
                "crop ratio {p} gives no patch-aligned tiling of {h}x{w} with patch {patch}"
            ),
            suggested_p: nearest_valid_p(input_hw, p, patch),
        }),
    }
}

impl SliceLayout {
    pub fn num_slices(&self) -> usize {
        self.grid_mn.0 * self.grid_mn.1
    }

    /// Pixel origins of the slices in row-major order.
    pub fn origins(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.num_slices());
        for i in 0..self.grid_mn.0 {
            for j in 0..self.grid_mn.1 {
                out.push((i * self.stride_hw.0, j * self.stride_hw.1));
            }
        }
        out
    }

    /// Token grid of one slice.
    pub fn slice_tokens_hw(&self) -> (usize, usize) {
        (self.window_hw.0 / self.patch, self.window_hw.1 / self.patch)
    }

    pub fn tokens_per_slice(&self) -> usize {
        let (a, b) = self.slice_tokens_hw();
        a * b
    }

    /// Token grid of the whole image after restoration.
    pub fn grid_hw(&self) -> (usize, usize) {
        (self.input_hw.0 / self.patch, self.input_hw.1 / self.patch)
    }

    pub fn grid_cells(&self) -> usize {
        let (a, b) = self.grid_hw();
        a * b
    }

    /// For every slice token in slice-major, row-major order, the flat index
    /// of the restored grid cell it lands on.
    pub fn restore_index(&self) -> Vec<usize> {
        let (th, tw) = self.slice_tokens_hw();
        let gw = self.grid_hw().1;
        let mut idx = Vec::with_capacity(self.num_slices() * th * tw);
        for (oy, ox) in self.origins() {
            let (ty0, tx0) = (oy / self.patch, ox / self.patch);
            for ty in 0..th {
                for tx in 0..tw {
                    idx.push((ty0 + ty) * gw + tx0 + tx);
                }
            }
        }
        idx
    }

    /// Number of slice tokens landing on each grid cell.
    pub fn contribution_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.grid_cells()];
        self.restore_index().into_iter().for_each(|i| c[i] += 1);
        c
    }
}

/// Crops the slices of `img` in row-major order of their origins.
pub fn slice_image(img: &InputImage, layout: &SliceLayout) -> Result<Vec<InputImage>> {
    if img.hw() != layout.input_hw {
        return Err(Error::dim(
            "slice_image",
            format!("image {:?} vs layout {:?}", img.hw(), layout.input_hw),
        ));
    }
    let (wh, ww) = layout.window_hw;
    layout
        .origins()
        .into_iter()
        .map(|(y, x)| InputImage::new(img.pixels().narrow(1, y, wh)?.narrow(2, x, ww)?))
        .collect()
}

/// Aspect-preserving bilinear downscale so the image fits `target_hw`,
/// then zero padding at the bottom and right. Returns the padded image and
/// the size of its content region.
pub fn downsample_pad(
    img: &InputImage,
    target_hw: (usize, usize),
) -> Result<(InputImage, (usize, usize))> {
    let (h, w) = img.hw();
    let (th, tw) = target_hw;
    if th == 0 || tw == 0 || th > h || tw > w {
        return Err(Error::dim(
            "downsample_pad",
            format!("target {th}x{tw} for {h}x{w}"),
        ));
    }
    if (h, w) == (th, tw) {
        return Ok((img.clone(), (h, w)));
    }
    let s = (th as f64 / h as f64).min(tw as f64 / w as f64);
    let nh = ((h as f64 * s).round() as usize).clamp(1, th);
    let nw = ((w as f64 * s).round() as usize).clamp(1, tw);
    let scaled = kernels::resize_bilinear(img.pixels().data(), 3, h, w, nh, nw);
    let mut out = vec![0f32; 3 * th * tw];
    for c in 0..3 {
        for y in 0..nh {
            let src = &scaled[(c * nh + y) * nw..(c * nh + y + 1) * nw];
            out[(c * th + y) * tw..(c * th + y) * tw + nw].copy_from_slice(src);
        }
    }
    let pixels = Tensor::new(vec![3, th, tw], out)?.map(|v| v.clamp(0.0, 1.0));
    Ok((InputImage::new(pixels)?, (nh, nw)))
}

fn check_slices<T: Real>(slices: &[&Tensor<T>], layout: &SliceLayout) -> Result<usize> {
    let l = layout.tokens_per_slice();
    if slices.len() != layout.num_slices() {
        return Err(Error::dim(
            "restore_grid",
            format!(
                "{} slices for a layout of {}",
                slices.len(),
                layout.num_slices()
            ),
        ));
    }
    let d = slices[0].shape().get(1).copied().unwrap_or(0);
    for s in slices {
        if s.shape() != [l, d] {
            return Err(Error::dim(
                "restore_grid",
                format!("slice tokens {:?}, expected [{l}, {d}]", s.shape()),
            ));
        }
    }
    Ok(d)
}

/// Places slice tokens `[L, D]` on the image token grid `[gh, gw, D]`,
/// averaging cells covered by several slices.
pub fn restore_grid<T: Real>(slices: &[&Tensor<T>], layout: &SliceLayout) -> Result<Tensor<T>> {
    let d = check_slices(slices, layout)?;
    let counts = layout.contribution_counts();
    let idx = layout.restore_index();
    let mut out = vec![T::zero(); layout.grid_cells() * d];
    let l = layout.tokens_per_slice();
    for (r, &cell) in idx.iter().enumerate() {
        let src = &slices[r / l].data()[(r % l) * d..(r % l + 1) * d];
        let inv = T::one() / T::from_f64(counts[cell] as f64);
        out[cell * d..(cell + 1) * d]
            .iter_mut()
            .zip(src)
            .for_each(|(o, &s)| *o += s * inv);
    }
    let (gh, gw) = layout.grid_hw();
    Tensor::new(vec![gh, gw, d], out)
}

/// Differentiable restoration of stacked slice tokens `[S·L, D]`.
pub fn restore_grid_var<'t, T: Real>(
    stacked: Var<'t, T>,
    layout: &SliceLayout,
) -> Result<Var<'t, T>> {
    let d = stacked.shape()[1];
    let (gh, gw) = layout.grid_hw();
    stacked
        .scatter_mean(&layout.restore_index(), layout.grid_cells())?
        .reshape(&[gh, gw, d])
}

/// Reads grid features `[gh, gw, D]` back in slice-token order `[S·L, D]`.
pub fn grid_to_stream<'t, T: Real>(grid: Var<'t, T>, layout: &SliceLayout) -> Result<Var<'t, T>> {
    let s = grid.shape();
    grid.reshape(&[s[0] * s[1], s[2]])?
        .gather_rows(&layout.restore_index())
}
