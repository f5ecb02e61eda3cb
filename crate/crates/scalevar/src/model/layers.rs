//! Network layers with explicit forward/backward passes.
//!
//! Feature maps are channel-major `[C, H, W]` tensors. Each layer caches
//! whatever its backward pass needs; gradients accumulate into the layer's
//! `Param` buffers so a shared backbone can sum contributions from several
//! heads before the optimizer runs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::geometry::{roi_cell_rect, Box};
use crate::model::tensor::{Param, Tensor};

/// Output-column range [lo, hi) for which `ox*s + off` lands inside `[0, w)`.
#[inline]
fn ox_range(off: isize, s: usize, w: usize, wo: usize) -> (usize, usize) {
    let lo = if off < 0 { ((-off) as usize).div_ceil(s) } else { 0 };
    let max_ix = w as isize - 1 - off;
    if max_ix < 0 {
        return (0, 0);
    }
    let hi = (max_ix as usize / s + 1).min(wo);
    (lo.min(hi), hi)
}

fn he_init(shape: &[usize], fan_in: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
    let data = (0..shape.iter().product::<usize>())
        .map(|_| normal.sample(&mut rng))
        .collect();
    Tensor::from_vec(shape, data).expect("shape matches")
}

fn small_init(shape: &[usize], std: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, std).expect("valid std");
    let data = (0..shape.iter().product::<usize>())
        .map(|_| normal.sample(&mut rng))
        .collect();
    Tensor::from_vec(shape, data).expect("shape matches")
}

/// 2D convolution, square kernel, symmetric zero padding.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: Param,
    pub b: Param,
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(in_c: usize, out_c: usize, k: usize, stride: usize, pad: usize, seed: u64) -> Self {
        let fan_in = in_c * k * k;
        Conv2d {
            w: Param::new(he_init(&[out_c, in_c, k, k], fan_in, seed)),
            b: Param::new(Tensor::zeros(&[out_c])),
            in_c,
            out_c,
            k,
            stride,
            pad,
        }
    }

    /// Output layer variant: near-zero weights and a fixed bias.
    pub fn new_output(in_c: usize, out_c: usize, k: usize, bias: f64, seed: u64) -> Self {
        let mut b = Tensor::zeros(&[out_c]);
        b.fill(bias);
        Conv2d {
            w: Param::new(small_init(&[out_c, in_c, k, k], 0.01, seed)),
            b: Param::new(b),
            in_c,
            out_c,
            k,
            stride: 1,
            pad: if k == 1 { 0 } else { k / 2 },
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.k) / self.stride + 1,
            (w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let (h, w) = (x.shape()[1], x.shape()[2]);
        debug_assert_eq!(x.shape()[0], self.in_c);
        let (ho, wo) = self.out_hw(h, w);
        let mut out = Tensor::zeros(&[self.out_c, ho, wo]);
        let xs = x.data();
        let ws = self.w.value.data();
        let bs = self.b.value.data();
        let os = out.data_mut();
        let (s, k, p) = (self.stride, self.k, self.pad);
        for oc in 0..self.out_c {
            for oy in 0..ho {
                let out_row = &mut os[(oc * ho + oy) * wo..][..wo];
                out_row.fill(bs[oc]);
                for ic in 0..self.in_c {
                    for ky in 0..k {
                        let iy = (oy * s + ky) as isize - p as isize;
                        if iy < 0 || iy as usize >= h {
                            continue;
                        }
                        let x_row = &xs[(ic * h + iy as usize) * w..][..w];
                        let w_row = &ws[((oc * self.in_c + ic) * k + ky) * k..][..k];
                        for (kx, &wv) in w_row.iter().enumerate() {
                            let off = kx as isize - p as isize;
                            let (ox_lo, ox_hi) = ox_range(off, s, w, wo);
                            if s == 1 {
                                // Contiguous shifted-row multiply-add.
                                let src = &x_row[(ox_lo as isize + off) as usize..];
                                for (o, xv) in out_row[ox_lo..ox_hi].iter_mut().zip(src) {
                                    *o += wv * xv;
                                }
                            } else {
                                for ox in ox_lo..ox_hi {
                                    out_row[ox] += wv * x_row[((ox * s) as isize + off) as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Accumulates weight/bias gradients and returns the input gradient
    /// (skipped when `needs_input_grad` is false, e.g. the first layer).
    pub fn backward(&mut self, x: &Tensor, grad_out: &Tensor, needs_input_grad: bool) -> Option<Tensor> {
        let (h, w) = (x.shape()[1], x.shape()[2]);
        let (ho, wo) = (grad_out.shape()[1], grad_out.shape()[2]);
        let xs = x.data();
        let gos = grad_out.data();
        let (s, k, p) = (self.stride, self.k, self.pad);

        {
            let gb = self.b.grad.data_mut();
            for oc in 0..self.out_c {
                let mut acc = 0.0;
                for v in &gos[oc * ho * wo..(oc + 1) * ho * wo] {
                    acc += v;
                }
                gb[oc] += acc;
            }
        }

        {
            let gw = self.w.grad.data_mut();
            for oc in 0..self.out_c {
                for ic in 0..self.in_c {
                    for ky in 0..k {
                        for kx in 0..k {
                            let mut acc = 0.0;
                            for oy in 0..ho {
                                let iy = (oy * s + ky) as isize - p as isize;
                                if iy < 0 || iy as usize >= h {
                                    continue;
                                }
                                let go_row = &gos[(oc * ho + oy) * wo..][..wo];
                                let x_row = &xs[(ic * h + iy as usize) * w..][..w];
                                let off = kx as isize - p as isize;
                                let (ox_lo, ox_hi) = ox_range(off, s, w, wo);
                                for ox in ox_lo..ox_hi {
                                    acc += go_row[ox] * x_row[((ox * s) as isize + off) as usize];
                                }
                            }
                            gw[((oc * self.in_c + ic) * k + ky) * k + kx] += acc;
                        }
                    }
                }
            }
        }

        if !needs_input_grad {
            return None;
        }
        let mut grad_in = Tensor::zeros(&[self.in_c, h, w]);
        let gis = grad_in.data_mut();
        let ws = self.w.value.data();
        for oc in 0..self.out_c {
            for oy in 0..ho {
                let go_row = &gos[(oc * ho + oy) * wo..][..wo];
                for ic in 0..self.in_c {
                    for ky in 0..k {
                        let iy = (oy * s + ky) as isize - p as isize;
                        if iy < 0 || iy as usize >= h {
                            continue;
                        }
                        let gi_row = &mut gis[(ic * h + iy as usize) * w..][..w];
                        let w_row = &ws[((oc * self.in_c + ic) * k + ky) * k..][..k];
                        for (kx, &wv) in w_row.iter().enumerate() {
                            let off = kx as isize - p as isize;
                            let (ox_lo, ox_hi) = ox_range(off, s, w, wo);
                            for ox in ox_lo..ox_hi {
                                gi_row[((ox * s) as isize + off) as usize] += wv * go_row[ox];
                            }
                        }
                    }
                }
            }
        }
        Some(grad_in)
    }
}

/// ReLU; backward gates on the cached output.
pub fn relu_forward(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for v in out.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    out
}

pub fn relu_backward(out: &Tensor, grad_out: &Tensor) -> Tensor {
    let mut grad_in = grad_out.clone();
    for (g, &o) in grad_in.data_mut().iter_mut().zip(out.data()) {
        if o <= 0.0 {
            *g = 0.0;
        }
    }
    grad_in
}

/// Fully connected layer on flat vectors.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: Param,
    pub b: Param,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(in_dim: usize, out_dim: usize, seed: u64) -> Self {
        Linear {
            w: Param::new(he_init(&[out_dim, in_dim], in_dim, seed)),
            b: Param::new(Tensor::zeros(&[out_dim])),
            in_dim,
            out_dim,
        }
    }

    pub fn new_output(in_dim: usize, out_dim: usize, bias: f64, seed: u64) -> Self {
        let mut b = Tensor::zeros(&[out_dim]);
        b.fill(bias);
        Linear {
            w: Param::new(small_init(&[out_dim, in_dim], 0.01, seed)),
            b: Param::new(b),
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.in_dim);
        let ws = self.w.value.data();
        let bs = self.b.value.data();
        (0..self.out_dim)
            .map(|o| {
                let row = &ws[o * self.in_dim..][..self.in_dim];
                let mut acc = bs[o];
                for (a, b) in row.iter().zip(x) {
                    acc += a * b;
                }
                acc
            })
            .collect()
    }

    pub fn backward(&mut self, x: &[f64], grad_out: &[f64]) -> Vec<f64> {
        let mut grad_in = vec![0.0; self.in_dim];
        let ws = self.w.value.data();
        {
            let gw = self.w.grad.data_mut();
            let gb = self.b.grad.data_mut();
            for (o, &go) in grad_out.iter().enumerate() {
                gb[o] += go;
                let gw_row = &mut gw[o * self.in_dim..][..self.in_dim];
                let w_row = &ws[o * self.in_dim..][..self.in_dim];
                for i in 0..self.in_dim {
                    gw_row[i] += go * x[i];
                    grad_in[i] += go * w_row[i];
                }
            }
        }
        grad_in
    }
}

/// ROI max pooling onto a fixed `template x template` grid.
///
/// The box projects to a cell rectangle via [`roi_cell_rect`]; the rectangle
/// is clamped into the map (at least one cell survives) and divided into
/// near-equal bins. Each output value is the max over its bin; the backward
/// pass routes the gradient to the argmax cell.
#[derive(Clone, Debug)]
pub struct RoiPoolCache {
    /// Flat source index per output element.
    argmax: Vec<usize>,
    src_shape: [usize; 3],
}

pub fn roi_pool_forward(map: &Tensor, bbox: &Box, stride: u32, template: u32) -> (Tensor, RoiPoolCache) {
    let (c, h, w) = (map.shape()[0], map.shape()[1], map.shape()[2]);
    let t = template as usize;
    let rect = roi_cell_rect(bbox, stride as f64).expect("stride is positive");
    // Clamp into the map, keeping at least one cell.
    let c0 = rect.col0.clamp(0, w as i64 - 1) as usize;
    let r0 = rect.row0.clamp(0, h as i64 - 1) as usize;
    let c1 = (rect.col1.clamp(c0 as i64 + 1, w as i64)) as usize;
    let r1 = (rect.row1.clamp(r0 as i64 + 1, h as i64)) as usize;
    let (rw, rh) = (c1 - c0, r1 - r0);

    let mut out = Tensor::zeros(&[c, t, t]);
    let mut argmax = vec![0usize; c * t * t];
    let xs = map.data();
    let os = out.data_mut();
    for ch in 0..c {
        for ty in 0..t {
            let by0 = r0 + (ty * rh) / t;
            let by1 = (r0 + ((ty + 1) * rh).div_ceil(t)).max(by0 + 1).min(r1.max(by0 + 1));
            for tx in 0..t {
                let bx0 = c0 + (tx * rw) / t;
                let bx1 = (c0 + ((tx + 1) * rw).div_ceil(t)).max(bx0 + 1).min(c1.max(bx0 + 1));
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = (ch * h + by0) * w + bx0;
                for y in by0..by1 {
                    let row_base = (ch * h + y) * w;
                    for x in bx0..bx1 {
                        let v = xs[row_base + x];
                        if v > best {
                            best = v;
                            best_idx = row_base + x;
                        }
                    }
                }
                let oi = (ch * t + ty) * t + tx;
                os[oi] = best;
                argmax[oi] = best_idx;
            }
        }
    }
    (out, RoiPoolCache { argmax, src_shape: [c, h, w] })
}

pub fn roi_pool_backward(cache: &RoiPoolCache, grad_out: &Tensor, grad_map: &mut Tensor) {
    debug_assert_eq!(grad_map.shape(), cache.src_shape);
    let gm = grad_map.data_mut();
    for (oi, &src) in cache.argmax.iter().enumerate() {
        gm[src] += grad_out.data()[oi];
    }
}

/// Numerically stable binary cross-entropy on a logit.
/// Returns (loss, dloss/dlogit).
pub fn bce_with_logit(logit: f64, target: f64) -> (f64, f64) {
    let loss = logit.max(0.0) - logit * target + (-logit.abs()).exp().ln_1p();
    let grad = sigmoid(logit) - target;
    (loss, grad)
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Smooth L1 (Huber at delta 1). Returns (loss, dloss/dx).
pub fn smooth_l1(x: f64) -> (f64, f64) {
    if x.abs() < 1.0 {
        (0.5 * x * x, x)
    } else {
        (x.abs() - 0.5, x.signum())
    }
}
