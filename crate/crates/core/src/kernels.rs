//! Forward and backward kernels for the spatial operators.
//!
//! Every kernel writes into disjoint output chunks and sums in a fixed order,
//! so results are bit-identical regardless of how rayon schedules the chunks.

use rayon::prelude::*;

use crate::tensor::Tensor;

/// Output positions `[lo, hi)` along one axis whose input index
/// `o * stride + tap - pad` falls inside `[0, input_len)`.
fn valid_range(tap: usize, stride: usize, pad: usize, input_len: usize, output_len: usize) -> (usize, usize) {
    let lo = if tap >= pad { 0 } else { (pad - tap).div_ceil(stride) };
    let hi = if input_len + pad > tap { ((input_len + pad - tap - 1) / stride + 1).min(output_len) } else { 0 };
    (lo.min(hi), hi)
}

pub(crate) fn conv_output_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[inline]
fn axpy(out: &mut [f64], a: f64, x: &[f64], stride: usize) {
    if stride == 1 {
        for (o, &v) in out.iter_mut().zip(x) {
            *o += a * v;
        }
    } else {
        for (o, &v) in out.iter_mut().zip(x.iter().step_by(stride)) {
            *o += a * v;
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64], stride: usize) -> f64 {
    if stride == 1 {
        let mut acc = [0.0; 4];
        let chunks = a.len() / 4;
        for i in 0..chunks {
            for l in 0..4 {
                acc[l] += a[4 * i + l] * b[4 * i + l];
            }
        }
        let mut tail = 0.0;
        for i in chunks * 4..a.len() {
            tail += a[i] * b[i];
        }
        (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
    } else {
        a.iter().zip(b.iter().step_by(stride)).map(|(x, y)| x * y).sum()
    }
}

pub(crate) struct ConvGeometry {
    pub stride: usize,
    pub pad: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub kw: usize,
}

impl ConvGeometry {
    fn col_ranges(&self) -> Vec<(usize, usize)> {
        (0..self.kw).map(|kx| valid_range(kx, self.stride, self.pad, self.in_w, self.out_w)).collect()
    }

    #[inline]
    fn input_row(&self, oy: usize, ky: usize) -> Option<usize> {
        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
        (iy >= 0 && (iy as usize) < self.in_h).then_some(iy as usize)
    }
}

pub(crate) fn conv2d_forward(input: &Tensor, weight: &Tensor, bias: &Tensor, geo: &ConvGeometry) -> Vec<f64> {
    let [_, in_c, _, _] = input.shape();
    let [out_c, _, kh, kw] = weight.shape();
    let plane_out = geo.out_h * geo.out_w;
    let n = input.batch();
    let mut out = vec![0.0; n * out_c * plane_out];
    let cols = geo.col_ranges();
    let wd = weight.data();
    out.par_chunks_mut(plane_out).enumerate().for_each(|(idx, chunk)| {
        let (b, oc) = (idx / out_c, idx % out_c);
        chunk.fill(bias.data()[oc]);
        for ic in 0..in_c {
            let plane = input.plane(b, ic);
            for ky in 0..kh {
                for oy in 0..geo.out_h {
                    let Some(iy) = geo.input_row(oy, ky) else { continue };
                    let in_row = &plane[iy * geo.in_w..(iy + 1) * geo.in_w];
                    let out_row = &mut chunk[oy * geo.out_w..(oy + 1) * geo.out_w];
                    for kx in 0..kw {
                        let (lo, hi) = cols[kx];
                        if lo >= hi {
                            continue;
                        }
                        let w = wd[((oc * in_c + ic) * kh + ky) * kw + kx];
                        let ix0 = lo * geo.stride + kx - geo.pad;
                        axpy(&mut out_row[lo..hi], w, &in_row[ix0..], geo.stride);
                    }
                }
            }
        }
    });
    out
}

pub(crate) fn conv2d_grad_input(weight: &Tensor, grad_out: &[f64], batch: usize, geo: &ConvGeometry) -> Vec<f64> {
    let [out_c, in_c, kh, kw] = weight.shape();
    let plane_in = geo.in_h * geo.in_w;
    let plane_out = geo.out_h * geo.out_w;
    let cols = geo.col_ranges();
    let wd = weight.data();
    let mut gin = vec![0.0; batch * in_c * plane_in];
    gin.par_chunks_mut(plane_in).enumerate().for_each(|(idx, chunk)| {
        let (b, ic) = (idx / in_c, idx % in_c);
        for oc in 0..out_c {
            let gplane = &grad_out[(b * out_c + oc) * plane_out..(b * out_c + oc + 1) * plane_out];
            for ky in 0..kh {
                for oy in 0..geo.out_h {
                    let Some(iy) = geo.input_row(oy, ky) else { continue };
                    let g_row = &gplane[oy * geo.out_w..(oy + 1) * geo.out_w];
                    let in_row = &mut chunk[iy * geo.in_w..(iy + 1) * geo.in_w];
                    for kx in 0..kw {
                        let (lo, hi) = cols[kx];
                        if lo >= hi {
                            continue;
                        }
                        let w = wd[((oc * in_c + ic) * kh + ky) * kw + kx];
                        let ix0 = lo * geo.stride + kx - geo.pad;
                        if geo.stride == 1 {
                            for (d, &g) in in_row[ix0..].iter_mut().zip(&g_row[lo..hi]) {
                                *d += w * g;
                            }
                        } else {
                            for (j, &g) in g_row[lo..hi].iter().enumerate() {
                                in_row[ix0 + j * geo.stride] += w * g;
                            }
                        }
                    }
                }
            }
        }
    });
    gin
}

pub(crate) fn conv2d_grad_weight(input: &Tensor, weight_shape: [usize; 4], grad_out: &[f64], geo: &ConvGeometry) -> Vec<f64> {
    let [out_c, in_c, kh, kw] = weight_shape;
    let batch = input.batch();
    let plane_out = geo.out_h * geo.out_w;
    let cols = geo.col_ranges();
    let mut gw = vec![0.0; out_c * in_c * kh * kw];
    gw.par_chunks_mut(kh * kw).enumerate().for_each(|(idx, chunk)| {
        let (oc, ic) = (idx / in_c, idx % in_c);
        for b in 0..batch {
            let plane = input.plane(b, ic);
            let gplane = &grad_out[(b * out_c + oc) * plane_out..(b * out_c + oc + 1) * plane_out];
            for ky in 0..kh {
                for oy in 0..geo.out_h {
                    let Some(iy) = geo.input_row(oy, ky) else { continue };
                    let in_row = &plane[iy * geo.in_w..(iy + 1) * geo.in_w];
                    let g_row = &gplane[oy * geo.out_w..(oy + 1) * geo.out_w];
                    for kx in 0..kw {
                        let (lo, hi) = cols[kx];
                        if lo >= hi {
                            continue;
                        }
                        let ix0 = lo * geo.stride + kx - geo.pad;
                        chunk[ky * kw + kx] += dot(&g_row[lo..hi], &in_row[ix0..], geo.stride);
                    }
                }
            }
        }
    });
    gw
}

pub(crate) fn conv2d_grad_bias(grad_out: &[f64], batch: usize, out_c: usize, plane_out: usize) -> Vec<f64> {
    (0..out_c)
        .map(|oc| {
            (0..batch)
                .map(|b| grad_out[(b * out_c + oc) * plane_out..(b * out_c + oc + 1) * plane_out].iter().sum::<f64>())
                .sum()
        })
        .collect()
}

/// Clamped bilinear lookup. Returns the value and its partial derivatives
/// with respect to the (unclamped) `y` and `x` coordinates.
#[inline]
pub(crate) fn bilinear(plane: &[f64], h: usize, w: usize, y: f64, x: f64) -> (f64, f64, f64) {
    let ymax = (h - 1) as f64;
    let xmax = (w - 1) as f64;
    let (cy, dy_on) = if y < 0.0 {
        (0.0, 0.0)
    } else if y > ymax {
        (ymax, 0.0)
    } else {
        (y, 1.0)
    };
    let (cx, dx_on) = if x < 0.0 {
        (0.0, 0.0)
    } else if x > xmax {
        (xmax, 0.0)
    } else {
        (x, 1.0)
    };
    let y0 = (cy.floor() as usize).min(h - 1);
    let x0 = (cx.floor() as usize).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let fy = cy - y0 as f64;
    let fx = cx - x0 as f64;
    let v00 = plane[y0 * w + x0];
    let v01 = plane[y0 * w + x1];
    let v10 = plane[y1 * w + x0];
    let v11 = plane[y1 * w + x1];
    let top = v00 + fx * (v01 - v00);
    let bottom = v10 + fx * (v11 - v10);
    let value = top + fy * (bottom - top);
    let d_y = (bottom - top) * dy_on;
    let d_x = ((1.0 - fy) * (v01 - v00) + fy * (v11 - v10)) * dx_on;
    (value, d_y, d_x)
}

/// Scatter `g` into the four neighbors used by [`bilinear`] at `(y, x)`.
#[inline]
fn bilinear_scatter(grad: &mut [f64], h: usize, w: usize, y: f64, x: f64, g: f64) {
    let cy = y.clamp(0.0, (h - 1) as f64);
    let cx = x.clamp(0.0, (w - 1) as f64);
    let y0 = (cy.floor() as usize).min(h - 1);
    let x0 = (cx.floor() as usize).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let fy = cy - y0 as f64;
    let fx = cx - x0 as f64;
    grad[y0 * w + x0] += g * (1.0 - fy) * (1.0 - fx);
    grad[y0 * w + x1] += g * (1.0 - fy) * fx;
    grad[y1 * w + x0] += g * fy * (1.0 - fx);
    grad[y1 * w + x1] += g * fy * fx;
}

pub(crate) fn grid_sample_forward(input: &Tensor, positions: &Tensor) -> Vec<f64> {
    let [n, _, h, w] = input.shape();
    let m = positions.channels() / 2;
    let hw = h * w;
    let mut out = vec![0.0; n * m * hw];
    out.par_chunks_mut(hw).enumerate().for_each(|(idx, chunk)| {
        let (b, j) = (idx / m.max(1), idx % m.max(1));
        let plane = input.plane(b, 0);
        let ys = positions.plane(b, 2 * j);
        let xs = positions.plane(b, 2 * j + 1);
        for p in 0..hw {
            chunk[p] = bilinear(plane, h, w, ys[p], xs[p]).0;
        }
    });
    out
}

/// Returns (grad wrt input, grad wrt positions).
pub(crate) fn grid_sample_backward(input: &Tensor, positions: &Tensor, grad_out: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let [n, _, h, w] = input.shape();
    let m = positions.channels() / 2;
    let hw = h * w;
    let mut g_in = vec![0.0; n * hw];
    g_in.par_chunks_mut(hw).enumerate().for_each(|(b, chunk)| {
        for j in 0..m {
            let ys = positions.plane(b, 2 * j);
            let xs = positions.plane(b, 2 * j + 1);
            let g = &grad_out[(b * m + j) * hw..(b * m + j + 1) * hw];
            for p in 0..hw {
                bilinear_scatter(chunk, h, w, ys[p], xs[p], g[p]);
            }
        }
    });
    let mut g_pos = vec![0.0; n * 2 * m * hw];
    g_pos.par_chunks_mut(2 * hw).enumerate().for_each(|(idx, chunk)| {
        let (b, j) = (idx / m.max(1), idx % m.max(1));
        let plane = input.plane(b, 0);
        let ys = positions.plane(b, 2 * j);
        let xs = positions.plane(b, 2 * j + 1);
        let g = &grad_out[(b * m + j) * hw..(b * m + j + 1) * hw];
        let (gy, gx) = chunk.split_at_mut(hw);
        for p in 0..hw {
            let (_, dy, dx) = bilinear(plane, h, w, ys[p], xs[p]);
            gy[p] = g[p] * dy;
            gx[p] = g[p] * dx;
        }
    });
    (g_in, g_pos)
}

/// Source taps for half-pixel-centered bilinear resampling along one axis.
fn resize_taps(input_len: usize, output_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = input_len as f64 / output_len as f64;
    (0..output_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input_len - 1);
            let i1 = (i0 + 1).min(input_len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub(crate) fn resize_forward(input: &Tensor, oh: usize, ow: usize) -> Vec<f64> {
    let [n, c, h, w] = input.shape();
    let rows = resize_taps(h, oh);
    let cols = resize_taps(w, ow);
    let mut out = vec![0.0; n * c * oh * ow];
    out.par_chunks_mut(oh * ow).enumerate().for_each(|(idx, chunk)| {
        let plane = input.plane(idx / c, idx % c);
        for (oy, &(y0, y1, ly)) in rows.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in cols.iter().enumerate() {
                let top = (1.0 - lx) * plane[y0 * w + x0] + lx * plane[y0 * w + x1];
                let bottom = (1.0 - lx) * plane[y1 * w + x0] + lx * plane[y1 * w + x1];
                chunk[oy * ow + ox] = (1.0 - ly) * top + ly * bottom;
            }
        }
    });
    out
}

pub(crate) fn resize_backward(shape: [usize; 4], oh: usize, ow: usize, grad_out: &[f64]) -> Vec<f64> {
    let [n, c, h, w] = shape;
    let rows = resize_taps(h, oh);
    let cols = resize_taps(w, ow);
    let mut gin = vec![0.0; n * c * h * w];
    gin.par_chunks_mut(h * w).enumerate().for_each(|(idx, chunk)| {
        let g = &grad_out[idx * oh * ow..(idx + 1) * oh * ow];
        for (oy, &(y0, y1, ly)) in rows.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in cols.iter().enumerate() {
                let v = g[oy * ow + ox];
                chunk[y0 * w + x0] += (1.0 - ly) * (1.0 - lx) * v;
                chunk[y0 * w + x1] += (1.0 - ly) * lx * v;
                chunk[y1 * w + x0] += ly * (1.0 - lx) * v;
                chunk[y1 * w + x1] += ly * lx * v;
            }
        }
    });
    gin
}
