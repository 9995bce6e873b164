//! Target-dependent update unit.
//!
//! A head turns guidance features into a per-pixel `k x k` kernel: zero-sum
//! weights and fractional tap offsets with the center tap pinned at the
//! reference pixel. Applying the kernel to the current depth gives a
//! residual that is added back onto it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Graph handles of one head's two 1x1 convolutions.
#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    pub weight_conv: Var,
    pub weight_bias: Var,
    pub offset_conv: Var,
    pub offset_bias: Var,
}

/// Per-pixel kernel as graph nodes.
///
/// `weights` is `[N, k*k, H, W]`; `offsets` is `[N, 2*k*k, H, W]` with the
/// `(dy, dx)` pair of tap `j` at channels `2j` and `2j + 1`.
#[derive(Debug, Clone, Copy)]
pub struct KernelFieldVars {
    pub weights: Var,
    pub offsets: Var,
    pub k: usize,
}

/// Detached copy of a [`KernelFieldVars`].
#[derive(Debug, Clone)]
pub struct KernelField {
    pub weights: Tensor,
    pub offsets: Tensor,
    pub k: usize,
}

impl KernelField {
    pub fn from_graph(graph: &Graph, vars: &KernelFieldVars) -> Self {
        KernelField { weights: graph.value(vars.weights).clone(), offsets: graph.value(vars.offsets).clone(), k: vars.k }
    }
}

/// Row-major `(dy, dx)` displacements of the regular `k x k` grid.
pub fn tap_grid(k: usize) -> Vec<(f64, f64)> {
    let r = (k / 2) as f64;
    (0..k * k).map(|j| ((j / k) as f64 - r, (j % k) as f64 - r)).collect()
}

pub fn center_tap(k: usize) -> usize {
    k * k / 2
}

/// Absolute regular-grid sampling positions `[n, 2*k*k, h, w]`.
pub fn base_positions(n: usize, k: usize, h: usize, w: usize) -> Tensor {
    let taps = tap_grid(k);
    Tensor::from_fn([n, 2 * k * k, h, w], |[_, c, y, x]| {
        let (dy, dx) = taps[c / 2];
        if c % 2 == 0 {
            y as f64 + dy
        } else {
            x as f64 + dx
        }
    })
}

/// Predict weights and offsets from the concatenated guidance.
pub fn predict_kernel(graph: &mut Graph, cross_feat: Var, self_feat: Var, head: &HeadVars, k: usize) -> Result<KernelFieldVars> {
    let [n, _, h, w] = graph.shape(cross_feat);
    let [sn, _, sh, sw] = graph.shape(self_feat);
    if (n, h, w) != (sn, sh, sw) {
        return Err(Error::shape(
            "predict_kernel",
            format!("cross {:?} vs self {:?}", graph.shape(cross_feat), graph.shape(self_feat)),
        ));
    }
    let taps = k * k;
    let guide = graph.concat_channels(cross_feat, self_feat)?;

    let raw = graph.conv2d(guide, head.weight_conv, head.weight_bias, 1, 0)?;
    if graph.shape(raw)[1] != taps {
        return Err(Error::shape("predict_kernel", format!("weight head emits {} channels, need {taps}", graph.shape(raw)[1])));
    }
    let positive = graph.sigmoid(raw);
    let weights = graph.mean_subtract_channels(positive);

    let free = graph.conv2d(guide, head.offset_conv, head.offset_bias, 1, 0)?;
    if graph.shape(free)[1] != 2 * (taps - 1) {
        return Err(Error::shape(
            "predict_kernel",
            format!("offset head emits {} channels, need {}", graph.shape(free)[1], 2 * (taps - 1)),
        ));
    }
    let split = 2 * center_tap(k);
    let before = graph.slice_channels(free, 0, split)?;
    let after = graph.slice_channels(free, split, 2 * (taps - 1) - split)?;
    let center = graph.constant(Tensor::zeros([n, 2, h, w]));
    let head_part = graph.concat_channels(before, center)?;
    let offsets = graph.concat_channels(head_part, after)?;
    Ok(KernelFieldVars { weights, offsets, k })
}

/// `target + sum_j weight_j * target(p + g_j + offset_j)` with clamped bilinear sampling.
pub fn apply_update(graph: &mut Graph, target: Var, kf: &KernelFieldVars) -> Result<Var> {
    let [n, c, h, w] = graph.shape(target);
    let taps = kf.k * kf.k;
    if c != 1 {
        return Err(Error::shape("apply_update", format!("target must be single-channel, has {c}")));
    }
    if graph.shape(kf.weights) != [n, taps, h, w] || graph.shape(kf.offsets) != [n, 2 * taps, h, w] {
        return Err(Error::shape(
            "apply_update",
            format!("kernel {:?}/{:?} vs target {:?}", graph.shape(kf.weights), graph.shape(kf.offsets), graph.shape(target)),
        ));
    }
    let base = graph.constant(base_positions(n, kf.k, h, w));
    let positions = graph.add(base, kf.offsets)?;
    let samples = graph.grid_sample_bilinear(target, positions)?;
    let weighted = graph.mul(kf.weights, samples)?;
    let residual = graph.sum_channels(weighted);
    graph.add(target, residual)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScopeStats {
    pub mean_dist_px: f64,
    pub max_dist_px: f64,
}

/// Distance of every off-center effective tap from its reference pixel,
/// aggregated per image.
pub fn kernel_scope_stats(kf: &KernelField) -> Vec<ScopeStats> {
    let [n, _, h, w] = kf.offsets.shape();
    let taps = tap_grid(kf.k);
    let center = center_tap(kf.k);
    (0..n)
        .map(|b| {
            let mut sum = 0.0;
            let mut max = 0.0f64;
            let mut count = 0usize;
            for (j, &(gy, gx)) in taps.iter().enumerate() {
                if j == center {
                    continue;
                }
                let dy = kf.offsets.plane(b, 2 * j);
                let dx = kf.offsets.plane(b, 2 * j + 1);
                for p in 0..h * w {
                    let d = (gy + dy[p]).hypot(gx + dx[p]);
                    sum += d;
                    max = max.max(d);
                    count += 1;
                }
            }
            ScopeStats { mean_dist_px: if count > 0 { sum / count as f64 } else { 0.0 }, max_dist_px: max }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn zero_head(g: &mut Graph, in_c: usize, k: usize) -> HeadVars {
        let taps = k * k;
        HeadVars {
            weight_conv: g.leaf(Tensor::zeros([taps, in_c, 1, 1]).with_grad()),
            weight_bias: g.leaf(Tensor::zeros([taps, 1, 1, 1]).with_grad()),
            offset_conv: g.leaf(Tensor::zeros([2 * (taps - 1), in_c, 1, 1]).with_grad()),
            offset_bias: g.leaf(Tensor::zeros([2 * (taps - 1), 1, 1, 1]).with_grad()),
        }
    }

    #[test]
    fn tap_grid_is_row_major_with_center_at_four() {
        let taps = tap_grid(3);
        assert_eq!(taps[0], (-1.0, -1.0));
        assert_eq!(taps[1], (-1.0, 0.0));
        assert_eq!(taps[4], (0.0, 0.0));
        assert_eq!(taps[8], (1.0, 1.0));
        assert_eq!(center_tap(3), 4);
    }

    #[test]
    fn zero_network_gives_zero_kernel_and_identity_update() {
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cross = g.constant(Tensor::zeros([1, 4, 5, 6]));
        let selff = g.constant(Tensor::zeros([1, 2, 5, 6]));
        let head = zero_head(&mut g, 6, 3);
        let kf = predict_kernel(&mut g, cross, selff, &head, 3).unwrap();
        assert!(g.value(kf.weights).data().iter().all(|&v| v == 0.0));
        assert!(g.value(kf.offsets).data().iter().all(|&v| v == 0.0));
        let target = g.constant(Tensor::uniform([1, 1, 5, 6], 1.0, 9.0, &mut rng));
        let out = apply_update(&mut g, target, &kf).unwrap();
        assert_eq!(g.value(out).data(), g.value(target).data());
    }

    #[test]
    fn mismatched_guidance_rejected() {
        let mut g = Graph::new();
        let cross = g.constant(Tensor::zeros([1, 4, 5, 6]));
        let selff = g.constant(Tensor::zeros([1, 2, 5, 5]));
        let head = zero_head(&mut g, 6, 3);
        assert!(predict_kernel(&mut g, cross, selff, &head, 3).is_err());
    }

    #[test]
    fn constant_target_is_a_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut g = Graph::new();
        let raw = g.constant(Tensor::uniform([1, 9, 4, 4], -3.0, 3.0, &mut rng));
        let s = g.sigmoid(raw);
        let weights = g.mean_subtract_channels(s);
        let offsets = g.constant(Tensor::zeros([1, 18, 4, 4]));
        let target = g.constant(Tensor::full([1, 1, 4, 4], 4321.5));
        let out = apply_update(&mut g, target, &KernelFieldVars { weights, offsets, k: 3 }).unwrap();
        assert!(g.value(out).data().iter().all(|&v| (v - 4321.5).abs() < 1e-10));
    }

    #[test]
    fn scope_of_regular_grid() {
        let kf = KernelField { weights: Tensor::zeros([1, 9, 3, 3]), offsets: Tensor::zeros([1, 18, 3, 3]), k: 3 };
        let s = kernel_scope_stats(&kf)[0];
        let expect = (4.0 + 4.0 * 2f64.sqrt()) / 8.0;
        assert!((s.mean_dist_px - expect).abs() < 1e-12);
        assert!((s.max_dist_px - 2f64.sqrt()).abs() < 1e-12);
        assert!((expect - 1.2071).abs() < 1e-4);
    }

    #[test]
    fn scope_with_shifted_taps_matches_recomputation() {
        // every off-center tap shifted by (0, +2)
        let offsets = Tensor::from_fn([1, 18, 2, 2], |[_, c, _, _]| if c % 2 == 1 && c / 2 != 4 { 2.0 } else { 0.0 });
        let kf = KernelField { weights: Tensor::zeros([1, 9, 2, 2]), offsets, k: 3 };
        let s = kernel_scope_stats(&kf)[0];
        let dists: Vec<f64> = tap_grid(3)
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != 4)
            .map(|(_, &(gy, gx))| (gy * gy + (gx + 2.0) * (gx + 2.0)).sqrt())
            .collect();
        let mean = dists.iter().sum::<f64>() / 8.0;
        let max = dists.iter().cloned().fold(0.0, f64::max);
        assert!((s.mean_dist_px - mean).abs() < 1e-12);
        assert!((s.max_dist_px - max).abs() < 1e-12);
        assert!(s.mean_dist_px > 1.2072);
    }

    #[test]
    fn single_pixel_scope_uses_offsets_alone() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut offsets = Tensor::zeros([1, 18, 1, 1]);
        for (c, v) in offsets.data_mut().iter_mut().enumerate() {
            if c / 2 != 4 {
                *v = rng.gen_range(-1.0..1.0);
            }
        }
        let kf = KernelField { weights: Tensor::zeros([1, 9, 1, 1]), offsets: offsets.clone(), k: 3 };
        let s = kernel_scope_stats(&kf)[0];
        let taps = tap_grid(3);
        let d: Vec<f64> = (0..9)
            .filter(|&j| j != 4)
            .map(|j| (taps[j].0 + offsets.data()[2 * j]).hypot(taps[j].1 + offsets.data()[2 * j + 1]))
            .collect();
        assert!((s.mean_dist_px - d.iter().sum::<f64>() / 8.0).abs() < 1e-12);
    }
}
