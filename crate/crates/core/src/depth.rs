use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Single-channel depth image in millimeters. Invalid pixels hold 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthMap {
    height: usize,
    width: usize,
    depth: Vec<f64>,
    valid: Vec<bool>,
}

impl DepthMap {
    /// All-invalid map.
    pub fn empty(height: usize, width: usize) -> Self {
        DepthMap { height, width, depth: vec![0.0; height * width], valid: vec![false; height * width] }
    }

    /// Pixels with a finite positive depth are valid, everything else invalid.
    pub fn from_depths(height: usize, width: usize, depths: Vec<f64>) -> Result<Self> {
        if depths.len() != height * width {
            return Err(Error::shape("depth map", format!("{height}x{width} needs {} values, got {}", height * width, depths.len())));
        }
        let valid: Vec<bool> = depths.iter().map(|d| d.is_finite() && *d > 0.0).collect();
        let depth = depths.iter().zip(&valid).map(|(&d, &v)| if v { d } else { 0.0 }).collect();
        Ok(DepthMap { height, width, depth, valid })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.depth.len()
    }

    pub fn is_empty(&self) -> bool {
        self.depth.is_empty()
    }

    pub fn depths(&self) -> &[f64] {
        &self.depth
    }

    pub fn valid_mask(&self) -> &[bool] {
        &self.valid
    }

    pub fn get(&self, y: usize, x: usize) -> Option<f64> {
        let i = y * self.width + x;
        self.valid[i].then_some(self.depth[i])
    }

    pub fn set(&mut self, y: usize, x: usize, depth: f64) {
        let i = y * self.width + x;
        self.depth[i] = depth;
        self.valid[i] = true;
    }

    pub fn invalidate(&mut self, y: usize, x: usize) {
        let i = y * self.width + x;
        self.depth[i] = 0.0;
        self.valid[i] = false;
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn is_dense(&self) -> bool {
        self.valid.iter().all(|&v| v)
    }

    /// `(min, max)` over valid pixels.
    pub fn valid_range(&self) -> Option<(f64, f64)> {
        self.depth.iter().zip(&self.valid).filter(|(_, &v)| v).map(|(&d, _)| d).fold(None, |acc, d| match acc {
            None => Some((d, d)),
            Some((lo, hi)) => Some((lo.min(d), hi.max(d))),
        })
    }

    pub fn flip_horizontal(&self) -> DepthMap {
        let mut out = self.clone();
        for (d, v) in out.depth.chunks_mut(self.width).zip(out.valid.chunks_mut(self.width)) {
            d.reverse();
            v.reverse();
        }
        out
    }

    /// `[1, 1, H, W]` tensor of `depth * scale`, invalid pixels 0.
    pub fn to_tensor(&self, scale: f64) -> Tensor {
        Tensor::new([1, 1, self.height, self.width], self.depth.iter().map(|d| d * scale).collect())
            .expect("depth map extents are consistent")
    }

    /// Dense map from batch item `n` of a single-channel tensor.
    pub fn from_tensor(t: &Tensor, n: usize) -> Result<DepthMap> {
        if t.channels() != 1 {
            return Err(Error::shape("depth map", format!("tensor has {} channels", t.channels())));
        }
        DepthMap::from_depths(t.height(), t.width(), t.plane(n, 0).to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn invalid_pixels_hold_zero() {
        let m = DepthMap::from_depths(1, 4, vec![5.0, 0.0, -3.0, f64::NAN]).unwrap();
        assert_eq!(m.depths(), &[5.0, 0.0, 0.0, 0.0]);
        assert_eq!(m.valid_count(), 1);
        assert_eq!(m.valid_range(), Some((5.0, 5.0)));
    }

    #[test]
    fn flip_mirrors_rows() {
        let m = DepthMap::from_depths(2, 3, vec![1., 2., 0., 4., 5., 6.]).unwrap();
        let f = m.flip_horizontal();
        assert_eq!(f.depths(), &[0., 2., 1., 6., 5., 4.]);
        assert_eq!(f.valid_mask(), &[false, true, true, true, true, true]);
        assert_eq!(f.flip_horizontal(), m);
    }
}
