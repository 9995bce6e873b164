//! Colorized depth previews.

use serde::{Deserialize, Serialize};

use crate::data::RgbImage;
use crate::depth::DepthMap;
use crate::error::{Error, Result};

/// Polynomial fit of a blue-to-red perceptual ramp ("turbo").
fn ramp(t: f64) -> [f64; 3] {
    let t = t.clamp(0.0, 1.0);
    let poly = |c: [f64; 6]| c.iter().rev().fold(0.0, |acc, &k| acc * t + k);
    let r = poly([0.13572138, 4.61539260, -42.66032258, 132.13108234, -152.94239396, 59.28637943]);
    let g = poly([0.09140261, 2.19418839, 4.84296658, -14.18503333, 4.27729857, 2.82956604]);
    let b = poly([0.10667330, 12.64194608, -60.58204836, 110.36276771, -89.90310912, 27.34824973]);
    [r, g, b].map(|v| v.clamp(0.0, 1.0))
}

/// The fixed 256-entry lookup table; index 255 is the warm end.
pub fn colormap() -> Vec<[u8; 3]> {
    (0..256).map(|i| ramp(i as f64 / 255.0).map(|v| (v * 255.0).round() as u8)).collect()
}

/// Range annotation written next to a preview.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VizSidecar {
    pub min_mm: f64,
    pub max_mm: f64,
    pub valid_count: usize,
    pub colormap: String,
    pub near: String,
}

/// Near depths warm, far depths cold, invalid pixels black.
pub fn colorize(map: &DepthMap) -> Result<(RgbImage, VizSidecar)> {
    let (lo, hi) = map.valid_range().ok_or_else(|| Error::EmptyInput("depth map has no valid pixels".into()))?;
    let lut = colormap();
    let span = (hi - lo).max(f64::MIN_POSITIVE);
    let mut data = Vec::with_capacity(map.len() * 3);
    for (&d, &v) in map.depths().iter().zip(map.valid_mask()) {
        if v {
            let idx = (((hi - d) / span) * 255.0).round().clamp(0.0, 255.0) as usize;
            data.extend(lut[idx].iter().map(|&c| c as f64 / 255.0));
        } else {
            data.extend([0.0; 3]);
        }
    }
    let img = RgbImage::new(map.height(), map.width(), data)?;
    let sidecar =
        VizSidecar { min_mm: lo, max_mm: hi, valid_count: map.valid_count(), colormap: "turbo-256".into(), near: "warm".into() };
    Ok((img, sidecar))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lut_runs_cold_to_warm() {
        let lut = colormap();
        assert_eq!(lut.len(), 256);
        let (cold, warm) = (lut[16], lut[240]);
        assert!(cold[2] > cold[0]);
        assert!(warm[0] > warm[2]);
    }

    #[test]
    fn nearest_pixel_is_warm() {
        let m = DepthMap::from_depths(1, 3, vec![1000.0, 0.0, 9000.0]).unwrap();
        let (img, side) = colorize(&m).unwrap();
        assert_eq!((side.min_mm, side.max_mm, side.valid_count), (1000.0, 9000.0, 2));
        let lut = colormap();
        let px = |x| [0, 1, 2].map(|c| (img.get(0, x, c) * 255.0).round() as u8);
        assert_eq!(px(0), lut[255]);
        assert_eq!(px(2), lut[0]);
        assert_eq!([0, 1, 2].map(|c| img.get(0, 1, c)), [0.0; 3]);
        assert!(colorize(&DepthMap::empty(2, 2)).is_err());
    }
}
