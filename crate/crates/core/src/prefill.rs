//! Morphological densification of sparse depth.
//!
//! The pipeline runs on inverted depth (`max_depth - d`) so that every
//! max-filter prefers the nearer surface.

use crate::depth::DepthMap;
use crate::error::{Error, Result};

/// Odd-sized boolean structuring element.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel {
    size: usize,
    mask: Vec<bool>,
}

impl Kernel {
    pub fn full(size: usize) -> Result<Self> {
        check_odd(size)?;
        Ok(Kernel { size, mask: vec![true; size * size] })
    }

    /// Pixels within L1 distance `size / 2` of the center.
    pub fn diamond(size: usize) -> Result<Self> {
        check_odd(size)?;
        let r = (size / 2) as isize;
        let mask = (0..size * size)
            .map(|i| {
                let (dy, dx) = ((i / size) as isize - r, (i % size) as isize - r);
                dy.abs() + dx.abs() <= r
            })
            .collect();
        Ok(Kernel { size, mask })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    fn offsets(&self) -> Vec<(isize, isize)> {
        let r = (self.size / 2) as isize;
        (0..self.size * self.size)
            .filter(|&i| self.mask[i])
            .map(|i| ((i / self.size) as isize - r, (i % self.size) as isize - r))
            .collect()
    }
}

fn check_odd(size: usize) -> Result<()> {
    if size % 2 == 0 {
        return Err(Error::Kernel(format!("kernel size must be odd, got {size}")));
    }
    Ok(())
}

/// Valid values under `offsets` centered at `(y, x)`.
fn neighborhood<'a>(map: &'a DepthMap, offsets: &'a [(isize, isize)], y: usize, x: usize) -> impl Iterator<Item = f64> + 'a {
    let (h, w) = (map.height() as isize, map.width() as isize);
    offsets.iter().filter_map(move |&(dy, dx)| {
        let (yy, xx) = (y as isize + dy, x as isize + dx);
        if yy < 0 || xx < 0 || yy >= h || xx >= w {
            return None;
        }
        map.get(yy as usize, xx as usize)
    })
}

fn rank_filter(map: &DepthMap, kernel: &Kernel, only_invalid: bool, pick: impl Fn(f64, f64) -> f64) -> DepthMap {
    let offsets = kernel.offsets();
    let mut out = map.clone();
    for y in 0..map.height() {
        for x in 0..map.width() {
            if only_invalid && map.get(y, x).is_some() {
                continue;
            }
            if let Some(v) = neighborhood(map, &offsets, y, x).reduce(&pick) {
                out.set(y, x, v);
            }
        }
    }
    out
}

/// Grayscale dilation over the valid set; a pixel becomes valid when any
/// valid pixel lies under the kernel.
pub fn dilate(map: &DepthMap, kernel: &Kernel) -> DepthMap {
    rank_filter(map, kernel, false, f64::max)
}

/// Grayscale erosion over the valid set.
pub fn erode(map: &DepthMap, kernel: &Kernel) -> DepthMap {
    rank_filter(map, kernel, false, f64::min)
}

pub fn close(map: &DepthMap, kernel: &Kernel) -> DepthMap {
    erode(&dilate(map, kernel), kernel)
}

/// Dilation that only writes into currently invalid pixels.
pub fn fill_invalid(map: &DepthMap, kernel: &Kernel) -> DepthMap {
    rank_filter(map, kernel, true, f64::max)
}

/// Median over valid pixels in a `size x size` window. Windows with an even
/// count take the lower median so the output is always an input value.
pub fn median_filter(map: &DepthMap, size: usize) -> Result<DepthMap> {
    let everywhere = vec![true; map.len()];
    median_filter_where(map, size, &everywhere)
}

/// [`median_filter`] restricted to pixels where `apply` is set.
pub fn median_filter_where(map: &DepthMap, size: usize, apply: &[bool]) -> Result<DepthMap> {
    let kernel = Kernel::full(size)?;
    let offsets = kernel.offsets();
    let mut out = map.clone();
    let mut window = Vec::with_capacity(offsets.len());
    for y in 0..map.height() {
        for x in 0..map.width() {
            if !apply[y * map.width() + x] {
                continue;
            }
            window.clear();
            window.extend(neighborhood(map, &offsets, y, x));
            if window.is_empty() {
                continue;
            }
            window.sort_by(f64::total_cmp);
            out.set(y, x, window[(window.len() - 1) / 2]);
        }
    }
    Ok(out)
}

fn invert(map: &DepthMap, max_depth_mm: f64) -> DepthMap {
    let mut out = map.clone();
    for y in 0..map.height() {
        for x in 0..map.width() {
            if let Some(d) = map.get(y, x) {
                out.set(y, x, max_depth_mm - d);
            }
        }
    }
    out
}

/// Densify a sparse map into a fully valid one.
///
/// Dilate with a 5x5 diamond, close with a 5x5 square, fill remaining holes
/// from a 7x7 window, then from 31x31 windows until nothing is left, and
/// median-filter the filled pixels. Input measurements are kept bit-exact.
pub fn prefill(sparse: &DepthMap, max_depth_mm: f64) -> Result<DepthMap> {
    let Some((lo, hi)) = sparse.valid_range() else {
        return Err(Error::EmptyInput("sparse depth map has no valid pixels".into()));
    };
    let mut work = invert(sparse, max_depth_mm);
    work = dilate(&work, &Kernel::diamond(5)?);
    work = close(&work, &Kernel::full(5)?);
    work = fill_invalid(&work, &Kernel::full(7)?);
    let wide = Kernel::full(31)?;
    while !work.is_dense() {
        work = fill_invalid(&work, &wide);
    }
    let filled: Vec<bool> = sparse.valid_mask().iter().map(|v| !v).collect();
    work = median_filter_where(&work, 5, &filled)?;

    let mut out = invert(&work, max_depth_mm);
    for y in 0..sparse.height() {
        for x in 0..sparse.width() {
            match sparse.get(y, x) {
                Some(d) => out.set(y, x, d),
                // undo rounding of the double inversion
                None => out.set(y, x, out.get(y, x).expect("dense").clamp(lo, hi)),
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seeds(h: usize, w: usize, pts: &[(usize, usize, f64)]) -> DepthMap {
        let mut m = DepthMap::empty(h, w);
        for &(y, x, d) in pts {
            m.set(y, x, d);
        }
        m
    }

    #[test]
    fn even_kernels_rejected() {
        assert!(matches!(Kernel::full(4), Err(Error::Kernel(_))));
        assert!(Kernel::diamond(6).is_err());
        assert!(median_filter(&DepthMap::empty(3, 3), 2).is_err());
    }

    #[test]
    fn diamond_shape() {
        let k = Kernel::diamond(5).unwrap();
        assert_eq!(k.offsets().len(), 13);
    }

    #[test]
    fn dilate_constant_dense_is_identity() {
        let m = DepthMap::from_depths(4, 5, vec![7.5; 20]).unwrap();
        assert_eq!(dilate(&m, &Kernel::full(3).unwrap()), m);
    }

    #[test]
    fn dilate_single_seed_makes_block() {
        let m = seeds(7, 7, &[(3, 3, 42.0)]);
        let d = dilate(&m, &Kernel::full(3).unwrap());
        assert_eq!(d.valid_count(), 9);
        for y in 2..=4 {
            for x in 2..=4 {
                assert_eq!(d.get(y, x), Some(42.0));
            }
        }
    }

    #[test]
    fn close_is_erode_of_dilate() {
        let m = seeds(9, 9, &[(1, 1, 3.0), (4, 6, 9.0), (7, 2, 5.0), (5, 5, 1.0)]);
        let k = Kernel::full(5).unwrap();
        // composition oracle written directly against the primitives' definition
        let mut dil = DepthMap::empty(9, 9);
        for y in 0..9isize {
            for x in 0..9isize {
                let mut best: Option<f64> = None;
                for dy in -2..=2 {
                    for dx in -2..=2 {
                        let (yy, xx) = (y + dy, x + dx);
                        if (0..9).contains(&yy) && (0..9).contains(&xx) {
                            if let Some(v) = m.get(yy as usize, xx as usize) {
                                best = Some(best.map_or(v, |b: f64| b.max(v)));
                            }
                        }
                    }
                }
                if let Some(b) = best {
                    dil.set(y as usize, x as usize, b);
                }
            }
        }
        assert_eq!(dil, dilate(&m, &k));
        assert_eq!(close(&m, &k), erode(&dil, &k));
    }

    #[test]
    fn prefill_dense_input_unchanged() {
        let depths: Vec<f64> = (0..64).map(|i| 1000.0 + 37.0 * i as f64).collect();
        let m = DepthMap::from_depths(8, 8, depths).unwrap();
        assert_eq!(prefill(&m, 100_000.0).unwrap(), m);
    }

    #[test]
    fn prefill_single_center_seed_floods() {
        let m = seeds(16, 16, &[(8, 8, 5000.0)]);
        let out = prefill(&m, 100_000.0).unwrap();
        assert!(out.is_dense());
        assert!(out.depths().iter().all(|&d| d == 5000.0));
    }

    #[test]
    fn prefill_two_corner_seeds() {
        let m = seeds(16, 16, &[(0, 0, 1000.0), (15, 15, 9000.0)]);
        let out = prefill(&m, 100_000.0).unwrap();
        assert!(out.is_dense());
        assert!(out.depths().iter().all(|&d| (1000.0..=9000.0).contains(&d)));
        assert_eq!(out.get(0, 0), Some(1000.0));
        assert_eq!(out.get(15, 15), Some(9000.0));
    }

    #[test]
    fn prefill_empty_input_errors() {
        assert!(matches!(prefill(&DepthMap::empty(4, 4), 1e5), Err(Error::EmptyInput(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn prefill_total_preserving_and_bounded(
            pts in prop::collection::vec((0usize..20, 0usize..24, 500.0f64..80_000.0), 1..40)
        ) {
            let m = seeds(20, 24, &pts);
            let (lo, hi) = m.valid_range().unwrap();
            let out = prefill(&m, 100_000.0).unwrap();
            prop_assert!(out.is_dense());
            for y in 0..20 {
                for x in 0..24 {
                    let d = out.get(y, x).unwrap();
                    prop_assert!(d >= lo && d <= hi);
                    if let Some(s) = m.get(y, x) {
                        prop_assert_eq!(d.to_bits(), s.to_bits());
                    }
                }
            }
            prop_assert_eq!(prefill(&out, 100_000.0).unwrap(), out);
        }
    }
}
