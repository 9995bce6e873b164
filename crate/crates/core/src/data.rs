//! Depth/RGB file I/O, synthetic scenes and sparsification.

use std::fmt;
use std::io::Cursor;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::write_atomic;
use crate::depth::DepthMap;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Millimeters per unit of a 16-bit depth PNG pixel.
pub const MM_PER_UNIT: f64 = 1000.0 / 256.0;

/// H x W x 3 image with channel values in `[0, 1]`, stored interleaved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RgbImage {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::shape("rgb image", format!("{height}x{width}x3 needs {} values, got {}", height * width * 3, data.len())));
        }
        Ok(RgbImage { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * 3 + c]
    }

    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * 3 + c] = v;
    }

    /// `[1, 3, H, W]` planar tensor.
    pub fn to_tensor(&self) -> Tensor {
        let (h, w) = (self.height, self.width);
        Tensor::from_fn([1, 3, h, w], |[_, c, y, x]| self.get(y, x, c))
    }

    pub fn flip_horizontal(&self) -> RgbImage {
        let mut out = self.clone();
        for row in out.data.chunks_mut(self.width * 3) {
            let flipped: Vec<f64> = row.chunks(3).rev().flatten().copied().collect();
            row.copy_from_slice(&flipped);
        }
        out
    }
}

/// One training/evaluation example.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthSample {
    pub rgb: Option<RgbImage>,
    pub sparse: DepthMap,
    pub gt: DepthMap,
}

impl DepthSample {
    pub fn height(&self) -> usize {
        self.gt.height()
    }

    pub fn width(&self) -> usize {
        self.gt.width()
    }
}

fn decode_err(path: &Path, e: impl fmt::Display) -> Error {
    Error::format(path, e.to_string())
}

fn read_png(path: &Path) -> Result<(png::OutputInfo, Vec<u8>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let decoder = png::Decoder::new(Cursor::new(bytes));
    let mut reader = decoder.read_info().map_err(|e| decode_err(path, e))?;
    let size = reader.output_buffer_size().ok_or_else(|| Error::format(path, "image too large"))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| decode_err(path, e))?;
    buf.truncate(info.buffer_size());
    Ok((info, buf))
}

fn encode_png(width: usize, height: usize, color: png::ColorType, depth: png::BitDepth, data: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    let mut encoder = png::Encoder::new(&mut out, width as u32, height as u32);
    encoder.set_color(color);
    encoder.set_depth(depth);
    let mut writer = encoder.write_header().map_err(|e| Error::InvalidArgument(e.to_string()))?;
    writer.write_image_data(data).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    writer.finish().map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Ok(out)
}

/// Quantize millimeters to a PNG unit; valid depths never map to 0.
pub fn depth_to_units(depth_mm: f64) -> u16 {
    (depth_mm / MM_PER_UNIT).round().clamp(1.0, 65535.0) as u16
}

/// Read a 16-bit single-channel depth PNG; pixel 0 is invalid.
pub fn read_depth_png(path: &Path) -> Result<DepthMap> {
    let (info, buf) = read_png(path)?;
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Sixteen {
        return Err(Error::format(
            path,
            format!("expected 16-bit grayscale depth, found {:?} {:?}", info.color_type, info.bit_depth),
        ));
    }
    let depths = buf.chunks_exact(2).map(|b| u16::from_be_bytes([b[0], b[1]]) as f64 * MM_PER_UNIT).collect();
    DepthMap::from_depths(info.height as usize, info.width as usize, depths)
}

pub fn encode_depth_png(map: &DepthMap) -> Result<Vec<u8>> {
    let mut data = Vec::with_capacity(map.len() * 2);
    for (&d, &v) in map.depths().iter().zip(map.valid_mask()) {
        let unit = if v { depth_to_units(d) } else { 0 };
        data.extend_from_slice(&unit.to_be_bytes());
    }
    encode_png(map.width(), map.height(), png::ColorType::Grayscale, png::BitDepth::Sixteen, &data)
}

pub fn write_depth_png(map: &DepthMap, path: &Path) -> Result<()> {
    write_atomic(path, &encode_depth_png(map)?)
}

/// Read an 8-bit RGB, RGBA or grayscale PNG.
pub fn read_rgb_png(path: &Path) -> Result<RgbImage> {
    let (info, buf) = read_png(path)?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::format(path, format!("expected 8-bit rgb, found {:?}", info.bit_depth)));
    }
    let stride = match info.color_type {
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Grayscale => 1,
        other => return Err(Error::format(path, format!("unsupported color type {other:?}"))),
    };
    let data = buf
        .chunks_exact(stride)
        .flat_map(|px| {
            let rgb = if stride == 1 { [px[0]; 3] } else { [px[0], px[1], px[2]] };
            rgb.map(|v| v as f64 / 255.0)
        })
        .collect();
    RgbImage::new(info.height as usize, info.width as usize, data)
}

pub fn encode_rgb_png(img: &RgbImage) -> Result<Vec<u8>> {
    let data: Vec<u8> = img.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    encode_png(img.width, img.height, png::ColorType::Rgb, png::BitDepth::Eight, &data)
}

pub fn write_rgb_png(img: &RgbImage, path: &Path) -> Result<()> {
    write_atomic(path, &encode_rgb_png(img)?)
}

/// How sparse inputs are drawn from ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum Sparsity {
    Random { n: usize },
    Lines { keep_every: usize, jitter: usize },
}

impl Sparsity {
    pub fn apply(&self, gt: &DepthMap, seed: u64) -> Result<DepthMap> {
        match *self {
            Sparsity::Random { n } => sparsify_random(gt, n, seed),
            Sparsity::Lines { keep_every, jitter } => sparsify_lines(gt, keep_every, jitter, seed),
        }
    }
}

impl FromStr for Sparsity {
    type Err = Error;

    /// `random:N`, `lines:K` or `lines:K:JITTER`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("bad sparsity {s:?}; expected random:N or lines:K[:JITTER]"));
        let parts: Vec<&str> = s.split(':').collect();
        let num = |p: &str| p.parse::<usize>().map_err(|_| bad());
        match parts.as_slice() {
            ["random", n] => Ok(Sparsity::Random { n: num(n)? }),
            ["lines", k] => Ok(Sparsity::Lines { keep_every: num(k)?, jitter: 0 }),
            ["lines", k, j] => Ok(Sparsity::Lines { keep_every: num(k)?, jitter: num(j)? }),
            _ => Err(bad()),
        }
    }
}

impl fmt::Display for Sparsity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Sparsity::Random { n } => write!(f, "random:{n}"),
            Sparsity::Lines { keep_every, jitter: 0 } => write!(f, "lines:{keep_every}"),
            Sparsity::Lines { keep_every, jitter } => write!(f, "lines:{keep_every}:{jitter}"),
        }
    }
}

/// Keep `n` valid pixels chosen uniformly without replacement.
pub fn sparsify_random(gt: &DepthMap, n: usize, seed: u64) -> Result<DepthMap> {
    let valid: Vec<usize> = (0..gt.len()).filter(|&i| gt.valid_mask()[i]).collect();
    if n > valid.len() {
        return Err(Error::InvalidArgument(format!("cannot keep {n} of {} valid pixels", valid.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = DepthMap::empty(gt.height(), gt.width());
    for k in sample(&mut rng, valid.len(), n) {
        let i = valid[k];
        out.set(i / gt.width(), i % gt.width(), gt.depths()[i]);
    }
    Ok(out)
}

/// Keep rows `r` with `(r + j_r) % keep_every == 0`, `j_r` drawn from `0..=jitter`.
pub fn sparsify_lines(gt: &DepthMap, keep_every: usize, jitter: usize, seed: u64) -> Result<DepthMap> {
    if keep_every == 0 {
        return Err(Error::InvalidArgument("keep_every must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = DepthMap::empty(gt.height(), gt.width());
    for y in 0..gt.height() {
        let j = rng.gen_range(0..=jitter);
        if (y + j) % keep_every != 0 {
            continue;
        }
        for x in 0..gt.width() {
            if let Some(d) = gt.get(y, x) {
                out.set(y, x, d);
            }
        }
    }
    Ok(out)
}

/// Settings for [`synth_scene`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub max_depth_mm: f64,
    pub sparsity: Sparsity,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig { max_depth_mm: 10_000.0, sparsity: Sparsity::Random { n: 500 } }
    }
}

/// Which surface a synthetic pixel belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Label {
    Plane(u8),
    Occluder(u8),
}

pub const MIN_DEPTH_MM: f64 = 500.0;
const LIGHT: [f64; 3] = [0.3, -0.4, 0.866];

struct Plane {
    site: (f64, f64),
    base: f64,
    grad: (f64, f64),
    albedo: [f64; 3],
}

impl Plane {
    fn depth(&self, y: f64, x: f64) -> f64 {
        self.base + self.grad.0 * (y - self.site.0) + self.grad.1 * (x - self.site.1)
    }
}

fn shade(normal: [f64; 3]) -> f64 {
    let ln = LIGHT.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nn = normal.iter().map(|v| v * v).sum::<f64>().sqrt();
    let dot: f64 = normal.iter().zip(LIGHT).map(|(a, b)| a * b).sum::<f64>() / (ln * nn);
    0.35 + 0.65 * dot.max(0.0)
}

/// Render rgb, dense depth and per-pixel surface labels for `seed`.
pub fn render_scene(seed: u64, h: usize, w: usize, max_depth_mm: f64) -> (RgbImage, DepthMap, Vec<Label>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = h.max(w) as f64;
    let floor = (0.3 * max_depth_mm).max(MIN_DEPTH_MM);
    let n_planes = rng.gen_range(3..=6);
    let mut planes: Vec<Plane> = Vec::with_capacity(n_planes);
    for _ in 0..n_planes {
        let site = (rng.gen_range(0.0..h as f64), rng.gen_range(0.0..w as f64));
        let base = rng.gen_range(0.35..0.8) * max_depth_mm;
        let grad = (rng.gen_range(-0.4..0.4) * max_depth_mm / dim, rng.gen_range(-0.4..0.4) * max_depth_mm / dim);
        // keep every pair of regions apart in color so depth edges show in rgb
        let albedo = loop {
            let a = [0; 3].map(|_| rng.gen_range(0.05..0.45));
            let distinct = planes.iter().all(|p| (0..3).any(|c| (p.albedo[c] - a[c]).abs() >= 0.15));
            if distinct {
                break a;
            }
        };
        planes.push(Plane { site, base, grad, albedo });
    }

    let mut depth = vec![0.0; h * w];
    let mut labels = vec![Label::Plane(0); h * w];
    for y in 0..h {
        for x in 0..w {
            let (yf, xf) = (y as f64, x as f64);
            let dist = |p: &Plane| (p.site.0 - yf).powi(2) + (p.site.1 - xf).powi(2);
            let (idx, plane) = planes
                .iter()
                .enumerate()
                .min_by(|a, b| dist(a.1).total_cmp(&dist(b.1)))
                .expect("at least three planes");
            depth[y * w + x] = plane.depth(yf, xf).clamp(floor, max_depth_mm);
            labels[y * w + x] = Label::Plane(idx as u8);
        }
    }

    // each occluder sits in front of everything already under it
    let n_occ = rng.gen_range(1..=3);
    let mut occ_colors = Vec::new();
    for i in 0..n_occ {
        let (cy, cx) = (rng.gen_range(0.0..h as f64), rng.gen_range(0.0..w as f64));
        let (ry, rx) = (rng.gen_range(0.1..0.25) * h as f64, rng.gen_range(0.1..0.25) * w as f64);
        let ellipse = rng.gen_bool(0.5);
        let factor = rng.gen_range(0.6..0.8);
        let mut color = [0; 3].map(|_| rng.gen_range(0.05..0.3));
        color[i % 3] = rng.gen_range(0.8..1.0);
        occ_colors.push(color);
        let inside = |y: usize, x: usize| {
            let (dy, dx) = ((y as f64 - cy) / ry, (x as f64 - cx) / rx);
            if ellipse { dy * dy + dx * dx <= 1.0 } else { dy.abs() <= 1.0 && dx.abs() <= 1.0 }
        };
        let covered: Vec<usize> = (0..h * w).filter(|&p| inside(p / w, p % w)).collect();
        let Some(min_under) = covered.iter().map(|&p| depth[p]).reduce(f64::min) else { continue };
        let d = (factor * min_under).max(MIN_DEPTH_MM);
        for p in covered {
            depth[p] = d;
            labels[p] = Label::Occluder(i as u8);
        }
    }

    let occluder_shade = shade([0.0, 0.0, 1.0]);
    let mut rgb = RgbImage { height: h, width: w, data: vec![0.0; h * w * 3] };
    for y in 0..h {
        for x in 0..w {
            let (albedo, s) = match labels[y * w + x] {
                Label::Plane(i) => {
                    let p = &planes[i as usize];
                    let scale = max_depth_mm / dim;
                    (p.albedo, shade([-p.grad.1 / scale, -p.grad.0 / scale, 1.0]))
                }
                Label::Occluder(i) => (occ_colors[i as usize], occluder_shade),
            };
            for c in 0..3 {
                let noise = rng.gen_range(-0.02..0.02);
                rgb.set(y, x, c, (albedo[c] * s + noise).clamp(0.0, 1.0));
            }
        }
    }
    let depth = DepthMap::from_depths(h, w, depth).expect("extents match");
    (rgb, depth, labels)
}

/// Deterministic synthetic sample: slanted planes plus nearer occluders.
pub fn synth_scene(seed: u64, h: usize, w: usize, cfg: &SynthConfig) -> Result<DepthSample> {
    if h == 0 || w == 0 || h % 8 != 0 || w % 8 != 0 {
        return Err(Error::InvalidArgument(format!("scene extents {h}x{w} must be positive multiples of 8")));
    }
    let (rgb, gt, _) = render_scene(seed, h, w, cfg.max_depth_mm);
    let sparse = cfg.sparsity.apply(&gt, seed ^ 0x5eed_5a3c_1e55_0001)?;
    Ok(DepthSample { rgb: Some(rgb), sparse, gt })
}

/// Mirror the left half of every member onto the right half.
pub fn symmetrize(sample: &DepthSample) -> DepthSample {
    let w = sample.width();
    let mirror_depth = |m: &DepthMap| {
        let mut out = m.clone();
        for y in 0..m.height() {
            for x in w / 2..w {
                match m.get(y, w - 1 - x) {
                    Some(d) => out.set(y, x, d),
                    None => out.invalidate(y, x),
                }
            }
        }
        out
    };
    let rgb = sample.rgb.as_ref().map(|img| {
        let mut out = img.clone();
        for y in 0..img.height {
            for x in w / 2..w {
                for c in 0..3 {
                    out.set(y, x, c, img.get(y, w - 1 - x, c));
                }
            }
        }
        out
    });
    DepthSample { rgb, sparse: mirror_depth(&sample.sparse), gt: mirror_depth(&sample.gt) }
}

pub fn sample_name(index: usize) -> String {
    format!("{index:06}.png")
}

/// Write `rgb/`, `sparse/` and `gt/` PNGs with 6-digit names from 0.
pub fn write_dataset(dir: &Path, samples: &[DepthSample]) -> Result<()> {
    for sub in ["rgb", "sparse", "gt"] {
        let p = dir.join(sub);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    for (i, s) in samples.iter().enumerate() {
        let name = sample_name(i);
        if let Some(rgb) = &s.rgb {
            write_rgb_png(rgb, &dir.join("rgb").join(&name))?;
        }
        write_depth_png(&s.sparse, &dir.join("sparse").join(&name))?;
        write_depth_png(&s.gt, &dir.join("gt").join(&name))?;
    }
    Ok(())
}

/// Sorted `*.png` file names in `dir`.
pub fn list_pngs(dir: &Path) -> Result<Vec<String>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut names = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.ends_with(".png") {
            names.push(name);
        }
    }
    names.sort();
    Ok(names)
}

/// Inputs of one sample read from a dataset directory.
#[derive(Debug, Clone)]
pub struct InputEntry {
    pub name: String,
    pub rgb: Option<RgbImage>,
    pub sparse: DepthMap,
}

fn optional_rgb(dir: &Path, name: &str) -> Result<Option<RgbImage>> {
    let p: PathBuf = dir.join("rgb").join(name);
    if p.exists() {
        read_rgb_png(&p).map(Some)
    } else {
        Ok(None)
    }
}

/// Every `sparse/*.png` with its `rgb/` partner when present.
pub fn read_inputs(dir: &Path) -> Result<Vec<InputEntry>> {
    let names = list_pngs(&dir.join("sparse"))?;
    if names.is_empty() {
        return Err(Error::EmptyInput(format!("no sparse/*.png under {}", dir.display())));
    }
    names
        .into_iter()
        .map(|name| {
            let sparse = read_depth_png(&dir.join("sparse").join(&name))?;
            let rgb = optional_rgb(dir, &name)?;
            Ok(InputEntry { name, rgb, sparse })
        })
        .collect()
}

/// Full samples; every sparse map needs a `gt/` partner.
pub fn read_dataset(dir: &Path) -> Result<Vec<DepthSample>> {
    read_inputs(dir)?
        .into_iter()
        .map(|e| {
            let gt = read_depth_png(&dir.join("gt").join(&e.name))?;
            if (gt.height(), gt.width()) != (e.sparse.height(), e.sparse.width()) {
                return Err(Error::shape("dataset", format!("{}: gt and sparse extents differ", e.name)));
            }
            Ok(DepthSample { rgb: e.rgb, sparse: e.sparse, gt })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scene(seed: u64) -> DepthSample {
        synth_scene(seed, 64, 64, &SynthConfig::default()).unwrap()
    }

    #[test]
    fn unit_256_is_one_meter() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.png");
        let data: Vec<u8> = [256u16, 0, 1, 65535].iter().flat_map(|v| v.to_be_bytes()).collect();
        std::fs::write(&p, encode_png(2, 2, png::ColorType::Grayscale, png::BitDepth::Sixteen, &data).unwrap()).unwrap();
        let m = read_depth_png(&p).unwrap();
        assert_eq!(m.get(0, 0), Some(1000.0));
        assert_eq!(m.get(0, 1), None);
        assert_eq!(m.get(1, 1), Some(65535.0 * 1000.0 / 256.0));
        // byte-identical rewrite
        write_depth_png(&m, &dir.path().join("e.png")).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(dir.path().join("e.png")).unwrap());
    }

    #[test]
    fn eight_bit_depth_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("rgb.png");
        let img = RgbImage::new(2, 2, vec![0.5; 12]).unwrap();
        write_rgb_png(&img, &p).unwrap();
        assert!(matches!(read_depth_png(&p), Err(Error::Format { .. })));
        let back = read_rgb_png(&p).unwrap();
        assert!((back.get(1, 1, 2) - 128.0 / 255.0).abs() < 1e-12);
    }

    #[test]
    fn round_trip_error_bounded() {
        let dir = tempfile::tempdir().unwrap();
        let gt = scene(3).gt;
        let p = dir.path().join("gt.png");
        write_depth_png(&gt, &p).unwrap();
        let back = read_depth_png(&p).unwrap();
        assert!(back.is_dense());
        for (a, b) in gt.depths().iter().zip(back.depths()) {
            assert!((a - b).abs() <= 500.0 / 256.0 + 1e-9);
        }
    }

    #[test]
    fn synth_is_deterministic_and_in_range() {
        let (a, b) = (scene(11), scene(11));
        assert_eq!(a, b);
        assert_ne!(a.gt, scene(12).gt);
        assert!(a.gt.is_dense());
        assert!(a.gt.depths().iter().all(|&d| (MIN_DEPTH_MM..=10_000.0).contains(&d)));
        assert_eq!(a.sparse.valid_count(), 500);
        for y in 0..64 {
            for x in 0..64 {
                if let Some(s) = a.sparse.get(y, x) {
                    assert_eq!(Some(s), a.gt.get(y, x));
                }
            }
        }
        assert!(a.rgb.unwrap().data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn occluder_boundaries_are_depth_and_color_edges() {
        for seed in 0..20 {
            let (rgb, depth, labels) = render_scene(seed, 64, 64, 10_000.0);
            let w = 64;
            let mut boundary = 0;
            for y in 0..64 {
                for x in 0..63 {
                    for (p, q) in [((y, x), (y, x + 1)), ((x, y), (x + 1, y))] {
                        let (i, j) = (p.0 * w + p.1, q.0 * w + q.1);
                        let occ = matches!(labels[i], Label::Occluder(_)) || matches!(labels[j], Label::Occluder(_));
                        if !occ || labels[i] == labels[j] {
                            continue;
                        }
                        boundary += 1;
                        let (da, db) = (depth.depths()[i], depth.depths()[j]);
                        let depth_edge = (da - db).abs() > 0.1 * da.min(db);
                        let color_edge = (0..3).any(|c| (rgb.get(p.0, p.1, c) - rgb.get(q.0, q.1, c)).abs() > 0.2);
                        assert_eq!(depth_edge, color_edge, "seed {seed} at {p:?}-{q:?}");
                        assert!(depth_edge);
                    }
                }
            }
            assert!(boundary > 0, "seed {seed} has no visible occluder");
        }
    }

    #[test]
    fn random_sparsity_counts() {
        let gt = scene(5).gt;
        assert_eq!(sparsify_random(&gt, gt.len(), 1).unwrap(), gt);
        let s = sparsify_random(&gt, 37, 9).unwrap();
        assert_eq!(s.valid_count(), 37);
        assert_eq!(s, sparsify_random(&gt, 37, 9).unwrap());
        assert!(sparsify_random(&gt, gt.len() + 1, 1).is_err());
    }

    #[test]
    fn line_sparsity_counts() {
        let gt = DepthMap::from_depths(16, 5, vec![1000.0; 80]).unwrap();
        assert_eq!(sparsify_lines(&gt, 1, 0, 0).unwrap(), gt);
        assert_eq!(sparsify_lines(&gt, 4, 0, 0).unwrap().valid_count(), 4 * 5);
        let big = scene(2).gt;
        for k in [1, 2, 4, 8] {
            let a = sparsify_lines(&big, k, 0, 3).unwrap().valid_count() as i64;
            let b = sparsify_lines(&big, 2 * k, 0, 3).unwrap().valid_count() as i64;
            assert!((a - 2 * b).abs() <= 64, "{k}: {a} vs {b}");
        }
        assert!(sparsify_lines(&gt, 0, 0, 0).is_err());
    }

    #[test]
    fn sparsity_parses() {
        assert_eq!("random:500".parse::<Sparsity>().unwrap(), Sparsity::Random { n: 500 });
        assert_eq!("lines:4".parse::<Sparsity>().unwrap(), Sparsity::Lines { keep_every: 4, jitter: 0 });
        assert_eq!("lines:4:2".parse::<Sparsity>().unwrap().to_string(), "lines:4:2");
        assert!("dense".parse::<Sparsity>().is_err());
    }

    #[test]
    fn symmetrize_is_mirror_invariant() {
        let s = symmetrize(&scene(4));
        assert_eq!(s.gt.flip_horizontal(), s.gt);
        assert_eq!(s.sparse.flip_horizontal(), s.sparse);
        let rgb = s.rgb.unwrap();
        assert_eq!(rgb.flip_horizontal(), rgb);
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let samples = vec![scene(1), scene(2)];
        write_dataset(dir.path(), &samples).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[1].sparse.valid_count(), 500);
        assert_eq!(list_pngs(&dir.path().join("gt")).unwrap(), vec!["000000.png", "000001.png"]);
    }
}
