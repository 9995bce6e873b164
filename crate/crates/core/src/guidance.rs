//! Guidance feature extraction.
//!
//! Cross-guided features come from two five-stage encoders (RGB and sparse
//! depth). RGB features are added into the depth stream at every stage, a
//! 3x3 conv fuses the sum, and a decoder climbs back from 1/16 scale with
//! additive skips, emitting features at 1/8, 1/4, 1/2 and full resolution.
//! Self-guided features are a single conv over the current depth estimate.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{LrruConfig, SCALES};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{ModelParams, ParamVars};
use crate::tdu::HeadVars;
use crate::tensor::Tensor;

/// Shape of one convolution in the network.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvSpec {
    pub name: String,
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub init: Init,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Centered uniform with bound `gain * sqrt(6 / fan_in)`.
    FanIn(f64),
    Zeros,
}

fn conv(name: impl Into<String>, in_c: usize, out_c: usize, kernel: usize) -> ConvSpec {
    ConvSpec { name: name.into(), in_c, out_c, kernel, init: Init::FanIn(1.0) }
}

/// Feature width at each of the four guidance scales, coarse to fine.
pub fn guidance_widths(cfg: &LrruConfig) -> [usize; 4] {
    let c = cfg.channels;
    [c[3], c[2], c[1], c[0]]
}

/// Every convolution of the model, in parameter order.
pub fn architecture(cfg: &LrruConfig) -> Vec<ConvSpec> {
    let c = cfg.channels;
    let mut specs = Vec::new();
    let streams: &[(&str, usize)] = if cfg.depth_only { &[("depth", 1)] } else { &[("depth", 1), ("rgb", 3)] };
    for &(stream, in_c) in streams {
        let mut prev = in_c;
        for (s, &width) in c.iter().enumerate() {
            specs.push(conv(format!("enc.{stream}.s{}.a", s + 1), prev, width, 3));
            specs.push(conv(format!("enc.{stream}.s{}.b", s + 1), width, width, 3));
            prev = width;
        }
    }
    for (s, &width) in c.iter().enumerate() {
        specs.push(conv(format!("fuse.s{}", s + 1), width, width, 3));
    }
    specs.push(conv("dec.bottleneck.a", c[4], c[4], 3));
    specs.push(conv("dec.bottleneck.b", c[4], c[4], 3));
    for u in 1..=4 {
        let (from, to) = (c[5 - u], c[4 - u]);
        specs.push(conv(format!("dec.u{u}.up"), from, to, 3));
        specs.push(conv(format!("dec.u{u}.refine"), to, to, 3));
    }
    specs.push(conv("self.conv", 1, c[0], 3));
    let widths = guidance_widths(cfg);
    let taps = cfg.k * cfg.k;
    for t in 0..cfg.iterations {
        let in_c = widths[cfg.scale_index(t)] + c[0];
        specs.push(ConvSpec { init: Init::FanIn(0.1), ..conv(format!("tdu.{t}.weight"), in_c, taps, 1) });
        specs.push(ConvSpec { init: Init::Zeros, ..conv(format!("tdu.{t}.offset"), in_c, 2 * (taps - 1), 1) });
    }
    specs
}

/// Freshly initialized parameters; biases start at zero.
pub fn init_params(cfg: &LrruConfig, seed: u64) -> Result<ModelParams> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ModelParams::new();
    for spec in architecture(cfg) {
        let shape = [spec.out_c, spec.in_c, spec.kernel, spec.kernel];
        let weight = match spec.init {
            Init::Zeros => Tensor::zeros(shape),
            Init::FanIn(gain) => {
                let bound = gain * (6.0 / (spec.in_c * spec.kernel * spec.kernel) as f64).sqrt();
                let data = (0..shape.iter().product::<usize>()).map(|_| rng.gen_range(-bound..bound)).collect();
                Tensor::new(shape, data)?
            }
        };
        params.insert(format!("{}.weight", spec.name), weight)?;
        params.insert(format!("{}.bias", spec.name), Tensor::zeros([spec.out_c, 1, 1, 1]))?;
    }
    Ok(params)
}

/// Conv + leaky activation, padding `kernel / 2`.
fn conv_act(graph: &mut Graph, pv: &ParamVars, name: &str, x: Var, stride: usize, slope: f64) -> Result<Var> {
    let y = conv_linear(graph, pv, name, x, stride)?;
    Ok(graph.leaky_relu(y, slope))
}

fn conv_linear(graph: &mut Graph, pv: &ParamVars, name: &str, x: Var, stride: usize) -> Result<Var> {
    let w = pv.var(&format!("{name}.weight"))?;
    let b = pv.var(&format!("{name}.bias"))?;
    let pad = graph.shape(w)[2] / 2;
    graph.conv2d(x, w, b, stride, pad)
}

/// Cross-guided features at 1/8, 1/4, 1/2 and full scale.
#[derive(Debug, Clone, Copy)]
pub struct GuidanceFeatures {
    pub scales: [Var; 4],
}

pub fn check_extents(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || h % 8 != 0 || w % 8 != 0 {
        return Err(Error::InvalidData(format!(
            "input extents {h}x{w} must be positive multiples of 8; pad the input first"
        )));
    }
    Ok(())
}

/// `rgb` is `[N,3,H,W]` in `[0,1]` (ignored in depth-only mode), `sparse` is
/// `[N,1,H,W]` depth divided by the depth cap with invalid pixels at 0.
pub fn extract_cross_guided(
    graph: &mut Graph,
    pv: &ParamVars,
    cfg: &LrruConfig,
    rgb: Option<Var>,
    sparse: Var,
) -> Result<GuidanceFeatures> {
    let [n, _, h, w] = graph.shape(sparse);
    check_extents(h, w)?;
    let rgb = if cfg.depth_only {
        None
    } else {
        let rgb = rgb.ok_or_else(|| Error::InvalidData("rgb input required unless depth_only is set".into()))?;
        if graph.shape(rgb) != [n, 3, h, w] {
            return Err(Error::shape("extract_cross_guided", format!("rgb {:?} vs sparse {:?}", graph.shape(rgb), graph.shape(sparse))));
        }
        Some(rgb)
    };
    let slope = cfg.leaky_slope;

    let mut d = sparse;
    let mut r = rgb;
    let mut fused = Vec::with_capacity(5);
    for s in 1..=5 {
        let stride = if s == 1 { 1 } else { 2 };
        d = conv_act(graph, pv, &format!("enc.depth.s{s}.a"), d, stride, slope)?;
        d = conv_act(graph, pv, &format!("enc.depth.s{s}.b"), d, 1, slope)?;
        if let Some(rv) = r {
            let rv = conv_act(graph, pv, &format!("enc.rgb.s{s}.a"), rv, stride, slope)?;
            let rv = conv_act(graph, pv, &format!("enc.rgb.s{s}.b"), rv, 1, slope)?;
            d = graph.add(d, rv)?;
            r = Some(rv);
        }
        d = conv_act(graph, pv, &format!("fuse.s{s}"), d, 1, slope)?;
        fused.push(d);
    }

    let mut x = conv_act(graph, pv, "dec.bottleneck.a", fused[4], 1, slope)?;
    x = conv_act(graph, pv, "dec.bottleneck.b", x, 1, slope)?;
    let mut outs = Vec::with_capacity(4);
    for u in 1..=4 {
        let skip = fused[4 - u];
        let [_, _, sh, sw] = graph.shape(skip);
        x = graph.resize_bilinear(x, sh, sw)?;
        x = conv_act(graph, pv, &format!("dec.u{u}.up"), x, 1, slope)?;
        x = graph.add(x, skip)?;
        x = conv_act(graph, pv, &format!("dec.u{u}.refine"), x, 1, slope)?;
        outs.push(x);
    }
    Ok(GuidanceFeatures { scales: [outs[0], outs[1], outs[2], outs[3]] })
}

/// Single 3x3 conv + activation over the normalized current depth.
pub fn extract_self_guided(graph: &mut Graph, pv: &ParamVars, cfg: &LrruConfig, target: Var) -> Result<Var> {
    conv_act(graph, pv, "self.conv", target, 1, cfg.leaky_slope)
}

/// Bilinearly upsample one guidance scale to `h x w`.
pub fn upsample_scale(graph: &mut Graph, feats: &GuidanceFeatures, index: usize, h: usize, w: usize) -> Result<Var> {
    graph.resize_bilinear(feats.scales[index], h, w)
}

/// All four guidance scales at `h x w`.
pub fn upsample_guidance(graph: &mut Graph, feats: &GuidanceFeatures, h: usize, w: usize) -> Result<[Var; 4]> {
    let mut out = feats.scales;
    for (i, v) in out.iter_mut().enumerate() {
        debug_assert!(SCALES[i] > 0.0);
        *v = upsample_scale(graph, feats, i, h, w)?;
    }
    Ok(out)
}

pub fn head_vars(pv: &ParamVars, t: usize) -> Result<HeadVars> {
    Ok(HeadVars {
        weight_conv: pv.var(&format!("tdu.{t}.weight.weight"))?,
        weight_bias: pv.var(&format!("tdu.{t}.weight.bias"))?,
        offset_conv: pv.var(&format!("tdu.{t}.offset.weight"))?,
        offset_bias: pv.var(&format!("tdu.{t}.offset.bias"))?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(cfg: &LrruConfig, params: &ModelParams, rgb: Option<Tensor>, sparse: Tensor) -> (Graph, GuidanceFeatures, ParamVars) {
        let mut g = Graph::new();
        let pv = params.register(&mut g);
        let rgb = rgb.map(|t| g.constant(t));
        let sparse = g.constant(sparse);
        let feats = extract_cross_guided(&mut g, &pv, cfg, rgb, sparse).unwrap();
        (g, feats, pv)
    }

    #[test]
    fn mini_shapes_on_64() {
        let cfg = LrruConfig::mini();
        let params = init_params(&cfg, 1).unwrap();
        let (g, feats, _) = run(&cfg, &params, Some(Tensor::zeros([1, 3, 64, 64])), Tensor::zeros([1, 1, 64, 64]));
        let shapes: Vec<_> = feats.scales.iter().map(|&v| g.shape(v)).collect();
        assert_eq!(shapes, vec![[1, 32, 8, 8], [1, 32, 16, 16], [1, 16, 32, 32], [1, 8, 64, 64]]);
        assert!(feats.scales.iter().all(|&v| g.value(v).is_finite()));
    }

    #[test]
    fn depth_only_shapes_match() {
        let cfg = LrruConfig { depth_only: true, ..LrruConfig::mini() };
        let params = init_params(&cfg, 1).unwrap();
        assert!(params.names().all(|n| !n.contains("rgb")));
        let (g, feats, _) = run(&cfg, &params, None, Tensor::zeros([2, 1, 24, 40]));
        let shapes: Vec<_> = feats.scales.iter().map(|&v| g.shape(v)).collect();
        assert_eq!(shapes, vec![[2, 32, 3, 5], [2, 32, 6, 10], [2, 16, 12, 20], [2, 8, 24, 40]]);
    }

    #[test]
    fn extents_must_be_multiples_of_eight() {
        let cfg = LrruConfig::mini();
        let params = init_params(&cfg, 1).unwrap();
        let mut g = Graph::new();
        let pv = params.register(&mut g);
        let rgb = g.constant(Tensor::zeros([1, 3, 20, 16]));
        let sparse = g.constant(Tensor::zeros([1, 1, 20, 16]));
        let err = extract_cross_guided(&mut g, &pv, &cfg, Some(rgb), sparse).unwrap_err();
        assert!(err.to_string().contains("pad"));
    }

    #[test]
    fn mini_parameter_count_in_expected_range() {
        let params = init_params(&LrruConfig::mini(), 0).unwrap();
        let count = params.num_scalars();
        assert!((200_000..=500_000).contains(&count), "{count}");
    }

    #[test]
    fn self_guided_zero_in_zero_out() {
        let cfg = LrruConfig::mini();
        let mut params = init_params(&cfg, 2).unwrap();
        params.get_mut("self.conv.bias").unwrap().data_mut().fill(0.0);
        let mut g = Graph::new();
        let pv = params.register(&mut g);
        let t = g.constant(Tensor::zeros([2, 1, 16, 16]));
        let out = extract_self_guided(&mut g, &pv, &cfg, t).unwrap();
        assert_eq!(g.shape(out), [2, 8, 16, 16]);
        assert!(g.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn upsample_guidance_shapes_and_passthrough() {
        let cfg = LrruConfig::mini();
        let params = init_params(&cfg, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (mut g, feats, _) = run(
            &cfg,
            &params,
            Some(Tensor::uniform([1, 3, 64, 64], 0.0, 1.0, &mut rng)),
            Tensor::uniform([1, 1, 64, 64], 0.0, 1.0, &mut rng),
        );
        let up = upsample_guidance(&mut g, &feats, 64, 64).unwrap();
        assert_eq!(g.shape(up[0]), [1, 32, 64, 64]);
        assert_eq!(g.shape(up[2]), [1, 16, 64, 64]);
        assert_eq!(g.value(up[3]).data(), g.value(feats.scales[3]).data());
    }

    #[test]
    fn constant_coarse_feature_upsamples_to_constant() {
        let mut g = Graph::new();
        let coarse = g.constant(Tensor::full([1, 32, 8, 8], -0.375));
        let feats = GuidanceFeatures { scales: [coarse, coarse, coarse, coarse] };
        let up = upsample_scale(&mut g, &feats, 0, 64, 64).unwrap();
        assert_eq!(g.shape(up), [1, 32, 64, 64]);
        assert!(g.value(up).data().iter().all(|&v| (v + 0.375).abs() < 1e-15));
    }
}
