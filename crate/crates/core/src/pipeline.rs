//! Recurrent refinement: prefill, then one TDU step per guidance scale.

use crate::config::LrruConfig;
use crate::data::{DepthSample, RgbImage};
use crate::depth::DepthMap;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::guidance::{check_extents, extract_cross_guided, extract_self_guided, head_vars, upsample_scale};
use crate::params::{ModelParams, ParamVars};
use crate::prefill::prefill;
use crate::tdu::{apply_update, predict_kernel, KernelField, KernelFieldVars};
use crate::tensor::Tensor;

/// Network inputs for a batch.
#[derive(Debug, Clone)]
pub struct ModelInput {
    /// `[N,3,H,W]` in `[0,1]`; `None` in depth-only mode.
    pub rgb: Option<Tensor>,
    /// `[N,1,H,W]` sparse depth over the depth cap, 0 where invalid.
    pub sparse: Tensor,
    /// `[N,1,H,W]` prefilled depth in millimeters.
    pub init: Tensor,
}

impl ModelInput {
    /// Prefill `sparse` and normalize everything for the network.
    pub fn new(rgb: Option<&RgbImage>, sparse: &DepthMap, cfg: &LrruConfig) -> Result<Self> {
        let init = prefill(sparse, cfg.max_depth_mm)?;
        ModelInput::with_init(rgb, sparse, &init, cfg)
    }

    /// Like [`ModelInput::new`] with the prefill already done.
    pub fn with_init(rgb: Option<&RgbImage>, sparse: &DepthMap, init: &DepthMap, cfg: &LrruConfig) -> Result<Self> {
        let (h, w) = (sparse.height(), sparse.width());
        check_extents(h, w)?;
        let rgb = if cfg.depth_only {
            None
        } else {
            let img = rgb.ok_or_else(|| Error::InvalidData("rgb image required unless depth_only is set".into()))?;
            if (img.height(), img.width()) != (h, w) {
                return Err(Error::shape("model input", format!("rgb {}x{} vs depth {h}x{w}", img.height(), img.width())));
            }
            Some(img.to_tensor())
        };
        Ok(ModelInput { rgb, sparse: sparse.to_tensor(1.0 / cfg.max_depth_mm), init: init.to_tensor(1.0) })
    }

    pub fn stack(items: &[ModelInput]) -> Result<ModelInput> {
        let rgb = match items.first().and_then(|i| i.rgb.as_ref()) {
            Some(_) => Some(Tensor::stack(
                &items.iter().map(|i| i.rgb.clone().ok_or_else(|| Error::InvalidData("mixed rgb and depth-only inputs".into()))).collect::<Result<Vec<_>>>()?,
            )?),
            None => None,
        };
        Ok(ModelInput {
            rgb,
            sparse: Tensor::stack(&items.iter().map(|i| i.sparse.clone()).collect::<Vec<_>>())?,
            init: Tensor::stack(&items.iter().map(|i| i.init.clone()).collect::<Vec<_>>())?,
        })
    }

    pub fn flip_horizontal(&self) -> ModelInput {
        ModelInput {
            rgb: self.rgb.as_ref().map(Tensor::flip_horizontal),
            sparse: self.sparse.flip_horizontal(),
            init: self.init.flip_horizontal(),
        }
    }
}

/// A sample with its prefill computed once up front.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub input: ModelInput,
    pub init: DepthMap,
    pub gt: DepthMap,
}

impl PreparedSample {
    pub fn new(sample: &DepthSample, cfg: &LrruConfig) -> Result<Self> {
        let init = prefill(&sample.sparse, cfg.max_depth_mm)?;
        let input = ModelInput::with_init(sample.rgb.as_ref(), &sample.sparse, &init, cfg)?;
        Ok(PreparedSample { input, init, gt: sample.gt.clone() })
    }
}

/// Stacked inputs plus supervision.
#[derive(Debug, Clone)]
pub struct Batch {
    pub input: ModelInput,
    /// `[N,1,H,W]` ground truth in millimeters, 0 where invalid.
    pub gt: Tensor,
    /// `[N,1,H,W]`, 1 where ground truth is valid.
    pub mask: Tensor,
}

impl Batch {
    pub fn from_prepared(samples: &[&PreparedSample]) -> Result<Batch> {
        let input = ModelInput::stack(&samples.iter().map(|s| s.input.clone()).collect::<Vec<_>>())?;
        let gt = Tensor::stack(&samples.iter().map(|s| s.gt.to_tensor(1.0)).collect::<Vec<_>>())?;
        let mask = Tensor::stack(
            &samples
                .iter()
                .map(|s| {
                    let (h, w) = (s.gt.height(), s.gt.width());
                    Tensor::new([1, 1, h, w], s.gt.valid_mask().iter().map(|&v| if v { 1.0 } else { 0.0 }).collect())
                })
                .collect::<Result<Vec<_>>>()?,
        )?;
        Ok(Batch { input, gt, mask })
    }
}

/// Graph handles of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardVars {
    /// Refined depth after each update step, in millimeters.
    pub outputs: Vec<Var>,
    pub kernels: Vec<KernelFieldVars>,
}

/// Build the forward pass on `graph`.
pub fn forward_graph(graph: &mut Graph, pv: &ParamVars, cfg: &LrruConfig, input: &ModelInput) -> Result<ForwardVars> {
    let [_, _, h, w] = input.init.shape();
    let rgb = input.rgb.as_ref().map(|t| graph.constant(t.clone()));
    let sparse = graph.constant(input.sparse.clone());
    let feats = extract_cross_guided(graph, pv, cfg, rgb, sparse)?;

    let mut target = graph.constant(input.init.clone());
    let mut outputs = Vec::with_capacity(cfg.iterations);
    let mut kernels = Vec::with_capacity(cfg.iterations);
    for t in 0..cfg.iterations {
        let normalized = graph.scale(target, 1.0 / cfg.max_depth_mm);
        let self_feat = extract_self_guided(graph, pv, cfg, normalized)?;
        let cross = upsample_scale(graph, &feats, cfg.scale_index(t), h, w)?;
        let kf = predict_kernel(graph, cross, self_feat, &head_vars(pv, t)?, cfg.k)?;
        target = apply_update(graph, target, &kf)?;
        outputs.push(target);
        kernels.push(kf);
    }
    Ok(ForwardVars { outputs, kernels })
}

/// Detached forward results.
#[derive(Debug, Clone)]
pub struct ForwardResult {
    pub outputs: Vec<Tensor>,
    pub kernels: Vec<KernelField>,
}

pub fn run_forward(params: &ModelParams, cfg: &LrruConfig, input: &ModelInput) -> Result<ForwardResult> {
    let mut graph = Graph::new();
    let pv = params.register(&mut graph);
    let vars = forward_graph(&mut graph, &pv, cfg, input)?;
    Ok(ForwardResult {
        outputs: vars.outputs.iter().map(|&v| graph.value(v).clone()).collect(),
        kernels: vars.kernels.iter().map(|kf| KernelField::from_graph(&graph, kf)).collect(),
    })
}

/// Clamp a predicted plane into the valid depth domain `[1 mm, max_depth]`.
pub fn to_depth_map(t: &Tensor, n: usize, cfg: &LrruConfig) -> Result<DepthMap> {
    let plane = t.plane(n, 0).iter().map(|d| d.clamp(1.0, cfg.max_depth_mm)).collect();
    DepthMap::from_depths(t.height(), t.width(), plane)
}

/// Prefill, then every refinement step's output.
pub fn lrru_forward(rgb: Option<&RgbImage>, sparse: &DepthMap, params: &ModelParams, cfg: &LrruConfig) -> Result<Vec<DepthMap>> {
    let input = ModelInput::new(rgb, sparse, cfg)?;
    let res = run_forward(params, cfg, &input)?;
    res.outputs.iter().map(|t| to_depth_map(t, 0, cfg)).collect()
}

/// Weight of each step's output in the loss, earliest first: `gamma^(iters-1-t)`.
pub fn iteration_weights(cfg: &LrruConfig) -> Vec<f64> {
    (0..cfg.iterations).map(|t| cfg.gamma.powi((cfg.iterations - 1 - t) as i32)).collect()
}

fn valid_count(mask: &Tensor) -> Result<f64> {
    let count: f64 = mask.data().iter().sum();
    if count == 0.0 {
        return Err(Error::EmptyInput("ground truth has no valid pixels".into()));
    }
    Ok(count)
}

/// Masked, step-weighted L1/L2 loss averaged over valid pixels, on the graph.
pub fn loss_graph(graph: &mut Graph, outputs: &[Var], gt: &Tensor, mask: &Tensor, cfg: &LrruConfig) -> Result<Var> {
    let count = valid_count(mask)?;
    let weights = iteration_weights(cfg);
    if weights.len() != outputs.len() {
        return Err(Error::InvalidArgument(format!("{} outputs for {} iterations", outputs.len(), weights.len())));
    }
    let gt = graph.constant(gt.clone());
    let mask = graph.constant(mask.clone());
    let mut total: Option<Var> = None;
    for (&out, &wt) in outputs.iter().zip(&weights) {
        let err = graph.sub(out, gt)?;
        let err = graph.mul(err, mask)?;
        for term in &cfg.loss_terms {
            let e = if term.exponent() == 1 { graph.abs(err) } else { graph.square(err) };
            let s = graph.sum(e);
            let s = graph.scale(s, wt / count);
            total = Some(match total {
                Some(acc) => graph.add(acc, s)?,
                None => s,
            });
        }
    }
    total.ok_or_else(|| Error::InvalidArgument("no outputs to supervise".into()))
}

/// Plain evaluation of the loss with explicit per-step weights.
pub fn loss_value_weighted(outputs: &[Tensor], gt: &Tensor, mask: &Tensor, cfg: &LrruConfig, weights: &[f64]) -> Result<f64> {
    let count = valid_count(mask)?;
    let mut total = 0.0;
    for (out, &wt) in outputs.iter().zip(weights) {
        if out.shape() != gt.shape() {
            return Err(Error::shape("loss", format!("prediction {:?} vs gt {:?}", out.shape(), gt.shape())));
        }
        for term in &cfg.loss_terms {
            let s: f64 = out
                .data()
                .iter()
                .zip(gt.data())
                .zip(mask.data())
                .map(|((p, g), m)| ((p - g).abs() * m).powi(term.exponent() as i32))
                .sum();
            total += wt * s / count;
        }
    }
    Ok(total)
}

pub fn loss_value(outputs: &[Tensor], gt: &Tensor, mask: &Tensor, cfg: &LrruConfig) -> Result<f64> {
    loss_value_weighted(outputs, gt, mask, cfg, &iteration_weights(cfg))
}

/// Both halves of a test-time-augmented prediction.
#[derive(Debug, Clone)]
pub struct TtaParts {
    pub plain: DepthMap,
    /// Prediction on the mirrored input, mirrored back.
    pub flipped_back: DepthMap,
    pub merged: DepthMap,
}

/// Final refined depth, optionally averaged with the mirrored prediction.
pub fn infer(rgb: Option<&RgbImage>, sparse: &DepthMap, params: &ModelParams, cfg: &LrruConfig, tta: bool) -> Result<DepthMap> {
    let input = ModelInput::new(rgb, sparse, cfg)?;
    if tta {
        Ok(infer_tta_parts(&input, params, cfg)?.merged)
    } else {
        final_output(&input, params, cfg)
    }
}

fn final_output(input: &ModelInput, params: &ModelParams, cfg: &LrruConfig) -> Result<DepthMap> {
    let res = run_forward(params, cfg, input)?;
    to_depth_map(res.outputs.last().expect("at least one iteration"), 0, cfg)
}

pub fn infer_tta_parts(input: &ModelInput, params: &ModelParams, cfg: &LrruConfig) -> Result<TtaParts> {
    let plain = final_output(input, params, cfg)?;
    let flipped_back = final_output(&input.flip_horizontal(), params, cfg)?.flip_horizontal();
    let merged: Vec<f64> = plain.depths().iter().zip(flipped_back.depths()).map(|(a, b)| 0.5 * (a + b)).collect();
    let merged = DepthMap::from_depths(plain.height(), plain.width(), merged)?;
    Ok(TtaParts { plain, flipped_back, merged })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_scene, SynthConfig};
    use crate::guidance::init_params;

    fn sample(seed: u64) -> DepthSample {
        synth_scene(seed, 32, 32, &SynthConfig { sparsity: crate::data::Sparsity::Random { n: 120 }, ..SynthConfig::default() }).unwrap()
    }

    fn zero_heads(params: &mut ModelParams, cfg: &LrruConfig) {
        for t in 0..cfg.iterations {
            for part in ["weight", "offset"] {
                for kind in ["weight", "bias"] {
                    params.get_mut(&format!("tdu.{t}.{part}.{kind}")).unwrap().data_mut().fill(0.0);
                }
            }
        }
    }

    #[test]
    fn weights_are_geometric() {
        let cfg = LrruConfig::mini();
        let w = iteration_weights(&cfg);
        assert_eq!(w.len(), 4);
        for (a, b) in w.iter().zip([0.512, 0.64, 0.8, 1.0]) {
            assert!((a - b).abs() <= 1e-15);
        }
        assert_eq!(w[3], 1.0);
    }

    #[test]
    fn zero_heads_chain_identities() {
        let cfg = LrruConfig::mini_indoor();
        let mut params = init_params(&cfg, 4).unwrap();
        zero_heads(&mut params, &cfg);
        let s = sample(1);
        let outs = lrru_forward(s.rgb.as_ref(), &s.sparse, &params, &cfg).unwrap();
        let init = prefill(&s.sparse, cfg.max_depth_mm).unwrap();
        assert_eq!(outs.len(), 4);
        for o in &outs {
            assert!(o.is_dense());
            assert_eq!(o, &init);
        }
    }

    #[test]
    fn loss_hand_cases() {
        let mut cfg = LrruConfig::mini();
        let gt = Tensor::new([1, 1, 1, 2], vec![1000.0, 0.0]).unwrap();
        let mask = Tensor::new([1, 1, 1, 2], vec![1.0, 0.0]).unwrap();
        let exact = vec![Tensor::new([1, 1, 1, 2], vec![1000.0, 77.0]).unwrap(); 4];
        assert_eq!(loss_value(&exact, &gt, &mask, &cfg).unwrap(), 0.0);

        let mut preds = exact.clone();
        preds[3] = Tensor::new([1, 1, 1, 2], vec![1003.0, 5.0]).unwrap();
        cfg.loss_terms = vec![crate::config::LossTerm::L2];
        assert_eq!(loss_value(&preds, &gt, &mask, &cfg).unwrap(), 9.0);
        cfg.loss_terms = vec![crate::config::LossTerm::L1, crate::config::LossTerm::L2];
        assert_eq!(loss_value(&preds, &gt, &mask, &cfg).unwrap(), 12.0);

        let mut g = Graph::new();
        let vars: Vec<Var> = preds.iter().map(|t| g.constant(t.clone())).collect();
        let l = loss_graph(&mut g, &vars, &gt, &mask, &cfg).unwrap();
        assert_eq!(g.value(l).item().unwrap(), 12.0);
        assert!(loss_value(&preds, &gt, &Tensor::zeros([1, 1, 1, 2]), &cfg).is_err());
    }

    #[test]
    fn early_steps_contribute() {
        let cfg = LrruConfig::mini_indoor();
        let params = init_params(&cfg, 5).unwrap();
        let prepared = PreparedSample::new(&sample(2), &cfg).unwrap();
        let batch = Batch::from_prepared(&[&prepared]).unwrap();
        let res = run_forward(&params, &cfg, &batch.input).unwrap();
        let full = loss_value(&res.outputs, &batch.gt, &batch.mask, &cfg).unwrap();
        let last_only = loss_value_weighted(&res.outputs, &batch.gt, &batch.mask, &cfg, &[0.0, 0.0, 0.0, 1.0]).unwrap();
        assert_ne!(full, last_only);
    }

    #[test]
    fn tta_is_mean_of_parts() {
        let cfg = LrruConfig::mini_indoor();
        let params = init_params(&cfg, 6).unwrap();
        let s = sample(3);
        let input = ModelInput::new(s.rgb.as_ref(), &s.sparse, &cfg).unwrap();
        let parts = infer_tta_parts(&input, &params, &cfg).unwrap();
        for ((m, a), b) in parts.merged.depths().iter().zip(parts.plain.depths()).zip(parts.flipped_back.depths()) {
            assert!((m - 0.5 * (a + b)).abs() <= 1e-12);
        }
        let direct = infer(s.rgb.as_ref(), &s.sparse, &params, &cfg, false).unwrap();
        assert_eq!(direct, parts.plain);
    }

    #[test]
    fn depth_only_needs_no_rgb() {
        let cfg = LrruConfig { depth_only: true, ..LrruConfig::mini_indoor() };
        let params = init_params(&cfg, 7).unwrap();
        let s = sample(4);
        let out = infer(None, &s.sparse, &params, &cfg, true).unwrap();
        assert!(out.is_dense());
        let rgb_cfg = LrruConfig::mini_indoor();
        assert!(infer(None, &s.sparse, &init_params(&rgb_cfg, 7).unwrap(), &rgb_cfg, false).is_err());
    }

    #[test]
    fn empty_sparse_propagates() {
        let cfg = LrruConfig::mini_indoor();
        let params = init_params(&cfg, 1).unwrap();
        let s = sample(5);
        let err = lrru_forward(s.rgb.as_ref(), &DepthMap::empty(32, 32), &params, &cfg).unwrap_err();
        assert!(matches!(err, Error::EmptyInput(_)));
    }

    #[test]
    fn one_backward_reaches_every_parameter() {
        let cfg = LrruConfig::mini_indoor();
        let params = init_params(&cfg, 8).unwrap();
        let prepared: Vec<_> = (0..2).map(|i| PreparedSample::new(&sample(10 + i), &cfg).unwrap()).collect();
        let batch = Batch::from_prepared(&prepared.iter().collect::<Vec<_>>()).unwrap();
        let mut g = Graph::new();
        let pv = params.register(&mut g);
        let fwd = forward_graph(&mut g, &pv, &cfg, &batch.input).unwrap();
        let loss = loss_graph(&mut g, &fwd.outputs, &batch.gt, &batch.mask, &cfg).unwrap();
        g.backward(loss).unwrap();
        let dead: Vec<&str> = params
            .names()
            .zip(pv.grads(&g))
            .filter(|(_, grad)| grad.iter().all(|&v| v == 0.0))
            .map(|(n, _)| n)
            .collect();
        assert!(dead.is_empty(), "no gradient reached {dead:?}");
    }
}
