//! Minibatch Adam training, validation and per-epoch checkpoints.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, write_atomic};
use crate::config::LrruConfig;
use crate::data::DepthSample;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::guidance::init_params;
use crate::metrics::{metrics, MetricAccumulator, MetricReport};
use crate::optim::{adam_step, AdamState};
use crate::params::ModelParams;
use crate::pipeline::{forward_graph, loss_graph, run_forward, to_depth_map, Batch, PreparedSample};
use crate::tdu::kernel_scope_stats;

/// Kernel reach of one update step, averaged over images.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationScope {
    pub iteration: usize,
    pub mean_dist_px: f64,
    pub max_dist_px: f64,
}

/// Validation errors of the prefill and of every refinement step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    /// Mean over images of per-image RMSE.
    pub prefill_rmse_mm: f64,
    pub prefill_mae_mm: f64,
    pub rmse_mm: Vec<f64>,
    pub mae_mm: Vec<f64>,
    /// Pooled metrics of the final step.
    pub final_report: MetricReport,
    pub scope: Vec<IterationScope>,
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val: Option<Evaluation>,
    pub wall_clock_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn to_ndjson(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.epochs {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_ndjson(text: &str) -> Result<Self> {
        let epochs = text.lines().filter(|l| !l.trim().is_empty()).map(serde_json::from_str).collect::<Result<_, _>>()?;
        Ok(TrainLog { epochs })
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Checkpoints and `train_log.ndjson` go here when set.
    pub out_dir: Option<PathBuf>,
    /// Start from these parameters instead of a fresh init.
    pub init: Option<ModelParams>,
    /// Print one progress line per epoch to stderr.
    pub verbose: bool,
}

pub fn checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("epoch_{epoch:03}.lrru"))
}

pub fn save_model(path: &Path, params: &ModelParams, cfg: &LrruConfig) -> Result<()> {
    checkpoint::save(path, params, Some(serde_json::to_value(cfg)?))
}

/// Parameters and the config stored alongside them.
pub fn load_model(path: &Path) -> Result<(ModelParams, LrruConfig)> {
    let (params, header) = checkpoint::load(path)?;
    let cfg_value = header.config.ok_or_else(|| Error::format(path, "checkpoint carries no config"))?;
    let cfg: LrruConfig = serde_json::from_value(cfg_value).map_err(|e| Error::format(path, e.to_string()))?;
    cfg.validate()?;
    Ok((params, cfg))
}

pub fn prepare(samples: &[DepthSample], cfg: &LrruConfig) -> Result<Vec<PreparedSample>> {
    samples.iter().map(|s| PreparedSample::new(s, cfg)).collect()
}

/// Per-step errors on `samples`, each pushed through the model alone.
pub fn evaluate(params: &ModelParams, cfg: &LrruConfig, samples: &[PreparedSample]) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("nothing to evaluate".into()));
    }
    let n = samples.len() as f64;
    let iters = cfg.iterations;
    let (mut rmse, mut mae) = (vec![0.0; iters], vec![0.0; iters]);
    let (mut pre_rmse, mut pre_mae) = (0.0, 0.0);
    let mut scope = vec![(0.0, 0.0); iters];
    let mut pooled = MetricAccumulator::default();
    for s in samples {
        let res = run_forward(params, cfg, &s.input)?;
        let pre = metrics(&s.init, &s.gt)?;
        pre_rmse += pre.rmse_mm / n;
        pre_mae += pre.mae_mm / n;
        for t in 0..iters {
            let pred = to_depth_map(&res.outputs[t], 0, cfg)?;
            let r = metrics(&pred, &s.gt)?;
            rmse[t] += r.rmse_mm / n;
            mae[t] += r.mae_mm / n;
            if t + 1 == iters {
                pooled.add(&pred, &s.gt)?;
            }
            let st = kernel_scope_stats(&res.kernels[t])[0];
            scope[t].0 += st.mean_dist_px / n;
            scope[t].1 += st.max_dist_px / n;
        }
    }
    Ok(Evaluation {
        prefill_rmse_mm: pre_rmse,
        prefill_mae_mm: pre_mae,
        rmse_mm: rmse,
        mae_mm: mae,
        final_report: pooled.report()?,
        scope: scope
            .into_iter()
            .enumerate()
            .map(|(i, (m, x))| IterationScope { iteration: i + 1, mean_dist_px: m, max_dist_px: x })
            .collect(),
    })
}

/// One optimizer step on `batch`; returns the loss before the step.
pub fn train_step(params: &mut ModelParams, state: &mut AdamState, cfg: &LrruConfig, batch: &Batch, lr: f64) -> Result<f64> {
    let mut graph = Graph::new();
    let pv = params.register(&mut graph);
    let fwd = forward_graph(&mut graph, &pv, cfg, &batch.input)?;
    let loss = loss_graph(&mut graph, &fwd.outputs, &batch.gt, &batch.mask, cfg)?;
    let value = graph.value(loss).item()?;
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("loss became {value}")));
    }
    graph.backward(loss)?;
    let grads = pv.grads(&graph);
    if grads.iter().flatten().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("non-finite gradient".into()));
    }
    adam_step(params, &grads, state, lr, &cfg.optimizer.adam())?;
    Ok(value)
}

/// Train on `train`, validating on `val` after every epoch.
pub fn train(train: &[DepthSample], val: &[DepthSample], cfg: &LrruConfig, opts: &TrainOptions) -> Result<(ModelParams, TrainLog)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyInput("training set is empty".into()));
    }
    let start = Instant::now();
    let train_set = prepare(train, cfg)?;
    let val_set = prepare(val, cfg)?;
    let mut params = match &opts.init {
        Some(p) => p.clone(),
        None => init_params(cfg, cfg.seed)?,
    };
    let mut state = AdamState::new(&params);
    let mut shuffle = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut log = TrainLog::default();
    if let Some(dir) = &opts.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    for epoch in 0..cfg.optimizer.epochs {
        let lr = cfg.optimizer.lr_at(epoch);
        order.shuffle(&mut shuffle);
        let mut loss_sum = 0.0;
        for (b, chunk) in order.chunks(cfg.optimizer.batch).enumerate() {
            let items: Vec<&PreparedSample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let batch = Batch::from_prepared(&items)?;
            let loss = train_step(&mut params, &mut state, cfg, &batch, lr)
                .map_err(|e| match e {
                    Error::NonFinite(m) => Error::NonFinite(format!("epoch {epoch} batch {b}: {m}")),
                    other => other,
                })?;
            loss_sum += loss * chunk.len() as f64;
        }
        let val_eval = if val_set.is_empty() { None } else { Some(evaluate(&params, cfg, &val_set)?) };
        let record = EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / train_set.len() as f64,
            val: val_eval,
            wall_clock_s: start.elapsed().as_secs_f64(),
        };
        if opts.verbose {
            let val_txt = record
                .val
                .as_ref()
                .map(|v| format!(" val rmse {:.1} (prefill {:.1})", v.rmse_mm.last().copied().unwrap_or(f64::NAN), v.prefill_rmse_mm))
                .unwrap_or_default();
            eprintln!("epoch {:3} lr {:.2e} loss {:.2}{} [{:.0}s]", epoch, lr, record.train_loss, val_txt, record.wall_clock_s);
        }
        log.epochs.push(record);
        if let Some(dir) = &opts.out_dir {
            save_model(&checkpoint_path(dir, epoch), &params, cfg)?;
            save_model(&dir.join("last.lrru"), &params, cfg)?;
            write_atomic(&dir.join("train_log.ndjson"), log.to_ndjson()?.as_bytes())?;
        }
    }
    Ok((params, log))
}
