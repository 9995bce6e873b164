//! `lrru` command line.
//!
//! Exit codes: 0 success, 1 usage, 2 data, 3 numeric.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::checkpoint::write_atomic;
use crate::config::LrruConfig;
use crate::data::{self, read_depth_png, read_rgb_png, write_depth_png, write_rgb_png, Sparsity, SynthConfig};
use crate::error::{Error, Result};
use crate::gradcheck::run_op_suite;
use crate::metrics::{metrics, MetricAccumulator, MetricReport};
use crate::pipeline::{infer, run_forward, ModelInput};
use crate::prefill::prefill;
use crate::tdu::kernel_scope_stats;
use crate::train::{load_model, train, IterationScope, TrainOptions};
use crate::viz::colorize;

/// Gradient-check tolerance used by `gradcheck`.
pub const GRADCHECK_TOL: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(name = "lrru", version, about = "Sparse-to-dense depth completion with recurrent target-dependent updates")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset directory (rgb/, sparse/, gt/).
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
        /// HxW, both multiples of 8.
        #[arg(long, default_value = "64x64")]
        size: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// random:N or lines:K[:JITTER]
        #[arg(long, default_value = "random:500")]
        sparsity: String,
        #[arg(long, default_value_t = 10_000.0)]
        max_depth: f64,
        /// Allow writing into a non-empty directory.
        #[arg(long)]
        force: bool,
    },
    /// Densify one sparse depth PNG with the morphological prefill.
    Prefill {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100_000.0)]
        max_depth: f64,
    },
    /// Train a model; checkpoints and train_log.ndjson go to --out.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Held-out dataset; defaults to the config's trailing val_count samples.
        #[arg(long)]
        val: Option<PathBuf>,
    },
    /// Refine sparse inputs (dataset directories or sparse PNGs) with a checkpoint.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in", required = true, num_args = 1..)]
        input: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        tta: bool,
    },
    /// Compare predicted depth PNGs with ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Finite-difference check of every differentiable op.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Colorize a depth PNG; writes a JSON sidecar next to the output.
    Viz {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-iteration kernel-scope statistics over a dataset.
    Diag {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parse `args`, run, and return the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    configure_threads();
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn configure_threads() {
    let n = std::env::var("LRRU_THREADS").ok().and_then(|v| v.trim().parse::<usize>().ok()).unwrap_or(0);
    // a second build in the same process is harmless to ignore
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
}

fn emit(value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    let mut out = std::io::stdout().lock();
    writeln!(out, "{text}").map_err(|e| Error::io("<stdout>", e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn require_file(path: &Path) -> Result<()> {
    if !path.is_file() {
        return Err(Error::io(path, std::io::Error::new(std::io::ErrorKind::NotFound, "no such file")));
    }
    Ok(())
}

fn require_dir(path: &Path) -> Result<()> {
    if !path.is_dir() {
        return Err(Error::io(path, std::io::Error::new(std::io::ErrorKind::NotFound, "no such directory")));
    }
    Ok(())
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub fn parse_size(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::InvalidArgument(format!("bad size {s:?}; expected HxW"));
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    Ok((h.trim().parse().map_err(|_| bad())?, w.trim().parse().map_err(|_| bad())?))
}

/// Seed of synthetic scene `index` in a dataset generated with `seed`.
pub fn scene_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add(index as u64)
}

#[derive(Debug, Serialize)]
struct SynthManifest {
    count: usize,
    height: usize,
    width: usize,
    seed: u64,
    sparsity: String,
    max_depth_mm: f64,
    files: Vec<String>,
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth { out, count, size, seed, sparsity, max_depth, force } => {
            cmd_synth(&out, count, &size, seed, &sparsity, max_depth, force)
        }
        Command::Prefill { input, out, max_depth } => cmd_prefill(&input, &out, max_depth),
        Command::Train { config, data, out, val } => cmd_train(&config, &data, &out, val.as_deref()),
        Command::Infer { ckpt, input, out, tta } => cmd_infer(&ckpt, &input, &out, tta),
        Command::Eval { pred, gt, report } => cmd_eval(&pred, &gt, &report),
        Command::Gradcheck { seed } => cmd_gradcheck(seed),
        Command::Viz { input, out } => cmd_viz(&input, &out),
        Command::Diag { ckpt, data, out } => cmd_diag(&ckpt, &data, &out),
    }
}

fn cmd_synth(out: &Path, count: usize, size: &str, seed: u64, sparsity: &str, max_depth: f64, force: bool) -> Result<()> {
    let (h, w) = parse_size(size)?;
    let sparsity: Sparsity = sparsity.parse()?;
    if !(max_depth > data::MIN_DEPTH_MM) {
        return Err(Error::InvalidArgument(format!("max depth must exceed {} mm", data::MIN_DEPTH_MM)));
    }
    if out.exists() && !force {
        let non_empty = std::fs::read_dir(out).map_err(|e| Error::io(out, e))?.next().is_some();
        if non_empty {
            return Err(Error::InvalidArgument(format!("{} is not empty; pass --force to overwrite", out.display())));
        }
    }
    let cfg = SynthConfig { max_depth_mm: max_depth, sparsity };
    let samples = (0..count).map(|i| data::synth_scene(scene_seed(seed, i), h, w, &cfg)).collect::<Result<Vec<_>>>()?;
    create_dir(out)?;
    data::write_dataset(out, &samples)?;
    let manifest = SynthManifest {
        count,
        height: h,
        width: w,
        seed,
        sparsity: sparsity.to_string(),
        max_depth_mm: max_depth,
        files: (0..count).map(data::sample_name).collect(),
    };
    write_json(&out.join("manifest.json"), &manifest)?;
    emit(&manifest)
}

fn cmd_prefill(input: &Path, out: &Path, max_depth: f64) -> Result<()> {
    require_file(input)?;
    let sparse = read_depth_png(input)?;
    let dense = prefill(&sparse, max_depth)?;
    write_depth_png(&dense, out)?;
    emit(&serde_json::json!({
        "input": input,
        "output": out,
        "input_valid": sparse.valid_count(),
        "output_valid": dense.valid_count(),
    }))
}

fn cmd_train(config: &Path, data_dir: &Path, out: &Path, val: Option<&Path>) -> Result<()> {
    require_file(config)?;
    require_dir(data_dir)?;
    if let Some(v) = val {
        require_dir(v)?;
    }
    let cfg = LrruConfig::load(config)?;
    let mut samples = data::read_dataset(data_dir)?;
    let val_set = match val {
        Some(v) => data::read_dataset(v)?,
        None => {
            if cfg.val_count >= samples.len() {
                return Err(Error::InvalidArgument(format!("val_count {} leaves no training data", cfg.val_count)));
            }
            samples.split_off(samples.len() - cfg.val_count)
        }
    };
    let opts = TrainOptions { out_dir: Some(out.to_path_buf()), init: None, verbose: true };
    let (_, log) = train(&samples, &val_set, &cfg, &opts)?;
    let last = log.epochs.last();
    emit(&serde_json::json!({
        "epochs": log.epochs.len(),
        "train_samples": samples.len(),
        "val_samples": val_set.len(),
        "final_train_loss": last.map(|r| r.train_loss),
        "final_val": last.and_then(|r| r.val.clone()),
        "checkpoint": out.join("last.lrru"),
    }))
}

/// `(name, rgb, sparse)` for every input path: dataset directories or sparse PNGs.
fn collect_inputs(inputs: &[PathBuf]) -> Result<Vec<data::InputEntry>> {
    for p in inputs {
        if !p.exists() {
            return Err(Error::io(p, std::io::Error::new(std::io::ErrorKind::NotFound, "no such file or directory")));
        }
    }
    let mut entries = Vec::new();
    for p in inputs {
        if p.is_dir() {
            entries.extend(data::read_inputs(p)?);
            continue;
        }
        let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let sparse = read_depth_png(p)?;
        // sibling rgb/NAME.png of a dataset's sparse/NAME.png
        let rgb_path = p.parent().and_then(Path::parent).map(|d| d.join("rgb").join(&name));
        let rgb = match rgb_path {
            Some(r) if r.is_file() => Some(read_rgb_png(&r)?),
            _ => None,
        };
        entries.push(data::InputEntry { name, rgb, sparse });
    }
    Ok(entries)
}

fn cmd_infer(ckpt: &Path, inputs: &[PathBuf], out: &Path, tta: bool) -> Result<()> {
    require_file(ckpt)?;
    let (params, cfg) = load_model(ckpt)?;
    let entries = collect_inputs(inputs)?;
    let mut outputs = Vec::new();
    let mut predictions = Vec::new();
    for e in &entries {
        let pred = infer(e.rgb.as_ref(), &e.sparse, &params, &cfg, tta)?;
        predictions.push((e.name.clone(), pred));
    }
    create_dir(out)?;
    for (name, pred) in &predictions {
        write_depth_png(pred, &out.join(name))?;
        outputs.push(name.clone());
    }
    let summary = serde_json::json!({ "checkpoint": ckpt, "tta": tta, "count": outputs.len(), "outputs": outputs });
    write_json(&out.join("infer.json"), &summary)?;
    emit(&summary)
}

/// A dataset directory stands in for its `gt/` subdirectory.
fn depth_dir(dir: &Path) -> Result<PathBuf> {
    require_dir(dir)?;
    let sub = dir.join("gt");
    if sub.is_dir() && data::list_pngs(dir)?.is_empty() {
        return Ok(sub);
    }
    Ok(dir.to_path_buf())
}

#[derive(Debug, Serialize)]
struct ImageMetrics {
    name: String,
    #[serde(flatten)]
    report: MetricReport,
}

/// Output of `lrru eval`.
#[derive(Debug, Serialize, serde::Deserialize)]
pub struct EvalReport {
    /// Metrics over all ground-truth pixels of all images.
    pub pooled: MetricReport,
    /// Mean over images of per-image RMSE / MAE.
    pub mean_rmse_mm: f64,
    pub mean_mae_mm: f64,
    pub count: usize,
    pub images: Vec<serde_json::Value>,
}

fn cmd_eval(pred: &Path, gt: &Path, report: &Path) -> Result<()> {
    let pred_dir = depth_dir(pred)?;
    let gt_dir = depth_dir(gt)?;
    let names = data::list_pngs(&gt_dir)?;
    if names.is_empty() {
        return Err(Error::EmptyInput(format!("no ground-truth PNGs in {}", gt_dir.display())));
    }
    let mut pooled = MetricAccumulator::default();
    let mut images = Vec::new();
    let (mut sum_rmse, mut sum_mae) = (0.0, 0.0);
    for name in &names {
        let pred_path = pred_dir.join(name);
        require_file(&pred_path)?;
        let (p, g) = (read_depth_png(&pred_path)?, read_depth_png(&gt_dir.join(name))?);
        pooled.add(&p, &g)?;
        let r = metrics(&p, &g)?;
        sum_rmse += r.rmse_mm;
        sum_mae += r.mae_mm;
        images.push(serde_json::to_value(ImageMetrics { name: name.clone(), report: r })?);
    }
    let n = names.len() as f64;
    let out = EvalReport { pooled: pooled.report()?, mean_rmse_mm: sum_rmse / n, mean_mae_mm: sum_mae / n, count: names.len(), images };
    write_json(report, &out)?;
    emit(&serde_json::json!({ "pooled": out.pooled, "mean_rmse_mm": out.mean_rmse_mm, "count": out.count }))
}

fn cmd_gradcheck(seed: u64) -> Result<()> {
    let checks = run_op_suite(seed)?;
    let mut worst = 0.0f64;
    for c in &checks {
        let status = if c.max_rel_err < GRADCHECK_TOL { "ok" } else { "FAIL" };
        eprintln!("{:<24} {:.3e} {status}", c.op, c.max_rel_err);
        worst = worst.max(c.max_rel_err);
    }
    emit(&serde_json::json!({ "seed": seed, "tolerance": GRADCHECK_TOL, "max_rel_err": worst, "ops": checks }))?;
    if !(worst < GRADCHECK_TOL) {
        return Err(Error::Numeric(format!("gradient check max relative error {worst:.3e}")));
    }
    Ok(())
}

fn cmd_viz(input: &Path, out: &Path) -> Result<()> {
    require_file(input)?;
    let map = read_depth_png(input)?;
    let (img, sidecar) = colorize(&map)?;
    write_rgb_png(&img, out)?;
    write_json(&out.with_extension("json"), &sidecar)?;
    emit(&sidecar)
}

/// Per-iteration kernel scope averaged over every sample in `dir`.
pub fn diag_scope(params: &crate::params::ModelParams, cfg: &LrruConfig, entries: &[data::InputEntry]) -> Result<Vec<IterationScope>> {
    if entries.is_empty() {
        return Err(Error::EmptyInput("no samples for diagnostics".into()));
    }
    let n = entries.len() as f64;
    let mut acc = vec![(0.0, 0.0); cfg.iterations];
    for e in entries {
        let input = ModelInput::new(e.rgb.as_ref(), &e.sparse, cfg)?;
        let res = run_forward(params, cfg, &input)?;
        for (t, kf) in res.kernels.iter().enumerate() {
            let s = kernel_scope_stats(kf)[0];
            acc[t].0 += s.mean_dist_px / n;
            acc[t].1 += s.max_dist_px / n;
        }
    }
    Ok(acc
        .into_iter()
        .enumerate()
        .map(|(t, (mean, max))| IterationScope { iteration: t + 1, mean_dist_px: mean, max_dist_px: max })
        .collect())
}

fn cmd_diag(ckpt: &Path, data_dir: &Path, out: &Path) -> Result<()> {
    require_file(ckpt)?;
    require_dir(data_dir)?;
    let (params, cfg) = load_model(ckpt)?;
    let entries = data::read_inputs(data_dir)?;
    let records = diag_scope(&params, &cfg, &entries)?;
    let long_to_short = match (records.first(), records.last()) {
        (Some(a), Some(b)) => a.mean_dist_px > b.mean_dist_px,
        _ => false,
    };
    for r in &records {
        eprintln!("iteration {} mean {:.3} px max {:.3} px", r.iteration, r.mean_dist_px, r.max_dist_px);
    }
    let value = serde_json::json!({ "samples": entries.len(), "iterations": records, "long_to_short": long_to_short });
    write_json(out, &value)?;
    emit(&value)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn size_parsing() {
        assert_eq!(parse_size("64x48").unwrap(), (64, 48));
        assert!(parse_size("64").is_err());
        assert!(parse_size("ax8").is_err());
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run(["lrru", "frobnicate"]), 1);
        assert_eq!(run(["lrru", "gradcheck", "--bogus"]), 1);
        assert_eq!(run(["lrru", "--help"]), 0);
    }

    #[test]
    fn missing_input_exits_two() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nope.png");
        let out = dir.path().join("o.png");
        let args: Vec<OsString> = vec!["lrru".into(), "prefill".into(), "--in".into(), missing.into(), "--out".into(), out.clone().into()];
        assert_eq!(run(args), 2);
        assert!(!out.exists());
    }
}
