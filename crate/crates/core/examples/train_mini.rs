//! Train the Mini model on freshly synthesized scenes and report held-out
//! error per refinement step.
//!
//! cargo run --release --example train_mini -- [EPOCHS] [TRAIN] [VAL]

use lrru::config::LrruConfig;
use lrru::data::{synth_scene, SynthConfig};
use lrru::train::{train, TrainOptions};

fn main() -> lrru::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).map(|a| a.parse().expect("numeric argument")).collect();
    let epochs = args.first().copied().unwrap_or(40);
    let n_train = args.get(1).copied().unwrap_or(64);
    let n_val = args.get(2).copied().unwrap_or(16);

    let synth = SynthConfig::default();
    let scenes = |range: std::ops::Range<u64>| range.map(|s| synth_scene(s, 64, 64, &synth)).collect::<lrru::Result<Vec<_>>>();
    let train_set = scenes(0..n_train as u64)?;
    let val_set = scenes(10_000..10_000 + n_val as u64)?;

    let mut cfg = LrruConfig::mini_indoor();
    cfg.optimizer.epochs = epochs;
    let opts = TrainOptions { verbose: true, ..TrainOptions::default() };
    let (_, log) = train(&train_set, &val_set, &cfg, &opts)?;

    let last = log.epochs.last().and_then(|r| r.val.as_ref()).expect("validation ran");
    println!("prefill rmse {:.1} mm", last.prefill_rmse_mm);
    for (t, r) in last.rmse_mm.iter().enumerate() {
        println!("step {} rmse {:.1} mm  scope mean {:.2} px", t + 1, r, last.scope[t].mean_dist_px);
    }
    Ok(())
}
