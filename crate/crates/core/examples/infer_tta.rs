//! Run a model on a synthetic scene with and without test-time flipping.
//!
//! cargo run --release --example infer_tta -- [CHECKPOINT]
//!
//! Without a checkpoint a freshly initialized Mini model is used.

use lrru::config::LrruConfig;
use lrru::data::{synth_scene, SynthConfig};
use lrru::guidance::init_params;
use lrru::metrics::metrics;
use lrru::pipeline::{infer_tta_parts, ModelInput};
use lrru::train::load_model;

fn main() -> lrru::Result<()> {
    let (params, cfg) = match std::env::args().nth(1) {
        Some(path) => load_model(path.as_ref())?,
        None => {
            let cfg = LrruConfig::mini_indoor();
            (init_params(&cfg, 0)?, cfg)
        }
    };
    let sample = synth_scene(42, 64, 64, &SynthConfig { max_depth_mm: cfg.max_depth_mm, ..SynthConfig::default() })?;
    let input = ModelInput::new(sample.rgb.as_ref(), &sample.sparse, &cfg)?;
    let parts = infer_tta_parts(&input, &params, &cfg)?;
    for (name, map) in [("plain", &parts.plain), ("flipped back", &parts.flipped_back), ("tta", &parts.merged)] {
        println!("{name:<13} rmse {:.1} mm", metrics(map, &sample.gt)?.rmse_mm);
    }
    Ok(())
}
