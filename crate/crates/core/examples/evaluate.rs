//! Full metric report of the prefill and of a model on held-out scenes,
//! per image and pooled.

use lrru::config::LrruConfig;
use lrru::data::{synth_scene, SynthConfig};
use lrru::guidance::init_params;
use lrru::metrics::MetricAccumulator;
use lrru::pipeline::lrru_forward;
use lrru::prefill::prefill;
use lrru::train::load_model;

fn main() -> lrru::Result<()> {
    let (params, cfg) = match std::env::args().nth(1) {
        Some(path) => load_model(path.as_ref())?,
        None => {
            let cfg = LrruConfig::mini_indoor();
            (init_params(&cfg, 0)?, cfg)
        }
    };
    let synth = SynthConfig { max_depth_mm: cfg.max_depth_mm, ..SynthConfig::default() };
    let mut base = MetricAccumulator::default();
    let mut model = MetricAccumulator::default();
    for seed in 10_000..10_008 {
        let s = synth_scene(seed, 64, 64, &synth)?;
        base.add(&prefill(&s.sparse, cfg.max_depth_mm)?, &s.gt)?;
        let steps = lrru_forward(s.rgb.as_ref(), &s.sparse, &params, &cfg)?;
        model.add(steps.last().expect("at least one step"), &s.gt)?;
    }
    println!("prefill {:#?}", base.report()?);
    println!("model   {:#?}", model.report()?);
    Ok(())
}
