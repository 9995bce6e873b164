//! How far each refinement step reaches: mean and max distance of the
//! effective kernel taps from their reference pixel.

use lrru::config::LrruConfig;
use lrru::data::{synth_scene, SynthConfig};
use lrru::guidance::init_params;
use lrru::pipeline::{run_forward, ModelInput};
use lrru::tdu::kernel_scope_stats;
use lrru::train::load_model;

fn main() -> lrru::Result<()> {
    let (params, cfg) = match std::env::args().nth(1) {
        Some(path) => load_model(path.as_ref())?,
        None => {
            let cfg = LrruConfig::mini_indoor();
            (init_params(&cfg, 0)?, cfg)
        }
    };
    let s = synth_scene(3, 64, 64, &SynthConfig { max_depth_mm: cfg.max_depth_mm, ..SynthConfig::default() })?;
    let input = ModelInput::new(s.rgb.as_ref(), &s.sparse, &cfg)?;
    let res = run_forward(&params, &cfg, &input)?;
    for (t, kf) in res.kernels.iter().enumerate() {
        let st = kernel_scope_stats(kf)[0];
        println!("step {} (scale 1/{}): mean {:.2} px  max {:.2} px", t + 1, (1.0 / cfg.scale_schedule[t]) as usize, st.mean_dist_px, st.max_dist_px);
    }
    Ok(())
}
