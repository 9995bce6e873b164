//! Densify a sparse synthetic depth map with the morphological prefill and
//! compare it against ground truth.

use lrru::data::{synth_scene, Sparsity, SynthConfig};
use lrru::metrics::metrics;
use lrru::prefill::prefill;

fn main() -> lrru::Result<()> {
    for n in [50, 200, 500, 2000] {
        let cfg = SynthConfig { sparsity: Sparsity::Random { n }, ..SynthConfig::default() };
        let sample = synth_scene(1, 64, 64, &cfg)?;
        let dense = prefill(&sample.sparse, cfg.max_depth_mm)?;
        let r = metrics(&dense, &sample.gt)?;
        println!("{n:>5} points: dense {}  rmse {:.1} mm  mae {:.1} mm  delta1 {:.1}%", dense.is_dense(), r.rmse_mm, r.mae_mm, r.delta1);
    }
    Ok(())
}
