//! Render a few synthetic scenes and write them as a dataset directory.
//!
//! cargo run --release --example synth_dataset -- OUT_DIR [COUNT]

use std::path::PathBuf;

use lrru::data::{synth_scene, write_dataset, SynthConfig};

fn main() -> lrru::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "synth_out".into()));
    let count: u64 = args.next().map(|c| c.parse().expect("COUNT must be a number")).unwrap_or(4);

    let cfg = SynthConfig::default();
    let samples = (0..count).map(|seed| synth_scene(seed, 64, 64, &cfg)).collect::<lrru::Result<Vec<_>>>()?;
    for (i, s) in samples.iter().enumerate() {
        let (lo, hi) = s.gt.valid_range().expect("synthetic ground truth is dense");
        println!("scene {i}: {} sparse points, depth {lo:.0}..{hi:.0} mm", s.sparse.valid_count());
    }
    write_dataset(&out, &samples)?;
    println!("wrote {} (rgb/, sparse/, gt/)", out.display());
    Ok(())
}
