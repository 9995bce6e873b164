//! One target-dependent update on a depth step edge: predict a kernel from
//! random features, look at its weights and offsets, and apply it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use lrru::graph::Graph;
use lrru::tdu::{apply_update, center_tap, predict_kernel, HeadVars};
use lrru::tensor::Tensor;

fn main() -> lrru::Result<()> {
    let (h, w, k, feat) = (6, 6, 3, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut g = Graph::new();
    let head = HeadVars {
        weight_conv: g.leaf(Tensor::uniform([k * k, 2 * feat, 1, 1], -1.0, 1.0, &mut rng)),
        weight_bias: g.leaf(Tensor::zeros([k * k, 1, 1, 1])),
        offset_conv: g.leaf(Tensor::uniform([2 * (k * k - 1), 2 * feat, 1, 1], -0.5, 0.5, &mut rng)),
        offset_bias: g.leaf(Tensor::zeros([2 * (k * k - 1), 1, 1, 1])),
    };
    let cross = g.constant(Tensor::uniform([1, feat, h, w], -1.0, 1.0, &mut rng));
    let selff = g.constant(Tensor::uniform([1, feat, h, w], -1.0, 1.0, &mut rng));
    let kf = predict_kernel(&mut g, cross, selff, &head, k)?;

    // near wall on the left, far wall on the right
    let depth = Tensor::from_fn([1, 1, h, w], |[_, _, _, x]| if x < w / 2 { 2000.0 } else { 6000.0 });
    let target = g.constant(depth);
    let out = apply_update(&mut g, target, &kf)?;

    let weights = g.value(kf.weights);
    let offsets = g.value(kf.offsets);
    let p = 2 * w + 2;
    let taps: Vec<String> = (0..k * k).map(|j| format!("{:+.3}", weights.plane(0, j)[p])).collect();
    println!("weights at (2,2): [{}], sum {:.1e}", taps.join(" "), (0..k * k).map(|j| weights.plane(0, j)[p]).sum::<f64>());
    let c = center_tap(k);
    println!("center offset ({}, {})", offsets.plane(0, 2 * c)[p], offsets.plane(0, 2 * c + 1)[p]);
    for y in 0..h {
        let row: Vec<String> = (0..w).map(|x| format!("{:7.1}", g.value(out).at([0, 0, y, x]))).collect();
        println!("{}", row.join(" "));
    }
    Ok(())
}
