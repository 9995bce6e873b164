//! Central finite-difference checks of analytic gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tdu::{self, HeadVars};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-4;

/// Move values within `10 * eps` of an integer to `integer + 10 * eps`, so a
/// central difference never straddles an integer kink.
pub fn jitter_integer_kinks(t: &mut Tensor, eps: f64) {
    for v in t.data_mut() {
        let r = v.round();
        if (*v - r).abs() < 10.0 * eps {
            *v = r + 10.0 * eps;
        }
    }
}

/// Max over all input elements of `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    grad_check_with_kinks(f, inputs, &[], eps)
}

/// [`grad_check`] where `kinked[i]` marks inputs that are non-differentiable
/// at integer values (sampling coordinates, activations at zero).
pub fn grad_check_with_kinks<F>(f: F, inputs: &[Tensor], kinked: &[bool], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut inputs = inputs.to_vec();
    for (t, &k) in inputs.iter_mut().zip(kinked) {
        if k {
            jitter_integer_kinks(t, eps);
        }
    }

    let mut graph = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| graph.leaf(t.clone().with_grad())).collect();
    let out = f(&mut graph, &vars)?;
    graph.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| graph.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; graph.value(v).len()]))
        .collect();

    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        g.value(out).item()
    };

    let mut worst = 0.0f64;
    for i in 0..inputs.len() {
        for j in 0..inputs[i].len() {
            let orig = inputs[i].data()[j];
            inputs[i].data_mut()[j] = orig + eps;
            let plus = eval(&inputs)?;
            inputs[i].data_mut()[j] = orig - eps;
            let minus = eval(&inputs)?;
            inputs[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[i][j];
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OpCheck {
    pub op: String,
    pub max_rel_err: f64,
}

/// `sum(x * probe)` with a fixed pseudo-random probe, so every output
/// element gets a distinct upstream gradient.
pub fn probe_sum(graph: &mut Graph, x: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let probe = graph.constant(Tensor::uniform(graph.shape(x), -1.0, 1.0, &mut rng));
    let prod = graph.mul(x, probe)?;
    Ok(graph.sum(prod))
}

/// Run every differentiable operator, plus the composed kernel prediction
/// and update, through the finite-difference harness.
pub fn run_op_suite(seed: u64) -> Result<Vec<OpCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = DEFAULT_EPS;
    let mut out = Vec::new();
    let mut record = |op: &str, err: f64| out.push(OpCheck { op: op.to_string(), max_rel_err: err });
    let mut rand = |shape: [usize; 4]| Tensor::uniform(shape, -2.0, 2.0, &mut rng);

    let x = rand([2, 3, 5, 5]);
    let w = rand([4, 3, 3, 3]);
    let b = rand([4, 1, 1, 1]);
    record(
        "conv2d",
        grad_check(
            |g, v| {
                let y = g.conv2d(v[0], v[1], v[2], 1, 1)?;
                probe_sum(g, y, 1)
            },
            &[x, w, b],
            eps,
        )?,
    );

    let x = rand([2, 2, 8, 8]);
    let w = rand([3, 2, 3, 3]);
    let b = rand([3, 1, 1, 1]);
    record(
        "conv2d_stride2",
        grad_check(
            |g, v| {
                let y = g.conv2d(v[0], v[1], v[2], 2, 1)?;
                probe_sum(g, y, 2)
            },
            &[x, w, b],
            eps,
        )?,
    );

    let img = rand([2, 1, 6, 6]);
    let pos = Tensor::from_fn([2, 4, 6, 6], |[n, c, y, x]| {
        let base = if c % 2 == 0 { y } else { x } as f64;
        (base + 0.37 * ((n * 7 + c * 5 + y * 3 + x) % 11) as f64 - 1.7).clamp(0.05, 4.95)
    });
    record(
        "grid_sample_bilinear",
        grad_check_with_kinks(
            |g, v| {
                let y = g.grid_sample_bilinear(v[0], v[1])?;
                probe_sum(g, y, 3)
            },
            &[img.clone(), pos],
            &[false, true],
            eps,
        )?,
    );
    let wide = Tensor::from_fn([2, 4, 6, 6], |[n, c, y, x]| {
        let base = if c % 2 == 0 { y } else { x } as f64;
        base + 0.9 * ((n * 5 + c * 3 + y + 2 * x) % 9) as f64 - 3.6
    });
    record(
        "grid_sample_bilinear_clamped",
        grad_check_with_kinks(
            |g, v| {
                let y = g.grid_sample_bilinear(v[0], v[1])?;
                probe_sum(g, y, 4)
            },
            &[img, wide],
            &[false, true],
            eps,
        )?,
    );

    let x = rand([2, 3, 4, 4]);
    record(
        "sigmoid",
        grad_check(
            |g, v| {
                let y = g.sigmoid(v[0]);
                probe_sum(g, y, 5)
            },
            &[x.clone()],
            eps,
        )?,
    );
    record(
        "mean_subtract_channels",
        grad_check(
            |g, v| {
                let y = g.mean_subtract_channels(v[0]);
                probe_sum(g, y, 6)
            },
            &[x.clone()],
            eps,
        )?,
    );
    record(
        "leaky_relu",
        grad_check_with_kinks(
            |g, v| {
                let y = g.leaky_relu(v[0], 0.1);
                probe_sum(g, y, 7)
            },
            &[x.clone()],
            &[true],
            eps,
        )?,
    );
    record(
        "abs",
        grad_check_with_kinks(
            |g, v| {
                let y = g.abs(v[0]);
                probe_sum(g, y, 8)
            },
            &[x.clone()],
            &[true],
            eps,
        )?,
    );
    record(
        "square",
        grad_check(
            |g, v| {
                let y = g.square(v[0]);
                probe_sum(g, y, 9)
            },
            &[x.clone()],
            eps,
        )?,
    );
    record(
        "scale",
        grad_check(
            |g, v| {
                let y = g.scale(v[0], -1.75);
                probe_sum(g, y, 10)
            },
            &[x.clone()],
            eps,
        )?,
    );
    let x2 = rand([2, 3, 4, 4]);
    for (name, which) in [("add", 0), ("sub", 1), ("mul", 2)] {
        record(
            name,
            grad_check(
                |g, v| {
                    let y = match which {
                        0 => g.add(v[0], v[1])?,
                        1 => g.sub(v[0], v[1])?,
                        _ => g.mul(v[0], v[1])?,
                    };
                    probe_sum(g, y, 11)
                },
                &[x.clone(), x2.clone()],
                eps,
            )?,
        );
    }
    let x3 = rand([2, 2, 4, 4]);
    record(
        "concat_channels",
        grad_check(
            |g, v| {
                let y = g.concat_channels(v[0], v[1])?;
                probe_sum(g, y, 12)
            },
            &[x.clone(), x3],
            eps,
        )?,
    );
    record(
        "slice_channels",
        grad_check(
            |g, v| {
                let y = g.slice_channels(v[0], 1, 2)?;
                probe_sum(g, y, 13)
            },
            &[x.clone()],
            eps,
        )?,
    );
    record(
        "sum_channels",
        grad_check(
            |g, v| {
                let y = g.sum_channels(v[0]);
                probe_sum(g, y, 14)
            },
            &[x.clone()],
            eps,
        )?,
    );
    let small = rand([2, 3, 3, 2]);
    for factor in [2usize, 4] {
        record(
            &format!("upsample_bilinear_x{factor}"),
            grad_check(
                |g, v| {
                    let y = g.upsample_bilinear(v[0], factor)?;
                    probe_sum(g, y, 15)
                },
                &[small.clone()],
                eps,
            )?,
        );
    }
    record(
        "resize_bilinear",
        grad_check(
            |g, v| {
                let y = g.resize_bilinear(v[0], 5, 7)?;
                probe_sum(g, y, 17)
            },
            &[small.clone()],
            eps,
        )?,
    );
    record("sum", grad_check(|g, v| Ok(g.sum(v[0])), &[x], eps)?);

    let x = rand([2, 2, 6, 6]);
    let w = rand([3, 2, 3, 3]);
    let b = rand([3, 1, 1, 1]);
    record(
        "conv2d_sigmoid_sum",
        grad_check(
            |g, v| {
                let y = g.conv2d(v[0], v[1], v[2], 1, 1)?;
                let s = g.sigmoid(y);
                Ok(g.sum(s))
            },
            &[x, w, b],
            eps,
        )?,
    );

    let (cross_c, self_c, k) = (4, 2, 3);
    let taps = k * k;
    let inputs = vec![
        rand([1, cross_c, 6, 6]),
        rand([1, self_c, 6, 6]),
        Tensor::uniform([1, 1, 6, 6], 0.5, 3.0, &mut rng),
        Tensor::uniform([taps, cross_c + self_c, 1, 1], -0.5, 0.5, &mut rng),
        Tensor::uniform([taps, 1, 1, 1], -0.5, 0.5, &mut rng),
        Tensor::uniform([2 * (taps - 1), cross_c + self_c, 1, 1], -0.4, 0.4, &mut rng),
        Tensor::uniform([2 * (taps - 1), 1, 1, 1], -0.4, 0.4, &mut rng),
    ];
    record(
        "tdu_predict_apply",
        grad_check(
            |g, v| {
                let head = HeadVars { weight_conv: v[3], weight_bias: v[4], offset_conv: v[5], offset_bias: v[6] };
                let kf = tdu::predict_kernel(g, v[0], v[1], &head, k)?;
                let out = tdu::apply_update(g, v[2], &kf)?;
                probe_sum(g, out, 16)
            },
            &inputs,
            eps,
        )?,
    );
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_zero_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::uniform([1, 2, 3, 3], -2.0, 2.0, &mut rng);
        let err = grad_check(|g, v| Ok(g.sum(v[0])), &[x], DEFAULT_EPS).unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn sigmoid_sum_within_one_in_a_million() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::uniform([2, 2, 3, 3], -2.0, 2.0, &mut rng);
        let err = grad_check(
            |g, v| {
                let s = g.sigmoid(v[0]);
                Ok(g.sum(s))
            },
            &[x],
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn jitter_moves_values_off_integers() {
        let mut t = Tensor::new([1, 1, 1, 4], vec![2.0, 3.0000001, 1.5, -1.0]).unwrap();
        jitter_integer_kinks(&mut t, 1e-4);
        assert_eq!(t.data(), &[2.001, 3.001, 1.5, -0.999]);
    }

    #[test]
    fn integer_positions_need_jitter() {
        // positions on the lattice: the one-sided analytic derivative disagrees
        // with a central difference unless the harness jitters them
        let img = Tensor::from_fn([1, 1, 4, 4], |[_, _, y, x]| ((y * 4 + x) as f64).powi(2));
        let pos = Tensor::from_fn([1, 2, 4, 4], |[_, c, y, x]| if c == 0 { y.min(2) as f64 } else { x.min(2) as f64 });
        let f = |g: &mut Graph, v: &[Var]| {
            let y = g.grid_sample_bilinear(v[0], v[1])?;
            probe_sum(g, y, 0)
        };
        let raw = grad_check(f, &[img.clone(), pos.clone()], DEFAULT_EPS).unwrap();
        let jittered = grad_check_with_kinks(f, &[img, pos], &[false, true], DEFAULT_EPS).unwrap();
        assert!(raw > 1e-2);
        assert!(jittered < 1e-6, "{jittered}");
    }

    #[test]
    fn suite_passes() {
        for check in run_op_suite(7).unwrap() {
            assert!(check.max_rel_err < 1e-4, "{} {}", check.op, check.max_rel_err);
        }
    }
}
