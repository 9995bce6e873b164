//! Finite-difference check of every differentiable op.

fn main() -> lrru::Result<()> {
    let seed = std::env::args().nth(1).map(|s| s.parse().expect("seed")).unwrap_or(0);
    let checks = lrru::gradcheck::run_op_suite(seed)?;
    for c in &checks {
        println!("{:<28} {:.3e}", c.op, c.max_rel_err);
    }
    let worst = checks.iter().map(|c| c.max_rel_err).fold(0.0, f64::max);
    println!("worst {worst:.3e}");
    Ok(())
}
