//! Reverse-mode gradients of ball operations against central differences.

use app2s::autodiff::{finite_diff_check, Result, Tape, Tensor};
use app2s::diffgeo::{self, Manifold};
use app2s::geometry::BallConfig;

fn main() -> Result<()> {
    let cfg = BallConfig::with_curvature(0.7).expect("valid curvature");
    let m = Manifold::Poincare(cfg);
    let x = Tensor::from_rows(&[vec![0.2, -0.3, 0.1], vec![-0.4, 0.1, 0.5], vec![0.0, 0.6, -0.2]])?;
    let y = Tensor::from_rows(&[vec![0.5, 0.2, -0.1]])?;

    let report = finite_diff_check(
        |t: &mut Tape, v| {
            let yc = t.constant(y.clone());
            let d = diffgeo::pairwise(t, v, yc, m)?;
            Ok(t.sum(d))
        },
        &x,
        1e-5,
        1e-3,
    )?;
    println!("sum of distances: max rel error {:.2e} over {} coordinates", report.max_rel_error, report.n_checked());

    let report = finite_diff_check(
        |t: &mut Tape, v| {
            let mid = diffgeo::midpoint_groups(t, v, 3, m)?;
            let w = t.constant(Tensor::row(vec![1.0, -2.0, 0.5]));
            let p = t.mul(mid, w)?;
            Ok(t.sum(p))
        },
        &x,
        1e-5,
        1e-3,
    )?;
    println!("einstein midpoint: max rel error {:.2e}, passed {}", report.max_rel_error, report.passed());
    Ok(())
}
