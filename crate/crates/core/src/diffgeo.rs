//! Ball operations recorded on a [`Tape`], applied row-wise to point matrices.
//!
//! Each function mirrors one in [`crate::geometry`]; the tests pin the
//! values against those references. [`Manifold::Euclidean`] swaps every
//! operation for its zero-curvature limit (distance `2|x - y|`, tangent
//! projection `y - x`, arithmetic means, no clipping).

use crate::autodiff::{AutodiffError, Func, Result, Tape, Tensor, Var};
use crate::geometry::BallConfig;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Manifold {
    Poincare(BallConfig),
    Euclidean,
}

impl Manifold {
    pub fn curvature(&self) -> Option<f64> {
        match self {
            Manifold::Poincare(cfg) => Some(cfg.c()),
            Manifold::Euclidean => None,
        }
    }
}

/// Row-wise norm clipping (identity in Euclidean mode).
pub fn clip(tape: &mut Tape, x: Var, manifold: Manifold) -> Var {
    match manifold {
        Manifold::Poincare(cfg) => tape.clip_rows(x, cfg.clip_norm()),
        Manifold::Euclidean => x,
    }
}

/// Row-wise Möbius addition `x_r (+) y_r`.
pub fn mobius_add_rows(tape: &mut Tape, x: Var, y: Var, c: f64) -> Result<Var> {
    let xy = tape.row_dot(x, y)?;
    let xx = tape.row_sq_norm(x);
    let yy = tape.row_sq_norm(y);
    let lin = tape.affine(xy, 2.0 * c, 1.0);
    let cyy = tape.scale(yy, c);
    let coef_x = tape.add(lin, cyy)?;
    let coef_y = tape.affine(xx, -c, 1.0);
    let prod = tape.mul(xx, yy)?;
    let prod = tape.scale(prod, c * c);
    let den = tape.add(lin, prod)?;
    let inv = tape.recip(den);
    let ax = tape.mul(coef_x, inv)?;
    let by = tape.mul(coef_y, inv)?;
    let left = tape.mul_col(x, ax)?;
    let right = tape.mul_col(y, by)?;
    tape.add(left, right)
}

/// Distances between all rows of `a` and all rows of `b`.
pub fn pairwise(tape: &mut Tape, a: Var, b: Var, manifold: Manifold) -> Result<Var> {
    tape.pairwise_dist(a, b, manifold.curvature())
}

pub fn poincare_to_klein_rows(tape: &mut Tape, x: Var, c: f64) -> Result<Var> {
    let s = tape.row_sq_norm(x);
    let den = tape.affine(s, c, 1.0);
    let f = tape.map(den, Func::Recip);
    let f = tape.scale(f, 2.0);
    tape.mul_col(x, f)
}

pub fn klein_to_poincare_rows(tape: &mut Tape, k: Var, c: f64) -> Result<Var> {
    let s = tape.row_sq_norm(k);
    let inner = tape.affine(s, -c, 1.0);
    let root = tape.sqrt(inner);
    let den = tape.affine(root, 1.0, 1.0);
    let f = tape.recip(den);
    tape.mul_col(k, f)
}

fn group_matrix(rows: usize, group_size: usize) -> Tensor {
    let groups = rows / group_size;
    let mut m = Tensor::zeros(groups, rows);
    for g in 0..groups {
        for j in 0..group_size {
            m.set(g, g * group_size + j, 1.0);
        }
    }
    m
}

/// Einstein midpoint of each consecutive block of `group_size` rows.
///
/// Returns one row per group. In Euclidean mode this is the arithmetic mean.
pub fn midpoint_groups(tape: &mut Tape, x: Var, group_size: usize, manifold: Manifold) -> Result<Var> {
    let rows = tape.value(x).rows();
    if group_size == 0 || rows % group_size != 0 || rows == 0 {
        return Err(AutodiffError::Shape {
            op: "midpoint_groups",
            left: tape.value(x).shape(),
            right: (group_size, 1),
        });
    }
    let groups = tape.constant(group_matrix(rows, group_size));
    match manifold {
        Manifold::Euclidean => {
            let sum = tape.matmul(groups, x)?;
            Ok(tape.scale(sum, 1.0 / group_size as f64))
        }
        Manifold::Poincare(cfg) => {
            let c = cfg.c();
            let k = poincare_to_klein_rows(tape, x, c)?;
            let ks = tape.row_sq_norm(k);
            let inner = tape.affine(ks, -c, 1.0);
            let root = tape.sqrt(inner);
            let gamma = tape.recip(root);
            let weighted = tape.mul_col(k, gamma)?;
            let num = tape.matmul(groups, weighted)?;
            let den = tape.matmul(groups, gamma)?;
            let inv = tape.recip(den);
            let mean = tape.mul_col(num, inv)?;
            klein_to_poincare_rows(tape, mean, c)
        }
    }
}

/// Logarithm map at `base` (1 x C) of every row of `y`.
pub fn log_map_rows(tape: &mut Tape, base: Var, y: Var, manifold: Manifold) -> Result<Var> {
    let n = tape.value(y).rows();
    let xb = tape.repeat_row(base, n)?;
    match manifold {
        Manifold::Euclidean => tape.sub(y, xb),
        Manifold::Poincare(cfg) => {
            let c = cfg.c();
            let neg = tape.neg(xb);
            let m = mobius_add_rows(tape, neg, y, c)?;
            let s = tape.row_sq_norm(m);
            let ratio = tape.map(s, Func::ArtanhRatio { c });
            let scaled = tape.mul_col(m, ratio)?;
            // 2 / lambda_x = 1 - c|x|^2
            let bs = tape.row_sq_norm(base);
            let coef = tape.affine(bs, -c, 1.0);
            tape.scale_by(scaled, coef)
        }
    }
}

/// Exponential map at `base` (1 x C) of every tangent row of `v`.
pub fn exp_map_rows(tape: &mut Tape, base: Var, v: Var, manifold: Manifold) -> Result<Var> {
    let n = tape.value(v).rows();
    let xb = tape.repeat_row(base, n)?;
    match manifold {
        Manifold::Euclidean => tape.add(xb, v),
        Manifold::Poincare(cfg) => {
            let c = cfg.c();
            // lambda_x / 2
            let bs = tape.row_sq_norm(base);
            let inner = tape.affine(bs, -c, 1.0);
            let half_lambda = tape.recip(inner);
            let hl_sq = tape.mul(half_lambda, half_lambda)?;
            let vs = tape.row_sq_norm(v);
            let s = tape.scale_by(vs, hl_sq)?;
            let ratio = tape.map(s, Func::TanhRatio { c });
            let u = tape.mul_col(v, ratio)?;
            let u = tape.scale_by(u, half_lambda)?;
            let out = mobius_add_rows(tape, xb, u, c)?;
            Ok(tape.clip_rows(out, cfg.clip_norm()))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{self, PoincareVec, TangentVec};

    fn cfg() -> BallConfig {
        BallConfig::with_curvature(0.7).unwrap()
    }

    fn pts() -> Vec<Vec<f64>> {
        vec![
            vec![0.1, -0.3, 0.5],
            vec![-0.6, 0.2, 0.1],
            vec![0.4, 0.4, -0.2],
            vec![0.0, 0.05, 0.0],
        ]
    }

    #[test]
    fn mobius_rows_match_reference() {
        let b = cfg();
        let p = pts();
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_rows(&p).unwrap());
        let mut rev = p.clone();
        rev.reverse();
        let y = t.leaf(Tensor::from_rows(&rev).unwrap());
        let out = mobius_add_rows(&mut t, x, y, b.c()).unwrap();
        for r in 0..4 {
            let reference = geometry::mobius_add_c(&p[r], &rev[r], b.c(), 0.0).unwrap();
            for (a, e) in t.value(out).row_slice(r).iter().zip(&reference) {
                assert!((a - e).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn midpoint_and_maps_match_reference() {
        let b = cfg();
        let p = pts();
        let refs: Vec<PoincareVec> = p.iter().map(|v| PoincareVec::from_coords_unchecked(v.clone())).collect();
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_rows(&p).unwrap());
        let m = midpoint_groups(&mut t, x, 4, Manifold::Poincare(b)).unwrap();
        let expected = geometry::einstein_midpoint(&refs, &b).unwrap();
        for (a, e) in t.value(m).data().iter().zip(expected.iter()) {
            assert!((a - e).abs() < 1e-14);
        }

        let base = t.leaf(Tensor::row(p[2].clone()));
        let logs = log_map_rows(&mut t, base, x, Manifold::Poincare(b)).unwrap();
        for r in 0..4 {
            let e = geometry::log_map(&refs[2], &refs[r], &b).unwrap();
            for (a, e) in t.value(logs).row_slice(r).iter().zip(&e.vec) {
                assert!((a - e).abs() < 1e-13, "{a} vs {e}");
            }
        }
        let back = exp_map_rows(&mut t, base, logs, Manifold::Poincare(b)).unwrap();
        for r in 0..4 {
            for (a, e) in t.value(back).row_slice(r).iter().zip(&p[r]) {
                assert!((a - e).abs() < 1e-12);
            }
        }
        let tv = TangentVec::new(refs[2].clone(), vec![0.3, -0.1, 0.2]).unwrap();
        let e = geometry::exp_map(&refs[2], &tv, &b).unwrap();
        let v = t.leaf(Tensor::row(tv.vec.clone()));
        let out = exp_map_rows(&mut t, base, v, Manifold::Poincare(b)).unwrap();
        for (a, e) in t.value(out).data().iter().zip(e.iter()) {
            assert!((a - e).abs() < 1e-14);
        }
    }

    #[test]
    fn euclidean_mode_is_zero_curvature_limit() {
        let tiny = BallConfig::with_curvature(1e-9).unwrap();
        let p = pts();
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_rows(&p).unwrap());
        let base = t.leaf(Tensor::row(p[1].clone()));
        for f in [
            |t: &mut Tape, x: Var, _b: Var, m: Manifold| midpoint_groups(t, x, 2, m),
            |t: &mut Tape, x: Var, b: Var, m: Manifold| log_map_rows(t, b, x, m),
            |t: &mut Tape, x: Var, b: Var, m: Manifold| exp_map_rows(t, b, x, m),
            |t: &mut Tape, x: Var, b: Var, m: Manifold| pairwise(t, b, x, m),
        ] {
            let e = f(&mut t, x, base, Manifold::Euclidean).unwrap();
            let h = f(&mut t, x, base, Manifold::Poincare(tiny)).unwrap();
            for (a, b) in t.value(e).data().iter().zip(t.value(h).data()) {
                assert!((a - b).abs() < 1e-6 * a.abs().max(1.0), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn log_map_at_coincident_point_is_zero() {
        let b = cfg();
        let mut t = Tape::new();
        let x = t.leaf(Tensor::row(vec![0.2, 0.3]));
        let l = log_map_rows(&mut t, x, x, Manifold::Poincare(b)).unwrap();
        assert!(t.value(l).max_abs() < 1e-16);
    }
}
