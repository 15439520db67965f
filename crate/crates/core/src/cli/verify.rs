//! Self-check suite: geometry identities, tape gradients against central
//! differences, and the set metrics against brute-force scans.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{finite_diff_check, Tape, Tensor};
use crate::diffgeo::{self, Manifold};
use crate::geometry::{
    conformal_factor, einstein_midpoint, exp_map, geodesic_distance, geodesic_distance_c, klein_to_poincare,
    log_map, mobius_add_c, norm, poincare_to_klein, BallConfig, PoincareVec,
};
use crate::metrics::{hausdorff_bidirectional, hausdorff_one_sided, p2s_max, p2s_min, pairwise_matrix, FeatureMap};
use crate::seeding::{rng_for, Stream};

/// Möbius addition under test, `(x, y, c) -> x (+) y`.
pub type MobiusFn = fn(&[f64], &[f64], f64) -> Vec<f64>;

pub fn reference_mobius(x: &[f64], y: &[f64], c: f64) -> Vec<f64> {
    mobius_add_c(x, y, c, 0.0).expect("denominator is positive inside the ball")
}

pub const CURVATURES: [f64; 5] = [0.01, 0.05, 0.1, 0.5, 0.7];

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub tolerance: f64,
    /// Largest error seen; relative or absolute as stated by `name`.
    pub max_error: f64,
    pub cases: usize,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.max_error <= self.tolerance
    }
}

#[derive(Debug, Clone)]
pub struct VerifyOptions {
    pub seed: u64,
    /// Random (x, y, c) triples for the identity checks.
    pub triples: usize,
    pub mobius: MobiusFn,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            triples: 10_000,
            mobius: reference_mobius,
        }
    }
}

/// Point with a Gaussian direction and radius uniform in `[0, max_frac)` of
/// the ball radius.
pub fn random_ball_point(rng: &mut impl Rng, dim: usize, c: f64, max_frac: f64) -> Vec<f64> {
    let dir: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    let n = norm(&dir).max(1e-300);
    let r = rng.random::<f64>() * max_frac / c.sqrt();
    dir.iter().map(|v| v * r / n).collect()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

struct Acc {
    name: &'static str,
    tolerance: f64,
    max_error: f64,
    cases: usize,
}

impl Acc {
    fn new(name: &'static str, tolerance: f64) -> Self {
        Self {
            name,
            tolerance,
            max_error: 0.0,
            cases: 0,
        }
    }

    fn add(&mut self, err: f64) {
        self.cases += 1;
        // NaN counts as a failure
        if err.is_nan() {
            self.max_error = f64::INFINITY;
        } else {
            self.max_error = self.max_error.max(err);
        }
    }

    fn done(self) -> Check {
        Check {
            name: self.name,
            tolerance: self.tolerance,
            max_error: self.max_error,
            cases: self.cases,
        }
    }
}

fn geometry_checks(opts: &VerifyOptions, out: &mut Vec<Check>) {
    let mob = opts.mobius;
    let mut right_id = Acc::new("mobius right identity x+0=x (abs)", 1e-12);
    let mut left_id = Acc::new("mobius left identity 0+x=x (abs)", 1e-12);
    let mut inverse = Acc::new("mobius left inverse (-x)+x=0 (abs)", 1e-12);
    let mut sym = Acc::new("distance symmetry (abs)", 1e-12);
    let mut ident = Acc::new("distance identity d(x,x)=0 (abs)", 1e-12);
    let mut klein = Acc::new("klein roundtrip (abs)", 1e-10);
    let mut explog = Acc::new("exp(log) = id (abs)", 1e-8);
    let mut lognorm = Acc::new("lambda*|log_x y| = d(x,y) (rel)", 1e-9);
    let mut rng = rng_for(opts.seed, Stream::Verify, 0);
    for i in 0..opts.triples {
        let c = CURVATURES[i % CURVATURES.len()];
        let cfg = BallConfig::with_curvature(c).expect("grid curvature");
        let dim = 2 + i % 7;
        let x = random_ball_point(&mut rng, dim, c, 0.9);
        let y = random_ball_point(&mut rng, dim, c, 0.9);
        let zero = vec![0.0; dim];
        let neg_x: Vec<f64> = x.iter().map(|v| -v).collect();
        right_id.add(max_abs_diff(&mob(&x, &zero, c), &x));
        left_id.add(max_abs_diff(&mob(&zero, &x, c), &x));
        inverse.add(norm(&mob(&neg_x, &x, c)));

        let px = PoincareVec::from_coords_unchecked(x.clone());
        let py = PoincareVec::from_coords_unchecked(y.clone());
        let dxy = geodesic_distance(&px, &py, &cfg).unwrap_or(f64::NAN);
        let dyx = geodesic_distance(&py, &px, &cfg).unwrap_or(f64::NAN);
        sym.add((dxy - dyx).abs());
        ident.add(geodesic_distance(&px, &px, &cfg).unwrap_or(f64::NAN));
        klein.add(max_abs_diff(&klein_to_poincare(&poincare_to_klein(&px, &cfg), &cfg), &x));
        match log_map(&px, &py, &cfg) {
            Ok(v) => {
                let back = exp_map(&px, &v, &cfg).map(|p| max_abs_diff(&p, &y)).unwrap_or(f64::NAN);
                explog.add(back);
                lognorm.add(rel(conformal_factor(&px, &cfg) * norm(&v.vec), dxy));
            }
            Err(_) => {
                explog.add(f64::NAN);
                lognorm.add(f64::NAN);
            }
        }
    }
    out.extend([right_id, left_id, inverse, sym, ident, klein, explog, lognorm].map(Acc::done));

    let mut limit_d = Acc::new("c=1e-8 distance vs 2|x-y| (rel)", 1e-4);
    let mut limit_m = Acc::new("c=1e-8 mobius vs x+y (abs)", 1e-6);
    let c = 1e-8;
    for _ in 0..1000 {
        let x: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let diff: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a - b).collect();
        let d = geodesic_distance_c(&x, &y, c, 0.0).unwrap_or(f64::NAN);
        limit_d.add(rel(d, 2.0 * norm(&diff)));
        let sum: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a + b).collect();
        limit_m.add(max_abs_diff(&mob(&x, &y, c), &sum));
    }
    out.push(limit_d.done());
    out.push(limit_m.done());

    let mut perm = Acc::new("midpoint permutation invariance (abs)", 0.0);
    let mut same = Acc::new("midpoint of repeated point (abs)", 1e-12);
    for i in 0..200 {
        let c = CURVATURES[i % CURVATURES.len()];
        let cfg = BallConfig::with_curvature(c).expect("grid curvature");
        let pts: Vec<PoincareVec> = (0..5)
            .map(|_| PoincareVec::from_coords_unchecked(random_ball_point(&mut rng, 3, c, 0.9)))
            .collect();
        let mut rev = pts.clone();
        rev.reverse();
        let a = einstein_midpoint(&pts, &cfg).map(|p| p.into_coords());
        let b = einstein_midpoint(&rev, &cfg).map(|p| p.into_coords());
        match (a, b) {
            (Ok(a), Ok(b)) => perm.add(max_abs_diff(&a, &b)),
            _ => perm.add(f64::NAN),
        }
        let rep = vec![pts[0].clone(); 3];
        same.add(einstein_midpoint(&rep, &cfg).map(|m| max_abs_diff(&m, &pts[0])).unwrap_or(f64::NAN));
    }
    out.push(perm.done());
    out.push(same.done());
}

fn gradient_checks(opts: &VerifyOptions, out: &mut Vec<Check>) {
    let tol = 1e-3;
    let step = 1e-5;
    let mut rng = rng_for(opts.seed, Stream::Verify, 1);
    let mut dist = Acc::new("gradient: geodesic distance (rel)", tol);
    let mut mid = Acc::new("gradient: einstein midpoint (rel)", tol);
    let mut logm = Acc::new("gradient: log map (rel)", tol);
    let mut mob = Acc::new("gradient: mobius addition (rel)", tol);
    for i in 0..20 {
        let c = CURVATURES[i % CURVATURES.len()];
        let cfg = BallConfig::with_curvature(c).expect("grid curvature");
        let m = Manifold::Poincare(cfg);
        let rows = |rng: &mut rand_chacha::ChaCha8Rng, n: usize| {
            let v: Vec<Vec<f64>> = (0..n).map(|_| random_ball_point(rng, 3, c, 0.8)).collect();
            Tensor::from_rows(&v).expect("equal widths")
        };
        let x = rows(&mut rng, 3);
        let y = rows(&mut rng, 2);
        let weights = Tensor::new(3, 2, (0..6).map(|_| rng.random_range(0.5..1.5)).collect()).expect("shape");
        let record = |acc: &mut Acc, r: crate::autodiff::Result<crate::autodiff::GradCheckReport>| match r {
            Ok(r) => acc.add(r.max_rel_error),
            Err(_) => acc.add(f64::NAN),
        };
        record(
            &mut dist,
            finite_diff_check(
                |t: &mut Tape, v| {
                    let yv = t.constant(y.clone());
                    let d = diffgeo::pairwise(t, v, yv, m)?;
                    let w = t.constant(weights.clone());
                    let p = t.mul(d, w)?;
                    Ok(t.sum(p))
                },
                &x,
                step,
                tol,
            ),
        );
        let w3 = Tensor::new(1, 3, (0..3).map(|_| rng.random_range(0.5..1.5)).collect()).expect("shape");
        record(
            &mut mid,
            finite_diff_check(
                |t: &mut Tape, v| {
                    let p = diffgeo::midpoint_groups(t, v, 3, m)?;
                    let w = t.constant(w3.clone());
                    let p = t.mul(p, w)?;
                    Ok(t.sum(p))
                },
                &x,
                step,
                tol,
            ),
        );
        let base = Tensor::from_rows(&[x.row_slice(0).to_vec()]).expect("row");
        record(
            &mut logm,
            finite_diff_check(
                |t: &mut Tape, v| {
                    let b = t.constant(base.clone());
                    let l = diffgeo::log_map_rows(t, b, v, m)?;
                    let w = t.constant(Tensor::new(2, 3, weights.data().to_vec()).expect("shape"));
                    let p = t.mul(l, w)?;
                    Ok(t.sum(p))
                },
                &y,
                step,
                tol,
            ),
        );
        let partner = Tensor::from_rows(&[y.row_slice(0).to_vec(), y.row_slice(1).to_vec(), y.row_slice(0).to_vec()])
            .expect("rows");
        record(
            &mut mob,
            finite_diff_check(
                |t: &mut Tape, v| {
                    let p = t.constant(partner.clone());
                    let s = diffgeo::mobius_add_rows(t, v, p, c)?;
                    let w = t.constant(Tensor::new(3, 3, (0..9).map(|k| 0.3 + 0.1 * k as f64).collect()).expect("shape"));
                    let p = t.mul(s, w)?;
                    Ok(t.sum(p))
                },
                &x,
                step,
                tol,
            ),
        );
    }
    out.extend([dist, mid, logm, mob].map(Acc::done));
}

fn metric_checks(opts: &VerifyOptions, out: &mut Vec<Check>) {
    let mut rng = rng_for(opts.seed, Stream::Verify, 2);
    let mut pair = Acc::new("pairwise matrix vs scan (abs)", 0.0);
    let mut bounds = Acc::new("p2s min/max vs scan (abs)", 0.0);
    let mut haus = Acc::new("hausdorff vs scan (abs)", 0.0);
    for i in 0..100 {
        let c = CURVATURES[i % CURVATURES.len()];
        let cfg = BallConfig::with_curvature(c).expect("grid curvature");
        let (h, w) = (1 + i % 2, 1 + i % 3);
        let set = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<PoincareVec> {
            (0..h * w)
                .map(|_| PoincareVec::from_coords_unchecked(random_ball_point(rng, 3, c, 0.9)))
                .collect()
        };
        let a = set(&mut rng);
        let b = set(&mut rng);
        let d = |p: &PoincareVec, q: &PoincareVec| geodesic_distance(p, q, &cfg).unwrap_or(f64::NAN);
        let fa = FeatureMap::new(a.clone(), h, w, &cfg);
        let fb = FeatureMap::new(b.clone(), h, w, &cfg);
        match (fa, fb) {
            (Ok(fa), Ok(fb)) => match pairwise_matrix(&fa, &fb, &cfg) {
                Ok(m) => {
                    let mut err: f64 = 0.0;
                    for (r, p) in a.iter().enumerate() {
                        for (s, q) in b.iter().enumerate() {
                            err = err.max((m.get(r, s) - d(p, q)).abs());
                        }
                    }
                    pair.add(err);
                }
                Err(_) => pair.add(f64::NAN),
            },
            _ => pair.add(f64::NAN),
        }
        let p = &a[0];
        let scan: Vec<f64> = b.iter().map(|q| d(p, q)).collect();
        let lo = scan.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = scan.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let got_lo = p2s_min(p, &b, &cfg).unwrap_or(f64::NAN);
        let got_hi = p2s_max(p, &b, &cfg).unwrap_or(f64::NAN);
        bounds.add((got_lo - lo).abs().max((got_hi - hi).abs()));
        let one = |x: &[PoincareVec], y: &[PoincareVec]| {
            x.iter()
                .map(|p| y.iter().map(|q| d(p, q)).fold(f64::INFINITY, f64::min))
                .fold(f64::NEG_INFINITY, f64::max)
        };
        let h_ab = one(&a, &b);
        let h_ba = one(&b, &a);
        let got_one = hausdorff_one_sided(&a, &b, &cfg).unwrap_or(f64::NAN);
        let got_two = hausdorff_bidirectional(&a, &b, &cfg).unwrap_or(f64::NAN);
        haus.add((got_one - h_ab).abs().max((got_two - h_ab.max(h_ba)).abs()));
    }
    out.extend([pair, bounds, haus].map(Acc::done));
}

/// Runs every check of the suite.
pub fn run_suite(opts: &VerifyOptions) -> Vec<Check> {
    let mut out = Vec::new();
    geometry_checks(opts, &mut out);
    gradient_checks(opts, &mut out);
    metric_checks(opts, &mut out);
    out
}

/// One line per check with its tolerance and the worst error observed.
pub fn format_report(checks: &[Check]) -> String {
    let mut s = String::new();
    for c in checks {
        s.push_str(&format!(
            "{} {:<44} cases={:<6} max_error={:.3e} tolerance={:.1e}\n",
            if c.passed() { "PASS" } else { "FAIL" },
            c.name,
            c.cases,
            c.max_error,
            c.tolerance
        ));
    }
    let failed = checks.iter().filter(|c| !c.passed()).count();
    s.push_str(&format!("{} checks, {} failed\n", checks.len(), failed));
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flipped(x: &[f64], y: &[f64], c: f64) -> Vec<f64> {
        let xy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
        let xx: f64 = x.iter().map(|a| a * a).sum();
        let yy: f64 = y.iter().map(|a| a * a).sum();
        let a = 1.0 - 2.0 * c * xy + c * yy;
        let b = 1.0 - c * xx;
        let den = 1.0 + 2.0 * c * xy + c * c * xx * yy;
        x.iter().zip(y).map(|(xi, yi)| (a * xi + b * yi) / den).collect()
    }

    #[test]
    fn clean_suite_passes() {
        let checks = run_suite(&VerifyOptions {
            triples: 2000,
            ..VerifyOptions::default()
        });
        for c in &checks {
            assert!(c.passed(), "{c:?}");
        }
    }

    #[test]
    fn sign_flip_is_caught() {
        let checks = run_suite(&VerifyOptions {
            triples: 500,
            mobius: flipped,
            ..VerifyOptions::default()
        });
        let inv = checks.iter().find(|c| c.name.starts_with("mobius left inverse")).unwrap();
        assert!(!inv.passed());
    }
}
