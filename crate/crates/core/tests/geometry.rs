use app2s::geometry::*;
use proptest::prelude::*;

const GRID: [f64; 5] = [0.01, 0.05, 0.1, 0.5, 0.7];

fn point(c: f64, raw: &[f64], frac: f64) -> Vec<f64> {
    // squash an unconstrained vector into the ball at up to `frac` of the radius
    let n = norm(raw);
    if n == 0.0 {
        return raw.to_vec();
    }
    let r = frac * n.tanh() / c.sqrt();
    raw.iter().map(|v| v * r / n).collect()
}

fn pv(v: Vec<f64>) -> PoincareVec {
    PoincareVec::from_coords_unchecked(v)
}

fn pair() -> impl Strategy<Value = (f64, Vec<f64>, Vec<f64>)> {
    (0usize..5, 1usize..6).prop_flat_map(|(ci, dim)| {
        let c = GRID[ci];
        (
            Just(c),
            prop::collection::vec(-3.0f64..3.0, dim),
            prop::collection::vec(-3.0f64..3.0, dim),
        )
            .prop_map(|(c, a, b)| (c, point(c, &a, 0.95), point(c, &b, 0.95)))
    })
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

proptest! {
    #[test]
    fn mobius_identities((c, x, y) in pair()) {
        let cfg = BallConfig::with_curvature(c).unwrap();
        let zero = pv(vec![0.0; x.len()]);
        let (px, py) = (pv(x.clone()), pv(y.clone()));
        prop_assert!(close(&mobius_add(&px, &zero, &cfg).unwrap(), &x, 1e-12));
        prop_assert!(close(&mobius_add(&zero, &px, &cfg).unwrap(), &x, 1e-12));
        prop_assert!(norm(&mobius_add(&px.neg(), &px, &cfg).unwrap()) < 1e-12);
        // left cancellation (-x) + (x + y) = y, loose since it compounds rounding near the boundary
        let s = mobius_add(&px, &py, &cfg).unwrap();
        let back = mobius_add(&px.neg(), &s, &cfg).unwrap();
        prop_assert!(close(&back, &y, 1e-8 / c.sqrt()));
    }

    #[test]
    fn distance_is_a_symmetric_metric((c, x, y) in pair()) {
        let cfg = BallConfig::with_curvature(c).unwrap();
        let (px, py) = (pv(x), pv(y));
        let d = geodesic_distance(&px, &py, &cfg).unwrap();
        prop_assert!(d >= 0.0);
        prop_assert!((d - geodesic_distance(&py, &px, &cfg).unwrap()).abs() < 1e-12 * d.max(1.0));
        prop_assert!(geodesic_distance(&px, &px, &cfg).unwrap() < 1e-12);
    }

    #[test]
    fn triangle_inequality((c, x, y) in pair(), z in prop::collection::vec(-3.0f64..3.0, 5)) {
        let cfg = BallConfig::with_curvature(c).unwrap();
        let z = point(c, &z[..x.len()], 0.95);
        let d = |a: &[f64], b: &[f64]| geodesic_distance(&pv(a.to_vec()), &pv(b.to_vec()), &cfg).unwrap();
        prop_assert!(d(&x, &y) <= d(&x, &z) + d(&z, &y) + 1e-9);
    }

    #[test]
    fn klein_roundtrip((c, x, _y) in pair()) {
        let cfg = BallConfig::with_curvature(c).unwrap();
        let k = poincare_to_klein(&pv(x.clone()), &cfg);
        prop_assert!(c * sq_norm(&k) < 1.0);
        prop_assert!(close(&klein_to_poincare(&k, &cfg), &x, 1e-10));
    }

    #[test]
    fn exp_inverts_log((c, x, y) in pair()) {
        let cfg = BallConfig::with_curvature(c).unwrap();
        let (px, py) = (pv(x), pv(y.clone()));
        let v = log_map(&px, &py, &cfg).unwrap();
        prop_assert!(close(&exp_map(&px, &v, &cfg).unwrap(), &y, 1e-8));
        // the Riemannian norm of the projection is the geodesic distance
        let d = geodesic_distance(&px, &py, &cfg).unwrap();
        let r = conformal_factor(&px, &cfg) * norm(&v.vec);
        prop_assert!((r - d).abs() <= 1e-9 * d.max(1e-12));
    }

    #[test]
    fn origin_maps_agree_with_general_maps((c, _x, y) in pair()) {
        let cfg = BallConfig::with_curvature(c).unwrap();
        let zero = pv(vec![0.0; y.len()]);
        let general = log_map(&zero, &pv(y.clone()), &cfg).unwrap();
        let at_zero = log_map_zero(&pv(y.clone()), &cfg).unwrap();
        prop_assert!(close(&general.vec, &at_zero, 1e-9));
        prop_assert!(close(&exp_map_zero(&at_zero, &cfg), &y, 1e-9));
    }

    #[test]
    fn midpoint_is_permutation_invariant(
        ci in 0usize..5,
        raw in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 3), 1..7),
        rot in 0usize..7,
    ) {
        let c = GRID[ci];
        let cfg = BallConfig::with_curvature(c).unwrap();
        let pts: Vec<PoincareVec> = raw.iter().map(|r| pv(point(c, r, 0.95))).collect();
        let mut shuffled = pts.clone();
        let k = rot % shuffled.len();
        shuffled.rotate_left(k);
        shuffled.reverse();
        let a = einstein_midpoint(&pts, &cfg).unwrap();
        let b = einstein_midpoint(&shuffled, &cfg).unwrap();
        prop_assert_eq!(a.coords(), b.coords());
        prop_assert!(cfg.contains(&a));
    }

    #[test]
    fn clip_respects_radius(ci in 0usize..5, raw in prop::collection::vec(-100.0f64..100.0, 1..6)) {
        let cfg = BallConfig::with_curvature(GRID[ci]).unwrap();
        let p = clip_to_ball(&raw, &cfg);
        prop_assert!(norm(&p) <= cfg.clip_norm() * (1.0 + 1e-15));
        if norm(&raw) <= cfg.clip_norm() {
            prop_assert_eq!(p.coords(), &raw[..]);
        }
    }
}

#[test]
fn midpoint_of_one_point_is_the_point() {
    let cfg = BallConfig::with_curvature(0.7).unwrap();
    let x = pv(vec![0.4, -0.3, 0.2]);
    let m = einstein_midpoint(std::slice::from_ref(&x), &cfg).unwrap();
    assert!(close(&m, &x, 1e-14));
}

#[test]
fn symmetric_pair_midpoint_is_origin() {
    let cfg = BallConfig::with_curvature(0.5).unwrap();
    let x = pv(vec![0.6, 0.2]);
    let m = einstein_midpoint(&[x.clone(), x.neg()], &cfg).unwrap();
    assert!(norm(&m) < 1e-15);
}

#[test]
fn empty_midpoint_is_an_error() {
    let cfg = BallConfig::default();
    assert!(matches!(einstein_midpoint(&[], &cfg), Err(GeometryError::Empty)));
}

#[test]
fn conformal_factor_is_two_at_origin() {
    let cfg = BallConfig::with_curvature(0.3).unwrap();
    assert_eq!(conformal_factor(&pv(vec![0.0, 0.0]), &cfg), 2.0);
}

#[test]
fn zero_curvature_mobius_is_vector_addition() {
    let s = mobius_add_c(&[0.5, -1.5], &[2.0, 0.25], 0.0, 0.0).unwrap();
    assert_eq!(s, vec![2.5, -1.25]);
}

#[test]
fn euclidean_limit_of_distance_and_addition() {
    let c = 1e-8;
    let x = [0.3, -0.7, 0.2];
    let y = [-0.5, 0.1, 0.9];
    let diff: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a - b).collect();
    let d = geodesic_distance_c(&x, &y, c, 0.0).unwrap();
    assert!((d - 2.0 * norm(&diff)).abs() / d < 1e-4);
    let s = mobius_add_c(&x, &y, c, 0.0).unwrap();
    assert!(close(&s, &[-0.2, -0.6, 1.1], 1e-6));
}

#[test]
fn points_outside_the_ball_are_rejected() {
    let cfg = BallConfig::with_curvature(1.0).unwrap();
    assert!(matches!(PoincareVec::new(vec![1.0, 0.0], &cfg), Err(GeometryError::OutsideBall(_))));
    assert!(PoincareVec::new(vec![0.5, 0.5], &cfg).is_ok());
}

#[test]
fn invalid_configs_are_rejected() {
    assert!(BallConfig::new(0.0, 1e-5).is_err());
    assert!(BallConfig::new(-1.0, 1e-5).is_err());
    assert!(BallConfig::new(1.0, 0.0).is_err());
    assert!(BallConfig::new(f64::NAN, 1e-5).is_err());
}

#[test]
fn distance_domain_error_outside_the_ball() {
    // a point on the boundary puts the arctanh argument at 1
    let err = geodesic_distance_c(&[0.5, 0.0], &[1.0, 0.0], 1.0, 0.0);
    assert!(err.is_err());
}

#[test]
fn dimension_mismatch_is_reported() {
    let cfg = BallConfig::default();
    assert!(matches!(
        mobius_add(&pv(vec![0.1]), &pv(vec![0.1, 0.2]), &cfg),
        Err(GeometryError::DimensionMismatch { left: 1, right: 2 })
    ));
}

#[test]
fn radius_and_clip_norm() {
    let cfg = BallConfig::new(0.25, 0.01).unwrap();
    assert_eq!(cfg.radius(), 2.0);
    assert!((cfg.clip_norm() - 1.98).abs() < 1e-15);
}
