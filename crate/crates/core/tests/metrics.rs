use app2s::autodiff::{Tape, Tensor};
use app2s::geometry::{geodesic_distance, BallConfig, PoincareVec};
use app2s::metrics::*;
use app2s::netmods::{Ablation, Arch, Model};
use proptest::prelude::*;

fn cfg() -> BallConfig {
    BallConfig::with_curvature(0.7).unwrap()
}

fn set(raw: &[Vec<f64>]) -> Vec<PoincareVec> {
    // shrink into the c = 0.7 ball
    raw.iter()
        .map(|v| PoincareVec::from_coords_unchecked(v.iter().map(|x| x * 0.5).collect()))
        .collect()
}

fn sets() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    (1usize..5, 1usize..5, 1usize..4).prop_flat_map(|(n, m, dim)| {
        (
            prop::collection::vec(prop::collection::vec(-1.0f64..1.0, dim), n),
            prop::collection::vec(prop::collection::vec(-1.0f64..1.0, dim), m),
        )
    })
}

fn d(a: &PoincareVec, b: &PoincareVec) -> f64 {
    geodesic_distance(a, b, &cfg()).unwrap()
}

proptest! {
    #[test]
    fn bounds_and_hausdorff_match_scans((ra, rb) in sets()) {
        let (a, b) = (set(&ra), set(&rb));
        let c = cfg();
        for p in &a {
            let all: Vec<f64> = b.iter().map(|q| d(p, q)).collect();
            prop_assert_eq!(p2s_min(p, &b, &c).unwrap(), all.iter().copied().fold(f64::INFINITY, f64::min));
            prop_assert_eq!(p2s_max(p, &b, &c).unwrap(), all.iter().copied().fold(f64::NEG_INFINITY, f64::max));
        }
        let mut h_ab = f64::NEG_INFINITY;
        for p in &a {
            let mut best = f64::INFINITY;
            for q in &b {
                best = best.min(d(p, q));
            }
            h_ab = h_ab.max(best);
        }
        let mut h_ba = f64::NEG_INFINITY;
        for q in &b {
            let mut best = f64::INFINITY;
            for p in &a {
                best = best.min(d(q, p));
            }
            h_ba = h_ba.max(best);
        }
        prop_assert_eq!(hausdorff_one_sided(&a, &b, &c).unwrap(), h_ab);
        prop_assert_eq!(hausdorff_bidirectional(&a, &b, &c).unwrap(), h_ab.max(h_ba));
    }

    #[test]
    fn pairwise_matrix_matches_scan(raw in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 2), 6)) {
        let pts = set(&raw);
        let c = cfg();
        let q = FeatureMap::new(pts[..2].to_vec(), 1, 2, &c).unwrap();
        let s = FeatureMap::new(pts[2..].to_vec(), 2, 2, &c).unwrap();
        let m = pairwise_matrix(&q, &s, &c).unwrap();
        prop_assert_eq!(m.shape(), (2, 4));
        for i in 0..2 {
            for j in 0..4 {
                prop_assert_eq!(m.get(i, j), d(&pts[i], &pts[2 + j]));
            }
        }
    }

    #[test]
    fn weighted_distance_lies_between_extremes(
        ds in prop::collection::vec(0.0f64..10.0, 1..8),
        scores in prop::collection::vec(-5.0f64..5.0, 8),
    ) {
        let w = RelationWeights::from_scores(&scores[..ds.len()]).unwrap();
        let v = weighted_p2s(&ds, &w).unwrap();
        let lo = ds.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = ds.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
    }

    #[test]
    fn tape_adaptive_p2s_matches_scalar_version(
        ds in prop::collection::vec(0.0f64..10.0, 6),
        scores in prop::collection::vec(-5.0f64..5.0, 6),
    ) {
        let mut t = Tape::new();
        let dv = t.constant(Tensor::new(2, 3, ds.clone()).unwrap());
        let wv = t.constant(Tensor::new(2, 3, scores.clone()).unwrap());
        let wv = t.softmax_rows(wv);
        let out = adaptive_p2s(&mut t, dv, wv).unwrap();
        for r in 0..2 {
            let w = RelationWeights::from_scores(&scores[r * 3..r * 3 + 3]).unwrap();
            let expect = weighted_p2s(&ds[r * 3..r * 3 + 3], &w).unwrap();
            prop_assert!((t.value(out).get(r, 0) - expect).abs() < 1e-12);
        }
    }
}

#[test]
fn uniform_weights_give_the_mean() {
    let w = RelationWeights::uniform(4).unwrap();
    assert_eq!(weighted_p2s(&[1.0, 2.0, 3.0, 6.0], &w).unwrap(), 3.0);
}

#[test]
fn weights_are_validated() {
    assert!(RelationWeights::new(vec![0.5, 0.6]).is_err());
    assert!(RelationWeights::new(vec![1.5, -0.5]).is_err());
    assert!(RelationWeights::new(vec![]).is_err());
    assert!(RelationWeights::uniform(0).is_err());
    assert!(weighted_p2s(&[1.0], &RelationWeights::uniform(2).unwrap()).is_err());
}

#[test]
fn empty_sets_are_errors() {
    let c = cfg();
    let p = PoincareVec::from_coords_unchecked(vec![0.0, 0.0]);
    assert!(matches!(p2s_min(&p, &[], &c), Err(MetricError::Empty)));
    assert!(hausdorff_bidirectional(&[], std::slice::from_ref(&p), &c).is_err());
}

#[test]
fn feature_maps_are_validated() {
    let c = cfg();
    let p = PoincareVec::from_coords_unchecked(vec![0.1, 0.1]);
    assert!(FeatureMap::new(vec![p.clone(); 3], 2, 2, &c).is_err());
    let outside = PoincareVec::from_coords_unchecked(vec![2.0, 0.0]);
    assert!(FeatureMap::new(vec![p, outside], 1, 2, &c).is_err());
    let fm = FeatureMap::from_raw(&[0.1, 0.2, 0.3, 0.4, 0.0, 0.1], 1, 3, 2, &c).unwrap();
    assert_eq!(fm.dims(), (1, 3, 2));
    assert_eq!(fm.to_tensor().shape(), (3, 2));
}

#[test]
fn identical_sets_have_zero_hausdorff() {
    let a = set(&[vec![0.2, 0.3], vec![-0.4, 0.1]]);
    assert!(hausdorff_bidirectional(&a, &a, &cfg()).unwrap() < 1e-12);
}

#[test]
fn mean_pairwise_replaces_the_learned_distance_when_disabled() {
    let ablation = Ablation {
        use_fzeta: false,
        ..Ablation::full()
    };
    let model = Model::new(Arch::with_dims(1, 2, 2, 2), ablation, cfg(), 3).unwrap();
    let m = DistanceMatrix::new(2, 2, vec![1.0, 2.0, 3.0, 6.0]).unwrap();
    assert_eq!(s2s_learned(&model, &m).unwrap(), 3.0);
}

#[test]
fn learned_distance_is_deterministic_in_eval_mode() {
    let model = Model::new(Arch::with_dims(1, 2, 2, 2), Ablation::full(), cfg(), 3).unwrap();
    let m = DistanceMatrix::new(2, 2, vec![1.0, 2.0, 3.0, 6.0]).unwrap();
    let a = s2s_learned(&model, &m).unwrap();
    assert!(a.is_finite());
    assert_eq!(a, s2s_learned(&model, &m).unwrap());
    let wrong = DistanceMatrix::new(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
    assert!(s2s_learned(&model, &wrong).is_err());
}
