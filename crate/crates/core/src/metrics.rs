//! Set distances between feature maps: pairwise matrices, point-to-set
//! bounds, Hausdorff distances, the learned set-to-set distance and the
//! adaptive weighted point-to-set combination.

use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor, Var};
use crate::geometry::{clip_to_ball, geodesic_distance, BallConfig, GeometryError, PoincareVec};
use crate::netmods::{self, Bound, ForwardCtx, Model, NetError};

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("empty point set")]
    Empty,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid weights: {0}")]
    Weights(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Net(#[from] NetError),
}

pub type Result<T> = std::result::Result<T, MetricError>;

/// The `H x W` patch descriptors of one sample, row-major over the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    patches: Vec<PoincareVec>,
    h: usize,
    w: usize,
    c: usize,
}

impl FeatureMap {
    /// Validates that every patch has `c` coordinates and lies in the ball.
    pub fn new(patches: Vec<PoincareVec>, h: usize, w: usize, cfg: &BallConfig) -> Result<Self> {
        if h * w == 0 || patches.len() != h * w {
            return Err(MetricError::Dimension(format!(
                "{} patches for a {h}x{w} grid",
                patches.len()
            )));
        }
        let c = patches[0].dim();
        for (i, p) in patches.iter().enumerate() {
            if p.dim() != c {
                return Err(MetricError::Dimension(format!("patch {i} has {} channels, expected {c}", p.dim())));
            }
            if !cfg.contains(p) {
                let scaled = cfg.c().sqrt() * crate::geometry::norm(p);
                return Err(GeometryError::OutsideBall(scaled).into());
            }
        }
        Ok(Self { patches, h, w, c })
    }

    /// Clips raw row-major `h*w x c` values into the ball.
    pub fn from_raw(values: &[f64], h: usize, w: usize, c: usize, cfg: &BallConfig) -> Result<Self> {
        if values.len() != h * w * c || c == 0 {
            return Err(MetricError::Dimension(format!(
                "{} values for {h}x{w}x{c}",
                values.len()
            )));
        }
        let patches = values.chunks(c).map(|p| clip_to_ball(p, cfg)).collect();
        Self::new(patches, h, w, cfg)
    }

    pub fn patches(&self) -> &[PoincareVec] {
        &self.patches
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.h, self.w, self.c)
    }

    pub fn hw(&self) -> usize {
        self.h * self.w
    }

    /// Patches stacked as an `hw x c` tensor.
    pub fn to_tensor(&self) -> Tensor {
        let data = self.patches.iter().flat_map(|p| p.iter().copied()).collect();
        Tensor::new(self.hw(), self.c, data).expect("consistent dims")
    }
}

/// Distances between the patches of two maps; entry `(h, w)` is `d(q^h, s^w)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    rows: usize,
    cols: usize,
    entries: Vec<f64>,
}

impl DistanceMatrix {
    pub fn new(rows: usize, cols: usize, entries: Vec<f64>) -> Result<Self> {
        if entries.len() != rows * cols {
            return Err(MetricError::Dimension(format!(
                "{} entries for {rows}x{cols}",
                entries.len()
            )));
        }
        Ok(Self { rows, cols, entries })
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.entries[r * self.cols + c]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    /// Row-major flattening, the input layout of the set-to-set network.
    pub fn flat(&self) -> &[f64] {
        &self.entries
    }

    pub fn mean(&self) -> f64 {
        self.entries.iter().sum::<f64>() / self.entries.len() as f64
    }
}

/// Nonnegative per-sample weights of one class, summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationWeights {
    w: Vec<f64>,
}

impl RelationWeights {
    pub const SUM_TOLERANCE: f64 = 1e-9;

    pub fn new(w: Vec<f64>) -> Result<Self> {
        if w.is_empty() {
            return Err(MetricError::Empty);
        }
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(MetricError::Weights(format!("negative or non-finite entry in {w:?}")));
        }
        let s: f64 = w.iter().sum();
        if (s - 1.0).abs() > Self::SUM_TOLERANCE {
            return Err(MetricError::Weights(format!("weights sum to {s}")));
        }
        Ok(Self { w })
    }

    pub fn uniform(k: usize) -> Result<Self> {
        Self::new(vec![1.0 / k as f64; k])
    }

    /// Softmax of raw scores.
    pub fn from_scores(scores: &[f64]) -> Result<Self> {
        if scores.is_empty() {
            return Err(MetricError::Empty);
        }
        let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
        let z: f64 = e.iter().sum();
        Self::new(e.into_iter().map(|v| v / z).collect())
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.w
    }
}

pub fn pairwise_matrix(q: &FeatureMap, s: &FeatureMap, cfg: &BallConfig) -> Result<DistanceMatrix> {
    if q.c != s.c {
        return Err(MetricError::Dimension(format!("{} vs {} channels", q.c, s.c)));
    }
    let mut entries = Vec::with_capacity(q.hw() * s.hw());
    for a in &q.patches {
        for b in &s.patches {
            entries.push(geodesic_distance(a, b, cfg)?);
        }
    }
    DistanceMatrix::new(q.hw(), s.hw(), entries)
}

fn distances_to(p: &PoincareVec, set: &[PoincareVec], cfg: &BallConfig) -> Result<Vec<f64>> {
    if set.is_empty() {
        return Err(MetricError::Empty);
    }
    set.iter()
        .map(|s| {
            if s.dim() != p.dim() {
                return Err(MetricError::Dimension(format!("{} vs {}", p.dim(), s.dim())));
            }
            Ok(geodesic_distance(p, s, cfg)?)
        })
        .collect()
}

/// Infimum of the distances from `p` to the points of `set`.
pub fn p2s_min(p: &PoincareVec, set: &[PoincareVec], cfg: &BallConfig) -> Result<f64> {
    Ok(distances_to(p, set, cfg)?.into_iter().fold(f64::INFINITY, f64::min))
}

/// Supremum of the distances from `p` to the points of `set`.
pub fn p2s_max(p: &PoincareVec, set: &[PoincareVec], cfg: &BallConfig) -> Result<f64> {
    Ok(distances_to(p, set, cfg)?.into_iter().fold(0.0, f64::max))
}

/// `max_{a in A} min_{b in B} d(a, b)`.
pub fn hausdorff_one_sided(a: &[PoincareVec], b: &[PoincareVec], cfg: &BallConfig) -> Result<f64> {
    if a.is_empty() {
        return Err(MetricError::Empty);
    }
    let mut worst: f64 = 0.0;
    for p in a {
        worst = worst.max(p2s_min(p, b, cfg)?);
    }
    Ok(worst)
}

pub fn hausdorff_bidirectional(a: &[PoincareVec], b: &[PoincareVec], cfg: &BallConfig) -> Result<f64> {
    Ok(hausdorff_one_sided(a, b, cfg)?.max(hausdorff_one_sided(b, a, cfg)?))
}

/// Weighted mean `sum_j w_j d_j / sum_j w_j` of per-sample distances.
pub fn weighted_p2s(distances: &[f64], w: &RelationWeights) -> Result<f64> {
    let w = w.as_slice();
    if distances.len() != w.len() {
        return Err(MetricError::Dimension(format!(
            "{} distances for {} weights",
            distances.len(),
            w.len()
        )));
    }
    let num: f64 = distances.iter().zip(w).map(|(d, w)| d * w).sum();
    let den: f64 = w.iter().sum();
    Ok(num / den)
}

/// Learned distance for a batch of flattened distance matrices
/// (`pairs x hw^2`), returning `pairs x 1`.
///
/// With `use_fzeta` off the network is replaced by the mean entry.
pub fn s2s_learned_batch(
    tape: &mut Tape,
    model: &Model,
    bound: &Bound,
    ctx: &mut ForwardCtx,
    flat: Var,
) -> Result<Var> {
    let hw = model.arch.hw();
    let width = tape.value(flat).cols();
    if width != hw * hw {
        return Err(MetricError::Dimension(format!(
            "set-to-set input width {width}, expected {}",
            hw * hw
        )));
    }
    if !model.ablation.use_fzeta {
        let s = tape.row_sum(flat);
        return Ok(tape.scale(s, 1.0 / width as f64));
    }
    let net = &model.s2s;
    let h = net.fc1.forward(tape, bound, flat)?;
    let h = net.bn1.forward(tape, bound, &model.params, ctx, h)?;
    let h = tape.relu(h);
    let h = netmods::dropout(tape, ctx, h, netmods::DROPOUT_P)?;
    let out = net.fc2.forward(tape, bound, h)?;
    Ok(net.bn2.forward(tape, bound, &model.params, ctx, out)?)
}

/// Learned distance of one matrix, evaluated with frozen (running) statistics.
pub fn s2s_learned(model: &Model, d: &DistanceMatrix) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let flat = tape.constant(Tensor::row(d.flat().to_vec()));
    let mut ctx = ForwardCtx::eval();
    let out = s2s_learned_batch(&mut tape, model, &bound, &mut ctx, flat)?;
    Ok(tape.scalar(out))
}

/// Adaptive point-to-set distance for every class: `distances` and
/// `weights` are both `n_way x k`; the result is `n_way x 1`.
pub fn adaptive_p2s(tape: &mut Tape, distances: Var, weights: Var) -> Result<Var> {
    let weighted = tape.mul(weights, distances)?;
    let num = tape.row_sum(weighted);
    let den = tape.row_sum(weights);
    Ok(tape.div(num, den)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> BallConfig {
        BallConfig::with_curvature(0.5).unwrap()
    }

    fn p(v: &[f64]) -> PoincareVec {
        PoincareVec::from_coords_unchecked(v.to_vec())
    }

    #[test]
    fn p2s_bounds_and_singletons() {
        let b = cfg();
        let set = vec![p(&[0.1, 0.2]), p(&[-0.4, 0.3]), p(&[0.5, -0.5])];
        assert_eq!(p2s_min(&set[1], &set, &b).unwrap(), 0.0);
        let q = p(&[0.0, 0.1]);
        assert!(p2s_min(&q, &set, &b).unwrap() <= p2s_max(&q, &set, &b).unwrap());
        assert_eq!(p2s_min(&q, &set[..1], &b).unwrap(), p2s_max(&q, &set[..1], &b).unwrap());
        assert!(matches!(p2s_min(&q, &[], &b), Err(MetricError::Empty)));
    }

    #[test]
    fn hausdorff_cases() {
        let b = cfg();
        let a = vec![p(&[0.1, 0.2]), p(&[-0.4, 0.3])];
        assert_eq!(hausdorff_bidirectional(&a, &a, &b).unwrap(), 0.0);
        let d = geodesic_distance(&a[0], &a[1], &b).unwrap();
        assert_eq!(hausdorff_one_sided(&a[..1], &a[1..], &b).unwrap(), d);
        assert!(hausdorff_one_sided(&[], &a, &b).is_err());
    }

    #[test]
    fn weights_validate() {
        assert!(RelationWeights::new(vec![0.5, 0.6]).is_err());
        assert!(RelationWeights::new(vec![-0.1, 1.1]).is_err());
        assert!(RelationWeights::new(vec![]).is_err());
        let w = RelationWeights::from_scores(&[0.3, 0.3, 0.3, 0.3]).unwrap();
        assert!(w.as_slice().iter().all(|v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn weighted_p2s_limits() {
        let d = [1.0, 2.0, 6.0];
        let u = RelationWeights::uniform(3).unwrap();
        assert!((weighted_p2s(&d, &u).unwrap() - 3.0).abs() < 1e-15);
        let one_hot = RelationWeights::new(vec![0.0, 1.0, 0.0]).unwrap();
        assert_eq!(weighted_p2s(&d, &one_hot).unwrap(), 2.0);
    }

    #[test]
    fn feature_map_validation() {
        let b = cfg();
        assert!(FeatureMap::new(vec![p(&[0.1]), p(&[0.1, 0.2])], 1, 2, &b).is_err());
        assert!(FeatureMap::new(vec![p(&[5.0])], 1, 1, &b).is_err());
        let m = FeatureMap::from_raw(&[5.0, 0.0, 0.1, 0.1], 2, 1, 2, &b).unwrap();
        assert!((crate::geometry::norm(&m.patches()[0]) - b.clip_norm()).abs() < 1e-15);
    }
}
