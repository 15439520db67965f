//! Poincaré-ball gyrovector arithmetic and Klein-model averaging.
//!
//! Everything here is plain `f64` math with no tape involvement. These
//! functions are the reference implementations: the differentiable
//! versions in [`crate::diffgeo`] are checked against them, and the
//! metric oracles are built on top of them.
//!
//! Points live in the open ball of radius `1/sqrt(c)`. The curvature of
//! the manifold is `-c`.

use std::fmt;
use std::ops::Deref;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid ball configuration: {0}")]
    InvalidConfig(String),
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("point outside the ball (sqrt(c)*|x| = {0})")]
    OutsideBall(f64),
    #[error("Möbius denominator {0:e} underflowed")]
    Overflow(f64),
    #[error("arctanh argument {0} is outside (-1, 1)")]
    Domain(f64),
    #[error("empty point set")]
    Empty,
}

pub type Result<T> = std::result::Result<T, GeometryError>;

/// Curvature magnitude and clip margin shared by every ball operation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BallConfig {
    c: f64,
    eps: f64,
}

impl BallConfig {
    pub const DEFAULT_EPS: f64 = 1e-5;

    pub fn new(c: f64, eps: f64) -> Result<Self> {
        if !(c.is_finite() && c > 0.0) {
            return Err(GeometryError::InvalidConfig(format!(
                "curvature magnitude must be positive, got {c}"
            )));
        }
        if !(eps > 0.0 && eps < 1.0) {
            return Err(GeometryError::InvalidConfig(format!(
                "clip margin must lie in (0, 1), got {eps}"
            )));
        }
        Ok(Self { c, eps })
    }

    pub fn with_curvature(c: f64) -> Result<Self> {
        Self::new(c, Self::DEFAULT_EPS)
    }

    pub fn c(&self) -> f64 {
        self.c
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    /// Radius of the ball, `1/sqrt(c)`.
    pub fn radius(&self) -> f64 {
        1.0 / self.c.sqrt()
    }

    /// Largest admissible norm after clipping, `(1 - eps)/sqrt(c)`.
    pub fn clip_norm(&self) -> f64 {
        (1.0 - self.eps) / self.c.sqrt()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        self.c.sqrt() * norm(x) < 1.0
    }
}

impl Default for BallConfig {
    fn default() -> Self {
        Self {
            c: 0.7,
            eps: Self::DEFAULT_EPS,
        }
    }
}

macro_rules! coord_vec {
    ($name:ident) => {
        impl $name {
            pub fn coords(&self) -> &[f64] {
                &self.0
            }

            pub fn into_coords(self) -> Vec<f64> {
                self.0
            }

            pub fn dim(&self) -> usize {
                self.0.len()
            }

            pub fn zeros(dim: usize) -> Self {
                Self(vec![0.0; dim])
            }
        }

        impl Deref for $name {
            type Target = [f64];

            fn deref(&self) -> &[f64] {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}(", stringify!($name))?;
                for (i, v) in self.0.iter().enumerate() {
                    if i > 0 {
                        write!(f, ", ")?;
                    }
                    write!(f, "{v:.6}")?;
                }
                write!(f, ")")
            }
        }
    };
}

/// A point of the Poincaré ball.
#[derive(Debug, Clone, PartialEq)]
pub struct PoincareVec(Vec<f64>);
coord_vec!(PoincareVec);

impl PoincareVec {
    pub fn new(coords: Vec<f64>, cfg: &BallConfig) -> Result<Self> {
        let scaled = cfg.c.sqrt() * norm(&coords);
        if !(scaled < 1.0) {
            return Err(GeometryError::OutsideBall(scaled));
        }
        Ok(Self(coords))
    }

    /// Wraps coordinates without checking the ball constraint.
    pub fn from_coords_unchecked(coords: Vec<f64>) -> Self {
        Self(coords)
    }

    pub fn neg(&self) -> Self {
        Self(self.0.iter().map(|v| -v).collect())
    }
}

/// A point of the Klein model.
#[derive(Debug, Clone, PartialEq)]
pub struct KleinVec(Vec<f64>);
coord_vec!(KleinVec);

impl KleinVec {
    pub fn from_coords_unchecked(coords: Vec<f64>) -> Self {
        Self(coords)
    }
}

/// A tangent vector attached to a base point of the ball.
#[derive(Debug, Clone, PartialEq)]
pub struct TangentVec {
    pub base: PoincareVec,
    pub vec: Vec<f64>,
}

impl TangentVec {
    pub fn new(base: PoincareVec, vec: Vec<f64>) -> Result<Self> {
        check_dims(base.dim(), vec.len())?;
        Ok(Self { base, vec })
    }

    pub fn zero_at(base: PoincareVec) -> Self {
        let vec = vec![0.0; base.dim()];
        Self { base, vec }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn sq_norm(a: &[f64]) -> f64 {
    dot(a, a)
}

pub fn norm(a: &[f64]) -> f64 {
    sq_norm(a).sqrt()
}

fn check_dims(left: usize, right: usize) -> Result<()> {
    if left != right {
        return Err(GeometryError::DimensionMismatch { left, right });
    }
    Ok(())
}

/// `lambda_x = 2 / (1 - c|x|^2)`.
pub fn conformal_factor(x: &PoincareVec, cfg: &BallConfig) -> f64 {
    conformal_factor_c(x, cfg.c)
}

pub fn conformal_factor_c(x: &[f64], c: f64) -> f64 {
    2.0 / (1.0 - c * sq_norm(x))
}

/// Möbius addition with an explicit curvature. `c = 0` degenerates to `x + y`.
///
/// The denominator check uses `min_denominator`; pass `0.0` to disable it.
pub fn mobius_add_c(x: &[f64], y: &[f64], c: f64, min_denominator: f64) -> Result<Vec<f64>> {
    check_dims(x.len(), y.len())?;
    let xy = dot(x, y);
    let xx = sq_norm(x);
    let yy = sq_norm(y);
    let a = 1.0 + 2.0 * c * xy + c * yy;
    let b = 1.0 - c * xx;
    let den = 1.0 + 2.0 * c * xy + c * c * xx * yy;
    if !(den > min_denominator) {
        return Err(GeometryError::Overflow(den));
    }
    Ok(x.iter()
        .zip(y)
        .map(|(xi, yi)| (a * xi + b * yi) / den)
        .collect())
}

pub fn mobius_add(x: &PoincareVec, y: &PoincareVec, cfg: &BallConfig) -> Result<PoincareVec> {
    mobius_add_c(x, y, cfg.c, cfg.eps * cfg.eps).map(PoincareVec)
}

/// Geodesic distance `2/sqrt(c) * artanh(sqrt(c) |(-x) (+) y|)`.
pub fn geodesic_distance_c(x: &[f64], y: &[f64], c: f64, min_denominator: f64) -> Result<f64> {
    let neg_x: Vec<f64> = x.iter().map(|v| -v).collect();
    let m = mobius_add_c(&neg_x, y, c, min_denominator)?;
    let sc = c.sqrt();
    let arg = sc * norm(&m);
    if !(arg < 1.0) {
        return Err(GeometryError::Domain(arg));
    }
    Ok(2.0 / sc * arg.atanh())
}

pub fn geodesic_distance(x: &PoincareVec, y: &PoincareVec, cfg: &BallConfig) -> Result<f64> {
    geodesic_distance_c(x, y, cfg.c, cfg.eps * cfg.eps)
}

/// Poincaré to Klein: `2x / (1 + c|x|^2)`.
pub fn poincare_to_klein(x: &PoincareVec, cfg: &BallConfig) -> KleinVec {
    let s = 2.0 / (1.0 + cfg.c * sq_norm(x));
    KleinVec(x.iter().map(|v| v * s).collect())
}

/// Klein to Poincaré: `k / (1 + sqrt(1 - c|k|^2))`.
pub fn klein_to_poincare(k: &KleinVec, cfg: &BallConfig) -> PoincareVec {
    let inner = (1.0 - cfg.c * sq_norm(k)).max(0.0);
    let s = 1.0 / (1.0 + inner.sqrt());
    PoincareVec(k.iter().map(|v| v * s).collect())
}

/// Einstein midpoint: Lorentz-weighted average in Klein coordinates.
///
/// Contributions are accumulated in a canonical (lexicographic) order, so
/// the result is bit-identical under any permutation of `points`.
pub fn einstein_midpoint(points: &[PoincareVec], cfg: &BallConfig) -> Result<PoincareVec> {
    let first = points.first().ok_or(GeometryError::Empty)?;
    let dim = first.dim();
    let mut klein: Vec<KleinVec> = Vec::with_capacity(points.len());
    for p in points {
        check_dims(dim, p.dim())?;
        klein.push(poincare_to_klein(p, cfg));
    }
    klein.sort_by(|a, b| {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut num = vec![0.0; dim];
    let mut den = 0.0;
    for k in &klein {
        let gamma = 1.0 / (1.0 - cfg.c * sq_norm(k)).sqrt();
        den += gamma;
        for (acc, v) in num.iter_mut().zip(k.iter()) {
            *acc += gamma * v;
        }
    }
    let mean = KleinVec(num.into_iter().map(|v| v / den).collect());
    Ok(klein_to_poincare(&mean, cfg))
}

/// Logarithm map at `x`. Coincident points give the zero tangent.
pub fn log_map(x: &PoincareVec, y: &PoincareVec, cfg: &BallConfig) -> Result<TangentVec> {
    let m = mobius_add(&x.neg(), y, cfg)?;
    let n = norm(&m);
    if n == 0.0 {
        return Ok(TangentVec::zero_at(x.clone()));
    }
    let sc = cfg.c.sqrt();
    let arg = sc * n;
    if !(arg < 1.0) {
        return Err(GeometryError::Domain(arg));
    }
    let lambda = conformal_factor(x, cfg);
    let scale = 2.0 / (sc * lambda) * arg.atanh() / n;
    Ok(TangentVec {
        base: x.clone(),
        vec: m.iter().map(|v| v * scale).collect(),
    })
}

/// Exponential map at `x`; the result is clipped back into the ball if
/// rounding pushes it past the clip norm.
pub fn exp_map(x: &PoincareVec, v: &TangentVec, cfg: &BallConfig) -> Result<PoincareVec> {
    check_dims(x.dim(), v.vec.len())?;
    let n = norm(&v.vec);
    if n == 0.0 {
        return Ok(x.clone());
    }
    let sc = cfg.c.sqrt();
    let lambda = conformal_factor(x, cfg);
    let scale = (sc * lambda * n / 2.0).tanh() / (sc * n);
    let u = PoincareVec(v.vec.iter().map(|t| t * scale).collect());
    let out = mobius_add(x, &u, cfg)?;
    Ok(clip_to_ball(&out, cfg))
}

/// Exponential map at the origin.
pub fn exp_map_zero(v: &[f64], cfg: &BallConfig) -> PoincareVec {
    let n = norm(v);
    if n == 0.0 {
        return PoincareVec(v.to_vec());
    }
    let sc = cfg.c.sqrt();
    let scale = (sc * n).tanh() / (sc * n);
    clip_to_ball(&v.iter().map(|t| t * scale).collect::<Vec<_>>(), cfg)
}

/// Logarithm map at the origin.
pub fn log_map_zero(y: &PoincareVec, cfg: &BallConfig) -> Result<Vec<f64>> {
    let n = norm(y);
    if n == 0.0 {
        return Ok(y.to_vec());
    }
    let sc = cfg.c.sqrt();
    let arg = sc * n;
    if !(arg < 1.0) {
        return Err(GeometryError::Domain(arg));
    }
    let scale = arg.atanh() / arg;
    Ok(y.iter().map(|t| t * scale).collect())
}

/// Norm clipping onto the ball of radius `(1 - eps)/sqrt(c)`.
pub fn clip_to_ball(s: &[f64], cfg: &BallConfig) -> PoincareVec {
    let mu = cfg.clip_norm();
    let n = norm(s);
    if n <= mu {
        PoincareVec(s.to_vec())
    } else {
        PoincareVec(s.iter().map(|v| mu * v / n).collect())
    }
}
