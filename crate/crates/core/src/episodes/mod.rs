//! Datasets of labelled patch sets and N-way K-shot episode sampling.

mod io;

pub use io::{decode_features, encode_features, load_features, save_features, FileHeader};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::geometry::{clip_to_ball, exp_map_zero, BallConfig, GeometryError};
use crate::seeding::{derive_seed, rng_for, Stream};

#[derive(Debug, Error)]
pub enum EpisodeError {
    #[error("invalid dataset configuration: {0}")]
    Config(String),
    #[error("class {class} has {available} samples, episode needs {needed}")]
    InsufficientPool { class: u32, available: usize, needed: usize },
    #[error("episode needs {needed} classes, pool has {available}")]
    InsufficientClasses { needed: usize, available: usize },
    #[error("episode needs {needed} outlier samples, classes outside the episode hold {available}")]
    InsufficientOutliers { needed: usize, available: usize },
    #[error("malformed dataset file at byte offset {offset}{}: {msg}", line.map(|l| format!(" (line {l})")).unwrap_or_default())]
    Format { offset: usize, line: Option<usize>, msg: String },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, EpisodeError>;

/// Generator state kept with synthetic datasets so 1-shot episodes can draw
/// a fresh sample around the same class centre.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticInfo {
    /// Per class, the tangent-space centre at the origin.
    pub centers: Vec<Vec<f64>>,
    pub within_spread: f64,
    pub ball: BallConfig,
}

/// Labelled samples, each an `H x W` grid of `C`-dimensional ball points
/// stored as `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub grid_h: usize,
    pub grid_w: usize,
    pub dim: usize,
    pub n_classes: usize,
    labels: Vec<u32>,
    data: Vec<f32>,
    synthetic: Option<SyntheticInfo>,
}

impl Dataset {
    pub fn new(grid_h: usize, grid_w: usize, dim: usize, n_classes: usize, labels: Vec<u32>, data: Vec<f32>) -> Result<Self> {
        let per = grid_h * grid_w * dim;
        if per == 0 {
            return Err(EpisodeError::Config("grid and patch dimension must be positive".into()));
        }
        if data.len() != labels.len() * per {
            return Err(EpisodeError::Config(format!(
                "{} values for {} samples of {per}",
                data.len(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l as usize >= n_classes) {
            return Err(EpisodeError::Config(format!("label {bad} >= n_classes {n_classes}")));
        }
        Ok(Self {
            grid_h,
            grid_w,
            dim,
            n_classes,
            labels,
            data,
            synthetic: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn hw(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn sample_len(&self) -> usize {
        self.hw() * self.dim
    }

    pub fn label(&self, i: usize) -> u32 {
        self.labels[i]
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        let n = self.sample_len();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn synthetic(&self) -> Option<&SyntheticInfo> {
        self.synthetic.as_ref()
    }

    /// Sample indices of every class, in dataset order.
    pub fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_classes];
        for (i, &l) in self.labels.iter().enumerate() {
            out[l as usize].push(i);
        }
        out
    }
}

/// Disjoint train / validation / test class lists (60/20/20 by class id).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassSplit {
    pub train: Vec<u32>,
    pub val: Vec<u32>,
    pub test: Vec<u32>,
}

impl ClassSplit {
    pub fn new(n_classes: usize) -> Self {
        let n_train = (n_classes * 3).div_ceil(5);
        let n_val = (n_classes - n_train) / 2;
        let ids: Vec<u32> = (0..n_classes as u32).collect();
        Self {
            train: ids[..n_train].to_vec(),
            val: ids[n_train..n_train + n_val].to_vec(),
            test: ids[n_train + n_val..].to_vec(),
        }
    }

    /// Every class in one pool.
    pub fn all(n_classes: usize) -> Vec<u32> {
        (0..n_classes as u32).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticDatasetCfg {
    pub n_classes: usize,
    pub samples_per_class: usize,
    pub patch_dim: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub class_spread: f64,
    pub within_spread: f64,
    pub ball: BallConfig,
    pub seed: u64,
}

impl Default for SyntheticDatasetCfg {
    fn default() -> Self {
        Self {
            n_classes: 40,
            samples_per_class: 40,
            patch_dim: 8,
            grid_h: 3,
            grid_w: 3,
            class_spread: 0.5,
            within_spread: 0.5,
            ball: BallConfig::default(),
            seed: 0,
        }
    }
}

impl SyntheticDatasetCfg {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(EpisodeError::Config(m.into()));
        if self.n_classes == 0 {
            return bad("n_classes must be positive");
        }
        if self.samples_per_class == 0 {
            return bad("samples_per_class must be positive");
        }
        if self.patch_dim == 0 || self.grid_h == 0 || self.grid_w == 0 {
            return bad("grid and patch dimension must be positive");
        }
        if !(self.class_spread > 0.0 && self.class_spread.is_finite()) {
            return bad("class_spread must be positive");
        }
        if !(self.within_spread >= 0.0 && self.within_spread.is_finite()) {
            return bad("within_spread must be nonnegative");
        }
        Ok(())
    }
}

/// Rounds a ball point to `f32`, shrinking until the rounded point is still
/// strictly inside the clip radius.
pub fn to_f32_in_ball(p: &[f64], cfg: &BallConfig) -> Vec<f32> {
    let limit = cfg.clip_norm();
    let mut scale = 1.0;
    loop {
        let out: Vec<f32> = p.iter().map(|v| (v * scale) as f32).collect();
        let n = out.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
        if n <= limit {
            return out;
        }
        scale *= 1.0 - 1e-6;
    }
}

fn synthetic_sample(center: &[f64], spread: f64, hw: usize, cfg: &BallConfig, rng: &mut impl Rng, out: &mut Vec<f32>) {
    let noise = Normal::new(0.0, spread.max(0.0)).expect("finite spread");
    for _ in 0..hw {
        let t: Vec<f64> = center
            .iter()
            .map(|c| if spread > 0.0 { c + noise.sample(rng) } else { *c })
            .collect();
        let p = clip_to_ball(&exp_map_zero(&t, cfg), cfg);
        out.extend(to_f32_in_ball(&p, cfg));
    }
}

/// Class-clustered patch sets generated on the ball.
///
/// Each class has a Gaussian tangent centre at the origin (std
/// `class_spread`); every patch of a sample is that centre plus Gaussian
/// noise (std `within_spread`) mapped through the exponential map at 0.
pub fn generate_synthetic(cfg: &SyntheticDatasetCfg) -> Result<Dataset> {
    cfg.validate()?;
    let hw = cfg.grid_h * cfg.grid_w;
    let mut rng = rng_for(cfg.seed, Stream::Dataset, 0);
    let spread = Normal::new(0.0, cfg.class_spread).expect("validated spread");
    let centers: Vec<Vec<f64>> = (0..cfg.n_classes)
        .map(|_| (0..cfg.patch_dim).map(|_| spread.sample(&mut rng)).collect())
        .collect();
    let mut labels = Vec::with_capacity(cfg.n_classes * cfg.samples_per_class);
    let mut data = Vec::with_capacity(labels.capacity() * hw * cfg.patch_dim);
    for (class, center) in centers.iter().enumerate() {
        for _ in 0..cfg.samples_per_class {
            labels.push(class as u32);
            synthetic_sample(center, cfg.within_spread, hw, &cfg.ball, &mut rng, &mut data);
        }
    }
    let mut ds = Dataset::new(cfg.grid_h, cfg.grid_w, cfg.patch_dim, cfg.n_classes, labels, data)?;
    ds.synthetic = Some(SyntheticInfo {
        centers,
        within_spread: cfg.within_spread,
        ball: cfg.ball,
    });
    Ok(ds)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeSpec {
    pub n_way: usize,
    pub k_shot: usize,
    pub n_query: usize,
    pub n_outliers: usize,
    pub seed: u64,
}

impl EpisodeSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_way == 0 || self.k_shot == 0 || self.n_query == 0 {
            return Err(EpisodeError::Config("n_way, k_shot and n_query must be positive".into()));
        }
        Ok(())
    }

    /// Support samples per class, counting the 1-shot duplicate and outliers.
    pub fn support_per_class(&self) -> usize {
        self.k_shot.max(2) + self.n_outliers
    }

    /// Same spec with the seed replaced by one derived for `stream`.
    pub fn for_stream(&self, stream: Stream) -> Self {
        Self {
            seed: derive_seed(self.seed, stream, 0),
            ..*self
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeSample {
    /// `hw * dim` row-major patch coordinates.
    pub features: Vec<f64>,
    /// Episode label in `0..n_way`.
    pub label: usize,
    /// Dataset class the features were drawn from.
    pub source_class: u32,
    /// Dataset index, `None` for a regenerated 1-shot duplicate.
    pub index: Option<usize>,
    pub is_outlier: bool,
}

/// One task; support samples are grouped by class, `k_total` per class.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub n_way: usize,
    pub k_total: usize,
    pub classes: Vec<u32>,
    pub support: Vec<EpisodeSample>,
    pub query: Vec<EpisodeSample>,
    pub grid: (usize, usize),
    pub dim: usize,
}

fn stack(samples: &[EpisodeSample], dim: usize) -> Tensor {
    let data: Vec<f64> = samples.iter().flat_map(|s| s.features.iter().copied()).collect();
    let rows = data.len() / dim;
    Tensor::new(rows, dim, data).expect("uniform sample sizes")
}

impl Episode {
    pub fn hw(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    /// Support patches, `(n_way * k_total * hw) x dim`.
    pub fn support_tensor(&self) -> Tensor {
        stack(&self.support, self.dim)
    }

    /// Query patches, `(n_query_total * hw) x dim`.
    pub fn query_tensor(&self) -> Tensor {
        stack(&self.query, self.dim)
    }

    pub fn query_labels(&self) -> Vec<usize> {
        self.query.iter().map(|q| q.label).collect()
    }
}

fn features(ds: &Dataset, i: usize) -> Vec<f64> {
    ds.sample(i).iter().map(|&v| v as f64).collect()
}

/// Draws episode `index` of the stream defined by `spec.seed`.
///
/// Classes come from `pool`; outliers are drawn from pool classes outside
/// the episode and carry the label of the class they are injected into.
pub fn sample_episode(ds: &Dataset, pool: &[u32], spec: &EpisodeSpec, index: u64) -> Result<Episode> {
    spec.validate()?;
    if pool.len() < spec.n_way {
        return Err(EpisodeError::InsufficientClasses {
            needed: spec.n_way,
            available: pool.len(),
        });
    }
    let mut rng = rng_for(spec.seed, Stream::TrainEpisode, index);
    let by_class = ds.class_indices();
    let mut classes = pool.to_vec();
    classes.shuffle(&mut rng);
    let (chosen, rest) = classes.split_at(spec.n_way);
    let needed = spec.k_shot + spec.n_query;

    // genuine samples and duplicates first, so the same index yields the
    // same clean episode whatever the outlier count
    let mut picks = Vec::with_capacity(spec.n_way);
    for &class in chosen {
        let members = &by_class[class as usize];
        if members.len() < needed {
            return Err(EpisodeError::InsufficientPool {
                class,
                available: members.len(),
                needed,
            });
        }
        picks.push(members.choose_multiple(&mut rng, needed).copied().collect::<Vec<usize>>());
    }
    let duplicates: Vec<Option<EpisodeSample>> = chosen
        .iter()
        .zip(&picks)
        .enumerate()
        .map(|(label, (&class, picked))| (spec.k_shot == 1).then(|| duplicate(ds, picked[0], class, label, &mut rng)))
        .collect();

    let mut outlier_pool: Vec<(u32, usize)> = rest
        .iter()
        .flat_map(|&c| by_class[c as usize].iter().map(move |&i| (c, i)))
        .collect();
    let total_outliers = spec.n_outliers * spec.n_way;
    if total_outliers > outlier_pool.len() {
        return Err(EpisodeError::InsufficientOutliers {
            needed: total_outliers,
            available: outlier_pool.len(),
        });
    }
    let (outliers, _) = outlier_pool.partial_shuffle(&mut rng, total_outliers);

    let mut support = Vec::with_capacity(spec.n_way * spec.support_per_class());
    let mut query = Vec::with_capacity(spec.n_way * spec.n_query);
    let genuine = |i: usize, label: usize, class: u32| EpisodeSample {
        features: features(ds, i),
        label,
        source_class: class,
        index: Some(i),
        is_outlier: false,
    };
    for (label, ((&class, picked), dup)) in chosen.iter().zip(&picks).zip(duplicates).enumerate() {
        support.extend(picked[..spec.k_shot].iter().map(|&i| genuine(i, label, class)));
        support.extend(dup);
        for &(src, i) in &outliers[label * spec.n_outliers..(label + 1) * spec.n_outliers] {
            support.push(EpisodeSample {
                features: features(ds, i),
                label,
                source_class: src,
                index: Some(i),
                is_outlier: true,
            });
        }
        query.extend(picked[spec.k_shot..].iter().map(|&i| genuine(i, label, class)));
    }
    Ok(Episode {
        n_way: spec.n_way,
        k_total: spec.support_per_class(),
        classes: chosen.to_vec(),
        support,
        query,
        grid: (ds.grid_h, ds.grid_w),
        dim: ds.dim,
    })
}

/// Second support element for 1-shot classes: a fresh draw around the class
/// centre for synthetic data, an exact copy otherwise.
fn duplicate(ds: &Dataset, i: usize, class: u32, label: usize, rng: &mut impl Rng) -> EpisodeSample {
    let features = match ds.synthetic() {
        Some(info) if info.within_spread > 0.0 => {
            let mut out = Vec::with_capacity(ds.sample_len());
            synthetic_sample(&info.centers[class as usize], info.within_spread, ds.hw(), &info.ball, rng, &mut out);
            out.into_iter().map(f64::from).collect()
        }
        _ => features(ds, i),
    };
    EpisodeSample {
        features,
        label,
        source_class: class,
        index: None,
        is_outlier: false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticDatasetCfg {
        SyntheticDatasetCfg {
            n_classes: 8,
            samples_per_class: 10,
            patch_dim: 3,
            grid_h: 2,
            grid_w: 2,
            ..SyntheticDatasetCfg::default()
        }
    }

    fn spec(k: usize, outliers: usize) -> EpisodeSpec {
        EpisodeSpec {
            n_way: 3,
            k_shot: k,
            n_query: 2,
            n_outliers: outliers,
            seed: 4,
        }
    }

    #[test]
    fn split_is_disjoint_and_covers() {
        let s = ClassSplit::new(40);
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (24, 8, 8));
        let s = ClassSplit::new(7);
        assert_eq!(s.train.len() + s.val.len() + s.test.len(), 7);
    }

    #[test]
    fn zero_spread_gives_identical_class_samples() {
        let ds = generate_synthetic(&SyntheticDatasetCfg {
            within_spread: 0.0,
            ..small()
        })
        .unwrap();
        let idx = ds.class_indices();
        for members in idx {
            for &i in &members[1..] {
                assert_eq!(ds.sample(i), ds.sample(members[0]));
            }
        }
    }

    #[test]
    fn f32_rounding_stays_inside() {
        let cfg = BallConfig::with_curvature(0.7).unwrap();
        let mu = cfg.clip_norm();
        let p = vec![mu / 2f64.sqrt(), mu / 2f64.sqrt()];
        let r = to_f32_in_ball(&p, &cfg);
        let n = r.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
        assert!(n <= mu);
    }

    #[test]
    fn one_shot_adds_fresh_duplicate() {
        let ds = generate_synthetic(&small()).unwrap();
        let ep = sample_episode(&ds, &ClassSplit::all(8), &spec(1, 0), 0).unwrap();
        assert_eq!(ep.k_total, 2);
        assert_eq!(ep.support.len(), 6);
        assert!(ep.support[1].index.is_none());
        assert_ne!(ep.support[0].features, ep.support[1].features);
    }

    #[test]
    fn outliers_come_from_outside_classes() {
        let ds = generate_synthetic(&small()).unwrap();
        let ep = sample_episode(&ds, &ClassSplit::all(8), &spec(2, 2), 9).unwrap();
        assert_eq!(ep.support.len(), 3 * 4);
        for s in &ep.support {
            assert_eq!(s.is_outlier, !ep.classes.contains(&s.source_class));
        }
        assert_eq!(ep.support.iter().filter(|s| s.is_outlier).count(), 6);
    }

    #[test]
    fn outliers_do_not_change_genuine_draws() {
        let ds = generate_synthetic(&small()).unwrap();
        let clean = sample_episode(&ds, &ClassSplit::all(8), &spec(2, 0), 3).unwrap();
        let noisy = sample_episode(&ds, &ClassSplit::all(8), &spec(2, 2), 3).unwrap();
        assert_eq!(clean.query, noisy.query);
        let genuine: Vec<_> = noisy.support.iter().filter(|s| !s.is_outlier).cloned().collect();
        assert_eq!(clean.support, genuine);
    }

    #[test]
    fn insufficient_pool_errors() {
        let ds = generate_synthetic(&small()).unwrap();
        let big = EpisodeSpec {
            n_query: 20,
            ..spec(2, 0)
        };
        assert!(matches!(
            sample_episode(&ds, &ClassSplit::all(8), &big, 0),
            Err(EpisodeError::InsufficientPool { .. })
        ));
        assert!(sample_episode(&ds, &[0, 1], &spec(2, 0), 0).is_err());
        // no classes left over for outliers
        assert!(sample_episode(&ds, &[0, 1, 2], &spec(2, 1), 0).is_err());
    }
}
