//! Learnable components: the patch encoder, the signature generator
//! (single-head self-attention over all support descriptors), the relation
//! generator (two small convolutions ending in a sigmoid) and the
//! set-to-set distance network.
//!
//! All four networks live in one [`Model`] whose parameters share a single
//! [`ParamSet`], so one tape binding covers a whole episode.

mod checkpoint;
mod layers;
mod params;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, Checkpoint};
pub use layers::{dropout, BatchNorm, Conv2d, LayerNorm, Linear};
pub use params::{apply_bn_updates, Bound, BnUpdate, ForwardCtx, Param, ParamId, ParamSet, BN_MOMENTUM, NORM_EPS};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor, Var};
use crate::diffgeo::{self, Manifold};
use crate::geometry::{BallConfig, GeometryError};
use crate::seeding::{rng_for, Stream};

#[derive(Debug, Error)]
pub enum NetError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid architecture: {0}")]
    Arch(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NetError>;

pub const DROPOUT_P: f64 = 0.5;

/// Network dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Arch {
    pub grid_h: usize,
    pub grid_w: usize,
    /// Width of the raw per-patch input features.
    pub in_dim: usize,
    /// Channel count `C` of the embedded patches.
    pub channels: usize,
    pub encoder_hidden: usize,
    pub relation_hidden: usize,
    pub ffn_dim: usize,
}

impl Arch {
    /// 3x3 grid, 16 channels, feed-forward width 4C, 64 relation filters.
    pub fn desk(in_dim: usize) -> Self {
        Self::with_dims(3, 3, in_dim, 16)
    }

    pub fn with_dims(grid_h: usize, grid_w: usize, in_dim: usize, channels: usize) -> Self {
        Self {
            grid_h,
            grid_w,
            in_dim,
            channels,
            encoder_hidden: 2 * channels.max(in_dim),
            relation_hidden: 64,
            ffn_dim: 4 * channels,
        }
    }

    pub fn hw(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.grid_h,
            self.grid_w,
            self.in_dim,
            self.channels,
            self.encoder_hidden,
            self.relation_hidden,
            self.ffn_dim,
        ];
        if dims.contains(&0) {
            return Err(NetError::Arch(format!("all dimensions must be positive: {self:?}")));
        }
        Ok(())
    }

    /// Kernel sizes of the two relation convolutions; together they shrink
    /// the grid to a single cell (3x3 kernels for 5x5 maps, 2x2 for 3x3).
    pub fn relation_kernels(&self) -> ((usize, usize), (usize, usize)) {
        let split = |n: usize| {
            let first = (n + 2) / 2;
            (first, n + 1 - first)
        };
        let (h1, h2) = split(self.grid_h);
        let (w1, w2) = split(self.grid_w);
        ((h1, w1), (h2, w2))
    }
}

/// Component switches mirroring the ablation rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ablation {
    /// Point-to-set distance; `false` is the hyperbolic prototype classifier.
    pub use_p2s: bool,
    pub use_fphi: bool,
    pub use_fomega: bool,
    pub use_fzeta: bool,
    pub euclidean_mode: bool,
}

/// Named component configurations compared in the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Einstein-midpoint prototypes with geodesic distance.
    Prototype,
    /// P2S with equal weights.
    P2sUnweighted,
    /// Relation weights against class prototypes, no signature generator.
    P2sRelation,
    /// Full model with Euclidean distances.
    EuclideanAp2s,
    /// Full model with mean pairwise distance instead of the learned S2S network.
    NoS2s,
    /// Full model.
    App2s,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Prototype,
        Variant::P2sUnweighted,
        Variant::P2sRelation,
        Variant::EuclideanAp2s,
        Variant::NoS2s,
        Variant::App2s,
    ];

    pub fn ablation(self) -> Ablation {
        let full = Ablation {
            use_p2s: true,
            use_fphi: true,
            use_fomega: true,
            use_fzeta: true,
            euclidean_mode: false,
        };
        match self {
            Variant::Prototype => Ablation {
                use_p2s: false,
                use_fphi: false,
                use_fomega: false,
                use_fzeta: false,
                ..full
            },
            Variant::P2sUnweighted => Ablation {
                use_fphi: false,
                use_fomega: false,
                ..full
            },
            Variant::P2sRelation => Ablation {
                use_fomega: false,
                ..full
            },
            Variant::EuclideanAp2s => Ablation {
                euclidean_mode: true,
                ..full
            },
            Variant::NoS2s => Ablation {
                use_fzeta: false,
                ..full
            },
            Variant::App2s => full,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Prototype => "prototype",
            Variant::P2sUnweighted => "p2s_unweighted",
            Variant::P2sRelation => "p2s_relation",
            Variant::EuclideanAp2s => "euclidean_ap2s",
            Variant::NoS2s => "no_s2s",
            Variant::App2s => "app2s",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == name)
    }
}

impl Ablation {
    pub fn full() -> Self {
        Variant::App2s.ablation()
    }

    /// The named variant with exactly these switches, if any.
    pub fn variant(&self) -> Option<Variant> {
        Variant::ALL.into_iter().find(|v| v.ablation() == *self)
    }

    pub fn label(&self) -> String {
        match self.variant() {
            Some(v) => v.name().to_string(),
            None => format!(
                "custom(p2s={},fphi={},fomega={},fzeta={},euclid={})",
                self.use_p2s, self.use_fphi, self.use_fomega, self.use_fzeta, self.euclidean_mode
            ),
        }
    }
}

/// Per-patch two-layer map into the ball.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub hidden: Linear,
    pub out: Linear,
}

/// One post-norm transformer encoder block with a single attention head.
#[derive(Debug, Clone, PartialEq)]
pub struct SignatureGenerator {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub norm1: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub norm2: LayerNorm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelationGenerator {
    pub conv1: Conv2d,
    pub bn1: BatchNorm,
    pub conv2: Conv2d,
    pub bn2: BatchNorm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct S2SNetwork {
    pub fc1: Linear,
    pub bn1: BatchNorm,
    pub fc2: Linear,
    pub bn2: BatchNorm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub arch: Arch,
    pub ablation: Ablation,
    pub ball: BallConfig,
    pub params: ParamSet,
    pub encoder: Encoder,
    pub signature: SignatureGenerator,
    pub relation: RelationGenerator,
    pub s2s: S2SNetwork,
}

impl Model {
    pub fn new(arch: Arch, ablation: Ablation, ball: BallConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = rng_for(seed, Stream::Init, 0);
        let mut p = ParamSet::new();
        let c = arch.channels;
        let hw = arch.hw();
        let encoder = Encoder {
            hidden: Linear::new(&mut p, "encoder.fc1", arch.in_dim, arch.encoder_hidden, &mut rng),
            out: Linear::new(&mut p, "encoder.fc2", arch.encoder_hidden, c, &mut rng),
        };
        let signature = SignatureGenerator {
            query: Linear::new(&mut p, "signature.query", c, c, &mut rng),
            key: Linear::new(&mut p, "signature.key", c, c, &mut rng),
            value: Linear::new(&mut p, "signature.value", c, c, &mut rng),
            out: Linear::new(&mut p, "signature.out", c, c, &mut rng),
            norm1: LayerNorm::new(&mut p, "signature.norm1", c),
            ff1: Linear::new(&mut p, "signature.ff1", c, arch.ffn_dim, &mut rng),
            ff2: Linear::new(&mut p, "signature.ff2", arch.ffn_dim, c, &mut rng),
            norm2: LayerNorm::new(&mut p, "signature.norm2", c),
        };
        let (k1, k2) = arch.relation_kernels();
        let relation = RelationGenerator {
            conv1: Conv2d::new(&mut p, "relation.conv1", k1, 2 * c, arch.relation_hidden, &mut rng),
            bn1: BatchNorm::new(&mut p, "relation.bn1", arch.relation_hidden),
            conv2: Conv2d::new(&mut p, "relation.conv2", k2, arch.relation_hidden, 1, &mut rng),
            bn2: BatchNorm::new(&mut p, "relation.bn2", 1),
        };
        let s2s = S2SNetwork {
            fc1: Linear::new(&mut p, "s2s.fc1", hw * hw, hw, &mut rng),
            bn1: BatchNorm::new(&mut p, "s2s.bn1", hw),
            fc2: Linear::new(&mut p, "s2s.fc2", hw, 1, &mut rng),
            bn2: BatchNorm::new(&mut p, "s2s.bn2", 1),
        };
        Ok(Self {
            arch,
            ablation,
            ball,
            params: p,
            encoder,
            signature,
            relation,
            s2s,
        })
    }

    pub fn manifold(&self) -> Manifold {
        if self.ablation.euclidean_mode {
            Manifold::Euclidean
        } else {
            Manifold::Poincare(self.ball)
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound::bind(tape, &self.params)
    }

    fn meta(&self) -> serde_json::Value {
        serde_json::json!({
            "arch": self.arch,
            "ablation": self.ablation,
            "ball": self.ball,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            meta: self.meta(),
            tensors: self
                .params
                .iter()
                .map(|p| (p.name.clone(), p.value.clone()))
                .collect(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let field = |k: &str| {
            ckpt.meta
                .get(k)
                .cloned()
                .ok_or_else(|| NetError::Checkpoint(format!("missing meta field `{k}`")))
        };
        let parse = |e: serde_json::Error| NetError::Checkpoint(e.to_string());
        let arch: Arch = serde_json::from_value(field("arch")?).map_err(parse)?;
        let ablation: Ablation = serde_json::from_value(field("ablation")?).map_err(parse)?;
        let ball: BallConfig = serde_json::from_value(field("ball")?).map_err(parse)?;
        let ball = BallConfig::new(ball.c(), ball.eps())?;
        let mut model = Self::new(arch, ablation, ball, 0)?;
        model.load_tensors(&ckpt.tensors, "")?;
        Ok(model)
    }

    /// Overwrites every parameter from `tensors`, looking names up under `prefix`.
    pub(crate) fn load_tensors(&mut self, tensors: &[(String, Tensor)], prefix: &str) -> Result<()> {
        for p in self.params.iter_mut() {
            let key = format!("{prefix}{}", p.name);
            let (_, t) = tensors
                .iter()
                .find(|(n, _)| *n == key)
                .ok_or_else(|| NetError::Checkpoint(format!("missing tensor `{key}`")))?;
            if t.shape() != p.value.shape() {
                return Err(NetError::Checkpoint(format!(
                    "tensor `{key}` has shape {:?}, expected {:?}",
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t.clone();
        }
        Ok(())
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        write_checkpoint(path, &self.to_checkpoint())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_checkpoint(&read_checkpoint(path)?)
    }
}

/// Embeds raw patches (`rows x in_dim`) and clips every patch into the ball.
pub fn encode(tape: &mut Tape, model: &Model, bound: &Bound, x: Var) -> Result<Var> {
    let in_dim = tape.value(x).cols();
    if in_dim != model.arch.in_dim {
        return Err(NetError::Shape(format!(
            "encoder expects {} input features, got {in_dim}",
            model.arch.in_dim
        )));
    }
    let h = model.encoder.hidden.forward(tape, bound, x)?;
    let h = tape.relu(h);
    let s = model.encoder.out.forward(tape, bound, h)?;
    Ok(diffgeo::clip(tape, s, model.manifold()))
}

/// Mean of one query map's patches (Einstein midpoint in the ball).
pub fn query_mean(tape: &mut Tape, query: Var, manifold: Manifold) -> Result<Var> {
    let rows = tape.value(query).rows();
    Ok(diffgeo::midpoint_groups(tape, query, rows, manifold)?)
}

/// Projects every support patch onto the tangent space at the query mean.
pub fn project_support(tape: &mut Tape, support: Var, query_mean: Var, manifold: Manifold) -> Result<Var> {
    Ok(diffgeo::log_map_rows(tape, query_mean, support, manifold)?)
}

/// Fixed 2-D sinusoidal position table, `hw x channels`.
///
/// The first half of the channels encodes the row, the second half the
/// column; within each half even channels use `sin` and odd ones `cos` of
/// the normalised coordinate scaled by `10000^(-2i/d)`.
pub fn spatial_encoding(grid_h: usize, grid_w: usize, channels: usize) -> Tensor {
    let row_feats = channels / 2;
    let col_feats = channels - row_feats;
    let mut t = Tensor::zeros(grid_h * grid_w, channels);
    let embed = |pos: usize, len: usize, i: usize, d: usize| {
        let p = (pos + 1) as f64 / len as f64 * std::f64::consts::TAU;
        let freq = 10000f64.powf(2.0 * (i / 2) as f64 / d as f64);
        if i % 2 == 0 {
            (p / freq).sin()
        } else {
            (p / freq).cos()
        }
    };
    for y in 0..grid_h {
        for x in 0..grid_w {
            let row = t.row_slice_mut(y * grid_w + x);
            for i in 0..row_feats {
                row[i] = embed(y, grid_h, i, row_feats);
            }
            for i in 0..col_feats {
                row[row_feats + i] = embed(x, grid_w, i, col_feats);
            }
        }
    }
    t
}

/// Joint self-attention over every projected support descriptor.
///
/// `tangent` is `(samples * hw) x C`; `positions` holds the matching spatial
/// codes and is added to queries and keys only.
pub fn refine(tape: &mut Tape, model: &Model, bound: &Bound, tangent: Var, positions: Var) -> Result<Var> {
    let sg = &model.signature;
    let c = model.arch.channels as f64;
    let with_pos = tape.add(tangent, positions)?;
    let q = sg.query.forward(tape, bound, with_pos)?;
    let k = sg.key.forward(tape, bound, with_pos)?;
    let v = sg.value.forward(tape, bound, tangent)?;
    let kt = tape.transpose(k);
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, 1.0 / c.sqrt());
    let attn = tape.softmax_rows(scores);
    let mixed = tape.matmul(attn, v)?;
    let h = sg.out.forward(tape, bound, mixed)?;
    let x1 = tape.add(tangent, h)?;
    let x1 = sg.norm1.forward(tape, bound, x1)?;
    let f = sg.ff1.forward(tape, bound, x1)?;
    let f = tape.relu(f);
    let f = sg.ff2.forward(tape, bound, f)?;
    let x2 = tape.add(x1, f)?;
    Ok(sg.norm2.forward(tape, bound, x2)?)
}

/// Positions for `samples` stacked maps.
pub fn tiled_positions(tape: &mut Tape, arch: &Arch, samples: usize) -> Result<Var> {
    let table = spatial_encoding(arch.grid_h, arch.grid_w, arch.channels);
    let hw = arch.hw();
    let c = arch.channels;
    let mut data = Vec::with_capacity(samples * hw * c);
    for _ in 0..samples {
        data.extend_from_slice(table.data());
    }
    Ok(tape.constant(Tensor::new(samples * hw, c, data)?))
}

/// Elementwise mean over the `k` refined maps of each class.
///
/// Input rows are ordered class, sample, patch; output is `(n_way * hw) x C`.
pub fn class_signature(tape: &mut Tape, refined: Var, n_way: usize, k: usize, hw: usize) -> Result<Var> {
    if k == 0 || n_way == 0 {
        return Err(NetError::Shape("class signature needs at least one sample".into()));
    }
    let rows = tape.value(refined).rows();
    if rows != n_way * k * hw {
        return Err(NetError::Shape(format!(
            "expected {} refined rows, got {rows}",
            n_way * k * hw
        )));
    }
    let mut avg = Tensor::zeros(n_way * hw, rows);
    for i in 0..n_way {
        for j in 0..k {
            for p in 0..hw {
                avg.set(i * hw + p, (i * k + j) * hw + p, 1.0 / k as f64);
            }
        }
    }
    let avg = tape.constant(avg);
    Ok(tape.matmul(avg, refined)?)
}

/// Raw relation scores in (0, 1), one per support sample (`samples x 1`).
///
/// Each sample's projected map is concatenated channel-wise with its class
/// signature before the two convolutions.
#[allow(clippy::too_many_arguments)]
pub fn relation_logits(
    tape: &mut Tape,
    model: &Model,
    bound: &Bound,
    ctx: &mut ForwardCtx,
    tangent: Var,
    signature: Var,
    n_way: usize,
    k: usize,
) -> Result<Var> {
    let arch = &model.arch;
    let hw = arch.hw();
    let c = arch.channels;
    let (sig_rows, sig_cols) = tape.value(signature).shape();
    if sig_rows != n_way * hw || sig_cols != c || tape.value(tangent).rows() != n_way * k * hw {
        return Err(NetError::Shape(format!(
            "relation input: tangent {:?}, signature {:?} for {n_way}-way {k}-per-class",
            tape.value(tangent).shape(),
            (sig_rows, sig_cols)
        )));
    }
    let mut index = Vec::with_capacity(n_way * k * hw * c);
    for i in 0..n_way {
        for _ in 0..k {
            for p in 0..hw {
                index.extend((0..c).map(|ch| (i * hw + p) * c + ch));
            }
        }
    }
    let expanded = tape.gather(signature, index, n_way * k * hw, c)?;
    let hybrid = tape.concat_cols(&[tangent, expanded])?;
    let rg = &model.relation;
    let grid = (arch.grid_h, arch.grid_w);
    let h = rg.conv1.forward(tape, bound, hybrid, grid)?;
    let h = rg.bn1.forward(tape, bound, &model.params, ctx, h)?;
    let h = tape.relu(h);
    let h = dropout(tape, ctx, h, DROPOUT_P)?;
    let grid1 = rg.conv1.output_grid(grid);
    let out = rg.conv2.forward(tape, bound, h, grid1)?;
    let out = rg.bn2.forward(tape, bound, &model.params, ctx, out)?;
    Ok(tape.sigmoid(out))
}

/// Relation weights `n_way x k`: sigmoid scores normalised by a softmax
/// over the samples of each class.
#[allow(clippy::too_many_arguments)]
pub fn relation_scores(
    tape: &mut Tape,
    model: &Model,
    bound: &Bound,
    ctx: &mut ForwardCtx,
    tangent: Var,
    signature: Var,
    n_way: usize,
    k: usize,
) -> Result<Var> {
    let raw = relation_logits(tape, model, bound, ctx, tangent, signature, n_way, k)?;
    let grid = tape.reshape(raw, n_way, k)?;
    Ok(tape.softmax_rows(grid))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(ablation: Ablation) -> Model {
        Model::new(
            Arch::with_dims(3, 3, 4, 6),
            ablation,
            BallConfig::with_curvature(0.7).unwrap(),
            11,
        )
        .unwrap()
    }

    #[test]
    fn relation_kernel_sizes() {
        assert_eq!(Arch::with_dims(5, 5, 1, 1).relation_kernels(), ((3, 3), (3, 3)));
        assert_eq!(Arch::with_dims(3, 3, 1, 1).relation_kernels(), ((2, 2), (2, 2)));
        assert_eq!(Arch::with_dims(2, 2, 1, 1).relation_kernels(), ((2, 2), (1, 1)));
        assert_eq!(Arch::with_dims(1, 4, 1, 1).relation_kernels(), ((1, 3), (1, 2)));
    }

    #[test]
    fn s2s_dimensions_follow_grid() {
        let m = Model::new(
            Arch::with_dims(5, 5, 8, 8),
            Ablation::full(),
            BallConfig::default(),
            0,
        )
        .unwrap();
        assert_eq!(m.params.get(m.s2s.fc1.w).shape(), (625, 25));
        assert_eq!(m.params.get(m.s2s.fc2.w).shape(), (25, 1));
    }

    #[test]
    fn variants_roundtrip_names() {
        for v in Variant::ALL {
            assert_eq!(Variant::parse(v.name()), Some(v));
            assert_eq!(v.ablation().variant(), Some(v));
        }
    }

    #[test]
    fn zero_encoder_maps_to_origin() {
        let mut m = model(Ablation::full());
        for p in m.params.iter_mut().filter(|p| p.name.starts_with("encoder")) {
            p.value = Tensor::zeros(p.value.rows(), p.value.cols());
        }
        let mut tape = Tape::new();
        let bound = m.bind(&mut tape);
        let x = tape.constant(Tensor::zeros(9, 4));
        let s = encode(&mut tape, &m, &bound, x).unwrap();
        assert_eq!(tape.value(s).max_abs(), 0.0);
    }

    #[test]
    fn encoder_output_is_clipped() {
        let m = model(Ablation::full());
        let mut tape = Tape::new();
        let bound = m.bind(&mut tape);
        let data: Vec<f64> = (0..36).map(|i| (i as f64 * 1.7).sin() * 40.0).collect();
        let x = tape.constant(Tensor::new(9, 4, data).unwrap());
        let s = encode(&mut tape, &m, &bound, x).unwrap();
        let mu = m.ball.clip_norm();
        for r in 0..9 {
            let n = crate::geometry::norm(tape.value(s).row_slice(r));
            assert!(n <= mu * (1.0 + 1e-12));
        }
    }

    #[test]
    fn spatial_encoding_is_distinct_per_cell() {
        let t = spatial_encoding(3, 3, 6);
        for a in 0..9 {
            for b in (a + 1)..9 {
                assert_ne!(t.row_slice(a), t.row_slice(b));
            }
        }
    }

    #[test]
    fn signature_of_single_sample_is_itself() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(4, 2, (0..8).map(f64::from).collect()).unwrap());
        let s = class_signature(&mut tape, x, 2, 1, 2).unwrap();
        assert_eq!(tape.value(s), tape.value(x));
        assert!(class_signature(&mut tape, x, 2, 0, 2).is_err());
    }
}
