use rand::Rng;

use crate::autodiff::{BatchStats, Gradients, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    /// Buffers such as batch-norm running statistics are not trained.
    pub trainable: bool,
}

/// Ordered, named parameter storage shared by all networks of a model.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    params: Vec<Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value,
            trainable,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn n_trainable_scalars(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.is_finite())
    }
}

/// Parameters registered as leaves of one tape.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn bind(tape: &mut Tape, params: &ParamSet) -> Self {
        let vars = params
            .iter()
            .map(|p| {
                if p.trainable {
                    tape.leaf(p.value.clone())
                } else {
                    tape.constant(p.value.clone())
                }
            })
            .collect();
        Self { vars }
    }

    /// Binds every parameter as a constant except `id`, which is replaced by `var`.
    pub fn bind_with(tape: &mut Tape, params: &ParamSet, id: ParamId, var: Var) -> Self {
        let vars = params
            .iter()
            .enumerate()
            .map(|(i, p)| {
                if i == id.0 {
                    var
                } else {
                    tape.constant(p.value.clone())
                }
            })
            .collect();
        Self { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Gradient per parameter, zeros where nothing flowed.
    pub fn collect_grads(&self, grads: &Gradients, params: &ParamSet) -> Vec<Tensor> {
        self.vars
            .iter()
            .zip(params.iter())
            .map(|(v, p)| {
                grads
                    .get(*v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(p.value.rows(), p.value.cols()))
            })
            .collect()
    }
}

/// Pending running-statistics update from a training-mode batch norm.
#[derive(Debug, Clone)]
pub struct BnUpdate {
    pub mean: ParamId,
    pub var: ParamId,
    pub stats: BatchStats,
}

pub const BN_MOMENTUM: f64 = 0.1;
pub const NORM_EPS: f64 = 1e-5;

/// Mode, dropout randomness and collected batch-norm updates for one forward pass.
#[derive(Debug)]
pub struct ForwardCtx {
    train: bool,
    rng: rand_chacha::ChaCha8Rng,
    bn_updates: Vec<BnUpdate>,
}

impl ForwardCtx {
    pub fn eval() -> Self {
        Self {
            train: false,
            rng: rand::SeedableRng::seed_from_u64(0),
            bn_updates: Vec::new(),
        }
    }

    pub fn train(rng: rand_chacha::ChaCha8Rng) -> Self {
        Self {
            train: true,
            rng,
            bn_updates: Vec::new(),
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub(crate) fn record_bn(&mut self, update: BnUpdate) {
        self.bn_updates.push(update);
    }

    pub fn take_bn_updates(&mut self) -> Vec<BnUpdate> {
        std::mem::take(&mut self.bn_updates)
    }

    /// Inverted-dropout mask with keep probability `1 - p`.
    pub(crate) fn dropout_mask(&mut self, rows: usize, cols: usize, p: f64) -> Tensor {
        let keep = 1.0 - p;
        let mut m = Tensor::zeros(rows, cols);
        for v in m.data_mut() {
            if self.rng.random::<f64>() < keep {
                *v = 1.0 / keep;
            }
        }
        m
    }
}

/// Folds batch statistics into the running buffers in call order.
pub fn apply_bn_updates(params: &mut ParamSet, updates: &[BnUpdate]) {
    for u in updates {
        for (id, obs) in [(u.mean, &u.stats.mean), (u.var, &u.stats.var)] {
            let buf = params.get_mut(id);
            for (r, o) in buf.data_mut().iter_mut().zip(obs) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * o;
            }
        }
    }
}
