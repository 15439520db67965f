use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::netmods::ParamSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl std::str::FromStr for OptimizerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sgd" => Ok(Self::Sgd),
            "adam" => Ok(Self::Adam),
            other => Err(format!("unknown optimizer `{other}` (expected sgd or adam)")),
        }
    }
}

pub const SGD_MOMENTUM: f64 = 0.9;
const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Optimizer with L2 weight decay folded into the gradient.
///
/// `first` holds SGD momentum buffers or Adam first moments; `second` is
/// only used by Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub weight_decay: f64,
    pub first: Vec<Tensor>,
    pub second: Vec<Tensor>,
    pub steps: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, weight_decay: f64, params: &ParamSet) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|p| Tensor::zeros(p.value.rows(), p.value.cols()))
                .collect::<Vec<_>>()
        };
        Self {
            kind,
            weight_decay,
            first: zeros(),
            second: if kind == OptimizerKind::Adam { zeros() } else { Vec::new() },
            steps: 0,
        }
    }

    /// Updates every trainable parameter in place.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor], lr: f64) {
        self.steps += 1;
        let t = self.steps as i32;
        let (bc1, bc2) = (1.0 - ADAM_BETA1.powi(t), 1.0 - ADAM_BETA2.powi(t));
        for (i, p) in params.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let g = grads[i].data();
            let w = p.value.data_mut();
            match self.kind {
                OptimizerKind::Sgd => {
                    let v = self.first[i].data_mut();
                    for j in 0..w.len() {
                        let gj = g[j] + self.weight_decay * w[j];
                        v[j] = SGD_MOMENTUM * v[j] + gj;
                        w[j] -= lr * v[j];
                    }
                }
                OptimizerKind::Adam => {
                    let m = self.first[i].data_mut();
                    let s = self.second[i].data_mut();
                    for j in 0..w.len() {
                        let gj = g[j] + self.weight_decay * w[j];
                        m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * gj;
                        s[j] = ADAM_BETA2 * s[j] + (1.0 - ADAM_BETA2) * gj * gj;
                        w[j] -= lr * (m[j] / bc1) / ((s[j] / bc2).sqrt() + ADAM_EPS);
                    }
                }
            }
        }
    }
}
