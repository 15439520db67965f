use rand::Rng;

use super::params::{Bound, BnUpdate, ForwardCtx, ParamId, ParamSet, NORM_EPS};
use crate::autodiff::{NormStats, Result, Tape, Tensor, Var};

/// Uniform fan-in initialisation, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
fn fan_in_uniform(rng: &mut impl Rng, rows: usize, cols: usize, fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    Tensor::new(rows, cols, data).expect("sized")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(params: &mut ParamSet, name: &str, in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let w = params.add(format!("{name}.weight"), fan_in_uniform(rng, in_dim, out_dim, in_dim), true);
        let b = params.add(format!("{name}.bias"), Tensor::zeros(1, out_dim), true);
        Self { w, b, in_dim, out_dim }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, bound.var(self.w))?;
        tape.add_row(y, bound.var(self.b))
    }
}

/// Normalises each column over the rows of its input.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub dim: usize,
}

impl BatchNorm {
    pub fn new(params: &mut ParamSet, name: &str, dim: usize) -> Self {
        Self {
            gamma: params.add(format!("{name}.gamma"), Tensor::filled(1, dim, 1.0), true),
            beta: params.add(format!("{name}.beta"), Tensor::zeros(1, dim), true),
            running_mean: params.add(format!("{name}.running_mean"), Tensor::zeros(1, dim), false),
            running_var: params.add(format!("{name}.running_var"), Tensor::filled(1, dim, 1.0), false),
            dim,
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, params: &ParamSet, ctx: &mut ForwardCtx, x: Var) -> Result<Var> {
        let stats = if ctx.is_train() {
            NormStats::Batch
        } else {
            NormStats::Running {
                mean: params.get(self.running_mean).data().to_vec(),
                var: params.get(self.running_var).data().to_vec(),
            }
        };
        let (y, observed) = tape.batch_norm(x, bound.var(self.gamma), bound.var(self.beta), stats, NORM_EPS)?;
        if let Some(stats) = observed {
            ctx.record_bn(BnUpdate {
                mean: self.running_mean,
                var: self.running_var,
                stats,
            });
        }
        Ok(y)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(params: &mut ParamSet, name: &str, dim: usize) -> Self {
        Self {
            gamma: params.add(format!("{name}.gamma"), Tensor::filled(1, dim, 1.0), true),
            beta: params.add(format!("{name}.beta"), Tensor::zeros(1, dim), true),
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        tape.layer_norm(x, bound.var(self.gamma), bound.var(self.beta), NORM_EPS)
    }
}

/// Valid-padding, stride-1 convolution over a batch of `h x w` maps.
///
/// Inputs are `(batch * h * w) x in_ch` with positions in row-major order;
/// outputs are `(batch * h' * w') x out_ch`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub kernel: (usize, usize),
    pub in_ch: usize,
    pub out_ch: usize,
}

impl Conv2d {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        kernel: (usize, usize),
        in_ch: usize,
        out_ch: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = kernel.0 * kernel.1 * in_ch;
        let w = params.add(format!("{name}.weight"), fan_in_uniform(rng, fan_in, out_ch, fan_in), true);
        let b = params.add(format!("{name}.bias"), Tensor::zeros(1, out_ch), true);
        Self {
            w,
            b,
            kernel,
            in_ch,
            out_ch,
        }
    }

    pub fn output_grid(&self, grid: (usize, usize)) -> (usize, usize) {
        (grid.0 + 1 - self.kernel.0, grid.1 + 1 - self.kernel.1)
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var, grid: (usize, usize)) -> Result<Var> {
        let (h, w) = grid;
        let (kh, kw) = self.kernel;
        let (oh, ow) = self.output_grid(grid);
        let rows = tape.value(x).rows();
        let batch = rows / (h * w);
        let patch = kh * kw * self.in_ch;
        let mut index = Vec::with_capacity(batch * oh * ow * patch);
        for b in 0..batch {
            for oy in 0..oh {
                for ox in 0..ow {
                    for dy in 0..kh {
                        for dx in 0..kw {
                            let row = b * h * w + (oy + dy) * w + (ox + dx);
                            index.extend((0..self.in_ch).map(|c| row * self.in_ch + c));
                        }
                    }
                }
            }
        }
        let cols = tape.gather(x, index, batch * oh * ow, patch)?;
        let y = tape.matmul(cols, bound.var(self.w))?;
        tape.add_row(y, bound.var(self.b))
    }
}

/// Inverted dropout in training mode, identity otherwise.
pub fn dropout(tape: &mut Tape, ctx: &mut ForwardCtx, x: Var, p: f64) -> Result<Var> {
    if !ctx.is_train() || p == 0.0 {
        return Ok(x);
    }
    let (r, c) = tape.value(x).shape();
    let mask = tape.constant(ctx.dropout_mask(r, c, p));
    tape.mul(x, mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut params = ParamSet::new();
        let conv = Conv2d::new(&mut params, "c", (2, 2), 2, 3, &mut rng);
        // two 3x3 maps with two channels
        let input: Vec<f64> = (0..36).map(|i| ((i * 7) % 11) as f64 / 10.0 - 0.5).collect();
        let mut tape = Tape::new();
        let bound = Bound::bind(&mut tape, &params);
        let x = tape.leaf(Tensor::new(18, 2, input.clone()).unwrap());
        let y = conv.forward(&mut tape, &bound, x, (3, 3)).unwrap();
        assert_eq!(tape.value(y).shape(), (8, 3));
        let w = params.get(conv.w);
        for b in 0..2 {
            for oy in 0..2 {
                for ox in 0..2 {
                    for o in 0..3 {
                        let mut s = 0.0;
                        for dy in 0..2 {
                            for dx in 0..2 {
                                for c in 0..2 {
                                    let row = b * 9 + (oy + dy) * 3 + ox + dx;
                                    s += input[row * 2 + c] * w.get((dy * 2 + dx) * 2 + c, o);
                                }
                            }
                        }
                        let got = tape.value(y).get(b * 4 + oy * 2 + ox, o);
                        assert!((got - s).abs() < 1e-14);
                    }
                }
            }
        }
    }

    #[test]
    fn batch_norm_eval_uses_running_stats() {
        let mut params = ParamSet::new();
        let bn = BatchNorm::new(&mut params, "bn", 2);
        *params.get_mut(bn.running_mean) = Tensor::row(vec![1.0, -1.0]);
        *params.get_mut(bn.running_var) = Tensor::row(vec![4.0, 1.0]);
        let mut tape = Tape::new();
        let bound = Bound::bind(&mut tape, &params);
        let x = tape.leaf(Tensor::row(vec![3.0, 0.0]));
        let mut ctx = ForwardCtx::eval();
        let y = bn.forward(&mut tape, &bound, &params, &mut ctx, x).unwrap();
        let v = tape.value(y);
        assert!((v.get(0, 0) - 2.0 / (4.0f64 + NORM_EPS).sqrt()).abs() < 1e-12);
        assert!((v.get(0, 1) - 1.0 / (1.0f64 + NORM_EPS).sqrt()).abs() < 1e-12);
        assert!(ctx.take_bn_updates().is_empty());
    }

    #[test]
    fn dropout_only_in_training() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::filled(4, 4, 1.0));
        let mut eval = ForwardCtx::eval();
        assert_eq!(dropout(&mut tape, &mut eval, x, 0.5).unwrap(), x);
        let mut train = ForwardCtx::train(rand_chacha::ChaCha8Rng::seed_from_u64(1));
        let y = dropout(&mut tape, &mut train, x, 0.5).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0 || v == 2.0));
    }
}
