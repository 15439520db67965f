use super::{Result, Tape, Tensor, Var};

/// Outcome of comparing tape gradients with central differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub tape_grad: Vec<f64>,
    pub fd_grad: Vec<f64>,
    /// Largest relative deviation over the coordinates that were not flagged.
    pub max_rel_error: f64,
    pub worst_index: Option<usize>,
    /// Coordinates whose one-sided differences disagree: the function has a
    /// kink (ReLU, clip boundary, ...) within one step of the point.
    pub kinks: Vec<usize>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }

    pub fn n_checked(&self) -> usize {
        self.tape_grad.len() - self.kinks.len()
    }
}

/// Magnitude below which deviations are measured absolutely.
const REL_FLOOR: f64 = 1e-6;
/// One-sided slopes disagreeing by more than this (relative) flag a kink.
const KINK_TOL: f64 = 1e-3;

pub(crate) fn rel_dev(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Checks the reverse-mode gradient of a scalar function at `point`
/// against central differences with the given step.
pub fn finite_diff_check<F>(f: F, point: &Tensor, step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let eval = |x: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone());
        let out = f(&mut tape, v)?;
        Ok(tape.scalar(out))
    };

    let mut tape = Tape::new();
    let x = tape.leaf(point.clone());
    let root = f(&mut tape, x)?;
    let f0 = tape.scalar(root);
    let grads = tape.backward(root)?;
    let tape_grad = grads
        .get(x)
        .map(|g| g.data().to_vec())
        .unwrap_or_else(|| vec![0.0; point.len()]);

    let mut fd_grad = Vec::with_capacity(point.len());
    let mut kinks = Vec::new();
    let mut max_rel_error: f64 = 0.0;
    let mut worst_index = None;
    for i in 0..point.len() {
        let mut plus = point.clone();
        plus.data_mut()[i] += step;
        let mut minus = point.clone();
        minus.data_mut()[i] -= step;
        let fp = eval(&plus)?;
        let fm = eval(&minus)?;
        let central = (fp - fm) / (2.0 * step);
        let forward = (fp - f0) / step;
        let backward = (f0 - fm) / step;
        fd_grad.push(central);
        if (forward - backward).abs() > KINK_TOL * central.abs().max(1.0) {
            kinks.push(i);
            continue;
        }
        let dev = rel_dev(tape_grad[i], central);
        if dev > max_rel_error || worst_index.is_none() {
            max_rel_error = max_rel_error.max(dev);
            worst_index = Some(i);
        }
    }
    Ok(GradCheckReport {
        tape_grad,
        fd_grad,
        max_rel_error,
        worst_index,
        kinks,
        tolerance: tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn squared_norm_is_exact() {
        let p = Tensor::row(vec![0.3, -1.2, 2.5, 0.7]);
        let report = finite_diff_check(
            |t, x| {
                let s = t.row_sq_norm(x);
                Ok(t.sum(s))
            },
            &p,
            1e-5,
            1e-8,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
        assert!(report.kinks.is_empty());
    }

    #[test]
    fn clip_boundary_is_flagged() {
        // |x| = 1 exactly sits on the clip kink at mu = 1.
        let p = Tensor::row(vec![0.6, 0.8]);
        let report = finite_diff_check(
            |t, x| {
                let c = t.clip_rows(x, 1.0);
                let w = t.constant(Tensor::row(vec![1.0, 2.0]));
                let d = t.row_dot(c, w)?;
                Ok(t.sum(d))
            },
            &p,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(!report.kinks.is_empty(), "{report:?}");
    }
}
