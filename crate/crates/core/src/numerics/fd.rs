//! Central finite differences, used as an independent oracle for
//! [`Graph::backward`](crate::numerics::Graph::backward).

use crate::error::Result;
use crate::numerics::graph::{Graph, Var};
use crate::numerics::tensor::Tensor;

/// Outcome of a gradient check on one tensor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FdOutcome {
    Checked {
        max_rel_error: f64,
    },
    /// The tensor is frozen, so there is no analytic gradient to compare.
    NotTrainable,
}

impl FdOutcome {
    pub fn passes(&self, tol: f64) -> bool {
        match self {
            FdOutcome::Checked { max_rel_error } => *max_rel_error < tol,
            FdOutcome::NotTrainable => true,
        }
    }
}

/// Numerical gradient `(f(x + h e_k) - f(x - h e_k)) / 2h` for every coordinate.
pub fn numerical_gradient(f: impl Fn(&Tensor) -> Result<f64>, x: &Tensor, h: f64) -> Result<Tensor> {
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.shape());
    for k in 0..x.len() {
        let orig = x.data()[k];
        probe.data_mut()[k] = orig + h;
        let up = f(&probe)?;
        probe.data_mut()[k] = orig - h;
        let down = f(&probe)?;
        probe.data_mut()[k] = orig;
        out.data_mut()[k] = (up - down) / (2.0 * h);
    }
    Ok(out)
}

/// Largest coordinate deviation, relative to the larger of the two
/// gradients' max-norms. Returns 0 when both gradients vanish.
pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    let scale = analytic.max_abs().max(numeric.max_abs());
    if scale < 1e-300 {
        return 0.0;
    }
    analytic.max_abs_diff(numeric) / scale
}

/// Compares `backward()` against central differences for the input `x`.
///
/// `build` records a scalar function of its leaf argument on the supplied
/// graph. When `trainable` is false the check is skipped.
pub fn finite_difference_check<F>(build: F, x: &Tensor, trainable: bool, h: f64) -> Result<FdOutcome>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if !trainable {
        return Ok(FdOutcome::NotTrainable);
    }
    let mut g = Graph::new();
    let leaf = g.leaf(x.clone(), true);
    let root = build(&mut g, leaf)?;
    let grads = g.backward(root)?;
    let analytic = grads.get(leaf).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
    let numeric = numerical_gradient(
        |t| {
            let mut g = Graph::no_grad();
            let leaf = g.leaf(t.clone(), false);
            let root = build(&mut g, leaf)?;
            Ok(g.value(root).item())
        },
        x,
        h,
    )?;
    Ok(FdOutcome::Checked {
        max_rel_error: max_relative_error(&analytic, &numeric),
    })
}
