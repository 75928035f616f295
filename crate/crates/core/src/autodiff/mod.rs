//! Dense tensors, reverse-mode differentiation and divergence primitives.

mod gradcheck;
mod graph;
pub(crate) mod kernels;
mod tensor;

pub use gradcheck::{finite_diff_check, numeric_gradient, GradCheckReport};
pub use graph::{Graph, Segment, Var};
pub use kernels::PROB_FLOOR;
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// `softmax(logits / tau)` of a vector.
pub fn softmax_temp(logits: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::Domain(format!("temperature must be positive, got {tau}")));
    }
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(Error::Input("non-finite logit".into()));
    }
    if logits.is_empty() {
        return Err(Error::Input("empty logit vector".into()));
    }
    let mut out = logits.to_vec();
    kernels::softmax_in_place(&mut out, tau);
    Ok(out)
}

/// KL(p‖q) in nats. Probabilities are floored at [`PROB_FLOOR`] (and
/// renormalized) before taking logs; entries with `p_i = 0` contribute 0.
pub fn kl_div(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Shape(format!("kl_div lengths {} vs {}", p.len(), q.len())));
    }
    for (name, v) in [("P", p), ("Q", q)] {
        let s: f64 = v.iter().sum();
        if (s - 1.0).abs() > 1e-9 || v.iter().any(|x| !(*x >= 0.0)) {
            return Err(Error::Input(format!("{name} is not a probability vector (sum {s})")));
        }
    }
    let pf = kernels::floor_probs(p);
    let qf = kernels::floor_probs(q);
    Ok(kernels::kl_row(p, &pf, &qf).max(0.0))
}
