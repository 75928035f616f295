use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use serde::Serialize;

/// Comparison of analytic gradients against central differences.
#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    /// `(analytic, numeric)` per coordinate; `numeric` is NaN when the
    /// function could not be evaluated at a perturbed point.
    pub per_coordinate: Vec<(f64, f64)>,
    pub step_h: f64,
    pub failed_coordinates: Vec<usize>,
}

impl GradCheckReport {
    pub fn compare(analytic: &[f64], numeric: &[Option<f64>], step_h: f64) -> Self {
        let mut max_abs_err: f64 = 0.0;
        let mut max_rel_err: f64 = 0.0;
        let mut per_coordinate = Vec::with_capacity(analytic.len());
        let mut failed_coordinates = Vec::new();
        for (i, (&a, n)) in analytic.iter().zip(numeric).enumerate() {
            match n {
                Some(n) if n.is_finite() && a.is_finite() => {
                    let abs = (a - n).abs();
                    let rel = abs / a.abs().max(n.abs()).max(1e-12);
                    max_abs_err = max_abs_err.max(abs);
                    max_rel_err = max_rel_err.max(rel);
                    per_coordinate.push((a, *n));
                }
                _ => {
                    failed_coordinates.push(i);
                    per_coordinate.push((a, f64::NAN));
                }
            }
        }
        if !failed_coordinates.is_empty() {
            max_abs_err = f64::INFINITY;
            max_rel_err = f64::INFINITY;
        }
        Self {
            max_abs_err,
            max_rel_err,
            per_coordinate,
            step_h,
            failed_coordinates,
        }
    }

    pub fn passed(&self, rel_tol: f64) -> bool {
        self.failed_coordinates.is_empty() && self.max_rel_err <= rel_tol
    }
}

/// Central differences `(f(x + h e_i) − f(x − h e_i)) / 2h` per coordinate.
pub fn numeric_gradient<F>(f: F, x: &Tensor, h: f64) -> Vec<Option<f64>>
where
    F: Fn(&Tensor) -> Result<f64>,
{
    let mut probe = x.clone();
    (0..x.len())
        .map(|i| {
            let orig = x.data()[i];
            probe.data_mut()[i] = orig + h;
            let up = f(&probe);
            probe.data_mut()[i] = orig - h;
            let down = f(&probe);
            probe.data_mut()[i] = orig;
            match (up, down) {
                (Ok(u), Ok(d)) if u.is_finite() && d.is_finite() => Some((u - d) / (2.0 * h)),
                _ => None,
            }
        })
        .collect()
}

/// Checks the reverse-mode gradient of a graph-built scalar function.
///
/// `build` receives a fresh graph and the input leaf and returns the scalar
/// output node. It is invoked once with gradients enabled and twice per
/// coordinate for the numeric estimate.
pub fn finite_diff_check<F>(build: F, x: &Tensor, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::Domain(format!("finite-difference step must be positive, got {h}")));
    }
    let mut g = Graph::new();
    let leaf = g.param(x.clone());
    let root = build(&mut g, leaf)?;
    g.backward(root)?;
    let analytic = match g.grad(leaf) {
        Some(t) => t.data().to_vec(),
        None => vec![0.0; x.len()],
    };
    let numeric = numeric_gradient(
        |t| {
            let mut g = Graph::new();
            let leaf = g.constant(t.clone());
            let root = build(&mut g, leaf)?;
            Ok(g.scalar(root))
        },
        x,
        h,
    );
    Ok(GradCheckReport::compare(&analytic, &numeric, h))
}
