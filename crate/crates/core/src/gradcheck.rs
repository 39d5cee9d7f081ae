//! Central finite-difference verification of reverse-mode gradients.
//!
//! The builder closure reconstructs the op graph from scratch on every call,
//! which keeps the numeric path fully independent of any cached analytic
//! state. Verification runs in f64 only.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::matrix::Matrix;

/// Outcome of a gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Worst relative error over every coordinate of every input.
    pub max_rel_err: f64,
    /// (input index, flat coordinate) where the worst error occurred.
    pub worst_coord: (usize, usize),
    /// Total coordinates compared.
    pub coords_checked: usize,
}

/// Compares reverse-mode gradients against (f(x+h) - f(x-h)) / 2h for every
/// coordinate of every input, returning the worst relative error with
/// denominator max(|analytic|, |numeric|, 1e-8).
///
/// |analytic| and |numeric| are the gradients' overall magnitudes (their
/// largest absolute coordinate), so the error is measured against the
/// gradient scale. A per-coordinate denominator would rank central-difference
/// rounding noise (about eps * |loss| / 2h) on vanishing coordinates as the
/// worst error and certify nothing at f64 precision.
///
/// `build` receives leaves registered from `inputs` in order and must return
/// a 1x1 loss node.
pub fn grad_check<F>(inputs: &[Matrix<f64>], h: f64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    if !(1e-6..=1e-4).contains(&h) {
        return Err(Error::InvalidArgument(format!(
            "step size {h} outside [1e-6, 1e-4]"
        )));
    }

    let eval = |points: &[Matrix<f64>]| -> Result<(f64, Graph<f64>, Vec<NodeId>, NodeId)> {
        let mut graph = Graph::new();
        let ids: Vec<NodeId> = points
            .iter()
            .map(|m| graph.leaf(m.clone()))
            .collect::<Result<_>>()?;
        let loss = build(&mut graph, &ids)?;
        let value = graph.value(loss);
        if value.shape() != (1, 1) {
            return Err(Error::ShapeMismatch {
                op: "grad_check",
                details: format!("loss must be 1x1, got {:?}", value.shape()),
            });
        }
        let v = value.get(0, 0);
        if !v.is_finite() {
            return Err(Error::NonFinite("grad_check loss".into()));
        }
        Ok((v, graph, ids, loss))
    };

    let (_, graph, ids, loss) = eval(inputs)?;
    let grads = graph.backward(loss)?;
    let analytic: Vec<Matrix<f64>> = ids
        .iter()
        .zip(inputs.iter())
        .map(|(&id, input)| {
            grads
                .get(id)
                .cloned()
                .unwrap_or_else(|| Matrix::zeros(input.rows(), input.cols()))
        })
        .collect();

    let mut numeric: Vec<Matrix<f64>> = inputs
        .iter()
        .map(|m| Matrix::zeros(m.rows(), m.cols()))
        .collect();
    let mut probe: Vec<Matrix<f64>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for k in 0..input.len() {
            let original = probe[i].data()[k];
            probe[i].data_mut()[k] = original + h;
            let (plus, ..) = eval(&probe)?;
            probe[i].data_mut()[k] = original - h;
            let (minus, ..) = eval(&probe)?;
            probe[i].data_mut()[k] = original;
            numeric[i].data_mut()[k] = (plus - minus) / (2.0 * h);
        }
    }

    let magnitude = |grads: &[Matrix<f64>]| -> f64 {
        grads
            .iter()
            .flat_map(|g| g.data().iter())
            .fold(0.0f64, |acc, v| acc.max(v.abs()))
    };
    let denom = magnitude(&analytic).max(magnitude(&numeric)).max(1e-8);

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_coord: (0, 0),
        coords_checked: 0,
    };
    for (i, (a, n)) in analytic.iter().zip(numeric.iter()).enumerate() {
        for (k, (av, nv)) in a.data().iter().zip(n.data().iter()).enumerate() {
            let rel = (av - nv).abs() / denom;
            report.coords_checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_coord = (i, k);
            }
        }
    }
    Ok(report)
}
