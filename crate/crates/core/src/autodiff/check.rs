//! Central-difference verification of analytic gradients.

use super::{AutodiffError, Graph, NodeId};

/// Per-coordinate comparison of analytic and numeric gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub rel_errors: Vec<f64>,
    pub max_rel_error: f64,
}

impl GradCheckReport {
    pub fn from_gradients(analytic: Vec<f64>, numeric: Vec<f64>) -> Self {
        let rel_errors: Vec<f64> = analytic.iter().zip(&numeric).map(|(&a, &n)| relative_error(a, n)).collect();
        let max_rel_error = rel_errors.iter().cloned().fold(0.0, f64::max);
        Self { analytic, numeric, rel_errors, max_rel_error }
    }
}

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// `(f(p + eps·e_i) − f(p − eps·e_i)) / (2·eps)` for every coordinate.
pub fn central_differences<F: FnMut(&[f64]) -> f64>(mut f: F, params: &[f64], eps: f64) -> Vec<f64> {
    let mut p = params.to_vec();
    (0..params.len())
        .map(|i| {
            p[i] = params[i] + eps;
            let up = f(&p);
            p[i] = params[i] - eps;
            let down = f(&p);
            p[i] = params[i];
            (up - down) / (2.0 * eps)
        })
        .collect()
}

/// Builds the scalar function `build(params)` once with leaves to obtain the
/// analytic gradient, then re-evaluates it at perturbed parameters for the
/// numeric one.
pub fn finite_diff_check<F, E>(build: F, params: &[f64], eps: f64) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId, E>,
    E: From<AutodiffError>,
{
    let mut g = Graph::new();
    let leaves: Vec<NodeId> = params.iter().map(|&v| g.leaf(v)).collect();
    let out = build(&mut g, &leaves)?;
    g.backward(out)?;
    let analytic = g.grads_of(&leaves).expect("backward ran");

    let mut failure = None;
    let numeric = central_differences(
        |p| {
            let mut g = Graph::new();
            let consts: Vec<NodeId> = p.iter().map(|&v| g.constant(v)).collect();
            match build(&mut g, &consts) {
                Ok(n) => g.value(n),
                Err(e) => {
                    failure.get_or_insert(e);
                    f64::NAN
                }
            }
        },
        params,
        eps,
    );
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(GradCheckReport::from_gradients(analytic, numeric))
}
