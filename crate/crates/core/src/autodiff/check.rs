//! Central-finite-difference comparison against analytic gradients.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Compare the analytic gradient of a scalar function against central finite
/// differences at `points`.
///
/// Returns `max` over all coordinates of `|analytic - fd| / max(1, |analytic|)`.
/// The function `f` builds its result from the given input vars; anything it
/// creates internally (constants, extra inputs) is held fixed during the
/// perturbations.
pub fn finite_difference_check<F>(f: F, points: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |pts: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> =
            pts.iter().enumerate().map(|(i, t)| g.input(&format!("x{i}"), t.clone())).collect();
        let out = f(&mut g, &vars)?;
        g.value(out).scalar_value()
    };

    // analytic pass
    let mut g = Graph::new();
    let vars: Vec<Var> =
        points.iter().enumerate().map(|(i, t)| g.input(&format!("x{i}"), t.clone())).collect();
    let out = f(&mut g, &vars)?;
    if !g.value(out).is_scalar() {
        return Err(Error::Contract("finite_difference_check needs a scalar function".into()));
    }
    let gm = g.gradient(out, &vars)?;
    let analytic: Vec<Tensor> =
        vars.iter().map(|&v| g.value(gm.grad(v).expect("requested var")).clone()).collect();

    let mut max_err: f64 = 0.0;
    for ti in 0..points.len() {
        for ci in 0..points[ti].numel() {
            let mut plus = points.to_vec();
            plus[ti].data_mut()[ci] += step;
            let mut minus = points.to_vec();
            minus[ti].data_mut()[ci] -= step;
            let fd = (eval(&plus)? - eval(&minus)?) / (2.0 * step);
            let a = analytic[ti].data()[ci];
            let err = (a - fd).abs() / f64::max(1.0, a.abs());
            max_err = max_err.max(err);
        }
    }
    Ok(max_err)
}
