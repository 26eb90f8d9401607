//! Central finite-difference check of reverse-mode gradients.

use alloc::format;
use alloc::vec::Vec;

use crate::graph::{Graph, Var};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Floor of the relative-error denominator. Gradients below it, such as the
/// exactly-zero attention key biases, are judged on absolute error: one ulp
/// of a loss near 16 moves a central difference at ε = 1e-5 by 1.8e-10.
pub const DENOM_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(parameter index, element index)` of the worst element.
    pub worst: Option<(usize, usize)>,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub elements_checked: usize,
}

/// Compares the gradient of `f` with `(f(x+ε) − f(x−ε)) / 2ε` for every
/// element of every tensor in `params`.
///
/// `f` receives a fresh graph and one leaf per parameter (same order as
/// `params`) and must return a scalar node. It is called `1 + 2·n` times, so
/// any randomness inside it has to be re-seeded on each call.
pub fn gradcheck<F>(mut f: F, params: &mut [Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::Param(format!("gradcheck epsilon must be positive, got {eps}")));
    }
    let analytic: Vec<Vec<f64>> = {
        let mut g = Graph::new();
        let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
        let out = f(&mut g, &vars)?;
        check_finite(g.value(out).item())?;
        let grads = g.backward(out)?;
        vars.iter()
            .zip(params.iter())
            .map(|(&v, p)| {
                grads
                    .get(v)
                    .map_or_else(|| alloc::vec![0.0; p.len()], <[f64]>::to_vec)
            })
            .collect()
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        elements_checked: 0,
    };
    for pi in 0..params.len() {
        for ei in 0..params[pi].len() {
            let orig = params[pi].data()[ei];
            params[pi].data_mut()[ei] = orig + eps;
            let plus = evaluate(&mut f, params);
            params[pi].data_mut()[ei] = orig - eps;
            let minus = evaluate(&mut f, params);
            params[pi].data_mut()[ei] = orig;
            let numeric = (plus? - minus?) / (2.0 * eps);
            let a = analytic[pi][ei];
            let denom = a.abs().max(numeric.abs()).max(DENOM_FLOOR);
            let rel = (a - numeric).abs() / denom;
            report.elements_checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel;
                report.worst = Some((pi, ei));
                report.analytic_at_worst = a;
                report.numeric_at_worst = numeric;
            }
        }
    }
    Ok(report)
}

fn evaluate<F>(f: &mut F, params: &[Tensor]) -> Result<f64>
where
    F: FnMut(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.constant(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    let v = g.value(out).item();
    check_finite(v)?;
    Ok(v)
}

fn check_finite(v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("gradcheck objective evaluated to {v}")))
    }
}
