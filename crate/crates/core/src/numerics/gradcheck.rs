//! Central finite-difference verification of analytic gradients.

use super::{Graph, Mode, ParamSet, Tensor, Var};
use crate::error::{Error, Result};

pub const FD_STEP: f64 = 1e-5;

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn scalar_of(g: &Graph<'_>, v: Var) -> Result<f64> {
    let t = g.value(v);
    if t.len() != 1 {
        return Err(Error::Contract(format!(
            "grad_check needs a scalar-valued function, got shape {:?}",
            t.shape()
        )));
    }
    Ok(t.data()[0])
}

/// Checks `f` with respect to every element of `inputs` in eval mode.
pub fn grad_check<F>(inputs: &[Tensor], f: F) -> Result<f64>
where
    F: Fn(&mut Graph<'static>, &[Var]) -> Result<Var>,
{
    grad_check_with(inputs, Mode::Eval, 0, f)
}

/// As [`grad_check`], with an explicit mode. In train mode every evaluation
/// reseeds with `seed`, so dropout masks are identical across perturbations.
pub fn grad_check_with<F>(inputs: &[Tensor], mode: Mode, seed: u64, f: F) -> Result<f64>
where
    F: Fn(&mut Graph<'static>, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::detached_with_mode(mode, seed);
        let vars: Vec<Var> = xs.iter().map(|t| g.leaf(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        scalar_of(&g, out)
    };

    let mut g = Graph::detached_with_mode(mode, seed);
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    scalar_of(&g, out)?;
    let grads = g.backward(out)?;

    let mut worst = 0.0f64;
    let mut work = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.wrt(*v);
        for j in 0..work[i].len() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + FD_STEP;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - FD_STEP;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(analytic.data()[j], numeric));
        }
    }
    Ok(worst)
}

/// Checks `f` with respect to every scalar of every trainable parameter in `params`.
pub fn grad_check_params<F>(params: &ParamSet, mode: Mode, seed: u64, f: F) -> Result<f64>
where
    F: for<'a> Fn(&mut Graph<'a>) -> Result<Var>,
{
    Ok(grad_check_params_report(params, mode, seed, f)?.max_relative)
}

/// Rounding slack, in units of `ε·|f|`, allowed in one finite-difference quotient.
pub const RESOLUTION_ULPS: f64 = 32.0;

/// Outcome of a parameter gradient check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    /// Max relative error over all elements.
    pub max_relative: f64,
    /// `RESOLUTION_ULPS · ε · max(|f|, 1) / FD_STEP`: the smallest derivative
    /// difference that a central difference of `f` can distinguish from rounding.
    pub resolution: f64,
    /// Max relative error over elements whose absolute error exceeds `resolution`.
    pub max_relative_resolved: f64,
    /// Elements whose absolute error is within `resolution` but whose
    /// relative error still exceeds 1e-4.
    pub unresolved: usize,
    pub elements: usize,
}

/// As [`grad_check_params`], also separating out elements whose discrepancy is
/// below the rounding resolution of the difference quotient.
pub fn grad_check_params_report<F>(params: &ParamSet, mode: Mode, seed: u64, f: F) -> Result<GradCheckReport>
where
    F: for<'a> Fn(&mut Graph<'a>) -> Result<Var>,
{
    let eval = |ps: &ParamSet| -> Result<f64> {
        let mut g = Graph::with_mode(ps, mode, seed);
        let out = f(&mut g)?;
        scalar_of(&g, out)
    };

    let (value, grads) = {
        let mut g = Graph::with_mode(params, mode, seed);
        let out = f(&mut g)?;
        let value = scalar_of(&g, out)?;
        (value, g.backward(out)?)
    };
    let resolution = RESOLUTION_ULPS * f64::EPSILON * value.abs().max(1.0) / FD_STEP;

    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_relative: 0.0,
        resolution,
        max_relative_resolved: 0.0,
        unresolved: 0,
        elements: 0,
    };
    for id in params.ids() {
        if !params.get(id).trainable {
            continue;
        }
        let n = params.value(id).len();
        let analytic = grads.param(id).cloned();
        for j in 0..n {
            let orig = params.value(id).data()[j];
            work.value_mut(id).data_mut()[j] = orig + FD_STEP;
            let plus = eval(&work)?;
            work.value_mut(id).data_mut()[j] = orig - FD_STEP;
            let minus = eval(&work)?;
            work.value_mut(id).data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let a = analytic.as_ref().map_or(0.0, |t| t.data()[j]);
            let rel = relative_error(a, numeric);
            report.elements += 1;
            report.max_relative = report.max_relative.max(rel);
            if (a - numeric).abs() > resolution {
                report.max_relative_resolved = report.max_relative_resolved.max(rel);
            } else if rel > 1e-4 {
                report.unresolved += 1;
            }
        }
    }
    Ok(report)
}
