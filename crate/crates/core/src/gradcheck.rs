//! Central finite-difference verification of analytic gradients.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::graph::{Graph, Mode, Var};
use crate::params::ParamSet;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub tol: f64,
    /// Lower bound on the relative-error denominator, so that entries whose
    /// true gradient is zero are judged on absolute error.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { eps: 1e-4, tol: 1e-3, floor: 1e-6 }
    }
}

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub passed: bool,
}

#[derive(Debug, Clone)]
pub struct GradReport {
    pub params: Vec<ParamCheck>,
    /// Set when a perturbed evaluation produced a non-finite loss.
    pub failure: Option<String>,
    pub tol: f64,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.failure.is_none() && self.params.iter().all(|p| p.passed)
    }

    pub fn failed_params(&self) -> Vec<&str> {
        self.params.iter().filter(|p| !p.passed).map(|p| p.name.as_str()).collect()
    }

    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params.iter().max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

/// Builds the loss with `loss_fn` in eval mode, differentiates it, and
/// compares every parameter entry against `(f(θ+ε) − f(θ−ε)) / 2ε`.
pub fn grad_check<F>(params: &ParamSet<f64>, loss_fn: F, opts: GradCheckOptions) -> Result<GradReport>
where
    F: for<'a> Fn(&mut Graph<'a, f64>) -> Result<Var>,
{
    let analytic = analytic_gradients(params, &loss_fn)?;
    check_against(params, &analytic, |p| evaluate(p, &loss_fn), opts)
}

pub fn analytic_gradients<F>(params: &ParamSet<f64>, loss_fn: &F) -> Result<BTreeMap<String, Tensor<f64>>>
where
    F: for<'a> Fn(&mut Graph<'a, f64>) -> Result<Var>,
{
    let mut g = Graph::new(params, Mode::Eval, 0);
    let loss = loss_fn(&mut g)?;
    let grads = g.backward(loss)?;
    Ok(grads.param_grads())
}

fn evaluate<F>(params: &ParamSet<f64>, loss_fn: &F) -> Result<f64>
where
    F: for<'a> Fn(&mut Graph<'a, f64>) -> Result<Var>,
{
    let mut g = Graph::new(params, Mode::Eval, 0);
    let loss = loss_fn(&mut g)?;
    Ok(g.scalar(loss))
}

/// Compares supplied analytic gradients with central differences of
/// `value_fn`. Parameters absent from `analytic` are taken to have zero
/// gradient.
pub fn check_against(
    params: &ParamSet<f64>,
    analytic: &BTreeMap<String, Tensor<f64>>,
    value_fn: impl Fn(&ParamSet<f64>) -> Result<f64>,
    opts: GradCheckOptions,
) -> Result<GradReport> {
    if !(opts.eps > 0.0) {
        return Err(Error::config("gradient check step must be positive"));
    }
    let mut work = params.clone();
    let mut report = GradReport { params: Vec::new(), failure: None, tol: opts.tol };
    let names: Vec<String> = params.names().map(str::to_owned).collect();
    for name in names {
        let n = params.get(&name).map(Tensor::len).unwrap_or(0);
        let mut check =
            ParamCheck { name: name.clone(), max_rel_err: 0.0, worst_index: 0, analytic: 0.0, numeric: 0.0, passed: true };
        for i in 0..n {
            let orig = params.get(&name).unwrap().data()[i];
            work.get_mut(&name).unwrap().data_mut()[i] = orig + opts.eps;
            let plus = value_fn(&work)?;
            work.get_mut(&name).unwrap().data_mut()[i] = orig - opts.eps;
            let minus = value_fn(&work)?;
            work.get_mut(&name).unwrap().data_mut()[i] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                report.failure = Some(format!("non-finite loss while perturbing `{name}`[{i}]"));
                check.passed = false;
                break;
            }
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let a = analytic.get(&name).map(|t| t.data()[i]).unwrap_or(0.0);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            if rel > check.max_rel_err || i == 0 {
                check.max_rel_err = rel;
                check.worst_index = i;
                check.analytic = a;
                check.numeric = numeric;
            }
        }
        check.passed &= check.max_rel_err <= opts.tol;
        report.params.push(check);
        if report.failure.is_some() {
            break;
        }
    }
    Ok(report)
}
