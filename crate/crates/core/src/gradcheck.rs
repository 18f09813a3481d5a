//! Central finite-difference gradient checking.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Relative error used for every coordinate comparison.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Worst coordinate found by [`grad_check_report`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub param: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

fn evaluate<T, F>(f: &F, params: &[Tensor<T>]) -> Result<f64>
where
    T: Scalar,
    F: for<'g> Fn(&'g Graph<T>, &[Var<'g, T>]) -> Result<Var<'g, T>>,
{
    let g = Graph::new();
    let vars: Vec<_> = params.iter().map(|p| g.constant_tensor(p)).collect();
    let v = f(&g, &vars)?.item().f64();
    if !v.is_finite() {
        return Err(Error::numeric("grad_check", "objective is not finite"));
    }
    Ok(v)
}

/// Compares the tape gradient of `f` with central differences of step `eps`
/// over every coordinate of every parameter; returns the worst coordinate.
pub fn grad_check_report<T, F>(f: F, params: &mut [Tensor<T>], eps: f64) -> Result<GradCheckReport>
where
    T: Scalar,
    F: for<'g> Fn(&'g Graph<T>, &[Var<'g, T>]) -> Result<Var<'g, T>>,
{
    let analytic: Vec<Vec<T>> = {
        let g = Graph::new();
        let vars: Vec<_> = params.iter().map(|p| g.param(p)).collect();
        let root = f(&g, &vars)?;
        if !root.item().is_finite() {
            return Err(Error::numeric("grad_check", "objective is not finite"));
        }
        g.backward(root)?;
        vars.iter()
            .zip(params.iter())
            .map(|(v, p)| g.grad(*v).unwrap_or_else(|| vec![T::zero(); p.numel()]))
            .collect()
    };

    let mut worst = GradCheckReport {
        max_rel_error: 0.0,
        param: 0,
        index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    for pi in 0..params.len() {
        for j in 0..params[pi].numel() {
            let orig = params[pi].data()[j];
            params[pi].data_mut()[j] = T::c(orig.f64() + eps);
            let plus = evaluate(&f, params);
            params[pi].data_mut()[j] = T::c(orig.f64() - eps);
            let minus = evaluate(&f, params);
            params[pi].data_mut()[j] = orig;
            let numeric = (plus? - minus?) / (2.0 * eps);
            let a = analytic[pi][j].f64();
            let err = relative_error(a, numeric);
            if err > worst.max_rel_error {
                worst = GradCheckReport {
                    max_rel_error: err,
                    param: pi,
                    index: j,
                    analytic: a,
                    numeric,
                };
            }
        }
    }
    Ok(worst)
}

/// Maximum relative error between analytic and central-difference gradients.
pub fn grad_check<T, F>(f: F, params: &mut [Tensor<T>], eps: f64) -> Result<f64>
where
    T: Scalar,
    F: for<'g> Fn(&'g Graph<T>, &[Var<'g, T>]) -> Result<Var<'g, T>>,
{
    grad_check_report(f, params, eps).map(|r| r.max_rel_error)
}
