use rayon::prelude::*;

use super::autograd::{Bindings, Graph, Var};
use super::params::ParamStore;
use crate::error::{Error, Result};

/// Analytic against central-difference gradients.
#[derive(Debug, Clone)]
pub struct GradientReport {
    pub analytic: ParamStore,
    pub numeric: ParamStore,
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
}

/// `|a − n| / max(|a|, |n|, 1e-12)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12)
}

fn scalar_output(g: &Graph, out: Var) -> Result<f64> {
    let v = g.value(out);
    if v.numel() != 1 {
        return Err(Error::Shape(format!(
            "function must return a scalar, got shape {:?}",
            v.shape()
        )));
    }
    Ok(v.data()[0])
}

/// Evaluates `f` without differentiating.
pub fn evaluate<F>(params: &ParamStore, f: &F) -> Result<f64>
where
    F: Fn(&mut Graph, &Bindings) -> Result<Var>,
{
    let mut g = Graph::new();
    let b = g.bind(params.iter());
    let out = f(&mut g, &b)?;
    scalar_output(&g, out)
}

/// Value and exact gradient of the scalar function `f` for every parameter.
pub fn grad<F>(params: &ParamStore, f: F) -> Result<(f64, ParamStore)>
where
    F: Fn(&mut Graph, &Bindings) -> Result<Var>,
{
    let mut g = Graph::new();
    let b = g.bind(params.iter());
    let out = f(&mut g, &b)?;
    let value = scalar_output(&g, out)?;
    let mut grads = g.backward(out)?;
    let store = b
        .iter()
        .map(|(name, &v)| (name.clone(), grads.take(v)))
        .collect();
    Ok((value, store))
}

/// Compares [`grad`] with `(f(θ+h) − f(θ−h)) / 2h` on every coordinate.
pub fn grad_check<F>(params: &ParamStore, f: F, h: f64) -> Result<GradientReport>
where
    F: Fn(&mut Graph, &Bindings) -> Result<Var> + Sync,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "step h must be > 0, got {h}"
        )));
    }
    let (_, analytic) = grad(params, &f)?;
    let names: Vec<String> = params.names().cloned().collect();

    let per_param: Vec<(String, Vec<f64>)> = names
        .par_iter()
        .map(|name| -> Result<(String, Vec<f64>)> {
            let mut local = params.clone();
            let n = local.get(name)?.numel();
            let mut numeric = Vec::with_capacity(n);
            for i in 0..n {
                let orig = local.get(name)?.data()[i];
                local.get_mut(name)?.data_mut()[i] = orig + h;
                let plus = evaluate(&local, &f)?;
                local.get_mut(name)?.data_mut()[i] = orig - h;
                let minus = evaluate(&local, &f)?;
                local.get_mut(name)?.data_mut()[i] = orig;
                if !plus.is_finite() || !minus.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "objective at `{name}`[{i}] ± {h}"
                    )));
                }
                numeric.push((plus - minus) / (2.0 * h));
            }
            Ok((name.clone(), numeric))
        })
        .collect::<Result<_>>()?;

    let mut numeric = params.zeros_like();
    let mut max_rel_error = 0.0;
    let mut worst = None;
    for (name, values) in per_param {
        let a = analytic.get(&name)?.data();
        for (i, (&av, &nv)) in a.iter().zip(&values).enumerate() {
            let e = relative_error(av, nv);
            if e > max_rel_error {
                max_rel_error = e;
                worst = Some((name.clone(), i));
            }
        }
        numeric.get_mut(&name)?.data_mut().copy_from_slice(&values);
    }
    Ok(GradientReport {
        analytic,
        numeric,
        max_rel_error,
        worst,
    })
}
