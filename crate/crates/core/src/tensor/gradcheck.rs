use std::collections::BTreeMap;

use super::{Graph, ParamStore, ParamVars, Tensor, Var};
use crate::error::{Error, Result};

/// Compares the reverse-mode gradient of a scalar function against central
/// differences with the given `step`.
///
/// Returns `max_i |analytic_i - numeric_i| / (|analytic_i| + |numeric_i| + 1e-12)`.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph, Var<'g>) -> Result<Var<'g>>,
{
    let eval = |input: Tensor| -> Result<f64> {
        let g = Graph::new();
        let v = g.leaf(input);
        let out = f(&g, v)?;
        scalar_of(out)
    };

    let analytic = {
        let g = Graph::new();
        let v = g.leaf(x.clone());
        let out = f(&g, v)?;
        scalar_of(out)?;
        g.backward(out)?.get_or_zeros(v)
    };

    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += step;
        let mut minus = x.clone();
        minus.data_mut()[i] -= step;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * step);
        let a = analytic.data()[i];
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-12);
        worst = worst.max(rel);
    }
    Ok(worst)
}

fn scalar_of(v: Var<'_>) -> Result<f64> {
    let t = v.value();
    if t.numel() != 1 {
        return Err(Error::Contract(format!(
            "grad_check needs a scalar function, got shape {:?}",
            t.shape()
        )));
    }
    Ok(t.item())
}

const NORM_FLOOR: f64 = 1e-6;

/// Central-difference check of a scalar loss over every trainable tensor of
/// `params`. For each tensor returns `|a - n| / max(|a| + |n|, 1e-6)` with
/// Euclidean norms over the tensor's entries. The floor keeps tensors whose
/// true gradient is identically zero (e.g. a bias shared by every logit of a
/// softmax) from reporting pure finite-difference noise as relative error.
pub fn param_grad_check<F>(params: &ParamStore, f: F, step: f64) -> Result<BTreeMap<String, f64>>
where
    F: for<'g> Fn(&'g Graph, &ParamVars<'g>) -> Result<Var<'g>>,
{
    let eval = |store: &ParamStore| -> Result<f64> {
        let g = Graph::new();
        let vars = store.bind(&g);
        scalar_of(f(&g, &vars)?)
    };
    let analytic = {
        let g = Graph::new();
        let vars = params.bind(&g);
        let out = f(&g, &vars)?;
        scalar_of(out)?;
        vars.collect_grads(&g.backward(out)?)
    };
    let mut report = BTreeMap::new();
    let mut probe = params.clone();
    for (name, t) in params.iter() {
        if params.is_frozen(name) {
            continue;
        }
        let a = analytic
            .get(name)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(t.shape()));
        let (mut diff, mut a_norm, mut n_norm) = (0.0, 0.0, 0.0);
        for i in 0..t.numel() {
            let orig = t.data()[i];
            probe.get_mut(name).expect("cloned store").data_mut()[i] = orig + step;
            let plus = eval(&probe)?;
            probe.get_mut(name).expect("cloned store").data_mut()[i] = orig - step;
            let minus = eval(&probe)?;
            probe.get_mut(name).expect("cloned store").data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let ai = a.data()[i];
            diff += (ai - numeric) * (ai - numeric);
            a_norm += ai * ai;
            n_norm += numeric * numeric;
        }
        let rel = diff.sqrt() / (a_norm.sqrt() + n_norm.sqrt()).max(NORM_FLOOR);
        report.insert(name.to_string(), rel);
    }
    Ok(report)
}
