use std::collections::BTreeMap;

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

/// Adam moment estimates for every parameter that has been updated.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
}

impl Default for AdamState {
    fn default() -> Self {
        Self::new(0.9, 0.999, 1e-8)
    }
}

impl AdamState {
    pub fn new(beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Self {
            beta1,
            beta2,
            epsilon,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, name: &str) -> Option<&[f64]> {
        self.first.get(name).map(Vec::as_slice)
    }
}

/// One bias-corrected Adam update of every parameter named in `grads`.
/// Frozen parameters are never touched.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    for (name, grad) in grads {
        let param = params
            .get(name)
            .ok_or_else(|| Error::Contract(format!("gradient for unknown parameter {name}")))?;
        if param.shape() != grad.shape() {
            return Err(Error::Dimension(format!(
                "gradient of {name} has shape {:?}, parameter has {:?}",
                grad.shape(),
                param.shape()
            )));
        }
        if !grad.is_finite() {
            return Err(Error::Numeric(format!("non-finite gradient for {name}")));
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let correction1 = 1.0 - state.beta1.powi(t);
    let correction2 = 1.0 - state.beta2.powi(t);
    for (name, grad) in grads {
        if params.is_frozen(name) {
            continue;
        }
        let param = params.get_mut(name).expect("checked above");
        let m = state
            .first
            .entry(name.clone())
            .or_insert_with(|| vec![0.0; grad.numel()]);
        let v = state
            .second
            .entry(name.clone())
            .or_insert_with(|| vec![0.0; grad.numel()]);
        for (((p, g), m), v) in param
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *m = state.beta1 * *m + (1.0 - state.beta1) * g;
            *v = state.beta2 * *v + (1.0 - state.beta2) * g * g;
            let m_hat = *m / correction1;
            let v_hat = *v / correction2;
            *p -= lr * m_hat / (v_hat.sqrt() + state.epsilon);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(name: &str, values: &[f64]) -> BTreeMap<String, Tensor> {
        BTreeMap::from([(name.to_string(), Tensor::row(values))])
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut params = ParamStore::new();
        params.insert("w", Tensor::row(&[1.0, -2.0]));
        let mut state = AdamState::default();
        adam_step(&mut params, &single("w", &[0.0, 0.0]), &mut state, 0.1).unwrap();
        assert_eq!(params.get("w").unwrap().data(), &[1.0, -2.0]);
        assert_eq!(state.first_moment("w").unwrap(), &[0.0, 0.0]);
        assert_eq!(state.step(), 1);
    }

    #[test]
    fn descends_on_square() {
        let mut params = ParamStore::new();
        params.insert("w", Tensor::row(&[1.0]));
        let mut state = AdamState::default();
        // d/dw w^2 = 2w
        adam_step(&mut params, &single("w", &[2.0]), &mut state, 0.1).unwrap();
        assert!(params.get("w").unwrap().item() < 1.0);
    }

    #[test]
    fn nan_gradient_names_the_parameter() {
        let mut params = ParamStore::new();
        params.insert("encoder.w", Tensor::row(&[1.0]));
        let mut state = AdamState::default();
        let err = adam_step(&mut params, &single("encoder.w", &[f64::NAN]), &mut state, 0.1)
            .unwrap_err();
        assert!(matches!(&err, Error::Numeric(m) if m.contains("encoder.w")));
    }

    #[test]
    fn frozen_parameters_stay_put() {
        let mut params = ParamStore::new();
        params.insert_frozen("table", Tensor::row(&[0.5]));
        let mut state = AdamState::default();
        adam_step(&mut params, &single("table", &[3.0]), &mut state, 0.1).unwrap();
        assert_eq!(params.get("table").unwrap().item(), 0.5);
    }
}
