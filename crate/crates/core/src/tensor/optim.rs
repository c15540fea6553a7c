use std::collections::BTreeMap;

use super::{Tensor, TensorError};

/// Plain gradient descent on one parameter buffer. The step is aborted,
/// leaving `params` untouched, if any gradient is non-finite.
pub fn sgd_step(params: &mut [f64], grads: &[f64], learning_rate: f64) -> Result<(), TensorError> {
    if params.len() != grads.len() {
        return Err(TensorError::InvalidArgument(format!(
            "parameter length {} vs gradient length {}",
            params.len(),
            grads.len()
        )));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(TensorError::NonFiniteGradient(String::from("<buffer>")));
    }
    for (p, g) in params.iter_mut().zip(grads) {
        *p -= learning_rate * g;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first: Vec<f64>,
    pub second: Vec<f64>,
}

/// Adam with bias correction, keyed by parameter name.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    state: BTreeMap<String, AdamState>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Self { learning_rate, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, state: BTreeMap::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn state(&self, name: &str) -> Option<&AdamState> {
        self.state.get(name)
    }

    /// Applies one update to every parameter that has a gradient. Nothing is
    /// modified when any gradient is non-finite.
    pub fn step(
        &mut self,
        params: &mut BTreeMap<String, Tensor>,
        grads: &BTreeMap<String, Tensor>,
    ) -> Result<(), TensorError> {
        for (name, g) in grads {
            let p = params
                .get(name)
                .ok_or_else(|| TensorError::InvalidArgument(format!("unknown parameter `{name}`")))?;
            if p.shape() != g.shape() {
                return Err(TensorError::InvalidArgument(format!(
                    "gradient shape {:?} for `{name}` of shape {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            if !g.is_finite() {
                return Err(TensorError::NonFiniteGradient(name.clone()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, g) in grads {
            let p = params.get_mut(name).expect("checked above");
            let st = self
                .state
                .entry(name.clone())
                .or_insert_with(|| AdamState { first: vec![0.0; g.len()], second: vec![0.0; g.len()] });
            for (((w, &gi), m), v) in
                p.data_mut().iter_mut().zip(g.data()).zip(st.first.iter_mut()).zip(st.second.iter_mut())
            {
                *m = self.beta1 * *m + (1.0 - self.beta1) * gi;
                *v = self.beta2 * *v + (1.0 - self.beta2) * gi * gi;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w -= self.learning_rate * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
