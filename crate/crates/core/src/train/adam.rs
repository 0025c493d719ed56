use crate::error::{Error, Result};
use crate::model::Parameters;

/// Bias-corrected Adam moments, one pair of buffers per parameter array.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new<P: Parameters + ?Sized>(params: &P) -> Self {
        let zeros: Vec<Vec<f64>> = params
            .arrays()
            .iter()
            .map(|(_, a)| vec![0.0; a.len()])
            .collect();
        Self {
            first: zeros.clone(),
            second: zeros,
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One Adam update: `p -= lr * m_hat / (sqrt(v_hat) + eps)`.
pub fn adam_step<P: Parameters>(
    params: &mut P,
    grads: &P,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if !(lr > 0.0) {
        return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
    }
    let grad_arrays = grads.arrays();
    for (name, g) in &grad_arrays {
        if let Some(i) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite gradient in {name}[{i}]")));
        }
    }
    let mut param_arrays = params.arrays_mut();
    if param_arrays.len() != grad_arrays.len()
        || param_arrays.len() != state.first.len()
        || param_arrays
            .iter()
            .zip(&grad_arrays)
            .zip(&state.first)
            .any(|(((_, p), (_, g)), m)| p.len() != g.len() || p.len() != m.len())
    {
        return Err(Error::Dimension(
            "parameter, gradient and optimizer shapes differ".into(),
        ));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (((_, p), (_, g)), (m, v)) in param_arrays
        .iter_mut()
        .zip(&grad_arrays)
        .zip(state.first.iter_mut().zip(state.second.iter_mut()))
    {
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    Ok(())
}
