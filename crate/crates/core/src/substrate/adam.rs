use crate::error::{Error, Result};

use super::scalar::Scalar;

/// Adam hyperparameters with the usual defaults.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second-moment buffers, one pair per parameter tensor, plus the
/// shared step counter used for bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<S: Scalar = f32> {
    pub m: Vec<Vec<S>>,
    pub v: Vec<Vec<S>>,
    pub t: u64,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(param_sizes: &[usize]) -> Self {
        AdamState {
            m: param_sizes.iter().map(|&n| vec![S::ZERO; n]).collect(),
            v: param_sizes.iter().map(|&n| vec![S::ZERO; n]).collect(),
            t: 0,
        }
    }
}

/// One Adam update with bias correction:
///   m <- b1 m + (1-b1) g;  v <- b2 v + (1-b2) g^2;
///   p <- p - lr * (m / (1-b1^t)) / (sqrt(v / (1-b2^t)) + eps)
pub fn adam_step<S: Scalar>(
    params: &mut [&mut [S]],
    grads: &[&[S]],
    state: &mut AdamState<S>,
    hp: &AdamHyper,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::dim(format!(
            "adam_step: {} params, {} grads, {} state slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.t += 1;
    let b1 = S::from_f64(hp.beta1);
    let b2 = S::from_f64(hp.beta2);
    let one_m_b1 = S::from_f64(1.0 - hp.beta1);
    let one_m_b2 = S::from_f64(1.0 - hp.beta2);
    let corr1 = S::from_f64(1.0 / (1.0 - hp.beta1.powi(state.t as i32)));
    let corr2 = S::from_f64(1.0 / (1.0 - hp.beta2.powi(state.t as i32)));
    let lr = S::from_f64(hp.lr);
    let eps = S::from_f64(hp.eps);

    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads.iter())
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        if p.len() != g.len() || p.len() != m.len() {
            return Err(Error::dim("adam_step: tensor size mismatch"));
        }
        for i in 0..p.len() {
            let gi = g[i];
            m[i] = b1 * m[i] + one_m_b1 * gi;
            v[i] = b2 * v[i] + one_m_b2 * gi * gi;
            let m_hat = m[i] * corr1;
            let v_hat = v[i] * corr2;
            p[i] = p[i] - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
