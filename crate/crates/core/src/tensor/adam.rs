//! Adam parameter updates with bias correction.

use super::Tensor;
use crate::error::{Error, Result};

/// Per-parameter-list optimizer state. Moment tensors match the parameter
/// shapes; the step counter increases by exactly one per update.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
}

impl AdamState {
    /// State for the given parameter list with the defaults used throughout:
    /// momentum coefficient 0.5, second-moment coefficient 0.999, eps 1e-8.
    pub fn new(params: &[&Tensor], lr: f64) -> Self {
        AdamState {
            lr,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first_moment: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            second_moment: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }
}

/// One bias-corrected Adam update over a parameter list.
///
/// Deterministic: identical inputs and state produce bit-identical results.
pub fn adam_step(state: &mut AdamState, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
    if params.len() != grads.len()
        || params.len() != state.first_moment.len()
        || params.len() != state.second_moment.len()
    {
        return Err(Error::Shape(format!(
            "adam_step: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.first_moment.len()
        )));
    }
    for ((p, g), (m, v)) in params.iter().zip(grads).zip(
        state
            .first_moment
            .iter()
            .zip(state.second_moment.iter()),
    ) {
        if p.shape() != g.shape() || p.shape() != m.shape() || p.shape() != v.shape() {
            return Err(Error::Shape(format!(
                "adam_step: parameter shape {:?} does not match gradient {:?} / moments {:?}",
                p.shape(),
                g.shape(),
                m.shape()
            )));
        }
    }

    state.step += 1;
    let t = state.step;
    let bc1 = 1.0 - state.beta1.powi(t as i32);
    let bc2 = 1.0 - state.beta2.powi(t as i32);
    for i in 0..params.len() {
        let g = grads[i].data();
        let m = state.first_moment[i].data_mut();
        let v = state.second_moment[i].data_mut();
        let p = params[i].data_mut();
        for j in 0..g.len() {
            m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g[j];
            v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            p[j] -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        // Bias correction makes the very first step lr * g / (|g| + eps).
        let mut p = Tensor::scalar(1.0);
        let g = Tensor::scalar(4.0);
        let mut state = AdamState::new(&[&p], 0.1);
        adam_step(&mut state, &mut [&mut p], &[g]).unwrap();
        assert!((p.data()[0] - 0.9).abs() < 1e-8, "got {}", p.data()[0]);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut p = Tensor::from_vec(&[3], vec![1.0, -2.0, 0.25]).unwrap();
        let before = p.clone();
        let mut state = AdamState::new(&[&p], 0.1);
        adam_step(&mut state, &mut [&mut p], &[Tensor::zeros(&[3])]).unwrap();
        assert_eq!(p, before);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let run = || {
            let mut p = Tensor::from_vec(&[2], vec![0.3, -0.7]).unwrap();
            let mut state = AdamState::new(&[&p], 0.05);
            for k in 0..10 {
                let g = Tensor::from_vec(&[2], vec![0.1 * k as f64, -0.2]).unwrap();
                adam_step(&mut state, &mut [&mut p], &[g]).unwrap();
            }
            (p, state)
        };
        let (p1, s1) = run();
        let (p2, s2) = run();
        assert_eq!(p1, p2);
        assert_eq!(s1, s2);
    }

    #[test]
    fn shape_mismatch_is_error() {
        let mut p = Tensor::zeros(&[2]);
        let mut state = AdamState::new(&[&p], 0.1);
        let g = Tensor::zeros(&[3]);
        assert!(adam_step(&mut state, &mut [&mut p], &[g]).is_err());
    }
}
