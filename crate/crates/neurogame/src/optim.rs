//! Adam optimizer with bias correction.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Per-parameter Adam state: moment estimates plus the shared hyperparameters.
#[derive(Clone, Debug)]
pub struct AdamState<T: Scalar> {
    pub first_moment: Tensor<T>,
    pub second_moment: Tensor<T>,
    pub step: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(shape: Vec<usize>, learning_rate: f64) -> Self {
        AdamState {
            first_moment: Tensor::zeros(shape.clone()),
            second_moment: Tensor::zeros(shape),
            step: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// One Adam update, in place. The moment tensors must match the parameter
/// shape; the step counter advances by exactly one.
pub fn adam_step<T: Scalar>(params: &mut Tensor<T>, grads: &Tensor<T>, state: &mut AdamState<T>) -> Result<()> {
    if params.shape() != grads.shape() || params.shape() != state.first_moment.shape() {
        return Err(Error::shape(
            "adam_step",
            format!(
                "params {:?}, grads {:?}, moments {:?}",
                params.shape(),
                grads.shape(),
                state.first_moment.shape()
            ),
        ));
    }
    state.step += 1;
    let b1 = T::from_f64(state.beta1);
    let b2 = T::from_f64(state.beta2);
    let one = T::one();
    let lr = T::from_f64(state.learning_rate);
    let eps = T::from_f64(state.epsilon);
    let corr1 = T::from_f64(1.0 - state.beta1.powi(state.step as i32));
    let corr2 = T::from_f64(1.0 - state.beta2.powi(state.step as i32));

    let m = state.first_moment.data_mut();
    let v = state.second_moment.data_mut();
    let p = params.data_mut();
    let g = grads.data();
    for i in 0..p.len() {
        m[i] = b1 * m[i] + (one - b1) * g[i];
        v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
        let m_hat = m[i] / corr1;
        let v_hat = v[i] / corr2;
        p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    params.ensure_finite("adam_step")?;
    Ok(())
}

/// Optimizer over an ordered parameter list; states are created lazily on the
/// first update so the caller only supplies (value, grad) pairs in a stable
/// order.
pub struct Adam<T: Scalar> {
    pub learning_rate: f64,
    states: Vec<AdamState<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(learning_rate: f64) -> Self {
        Adam {
            learning_rate,
            states: Vec::new(),
        }
    }

    /// Update the parameter at position `index` in the visit order.
    pub fn update(&mut self, index: usize, value: &mut Tensor<T>, grad: &Tensor<T>) -> Result<()> {
        while self.states.len() <= index {
            self.states
                .push(AdamState::new(value.shape().to_vec(), self.learning_rate));
        }
        adam_step(value, grad, &mut self.states[index])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_fresh_params_bit_identical() {
        let mut p = Tensor::new(vec![3], vec![0.5, -1.25, 2.0]).unwrap();
        let before = p.clone();
        let g = Tensor::zeros(vec![3]);
        let mut st = AdamState::new(vec![3], 0.01);
        for _ in 0..5 {
            adam_step(&mut p, &g, &mut st).unwrap();
        }
        assert_eq!(p, before);
        assert_eq!(st.step, 5);
        assert!(st.first_moment.data().iter().all(|&m| m == 0.0));
    }

    #[test]
    fn first_step_matches_hand_evaluated_update() {
        let mut p = Tensor::scalar(1.0f64);
        let g = Tensor::scalar(1.0f64);
        let mut st = AdamState::new(vec![1], 0.001);
        adam_step(&mut p, &g, &mut st).unwrap();
        // m_hat = v_hat = 1 after bias correction at t=1.
        let want = 1.0 - 0.001 / (1.0 + 1e-8);
        assert!((p.data()[0] - want).abs() < 1e-15);
    }

    #[test]
    fn constant_gradient_moves_opposite_sign() {
        let mut p = Tensor::scalar(0.0f64);
        let g = Tensor::scalar(2.5f64);
        let mut st = AdamState::new(vec![1], 0.01);
        for _ in 0..40 {
            adam_step(&mut p, &g, &mut st).unwrap();
        }
        assert!(p.data()[0] < -0.1);

        let mut p = Tensor::scalar(0.0f64);
        let g = Tensor::scalar(-2.5f64);
        let mut st = AdamState::new(vec![1], 0.01);
        for _ in 0..40 {
            adam_step(&mut p, &g, &mut st).unwrap();
        }
        assert!(p.data()[0] > 0.1);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = Tensor::<f64>::zeros(vec![2]);
        let g = Tensor::zeros(vec![3]);
        let mut st = AdamState::new(vec![2], 0.01);
        assert!(adam_step(&mut p, &g, &mut st).is_err());
    }
}
