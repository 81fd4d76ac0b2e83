//! Adam with bias correction.

use super::{AutodiffError, Tensor};
use ndarray::Array2;

pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step_count: u64,
    first_moment: Vec<Array2<f64>>,
    second_moment: Vec<Array2<f64>>,
}

impl AdamState {
    pub fn new(params: &[Tensor], lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step_count: 0,
            first_moment: params.iter().map(|p| Array2::zeros(p.shape())).collect(),
            second_moment: params.iter().map(|p| Array2::zeros(p.shape())).collect(),
        }
    }
}

/// One Adam update over `params`, consuming their gradients.
pub fn adam_step(params: &[Tensor], state: &mut AdamState) -> Result<(), AutodiffError> {
    assert_eq!(params.len(), state.first_moment.len(), "optimizer/parameter mismatch");
    state.step_count += 1;
    let t = state.step_count as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for (i, p) in params.iter().enumerate() {
        let grad = p
            .grad_clone()
            .ok_or_else(|| AutodiffError::MissingGradient(format!("param {i}")))?;
        let m = &mut state.first_moment[i];
        let v = &mut state.second_moment[i];
        m.zip_mut_with(&grad, |a, &g| *a = state.beta1 * *a + (1.0 - state.beta1) * g);
        v.zip_mut_with(&grad, |a, &g| *a = state.beta2 * *a + (1.0 - state.beta2) * g * g);
        let lr = state.lr;
        let eps = state.epsilon;
        p.map_values(|values| {
            ndarray::Zip::from(values)
                .and(&*m)
                .and(&*v)
                .for_each(|w, &mi, &vi| {
                    let mhat = mi / bc1;
                    let vhat = vi / bc2;
                    *w -= lr * mhat / (vhat.sqrt() + eps);
                });
        });
        p.zero_grad();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{backward, Tape};
    use ndarray::array;

    #[test]
    fn zero_gradients_leave_parameters_unchanged() {
        let p = Tensor::parameter(array![[1.0, -2.0]]);
        let mut st = AdamState::new(std::slice::from_ref(&p), 1e-3);
        p.accumulate_grad(&Array2::zeros((1, 2)));
        adam_step(std::slice::from_ref(&p), &mut st).unwrap();
        assert_eq!(p.value_clone(), array![[1.0, -2.0]]);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let p = Tensor::parameter(array![[1.0]]);
        let mut st = AdamState::new(std::slice::from_ref(&p), 1e-3);
        let err = adam_step(std::slice::from_ref(&p), &mut st).unwrap_err();
        assert!(matches!(err, AutodiffError::MissingGradient(_)));
    }

    #[test]
    fn quadratic_bowl_converges() {
        let w = Tensor::parameter(array![[1.0]]);
        let mut st = AdamState::new(std::slice::from_ref(&w), 0.1);
        for _ in 0..200 {
            let mut tape = Tape::new();
            let loss = tape.square(&w).unwrap();
            backward(&loss, &mut tape).unwrap();
            adam_step(std::slice::from_ref(&w), &mut st).unwrap();
        }
        assert!(w.item().abs() < 1e-3, "w = {}", w.item());
    }

    #[test]
    fn single_step_decreases_weight_at_default_lr() {
        let w = Tensor::parameter(array![[1.0]]);
        let mut st = AdamState::new(std::slice::from_ref(&w), 4e-4);
        w.accumulate_grad(&array![[1.0]]);
        adam_step(std::slice::from_ref(&w), &mut st).unwrap();
        assert!(w.item() < 1.0);
    }
}
