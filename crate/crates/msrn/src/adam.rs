//! Adam optimizer with bias correction.

use crate::tape::{Result, TapeError};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub b1: f64,
    pub b2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, b1: 0.9, b2: 0.999, eps: 1e-8 }
    }
}

/// First and second moment estimates for a fixed list of parameter slots,
/// plus the shared step counter.
pub struct AdamState {
    cfg: AdamConfig,
    t: u64,
    moments: Vec<(Tensor, Tensor)>,
}

impl AdamState {
    pub fn new(cfg: AdamConfig, shapes: &[Vec<usize>]) -> Self {
        let moments = shapes.iter().map(|s| (Tensor::zeros(s), Tensor::zeros(s))).collect();
        AdamState { cfg, t: 0, moments }
    }

    pub fn from_parts(cfg: AdamConfig, t: u64, moments: Vec<(Tensor, Tensor)>) -> Self {
        AdamState { cfg, t, moments }
    }

    pub fn config(&self) -> AdamConfig {
        self.cfg
    }

    pub fn t(&self) -> u64 {
        self.t
    }

    pub fn moments(&self) -> &[(Tensor, Tensor)] {
        &self.moments
    }

    pub fn slots(&self) -> usize {
        self.moments.len()
    }

    /// Increments the step counter; call once before the per-slot updates of
    /// a step.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    /// Applies the update for one parameter slot:
    /// m and v track the gradient and its square, and the parameter moves by
    /// -lr * m_hat / (sqrt(v_hat) + eps) with bias-corrected m_hat, v_hat.
    pub fn update(&mut self, slot: usize, param: &mut Tensor, grad: &Tensor) -> Result<()> {
        let (m, v) = &mut self.moments[slot];
        if m.shape() != grad.shape() || param.shape() != grad.shape() {
            return Err(TapeError::Shape {
                op: "adam_step",
                detail: format!(
                    "slot {slot}: param {:?}, grad {:?}, state {:?}",
                    param.shape(),
                    grad.shape(),
                    m.shape()
                ),
            });
        }
        let AdamConfig { lr, b1, b2, eps } = self.cfg;
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        for ((p, g), (mm, vv)) in param
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
        {
            *mm = b1 * *mm + (1.0 - b1) * g;
            *vv = b2 * *vv + (1.0 - b2) * g * g;
            let m_hat = *mm / bc1;
            let v_hat = *vv / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }

    /// One full step over aligned parameter and gradient lists.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.moments.len() {
            return Err(TapeError::Shape {
                op: "adam_step",
                detail: format!(
                    "{} params, {} grads, {} state slots",
                    params.len(),
                    grads.len(),
                    self.moments.len()
                ),
            });
        }
        self.begin_step();
        for (slot, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            self.update(slot, p, g)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut params = vec![Tensor::new(vec![3], vec![1.0, -2.0, 0.5])];
        let before = params[0].clone();
        let grads = vec![Tensor::zeros(&[3])];
        let mut state = AdamState::new(AdamConfig::default(), &[vec![3]]);
        for _ in 0..5 {
            state.step(&mut params, &grads).unwrap();
        }
        assert_eq!(params[0], before);
    }

    #[test]
    fn first_step_with_unit_gradient_matches_hand_value() {
        // m_hat = 1, v_hat = 1 after bias correction, so the move is
        // -lr / (1 + eps).
        let mut params = vec![Tensor::scalar(0.0)];
        let grads = vec![Tensor::scalar(1.0)];
        let mut state = AdamState::new(AdamConfig::default(), &[vec![1]]);
        state.step(&mut params, &grads).unwrap();
        let expected = -1e-3 / (1.0 + 1e-8);
        assert!((params[0].item() - expected).abs() < 1e-15);
        assert!((params[0].item() + 9.99999e-4).abs() < 1e-9);
        assert_eq!(state.t(), 1);
    }

    #[test]
    fn positive_gradient_always_moves_parameter_down() {
        let mut rng = crate::rng::Rng::new(4);
        let mut params = vec![Tensor::scalar(0.3)];
        let mut state = AdamState::new(AdamConfig::default(), &[vec![1]]);
        for _ in 0..50 {
            let before = params[0].item();
            let grads = vec![Tensor::scalar(rng.uniform(0.01, 2.0))];
            state.step(&mut params, &grads).unwrap();
            assert!(params[0].item() < before);
        }
    }

    #[test]
    fn shape_mismatch_is_a_dimension_error() {
        let mut params = vec![Tensor::zeros(&[2])];
        let grads = vec![Tensor::zeros(&[3])];
        let mut state = AdamState::new(AdamConfig::default(), &[vec![2]]);
        assert!(matches!(state.step(&mut params, &grads), Err(TapeError::Shape { .. })));
    }
}
