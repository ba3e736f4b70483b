//! Adam with bias correction plus global-norm gradient clipping. The
//! optimizer owns one (m, v) slot per parameter and matches parameters by
//! position, so callers must pass the same parameter list in the same order
//! on every step.

use crate::error::{KernelError, Result};
use crate::layers::ParamTensor;
use crate::matrix::Matrix;

struct AdamSlot {
    m: Matrix,
    v: Matrix,
}

pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    slots: Vec<AdamSlot>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            slots: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Applies one Adam update, then zeroes every gradient so the next
    /// accumulation starts clean. Rejects non-finite gradients up front,
    /// leaving parameters untouched.
    pub fn step(&mut self, params: &mut [&mut ParamTensor]) -> Result<()> {
        if self.slots.is_empty() {
            self.slots = params
                .iter()
                .map(|p| AdamSlot {
                    m: Matrix::zeros(p.grad.rows(), p.grad.cols()),
                    v: Matrix::zeros(p.grad.rows(), p.grad.cols()),
                })
                .collect();
        }
        if self.slots.len() != params.len() {
            return Err(KernelError::State(format!(
                "adam was initialized with {} parameters, got {}",
                self.slots.len(),
                params.len()
            )));
        }
        for (idx, p) in params.iter().enumerate() {
            if !p.grad.is_finite() {
                return Err(KernelError::Numeric(format!(
                    "non-finite gradient in parameter {idx}"
                )));
            }
            if p.grad.shape() != self.slots[idx].m.shape() {
                return Err(KernelError::Dimension {
                    context: format!("adam slot {idx}"),
                    expected: self.slots[idx].m.shape(),
                    got: p.grad.shape(),
                });
            }
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (p, slot) in params.iter_mut().zip(self.slots.iter_mut()) {
            for k in 0..p.grad.data().len() {
                let g = p.grad.data()[k];
                let m = self.beta1 * slot.m.data()[k] + (1.0 - self.beta1) * g;
                let v = self.beta2 * slot.v.data()[k] + (1.0 - self.beta2) * g * g;
                slot.m.data_mut()[k] = m;
                slot.v.data_mut()[k] = v;
                let m_hat = m / bc1;
                let v_hat = v / bc2;
                p.value.data_mut()[k] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
            p.zero_grad();
        }
        Ok(())
    }
}

/// Scales all gradients by max_norm/‖g‖ when the joint L2 norm exceeds
/// max_norm; leaves them bit-identical otherwise. Returns the pre-clip norm.
pub fn clip_global_norm(params: &mut [&mut ParamTensor], max_norm: f64) -> f64 {
    let norm_sq: f64 = params.iter().map(|p| p.grad.frobenius_norm_sq()).sum();
    let norm = norm_sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for p in params.iter_mut() {
            p.grad.scale(scale);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(w: f64) -> ParamTensor {
        ParamTensor::new(Matrix::row_vector(vec![w]))
    }

    #[test]
    fn first_step_matches_closed_form() {
        // With zero state: m̂=g, v̂=g², so Δw = −lr·g/(|g|+eps).
        let mut p = scalar_param(0.0);
        p.grad.set(0, 0, 3.0);
        let mut opt = Adam::new(0.01);
        opt.step(&mut [&mut p]).unwrap();
        let expected = -0.01 * 3.0 / (3.0 + 1e-8);
        assert!((p.value.get(0, 0) - expected).abs() < 1e-15);
    }

    #[test]
    fn hundred_steps_match_independent_recurrence_on_quadratic() {
        // Minimize (w−3)². An independently coded scalar recurrence serves as
        // the oracle; the vectorized path must agree to float noise.
        let (lr, b1, b2, eps) = (0.1, 0.9, 0.999, 1e-8);
        let mut w_oracle = 0.0f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        for t in 1..=100u32 {
            let g = 2.0 * (w_oracle - 3.0);
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let m_hat = m / (1.0 - b1.powi(t as i32));
            let v_hat = v / (1.0 - b2.powi(t as i32));
            w_oracle -= lr * m_hat / (v_hat.sqrt() + eps);
        }

        let mut p = scalar_param(0.0);
        let mut opt = Adam::new(lr);
        for _ in 0..100 {
            let w = p.value.get(0, 0);
            p.grad.set(0, 0, 2.0 * (w - 3.0));
            opt.step(&mut [&mut p]).unwrap();
        }
        let w = p.value.get(0, 0);
        assert!((w - w_oracle).abs() < 1e-12, "{w} vs {w_oracle}");
        // 100 steps at lr 0.1 should have closed most of the gap to 3.
        assert!((w - 3.0).abs() < (0.0f64 - 3.0).abs() * 0.2);
    }

    #[test]
    fn non_finite_gradient_is_rejected_and_params_untouched() {
        let mut p = scalar_param(1.5);
        p.grad.set(0, 0, f64::NAN);
        let mut opt = Adam::new(0.01);
        let err = opt.step(&mut [&mut p]).unwrap_err();
        assert!(matches!(err, KernelError::Numeric(_)));
        assert_eq!(p.value.get(0, 0), 1.5);
    }

    #[test]
    fn grads_are_zeroed_after_step() {
        let mut p = scalar_param(0.0);
        p.grad.set(0, 0, 1.0);
        let mut opt = Adam::new(0.01);
        opt.step(&mut [&mut p]).unwrap();
        assert_eq!(p.grad.get(0, 0), 0.0);
    }

    #[test]
    fn clip_scales_to_exact_max_norm() {
        let mut a = ParamTensor::new(Matrix::zeros(1, 2));
        a.grad = Matrix::row_vector(vec![3.0, 0.0]);
        let mut b = ParamTensor::new(Matrix::zeros(1, 1));
        b.grad = Matrix::row_vector(vec![4.0]);
        // Joint norm 5; clip to 1 → every grad divided by 5.
        let pre = clip_global_norm(&mut [&mut a, &mut b], 1.0);
        assert!((pre - 5.0).abs() < 1e-12);
        let post =
            (a.grad.frobenius_norm_sq() + b.grad.frobenius_norm_sq()).sqrt();
        assert!((post - 1.0).abs() < 1e-12);
    }

    #[test]
    fn clip_below_threshold_is_identity() {
        let mut a = ParamTensor::new(Matrix::zeros(1, 2));
        a.grad = Matrix::row_vector(vec![0.3, -0.4]);
        let before = a.grad.clone();
        clip_global_norm(&mut [&mut a], 5.0);
        assert_eq!(a.grad.data(), before.data());
    }
}
