//! Scalar losses with analytic input gradients. Every loss returns the mean
//! over the batch so gradient magnitudes stay comparable across batch sizes.

use crate::error::{KernelError, Result};
use crate::matrix::Matrix;

/// log Σ exp(row) computed against the row max for stability.
pub fn logsumexp_row(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Row-wise softmax.
pub fn softmax(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let lse = logsumexp_row(row);
        for v in row.iter_mut() {
            *v = (*v - lse).exp();
        }
    }
    out
}

/// Mean squared error ½-free form: L = mean((pred−target)²). The gradient
/// w.r.t. pred is 2(pred−target)/N where N is the element count.
pub fn mse(pred: &Matrix, target: &Matrix) -> Result<(f64, Matrix)> {
    if pred.shape() != target.shape() {
        return Err(KernelError::Dimension {
            context: "mse".to_string(),
            expected: target.shape(),
            got: pred.shape(),
        });
    }
    let n = (pred.rows() * pred.cols()) as f64;
    let mut grad = Matrix::zeros(pred.rows(), pred.cols());
    let mut loss = 0.0;
    for ((g, &p), &t) in grad
        .data_mut()
        .iter_mut()
        .zip(pred.data().iter())
        .zip(target.data().iter())
    {
        let d = p - t;
        loss += d * d;
        *g = 2.0 * d / n;
    }
    Ok((loss / n, grad))
}

/// Cross entropy over integer class labels, mean over the batch, with the
/// standard softmax−onehot gradient on the logits.
pub fn softmax_cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    if labels.len() != logits.rows() {
        return Err(KernelError::Dimension {
            context: "cross entropy labels".to_string(),
            expected: (logits.rows(), 1),
            got: (labels.len(), 1),
        });
    }
    let n = logits.rows() as f64;
    let mut grad = softmax(logits);
    let mut loss = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        if label >= logits.cols() {
            return Err(KernelError::Config(format!(
                "label {label} out of range for {} classes",
                logits.cols()
            )));
        }
        let lse = logsumexp_row(logits.row(i));
        loss += lse - logits.get(i, label);
        let row = grad.row_mut(i);
        row[label] -= 1.0;
        for v in row.iter_mut() {
            *v /= n;
        }
    }
    Ok((loss / n, grad))
}

/// Asymmetric squared loss |τ − 1[u<0]|·u² on residuals u = target − pred,
/// mean over elements. At τ=0.5 this is exactly half the MSE.
pub fn expectile_loss(pred: &Matrix, target: &Matrix, tau: f64) -> Result<(f64, Matrix)> {
    if pred.shape() != target.shape() {
        return Err(KernelError::Dimension {
            context: "expectile loss".to_string(),
            expected: target.shape(),
            got: pred.shape(),
        });
    }
    if !(0.0..1.0).contains(&tau) || tau <= 0.0 {
        return Err(KernelError::Config(format!(
            "expectile tau must lie in (0,1), got {tau}"
        )));
    }
    let n = (pred.rows() * pred.cols()) as f64;
    let mut grad = Matrix::zeros(pred.rows(), pred.cols());
    let mut loss = 0.0;
    for ((g, &p), &t) in grad
        .data_mut()
        .iter_mut()
        .zip(pred.data().iter())
        .zip(target.data().iter())
    {
        let u = t - p;
        let w = if u < 0.0 { 1.0 - tau } else { tau };
        loss += w * u * u;
        *g = -2.0 * w * u / n;
    }
    Ok((loss / n, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mse_of_equal_inputs_is_zero() {
        let a = Matrix::row_vector(vec![1.0, -2.0, 3.5]);
        let (loss, grad) = mse(&a, &a).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mse_matches_hand_value() {
        let pred = Matrix::row_vector(vec![1.0, 2.0]);
        let target = Matrix::row_vector(vec![0.0, 4.0]);
        let (loss, grad) = mse(&pred, &target).unwrap();
        assert!((loss - (1.0 + 4.0) / 2.0).abs() < 1e-15);
        assert!((grad.get(0, 0) - 1.0).abs() < 1e-15);
        assert!((grad.get(0, 1) + 2.0).abs() < 1e-15);
    }

    #[test]
    fn uniform_logits_cross_entropy_is_ln_classes() {
        let logits = Matrix::zeros(3, 40);
        let (loss, _) = softmax_cross_entropy(&logits, &[0, 17, 39]).unwrap();
        assert!((loss - (40.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let logits =
            Matrix::from_vec(1, 3, vec![1.0, 2.0, 0.5]).unwrap();
        let (_, grad) = softmax_cross_entropy(&logits, &[1]).unwrap();
        let p = softmax(&logits);
        assert!((grad.get(0, 0) - p.get(0, 0)).abs() < 1e-12);
        assert!((grad.get(0, 1) - (p.get(0, 1) - 1.0)).abs() < 1e-12);
        assert!((grad.get(0, 2) - p.get(0, 2)).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_shift_invariance() {
        let logits = Matrix::from_vec(2, 3, vec![0.3, -1.0, 2.0, 5.0, 5.5, 4.0]).unwrap();
        let shifted = logits.map(|v| v + 1000.0);
        let (a, _) = softmax_cross_entropy(&logits, &[2, 1]).unwrap();
        let (b, _) = softmax_cross_entropy(&shifted, &[2, 1]).unwrap();
        assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn expectile_at_half_is_half_mse() {
        let pred = Matrix::row_vector(vec![1.0, 2.0, -4.0]);
        let target = Matrix::row_vector(vec![0.5, 3.0, -7.0]);
        let (l_mse, g_mse) = mse(&pred, &target).unwrap();
        let (l_exp, g_exp) = expectile_loss(&pred, &target, 0.5).unwrap();
        assert!((l_exp - 0.5 * l_mse).abs() < 1e-15);
        for (a, b) in g_exp.data().iter().zip(g_mse.data().iter()) {
            assert!((a - 0.5 * b).abs() < 1e-15);
        }
    }

    #[test]
    fn expectile_weights_positive_residuals_by_tau() {
        // target > pred ⇒ u>0 ⇒ weight τ; target < pred ⇒ weight 1−τ.
        let pred = Matrix::row_vector(vec![0.0, 0.0]);
        let target = Matrix::row_vector(vec![1.0, -1.0]);
        let (loss, _) = expectile_loss(&pred, &target, 0.7).unwrap();
        assert!((loss - (0.7 + 0.3) / 2.0).abs() < 1e-15);
    }

    /// Independent oracle: the minimizer m of Σ|τ−1[x<m]|(x−m)² satisfies the
    /// first-order condition τΣ_{x≥m}(x−m) = (1−τ)Σ_{x<m}(m−x); find it by
    /// bisection and check gradient descent on `expectile_loss` agrees.
    #[test]
    fn expectile_minimizer_matches_bisection_oracle() {
        let xs = [0.0, 1.0, 2.0, 10.0];
        let tau = 0.7;
        let cond = |m: f64| -> f64 {
            let mut s = 0.0;
            for &x in &xs {
                let w = if x - m < 0.0 { 1.0 - tau } else { tau };
                s += w * (x - m);
            }
            s
        };
        let (mut lo, mut hi) = (-5.0, 15.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if cond(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let oracle = 0.5 * (lo + hi);

        let target = Matrix::row_vector(xs.to_vec());
        let mut m = 0.0;
        for _ in 0..20_000 {
            let pred = Matrix::row_vector(vec![m; xs.len()]);
            let (_, grad) = expectile_loss(&pred, &target, tau).unwrap();
            let g: f64 = grad.data().iter().sum();
            m -= 0.05 * g;
        }
        assert!(
            (m - oracle).abs() < 1e-4,
            "descent {m} vs bisection {oracle}"
        );
    }

    #[test]
    fn logsumexp_handles_large_values() {
        let v = logsumexp_row(&[1000.0, 1000.0]);
        assert!((v - (1000.0 + 2.0f64.ln())).abs() < 1e-9);
    }
}
