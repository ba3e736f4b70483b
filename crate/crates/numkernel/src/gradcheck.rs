//! Central finite-difference verification of the analytic backward passes.
//! Each scenario builds a small model from an explicit parameter list, runs
//! the caching forward + backward once, then numerically differentiates the
//! same scalar loss entry by entry. Lives in the library (not under
//! cfg(test)) so downstream acceptance suites can rerun it.

use crate::error::Result;
use crate::layers::{xavier_uniform, Affine, LstmCell, Relu};
use crate::loss::{expectile_loss, mse, softmax_cross_entropy};
use crate::matrix::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EPS: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;

#[derive(Debug, Clone, Copy)]
pub struct CheckOutcome {
    pub max_rel_err: f64,
    pub entries: usize,
}

fn rand_matrix(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-scale..scale))
        .collect();
    Matrix::from_vec(rows, cols, data).expect("rand dims")
}

/// Central differences of `f` with respect to every entry of every matrix in
/// `params`, evaluated at the given point.
fn central_diff<F: FnMut(&[Matrix]) -> f64>(params: &[Matrix], mut f: F) -> Vec<Matrix> {
    let mut work: Vec<Matrix> = params.to_vec();
    let mut grads = Vec::with_capacity(params.len());
    for pi in 0..params.len() {
        let mut g = Matrix::zeros(params[pi].rows(), params[pi].cols());
        for k in 0..params[pi].data().len() {
            let orig = work[pi].data()[k];
            work[pi].data_mut()[k] = orig + EPS;
            let up = f(&work);
            work[pi].data_mut()[k] = orig - EPS;
            let down = f(&work);
            work[pi].data_mut()[k] = orig;
            g.data_mut()[k] = (up - down) / (2.0 * EPS);
        }
        grads.push(g);
    }
    grads
}

fn compare(analytic: &[Matrix], numeric: &[Matrix]) -> CheckOutcome {
    let mut max_rel_err = 0.0f64;
    let mut entries = 0;
    for (a, n) in analytic.iter().zip(numeric.iter()) {
        for (&av, &nv) in a.data().iter().zip(n.data().iter()) {
            let rel = (av - nv).abs() / (av.abs() + nv.abs()).max(1e-6);
            max_rel_err = max_rel_err.max(rel);
            entries += 1;
        }
    }
    CheckOutcome { max_rel_err, entries }
}

/// Affine → MSE. Checks dW, db and the returned dx.
pub fn check_affine_mse(seed: u64, batch: usize, n_in: usize, n_out: usize) -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = xavier_uniform(n_in, n_out, &mut rng);
    let b = rand_matrix(1, n_out, 0.5, &mut rng);
    let x = rand_matrix(batch, n_in, 1.0, &mut rng);
    let target = rand_matrix(batch, n_out, 1.0, &mut rng);

    let loss_of = |p: &[Matrix]| -> f64 {
        let layer = Affine::from_params(p[0].clone(), p[1].clone()).unwrap();
        let y = layer.forward_infer(&p[2]).unwrap();
        mse(&y, &target).unwrap().0
    };
    let params = vec![w.clone(), b.clone(), x.clone()];

    let mut layer = Affine::from_params(w, b)?;
    let y = layer.forward(&x)?;
    let (_, dly) = mse(&y, &target)?;
    let dx = layer.backward(&dly)?;
    let analytic = vec![layer.w.grad.clone(), layer.b.grad.clone(), dx];

    let numeric = central_diff(&params, loss_of);
    Ok(compare(&analytic, &numeric))
}

/// Affine → ReLU → Affine → softmax cross entropy. Checks all four parameter
/// tensors plus dx; retries with a shifted seed when a hidden pre-activation
/// sits close enough to the ReLU kink to break the finite difference.
pub fn check_mlp_ce(
    seed: u64,
    batch: usize,
    n_in: usize,
    hidden: usize,
    classes: usize,
) -> Result<CheckOutcome> {
    let mut attempt = seed;
    loop {
        let mut rng = ChaCha8Rng::seed_from_u64(attempt);
        let w1 = xavier_uniform(n_in, hidden, &mut rng);
        let b1 = rand_matrix(1, hidden, 0.3, &mut rng);
        let w2 = xavier_uniform(hidden, classes, &mut rng);
        let b2 = rand_matrix(1, classes, 0.3, &mut rng);
        let x = rand_matrix(batch, n_in, 1.0, &mut rng);
        let labels: Vec<usize> = (0..batch).map(|_| rng.random_range(0..classes)).collect();

        let probe = Affine::from_params(w1.clone(), b1.clone())?.forward_infer(&x)?;
        if probe.data().iter().any(|v| v.abs() < 1e-3) {
            attempt += 1000;
            continue;
        }

        let labels_ref = labels.clone();
        let loss_of = move |p: &[Matrix]| -> f64 {
            let l1 = Affine::from_params(p[0].clone(), p[1].clone()).unwrap();
            let l2 = Affine::from_params(p[2].clone(), p[3].clone()).unwrap();
            let h = Relu::new().forward_infer(&l1.forward_infer(&p[4]).unwrap());
            let logits = l2.forward_infer(&h).unwrap();
            softmax_cross_entropy(&logits, &labels_ref).unwrap().0
        };
        let params = vec![w1.clone(), b1.clone(), w2.clone(), b2.clone(), x.clone()];

        let mut l1 = Affine::from_params(w1, b1)?;
        let mut l2 = Affine::from_params(w2, b2)?;
        let mut relu = Relu::new();
        let h = relu.forward(&l1.forward(&x)?);
        let logits = l2.forward(&h)?;
        let (_, dlogits) = softmax_cross_entropy(&logits, &labels)?;
        let dh = l2.backward(&dlogits)?;
        let dpre = relu.backward(&dh)?;
        let dx = l1.backward(&dpre)?;
        let analytic = vec![
            l1.w.grad.clone(),
            l1.b.grad.clone(),
            l2.w.grad.clone(),
            l2.b.grad.clone(),
            dx,
        ];

        let numeric = central_diff(&params, loss_of);
        return Ok(compare(&analytic, &numeric));
    }
}

/// LSTM over several steps with an affine head and MSE at every step, so the
/// backward-through-time pass sees gradient injections at each t. Checks the
/// three cell tensors and both head tensors.
pub fn check_lstm_head_mse(
    seed: u64,
    batch: usize,
    n_in: usize,
    hidden: usize,
    steps: usize,
) -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let wx = xavier_uniform(n_in, 4 * hidden, &mut rng);
    let wh = xavier_uniform(hidden, 4 * hidden, &mut rng);
    let b = rand_matrix(1, 4 * hidden, 0.3, &mut rng);
    let wo = xavier_uniform(hidden, 1, &mut rng);
    let bo = rand_matrix(1, 1, 0.3, &mut rng);
    let xs: Vec<Matrix> = (0..steps).map(|_| rand_matrix(batch, n_in, 1.0, &mut rng)).collect();
    let targets: Vec<Matrix> = (0..steps).map(|_| rand_matrix(batch, 1, 1.0, &mut rng)).collect();

    let xs_ref = xs.clone();
    let targets_ref = targets.clone();
    let loss_of = move |p: &[Matrix]| -> f64 {
        let cell = LstmCell::from_params(p[0].clone(), p[1].clone(), p[2].clone()).unwrap();
        let head = Affine::from_params(p[3].clone(), p[4].clone()).unwrap();
        let mut h = Matrix::zeros(batch, hidden);
        let mut c = Matrix::zeros(batch, hidden);
        let mut loss = 0.0;
        for (x, target) in xs_ref.iter().zip(targets_ref.iter()) {
            let (h2, c2) = cell.step_infer(x, &h, &c).unwrap();
            h = h2;
            c = c2;
            let y = head.forward_infer(&h).unwrap();
            loss += mse(&y, target).unwrap().0;
        }
        loss
    };
    let params = vec![wx.clone(), wh.clone(), b.clone(), wo.clone(), bo.clone()];

    let mut cell = LstmCell::from_params(wx, wh, b)?;
    let mut head = Affine::from_params(wo, bo)?;
    cell.begin_sequence();
    let mut h = Matrix::zeros(batch, hidden);
    let mut c = Matrix::zeros(batch, hidden);
    let mut head_grads: Vec<Matrix> = Vec::with_capacity(steps);
    for (x, target) in xs.iter().zip(targets.iter()) {
        let (h2, c2) = cell.step(x, &h, &c)?;
        h = h2;
        c = c2;
        let y = head.forward(&h)?;
        let (_, dy) = mse(&y, target)?;
        head_grads.push(dy);
    }
    // Pop head caches newest-first, collecting dh per step.
    let mut dh_inject: Vec<Option<Matrix>> = vec![None; steps];
    for t in (0..steps).rev() {
        dh_inject[t] = Some(head.backward(&head_grads[t])?);
    }
    cell.backward_through_time(&dh_inject)?;
    let analytic = vec![
        cell.wx.grad.clone(),
        cell.wh.grad.clone(),
        cell.b.grad.clone(),
        head.w.grad.clone(),
        head.b.grad.clone(),
    ];

    let numeric = central_diff(&params, loss_of);
    Ok(compare(&analytic, &numeric))
}

/// Affine head → expectile loss; retries away from the u=0 kink.
pub fn check_expectile(seed: u64, batch: usize, n_in: usize, tau: f64) -> Result<CheckOutcome> {
    let mut attempt = seed;
    loop {
        let mut rng = ChaCha8Rng::seed_from_u64(attempt);
        let w = xavier_uniform(n_in, 1, &mut rng);
        let b = rand_matrix(1, 1, 0.3, &mut rng);
        let x = rand_matrix(batch, n_in, 1.0, &mut rng);
        let target = rand_matrix(batch, 1, 1.0, &mut rng);

        let probe = Affine::from_params(w.clone(), b.clone())?.forward_infer(&x)?;
        let near_kink = probe
            .data()
            .iter()
            .zip(target.data().iter())
            .any(|(&p, &t)| (t - p).abs() < 1e-3);
        if near_kink {
            attempt += 1000;
            continue;
        }

        let target_ref = target.clone();
        let loss_of = move |p: &[Matrix]| -> f64 {
            let layer = Affine::from_params(p[0].clone(), p[1].clone()).unwrap();
            let y = layer.forward_infer(&p[2]).unwrap();
            expectile_loss(&y, &target_ref, tau).unwrap().0
        };
        let params = vec![w.clone(), b.clone(), x.clone()];

        let mut layer = Affine::from_params(w, b)?;
        let y = layer.forward(&x)?;
        let (_, dy) = expectile_loss(&y, &target, tau)?;
        let dx = layer.backward(&dy)?;
        let analytic = vec![layer.w.grad.clone(), layer.b.grad.clone(), dx];

        let numeric = central_diff(&params, loss_of);
        return Ok(compare(&analytic, &numeric));
    }
}

/// The standard 20-scenario battery: five shape draws for each of the four
/// scenario families. Returns (label, outcome) pairs.
pub fn standard_battery() -> Result<Vec<(String, CheckOutcome)>> {
    let mut out = Vec::new();
    let affine_shapes = [(1, 1, 1), (2, 3, 4), (4, 6, 2), (3, 5, 5), (6, 2, 3)];
    for (i, &(bsz, n_in, n_out)) in affine_shapes.iter().enumerate() {
        out.push((
            format!("affine/mse {bsz}x{n_in}->{n_out}"),
            check_affine_mse(100 + i as u64, bsz, n_in, n_out)?,
        ));
    }
    let mlp_shapes = [(2, 3, 4, 3), (1, 5, 2, 2), (4, 4, 6, 5), (3, 2, 3, 4), (2, 6, 5, 2)];
    for (i, &(bsz, n_in, hidden, classes)) in mlp_shapes.iter().enumerate() {
        out.push((
            format!("mlp/ce {bsz}x{n_in}->{hidden}->{classes}"),
            check_mlp_ce(200 + i as u64, bsz, n_in, hidden, classes)?,
        ));
    }
    let lstm_shapes = [(1, 2, 3, 2), (2, 3, 2, 3), (3, 4, 4, 2), (1, 5, 2, 4), (2, 2, 5, 3)];
    for (i, &(bsz, n_in, hidden, steps)) in lstm_shapes.iter().enumerate() {
        out.push((
            format!("lstm/mse {bsz}x{n_in} h{hidden} T{steps}"),
            check_lstm_head_mse(300 + i as u64, bsz, n_in, hidden, steps)?,
        ));
    }
    let exp_shapes = [(2, 3, 0.7), (4, 2, 0.5), (3, 5, 0.9), (1, 4, 0.3), (5, 3, 0.7)];
    for (i, &(bsz, n_in, tau)) in exp_shapes.iter().enumerate() {
        out.push((
            format!("affine/expectile {bsz}x{n_in} tau={tau}"),
            check_expectile(400 + i as u64, bsz, n_in, tau)?,
        ));
    }
    Ok(out)
}
