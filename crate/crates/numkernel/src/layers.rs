//! Explicit forward/backward layers. Each layer owns its parameters and the
//! activation caches needed for the backward pass; `*_infer` variants skip
//! caching and take `&self` so trained models can be evaluated concurrently.

use crate::error::{KernelError, Result};
use crate::matrix::Matrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// A weight (or bias) matrix together with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct ParamTensor {
    pub value: Matrix,
    pub grad: Matrix,
}

impl ParamTensor {
    pub fn new(value: Matrix) -> Self {
        let grad = Matrix::zeros(value.rows(), value.cols());
        ParamTensor { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Uniform init in ±√(6/(fan_in+fan_out)).
pub fn xavier_uniform(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    Matrix::from_vec(rows, cols, data).expect("xavier dims")
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Fully connected layer: y = xW + b.
#[derive(Debug, Clone)]
pub struct Affine {
    pub w: ParamTensor,
    pub b: ParamTensor,
    cache: Vec<Matrix>,
}

impl Affine {
    pub fn new(n_in: usize, n_out: usize, rng: &mut ChaCha8Rng) -> Self {
        Affine {
            w: ParamTensor::new(xavier_uniform(n_in, n_out, rng)),
            b: ParamTensor::new(Matrix::zeros(1, n_out)),
            cache: Vec::new(),
        }
    }

    pub fn from_params(w: Matrix, b: Matrix) -> Result<Self> {
        if b.rows() != 1 || b.cols() != w.cols() {
            return Err(KernelError::Dimension {
                context: "affine bias".to_string(),
                expected: (1, w.cols()),
                got: b.shape(),
            });
        }
        Ok(Affine {
            w: ParamTensor::new(w),
            b: ParamTensor::new(b),
            cache: Vec::new(),
        })
    }

    pub fn n_in(&self) -> usize {
        self.w.value.rows()
    }

    pub fn n_out(&self) -> usize {
        self.w.value.cols()
    }

    /// Caching forward for training. Panics never; dimension errors reported.
    pub fn forward(&mut self, x: &Matrix) -> Result<Matrix> {
        let out = self.forward_infer(x)?;
        self.cache.push(x.clone());
        Ok(out)
    }

    pub fn forward_infer(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.n_in() {
            return Err(KernelError::Dimension {
                context: "affine forward".to_string(),
                expected: (x.rows(), self.n_in()),
                got: x.shape(),
            });
        }
        let mut out = Matrix::zeros(x.rows(), self.n_out());
        out.addmul(x, &self.w.value)?;
        out.add_row_broadcast(&self.b.value)?;
        Ok(out)
    }

    /// Accumulates dW, db and returns dx for the most recent cached forward.
    pub fn backward(&mut self, grad_out: &Matrix) -> Result<Matrix> {
        let x = self.cache.pop().ok_or_else(|| {
            KernelError::State("affine backward without a cached forward".to_string())
        })?;
        if grad_out.shape() != (x.rows(), self.n_out()) {
            return Err(KernelError::Dimension {
                context: "affine backward".to_string(),
                expected: (x.rows(), self.n_out()),
                got: grad_out.shape(),
            });
        }
        self.w.grad.addmul_transpose_lhs(&x, grad_out)?;
        self.b.grad.add_assign(&grad_out.col_sums())?;
        grad_out.matmul_transpose_rhs(&self.w.value)
    }

    pub fn clear_cache(&mut self) {
        self.cache.clear();
    }

    pub fn params_mut(&mut self) -> Vec<&mut ParamTensor> {
        vec![&mut self.w, &mut self.b]
    }
}

const GATE_NAMES: [&str; 4] = ["input", "forget", "cell", "output"];

#[derive(Debug)]
struct LstmStepCache {
    x: Matrix,
    h_prev: Matrix,
    c_prev: Matrix,
    gates: Matrix, // post-activation [i f g o], B×4H
    tanh_c: Matrix,
}

/// Single LSTM cell. Gate pre-activations are laid out as one B×4H matrix in
/// [input, forget, cell, output] block order; the forget-gate bias starts at
/// 1.0. Call `step` per time interval, then `backward_through_time` once.
#[derive(Debug)]
pub struct LstmCell {
    pub wx: ParamTensor, // n×4H
    pub wh: ParamTensor, // H×4H
    pub b: ParamTensor,  // 1×4H
    n_in: usize,
    hidden: usize,
    caches: Vec<LstmStepCache>,
}

impl LstmCell {
    pub fn new(n_in: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let wx = xavier_uniform(n_in, 4 * hidden, rng);
        let wh = xavier_uniform(hidden, 4 * hidden, rng);
        let mut b = Matrix::zeros(1, 4 * hidden);
        for j in hidden..2 * hidden {
            b.set(0, j, 1.0);
        }
        LstmCell {
            wx: ParamTensor::new(wx),
            wh: ParamTensor::new(wh),
            b: ParamTensor::new(b),
            n_in,
            hidden,
            caches: Vec::new(),
        }
    }

    pub fn from_params(wx: Matrix, wh: Matrix, b: Matrix) -> Result<Self> {
        let hidden = wh.rows();
        let n_in = wx.rows();
        if wx.cols() != 4 * hidden || wh.cols() != 4 * hidden || b.shape() != (1, 4 * hidden) {
            return Err(KernelError::Dimension {
                context: "lstm params".to_string(),
                expected: (n_in, 4 * hidden),
                got: wx.shape(),
            });
        }
        Ok(LstmCell {
            wx: ParamTensor::new(wx),
            wh: ParamTensor::new(wh),
            b: ParamTensor::new(b),
            n_in,
            hidden,
            caches: Vec::new(),
        })
    }

    pub fn n_in(&self) -> usize {
        self.n_in
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn begin_sequence(&mut self) {
        self.caches.clear();
    }

    fn pre_activations(&self, x: &Matrix, h_prev: &Matrix) -> Result<Matrix> {
        if x.cols() != self.n_in || h_prev.cols() != self.hidden || x.rows() != h_prev.rows() {
            return Err(KernelError::Dimension {
                context: "lstm step".to_string(),
                expected: (x.rows(), self.n_in),
                got: x.shape(),
            });
        }
        let mut pre = Matrix::zeros(x.rows(), 4 * self.hidden);
        pre.addmul(x, &self.wx.value)?;
        pre.addmul(h_prev, &self.wh.value)?;
        pre.add_row_broadcast(&self.b.value)?;
        // NaN in a gate pre-activation means a diverged upstream value; report
        // which gate rather than letting it poison the whole sequence.
        for (g, name) in GATE_NAMES.iter().enumerate() {
            let lo = g * self.hidden;
            for i in 0..pre.rows() {
                if pre.row(i)[lo..lo + self.hidden].iter().any(|v| v.is_nan()) {
                    return Err(KernelError::Numeric(format!(
                        "NaN in {name}-gate pre-activation"
                    )));
                }
            }
        }
        Ok(pre)
    }

    fn activate(pre: &Matrix, hidden: usize, c_prev: &Matrix) -> (Matrix, Matrix, Matrix, Matrix) {
        let rows = pre.rows();
        let mut gates = Matrix::zeros(rows, 4 * hidden);
        let mut c = Matrix::zeros(rows, hidden);
        let mut tanh_c = Matrix::zeros(rows, hidden);
        let mut h = Matrix::zeros(rows, hidden);
        for r in 0..rows {
            for j in 0..hidden {
                let i_g = sigmoid(pre.get(r, j));
                let f_g = sigmoid(pre.get(r, hidden + j));
                let g_g = pre.get(r, 2 * hidden + j).tanh();
                let o_g = sigmoid(pre.get(r, 3 * hidden + j));
                gates.set(r, j, i_g);
                gates.set(r, hidden + j, f_g);
                gates.set(r, 2 * hidden + j, g_g);
                gates.set(r, 3 * hidden + j, o_g);
                let c_v = f_g * c_prev.get(r, j) + i_g * g_g;
                let t_v = c_v.tanh();
                c.set(r, j, c_v);
                tanh_c.set(r, j, t_v);
                h.set(r, j, o_g * t_v);
            }
        }
        (gates, c, tanh_c, h)
    }

    /// One recurrence step with caching for backward-through-time.
    pub fn step(&mut self, x: &Matrix, h_prev: &Matrix, c_prev: &Matrix) -> Result<(Matrix, Matrix)> {
        let pre = self.pre_activations(x, h_prev)?;
        let (gates, c, tanh_c, h) = Self::activate(&pre, self.hidden, c_prev);
        self.caches.push(LstmStepCache {
            x: x.clone(),
            h_prev: h_prev.clone(),
            c_prev: c_prev.clone(),
            gates,
            tanh_c,
        });
        Ok((h, c))
    }

    /// One recurrence step without caching; usable from shared references.
    pub fn step_infer(&self, x: &Matrix, h_prev: &Matrix, c_prev: &Matrix) -> Result<(Matrix, Matrix)> {
        let pre = self.pre_activations(x, h_prev)?;
        let (_, c, _, h) = Self::activate(&pre, self.hidden, c_prev);
        Ok((h, c))
    }

    /// Runs the reverse recurrence over every cached step. `dh_inject[t]` is
    /// the external gradient on h_t (None where the loss does not touch h_t).
    /// Parameter gradients accumulate; returns nothing because input
    /// gradients are not needed by any caller.
    pub fn backward_through_time(&mut self, dh_inject: &[Option<Matrix>]) -> Result<()> {
        let steps = self.caches.len();
        if steps == 0 {
            return Err(KernelError::State(
                "lstm backward without cached forward steps".to_string(),
            ));
        }
        if dh_inject.len() != steps {
            return Err(KernelError::Dimension {
                context: "lstm backward injection list".to_string(),
                expected: (steps, 1),
                got: (dh_inject.len(), 1),
            });
        }
        let h = self.hidden;
        let rows = self.caches[0].x.rows();
        let mut dh_next = Matrix::zeros(rows, h);
        let mut dc_next = Matrix::zeros(rows, h);
        for t in (0..steps).rev() {
            let cache = &self.caches[t];
            let mut dh = dh_next;
            if let Some(inj) = &dh_inject[t] {
                dh.add_assign(inj)?;
            }
            // Through h = o∘tanh(c) and c = f∘c_prev + i∘g.
            let mut dpre = Matrix::zeros(rows, 4 * h);
            let mut dc = dc_next;
            let mut dc_prev = Matrix::zeros(rows, h);
            for r in 0..rows {
                for j in 0..h {
                    let i_g = cache.gates.get(r, j);
                    let f_g = cache.gates.get(r, h + j);
                    let g_g = cache.gates.get(r, 2 * h + j);
                    let o_g = cache.gates.get(r, 3 * h + j);
                    let t_c = cache.tanh_c.get(r, j);
                    let dh_v = dh.get(r, j);
                    let dc_v = dc.get(r, j) + dh_v * o_g * (1.0 - t_c * t_c);
                    dc.set(r, j, dc_v);
                    dpre.set(r, j, dc_v * g_g * i_g * (1.0 - i_g));
                    dpre.set(r, h + j, dc_v * cache.c_prev.get(r, j) * f_g * (1.0 - f_g));
                    dpre.set(r, 2 * h + j, dc_v * i_g * (1.0 - g_g * g_g));
                    dpre.set(r, 3 * h + j, dh_v * t_c * o_g * (1.0 - o_g));
                    dc_prev.set(r, j, dc_v * f_g);
                }
            }
            self.wx.grad.addmul_transpose_lhs(&cache.x, &dpre)?;
            self.wh.grad.addmul_transpose_lhs(&cache.h_prev, &dpre)?;
            self.b.grad.add_assign(&dpre.col_sums())?;
            dh_next = dpre.matmul_transpose_rhs(&self.wh.value)?;
            dc_next = dc_prev;
        }
        self.caches.clear();
        Ok(())
    }

    pub fn params_mut(&mut self) -> Vec<&mut ParamTensor> {
        vec![&mut self.wx, &mut self.wh, &mut self.b]
    }
}

/// Elementwise max(0,·) with mask cache.
#[derive(Debug, Clone, Default)]
pub struct Relu {
    cache: Vec<Matrix>,
}

impl Relu {
    pub fn new() -> Self {
        Relu { cache: Vec::new() }
    }

    pub fn forward(&mut self, x: &Matrix) -> Matrix {
        let out = x.map(|v| if v > 0.0 { v } else { 0.0 });
        self.cache.push(out.clone());
        out
    }

    pub fn forward_infer(&self, x: &Matrix) -> Matrix {
        x.map(|v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn backward(&mut self, grad_out: &Matrix) -> Result<Matrix> {
        let act = self.cache.pop().ok_or_else(|| {
            KernelError::State("relu backward without a cached forward".to_string())
        })?;
        let mut g = grad_out.clone();
        for (gv, &av) in g.data_mut().iter_mut().zip(act.data().iter()) {
            if av <= 0.0 {
                *gv = 0.0;
            }
        }
        Ok(g)
    }

    pub fn clear_cache(&mut self) {
        self.cache.clear();
    }
}
