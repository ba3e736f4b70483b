//! The four offline trainers sharing one dueling Q-network: Dueling-DQN with
//! hard target syncs, CQL (TD loss plus a conservative logsumexp penalty, soft
//! target updates), IQL (expectile value net supplying the TD target), and
//! Behavior Cloning (cross-entropy over K+1 actions). All sample uniformly
//! from an immutable replay buffer of factored experience tuples.

use crate::experience::{ExperienceBuffer, ExperienceTuple};
use crate::{Error, Result};
use numkernel::{
    checkpoint, clip_global_norm, expectile_loss, logsumexp_row, softmax, softmax_cross_entropy,
    Adam, Affine, Matrix, ParamTensor, Relu,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algo {
    Bc,
    Ddqn,
    Cql,
    Iql,
}

impl Algo {
    pub const ALL: [Algo; 4] = [Algo::Bc, Algo::Ddqn, Algo::Cql, Algo::Iql];

    pub fn name(&self) -> &'static str {
        match self {
            Algo::Bc => "bc",
            Algo::Ddqn => "ddqn",
            Algo::Cql => "cql",
            Algo::Iql => "iql",
        }
    }
}

impl std::str::FromStr for Algo {
    type Err = Error;

    fn from_str(s: &str) -> Result<Algo> {
        match s {
            "bc" => Ok(Algo::Bc),
            "ddqn" => Ok(Algo::Ddqn),
            "cql" => Ok(Algo::Cql),
            "iql" => Ok(Algo::Iql),
            other => Err(Error::Config(format!(
                "unknown algo {other:?} (expected bc, ddqn, cql, or iql)"
            ))),
        }
    }
}

/// Dueling head over a shared trunk: Q(s,·) = V(s) + A(s,·) − mean_a A(s,a).
#[derive(Debug, Clone)]
pub struct DuelingQNet {
    pub trunk: Affine,
    pub relu: Relu,
    pub value: Affine,
    pub advantage: Affine,
}

impl DuelingQNet {
    pub fn new(state_dim: usize, n_actions: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        DuelingQNet {
            trunk: Affine::new(state_dim, hidden, rng),
            relu: Relu::new(),
            value: Affine::new(hidden, 1, rng),
            advantage: Affine::new(hidden, n_actions, rng),
        }
    }

    pub fn state_dim(&self) -> usize {
        self.trunk.n_in()
    }

    pub fn n_actions(&self) -> usize {
        self.advantage.n_out()
    }

    fn aggregate(v: &Matrix, adv: &Matrix) -> Matrix {
        let (rows, acts) = adv.shape();
        let mut q = Matrix::zeros(rows, acts);
        for i in 0..rows {
            let mean: f64 = adv.row(i).iter().sum::<f64>() / acts as f64;
            for j in 0..acts {
                q.set(i, j, v.get(i, 0) + adv.get(i, j) - mean);
            }
        }
        q
    }

    pub fn forward_infer(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.forward_parts_infer(x)?.0)
    }

    pub fn forward_parts_infer(&self, x: &Matrix) -> Result<(Matrix, Matrix)> {
        let t = self.relu.forward_infer(&self.trunk.forward_infer(x).map_err(Error::Kernel)?);
        let v = self.value.forward_infer(&t).map_err(Error::Kernel)?;
        let adv = self.advantage.forward_infer(&t).map_err(Error::Kernel)?;
        Ok((Self::aggregate(&v, &adv), v))
    }

    /// Caching forward for training; pair with exactly one `backward`.
    pub fn forward(&mut self, x: &Matrix) -> Result<Matrix> {
        let t = self.relu.forward(&self.trunk.forward(x).map_err(Error::Kernel)?);
        let v = self.value.forward(&t).map_err(Error::Kernel)?;
        let adv = self.advantage.forward(&t).map_err(Error::Kernel)?;
        Ok(Self::aggregate(&v, &adv))
    }

    /// Backpropagates dL/dQ through the aggregation and both streams.
    pub fn backward(&mut self, dq: &Matrix) -> Result<()> {
        let (rows, acts) = dq.shape();
        let mut dv = Matrix::zeros(rows, 1);
        let mut dadv = Matrix::zeros(rows, acts);
        for i in 0..rows {
            let sum: f64 = dq.row(i).iter().sum();
            dv.set(i, 0, sum);
            let mean = sum / acts as f64;
            for j in 0..acts {
                dadv.set(i, j, dq.get(i, j) - mean);
            }
        }
        let mut dt = self.value.backward(&dv).map_err(Error::Kernel)?;
        dt.add_assign(&self.advantage.backward(&dadv).map_err(Error::Kernel)?)
            .map_err(Error::Kernel)?;
        let dtrunk = self.relu.backward(&dt).map_err(Error::Kernel)?;
        self.trunk.backward(&dtrunk).map_err(Error::Kernel)?;
        Ok(())
    }

    pub fn params_mut(&mut self) -> Vec<&mut ParamTensor> {
        let mut p = self.trunk.params_mut();
        p.extend(self.value.params_mut());
        p.extend(self.advantage.params_mut());
        p
    }

    fn param_values(&self) -> [&Matrix; 6] {
        [
            &self.trunk.w.value,
            &self.trunk.b.value,
            &self.value.w.value,
            &self.value.b.value,
            &self.advantage.w.value,
            &self.advantage.b.value,
        ]
    }

    fn param_values_mut(&mut self) -> [&mut Matrix; 6] {
        [
            &mut self.trunk.w.value,
            &mut self.trunk.b.value,
            &mut self.value.w.value,
            &mut self.value.b.value,
            &mut self.advantage.w.value,
            &mut self.advantage.b.value,
        ]
    }

    pub fn copy_params_from(&mut self, other: &DuelingQNet) {
        let src = other.param_values();
        for (dst, s) in self.param_values_mut().into_iter().zip(src) {
            *dst = s.clone();
        }
    }

    /// θ̂ ← (1−τ)·θ̂ + τ·θ elementwise.
    pub fn soft_update_from(&mut self, other: &DuelingQNet, tau: f64) {
        let src = other.param_values();
        for (dst, s) in self.param_values_mut().into_iter().zip(src) {
            for (d, v) in dst.data_mut().iter_mut().zip(s.data().iter()) {
                *d = (1.0 - tau) * *d + tau * *v;
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let dims = Matrix::from_vec(
            1,
            3,
            vec![
                self.state_dim() as f64,
                self.n_actions() as f64,
                self.trunk.n_out() as f64,
            ],
        )
        .map_err(Error::Kernel)?;
        let entries = [
            ("dims", &dims),
            ("trunk/w", &self.trunk.w.value),
            ("trunk/b", &self.trunk.b.value),
            ("value/w", &self.value.w.value),
            ("value/b", &self.value.b.value),
            ("advantage/w", &self.advantage.w.value),
            ("advantage/b", &self.advantage.b.value),
        ];
        checkpoint::save(path, &entries).map_err(Error::Kernel)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut entries = checkpoint::load(path).map_err(Error::Kernel)?;
        let mut take = |name: &str| checkpoint::take_entry(&mut entries, name).map_err(Error::Kernel);
        let dims = take("dims")?;
        let trunk = Affine::from_params(take("trunk/w")?, take("trunk/b")?).map_err(Error::Kernel)?;
        let value = Affine::from_params(take("value/w")?, take("value/b")?).map_err(Error::Kernel)?;
        let advantage =
            Affine::from_params(take("advantage/w")?, take("advantage/b")?).map_err(Error::Kernel)?;
        let net = DuelingQNet { trunk, relu: Relu::new(), value, advantage };
        if dims.shape() != (1, 3)
            || net.state_dim() != dims.get(0, 0) as usize
            || net.n_actions() != dims.get(0, 1) as usize
        {
            return Err(Error::Data("qnet checkpoint dims disagree with params".into()));
        }
        Ok(net)
    }
}

/// State-value net for IQL: same trunk shape, scalar head.
#[derive(Debug, Clone)]
pub struct ValueNet {
    pub trunk: Affine,
    pub relu: Relu,
    pub head: Affine,
}

impl ValueNet {
    pub fn new(state_dim: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        ValueNet {
            trunk: Affine::new(state_dim, hidden, rng),
            relu: Relu::new(),
            head: Affine::new(hidden, 1, rng),
        }
    }

    pub fn forward_infer(&self, x: &Matrix) -> Result<Matrix> {
        let t = self.relu.forward_infer(&self.trunk.forward_infer(x).map_err(Error::Kernel)?);
        self.head.forward_infer(&t).map_err(Error::Kernel)
    }

    pub fn forward(&mut self, x: &Matrix) -> Result<Matrix> {
        let t = self.relu.forward(&self.trunk.forward(x).map_err(Error::Kernel)?);
        self.head.forward(&t).map_err(Error::Kernel)
    }

    pub fn backward(&mut self, dout: &Matrix) -> Result<()> {
        let dt = self.head.backward(dout).map_err(Error::Kernel)?;
        let dtrunk = self.relu.backward(&dt).map_err(Error::Kernel)?;
        self.trunk.backward(&dtrunk).map_err(Error::Kernel)?;
        Ok(())
    }

    pub fn params_mut(&mut self) -> Vec<&mut ParamTensor> {
        let mut p = self.trunk.params_mut();
        p.extend(self.head.params_mut());
        p
    }
}

/// Immutable offline replay: factored tuples plus the per-stay hidden tables
/// their dense states are assembled from.
#[derive(Debug)]
pub struct ReplayBuffer {
    k: usize,
    hidden_dim: usize,
    t_steps: usize,
    hidden: HashMap<u64, Matrix>,
    pub tuples: Vec<ExperienceTuple>,
}

/// One assembled minibatch of dense transitions.
#[derive(Debug)]
pub struct Batch {
    pub s: Matrix,
    pub a: Vec<usize>,
    pub r: Vec<f64>,
    pub s_next: Matrix,
    pub s_next_bits: Vec<u64>,
    pub terminal: Vec<bool>,
}

impl ReplayBuffer {
    pub fn new(
        k: usize,
        t_steps: usize,
        hidden: HashMap<u64, Matrix>,
        tuples: Vec<ExperienceTuple>,
    ) -> Result<Self> {
        let hidden_dim = hidden
            .values()
            .next()
            .map(Matrix::cols)
            .ok_or_else(|| Error::Data("replay buffer has no hidden tables".into()))?;
        for (id, h) in &hidden {
            if h.shape() != (t_steps, hidden_dim) {
                return Err(Error::Data(format!(
                    "stay {id}: hidden table {:?}, expected ({t_steps}, {hidden_dim})",
                    h.shape()
                )));
            }
        }
        for tu in &tuples {
            if !hidden.contains_key(&tu.stay_id) {
                return Err(Error::Data(format!("tuple references unknown stay {}", tu.stay_id)));
            }
            if tu.t >= t_steps || tu.s_next_t > t_steps || tu.a > k {
                return Err(Error::Data(format!(
                    "stay {} t {}: tuple indices out of range",
                    tu.stay_id, tu.t
                )));
            }
            if k < 64 && (tu.s_bits >> k != 0 || tu.s_next_bits >> k != 0) {
                return Err(Error::Data(format!(
                    "stay {} t {}: history bits beyond k={k}",
                    tu.stay_id, tu.t
                )));
            }
        }
        if tuples.is_empty() {
            return Err(Error::Data("replay buffer has no tuples".into()));
        }
        Ok(ReplayBuffer { k, hidden_dim, t_steps, hidden, tuples })
    }

    pub fn from_buffer(buf: ExperienceBuffer) -> Result<Self> {
        ReplayBuffer::new(buf.meta.k, buf.meta.t_steps, buf.hidden, buf.tuples)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn state_dim(&self) -> usize {
        self.hidden_dim + self.k
    }

    pub fn n_actions(&self) -> usize {
        self.k + 1
    }

    pub fn len(&self) -> usize {
        self.tuples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tuples.is_empty()
    }

    /// Writes [h(stay, t) | bits] into one row; t == T yields a zero h block
    /// (the successor of a terminal time-passing tuple, never used by TD).
    fn write_state(&self, stay_id: u64, t: usize, bits: u64, out: &mut Matrix, row: usize) {
        if t < self.t_steps {
            let h = &self.hidden[&stay_id];
            for j in 0..self.hidden_dim {
                out.set(row, j, h.get(t, j));
            }
        } else {
            for j in 0..self.hidden_dim {
                out.set(row, j, 0.0);
            }
        }
        for i in 0..self.k {
            out.set(row, self.hidden_dim + i, f64::from(u8::from(bits & (1u64 << i) != 0)));
        }
    }

    pub fn assemble(&self, idx: &[usize]) -> Result<Batch> {
        let b = idx.len();
        let mut s = Matrix::zeros(b, self.state_dim());
        let mut s_next = Matrix::zeros(b, self.state_dim());
        let mut a = Vec::with_capacity(b);
        let mut r = Vec::with_capacity(b);
        let mut bits = Vec::with_capacity(b);
        let mut terminal = Vec::with_capacity(b);
        for (row, &i) in idx.iter().enumerate() {
            let tu = self
                .tuples
                .get(i)
                .ok_or_else(|| Error::Data(format!("tuple index {i} out of range")))?;
            self.write_state(tu.stay_id, tu.t, tu.s_bits, &mut s, row);
            self.write_state(tu.stay_id, tu.s_next_t, tu.s_next_bits, &mut s_next, row);
            a.push(tu.a);
            r.push(tu.r);
            bits.push(tu.s_next_bits);
            terminal.push(tu.terminal);
        }
        Ok(Batch { s, a, r, s_next, s_next_bits: bits, terminal })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetSync {
    Hard { period: usize },
    Soft { tau: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub gamma: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub target_sync: TargetSync,
    pub cql_alpha: f64,
    pub iql_tau: f64,
    pub qnet_hidden: usize,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 3e-4,
            gamma: 0.99,
            batch_size: 256,
            steps: 2000,
            target_sync: TargetSync::Hard { period: 1000 },
            cql_alpha: 1.0,
            iql_tau: 0.7,
            qnet_hidden: 256,
            clip_norm: 5.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Per-algorithm target-update convention: DDQN hard-copies every 1000
    /// steps; CQL and IQL soft-update with τ = 0.005; BC has no target net.
    pub fn default_for(algo: Algo) -> Self {
        let mut cfg = TrainConfig::default();
        cfg.target_sync = match algo {
            Algo::Ddqn | Algo::Bc => TargetSync::Hard { period: 1000 },
            Algo::Cql | Algo::Iql => TargetSync::Soft { tau: 0.005 },
        };
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        // Zero is admitted as the degenerate bandit case (no bootstrapping).
        if !(self.gamma >= 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config("gamma must lie in [0,1]".into()));
        }
        if !(self.iql_tau > 0.5 && self.iql_tau < 1.0) {
            return Err(Error::Config("iql_tau must lie in (0.5,1)".into()));
        }
        if self.lr <= 0.0 || self.batch_size == 0 || self.steps == 0 || self.qnet_hidden == 0 {
            return Err(Error::Config("lr, batch_size, steps, qnet_hidden must be positive".into()));
        }
        if self.cql_alpha < 0.0 {
            return Err(Error::Config("cql_alpha must be nonnegative".into()));
        }
        match self.target_sync {
            TargetSync::Hard { period } if period == 0 => {
                Err(Error::Config("hard sync period must be positive".into()))
            }
            TargetSync::Soft { tau } if !(tau > 0.0 && tau <= 1.0) => {
                Err(Error::Config("soft sync tau must lie in (0,1]".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Max over admissible successor actions: tests whose bit is unset, plus Ω.
fn masked_max(q: &Matrix, row: usize, bits: u64, k: usize) -> f64 {
    let mut best = q.get(row, k);
    for a in 0..k {
        if bits & (1u64 << a) == 0 {
            best = best.max(q.get(row, a));
        }
    }
    best
}

/// r + γ·max_{a' admissible in s'} Q_target(s', a'); terminal tuples return r.
pub fn td_target(
    buf: &ReplayBuffer,
    tuple: &ExperienceTuple,
    target: &DuelingQNet,
    gamma: f64,
) -> Result<f64> {
    if tuple.terminal {
        return Ok(tuple.r);
    }
    let mut s_next = Matrix::zeros(1, buf.state_dim());
    buf.write_state(tuple.stay_id, tuple.s_next_t, tuple.s_next_bits, &mut s_next, 0);
    let q = target.forward_infer(&s_next)?;
    Ok(tuple.r + gamma * masked_max(&q, 0, tuple.s_next_bits, buf.k()))
}

#[derive(Debug)]
pub struct TrainResult {
    pub net: DuelingQNet,
    pub losses: Vec<f64>,
}

#[derive(Debug)]
pub struct IqlResult {
    pub net: DuelingQNet,
    pub vnet: ValueNet,
    pub losses: Vec<f64>,
    pub v_losses: Vec<f64>,
}

fn train_rngs(seed: u64) -> (ChaCha8Rng, ChaCha8Rng) {
    let mut init = ChaCha8Rng::seed_from_u64(seed);
    init.set_stream(20);
    let mut sample = ChaCha8Rng::seed_from_u64(seed);
    sample.set_stream(21);
    (init, sample)
}

fn sample_idx(rng: &mut ChaCha8Rng, n: usize, batch: usize) -> Vec<usize> {
    (0..batch).map(|_| rng.random_range(0..n)).collect()
}

fn check_finite(loss: f64, step: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Train(format!("non-finite loss at step {step}")))
    }
}

fn sync_target(target: &mut DuelingQNet, net: &DuelingQNet, sync: TargetSync, step: usize) {
    match sync {
        TargetSync::Hard { period } => {
            if (step + 1) % period == 0 {
                target.copy_params_from(net);
            }
        }
        TargetSync::Soft { tau } => target.soft_update_from(net, tau),
    }
}

/// Shared TD trainer. `cql_alpha == 0` is plain (dueling) DQN; a nonzero α
/// adds the conservative penalty mean[logsumexp_a Q(s,a) − Q(s,a_logged)].
/// The penalty branch is skipped entirely at α = 0 so the DDQN reduction is
/// bit-identical.
fn train_q_core(buf: &ReplayBuffer, cfg: &TrainConfig, cql_alpha: f64) -> Result<TrainResult> {
    cfg.validate()?;
    let (mut init_rng, mut sample_rng) = train_rngs(cfg.seed);
    let mut net = DuelingQNet::new(buf.state_dim(), buf.n_actions(), cfg.qnet_hidden, &mut init_rng);
    let mut target = net.clone();
    let mut adam = Adam::new(cfg.lr);
    let mut losses = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let idx = sample_idx(&mut sample_rng, buf.len(), cfg.batch_size);
        let batch = buf.assemble(&idx)?;
        let b = idx.len() as f64;

        let q_next = target.forward_infer(&batch.s_next)?;
        let q = net.forward(&batch.s)?;
        let mut dq = Matrix::zeros(q.rows(), q.cols());
        let mut loss = 0.0;
        for i in 0..idx.len() {
            let y = if batch.terminal[i] {
                batch.r[i]
            } else {
                batch.r[i] + cfg.gamma * masked_max(&q_next, i, batch.s_next_bits[i], buf.k())
            };
            let diff = q.get(i, batch.a[i]) - y;
            loss += diff * diff;
            dq.set(i, batch.a[i], 2.0 * diff / b);
        }
        loss /= b;

        if cql_alpha != 0.0 {
            let probs = softmax(&q);
            let mut penalty = 0.0;
            for i in 0..idx.len() {
                penalty += logsumexp_row(q.row(i)) - q.get(i, batch.a[i]);
                for j in 0..q.cols() {
                    let mut g = cql_alpha / b * probs.get(i, j);
                    if j == batch.a[i] {
                        g -= cql_alpha / b;
                    }
                    dq.set(i, j, dq.get(i, j) + g);
                }
            }
            loss += cql_alpha * penalty / b;
        }
        check_finite(loss, step)?;
        losses.push(loss);

        net.backward(&dq)?;
        let mut params = net.params_mut();
        clip_global_norm(&mut params, cfg.clip_norm);
        adam.step(&mut params).map_err(Error::Kernel)?;
        sync_target(&mut target, &net, cfg.target_sync, step);
    }
    Ok(TrainResult { net, losses })
}

pub fn train_ddqn(buf: &ReplayBuffer, cfg: &TrainConfig) -> Result<TrainResult> {
    train_q_core(buf, cfg, 0.0)
}

pub fn train_cql(buf: &ReplayBuffer, cfg: &TrainConfig) -> Result<TrainResult> {
    train_q_core(buf, cfg, cfg.cql_alpha)
}

/// Multiclass cross-entropy on the logged action, over all tuple kinds, so
/// the cloned policy also learns when to emit Ω.
pub fn train_bc(buf: &ReplayBuffer, cfg: &TrainConfig) -> Result<TrainResult> {
    cfg.validate()?;
    let (mut init_rng, mut sample_rng) = train_rngs(cfg.seed);
    let mut net = DuelingQNet::new(buf.state_dim(), buf.n_actions(), cfg.qnet_hidden, &mut init_rng);
    let mut adam = Adam::new(cfg.lr);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let idx = sample_idx(&mut sample_rng, buf.len(), cfg.batch_size);
        let batch = buf.assemble(&idx)?;
        let logits = net.forward(&batch.s)?;
        let (loss, dlogits) = softmax_cross_entropy(&logits, &batch.a).map_err(Error::Kernel)?;
        check_finite(loss, step)?;
        losses.push(loss);
        net.backward(&dlogits)?;
        let mut params = net.params_mut();
        clip_global_norm(&mut params, cfg.clip_norm);
        adam.step(&mut params).map_err(Error::Kernel)?;
    }
    Ok(TrainResult { net, losses })
}

/// IQL: V fits the τ-expectile of Q_target(s, a_logged); Q regresses on
/// r + γ·V(s'); the Q target net soft-syncs.
pub fn train_iql(buf: &ReplayBuffer, cfg: &TrainConfig) -> Result<IqlResult> {
    cfg.validate()?;
    let (mut init_rng, mut sample_rng) = train_rngs(cfg.seed);
    let mut net = DuelingQNet::new(buf.state_dim(), buf.n_actions(), cfg.qnet_hidden, &mut init_rng);
    let mut target = net.clone();
    let mut vnet = ValueNet::new(buf.state_dim(), cfg.qnet_hidden, &mut init_rng);
    let mut adam_q = Adam::new(cfg.lr);
    let mut adam_v = Adam::new(cfg.lr);
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut v_losses = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let idx = sample_idx(&mut sample_rng, buf.len(), cfg.batch_size);
        let batch = buf.assemble(&idx)?;
        let b = idx.len() as f64;

        // Targets from the pre-update parameter snapshot.
        let q_t = target.forward_infer(&batch.s)?;
        let mut v_target = Matrix::zeros(idx.len(), 1);
        for i in 0..idx.len() {
            v_target.set(i, 0, q_t.get(i, batch.a[i]));
        }
        let v_next = vnet.forward_infer(&batch.s_next)?;

        let v_pred = vnet.forward(&batch.s)?;
        let (v_loss, dv) = expectile_loss(&v_pred, &v_target, cfg.iql_tau).map_err(Error::Kernel)?;
        check_finite(v_loss, step)?;
        v_losses.push(v_loss);
        vnet.backward(&dv)?;
        let mut vp = vnet.params_mut();
        clip_global_norm(&mut vp, cfg.clip_norm);
        adam_v.step(&mut vp).map_err(Error::Kernel)?;

        let q = net.forward(&batch.s)?;
        let mut dq = Matrix::zeros(q.rows(), q.cols());
        let mut loss = 0.0;
        for i in 0..idx.len() {
            let y = if batch.terminal[i] {
                batch.r[i]
            } else {
                batch.r[i] + cfg.gamma * v_next.get(i, 0)
            };
            let diff = q.get(i, batch.a[i]) - y;
            loss += diff * diff;
            dq.set(i, batch.a[i], 2.0 * diff / b);
        }
        loss /= b;
        check_finite(loss, step)?;
        losses.push(loss);
        net.backward(&dq)?;
        let mut params = net.params_mut();
        clip_global_norm(&mut params, cfg.clip_norm);
        adam_q.step(&mut params).map_err(Error::Kernel)?;
        sync_target(&mut target, &net, cfg.target_sync, step);
    }
    Ok(IqlResult { net, vnet, losses, v_losses })
}

/// Dispatches to the right trainer; the returned net is the policy for every
/// algorithm (IQL's value net is a training aid and is not persisted).
pub fn train(algo: Algo, buf: &ReplayBuffer, cfg: &TrainConfig) -> Result<TrainResult> {
    match algo {
        Algo::Bc => train_bc(buf, cfg),
        Algo::Ddqn => train_ddqn(buf, cfg),
        Algo::Cql => train_cql(buf, cfg),
        Algo::Iql => {
            let r = train_iql(buf, cfg)?;
            Ok(TrainResult { net: r.net, losses: r.losses })
        }
    }
}
