//! The LSTM mortality-trajectory model f(X). Builds per-stay inputs by
//! duplicating the time-invariant block onto every row, trains a binary
//! classifier on terminal labels at uniformly sampled prefix lengths, and
//! exposes per-interval hidden states h_t and probabilities p_t = f_p(X_t)
//! for downstream experience generation and evaluation.

use crate::cohort::Episode;
use crate::{Error, Result};
use numkernel::{checkpoint, clip_global_norm, sigmoid, Adam, Affine, KernelError, LstmCell, Matrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Per-stay model input: row t = concat(X_tv[t], X_inv).
#[derive(Debug, Clone)]
pub struct StayInput {
    pub x: Matrix, // T×(m+u)
}

pub fn build_input(ep: &Episode) -> StayInput {
    let (t_steps, m) = ep.x_tv.shape();
    let u = ep.x_inv.len();
    let mut x = Matrix::zeros(t_steps, m + u);
    for t in 0..t_steps {
        for i in 0..m {
            x.set(t, i, ep.x_tv.get(t, i));
        }
        for j in 0..u {
            x.set(t, m + j, ep.x_inv[j]);
        }
    }
    StayInput { x }
}

/// Recurrent state carried across intervals; rows are batch elements.
#[derive(Debug, Clone)]
pub struct SeqState {
    pub h: Matrix,
    pub c: Matrix,
}

#[derive(Debug)]
pub struct TrajectoryModel {
    pub lstm: LstmCell,
    pub head: Affine,
    pub m: usize,
    pub u: usize,
}

impl TrajectoryModel {
    pub fn new(m: usize, u: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        TrajectoryModel {
            lstm: LstmCell::new(m + u, hidden, rng),
            head: Affine::new(hidden, 1, rng),
            m,
            u,
        }
    }

    pub fn hidden(&self) -> usize {
        self.lstm.hidden()
    }

    pub fn n_in(&self) -> usize {
        self.m + self.u
    }

    pub fn init_state(&self, batch: usize) -> SeqState {
        SeqState {
            h: Matrix::zeros(batch, self.hidden()),
            c: Matrix::zeros(batch, self.hidden()),
        }
    }

    /// Advances one interval for every batch row; read-only on the model.
    pub fn advance(&self, state: &SeqState, rows: &Matrix) -> Result<SeqState> {
        let (h, c) = self.lstm.step_infer(rows, &state.h, &state.c)?;
        Ok(SeqState { h, c })
    }

    /// Mortality probability per batch row of the given state.
    pub fn prob_of(&self, state: &SeqState) -> Result<Vec<f64>> {
        let logits = self.head.forward_infer(&state.h)?;
        Ok((0..logits.rows()).map(|r| sigmoid(logits.get(r, 0))).collect())
    }

    /// All per-interval hidden states (rows of the returned T×H matrix) and
    /// probabilities p_t for one stay.
    pub fn hidden_states(&self, input: &StayInput) -> Result<(Matrix, Vec<f64>)> {
        let (t_steps, n) = input.x.shape();
        if n != self.n_in() {
            return Err(Error::Kernel(KernelError::Dimension {
                context: "trajectory input".to_string(),
                expected: (t_steps, self.n_in()),
                got: input.x.shape(),
            }));
        }
        let mut state = self.init_state(1);
        let mut hs = Matrix::zeros(t_steps, self.hidden());
        let mut ps = Vec::with_capacity(t_steps);
        for t in 0..t_steps {
            state = self.advance(&state, &input.x.row_slice(t, t + 1))?;
            for j in 0..self.hidden() {
                hs.set(t, j, state.h.get(0, j));
            }
            ps.push(self.prob_of(&state)?[0]);
        }
        Ok((hs, ps))
    }

    /// Full-stay mortality probability p_T.
    pub fn predict(&self, input: &StayInput) -> Result<f64> {
        let t_steps = input.x.rows();
        let mut state = self.init_state(1);
        for t in 0..t_steps {
            state = self.advance(&state, &input.x.row_slice(t, t + 1))?;
        }
        Ok(self.prob_of(&state)?[0])
    }

    /// f_p of the prefix X_1..X_t with cell (t, signal_index) replaced by
    /// `value`. Only time-variant cells may be substituted.
    pub fn predict_with_substitution(
        &self,
        input: &StayInput,
        t: usize,
        signal_index: usize,
        value: f64,
    ) -> Result<f64> {
        let t_steps = input.x.rows();
        if t >= t_steps || signal_index >= self.m {
            return Err(Error::Kernel(KernelError::Dimension {
                context: "substitution index".to_string(),
                expected: (t_steps, self.m),
                got: (t, signal_index),
            }));
        }
        let mut state = self.init_state(1);
        for s in 0..t {
            state = self.advance(&state, &input.x.row_slice(s, s + 1))?;
        }
        let mut row = input.x.row_slice(t, t + 1);
        row.set(0, signal_index, value);
        state = self.advance(&state, &row)?;
        Ok(self.prob_of(&state)?[0])
    }

    /// Full-stay probabilities for many episodes, batched. All episodes must
    /// share one T.
    pub fn predict_batch(&self, eps: &[Episode], batch: usize) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(eps.len());
        for chunk in eps.chunks(batch.max(1)) {
            let t_steps = chunk[0].t_steps();
            if chunk.iter().any(|e| e.t_steps() != t_steps) {
                return Err(Error::Data("episodes in a batch must share T".into()));
            }
            let mut state = self.init_state(chunk.len());
            let mut rows = Matrix::zeros(chunk.len(), self.n_in());
            for t in 0..t_steps {
                for (b, ep) in chunk.iter().enumerate() {
                    for i in 0..self.m {
                        rows.set(b, i, ep.x_tv.get(t, i));
                    }
                    for j in 0..self.u {
                        rows.set(b, self.m + j, ep.x_inv[j]);
                    }
                }
                state = self.advance(&state, &rows)?;
            }
            out.extend(self.prob_of(&state)?);
        }
        Ok(out)
    }

    fn param_matrices(&self) -> [(&'static str, &Matrix); 5] {
        [
            ("lstm/wx", &self.lstm.wx.value),
            ("lstm/wh", &self.lstm.wh.value),
            ("lstm/b", &self.lstm.b.value),
            ("head/w", &self.head.w.value),
            ("head/b", &self.head.b.value),
        ]
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let dims = Matrix::from_vec(
            1,
            3,
            vec![self.m as f64, self.u as f64, self.hidden() as f64],
        )
        .map_err(Error::Kernel)?;
        let mut entries = vec![("dims", &dims)];
        entries.extend(self.param_matrices());
        checkpoint::save(path, &entries).map_err(Error::Kernel)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut entries = checkpoint::load(path).map_err(Error::Kernel)?;
        let dims = checkpoint::take_entry(&mut entries, "dims").map_err(Error::Kernel)?;
        if dims.shape() != (1, 3) {
            return Err(Error::Data("trajectory checkpoint has malformed dims".into()));
        }
        let (m, u, hidden) = (
            dims.get(0, 0) as usize,
            dims.get(0, 1) as usize,
            dims.get(0, 2) as usize,
        );
        let wx = checkpoint::take_entry(&mut entries, "lstm/wx").map_err(Error::Kernel)?;
        let wh = checkpoint::take_entry(&mut entries, "lstm/wh").map_err(Error::Kernel)?;
        let b = checkpoint::take_entry(&mut entries, "lstm/b").map_err(Error::Kernel)?;
        let hw = checkpoint::take_entry(&mut entries, "head/w").map_err(Error::Kernel)?;
        let hb = checkpoint::take_entry(&mut entries, "head/b").map_err(Error::Kernel)?;
        if wx.shape() != (m + u, 4 * hidden) || hw.shape() != (hidden, 1) {
            return Err(Error::Data("trajectory checkpoint dims disagree with params".into()));
        }
        let model = TrajectoryModel {
            lstm: LstmCell::from_params(wx, wh, b).map_err(Error::Kernel)?,
            head: Affine::from_params(hw, hb).map_err(Error::Kernel)?,
            m,
            u,
        };
        Ok(model)
    }

    fn snapshot(&self) -> Vec<Matrix> {
        self.param_matrices().iter().map(|(_, m)| (*m).clone()).collect()
    }

    fn restore(&mut self, snap: &[Matrix]) {
        self.lstm.wx.value = snap[0].clone();
        self.lstm.wh.value = snap[1].clone();
        self.lstm.b.value = snap[2].clone();
        self.head.w.value = snap[3].clone();
        self.head.b.value = snap[4].clone();
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrajectoryConfig {
    pub hidden: usize,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub steps_per_epoch: usize,
    pub patience: usize,
    pub clip_norm: f64,
    /// Validation episodes used for the early-stopping AUC (0 = all).
    pub val_subset: usize,
    pub seed: u64,
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        TrajectoryConfig {
            hidden: 256,
            lr: 1e-3,
            epochs: 30,
            batch_size: 48,
            steps_per_epoch: 60,
            patience: 5,
            clip_norm: 5.0,
            val_subset: 1024,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EpochMetric {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_auc: f64,
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Mann–Whitney AUC with average ranks for ties; needs both classes present.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(Error::Data("auc needs equal-length nonempty inputs".into()));
    }
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Data("auc undefined for single-class labels".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1..=j+1 share the average rank.
        let avg_rank = (i + j + 2) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] == 1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let u_stat = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u_stat / (n_pos as f64 * n_neg as f64))
}

fn check_not_degenerate(split: &[Episode], name: &str) -> Result<()> {
    let pos = split.iter().filter(|e| e.y == 1).count();
    if split.is_empty() || pos == 0 || pos == split.len() {
        return Err(Error::Train(format!(
            "{name} split is degenerate (single class or empty)"
        )));
    }
    Ok(())
}

/// Trains the trajectory model: cross-entropy on the terminal label evaluated
/// at a prefix length sampled uniformly per batch element, early-stopped on
/// validation AUC with the given patience, returning the best checkpoint.
pub fn train_traj(
    train: &[Episode],
    val: &[Episode],
    cfg: &TrajectoryConfig,
) -> Result<(TrajectoryModel, Vec<EpochMetric>)> {
    check_not_degenerate(train, "train")?;
    check_not_degenerate(val, "val")?;
    let t_steps = train[0].t_steps();
    let m = train[0].m_signals();
    let u = train[0].x_inv.len();
    if train.iter().chain(val.iter()).any(|e| {
        e.t_steps() != t_steps || e.m_signals() != m || e.x_inv.len() != u
    }) {
        return Err(Error::Data("episodes disagree on T, m, or u".into()));
    }

    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    init_rng.set_stream(10);
    let mut batch_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    batch_rng.set_stream(11);

    let mut model = TrajectoryModel::new(m, u, cfg.hidden, &mut init_rng);
    let mut adam = Adam::new(cfg.lr);
    let hidden = cfg.hidden;
    let b_size = cfg.batch_size.max(1);

    let n_val = if cfg.val_subset == 0 { val.len() } else { cfg.val_subset.min(val.len()) };
    let val_eval = &val[..n_val];
    let val_labels: Vec<u8> = val_eval.iter().map(|e| e.y).collect();
    if val_labels.iter().all(|&y| y == 0) || val_labels.iter().all(|&y| y == 1) {
        return Err(Error::Train("validation subset is degenerate".into()));
    }

    let mut metrics = Vec::new();
    let mut best_auc = f64::NEG_INFINITY;
    let mut best_epoch = 0usize;
    let mut best_snap = model.snapshot();

    for epoch in 0..cfg.epochs {
        let mut loss_sum = 0.0;
        for _ in 0..cfg.steps_per_epoch {
            let idx: Vec<usize> =
                (0..b_size).map(|_| batch_rng.random_range(0..train.len())).collect();
            let prefix: Vec<usize> =
                (0..b_size).map(|_| batch_rng.random_range(1..=t_steps)).collect();
            let max_t = *prefix.iter().max().expect("nonempty batch");

            // Forward max_t intervals; rows past an element's prefix are zero
            // padding and receive no gradient (no loss is injected there).
            model.lstm.begin_sequence();
            let mut h = Matrix::zeros(b_size, hidden);
            let mut c = Matrix::zeros(b_size, hidden);
            let mut hs: Vec<Matrix> = Vec::with_capacity(max_t);
            for s in 0..max_t {
                let mut rows = Matrix::zeros(b_size, m + u);
                for b in 0..b_size {
                    if s < prefix[b] {
                        let ep = &train[idx[b]];
                        for i in 0..m {
                            rows.set(b, i, ep.x_tv.get(s, i));
                        }
                        for j in 0..u {
                            rows.set(b, m + j, ep.x_inv[j]);
                        }
                    }
                }
                let (nh, nc) = model.lstm.step(&rows, &h, &c).map_err(Error::Kernel)?;
                h = nh;
                c = nc;
                hs.push(h.clone());
            }

            // Gather each element's hidden state at its own prefix end.
            let mut h_sel = Matrix::zeros(b_size, hidden);
            for b in 0..b_size {
                let src = &hs[prefix[b] - 1];
                for j in 0..hidden {
                    h_sel.set(b, j, src.get(b, j));
                }
            }
            let logits = model.head.forward(&h_sel).map_err(Error::Kernel)?;

            let mut loss = 0.0;
            let mut dlogit = Matrix::zeros(b_size, 1);
            for b in 0..b_size {
                let z = logits.get(b, 0);
                let y = f64::from(train[idx[b]].y);
                loss += softplus(z) - y * z;
                dlogit.set(b, 0, (sigmoid(z) - y) / b_size as f64);
            }
            loss /= b_size as f64;
            if !loss.is_finite() {
                return Err(Error::Train(format!("non-finite loss at epoch {epoch}")));
            }
            loss_sum += loss;

            let dh_sel = model.head.backward(&dlogit).map_err(Error::Kernel)?;
            let mut inject: Vec<Option<Matrix>> = (0..max_t).map(|_| None).collect();
            for b in 0..b_size {
                let s = prefix[b] - 1;
                let slot = inject[s].get_or_insert_with(|| Matrix::zeros(b_size, hidden));
                for j in 0..hidden {
                    slot.set(b, j, dh_sel.get(b, j));
                }
            }
            model.lstm.backward_through_time(&inject).map_err(Error::Kernel)?;

            let mut params = model.lstm.params_mut();
            params.extend(model.head.params_mut());
            clip_global_norm(&mut params, cfg.clip_norm);
            adam.step(&mut params).map_err(Error::Kernel)?;
        }

        let scores = model.predict_batch(val_eval, 256)?;
        let val_auc = auc(&scores, &val_labels)?;
        metrics.push(EpochMetric {
            epoch,
            train_loss: loss_sum / cfg.steps_per_epoch.max(1) as f64,
            val_auc,
        });
        if val_auc > best_auc {
            best_auc = val_auc;
            best_epoch = epoch;
            best_snap = model.snapshot();
        } else if epoch - best_epoch >= cfg.patience {
            break;
        }
    }
    model.restore(&best_snap);
    model.lstm.begin_sequence();
    model.head.clear_cache();
    Ok((model, metrics))
}

/// Appends per-epoch metrics as CSV, writing a header only for a new file.
pub fn append_metrics_csv(path: &Path, metrics: &[EpochMetric]) -> Result<()> {
    use std::io::Write;
    let new_file = !path.exists();
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    if new_file {
        writeln!(f, "epoch,train_loss,val_auc")?;
    }
    for m in metrics {
        writeln!(f, "{},{},{}", m.epoch, m.train_loss, m.val_auc)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{build_dataset, CohortConfig};

    fn episode_from(x_tv: Matrix, x_inv: Vec<f64>, y: u8) -> Episode {
        let n = x_tv.rows() * x_tv.cols();
        Episode { stay_id: 0, x_inv, x_tv, observed_mask: vec![1; n], y }
    }

    fn zero_model(m: usize, u: usize, hidden: usize) -> TrajectoryModel {
        TrajectoryModel {
            lstm: LstmCell::from_params(
                Matrix::zeros(m + u, 4 * hidden),
                Matrix::zeros(hidden, 4 * hidden),
                Matrix::zeros(1, 4 * hidden),
            )
            .unwrap(),
            head: Affine::from_params(Matrix::zeros(hidden, 1), Matrix::zeros(1, 1)).unwrap(),
            m,
            u,
        }
    }

    fn random_model(m: usize, u: usize, hidden: usize, seed: u64) -> TrajectoryModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        TrajectoryModel::new(m, u, hidden, &mut rng)
    }

    fn random_episode(t_steps: usize, m: usize, u: usize, seed: u64, y: u8) -> Episode {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x_tv = Matrix::zeros(t_steps, m);
        for t in 0..t_steps {
            for i in 0..m {
                x_tv.set(t, i, rng.random_range(-2.0..2.0));
            }
        }
        let x_inv = (0..u).map(|_| rng.random_range(-1.0..1.0)).collect();
        episode_from(x_tv, x_inv, y)
    }

    #[test]
    fn build_input_duplicates_statics_and_round_trips() {
        let ep = random_episode(3, 2, 2, 5, 0);
        let input = build_input(&ep);
        assert_eq!(input.x.shape(), (3, 4));
        for t in 0..3 {
            assert_eq!(input.x.get(t, 2), ep.x_inv[0]);
            assert_eq!(input.x.get(t, 3), ep.x_inv[1]);
            for i in 0..2 {
                assert_eq!(input.x.get(t, i).to_bits(), ep.x_tv.get(t, i).to_bits());
            }
        }
    }

    #[test]
    fn build_input_default_shape_is_23x76() {
        let ep = episode_from(Matrix::zeros(23, 38), vec![0.0; 38], 0);
        assert_eq!(build_input(&ep).x.shape(), (23, 76));
    }

    #[test]
    fn zero_weight_model_gives_half_probability_and_zero_hidden() {
        let model = zero_model(2, 1, 4);
        let ep = random_episode(5, 2, 1, 7, 1);
        let (hs, ps) = model.hidden_states(&build_input(&ep)).unwrap();
        assert!(hs.data().iter().all(|&v| v == 0.0));
        assert!(ps.iter().all(|&p| p == 0.5));
        assert_eq!(
            model.predict_with_substitution(&build_input(&ep), 2, 0, 9.0).unwrap(),
            0.5
        );
    }

    #[test]
    fn hidden_states_prefix_property() {
        let model = random_model(3, 2, 8, 42);
        let ep = random_episode(6, 3, 2, 9, 0);
        let full = build_input(&ep);
        let (hs_full, ps_full) = model.hidden_states(&full).unwrap();
        for t in 1..=6 {
            let mut trunc = Matrix::zeros(t, 5);
            for s in 0..t {
                for j in 0..5 {
                    trunc.set(s, j, full.x.get(s, j));
                }
            }
            let (hs_t, ps_t) = model.hidden_states(&StayInput { x: trunc }).unwrap();
            for j in 0..8 {
                assert_eq!(hs_t.get(t - 1, j).to_bits(), hs_full.get(t - 1, j).to_bits());
            }
            assert_eq!(ps_t[t - 1].to_bits(), ps_full[t - 1].to_bits());
        }
    }

    #[test]
    fn predict_agrees_with_last_hidden_state_probability() {
        let model = random_model(3, 2, 8, 1);
        let input = build_input(&random_episode(6, 3, 2, 2, 0));
        let (_, ps) = model.hidden_states(&input).unwrap();
        let p = model.predict(&input).unwrap();
        assert!((p - ps[5]).abs() < 1e-12);
    }

    #[test]
    fn substitution_with_existing_value_changes_nothing() {
        let model = random_model(3, 2, 8, 3);
        let input = build_input(&random_episode(6, 3, 2, 4, 0));
        let base = model.predict_with_substitution(&input, 4, 1, input.x.get(4, 1)).unwrap();
        let (_, ps) = model.hidden_states(&input).unwrap();
        assert_eq!(base.to_bits(), ps[4].to_bits());
    }

    #[test]
    fn substitution_out_of_range_is_rejected() {
        let model = random_model(2, 0, 4, 5);
        let input = build_input(&random_episode(3, 2, 0, 6, 0));
        assert!(model.predict_with_substitution(&input, 3, 0, 0.0).is_err());
        assert!(model.predict_with_substitution(&input, 1, 2, 0.0).is_err());
    }

    #[test]
    fn substitution_matches_hand_computed_forward_pass() {
        // 2 signals, no statics, H=1; every number below is written out so the
        // expected probability is an independent scalar computation.
        let wx = Matrix::from_vec(2, 4, vec![0.5, 0.1, -0.3, 0.2, -0.4, 0.3, 0.7, -0.1]).unwrap();
        let wh = Matrix::from_vec(1, 4, vec![0.05, -0.02, 0.1, 0.03]).unwrap();
        let b = Matrix::from_vec(1, 4, vec![0.0, 1.0, 0.0, 0.0]).unwrap();
        let head_w = Matrix::from_vec(1, 1, vec![1.2]).unwrap();
        let head_b = Matrix::from_vec(1, 1, vec![-0.4]).unwrap();
        let model = TrajectoryModel {
            lstm: LstmCell::from_params(wx, wh, b).unwrap(),
            head: Affine::from_params(head_w, head_b).unwrap(),
            m: 2,
            u: 0,
        };
        let x_tv = Matrix::from_vec(2, 2, vec![0.3, -0.6, 0.9, 0.2]).unwrap();
        let input = build_input(&episode_from(x_tv, vec![], 0));
        let got = model.predict_with_substitution(&input, 1, 0, 0.5).unwrap();

        let sg = |x: f64| 1.0 / (1.0 + (-x).exp());
        // Step 1: x = [0.3, -0.6], h_prev = c_prev = 0.
        let pre = [
            0.3 * 0.5 + (-0.6) * (-0.4),
            0.3 * 0.1 + (-0.6) * 0.3 + 1.0,
            0.3 * (-0.3) + (-0.6) * 0.7,
            0.3 * 0.2 + (-0.6) * (-0.1),
        ];
        let c1 = sg(pre[0]) * pre[2].tanh();
        let h1 = sg(pre[3]) * c1.tanh();
        // Step 2: substituted row [0.5, 0.2].
        let pre2 = [
            0.5 * 0.5 + 0.2 * (-0.4) + h1 * 0.05,
            0.5 * 0.1 + 0.2 * 0.3 + h1 * (-0.02) + 1.0,
            0.5 * (-0.3) + 0.2 * 0.7 + h1 * 0.1,
            0.5 * 0.2 + 0.2 * (-0.1) + h1 * 0.03,
        ];
        let c2 = sg(pre2[1]) * c1 + sg(pre2[0]) * pre2[2].tanh();
        let h2 = sg(pre2[3]) * c2.tanh();
        let want = sg(1.2 * h2 - 0.4);
        assert!((got - want).abs() < 1e-12, "got {got}, want {want}");
    }

    #[test]
    fn predict_batch_matches_single_stay_predictions() {
        let model = random_model(3, 2, 8, 11);
        let eps: Vec<Episode> =
            (0..5).map(|k| random_episode(6, 3, 2, 20 + k, (k % 2) as u8)).collect();
        let batched = model.predict_batch(&eps, 2).unwrap();
        for (ep, &pb) in eps.iter().zip(batched.iter()) {
            let single = model.predict(&build_input(ep)).unwrap();
            assert!((single - pb).abs() < 1e-12);
        }
    }

    #[test]
    fn auc_hand_cases() {
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(auc(&[0.9, 0.8, 0.2, 0.1], &[0, 0, 1, 1]).unwrap(), 0.0);
        assert_eq!(auc(&[0.5, 0.5, 0.5, 0.5], &[0, 1, 0, 1]).unwrap(), 0.5);
        // Concordant pairs: (0.35,0.1)✓ (0.35,0.4)✗ (0.8,0.1)✓ (0.8,0.4)✓ → 3/4.
        assert_eq!(auc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap(), 0.75);
        assert!(auc(&[0.1, 0.2], &[1, 1]).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let model = random_model(3, 2, 8, 13);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("traj.ckpt");
        model.save(&path).unwrap();
        let loaded = TrajectoryModel::load(&path).unwrap();
        assert_eq!(loaded.m, 3);
        assert_eq!(loaded.u, 2);
        assert_eq!(loaded.hidden(), 8);
        let ep = random_episode(6, 3, 2, 14, 0);
        let a = model.predict(&build_input(&ep)).unwrap();
        let b = loaded.predict(&build_input(&ep)).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    fn tiny_cfg(seed: u64) -> TrajectoryConfig {
        TrajectoryConfig {
            hidden: 8,
            lr: 1e-2,
            epochs: 3,
            batch_size: 8,
            steps_per_epoch: 6,
            patience: 5,
            clip_norm: 5.0,
            val_subset: 0,
            seed,
        }
    }

    #[test]
    fn training_is_deterministic_and_learns_on_small_cohort() {
        let ds = build_dataset(&CohortConfig { n_stays: 80, seed: 21, ..CohortConfig::default() })
            .unwrap();
        let (m1, met1) = train_traj(&ds.train, &ds.val, &tiny_cfg(2)).unwrap();
        let (m2, met2) = train_traj(&ds.train, &ds.val, &tiny_cfg(2)).unwrap();
        assert_eq!(met1.len(), met2.len());
        for (a, b) in met1.iter().zip(met2.iter()) {
            assert_eq!(a.train_loss.to_bits(), b.train_loss.to_bits());
            assert_eq!(a.val_auc.to_bits(), b.val_auc.to_bits());
        }
        let ep = &ds.test[0];
        let p1 = m1.predict(&build_input(ep)).unwrap();
        let p2 = m2.predict(&build_input(ep)).unwrap();
        assert_eq!(p1.to_bits(), p2.to_bits());
    }

    #[test]
    fn training_rejects_degenerate_split() {
        let eps: Vec<Episode> = (0..10).map(|k| random_episode(4, 2, 1, k, 0)).collect();
        let err = train_traj(&eps, &eps, &tiny_cfg(0)).unwrap_err();
        assert!(matches!(err, Error::Train(_)));
    }

    #[test]
    fn label_noise_gives_chance_level_auc() {
        // Labels are independent of the inputs, so validation AUC must sit
        // near 0.5 no matter what the model does.
        let mut eps = Vec::new();
        for k in 0..400u64 {
            eps.push(random_episode(4, 2, 1, 1000 + k, (k % 2) as u8));
        }
        let (train, val) = eps.split_at(200);
        let (_, metrics) = train_traj(train, val, &tiny_cfg(4)).unwrap();
        let last = metrics.last().unwrap().val_auc;
        assert!((0.45..=0.55).contains(&last), "auc {last}");
    }

    #[test]
    fn metrics_csv_appends_with_single_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        let metrics = vec![EpochMetric { epoch: 0, train_loss: 0.7, val_auc: 0.5 }];
        append_metrics_csv(&path, &metrics).unwrap();
        append_metrics_csv(&path, &metrics).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.starts_with("epoch,train_loss,val_auc\n"));
    }
}
