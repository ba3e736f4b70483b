//! The MDP encoding: states melding the trajectory model's hidden vector with
//! a measurement-history bit block, factorized actions with the stop symbol Ω,
//! the Δp-based reward, and per-step/time-passing experience generation. Each
//! time step emits one time-passing tuple plus one per-step tuple per logged
//! test, revealed in shuffled order so consecutive states differ by one bit.

use crate::cohort::Episode;
use crate::trajectory::{build_input, TrajectoryModel};
use crate::{Error, Result};
use numkernel::Matrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::{BufRead, BufWriter, Write as IoWrite};
use std::path::Path;

/// Actions 0..k−1 order lab tests; action k is the stop symbol Ω.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionSpace {
    pub k: usize,
}

impl ActionSpace {
    /// History bits live in a u64, so at most 63 tests are addressable.
    pub fn new(k: usize) -> Result<Self> {
        if k == 0 || k > 63 {
            return Err(Error::Config(format!("action space k={k} outside 1..=63")));
        }
        Ok(ActionSpace { k })
    }

    pub fn omega(&self) -> usize {
        self.k
    }

    pub fn n_actions(&self) -> usize {
        self.k + 1
    }

    pub fn is_omega(&self, a: usize) -> bool {
        a == self.k
    }
}

pub fn bits_from_set(tests: &[usize]) -> u64 {
    tests.iter().fold(0u64, |acc, &i| acc | (1u64 << i))
}

pub fn set_from_bits(bits: u64) -> Vec<usize> {
    (0..64).filter(|&i| bits & (1u64 << i) != 0).collect()
}

/// State vector [h | multihot(ordered)]; dense dimension hidden + k.
#[derive(Debug, Clone)]
pub struct StateVec {
    pub h: Vec<f64>,
    pub bits: u64,
    pub k: usize,
}

impl StateVec {
    pub fn dim(&self) -> usize {
        self.h.len() + self.k
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dim());
        out.extend_from_slice(&self.h);
        for i in 0..self.k {
            out.push(f64::from(u8::from(self.bits & (1u64 << i) != 0)));
        }
        out
    }
}

pub fn build_state(h: &[f64], ordered: &[usize], aspace: ActionSpace) -> Result<StateVec> {
    for &i in ordered {
        if i >= aspace.k {
            return Err(Error::Config(format!(
                "ordered set contains action {i}, which is not a test (k={})",
                aspace.k
            )));
        }
    }
    Ok(StateVec { h: h.to_vec(), bits: bits_from_set(ordered), k: aspace.k })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TupleKind {
    PerStep,
    TimePassing,
}

/// One transition, factored against the stay's hidden-state table: the dense
/// state is [hidden[t] | bits] and the successor is [hidden[s_next_t] | bits],
/// with zeros for the hidden block when s_next_t == T (terminal successor).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExperienceTuple {
    pub stay_id: u64,
    pub t: usize,
    pub s_bits: u64,
    pub a: usize,
    pub r: f64,
    pub s_next_bits: u64,
    pub s_next_t: usize,
    pub kind: TupleKind,
    pub terminal: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RewardParams {
    pub lambda: f64,
    pub gamma: f64,
    /// Whether the time-passing reward is sign-flipped for survivors like the
    /// per-step Δp. Off by default: the literal generation rule carries no
    /// flip.
    pub sign_flip_time_passing: bool,
}

impl RewardParams {
    pub fn new(lambda: f64, gamma: f64) -> Result<Self> {
        let p = RewardParams { lambda, gamma, sign_flip_time_passing: false };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 || !self.lambda.is_finite() {
            return Err(Error::Config("lambda must be nonnegative".into()));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config("gamma must lie in (0,1]".into()));
        }
        Ok(())
    }
}

/// Signed information gain: the probability change due to a measurement,
/// flipped for survivors so that informative measurements are rewarded for
/// both outcomes.
pub fn delta_p(p_before: f64, p_after: f64, y: u8) -> f64 {
    let raw = p_after - p_before;
    if y == 1 {
        raw
    } else {
        -raw
    }
}

/// r = Δp − λ·c(a) with unit cost for tests and zero cost for Ω.
pub fn reward(dp: f64, a: usize, aspace: ActionSpace, params: &RewardParams) -> f64 {
    let cost = if aspace.is_omega(a) { 0.0 } else { 1.0 };
    dp - params.lambda * cost
}

/// Per-t sets of logged test orders: observed cells restricted to the
/// orderable range 0..k.
pub fn logged_orders(ep: &Episode, aspace: ActionSpace) -> Vec<Vec<usize>> {
    let m = ep.m_signals();
    (0..ep.t_steps())
        .map(|t| (0..m.min(aspace.k)).filter(|&i| ep.observed(t, i)).collect())
        .collect()
}

/// The λ-independent part of a stay's experience: hidden states, the f_p
/// sequence, and each step's shuffled reveal order with raw (unsigned,
/// pre-flip) probability deltas.
#[derive(Debug, Clone)]
pub struct StaySkeleton {
    pub stay_id: u64,
    pub y: u8,
    pub hidden: Matrix, // T×H, row t = h_t after consuming rows 0..=t
    pub p_full: Vec<f64>,
    pub p_empty: f64,
    pub steps: Vec<StepSkeleton>,
}

#[derive(Debug, Clone)]
pub struct StepSkeleton {
    pub order: Vec<usize>,
    pub raw_dps: Vec<f64>,
    pub tp_raw: f64,
}

/// The value the model sees for an unmeasured cell at row t: the forward-fill
/// carry, which is the previous row's filled value (0 on the first row).
fn absent_value(ep: &Episode, t: usize, i: usize) -> f64 {
    if t == 0 {
        0.0
    } else {
        ep.x_tv.get(t - 1, i)
    }
}

/// Runs the reveal simulation for one stay: for each t, evaluate f_p with the
/// logged cells of row t blanked to their fill values, then reveal them one at
/// a time in shuffled order, recording each probability change. The final
/// reveal restores the true row, so its advanced state doubles as the next
/// step's starting state; each t costs |A'_t|+1 recurrence steps.
pub fn build_skeleton(
    model: &TrajectoryModel,
    ep: &Episode,
    ordered_log: &[Vec<usize>],
    aspace: ActionSpace,
    rng: &mut ChaCha8Rng,
) -> Result<StaySkeleton> {
    let t_steps = ep.t_steps();
    let m = ep.m_signals();
    if ordered_log.len() != t_steps {
        return Err(Error::Data(format!(
            "stay {}: ordered log covers {} steps, episode has {t_steps}",
            ep.stay_id,
            ordered_log.len()
        )));
    }
    for (t, orders) in ordered_log.iter().enumerate() {
        let mut seen = 0u64;
        for &i in orders {
            if i >= aspace.k || i >= m {
                return Err(Error::Data(format!(
                    "stay {} t {t}: test {i} outside orderable range",
                    ep.stay_id
                )));
            }
            if !ep.observed(t, i) {
                return Err(Error::Data(format!(
                    "stay {} t {t}: test {i} ordered but not observed",
                    ep.stay_id
                )));
            }
            if seen & (1u64 << i) != 0 {
                return Err(Error::Data(format!(
                    "stay {} t {t}: test {i} ordered twice",
                    ep.stay_id
                )));
            }
            seen |= 1u64 << i;
        }
    }

    let input = build_input(ep);
    let hidden = model.hidden();
    let mut hs = Matrix::zeros(t_steps, hidden);
    let mut p_full = vec![0.0; t_steps];
    let mut p_empty = 0.0;
    let mut steps = Vec::with_capacity(t_steps);
    let mut state = model.init_state(1);

    for t in 0..t_steps {
        let mut order = ordered_log[t].clone();
        crate::shuffle(rng, &mut order);

        let mut row = input.x.row_slice(t, t + 1);
        for &i in &order {
            row.set(0, i, absent_value(ep, t, i));
        }
        let blank = model.advance(&state, &row)?;
        let mut p_prev = model.prob_of(&blank)?[0];
        if t == 0 {
            p_empty = p_prev;
        }
        let mut raw_dps = Vec::with_capacity(order.len());
        let mut last = blank;
        for &i in &order {
            row.set(0, i, input.x.get(t, i));
            last = model.advance(&state, &row)?;
            let p = model.prob_of(&last)?[0];
            raw_dps.push(p - p_prev);
            p_prev = p;
        }
        // All logged cells are restored, so `last` consumed the true row t.
        state = last;
        p_full[t] = p_prev;
        for j in 0..hidden {
            hs.set(t, j, state.h.get(0, j));
        }
        steps.push(StepSkeleton { order, raw_dps, tp_raw: 0.0 });
    }
    for t in 0..t_steps.saturating_sub(1) {
        steps[t].tp_raw = p_full[t + 1] - p_full[t];
    }

    Ok(StaySkeleton {
        stay_id: ep.stay_id,
        y: ep.y,
        hidden: hs,
        p_full,
        p_empty,
        steps,
    })
}

/// Expands a skeleton into tuples for one reward setting. Per time step the
/// time-passing tuple comes first, then one per-step tuple per reveal, each
/// adding exactly one history bit.
pub fn materialize(skel: &StaySkeleton, aspace: ActionSpace, params: &RewardParams) -> Vec<ExperienceTuple> {
    let t_steps = skel.steps.len();
    let mut tuples = Vec::with_capacity(skel.steps.iter().map(|s| s.order.len() + 1).sum());
    for (t, step) in skel.steps.iter().enumerate() {
        let terminal = t + 1 == t_steps;
        let tp_r = if params.sign_flip_time_passing {
            delta_p(0.0, step.tp_raw, skel.y)
        } else {
            step.tp_raw
        };
        tuples.push(ExperienceTuple {
            stay_id: skel.stay_id,
            t,
            s_bits: bits_from_set(&step.order),
            a: aspace.omega(),
            r: reward(tp_r, aspace.omega(), aspace, params),
            s_next_bits: 0,
            s_next_t: t + 1,
            kind: TupleKind::TimePassing,
            terminal,
        });
        let mut bits = 0u64;
        for (v, &a) in step.order.iter().enumerate() {
            let dp = delta_p(0.0, step.raw_dps[v], skel.y);
            let next_bits = bits | (1u64 << a);
            tuples.push(ExperienceTuple {
                stay_id: skel.stay_id,
                t,
                s_bits: bits,
                a,
                r: reward(dp, a, aspace, params),
                s_next_bits: next_bits,
                s_next_t: t,
                kind: TupleKind::PerStep,
                terminal: false,
            });
            bits = next_bits;
        }
    }
    tuples
}

/// One stay's generated experience plus the hidden table its states index.
#[derive(Debug, Clone)]
pub struct StayExperience {
    pub stay_id: u64,
    pub hidden: Matrix,
    pub p_full: Vec<f64>,
    pub p_empty: f64,
    pub tuples: Vec<ExperienceTuple>,
}

/// Algorithm-2 generation for one stay under one reward setting.
pub fn gen_experience(
    model: &TrajectoryModel,
    ep: &Episode,
    ordered_log: &[Vec<usize>],
    aspace: ActionSpace,
    params: &RewardParams,
    rng: &mut ChaCha8Rng,
) -> Result<StayExperience> {
    params.validate()?;
    let skel = build_skeleton(model, ep, ordered_log, aspace, rng)?;
    let tuples = materialize(&skel, aspace, params);
    Ok(StayExperience {
        stay_id: skel.stay_id,
        hidden: skel.hidden,
        p_full: skel.p_full,
        p_empty: skel.p_empty,
        tuples,
    })
}

const GEN_STREAM_FLAG: u64 = 1 << 33;

/// The rng stream for one stay's reveal shuffles, derived from (seed,
/// stay_id) so generation order never affects content.
pub fn gen_rng(seed: u64, stay_id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((stay_id + 1) | GEN_STREAM_FLAG);
    rng
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BufferMeta {
    pub version: u32,
    pub k: usize,
    pub hidden: usize,
    pub t_steps: usize,
    pub lambda: f64,
    pub gamma: f64,
    pub sign_flip_time_passing: bool,
    pub seed: u64,
    pub n_stays: usize,
    pub n_tuples: usize,
}

#[derive(Debug)]
pub struct ExperienceBuffer {
    pub meta: BufferMeta,
    pub hidden: HashMap<u64, Matrix>,
    pub tuples: Vec<ExperienceTuple>,
}

/// Writes one buffer directory: meta.json, hidden.ckpt (per-stay T×H hidden
/// tables), and tuples.jsonl.
pub fn write_buffer(dir: &Path, meta: &BufferMeta, stays: &[StayExperience]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let names: Vec<String> = stays.iter().map(|s| s.stay_id.to_string()).collect();
    let entries: Vec<(&str, &Matrix)> = names
        .iter()
        .zip(stays.iter())
        .map(|(n, s)| (n.as_str(), &s.hidden))
        .collect();
    numkernel::checkpoint::save(&dir.join("hidden.ckpt"), &entries).map_err(Error::Kernel)?;

    let mut w = BufWriter::new(std::fs::File::create(dir.join("tuples.jsonl"))?);
    for stay in stays {
        for tuple in &stay.tuples {
            serde_json::to_writer(&mut w, tuple)?;
            w.write_all(b"\n")?;
        }
    }
    w.flush()?;

    let meta = BufferMeta {
        n_stays: stays.len(),
        n_tuples: stays.iter().map(|s| s.tuples.len()).sum(),
        ..meta.clone()
    };
    std::fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

pub fn read_buffer(dir: &Path) -> Result<ExperienceBuffer> {
    let meta: BufferMeta =
        serde_json::from_str(&std::fs::read_to_string(dir.join("meta.json"))?)?;
    if meta.version != 1 {
        return Err(Error::Data(format!("unsupported buffer version {}", meta.version)));
    }
    let mut hidden = HashMap::new();
    for (name, matrix) in numkernel::checkpoint::load(&dir.join("hidden.ckpt")).map_err(Error::Kernel)? {
        let stay_id: u64 = name
            .parse()
            .map_err(|_| Error::Data(format!("bad stay id {name:?} in hidden.ckpt")))?;
        if matrix.cols() != meta.hidden || matrix.rows() != meta.t_steps {
            return Err(Error::Data(format!(
                "stay {stay_id}: hidden table {:?} disagrees with meta ({}, {})",
                matrix.shape(),
                meta.t_steps,
                meta.hidden
            )));
        }
        hidden.insert(stay_id, matrix);
    }
    let file = std::fs::File::open(dir.join("tuples.jsonl"))?;
    let mut tuples = Vec::with_capacity(meta.n_tuples);
    for line in std::io::BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let tuple: ExperienceTuple = serde_json::from_str(&line)?;
        if !hidden.contains_key(&tuple.stay_id) {
            return Err(Error::Data(format!(
                "tuple references stay {} with no hidden table",
                tuple.stay_id
            )));
        }
        if tuple.t >= meta.t_steps || tuple.s_next_t > meta.t_steps {
            return Err(Error::Data(format!(
                "stay {} t {}: tuple time outside 0..{}",
                tuple.stay_id, tuple.t, meta.t_steps
            )));
        }
        tuples.push(tuple);
    }
    if tuples.len() != meta.n_tuples {
        return Err(Error::Data(format!(
            "buffer holds {} tuples, meta says {}",
            tuples.len(),
            meta.n_tuples
        )));
    }
    Ok(ExperienceBuffer { meta, hidden, tuples })
}

/// Generates buffers for several λ values in one pass over the episodes: the
/// reveal simulation (the expensive part) runs once per stay and is shared.
pub fn gen_buffers(
    model: &TrajectoryModel,
    episodes: &[Episode],
    aspace: ActionSpace,
    lambdas: &[f64],
    gamma: f64,
    sign_flip_time_passing: bool,
    seed: u64,
    out_dirs: &[std::path::PathBuf],
) -> Result<()> {
    if lambdas.len() != out_dirs.len() {
        return Err(Error::Config("one output directory per lambda is required".into()));
    }
    if episodes.is_empty() {
        return Err(Error::Data("no episodes to generate experience from".into()));
    }
    let t_steps = episodes[0].t_steps();
    let mut per_lambda: Vec<Vec<StayExperience>> =
        lambdas.iter().map(|_| Vec::with_capacity(episodes.len())).collect();
    for ep in episodes {
        let log = logged_orders(ep, aspace);
        let mut rng = gen_rng(seed, ep.stay_id);
        let skel = build_skeleton(model, ep, &log, aspace, &mut rng)?;
        for (li, &lambda) in lambdas.iter().enumerate() {
            let params = RewardParams { lambda, gamma, sign_flip_time_passing };
            params.validate()?;
            let tuples = materialize(&skel, aspace, &params);
            per_lambda[li].push(StayExperience {
                stay_id: skel.stay_id,
                hidden: skel.hidden.clone(),
                p_full: skel.p_full.clone(),
                p_empty: skel.p_empty,
                tuples,
            });
        }
    }
    for (li, dir) in out_dirs.iter().enumerate() {
        let meta = BufferMeta {
            version: 1,
            k: aspace.k,
            hidden: model.hidden(),
            t_steps,
            lambda: lambdas[li],
            gamma,
            sign_flip_time_passing,
            seed,
            n_stays: 0,
            n_tuples: 0,
        };
        write_buffer(dir, &meta, &per_lambda[li])?;
    }
    Ok(())
}
