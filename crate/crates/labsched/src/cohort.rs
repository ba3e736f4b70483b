//! Episodic cohort schema and the synthetic generator standing in for
//! restricted ICU data. Each stay is driven by a scalar AR(1) severity latent;
//! signals are observed at Table-1-style relative frequencies with values
//! linear in the latent, and mortality is a calibrated logistic draw on the
//! final latent. Ground truth is retained so downstream evaluation can be
//! checked against oracles.

use crate::{Error, Result};
use numkernel::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

/// The 38 time-variant signals with their relative measurement frequencies
/// (most frequent: heart rate at 7.22× the basophils baseline).
pub const SIGNALS: [(&str, f64); 38] = [
    ("anion_gap", 0.21),
    ("bicarbonate", 1.18),
    ("blood_urea_nitrogen", 0.22),
    ("chloride", 0.22),
    ("creatinine", 0.59),
    ("diastolic_bp", 1.01),
    ("heart_rate", 7.22),
    ("hematocrit", 1.223),
    ("hemoglobin", 6.42),
    ("mean_bp", 1.15),
    ("mean_corpuscular_hgb", 1.48),
    ("platelets", 1.43),
    ("potassium", 1.12),
    ("red_blood_cells", 0.24),
    ("sodium", 1.22),
    ("systolic_bp", 6.35),
    ("white_blood_cells", 0.29),
    ("albumin", 0.24),
    ("alkaline_phosphate", 1.12),
    ("basophils", 1.0),
    ("bilirubin_total", 1.34),
    ("co2", 0.59),
    ("calcium_total", 0.8),
    ("calcium_ionized", 1.33),
    ("eosinophils", 0.37),
    ("lactate", 0.68),
    ("lactic_acid", 1.12),
    ("magnesium", 0.29),
    ("monocytes", 0.23),
    ("pco2", 1.03),
    ("ptt", 1.16),
    ("prothrombin_time", 0.23),
    ("ph_blood", 0.09),
    ("ast", 0.75),
    ("o2_saturation", 3.87),
    ("phosphate", 6.62),
    ("fio2", 6.43),
    ("temperature", 1.11),
];

pub fn default_frequencies() -> Vec<f64> {
    SIGNALS.iter().map(|&(_, f)| f).collect()
}

pub fn signal_name(i: usize) -> &'static str {
    SIGNALS.get(i).map(|&(n, _)| n).unwrap_or("signal")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RawEvent {
    pub time_hours: f64,
    pub signal_index: usize,
    pub value: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RawStay {
    pub stay_id: u64,
    pub static_features: Vec<f64>,
    pub events: Vec<RawEvent>,
    pub duration_hours: f64,
    pub death_time_hours: Option<f64>,
}

impl RawStay {
    pub fn validate(&self, m: usize) -> Result<()> {
        for e in &self.events {
            if e.time_hours < 0.0 || e.time_hours > self.duration_hours {
                return Err(Error::Data(format!(
                    "stay {}: event time {} outside [0, {}]",
                    self.stay_id, e.time_hours, self.duration_hours
                )));
            }
            if e.signal_index >= m {
                return Err(Error::Data(format!(
                    "stay {}: signal index {} out of range (m={m})",
                    self.stay_id, e.signal_index
                )));
            }
        }
        Ok(())
    }
}

/// One preprocessed stay: time-invariant features, the normalized and filled
/// T×m time-variant matrix, the raw observation mask, and the mortality label.
#[derive(Debug, Clone)]
pub struct Episode {
    pub stay_id: u64,
    pub x_inv: Vec<f64>,
    pub x_tv: Matrix,
    pub observed_mask: Vec<u8>, // row-major T×m, 1 where ≥1 raw measurement
    pub y: u8,
}

impl Episode {
    pub fn t_steps(&self) -> usize {
        self.x_tv.rows()
    }

    pub fn m_signals(&self) -> usize {
        self.x_tv.cols()
    }

    pub fn observed(&self, t: usize, i: usize) -> bool {
        self.observed_mask[t * self.m_signals() + i] == 1
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct CohortConfig {
    pub n_stays: usize,
    pub t_steps: usize,
    pub m_signals: usize,
    pub u_static: usize,
    pub interval_hours: f64,
    pub target_mortality_rate: f64,
    pub signal_frequencies: Vec<f64>,
    pub seed: u64,
}

impl Default for CohortConfig {
    fn default() -> Self {
        CohortConfig {
            n_stays: 20_000,
            t_steps: 23,
            m_signals: 38,
            u_static: 38,
            interval_hours: 1.0,
            target_mortality_rate: 0.12,
            signal_frequencies: default_frequencies(),
            seed: 0,
        }
    }
}

impl CohortConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_stays == 0 || self.t_steps == 0 || self.m_signals == 0 {
            return Err(Error::Config("n_stays, t_steps, m_signals must be positive".into()));
        }
        if self.signal_frequencies.len() != self.m_signals {
            return Err(Error::Config(format!(
                "signal_frequencies has {} entries, expected m={}",
                self.signal_frequencies.len(),
                self.m_signals
            )));
        }
        if self.signal_frequencies.iter().any(|&f| f <= 0.0) {
            return Err(Error::Config("signal frequencies must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.target_mortality_rate) || self.target_mortality_rate == 0.0 {
            return Err(Error::Config("target_mortality_rate must lie in (0,1)".into()));
        }
        if self.interval_hours <= 0.0 {
            return Err(Error::Config("interval_hours must be positive".into()));
        }
        Ok(())
    }
}

/// Generative parameters and per-stay latent trajectories, kept so evaluation
/// can be compared against the true severity process.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroundTruth {
    pub w: f64,
    pub w0: f64,
    pub stays: Vec<StayTruth>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StayTruth {
    pub stay_id: u64,
    pub latent: Vec<f64>,
    pub event_prob: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PopulationStats {
    pub version: u32,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

const AR_COEFF: f64 = 0.9;
const AR_NOISE_VAR: f64 = 0.09; // 0.3²
const VALUE_NOISE_VAR: f64 = 0.25;
const MAX_OBS_PROB: f64 = 0.95;
const MORTALITY_W: f64 = 3.0;
const LABEL_STREAM_FLAG: u64 = 1 << 32;

fn stay_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Per-signal loading of the latent: more frequently measured signals carry
/// more of it, and every third signal loads negatively for variety.
pub fn signal_loading(i: usize, freq: f64) -> f64 {
    let sign = if i % 3 == 2 { -1.0 } else { 1.0 };
    sign * (0.4 + 0.25 * freq)
}

fn signal_offset(i: usize) -> f64 {
    0.1 * (i % 7) as f64 - 0.3
}

fn sigmoid(x: f64) -> f64 {
    numkernel::sigmoid(x)
}

/// Generates raw stays plus ground truth. Each stay draws from its own RNG
/// stream keyed by stay_id, so generation order never affects content; labels
/// use a separate stream because the calibrated intercept depends on every
/// stay's latent.
pub fn synth_cohort(config: &CohortConfig) -> Result<(Vec<RawStay>, GroundTruth)> {
    config.validate()?;
    let m = config.m_signals;
    let t_steps = config.t_steps;
    let dt = config.interval_hours;
    let max_freq = config
        .signal_frequencies
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let scale = MAX_OBS_PROB / max_freq;
    let obs_prob: Vec<f64> = config
        .signal_frequencies
        .iter()
        .map(|&f| (f * scale).min(MAX_OBS_PROB))
        .collect();
    let loadings: Vec<f64> = config
        .signal_frequencies
        .iter()
        .enumerate()
        .map(|(i, &f)| signal_loading(i, f))
        .collect();

    let mut cohort_rng = stay_rng(config.seed, 0);
    let static_coeff: Vec<f64> = (0..config.u_static)
        .map(|_| cohort_rng.random_range(-0.15..0.15))
        .collect();

    let std_normal = Normal::new(0.0, 1.0).expect("normal params");
    let ar_noise = Normal::new(0.0, AR_NOISE_VAR.sqrt()).expect("normal params");
    let value_noise = Normal::new(0.0, VALUE_NOISE_VAR.sqrt()).expect("normal params");

    let n_continuous = config.u_static.min(8);
    let mut stays = Vec::with_capacity(config.n_stays);
    let mut latents = Vec::with_capacity(config.n_stays);
    for id in 0..config.n_stays as u64 {
        let mut rng = stay_rng(config.seed, id + 1);
        let mut statics = Vec::with_capacity(config.u_static);
        for j in 0..config.u_static {
            if j < n_continuous {
                statics.push(std_normal.sample(&mut rng));
            } else {
                statics.push(if rng.random_range(0.0..1.0) < 0.3 { 1.0 } else { 0.0 });
            }
        }
        let shift: f64 = static_coeff.iter().zip(statics.iter()).map(|(c, x)| c * x).sum();

        let mut z = Vec::with_capacity(t_steps);
        let mut cur = std_normal.sample(&mut rng) + shift;
        z.push(cur);
        for _ in 1..t_steps {
            cur = AR_COEFF * cur + ar_noise.sample(&mut rng);
            z.push(cur);
        }

        let mut events = Vec::new();
        for (t, &zt) in z.iter().enumerate() {
            for i in 0..m {
                if rng.random_range(0.0..1.0) < obs_prob[i] {
                    events.push(RawEvent {
                        time_hours: (t as f64 + rng.random_range(0.0..1.0)) * dt,
                        signal_index: i,
                        value: loadings[i] * zt + signal_offset(i) + value_noise.sample(&mut rng),
                    });
                }
            }
        }

        stays.push(RawStay {
            stay_id: id,
            static_features: statics,
            events,
            duration_hours: t_steps as f64 * dt,
            death_time_hours: None,
        });
        latents.push(z);
    }

    // Calibrate the logistic intercept so the expected mortality rate hits the
    // target; the expected rate is monotone increasing in w0.
    let last_z: Vec<f64> = latents.iter().map(|z| *z.last().expect("t_steps > 0")).collect();
    let expected_rate = |w0: f64| -> f64 {
        last_z.iter().map(|&z| sigmoid(MORTALITY_W * z + w0)).sum::<f64>() / last_z.len() as f64
    };
    let (mut lo, mut hi) = (-12.0, 12.0);
    for _ in 0..50 {
        let mid = 0.5 * (lo + hi);
        if expected_rate(mid) < config.target_mortality_rate {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let w0 = 0.5 * (lo + hi);
    let achieved = expected_rate(w0);
    if (achieved - config.target_mortality_rate).abs() > 0.02 {
        return Err(Error::Generation(format!(
            "mortality calibration failed: expected rate {achieved:.4} vs target {}",
            config.target_mortality_rate
        )));
    }

    let mut truth_stays = Vec::with_capacity(stays.len());
    for (idx, stay) in stays.iter_mut().enumerate() {
        let p = sigmoid(MORTALITY_W * last_z[idx] + w0);
        let mut label_rng = stay_rng(config.seed, (stay.stay_id + 1) | LABEL_STREAM_FLAG);
        if label_rng.random_range(0.0..1.0) < p {
            stay.death_time_hours =
                Some(stay.duration_hours + 1.0 + label_rng.random_range(0.0..48.0));
        }
        truth_stays.push(StayTruth {
            stay_id: stay.stay_id,
            latent: latents[idx].clone(),
            event_prob: p,
        });
    }

    Ok((
        stays,
        GroundTruth { w: MORTALITY_W, w0, stays: truth_stays },
    ))
}

/// Keeps stays with duration ≥ 12h, ≥ 5 lab-test events, and (when labeled)
/// an end time at or before death. Boundary values are kept.
pub fn filter_stays(stays: Vec<RawStay>) -> Vec<RawStay> {
    stays
        .into_iter()
        .filter(|s| {
            s.duration_hours >= 12.0
                && s.events.len() >= 5
                && s.death_time_hours.is_none_or(|d| s.duration_hours <= d)
        })
        .collect()
}

/// Buckets raw events into T intervals of `interval_hours`, averaging within
/// each bucket. Cells with no measurement are NaN holes with mask 0.
pub fn discretize(
    stay: &RawStay,
    t_steps: usize,
    m: usize,
    interval_hours: f64,
) -> (Matrix, Matrix) {
    let mut sums = vec![0.0f64; t_steps * m];
    let mut counts = vec![0u32; t_steps * m];
    for e in &stay.events {
        let t = (e.time_hours / interval_hours).floor() as usize;
        if t >= t_steps {
            continue;
        }
        sums[t * m + e.signal_index] += e.value;
        counts[t * m + e.signal_index] += 1;
    }
    let mut values = Matrix::zeros(t_steps, m);
    let mut mask = Matrix::zeros(t_steps, m);
    for t in 0..t_steps {
        for i in 0..m {
            let k = t * m + i;
            if counts[k] > 0 {
                values.set(t, i, sums[k] / counts[k] as f64);
                mask.set(t, i, 1.0);
            } else {
                values.set(t, i, f64::NAN);
            }
        }
    }
    (values, mask)
}

/// Per-signal mean/std over observed cells of the given (train-split) stays.
/// Uses the population (1/n) variance. A constant signal cannot be z-scored.
pub fn compute_stats(discretized: &[(Matrix, Matrix)]) -> Result<PopulationStats> {
    let m = discretized
        .first()
        .map(|(v, _)| v.cols())
        .ok_or_else(|| Error::Data("no stays to compute stats from".into()))?;
    let mut sum = vec![0.0f64; m];
    let mut sum_sq = vec![0.0f64; m];
    let mut count = vec![0u64; m];
    for (values, mask) in discretized {
        for t in 0..values.rows() {
            for i in 0..m {
                if mask.get(t, i) == 1.0 {
                    let v = values.get(t, i);
                    sum[i] += v;
                    sum_sq[i] += v * v;
                    count[i] += 1;
                }
            }
        }
    }
    let mut mean = vec![0.0f64; m];
    let mut std = vec![0.0f64; m];
    for i in 0..m {
        if count[i] == 0 {
            return Err(Error::Config(format!(
                "signal {} ({}) has no observations in the training split",
                i,
                signal_name(i)
            )));
        }
        mean[i] = sum[i] / count[i] as f64;
        let var = (sum_sq[i] / count[i] as f64 - mean[i] * mean[i]).max(0.0);
        std[i] = var.sqrt();
        if std[i] < 1e-9 {
            return Err(Error::Config(format!(
                "signal {} ({}) has zero variance; cannot normalize",
                i,
                signal_name(i)
            )));
        }
    }
    Ok(PopulationStats { version: 1, mean, std })
}

/// Z-scores observed cells, then forward-fills holes within the stay; cells
/// with no prior observation become 0 (the normalized population mean).
pub fn fill_and_normalize(values: &Matrix, mask: &Matrix, stats: &PopulationStats) -> Result<Matrix> {
    let (t_steps, m) = values.shape();
    if stats.mean.len() != m || stats.std.len() != m {
        return Err(Error::Config(format!(
            "stats cover {} signals, data has {m}",
            stats.mean.len()
        )));
    }
    for (i, &s) in stats.std.iter().enumerate() {
        if s < 1e-9 {
            return Err(Error::Config(format!(
                "signal {} ({}) has zero std in stats",
                i,
                signal_name(i)
            )));
        }
    }
    let mut out = Matrix::zeros(t_steps, m);
    for i in 0..m {
        let mut last: Option<f64> = None;
        for t in 0..t_steps {
            let v = if mask.get(t, i) == 1.0 {
                let z = (values.get(t, i) - stats.mean[i]) / stats.std[i];
                last = Some(z);
                z
            } else {
                last.unwrap_or(0.0)
            };
            out.set(t, i, v);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Deterministic 70/15/15 split assignment by shuffled stay position.
pub fn split_assignment(n: usize, seed: u64) -> Vec<Split> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = stay_rng(seed, u64::MAX);
    crate::shuffle(&mut rng, &mut order);
    let n_train = n * 70 / 100;
    let n_val = n * 15 / 100;
    let mut assignment = vec![Split::Test; n];
    for (rank, &idx) in order.iter().enumerate() {
        assignment[idx] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    assignment
}

#[derive(Debug)]
pub struct Dataset {
    pub config: CohortConfig,
    pub train: Vec<Episode>,
    pub val: Vec<Episode>,
    pub test: Vec<Episode>,
    pub stats: PopulationStats,
    pub ground_truth: GroundTruth,
}

/// Full generation pipeline: synth → filter → discretize → split → train-only
/// stats → fill/normalize → labeled episodes.
pub fn build_dataset(config: &CohortConfig) -> Result<Dataset> {
    let (stays, truth) = synth_cohort(config)?;
    let stays = filter_stays(stays);
    if stays.is_empty() {
        return Err(Error::Generation("no stays survived exclusion filters".into()));
    }
    for s in &stays {
        s.validate(config.m_signals)?;
    }
    let truth_by_id: std::collections::HashMap<u64, &StayTruth> =
        truth.stays.iter().map(|s| (s.stay_id, s)).collect();

    let discretized: Vec<(Matrix, Matrix)> = stays
        .iter()
        .map(|s| discretize(s, config.t_steps, config.m_signals, config.interval_hours))
        .collect();
    let assignment = split_assignment(stays.len(), config.seed);

    let train_disc: Vec<(Matrix, Matrix)> = discretized
        .iter()
        .zip(assignment.iter())
        .filter(|(_, &a)| a == Split::Train)
        .map(|(d, _)| d.clone())
        .collect();
    let stats = compute_stats(&train_disc)?;

    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut test = Vec::new();
    for ((stay, (values, mask)), &split) in
        stays.iter().zip(discretized.iter()).zip(assignment.iter())
    {
        let x_tv = fill_and_normalize(values, mask, &stats)?;
        let observed_mask: Vec<u8> = mask.data().iter().map(|&v| v as u8).collect();
        let ep = Episode {
            stay_id: stay.stay_id,
            x_inv: stay.static_features.clone(),
            x_tv,
            observed_mask,
            y: u8::from(stay.death_time_hours.is_some()),
        };
        match split {
            Split::Train => train.push(ep),
            Split::Val => val.push(ep),
            Split::Test => test.push(ep),
        }
    }

    let kept_truth = GroundTruth {
        w: truth.w,
        w0: truth.w0,
        stays: stays
            .iter()
            .map(|s| (*truth_by_id[&s.stay_id]).clone())
            .collect(),
    };

    Ok(Dataset {
        config: config.clone(),
        train,
        val,
        test,
        stats,
        ground_truth: kept_truth,
    })
}

#[derive(Serialize, Deserialize)]
struct EpisodeRecord {
    stay_id: u64,
    t: usize,
    m: usize,
    x_inv: Vec<f64>,
    x_tv: Vec<f64>,
    mask: Vec<u8>,
    y: u8,
}

#[derive(Serialize, Deserialize)]
struct DatasetMeta {
    config: CohortConfig,
    n_train: usize,
    n_val: usize,
    n_test: usize,
    mortality_rate: f64,
    w: f64,
    w0: f64,
}

fn write_episodes(path: &Path, episodes: &[Episode]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for ep in episodes {
        let rec = EpisodeRecord {
            stay_id: ep.stay_id,
            t: ep.t_steps(),
            m: ep.m_signals(),
            x_inv: ep.x_inv.clone(),
            x_tv: ep.x_tv.data().to_vec(),
            mask: ep.observed_mask.clone(),
            y: ep.y,
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_episodes(&dir.join("episodes_train.jsonl"), &ds.train)?;
    write_episodes(&dir.join("episodes_val.jsonl"), &ds.val)?;
    write_episodes(&dir.join("episodes_test.jsonl"), &ds.test)?;
    std::fs::write(dir.join("stats.json"), serde_json::to_string_pretty(&ds.stats)?)?;
    std::fs::write(
        dir.join("ground_truth.json"),
        serde_json::to_string(&ds.ground_truth)?,
    )?;
    let n = (ds.train.len() + ds.val.len() + ds.test.len()) as f64;
    let deaths = ds
        .train
        .iter()
        .chain(ds.val.iter())
        .chain(ds.test.iter())
        .filter(|e| e.y == 1)
        .count() as f64;
    let meta = DatasetMeta {
        config: ds.config.clone(),
        n_train: ds.train.len(),
        n_val: ds.val.len(),
        n_test: ds.test.len(),
        mortality_rate: deaths / n,
        w: ds.ground_truth.w,
        w0: ds.ground_truth.w0,
    };
    std::fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

pub fn load_split(dir: &Path, split: &str) -> Result<Vec<Episode>> {
    let path = dir.join(format!("episodes_{split}.jsonl"));
    let file = std::fs::File::open(&path)
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
    let reader = std::io::BufReader::new(file);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: EpisodeRecord = serde_json::from_str(&line)?;
        if rec.x_tv.len() != rec.t * rec.m || rec.mask.len() != rec.t * rec.m {
            return Err(Error::Data(format!(
                "stay {}: episode record shape mismatch",
                rec.stay_id
            )));
        }
        out.push(Episode {
            stay_id: rec.stay_id,
            x_inv: rec.x_inv,
            x_tv: Matrix::from_vec(rec.t, rec.m, rec.x_tv).map_err(Error::Kernel)?,
            observed_mask: rec.mask,
            y: rec.y,
        });
    }
    Ok(out)
}

pub fn load_stats(dir: &Path) -> Result<PopulationStats> {
    Ok(serde_json::from_str(&std::fs::read_to_string(dir.join("stats.json"))?)?)
}

pub fn load_ground_truth(dir: &Path) -> Result<GroundTruth> {
    Ok(serde_json::from_str(&std::fs::read_to_string(
        dir.join("ground_truth.json"),
    )?)?)
}

pub fn load_config(dir: &Path) -> Result<CohortConfig> {
    let meta: DatasetMeta = serde_json::from_str(&std::fs::read_to_string(dir.join("meta.json"))?)?;
    Ok(meta.config)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config(n: usize, seed: u64) -> CohortConfig {
        CohortConfig {
            n_stays: n,
            seed,
            ..CohortConfig::default()
        }
    }

    fn stay_with(duration: f64, n_events: usize, death: Option<f64>) -> RawStay {
        RawStay {
            stay_id: 0,
            static_features: vec![0.0],
            events: (0..n_events)
                .map(|k| RawEvent {
                    time_hours: (k as f64 * 0.1).min(duration),
                    signal_index: 0,
                    value: 1.0,
                })
                .collect(),
            duration_hours: duration,
            death_time_hours: death,
        }
    }

    #[test]
    fn discretize_averages_within_bucket() {
        let stay = RawStay {
            stay_id: 1,
            static_features: vec![],
            events: vec![
                RawEvent { time_hours: 3.1, signal_index: 0, value: 2.0 },
                RawEvent { time_hours: 3.5, signal_index: 0, value: 4.0 },
            ],
            duration_hours: 5.0,
            death_time_hours: None,
        };
        let (values, mask) = discretize(&stay, 5, 2, 1.0);
        assert_eq!(values.get(3, 0), 3.0);
        assert_eq!(mask.get(3, 0), 1.0);
        assert!(values.get(2, 0).is_nan());
        assert_eq!(mask.get(2, 0), 0.0);
    }

    #[test]
    fn discretize_no_events_gives_all_holes() {
        let stay = stay_with(5.0, 0, None);
        let (_, mask) = discretize(&stay, 5, 2, 1.0);
        assert!(mask.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn discretize_matches_bruteforce_bucketing_and_permutation_invariant() {
        let mut rng = stay_rng(42, 9);
        let t_steps = 6;
        let m = 4;
        let mut events: Vec<RawEvent> = (0..50)
            .map(|_| RawEvent {
                time_hours: rng.random_range(0.0..6.0),
                signal_index: rng.random_range(0..m),
                value: rng.random_range(-5.0..5.0),
            })
            .collect();
        let stay = RawStay {
            stay_id: 2,
            static_features: vec![],
            events: events.clone(),
            duration_hours: 6.0,
            death_time_hours: None,
        };
        let (values, mask) = discretize(&stay, t_steps, m, 1.0);

        // Brute-force oracle: collect then average per (t, i) bucket.
        for t in 0..t_steps {
            for i in 0..m {
                let bucket: Vec<f64> = events
                    .iter()
                    .filter(|e| {
                        e.signal_index == i
                            && e.time_hours >= t as f64
                            && e.time_hours < (t + 1) as f64
                    })
                    .map(|e| e.value)
                    .collect();
                if bucket.is_empty() {
                    assert_eq!(mask.get(t, i), 0.0);
                } else {
                    let want = bucket.iter().sum::<f64>() / bucket.len() as f64;
                    assert!((values.get(t, i) - want).abs() < 1e-12);
                }
            }
        }

        crate::shuffle(&mut rng, &mut events);
        let shuffled = RawStay { events, ..stay };
        let (v2, m2) = discretize(&shuffled, t_steps, m, 1.0);
        for (a, b) in values.data().iter().zip(v2.data().iter()) {
            assert!(a.to_bits() == b.to_bits() || (a.is_nan() && b.is_nan()));
        }
        assert_eq!(mask.data(), m2.data());
    }

    #[test]
    fn fill_normalize_forward_fills_and_defaults_to_zero() {
        let stats = PopulationStats { version: 1, mean: vec![10.0], std: vec![2.0] };
        let mut values = Matrix::zeros(3, 1);
        let mut mask = Matrix::zeros(3, 1);
        values.set(0, 0, f64::NAN);
        values.set(1, 0, 14.0);
        mask.set(1, 0, 1.0);
        values.set(2, 0, f64::NAN);
        let out = fill_and_normalize(&values, &mask, &stats).unwrap();
        assert_eq!(out.get(0, 0), 0.0); // no prior observation, not back-filled
        assert_eq!(out.get(1, 0), 2.0);
        assert_eq!(out.get(2, 0), 2.0); // forward fill
        assert!(out.is_finite());
    }

    #[test]
    fn fill_normalize_identity_stats_is_idempotent_on_observed() {
        let stats = PopulationStats { version: 1, mean: vec![0.0, 0.0], std: vec![1.0, 1.0] };
        let values = Matrix::from_vec(2, 2, vec![1.0, -2.0, 3.0, 0.5]).unwrap();
        let mask = Matrix::from_vec(2, 2, vec![1.0; 4]).unwrap();
        let once = fill_and_normalize(&values, &mask, &stats).unwrap();
        let twice = fill_and_normalize(&once, &mask, &stats).unwrap();
        assert_eq!(once.data(), twice.data());
    }

    #[test]
    fn fill_normalize_mixed_pattern_matches_reference_scan() {
        let mut rng = stay_rng(7, 3);
        let (t_steps, m) = (8, 3);
        let mut values = Matrix::zeros(t_steps, m);
        let mut mask = Matrix::zeros(t_steps, m);
        for t in 0..t_steps {
            for i in 0..m {
                if rng.random_range(0.0..1.0) < 0.4 {
                    values.set(t, i, rng.random_range(-3.0..3.0));
                    mask.set(t, i, 1.0);
                } else {
                    values.set(t, i, f64::NAN);
                }
            }
        }
        let stats = PopulationStats {
            version: 1,
            mean: vec![0.5, -1.0, 2.0],
            std: vec![1.5, 0.5, 2.0],
        };
        let out = fill_and_normalize(&values, &mask, &stats).unwrap();
        // Independent single-pass reference scan.
        for i in 0..m {
            let mut carry = 0.0;
            let mut seen = false;
            for t in 0..t_steps {
                if mask.get(t, i) == 1.0 {
                    carry = (values.get(t, i) - stats.mean[i]) / stats.std[i];
                    seen = true;
                }
                let want = if seen { carry } else { 0.0 };
                assert_eq!(out.get(t, i), want);
            }
        }
    }

    #[test]
    fn zero_std_is_rejected_with_signal_name() {
        let stats = PopulationStats { version: 1, mean: vec![0.0], std: vec![0.0] };
        let values = Matrix::zeros(1, 1);
        let mask = Matrix::zeros(1, 1);
        let err = fill_and_normalize(&values, &mask, &stats).unwrap_err();
        assert!(err.to_string().contains("anion_gap"));
    }

    #[test]
    fn filter_applies_both_thresholds_with_boundary_kept() {
        let stays = vec![
            stay_with(11.9, 20, None),       // excluded: short
            stay_with(12.0, 5, None),        // kept: boundaries inclusive
            stay_with(30.0, 4, None),        // excluded: too few tests
            stay_with(24.0, 10, Some(23.0)), // excluded: ends after death
            stay_with(24.0, 10, Some(24.0)), // kept: boundary
        ];
        let kept = filter_stays(stays);
        assert_eq!(kept.len(), 2);
        assert_eq!(kept[0].duration_hours, 12.0);
        assert_eq!(kept[1].death_time_hours, Some(24.0));
    }

    #[test]
    fn filter_matches_predicate_oracle_and_is_idempotent() {
        let mut rng = stay_rng(11, 5);
        let stays: Vec<RawStay> = (0..1000)
            .map(|id| {
                let duration = rng.random_range(4.0..48.0);
                let n_events = rng.random_range(0..12);
                let death = if rng.random_range(0.0..1.0) < 0.3 {
                    Some(rng.random_range(0.0..72.0))
                } else {
                    None
                };
                RawStay { stay_id: id, ..stay_with(duration, n_events, death) }
            })
            .collect();
        let oracle: Vec<u64> = stays
            .iter()
            .filter(|s| {
                s.duration_hours >= 12.0
                    && s.events.len() >= 5
                    && s.death_time_hours.map_or(true, |d| s.duration_hours <= d)
            })
            .map(|s| s.stay_id)
            .collect();
        let kept = filter_stays(stays);
        let got: Vec<u64> = kept.iter().map(|s| s.stay_id).collect();
        assert_eq!(got, oracle);
        let twice: Vec<u64> = filter_stays(kept).iter().map(|s| s.stay_id).collect();
        assert_eq!(twice, got);
    }

    #[test]
    fn synth_hits_mortality_band_and_is_reproducible() {
        let config = small_config(3000, 17);
        let (stays, truth) = synth_cohort(&config).unwrap();
        let rate = stays.iter().filter(|s| s.death_time_hours.is_some()).count() as f64
            / stays.len() as f64;
        assert!((0.10..=0.14).contains(&rate), "mortality {rate}");

        let (stays2, truth2) = synth_cohort(&config).unwrap();
        assert_eq!(stays.len(), stays2.len());
        for (a, b) in stays.iter().zip(stays2.iter()) {
            assert_eq!(a.events.len(), b.events.len());
            for (ea, eb) in a.events.iter().zip(b.events.iter()) {
                assert_eq!(ea.value.to_bits(), eb.value.to_bits());
            }
            assert_eq!(a.death_time_hours, b.death_time_hours);
        }
        assert_eq!(truth.w0.to_bits(), truth2.w0.to_bits());
    }

    #[test]
    fn equal_frequencies_give_symmetric_observation_counts() {
        let m = 6;
        let config = CohortConfig {
            n_stays: 800,
            m_signals: m,
            u_static: 4,
            signal_frequencies: vec![1.0; m],
            seed: 3,
            ..CohortConfig::default()
        };
        let (stays, _) = synth_cohort(&config).unwrap();
        let mut counts = vec![0usize; m];
        for s in &stays {
            for e in &s.events {
                counts[e.signal_index] += 1;
            }
        }
        // Every signal is observed with p=0.95 over n·T trials.
        let trials = (config.n_stays * config.t_steps) as f64;
        let expect = 0.95 * trials;
        let sigma = (trials * 0.95 * 0.05).sqrt();
        for (i, &c) in counts.iter().enumerate() {
            assert!(
                (c as f64 - expect).abs() < 3.0 * sigma,
                "signal {i}: count {c} vs expected {expect:.0}"
            );
        }
    }

    #[test]
    fn frequency_ratio_matches_scaled_probabilities() {
        let config = small_config(1500, 23);
        let (stays, _) = synth_cohort(&config).unwrap();
        let mut counts = vec![0usize; config.m_signals];
        for s in &stays {
            for e in &s.events {
                counts[e.signal_index] += 1;
            }
        }
        let hr = 6; // heart rate, frequency 7.22 → capped at 0.95
        let baso = 19; // basophils, frequency 1.0
        let s = 0.95 / 7.22;
        let want = 0.95 / (1.0 * s);
        let got = counts[hr] as f64 / counts[baso] as f64;
        assert!(
            (got - want).abs() / want < 0.05,
            "ratio {got:.3} vs binomial expectation {want:.3}"
        );
    }

    #[test]
    fn split_is_disjoint_and_covers_everything() {
        let assignment = split_assignment(1000, 5);
        let n_train = assignment.iter().filter(|&&s| s == Split::Train).count();
        let n_val = assignment.iter().filter(|&&s| s == Split::Val).count();
        let n_test = assignment.iter().filter(|&&s| s == Split::Test).count();
        assert_eq!(n_train, 700);
        assert_eq!(n_val, 150);
        assert_eq!(n_test, 150);
    }

    #[test]
    fn dataset_round_trips_through_files() {
        let config = small_config(60, 2);
        let ds = build_dataset(&config).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        let train = load_split(dir.path(), "train").unwrap();
        assert_eq!(train.len(), ds.train.len());
        for (a, b) in train.iter().zip(ds.train.iter()) {
            assert_eq!(a.stay_id, b.stay_id);
            assert_eq!(a.y, b.y);
            for (x, y) in a.x_tv.data().iter().zip(b.x_tv.data().iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        let stats = load_stats(dir.path()).unwrap();
        assert_eq!(stats.mean.len(), 38);
        let truth = load_ground_truth(dir.path()).unwrap();
        assert_eq!(truth.stays.len(), 60); // all synthetic stays pass the filters
        let config2 = load_config(dir.path()).unwrap();
        assert_eq!(config2.n_stays, 60);
    }

    #[test]
    fn episodes_are_finite_everywhere() {
        let ds = build_dataset(&small_config(40, 8)).unwrap();
        for ep in ds.train.iter().chain(ds.val.iter()).chain(ds.test.iter()) {
            assert!(ep.x_tv.is_finite(), "stay {} has non-finite cells", ep.stay_id);
        }
    }
}
