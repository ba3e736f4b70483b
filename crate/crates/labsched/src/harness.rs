//! Experiment orchestration: grid sweeps that build every required artifact
//! on demand (cohort → trajectory model → φ → per-λ buffers → policies),
//! Pareto-frontier extraction over the (C, G) plane, and report emission as
//! CSV tables plus a self-contained SVG scatter. Sweeps are resumable: a cell
//! whose report already exists is never retrained.

use crate::agents::{self, Algo, ReplayBuffer, TrainConfig};
use crate::cohort::{build_dataset, load_split, write_dataset, CohortConfig, Episode};
use crate::experience::{gen_buffers, read_buffer, ActionSpace};
use crate::policyeval::{
    build_eval_stays, build_phi_pairs, evaluate_policy, train_phi, EvalParams, EvalStay,
    PhiConfig, PhiEstimator, Policy, PolicyReport,
};
use crate::trajectory::{append_metrics_csv, train_traj, TrajectoryConfig, TrajectoryModel};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

/// Environment variable naming the default data root for relative out_dirs.
pub const DATA_ROOT_ENV: &str = "LABSCHED_DATA";

/// Cost-interval edges for the box-whisker gain summaries.
pub const DEFAULT_COST_EDGES: [f64; 2] = [10.0, 100.0];

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub algos: Vec<Algo>,
    pub lr_grid: Vec<f64>,
    pub lambda_grid: Vec<f64>,
    pub seeds: Vec<u64>,
    pub gamma: f64,
    pub literal_gamma: bool,
    pub sign_flip_time_passing: bool,
    /// Seed for experience generation (per-stay reveal shuffles).
    pub data_seed: u64,
    pub out_dir: PathBuf,
    pub cohort: CohortConfig,
    pub trajectory: TrajectoryConfig,
    pub phi: PhiConfig,
    /// Q-training knobs applied to every cell (lr and seed come from the grid).
    pub steps: usize,
    pub batch_size: usize,
    pub qnet_hidden: usize,
    pub cql_alpha: f64,
    pub iql_tau: f64,
    pub clip_norm: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            algos: Algo::ALL.to_vec(),
            lr_grid: vec![1e-4, 3e-4, 1e-3],
            lambda_grid: vec![0.0, 0.01, 0.1, 1.0],
            seeds: vec![0, 1, 2, 3, 4],
            gamma: 0.99,
            literal_gamma: false,
            sign_flip_time_passing: false,
            data_seed: 0,
            out_dir: PathBuf::from("runs"),
            cohort: CohortConfig::default(),
            trajectory: TrajectoryConfig::default(),
            phi: PhiConfig::default(),
            steps: 2000,
            batch_size: 256,
            qnet_hidden: 256,
            cql_alpha: 1.0,
            iql_tau: 0.7,
            clip_norm: 5.0,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.algos.is_empty()
            || self.lr_grid.is_empty()
            || self.lambda_grid.is_empty()
            || self.seeds.is_empty()
        {
            return Err(Error::Config("sweep grids must be nonempty".into()));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config("gamma must lie in (0,1]".into()));
        }
        if self.lr_grid.iter().any(|&lr| lr <= 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.lambda_grid.iter().any(|&l| l < 0.0) {
            return Err(Error::Config("lambdas must be nonnegative".into()));
        }
        if self.steps == 0 || self.batch_size == 0 || self.qnet_hidden == 0 {
            return Err(Error::Config("steps, batch_size, qnet_hidden must be positive".into()));
        }
        self.cohort.validate()
    }

    pub fn cells(&self) -> Vec<CellSpec> {
        let mut cells = Vec::new();
        for &algo in &self.algos {
            for &lr in &self.lr_grid {
                for &lambda in &self.lambda_grid {
                    for &seed in &self.seeds {
                        cells.push(CellSpec { algo, lr, lambda, seed });
                    }
                }
            }
        }
        cells
    }
}

pub fn load_experiment_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

pub fn save_experiment_config(cfg: &ExperimentConfig, path: &Path) -> Result<()> {
    let text = toml::to_string_pretty(cfg)
        .map_err(|e| Error::Config(format!("serializing config: {e}")))?;
    Ok(std::fs::write(path, text)?)
}

/// Relative out_dirs resolve against $LABSCHED_DATA when it is set.
pub fn resolve_out_dir(p: &Path) -> PathBuf {
    if p.is_absolute() {
        return p.to_path_buf();
    }
    match std::env::var(DATA_ROOT_ENV) {
        Ok(root) if !root.is_empty() => Path::new(&root).join(p),
        _ => p.to_path_buf(),
    }
}

/// Shortest exact decimal form of a float, used in paths and CSV cells.
pub fn float_slug(x: f64) -> String {
    format!("{x}")
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellSpec {
    pub algo: Algo,
    pub lr: f64,
    pub lambda: f64,
    pub seed: u64,
}

impl CellSpec {
    pub fn id(&self) -> String {
        format!(
            "{}_lr{}_lam{}_seed{}",
            self.algo.name(),
            float_slug(self.lr),
            float_slug(self.lambda),
            self.seed
        )
    }
}

/// Fixed directory layout under one experiment root.
#[derive(Debug, Clone)]
pub struct Workspace {
    pub root: PathBuf,
}

impl Workspace {
    pub fn new(root: PathBuf) -> Self {
        Workspace { root }
    }

    pub fn cohort_dir(&self) -> PathBuf {
        self.root.join("cohort")
    }

    pub fn traj_path(&self) -> PathBuf {
        self.root.join("traj").join("model.ckpt")
    }

    pub fn traj_metrics_path(&self) -> PathBuf {
        self.root.join("traj").join("metrics.csv")
    }

    pub fn phi_path(&self) -> PathBuf {
        self.root.join("phi").join("phi.ckpt")
    }

    pub fn buffer_dir(&self, lambda: f64) -> PathBuf {
        self.root.join("buffers").join(format!("lambda_{}", float_slug(lambda)))
    }

    pub fn cell_dir(&self, cell: &CellSpec) -> PathBuf {
        self.root.join("cells").join(cell.id())
    }

    pub fn reports_path(&self) -> PathBuf {
        self.root.join("reports.csv")
    }

    pub fn failures_path(&self) -> PathBuf {
        self.root.join("failures.json")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellFailure {
    pub cell: String,
    pub error: String,
}

#[derive(Debug)]
pub struct SweepSummary {
    pub reports: Vec<PolicyReport>,
    pub failures: Vec<CellFailure>,
    /// Cells trained in this invocation (resumed cells do zero steps).
    pub trained: usize,
    pub resumed: usize,
}

/// Builds (or loads) the cohort files and returns the three splits.
pub fn ensure_cohort(ws: &Workspace, cfg: &CohortConfig) -> Result<[Vec<Episode>; 3]> {
    let dir = ws.cohort_dir();
    if !dir.join("meta.json").exists() {
        let ds = build_dataset(cfg)?;
        std::fs::create_dir_all(&dir)?;
        write_dataset(&ds, &dir)?;
    }
    Ok([
        load_split(&dir, "train")?,
        load_split(&dir, "val")?,
        load_split(&dir, "test")?,
    ])
}

pub fn ensure_trajectory(
    ws: &Workspace,
    cfg: &TrajectoryConfig,
    train: &[Episode],
    val: &[Episode],
) -> Result<TrajectoryModel> {
    let path = ws.traj_path();
    if path.exists() {
        return TrajectoryModel::load(&path);
    }
    let (model, metrics) = train_traj(train, val, cfg)?;
    std::fs::create_dir_all(path.parent().expect("traj path has a parent"))?;
    model.save(&path)?;
    append_metrics_csv(&ws.traj_metrics_path(), &metrics)?;
    Ok(model)
}

pub fn ensure_phi(
    ws: &Workspace,
    cfg: &PhiConfig,
    model: &TrajectoryModel,
    train: &[Episode],
    val: &[Episode],
    aspace: ActionSpace,
) -> Result<PhiEstimator> {
    let path = ws.phi_path();
    if path.exists() {
        return PhiEstimator::load(&path);
    }
    let train_pairs = build_phi_pairs(&build_eval_stays(model, train, aspace)?);
    let val_pairs = build_phi_pairs(&build_eval_stays(model, val, aspace)?);
    let (phi, _) = train_phi(&train_pairs, &val_pairs, model.hidden(), aspace.k, cfg)?;
    std::fs::create_dir_all(path.parent().expect("phi path has a parent"))?;
    phi.save(&path)?;
    Ok(phi)
}

/// Generates any missing per-λ buffers in one shared pass over the episodes.
pub fn ensure_buffers(
    ws: &Workspace,
    cfg: &ExperimentConfig,
    model: &TrajectoryModel,
    train: &[Episode],
    aspace: ActionSpace,
) -> Result<()> {
    let mut missing = Vec::new();
    let mut dirs = Vec::new();
    for &lambda in &cfg.lambda_grid {
        let dir = ws.buffer_dir(lambda);
        if !dir.join("meta.json").exists() {
            missing.push(lambda);
            dirs.push(dir);
        }
    }
    if missing.is_empty() {
        return Ok(());
    }
    gen_buffers(
        model,
        train,
        aspace,
        &missing,
        cfg.gamma,
        cfg.sign_flip_time_passing,
        cfg.data_seed,
        &dirs,
    )
}

fn cell_train_config(cfg: &ExperimentConfig, cell: &CellSpec) -> TrainConfig {
    let mut tc = TrainConfig::default_for(cell.algo);
    tc.lr = cell.lr;
    tc.seed = cell.seed;
    tc.gamma = cfg.gamma;
    tc.steps = cfg.steps;
    tc.batch_size = cfg.batch_size;
    tc.qnet_hidden = cfg.qnet_hidden;
    tc.cql_alpha = cfg.cql_alpha;
    tc.iql_tau = cfg.iql_tau;
    tc.clip_norm = cfg.clip_norm;
    tc
}

fn write_loss_csv(path: &Path, losses: &[f64]) -> Result<()> {
    let mut out = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        out.push_str(&format!("{i},{l}\n"));
    }
    Ok(std::fs::write(path, out)?)
}

type BufferCache = Mutex<HashMap<String, Arc<ReplayBuffer>>>;

fn get_buffer(cache: &BufferCache, ws: &Workspace, lambda: f64) -> Result<Arc<ReplayBuffer>> {
    let key = float_slug(lambda);
    let mut map = cache.lock().expect("buffer cache lock");
    if let Some(buf) = map.get(&key) {
        return Ok(Arc::clone(buf));
    }
    let buf = Arc::new(ReplayBuffer::from_buffer(read_buffer(&ws.buffer_dir(lambda))?)?);
    map.insert(key, Arc::clone(&buf));
    Ok(buf)
}

/// Trains and evaluates one cell, or loads its existing report. The report
/// file is written last so an interrupted cell reruns cleanly.
fn run_cell(
    ws: &Workspace,
    cfg: &ExperimentConfig,
    cell: &CellSpec,
    cache: &BufferCache,
    test_stays: &[EvalStay],
    phi: &PhiEstimator,
    aspace: ActionSpace,
) -> Result<(PolicyReport, bool)> {
    let dir = ws.cell_dir(cell);
    let report_path = dir.join("report.json");
    if report_path.exists() {
        let text = std::fs::read_to_string(&report_path)?;
        return Ok((serde_json::from_str(&text)?, true));
    }
    std::fs::create_dir_all(&dir)?;
    let buffer = get_buffer(cache, ws, cell.lambda)?;
    let tc = cell_train_config(cfg, cell);
    let out = agents::train(cell.algo, &buffer, &tc)?;
    out.net.save(&dir.join("policy.ckpt"))?;
    write_loss_csv(&dir.join("losses.csv"), &out.losses)?;
    let ev = evaluate_policy(
        &Policy::Net(out.net),
        test_stays,
        phi,
        aspace,
        EvalParams::new(cfg.gamma, cfg.literal_gamma)?,
    )?;
    let report = PolicyReport::from_outcome(
        &cell.id(),
        cell.algo.name(),
        cell.lr,
        cell.lambda,
        cell.seed,
        &ev,
    );
    std::fs::write(&report_path, serde_json::to_string_pretty(&report)?)?;
    Ok((report, false))
}

/// Runs the full grid. Shared artifacts are built once; cells execute on up
/// to `workers` threads, each owning its model and rng, so results do not
/// depend on scheduling. Cell failures are recorded, not fatal.
pub fn sweep(cfg: &ExperimentConfig, workers: usize) -> Result<SweepSummary> {
    cfg.validate()?;
    if workers == 0 {
        return Err(Error::Config("workers must be at least 1".into()));
    }
    let ws = Workspace::new(resolve_out_dir(&cfg.out_dir));
    std::fs::create_dir_all(&ws.root)?;

    let [train, val, test] = ensure_cohort(&ws, &cfg.cohort)?;
    let aspace = ActionSpace::new(cfg.cohort.m_signals)?;
    let model = ensure_trajectory(&ws, &cfg.trajectory, &train, &val)?;
    ensure_buffers(&ws, cfg, &model, &train, aspace)?;
    let phi = ensure_phi(&ws, &cfg.phi, &model, &train, &val, aspace)?;
    let test_stays = build_eval_stays(&model, &test, aspace)?;

    let queue: Mutex<Vec<CellSpec>> = Mutex::new(cfg.cells());
    let results: Mutex<Vec<(String, Result<(PolicyReport, bool)>)>> = Mutex::new(Vec::new());
    let cache: BufferCache = Mutex::new(HashMap::new());

    std::thread::scope(|scope| {
        for _ in 0..workers.min(cfg.cells().len()) {
            scope.spawn(|| loop {
                let Some(cell) = queue.lock().expect("queue lock").pop() else {
                    break;
                };
                let res = run_cell(&ws, cfg, &cell, &cache, &test_stays, &phi, aspace);
                results.lock().expect("results lock").push((cell.id(), res));
            });
        }
    });

    let mut reports = Vec::new();
    let mut failures = Vec::new();
    let mut trained = 0;
    let mut resumed = 0;
    for (cell, res) in results.into_inner().expect("results lock") {
        match res {
            Ok((report, was_resumed)) => {
                if was_resumed {
                    resumed += 1;
                } else {
                    trained += 1;
                }
                reports.push(report);
            }
            Err(e) => failures.push(CellFailure { cell, error: e.to_string() }),
        }
    }
    reports.sort_by(|a, b| a.policy_id.cmp(&b.policy_id));
    failures.sort_by(|a, b| a.cell.cmp(&b.cell));

    write_reports_csv(&ws.reports_path(), &reports)?;
    std::fs::write(&ws.failures_path(), serde_json::to_string_pretty(&failures)?)?;
    Ok(SweepSummary { reports, failures, trained, resumed })
}

// ---------------------------------------------------------------------------
// CSV encoding: every file this crate emits round-trips through this parser.

/// Quotes a field when it contains a comma, quote, or line break.
pub fn csv_escape(field: &str) -> String {
    if field.contains(',') || field.contains('"') || field.contains('\n') || field.contains('\r') {
        format!("\"{}\"", field.replace('"', "\"\""))
    } else {
        field.to_string()
    }
}

pub fn csv_join(fields: &[String]) -> String {
    fields.iter().map(|f| csv_escape(f)).collect::<Vec<_>>().join(",")
}

/// Splits CSV text into records, honoring quoted fields (with `""` escapes)
/// that may span commas and line breaks.
pub fn parse_csv_records(text: &str) -> Result<Vec<Vec<String>>> {
    let mut records = Vec::new();
    let mut record = Vec::new();
    let mut field = String::new();
    let mut quoted = false;
    let mut chars = text.chars().peekable();
    let mut any = false;
    while let Some(c) = chars.next() {
        any = true;
        if quoted {
            match c {
                '"' => {
                    if chars.peek() == Some(&'"') {
                        chars.next();
                        field.push('"');
                    } else {
                        quoted = false;
                    }
                }
                _ => field.push(c),
            }
        } else {
            match c {
                '"' if field.is_empty() => quoted = true,
                '"' => return Err(Error::Data("stray quote inside unquoted field".into())),
                ',' => record.push(std::mem::take(&mut field)),
                '\r' => {}
                '\n' => {
                    record.push(std::mem::take(&mut field));
                    records.push(std::mem::take(&mut record));
                }
                _ => field.push(c),
            }
        }
    }
    if quoted {
        return Err(Error::Data("unterminated quoted field".into()));
    }
    if any && (!field.is_empty() || !record.is_empty()) {
        record.push(field);
        records.push(record);
    }
    Ok(records)
}

/// Parses one CSV record; empty input is the record with one empty field.
pub fn parse_csv_line(line: &str) -> Result<Vec<String>> {
    let mut records = parse_csv_records(line)?;
    match records.len() {
        0 => Ok(vec![String::new()]),
        1 => Ok(records.remove(0)),
        n => Err(Error::Data(format!("expected one CSV record, found {n}"))),
    }
}

pub const REPORT_CSV_HEADER: &str = "policy_id,algo,lr,lambda,seed,c,g_total,g_mean,g_std,n_stays";

pub fn report_to_row(r: &PolicyReport) -> String {
    csv_join(&[
        r.policy_id.clone(),
        r.algo.clone(),
        float_slug(r.lr),
        float_slug(r.lambda),
        r.seed.to_string(),
        float_slug(r.c),
        float_slug(r.g_total),
        float_slug(r.g_mean),
        float_slug(r.g_std),
        r.n_stays.to_string(),
    ])
}

pub fn report_from_row(fields: &[String]) -> Result<PolicyReport> {
    if fields.len() != 10 {
        return Err(Error::Data(format!("report row has {} fields, expected 10", fields.len())));
    }
    let fl = |i: usize| -> Result<f64> {
        fields[i]
            .parse()
            .map_err(|_| Error::Data(format!("bad float {:?} in report row", fields[i])))
    };
    Ok(PolicyReport {
        policy_id: fields[0].clone(),
        algo: fields[1].clone(),
        lr: fl(2)?,
        lambda: fl(3)?,
        seed: fields[4]
            .parse()
            .map_err(|_| Error::Data(format!("bad seed {:?} in report row", fields[4])))?,
        c: fl(5)?,
        g_total: fl(6)?,
        g_mean: fl(7)?,
        g_std: fl(8)?,
        n_stays: fields[9]
            .parse()
            .map_err(|_| Error::Data(format!("bad n_stays {:?} in report row", fields[9])))?,
    })
}

pub fn write_reports_csv(path: &Path, reports: &[PolicyReport]) -> Result<()> {
    let mut out = String::from(REPORT_CSV_HEADER);
    out.push('\n');
    for r in reports {
        out.push_str(&report_to_row(r));
        out.push('\n');
    }
    Ok(std::fs::write(path, out)?)
}

pub fn read_reports_csv(path: &Path) -> Result<Vec<PolicyReport>> {
    let text = std::fs::read_to_string(path)?;
    let records = parse_csv_records(&text)?;
    let mut rows = records.into_iter();
    match rows.next() {
        Some(h) if csv_join(&h) == REPORT_CSV_HEADER => {}
        _ => return Err(Error::Data(format!("{}: missing report header", path.display()))),
    }
    rows.map(|r| report_from_row(&r)).collect()
}

// ---------------------------------------------------------------------------
// Pareto frontier and summaries.

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrontierPoint {
    pub report: PolicyReport,
    pub on_frontier: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CostBucket {
    pub lo: f64,
    /// None for the open-ended last interval.
    pub hi: Option<f64>,
    pub n: usize,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrontierReport {
    /// All swept points, sorted by C ascending, then G descending, then seed.
    pub points: Vec<FrontierPoint>,
    /// Highest-gain point per method (ties: lower C, then lower seed).
    pub best_per_method: Vec<PolicyReport>,
    pub references: Vec<PolicyReport>,
    pub buckets: Vec<CostBucket>,
}

/// Linear-interpolation quantile (type 7) of an ascending-sorted slice.
pub fn quantile_type7(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty slice");
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p;
    let lo = h.floor() as usize;
    let frac = h - lo as f64;
    if lo + 1 < n {
        sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
    } else {
        sorted[n - 1]
    }
}

fn cost_buckets(reports: &[PolicyReport]) -> Vec<CostBucket> {
    let [e1, e2] = DEFAULT_COST_EDGES;
    let ranges = [(0.0, Some(e1)), (e1, Some(e2)), (e2, None)];
    let mut out = Vec::new();
    for (lo, hi) in ranges {
        let mut gains: Vec<f64> = reports
            .iter()
            .filter(|r| r.c >= lo && hi.is_none_or(|h| r.c < h))
            .map(|r| r.g_mean)
            .collect();
        if gains.is_empty() {
            continue;
        }
        gains.sort_by(f64::total_cmp);
        out.push(CostBucket {
            lo,
            hi,
            n: gains.len(),
            min: gains[0],
            q1: quantile_type7(&gains, 0.25),
            median: quantile_type7(&gains, 0.5),
            q3: quantile_type7(&gains, 0.75),
            max: gains[gains.len() - 1],
        });
    }
    out
}

fn best_per_method(reports: &[PolicyReport]) -> Vec<PolicyReport> {
    let mut methods: Vec<String> = reports.iter().map(|r| r.algo.clone()).collect();
    methods.sort();
    methods.dedup();
    methods
        .into_iter()
        .filter_map(|m| {
            reports
                .iter()
                .filter(|r| r.algo == m)
                .max_by(|a, b| {
                    a.g_mean
                        .total_cmp(&b.g_mean)
                        .then(b.c.total_cmp(&a.c))
                        .then(b.seed.cmp(&a.seed))
                })
                .cloned()
        })
        .collect()
}

/// Pareto-maximal set under (minimize C, maximize G) over per-stay mean gain.
/// A point is dominated by another with C ≤ and G ≥ where at least one is
/// strict; equal (C, G) pairs are all kept.
pub fn frontier(reports: &[PolicyReport], references: &[PolicyReport]) -> FrontierReport {
    let mut points: Vec<FrontierPoint> = reports
        .iter()
        .map(|r| FrontierPoint { report: r.clone(), on_frontier: false })
        .collect();
    points.sort_by(|a, b| {
        a.report
            .c
            .total_cmp(&b.report.c)
            .then(b.report.g_mean.total_cmp(&a.report.g_mean))
            .then(a.report.seed.cmp(&b.report.seed))
    });
    let mut best_g = f64::NEG_INFINITY;
    let mut i = 0;
    while i < points.len() {
        let mut j = i;
        while j < points.len() && points[j].report.c == points[i].report.c {
            j += 1;
        }
        let group_max = points[i].report.g_mean; // sorted G-descending inside the group
        if group_max > best_g {
            for p in &mut points[i..j] {
                p.on_frontier = p.report.g_mean == group_max;
            }
            best_g = group_max;
        }
        i = j;
    }
    FrontierReport {
        best_per_method: best_per_method(reports),
        references: references.to_vec(),
        buckets: cost_buckets(reports),
        points,
    }
}

// ---------------------------------------------------------------------------
// Export.

/// Human-facing method labels for the table rows.
pub fn display_name(id: &str) -> String {
    match id {
        "bc" => "BC".into(),
        "ddqn" => "DDQN".into(),
        "cql" => "CQL".into(),
        "iql" => "IQL".into(),
        _ => {
            let mut chars = id.chars();
            match chars.next() {
                Some(c) => c.to_uppercase().chain(chars).collect(),
                None => String::new(),
            }
        }
    }
}

fn table_csv(fr: &FrontierReport) -> String {
    let mut out = String::from("policy,c,g\n");
    for r in fr.references.iter().chain(fr.best_per_method.iter()) {
        let label = if fr.references.iter().any(|x| std::ptr::eq(x, r)) {
            display_name(&r.policy_id)
        } else {
            display_name(&r.algo)
        };
        out.push_str(&csv_join(&[label, float_slug(r.c), float_slug(r.g_mean)]));
        out.push('\n');
    }
    out
}

fn scatter_csv(fr: &FrontierReport) -> String {
    let mut out = String::from("kind,algo,lr,lambda,seed,c,g,frontier\n");
    for p in &fr.points {
        let r = &p.report;
        out.push_str(&csv_join(&[
            "policy".into(),
            r.algo.clone(),
            float_slug(r.lr),
            float_slug(r.lambda),
            r.seed.to_string(),
            float_slug(r.c),
            float_slug(r.g_mean),
            u8::from(p.on_frontier).to_string(),
        ]));
        out.push('\n');
    }
    for r in &fr.references {
        out.push_str(&csv_join(&[
            "reference".into(),
            r.policy_id.clone(),
            String::new(),
            String::new(),
            String::new(),
            float_slug(r.c),
            float_slug(r.g_mean),
            "0".into(),
        ]));
        out.push('\n');
    }
    out
}

fn boxplot_csv(fr: &FrontierReport) -> String {
    let mut out = String::from("cost_lo,cost_hi,n,min,q1,median,q3,max\n");
    for b in &fr.buckets {
        out.push_str(&csv_join(&[
            float_slug(b.lo),
            b.hi.map(float_slug).unwrap_or_default(),
            b.n.to_string(),
            float_slug(b.min),
            float_slug(b.q1),
            float_slug(b.median),
            float_slug(b.q3),
            float_slug(b.max),
        ]));
        out.push('\n');
    }
    out
}

fn algo_color(algo: &str) -> &'static str {
    match algo {
        "bc" => "#1f77b4",
        "ddqn" => "#d62728",
        "cql" => "#2ca02c",
        "iql" => "#9467bd",
        _ => "#7f7f7f",
    }
}

/// Self-contained cost-vs-gain scatter; frontier points get a black ring,
/// references render as crosses.
fn scatter_svg(fr: &FrontierReport) -> String {
    let (w, h) = (720.0, 520.0);
    let (ml, mr, mt, mb) = (70.0, 160.0, 20.0, 50.0);
    let pts: Vec<(f64, f64)> = fr
        .points
        .iter()
        .map(|p| (p.report.c, p.report.g_mean))
        .chain(fr.references.iter().map(|r| (r.c, r.g_mean)))
        .collect();
    let (mut c_lo, mut c_hi) = (0.0f64, 1.0f64);
    let (mut g_lo, mut g_hi) = (-1.0f64, 1.0f64);
    if !pts.is_empty() {
        c_lo = pts.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
        c_hi = pts.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
        g_lo = pts.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
        g_hi = pts.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
        if c_hi == c_lo {
            c_hi = c_lo + 1.0;
        }
        if g_hi == g_lo {
            g_hi = g_lo + 1.0;
        }
        let (cp, gp) = ((c_hi - c_lo) * 0.05, (g_hi - g_lo) * 0.05);
        c_lo -= cp;
        c_hi += cp;
        g_lo -= gp;
        g_hi += gp;
    }
    let sx = |c: f64| ml + (c - c_lo) / (c_hi - c_lo) * (w - ml - mr);
    let sy = |g: f64| h - mb - (g - g_lo) / (g_hi - g_lo) * (h - mt - mb);

    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" \
         viewBox=\"0 0 {w} {h}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n"
    );
    svg.push_str(&format!(
        "<line x1=\"{ml}\" y1=\"{0}\" x2=\"{1}\" y2=\"{0}\" stroke=\"black\"/>\n\
         <line x1=\"{ml}\" y1=\"{mt}\" x2=\"{ml}\" y2=\"{0}\" stroke=\"black\"/>\n",
        h - mb,
        w - mr
    ));
    for i in 0..=4 {
        let fc = c_lo + (c_hi - c_lo) * i as f64 / 4.0;
        let fg = g_lo + (g_hi - g_lo) * i as f64 / 4.0;
        let (x, y) = (sx(fc), sy(fg));
        svg.push_str(&format!(
            "<line x1=\"{x:.2}\" y1=\"{0}\" x2=\"{x:.2}\" y2=\"{1}\" stroke=\"black\"/>\n\
             <text x=\"{x:.2}\" y=\"{2}\" text-anchor=\"middle\">{fc:.3}</text>\n",
            h - mb,
            h - mb + 5.0,
            h - mb + 20.0
        ));
        svg.push_str(&format!(
            "<line x1=\"{0}\" y1=\"{y:.2}\" x2=\"{ml}\" y2=\"{y:.2}\" stroke=\"black\"/>\n\
             <text x=\"{1}\" y=\"{2:.2}\" text-anchor=\"end\">{fg:.4}</text>\n",
            ml - 5.0,
            ml - 8.0,
            y + 4.0
        ));
    }
    svg.push_str(&format!(
        "<text x=\"{0:.2}\" y=\"{1}\" text-anchor=\"middle\">policy cost C</text>\n\
         <text x=\"15\" y=\"{2:.2}\" text-anchor=\"middle\" transform=\"rotate(-90 15 {2:.2})\">\
         information gain G</text>\n",
        ml + (w - ml - mr) / 2.0,
        h - 10.0,
        mt + (h - mt - mb) / 2.0
    ));
    for p in &fr.points {
        let (x, y) = (sx(p.report.c), sy(p.report.g_mean));
        let stroke = if p.on_frontier { " stroke=\"black\" stroke-width=\"1.5\"" } else { "" };
        svg.push_str(&format!(
            "<circle cx=\"{x:.2}\" cy=\"{y:.2}\" r=\"4\" fill=\"{}\"{stroke}/>\n",
            algo_color(&p.report.algo)
        ));
    }
    for r in &fr.references {
        let (x, y) = (sx(r.c), sy(r.g_mean));
        svg.push_str(&format!(
            "<path d=\"M {0:.2} {1:.2} L {2:.2} {3:.2} M {0:.2} {3:.2} L {2:.2} {1:.2}\" \
             stroke=\"#444\" stroke-width=\"2\"/>\n\
             <text x=\"{4:.2}\" y=\"{5:.2}\">{6}</text>\n",
            x - 5.0,
            y - 5.0,
            x + 5.0,
            y + 5.0,
            x + 8.0,
            y + 4.0,
            display_name(&r.policy_id)
        ));
    }
    let mut legend_algos: Vec<&str> = fr.points.iter().map(|p| p.report.algo.as_str()).collect();
    legend_algos.sort();
    legend_algos.dedup();
    for (i, algo) in legend_algos.iter().enumerate() {
        let y = mt + 15.0 + i as f64 * 18.0;
        svg.push_str(&format!(
            "<circle cx=\"{0:.2}\" cy=\"{y:.2}\" r=\"4\" fill=\"{1}\"/>\n\
             <text x=\"{2:.2}\" y=\"{3:.2}\">{4}</text>\n",
            w - mr + 15.0,
            algo_color(algo),
            w - mr + 25.0,
            y + 4.0,
            display_name(algo)
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

/// Writes table.csv, scatter.csv, boxplot.csv, and scatter.svg; returns the
/// emitted paths. Empty inputs yield headers-only files.
pub fn export_reports(fr: &FrontierReport, out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir)?;
    let files = [
        ("table.csv", table_csv(fr)),
        ("scatter.csv", scatter_csv(fr)),
        ("boxplot.csv", boxplot_csv(fr)),
        ("scatter.svg", scatter_svg(fr)),
    ];
    let mut paths = Vec::new();
    for (name, content) in files {
        let path = out_dir.join(name);
        std::fs::write(&path, content)?;
        paths.push(path);
    }
    Ok(paths)
}
