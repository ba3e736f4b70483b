//! Command-line front end: synthesize cohorts, train the trajectory model,
//! generate experience buffers, train and evaluate policies, run grid sweeps,
//! and export frontier reports. Exit codes: 0 success, 2 partial sweep
//! failure, 1 config or runtime error.

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use labsched::agents::{self, Algo, DuelingQNet, ReplayBuffer, TrainConfig};
use labsched::cohort::{
    build_dataset, load_config, load_split, load_stats, signal_name, write_dataset, CohortConfig,
};
use labsched::experience::{gen_buffers, read_buffer, ActionSpace};
use labsched::harness::{
    self, export_reports, load_experiment_config, read_reports_csv, write_reports_csv,
};
use labsched::policyeval::{
    build_eval_stays, build_phi_pairs, evaluate_policy, train_phi, EvalParams, PhiConfig,
    PhiEstimator, Policy, PolicyReport,
};
use labsched::trajectory::{append_metrics_csv, train_traj, TrajectoryConfig, TrajectoryModel};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

#[derive(Parser)]
#[command(name = "labsched", version, about = "Offline RL for lab-test scheduling")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Synthesize a cohort dataset into a directory.
    Synth {
        /// Cohort config as TOML; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print per-signal statistics of one split as CSV.
    Stats {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value = "train")]
        split: String,
    },
    /// Train the LSTM mortality model on a cohort.
    TrainTraj {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        hidden: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Epoch metrics CSV; defaults to metrics.csv beside --out.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Generate an experience buffer for one cost coefficient λ.
    GenExp {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        lambda: f64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.99)]
        gamma: f64,
        /// Apply the y-dependent sign flip to time-passing rewards too.
        #[arg(long)]
        sign_flip_time_passing: bool,
    },
    /// Train a policy (bc, ddqn, cql, iql) on a buffer.
    Train {
        #[arg(long)]
        algo: String,
        #[arg(long)]
        buffer: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        gamma: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        cql_alpha: Option<f64>,
        #[arg(long)]
        iql_tau: Option<f64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        hidden: Option<usize>,
        /// Loss trace CSV; defaults to --out with a .losses.csv suffix.
        #[arg(long)]
        losses: Option<PathBuf>,
    },
    /// Train the φ information-gain regressor.
    TrainPhi {
        #[arg(long)]
        traj: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        hidden: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a policy on a split and write (or append to) a report CSV.
    Evaluate {
        /// Checkpoint path, or one of: physician, always-stop, random:<p>.
        #[arg(long)]
        policy: String,
        #[arg(long)]
        phi: PathBuf,
        #[arg(long)]
        traj: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0.99)]
        gamma: f64,
        /// Weight every step by γ itself instead of γ^t.
        #[arg(long)]
        literal_gamma: bool,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: PathBuf,
        /// Metadata stamped into the report row.
        #[arg(long)]
        algo: Option<String>,
        #[arg(long, default_value_t = 0.0)]
        lr: f64,
        #[arg(long, default_value_t = 0.0)]
        lambda: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the full (algo × lr × λ × seed) sweep from a TOML config.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Extract the Pareto frontier from reports and export table/plot files.
    Frontier {
        /// reports.csv, or a sweep directory containing one.
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Reference-policy rows (same CSV schema) to attach.
        #[arg(long)]
        refs: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cmd: Cmd) -> Result<ExitCode> {
    match cmd {
        Cmd::Synth { config, out, seed } => synth(config, out, seed),
        Cmd::Stats { input, split } => stats(input, split),
        Cmd::TrainTraj { data, out, lr, seed, hidden, epochs, metrics } => {
            run_train_traj(data, out, lr, seed, hidden, epochs, metrics)
        }
        Cmd::GenExp { model, data, lambda, out, seed, gamma, sign_flip_time_passing } => {
            gen_exp(model, data, lambda, out, seed, gamma, sign_flip_time_passing)
        }
        Cmd::Train {
            algo,
            buffer,
            out,
            lr,
            gamma,
            seed,
            cql_alpha,
            iql_tau,
            steps,
            batch_size,
            hidden,
            losses,
        } => run_train(
            algo, buffer, out, lr, gamma, seed, cql_alpha, iql_tau, steps, batch_size, hidden,
            losses,
        ),
        Cmd::TrainPhi { traj, data, out, hidden, lr, epochs, seed } => {
            run_train_phi(traj, data, out, hidden, lr, epochs, seed)
        }
        Cmd::Evaluate {
            policy,
            phi,
            traj,
            data,
            gamma,
            literal_gamma,
            split,
            out,
            algo,
            lr,
            lambda,
            seed,
        } => evaluate(
            policy, phi, traj, data, gamma, literal_gamma, split, out, algo, lr, lambda, seed,
        ),
        Cmd::Sweep { config, workers } => run_sweep(config, workers),
        Cmd::Frontier { input, out, refs } => run_frontier(input, out, refs),
    }
}

fn synth(config: Option<PathBuf>, out: PathBuf, seed: Option<u64>) -> Result<ExitCode> {
    let mut cfg = match config {
        Some(path) => {
            let text = std::fs::read_to_string(&path)
                .with_context(|| format!("reading {}", path.display()))?;
            toml::from_str::<CohortConfig>(&text)
                .with_context(|| format!("parsing {}", path.display()))?
        }
        None => CohortConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let ds = build_dataset(&cfg)?;
    std::fs::create_dir_all(&out)?;
    write_dataset(&ds, &out)?;
    println!(
        "wrote cohort to {} ({} train / {} val / {} test stays, seed {})",
        out.display(),
        ds.train.len(),
        ds.val.len(),
        ds.test.len(),
        cfg.seed
    );
    Ok(ExitCode::SUCCESS)
}

fn stats(input: PathBuf, split: String) -> Result<ExitCode> {
    let eps = load_split(&input, &split)?;
    let pop = load_stats(&input)?;
    let m = pop.mean.len();
    let cells = eps.iter().map(|e| e.t_steps()).sum::<usize>();
    println!("signal,name,obs_rate,mean,std");
    for i in 0..m {
        let observed: usize = eps
            .iter()
            .map(|e| (0..e.t_steps()).filter(|&t| e.observed(t, i)).count())
            .sum();
        let rate = observed as f64 / cells.max(1) as f64;
        println!("{i},{},{},{},{}", signal_name(i), rate, pop.mean[i], pop.std[i]);
    }
    Ok(ExitCode::SUCCESS)
}

fn run_train_traj(
    data: PathBuf,
    out: PathBuf,
    lr: Option<f64>,
    seed: Option<u64>,
    hidden: Option<usize>,
    epochs: Option<usize>,
    metrics: Option<PathBuf>,
) -> Result<ExitCode> {
    let train = load_split(&data, "train")?;
    let val = load_split(&data, "val")?;
    let mut cfg = TrajectoryConfig::default();
    if let Some(v) = lr {
        cfg.lr = v;
    }
    if let Some(v) = seed {
        cfg.seed = v;
    }
    if let Some(v) = hidden {
        cfg.hidden = v;
    }
    if let Some(v) = epochs {
        cfg.epochs = v;
    }
    let (model, history) = train_traj(&train, &val, &cfg)?;
    ensure_parent(&out)?;
    model.save(&out)?;
    let metrics_path = metrics.unwrap_or_else(|| out.with_file_name("metrics.csv"));
    append_metrics_csv(&metrics_path, &history)?;
    let best = history.iter().map(|e| e.val_auc).fold(f64::NEG_INFINITY, f64::max);
    println!("saved {} (best val AUC {best:.4}, {} epochs)", out.display(), history.len());
    Ok(ExitCode::SUCCESS)
}

fn gen_exp(
    model: PathBuf,
    data: PathBuf,
    lambda: f64,
    out: PathBuf,
    seed: u64,
    gamma: f64,
    sign_flip_time_passing: bool,
) -> Result<ExitCode> {
    let model = TrajectoryModel::load(&model)?;
    let eps = load_split(&data, "train")?;
    let aspace = ActionSpace::new(load_config(&data)?.m_signals)?;
    gen_buffers(
        &model,
        &eps,
        aspace,
        &[lambda],
        gamma,
        sign_flip_time_passing,
        seed,
        &[out.clone()],
    )?;
    println!("wrote buffer for lambda={lambda} to {}", out.display());
    Ok(ExitCode::SUCCESS)
}

#[allow(clippy::too_many_arguments)]
fn run_train(
    algo: String,
    buffer: PathBuf,
    out: PathBuf,
    lr: Option<f64>,
    gamma: Option<f64>,
    seed: u64,
    cql_alpha: Option<f64>,
    iql_tau: Option<f64>,
    steps: Option<usize>,
    batch_size: Option<usize>,
    hidden: Option<usize>,
    losses: Option<PathBuf>,
) -> Result<ExitCode> {
    let algo = Algo::from_str(&algo)?;
    let buf = ReplayBuffer::from_buffer(read_buffer(&buffer)?)?;
    let mut cfg = TrainConfig::default_for(algo);
    cfg.seed = seed;
    if let Some(v) = lr {
        cfg.lr = v;
    }
    if let Some(v) = gamma {
        cfg.gamma = v;
    }
    if let Some(v) = cql_alpha {
        cfg.cql_alpha = v;
    }
    if let Some(v) = iql_tau {
        cfg.iql_tau = v;
    }
    if let Some(v) = steps {
        cfg.steps = v;
    }
    if let Some(v) = batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = hidden {
        cfg.qnet_hidden = v;
    }
    let result = agents::train(algo, &buf, &cfg)?;
    ensure_parent(&out)?;
    result.net.save(&out)?;
    let losses_path = losses.unwrap_or_else(|| out.with_extension("losses.csv"));
    let mut csv = String::from("step,loss\n");
    for (i, l) in result.losses.iter().enumerate() {
        csv.push_str(&format!("{i},{l}\n"));
    }
    std::fs::write(&losses_path, csv)?;
    let last = result.losses.last().copied().unwrap_or(f64::NAN);
    println!("saved {} ({} steps, final loss {last:.6})", out.display(), result.losses.len());
    Ok(ExitCode::SUCCESS)
}

fn run_train_phi(
    traj: PathBuf,
    data: PathBuf,
    out: PathBuf,
    hidden: Option<usize>,
    lr: Option<f64>,
    epochs: Option<usize>,
    seed: Option<u64>,
) -> Result<ExitCode> {
    let model = TrajectoryModel::load(&traj)?;
    let aspace = ActionSpace::new(load_config(&data)?.m_signals)?;
    let train = build_phi_pairs(&build_eval_stays(&model, &load_split(&data, "train")?, aspace)?);
    let val = build_phi_pairs(&build_eval_stays(&model, &load_split(&data, "val")?, aspace)?);
    let mut cfg = PhiConfig::default();
    if let Some(v) = hidden {
        cfg.hidden = v;
    }
    if let Some(v) = lr {
        cfg.lr = v;
    }
    if let Some(v) = epochs {
        cfg.epochs = v;
    }
    if let Some(v) = seed {
        cfg.seed = v;
    }
    let (phi, history) = train_phi(&train, &val, model.hidden(), aspace.k, &cfg)?;
    ensure_parent(&out)?;
    phi.save(&out)?;
    let best = history.iter().map(|e| e.val_mse).fold(f64::INFINITY, f64::min);
    println!("saved {} (best val MSE {best:.6}, {} epochs)", out.display(), history.len());
    Ok(ExitCode::SUCCESS)
}

fn parse_policy(spec: &str, seed: u64) -> Result<Policy> {
    match spec {
        "physician" => Ok(Policy::PhysicianReplay),
        "always-stop" => Ok(Policy::AlwaysStop),
        s if s.starts_with("random:") => {
            let p: f64 = s["random:".len()..]
                .parse()
                .with_context(|| format!("bad probability in {s:?}"))?;
            Ok(Policy::Random { p, seed })
        }
        path => {
            let path = Path::new(path);
            if !path.exists() {
                bail!(
                    "policy {path:?} is not a checkpoint path, physician, always-stop, or random:<p>"
                );
            }
            Ok(Policy::Net(DuelingQNet::load(path)?))
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn evaluate(
    policy: String,
    phi: PathBuf,
    traj: PathBuf,
    data: PathBuf,
    gamma: f64,
    literal_gamma: bool,
    split: String,
    out: PathBuf,
    algo: Option<String>,
    lr: f64,
    lambda: f64,
    seed: u64,
) -> Result<ExitCode> {
    let model = TrajectoryModel::load(&traj)?;
    let aspace = ActionSpace::new(load_config(&data)?.m_signals)?;
    let stays = build_eval_stays(&model, &load_split(&data, &split)?, aspace)?;
    let phi = PhiEstimator::load(&phi)?;
    let policy = parse_policy(&policy, seed)?;
    let params = EvalParams::new(gamma, literal_gamma)?;
    let outcome = evaluate_policy(&policy, &stays, &phi, aspace, params)?;
    let report = PolicyReport::from_outcome(
        &policy.id(),
        algo.as_deref().unwrap_or(&policy.id()),
        lr,
        lambda,
        seed,
        &outcome,
    );
    let mut reports = if out.exists() { read_reports_csv(&out)? } else { Vec::new() };
    println!(
        "{}: C={} G={} (per-stay mean {} ± {}, {} stays)",
        report.policy_id, report.c, report.g_total, report.g_mean, report.g_std, report.n_stays
    );
    reports.push(report);
    ensure_parent(&out)?;
    write_reports_csv(&out, &reports)?;
    Ok(ExitCode::SUCCESS)
}

fn run_sweep(config: PathBuf, workers: usize) -> Result<ExitCode> {
    let cfg = load_experiment_config(&config)?;
    let summary = harness::sweep(&cfg, workers)?;
    println!(
        "{} reports ({} trained, {} resumed), {} failed cells",
        summary.reports.len(),
        summary.trained,
        summary.resumed,
        summary.failures.len()
    );
    for f in &summary.failures {
        eprintln!("cell {} failed: {}", f.cell, f.error);
    }
    if summary.failures.is_empty() {
        Ok(ExitCode::SUCCESS)
    } else {
        Ok(ExitCode::from(2))
    }
}

fn run_frontier(input: PathBuf, out: PathBuf, refs: Option<PathBuf>) -> Result<ExitCode> {
    let path = if input.is_dir() { input.join("reports.csv") } else { input };
    let reports = read_reports_csv(&path)?;
    let references = match refs {
        Some(p) => read_reports_csv(&p)?,
        None => Vec::new(),
    };
    let fr = harness::frontier(&reports, &references);
    let files = export_reports(&fr, &out)?;
    let on = fr.points.iter().filter(|p| p.on_frontier).count();
    println!(
        "{on} of {} points on the frontier; wrote {}",
        fr.points.len(),
        files
            .iter()
            .map(|p| p.display().to_string())
            .collect::<Vec<_>>()
            .join(", ")
    );
    Ok(ExitCode::SUCCESS)
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    Ok(())
}
