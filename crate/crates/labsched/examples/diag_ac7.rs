//! Scratch diagnostic for the frontier acceptance criterion (not shipped).

use labsched::agents::Algo;
use labsched::cohort::{default_frequencies, load_split, CohortConfig};
use labsched::experience::ActionSpace;
use labsched::harness::{sweep, ExperimentConfig, Workspace};
use labsched::policyeval::{
    build_eval_stays, evaluate_policy, EvalParams, PhiEstimator, Policy,
};
use labsched::trajectory::{TrajectoryConfig, TrajectoryModel};
use labsched::policyeval::PhiConfig;
use std::path::PathBuf;

fn main() {
    let out = PathBuf::from("/tmp/ac7b_runs");
    let cohort = CohortConfig {
        n_stays: 10000,
        t_steps: 10,
        m_signals: 12,
        u_static: 6,
        interval_hours: 2.0,
        target_mortality_rate: 0.12,
        signal_frequencies: default_frequencies()[..12].to_vec(),
        seed: 0,
    };
    let cfg = ExperimentConfig {
        algos: vec![Algo::Ddqn, Algo::Cql, Algo::Iql],
        out_dir: out.clone(),
        cohort,
        trajectory: TrajectoryConfig {
            hidden: 64,
            lr: 1e-3,
            epochs: 6,
            batch_size: 48,
            steps_per_epoch: 120,
            patience: 3,
            clip_norm: 5.0,
            val_subset: 600,
            seed: 0,
        },
        phi: PhiConfig {
            hidden: 64,
            lr: 1e-3,
            epochs: 40,
            batch_size: 128,
            steps_per_epoch: 60,
            patience: 6,
            clip_norm: 5.0,
            seed: 0,
        },
        ..ExperimentConfig::default()
    };

    let summary = sweep(&cfg, 1).unwrap();
    assert!(summary.failures.is_empty(), "failures: {:?}", summary.failures);

    let ws = Workspace::new(cfg.out_dir.clone());
    let model = TrajectoryModel::load(&ws.traj_path()).unwrap();
    let phi = PhiEstimator::load(&ws.phi_path()).unwrap();
    let test = load_split(&ws.cohort_dir(), "test").unwrap();
    let aspace = ActionSpace::new(cfg.cohort.m_signals).unwrap();
    let stays = build_eval_stays(&model, &test, aspace).unwrap();
    let params = EvalParams::new(cfg.gamma, cfg.literal_gamma).unwrap();
    let max_cost = (cfg.cohort.m_signals * cfg.cohort.t_steps) as f64;

    let phys = evaluate_policy(&Policy::PhysicianReplay, &stays, &phi, aspace, params).unwrap();
    println!("physician: C {:.2} G_mean {:.4}", phys.c, phys.g_mean);

    for algo in ["ddqn", "cql", "iql"] {
        let mut ok = 0;
        for seed in 0..5u64 {
            println!("--- {algo} seed {seed}");
            let mut any = false;
            for r in summary.reports.iter().filter(|r| r.algo == algo && r.seed == seed) {
                if r.c <= 0.0 {
                    println!(
                        "  lr {:<6} λ {:<5} C {:>6.2} G {:>8.4}   (zero cost, skipped)",
                        r.lr, r.lambda, r.c, r.g_mean
                    );
                    continue;
                }
                let p = (r.c / max_cost).clamp(0.0, 1.0);
                let re =
                    evaluate_policy(&Policy::Random { p, seed: 77 }, &stays, &phi, aspace, params)
                        .unwrap();
                let dom = r.g_mean > re.g_mean && r.c <= 1.1 * re.c;
                any |= dom;
                println!(
                    "  lr {:<6} λ {:<5} C {:>6.2} G {:>8.4} | rand(p={p:.3}) C {:>6.2} G {:>8.4} | dom {}",
                    r.lr, r.lambda, r.c, r.g_mean, re.c, re.g_mean, dom
                );
            }
            if any {
                ok += 1;
            }
        }
        println!("==== {algo}: {ok}/5 seeds");
    }
}
