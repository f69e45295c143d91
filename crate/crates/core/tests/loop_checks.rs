//! End-to-end loop properties at integration scale: a smoke run with sane
//! logs, the exact mean-baseline equivalence, and monotone shrinkage of the
//! posterior uncertainty as episodes accumulate data.

use sbsrl::envs::EnvSpec;
use sbsrl::gp::{GpPosterior, MeanFn, PriorSpec};
use sbsrl::kernel::{KernelKind, KernelSpec};
use sbsrl::learner::{baseline_mean_run, sbsrl_run, MSpec, RunConfig, TerminationReason};
use sbsrl::planner::{IcemParams, McConfig};
use sbsrl::sampler::SampleEngine;

fn small_cfg() -> RunConfig {
    let mut env = EnvSpec::pendulum();
    env.horizon = 40;
    // Signal scale matches the per-step delta targets; a loose prior would let
    // sampled dynamics run away as soon as a rollout leaves the data tube.
    let kernel =
        KernelSpec::new(KernelKind::SquaredExp, vec![0.7, 0.7, 3.0, 2.0], 0.02).unwrap();
    let prior = PriorSpec::new(MeanFn::Zero, 2.0, env.noise_std).unwrap();
    let mut cfg = RunConfig::new(env, kernel, prior);
    cfg.planner = IcemParams {
        population: 32,
        iterations: 4,
        ..IcemParams::default()
    };
    cfg.probe_planner = IcemParams {
        population: 16,
        iterations: 2,
        ..IcemParams::default()
    };
    cfg.mc = McConfig {
        n_mean_rollouts: 2,
        n_cost_rollouts: 2,
        ..McConfig::default()
    };
    cfg.m_samples = MSpec::Fixed(3);
    cfg.engine = SampleEngine::RandomFourier { n_features: 64 };
    cfg.max_episodes = 4;
    cfg.offline_episodes = 3;
    cfg.warm_check_rollouts = 20;
    cfg
}

#[test]
fn smoke_run_produces_contiguous_finite_logs() {
    let cfg = small_cfg();
    let res = sbsrl_run(&cfg, 17, &mut |_| {}).unwrap();
    assert!(!res.episodes.is_empty());
    for (i, row) in res.episodes.iter().enumerate() {
        assert_eq!(row.episode, i);
        for (name, v) in [
            ("planned_score", row.planned_score),
            ("planned_j_s", row.planned_j_s),
            ("j_r_true", row.j_r_true),
            ("j_c_true", row.j_c_true),
            ("max_inst_cost", row.max_inst_cost),
            ("beta_n", row.beta_n),
            ("d_sigma_n", row.d_sigma_n),
            ("delta_zeta", row.delta_zeta),
            ("info_gain", row.info_gain),
        ] {
            assert!(v.is_finite(), "episode {i}: {name} = {v}");
        }
        assert_eq!(row.plan.horizon(), cfg.env.horizon);
    }
    match res.termination {
        TerminationReason::MaxEpisodes => {
            assert_eq!(res.episodes.len(), cfg.max_episodes)
        }
        TerminationReason::ExplorationInfeasible => {
            assert!(res.episodes.last().unwrap().terminated)
        }
    }
    let expected_len = (cfg.offline_episodes
        + res.episodes.iter().filter(|e| !e.terminated).count())
        * cfg.env.horizon;
    assert_eq!(res.dataset.len(), expected_len);
}

#[test]
fn mean_baseline_equals_collapsed_single_sample_run() {
    let mut collapsed = small_cfg();
    collapsed.m_samples = MSpec::Fixed(1);
    collapsed.beta_scale = 0.0;
    collapsed.zeta = 0.0;
    collapsed.resample_each_episode = false;
    let baseline = small_cfg();

    let a = sbsrl_run(&collapsed, 23, &mut |_| {}).unwrap();
    let b = baseline_mean_run(&baseline, 23, &mut |_| {}).unwrap();
    assert_eq!(a.episodes.len(), b.episodes.len());
    assert_eq!(a.termination, b.termination);
    for (x, y) in a.episodes.iter().zip(&b.episodes) {
        assert_eq!(x.plan.actions, y.plan.actions, "episode {}", x.episode);
        assert_eq!(x.j_r_true.to_bits(), y.j_r_true.to_bits());
        assert_eq!(x.j_c_true.to_bits(), y.j_c_true.to_bits());
        assert_eq!(x.planned_score.to_bits(), y.planned_score.to_bits());
        assert_eq!(x.planned_j_s.to_bits(), y.planned_j_s.to_bits());
        assert_eq!(x.feasible_safe, y.feasible_safe);
        assert_eq!(x.feasible_explore, y.feasible_explore);
    }
    assert_eq!(a.greedy_plan.actions, b.greedy_plan.actions);
}

#[test]
fn posterior_uncertainty_shrinks_as_data_accumulates() {
    let cfg = small_cfg();
    let res = sbsrl_run(&cfg, 29, &mut |_| {}).unwrap();
    let executed = res.episodes.iter().filter(|e| !e.terminated).count();
    assert!(executed >= 2, "need at least two executed episodes");

    // Probe grid: encodings along a torque sweep at fixed states.
    let env = &cfg.env;
    let probes: Vec<Vec<f64>> = (0..12)
        .map(|i| {
            let th = std::f64::consts::PI - 0.6 + 0.1 * i as f64;
            env.encode(&[th, -0.4 + 0.07 * i as f64], &[-2.0 + 0.33 * i as f64])
        })
        .collect();

    let mut last: Option<Vec<f64>> = None;
    for k in 0..=executed {
        let n_prefix = (cfg.offline_episodes + k) * env.horizon;
        let gp = GpPosterior::fit(
            cfg.prior.clone(),
            cfg.kernel.clone(),
            env.d_x,
            &res.dataset[..n_prefix],
        )
        .unwrap();
        let sigmas: Vec<f64> = probes.iter().map(|z| gp.mean_and_std(z).1).collect();
        if let Some(prev) = &last {
            for (i, (now, before)) in sigmas.iter().zip(prev).enumerate() {
                assert!(
                    *now <= before + 1e-8,
                    "probe {i}: sigma rose {before} -> {now} at prefix {k}"
                );
            }
        }
        last = Some(sigmas);
    }
}
