//! Return-gap bound between two dynamics models whose outputs differ by at
//! most eta everywhere: for any bounded stage function g in [0, G_max],
//! |J_g(pi, f) - J_g(pi, f')| <= T * G_max * T * eta / sigma_w, checked by
//! Monte Carlo with a 3-SE slack on pendulum.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sbsrl::envs::EnvSpec;
use sbsrl::rng;

/// Mean and standard error over rollouts.
fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

/// Rolls `plan` under dynamics `f* + bias` with process noise; returns the
/// reward and cost returns.
fn rollout_perturbed(
    env: &EnvSpec,
    plan: &[Vec<f64>],
    eta: f64,
    phase: f64,
    r: &mut ChaCha8Rng,
) -> (f64, f64) {
    let mut x = env.reset(r);
    let (mut j_r, mut j_c) = (0.0, 0.0);
    for a in plan {
        j_r += env.reward(&x, a);
        j_c += env.cost(&x, a);
        let mut next = env.true_dynamics(&x, a);
        for (j, nx) in next.iter_mut().enumerate() {
            // Smooth state-dependent bias with |bias| <= eta per coordinate.
            *nx += eta * (3.0 * x[0] + phase + j as f64).sin();
            let e: f64 = StandardNormal.sample(r);
            *nx += env.noise_std * e;
        }
        x = next;
    }
    (j_r, j_c)
}

#[test]
fn return_gap_respects_eta_bound_on_all_trials() {
    let env = EnvSpec::pendulum();
    let t = env.horizon as f64;
    let n_rollouts = 30;
    let mut failures = Vec::new();
    for trial in 0..100u64 {
        let mut setup = rng::derive_rng(555, &[0x51a, trial, 0]);
        // eta log-uniform in [1e-6, 3e-5]; keeps the bound non-vacuous
        // against returns of scale <= T * G_max.
        let eta = 1e-6 * (30f64).powf(setup.gen::<f64>());
        let phase = setup.gen::<f64>() * std::f64::consts::TAU;
        let plan: Vec<Vec<f64>> = (0..env.horizon)
            .map(|_| vec![setup.gen_range(-2.0..2.0)])
            .collect();

        let runs = |which: u64, eta: f64| -> (Vec<f64>, Vec<f64>) {
            let (mut rs, mut cs) = (Vec::new(), Vec::new());
            for i in 0..n_rollouts {
                let mut r = rng::derive_rng(555, &[0x51a, trial, 1 + which, i]);
                let (jr, jc) = rollout_perturbed(&env, &plan, eta, phase, &mut r);
                rs.push(jr);
                cs.push(jc);
            }
            (rs, cs)
        };
        let (r0, c0) = runs(0, 0.0);
        let (r1, c1) = runs(1, eta);

        for (g_max, a, b, name) in [
            (env.r_max(), &r0, &r1, "reward"),
            (env.c_max(), &c0, &c1, "cost"),
        ] {
            let (m0, se0) = mean_se(a);
            let (m1, se1) = mean_se(b);
            let gap = (m0 - m1).abs();
            let bound =
                t * g_max * t * eta / env.noise_std + 3.0 * (se0 * se0 + se1 * se1).sqrt();
            if gap > bound {
                failures.push(format!(
                    "trial {trial} {name}: gap {gap:.4} > bound {bound:.4} (eta {eta:.2e})"
                ));
            }
        }
    }
    assert!(failures.is_empty(), "{} failures:\n{}", failures.len(), failures.join("\n"));
}
