//! The episodic safe-exploration loop: schedules, sample maintenance,
//! feasibility probing, planning, execution, and refitting, with termination
//! on exploration infeasibility and a final greedy policy.
//!
//! `baseline_mean_run` shares the entire code path and differs only in how
//! costs are estimated (posterior mean instead of per-sample enforcement)
//! and in dropping the constraint tightening, which makes the documented
//! equivalence with a mean-collapsed single sample exact.

use std::sync::Arc;
use std::time::Instant;

use crate::envs::{evaluate_policy_true, EnvSpec};
use crate::error::{Error, Result};
use crate::gp::{calibration_beta, GpPosterior, PriorSpec};
use crate::kernel::KernelSpec;
use crate::planner::{
    estimate_returns, feasibility_probe, icem_plan, penalized_score, ActionPlan, IcemParams,
    McConfig, PenaltyWeights, PlanModels, ReturnEstimates, RolloutMode,
};
use crate::rng;
use crate::sampler::{
    exploration_threshold, sample_budget, small_ball_exponent, tightening_delta, BudgetInputs,
    DynamicsSample, SampleEngine, SmallBallConfig, VarianceSketch,
};
use crate::QueryPoint;

/// How many sampled dynamics models to maintain.
#[derive(Debug, Clone)]
pub enum MSpec {
    Fixed(usize),
    /// Derive M from the sample-budget bound, capped.
    Auto { cap: usize },
}

/// Exploration-threshold schedule.
#[derive(Debug, Clone)]
pub enum DsigmaMode {
    /// `d_sigma^n = eps * sigma_w / (2 G_max T beta_n)`.
    Theory { eps: f64 },
    /// Constant threshold for all episodes.
    Fixed(f64),
    /// Exploration constraint disabled.
    Zero,
}

/// Full configuration of one run.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub env: EnvSpec,
    pub kernel: KernelSpec,
    pub prior: PriorSpec,
    /// Failure probability, shared by calibration and the sample budget.
    pub delta: f64,
    /// Sample closeness threshold; also sets the constraint tightening.
    pub zeta: f64,
    /// Assumption margin for the warm-start plan, when known.
    pub margin: Option<f64>,
    pub m_samples: MSpec,
    pub dsigma: DsigmaMode,
    /// Redraw posterior samples every episode instead of truncating prior
    /// samples against accumulated confidence bands.
    pub resample_each_episode: bool,
    pub engine: SampleEngine,
    /// Keep only the first and the last `w` truncation layers per sample.
    pub layer_window: Option<usize>,
    /// Scales every truncation radius; 0 collapses samples onto the mean.
    pub beta_scale: f64,
    pub max_episodes: usize,
    /// Stabilizer episodes rolled on the true env before episode 0.
    pub offline_episodes: usize,
    pub planner: IcemParams,
    pub probe_planner: IcemParams,
    pub mc: McConfig,
    pub weights: Option<PenaltyWeights>,
    /// Slack used by feasibility comparisons.
    pub probe_tol: f64,
    /// Open-loop warm-start plan; default is the PD stabilizer rolled on the
    /// prior mean.
    pub warm_plan: Option<ActionPlan>,
    /// Rollouts used to certify the warm plan at validation time.
    pub warm_check_rollouts: usize,
}

impl RunConfig {
    /// Defaults mirroring the experiment setup: posterior resampling with a
    /// fixed sample count and no exploration constraint. The property-suite
    /// (theory) mode flips `resample_each_episode` off and sets schedules.
    pub fn new(env: EnvSpec, kernel: KernelSpec, prior: PriorSpec) -> Self {
        let planner = IcemParams::default();
        let probe_planner = IcemParams {
            iterations: (planner.iterations / 2).max(2),
            population: (planner.population / 2).max(8),
            ..planner.clone()
        };
        RunConfig {
            env,
            kernel,
            prior,
            delta: 0.1,
            zeta: 0.0,
            margin: None,
            m_samples: MSpec::Fixed(30),
            dsigma: DsigmaMode::Zero,
            resample_each_episode: true,
            engine: SampleEngine::RandomFourier { n_features: 256 },
            layer_window: None,
            beta_scale: 1.0,
            max_episodes: 30,
            offline_episodes: 0,
            planner,
            probe_planner,
            mc: McConfig::default(),
            weights: None,
            probe_tol: 1e-6,
            warm_plan: None,
            warm_check_rollouts: 50,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.prior.validate()?;
        if self.kernel.input_dim() != self.env.query_dim() {
            return Err(Error::DimensionMismatch {
                context: "kernel input vs env encoding",
                expected: self.env.query_dim(),
                got: self.kernel.input_dim(),
            });
        }
        if !(self.delta > 0.0 && self.delta < 0.5) {
            return Err(Error::invalid("delta", "must lie in (0, 1/2)"));
        }
        if !(self.zeta >= 0.0 && self.zeta.is_finite()) {
            return Err(Error::invalid("zeta", "must be >= 0"));
        }
        if let Some(margin) = self.margin {
            if !(margin > 0.0 && margin.is_finite()) {
                return Err(Error::invalid("margin", "must be > 0"));
            }
            // Closeness threshold bound from the termination requirement.
            let t = self.env.horizon as f64;
            let bound = self.env.noise_std * margin
                / ((self.env.d_x as f64).sqrt() * t * t * self.env.c_max());
            if self.env.noise_std > 0.0 && !(self.zeta > 0.0 && self.zeta < bound) {
                return Err(Error::invalid(
                    "zeta",
                    format!("must lie in (0, {bound:.3e}) for the configured margin"),
                ));
            }
        }
        match self.m_samples {
            MSpec::Fixed(m) if m == 0 => {
                return Err(Error::invalid("m_samples", "must be >= 1"));
            }
            MSpec::Auto { cap } if cap == 0 => {
                return Err(Error::invalid("m_samples.cap", "must be >= 1"));
            }
            MSpec::Auto { .. } if self.zeta <= 0.0 => {
                return Err(Error::invalid("zeta", "auto sample budget needs zeta > 0"));
            }
            _ => {}
        }
        if let DsigmaMode::Theory { eps } = self.dsigma {
            if !(eps > 0.0 && eps.is_finite()) {
                return Err(Error::invalid("dsigma.eps", "must be > 0"));
            }
        }
        if let DsigmaMode::Fixed(v) = self.dsigma {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid("dsigma.fixed", "must be >= 0"));
            }
        }
        if self.max_episodes == 0 {
            return Err(Error::invalid("max_episodes", "must be >= 1"));
        }
        if !(self.beta_scale >= 0.0 && self.beta_scale.is_finite()) {
            return Err(Error::invalid("beta_scale", "must be >= 0"));
        }
        if self.warm_check_rollouts == 0 {
            return Err(Error::invalid("warm_check_rollouts", "must be >= 1"));
        }
        self.planner.validate()?;
        self.probe_planner.validate()?;
        self.mc.validate()?;
        if let Some(w) = self.weights {
            if !(w.lambda_c >= 0.0 && w.lambda_sigma >= 0.0) {
                return Err(Error::invalid("weights", "must be >= 0"));
            }
        }
        Ok(())
    }

    fn weights(&self) -> PenaltyWeights {
        self.weights.unwrap_or_else(|| PenaltyWeights::for_env(&self.env))
    }
}

/// Per-episode record.
#[derive(Debug, Clone)]
pub struct EpisodeLog {
    pub episode: usize,
    /// The plan executed this episode (the greedy plan on the final row).
    pub plan: ActionPlan,
    pub planned_score: f64,
    pub planned_j_r: f64,
    pub planned_j_c: Vec<f64>,
    pub planned_j_s: f64,
    pub j_r_true: f64,
    pub j_c_true: f64,
    pub max_inst_cost: f64,
    pub beta_n: f64,
    pub d_sigma_n: f64,
    pub delta_zeta: f64,
    pub feasible_safe: bool,
    pub feasible_explore: bool,
    /// True only on the final row of a terminated run.
    pub terminated: bool,
    /// Planner returned no valid candidate; the warm plan was executed.
    pub fallback_warm: bool,
    pub n_data: usize,
    pub info_gain: f64,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TerminationReason {
    ExplorationInfeasible,
    MaxEpisodes,
}

impl std::fmt::Display for TerminationReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TerminationReason::ExplorationInfeasible => write!(f, "exploration-infeasible"),
            TerminationReason::MaxEpisodes => write!(f, "max-episodes"),
        }
    }
}

/// Outcome of one seeded run.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub seed: u64,
    pub episodes: Vec<EpisodeLog>,
    pub termination: TerminationReason,
    pub greedy_plan: ActionPlan,
    pub greedy_planned_score: f64,
    /// Final dataset in visitation order (offline prefix, then episodes).
    pub dataset: Vec<(QueryPoint, Vec<f64>)>,
    pub warm_plan: ActionPlan,
}

enum LoopKind {
    Sbsrl,
    MeanBaseline,
}

/// Exploration-threshold schedule value for episode `n`.
pub fn dsigma_schedule(cfg: &RunConfig, _n: usize, beta_n: f64) -> Result<f64> {
    match cfg.dsigma {
        DsigmaMode::Theory { eps } => exploration_threshold(
            eps,
            cfg.env.noise_std,
            cfg.env.g_max(),
            cfg.env.horizon,
            beta_n,
        ),
        DsigmaMode::Fixed(v) => Ok(v),
        DsigmaMode::Zero => Ok(0.0),
    }
}

/// Rolls the PD stabilizer open-loop on the prior mean dynamics.
pub fn default_warm_plan(cfg: &RunConfig) -> Result<ActionPlan> {
    let gp0 = GpPosterior::prior_only(cfg.prior.clone(), cfg.kernel.clone(), cfg.env.d_x)?;
    let mut x = cfg.env.rho0.mean.clone();
    let mut actions = Vec::with_capacity(cfg.env.horizon);
    for _ in 0..cfg.env.horizon {
        let a = cfg.env.pd_action(&x);
        let z = cfg.env.encode(&x, &a);
        let t = gp0.posterior_mean(&z);
        x = cfg.env.next_from_target(&x, &t);
        actions.push(a);
    }
    Ok(ActionPlan { actions })
}

/// Runs Algorithm 1 for one seed, emitting each episode through `sink`.
pub fn sbsrl_run(
    cfg: &RunConfig,
    seed: u64,
    sink: &mut dyn FnMut(&EpisodeLog),
) -> Result<RunResult> {
    run_inner(cfg, seed, sink, LoopKind::Sbsrl)
}

/// The unsafe comparison: identical loop, but the cost constraint is
/// enforced on a single posterior-mean estimate and the tightening is
/// dropped.
pub fn baseline_mean_run(
    cfg: &RunConfig,
    seed: u64,
    sink: &mut dyn FnMut(&EpisodeLog),
) -> Result<RunResult> {
    run_inner(cfg, seed, sink, LoopKind::MeanBaseline)
}

fn run_inner(
    cfg: &RunConfig,
    seed: u64,
    sink: &mut dyn FnMut(&EpisodeLog),
    kind: LoopKind,
) -> Result<RunResult> {
    cfg.validate()?;
    let env = &cfg.env;
    let d = env.cost_budget;
    let weights = cfg.weights();
    let mc = match kind {
        LoopKind::Sbsrl => cfg.mc.clone(),
        LoopKind::MeanBaseline => McConfig {
            mode: RolloutMode::MeanOnly,
            ..cfg.mc.clone()
        },
    };
    let zeta = match kind {
        LoopKind::Sbsrl => cfg.zeta,
        LoopKind::MeanBaseline => 0.0,
    };
    let delta_zeta = tightening_delta(
        zeta,
        env.d_x,
        env.horizon,
        env.c_max(),
        env.noise_std.max(f64::MIN_POSITIVE),
    )?;

    // Warm-start plan: the stand-in for the prior-safe policy set. Certify
    // its cost return before anything else runs.
    let warm = match &cfg.warm_plan {
        Some(p) => {
            let mut p = p.clone();
            p.clamp_to(env);
            if p.horizon() != env.horizon {
                return Err(Error::invalid("warm_plan", "horizon mismatch"));
            }
            p
        }
        None => default_warm_plan(cfg)?,
    };
    {
        let eval = evaluate_policy_true(
            env,
            |t, _| warm.actions[t].clone(),
            cfg.warm_check_rollouts,
            seed,
            u64::MAX,
        );
        let required = d - cfg.margin.unwrap_or(delta_zeta);
        if eval.j_c_mean() > required {
            return Err(Error::ConfigInvalid(format!(
                "warm plan cost return {:.3} exceeds required budget {:.3}",
                eval.j_c_mean(),
                required
            )));
        }
    }

    // Offline stabilizer episodes seed the dataset.
    let mut data: Vec<(QueryPoint, Vec<f64>)> = Vec::new();
    for i in 0..cfg.offline_episodes {
        let mut r_reset = rng::derive_rng(seed, &[rng::purpose::OFFLINE, i as u64, 0]);
        let mut r_noise = rng::derive_rng(seed, &[rng::purpose::OFFLINE, i as u64, 1]);
        let mut x = env.reset(&mut r_reset);
        for _ in 0..env.horizon {
            let a = env.pd_action(&x);
            let tr = env.step(&x, &a, &mut r_noise);
            data.push((env.encode(&x, &a), env.target(&x, &tr.next)));
            x = tr.next;
        }
    }

    let m = match cfg.m_samples {
        MSpec::Fixed(m) => m,
        MSpec::Auto { cap } => {
            let ball = SmallBallConfig::default_for_dim(env.query_dim());
            let phi = small_ball_exponent(&cfg.kernel, cfg.zeta, &ball)?;
            let budget = sample_budget(&BudgetInputs {
                delta: cfg.delta,
                zeta: cfg.zeta,
                rkhs_bound: cfg.prior.rkhs_bound,
                d_x: env.d_x,
                small_ball_exponent: phi,
                cap: cap as u64,
            })?;
            budget.m as usize
        }
    };

    let prior_base = Arc::new(GpPosterior::prior_only(
        cfg.prior.clone(),
        cfg.kernel.clone(),
        env.d_x,
    )?);

    let mut samples: Vec<DynamicsSample> = Vec::new();
    let mut episodes: Vec<EpisodeLog> = Vec::new();
    let mut prev_plan = warm.clone();
    let mut termination = TerminationReason::MaxEpisodes;
    let mut gp = if data.is_empty() {
        Arc::clone(&prior_base)
    } else {
        Arc::new(GpPosterior::fit(
            cfg.prior.clone(),
            cfg.kernel.clone(),
            env.d_x,
            &data,
        )?)
    };
    let mut final_probe_js = 0.0;
    let mut beta_n = 0.0;
    let mut d_sigma_n = 0.0;

    // With the feature engine, width queries in planning hot paths go
    // through a sketch of the current posterior, rebuilt after each refit
    // on a fixed feature basis.
    let sketch_for = |gp: &GpPosterior| -> Result<Option<Arc<VarianceSketch>>> {
        if std::env::var("SBSRL_NO_SKETCH").is_ok() {
            return Ok(None);
        }
        match &cfg.engine {
            SampleEngine::RandomFourier { n_features } => Ok(Some(Arc::new(
                VarianceSketch::build(gp, *n_features, seed)?,
            ))),
            SampleEngine::LazyPathwise => Ok(None),
        }
    };

    let mut n = 0usize;
    while n < cfg.max_episodes {
        let t_start = Instant::now();

        // Schedules from the current posterior.
        let gamma_n = gp.data_info_gain();
        beta_n = calibration_beta(&cfg.prior, cfg.delta, gamma_n, env.d_x)?;
        d_sigma_n = dsigma_schedule(cfg, n, beta_n)?;
        let sketch = sketch_for(&gp)?;

        // Sample maintenance: draw once and truncate against the fresh
        // band, or redraw from the posterior every episode.
        if matches!(kind, LoopKind::Sbsrl) && !matches!(mc.mode, RolloutMode::Ts1 { .. }) {
            if cfg.resample_each_episode {
                samples.clear();
                for i in 0..m {
                    let s_seed =
                        rng::derive_seed(seed, &[rng::purpose::SAMPLE_DRAW, n as u64, i as u64]);
                    samples.push(DynamicsSample::draw(
                        Arc::clone(&gp),
                        cfg.engine.clone(),
                        i,
                        s_seed,
                    )?);
                }
            } else {
                if samples.is_empty() {
                    for i in 0..m {
                        let s_seed =
                            rng::derive_seed(seed, &[rng::purpose::SAMPLE_DRAW, 0, i as u64]);
                        let mut s = DynamicsSample::draw(
                            Arc::clone(&prior_base),
                            cfg.engine.clone(),
                            i,
                            s_seed,
                        )?;
                        s.set_layer_window(cfg.layer_window);
                        s.truncate(
                            Arc::clone(&prior_base),
                            cfg.beta_scale * cfg.prior.rkhs_bound,
                        )?;
                        samples.push(s);
                    }
                }
                for s in samples.iter_mut() {
                    s.truncate_with_sketch(
                        Arc::clone(&gp),
                        cfg.beta_scale * beta_n,
                        sketch.clone(),
                    )?;
                }
            }
        }

        // Feasibility probe: most informative plan that is safe under every
        // sampled model.
        let probe = feasibility_probe(
            env,
            &gp,
            sketch.as_deref(),
            &mut samples,
            &prev_plan,
            &cfg.probe_planner,
            &mc,
            d - delta_zeta,
            d_sigma_n,
            cfg.probe_tol,
            weights,
            seed,
            &[rng::purpose::ICEM, n as u64, 0],
        )?;
        final_probe_js = probe.best_safe_uncertainty;

        if !probe.exploration_feasible {
            termination = TerminationReason::ExplorationInfeasible;
            break;
        }

        // Plan: maximize reward subject to per-sample safety and, when
        // active, the exploration constraint.
        let d_sigma_opt = if d_sigma_n > 0.0 { Some(d_sigma_n) } else { None };
        let plan_warm = if d_sigma_opt.is_some() {
            &probe.best_plan
        } else {
            &prev_plan
        };
        let mut best_plan_est: Option<(f64, ReturnEstimates)> = None;
        let plan_res = {
            let mut models = PlanModels::Learned {
                gp: &gp,
                samples: &mut samples,
                sketch: sketch.as_deref(),
            };
            let mut full_tags = vec![rng::purpose::ICEM, n as u64, 1, 0];
            let mut score = |p: &ActionPlan, cand: u64| -> f64 {
                full_tags[3] = cand;
                let est = estimate_returns(env, &mut models, p, &mc, seed, &full_tags);
                let s = penalized_score(&est, d - delta_zeta, d_sigma_opt, weights);
                let improved = match &best_plan_est {
                    Some((b, _)) => s > *b,
                    None => s > f64::NEG_INFINITY,
                };
                if improved {
                    best_plan_est = Some((s, est));
                }
                s
            };
            icem_plan(
                env,
                &cfg.planner,
                plan_warm,
                &mut score,
                seed,
                &[rng::purpose::ICEM, n as u64, 1],
            )?
        };

        let (mut plan, fallback_warm) = if plan_res.all_invalid {
            (warm.clone(), true)
        } else {
            (plan_res.plan, false)
        };
        let mut planned_score = plan_res.score;
        let mut planned = match best_plan_est {
            Some((_, est)) => est,
            None => ReturnEstimates {
                j_r: 0.0,
                j_s: 0.0,
                j_c: Vec::new(),
                valid: false,
            },
        };
        // If the reward-optimal plan slipped below the exploration
        // threshold (penalty trade-off), fall back to the probe's plan,
        // which satisfies it by construction.
        if let Some(ds) = d_sigma_opt {
            if !fallback_warm && planned.j_s + cfg.probe_tol < ds {
                if let Some(est) = &probe.best_estimates {
                    plan = probe.best_plan.clone();
                    planned = est.clone();
                    planned_score = penalized_score(&planned, d - delta_zeta, d_sigma_opt, weights);
                }
            }
        }

        // Execute once on the true environment and collect transitions.
        let mut r_reset = rng::derive_rng(seed, &[rng::purpose::ENV_RESET, n as u64]);
        let mut r_noise = rng::derive_rng(seed, &[rng::purpose::ENV_NOISE, n as u64]);
        let mut x = env.reset(&mut r_reset);
        let mut j_r_true = 0.0;
        let mut j_c_true = 0.0;
        let mut max_inst_cost = 0.0f64;
        for a in &plan.actions {
            let tr = env.step(&x, a, &mut r_noise);
            j_r_true += tr.reward;
            j_c_true += tr.cost;
            max_inst_cost = max_inst_cost.max(tr.cost);
            data.push((env.encode(&x, a), env.target(&x, &tr.next)));
            x = tr.next;
        }

        let log = EpisodeLog {
            episode: n,
            plan: plan.clone(),
            planned_score,
            planned_j_r: planned.j_r,
            planned_j_c: planned.j_c.clone(),
            planned_j_s: planned.j_s,
            j_r_true,
            j_c_true,
            max_inst_cost,
            beta_n,
            d_sigma_n,
            delta_zeta,
            feasible_safe: probe.safe_feasible,
            feasible_explore: probe.exploration_feasible,
            terminated: false,
            fallback_warm,
            n_data: data.len(),
            info_gain: gamma_n,
            wall_time_s: t_start.elapsed().as_secs_f64(),
        };
        sink(&log);
        episodes.push(log);
        prev_plan = plan;

        // Refit on everything observed so far.
        gp = Arc::new(GpPosterior::fit(
            cfg.prior.clone(),
            cfg.kernel.clone(),
            env.d_x,
            &data,
        )?);
        n += 1;
    }

    // Greedy final policy: safety penalty only, exploration constraint
    // removed. When the loop exhausted max_episodes the samples still need
    // one maintenance pass against the final refit.
    let final_sketch = sketch_for(&gp)?;
    if termination == TerminationReason::MaxEpisodes
        && matches!(kind, LoopKind::Sbsrl)
        && !matches!(mc.mode, RolloutMode::Ts1 { .. })
    {
        let gamma_n = gp.data_info_gain();
        beta_n = calibration_beta(&cfg.prior, cfg.delta, gamma_n, env.d_x)?;
        if cfg.resample_each_episode {
            samples.clear();
            for i in 0..m {
                let s_seed =
                    rng::derive_seed(seed, &[rng::purpose::SAMPLE_DRAW, n as u64, i as u64]);
                samples.push(DynamicsSample::draw(
                    Arc::clone(&gp),
                    cfg.engine.clone(),
                    i,
                    s_seed,
                )?);
            }
        } else if !samples.is_empty() {
            for s in samples.iter_mut() {
                s.truncate_with_sketch(
                    Arc::clone(&gp),
                    cfg.beta_scale * beta_n,
                    final_sketch.clone(),
                )?;
            }
        }
    }

    let greedy_res = {
        let mut models = PlanModels::Learned {
            gp: &gp,
            samples: &mut samples,
            sketch: final_sketch.as_deref(),
        };
        let mut full_tags = vec![rng::purpose::ICEM, n as u64, 2, 0];
        let mut score = |p: &ActionPlan, cand: u64| -> f64 {
            full_tags[3] = cand;
            let est = estimate_returns(env, &mut models, p, &mc, seed, &full_tags);
            penalized_score(&est, d - delta_zeta, None, weights)
        };
        icem_plan(
            env,
            &cfg.planner,
            &prev_plan,
            &mut score,
            seed,
            &[rng::purpose::ICEM, n as u64, 2],
        )?
    };
    let greedy_plan = if greedy_res.all_invalid {
        warm.clone()
    } else {
        greedy_res.plan
    };

    // A terminated run records one final row: the greedy plan rolled once.
    if termination == TerminationReason::ExplorationInfeasible {
        let t_start = Instant::now();
        let mut r_reset = rng::derive_rng(seed, &[rng::purpose::ENV_RESET, n as u64]);
        let mut r_noise = rng::derive_rng(seed, &[rng::purpose::ENV_NOISE, n as u64]);
        let mut x = env.reset(&mut r_reset);
        let mut j_r_true = 0.0;
        let mut j_c_true = 0.0;
        let mut max_inst_cost = 0.0f64;
        for a in &greedy_plan.actions {
            let tr = env.step(&x, a, &mut r_noise);
            j_r_true += tr.reward;
            j_c_true += tr.cost;
            max_inst_cost = max_inst_cost.max(tr.cost);
            x = tr.next;
        }
        let log = EpisodeLog {
            episode: n,
            plan: greedy_plan.clone(),
            planned_score: greedy_res.score,
            planned_j_r: 0.0,
            planned_j_c: Vec::new(),
            planned_j_s: final_probe_js,
            j_r_true,
            j_c_true,
            max_inst_cost,
            beta_n,
            d_sigma_n,
            delta_zeta,
            feasible_safe: false,
            feasible_explore: false,
            terminated: true,
            fallback_warm: greedy_res.all_invalid,
            n_data: data.len(),
            info_gain: gp.data_info_gain(),
            wall_time_s: t_start.elapsed().as_secs_f64(),
        };
        sink(&log);
        episodes.push(log);
    }

    Ok(RunResult {
        seed,
        episodes,
        termination,
        greedy_plan,
        greedy_planned_score: greedy_res.score,
        dataset: data,
        warm_plan: warm,
    })
}

/// Plans with the true dynamics under the same budget: the in-repo oracle
/// used as a performance reference.
pub fn oracle_reference_plan(
    env: &EnvSpec,
    params: &IcemParams,
    mc: &McConfig,
    seed: u64,
) -> Result<(ActionPlan, f64)> {
    let warm = ActionPlan::constant(vec![0.0; env.d_a], env.horizon);
    let weights = PenaltyWeights::for_env(env);
    let d = env.cost_budget;
    let mut score = |p: &ActionPlan, cand: u64| -> f64 {
        let mut models = PlanModels::TrueEnv;
        let est = estimate_returns(env, &mut models, p, mc, seed, &[rng::purpose::ICEM, 0, 3, cand]);
        penalized_score(&est, d, None, weights)
    };
    let res = icem_plan(
        env,
        params,
        &warm,
        &mut score,
        seed,
        &[rng::purpose::ICEM, 0, 3],
    )?;
    Ok((res.plan, res.score))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp::MeanFn;
    use crate::kernel::{KernelKind, KernelSpec};

    fn tiny_cfg() -> RunConfig {
        let mut env = EnvSpec::pendulum();
        env.horizon = 10;
        let kernel =
            KernelSpec::new(KernelKind::SquaredExp, vec![1.0, 1.0, 2.0, 2.0], 1.0).unwrap();
        let prior = PriorSpec {
            mean: MeanFn::Zero,
            rkhs_bound: 2.0,
            noise_std: env.noise_std,
        };
        let mut cfg = RunConfig::new(env, kernel, prior);
        cfg.planner = IcemParams {
            population: 8,
            iterations: 2,
            ..IcemParams::default()
        };
        cfg.probe_planner = cfg.planner.clone();
        cfg.mc = McConfig {
            n_mean_rollouts: 1,
            n_cost_rollouts: 1,
            ..McConfig::default()
        };
        cfg.m_samples = MSpec::Fixed(2);
        cfg.engine = SampleEngine::RandomFourier { n_features: 16 };
        cfg.max_episodes = 2;
        // Without stabilizer data the prior samples are so loose that no
        // plan measures safe and every run stops at episode 0.
        cfg.offline_episodes = 1;
        cfg.warm_check_rollouts = 5;
        cfg
    }

    #[test]
    fn zero_mode_single_episode_reaches_max_episodes() {
        let mut cfg = tiny_cfg();
        cfg.max_episodes = 1;
        cfg.dsigma = DsigmaMode::Zero;
        let mut rows = 0;
        let res = sbsrl_run(&cfg, 3, &mut |_| rows += 1).unwrap();
        assert_eq!(res.termination, TerminationReason::MaxEpisodes);
        assert_eq!(res.episodes.len(), 1);
        assert_eq!(rows, 1);
        assert!(!res.episodes[0].terminated);
        assert_eq!(res.greedy_plan.horizon(), cfg.env.horizon);
    }

    #[test]
    fn unreachable_threshold_terminates_at_episode_zero() {
        let mut cfg = tiny_cfg();
        cfg.dsigma = DsigmaMode::Fixed(1e9);
        cfg.max_episodes = 5;
        let res = sbsrl_run(&cfg, 4, &mut |_| {}).unwrap();
        assert_eq!(res.termination, TerminationReason::ExplorationInfeasible);
        // only the terminal greedy row
        assert_eq!(res.episodes.len(), 1);
        let row = &res.episodes[0];
        assert_eq!(row.episode, 0);
        assert!(row.terminated);
        assert!(!row.feasible_explore);
    }

    #[test]
    fn episode_indices_are_contiguous_and_logged_through_sink() {
        let mut cfg = tiny_cfg();
        cfg.max_episodes = 3;
        let mut seen = Vec::new();
        let res = sbsrl_run(&cfg, 9, &mut |log| seen.push(log.episode)).unwrap();
        assert_eq!(seen, (0..res.episodes.len()).collect::<Vec<_>>());
        for (i, e) in res.episodes.iter().enumerate() {
            assert_eq!(e.episode, i);
            assert!(e.n_data > 0);
        }
    }

    #[test]
    fn info_gain_is_nondecreasing_across_episodes() {
        let mut cfg = tiny_cfg();
        cfg.max_episodes = 4;
        let res = sbsrl_run(&cfg, 7, &mut |_| {}).unwrap();
        let gains: Vec<f64> = res.episodes.iter().map(|e| e.info_gain).collect();
        for w in gains.windows(2) {
            assert!(w[1] >= w[0] - 1e-9, "info gain decreased: {gains:?}");
        }
    }

    #[test]
    fn runs_are_deterministic_per_seed() {
        let cfg = tiny_cfg();
        let a = sbsrl_run(&cfg, 11, &mut |_| {}).unwrap();
        let b = sbsrl_run(&cfg, 11, &mut |_| {}).unwrap();
        assert_eq!(a.episodes.len(), b.episodes.len());
        for (ea, eb) in a.episodes.iter().zip(&b.episodes) {
            assert_eq!(ea.plan, eb.plan);
            assert_eq!(ea.j_r_true, eb.j_r_true);
            assert_eq!(ea.j_c_true, eb.j_c_true);
            assert_eq!(ea.planned_j_s, eb.planned_j_s);
        }
        assert_eq!(a.greedy_plan, b.greedy_plan);
        let c = sbsrl_run(&cfg, 12, &mut |_| {}).unwrap();
        assert!(
            a.episodes[0].j_r_true != c.episodes[0].j_r_true
                || a.episodes[0].plan != c.episodes[0].plan,
            "different seeds produced identical runs"
        );
    }

    #[test]
    fn baseline_equals_mean_collapsed_single_sample() {
        // The documented equivalence: one sample truncated with beta = 0 at
        // every episode evaluates to the posterior mean exactly, so the full
        // loop reproduces the mean-only baseline log for log.
        let mut cfg = tiny_cfg();
        cfg.max_episodes = 3;
        cfg.m_samples = MSpec::Fixed(1);
        cfg.beta_scale = 0.0;
        cfg.zeta = 0.0;
        cfg.resample_each_episode = false;
        cfg.dsigma = DsigmaMode::Zero;
        let a = sbsrl_run(&cfg, 21, &mut |_| {}).unwrap();
        let b = baseline_mean_run(&cfg, 21, &mut |_| {}).unwrap();
        assert_eq!(a.termination, b.termination);
        assert_eq!(a.episodes.len(), b.episodes.len());
        for (ea, eb) in a.episodes.iter().zip(&b.episodes) {
            assert_eq!(ea.plan, eb.plan);
            assert_eq!(ea.planned_j_c, eb.planned_j_c);
            assert_eq!(ea.planned_j_s, eb.planned_j_s);
            assert_eq!(ea.j_r_true, eb.j_r_true);
            assert_eq!(ea.j_c_true, eb.j_c_true);
            assert_eq!(ea.feasible_safe, eb.feasible_safe);
        }
        assert_eq!(a.greedy_plan, b.greedy_plan);
    }

    #[test]
    fn dsigma_schedule_modes() {
        let mut cfg = tiny_cfg();
        cfg.dsigma = DsigmaMode::Zero;
        assert_eq!(dsigma_schedule(&cfg, 0, 2.0).unwrap(), 0.0);
        cfg.dsigma = DsigmaMode::Fixed(0.8);
        assert_eq!(dsigma_schedule(&cfg, 0, 2.0).unwrap(), 0.8);
        assert_eq!(dsigma_schedule(&cfg, 50, 9.0).unwrap(), 0.8);
        cfg.dsigma = DsigmaMode::Theory { eps: 1.0 };
        let lo_beta = dsigma_schedule(&cfg, 0, 1.0).unwrap();
        let hi_beta = dsigma_schedule(&cfg, 1, 4.0).unwrap();
        assert!(hi_beta < lo_beta, "threshold must shrink as beta grows");
        let expect = 1.0 * cfg.env.noise_std
            / (2.0 * cfg.env.g_max() * cfg.env.horizon as f64 * 1.0);
        assert!((lo_beta - expect).abs() < 1e-15);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = tiny_cfg();
        cfg.delta = 0.9;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_cfg();
        cfg.max_episodes = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_cfg();
        cfg.margin = Some(0.5);
        cfg.zeta = 10.0; // far above the admissible interval
        assert!(cfg.validate().is_err());
        // wrong kernel dimension
        let mut cfg = tiny_cfg();
        cfg.kernel = KernelSpec::new(KernelKind::SquaredExp, vec![1.0; 3], 1.0).unwrap();
        assert!(matches!(
            cfg.validate(),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn warm_plan_failing_budget_refuses_to_start() {
        let mut cfg = tiny_cfg();
        // A full-torque constant plan spins the pendulum, blowing the
        // tightened budget at validation time.
        cfg.warm_plan = Some(ActionPlan::constant(vec![2.0], cfg.env.horizon));
        cfg.env.cost_budget = 0.2;
        let err = sbsrl_run(&cfg, 5, &mut |_| {}).unwrap_err();
        assert!(matches!(err, Error::ConfigInvalid(_)), "got {err:?}");
    }

    #[test]
    fn oracle_reference_plan_is_deterministic() {
        let mut env = EnvSpec::pendulum();
        env.horizon = 8;
        let params = IcemParams {
            population: 8,
            iterations: 2,
            ..IcemParams::default()
        };
        let mc = McConfig {
            n_mean_rollouts: 1,
            n_cost_rollouts: 1,
            ..McConfig::default()
        };
        let (p1, s1) = oracle_reference_plan(&env, &params, &mc, 3).unwrap();
        let (p2, s2) = oracle_reference_plan(&env, &params, &mc, 3).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(s1, s2);
    }
}
