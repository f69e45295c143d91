//! Open-loop planning: model rollouts, Monte-Carlo return estimates, the
//! penalized constrained objective, and an iCEM optimizer with colored
//! exploration noise.
//!
//! Every stochastic quantity is keyed by an explicit stream derivation
//! `(master, tags..)`, and candidate scores are keyed by the candidate's own
//! id, so results do not depend on evaluation order.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::envs::EnvSpec;
use crate::error::{Error, Result};
use crate::gp::GpPosterior;
use crate::rng;
use crate::sampler::{DynamicsSample, VarianceSketch};

/// An open-loop action sequence, `horizon x d_a`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionPlan {
    pub actions: Vec<Vec<f64>>,
}

impl ActionPlan {
    pub fn constant(action: Vec<f64>, horizon: usize) -> Self {
        ActionPlan {
            actions: vec![action; horizon],
        }
    }

    pub fn horizon(&self) -> usize {
        self.actions.len()
    }

    pub fn clamp_to(&mut self, env: &EnvSpec) {
        for a in &mut self.actions {
            *a = env.clamp_action(a);
        }
    }

    /// Shifts the plan one step forward for MPC warm starts, repeating the
    /// final action.
    pub fn shifted(&self) -> Self {
        let mut actions = self.actions[1..].to_vec();
        if let Some(last) = self.actions.last() {
            actions.push(last.clone());
        }
        ActionPlan { actions }
    }
}

/// Dynamics used for a rollout.
pub enum StepModel<'a> {
    /// Ground-truth dynamics (oracle planning and diagnostics).
    TrueEnv,
    /// Posterior-mean dynamics.
    Mean(&'a GpPosterior),
    /// Per-step independent posterior draws (trajectory sampling variant).
    Ts1(WidthEval<'a>),
    /// A coherent sampled dynamics function.
    Sample(&'a mut DynamicsSample),
}

/// One simulated episode under a model.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub states: Vec<Vec<f64>>,
    pub j_r: f64,
    pub j_c: f64,
    pub max_cost: f64,
    /// Accumulated uncertainty width along the path (mean rollouts only).
    pub j_s: f64,
    pub valid: bool,
}

const STATE_GUARD: f64 = 1e9;

/// Posterior width source for tracked rollouts: the exact posterior, or its
/// feature-space sketch when one is supplied.
#[derive(Clone, Copy)]
pub struct WidthEval<'a> {
    pub gp: &'a GpPosterior,
    pub sketch: Option<&'a VarianceSketch>,
}

impl WidthEval<'_> {
    pub fn std(&self, z: &[f64]) -> f64 {
        match self.sketch {
            Some(s) => s.std(z),
            None => self.gp.mean_and_std(z).1,
        }
    }
}

/// Rolls `plan` from a fresh `rho0` draw under `model`, adding process noise
/// of the environment's configured std at every step. If `track` is given,
/// accumulates the posterior uncertainty width `sqrt(d_x) * sigma_n(z_t)`
/// along the visited path (optionally combined with the aleatoric noise
/// floor).
pub fn rollout_model(
    env: &EnvSpec,
    model: &mut StepModel,
    plan: &ActionPlan,
    track: Option<(WidthEval<'_>, bool)>,
    r: &mut ChaCha8Rng,
) -> Trajectory {
    let mut states = Vec::with_capacity(plan.horizon() + 1);
    let mut x = env.reset(r);
    states.push(x.clone());
    let mut j_r = 0.0f64;
    let mut j_c = 0.0f64;
    let mut max_cost = 0.0f64;
    let mut j_s = 0.0f64;
    let mut valid = true;

    for a in &plan.actions {
        let a = env.clamp_action(a);
        let z = env.encode(&x, &a);
        // The Mean model shares one solve between the step and the tracked
        // uncertainty; this is the planner's hot path.
        let (mut next, sd) = match model {
            StepModel::TrueEnv => (env.true_dynamics(&x, &a), None),
            StepModel::Mean(gp) => match track {
                // The sketch splits mean and width; the exact path shares
                // one solve between the step and the tracked width.
                Some((w, _)) if w.sketch.is_some() => (
                    env.next_from_target(&x, &gp.posterior_mean(&z)),
                    Some(w.std(&z)),
                ),
                Some(_) => {
                    let (t, sd) = gp.mean_and_std(&z);
                    (env.next_from_target(&x, &t), Some(sd))
                }
                None => (env.next_from_target(&x, &gp.posterior_mean(&z)), None),
            },
            StepModel::Ts1(w) => {
                let (mut t, sd) = match w.sketch {
                    Some(_) => (w.gp.posterior_mean(&z), w.std(&z)),
                    None => w.gp.mean_and_std(&z),
                };
                for tj in t.iter_mut() {
                    let e: f64 = StandardNormal.sample(r);
                    *tj += sd * e;
                }
                (env.next_from_target(&x, &t), Some(sd))
            }
            StepModel::Sample(s) => (env.next_from_target(&x, &s.eval(&z)), None),
        };
        if let Some((w, combined)) = track {
            let sd = sd.unwrap_or_else(|| w.std(&z));
            let var = if combined {
                sd * sd + env.noise_std * env.noise_std
            } else {
                sd * sd
            };
            j_s += (w.gp.d_x() as f64).sqrt() * var.sqrt();
        }
        for nx in next.iter_mut() {
            let e: f64 = StandardNormal.sample(r);
            *nx += env.noise_std * e;
        }
        let reward = env.reward(&x, &a);
        let cost = env.cost(&x, &a);
        j_r += reward;
        j_c += cost;
        max_cost = max_cost.max(cost);
        if next.iter().any(|v| !v.is_finite() || v.abs() > STATE_GUARD) {
            valid = false;
            break;
        }
        x = next;
        states.push(x.clone());
    }
    if !(j_r.is_finite() && j_c.is_finite() && j_s.is_finite()) {
        valid = false;
    }
    Trajectory {
        states,
        j_r,
        j_c,
        max_cost,
        j_s,
        valid,
    }
}

/// How episode costs are attributed to epistemic models.
#[derive(Debug, Clone, PartialEq)]
pub enum RolloutMode {
    /// One `J_c` estimate per coherent sampled function.
    PerSample,
    /// Per-step independent draws; `particles` pseudo-samples.
    Ts1 { particles: usize },
    /// A single cost estimate under the posterior mean (the unsafe
    /// baseline). Consumes the same streams as sample 0 of `PerSample`, so a
    /// mean-collapsed sample reproduces it exactly.
    MeanOnly,
}

/// Monte-Carlo budget for scoring one candidate plan.
#[derive(Debug, Clone)]
pub struct McConfig {
    /// Rollouts under the posterior mean (reward and uncertainty estimates).
    pub n_mean_rollouts: usize,
    /// Rollouts per sample (or particle) for cost estimates.
    pub n_cost_rollouts: usize,
    pub mode: RolloutMode,
    /// Include the aleatoric noise floor in the uncertainty width.
    pub js_combined: bool,
}

impl Default for McConfig {
    fn default() -> Self {
        McConfig {
            n_mean_rollouts: 5,
            n_cost_rollouts: 3,
            mode: RolloutMode::PerSample,
            js_combined: false,
        }
    }
}

impl McConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_mean_rollouts == 0 || self.n_cost_rollouts == 0 {
            return Err(Error::invalid("mc", "rollout counts must be >= 1"));
        }
        if let RolloutMode::Ts1 { particles } = self.mode {
            if particles == 0 {
                return Err(Error::invalid("mc", "ts1 particles must be >= 1"));
            }
        }
        Ok(())
    }
}

/// The models a candidate plan is scored against.
pub enum PlanModels<'a> {
    /// Oracle scoring on the true dynamics.
    TrueEnv,
    Learned {
        gp: &'a GpPosterior,
        samples: &'a mut [DynamicsSample],
        /// Width source for tracked uncertainty; `None` queries the exact
        /// posterior.
        sketch: Option<&'a VarianceSketch>,
    },
}

/// Monte-Carlo return estimates for one candidate plan.
#[derive(Debug, Clone)]
pub struct ReturnEstimates {
    pub j_r: f64,
    pub j_s: f64,
    /// One cost estimate per sampled model (or particle).
    pub j_c: Vec<f64>,
    pub valid: bool,
}

impl ReturnEstimates {
    pub fn worst_cost(&self) -> f64 {
        self.j_c.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Estimates `J_r` (under the mean or true model), per-sample `J_c`, and the
/// path uncertainty `J_s`. Streams are derived per rollout from
/// `(master, tags.., kind, index)` so estimates are order-independent.
pub fn estimate_returns(
    env: &EnvSpec,
    models: &mut PlanModels,
    plan: &ActionPlan,
    mc: &McConfig,
    master: u64,
    tags: &[u64],
) -> ReturnEstimates {
    let mut full_tags = Vec::with_capacity(tags.len() + 3);
    full_tags.extend_from_slice(tags);
    let base = full_tags.len();
    full_tags.extend_from_slice(&[0, 0]);

    let mut j_r_sum = 0.0;
    let mut j_s_sum = 0.0;
    let mut valid = true;

    // Reward and uncertainty rollouts.
    for i in 0..mc.n_mean_rollouts {
        full_tags[base] = 0;
        full_tags[base + 1] = i as u64;
        let mut r = rng::derive_rng(master, &full_tags);
        let tr = match models {
            PlanModels::TrueEnv => {
                rollout_model(env, &mut StepModel::TrueEnv, plan, None, &mut r)
            }
            PlanModels::Learned { gp, sketch, .. } => rollout_model(
                env,
                &mut StepModel::Mean(gp),
                plan,
                Some((
                    WidthEval {
                        gp,
                        sketch: *sketch,
                    },
                    mc.js_combined,
                )),
                &mut r,
            ),
        };
        if !tr.valid {
            valid = false;
            break;
        }
        j_r_sum += tr.j_r;
        j_s_sum += tr.j_s;
    }

    // Cost rollouts per epistemic model.
    let mut j_c = Vec::new();
    if valid {
        match models {
            PlanModels::TrueEnv => {
                let mut sum = 0.0;
                for i in 0..mc.n_cost_rollouts {
                    full_tags[base] = 1;
                    full_tags[base + 1] = i as u64;
                    let mut r = rng::derive_rng(master, &full_tags);
                    let tr = rollout_model(env, &mut StepModel::TrueEnv, plan, None, &mut r);
                    if !tr.valid {
                        valid = false;
                        break;
                    }
                    sum += tr.j_c;
                }
                j_c.push(sum / mc.n_cost_rollouts as f64);
            }
            PlanModels::Learned {
                gp,
                samples,
                sketch,
            } => match mc.mode {
                RolloutMode::PerSample => {
                    'outer: for (m, s) in samples.iter_mut().enumerate() {
                        let mut sum = 0.0;
                        for i in 0..mc.n_cost_rollouts {
                            full_tags[base] = 1;
                            full_tags[base + 1] =
                                (m as u64) * 1_000_003 + i as u64;
                            let mut r = rng::derive_rng(master, &full_tags);
                            let tr = rollout_model(
                                env,
                                &mut StepModel::Sample(s),
                                plan,
                                None,
                                &mut r,
                            );
                            if !tr.valid {
                                valid = false;
                                break 'outer;
                            }
                            sum += tr.j_c;
                        }
                        j_c.push(sum / mc.n_cost_rollouts as f64);
                    }
                }
                RolloutMode::Ts1 { particles } => {
                    'outer2: for m in 0..particles {
                        let mut sum = 0.0;
                        for i in 0..mc.n_cost_rollouts {
                            full_tags[base] = 1;
                            full_tags[base + 1] =
                                (m as u64) * 1_000_003 + i as u64;
                            let mut r = rng::derive_rng(master, &full_tags);
                            let tr = rollout_model(
                                env,
                                &mut StepModel::Ts1(WidthEval {
                                    gp,
                                    sketch: *sketch,
                                }),
                                plan,
                                None,
                                &mut r,
                            );
                            if !tr.valid {
                                valid = false;
                                break 'outer2;
                            }
                            sum += tr.j_c;
                        }
                        j_c.push(sum / mc.n_cost_rollouts as f64);
                    }
                }
                RolloutMode::MeanOnly => {
                    let mut sum = 0.0;
                    for i in 0..mc.n_cost_rollouts {
                        full_tags[base] = 1;
                        full_tags[base + 1] = i as u64;
                        let mut r = rng::derive_rng(master, &full_tags);
                        let tr =
                            rollout_model(env, &mut StepModel::Mean(gp), plan, None, &mut r);
                        if !tr.valid {
                            valid = false;
                            break;
                        }
                        sum += tr.j_c;
                    }
                    j_c.push(sum / mc.n_cost_rollouts as f64);
                }
            },
        }
    }

    ReturnEstimates {
        j_r: j_r_sum / mc.n_mean_rollouts as f64,
        j_s: j_s_sum / mc.n_mean_rollouts as f64,
        j_c,
        valid,
    }
}

/// Penalty weights for the constrained objective.
#[derive(Debug, Clone, Copy)]
pub struct PenaltyWeights {
    pub lambda_c: f64,
    pub lambda_sigma: f64,
}

impl PenaltyWeights {
    /// Defaults scaled so any constraint violation dominates the reward
    /// range `[0, R_max * T]`.
    pub fn for_env(env: &EnvSpec) -> Self {
        let scale = env.r_max() * env.horizon as f64;
        PenaltyWeights {
            lambda_c: 100.0 * scale,
            lambda_sigma: 10.0 * scale,
        }
    }
}

/// Exact-penalty objective: reward minus per-sample cost violations minus
/// (optionally) the exploration-constraint violation. Invalid estimates map
/// to negative infinity.
pub fn penalized_score(
    est: &ReturnEstimates,
    cost_limit: f64,
    d_sigma: Option<f64>,
    w: PenaltyWeights,
) -> f64 {
    if !est.valid || !est.j_r.is_finite() {
        return f64::NEG_INFINITY;
    }
    let mut score = est.j_r;
    for jc in &est.j_c {
        if !jc.is_finite() {
            return f64::NEG_INFINITY;
        }
        score -= w.lambda_c * (jc - cost_limit).max(0.0);
    }
    if let Some(ds) = d_sigma {
        if !est.j_s.is_finite() {
            return f64::NEG_INFINITY;
        }
        score -= w.lambda_sigma * (ds - est.j_s).max(0.0);
    }
    score
}

/// iCEM hyperparameters.
#[derive(Debug, Clone)]
pub struct IcemParams {
    pub population: usize,
    pub elite_frac: f64,
    pub iterations: usize,
    /// Spectral decay of the exploration noise; 0 is white.
    pub noise_exponent: f64,
    /// Fraction of the elite set reused as candidates next iteration.
    pub elite_keep_frac: f64,
    /// Initial proposal std as a fraction of the half action range.
    pub init_std_frac: f64,
    /// Std floor as a fraction of the half action range.
    pub min_std_frac: f64,
    pub shift_elites: bool,
}

impl Default for IcemParams {
    fn default() -> Self {
        IcemParams {
            population: 256,
            elite_frac: 0.1,
            iterations: 10,
            noise_exponent: 2.0,
            elite_keep_frac: 0.3,
            init_std_frac: 0.5,
            min_std_frac: 0.02,
            shift_elites: true,
        }
    }
}

impl IcemParams {
    pub fn validate(&self) -> Result<()> {
        if self.population < 4 {
            return Err(Error::invalid("icem.population", "must be >= 4"));
        }
        if !(self.elite_frac > 0.0 && self.elite_frac <= 0.5) {
            return Err(Error::invalid("icem.elite_frac", "must be in (0, 0.5]"));
        }
        if self.iterations == 0 {
            return Err(Error::invalid("icem.iterations", "must be >= 1"));
        }
        if !(self.noise_exponent >= 0.0 && self.noise_exponent.is_finite()) {
            return Err(Error::invalid("icem.noise_exponent", "must be >= 0"));
        }
        if !(0.0..=1.0).contains(&self.elite_keep_frac) {
            return Err(Error::invalid("icem.elite_keep_frac", "must be in [0, 1]"));
        }
        if !(self.init_std_frac > 0.0 && self.min_std_frac >= 0.0) {
            return Err(Error::invalid("icem.std_frac", "must be > 0"));
        }
        Ok(())
    }
}

/// Stationary colored noise of length `len` with unit marginal variance,
/// synthesized from a Fourier basis whose amplitude decays as
/// `k^(-exponent/2)`. The constant (k = 0) component carries the same
/// weight as the fundamental: without it the proposals span a subspace
/// that cannot shift a plan's mean, only reshape it.
pub fn colored_noise(len: usize, exponent: f64, r: &mut ChaCha8Rng) -> Vec<f64> {
    if len == 0 {
        return Vec::new();
    }
    let n_freq = (len / 2).max(1);
    let mut amps: Vec<f64> = (0..=n_freq)
        .map(|k| (k.max(1) as f64).powf(-exponent / 2.0))
        .collect();
    let norm: f64 = amps.iter().map(|a| a * a).sum::<f64>().sqrt();
    for a in amps.iter_mut() {
        *a /= norm;
    }
    let coefs: Vec<(f64, f64)> = (0..=n_freq)
        .map(|_| {
            let a: f64 = StandardNormal.sample(r);
            let b: f64 = StandardNormal.sample(r);
            (a, b)
        })
        .collect();
    (0..len)
        .map(|t| {
            let mut x = 0.0;
            for (k, ((a, b), s)) in coefs.iter().zip(&amps).enumerate() {
                let w = std::f64::consts::TAU * k as f64 * t as f64 / len as f64;
                x += s * (a * w.cos() + b * w.sin());
            }
            x
        })
        .collect()
}

/// Result of one iCEM optimization.
#[derive(Debug, Clone)]
pub struct IcemResult {
    pub plan: ActionPlan,
    pub score: f64,
    /// Best score seen up to and including each iteration; nondecreasing.
    pub best_history: Vec<f64>,
    pub n_evaluated: usize,
    /// True when not a single candidate scored above negative infinity; the
    /// returned plan is then the warm start.
    pub all_invalid: bool,
}

/// Cross-entropy search over open-loop plans. `score_fn` receives the
/// candidate and a stable candidate id for stream derivation; the warm-start
/// plan is a member of every population, so the result never scores below
/// it.
pub fn icem_plan(
    env: &EnvSpec,
    params: &IcemParams,
    warm: &ActionPlan,
    score_fn: &mut dyn FnMut(&ActionPlan, u64) -> f64,
    master: u64,
    tags: &[u64],
) -> Result<IcemResult> {
    params.validate()?;
    let horizon = warm.horizon();
    if horizon == 0 {
        return Err(Error::invalid("warm", "plan horizon must be >= 1"));
    }
    let d_a = env.d_a;
    let half_range: Vec<f64> = env
        .action_low
        .iter()
        .zip(&env.action_high)
        .map(|(l, h)| 0.5 * (h - l))
        .collect();

    let mut warm = warm.clone();
    warm.clamp_to(env);
    let mut mean = warm.actions.clone();
    let mut std: Vec<Vec<f64>> = vec![
        half_range
            .iter()
            .map(|hr| params.init_std_frac * hr)
            .collect();
        horizon
    ];
    let std_floor: Vec<f64> = half_range
        .iter()
        .map(|hr| params.min_std_frac * hr)
        .collect();

    let mut noise_tags = Vec::with_capacity(tags.len() + 1);
    noise_tags.extend_from_slice(tags);
    noise_tags.push(u64::MAX);
    let mut noise_rng = rng::derive_rng(master, &noise_tags);

    let mut best_plan = warm.clone();
    let mut best_score = f64::NEG_INFINITY;
    let mut best_history = Vec::with_capacity(params.iterations);
    let mut n_evaluated = 0usize;
    let mut kept: Vec<ActionPlan> = Vec::new();
    let mut cand_id = 0u64;

    for _iter in 0..params.iterations {
        let mut cands: Vec<ActionPlan> = Vec::with_capacity(params.population + 4);
        cands.push(warm.clone());
        cands.push(ActionPlan {
            actions: mean.clone(),
        });
        if best_score > f64::NEG_INFINITY {
            cands.push(best_plan.clone());
        }
        cands.extend(kept.iter().cloned());
        while cands.len() < params.population {
            let mut actions = vec![vec![0.0; d_a]; horizon];
            for dim in 0..d_a {
                let noise = colored_noise(horizon, params.noise_exponent, &mut noise_rng);
                for (t, n) in noise.iter().enumerate() {
                    actions[t][dim] = (mean[t][dim] + std[t][dim] * n)
                        .clamp(env.action_low[dim], env.action_high[dim]);
                }
            }
            cands.push(ActionPlan { actions });
        }

        let mut scored: Vec<(f64, usize)> = Vec::with_capacity(cands.len());
        for (i, c) in cands.iter().enumerate() {
            let s = score_fn(c, cand_id);
            cand_id += 1;
            n_evaluated += 1;
            let s = if s.is_nan() { f64::NEG_INFINITY } else { s };
            if s > best_score {
                best_score = s;
                best_plan = c.clone();
            }
            scored.push((s, i));
        }
        scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal));
        best_history.push(best_score);

        let n_elite = ((params.elite_frac * cands.len() as f64).ceil() as usize).max(2);
        let elites: Vec<&ActionPlan> = scored
            .iter()
            .take(n_elite)
            .map(|(_, i)| &cands[*i])
            .collect();

        for t in 0..horizon {
            for dim in 0..d_a {
                let vals: Vec<f64> = elites.iter().map(|p| p.actions[t][dim]).collect();
                let m = vals.iter().sum::<f64>() / vals.len() as f64;
                let var = vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>()
                    / vals.len() as f64;
                mean[t][dim] = m;
                std[t][dim] = var.sqrt().max(std_floor[dim]);
            }
        }

        let n_keep = ((params.elite_keep_frac * n_elite as f64).round() as usize)
            .min(elites.len());
        kept = elites.iter().take(n_keep).map(|p| (*p).clone()).collect();
    }

    let all_invalid = best_score == f64::NEG_INFINITY;
    Ok(IcemResult {
        plan: if all_invalid { warm } else { best_plan },
        score: best_score,
        best_history,
        n_evaluated,
        all_invalid,
    })
}

/// Feasibility probe result for one episode.
#[derive(Debug, Clone)]
pub struct ProbeOutcome {
    /// Some plan satisfied every per-sample cost constraint.
    pub safe_feasible: bool,
    /// The best safe plan also met the exploration threshold.
    pub exploration_feasible: bool,
    /// Highest `J_s` among safe candidates (0 when none were safe).
    pub best_safe_uncertainty: f64,
    /// The safe plan with the highest `J_s` (warm start if none were safe).
    pub best_plan: ActionPlan,
    /// Return estimates of `best_plan`, when any candidate was safe.
    pub best_estimates: Option<ReturnEstimates>,
}

/// Searches for the most informative plan that still satisfies the
/// tightened cost constraint under every sampled model, then checks it
/// against the exploration threshold `d_sigma`.
#[allow(clippy::too_many_arguments)]
pub fn feasibility_probe(
    env: &EnvSpec,
    gp: &GpPosterior,
    sketch: Option<&VarianceSketch>,
    samples: &mut [DynamicsSample],
    warm: &ActionPlan,
    params: &IcemParams,
    mc: &McConfig,
    cost_limit: f64,
    d_sigma: f64,
    tol: f64,
    weights: PenaltyWeights,
    master: u64,
    tags: &[u64],
) -> Result<ProbeOutcome> {
    let mut models = PlanModels::Learned {
        gp,
        samples,
        sketch,
    };
    let mut best_safe = f64::NEG_INFINITY;
    let mut best_plan: Option<ActionPlan> = None;
    let mut best_est: Option<ReturnEstimates> = None;

    let mut full_tags = Vec::with_capacity(tags.len() + 2);
    full_tags.extend_from_slice(tags);
    full_tags.push(0);
    {
        let mut score = |plan: &ActionPlan, cand: u64| -> f64 {
            *full_tags.last_mut().unwrap() = cand;
            let est = estimate_returns(env, &mut models, plan, mc, master, &full_tags);
            if est.valid && est.j_c.iter().all(|jc| *jc <= cost_limit + tol) && est.j_s > best_safe
            {
                best_safe = est.j_s;
                best_plan = Some(plan.clone());
                best_est = Some(est.clone());
            }
            // Maximize information subject to the cost constraint.
            let mut s = if est.valid { est.j_s } else { return f64::NEG_INFINITY };
            for jc in &est.j_c {
                s -= weights.lambda_c * (jc - cost_limit).max(0.0);
            }
            s
        };
        icem_plan(env, params, warm, &mut score, master, tags)?;
    }

    let safe_feasible = best_plan.is_some();
    let best_safe_uncertainty = if safe_feasible { best_safe } else { 0.0 };
    Ok(ProbeOutcome {
        safe_feasible,
        exploration_feasible: safe_feasible && best_safe_uncertainty + tol >= d_sigma,
        best_safe_uncertainty,
        best_plan: best_plan.unwrap_or_else(|| warm.clone()),
        best_estimates: best_est,
    })
}
