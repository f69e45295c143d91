//! True environments, their reward/cost structure, and the encoding that
//! maps raw transitions into GP regression data.
//!
//! Conventions shared by the physical environments:
//! - angles are measured from the upright target, so `theta = pi` hangs down;
//!   the state keeps the raw (unwrapped) angle and only the GP input encoding
//!   uses `(sin, cos)`;
//! - integration is semi-implicit Euler (velocity first, then position);
//! - rewards are affinely normalized to `[0, 1]` from their bounded raw form,
//!   costs are raw absolute values with a known bound `C_max`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::kernel::KernelSpec;
use crate::rng;
use crate::QueryPoint;

/// Wraps an angle difference into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = std::f64::consts::TAU;
    let mut x = a % two_pi;
    if x > std::f64::consts::PI {
        x -= two_pi;
    } else if x <= -std::f64::consts::PI {
        x += two_pi;
    }
    x
}

/// Gaussian initial-state distribution, one (mean, std) pair per coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct Rho0Spec {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// A fixed function from a finite kernel expansion,
/// `f_j(z) = sum_i coeffs[i][j] k(z, centers[i])`, with per-output RKHS norm
/// `sqrt(a_j^T K a_j)` available in closed form.
#[derive(Debug, Clone)]
pub struct SyntheticRkhs {
    pub kernel: KernelSpec,
    pub centers: Vec<QueryPoint>,
    /// `coeffs[i][j]`: weight of center `i` for output `j`.
    pub coeffs: Vec<Vec<f64>>,
    pub d_x: usize,
    pub d_a: usize,
}

impl SyntheticRkhs {
    /// Draws random centers in `[-1, 1]^q` and coefficients rescaled so each
    /// output has RKHS norm exactly `norm_target`.
    pub fn sample(
        kernel: KernelSpec,
        d_x: usize,
        d_a: usize,
        n_centers: usize,
        norm_target: f64,
        seed: u64,
    ) -> Result<Self> {
        if kernel.input_dim() != d_x + d_a {
            return Err(Error::invalid("kernel", "input dim must equal d_x + d_a"));
        }
        if n_centers == 0 || d_x == 0 {
            return Err(Error::invalid("n_centers/d_x", "need >= 1"));
        }
        let mut r = rng::derive_rng(seed, &[rng::purpose::SYNTH_ENV]);
        let q = kernel.input_dim();
        let centers: Vec<QueryPoint> = (0..n_centers)
            .map(|_| (0..q).map(|_| r.gen::<f64>() * 2.0 - 1.0).collect())
            .collect();
        let gram = kernel.gram(&centers);
        let mut coeffs = vec![vec![0.0; d_x]; n_centers];
        for j in 0..d_x {
            let a: Vec<f64> = (0..n_centers)
                .map(|_| {
                    let v: f64 = StandardNormal.sample(&mut r);
                    v
                })
                .collect();
            // norm^2 = a^T K a
            let mut n2 = 0.0;
            for (i, ai) in a.iter().enumerate() {
                for (k, ak) in a.iter().enumerate() {
                    n2 += ai * ak * gram[(i, k)];
                }
            }
            let scale = if n2 > 0.0 { norm_target / n2.sqrt() } else { 0.0 };
            for (i, ai) in a.iter().enumerate() {
                coeffs[i][j] = ai * scale;
            }
        }
        Ok(SyntheticRkhs {
            kernel,
            centers,
            coeffs,
            d_x,
            d_a,
        })
    }

    pub fn eval(&self, z: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.d_x];
        for (c, a) in self.centers.iter().zip(&self.coeffs) {
            let k = self.kernel.eval(c, z);
            for (o, ai) in out.iter_mut().zip(a) {
                *o += k * ai;
            }
        }
        out
    }

    /// Per-output RKHS norms `sqrt(a_j^T K a_j)`.
    pub fn rkhs_norms(&self) -> Vec<f64> {
        let gram = self.kernel.gram(&self.centers);
        (0..self.d_x)
            .map(|j| {
                let mut n2 = 0.0;
                for i in 0..self.centers.len() {
                    for k in 0..self.centers.len() {
                        n2 += self.coeffs[i][j] * self.coeffs[k][j] * gram[(i, k)];
                    }
                }
                n2.max(0.0).sqrt()
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub enum EnvParams {
    Pendulum {
        mass: f64,
        length: f64,
        gravity: f64,
        /// Viscous friction coefficient on the angular velocity.
        damping: f64,
        omega_max: f64,
        theta_target: f64,
    },
    Cartpole {
        m_cart: f64,
        m_pole: f64,
        /// Half the pole length, as in the classic formulation.
        half_length: f64,
        gravity: f64,
        /// Viscous friction on the cart velocity.
        cart_damping: f64,
        /// Viscous friction on the pole angular velocity.
        pole_damping: f64,
        p_max: f64,
        v_max: f64,
        omega_max: f64,
        theta_target: f64,
    },
    Synthetic(SyntheticRkhs),
}

#[derive(Debug, Clone)]
pub struct EnvSpec {
    pub d_x: usize,
    pub d_a: usize,
    pub horizon: usize,
    pub dt: f64,
    /// Process noise std added per next-state coordinate.
    pub noise_std: f64,
    /// Episode cost budget `d`.
    pub cost_budget: f64,
    pub action_low: Vec<f64>,
    pub action_high: Vec<f64>,
    pub rho0: Rho0Spec,
    pub params: EnvParams,
}

/// One environment step's raw observables.
#[derive(Debug, Clone)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub next: Vec<f64>,
    pub reward: f64,
    pub cost: f64,
}

impl EnvSpec {
    /// Swing-up pendulum: state `(theta, omega)`, torque-limited, cost
    /// `|omega|` with budget 6. Noise and friction are sized so the episode
    /// cost of resting at the stable equilibrium stays well inside the
    /// budget; the budget then prices how fast the pendulum may move.
    pub fn pendulum() -> Self {
        EnvSpec {
            d_x: 2,
            d_a: 1,
            horizon: 100,
            dt: 0.05,
            noise_std: 0.003,
            cost_budget: 6.0,
            action_low: vec![-2.0],
            action_high: vec![2.0],
            rho0: Rho0Spec {
                mean: vec![std::f64::consts::PI, 0.0],
                std: vec![0.02, 0.02],
            },
            params: EnvParams::Pendulum {
                mass: 1.0,
                length: 1.0,
                gravity: 9.81,
                damping: 0.3,
                omega_max: 8.0,
                theta_target: 0.0,
            },
        }
    }

    /// Cart-pole: state `(p, v, theta, omega)`, force-limited, cost `|p|`
    /// with budget 1.5. The tight budget over 200 steps forces small noise
    /// and cart friction, else drift alone exhausts it.
    pub fn cartpole() -> Self {
        EnvSpec {
            d_x: 4,
            d_a: 1,
            horizon: 200,
            dt: 0.05,
            noise_std: 3e-4,
            cost_budget: 1.5,
            action_low: vec![-10.0],
            action_high: vec![10.0],
            rho0: Rho0Spec {
                mean: vec![0.0, 0.0, std::f64::consts::PI, 0.0],
                std: vec![0.005, 0.005, 0.01, 0.01],
            },
            params: EnvParams::Cartpole {
                m_cart: 1.0,
                m_pole: 0.1,
                half_length: 0.5,
                gravity: 9.81,
                cart_damping: 2.0,
                pole_damping: 0.1,
                p_max: 3.0,
                v_max: 10.0,
                omega_max: 10.0,
                theta_target: 0.0,
            },
        }
    }

    /// Synthetic dynamics from a kernel expansion; zero reward and cost.
    /// Used to exercise regression and calibration against a ground truth
    /// with known RKHS norm.
    pub fn synthetic(f: SyntheticRkhs, horizon: usize, noise_std: f64) -> Self {
        let d_x = f.d_x;
        let d_a = f.d_a;
        EnvSpec {
            d_x,
            d_a,
            horizon,
            dt: 1.0,
            noise_std,
            cost_budget: 1.0,
            action_low: vec![-1.0; d_a],
            action_high: vec![1.0; d_a],
            rho0: Rho0Spec {
                mean: vec![0.0; d_x],
                std: vec![0.0; d_x],
            },
            params: EnvParams::Synthetic(f),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_x == 0 || self.horizon == 0 {
            return Err(Error::invalid("env", "d_x and horizon must be >= 1"));
        }
        if self.action_low.len() != self.d_a || self.action_high.len() != self.d_a {
            return Err(Error::invalid("env", "action bounds must have length d_a"));
        }
        if self
            .action_low
            .iter()
            .zip(&self.action_high)
            .any(|(l, h)| !(l.is_finite() && h.is_finite() && l < h))
        {
            return Err(Error::invalid("env", "need action_low < action_high"));
        }
        if self.rho0.mean.len() != self.d_x || self.rho0.std.len() != self.d_x {
            return Err(Error::invalid("env", "rho0 must have length d_x"));
        }
        if self.rho0.std.iter().any(|s| *s < 0.0) {
            return Err(Error::invalid("env", "rho0 std must be >= 0"));
        }
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(Error::invalid("env", "dt must be > 0"));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(Error::invalid("env", "noise_std must be >= 0"));
        }
        if !(self.cost_budget.is_finite() && self.cost_budget > 0.0) {
            return Err(Error::invalid("env", "cost_budget must be > 0"));
        }
        Ok(())
    }

    /// Reward upper bound after normalization.
    pub fn r_max(&self) -> f64 {
        match self.params {
            EnvParams::Synthetic(_) => 1.0,
            _ => 1.0,
        }
    }

    /// Instantaneous cost upper bound.
    pub fn c_max(&self) -> f64 {
        match &self.params {
            EnvParams::Pendulum { omega_max, .. } => *omega_max,
            EnvParams::Cartpole { p_max, .. } => *p_max,
            EnvParams::Synthetic(_) => 1.0,
        }
    }

    /// `G_max = max(R_max, C_max)`, the scale in the simulation lemma.
    pub fn g_max(&self) -> f64 {
        self.r_max().max(self.c_max())
    }

    pub fn clamp_action(&self, a: &[f64]) -> Vec<f64> {
        a.iter()
            .zip(self.action_low.iter().zip(&self.action_high))
            .map(|(v, (l, h))| v.clamp(*l, *h))
            .collect()
    }

    /// Lower bound of the raw (unnormalized) reward over the reachable box.
    fn raw_reward_min(&self) -> f64 {
        let pi2 = std::f64::consts::PI * std::f64::consts::PI;
        match &self.params {
            EnvParams::Pendulum { omega_max, .. } => {
                let u = self.action_high[0].abs().max(self.action_low[0].abs());
                -(pi2 + 0.1 * omega_max * omega_max + 0.02 * u * u)
            }
            EnvParams::Cartpole {
                p_max,
                v_max,
                omega_max,
                ..
            } => {
                let u = self.action_high[0].abs().max(self.action_low[0].abs());
                -(pi2 + p_max * p_max
                    + 0.1 * (v_max * v_max + omega_max * omega_max)
                    + 0.01 * u * u)
            }
            EnvParams::Synthetic(_) => -1.0,
        }
    }

    /// Raw quadratic reward before normalization.
    pub fn reward_raw(&self, x: &[f64], a: &[f64]) -> f64 {
        let a = self.clamp_action(a);
        match &self.params {
            EnvParams::Pendulum { theta_target, .. } => {
                let dth = wrap_angle(x[0] - theta_target);
                let omega = x[1];
                -(dth * dth + 0.1 * omega * omega + 0.02 * a[0] * a[0])
            }
            EnvParams::Cartpole { theta_target, .. } => {
                let dth = wrap_angle(x[2] - theta_target);
                -(dth * dth
                    + x[0] * x[0]
                    + 0.1 * (x[1] * x[1] + x[3] * x[3])
                    + 0.01 * a[0] * a[0])
            }
            EnvParams::Synthetic(_) => 0.0,
        }
    }

    /// Stage reward, affinely normalized into `[0, 1]`.
    pub fn reward(&self, x: &[f64], a: &[f64]) -> f64 {
        match &self.params {
            EnvParams::Synthetic(_) => 0.0,
            _ => {
                let rmin = self.raw_reward_min();
                ((self.reward_raw(x, a) - rmin) / (0.0 - rmin)).clamp(0.0, 1.0)
            }
        }
    }

    /// Stage cost, `>= 0`, bounded by `c_max`.
    pub fn cost(&self, x: &[f64], _a: &[f64]) -> f64 {
        match &self.params {
            EnvParams::Pendulum { omega_max, .. } => x[1].abs().min(*omega_max),
            EnvParams::Cartpole { p_max, .. } => x[0].abs().min(*p_max),
            EnvParams::Synthetic(_) => 0.0,
        }
    }

    /// Noise-free dynamics `f*(x, a)`, with the environment's own action and
    /// velocity clamps applied.
    pub fn true_dynamics(&self, x: &[f64], a: &[f64]) -> Vec<f64> {
        let a = self.clamp_action(a);
        match &self.params {
            EnvParams::Pendulum {
                mass,
                length,
                gravity,
                damping,
                omega_max,
                ..
            } => {
                let (th, om) = (x[0], x[1]);
                let om_dot =
                    gravity / length * th.sin() + a[0] / (mass * length * length) - damping * om;
                let om1 = (om + self.dt * om_dot).clamp(-omega_max, *omega_max);
                let th1 = th + self.dt * om1;
                vec![th1, om1]
            }
            EnvParams::Cartpole {
                m_cart,
                m_pole,
                half_length,
                gravity,
                cart_damping,
                pole_damping,
                p_max,
                v_max,
                omega_max,
                ..
            } => {
                let (p, v, th, om) = (x[0], x[1], x[2], x[3]);
                let total = m_cart + m_pole;
                let f = a[0];
                let sin = th.sin();
                let cos = th.cos();
                let tmp = (f + m_pole * half_length * om * om * sin) / total;
                let th_acc = (gravity * sin - cos * tmp)
                    / (half_length * (4.0 / 3.0 - m_pole * cos * cos / total))
                    - pole_damping * om;
                let p_acc = tmp - m_pole * half_length * th_acc * cos / total - cart_damping * v;
                let v1 = (v + self.dt * p_acc).clamp(-v_max, *v_max);
                let om1 = (om + self.dt * th_acc).clamp(-omega_max, *omega_max);
                let p1 = (p + self.dt * v1).clamp(-p_max, *p_max);
                let th1 = th + self.dt * om1;
                vec![p1, v1, th1, om1]
            }
            EnvParams::Synthetic(fexp) => {
                let z = self.encode(x, &a);
                fexp.eval(&z)
            }
        }
    }

    /// Draws `x_0 ~ rho0`.
    pub fn reset(&self, r: &mut ChaCha8Rng) -> Vec<f64> {
        self.rho0
            .mean
            .iter()
            .zip(&self.rho0.std)
            .map(|(m, s)| {
                let e: f64 = StandardNormal.sample(r);
                m + s * e
            })
            .collect()
    }

    /// One noisy environment step; reward and cost are charged on the
    /// current state-action pair.
    pub fn step(&self, x: &[f64], a: &[f64], r: &mut ChaCha8Rng) -> Transition {
        let a = self.clamp_action(a);
        let mut next = self.true_dynamics(x, &a);
        for nx in next.iter_mut() {
            let e: f64 = StandardNormal.sample(r);
            *nx += self.noise_std * e;
        }
        Transition {
            reward: self.reward(x, &a),
            cost: self.cost(x, &a),
            state: x.to_vec(),
            action: a,
            next,
        }
    }

    /// GP input encoding of `(x, a)`; angles become `(sin, cos)` pairs.
    pub fn encode(&self, x: &[f64], a: &[f64]) -> QueryPoint {
        match &self.params {
            EnvParams::Pendulum { .. } => vec![x[0].sin(), x[0].cos(), x[1], a[0]],
            EnvParams::Cartpole { .. } => {
                vec![x[0], x[1], x[2].sin(), x[2].cos(), x[3], a[0]]
            }
            EnvParams::Synthetic(_) => {
                let mut z = x.to_vec();
                z.extend_from_slice(a);
                z
            }
        }
    }

    /// GP input dimension.
    pub fn query_dim(&self) -> usize {
        match &self.params {
            EnvParams::Pendulum { .. } => 4,
            EnvParams::Cartpole { .. } => 6,
            EnvParams::Synthetic(_) => self.d_x + self.d_a,
        }
    }

    /// Regression target for a transition. Physical environments learn state
    /// deltas (periodic in the angle through the encoding); the synthetic
    /// environment learns the next state directly.
    pub fn target(&self, x: &[f64], next: &[f64]) -> Vec<f64> {
        match &self.params {
            EnvParams::Synthetic(_) => next.to_vec(),
            _ => next.iter().zip(x).map(|(n, xi)| n - xi).collect(),
        }
    }

    /// Inverse of `target`: reconstructs the next state from a model output.
    pub fn next_from_target(&self, x: &[f64], t: &[f64]) -> Vec<f64> {
        match &self.params {
            EnvParams::Synthetic(_) => t.to_vec(),
            _ => t.iter().zip(x).map(|(ti, xi)| ti + xi).collect(),
        }
    }

    /// A stabilizing hand-tuned controller around the safe resting point;
    /// the source of warm-start plans and offline data.
    pub fn pd_action(&self, x: &[f64]) -> Vec<f64> {
        match &self.params {
            EnvParams::Pendulum { .. } => {
                let err = wrap_angle(x[0] - std::f64::consts::PI);
                vec![(-4.0 * err - 1.5 * x[1]).clamp(self.action_low[0], self.action_high[0])]
            }
            EnvParams::Cartpole { .. } => {
                vec![(-2.0 * x[0] - 1.5 * x[1]).clamp(self.action_low[0], self.action_high[0])]
            }
            EnvParams::Synthetic(_) => vec![0.0; self.d_a],
        }
    }

    /// Max finite-difference Jacobian column norm of `f*` over sampled
    /// points; a smoothness diagnostic, reported rather than asserted.
    pub fn dynamics_jacobian_bound_fd(&self, points: &[(Vec<f64>, Vec<f64>)]) -> f64 {
        let h = 1e-5;
        let mut worst = 0.0f64;
        for (x, a) in points {
            let base = self.true_dynamics(x, a);
            for i in 0..x.len() {
                let mut xp = x.clone();
                xp[i] += h;
                let fp = self.true_dynamics(&xp, a);
                let col: f64 = fp
                    .iter()
                    .zip(&base)
                    .map(|(p, b)| {
                        let d = (p - b) / h;
                        d * d
                    })
                    .sum();
                worst = worst.max(col.sqrt());
            }
        }
        worst
    }
}

/// Monte-Carlo evaluation of a policy on the true environment.
#[derive(Debug, Clone)]
pub struct PolicyEval {
    pub rewards: Vec<f64>,
    pub costs: Vec<f64>,
    pub max_costs: Vec<f64>,
}

impl PolicyEval {
    pub fn j_r_mean(&self) -> f64 {
        mean(&self.rewards)
    }

    pub fn j_c_mean(&self) -> f64 {
        mean(&self.costs)
    }

    pub fn j_r_se(&self) -> f64 {
        se(&self.rewards)
    }

    pub fn j_c_se(&self) -> f64 {
        se(&self.costs)
    }

    pub fn max_cost_overall(&self) -> f64 {
        self.max_costs.iter().copied().fold(0.0, f64::max)
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

fn se(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64;
    (var / v.len() as f64).sqrt()
}

/// Rolls `policy(t, x)` for `n_rollouts` episodes under the true dynamics
/// with process noise, each on its own derived stream.
pub fn evaluate_policy_true<F>(
    spec: &EnvSpec,
    mut policy: F,
    n_rollouts: usize,
    master: u64,
    tag: u64,
) -> PolicyEval
where
    F: FnMut(usize, &[f64]) -> Vec<f64>,
{
    let mut rewards = Vec::with_capacity(n_rollouts);
    let mut costs = Vec::with_capacity(n_rollouts);
    let mut max_costs = Vec::with_capacity(n_rollouts);
    for i in 0..n_rollouts {
        let mut r = rng::derive_rng(master, &[rng::purpose::EVAL, tag, i as u64]);
        let mut x = spec.reset(&mut r);
        let mut jr = 0.0;
        let mut jc = 0.0;
        let mut mc = 0.0f64;
        for t in 0..spec.horizon {
            let a = policy(t, &x);
            let tr = spec.step(&x, &a, &mut r);
            jr += tr.reward;
            jc += tr.cost;
            mc = mc.max(tr.cost);
            x = tr.next;
        }
        rewards.push(jr);
        costs.push(jc);
        max_costs.push(mc);
    }
    PolicyEval {
        rewards,
        costs,
        max_costs,
    }
}
