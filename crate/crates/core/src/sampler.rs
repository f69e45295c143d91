//! Function draws from a GP and the scalar schedules built on them.
//!
//! A `DynamicsSample` is one plausible dynamics function. Two realization
//! engines exist: lazy pathwise conditioning (exact; the sample conditions on
//! its own past evaluations as noise-free data) and random Fourier features
//! (approximate, but a cheap global function, which keeps long planning
//! rollouts tractable). Truncation layers clip every evaluation into the
//! confidence band of a posterior snapshot, component-wise and in layer
//! order, so a truncated sample stays inside the running intersection of
//! bands.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::gp::{cholesky_with_jitter, GpPosterior, PackedChol, PriorSpec};
use crate::kernel::{KernelKind, KernelSpec};
use crate::rng;
use crate::QueryPoint;

/// How a sample realizes function values.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleEngine {
    /// Exact sequential conditioning on the sample's own evaluation cache.
    /// Cost grows with the number of distinct points evaluated.
    LazyPathwise,
    /// Global random-feature function (plus an exact data-correction term
    /// when the base posterior has data). Constant cost per evaluation.
    RandomFourier { n_features: usize },
}

/// A posterior snapshot and calibration radius defining a confidence band.
#[derive(Clone)]
pub struct TruncationLayer {
    pub gp: Arc<GpPosterior>,
    pub beta: f64,
    /// Optional feature-space sigma used in place of the exact posterior
    /// width. Clipping runs once per sample evaluation per layer, so an
    /// n-sized solve here dominates whole planning passes.
    pub sketch: Option<Arc<VarianceSketch>>,
}

impl TruncationLayer {
    fn clip(&self, z: &[f64], value: &mut [f64]) {
        let (mean, sigma) = match &self.sketch {
            Some(s) => (self.gp.posterior_mean(z), s.std(z)),
            None => self.gp.mean_and_std(z),
        };
        let half = self.beta * sigma;
        for (v, m) in value.iter_mut().zip(&mean) {
            *v = v.clamp(m - half, m + half);
        }
    }
}

struct LazyState {
    /// Evaluated points, their clipped values, and solver state that lets new
    /// points condition on the old ones: an incrementally grown Cholesky of
    /// the base covariance over the cache, the forward-solved residuals per
    /// output, and the forward-solved base `k` vectors per cache point.
    points: Vec<QueryPoint>,
    values: Vec<Vec<f64>>,
    chol_rows: Vec<f64>,
    solved_resid: Vec<Vec<f64>>,
    base_solves: Vec<Vec<f64>>,
    rng: ChaCha8Rng,
}

/// A finite feature basis `phi` with `k(z, z') ~ phi(z) . phi(z')`: random
/// Fourier features for the stationary kernels, the exact `q`-dimensional
/// basis for the linear kernel.
pub struct FeatureMap {
    /// Frequencies packed `n_features x q`; empty for the linear basis.
    omegas: Vec<f64>,
    phases: Vec<f64>,
    /// Inverse lengthscales for the linear basis; empty otherwise.
    inv_ls: Vec<f64>,
    amp: f64,
    q: usize,
}

impl FeatureMap {
    /// Draws a basis for `kernel`. The linear kernel consumes no randomness.
    fn draw(kernel: &KernelSpec, n_features: usize, r: &mut ChaCha8Rng) -> FeatureMap {
        let q = kernel.input_dim();
        let sf = kernel.signal_variance.sqrt();
        match kernel.kind {
            KernelKind::Linear => FeatureMap {
                omegas: Vec::new(),
                phases: Vec::new(),
                inv_ls: kernel.lengthscales.iter().map(|l| 1.0 / l).collect(),
                amp: sf,
                q,
            },
            KernelKind::SquaredExp | KernelKind::Matern52 => {
                let mut omegas = Vec::with_capacity(n_features * q);
                for _ in 0..n_features {
                    let scale = match kernel.kind {
                        KernelKind::Matern52 => {
                            let chi: f64 = ChiSquared::new(5.0).unwrap().sample(r);
                            (5.0 / chi).sqrt()
                        }
                        _ => 1.0,
                    };
                    for d in 0..q {
                        let n: f64 = StandardNormal.sample(r);
                        omegas.push(scale * n / kernel.lengthscales[d]);
                    }
                }
                let phases: Vec<f64> = (0..n_features)
                    .map(|_| r.gen::<f64>() * std::f64::consts::TAU)
                    .collect();
                let amp = sf * (2.0 / n_features as f64).sqrt();
                FeatureMap {
                    omegas,
                    phases,
                    inv_ls: Vec::new(),
                    amp,
                    q,
                }
            }
        }
    }

    fn len(&self) -> usize {
        if self.inv_ls.is_empty() {
            self.phases.len()
        } else {
            self.q
        }
    }

    fn eval(&self, z: &[f64]) -> Vec<f64> {
        if !self.inv_ls.is_empty() {
            return self
                .inv_ls
                .iter()
                .zip(z)
                .map(|(il, zi)| self.amp * il * zi)
                .collect();
        }
        let f = self.phases.len();
        let mut feats = Vec::with_capacity(f);
        for i in 0..f {
            let dot: f64 = self.omegas[i * self.q..(i + 1) * self.q]
                .iter()
                .zip(z)
                .map(|(o, zi)| o * zi)
                .sum();
            feats.push(self.amp * (dot + self.phases[i]).cos());
        }
        feats
    }
}

/// The posterior width evaluated in a finite feature basis: with
/// `A = Phi' Phi + s2 I` over the fitted inputs, the latent variance at `z`
/// is `s2 * |L^-1 phi(z)|^2`. One query costs `O(F^2)` independent of the
/// data size, at the same approximation fidelity the random-feature sample
/// engine already accepts; planners use it so that per-step width queries
/// stay affordable as data accumulates. Exact widths (`GpPosterior`
/// methods) remain the reference everywhere outside planning hot paths.
pub struct VarianceSketch {
    features: FeatureMap,
    chol: PackedChol,
    noise_var: f64,
}

impl VarianceSketch {
    /// Builds the sketch for `gp`'s data. `seed` fixes the feature draw, so
    /// rebuilding after a refit with the same seed keeps the same basis and
    /// only updates the data factor.
    pub fn build(gp: &GpPosterior, n_features: usize, seed: u64) -> Result<Self> {
        if n_features == 0 {
            return Err(Error::invalid("n_features", "need >= 1"));
        }
        let mut r = rng::derive_rng(seed, &[rng::purpose::SKETCH]);
        let features = FeatureMap::draw(gp.kernel(), n_features, &mut r);
        let f = features.len();
        let noise_var = gp.prior().noise_std * gp.prior().noise_std;

        let phi: Vec<Vec<f64>> = gp.inputs().iter().map(|x| features.eval(x)).collect();
        let mut packed = vec![0.0; f * (f + 1) / 2];
        let mut off = 0;
        for i in 0..f {
            for j in 0..=i {
                let mut s = if i == j { noise_var } else { 0.0 };
                for row in &phi {
                    s += row[i] * row[j];
                }
                packed[off] = s;
                off += 1;
            }
        }
        let (chol, _) = cholesky_with_jitter(f, packed, "variance sketch")?;
        Ok(VarianceSketch {
            features,
            chol,
            noise_var,
        })
    }

    /// Approximate latent posterior std at `z`.
    pub fn std(&self, z: &[f64]) -> f64 {
        let mut phi = self.features.eval(z);
        self.chol.solve_lower_in_place(&mut phi);
        let s: f64 = phi.iter().map(|x| x * x).sum();
        (self.noise_var * s).sqrt()
    }
}

struct RffState {
    /// Shared feature basis and one weight vector per output.
    features: FeatureMap,
    weights: Vec<Vec<f64>>,
    /// Pathwise data correction `v_j = (K + s2 I)^-1 (y_j - m_j - g_j - e_j)`.
    correction: Vec<Vec<f64>>,
}

enum EngineState {
    Lazy(LazyState),
    Rff(RffState),
}

/// One sampled dynamics function, optionally truncated.
pub struct DynamicsSample {
    id: usize,
    seed: u64,
    base: Arc<GpPosterior>,
    state: EngineState,
    layers: Vec<TruncationLayer>,
    /// When set, evaluation applies only the first layer and the most recent
    /// `w` layers. Under calibrated, nesting bands this equals the full
    /// intersection at a fraction of the cost.
    layer_window: Option<usize>,
}

/// Draws a sample of the prior `GP(m, k)`. Lazy pathwise realization.
pub fn draw_prior_sample(
    prior: &PriorSpec,
    kernel: &KernelSpec,
    d_x: usize,
    id: usize,
    seed: u64,
) -> Result<DynamicsSample> {
    let base = Arc::new(GpPosterior::prior_only(prior.clone(), kernel.clone(), d_x)?);
    DynamicsSample::draw(base, SampleEngine::LazyPathwise, id, seed)
}

impl DynamicsSample {
    /// Draws a sample of the base posterior (an empty posterior is the
    /// prior). All randomness comes from streams derived from `seed`.
    pub fn draw(
        base: Arc<GpPosterior>,
        engine: SampleEngine,
        id: usize,
        seed: u64,
    ) -> Result<Self> {
        let state = match engine {
            SampleEngine::LazyPathwise => EngineState::Lazy(LazyState {
                points: Vec::new(),
                values: Vec::new(),
                chol_rows: Vec::new(),
                solved_resid: vec![Vec::new(); base.d_x()],
                base_solves: Vec::new(),
                rng: rng::derive_rng(seed, &[rng::purpose::SAMPLE_DRAW, id as u64]),
            }),
            SampleEngine::RandomFourier { n_features } => {
                if n_features == 0 {
                    return Err(Error::invalid("n_features", "need >= 1"));
                }
                let mut r = rng::derive_rng(seed, &[rng::purpose::SAMPLE_DRAW, id as u64]);
                EngineState::Rff(RffState::draw(&base, n_features, &mut r)?)
            }
        };
        Ok(DynamicsSample {
            id,
            seed,
            base,
            state,
            layers: Vec::new(),
            layer_window: None,
        })
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn base(&self) -> &Arc<GpPosterior> {
        &self.base
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn set_layer_window(&mut self, window: Option<usize>) {
        self.layer_window = window;
    }

    /// True when evaluation needs no mutable cache, making the sample safe to
    /// evaluate from `&self` (random-feature engine).
    pub fn is_pure_function(&self) -> bool {
        matches!(self.state, EngineState::Rff(_))
    }

    fn layer_indices(&self) -> Vec<usize> {
        let l = self.layers.len();
        match self.layer_window {
            Some(w) if l > w + 1 => {
                let mut idx = vec![0];
                idx.extend(l - w..l);
                idx
            }
            _ => (0..l).collect(),
        }
    }

    fn apply_layers(&self, z: &[f64], value: &mut [f64]) {
        for i in self.layer_indices() {
            self.layers[i].clip(z, value);
        }
    }

    /// Evaluates the sampled function. Re-evaluating the same point returns
    /// bit-identical values: the lazy engine caches, the feature engine is a
    /// fixed function.
    pub fn eval(&mut self, z: &[f64]) -> Vec<f64> {
        assert_eq!(z.len(), self.base.query_dim(), "sample query dim");
        match &mut self.state {
            EngineState::Rff(rff) => {
                let mut v = rff.eval(&self.base, z);
                self.apply_layers(z, &mut v);
                v
            }
            EngineState::Lazy(_) => {
                if let EngineState::Lazy(lazy) = &self.state {
                    if let Some(i) = lazy.points.iter().position(|p| p.as_slice() == z) {
                        return lazy.values[i].clone();
                    }
                }
                let (mut v, solved_kvec, w, pivot) = {
                    let EngineState::Lazy(lazy) = &mut self.state else {
                        unreachable!()
                    };
                    lazy.conditional_draw(&self.base, z)
                };
                self.apply_layers(z, &mut v);
                let EngineState::Lazy(lazy) = &mut self.state else {
                    unreachable!()
                };
                lazy.append(&self.base, z, &v, solved_kvec, w, pivot);
                v
            }
        }
    }

    /// Evaluation without mutation; only available for pure-function engines.
    pub fn eval_pure(&self, z: &[f64]) -> Option<Vec<f64>> {
        match &self.state {
            EngineState::Rff(rff) => {
                let mut v = rff.eval(&self.base, z);
                self.apply_layers(z, &mut v);
                Some(v)
            }
            EngineState::Lazy(_) => None,
        }
    }

    /// Adds a confidence-band layer and re-clips every cached value so the
    /// cache stays consistent with future evaluations.
    pub fn truncate(&mut self, gp: Arc<GpPosterior>, beta: f64) -> Result<()> {
        self.truncate_with_sketch(gp, beta, None)
    }

    /// `truncate` with a feature-space width for the new layer's clipping.
    pub fn truncate_with_sketch(
        &mut self,
        gp: Arc<GpPosterior>,
        beta: f64,
        sketch: Option<Arc<VarianceSketch>>,
    ) -> Result<()> {
        if !(beta.is_finite() && beta >= 0.0) {
            return Err(Error::invalid("beta", format!("{beta}, need finite >= 0")));
        }
        if gp.query_dim() != self.base.query_dim() || gp.d_x() != self.base.d_x() {
            return Err(Error::invalid("truncation gp", "dims differ from sample"));
        }
        let layer = TruncationLayer { gp, beta, sketch };
        if let EngineState::Lazy(lazy) = &mut self.state {
            for (z, v) in lazy.points.iter().zip(lazy.values.iter_mut()) {
                layer.clip(z, v);
            }
        }
        self.layers.push(layer);
        Ok(())
    }
}

impl LazyState {
    /// Conditional mean/std of the base posterior at `z` given the cache as
    /// noise-free observations, then one Gaussian draw per output. Returns
    /// the raw draw plus the solver rows needed to append `z`.
    fn conditional_draw(
        &mut self,
        base: &GpPosterior,
        z: &[f64],
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>, f64) {
        let p = self.points.len();
        let d_x = base.d_x();

        // Base-posterior covariance between z and each cache point, sharing
        // one triangular solve for z.
        let solved_z = base.half_solve_kvec(z);
        let kzz = base.posterior_var_from_half(z, &solved_z).max(0.0);
        let mut g = vec![0.0; p];
        for i in 0..p {
            g[i] = base.cov_from_halves(&self.points[i], z, &self.base_solves[i], &solved_z);
        }
        // w = C^-1/2 g through the incremental cache factor.
        let mut w = g;
        for i in 0..p {
            let off = i * (i + 1) / 2;
            let mut s = w[i];
            for j in 0..i {
                s -= self.chol_rows[off + j] * w[j];
            }
            w[i] = s / self.chol_rows[off + i];
        }
        let w2: f64 = w.iter().map(|x| x * x).sum();
        let mut var = kzz - w2;
        // Numerical floor: near-duplicate geometry can push this slightly
        // negative; clamp like the posterior variance path.
        if var < 0.0 {
            var = 0.0;
        }
        let sd = var.sqrt();
        let base_mean = base.posterior_mean(z);
        let mut value = vec![0.0; d_x];
        for j in 0..d_x {
            let cond_mean: f64 =
                base_mean[j] + w.iter().zip(&self.solved_resid[j]).map(|(a, b)| a * b).sum::<f64>();
            let eps: f64 = StandardNormal.sample(&mut self.rng);
            value[j] = cond_mean + sd * eps;
        }
        (value, solved_z, w, sd)
    }

    fn append(
        &mut self,
        base: &GpPosterior,
        z: &[f64],
        clipped: &[f64],
        solved_kvec: Vec<f64>,
        w: Vec<f64>,
        pivot: f64,
    ) {
        // Pivot floor keeps the factor invertible when z nearly repeats a
        // cached point (the jitter escalation analogue for rank-1 growth).
        let base_scale = base.kernel().variance_at(z).abs().max(1e-300);
        let pivot = pivot.max(1e-7 * base_scale.sqrt());
        let base_mean = base.posterior_mean(z);
        for j in 0..base.d_x() {
            let resid = clipped[j] - base_mean[j];
            let s: f64 = w.iter().zip(&self.solved_resid[j]).map(|(a, b)| a * b).sum();
            self.solved_resid[j].push((resid - s) / pivot);
        }
        self.chol_rows.extend_from_slice(&w);
        self.chol_rows.push(pivot);
        self.base_solves.push(solved_kvec);
        self.points.push(z.to_vec());
        self.values.push(clipped.to_vec());
    }
}

impl RffState {
    fn draw(base: &GpPosterior, n_features: usize, r: &mut ChaCha8Rng) -> Result<Self> {
        let kernel = base.kernel();
        let d_x = base.d_x();
        let features = FeatureMap::draw(kernel, n_features, r);
        let f = features.len();
        let weights: Vec<Vec<f64>> = (0..d_x)
            .map(|_| (0..f).map(|_| StandardNormal.sample(r)).collect())
            .collect();
        let mut state = RffState {
            features,
            weights,
            correction: Vec::new(),
        };

        // Pathwise data correction: condition the global draw on the base
        // posterior's data so marginals match GP(mu_n, k_n).
        let n = base.n_points();
        if n > 0 {
            let mut correction = Vec::with_capacity(base.d_x());
            let g_at_data: Vec<Vec<f64>> = base
                .inputs()
                .iter()
                .map(|x| state.prior_part(base, x))
                .collect();
            for j in 0..base.d_x() {
                let mut rhs = vec![0.0; n];
                for i in 0..n {
                    let mean_j = base.prior().mean.eval(&base.inputs()[i], base.d_x())[j];
                    let noise: f64 = StandardNormal.sample(r);
                    rhs[i] = base.targets()[i][j]
                        - mean_j
                        - g_at_data[i][j]
                        - base.prior().noise_std * noise;
                }
                base.chol().solve_in_place(&mut rhs);
                correction.push(rhs);
            }
            state.correction = correction;
        }
        Ok(state)
    }

    /// Zero-mean prior part `g_j(z)` of the draw.
    fn prior_part(&self, base: &GpPosterior, z: &[f64]) -> Vec<f64> {
        let d_x = base.d_x();
        let feats = self.features.eval(z);
        (0..d_x)
            .map(|j| {
                self.weights[j]
                    .iter()
                    .zip(&feats)
                    .map(|(w, ph)| w * ph)
                    .sum::<f64>()
            })
            .collect()
    }

    fn eval(&self, base: &GpPosterior, z: &[f64]) -> Vec<f64> {
        let d_x = base.d_x();
        let mut v = base.prior().mean.eval(z, d_x);
        let g = self.prior_part(base, z);
        for j in 0..d_x {
            v[j] += g[j];
        }
        if !self.correction.is_empty() {
            let kvec = base.kvec(z);
            for j in 0..d_x {
                v[j] += kvec
                    .iter()
                    .zip(&self.correction[j])
                    .map(|(a, b)| a * b)
                    .sum::<f64>();
            }
        }
        v
    }
}

/// Inputs for the sample-count bound
/// `M >= log(delta) / log(1 - exp(-d_x (B^2/2 + phi(zeta))))`.
#[derive(Debug, Clone)]
pub struct BudgetInputs {
    pub delta: f64,
    pub zeta: f64,
    pub rkhs_bound: f64,
    pub d_x: usize,
    pub small_ball_exponent: f64,
    /// Hard cap on the returned count; the bound is exponentially
    /// conservative in `d_x` and `zeta`, so desk-scale runs cap it.
    pub cap: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BudgetResult {
    pub m: u64,
    /// True when the bound exceeded `cap` and was clamped: the returned
    /// count no longer carries the coverage guarantee.
    pub capped: bool,
}

pub fn sample_budget(inputs: &BudgetInputs) -> Result<BudgetResult> {
    let BudgetInputs {
        delta,
        zeta,
        rkhs_bound,
        d_x,
        small_ball_exponent,
        cap,
    } = *inputs;
    if !(delta > 0.0 && delta <= 1.0) {
        return Err(Error::invalid("delta", format!("{delta}, need (0, 1]")));
    }
    if !(zeta.is_finite() && zeta > 0.0) {
        return Err(Error::invalid("zeta", "need finite > 0"));
    }
    if !(rkhs_bound.is_finite() && rkhs_bound > 0.0) {
        return Err(Error::invalid("rkhs_bound", "need finite > 0"));
    }
    if d_x == 0 {
        return Err(Error::invalid("d_x", "need >= 1"));
    }
    if !(small_ball_exponent.is_finite() && small_ball_exponent >= 0.0) {
        return Err(Error::invalid("small_ball_exponent", "need finite >= 0"));
    }
    if cap == 0 {
        return Err(Error::invalid("cap", "need >= 1"));
    }
    let a = d_x as f64 * (0.5 * rkhs_bound * rkhs_bound + small_ball_exponent);
    // denom = ln(1 - e^-a), stable at both ends.
    let ea = (-a).exp();
    if ea == 0.0 {
        return Ok(BudgetResult { m: cap, capped: true });
    }
    let denom = (-ea).ln_1p();
    let m_real = delta.ln() / denom;
    if !m_real.is_finite() || m_real > cap as f64 {
        return Ok(BudgetResult { m: cap, capped: true });
    }
    Ok(BudgetResult {
        m: (m_real.ceil() as u64).max(1),
        capped: false,
    })
}

/// Monte-Carlo estimator config for the small-ball exponent. The grid and
/// draw count are fixed up front so estimates are reproducible and monotone
/// comparisons across `zeta` reuse the same draws.
#[derive(Debug, Clone)]
pub struct SmallBallConfig {
    pub grid: Vec<QueryPoint>,
    pub n_draws: usize,
    pub seed: u64,
}

impl SmallBallConfig {
    /// 64 quasi-uniform points in `[-1, 1]^dim`, 4000 draws.
    pub fn default_for_dim(dim: usize) -> Self {
        let mut r = rng::derive_rng(0x5ba1_1, &[rng::purpose::SMALL_BALL, dim as u64]);
        let grid = (0..64)
            .map(|_| (0..dim).map(|_| r.gen::<f64>() * 2.0 - 1.0).collect())
            .collect();
        SmallBallConfig {
            grid,
            n_draws: 4000,
            seed: 0x5ba1_1,
        }
    }
}

/// Estimates `phi(zeta) = -ln P(||g||_inf < zeta)` for a zero-mean prior
/// draw `g` on the fixed grid, with add-one smoothing so the estimate stays
/// finite when no draw lands inside the ball.
pub fn small_ball_exponent(
    kernel: &KernelSpec,
    zeta: f64,
    config: &SmallBallConfig,
) -> Result<f64> {
    if !(zeta.is_finite() && zeta > 0.0) {
        return Err(Error::invalid("zeta", "need finite > 0"));
    }
    kernel.validate()?;
    if config.grid.is_empty() {
        return Err(Error::invalid("grid", "must be non-empty"));
    }
    if config.n_draws == 0 {
        return Err(Error::invalid("n_draws", "need >= 1"));
    }
    let n = config.grid.len();
    let mut packed = vec![0.0; n * (n + 1) / 2];
    let scaled: Vec<Vec<f64>> = config.grid.iter().map(|z| kernel.scale(z)).collect();
    for i in 0..n {
        let off = i * (i + 1) / 2;
        for j in 0..=i {
            packed[off + j] = kernel.eval_scaled(&scaled[i], &scaled[j]);
        }
    }
    // The noise-free grid Gram is often numerically singular; lean on the
    // escalation schedule.
    let (chol, _) = cholesky_with_jitter(n, packed, "small_ball grid")?;
    let mut r = rng::derive_rng(config.seed, &[rng::purpose::SMALL_BALL, n as u64]);
    let rows = chol.raw_rows();
    let mut inside = 0u64;
    let mut u = vec![0.0; n];
    for _ in 0..config.n_draws {
        for ui in u.iter_mut() {
            *ui = StandardNormal.sample(&mut r);
        }
        // g = L u evaluated row by row; sup-norm early exit.
        let mut ok = true;
        for i in 0..n {
            let off = i * (i + 1) / 2;
            let mut g = 0.0;
            for (j, uj) in u.iter().enumerate().take(i + 1) {
                g += rows[off + j] * uj;
            }
            if g.abs() >= zeta {
                ok = false;
                break;
            }
        }
        if ok {
            inside += 1;
        }
    }
    Ok(((config.n_draws as f64 + 1.0) / (inside as f64 + 1.0)).ln())
}

/// Constraint tightening `Delta_zeta = zeta sqrt(d_x) T^2 C_max / sigma_w`.
pub fn tightening_delta(
    zeta: f64,
    d_x: usize,
    horizon: usize,
    c_max: f64,
    sigma_w: f64,
) -> Result<f64> {
    if !(zeta.is_finite() && zeta >= 0.0) {
        return Err(Error::invalid("zeta", "need finite >= 0"));
    }
    if d_x == 0 || horizon == 0 {
        return Err(Error::invalid("d_x/horizon", "need >= 1"));
    }
    if !(c_max.is_finite() && c_max > 0.0) {
        return Err(Error::invalid("c_max", "need finite > 0"));
    }
    if !(sigma_w.is_finite() && sigma_w > 0.0) {
        return Err(Error::invalid("sigma_w", "need finite > 0"));
    }
    let t = horizon as f64;
    Ok(zeta * (d_x as f64).sqrt() * t * t * c_max / sigma_w)
}

/// Exploration threshold
/// `d_sigma_n = eps sigma_w / (2 G_max T beta_n)`.
pub fn exploration_threshold(
    eps: f64,
    sigma_w: f64,
    g_max: f64,
    horizon: usize,
    beta_n: f64,
) -> Result<f64> {
    if !(eps.is_finite() && eps > 0.0) {
        return Err(Error::invalid("eps", "need finite > 0"));
    }
    if !(sigma_w.is_finite() && sigma_w > 0.0) {
        return Err(Error::invalid("sigma_w", "need finite > 0"));
    }
    if !(g_max.is_finite() && g_max > 0.0) {
        return Err(Error::invalid("g_max", "need finite > 0"));
    }
    if horizon == 0 {
        return Err(Error::invalid("horizon", "need >= 1"));
    }
    if !(beta_n.is_finite() && beta_n > 0.0) {
        return Err(Error::invalid("beta_n", "need finite > 0"));
    }
    Ok(eps * sigma_w / (2.0 * g_max * horizon as f64 * beta_n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp::MeanFn;
    use proptest::prelude::*;
    use rand::Rng;

    fn se_1d() -> KernelSpec {
        KernelSpec::new(KernelKind::SquaredExp, vec![0.7], 1.44).unwrap()
    }

    fn prior(noise: f64) -> PriorSpec {
        PriorSpec::new(MeanFn::Zero, 2.0, noise).unwrap()
    }

    fn prior_base(d_x: usize) -> Arc<GpPosterior> {
        Arc::new(GpPosterior::prior_only(prior(0.1), se_1d(), d_x).unwrap())
    }

    #[test]
    fn variance_sketch_tracks_exact_posterior_width() {
        // The feature-space width must follow the exact posterior width to
        // within random-feature error, both with and without data.
        let kernel = se_1d();
        let pr = prior(0.1);
        let bare = GpPosterior::prior_only(pr.clone(), kernel.clone(), 1).unwrap();
        let sk = VarianceSketch::build(&bare, 2048, 11).unwrap();
        let sf = kernel.signal_variance.sqrt();
        for z in [-1.0, 0.0, 2.5] {
            let rel = (sk.std(&[z]) - sf).abs() / sf;
            assert!(rel < 0.05, "prior width at {z}: rel err {rel}");
        }

        let mut r = rng::derive_rng(5, &[rng::purpose::ROLLOUT]);
        let data: Vec<(QueryPoint, Vec<f64>)> = (0..40)
            .map(|i| {
                let x = -1.5 + 3.0 * (i as f64) / 39.0;
                let y = (2.0 * x).sin() + 0.1 * r.gen::<f64>();
                (vec![x], vec![y])
            })
            .collect();
        let gp = GpPosterior::fit(pr, kernel, 1, &data).unwrap();
        let sk = VarianceSketch::build(&gp, 2048, 11).unwrap();
        for z in [-1.4, -0.3, 0.8, 1.45, 2.2] {
            let exact = gp.mean_and_std(&[z]).1;
            let approx = sk.std(&[z]);
            let rel = (approx - exact).abs() / exact.max(1e-6);
            assert!(
                rel < 0.2,
                "width at {z}: exact {exact}, sketch {approx}, rel err {rel}"
            );
        }
    }

    #[test]
    fn prior_draw_moments_match_kernel() {
        // f(z) per output is N(0, 1.44) under the prior; check first two
        // moments over 2000 independent draws.
        let base = prior_base(2);
        let z = [0.3];
        let n = 2000;
        let (mut sum, mut sum_sq) = (vec![0.0; 2], vec![0.0; 2]);
        for s in 0..n {
            let mut f =
                DynamicsSample::draw(Arc::clone(&base), SampleEngine::LazyPathwise, 0, s).unwrap();
            let v = f.eval(&z);
            for j in 0..2 {
                sum[j] += v[j];
                sum_sq[j] += v[j] * v[j];
            }
        }
        for j in 0..2 {
            let mean = sum[j] / n as f64;
            let var = sum_sq[j] / n as f64 - mean * mean;
            assert!(mean.abs() < 0.12, "output {j} mean {mean}");
            assert!((1.25..1.65).contains(&var), "output {j} var {var}");
        }
    }

    #[test]
    fn two_point_joint_matches_closed_form_gaussian() {
        // Sequential conditioning must reproduce the joint prior: for
        // z1 = 0.2, z2 = 0.55 the Gram is [[1.44, k12], [k12, 1.44]] with
        // k12 = 1.44 exp(-0.5 (0.35 / 0.7)^2).
        let k12 = 1.2707955397218174;
        let base = prior_base(1);
        let (z1, z2) = ([0.2], [0.55]);
        let n = 2000;
        let (mut s1, mut s2, mut s11, mut s22, mut s12) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for s in 0..n {
            let mut f =
                DynamicsSample::draw(Arc::clone(&base), SampleEngine::LazyPathwise, 1, s).unwrap();
            let a = f.eval(&z1)[0];
            let b = f.eval(&z2)[0];
            s1 += a;
            s2 += b;
            s11 += a * a;
            s22 += b * b;
            s12 += a * b;
        }
        let nf = n as f64;
        let (m1, m2) = (s1 / nf, s2 / nf);
        let v11 = s11 / nf - m1 * m1;
        let v22 = s22 / nf - m2 * m2;
        let v12 = s12 / nf - m1 * m2;
        assert!((v11 - 1.44).abs() < 0.15, "var(z1) {v11}");
        assert!((v22 - 1.44).abs() < 0.15, "var(z2) {v22}");
        assert!((v12 - k12).abs() < 0.15, "cov {v12} want {k12}");
    }

    #[test]
    fn re_evaluation_and_redraw_are_bit_identical() {
        let base = prior_base(2);
        let pts = [[0.1], [-0.6], [1.3]];
        for engine in [
            SampleEngine::LazyPathwise,
            SampleEngine::RandomFourier { n_features: 64 },
        ] {
            let mut a = DynamicsSample::draw(Arc::clone(&base), engine, 3, 42).unwrap();
            let mut b = DynamicsSample::draw(Arc::clone(&base), engine, 3, 42).unwrap();
            let mut c = DynamicsSample::draw(Arc::clone(&base), engine, 4, 42).unwrap();
            let mut differs = false;
            for z in &pts {
                let va = a.eval(z);
                assert_eq!(va, a.eval(z), "re-eval changed value");
                assert_eq!(va, b.eval(z), "same id+seed drew different function");
                differs |= va != c.eval(z);
            }
            assert!(differs, "different id produced the same function");
        }
    }

    #[test]
    fn eval_pure_matches_eval_only_for_feature_engine() {
        let base = prior_base(1);
        let mut rff = DynamicsSample::draw(
            Arc::clone(&base),
            SampleEngine::RandomFourier { n_features: 32 },
            0,
            9,
        )
        .unwrap();
        assert!(rff.is_pure_function());
        let z = [0.4];
        assert_eq!(rff.eval_pure(&z).unwrap(), rff.eval(&z));
        let lazy =
            DynamicsSample::draw(Arc::clone(&base), SampleEngine::LazyPathwise, 0, 9).unwrap();
        assert!(!lazy.is_pure_function());
        assert!(lazy.eval_pure(&z).is_none());
    }

    #[test]
    fn truncation_clips_fresh_and_cached_values() {
        let base = prior_base(1);
        let z = [0.25];
        let raw = DynamicsSample::draw(Arc::clone(&base), SampleEngine::LazyPathwise, 7, 5)
            .unwrap()
            .eval(&z);
        let (mean, sigma) = base.mean_and_std(&z);
        let beta = 0.1;
        let want = raw[0].clamp(mean[0] - beta * sigma, mean[0] + beta * sigma);
        assert_ne!(raw[0], want, "draw landed inside the tight band; widen z");

        // Layer installed before the first evaluation clips the fresh draw.
        let mut fresh =
            DynamicsSample::draw(Arc::clone(&base), SampleEngine::LazyPathwise, 7, 5).unwrap();
        fresh.truncate(Arc::clone(&base), beta).unwrap();
        assert_eq!(fresh.eval(&z), vec![want]);

        // Layer installed after caching re-clips the cache.
        let mut cached =
            DynamicsSample::draw(Arc::clone(&base), SampleEngine::LazyPathwise, 7, 5).unwrap();
        assert_eq!(cached.eval(&z), raw);
        cached.truncate(Arc::clone(&base), beta).unwrap();
        assert_eq!(cached.eval(&z), vec![want]);
        assert_eq!(cached.n_layers(), 1);
    }

    #[test]
    fn layered_clipping_equals_sequential_band_intersection() {
        // Oracle: clamp the twin's raw draw through each band in order.
        let gp1 = prior_base(1);
        let data = vec![(vec![0.1], vec![0.4])];
        let gp2 = Arc::new(GpPosterior::fit(prior(0.1), se_1d(), 1, &data).unwrap());
        let z = [0.8];
        let raw = DynamicsSample::draw(Arc::clone(&gp1), SampleEngine::LazyPathwise, 2, 11)
            .unwrap()
            .eval(&z);

        let mut layered =
            DynamicsSample::draw(Arc::clone(&gp1), SampleEngine::LazyPathwise, 2, 11).unwrap();
        layered.truncate(Arc::clone(&gp1), 0.8).unwrap();
        layered.truncate(Arc::clone(&gp2), 0.6).unwrap();
        let got = layered.eval(&z);

        let (m1, s1) = gp1.mean_and_std(&z);
        let (m2, s2) = gp2.mean_and_std(&z);
        let step1 = raw[0].clamp(m1[0] - 0.8 * s1, m1[0] + 0.8 * s1);
        let step2 = step1.clamp(m2[0] - 0.6 * s2, m2[0] + 0.6 * s2);
        assert_eq!(got, vec![step2]);
        assert!(
            (got[0] - m2[0]).abs() <= 0.6 * s2 + 1e-15,
            "outside the tighter band"
        );
    }

    #[test]
    fn layer_window_equals_full_intersection_for_nested_bands() {
        // Same-center bands nest, so first + latest layer reproduce the full
        // intersection.
        let base = prior_base(1);
        let z = [0.5];
        let mut full =
            DynamicsSample::draw(Arc::clone(&base), SampleEngine::LazyPathwise, 0, 3).unwrap();
        let mut windowed =
            DynamicsSample::draw(Arc::clone(&base), SampleEngine::LazyPathwise, 0, 3).unwrap();
        windowed.set_layer_window(Some(1));
        for beta in [1.5, 0.9, 0.4, 0.2] {
            full.truncate(Arc::clone(&base), beta).unwrap();
            windowed.truncate(Arc::clone(&base), beta).unwrap();
        }
        assert_eq!(full.eval(&z), windowed.eval(&z));
    }

    #[test]
    fn prior_helper_matches_explicit_prior_only_draw() {
        let p = prior(0.1);
        let k = se_1d();
        let mut a = draw_prior_sample(&p, &k, 2, 5, 77).unwrap();
        let base = Arc::new(GpPosterior::prior_only(p, k, 2).unwrap());
        let mut b = DynamicsSample::draw(base, SampleEngine::LazyPathwise, 5, 77).unwrap();
        for z in [[0.0], [0.9], [-1.4]] {
            assert_eq!(a.eval(&z), b.eval(&z));
        }
    }

    #[test]
    fn rff_marginals_track_exact_posterior() {
        let data = vec![
            (vec![-1.0], vec![0.3]),
            (vec![-0.2], vec![0.9]),
            (vec![0.5], vec![0.6]),
            (vec![1.2], vec![-0.4]),
        ];
        let gp = Arc::new(GpPosterior::fit(prior(0.1), se_1d(), 1, &data).unwrap());
        let n = 600;
        for z in [[0.1], [2.5]] {
            let (mean, sigma) = gp.mean_and_std(&z);
            let (mut s, mut ss) = (0.0, 0.0);
            for i in 0..n {
                let f = DynamicsSample::draw(
                    Arc::clone(&gp),
                    SampleEngine::RandomFourier { n_features: 768 },
                    i,
                    123,
                )
                .unwrap();
                let v = f.eval_pure(&z).unwrap()[0];
                s += v;
                ss += v * v;
            }
            let emp_mean = s / n as f64;
            let emp_std = (ss / n as f64 - emp_mean * emp_mean).sqrt();
            assert!(
                (emp_mean - mean[0]).abs() < 0.1,
                "z {z:?}: mean {emp_mean} want {}",
                mean[0]
            );
            assert!(
                (emp_std - sigma).abs() < 0.2 * sigma + 0.02,
                "z {z:?}: std {emp_std} want {sigma}"
            );
        }
    }

    #[test]
    fn sample_budget_frozen_examples() {
        // a = ln 2 makes the bound ln(delta) / ln(1/2).
        let b = 1e-8;
        let exact = BudgetInputs {
            delta: 0.1,
            zeta: 0.3,
            rkhs_bound: b,
            d_x: 1,
            small_ball_exponent: std::f64::consts::LN_2 - 0.5 * b * b,
            cap: 1_000_000,
        };
        assert_eq!(
            sample_budget(&exact).unwrap(),
            BudgetResult { m: 4, capped: false }
        );
        let half = BudgetInputs { delta: 0.5, ..exact.clone() };
        assert_eq!(
            sample_budget(&half).unwrap(),
            BudgetResult { m: 1, capped: false }
        );
        let mid = BudgetInputs {
            delta: 0.05,
            zeta: 0.3,
            rkhs_bound: 1.0,
            d_x: 2,
            small_ball_exponent: 0.3,
            cap: 1_000_000,
        };
        assert_eq!(
            sample_budget(&mid).unwrap(),
            BudgetResult { m: 14, capped: false }
        );
        let hopeless = BudgetInputs { rkhs_bound: 100.0, ..mid.clone() };
        assert_eq!(
            sample_budget(&hopeless).unwrap(),
            BudgetResult { m: 1_000_000, capped: true }
        );
    }

    #[test]
    fn sample_budget_rejects_bad_inputs() {
        let good = BudgetInputs {
            delta: 0.1,
            zeta: 0.3,
            rkhs_bound: 1.0,
            d_x: 2,
            small_ball_exponent: 0.3,
            cap: 100,
        };
        assert!(sample_budget(&good).is_ok());
        assert!(sample_budget(&BudgetInputs { delta: 0.0, ..good.clone() }).is_err());
        assert!(sample_budget(&BudgetInputs { delta: 1.5, ..good.clone() }).is_err());
        assert!(sample_budget(&BudgetInputs { zeta: 0.0, ..good.clone() }).is_err());
        assert!(sample_budget(&BudgetInputs { rkhs_bound: -1.0, ..good.clone() }).is_err());
        assert!(sample_budget(&BudgetInputs { d_x: 0, ..good.clone() }).is_err());
        assert!(sample_budget(&BudgetInputs { cap: 0, ..good.clone() }).is_err());
    }

    #[test]
    fn schedule_formulas_frozen_values() {
        // 0.01 * sqrt(4) * 100 * 1 / 0.1 and 1 * 0.1 / (2 * 1 * 10 * 1).
        assert_eq!(tightening_delta(0.01, 4, 10, 1.0, 0.1).unwrap(), 20.0);
        assert_eq!(tightening_delta(0.0, 4, 10, 1.0, 0.1).unwrap(), 0.0);
        assert_eq!(exploration_threshold(1.0, 0.1, 1.0, 10, 1.0).unwrap(), 0.005);
        assert!(tightening_delta(0.01, 4, 10, 1.0, 0.0).is_err());
        assert!(tightening_delta(-0.01, 4, 10, 1.0, 0.1).is_err());
        assert!(exploration_threshold(0.0, 0.1, 1.0, 10, 1.0).is_err());
        assert!(exploration_threshold(1.0, 0.1, 1.0, 0, 1.0).is_err());
    }

    #[test]
    fn small_ball_exponent_monotone_with_exact_extremes() {
        let k = se_1d();
        let mut r = rng::derive_rng(1, &[rng::purpose::SMALL_BALL]);
        let grid: Vec<QueryPoint> =
            (0..16).map(|_| vec![r.gen::<f64>() * 2.0 - 1.0]).collect();
        let cfg = SmallBallConfig {
            grid,
            n_draws: 1500,
            seed: 9,
        };
        let phis: Vec<f64> = [0.4, 0.9, 2.0]
            .iter()
            .map(|&z| small_ball_exponent(&k, z, &cfg).unwrap())
            .collect();
        assert!(
            phis[0] >= phis[1] && phis[1] >= phis[2],
            "not monotone: {phis:?}"
        );
        // No draw fits in a vanishing ball; every draw fits in a huge one.
        let tiny = small_ball_exponent(&k, 1e-9, &cfg).unwrap();
        assert_eq!(tiny, 1501f64.ln());
        let huge = small_ball_exponent(&k, 1e9, &cfg).unwrap();
        assert_eq!(huge, 0.0);
    }

    proptest! {
        /// Clamping toward a band that contains the truth never moves a
        /// value farther from the truth, so clipping preserves closeness.
        #[test]
        fn clipping_toward_band_containing_truth_never_hurts(
            truth in -10.0..10.0f64,
            v in -10.0..10.0f64,
            below in 0.0..5.0f64,
            above in 0.0..5.0f64)
        {
            let clipped = v.clamp(truth - below, truth + above);
            prop_assert!((clipped - truth).abs() <= (v - truth).abs() + 1e-12);
        }
    }
}
