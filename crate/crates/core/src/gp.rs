//! Exact multi-output GP regression with a shared kernel.
//!
//! All `d_x` outputs share one kernel and one Cholesky factor of
//! `K + sigma_w^2 I`; only the per-output weight vectors `alpha_j` differ.
//! Consequently the posterior standard deviation is identical across output
//! coordinates, which the rest of the crate relies on.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::kernel::KernelSpec;
use crate::QueryPoint;

/// Prior mean over the dynamics, evaluated per output coordinate.
#[derive(Debug, Clone, PartialEq)]
pub enum MeanFn {
    Zero,
    /// `m_j(z) = weights[j] . z + bias[j]`
    Affine {
        weights: Vec<Vec<f64>>,
        bias: Vec<f64>,
    },
    /// Nearest-neighbor lookup in a table of `(point, value)` pairs.
    Tabulated {
        points: Vec<Vec<f64>>,
        values: Vec<Vec<f64>>,
    },
}

impl MeanFn {
    pub fn eval(&self, z: &[f64], d_x: usize) -> Vec<f64> {
        match self {
            MeanFn::Zero => vec![0.0; d_x],
            MeanFn::Affine { weights, bias } => weights
                .iter()
                .zip(bias)
                .map(|(w, b)| w.iter().zip(z).map(|(wi, zi)| wi * zi).sum::<f64>() + b)
                .collect(),
            MeanFn::Tabulated { points, values } => {
                let (best, _) = points
                    .iter()
                    .enumerate()
                    .map(|(i, p)| {
                        let d2: f64 = p
                            .iter()
                            .zip(z)
                            .map(|(a, b)| {
                                let d = a - b;
                                d * d
                            })
                            .sum();
                        (i, d2)
                    })
                    .min_by(|a, b| a.1.total_cmp(&b.1))
                    .expect("tabulated mean with no points");
                values[best].clone()
            }
        }
    }

    fn validate(&self, query_dim: usize, d_x: usize) -> Result<()> {
        match self {
            MeanFn::Zero => Ok(()),
            MeanFn::Affine { weights, bias } => {
                if weights.len() != d_x || bias.len() != d_x {
                    return Err(Error::invalid("mean_fn", "affine rows must match d_x"));
                }
                if weights.iter().any(|w| w.len() != query_dim) {
                    return Err(Error::invalid("mean_fn", "affine cols must match input dim"));
                }
                Ok(())
            }
            MeanFn::Tabulated { points, values } => {
                if points.is_empty() || points.len() != values.len() {
                    return Err(Error::invalid("mean_fn", "table must be non-empty, aligned"));
                }
                if points.iter().any(|p| p.len() != query_dim)
                    || values.iter().any(|v| v.len() != d_x)
                {
                    return Err(Error::invalid("mean_fn", "table entry dims"));
                }
                Ok(())
            }
        }
    }
}

/// Prior over dynamics functions: mean, RKHS norm bound `B`, and the
/// process noise level the regression assumes.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorSpec {
    pub mean: MeanFn,
    /// Bound on the per-coordinate RKHS norm of the residual `f_j - m_j`.
    pub rkhs_bound: f64,
    pub noise_std: f64,
}

impl PriorSpec {
    pub fn new(mean: MeanFn, rkhs_bound: f64, noise_std: f64) -> Result<Self> {
        let spec = PriorSpec {
            mean,
            rkhs_bound,
            noise_std,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rkhs_bound.is_finite() && self.rkhs_bound > 0.0) {
            return Err(Error::invalid("rkhs_bound", "need finite > 0"));
        }
        if !(self.noise_std.is_finite() && self.noise_std > 0.0) {
            return Err(Error::invalid("noise_std", "need finite > 0"));
        }
        Ok(())
    }
}

/// Lower-triangular factor stored row-major and packed: row `i` occupies
/// `i + 1` entries. Row-major packing makes forward substitution a sequence
/// of contiguous dot products, the dominant cost of a posterior-variance
/// query.
#[derive(Debug, Clone)]
pub(crate) struct PackedChol {
    n: usize,
    l: Vec<f64>,
}

#[inline]
fn row_off(i: usize) -> usize {
    i * (i + 1) / 2
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

impl PackedChol {
    /// Factors the packed symmetric matrix in place. `Err(i)` reports the
    /// first row whose pivot was non-positive.
    fn factor(n: usize, mut a: Vec<f64>) -> std::result::Result<Self, usize> {
        for i in 0..n {
            let (head, tail) = a.split_at_mut(row_off(i));
            let row_i = &mut tail[..i + 1];
            for j in 0..i {
                let row_j = &head[row_off(j)..row_off(j) + j + 1];
                let s = dot(&row_i[..j], &row_j[..j]);
                row_i[j] = (row_i[j] - s) / row_j[j];
            }
            let d = row_i[i] - dot(&row_i[..i], &row_i[..i]);
            if d <= 0.0 || !d.is_finite() {
                return Err(i);
            }
            row_i[i] = d.sqrt();
        }
        Ok(PackedChol { n, l: a })
    }

    /// `sum_i ln L_ii`.
    pub(crate) fn log_diag_sum(&self) -> f64 {
        (0..self.n).map(|i| self.l[row_off(i) + i].ln()).sum()
    }

    /// Solves `L x = b` in place.
    pub(crate) fn solve_lower_in_place(&self, b: &mut [f64]) {
        debug_assert_eq!(b.len(), self.n);
        for i in 0..self.n {
            let row = &self.l[row_off(i)..row_off(i) + i + 1];
            let s = dot(&row[..i], &b[..i]);
            b[i] = (b[i] - s) / row[i];
        }
    }

    /// Solves `L^T x = b` in place.
    pub(crate) fn solve_upper_in_place(&self, b: &mut [f64]) {
        for i in (0..self.n).rev() {
            let mut s = b[i];
            for k in i + 1..self.n {
                s -= self.l[row_off(k) + i] * b[k];
            }
            b[i] = s / self.l[row_off(i) + i];
        }
    }

    /// Solves `L L^T x = b` in place.
    pub(crate) fn solve_in_place(&self, b: &mut [f64]) {
        self.solve_lower_in_place(b);
        self.solve_upper_in_place(b);
    }

    /// Packed row-major factor entries; row `i` is `raw_rows()[i(i+1)/2 ..= i(i+1)/2 + i]`.
    pub(crate) fn raw_rows(&self) -> &[f64] {
        &self.l
    }
}

/// Factors `base + jitter * avg_diag * I`, escalating the relative jitter
/// from 1e-10 by factors of 10 up to 1e-4. The packed input is consumed on
/// success of the first attempt; later attempts re-add to a copy.
pub(crate) fn cholesky_with_jitter(
    n: usize,
    packed: Vec<f64>,
    context: &str,
) -> Result<(PackedChol, f64)> {
    if n == 0 {
        return Ok((PackedChol { n: 0, l: Vec::new() }, 0.0));
    }
    let avg_diag = {
        let tr: f64 = (0..n).map(|i| packed[row_off(i) + i]).sum();
        (tr / n as f64).abs().max(f64::MIN_POSITIVE)
    };
    match PackedChol::factor(n, packed.clone()) {
        Ok(c) => return Ok((c, 0.0)),
        Err(_) => {}
    }
    let mut rel = 1e-10;
    let mut last_fail = 0.0;
    while rel <= 1e-4 {
        let jitter = rel * avg_diag;
        let mut work = packed.clone();
        for i in 0..n {
            work[row_off(i) + i] += jitter;
        }
        match PackedChol::factor(n, work) {
            Ok(c) => return Ok((c, jitter)),
            Err(_) => last_fail = jitter,
        }
        rel *= 10.0;
    }
    Err(Error::Numerical(format!(
        "{context}: Gram matrix not positive definite after jitter escalation \
         (first failing jitter 0, last failing jitter {last_fail:.3e})"
    )))
}

/// Exact GP posterior over `d_x` output coordinates with a shared kernel.
#[derive(Debug)]
pub struct GpPosterior {
    prior: PriorSpec,
    kernel: KernelSpec,
    inputs: Vec<QueryPoint>,
    /// Inputs divided by the lengthscales, packed row-major `n x q`.
    scaled: Vec<f64>,
    /// Squared norms of the scaled inputs (SE/Matern distance trick).
    scaled_norm2: Vec<f64>,
    targets: Vec<Vec<f64>>,
    chol: PackedChol,
    /// `(K + sigma_w^2 I)^{-1} (y_j - m_j(X))`, one vector per output.
    alpha: Vec<Vec<f64>>,
    d_x: usize,
    query_dim: usize,
    jitter_used: f64,
    n_episodes: usize,
    negative_variance_clamps: AtomicU64,
}

impl GpPosterior {
    /// Fits the exact posterior. `data` pairs query points with next-state
    /// targets; empty data reproduces the prior.
    pub fn fit(
        prior: PriorSpec,
        kernel: KernelSpec,
        d_x: usize,
        data: &[(QueryPoint, Vec<f64>)],
    ) -> Result<Self> {
        let inputs: Vec<QueryPoint> = data.iter().map(|(z, _)| z.clone()).collect();
        let targets: Vec<Vec<f64>> = data.iter().map(|(_, y)| y.clone()).collect();
        Self::fit_parts(prior, kernel, d_x, inputs, targets)
    }

    /// The prior viewed as a posterior with no data.
    pub fn prior_only(prior: PriorSpec, kernel: KernelSpec, d_x: usize) -> Result<Self> {
        Self::fit_parts(prior, kernel, d_x, Vec::new(), Vec::new())
    }

    pub fn fit_parts(
        prior: PriorSpec,
        kernel: KernelSpec,
        d_x: usize,
        inputs: Vec<QueryPoint>,
        targets: Vec<Vec<f64>>,
    ) -> Result<Self> {
        prior.validate()?;
        kernel.validate()?;
        if d_x == 0 {
            return Err(Error::invalid("d_x", "need at least one output"));
        }
        if inputs.len() != targets.len() {
            return Err(Error::DimensionMismatch {
                context: "gp fit data",
                expected: inputs.len(),
                got: targets.len(),
            });
        }
        let q = kernel.input_dim();
        prior.mean.validate(q, d_x)?;
        for z in &inputs {
            if z.len() != q {
                return Err(Error::DimensionMismatch {
                    context: "gp fit input",
                    expected: q,
                    got: z.len(),
                });
            }
            if z.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("gp fit input"));
            }
        }
        for y in &targets {
            if y.len() != d_x {
                return Err(Error::DimensionMismatch {
                    context: "gp fit target",
                    expected: d_x,
                    got: y.len(),
                });
            }
            if y.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("gp fit target"));
            }
        }

        let n = inputs.len();
        let mut scaled = Vec::with_capacity(n * q);
        for z in &inputs {
            scaled.extend(kernel.scale(z));
        }
        let scaled_norm2: Vec<f64> = (0..n)
            .map(|i| dot(&scaled[i * q..(i + 1) * q], &scaled[i * q..(i + 1) * q]))
            .collect();

        // Packed lower triangle of K + sigma_w^2 I.
        let s2 = prior.noise_std * prior.noise_std;
        let mut packed = vec![0.0; n * (n + 1) / 2];
        for i in 0..n {
            let off = row_off(i);
            let si = &scaled[i * q..(i + 1) * q];
            for j in 0..=i {
                let sj = &scaled[j * q..(j + 1) * q];
                let mut v = kernel.eval_scaled(si, sj);
                if i == j {
                    v += s2;
                }
                packed[off + j] = v;
            }
        }
        let (chol, jitter_used) = cholesky_with_jitter(n, packed, "gp fit")?;

        let mut alpha = Vec::with_capacity(d_x);
        for j in 0..d_x {
            let mut r: Vec<f64> = (0..n)
                .map(|i| targets[i][j] - prior.mean.eval(&inputs[i], d_x)[j])
                .collect();
            chol.solve_in_place(&mut r);
            alpha.push(r);
        }

        Ok(GpPosterior {
            prior,
            kernel,
            inputs,
            scaled,
            scaled_norm2,
            targets,
            chol,
            alpha,
            d_x,
            query_dim: q,
            jitter_used,
            n_episodes: 0,
            negative_variance_clamps: AtomicU64::new(0),
        })
    }

    pub fn n_points(&self) -> usize {
        self.inputs.len()
    }

    pub fn d_x(&self) -> usize {
        self.d_x
    }

    pub fn query_dim(&self) -> usize {
        self.query_dim
    }

    pub fn prior(&self) -> &PriorSpec {
        &self.prior
    }

    pub fn kernel(&self) -> &KernelSpec {
        &self.kernel
    }

    pub fn inputs(&self) -> &[QueryPoint] {
        &self.inputs
    }

    pub fn targets(&self) -> &[Vec<f64>] {
        &self.targets
    }

    pub fn jitter_used(&self) -> f64 {
        self.jitter_used
    }

    pub fn n_episodes(&self) -> usize {
        self.n_episodes
    }

    pub fn set_n_episodes(&mut self, n: usize) {
        self.n_episodes = n;
    }

    /// Times a posterior variance came out negative and was clamped to zero.
    pub fn numerics_warnings(&self) -> u64 {
        self.negative_variance_clamps.load(Ordering::Relaxed)
    }

    /// `k(X, z)` for a query already scaled by the lengthscales.
    fn kvec_into(&self, sz: &[f64], sz_norm2: f64, out: &mut Vec<f64>) {
        let n = self.inputs.len();
        let q = self.query_dim;
        out.clear();
        out.reserve(n);
        use crate::kernel::KernelKind;
        let var = self.kernel.signal_variance;
        match self.kernel.kind {
            KernelKind::SquaredExp => {
                for i in 0..n {
                    let d2 = (self.scaled_norm2[i] + sz_norm2
                        - 2.0 * dot(&self.scaled[i * q..(i + 1) * q], sz))
                    .max(0.0);
                    out.push(var * (-0.5 * d2).exp());
                }
            }
            KernelKind::Linear => {
                for i in 0..n {
                    out.push(var * dot(&self.scaled[i * q..(i + 1) * q], sz));
                }
            }
            KernelKind::Matern52 => {
                for i in 0..n {
                    let d2 = (self.scaled_norm2[i] + sz_norm2
                        - 2.0 * dot(&self.scaled[i * q..(i + 1) * q], sz))
                    .max(0.0);
                    let r5 = 5f64.sqrt() * d2.sqrt();
                    out.push(var * (1.0 + r5 + 5.0 * d2 / 3.0) * (-r5).exp());
                }
            }
        }
    }

    fn check_query(&self, z: &[f64]) {
        assert_eq!(
            z.len(),
            self.query_dim,
            "query dim {} != model input dim {}",
            z.len(),
            self.query_dim
        );
    }

    /// Posterior mean, one entry per output coordinate.
    pub fn posterior_mean(&self, z: &[f64]) -> Vec<f64> {
        self.check_query(z);
        let mut mean = self.prior.mean.eval(z, self.d_x);
        if self.inputs.is_empty() {
            return mean;
        }
        let sz = self.kernel.scale(z);
        let mut kvec = Vec::new();
        self.kvec_into(&sz, dot(&sz, &sz), &mut kvec);
        for (j, m) in mean.iter_mut().enumerate() {
            *m += dot(&kvec, &self.alpha[j]);
        }
        mean
    }

    /// Posterior standard deviation; identical in every output coordinate
    /// because all outputs share the kernel and the data locations.
    pub fn posterior_std(&self, z: &[f64]) -> Vec<f64> {
        let (_, sigma) = self.mean_and_std(z);
        vec![sigma; self.d_x]
    }

    /// Mean vector and the shared scalar standard deviation in one pass over
    /// the data (a single `k` vector and a single triangular solve).
    pub fn mean_and_std(&self, z: &[f64]) -> (Vec<f64>, f64) {
        self.check_query(z);
        let mut mean = self.prior.mean.eval(z, self.d_x);
        let prior_var = self.kernel.variance_at(z);
        if self.inputs.is_empty() {
            return (mean, prior_var.max(0.0).sqrt());
        }
        let sz = self.kernel.scale(z);
        let mut kvec = Vec::new();
        self.kvec_into(&sz, dot(&sz, &sz), &mut kvec);
        for (j, m) in mean.iter_mut().enumerate() {
            *m += dot(&kvec, &self.alpha[j]);
        }
        self.chol.solve_lower_in_place(&mut kvec);
        let mut var = prior_var - dot(&kvec, &kvec);
        if var < 0.0 {
            self.negative_variance_clamps.fetch_add(1, Ordering::Relaxed);
            var = 0.0;
        }
        (mean, var.sqrt())
    }

    /// Posterior covariance `cov(f_j(a), f_j(b))`, shared across outputs.
    pub fn posterior_cov(&self, a: &[f64], b: &[f64]) -> f64 {
        self.check_query(a);
        self.check_query(b);
        let prior = self.kernel.eval(a, b);
        if self.inputs.is_empty() {
            return prior;
        }
        let sa = self.kernel.scale(a);
        let sb = self.kernel.scale(b);
        let mut ka = Vec::new();
        let mut kb = Vec::new();
        self.kvec_into(&sa, dot(&sa, &sa), &mut ka);
        self.kvec_into(&sb, dot(&sb, &sb), &mut kb);
        self.chol.solve_lower_in_place(&mut ka);
        self.chol.solve_lower_in_place(&mut kb);
        prior - dot(&ka, &kb)
    }

    /// Predictive uncertainty `s_n(z) = || posterior_std(z) ||_2
    /// = sqrt(d_x) * sigma_n(z)`.
    pub fn uncertainty(&self, z: &[f64]) -> f64 {
        let (_, sigma) = self.mean_and_std(z);
        (self.d_x as f64).sqrt() * sigma
    }

    /// `k(X, z)` for a raw query point.
    pub(crate) fn kvec(&self, z: &[f64]) -> Vec<f64> {
        self.check_query(z);
        let sz = self.kernel.scale(z);
        let mut out = Vec::new();
        self.kvec_into(&sz, dot(&sz, &sz), &mut out);
        out
    }

    /// `L^-1 k(X, z)`; the shared half-solve behind variance and covariance.
    pub(crate) fn half_solve_kvec(&self, z: &[f64]) -> Vec<f64> {
        let mut k = self.kvec(z);
        self.chol.solve_lower_in_place(&mut k);
        k
    }

    /// Posterior variance given the half-solve for `z`.
    pub(crate) fn posterior_var_from_half(&self, z: &[f64], half: &[f64]) -> f64 {
        self.kernel.variance_at(z) - dot(half, half)
    }

    /// Posterior covariance given the two half-solves.
    pub(crate) fn cov_from_halves(&self, a: &[f64], b: &[f64], ha: &[f64], hb: &[f64]) -> f64 {
        self.kernel.eval(a, b) - dot(ha, hb)
    }

    /// Information gain of the training set under the fitted factor:
    /// `1/2 ln det(I + sigma_w^-2 K) = sum_i ln L_ii - n ln sigma_w`.
    pub fn data_info_gain(&self) -> f64 {
        let n = self.inputs.len();
        if n == 0 {
            return 0.0;
        }
        (self.chol.log_diag_sum() - n as f64 * self.prior.noise_std.ln()).max(0.0)
    }

    pub(crate) fn chol(&self) -> &PackedChol {
        &self.chol
    }
}

/// Calibration radius `beta = B + sigma_w sqrt(2 (gamma + 1 + ln(d_x / delta)))`.
pub fn calibration_beta(prior: &PriorSpec, delta: f64, gamma: f64, d_x: usize) -> Result<f64> {
    if !(delta > 0.0 && delta <= 1.0) {
        return Err(Error::invalid("delta", format!("{delta}, need (0, 1]")));
    }
    if !(gamma >= 0.0 && gamma.is_finite()) {
        return Err(Error::invalid("gamma", format!("{gamma}, need finite >= 0")));
    }
    if d_x == 0 {
        return Err(Error::invalid("d_x", "need >= 1"));
    }
    let inner = gamma + 1.0 + (d_x as f64 / delta).ln();
    Ok(prior.rkhs_bound + prior.noise_std * (2.0 * inner).sqrt())
}

/// `1/2 ln det(I + sigma_w^-2 K)` over the given points, via the Cholesky
/// factor's log-diagonal sum.
pub fn info_gain(kernel: &KernelSpec, points: &[QueryPoint], sigma_w: f64) -> Result<f64> {
    if !(sigma_w.is_finite() && sigma_w > 0.0) {
        return Err(Error::invalid("sigma_w", "need finite > 0"));
    }
    kernel.validate()?;
    let n = points.len();
    if n == 0 {
        return Ok(0.0);
    }
    let q = kernel.input_dim();
    for z in points {
        if z.len() != q {
            return Err(Error::DimensionMismatch {
                context: "info_gain point",
                expected: q,
                got: z.len(),
            });
        }
    }
    let inv_s2 = 1.0 / (sigma_w * sigma_w);
    let scaled: Vec<Vec<f64>> = points.iter().map(|z| kernel.scale(z)).collect();
    let mut packed = vec![0.0; n * (n + 1) / 2];
    for i in 0..n {
        let off = row_off(i);
        for j in 0..=i {
            let mut v = inv_s2 * kernel.eval_scaled(&scaled[i], &scaled[j]);
            if i == j {
                v += 1.0;
            }
            packed[off + j] = v;
        }
    }
    let (chol, _) = cholesky_with_jitter(n, packed, "info_gain")?;
    Ok(chol.log_diag_sum().max(0.0))
}

/// Greedy maximization of information gain over a candidate set: picks `n`
/// points one at a time, each maximizing the marginal gain
/// `1/2 ln(1 + sigma_w^-2 var_S(z))`. Returns the chosen indices in pick
/// order and the total gain of the chosen set. Greedy is within `1 - 1/e`
/// of the best subset because the gain is submodular.
pub fn max_info_gain_greedy(
    kernel: &KernelSpec,
    candidates: &[QueryPoint],
    n: usize,
    sigma_w: f64,
) -> Result<(Vec<usize>, f64)> {
    if !(sigma_w.is_finite() && sigma_w > 0.0) {
        return Err(Error::invalid("sigma_w", "need finite > 0"));
    }
    kernel.validate()?;
    if n > candidates.len() {
        return Err(Error::invalid(
            "n",
            format!("asked for {n} picks from {} candidates", candidates.len()),
        ));
    }
    let q = kernel.input_dim();
    for z in candidates {
        if z.len() != q {
            return Err(Error::DimensionMismatch {
                context: "max_info_gain candidate",
                expected: q,
                got: z.len(),
            });
        }
    }
    let s2 = sigma_w * sigma_w;
    let scaled: Vec<Vec<f64>> = candidates.iter().map(|z| kernel.scale(z)).collect();
    // Incrementally grown factor of K_S + sigma_w^2 I over the selected set.
    let mut l: Vec<f64> = Vec::new();
    let mut selected: Vec<usize> = Vec::new();
    let mut total = 0.0;
    for _ in 0..n {
        let mut best: Option<(usize, f64, Vec<f64>)> = None;
        for (c, sc) in scaled.iter().enumerate() {
            if selected.contains(&c) {
                continue;
            }
            // Extend the factor by candidate c: w = L^-1 k_S(c),
            // pivot^2 = k(c,c) + s2 - |w|^2, marginal var = pivot^2 - s2.
            let m = selected.len();
            let mut w = vec![0.0; m];
            for (i, &si) in selected.iter().enumerate() {
                let mut v = kernel.eval_scaled(&scaled[si], sc);
                v -= dot(&l[row_off(i)..row_off(i) + i], &w[..i]);
                w[i] = v / l[row_off(i) + i];
            }
            let pivot2 = kernel.eval_scaled(sc, sc) + s2 - dot(&w, &w);
            if let Some((_, best_p2, _)) = &best {
                if pivot2 > *best_p2 {
                    best = Some((c, pivot2, w));
                }
            } else {
                best = Some((c, pivot2, w));
            }
        }
        let (c, pivot2, w) = best.expect("n <= candidates.len() guarantees a pick");
        if pivot2 <= 0.0 {
            // Degenerate duplicate geometry; no further gain possible.
            break;
        }
        total += 0.5 * (pivot2 / s2).ln().max(0.0);
        l.extend_from_slice(&w);
        l.push(pivot2.sqrt());
        selected.push(c);
    }
    Ok((selected, total))
}
