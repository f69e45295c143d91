//! Covariance kernels over state-action inputs.
//!
//! All kernels apply per-dimension lengthscale scaling `z_i / l_i` before the
//! base form, so one spec covers anisotropic inputs such as
//! `(sin th, cos th, omega, u)` with very different natural ranges.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelKind {
    /// `s2 * exp(-1/2 * sum_i ((a_i - b_i)/l_i)^2)`
    SquaredExp,
    /// `s2 * <a/l, b/l>`; not stationary, unbounded on unbounded domains.
    Linear,
    /// Matern with smoothness 5/2 on the scaled distance.
    Matern52,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelSpec {
    pub kind: KernelKind,
    pub lengthscales: Vec<f64>,
    pub signal_variance: f64,
}

impl KernelSpec {
    pub fn new(kind: KernelKind, lengthscales: Vec<f64>, signal_variance: f64) -> Result<Self> {
        let spec = KernelSpec {
            kind,
            lengthscales,
            signal_variance,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Squared-exponential kernel with one shared lengthscale.
    pub fn se_iso(dim: usize, lengthscale: f64, signal_variance: f64) -> Result<Self> {
        Self::new(
            KernelKind::SquaredExp,
            vec![lengthscale; dim],
            signal_variance,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.lengthscales.is_empty() {
            return Err(Error::invalid("lengthscales", "must be non-empty"));
        }
        for (i, &l) in self.lengthscales.iter().enumerate() {
            if !(l.is_finite() && l > 0.0) {
                return Err(Error::invalid(
                    "lengthscales",
                    format!("entry {i} is {l}, need finite > 0"),
                ));
            }
        }
        if !(self.signal_variance.is_finite() && self.signal_variance > 0.0) {
            return Err(Error::invalid(
                "signal_variance",
                format!("{}, need finite > 0", self.signal_variance),
            ));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.lengthscales.len()
    }

    pub fn is_stationary(&self) -> bool {
        !matches!(self.kind, KernelKind::Linear)
    }

    /// Upper bound on `k(z, z)` over the whole domain. `None` for the linear
    /// kernel, whose marginal variance grows with `|z|`.
    pub fn sigma_max(&self) -> Option<f64> {
        self.is_stationary().then_some(self.signal_variance)
    }

    /// Divides each coordinate by its lengthscale.
    pub fn scale(&self, z: &[f64]) -> Vec<f64> {
        assert_eq!(
            z.len(),
            self.lengthscales.len(),
            "kernel input dim {} != lengthscale dim {}",
            z.len(),
            self.lengthscales.len()
        );
        z.iter()
            .zip(&self.lengthscales)
            .map(|(zi, li)| zi / li)
            .collect()
    }

    /// Kernel value `k(a, b)`.
    pub fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        let sa = self.scale(a);
        let sb = self.scale(b);
        self.eval_scaled(&sa, &sb)
    }

    /// Kernel value on inputs already divided by the lengthscales. Hot paths
    /// pre-scale their data once and call this directly.
    pub fn eval_scaled(&self, sa: &[f64], sb: &[f64]) -> f64 {
        match self.kind {
            KernelKind::SquaredExp => {
                let d2: f64 = sa
                    .iter()
                    .zip(sb)
                    .map(|(x, y)| {
                        let d = x - y;
                        d * d
                    })
                    .sum();
                self.signal_variance * (-0.5 * d2).exp()
            }
            KernelKind::Linear => {
                let dot: f64 = sa.iter().zip(sb).map(|(x, y)| x * y).sum();
                self.signal_variance * dot
            }
            KernelKind::Matern52 => {
                let d2: f64 = sa
                    .iter()
                    .zip(sb)
                    .map(|(x, y)| {
                        let d = x - y;
                        d * d
                    })
                    .sum();
                let r = d2.sqrt();
                let sr5 = 5f64.sqrt() * r;
                self.signal_variance * (1.0 + sr5 + 5.0 * d2 / 3.0) * (-sr5).exp()
            }
        }
    }

    /// Marginal prior variance `k(z, z)`.
    pub fn variance_at(&self, z: &[f64]) -> f64 {
        match self.kind {
            KernelKind::SquaredExp | KernelKind::Matern52 => self.signal_variance,
            KernelKind::Linear => {
                let sz = self.scale(z);
                self.signal_variance * sz.iter().map(|x| x * x).sum::<f64>()
            }
        }
    }

    /// Dense Gram matrix `K[i][j] = k(xs[i], xs[j])`.
    pub fn gram(&self, xs: &[Vec<f64>]) -> DMatrix<f64> {
        let n = xs.len();
        let scaled: Vec<Vec<f64>> = xs.iter().map(|x| self.scale(x)).collect();
        let mut k = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let v = self.eval_scaled(&scaled[i], &scaled[j]);
                k[(i, j)] = v;
                k[(j, i)] = v;
            }
        }
        k
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn se_unit_distance_two() {
        // k = exp(-2/2) = exp(-1) for unit lengthscales and variance.
        let k = KernelSpec::se_iso(2, 1.0, 1.0).unwrap();
        let v = k.eval(&[0.0, 0.0], &[1.0, 1.0]);
        assert_relative_eq!(v, 0.36787944117144233, max_relative = 1e-12);
    }

    #[test]
    fn linear_at_origin_is_zero() {
        let k = KernelSpec::new(KernelKind::Linear, vec![1.0, 1.0], 2.0).unwrap();
        assert_eq!(k.eval(&[0.0, 0.0], &[3.0, -1.0]), 0.0);
    }

    #[test]
    fn matern52_decreases_with_distance() {
        let k = KernelSpec::new(KernelKind::Matern52, vec![1.0], 1.0).unwrap();
        let near = k.eval(&[0.0], &[0.1]);
        let far = k.eval(&[0.0], &[1.5]);
        assert!(near > far);
        assert_relative_eq!(k.eval(&[0.3], &[0.3]), 1.0, max_relative = 1e-12);
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(KernelSpec::new(KernelKind::SquaredExp, vec![1.0, -1.0], 1.0).is_err());
        assert!(KernelSpec::new(KernelKind::SquaredExp, vec![1.0], 0.0).is_err());
        assert!(KernelSpec::new(KernelKind::SquaredExp, vec![], 1.0).is_err());
    }

    fn arb_points(dim: usize, n: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
        prop::collection::vec(prop::collection::vec(-3.0..3.0f64, dim), 1..=n)
    }

    proptest! {
        #[test]
        fn symmetric_and_bounded(kind in prop::sample::select(vec![
                KernelKind::SquaredExp, KernelKind::Matern52]),
            a in prop::collection::vec(-5.0..5.0f64, 3),
            b in prop::collection::vec(-5.0..5.0f64, 3),
            var in 0.1..4.0f64)
        {
            let k = KernelSpec::new(kind, vec![0.7, 1.3, 2.0], var).unwrap();
            let ab = k.eval(&a, &b);
            let ba = k.eval(&b, &a);
            prop_assert!((ab - ba).abs() < 1e-14);
            // stationary kinds: |k| <= k(z,z) = signal variance
            prop_assert!(ab.abs() <= var + 1e-12);
            prop_assert!((k.eval(&a, &a) - var).abs() < 1e-12);
        }

        #[test]
        fn gram_is_positive_semidefinite(pts in arb_points(2, 8), var in 0.1..2.0f64) {
            let k = KernelSpec::new(KernelKind::SquaredExp, vec![1.0, 1.0], var).unwrap();
            let g = k.gram(&pts);
            let eig = g.symmetric_eigenvalues();
            for ev in eig.iter() {
                prop_assert!(*ev > -1e-8, "negative eigenvalue {ev}");
            }
        }
    }
}
