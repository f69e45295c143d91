//! Statistical calibration of the posterior confidence band: for functions
//! of known RKHS norm observed under Gaussian noise, the band
//! `mu_n(z) +- beta_n sigma_n(z)` must contain the truth at a rate
//! compatible with the failure budget delta.

use rand_distr::{Distribution, StandardNormal};
use sbsrl::envs::SyntheticRkhs;
use sbsrl::gp::{calibration_beta, info_gain, GpPosterior, MeanFn, PriorSpec};
use sbsrl::kernel::{KernelKind, KernelSpec};
use sbsrl::rng;

#[test]
fn band_covers_synthetic_rkhs_functions() {
    let delta = 0.1;
    let rkhs_bound = 2.0;
    let noise = 0.1;
    let n_functions = 50;
    let n_data = 15;
    let kernel = KernelSpec::new(KernelKind::SquaredExp, vec![0.6], 1.0).unwrap();
    let prior = PriorSpec::new(MeanFn::Zero, rkhs_bound, noise).unwrap();
    let grid: Vec<Vec<f64>> = (0..30).map(|i| vec![-1.0 + i as f64 / 14.5]).collect();

    let mut points_total = 0usize;
    let mut points_covered = 0usize;
    let mut functions_covered = 0usize;
    for fi in 0..n_functions {
        let truth =
            SyntheticRkhs::sample(kernel.clone(), 1, 0, 8, rkhs_bound, 900 + fi).unwrap();
        let mut r = rng::derive_rng(77, &[0xca11, fi]);
        let data: Vec<(Vec<f64>, Vec<f64>)> = (0..n_data)
            .map(|_| {
                let z = vec![rand::Rng::gen_range(&mut r, -1.0..1.0)];
                let eps: f64 = StandardNormal.sample(&mut r);
                let y = vec![truth.eval(&z)[0] + noise * eps];
                (z, y)
            })
            .collect();
        let gp = GpPosterior::fit(prior.clone(), kernel.clone(), 1, &data).unwrap();
        let inputs: Vec<Vec<f64>> = data.iter().map(|(z, _)| z.clone()).collect();
        let gamma = info_gain(&kernel, &inputs, noise).unwrap();
        let beta = calibration_beta(&prior, delta, gamma, 1).unwrap();

        let mut sup_ok = true;
        for z in &grid {
            let (mean, sigma) = gp.mean_and_std(z);
            let inside = (truth.eval(z)[0] - mean[0]).abs() <= beta * sigma;
            points_total += 1;
            points_covered += inside as usize;
            sup_ok &= inside;
        }
        functions_covered += sup_ok as usize;
    }

    let per_point = points_covered as f64 / points_total as f64;
    let per_function = functions_covered as f64 / n_functions as f64;
    println!("calibration: per-point {per_point:.4}, per-function {per_function:.4}");
    assert!(
        per_point >= 1.0 - delta - 0.05,
        "per-point coverage {per_point} below {}",
        1.0 - delta - 0.05
    );
    assert!(
        per_function >= 1.0 - delta - 0.05,
        "sup-norm coverage {per_function} below {}",
        1.0 - delta - 0.05
    );
}
