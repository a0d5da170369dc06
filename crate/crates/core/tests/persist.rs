use std::f64::consts::PI;

use ndarray::arr2;
use persist_lab::coeffspec::CoefficientSpec;
use persist_lab::kernels::KernelSpec;
use persist_lab::numerics::composite_gauss_legendre;
use persist_lab::persist::{
    fit_exponent, poly_persist, sign_counts, stationary_persistence, FitModel, GridPolicy, Interval,
    PersistenceEstimate,
};
use persist_lab::sampler::{GaussianSampler, JitterPolicy, RngStream};

/// `P(X < 0, Y < 0)` by tensor Gauss–Legendre over the negative quadrant.
fn orthant_by_quadrature(rho: f64) -> f64 {
    let (x, w) = composite_gauss_legendre(-12.0, 0.0, 48, 16);
    let det = 1.0 - rho * rho;
    let norm = 1.0 / (2.0 * PI * det.sqrt());
    let mut total = 0.0;
    for (xi, wi) in x.iter().zip(&w) {
        for (yj, wj) in x.iter().zip(&w) {
            total += wi * wj * norm * (-(xi * xi - 2.0 * rho * xi * yj + yj * yj) / (2.0 * det)).exp();
        }
    }
    total
}

#[test]
fn orthant_probability_matches_two_oracles() {
    let rho = 0.5;
    let quad = orthant_by_quadrature(rho);
    assert!((quad - 1.0 / 3.0).abs() < 1e-10, "{quad}");
    let s = GaussianSampler::from_covariance(&arr2(&[[1.0, rho], [rho, 1.0]]), &JitterPolicy::default()).unwrap();
    let n = 400_000;
    let c = sign_counts(&s, &RngStream::new(3, 0), n, 0.0);
    let p = c.below as f64 / n as f64;
    assert!((p - quad).abs() < 4.0 * (quad * (1.0 - quad) / n as f64).sqrt(), "{p}");
    // symmetric field: above and below agree in law
    let q = c.above as f64 / n as f64;
    assert!((p - q).abs() < 6.0 * (2.0 * quad / n as f64).sqrt());
}

#[test]
fn persistence_is_supermultiplicative() {
    let kernel = KernelSpec::SechPower { alpha: 0.0 };
    let est = stationary_persistence(&kernel, 0.25, &[4.0, 8.0], 200_000, 0.0, RngStream::new(4, 0)).unwrap();
    let (p4, p8) = (&est[0], &est[1]);
    let slack = 4.0 * (p8.stderr().powi(2) + (2.0 * p4.p_hat * p4.stderr()).powi(2)).sqrt();
    assert!(p8.p_hat >= p4.p_hat * p4.p_hat - slack, "{} < {}^2", p8.p_hat, p4.p_hat);
    assert!(p8.p_hat < p4.p_hat);
}

#[test]
fn odd_degree_never_persists_on_the_line() {
    let e = poly_persist(&CoefficientSpec::kac(7), Interval::Real, 100, &GridPolicy::default(), RngStream::new(1, 0))
        .unwrap();
    assert!(e.analytic && e.p_hat == 0.0);
}

#[test]
fn degree_zero_persists_half_the_time() {
    let n = 40_000;
    let e = poly_persist(&CoefficientSpec::kac(0), Interval::Unit, n, &GridPolicy::default(), RngStream::new(2, 0))
        .unwrap();
    assert!((e.p_hat - 0.5).abs() < 4.0 * (0.25 / n as f64).sqrt());
}

#[test]
fn fit_recovers_exact_power_law() {
    let pts: Vec<(f64, PersistenceEstimate)> = [64.0f64, 128.0, 256.0, 512.0]
        .iter()
        .map(|&n| {
            let p = 0.7 * n.powf(-0.1875);
            let mut e = PersistenceEstimate::from_counts(0, 1_000_000, 0.0, n).unwrap();
            e.p_hat = p;
            (n, e)
        })
        .collect();
    let f = fit_exponent(&pts, FitModel::VsLogn).unwrap();
    assert!((f.slope - 0.1875).abs() < 1e-12);
    assert!((f.intercept + 0.7f64.ln()).abs() < 1e-12);
    assert!(f.dropped.is_empty());
}
