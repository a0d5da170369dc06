use nalgebra::DMatrix;
use persist_lab::coeffspec::CoefficientSpec;
use persist_lab::kernels::{corr01, limit_kernel, KernelSpec};
use persist_lab::numerics::ks_two_sample;
use persist_lab::sampler::{
    gram, kl_sample_y, sample_paths, sample_poly, Coordinate, Grid, RngStream, WhiteNoiseQuadrature,
};

const N: usize = 100_000;

fn sd_corr(rho: f64, n: usize) -> f64 {
    (1.0 - rho * rho) / (n as f64).sqrt()
}

#[test]
fn ou_ensemble_matches_its_kernel() {
    let grid = Grid::new(vec![0.0, 0.5, 1.0, 2.0, 4.0], Coordinate::TTime).unwrap();
    let e = sample_paths(&KernelSpec::Ou, &grid, N, RngStream::new(11, 0)).unwrap();
    for (k, &t) in grid.points().iter().enumerate() {
        let rho = (-t / 2.0).exp();
        assert!((e.correlation(0, k) - rho).abs() < 6.0 * sd_corr(rho, N).max(1e-12), "t={t}");
        assert!(e.mean()[k].abs() < 6.0 / (N as f64).sqrt());
    }
}

#[test]
fn empirical_covariance_within_six_standard_errors() {
    let grid = Grid::uniform(0.0, 3.0, 0.5, Coordinate::TTime).unwrap();
    let kernel = KernelSpec::SechPower { alpha: 1.0 };
    let e = sample_paths(&kernel, &grid, N, RngStream::new(12, 0)).unwrap();
    let g = gram(&kernel, &grid).unwrap();
    for i in 0..grid.len() {
        for j in 0..grid.len() {
            let c = g[[i, j]];
            let tol = 6.0 * ((1.0 + c * c) / N as f64).sqrt();
            assert!((e.covariance(i, j) - c).abs() < tol, "({i},{j})");
        }
    }
}

#[test]
fn kac_variance_at_one() {
    let grid = Grid::new(vec![1.0], Coordinate::XSpace).unwrap();
    let e = sample_poly(&CoefficientSpec::kac(100), N, &grid, RngStream::new(13, 0), false).unwrap();
    let var = e.values.column(0).iter().map(|v| v * v).sum::<f64>() / N as f64;
    assert!((var - 101.0).abs() < 6.0 * 101.0 * (2.0 / N as f64).sqrt(), "{var}");
}

#[test]
fn polynomial_correlation_matches_kernel() {
    let spec = CoefficientSpec::kac(1024);
    let grid = Grid::new(vec![0.02, 0.08], Coordinate::ULog).unwrap();
    let e = sample_poly(&spec, N, &grid, RngStream::new(14, 0), true).unwrap();
    let rho = corr01(&spec, 0.02, 0.08).unwrap();
    assert!((e.correlation(0, 1) - rho).abs() < 6.0 * sd_corr(rho, N), "{} vs {rho}", e.correlation(0, 1));
}

#[test]
fn coefficient_and_gram_sampling_agree_in_law() {
    let spec = CoefficientSpec::kac(256);
    let us: Vec<f64> = (0..16).map(|k| 0.005 * 1.35f64.powi(k)).collect();
    let grid = Grid::new(us, Coordinate::ULog).unwrap();
    let n = 20_000;
    let a = sample_poly(&spec, n, &grid, RngStream::new(15, 0), true).unwrap();
    let b = sample_paths(&KernelSpec::Poly01 { coefficients: spec }, &grid, n, RngStream::new(15, 1)).unwrap();
    let (_, p) = ks_two_sample(&a.row_maxima(), &b.row_maxima());
    assert!(p > 1e-3, "KS p-value {p}");
}

#[test]
fn white_noise_integral_has_sech_correlation() {
    let grid = Grid::new(vec![0.0, 1.0, 2.0], Coordinate::TTime).unwrap();
    let (e, warning) = kl_sample_y(0.0, &grid, &WhiteNoiseQuadrature::default(), N, RngStream::new(16, 0)).unwrap();
    assert!(warning.is_none());
    let rho = 1.0 / 1.0f64.cosh();
    assert!((e.correlation(0, 2) - rho).abs() < 6.0 * sd_corr(rho, N));
}

#[test]
fn sech_gram_is_positive_semidefinite() {
    let grid = Grid::uniform(0.0, 10.0, 0.05, Coordinate::TTime).unwrap();
    let kernel = KernelSpec::SechPower { alpha: 0.0 };
    let g = gram(&kernel, &grid).unwrap();
    let m = DMatrix::from_fn(grid.len(), grid.len(), |i, j| g[[i, j]]);
    let min = m.symmetric_eigenvalues().min();
    assert!(min > -1e-12, "min eigenvalue {min}");
    assert_eq!(g[[0, 40]], limit_kernel(&kernel, 0.0, 2.0).unwrap());
}
