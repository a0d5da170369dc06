use std::f64::consts::PI;

use persist_lab::heatfield::{field_cov, heat_kernel, sample_field, HeatGridSpec};
use persist_lab::sampler::RngStream;

#[test]
fn sampled_variance_matches_heat_kernel() {
    let n = 100_000;
    for d in [1usize, 2] {
        let times = vec![0.5, 2.0];
        let spec = HeatGridSpec { d, times: times.clone(), space: vec![vec![0.3; d]], paths: n };
        let field = sample_field(&spec, RngStream::new(d as u64, 0)).unwrap();
        for (k, &t) in times.iter().enumerate() {
            let exact = heat_kernel(d, 2.0 * t, &vec![0.0; d]).unwrap();
            assert!((exact / (8.0 * PI * t).powf(-(d as f64) / 2.0) - 1.0).abs() < 1e-14);
            let var = field.values.column(k).iter().map(|v| v * v).sum::<f64>() / n as f64;
            assert!((var - exact).abs() < 6.0 * exact * (2.0 / n as f64).sqrt(), "d={d} t={t}");
        }
    }
}

#[test]
fn covariance_is_symmetric_and_decays() {
    let (a, b) = ([0.0, 1.0], [0.5, -0.5]);
    let c1 = field_cov(2, &a, 1.0, &b, 3.0).unwrap();
    let c2 = field_cov(2, &b, 3.0, &a, 1.0).unwrap();
    assert_eq!(c1, c2);
    assert!(field_cov(2, &a, 1.0, &[5.0, 5.0], 1.0).unwrap() < c1);
}
