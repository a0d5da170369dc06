//! The Gaussian field solving the heat equation from white noise, sampled
//! directly from its covariance `K_{t+s}(x₁ − x₂)`.

use std::f64::consts::PI;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{AccuracyWarning, LabError, Result};
use crate::numerics::{composite_gauss_legendre, standard_normal_cdf, CompensatedSum};
use crate::persist::{fit_exponent, sign_counts, ExponentFit, FitModel, PersistenceEstimate};
use crate::sampler::{log_lattice, GaussianSampler, JitterPolicy, RngStream};

/// `(4πt)^{−d/2} exp(−|x|²/(4t))`.
pub fn heat_kernel(d: usize, t: f64, x: &[f64]) -> Result<f64> {
    if !(t > 0.0) {
        return Err(LabError::Domain(format!("heat kernel needs t > 0, got {t}")));
    }
    if x.len() != d {
        return Err(LabError::Invalid(format!("point has {} coordinates, expected {d}", x.len())));
    }
    let r2: f64 = x.iter().map(|v| v * v).sum();
    Ok((4.0 * PI * t).powf(-(d as f64) / 2.0) * (-r2 / (4.0 * t)).exp())
}

/// Covariance of the field between `(x1, t)` and `(x2, s)`.
pub fn field_cov(d: usize, x1: &[f64], t: f64, x2: &[f64], s: f64) -> Result<f64> {
    if x1.len() != x2.len() {
        return Err(LabError::Invalid("points differ in dimension".into()));
    }
    if !(t > 0.0 && s > 0.0) {
        return Err(LabError::Domain(format!("field covariance needs positive times, got {t}, {s}")));
    }
    let diff: Vec<f64> = x1.iter().zip(x2).map(|(a, b)| a - b).collect();
    heat_kernel(d, t + s, &diff)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpaceQuadrature {
    pub lo: f64,
    pub hi: f64,
    pub nodes: usize,
    /// Gauss–Legendre order per panel.
    pub order: usize,
}

impl Default for SpaceQuadrature {
    fn default() -> Self {
        Self { lo: -40.0, hi: 40.0, nodes: 4096, order: 16 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemigroupCheck {
    /// Max over test points of `|K_{t2+s}(x−y) − ∫K_{t2−t1}(x−z)K_{t1+s}(z−y)dz|`.
    pub residual: f64,
    /// Same for the plain convolution `K_a * K_b = K_{a+b}`.
    pub convolution_residual: f64,
    pub warning: Option<AccuracyWarning>,
}

/// Mass of a centered Gaussian with variance `var` outside `[lo − c, hi − c]`.
fn outside_mass(var: f64, c: f64, lo: f64, hi: f64) -> f64 {
    let sd = var.sqrt();
    standard_normal_cdf((lo - c) / sd) + standard_normal_cdf(-(hi - c) / sd)
}

/// Covariance-level check of the heat semigroup in one dimension by
/// composite Gauss–Legendre quadrature over a finite window.
pub fn semigroup_residual(t1: f64, t2: f64, s: f64, quad: &SpaceQuadrature) -> Result<SemigroupCheck> {
    if !(t1 > 0.0 && t2 > t1 && s > 0.0) {
        return Err(LabError::Domain(format!("need 0 < t1 < t2 and s > 0, got t1={t1}, t2={t2}, s={s}")));
    }
    if !(quad.hi > quad.lo) || quad.order == 0 || quad.nodes < quad.order {
        return Err(LabError::Invalid(format!("bad quadrature {quad:?}")));
    }
    let panels = quad.nodes / quad.order;
    let (z, w) = composite_gauss_legendre(quad.lo, quad.hi, panels, quad.order);
    let tests = [-3.0, -1.0, 0.0, 0.5, 2.0];
    let k1 = |t: f64, x: f64| heat_kernel(1, t, &[x]).expect("positive time");
    let conv = |a: f64, b: f64, x: f64, y: f64| -> f64 {
        z.iter().zip(&w).map(|(zi, wi)| wi * k1(a, x - zi) * k1(b, zi - y)).collect::<CompensatedSum>().value()
    };
    let (mut residual, mut convolution_residual, mut tail) = (0.0f64, 0.0f64, 0.0f64);
    for &x in &tests {
        for &y in &tests {
            let exact = k1(t2 + s, x - y);
            residual = residual.max((exact - conv(t2 - t1, t1 + s, x, y)).abs());
            convolution_residual = convolution_residual.max((k1(t1 + s, x - y) - conv(t1, s, x, y)).abs());
            // the integrand is exact·(Gaussian density in z with variance 2ab/(a+b))
            let (a, b) = (t2 - t1, t1 + s);
            let var = 2.0 * a * b / (a + b);
            let centre = (b * x + a * y) / (a + b);
            tail = tail.max(exact * outside_mass(var, centre, quad.lo, quad.hi));
        }
    }
    let warning = (tail > 1e-10).then(|| AccuracyWarning {
        source: "semigroup_residual".into(),
        message: format!("quadrature window [{}, {}] truncates mass {tail:.3e}", quad.lo, quad.hi),
        estimate: tail,
    });
    Ok(SemigroupCheck { residual, convolution_residual, warning })
}

/// A finite space-time grid of the field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeatGridSpec {
    pub d: usize,
    pub times: Vec<f64>,
    pub space: Vec<Vec<f64>>,
    pub paths: usize,
}

impl HeatGridSpec {
    pub fn validate(&self) -> Result<()> {
        if !(1..=2).contains(&self.d) {
            return Err(LabError::Domain(format!("dimension {} not supported (1 or 2)", self.d)));
        }
        if self.times.is_empty() || self.space.is_empty() {
            return Err(LabError::EmptyInput("heat grid has no points".into()));
        }
        if self.times.iter().any(|t| !(*t > 0.0)) || self.times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(LabError::Invalid("times must be positive and increasing".into()));
        }
        if self.space.iter().any(|x| x.len() != self.d) {
            return Err(LabError::Invalid("space points must have d coordinates".into()));
        }
        if self.times.len() * self.space.len() > crate::sampler::DEFAULT_GRID_CAP {
            return Err(LabError::Invalid("space-time grid exceeds the sampler cap".into()));
        }
        Ok(())
    }

    /// Space-time points, space index fastest.
    pub fn points(&self) -> Vec<(&[f64], f64)> {
        self.times.iter().flat_map(|&t| self.space.iter().map(move |x| (x.as_slice(), t))).collect()
    }

    pub fn covariance(&self) -> Result<Array2<f64>> {
        self.validate()?;
        let pts = self.points();
        let m = pts.len();
        let mut c = Array2::zeros((m, m));
        for i in 0..m {
            for j in i..m {
                let v = field_cov(self.d, pts[i].0, pts[i].1, pts[j].0, pts[j].1)?;
                c[[i, j]] = v;
                c[[j, i]] = v;
            }
        }
        Ok(c)
    }
}

#[derive(Debug, Clone)]
pub struct FieldEnsemble {
    pub spec: HeatGridSpec,
    /// `paths × (times·space)`, space index fastest.
    pub values: Array2<f64>,
    pub rng: RngStream,
}

pub fn sample_field(spec: &HeatGridSpec, rng: RngStream) -> Result<FieldEnsemble> {
    let sampler = GaussianSampler::from_covariance(&spec.covariance()?, &JitterPolicy::default())?;
    let values = crate::sampler::sample_all(&sampler, &rng, spec.paths);
    Ok(FieldEnsemble { spec: spec.clone(), values, rng })
}

/// Estimates of `P(no sign change)` per scale, plus an exponent fit when
/// at least three scales have successes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatPersistence {
    pub estimates: Vec<PersistenceEstimate>,
    /// `P(all > 0)` and `P(all < 0)` separately, for the symmetry check.
    pub above: Vec<PersistenceEstimate>,
    pub below: Vec<PersistenceEstimate>,
    pub fit: Option<ExponentFit>,
}

fn no_sign_change(cov: &Array2<f64>, rng: RngStream, n_paths: usize, scale: f64) -> Result<[PersistenceEstimate; 3]> {
    let sampler = GaussianSampler::from_covariance(cov, &JitterPolicy::default())?;
    let c = sign_counts(&sampler, &rng, n_paths, 0.0);
    Ok([
        PersistenceEstimate::from_counts(c.above + c.below, c.trials, 0.0, scale)?,
        PersistenceEstimate::from_counts(c.above, c.trials, 0.0, scale)?,
        PersistenceEstimate::from_counts(c.below, c.trials, 0.0, scale)?,
    ])
}

fn collect(rows: Vec<[PersistenceEstimate; 3]>, model: FitModel) -> HeatPersistence {
    let mut out = HeatPersistence { estimates: vec![], above: vec![], below: vec![], fit: None };
    for [e, a, b] in rows {
        out.estimates.push(e);
        out.above.push(a);
        out.below.push(b);
    }
    let pts: Vec<_> = out.estimates.iter().map(|e| (e.scale, e.clone())).collect();
    out.fit = fit_exponent(&pts, model).ok();
    out
}

/// Temporal persistence at a fixed site over `t ∈ [1, T]`, on a log-uniform
/// time grid with `per_unit` points per unit of `ln t`. Fit is `−ln p` vs `ln T`.
pub fn time_persistence(
    d: usize,
    x: &[f64],
    t_list: &[f64],
    per_unit: f64,
    n_paths: usize,
    rng: RngStream,
) -> Result<HeatPersistence> {
    if t_list.is_empty() || t_list.windows(2).any(|w| w[1] <= w[0]) || t_list[0] < 1.0 {
        return Err(LabError::Invalid("T list must be increasing and >= 1".into()));
    }
    let rows = t_list
        .iter()
        .map(|&big_t| {
            let times = if big_t == 1.0 {
                vec![1.0]
            } else {
                let per_decade = (per_unit * std::f64::consts::LN_10).round().max(1.0) as usize;
                log_lattice(1.0, big_t, per_decade)
            };
            let spec = HeatGridSpec { d, times, space: vec![x.to_vec()], paths: n_paths };
            no_sign_change(&spec.covariance()?, rng.substream(big_t.to_bits()), n_paths, big_t)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(collect(rows, FitModel::VsLogn))
}

/// Spatial persistence of the one-dimensional field at `t = 1` over
/// `|x| ≤ R/2` with grid spacing `dx`. Fit is `−ln p` vs `R`.
pub fn space_persistence(r_list: &[f64], dx: f64, n_paths: usize, rng: RngStream) -> Result<HeatPersistence> {
    if r_list.is_empty() || r_list.iter().any(|r| !(*r >= 0.0)) || !(dx > 0.0) {
        return Err(LabError::Invalid("R list must be non-negative and dx positive".into()));
    }
    let rows = r_list
        .iter()
        .map(|&r| {
            let count = (r / dx + 1e-9).floor() as usize;
            let space = (0..=count).map(|k| vec![-r / 2.0 + k as f64 * dx]).collect();
            let spec = HeatGridSpec { d: 1, times: vec![1.0], space, paths: n_paths };
            no_sign_change(&spec.covariance()?, rng.substream(r.to_bits()), n_paths, r)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(collect(rows, FitModel::VsT))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{limit_kernel, KernelSpec};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn kernel_normalization_and_domain() {
        assert_relative_eq!(heat_kernel(1, 1.0 / (4.0 * PI), &[0.0]).unwrap(), 1.0, max_relative = 1e-15);
        assert!(heat_kernel(1, 0.0, &[0.0]).is_err());
        assert_relative_eq!(
            field_cov(2, &[0.3, 1.0], 1.0, &[0.3, 1.0], 1.0).unwrap(),
            0.039_788_735_772_973_836,
            max_relative = 1e-14
        );
    }

    #[test]
    fn kernel_integrates_to_one() {
        let (z, w) = composite_gauss_legendre(-40.0, 40.0, 256, 16);
        let total: f64 = z.iter().zip(&w).map(|(z, w)| w * heat_kernel(1, 1.0, &[*z]).unwrap()).sum();
        assert!((total - 1.0).abs() < 1e-10);
    }

    #[test]
    fn spatial_correlation_is_gauss8() {
        for tau in [0.0, 0.7, 2.0, 5.0] {
            let c = field_cov(1, &[0.0], 1.0, &[tau], 1.0).unwrap() / field_cov(1, &[0.0], 1.0, &[0.0], 1.0).unwrap();
            assert_relative_eq!(c, limit_kernel(&KernelSpec::Gauss8, 0.0, tau).unwrap(), max_relative = 1e-13);
        }
    }

    #[test]
    fn time_changed_correlation_is_sech_power() {
        for d in [1usize, 2] {
            let alpha = d as f64 / 2.0 - 1.0;
            for (t, s) in [(0.0, 0.5), (-1.0, 2.0), (3.0, 3.0), (0.0, 8.0)] {
                let (a, b) = (f64::exp(t), f64::exp(s));
                let x = vec![0.0; d];
                let c = field_cov(d, &x, a, &x, b).unwrap()
                    / (field_cov(d, &x, a, &x, a).unwrap() * field_cov(d, &x, b, &x, b).unwrap()).sqrt();
                let sech = limit_kernel(&KernelSpec::SechPower { alpha }, t, s).unwrap();
                assert!((c - sech).abs() < 1e-12, "d={d} t={t} s={s}: {c} vs {sech}");
            }
        }
    }

    #[test]
    fn semigroup_holds_at_default_quadrature() {
        let c = semigroup_residual(0.5, 1.5, 1.0, &SpaceQuadrature::default()).unwrap();
        assert!(c.residual < 1e-8, "{c:?}");
        assert!(c.convolution_residual < 1e-8);
        assert!(c.warning.is_none());
    }

    #[test]
    fn narrow_window_warns() {
        let quad = SpaceQuadrature { lo: -2.0, hi: 2.0, ..Default::default() };
        let c = semigroup_residual(0.5, 1.5, 1.0, &quad).unwrap();
        assert!(c.warning.is_some());
        assert!(c.residual > 1e-8);
    }

    #[test]
    fn single_point_never_changes_sign() {
        let r = time_persistence(2, &[0.0, 0.0], &[1.0], 10.0, 500, RngStream::new(1, 1)).unwrap();
        assert_eq!(r.estimates[0].p_hat, 1.0);
        let s = space_persistence(&[0.0], 0.1, 500, RngStream::new(1, 1)).unwrap();
        assert_eq!(s.estimates[0].p_hat, 1.0);
    }

    #[test]
    fn grid_validation() {
        let bad = HeatGridSpec { d: 3, times: vec![1.0], space: vec![vec![0.0; 3]], paths: 1 };
        assert!(bad.validate().is_err());
        let bad = HeatGridSpec { d: 1, times: vec![0.0], space: vec![vec![0.0]], paths: 1 };
        assert!(bad.validate().is_err());
    }

    proptest! {
        #[test]
        fn kernel_is_even(t in 0.01f64..10.0, x in -10.0f64..10.0, y in -10.0f64..10.0) {
            prop_assert_eq!(heat_kernel(2, t, &[x, y]).unwrap(), heat_kernel(2, t, &[-x, -y]).unwrap());
        }
    }
}
