//! Covariance and correlation functions: the finite-degree polynomial kernels
//! in log coordinates, their stationary limits, and the deterministic
//! convergence gaps between the two.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coeffspec::{CoefficientSpec, Family, SlowlyVarying};
use crate::error::{LabError, Result};
use crate::numerics::{ln_factorial, ln_gamma, CompensatedSum};

/// Largest `|ln h|` that [`h_poly`] reports as a value.
pub const MAX_LOG_SCALE: f64 = 700.0 * std::f64::consts::LN_10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum KernelSpec {
    /// `corr(Q_n(e^{-u}), Q_n(e^{-v}))` on `u, v > 0`.
    Poly01 { coefficients: CoefficientSpec },
    /// `corr(Q_n(e^{u}), Q_n(e^{v}))` on `u, v > 0`.
    #[serde(rename = "poly_gt1")]
    PolyGt1 { coefficients: CoefficientSpec },
    /// `sech((t−s)/2)^{α+1}`.
    SechPower { alpha: f64 },
    /// `e^{−|t−s|/2}`.
    Ou,
    /// `e^{−(t−s)²/8}`.
    Gauss8,
    /// `cos((t−s)/(2√n))^n` on `|t−s| < π√n`.
    BinomialLimit { n: usize },
    /// Normalized `Σ_{i≤n} (st)^i/i!` on `s, t ≥ 0`.
    WeylCorr { n: usize },
    /// Temporal correlation of the heat field at a fixed site, over `t > 0`.
    HeatTime { d: u32 },
    /// Spatial correlation of the heat field along a line at time `t`.
    HeatSpace { d: u32, t: f64 },
}

impl KernelSpec {
    pub fn evaluator(&self) -> Result<Kernel> {
        let inner = match self {
            KernelSpec::Poly01 { coefficients } | KernelSpec::PolyGt1 { coefficients } => {
                let table = RegVarTable::new(coefficients)?;
                let growth = matches!(self, KernelSpec::PolyGt1 { .. });
                Inner::Poly { table, growth }
            }
            KernelSpec::SechPower { alpha } => {
                if !(*alpha > -1.0) {
                    return Err(LabError::Domain(format!("sech_power needs alpha > -1, got {alpha}")));
                }
                Inner::Closed(self.clone())
            }
            KernelSpec::BinomialLimit { n } | KernelSpec::WeylCorr { n } if *n == 0 => {
                return Err(LabError::Domain("degree must be positive".into()));
            }
            KernelSpec::HeatTime { d } | KernelSpec::HeatSpace { d, .. } if *d == 0 => {
                return Err(LabError::Domain("dimension must be positive".into()));
            }
            KernelSpec::HeatSpace { t, .. } if !(*t > 0.0) => {
                return Err(LabError::Domain(format!("heat_space needs t > 0, got {t}")));
            }
            _ => Inner::Closed(self.clone()),
        };
        Ok(Kernel { inner })
    }

    /// Single evaluation; builds the evaluator each call.
    pub fn corr(&self, s: f64, t: f64) -> Result<f64> {
        self.evaluator()?.corr(s, t)
    }
}

/// A [`KernelSpec`] with its coefficient tables precomputed.
#[derive(Debug, Clone)]
pub struct Kernel {
    inner: Inner,
}

#[derive(Debug, Clone)]
enum Inner {
    Poly { table: RegVarTable, growth: bool },
    Closed(KernelSpec),
}

impl Kernel {
    pub fn corr(&self, s: f64, t: f64) -> Result<f64> {
        match &self.inner {
            Inner::Poly { table, growth } => {
                if *growth {
                    table.corr_gt1(s, t)
                } else {
                    table.corr01(s, t)
                }
            }
            Inner::Closed(kind) => limit_kernel(kind, s, t),
        }
    }
}

/// `ln sech(x)`, stable for large `|x|`.
pub fn ln_sech(x: f64) -> f64 {
    let a = x.abs();
    std::f64::consts::LN_2 - a - (-2.0 * a).exp().ln_1p()
}

/// `ln Σ_{i=0}^n z^i/i!` for `z ≥ 0`.
fn ln_truncated_exp(n: usize, z: f64) -> f64 {
    if z == 0.0 {
        return 0.0;
    }
    let lz = z.ln();
    // terms peak near i = min(n, z)
    let peak = (z.floor() as usize).min(n);
    let m = peak as f64 * lz - ln_factorial(peak as u64);
    let mut acc = CompensatedSum::new();
    for i in 0..=n {
        let e = i as f64 * lz - ln_factorial(i as u64) - m;
        if e > -745.0 {
            acc.add(e.exp());
        }
    }
    m + acc.value().ln()
}

/// Closed-form stationary and limit kernels.
pub fn limit_kernel(kind: &KernelSpec, s: f64, t: f64) -> Result<f64> {
    let tau = t - s;
    match kind {
        KernelSpec::SechPower { alpha } => {
            if !(*alpha > -1.0) {
                return Err(LabError::Domain(format!("sech_power needs alpha > -1, got {alpha}")));
            }
            Ok(((alpha + 1.0) * ln_sech(tau / 2.0)).exp())
        }
        KernelSpec::Ou => Ok((-tau.abs() / 2.0).exp()),
        KernelSpec::Gauss8 => Ok((-tau * tau / 8.0).exp()),
        KernelSpec::BinomialLimit { n } => {
            let sn = (*n as f64).sqrt();
            if tau.abs() >= std::f64::consts::PI * sn {
                return Err(LabError::Domain(format!(
                    "binomial_limit({n}) needs |t-s| < pi*sqrt(n) = {}, got {}",
                    std::f64::consts::PI * sn,
                    tau.abs()
                )));
            }
            Ok((tau / (2.0 * sn)).cos().powi(*n as i32))
        }
        KernelSpec::WeylCorr { n } => {
            if s < 0.0 || t < 0.0 {
                return Err(LabError::Domain("weyl_corr is defined on s, t >= 0".into()));
            }
            if s == t {
                return Ok(1.0);
            }
            let l = ln_truncated_exp(*n, s * t) - 0.5 * (ln_truncated_exp(*n, s * s) + ln_truncated_exp(*n, t * t));
            Ok(l.exp().min(1.0))
        }
        KernelSpec::HeatTime { d } => {
            if !(s > 0.0 && t > 0.0) {
                return Err(LabError::Domain("heat_time needs positive times".into()));
            }
            let r = 2.0 * (s * t).sqrt() / (s + t);
            Ok(r.powf(*d as f64 / 2.0))
        }
        KernelSpec::HeatSpace { t: time, .. } => Ok((-tau * tau / (8.0 * time)).exp()),
        KernelSpec::Poly01 { .. } | KernelSpec::PolyGt1 { .. } => {
            Err(LabError::Invalid("polynomial kernels are not closed-form limit kernels".into()))
        }
    }
}

/// Precomputed `ln E[a_i²]` for a regularly varying spec.
#[derive(Debug, Clone)]
pub struct RegVarTable {
    ln_var: Vec<f64>,
    alpha: f64,
    l: SlowlyVarying,
}

impl RegVarTable {
    pub fn new(spec: &CoefficientSpec) -> Result<Self> {
        spec.validate()?;
        match &spec.family {
            Family::RegVar { alpha, slowly_varying } => {
                Ok(Self { ln_var: spec.ln_variances(), alpha: *alpha, l: slowly_varying.clone() })
            }
            _ => Err(LabError::Invalid("polynomial kernels need a regvar coefficient spec".into())),
        }
    }

    pub fn degree(&self) -> usize {
        self.ln_var.len() - 1
    }

    /// `ln h_{α,n}(w)` with `h(w) = Σ_{i=0}^n E[a_i²] e^{−iw}`, summed around
    /// the dominant term so any sign of `w` is safe.
    pub fn ln_h(&self, w: f64) -> f64 {
        let m = self.ln_var.iter().enumerate().map(|(i, lv)| lv - i as f64 * w).fold(f64::NEG_INFINITY, f64::max);
        let mut acc = CompensatedSum::new();
        for (i, lv) in self.ln_var.iter().enumerate() {
            let e = lv - i as f64 * w - m;
            if e > -745.0 {
                acc.add(e.exp());
            }
        }
        m + acc.value().ln()
    }

    pub fn corr01(&self, u: f64, v: f64) -> Result<f64> {
        if !(u > 0.0 && v > 0.0) {
            return Err(LabError::Domain(format!("corr01 needs u, v > 0, got ({u}, {v})")));
        }
        if u == v {
            return Ok(1.0);
        }
        let l = self.ln_h(u + v) - 0.5 * (self.ln_h(2.0 * u) + self.ln_h(2.0 * v));
        Ok(l.exp())
    }

    pub fn corr_gt1(&self, u: f64, v: f64) -> Result<f64> {
        if !(u > 0.0 && v > 0.0) {
            return Err(LabError::Domain(format!("corrGT1 needs u, v > 0, got ({u}, {v})")));
        }
        if u == v {
            return Ok(1.0);
        }
        let l = self.ln_h(-(u + v)) - 0.5 * (self.ln_h(-2.0 * u) + self.ln_h(-2.0 * v));
        Ok(l.exp())
    }

    /// `w e^{−nw} h(−w) / (L(n) n^α)`, computed relative to the top coefficient.
    pub fn after_ratio(&self, w: f64) -> f64 {
        let n = self.degree();
        let top = self.ln_var[n];
        let mut acc = CompensatedSum::new();
        for (i, lv) in self.ln_var.iter().enumerate().rev() {
            let e = lv - top - (n - i) as f64 * w;
            if e > -745.0 {
                acc.add(e.exp());
            }
        }
        w * acc.value()
    }
}

/// `h` stored as its natural logarithm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogScaled {
    pub ln: f64,
}

impl LogScaled {
    pub fn value(&self) -> f64 {
        self.ln.exp()
    }
}

/// `h_{α,n}(w) = 1 + Σ_{i=1}^n L(i) i^α e^{−iw}`.
pub fn h_poly(spec: &CoefficientSpec, w: f64) -> Result<LogScaled> {
    let ln = RegVarTable::new(spec)?.ln_h(w);
    if ln.abs() > MAX_LOG_SCALE {
        return Err(LabError::Scale { log_value: ln });
    }
    Ok(LogScaled { ln })
}

pub fn corr01(spec: &CoefficientSpec, u: f64, v: f64) -> Result<f64> {
    RegVarTable::new(spec)?.corr01(u, v)
}

pub fn corr_gt1(spec: &CoefficientSpec, u: f64, v: f64) -> Result<f64> {
    RegVarTable::new(spec)?.corr_gt1(u, v)
}

/// `R(u,v) = 2√(uv)/(u+v)` and `S(u,v) = L(1/(u+v))/√(L(1/2u)L(1/2v))`.
pub fn r_s(u: f64, v: f64, l: &SlowlyVarying) -> Result<(f64, f64)> {
    if !(u > 0.0 && v > 0.0) {
        return Err(LabError::Domain(format!("R, S need u, v > 0, got ({u}, {v})")));
    }
    let r = 2.0 * (u * v).sqrt() / (u + v);
    let s = (l.ln_eval(1.0 / (u + v)) - 0.5 * (l.ln_eval(0.5 / u) + l.ln_eval(0.5 / v))).exp();
    Ok((r.min(1.0), s))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub n: usize,
    pub grid: Vec<f64>,
    pub gaps: Vec<f64>,
    pub sup_gap: f64,
}

impl GapReport {
    fn from_gaps(n: usize, grid: Vec<f64>, gaps: Vec<f64>) -> Self {
        let sup_gap = gaps.iter().copied().fold(0.0, f64::max);
        Self { n, grid, gaps, sup_gap }
    }
}

/// Log-uniform grid over `[2n^{−(1−δ)}, 2n^{−δ}]`, endpoints included.
pub fn gap_grid(n: usize, delta: f64, grid_size: usize) -> Result<Vec<f64>> {
    if !(delta > 0.0 && delta < 0.5) {
        return Err(LabError::Domain(format!("delta must lie in (0, 1/2), got {delta}")));
    }
    if grid_size < 2 || n < 2 {
        return Err(LabError::Invalid("gap grids need n >= 2 and at least two points".into()));
    }
    let nf = n as f64;
    let lo = (2.0 * nf.powf(-(1.0 - delta))).ln();
    let hi = (2.0 * nf.powf(-delta)).ln();
    Ok((0..grid_size).map(|k| (lo + (hi - lo) * k as f64 / (grid_size - 1) as f64).exp()).collect())
}

/// `|w^{α+1} h(w)/L(1/w) − Γ(α+1)|` over the gap grid.
pub fn gap_h2(spec: &CoefficientSpec, delta: f64, grid_size: usize) -> Result<GapReport> {
    let table = RegVarTable::new(spec)?;
    if !(table.alpha > -1.0) {
        return Err(LabError::Domain(format!("gap_h2 needs alpha > -1, got {}", table.alpha)));
    }
    let grid = gap_grid(spec.n, delta, grid_size)?;
    let a1 = table.alpha + 1.0;
    let target = ln_gamma(a1).exp();
    let gaps: Vec<f64> = grid
        .par_iter()
        .map(|&w| {
            let ln_scaled = a1 * w.ln() + table.ln_h(w) - table.l.ln_eval(1.0 / w);
            (ln_scaled.exp() - target).abs()
        })
        .collect();
    Ok(GapReport::from_gaps(spec.n, grid, gaps))
}

/// `|w e^{−nw} h(−w)/(L(n)n^α) − 1|` over the gap grid.
pub fn gap_hh1(spec: &CoefficientSpec, delta: f64, grid_size: usize) -> Result<GapReport> {
    let table = RegVarTable::new(spec)?;
    let grid = gap_grid(spec.n, delta, grid_size)?;
    let gaps: Vec<f64> = grid.par_iter().map(|&w| (table.after_ratio(w) - 1.0).abs()).collect();
    Ok(GapReport::from_gaps(spec.n, grid, gaps))
}

/// Which two-sided correlation bound [`sandwich_eps`] inverts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SandwichVariant {
    /// `(1−ε)R^{α+1} + εR^{α+2} ≤ corr01 ≤ (1−ε)R^{α+1} + ε`.
    Below,
    /// `(1−ε)R + εR² ≤ corrGT1 ≤ (1−ε)R + ε`.
    Above,
}

/// Smallest `ε ≥ 0` with `(1−ε)R^a + εR^{a+1} ≤ c ≤ (1−ε)R^a + ε`.
pub fn minimal_eps(c: f64, r: f64, a: f64) -> f64 {
    if r >= 1.0 {
        return 0.0;
    }
    let ra = r.powf(a);
    let lower = (ra - c) / (ra * (1.0 - r));
    let upper = (c - ra) / (1.0 - ra);
    lower.max(upper).max(0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SandwichPoint {
    pub n: usize,
    pub eps: f64,
    /// Grid pairs with `u ≠ v` that entered the maximum.
    pub pairs: usize,
}

/// Per-degree maximum over a `(u, v)` grid with `u/v ∈ [1/M, M]` inside
/// `(n^{−(1−δ)}, n^{−δ})` of the minimal sandwich `ε`.
pub fn sandwich_eps(
    spec: &CoefficientSpec,
    n_list: &[usize],
    ratio_bound: f64,
    delta: f64,
    variant: SandwichVariant,
    grid_size: usize,
) -> Result<Vec<SandwichPoint>> {
    if !(ratio_bound >= 1.0) {
        return Err(LabError::Invalid(format!("ratio bound M must be >= 1, got {ratio_bound}")));
    }
    if !(delta > 0.0 && delta < 0.5) {
        return Err(LabError::Domain(format!("delta must lie in (0, 1/2), got {delta}")));
    }
    let alpha = spec.alpha().ok_or_else(|| LabError::Invalid("sandwich needs regvar".into()))?;
    if variant == SandwichVariant::Below && !(alpha > -1.0) {
        return Err(LabError::Domain(format!("lower sandwich needs alpha > -1, got {alpha}")));
    }
    let exponent = match variant {
        SandwichVariant::Below => alpha + 1.0,
        SandwichVariant::Above => 1.0,
    };
    n_list
        .iter()
        .map(|&n| {
            let table = RegVarTable::new(&spec.with_degree(n))?;
            let nf = n as f64;
            let lo = nf.powf(-(1.0 - delta)).ln();
            let hi = nf.powf(-delta).ln();
            // interior points of the open interval
            let pts: Vec<f64> =
                (1..=grid_size).map(|k| (lo + (hi - lo) * k as f64 / (grid_size + 1) as f64).exp()).collect();
            let ln_h: Vec<f64> = match variant {
                SandwichVariant::Below => pts.par_iter().map(|&u| table.ln_h(2.0 * u)).collect(),
                SandwichVariant::Above => pts.par_iter().map(|&u| table.ln_h(-2.0 * u)).collect(),
            };
            let mut pairs = Vec::new();
            for i in 0..pts.len() {
                for j in (i + 1)..pts.len() {
                    if pts[j] / pts[i] <= ratio_bound {
                        pairs.push((i, j));
                    }
                }
            }
            let eps: Vec<f64> = pairs
                .par_iter()
                .map(|&(i, j)| {
                    let (u, v) = (pts[i], pts[j]);
                    let cross = match variant {
                        SandwichVariant::Below => table.ln_h(u + v),
                        SandwichVariant::Above => table.ln_h(-(u + v)),
                    };
                    let c = (cross - 0.5 * (ln_h[i] + ln_h[j])).exp();
                    let r = 2.0 * (u * v).sqrt() / (u + v);
                    minimal_eps(c, r, exponent)
                })
                .collect();
            Ok(SandwichPoint { n, eps: eps.iter().copied().fold(0.0, f64::max), pairs: eps.len() })
        })
        .collect()
}

/// `−(α+1) + Γ(α+3)/Γ(α+1) − (Γ(α+2)/Γ(α+1))²`, which vanishes for α > −1.
pub fn gamma_identity_residual(alpha: f64) -> Result<f64> {
    if !(alpha > -1.0) {
        return Err(LabError::Domain(format!("gamma identity needs alpha > -1, got {alpha}")));
    }
    let base = ln_gamma(alpha + 1.0);
    let second = (ln_gamma(alpha + 3.0) - base).exp();
    let first = (ln_gamma(alpha + 2.0) - base).exp();
    Ok(-(alpha + 1.0) + second - first * first)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    /// Double-double accumulation of directly computed terms; shares no code
    /// with the log-space path.
    fn h_oracle(alpha: f64, l: &SlowlyVarying, n: usize, w: f64) -> f64 {
        let (mut hi, mut lo) = (1.0f64, 0.0f64);
        for i in 1..=n {
            let x = i as f64;
            let term = x.powf(alpha) * l.eval(x) * (-(x * w)).exp();
            // TwoSum
            let s = hi + term;
            let bb = s - hi;
            let err = (hi - (s - bb)) + (term - bb);
            hi = s;
            lo += err;
        }
        hi + lo
    }

    #[test]
    fn h_poly_trivial_cases() {
        assert_eq!(h_poly(&CoefficientSpec::kac(0), 0.7).unwrap().value(), 1.0);
        let h = h_poly(&CoefficientSpec::kac(3), 2f64.ln()).unwrap().value();
        assert_relative_eq!(h, 1.875, max_relative = 1e-14);
    }

    #[test]
    fn h_poly_matches_oracle() {
        let cases = [
            (0.0, SlowlyVarying::Constant, 10_000, 0.003),
            (1.5, SlowlyVarying::LogPower { gamma: 2.0 }, 10_000, 0.01),
            (-0.7, SlowlyVarying::ExpLogPower { lambda: 0.5 }, 5_000, 0.0),
            (2.0, SlowlyVarying::Constant, 1_000, -0.05),
            (-2.0, SlowlyVarying::Oscillating, 10_000, -0.02),
        ];
        for (alpha, l, n, w) in cases {
            let spec = CoefficientSpec::regvar(alpha, l.clone(), n);
            let got = h_poly(&spec, w).unwrap().value();
            let want = h_oracle(alpha, &l, n, w);
            assert_relative_eq!(got, want, max_relative = 1e-10);
        }
    }

    #[test]
    fn h_poly_gamma_limit_alpha_one() {
        // brute-force sum: w² h(w) → Γ(2) = 1
        let w = 0.01;
        let h = h_oracle(1.0, &SlowlyVarying::Constant, 100_000, w);
        assert!((w * w * h - 1.0).abs() < 0.05);
        let spec = CoefficientSpec::regvar(1.0, SlowlyVarying::Constant, 100_000);
        let got = w * w * h_poly(&spec, w).unwrap().value();
        assert_relative_eq!(got, w * w * h, max_relative = 1e-10);
    }

    #[test]
    fn h_poly_scale_error() {
        let spec = CoefficientSpec::kac(100_000);
        match h_poly(&spec, -0.1) {
            Err(LabError::Scale { log_value }) => assert!(log_value > MAX_LOG_SCALE),
            other => panic!("expected scale error, got {other:?}"),
        }
    }

    #[test]
    fn corr01_diagonal_and_symmetry() {
        let spec = CoefficientSpec::regvar(0.5, SlowlyVarying::LogPower { gamma: 1.0 }, 2000);
        assert_eq!(corr01(&spec, 0.3, 0.3).unwrap(), 1.0);
        let a = corr01(&spec, 0.01, 0.5).unwrap();
        let b = corr01(&spec, 0.5, 0.01).unwrap();
        assert_eq!(a, b);
        assert!(a < 1.0 && a > 0.0);
        assert!(corr01(&spec, 0.0, 0.1).is_err());
    }

    #[test]
    fn corr01_close_to_limit_correlation() {
        let n = 4096;
        let spec = CoefficientSpec::kac(n);
        let v = (n as f64).powf(-0.5);
        let u = 4.0 * v;
        let c = corr01(&spec, u, v).unwrap();
        let (r, s) = r_s(u, v, &SlowlyVarying::Constant).unwrap();
        assert_relative_eq!(r, 0.8, max_relative = 1e-12);
        assert_eq!(s, 1.0);
        let eps = minimal_eps(c, r, 1.0);
        // frozen from direct evaluation: c = 0.800035..., eps ≈ 1.7e-4
        assert!((c - 0.8).abs() <= eps + 1e-12);
        assert!((c - 0.8).abs() < 1e-3, "c = {c}");
    }

    #[test]
    fn corr_gt1_close_to_r_and_alpha_free() {
        let n = 4096;
        let u = (n as f64).powf(-0.5);
        let v = 4.0 * u;
        let c0 = corr_gt1(&CoefficientSpec::kac(n), u, v).unwrap();
        let c2 = corr_gt1(&CoefficientSpec::regvar(2.0, SlowlyVarying::Constant, n), u, v).unwrap();
        assert_eq!(corr_gt1(&CoefficientSpec::kac(n), u, u).unwrap(), 1.0);
        let eps = minimal_eps(c0, 0.8, 1.0);
        assert!((c0 - 0.8).abs() <= eps + 1e-12);
        assert!((c0 - 0.8).abs() < 0.01, "c0 = {c0}");
        assert!((c2 - c0).abs() < 0.05, "{c2} vs {c0}");
    }

    #[test]
    fn limit_kernel_values() {
        let kinds = [
            KernelSpec::SechPower { alpha: 0.3 },
            KernelSpec::Ou,
            KernelSpec::Gauss8,
            KernelSpec::BinomialLimit { n: 9 },
            KernelSpec::WeylCorr { n: 50 },
        ];
        for k in &kinds {
            assert_relative_eq!(limit_kernel(k, 1.3, 1.3).unwrap(), 1.0, max_relative = 1e-14);
        }
        let sech1 = 1.0 / 1f64.cosh();
        assert_relative_eq!(sech1, 0.6480543, max_relative = 1e-7);
        let v = limit_kernel(&KernelSpec::SechPower { alpha: 0.0 }, 0.0, 2.0).unwrap();
        assert_relative_eq!(v, sech1, max_relative = 1e-14);
        assert!(limit_kernel(&KernelSpec::BinomialLimit { n: 4 }, 0.0, 7.0).is_err());
        assert!(limit_kernel(&KernelSpec::SechPower { alpha: -1.0 }, 0.0, 1.0).is_err());
    }

    #[test]
    fn binomial_limit_increases_to_gauss8() {
        for tau in [0.5, 1.0, 2.0, 4.0, 6.0] {
            let target = (-tau * tau / 8.0f64).exp();
            let mut prev = 0.0;
            for n in [4, 16, 64, 256, 1024, 4096] {
                let v = limit_kernel(&KernelSpec::BinomialLimit { n }, 0.0, tau).unwrap();
                assert!(v >= prev && v <= target, "tau={tau}, n={n}: {v}");
                prev = v;
            }
            assert!(target - prev < 1e-3);
        }
    }

    #[test]
    fn weyl_window_matches_gaussian() {
        let n = 10_000usize;
        let window = (n as f64).sqrt() - (n as f64).powf(0.25);
        let mut worst: f64 = 0.0;
        for i in 0..12 {
            for j in 0..12 {
                let s = window * i as f64 / 11.0;
                let t = (s + 0.3 * j as f64).min(window);
                let v = limit_kernel(&KernelSpec::WeylCorr { n }, s, t).unwrap();
                worst = worst.max((v - (-(t - s) * (t - s) / 2.0).exp()).abs());
            }
        }
        assert!(worst < 0.02, "{worst}");
    }

    #[test]
    fn r_s_examples() {
        let (r, _) = r_s(0.2, 0.2, &SlowlyVarying::Constant).unwrap();
        assert_eq!(r, 1.0);
        let (r, s) = r_s(1.0, 4.0, &SlowlyVarying::Constant).unwrap();
        assert_relative_eq!(r, 0.8, max_relative = 1e-15);
        assert_eq!(s, 1.0);
        let (_, s) = r_s(1e-4, 3e-4, &SlowlyVarying::LogPower { gamma: 1.0 }).unwrap();
        assert!((s - 1.0).abs() < 0.05);
    }

    #[test]
    fn gamma_identity_vanishes() {
        for a in [-0.9, -0.5, 0.0, 1.0, 2.5, 5.0] {
            assert!(gamma_identity_residual(a).unwrap().abs() < 1e-12, "alpha={a}");
        }
        assert!(gamma_identity_residual(-1.0).is_err());
    }

    #[test]
    fn gap_h2_constant_l_closed_form() {
        // For α = 0 and L ≡ 1, w·h(w) = w(1 − e^{−(n+1)w})/(1 − e^{−w}); the
        // sup over the grid sits at the right endpoint w = 2n^{−δ}.
        let n = 1_000_000;
        let report = gap_h2(&CoefficientSpec::kac(n), 0.25, 200).unwrap();
        let w: f64 = 2.0 * (n as f64).powf(-0.25);
        let closed = (w * (-(w * (n as f64 + 1.0))).exp_m1() / (-w).exp_m1() - 1.0).abs();
        assert_relative_eq!(report.sup_gap, closed, max_relative = 1e-9);
        assert!((report.sup_gap - 0.0316).abs() < 5e-4);
        assert_eq!(report.gaps.len(), 200);
        assert_eq!(report.sup_gap, report.gaps.iter().copied().fold(0.0, f64::max));
    }

    #[test]
    fn gap_h2_negative_alpha_shrinks() {
        let spec = CoefficientSpec::regvar(-0.5, SlowlyVarying::Constant, 10_000);
        let small = gap_h2(&spec, 0.25, 100).unwrap();
        let big = gap_h2(&spec.with_degree(1_000_000), 0.25, 100).unwrap();
        assert!(big.sup_gap.is_finite() && big.sup_gap < small.sup_gap);
        let bad = CoefficientSpec::regvar(-1.0, SlowlyVarying::Constant, 100);
        assert!(matches!(gap_h2(&bad, 0.25, 10), Err(LabError::Domain(_))));
    }

    #[test]
    fn gap_hh1_any_alpha() {
        let n = 1_000_000;
        let r0 = gap_hh1(&CoefficientSpec::kac(n), 0.25, 100).unwrap();
        assert!(r0.sup_gap < 0.05, "{}", r0.sup_gap);
        let rm2 = gap_hh1(&CoefficientSpec::regvar(-2.0, SlowlyVarying::Constant, n), 0.25, 100).unwrap();
        assert!(rm2.sup_gap < 0.05, "{}", rm2.sup_gap);
    }

    #[test]
    fn after_ratio_matches_naive_sum() {
        let n = 10;
        let spec = CoefficientSpec::regvar(1.3, SlowlyVarying::LogPower { gamma: 0.5 }, n);
        let grid = gap_grid(n, 0.25, 9).unwrap();
        let w = grid[4];
        let naive: f64 = (0..=n).map(|i| spec.variance(i).unwrap() * (i as f64 * w).exp()).sum();
        let naive_ratio = w * (-(n as f64) * w).exp() * naive / spec.variance(n).unwrap();
        let table = RegVarTable::new(&spec).unwrap();
        assert_relative_eq!(table.after_ratio(w), naive_ratio, max_relative = 1e-10);
    }

    #[test]
    fn sandwich_diagonal_contributes_nothing() {
        assert_eq!(minimal_eps(1.0, 1.0, 1.0), 0.0);
        assert_eq!(minimal_eps(0.8, 0.8, 1.0), 0.0);
        assert!(minimal_eps(0.7, 0.8, 1.0) > 0.0);
    }

    #[test]
    fn sandwich_decreases_with_degree() {
        let spec = CoefficientSpec::kac(2);
        let pts = sandwich_eps(&spec, &[1 << 10, 1 << 16], 8.0, 0.25, SandwichVariant::Below, 16).unwrap();
        assert!(pts[1].eps < pts[0].eps, "{pts:?}");
        let spec2 = CoefficientSpec::regvar(2.0, SlowlyVarying::Constant, 2);
        let above = sandwich_eps(&spec2, &[1 << 16], 8.0, 0.25, SandwichVariant::Above, 16).unwrap();
        assert!(above[0].eps < 0.1, "{above:?}");
    }

    proptest! {
        #[test]
        fn kernels_bounded_unit_diagonal_symmetric(s in -6.0f64..6.0, t in -6.0f64..6.0, alpha in -0.95f64..4.0) {
            for k in [KernelSpec::SechPower { alpha }, KernelSpec::Ou, KernelSpec::Gauss8, KernelSpec::BinomialLimit { n: 16 }] {
                let a = limit_kernel(&k, s, t).unwrap();
                let b = limit_kernel(&k, t, s).unwrap();
                prop_assert!((-1.0..=1.0).contains(&a));
                prop_assert_eq!(a, b);
                prop_assert!((limit_kernel(&k, s, s).unwrap() - 1.0).abs() < 1e-15);
            }
        }

        #[test]
        fn poly_corr_bounded(u in 1e-4f64..1.0, v in 1e-4f64..1.0, alpha in -0.9f64..3.0) {
            let spec = CoefficientSpec::regvar(alpha, SlowlyVarying::LogPower { gamma: 1.0 }, 512);
            let t = RegVarTable::new(&spec).unwrap();
            for c in [t.corr01(u, v).unwrap(), t.corr_gt1(u, v).unwrap()] {
                prop_assert!(c > 0.0 && c <= 1.0 + 1e-12);
            }
            prop_assert_eq!(t.corr01(u, v).unwrap(), t.corr01(v, u).unwrap());
        }

        #[test]
        fn binomial_limit_below_gauss8(tau in 0.0f64..10.0, n in 4usize..2000) {
            prop_assume!(tau < std::f64::consts::PI * (n as f64).sqrt());
            let v = limit_kernel(&KernelSpec::BinomialLimit { n }, 0.0, tau).unwrap();
            prop_assert!(v <= (-tau * tau / 8.0).exp() + 1e-15);
        }
    }
}
