//! Coefficient-variance laws `i ↦ E[a_i²]` for random polynomials.
//!
//! The regularly varying family is `E[a_0²] = 1`, `E[a_i²] = i^α L(i)` with `L`
//! slowly varying. The binomial (`C(n,i)`) and Weyl (`1/i!`) families are kept
//! alongside because their persistence exponents are tied to the Gaussian
//! kernel `e^{-τ²/8}`.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::numerics::{ln_binomial, ln_factorial};

/// Slowly varying part `L` of a regularly varying variance sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SlowlyVarying {
    Constant,
    /// `(ln x)^γ` for `x > e`, `1` below.
    LogPower {
        gamma: f64,
    },
    /// `exp((ln x)^λ)` for `x > e`, `e` below; requires `|λ| < 1`.
    ExpLogPower {
        lambda: f64,
    },
    /// `1 + (1 + (-1)^n)/n`; slowly varying but violates the rate condition.
    Oscillating,
    /// Explicit values `L(1), L(2), …`; the last value is held beyond the table.
    Table {
        values: Vec<f64>,
    },
}

impl SlowlyVarying {
    pub fn validate(&self) -> Result<()> {
        match self {
            SlowlyVarying::LogPower { gamma } if !gamma.is_finite() => {
                Err(LabError::Invalid(format!("log_power gamma must be finite, got {gamma}")))
            }
            SlowlyVarying::ExpLogPower { lambda } if !(lambda.abs() < 1.0) => {
                Err(LabError::Invalid(format!("exp_log_power needs |lambda| < 1, got {lambda}")))
            }
            SlowlyVarying::Table { values } => {
                if values.is_empty() {
                    return Err(LabError::Invalid("empty slowly varying table".into()));
                }
                if let Some(v) = values.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
                    return Err(LabError::Invalid(format!("table values must be positive, got {v}")));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// `ln L(x)` for real `x > 0`. Integer-indexed kinds use `⌊x⌋` (at least 1).
    pub fn ln_eval(&self, x: f64) -> f64 {
        match self {
            SlowlyVarying::Constant => 0.0,
            SlowlyVarying::LogPower { gamma } => {
                if x > std::f64::consts::E {
                    gamma * x.ln().ln()
                } else {
                    0.0
                }
            }
            SlowlyVarying::ExpLogPower { lambda } => {
                if x > std::f64::consts::E {
                    x.ln().powf(*lambda)
                } else {
                    1.0
                }
            }
            SlowlyVarying::Oscillating => {
                let n = x.floor().max(1.0);
                let parity = if (n as u64).is_multiple_of(2) { 2.0 } else { 0.0 };
                (parity / n).ln_1p()
            }
            SlowlyVarying::Table { values } => {
                let i = (x.floor().max(1.0) as usize).min(values.len());
                values[i - 1].ln()
            }
        }
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.ln_eval(x).exp()
    }

    /// Ratio `L(n+1)/L(n)` computed without cancellation in the logs.
    fn successive_ratio_minus_one(&self, n: u64) -> f64 {
        (self.ln_eval(n as f64 + 1.0) - self.ln_eval(n as f64)).exp_m1()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Family {
    #[serde(rename = "regvar")]
    RegVar {
        alpha: f64,
        slowly_varying: SlowlyVarying,
    },
    Binomial,
    Weyl,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoefficientSpec {
    pub family: Family,
    /// Polynomial degree.
    pub n: usize,
}

impl CoefficientSpec {
    pub fn regvar(alpha: f64, slowly_varying: SlowlyVarying, n: usize) -> Self {
        Self { family: Family::RegVar { alpha, slowly_varying }, n }
    }

    pub fn kac(n: usize) -> Self {
        Self::regvar(0.0, SlowlyVarying::Constant, n)
    }

    pub fn binomial(n: usize) -> Self {
        Self { family: Family::Binomial, n }
    }

    pub fn weyl(n: usize) -> Self {
        Self { family: Family::Weyl, n }
    }

    pub fn with_degree(&self, n: usize) -> Self {
        Self { family: self.family.clone(), n }
    }

    pub fn validate(&self) -> Result<()> {
        match &self.family {
            Family::RegVar { alpha, slowly_varying } => {
                if !alpha.is_finite() {
                    return Err(LabError::Invalid(format!("alpha must be finite, got {alpha}")));
                }
                slowly_varying.validate()
            }
            Family::Binomial | Family::Weyl => Ok(()),
        }
    }

    pub fn alpha(&self) -> Option<f64> {
        match &self.family {
            Family::RegVar { alpha, .. } => Some(*alpha),
            _ => None,
        }
    }

    /// `ln E[a_i²]`.
    pub fn ln_variance(&self, i: usize) -> Result<f64> {
        if i > self.n {
            return Err(LabError::Index { index: i, max: self.n });
        }
        Ok(match &self.family {
            Family::RegVar { alpha, slowly_varying } => {
                if i == 0 {
                    0.0
                } else {
                    alpha * (i as f64).ln() + slowly_varying.ln_eval(i as f64)
                }
            }
            Family::Binomial => ln_binomial(self.n as u64, i as u64),
            Family::Weyl => -ln_factorial(i as u64),
        })
    }

    /// `E[a_i²]`; for `i = 0` in the regularly varying family this is 1 by convention.
    pub fn variance(&self, i: usize) -> Result<f64> {
        self.ln_variance(i).map(f64::exp)
    }

    /// `ln E[a_i²]` for all `0 ≤ i ≤ n`.
    pub fn ln_variances(&self) -> Vec<f64> {
        (0..=self.n).map(|i| self.ln_variance(i).expect("index within degree")).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rate3Profile {
    /// `(n, n·|L(n+1)/L(n) − 1|)` on a doubling grid ending at `N_max`.
    pub points: Vec<(u64, f64)>,
    pub passes: bool,
}

/// Profile of `n·|L(n+1)/L(n) − 1|`, the quantity whose vanishing limit is the
/// rate condition. `passes` requires the last third of the profile to be
/// non-increasing and the final value below 0.1.
pub fn rate3_profile(l: &SlowlyVarying, n_max: u64) -> Result<Rate3Profile> {
    if n_max < 2 {
        return Err(LabError::Invalid(format!("N_max must be at least 2, got {n_max}")));
    }
    l.validate()?;
    let mut ns = Vec::new();
    let mut n = 2u64;
    while n < n_max {
        ns.push(n);
        n = n.saturating_mul(2);
    }
    ns.push(n_max);
    let points: Vec<(u64, f64)> =
        ns.into_iter().map(|n| (n, n as f64 * l.successive_ratio_minus_one(n).abs())).collect();
    let tail_start = points.len() - points.len().div_ceil(3);
    let tail = &points[tail_start..];
    let monotone = tail.windows(2).all(|w| w[1].1 <= w[0].1 * (1.0 + 1e-9) + 1e-15);
    let last = points.last().map(|p| p.1).unwrap_or(0.0);
    Ok(Rate3Profile { passes: monotone && last < 0.1, points })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn regvar_index_zero_is_one() {
        for l in [SlowlyVarying::Constant, SlowlyVarying::LogPower { gamma: 3.0 }, SlowlyVarying::Oscillating] {
            let spec = CoefficientSpec::regvar(-7.5, l, 10);
            assert_eq!(spec.variance(0).unwrap(), 1.0);
        }
    }

    #[test]
    fn direct_substitution_examples() {
        assert_eq!(CoefficientSpec::kac(10).variance(7).unwrap(), 1.0);
        let spec = CoefficientSpec::regvar(2.0, SlowlyVarying::LogPower { gamma: 1.0 }, 20);
        assert_relative_eq!(spec.variance(10).unwrap(), 100.0 * 10f64.ln(), max_relative = 1e-13);
        assert_relative_eq!(spec.variance(10).unwrap(), 230.2585093, max_relative = 1e-9);
    }

    #[test]
    fn out_of_range_index() {
        let spec = CoefficientSpec::kac(3);
        assert_eq!(spec.variance(4), Err(LabError::Index { index: 4, max: 3 }));
    }

    #[test]
    fn binomial_and_weyl_variances() {
        let b = CoefficientSpec::binomial(10);
        assert_relative_eq!(b.variance(3).unwrap(), 120.0, max_relative = 1e-12);
        let w = CoefficientSpec::weyl(6);
        assert_relative_eq!(w.variance(5).unwrap(), 1.0 / 120.0, max_relative = 1e-12);
        // n = 10^4 would overflow a direct product
        let big = CoefficientSpec::binomial(10_000);
        let lv = big.ln_variance(5_000).unwrap();
        assert!(lv.is_finite() && lv > 6900.0);
    }

    #[test]
    fn binomial_symmetry_in_log_space() {
        let b = CoefficientSpec::binomial(9_999);
        for i in [0, 1, 17, 2_500, 4_999] {
            let a = b.ln_variance(i).unwrap();
            let c = b.ln_variance(9_999 - i).unwrap();
            assert!((a - c).abs() <= 1e-12 * a.abs().max(1.0), "i={i}: {a} vs {c}");
        }
    }

    #[test]
    fn table_and_validation() {
        let t = SlowlyVarying::Table { values: vec![2.0, 3.0] };
        assert_relative_eq!(t.eval(1.0), 2.0);
        assert_relative_eq!(t.eval(50.0), 3.0);
        assert!(SlowlyVarying::Table { values: vec![1.0, 0.0] }.validate().is_err());
        assert!(SlowlyVarying::ExpLogPower { lambda: 1.0 }.validate().is_err());
    }

    #[test]
    fn rate3_constant_passes_with_zeros() {
        let p = rate3_profile(&SlowlyVarying::Constant, 1 << 20).unwrap();
        assert!(p.passes);
        assert!(p.points.iter().all(|&(_, v)| v == 0.0));
    }

    #[test]
    fn rate3_log_power_at_one_million() {
        let p = rate3_profile(&SlowlyVarying::LogPower { gamma: 1.0 }, 1_000_000).unwrap();
        let &(n, v) = p.points.last().unwrap();
        assert_eq!(n, 1_000_000);
        // 10^6 · |ln(10^6 + 1)/ln(10^6) − 1|
        let direct = 1e6 * ((1e6f64 + 1.0).ln() / 1e6f64.ln() - 1.0).abs();
        assert_relative_eq!(v, direct, max_relative = 1e-6);
        assert!((v - 0.0724).abs() < 1e-4);
        assert!(p.passes);
    }

    #[test]
    fn rate3_oscillating_fails() {
        let p = rate3_profile(&SlowlyVarying::Oscillating, 1 << 20).unwrap();
        let &(n, v) = p.points.last().unwrap();
        assert_eq!(n % 2, 0);
        // 2/(1 + 2/n) on even n
        assert_relative_eq!(v, 2.0 / (1.0 + 2.0 / n as f64), max_relative = 1e-9);
        assert!(!p.passes);
    }

    #[test]
    fn rate3_rejects_tiny_range() {
        assert!(rate3_profile(&SlowlyVarying::Constant, 1).is_err());
    }

    #[test]
    fn slow_variation_shrinks_with_scale() {
        for l in [SlowlyVarying::LogPower { gamma: 1.0 }, SlowlyVarying::ExpLogPower { lambda: 0.5 }] {
            for mu in [2.0, 10.0] {
                let dev = |i: f64| (l.eval(mu * i) / l.eval(i) - 1.0).abs();
                assert!(dev(1e6) < dev(1e3));
                assert!(dev(1e12) < dev(1e6));
            }
        }
    }

    proptest! {
        #[test]
        fn slow_variation_small_at_large_index(
            gamma in -0.3f64..0.3,
            lambda in -0.1f64..0.1,
            exp in 6.0f64..12.0,
            mu in prop::sample::select(vec![2.0, 10.0]),
        ) {
            let i = 10f64.powf(exp);
            for l in [SlowlyVarying::LogPower { gamma }, SlowlyVarying::ExpLogPower { lambda }] {
                prop_assert!((l.eval(mu * i) / l.eval(i) - 1.0).abs() < 0.05);
            }
        }

        #[test]
        fn variances_positive(alpha in -5.0f64..5.0, n in 1usize..300, gamma in -2.0f64..2.0) {
            let spec = CoefficientSpec::regvar(alpha, SlowlyVarying::LogPower { gamma }, n);
            for v in spec.ln_variances() {
                prop_assert!(v.exp() > 0.0);
            }
        }
    }
}
