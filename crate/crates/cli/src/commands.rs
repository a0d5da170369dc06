//! Executes one experiment command into tables and typed results.

use std::f64::consts::PI;
use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use ndarray::Array2;
use persist_lab::coeffspec::CoefficientSpec;
use persist_lab::heatfield::{
    field_cov, sample_field, semigroup_residual, space_persistence, time_persistence, HeatGridSpec, HeatPersistence,
};
use persist_lab::kernels::{gamma_identity_residual, gap_h2, gap_hh1, limit_kernel, sandwich_eps, KernelSpec};
use persist_lab::persist::{
    fit_exponent, poly_persist, relation_suite, sign_counts, stationary_persistence, wilson_interval, ExponentFit,
    PersistenceEstimate, RelationReport,
};
use persist_lab::sampler::{
    gram, poly_points, EnsembleHeader, EnsembleWriter, GaussianSampler, JitterPolicy, PolyEvaluator, RngStream,
    WhiteNoiseRule, PATH_BLOCK,
};
use persist_lab::AccuracyWarning;
use rayon::prelude::*;

use crate::config::{Command, ExperimentConfig, GapParams, HeatParams, KernelCheck, PersistTarget, SampleSource};
use crate::error::CliError;
use crate::table::Table;

/// Everything a command produced.
#[derive(Debug, Default)]
pub struct Outcome {
    pub tables: Vec<Table>,
    pub fit: Option<ExponentFit>,
    pub estimates: Vec<PersistenceEstimate>,
    pub relations: Vec<RelationReport>,
    pub warnings: Vec<AccuracyWarning>,
}

pub fn execute(cfg: &ExperimentConfig, dir: &Path) -> Result<Outcome, CliError> {
    let rng = RngStream::new(cfg.seed, 0);
    match cfg.parsed()? {
        Command::KernelCheck(k) => kernel_check(&k),
        Command::GapReport(g) => gap_report(&g),
        Command::Sample(p) => sample(&p, rng, dir),
        Command::Persist(p) => persist(&p, rng),
        Command::Fit(p) => {
            let pts = p
                .points
                .iter()
                .map(|q| {
                    if !(0.0..=1.0).contains(&q.p_hat) || q.trials == 0 {
                        return Err(CliError::Config(format!("bad fit point {q:?}")));
                    }
                    let successes = (q.p_hat * q.trials as f64).round() as u64;
                    let (ci_low, ci_high) = wilson_interval(successes, q.trials);
                    let e = PersistenceEstimate {
                        p_hat: q.p_hat,
                        successes,
                        trials: q.trials,
                        ci_low: ci_low.min(q.p_hat),
                        ci_high: ci_high.max(q.p_hat),
                        level: 0.0,
                        scale: q.scale,
                        analytic: false,
                    };
                    Ok((q.scale, e))
                })
                .collect::<Result<Vec<_>, _>>()?;
            let fit = fit_exponent(&pts, p.model)?;
            Ok(Outcome {
                tables: vec![fit_table(&fit)],
                estimates: pts.into_iter().map(|(_, e)| e).collect(),
                fit: Some(fit),
                ..Default::default()
            })
        }
        Command::Relations(r) => {
            let reports = relation_suite(&r.inputs);
            Ok(Outcome { tables: vec![relations_table(&reports)], relations: reports, ..Default::default() })
        }
        Command::Heat(h) => heat(&h, rng),
    }
}

fn kernel_check(k: &KernelCheck) -> Result<Outcome, CliError> {
    let mut out = Outcome::default();
    match k {
        KernelCheck::GammaIdentity { alphas } => {
            let mut t = Table::new("checks", &["alpha", "residual"]);
            for &a in alphas {
                t.push(vec![a.into(), gamma_identity_residual(a)?.into()]);
            }
            out.tables.push(t);
        }
        KernelCheck::WhiteNoiseCovariance { alphas, pairs, quadrature } => {
            let mut t = Table::new("checks", &["alpha", "t", "s", "quadrature", "sech", "abs_error"]);
            let times = pairs.iter().flat_map(|(a, b)| [*a, *b]);
            let t_min = times.clone().fold(f64::INFINITY, f64::min);
            let t_max = times.fold(f64::NEG_INFINITY, f64::max);
            for &alpha in alphas {
                let rule = WhiteNoiseRule::new(alpha, t_min, t_max, quadrature)?;
                out.warnings.extend(rule.warning(quadrature.tolerance * 10.0));
                for &(a, b) in pairs {
                    let q = rule.correlation(a, b);
                    let s = limit_kernel(&KernelSpec::SechPower { alpha }, a, b)?;
                    t.push(vec![alpha.into(), a.into(), b.into(), q.into(), s.into(), (q - s).abs().into()]);
                }
            }
            out.tables.push(t);
        }
        KernelCheck::Semigroup { cases, quadrature } => {
            let mut t = Table::new("checks", &["t1", "t2", "s", "residual", "convolution_residual"]);
            for &(t1, t2, s) in cases {
                let c = semigroup_residual(t1, t2, s, quadrature)?;
                out.warnings.extend(c.warning);
                t.push(vec![t1.into(), t2.into(), s.into(), c.residual.into(), c.convolution_residual.into()]);
            }
            out.tables.push(t);
        }
        KernelCheck::HeatTimeIdentity { d, log_times } => {
            let mut t = Table::new("checks", &["t", "s", "field", "sech", "abs_error"]);
            let x = vec![0.0; *d];
            let alpha = *d as f64 / 2.0 - 1.0;
            for (i, &a) in log_times.iter().enumerate() {
                for &b in &log_times[i..] {
                    let (ea, eb) = (a.exp(), b.exp());
                    let c = field_cov(*d, &x, ea, &x, eb)?
                        / (field_cov(*d, &x, ea, &x, ea)? * field_cov(*d, &x, eb, &x, eb)?).sqrt();
                    let s = limit_kernel(&KernelSpec::SechPower { alpha }, a, b)?;
                    t.push(vec![a.into(), b.into(), c.into(), s.into(), (c - s).abs().into()]);
                }
            }
            out.tables.push(t);
        }
        KernelCheck::KernelValues { kernel, pairs } => {
            let ev = kernel.evaluator()?;
            let mut t = Table::new("checks", &["s", "t", "corr"]);
            for &(a, b) in pairs {
                t.push(vec![a.into(), b.into(), ev.corr(a, b)?.into()]);
            }
            out.tables.push(t);
        }
    }
    Ok(out)
}

fn gap_report(g: &GapParams) -> Result<Outcome, CliError> {
    let mut out = Outcome::default();
    match g {
        GapParams::H2 { family, degrees, delta, grid_size } | GapParams::Hh1 { family, degrees, delta, grid_size } => {
            let mut t = Table::new("gaps", &["n", "w", "gap"]);
            for &n in degrees {
                let spec = CoefficientSpec { family: family.clone(), n };
                let r = match g {
                    GapParams::H2 { .. } => gap_h2(&spec, *delta, *grid_size)?,
                    _ => gap_hh1(&spec, *delta, *grid_size)?,
                };
                for (w, gap) in r.grid.iter().zip(&r.gaps) {
                    t.push(vec![n.into(), (*w).into(), (*gap).into()]);
                }
                t.push(vec![n.into(), "sup".into(), r.sup_gap.into()]);
            }
            out.tables.push(t);
        }
        GapParams::Sandwich { family, degrees, ratio_bound, delta, variant, grid_size } => {
            let spec = CoefficientSpec { family: family.clone(), n: degrees.iter().copied().max().unwrap_or(2) };
            let pts = sandwich_eps(&spec, degrees, *ratio_bound, *delta, *variant, *grid_size)?;
            let mut t = Table::new("sandwich", &["n", "eps", "pairs"]);
            for p in pts {
                t.push(vec![p.n.into(), p.eps.into(), p.pairs.into()]);
            }
            out.tables.push(t);
        }
    }
    Ok(out)
}

type RowGen<'a> = Box<dyn Fn(u64, usize) -> Array2<f64> + Sync + 'a>;

fn sample(p: &crate::config::SampleParams, rng: RngStream, dir: &Path) -> Result<Outcome, CliError> {
    let grid = p.grid.build()?;
    let mut out = Outcome::default();
    let kernel_sampler;
    let poly;
    let white;
    let generate: RowGen = match &p.source {
        SampleSource::Kernel { kernel } => {
            kernel_sampler = GaussianSampler::from_covariance(&gram(kernel, &grid)?, &JitterPolicy::default())?;
            Box::new(|first, rows| kernel_sampler.sample_rows(&rng, first, rows))
        }
        SampleSource::Polynomial { coefficients, normalized } => {
            poly = PolyEvaluator::new(coefficients, &poly_points(&grid)?)?;
            let scale: Vec<f64> = if *normalized {
                vec![1.0; grid.len()]
            } else {
                if let Some(l) = poly.ln_point_sd().iter().find(|l| **l > 709.0) {
                    return Err(persist_lab::LabError::Scale { log_value: *l }.into());
                }
                poly.ln_point_sd().iter().map(|l| l.exp()).collect()
            };
            Box::new(move |first, rows| {
                let mut v = poly.evaluate(poly.draw(&rng, first, rows).view());
                for mut row in v.rows_mut() {
                    row.iter_mut().zip(&scale).for_each(|(x, s)| *x *= s);
                }
                v
            })
        }
        SampleSource::WhiteNoise { alpha, quadrature } => {
            let pts = grid.points();
            let rule = WhiteNoiseRule::new(*alpha, pts[0], pts[pts.len() - 1], quadrature)?;
            out.warnings.extend(rule.warning(quadrature.tolerance * 10.0));
            white = rule.sampling_matrix(pts);
            Box::new(|first, rows| rng.normals(first, rows, white.nrows()).dot(&white))
        }
    };

    let mut writer = if p.write_ensemble {
        let header = EnsembleHeader { rng, grid: grid.clone(), paths: p.paths as u64 };
        Some(EnsembleWriter::new(BufWriter::new(File::create(dir.join("ensemble.bin"))?), &header)?)
    } else {
        None
    };
    let g = grid.len();
    let (mut sum, mut sq) = (vec![0.0; g], vec![0.0; g]);
    const BATCH: usize = 64 * PATH_BLOCK;
    let mut first = 0;
    while first < p.paths {
        let count = BATCH.min(p.paths - first);
        let blocks: Vec<Array2<f64>> = (0..count.div_ceil(PATH_BLOCK))
            .into_par_iter()
            .map(|b| {
                let off = b * PATH_BLOCK;
                generate((first + off) as u64, PATH_BLOCK.min(count - off))
            })
            .collect();
        for b in &blocks {
            for row in b.rows() {
                for (k, v) in row.iter().enumerate() {
                    sum[k] += v;
                    sq[k] += v * v;
                }
            }
            if let Some(w) = writer.as_mut() {
                w.write_rows(b.view())?;
            }
        }
        first += count;
    }
    if let Some(w) = writer {
        w.finish()?;
    }
    let n = p.paths as f64;
    let mut t = Table::new("summary", &["index", "point", "mean", "variance"]);
    for (k, x) in grid.points().iter().enumerate() {
        t.push(vec![k.into(), (*x).into(), (sum[k] / n).into(), (sq[k] / n).into()]);
    }
    out.tables.push(t);
    Ok(out)
}

pub fn persistence_table(estimates: &[PersistenceEstimate]) -> Table {
    let mut t = Table::new("persistence", &["scale", "p_hat", "ci_low", "ci_high", "trials", "successes", "analytic"]);
    for e in estimates {
        t.push(vec![
            e.scale.into(),
            e.p_hat.into(),
            e.ci_low.into(),
            e.ci_high.into(),
            e.trials.into(),
            e.successes.into(),
            e.analytic.into(),
        ]);
    }
    t
}

pub fn fit_table(f: &ExponentFit) -> Table {
    let mut t = Table::new("fit", &["model", "slope", "intercept", "stderr", "r2", "points", "dropped"]);
    let model = serde_json::to_value(f.model).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
    let dropped = f.dropped.iter().map(|d| crate::table::format_float(*d)).collect::<Vec<_>>().join(";");
    t.push(vec![
        model.into(),
        f.slope.into(),
        f.intercept.into(),
        f.stderr.into(),
        f.r2.into(),
        f.points.len().into(),
        dropped.into(),
    ]);
    t
}

pub fn relations_table(reports: &[RelationReport]) -> Table {
    let mut t = Table::new("relations", &["id", "status", "discrepancy", "tolerance", "detail"]);
    for r in reports {
        let status = serde_json::to_value(r.status).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
        t.push(vec![
            r.id.clone().into(),
            status.into(),
            r.discrepancy.into(),
            r.tolerance.into(),
            r.detail.clone().into(),
        ]);
    }
    t
}

fn with_fit(estimates: Vec<PersistenceEstimate>, fit: Option<ExponentFit>) -> Outcome {
    let mut tables = vec![persistence_table(&estimates)];
    if let Some(f) = &fit {
        tables.push(fit_table(f));
    }
    Outcome { tables, fit, estimates, ..Default::default() }
}

fn persist(p: &crate::config::PersistParams, rng: RngStream) -> Result<Outcome, CliError> {
    let fit_of = |est: &[PersistenceEstimate]| -> Result<Option<ExponentFit>, CliError> {
        match p.fit {
            Some(model) => {
                let pts: Vec<_> = est.iter().map(|e| (e.scale, e.clone())).collect();
                Ok(Some(fit_exponent(&pts, model)?))
            }
            None => Ok(None),
        }
    };
    match &p.target {
        PersistTarget::Stationary { kernel, dt, horizons, level } => {
            let est = stationary_persistence(kernel, *dt, horizons, p.paths, *level, rng)?;
            let fit = fit_of(&est)?;
            Ok(with_fit(est, fit))
        }
        PersistTarget::Polynomial { family, interval, degrees, grid } => {
            let est = degrees
                .iter()
                .map(|&n| {
                    let spec = CoefficientSpec { family: family.clone(), n };
                    poly_persist(&spec, *interval, p.paths, grid, rng.substream(n as u64))
                })
                .collect::<Result<Vec<_>, _>>()?;
            let fit = fit_of(&est)?;
            Ok(with_fit(est, fit))
        }
        PersistTarget::Orthant { rhos } => {
            let mut t =
                Table::new("persistence", &["rho", "p_hat", "ci_low", "ci_high", "trials", "successes", "exact"]);
            let mut est = Vec::new();
            for &rho in rhos {
                let cov = ndarray::arr2(&[[1.0, rho], [rho, 1.0]]);
                let s = GaussianSampler::from_covariance(&cov, &JitterPolicy::default())?;
                let c = sign_counts(&s, &rng.substream(rho.to_bits()), p.paths, 0.0);
                let e = PersistenceEstimate::from_counts(c.below, c.trials, 0.0, rho)?;
                let exact = 0.25 + rho.asin() / (2.0 * PI);
                t.push(vec![
                    rho.into(),
                    e.p_hat.into(),
                    e.ci_low.into(),
                    e.ci_high.into(),
                    e.trials.into(),
                    e.successes.into(),
                    exact.into(),
                ]);
                est.push(e);
            }
            Ok(Outcome { tables: vec![t], estimates: est, ..Default::default() })
        }
    }
}

fn heat_outcome(h: HeatPersistence) -> Outcome {
    let mut t = Table::new(
        "persistence",
        &["scale", "p_hat", "ci_low", "ci_high", "trials", "successes", "p_above", "p_below"],
    );
    for ((e, a), b) in h.estimates.iter().zip(&h.above).zip(&h.below) {
        t.push(vec![
            e.scale.into(),
            e.p_hat.into(),
            e.ci_low.into(),
            e.ci_high.into(),
            e.trials.into(),
            e.successes.into(),
            a.p_hat.into(),
            b.p_hat.into(),
        ]);
    }
    let mut tables = vec![t];
    if let Some(f) = &h.fit {
        tables.push(fit_table(f));
    }
    Outcome { tables, fit: h.fit, estimates: h.estimates, ..Default::default() }
}

fn heat(h: &HeatParams, rng: RngStream) -> Result<Outcome, CliError> {
    match h {
        HeatParams::Time { d, x, t_list, per_unit, paths } => {
            Ok(heat_outcome(time_persistence(*d, x, t_list, *per_unit, *paths, rng)?))
        }
        HeatParams::Space { r_list, dx, paths } => Ok(heat_outcome(space_persistence(r_list, *dx, *paths, rng)?)),
        HeatParams::Variance { d, times, paths } => {
            let spec = HeatGridSpec { d: *d, times: times.clone(), space: vec![vec![0.0; *d]], paths: *paths };
            let field = sample_field(&spec, rng)?;
            let n = *paths as f64;
            let mut t = Table::new("variance", &["t", "exact", "sample", "stderr"]);
            for (k, &time) in times.iter().enumerate() {
                let exact = (8.0 * PI * time).powf(-(*d as f64) / 2.0);
                let sample = field.values.column(k).iter().map(|v| v * v).sum::<f64>() / n;
                t.push(vec![time.into(), exact.into(), sample.into(), (exact * (2.0 / n).sqrt()).into()]);
            }
            Ok(Outcome { tables: vec![t], ..Default::default() })
        }
    }
}
