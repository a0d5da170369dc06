//! Exact finite-dimensional sampling of the Gaussian objects: Gram assembly,
//! jittered Cholesky, ensemble paths, polynomial coefficients and the
//! white-noise quadrature representation of the sech-kernel process.
//!
//! Every path draws its normals from its own counter-based stream, so results
//! do not depend on how paths are batched or scheduled across threads.

use std::io::{Read, Write};

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coeffspec::CoefficientSpec;
use crate::error::{AccuracyWarning, LabError, Result};
use crate::kernels::KernelSpec;
use crate::numerics::{composite_gauss_legendre, ln_gamma};

pub const DEFAULT_GRID_CAP: usize = 4096;

/// Paths per generation block. Fixed so outputs are independent of worker count.
pub const PATH_BLOCK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Coordinate {
    /// Stationary time.
    TTime,
    /// `x = e^{−u}`, the `[0, 1]` side.
    ULog,
    /// `x = e^{u}`, the `(1, ∞)` side.
    ULogAbove,
    XSpace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GridRepr")]
pub struct Grid {
    points: Vec<f64>,
    coordinate: Coordinate,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GridRepr {
    points: Vec<f64>,
    coordinate: Coordinate,
}

impl TryFrom<GridRepr> for Grid {
    type Error = LabError;
    fn try_from(r: GridRepr) -> Result<Self> {
        Grid::new(r.points, r.coordinate)
    }
}

impl Grid {
    pub fn new(points: Vec<f64>, coordinate: Coordinate) -> Result<Self> {
        Self::with_cap(points, coordinate, DEFAULT_GRID_CAP)
    }

    pub fn with_cap(points: Vec<f64>, coordinate: Coordinate, cap: usize) -> Result<Self> {
        if points.is_empty() {
            return Err(LabError::EmptyInput("grid has no points".into()));
        }
        if points.len() > cap {
            return Err(LabError::Invalid(format!("grid size {} exceeds cap {cap}", points.len())));
        }
        if points.iter().any(|p| !p.is_finite()) {
            return Err(LabError::Invalid("grid points must be finite".into()));
        }
        if points.windows(2).any(|w| w[1] <= w[0]) {
            return Err(LabError::Invalid("grid points must be strictly increasing".into()));
        }
        Ok(Self { points, coordinate })
    }

    /// `start, start + step, …` up to `end` (inclusive when it lands on the lattice).
    pub fn uniform(start: f64, end: f64, step: f64, coordinate: Coordinate) -> Result<Self> {
        if !(step > 0.0) || !(end >= start) {
            return Err(LabError::Invalid(format!("bad uniform grid [{start}, {end}] step {step}")));
        }
        let count = ((end - start) / step + 1e-9).floor() as usize + 1;
        Self::new((0..count).map(|k| start + k as f64 * step).collect(), coordinate)
    }

    /// Log-uniform lattice `lo·10^{k/per_decade}` below `hi`, plus `hi` itself.
    /// Doubling `per_decade` yields a superset of points.
    pub fn log_uniform(lo: f64, hi: f64, per_decade: usize, coordinate: Coordinate) -> Result<Self> {
        if !(lo > 0.0 && hi > lo) || per_decade == 0 {
            return Err(LabError::Invalid(format!("bad log grid [{lo}, {hi}] x{per_decade}")));
        }
        Self::new(log_lattice(lo, hi, per_decade), coordinate)
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn coordinate(&self) -> Coordinate {
        self.coordinate
    }
}

pub(crate) fn log_lattice(lo: f64, hi: f64, per_decade: usize) -> Vec<f64> {
    let step = std::f64::consts::LN_10 / per_decade as f64;
    let span = (hi / lo).ln();
    let mut pts: Vec<f64> =
        (0..).map(|k| k as f64 * step).take_while(|e| *e < span * (1.0 - 1e-12)).map(|e| lo * e.exp()).collect();
    pts.push(hi);
    pts
}

/// Counter-based random stream: `(seed, stream_id)` fixes a ChaCha8 key and
/// each path reads its own ChaCha stream under that key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngStream {
    pub seed: u64,
    pub stream_id: u64,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        Self { seed, stream_id }
    }

    /// Deterministic child stream, e.g. one per scale of an experiment.
    pub fn substream(&self, k: u64) -> Self {
        Self { seed: self.seed, stream_id: splitmix64(self.stream_id ^ splitmix64(k.wrapping_add(1))) }
    }

    pub fn path_rng(&self, path: u64) -> ChaCha8Rng {
        let mut key = [0u8; 32];
        let mut state = splitmix64(self.seed) ^ splitmix64(self.stream_id.rotate_left(17) ^ 0xA5A5);
        for chunk in key.chunks_mut(8) {
            state = splitmix64(state);
            chunk.copy_from_slice(&state.to_le_bytes());
        }
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream(path);
        rng
    }

    /// Standard normals for paths `first .. first + rows`, one row per path.
    pub fn normals(&self, first: u64, rows: usize, cols: usize) -> Array2<f64> {
        let mut z = Array2::<f64>::zeros((rows, cols));
        for (r, mut row) in z.axis_iter_mut(Axis(0)).enumerate() {
            let mut rng = self.path_rng(first + r as u64);
            for v in row.iter_mut() {
                *v = rng.sample(StandardNormal);
            }
        }
        z
    }
}

/// Kernel matrix over a grid; upper triangle evaluated and mirrored.
pub fn gram(kernel: &KernelSpec, grid: &Grid) -> Result<Array2<f64>> {
    let k = kernel.evaluator()?;
    let pts = grid.points();
    let n = pts.len();
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| (i..n).map(|j| k.corr(pts[i], pts[j])).collect::<Result<Vec<f64>>>())
        .collect::<Result<_>>()?;
    let mut m = Array2::<f64>::zeros((n, n));
    for (i, row) in rows.into_iter().enumerate() {
        for (off, v) in row.into_iter().enumerate() {
            m[[i, i + off]] = v;
            m[[i + off, i]] = v;
        }
    }
    Ok(m)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JitterPolicy {
    /// First jitter, relative to the mean diagonal.
    pub initial_relative: f64,
    pub growth: f64,
    pub max_escalations: u32,
}

impl Default for JitterPolicy {
    fn default() -> Self {
        Self { initial_relative: 1e-12, growth: 10.0, max_escalations: 8 }
    }
}

#[derive(Debug, Clone)]
pub struct CholeskyFactor {
    pub lower: Array2<f64>,
    /// Diagonal shift that made the factorization succeed (0 if none).
    pub jitter: f64,
}

/// Returns the failing leading-minor index on breakdown.
fn try_cholesky(m: &[f64], n: usize, jitter: f64) -> std::result::Result<Vec<f64>, usize> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let (li, lj) = (&l[i * n..i * n + j], &l[j * n..j * n + j]);
            let dot: f64 = li.iter().zip(lj).map(|(a, b)| a * b).sum();
            let mut v = m[i * n + j] - dot;
            if i == j {
                v += jitter;
                if !(v > 0.0) || !v.is_finite() {
                    return Err(i);
                }
                l[i * n + i] = v.sqrt();
            } else {
                l[i * n + j] = v / l[j * n + j];
            }
        }
    }
    Ok(l)
}

/// `L Lᵀ = M + jitter·I`, escalating the jitter geometrically on breakdown.
pub fn cholesky(m: &Array2<f64>, policy: &JitterPolicy) -> Result<CholeskyFactor> {
    let n = m.nrows();
    if n == 0 || m.ncols() != n {
        return Err(LabError::Invalid(format!("cholesky needs a square nonempty matrix, got {:?}", m.dim())));
    }
    let scale = m.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    for i in 0..n {
        for j in 0..i {
            if (m[[i, j]] - m[[j, i]]).abs() > 1e-12 * scale {
                return Err(LabError::Invalid(format!("matrix not symmetric at ({i}, {j})")));
            }
        }
    }
    let dense: Vec<f64> = m.iter().copied().collect();
    let mean_diag = m.diag().mean().unwrap_or(0.0).abs();
    let mut last_minor = 0;
    let mut jitter = 0.0;
    for attempt in 0..=policy.max_escalations {
        if attempt > 0 {
            jitter = policy.initial_relative * mean_diag * policy.growth.powi(attempt as i32 - 1);
        }
        match try_cholesky(&dense, n, jitter) {
            Ok(l) => {
                let lower = Array2::from_shape_vec((n, n), l).expect("square buffer");
                return Ok(CholeskyFactor { lower, jitter });
            }
            Err(minor) => last_minor = minor,
        }
    }
    Err(LabError::Conditioning { minor: last_minor, jitter })
}

/// Centered Gaussian vectors with a fixed covariance, generated in path blocks.
///
/// The covariance is standardized before factoring so the jitter is relative
/// to unit variances even when the diagonal spans many orders of magnitude.
#[derive(Debug, Clone)]
pub struct GaussianSampler {
    lower_t: Array2<f64>,
    std: Vec<f64>,
    jitter: f64,
}

impl GaussianSampler {
    pub fn from_covariance(cov: &Array2<f64>, policy: &JitterPolicy) -> Result<Self> {
        let n = cov.nrows();
        let std: Vec<f64> = cov.diag().iter().map(|v| v.sqrt()).collect();
        if std.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(LabError::Domain("covariance diagonal must be positive".into()));
        }
        let corr = Array2::from_shape_fn((n, n), |(i, j)| cov[[i, j]] / (std[i] * std[j]));
        let factor = cholesky(&corr, policy)?;
        Ok(Self { lower_t: factor.lower.t().to_owned(), std, jitter: factor.jitter })
    }

    pub fn dim(&self) -> usize {
        self.std.len()
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// Rows `first .. first + rows` of the ensemble.
    pub fn sample_rows(&self, rng: &RngStream, first: u64, rows: usize) -> Array2<f64> {
        let z = rng.normals(first, rows, self.dim());
        let mut x = z.dot(&self.lower_t);
        for mut row in x.axis_iter_mut(Axis(0)) {
            for (v, s) in row.iter_mut().zip(&self.std) {
                *v *= s;
            }
        }
        x
    }

    /// Applies `f` to each fixed-size block of paths, in parallel, returning
    /// block results in path order.
    pub fn map_blocks<R, F>(&self, rng: &RngStream, n_paths: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(ArrayView2<f64>) -> R + Sync,
    {
        map_path_blocks(n_paths, |first, rows| f(self.sample_rows(rng, first, rows).view()))
    }
}

pub(crate) fn map_path_blocks<R, F>(n_paths: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(u64, usize) -> R + Sync,
{
    let blocks = n_paths.div_ceil(PATH_BLOCK);
    (0..blocks)
        .into_par_iter()
        .map(|b| {
            let first = b * PATH_BLOCK;
            let rows = PATH_BLOCK.min(n_paths - first);
            f(first as u64, rows)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EnsembleSource {
    Kernel { kernel: KernelSpec },
    Polynomial { coefficients: CoefficientSpec, normalized: bool },
    WhiteNoise { alpha: f64 },
    Covariance { label: String },
}

#[derive(Debug, Clone)]
pub struct PathEnsemble {
    pub grid: Grid,
    /// `paths × grid.len()`.
    pub values: Array2<f64>,
    pub source: EnsembleSource,
    pub rng: RngStream,
}

impl PathEnsemble {
    pub fn paths(&self) -> usize {
        self.values.nrows()
    }

    pub fn mean(&self) -> Vec<f64> {
        self.values.mean_axis(Axis(0)).map(|m| m.to_vec()).unwrap_or_default()
    }

    /// Empirical (uncentered) covariance between two grid columns.
    pub fn covariance(&self, i: usize, j: usize) -> f64 {
        let a = self.values.column(i);
        let b = self.values.column(j);
        a.iter().zip(b.iter()).map(|(x, y)| x * y).sum::<f64>() / self.paths() as f64
    }

    pub fn correlation(&self, i: usize, j: usize) -> f64 {
        self.covariance(i, j) / (self.covariance(i, i) * self.covariance(j, j)).sqrt()
    }

    /// Per-row maximum over the grid.
    pub fn row_maxima(&self) -> Vec<f64> {
        self.values.axis_iter(Axis(0)).map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max)).collect()
    }
}

pub fn sample_paths(kernel: &KernelSpec, grid: &Grid, n_paths: usize, rng: RngStream) -> Result<PathEnsemble> {
    let cov = gram(kernel, grid)?;
    let sampler = GaussianSampler::from_covariance(&cov, &JitterPolicy::default())?;
    let values = sample_all(&sampler, &rng, n_paths);
    Ok(PathEnsemble { grid: grid.clone(), values, source: EnsembleSource::Kernel { kernel: kernel.clone() }, rng })
}

pub(crate) fn sample_all(sampler: &GaussianSampler, rng: &RngStream, n_paths: usize) -> Array2<f64> {
    let blocks = sampler.map_blocks(rng, n_paths, |b| b.to_owned());
    stack_blocks(blocks, sampler.dim())
}

fn stack_blocks(blocks: Vec<Array2<f64>>, cols: usize) -> Array2<f64> {
    if blocks.is_empty() {
        return Array2::zeros((0, cols));
    }
    let views: Vec<_> = blocks.iter().map(|b| b.view()).collect();
    ndarray::concatenate(Axis(0), &views).expect("blocks share column count")
}

/// An evaluation point of a polynomial, `±∞` meaning the sign of the leading term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PolyPoint {
    Zero,
    PosInfinity,
    NegInfinity,
    At { ln_abs: f64, negative: bool },
}

impl PolyPoint {
    pub fn from_x(x: f64) -> Self {
        if x == 0.0 {
            PolyPoint::Zero
        } else if x == f64::INFINITY {
            PolyPoint::PosInfinity
        } else if x == f64::NEG_INFINITY {
            PolyPoint::NegInfinity
        } else {
            PolyPoint::At { ln_abs: x.abs().ln(), negative: x < 0.0 }
        }
    }

    pub fn mirrored(self) -> Self {
        match self {
            PolyPoint::Zero => PolyPoint::Zero,
            PolyPoint::PosInfinity => PolyPoint::NegInfinity,
            PolyPoint::NegInfinity => PolyPoint::PosInfinity,
            PolyPoint::At { ln_abs, negative } => PolyPoint::At { ln_abs, negative: !negative },
        }
    }
}

/// Weights below this (relative to the point's standard deviation) are dropped.
const LN_WEIGHT_CUTOFF: f64 = -41.5;

/// Points processed together in one matrix product.
const POINT_BLOCK: usize = 32;

struct PointBlock {
    lo: usize,
    /// `(hi − lo) × points`.
    weights: Array2<f64>,
}

/// Evaluates standardized polynomial values `Q_n(x)/sd(Q_n(x))` at fixed
/// points as a matrix product with precomputed log-space weights
/// `sd_i x^i / sd(Q_n(x))`, so no power of `x` is ever formed.
pub struct PolyEvaluator {
    n: usize,
    ln_sd_coef: Vec<f64>,
    ln_sd_point: Vec<f64>,
    blocks: Vec<PointBlock>,
    n_points: usize,
}

impl PolyEvaluator {
    pub fn new(spec: &CoefficientSpec, points: &[PolyPoint]) -> Result<Self> {
        spec.validate()?;
        if points.is_empty() {
            return Err(LabError::EmptyInput("no evaluation points".into()));
        }
        let n = spec.n;
        let ln_sd_coef: Vec<f64> = spec.ln_variances().iter().map(|v| 0.5 * v).collect();
        let rows: Vec<(usize, Vec<f64>, f64)> = points.par_iter().map(|p| point_weights(&ln_sd_coef, *p)).collect();
        let ln_sd_point = rows.iter().map(|r| r.2).collect();
        let blocks = rows
            .chunks(POINT_BLOCK)
            .map(|chunk| {
                let lo = chunk.iter().map(|r| r.0).min().unwrap();
                let hi = chunk.iter().map(|r| r.0 + r.1.len()).max().unwrap();
                let mut w = Array2::<f64>::zeros((hi - lo, chunk.len()));
                for (c, (start, vals, _)) in chunk.iter().enumerate() {
                    for (k, v) in vals.iter().enumerate() {
                        w[[start + k - lo, c]] = *v;
                    }
                }
                PointBlock { lo, weights: w }
            })
            .collect();
        Ok(Self { n, ln_sd_coef, ln_sd_point, blocks, n_points: points.len() })
    }

    pub fn degree(&self) -> usize {
        self.n
    }

    pub fn n_points(&self) -> usize {
        self.n_points
    }

    /// `ln sd(Q_n(x))` per point.
    pub fn ln_point_sd(&self) -> &[f64] {
        &self.ln_sd_point
    }

    /// Standard normal coefficient draws `z_i` (so `a_i = sd_i z_i`) for a path block.
    pub fn draw(&self, rng: &RngStream, first: u64, rows: usize) -> Array2<f64> {
        rng.normals(first, rows, self.n + 1)
    }

    /// Standardized values at all points for the given standardized draws.
    pub fn evaluate(&self, z: ArrayView2<f64>) -> Array2<f64> {
        let mut out = Array2::<f64>::zeros((z.nrows(), self.n_points));
        let mut col = 0;
        for b in &self.blocks {
            let k = b.weights.ncols();
            let zs = z.slice(s![.., b.lo..b.lo + b.weights.nrows()]);
            out.slice_mut(s![.., col..col + k]).assign(&zs.dot(&b.weights));
            col += k;
        }
        out
    }

    /// Whether each row stays strictly negative at every point. Rows are
    /// dropped as soon as they fail, so later point blocks only see survivors.
    pub fn all_negative(&self, z: ArrayView2<f64>) -> Vec<bool> {
        let mut alive: Vec<usize> = (0..z.nrows()).collect();
        for b in &self.blocks {
            if alive.is_empty() {
                break;
            }
            let zs = z.slice(s![.., b.lo..b.lo + b.weights.nrows()]).select(Axis(0), &alive);
            let v = zs.dot(&b.weights);
            alive = alive
                .iter()
                .zip(v.axis_iter(Axis(0)))
                .filter(|(_, row)| row.iter().all(|x| *x < 0.0))
                .map(|(i, _)| *i)
                .collect();
        }
        let mut out = vec![false; z.nrows()];
        for i in alive {
            out[i] = true;
        }
        out
    }

    /// Actual coefficients `a_i = sd_i z_i`.
    pub fn coefficients(&self, z: ArrayView2<f64>) -> Array2<f64> {
        let mut a = z.to_owned();
        for mut row in a.axis_iter_mut(Axis(0)) {
            for (v, l) in row.iter_mut().zip(&self.ln_sd_coef) {
                *v *= l.exp();
            }
        }
        a
    }
}

fn point_weights(ln_sd: &[f64], p: PolyPoint) -> (usize, Vec<f64>, f64) {
    let n = ln_sd.len() - 1;
    match p {
        PolyPoint::Zero => (0, vec![1.0], ln_sd[0]),
        PolyPoint::PosInfinity => (n, vec![1.0], f64::INFINITY),
        PolyPoint::NegInfinity => (n, vec![if n.is_multiple_of(2) { 1.0 } else { -1.0 }], f64::INFINITY),
        PolyPoint::At { ln_abs, negative } => {
            let e: Vec<f64> = ln_sd.iter().enumerate().map(|(i, l)| l + i as f64 * ln_abs).collect();
            let m = e.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let tot: f64 = e.iter().map(|v| (2.0 * (v - m)).exp()).sum();
            let ln_sd_point = m + 0.5 * tot.ln();
            let keep = |v: &f64| v - ln_sd_point > LN_WEIGHT_CUTOFF;
            let lo = e.iter().position(keep).unwrap_or(0);
            let hi = e.iter().rposition(keep).unwrap_or(n);
            let w = (lo..=hi)
                .map(|i| {
                    let mag = (e[i] - ln_sd_point).exp();
                    if negative && i % 2 == 1 {
                        -mag
                    } else {
                        mag
                    }
                })
                .collect();
            (lo, w, ln_sd_point)
        }
    }
}

/// Converts grid points to polynomial evaluation points per its coordinate.
pub fn poly_points(grid: &Grid) -> Result<Vec<PolyPoint>> {
    grid.points()
        .iter()
        .map(|&p| match grid.coordinate() {
            Coordinate::XSpace => Ok(PolyPoint::from_x(p)),
            Coordinate::ULog => Ok(PolyPoint::At { ln_abs: -p, negative: false }),
            Coordinate::ULogAbove => Ok(PolyPoint::At { ln_abs: p, negative: false }),
            Coordinate::TTime => Err(LabError::Invalid("polynomials are evaluated in x or u coordinates".into())),
        })
        .collect()
}

/// Samples `Q_n` at the grid points. With `normalized` each column is divided
/// by its standard deviation, which never overflows; raw values fail with a
/// scale error when `sd(Q_n(x))` is not representable.
pub fn sample_poly(
    spec: &CoefficientSpec,
    n_paths: usize,
    eval: &Grid,
    rng: RngStream,
    normalized: bool,
) -> Result<PathEnsemble> {
    let points = poly_points(eval)?;
    let ev = PolyEvaluator::new(spec, &points)?;
    if !normalized {
        if let Some(l) = ev.ln_point_sd().iter().find(|l| **l > 709.0) {
            return Err(LabError::Scale { log_value: *l });
        }
    }
    let blocks = map_path_blocks(n_paths, |first, rows| {
        let z = ev.draw(&rng, first, rows);
        let mut v = ev.evaluate(z.view());
        if !normalized {
            for mut row in v.axis_iter_mut(Axis(0)) {
                for (x, l) in row.iter_mut().zip(ev.ln_point_sd()) {
                    *x *= l.exp();
                }
            }
        }
        v
    });
    Ok(PathEnsemble {
        grid: eval.clone(),
        values: stack_blocks(blocks, points.len()),
        source: EnsembleSource::Polynomial { coefficients: spec.clone(), normalized },
        rng,
    })
}

/// Quadrature in `y = ln r` for the white-noise integral with kernel
/// `g_t(r) = r^{α/2} e^{−e^{−t} r}`: Gauss–Legendre panels of equal width in
/// `y`, i.e. a log-spaced partition of `(0, r_max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WhiteNoiseQuadrature {
    pub panel_width: f64,
    pub order: usize,
    /// Target truncated fraction of `‖g_t‖²` on each side of the range.
    pub tolerance: f64,
    /// Explicit range; chosen from `tolerance` when absent.
    #[serde(default)]
    pub r_min: Option<f64>,
    #[serde(default)]
    pub r_max: Option<f64>,
}

impl Default for WhiteNoiseQuadrature {
    fn default() -> Self {
        Self { panel_width: 0.5, order: 16, tolerance: 1e-10, r_min: None, r_max: None }
    }
}

#[derive(Debug, Clone)]
pub struct WhiteNoiseRule {
    pub alpha: f64,
    pub r: Vec<f64>,
    /// Weights for `dr`.
    pub weights: Vec<f64>,
    /// Largest truncated fraction of `‖g_t‖²` over the requested times.
    pub truncated_mass: f64,
}

fn truncated_fraction(alpha: f64, t: f64, r_min: f64, r_max: f64) -> f64 {
    let a = alpha + 1.0;
    let c = 2.0 * (-t).exp();
    let below = statrs::function::gamma::gamma_lr(a, c * r_min);
    let above = statrs::function::gamma::gamma_ur(a, c * r_max);
    below + above
}

impl WhiteNoiseRule {
    pub fn new(alpha: f64, t_min: f64, t_max: f64, quad: &WhiteNoiseQuadrature) -> Result<Self> {
        if !(alpha > -1.0) {
            return Err(LabError::Domain(format!("white-noise representation needs alpha > -1, got {alpha}")));
        }
        if !(quad.panel_width > 0.0) || quad.order == 0 {
            return Err(LabError::Invalid("bad quadrature panel spec".into()));
        }
        let a = alpha + 1.0;
        let r_max = quad.r_max.unwrap_or(40.0 * t_max.exp());
        // P(a, x) ≈ x^a / Γ(a+1) near zero
        let r_min =
            quad.r_min.unwrap_or_else(|| 0.5 * t_min.exp() * ((quad.tolerance.ln() + ln_gamma(a + 1.0)) / a).exp());
        if !(r_min > 0.0 && r_max > r_min) {
            return Err(LabError::Invalid(format!("bad quadrature range ({r_min}, {r_max}]")));
        }
        let (y0, y1) = (r_min.ln(), r_max.ln());
        let panels = ((y1 - y0) / quad.panel_width).ceil().max(1.0) as usize;
        let (ys, wy) = composite_gauss_legendre(y0, y1, panels, quad.order);
        let r: Vec<f64> = ys.iter().map(|y| y.exp()).collect();
        let weights = r.iter().zip(&wy).map(|(r, w)| r * w).collect();
        let truncated_mass =
            truncated_fraction(alpha, t_min, r_min, r_max).max(truncated_fraction(alpha, t_max, r_min, r_max));
        Ok(Self { alpha, r, weights, truncated_mass })
    }

    fn ln_g(&self, t: f64, r: f64) -> f64 {
        0.5 * self.alpha * r.ln() - (-t).exp() * r
    }

    /// Quadrature value of `(g_t, g_s) = ∫ g_t g_s dr`.
    pub fn inner_product(&self, t: f64, s: f64) -> f64 {
        self.r.iter().zip(&self.weights).map(|(&r, w)| w * (self.ln_g(t, r) + self.ln_g(s, r)).exp()).sum()
    }

    pub fn correlation(&self, t: f64, s: f64) -> f64 {
        self.inner_product(t, s) / (self.inner_product(t, t) * self.inner_product(s, s)).sqrt()
    }

    /// `nodes × times` weights `g_t(r_j)√w_j`, each column normalized to unit length.
    pub fn sampling_matrix(&self, times: &[f64]) -> Array2<f64> {
        let q = self.r.len();
        let mut a = Array2::<f64>::zeros((q, times.len()));
        for (k, &t) in times.iter().enumerate() {
            let mut norm = 0.0;
            for j in 0..q {
                let v = self.ln_g(t, self.r[j]).exp() * self.weights[j].sqrt();
                a[[j, k]] = v;
                norm += v * v;
            }
            let inv = 1.0 / norm.sqrt();
            a.column_mut(k).mapv_inplace(|v| v * inv);
        }
        a
    }

    pub fn warning(&self, limit: f64) -> Option<AccuracyWarning> {
        (self.truncated_mass > limit).then(|| AccuracyWarning {
            source: "white_noise_quadrature".into(),
            message: format!("truncated L2 mass {:.3e} exceeds {limit:.1e}", self.truncated_mass),
            estimate: self.truncated_mass,
        })
    }
}

/// `‖g_0‖² = Γ(α+1) 2^{−(α+1)}`.
pub fn g0_norm_sq(alpha: f64) -> f64 {
    (ln_gamma(alpha + 1.0) - (alpha + 1.0) * std::f64::consts::LN_2).exp()
}

/// Samples the sech-kernel process from its white-noise integral: independent
/// Gaussian cell masses against `g_t`, normalized per `t` on the discrete rule.
pub fn kl_sample_y(
    alpha: f64,
    grid: &Grid,
    quad: &WhiteNoiseQuadrature,
    n_paths: usize,
    rng: RngStream,
) -> Result<(PathEnsemble, Option<AccuracyWarning>)> {
    let pts = grid.points();
    let rule = WhiteNoiseRule::new(alpha, pts[0], pts[pts.len() - 1], quad)?;
    let a = rule.sampling_matrix(pts);
    let q = a.nrows();
    let blocks = map_path_blocks(n_paths, |first, rows| rng.normals(first, rows, q).dot(&a));
    let ensemble = PathEnsemble {
        grid: grid.clone(),
        values: stack_blocks(blocks, pts.len()),
        source: EnsembleSource::WhiteNoise { alpha },
        rng,
    };
    Ok((ensemble, rule.warning(quad.tolerance * 10.0)))
}

const ENSEMBLE_MAGIC: &[u8; 8] = b"PLENS001";

fn coordinate_code(c: Coordinate) -> u32 {
    match c {
        Coordinate::TTime => 0,
        Coordinate::ULog => 1,
        Coordinate::ULogAbove => 2,
        Coordinate::XSpace => 3,
    }
}

fn coordinate_from_code(c: u32) -> Result<Coordinate> {
    Ok(match c {
        0 => Coordinate::TTime,
        1 => Coordinate::ULog,
        2 => Coordinate::ULogAbove,
        3 => Coordinate::XSpace,
        other => return Err(LabError::Io(format!("unknown coordinate code {other}"))),
    })
}

/// Header of the binary ensemble format: magic, seed, stream id, coordinate
/// code, grid length, path count, grid points; then rows of little-endian f64.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleHeader {
    pub rng: RngStream,
    pub grid: Grid,
    pub paths: u64,
}

/// Streams ensemble rows to disk without holding the ensemble in memory.
pub struct EnsembleWriter<W: Write> {
    out: W,
    cols: usize,
    expected: u64,
    written: u64,
}

impl<W: Write> EnsembleWriter<W> {
    pub fn new(mut out: W, header: &EnsembleHeader) -> Result<Self> {
        out.write_all(ENSEMBLE_MAGIC)?;
        out.write_all(&header.rng.seed.to_le_bytes())?;
        out.write_all(&header.rng.stream_id.to_le_bytes())?;
        out.write_all(&coordinate_code(header.grid.coordinate()).to_le_bytes())?;
        out.write_all(&0u32.to_le_bytes())?;
        out.write_all(&(header.grid.len() as u64).to_le_bytes())?;
        out.write_all(&header.paths.to_le_bytes())?;
        for p in header.grid.points() {
            out.write_all(&p.to_le_bytes())?;
        }
        Ok(Self { out, cols: header.grid.len(), expected: header.paths, written: 0 })
    }

    pub fn write_rows(&mut self, rows: ArrayView2<f64>) -> Result<()> {
        if rows.ncols() != self.cols {
            return Err(LabError::Invalid(format!("row width {} != grid size {}", rows.ncols(), self.cols)));
        }
        for row in rows.axis_iter(Axis(0)) {
            for v in row {
                self.out.write_all(&v.to_le_bytes())?;
            }
        }
        self.written += rows.nrows() as u64;
        Ok(())
    }

    pub fn finish(mut self) -> Result<W> {
        if self.written != self.expected {
            return Err(LabError::Io(format!("wrote {} rows, header promised {}", self.written, self.expected)));
        }
        self.out.flush()?;
        Ok(self.out)
    }
}

/// Generates rows with `generate(first_path, count)` in parallel batches and
/// writes them in path order, holding at most one batch in memory.
pub fn stream_rows<W, F>(writer: &mut EnsembleWriter<W>, n_paths: usize, generate: F) -> Result<()>
where
    W: Write,
    F: Fn(u64, usize) -> Array2<f64> + Sync,
{
    const BATCH: usize = 64 * PATH_BLOCK;
    let mut first = 0;
    while first < n_paths {
        let count = BATCH.min(n_paths - first);
        let blocks = map_path_blocks(count, |off, rows| generate(first as u64 + off, rows));
        for b in blocks {
            writer.write_rows(b.view())?;
        }
        first += count;
    }
    Ok(())
}

pub fn write_ensemble<W: Write>(out: W, ensemble: &PathEnsemble) -> Result<W> {
    let header = EnsembleHeader { rng: ensemble.rng, grid: ensemble.grid.clone(), paths: ensemble.paths() as u64 };
    let mut w = EnsembleWriter::new(out, &header)?;
    w.write_rows(ensemble.values.view())?;
    w.finish()
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_ensemble<R: Read>(mut r: R) -> Result<(EnsembleHeader, Array2<f64>)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != ENSEMBLE_MAGIC {
        return Err(LabError::Io("not an ensemble file".into()));
    }
    let seed = read_u64(&mut r)?;
    let stream_id = read_u64(&mut r)?;
    let coordinate = coordinate_from_code(read_u32(&mut r)?)?;
    let _reserved = read_u32(&mut r)?;
    let cols = read_u64(&mut r)? as usize;
    let paths = read_u64(&mut r)?;
    let mut grid = Vec::with_capacity(cols);
    for _ in 0..cols {
        grid.push(f64::from_bits(read_u64(&mut r)?));
    }
    let grid = Grid::with_cap(grid, coordinate, usize::MAX)?;
    let mut values = Vec::with_capacity(cols * paths as usize);
    for _ in 0..(cols as u64 * paths) {
        values.push(f64::from_bits(read_u64(&mut r)?));
    }
    let values = Array2::from_shape_vec((paths as usize, cols), values).expect("sized buffer");
    Ok((EnsembleHeader { rng: RngStream::new(seed, stream_id), grid, paths }, values))
}
