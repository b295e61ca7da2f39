//! Fractional Brownian motion: exact sampling, Hilbert-space valued noise,
//! piecewise-linear restriction and grid Hölder seminorms.
//!
//! Scalar paths are built from fractional Gaussian noise sampled by circulant
//! embedding (Davies–Harte). For `H > 1/2` the embedding is nonnegative, but
//! the code still checks the spectrum and falls back to a dense Cholesky
//! factor of the increment covariance if it ever is not.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Exact pairwise seminorms are used up to this many grid cells.
pub const EXACT_SEMINORM_LIMIT: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampler {
    CirculantEmbedding,
    DenseCholesky,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FbmSpec {
    pub hurst: f64,
    pub horizon: f64,
    pub n_grid: usize,
    pub seed: u64,
    /// Pair two real fBms as `(ζ1 + iζ2)/√2` per component.
    #[serde(default)]
    pub complex: bool,
    /// Skip the circulant embedding; only sensible for small grids.
    #[serde(default)]
    pub force_dense: bool,
}

impl FbmSpec {
    pub fn new(hurst: f64, horizon: f64, n_grid: usize, seed: u64) -> Result<Self> {
        let spec = Self {
            hurst,
            horizon,
            n_grid,
            seed,
            complex: false,
            force_dense: false,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.hurst > 0.5 && self.hurst < 1.0) {
            return Err(Error::param("hurst", format!("must lie in (1/2, 1), got {}", self.hurst)));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::param("horizon", "must be positive"));
        }
        if self.n_grid < 2 || !self.n_grid.is_power_of_two() {
            return Err(Error::param(
                "n_grid",
                format!("must be a power of two >= 2, got {}", self.n_grid),
            ));
        }
        Ok(())
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.n_grid as f64
    }
}

/// Diagonal covariance `Q = diag(q_1, …, q_M)` of the Hilbert-valued noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceClassCov {
    q: Vec<f64>,
}

impl TraceClassCov {
    pub fn new(q: Vec<f64>) -> Result<Self> {
        if q.is_empty() {
            return Err(Error::param("q", "at least one mode is required"));
        }
        if let Some(bad) = q.iter().find(|x| !(**x > 0.0 && x.is_finite())) {
            return Err(Error::param("q", format!("weights must be positive, got {bad}")));
        }
        Ok(Self { q })
    }

    /// `q_i = ratio^{i-1}`.
    pub fn geometric(modes: usize, ratio: f64) -> Result<Self> {
        Self::new((0..modes).map(|i| ratio.powi(i as i32)).collect())
    }

    pub fn identity(modes: usize) -> Result<Self> {
        Self::new(vec![1.0; modes])
    }

    pub fn weights(&self) -> &[f64] {
        &self.q
    }

    pub fn modes(&self) -> usize {
        self.q.len()
    }

    pub fn trace(&self) -> f64 {
        self.q.iter().sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathKind {
    Sampled,
    PiecewiseLinear,
}

/// A path `[0, T] → C^M` stored on a uniform grid of `n_cells + 1` nodes.
///
/// A piecewise-linear path is linear between breakpoints placed every
/// `stride` nodes; it is still stored on the full grid so that it can be
/// compared pointwise with the path it was restricted from.
#[derive(Debug, Clone, PartialEq)]
pub struct HilbertPath {
    horizon: f64,
    n_cells: usize,
    dim: usize,
    values: Vec<Complex64>,
    kind: PathKind,
    stride: usize,
    complex: bool,
    hurst: Option<f64>,
    sampler: Option<Sampler>,
}

impl HilbertPath {
    /// Build from row-major values (`(n_cells + 1) × dim`).
    pub fn from_values(
        horizon: f64,
        n_cells: usize,
        dim: usize,
        values: Vec<Complex64>,
        kind: PathKind,
    ) -> Result<Self> {
        if !(horizon > 0.0) || n_cells == 0 || dim == 0 {
            return Err(Error::param("path", "needs positive horizon, cells and dimension"));
        }
        if values.len() != (n_cells + 1) * dim {
            return Err(Error::DimensionMismatch {
                expected: (n_cells + 1) * dim,
                found: values.len(),
            });
        }
        let complex = values.iter().any(|z| z.im != 0.0);
        Ok(Self {
            horizon,
            n_cells,
            dim,
            values,
            kind,
            stride: 1,
            complex,
            hurst: None,
            sampler: None,
        })
    }

    /// Sample `f(t)` at the grid nodes; the result is piecewise linear.
    pub fn from_fn(horizon: f64, n_cells: usize, dim: usize, mut f: impl FnMut(f64) -> Vec<Complex64>) -> Result<Self> {
        let mut values = Vec::with_capacity((n_cells + 1) * dim);
        for i in 0..=n_cells {
            let row = f(horizon * i as f64 / n_cells as f64);
            if row.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: row.len(),
                });
            }
            values.extend(row);
        }
        Self::from_values(horizon, n_cells, dim, values, PathKind::PiecewiseLinear)
    }

    /// Real scalar path from a closure.
    pub fn scalar(horizon: f64, n_cells: usize, mut f: impl FnMut(f64) -> f64) -> Self {
        Self::from_fn(horizon, n_cells, 1, |t| vec![Complex64::new(f(t), 0.0)]).expect("valid scalar path")
    }

    pub fn zeros(horizon: f64, n_cells: usize, dim: usize) -> Result<Self> {
        Self::from_values(
            horizon,
            n_cells,
            dim,
            vec![Complex64::new(0.0, 0.0); (n_cells + 1) * dim],
            PathKind::PiecewiseLinear,
        )
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn n_cells(&self) -> usize {
        self.n_cells
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn kind(&self) -> PathKind {
        self.kind
    }

    /// Distance in grid nodes between consecutive breakpoints.
    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn is_complex(&self) -> bool {
        self.complex
    }

    pub fn hurst(&self) -> Option<f64> {
        self.hurst
    }

    pub fn sampler(&self) -> Option<Sampler> {
        self.sampler
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.n_cells as f64
    }

    pub fn time(&self, i: usize) -> f64 {
        self.horizon * i as f64 / self.n_cells as f64
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.n_cells).map(|i| self.time(i)).collect()
    }

    /// Values at node `i`.
    pub fn node(&self, i: usize) -> &[Complex64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn values(&self) -> &[Complex64] {
        &self.values
    }

    /// Component `j` at every node.
    pub fn component(&self, j: usize) -> Vec<Complex64> {
        (0..=self.n_cells).map(|i| self.values[i * self.dim + j]).collect()
    }

    /// Linear interpolation between grid nodes.
    pub fn value_at(&self, t: f64) -> Result<Vec<Complex64>> {
        self.check_time(t)?;
        let x = t / self.dt();
        let i = (x.floor() as usize).min(self.n_cells - 1);
        let w = x - i as f64;
        Ok(self
            .node(i)
            .iter()
            .zip(self.node(i + 1))
            .map(|(a, b)| a * (1.0 - w) + b * w)
            .collect())
    }

    fn check_time(&self, t: f64) -> Result<()> {
        let eps = 1e-12 * self.horizon;
        if t < -eps || t > self.horizon + eps || t.is_nan() {
            return Err(Error::OutsideInterval {
                point: t,
                lower: 0.0,
                upper: self.horizon,
            });
        }
        Ok(())
    }

    /// Scale each component by its own factor.
    pub fn scale_components(&self, factors: &[f64]) -> Result<Self> {
        if factors.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: factors.len(),
            });
        }
        let mut out = self.clone();
        for (idx, v) in out.values.iter_mut().enumerate() {
            *v *= factors[idx % self.dim];
        }
        Ok(out)
    }

    pub fn sub(&self, other: &HilbertPath) -> Result<Self> {
        if self.n_cells != other.n_cells || self.dim != other.dim {
            return Err(Error::DimensionMismatch {
                expected: self.values.len(),
                found: other.values.len(),
            });
        }
        let mut out = self.clone();
        for (a, b) in out.values.iter_mut().zip(&other.values) {
            *a -= b;
        }
        out.complex = self.complex || other.complex;
        out.hurst = None;
        out.sampler = None;
        Ok(out)
    }
}

fn fgn_autocov(k: usize, h: f64) -> f64 {
    let k = k as f64;
    let p = 2.0 * h;
    0.5 * ((k + 1.0).powf(p) - 2.0 * k.powf(p) + (k - 1.0).abs().powf(p))
}

/// Unit-step fractional Gaussian noise of length `n`.
fn sample_fgn(n: usize, h: f64, force_dense: bool, rng: &mut ChaCha8Rng) -> (Vec<f64>, Sampler) {
    if !force_dense {
        if let Some(x) = fgn_circulant(n, h, rng) {
            return (x, Sampler::CirculantEmbedding);
        }
    }
    (fgn_dense(n, h, rng), Sampler::DenseCholesky)
}

fn fgn_circulant(n: usize, h: f64, rng: &mut ChaCha8Rng) -> Option<Vec<f64>> {
    let m = 2 * n;
    let mut row: Vec<Complex64> = (0..m)
        .map(|k| {
            let lag = if k <= n { k } else { m - k };
            Complex64::new(fgn_autocov(lag, h), 0.0)
        })
        .collect();
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(m);
    fft.process(&mut row);
    let tol = 1e-10 * row[0].re.abs().max(1.0);
    if row.iter().any(|z| z.re < -tol) {
        return None;
    }
    // With complex iid W_k of variance 2, the real part of FFT(√(λ_k/m) W)
    // has exactly the circulant covariance.
    let mut w: Vec<Complex64> = row
        .iter()
        .map(|lam| {
            let s = (lam.re.max(0.0) / m as f64).sqrt();
            let re: f64 = StandardNormal.sample(rng);
            let im: f64 = StandardNormal.sample(rng);
            Complex64::new(re, im) * s
        })
        .collect();
    fft.process(&mut w);
    Some(w[..n].iter().map(|z| z.re).collect())
}

fn fgn_dense(n: usize, h: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let cov = DMatrix::from_fn(n, n, |i, j| fgn_autocov(i.abs_diff(j), h));
    let chol = cov.cholesky().expect("fractional Gaussian noise covariance is positive definite");
    let z = DVector::from_fn(n, |_, _| StandardNormal.sample(rng));
    let x = chol.l() * z;
    x.iter().copied().collect()
}

/// Cumulative sums of scaled fGn: a standard fBm on the grid.
fn scalar_fbm(spec: &FbmSpec, stream: u64) -> (Vec<f64>, Sampler) {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(stream);
    let (incr, sampler) = sample_fgn(spec.n_grid, spec.hurst, spec.force_dense, &mut rng);
    let scale = spec.dt().powf(spec.hurst);
    let mut path = Vec::with_capacity(spec.n_grid + 1);
    let mut acc = 0.0;
    path.push(0.0);
    for x in incr {
        acc += x * scale;
        path.push(acc);
    }
    (path, sampler)
}

/// Scalar fBm on the grid of `spec`.
pub fn sample_fbm_1d(spec: &FbmSpec) -> Result<HilbertPath> {
    sample_fbm_hilbert(spec, &TraceClassCov::identity(1)?)
}

/// `ω = Σ q_i^{1/2} ζ_i e_i` with independent scalar fBms `ζ_i`.
///
/// Component `i` draws from generator stream `i` (streams `2i`, `2i + 1` for
/// complex noise), so a single real component reproduces [`sample_fbm_1d`].
pub fn sample_fbm_hilbert(spec: &FbmSpec, cov: &TraceClassCov) -> Result<HilbertPath> {
    spec.validate()?;
    let m = cov.modes();
    let n = spec.n_grid;
    let mut values = vec![Complex64::new(0.0, 0.0); (n + 1) * m];
    let mut sampler = Sampler::CirculantEmbedding;
    for (i, q) in cov.weights().iter().enumerate() {
        let sq = q.sqrt();
        let column: Vec<Complex64> = if spec.complex {
            let (re, s1) = scalar_fbm(spec, 2 * i as u64);
            let (im, s2) = scalar_fbm(spec, 2 * i as u64 + 1);
            if s1 == Sampler::DenseCholesky || s2 == Sampler::DenseCholesky {
                sampler = Sampler::DenseCholesky;
            }
            re.iter()
                .zip(&im)
                .map(|(a, b)| Complex64::new(*a, *b) * (sq / std::f64::consts::SQRT_2))
                .collect()
        } else {
            let (re, s) = scalar_fbm(spec, i as u64);
            if s == Sampler::DenseCholesky {
                sampler = Sampler::DenseCholesky;
            }
            re.iter().map(|a| Complex64::new(a * sq, 0.0)).collect()
        };
        for (t, z) in column.into_iter().enumerate() {
            values[t * m + i] = z;
        }
    }
    Ok(HilbertPath {
        horizon: spec.horizon,
        n_cells: n,
        dim: m,
        values,
        kind: PathKind::Sampled,
        stride: 1,
        complex: spec.complex,
        hurst: Some(spec.hurst),
        sampler: Some(sampler),
    })
}

/// Piecewise-linear interpolant through `2^level + 1` equispaced nodes of
/// `path`, stored on the original grid.
pub fn piecewise_linear_restrict(path: &HilbertPath, level: u32) -> Result<HilbertPath> {
    let segments = 1usize.checked_shl(level).filter(|s| *s <= path.n_cells && path.n_cells % *s == 0);
    let Some(segments) = segments else {
        return Err(Error::IndivisibleLevel {
            level,
            n_grid: path.n_cells,
        });
    };
    let stride = path.n_cells / segments;
    let d = path.dim;
    let mut values = path.values.clone();
    for seg in 0..path.n_cells / stride {
        let (i0, i1) = (seg * stride, (seg + 1) * stride);
        for i in i0 + 1..i1 {
            let w = (i - i0) as f64 / stride as f64;
            for j in 0..d {
                values[i * d + j] = path.values[i0 * d + j] * (1.0 - w) + path.values[i1 * d + j] * w;
            }
        }
    }
    Ok(HilbertPath {
        values,
        kind: PathKind::PiecewiseLinear,
        stride,
        ..path.clone()
    })
}

fn node_distance(path: &HilbertPath, p: usize, q: usize) -> f64 {
    path.node(q)
        .iter()
        .zip(path.node(p))
        .map(|(a, b)| (a - b).norm_sqr())
        .sum::<f64>()
        .sqrt()
}

/// Grid proxy for `sup_{s<t} ‖ω(t) - ω(s)‖ / (t - s)^{β'}` over the whole path.
pub fn holder_seminorm(path: &HilbertPath, beta_prime: f64) -> f64 {
    holder_seminorm_on(path, beta_prime, 0, path.n_cells)
}

/// Grid Hölder seminorm restricted to nodes `i0..=i1`.
///
/// All pairs are used when the window has at most [`EXACT_SEMINORM_LIMIT`]
/// cells; larger windows use every lag up to 64 plus all dyadic lags.
pub fn holder_seminorm_on(path: &HilbertPath, beta_prime: f64, i0: usize, i1: usize) -> f64 {
    let dt = path.dt();
    let width = i1.saturating_sub(i0);
    let lags: Vec<usize> = if width <= EXACT_SEMINORM_LIMIT {
        (1..=width).collect()
    } else {
        let mut lags: Vec<usize> = (1..=64).collect();
        let mut l = 128;
        while l <= width {
            lags.push(l);
            l *= 2;
        }
        lags.push(width);
        lags
    };
    let mut best: f64 = 0.0;
    for lag in lags {
        let denom = (lag as f64 * dt).powf(beta_prime);
        for p in i0..=i1 - lag {
            best = best.max(node_distance(path, p, p + lag) / denom);
        }
    }
    best
}

/// `sup ‖ω(t)‖` over the grid.
pub fn sup_norm(path: &HilbertPath) -> f64 {
    (0..=path.n_cells)
        .map(|i| path.node(i).iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt())
        .fold(0.0, f64::max)
}

/// Slope of the active linear segment; right derivative at breakpoints,
/// left derivative at the horizon.
pub fn path_derivative(path: &HilbertPath, t: f64) -> Result<Vec<Complex64>> {
    if path.kind != PathKind::PiecewiseLinear {
        return Err(Error::NotPiecewiseLinear);
    }
    path.check_time(t)?;
    let seg_len = path.dt() * path.stride as f64;
    let n_seg = path.n_cells / path.stride;
    let seg = ((t / seg_len).floor() as usize).min(n_seg - 1);
    let (i0, i1) = (seg * path.stride, (seg + 1) * path.stride);
    Ok(path
        .node(i1)
        .iter()
        .zip(path.node(i0))
        .map(|(b, a)| (b - a) / seg_len)
        .collect())
}

/// Slope on grid cell `i` (between nodes `i` and `i + 1`).
pub fn cell_slope(path: &HilbertPath, i: usize) -> Vec<Complex64> {
    let dt = path.dt();
    path.node(i + 1).iter().zip(path.node(i)).map(|(b, a)| (b - a) / dt).collect()
}

/// Hurst index from the variogram of component 0 at dyadic lags: the slope of
/// `log E|Δ_h ζ|²` against `log h`, halved.
pub fn estimate_hurst(path: &HilbertPath) -> f64 {
    let x = path.component(0);
    let n = path.n_cells;
    let mut pts = Vec::new();
    let mut lag = 1;
    while lag <= n / 16 {
        let v = (0..=n - lag).map(|i| (x[i + lag] - x[i]).norm_sqr()).sum::<f64>() / (n - lag + 1) as f64;
        pts.push(((lag as f64).ln(), v.ln()));
        lag *= 2;
    }
    let k = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    0.5 * sxy / sxx
}

const MAGIC: &[u8; 8] = b"SHFLPATH";
const VERSION: u32 = 1;
const FLAG_COMPLEX: u32 = 1;
const FLAG_PIECEWISE_LINEAR: u32 = 2;

/// Binary dump: magic, version, flags, H (NaN if unknown), T, m, M, stride,
/// then row-major little-endian `f64` values (re, im pairs when complex).
pub fn write_binary(path: &HilbertPath, mut w: impl Write) -> Result<()> {
    let mut flags = 0;
    if path.complex {
        flags |= FLAG_COMPLEX;
    }
    if path.kind == PathKind::PiecewiseLinear {
        flags |= FLAG_PIECEWISE_LINEAR;
    }
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&flags.to_le_bytes())?;
    w.write_all(&path.hurst.unwrap_or(f64::NAN).to_le_bytes())?;
    w.write_all(&path.horizon.to_le_bytes())?;
    w.write_all(&(path.n_cells as u64).to_le_bytes())?;
    w.write_all(&(path.dim as u64).to_le_bytes())?;
    w.write_all(&(path.stride as u64).to_le_bytes())?;
    let mut buf = Vec::with_capacity(path.values.len() * if path.complex { 16 } else { 8 });
    for z in &path.values {
        buf.extend_from_slice(&z.re.to_le_bytes());
        if path.complex {
            buf.extend_from_slice(&z.im.to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_8(r: &mut impl Read) -> Result<[u8; 8]> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(b)
}

pub fn read_binary(mut r: impl Read) -> Result<HilbertPath> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let flags = read_u32(&mut r)?;
    let hurst = f64::from_le_bytes(read_8(&mut r)?);
    let horizon = f64::from_le_bytes(read_8(&mut r)?);
    let n_cells = u64::from_le_bytes(read_8(&mut r)?) as usize;
    let dim = u64::from_le_bytes(read_8(&mut r)?) as usize;
    let stride = u64::from_le_bytes(read_8(&mut r)?) as usize;
    let complex = flags & FLAG_COMPLEX != 0;
    let count = (n_cells + 1)
        .checked_mul(dim)
        .ok_or_else(|| Error::Format("size overflow".into()))?;
    let mut raw = Vec::new();
    r.read_to_end(&mut raw)?;
    let width = if complex { 16 } else { 8 };
    if raw.len() != count * width {
        return Err(Error::Format(format!(
            "expected {} payload bytes, found {}",
            count * width,
            raw.len()
        )));
    }
    let f = |o: usize| f64::from_le_bytes(raw[o..o + 8].try_into().expect("eight bytes"));
    let values = (0..count)
        .map(|i| {
            if complex {
                Complex64::new(f(16 * i), f(16 * i + 8))
            } else {
                Complex64::new(f(8 * i), 0.0)
            }
        })
        .collect();
    let kind = if flags & FLAG_PIECEWISE_LINEAR != 0 {
        PathKind::PiecewiseLinear
    } else {
        PathKind::Sampled
    };
    if stride == 0 || n_cells == 0 || n_cells % stride != 0 {
        return Err(Error::Format(format!("stride {stride} incompatible with {n_cells} cells")));
    }
    let mut path = HilbertPath::from_values(horizon, n_cells, dim, values, kind)?;
    path.stride = stride;
    path.complex = complex;
    path.hurst = (!hurst.is_nan()).then_some(hurst);
    Ok(path)
}

/// CSV mirror: `t,w1[,w1_im],…` with a header row.
pub fn write_csv(path: &HilbertPath, mut w: impl Write) -> Result<()> {
    let mut header = String::from("t");
    for j in 1..=path.dim {
        if path.complex {
            header.push_str(&format!(",re_w{j},im_w{j}"));
        } else {
            header.push_str(&format!(",w{j}"));
        }
    }
    writeln!(w, "{header}")?;
    for i in 0..=path.n_cells {
        let mut line = format!("{:e}", path.time(i));
        for z in path.node(i) {
            if path.complex {
                line.push_str(&format!(",{:e},{:e}", z.re, z.im));
            } else {
                line.push_str(&format!(",{:e}", z.re));
            }
        }
        writeln!(w, "{line}")?;
    }
    Ok(())
}
