//! Marchaud fractional derivatives and the Zähle form of the Young integral.
//!
//! With `a = T1`, `b = T2` and `0 < α < 1`,
//!
//! ```text
//! D^α_{a+} f[r]      = ( f(r)/(r-a)^α + α ∫_a^r (f(r)-f(q))/(r-q)^{1+α} dq ) / Γ(1-α)
//! D̃^{1-α}_{b-} ζ[r]  = ( (ζ(r)-ζ(b))/(b-r)^{1-α} + (1-α) ∫_r^b (ζ(r)-ζ(q))/(q-r)^{2-α} dq ) / Γ(α)
//! ∫_a^b z dζ         = -∫_a^b D^α_{a+} z[r] · D̃^{1-α}_{b-} ζ[r] dr
//! ```
//!
//! `D̃` is the right derivative with the phase `(-1)^{1-α}` removed; together
//! with the phase `(-1)^α` of the integral it leaves the real sign `-1`, fixed
//! so that `∫ 1 dζ = ζ(b) - ζ(a)`.
//!
//! All paths are read as piecewise linear on their uniform grid. On each cell
//! the singular inner integrals are then computed exactly from power (and, for
//! the semigroup factor, incomplete-gamma) moments. The outer integral uses a
//! tanh-sinh rule per cell; the nested half-density rule gives the error
//! estimate reported with every value.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use statrs::function::beta::beta as beta_fn;
use statrs::function::gamma::{gamma, gamma_li, gamma_ui};

use crate::error::{Error, Result};
use crate::fbm::{holder_seminorm_on, HilbertPath};
use crate::spectral::{SpectralState, WavenumberLadder};

const ZERO: Complex64 = Complex64 { re: 0.0, im: 0.0 };

/// `exp(-x)` underflows to zero beyond this argument.
const EXP_CUTOFF: f64 = 745.0;

#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct FracOrder(f64);

impl FracOrder {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::IncompatibleOrder {
                alpha,
                lower: 0.0,
                upper: 1.0,
            });
        }
        Ok(Self(alpha))
    }

    /// `(1 - β' + β)/2`, the middle of the admissible window.
    pub fn midpoint(beta: f64, beta_prime: f64) -> Result<Self> {
        let order = Self::new(0.5 * (1.0 - beta_prime + beta))?;
        order.check_window(beta, beta_prime)?;
        Ok(order)
    }

    pub fn value(self) -> f64 {
        self.0
    }

    /// Require `1 - β' < α < β`.
    pub fn check_window(self, beta: f64, beta_prime: f64) -> Result<()> {
        let (lower, upper) = (1.0 - beta_prime, beta);
        if self.0 > lower && self.0 < upper {
            Ok(())
        } else {
            Err(Error::IncompatibleOrder {
                alpha: self.0,
                lower,
                upper,
            })
        }
    }
}

/// A quadrature result with its estimated absolute error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Estimate<T> {
    pub value: T,
    pub error: f64,
}

/// Operator-valued path: an `rows × cols` complex matrix at every grid node.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatorPath {
    horizon: f64,
    n_cells: usize,
    rows: usize,
    cols: usize,
    values: Vec<Complex64>,
}

impl OperatorPath {
    /// `values` holds row-major matrices, one per node.
    pub fn new(horizon: f64, n_cells: usize, rows: usize, cols: usize, values: Vec<Complex64>) -> Result<Self> {
        if !(horizon > 0.0) || n_cells == 0 || rows == 0 || cols == 0 {
            return Err(Error::param("operator path", "needs positive horizon, cells and dimensions"));
        }
        let expected = (n_cells + 1) * rows * cols;
        if values.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                found: values.len(),
            });
        }
        Ok(Self {
            horizon,
            n_cells,
            rows,
            cols,
            values,
        })
    }

    pub fn from_fn(
        horizon: f64,
        n_cells: usize,
        rows: usize,
        cols: usize,
        mut f: impl FnMut(f64) -> Vec<Complex64>,
    ) -> Result<Self> {
        let mut values = Vec::with_capacity((n_cells + 1) * rows * cols);
        for i in 0..=n_cells {
            let m = f(horizon * i as f64 / n_cells as f64);
            if m.len() != rows * cols {
                return Err(Error::DimensionMismatch {
                    expected: rows * cols,
                    found: m.len(),
                });
            }
            values.extend(m);
        }
        Self::new(horizon, n_cells, rows, cols, values)
    }

    pub fn constant(horizon: f64, n_cells: usize, rows: usize, cols: usize, matrix: &[Complex64]) -> Result<Self> {
        Self::from_fn(horizon, n_cells, rows, cols, |_| matrix.to_vec())
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn n_cells(&self) -> usize {
        self.n_cells
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.n_cells as f64
    }

    /// Row-major matrix at node `i`.
    pub fn node(&self, i: usize) -> &[Complex64] {
        let w = self.rows * self.cols;
        &self.values[i * w..(i + 1) * w]
    }

    /// `sup ‖Z‖_HS` over nodes `i0..=i1`.
    pub fn sup_norm_on(&self, i0: usize, i1: usize) -> f64 {
        (i0..=i1).map(|i| hs_norm(self.node(i))).fold(0.0, f64::max)
    }

    /// Grid Hölder seminorm of order `beta` in Hilbert–Schmidt norm.
    pub fn holder_seminorm_on(&self, beta: f64, i0: usize, i1: usize) -> f64 {
        let flat = HilbertPath::from_values(
            self.horizon,
            self.n_cells,
            self.rows * self.cols,
            self.values.clone(),
            crate::fbm::PathKind::PiecewiseLinear,
        )
        .expect("consistent operator path");
        holder_seminorm_on(&flat, beta, i0, i1)
    }
}

fn hs_norm(m: &[Complex64]) -> f64 {
    m.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

/// Tanh-sinh nodes on `(0, 1)` with `θ` and `1 - θ` both held to full
/// relative precision. With `c > 0` the rule integrates `e^{-c(1-θ)} F(θ)`,
/// and for `c > 1` the nodes are graded toward `θ = 1` so the exponential
/// boundary layer is resolved.
#[derive(Debug, Clone)]
struct Rule {
    theta: Vec<f64>,
    rho: Vec<f64>,
    fine: Vec<f64>,
    coarse: Vec<f64>,
}

const TS_STEP: f64 = 0.25;
const TS_HALF_WIDTH: i32 = 16;

impl Rule {
    fn new(c: f64) -> Self {
        let mut rule = Rule {
            theta: Vec::new(),
            rho: Vec::new(),
            fine: Vec::new(),
            coarse: Vec::new(),
        };
        let damp = -(-c).exp_m1();
        for i in -TS_HALF_WIDTH..=TS_HALF_WIDTH {
            let t = i as f64 * TS_STEP;
            let u = PI * t.sinh();
            let v = 1.0 / (1.0 + (-u).exp());
            let one_minus_v = 1.0 / (1.0 + u.exp());
            let w = PI * t.cosh() * v * one_minus_v * TS_STEP;
            let (theta, rho, weight) = if c > 1.0 {
                let rho = if v < 0.5 {
                    -(-v * damp).ln_1p() / c
                } else {
                    -(one_minus_v + v * (-c).exp()).ln() / c
                };
                let theta = if c > 700.0 {
                    1.0 + one_minus_v.ln() / c
                } else {
                    (one_minus_v * c.exp_m1()).ln_1p() / c
                };
                (theta, rho, w * damp / c)
            } else {
                (v, one_minus_v, w * (-c * one_minus_v).exp())
            };
            rule.theta.push(theta);
            rule.rho.push(rho);
            rule.fine.push(weight);
            rule.coarse.push(if i % 2 == 0 { 2.0 * weight } else { 0.0 });
        }
        rule
    }

    fn len(&self) -> usize {
        self.theta.len()
    }
}

/// Moments of the kernel on `[x0, x1]` with exponent `a` and damping `κ`:
/// `p0 = ∫ x^{-1-a}`, `qe = ∫ e^{-κx} x^{-1-a}`, `n0 = ∫ (1-e^{-κx}) x^{-1-a}`,
/// `me1 = ∫ e^{-κx} x^{-a}`.
#[derive(Debug, Clone, Copy, Default)]
struct Moments {
    p0: f64,
    qe: f64,
    n0: f64,
    me1: f64,
}

/// `∫_{x0}^{x1} e^{-κx} x^{-a} dx` through incomplete gamma functions.
fn damped_power_moment(kappa: f64, a: f64, x0: f64, x1: f64) -> f64 {
    let s = 1.0 - a;
    if kappa == 0.0 {
        return (x1.powf(s) - x0.powf(s)) / s;
    }
    let (y0, y1) = (kappa * x0, kappa * x1);
    if y0 > EXP_CUTOFF {
        return 0.0;
    }
    let lower = |y: f64| {
        if y <= 0.0 {
            0.0
        } else if y < 1e-3 {
            // Short series keeps full relative accuracy where γ(s, y) ~ y^s / s.
            series_lower_gamma(s, y)
        } else {
            gamma_li(s, y.min(EXP_CUTOFF))
        }
    };
    let upper = |y: f64| if y > EXP_CUTOFF { 0.0 } else { gamma_ui(s, y) };
    let diff = if y0 > 1.0 { upper(y0) - upper(y1) } else { lower(y1) - lower(y0) };
    kappa.powf(-s) * diff
}

fn series_lower_gamma(s: f64, y: f64) -> f64 {
    if y == 0.0 {
        return 0.0;
    }
    // γ(s, y) = y^s Σ (-y)^k / (k! (s + k))
    let mut term = 1.0;
    let mut sum = 1.0 / s;
    for k in 1..12 {
        term *= -y / k as f64;
        sum += term / (s + k as f64);
    }
    y.powf(s) * sum
}

fn cell_moments(kappa: f64, a: f64, x0: f64, x1: f64) -> Moments {
    let pw = |x: f64| if x == 0.0 { 0.0 } else { x.powf(-a) };
    let p0 = if x0 == 0.0 { f64::INFINITY } else { (pw(x0) - pw(x1)) / a };
    if kappa == 0.0 {
        return Moments {
            p0,
            qe: p0,
            n0: 0.0,
            me1: damped_power_moment(0.0, a, x0, x1),
        };
    }
    let me1 = damped_power_moment(kappa, a, x0, x1);
    let one_minus = |x: f64| -(-kappa * x).exp_m1();
    let boundary = |x: f64| if x == 0.0 { 0.0 } else { one_minus(x) * x.powf(-a) };
    let n0 = if kappa * x0 > EXP_CUTOFF {
        p0
    } else {
        (boundary(x0) - boundary(x1)) / a + kappa / a * me1
    };
    let qe = if x0 == 0.0 { f64::INFINITY } else { (p0 - n0).max(0.0) };
    Moments { p0, qe, n0, me1 }
}

/// Kernel moments for a single node offset: the own cell `[0, off·h]` and the
/// cells at distance `d = 1..=n_far`, i.e. `[(d-1+off)h, (d+off)h]`.
#[derive(Debug, Clone)]
struct OffsetKernel {
    own: Moments,
    cells: Vec<Moments>,
}

impl OffsetKernel {
    fn new(kappa: f64, a: f64, h: f64, off: f64, n_far: usize) -> Self {
        let own = cell_moments(kappa, a, 0.0, off * h);
        let mut cells = Vec::with_capacity(n_far);
        let mut tail = false;
        for d in 1..=n_far {
            let x0 = (d as f64 - 1.0 + off) * h;
            let x1 = (d as f64 + off) * h;
            if tail || kappa * x0 > EXP_CUTOFF {
                tail = true;
                let p0 = (x0.powf(-a) - x1.powf(-a)) / a;
                cells.push(Moments {
                    p0,
                    qe: 0.0,
                    n0: p0,
                    me1: 0.0,
                });
            } else {
                cells.push(cell_moments(kappa, a, x0, x1));
            }
        }
        Self { own, cells }
    }
}

/// Multi-channel piecewise-linear data on nodes `0..=n` with spacing `h`.
struct Channels {
    n: usize,
    h: f64,
    dim: usize,
    vals: Vec<Complex64>,
    slopes: Vec<Complex64>,
}

impl Channels {
    fn new(n: usize, h: f64, dim: usize, vals: Vec<Complex64>) -> Self {
        debug_assert_eq!(vals.len(), (n + 1) * dim);
        let mut slopes = Vec::with_capacity(n * dim);
        for k in 0..n {
            for c in 0..dim {
                slopes.push((vals[(k + 1) * dim + c] - vals[k * dim + c]) / h);
            }
        }
        Self {
            n,
            h,
            dim,
            vals,
            slopes,
        }
    }

    fn from_path(path: &HilbertPath, i0: usize, i1: usize) -> Self {
        let d = path.dim();
        let vals = path.values()[i0 * d..(i1 + 1) * d].to_vec();
        Self::new(i1 - i0, path.dt(), d, vals)
    }

    fn val(&self, i: usize, c: usize) -> Complex64 {
        self.vals[i * self.dim + c]
    }

    fn slope(&self, k: usize, c: usize) -> Complex64 {
        self.slopes[k * self.dim + c]
    }

    /// `Γ(1-α) · D^α_{0+}(E f)[r] / E(r)` at `r = (k + θ)h` for every channel,
    /// where `E(q) = e^{-κ(t-q)}` and `kern` holds the moments for `θ`.
    fn left_bracket(&self, alpha: f64, k: usize, theta: f64, kern: &OffsetKernel, out: &mut [Complex64]) {
        let h = self.h;
        let r_minus_a = (k as f64 + theta) * h;
        let boundary_weight = r_minus_a.powf(-alpha);
        for c in 0..self.dim {
            let sk = self.slope(k, c);
            let fr = self.val(k, c) + sk * (theta * h);
            let mut acc = sk * kern.own.me1 + fr * kern.own.n0;
            for j in 0..k {
                let d = k - j;
                let m = &kern.cells[d - 1];
                let sj = self.slope(j, c);
                let gap = (self.val(k, c) - self.val(j + 1, c)) - sj * (h * (d - 1) as f64) + (sk - sj) * (theta * h);
                acc += gap * m.qe + fr * m.n0 + sj * m.me1;
            }
            out[c] = fr * boundary_weight + acc * alpha;
        }
    }

    /// `Γ(α) · D̃^{1-α}_{b-} f[r]` at `r = (k + 1 - ρ)h`, `b = nh`, every channel.
    fn right_bracket(&self, alpha: f64, k: usize, rho: f64, kern: &OffsetKernel, out: &mut [Complex64]) {
        let h = self.h;
        let order = 1.0 - alpha;
        let b_minus_r = ((self.n - k - 1) as f64 + rho) * h;
        let boundary_weight = b_minus_r.powf(-order);
        for c in 0..self.dim {
            let sk = self.slope(k, c);
            let head = self.val(k + 1, c);
            let fr_minus_fb = (head - self.val(self.n, c)) - sk * (rho * h);
            let mut acc = -sk * kern.own.me1;
            for j in k + 1..self.n {
                let d = j - k;
                let m = &kern.cells[d - 1];
                let sj = self.slope(j, c);
                let gap = (head - self.val(j, c)) + sj * (h * (d - 1) as f64) + (sj - sk) * (rho * h);
                acc += gap * m.p0 - sj * m.me1;
            }
            out[c] = fr_minus_fb * boundary_weight + acc * order;
        }
    }
}

fn node_index(path_dt: f64, n_cells: usize, t: f64, name: &'static str) -> Result<usize> {
    let x = t / path_dt;
    let i = x.round();
    if (x - i).abs() > 1e-9 * x.abs().max(1.0) || i < 0.0 || i as usize > n_cells {
        return Err(Error::param(name, format!("{t} is not a grid node")));
    }
    Ok(i as usize)
}

/// `D^α_{T1+} f[r]`, every component of `f`.
///
/// `t1` must be a grid node and `t1 < r ≤ horizon`.
pub fn frac_deriv_left(f: &HilbertPath, alpha: FracOrder, t1: f64, r: f64) -> Result<Vec<Complex64>> {
    let i0 = node_index(f.dt(), f.n_cells(), t1, "t1")?;
    if !(r > t1 && r <= f.horizon() * (1.0 + 1e-14)) {
        return Err(Error::OutsideInterval {
            point: r,
            lower: t1,
            upper: f.horizon(),
        });
    }
    let h = f.dt();
    let x = (r - t1) / h;
    let k = (x.ceil() as usize).saturating_sub(1).min(f.n_cells() - i0 - 1);
    let theta = ((r - t1) / h - k as f64).clamp(0.0, 1.0);
    let ch = Channels::from_path(f, i0, i0 + k + 1);
    let a = alpha.value();
    let kern = OffsetKernel::new(0.0, a, h, theta, k);
    let mut out = vec![ZERO; f.dim()];
    ch.left_bracket(a, k, theta, &kern, &mut out);
    let g = gamma(1.0 - a);
    Ok(out.into_iter().map(|z| z / g).collect())
}

/// `D̃^{1-α}_{T2-} ω_{T2-}[r]` (order `1 - α`, phase removed), every component.
///
/// `t2` must be a grid node and `0 ≤ r < t2`.
pub fn frac_deriv_right(omega: &HilbertPath, alpha: FracOrder, r: f64, t2: f64) -> Result<Vec<Complex64>> {
    let i1 = node_index(omega.dt(), omega.n_cells(), t2, "t2")?;
    if !(r >= 0.0 && r < t2) {
        return Err(Error::OutsideInterval {
            point: r,
            lower: 0.0,
            upper: t2,
        });
    }
    let h = omega.dt();
    let x = r / h;
    let k = (x.floor() as usize).min(i1 - 1);
    let rho = (k as f64 + 1.0 - x).clamp(0.0, 1.0);
    let ch = Channels::from_path(omega, k, i1);
    let a = alpha.value();
    let kern = OffsetKernel::new(0.0, 1.0 - a, h, rho, ch.n);
    let mut out = vec![ZERO; omega.dim()];
    ch.right_bracket(a, 0, rho, &kern, &mut out);
    let g = gamma(a);
    Ok(out.into_iter().map(|z| z / g).collect())
}

/// The constant `β' / ((α + β' - 1) Γ(α))` in
/// `‖D̃^{1-α}_{t-} ω_{t-}[r]‖ ≤ c |||ω|||_{β'} (t - r)^{α+β'-1}`.
pub fn right_derivative_constant(alpha: FracOrder, beta_prime: f64) -> f64 {
    let a = alpha.value();
    beta_prime / ((a + beta_prime - 1.0) * gamma(a))
}

/// Constant of the operator-integral bound
/// `‖∫ Z dω‖ ≤ c ‖Z‖_{C^β} |||ω|||_{β'} (T2 - T1)^{β'}`, obtained by
/// integrating the pointwise bounds of both fractional derivatives.
pub fn young_bound_constant(alpha: FracOrder, beta: f64, beta_prime: f64, length: f64) -> f64 {
    let a = alpha.value();
    let c_er = right_derivative_constant(alpha, beta_prime);
    let b1 = beta_fn(1.0 - a, a + beta_prime);
    let b2 = a * beta_fn(1.0 + beta - a, a + beta_prime) * length.powf(beta) / (beta - a);
    c_er / gamma(1.0 - a) * b1.max(b2)
}

/// Scalar Young integral `∫_0^T z dζ` over the whole horizon.
pub fn young_integral_scalar(z: &HilbertPath, zeta: &HilbertPath, alpha: FracOrder) -> Result<Estimate<f64>> {
    young_integral_scalar_on(z, zeta, alpha, 0.0, z.horizon())
}

/// Scalar Young integral `∫_{t1}^{t2} z dζ`; both ends must be grid nodes.
pub fn young_integral_scalar_on(
    z: &HilbertPath,
    zeta: &HilbertPath,
    alpha: FracOrder,
    t1: f64,
    t2: f64,
) -> Result<Estimate<f64>> {
    if z.dim() != 1 || zeta.dim() != 1 {
        return Err(Error::param("dimension", "scalar integral needs one-dimensional paths"));
    }
    if z.is_complex() || zeta.is_complex() {
        return Err(Error::param("path", "scalar integral needs real-valued paths"));
    }
    let op = OperatorPath::new(z.horizon(), z.n_cells(), 1, 1, z.values().to_vec())?;
    let est = young_integral_operator_on(&op, zeta, alpha, t1, t2)?;
    Ok(Estimate {
        value: est.value[0].re,
        error: est.error,
    })
}

fn check_grids(op_horizon: f64, op_cells: usize, path: &HilbertPath) -> Result<()> {
    if op_cells != path.n_cells() || (op_horizon - path.horizon()).abs() > 1e-12 * path.horizon() {
        return Err(Error::param("grid", "integrand and integrator must share a grid"));
    }
    Ok(())
}

fn check_order_against_noise(alpha: FracOrder, omega: &HilbertPath) -> Result<()> {
    if let Some(h) = omega.hurst() {
        if alpha.value() <= 1.0 - h {
            return Err(Error::IncompatibleOrder {
                alpha: alpha.value(),
                lower: 1.0 - h,
                upper: 1.0,
            });
        }
    }
    Ok(())
}

/// `∫_0^T Z dω` over the whole horizon.
pub fn young_integral_operator(z: &OperatorPath, omega: &HilbertPath, alpha: FracOrder) -> Result<Estimate<Vec<Complex64>>> {
    young_integral_operator_on(z, omega, alpha, 0.0, omega.horizon())
}

/// `∫_{t1}^{t2} Z dω`, component `j` being `Σ_i ∫ z_{ji} dω_i`.
pub fn young_integral_operator_on(
    z: &OperatorPath,
    omega: &HilbertPath,
    alpha: FracOrder,
    t1: f64,
    t2: f64,
) -> Result<Estimate<Vec<Complex64>>> {
    check_grids(z.horizon, z.n_cells, omega)?;
    check_order_against_noise(alpha, omega)?;
    if z.cols != omega.dim() {
        return Err(Error::DimensionMismatch {
            expected: z.cols,
            found: omega.dim(),
        });
    }
    let i0 = node_index(omega.dt(), omega.n_cells(), t1, "t1")?;
    let i1 = node_index(omega.dt(), omega.n_cells(), t2, "t2")?;
    if i1 < i0 {
        return Err(Error::param("t2", "must not precede t1"));
    }
    let rows = z.rows;
    if i1 == i0 {
        return Ok(Estimate {
            value: vec![ZERO; rows],
            error: 0.0,
        });
    }
    let w = z.rows * z.cols;
    let zc = Channels::new(i1 - i0, z.dt(), w, z.values[i0 * w..(i1 + 1) * w].to_vec());
    let wc = Channels::from_path(omega, i0, i1);
    let weights = vec![1.0; i1 - i0];
    let (fine, coarse) = pair_integral(&zc, &wc, alpha.value(), 0.0, &weights, rows, z.cols, &Rule::new(0.0));
    let error = fine.iter().zip(&coarse).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>().sqrt();
    Ok(Estimate { value: fine, error })
}

/// `-Σ_k cell_weight[k] ∫_cell E-bracketed D^α z · D̃ ω`, returned for the
/// fine and the nested coarse rule. `cell_weight[k]` multiplies the left
/// bracket on cell `k` (the semigroup factor at the cell's right end); cells
/// with zero weight are skipped.
#[allow(clippy::too_many_arguments)]
fn pair_integral(
    zc: &Channels,
    wc: &Channels,
    alpha: f64,
    kappa: f64,
    cell_weight: &[f64],
    rows: usize,
    cols: usize,
    rule: &Rule,
) -> (Vec<Complex64>, Vec<Complex64>) {
    let n = zc.n;
    let h = zc.h;
    let first = cell_weight.iter().position(|w| *w != 0.0).unwrap_or(n);
    let mut fine = vec![ZERO; rows];
    let mut coarse = vec![ZERO; rows];
    if first == n {
        return (fine, coarse);
    }
    let g_left = gamma(1.0 - alpha);
    let g_right = gamma(alpha);
    let mut left = vec![ZERO; rows * cols];
    let mut right = vec![ZERO; cols];
    for q in 0..rule.len() {
        let (theta, rho) = (rule.theta[q], rule.rho[q]);
        let lk = OffsetKernel::new(kappa, alpha, h, theta, n);
        let rk = OffsetKernel::new(0.0, 1.0 - alpha, h, rho, n - first);
        let scale = -h / (g_left * g_right);
        for k in first..n {
            if cell_weight[k] == 0.0 {
                continue;
            }
            zc.left_bracket(alpha, k, theta, &lk, &mut left);
            wc.right_bracket(alpha, k, rho, &rk, &mut right);
            let cw = cell_weight[k] * scale;
            for j in 0..rows {
                let mut s = ZERO;
                for i in 0..cols {
                    s += left[j * cols + i] * right[i];
                }
                fine[j] += s * (cw * rule.fine[q]);
                coarse[j] += s * (cw * rule.coarse[q]);
            }
        }
    }
    (fine, coarse)
}

/// `∫_0^t S(t - r) G(r) dω(r)` for a piecewise-linear operator path `G`
/// (`N × M`, rows indexed by shells) and noise `ω` (dimension `M`).
///
/// The semigroup factor `e^{-k_n²(t-r)}` is kept exact inside the fractional
/// derivative rather than interpolated.
pub fn semigroup_convolution(
    t: f64,
    g_of_u: &OperatorPath,
    omega: &HilbertPath,
    alpha: FracOrder,
    ladder: &std::sync::Arc<WavenumberLadder>,
) -> Result<Estimate<SpectralState>> {
    let plan = ConvolutionPlan::new(omega, alpha, ladder)?;
    plan.evaluate(t, g_of_u)
}

/// Reusable kernels for repeated semigroup convolutions against one noise
/// path (e.g. at many evaluation times).
pub struct ConvolutionPlan<'a> {
    omega: &'a HilbertPath,
    alpha: f64,
    ladder: std::sync::Arc<WavenumberLadder>,
    rules: Vec<Rule>,
}

impl<'a> ConvolutionPlan<'a> {
    pub fn new(omega: &'a HilbertPath, alpha: FracOrder, ladder: &std::sync::Arc<WavenumberLadder>) -> Result<Self> {
        check_order_against_noise(alpha, omega)?;
        let h = omega.dt();
        let rules = ladder.eigenvalues().map(|kappa| Rule::new(kappa * h)).collect();
        Ok(Self {
            omega,
            alpha: alpha.value(),
            ladder: std::sync::Arc::clone(ladder),
            rules,
        })
    }

    pub fn evaluate(&self, t: f64, g_of_u: &OperatorPath) -> Result<Estimate<SpectralState>> {
        let omega = self.omega;
        check_grids(g_of_u.horizon, g_of_u.n_cells, omega)?;
        let n_shells = self.ladder.n_shells();
        if g_of_u.rows != n_shells || g_of_u.cols != omega.dim() {
            return Err(Error::DimensionMismatch {
                expected: n_shells * omega.dim(),
                found: g_of_u.rows * g_of_u.cols,
            });
        }
        let i1 = node_index(omega.dt(), omega.n_cells(), t, "t").map_err(|_| Error::OutsideInterval {
            point: t,
            lower: 0.0,
            upper: omega.horizon(),
        })?;
        let mut coeffs = vec![ZERO; n_shells];
        if i1 == 0 {
            return Ok(Estimate {
                value: SpectralState::new(std::sync::Arc::clone(&self.ladder), coeffs)?,
                error: 0.0,
            });
        }
        let h = omega.dt();
        let cols = g_of_u.cols;
        let wc = Channels::from_path(omega, 0, i1);
        let mut err2 = 0.0;
        for (n, kappa) in self.ladder.eigenvalues().enumerate() {
            let w = g_of_u.rows * cols;
            let mut vals = Vec::with_capacity((i1 + 1) * cols);
            for i in 0..=i1 {
                vals.extend_from_slice(&g_of_u.values[i * w + n * cols..i * w + (n + 1) * cols]);
            }
            let zc = Channels::new(i1, h, cols, vals);
            let weights: Vec<f64> = (0..i1)
                .map(|k| {
                    let x = kappa * h * (i1 - k - 1) as f64;
                    if x > EXP_CUTOFF {
                        0.0
                    } else {
                        (-x).exp()
                    }
                })
                .collect();
            let (fine, coarse) = pair_integral(&zc, &wc, self.alpha, kappa, &weights, 1, cols, &self.rules[n]);
            coeffs[n] = fine[0];
            err2 += (fine[0] - coarse[0]).norm_sqr();
        }
        Ok(Estimate {
            value: SpectralState::new(std::sync::Arc::clone(&self.ladder), coeffs)?,
            error: err2.sqrt(),
        })
    }
}

/// `∫_s^t F(r - s, t - r) dr` by the per-cell tanh-sinh rule on `n_cells`
/// equal cells; `F` may have integrable algebraic singularities at both ends.
pub fn singular_quadrature(s: f64, t: f64, n_cells: usize, f: impl Fn(f64, f64) -> f64) -> Estimate<f64> {
    let rule = Rule::new(0.0);
    let h = (t - s) / n_cells as f64;
    let (mut fine, mut coarse) = (0.0, 0.0);
    for k in 0..n_cells {
        for q in 0..rule.len() {
            let from_s = (k as f64 + rule.theta[q]) * h;
            let to_t = ((n_cells - k - 1) as f64 + rule.rho[q]) * h;
            let v = f(from_s, to_t) * h;
            fine += v * rule.fine[q];
            coarse += v * rule.coarse[q];
        }
    }
    Estimate {
        value: fine,
        error: (fine - coarse).abs(),
    }
}

/// `∫_0^t (t - r)^{e} ‖D^α_{0+} f[r]‖ dr` with `t` the grid node `i1`.
pub fn left_derivative_norm_integral(f: &HilbertPath, alpha: FracOrder, i1: usize, exponent: f64) -> Estimate<f64> {
    if i1 == 0 {
        return Estimate { value: 0.0, error: 0.0 };
    }
    let a = alpha.value();
    let h = f.dt();
    let ch = Channels::from_path(f, 0, i1);
    let rule = Rule::new(0.0);
    let g = gamma(1.0 - a);
    let mut out = vec![ZERO; f.dim()];
    let (mut fine, mut coarse) = (0.0, 0.0);
    for q in 0..rule.len() {
        let kern = OffsetKernel::new(0.0, a, h, rule.theta[q], i1);
        for k in 0..i1 {
            ch.left_bracket(a, k, rule.theta[q], &kern, &mut out);
            let norm = out.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt() / g;
            let to_t = ((i1 - k - 1) as f64 + rule.rho[q]) * h;
            let v = norm * to_t.powf(exponent) * h;
            fine += v * rule.fine[q];
            coarse += v * rule.coarse[q];
        }
    }
    Estimate {
        value: fine,
        error: (fine - coarse).abs(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fbm::{sample_fbm_1d, sample_fbm_hilbert, FbmSpec, TraceClassCov};
    use approx::assert_relative_eq;
    use std::sync::Arc;

    fn order(a: f64) -> FracOrder {
        FracOrder::new(a).unwrap()
    }

    #[test]
    fn order_window() {
        assert!(FracOrder::new(0.0).is_err());
        assert!(FracOrder::new(1.0).is_err());
        let a = FracOrder::midpoint(0.55, 0.7).unwrap();
        assert_relative_eq!(a.value(), 0.425);
        assert!(order(0.2).check_window(0.55, 0.7).is_err());
        assert!(order(0.6).check_window(0.55, 0.7).is_err());
        assert!(FracOrder::midpoint(0.2, 0.6).is_err());
    }

    #[test]
    fn left_derivative_closed_forms() {
        let c = HilbertPath::scalar(1.0, 64, |_| 2.5);
        let lin = HilbertPath::scalar(1.0, 64, |t| t);
        for a in [0.3, 0.45] {
            for i in 1..=10 {
                let r = 0.1 * i as f64 - 0.037;
                let got = frac_deriv_left(&c, order(a), 0.0, r).unwrap()[0].re;
                assert_relative_eq!(got, 2.5 * r.powf(-a) / gamma(1.0 - a), max_relative = 1e-12);
                let got = frac_deriv_left(&lin, order(a), 0.0, r).unwrap()[0].re;
                let want = r.powf(1.0 - a) / gamma(2.0 - a);
                assert!((got - want).abs() <= 1e-12, "{got} vs {want}");
            }
        }
        assert!(frac_deriv_left(&lin, order(0.3), 0.5, 0.5).is_err());
        // Shifted lower limit at a grid node.
        let got = frac_deriv_left(&lin, order(0.3), 0.25, 0.75).unwrap()[0].re;
        let want = 0.25 * 0.5f64.powf(-0.3) / gamma(0.7) + 0.5f64.powf(0.7) / gamma(1.7);
        assert_relative_eq!(got, want, max_relative = 1e-12);
    }

    #[test]
    fn right_derivative_closed_forms() {
        let c = HilbertPath::scalar(1.0, 32, |_| -1.0);
        assert!(frac_deriv_right(&c, order(0.4), 0.3, 1.0).unwrap()[0].norm() < 1e-15);
        let lin = HilbertPath::scalar(1.0, 32, |t| t);
        for a in [0.3, 0.6] {
            for r in [0.0, 0.013, 0.5, 0.9] {
                let got = frac_deriv_right(&lin, order(a), r, 1.0).unwrap()[0].re;
                let want = -(1.0 - r).powf(a) / gamma(1.0 + a);
                assert!((got - want).abs() <= 1e-12, "{got} vs {want}");
            }
        }
        assert!(frac_deriv_right(&lin, order(0.4), 1.0, 1.0).is_err());
    }

    #[test]
    fn right_derivative_bound_on_fbm() {
        let p = sample_fbm_1d(&FbmSpec::new(0.75, 1.0, 512, 21).unwrap()).unwrap();
        let (a, bp) = (0.4, 0.7);
        let semi = crate::fbm::holder_seminorm(&p, bp);
        let c = right_derivative_constant(order(a), bp);
        for i in 0..20 {
            let r = (i as f64 + 0.37) / 20.0;
            let d = frac_deriv_right(&p, order(a), r, 1.0).unwrap()[0].norm();
            assert!(d <= c * semi * (1.0 - r).powf(a + bp - 1.0));
        }
    }

    #[test]
    fn young_unit_integrand() {
        let p = sample_fbm_1d(&FbmSpec::new(0.75, 1.0, 256, 4).unwrap()).unwrap();
        let one = HilbertPath::scalar(1.0, 256, |_| 1.0);
        for a in [0.35, 0.5] {
            let est = young_integral_scalar(&one, &p, order(a)).unwrap();
            assert!((est.value - p.node(256)[0].re).abs() < 1e-10, "{}", est.value);
        }
        let est = young_integral_scalar_on(&one, &p, order(0.4), 0.25, 0.75).unwrap();
        assert!((est.value - (p.node(192)[0].re - p.node(64)[0].re)).abs() < 1e-10);
    }

    #[test]
    fn young_matches_riemann_stieltjes() {
        let z = HilbertPath::scalar(1.0, 64, |t| t);
        let zeta = HilbertPath::scalar(1.0, 64, |t| t * t);
        // For piecewise-linear data the Stieltjes integral is exact cell by
        // cell: ∫ z ζ' over each cell with both linear.
        let mut rs = 0.0;
        for k in 0..64 {
            let (z0, z1) = (z.node(k)[0].re, z.node(k + 1)[0].re);
            let slope = (zeta.node(k + 1)[0].re - zeta.node(k)[0].re) * 64.0;
            rs += 0.5 * (z0 + z1) * slope / 64.0;
        }
        let est = young_integral_scalar(&z, &zeta, order(0.4)).unwrap();
        assert!((est.value - rs).abs() < 1e-10 * rs.abs());
        // And the continuum value 2/3 up to interpolation of t².
        assert!((est.value - 2.0 / 3.0).abs() < 1e-4);
    }

    #[test]
    fn young_operator_reductions() {
        let cov = TraceClassCov::geometric(2, 0.5).unwrap();
        let p = sample_fbm_hilbert(&FbmSpec::new(0.7, 1.0, 128, 8).unwrap(), &cov).unwrap();
        let id = [Complex64::new(1.0, 0.0), ZERO, ZERO, Complex64::new(1.0, 0.0)];
        let est = young_integral_operator(&OperatorPath::constant(1.0, 128, 2, 2, &id).unwrap(), &p, order(0.45)).unwrap();
        for j in 0..2 {
            assert!((est.value[j] - p.node(128)[j]).norm() < 1e-10);
        }
        let diag = [Complex64::new(3.0, 0.0), ZERO, ZERO, Complex64::new(-0.5, 0.0)];
        let est = young_integral_operator(&OperatorPath::constant(1.0, 128, 2, 2, &diag).unwrap(), &p, order(0.45)).unwrap();
        assert!((est.value[0] - p.node(128)[0] * 3.0).norm() < 1e-10);
        assert!((est.value[1] + p.node(128)[1] * 0.5).norm() < 1e-10);

        // Rotation integrand against the componentwise scalar assembly.
        let rot = OperatorPath::from_fn(1.0, 128, 2, 2, |t| {
            let (s, c) = (2.0 * t).sin_cos();
            [c, -s, s, c].iter().map(|&x| Complex64::new(x, 0.0)).collect()
        })
        .unwrap();
        let est = young_integral_operator(&rot, &p, order(0.45)).unwrap();
        let comp = |i: usize| HilbertPath::scalar(1.0, 128, |t| p.value_at(t).unwrap()[i].re);
        let entry = |f: fn(f64) -> f64| HilbertPath::scalar(1.0, 128, f);
        let parts = [
            (entry(|t| (2.0 * t).cos()), 0, 0),
            (entry(|t| -(2.0 * t).sin()), 0, 1),
            (entry(|t| (2.0 * t).sin()), 1, 0),
            (entry(|t| (2.0 * t).cos()), 1, 1),
        ];
        let mut want = [0.0; 2];
        for (zji, j, i) in parts.iter() {
            want[*j] += young_integral_scalar(zji, &comp(*i), order(0.45)).unwrap().value;
        }
        for j in 0..2 {
            assert!((est.value[j].re - want[j]).abs() < 1e-10);
        }
    }

    #[test]
    fn additivity_and_alpha_independence() {
        let p = sample_fbm_1d(&FbmSpec::new(0.75, 1.0, 256, 12).unwrap()).unwrap();
        let z = HilbertPath::scalar(1.0, 256, |t| (3.0 * t).cos() + t);
        let whole = young_integral_scalar_on(&z, &p, order(0.4), 0.0, 1.0).unwrap().value;
        let left = young_integral_scalar_on(&z, &p, order(0.4), 0.0, 0.375).unwrap().value;
        let right = young_integral_scalar_on(&z, &p, order(0.4), 0.375, 1.0).unwrap().value;
        assert!((whole - left - right).abs() <= 1e-9 * whole.abs().max(1.0));
        let other = young_integral_scalar(&z, &p, order(0.55)).unwrap().value;
        assert!((whole - other).abs() <= 1e-6);
    }

    #[test]
    fn beta_identity() {
        for (a, b) in [(-0.5, -0.5), (0.3, -0.2)] {
            let (s, t) = (0.2, 1.7);
            let est = singular_quadrature(s, t, 4, |x, y| x.powf(a) * y.powf(b));
            let want = beta_fn(a + 1.0, b + 1.0) * (t - s).powf(a + b + 1.0);
            assert!((est.value - want).abs() <= 1e-8 * want, "{} vs {want}", est.value);
        }
    }

    #[test]
    fn convolution_zero_time_and_closed_form() {
        let ladder = Arc::new(WavenumberLadder::new(1.0, 2.0, 4).unwrap());
        let n_cells = 128;
        let s = 0.7;
        let omega = HilbertPath::from_fn(1.0, n_cells, 4, |t| vec![Complex64::new(s * t, 0.0); 4]).unwrap();
        let g = 1.3;
        let mut m = vec![ZERO; 16];
        m[2 * 4 + 2] = Complex64::new(g, 0.0);
        let gp = OperatorPath::constant(1.0, n_cells, 4, 4, &m).unwrap();
        let zero = semigroup_convolution(0.0, &gp, &omega, order(0.4), &ladder).unwrap();
        assert_eq!(zero.value.norm_v(), 0.0);
        for t in [0.25, 1.0] {
            let est = semigroup_convolution(t, &gp, &omega, order(0.4), &ladder).unwrap();
            let kappa: f64 = 64.0;
            let want = g * s * (-(-kappa * t).exp_m1()) / kappa;
            assert!((est.value.get(3).re - want).abs() <= 1e-9, "{} vs {want}", est.value.get(3).re);
            for n in [1, 2, 4] {
                assert!(est.value.get(n).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn convolution_matches_integration_by_parts() {
        // For constant G, ∫_0^t e^{-κ(t-r)} dω(r) = ω(t) - κ ∫_0^t e^{-κ(t-r)} ω(r) dr,
        // and the Lebesgue integral is exact for piecewise-linear ω.
        let ladder = Arc::new(WavenumberLadder::new(1.0, 2.0, 12).unwrap());
        let n_cells = 256;
        let cov = TraceClassCov::geometric(2, 0.5).unwrap();
        let omega = sample_fbm_hilbert(&FbmSpec::new(0.75, 1.0, n_cells, 5).unwrap(), &cov).unwrap();
        let mut m = vec![ZERO; 12 * 2];
        for n in 0..12 {
            m[n * 2] = Complex64::new(1.0 / (n + 1) as f64, 0.0);
            m[n * 2 + 1] = Complex64::new(0.5, 0.0);
        }
        let gp = OperatorPath::constant(1.0, n_cells, 12, 2, &m).unwrap();
        let i1 = 192;
        let t = omega.time(i1);
        let est = semigroup_convolution(t, &gp, &omega, order(0.45), &ladder).unwrap();
        let h = omega.dt();
        for (n, kappa) in ladder.eigenvalues().enumerate() {
            let mut want = ZERO;
            for i in 0..2 {
                // ∫ over each cell of e^{-κ(t-r)} times the linear interpolant.
                let mut lebesgue = ZERO;
                for k in 0..i1 {
                    let (w0, w1) = (omega.node(k)[i], omega.node(k + 1)[i]);
                    let c = kappa * h;
                    let e1 = (-kappa * (t - omega.time(k + 1))).exp();
                    // ∫_0^1 e^{-c(1-θ)} ((1-θ) w0 + θ w1) h dθ
                    let (i0w, i1w) = if c < 1e-3 {
                        (1.0 - c / 2.0 + c * c / 6.0, 0.5 - c / 3.0 + c * c / 8.0)
                    } else {
                        let em = -(-c).exp_m1();
                        (em / c, (c - em) / (c * c))
                    };
                    // ∫ e^{-cρ} dρ = i0w, ∫ ρ e^{-cρ} dρ = (1 - e^{-c} - c e^{-c})/c²
                    let rho_mom = if c < 1e-3 {
                        0.5 - c / 3.0
                    } else {
                        (1.0 - (-c).exp() - c * (-c).exp()) / (c * c)
                    };
                    let _ = i1w;
                    lebesgue += (w1 * (i0w - rho_mom) + w0 * rho_mom) * (e1 * h);
                }
                want += m[n * 2 + i] * (omega.node(i1)[i] - lebesgue * kappa);
            }
            let got = est.value.get(n as i64 + 1);
            assert!((got - want).norm() <= 1e-8, "mode {n}: {got} vs {want}");
        }
    }

    #[test]
    fn operator_bound_holds_on_random_pairs() {
        let (a, b, bp) = (0.45, 0.6, 0.7);
        for seed in 0..10u64 {
            let omega = sample_fbm_1d(&FbmSpec::new(0.8, 1.0, 128, 100 + seed).unwrap()).unwrap();
            let f = 1.0 + seed as f64;
            let z = OperatorPath::from_fn(1.0, 128, 1, 1, |t| vec![Complex64::new((f * t).sin() + 0.5, 0.0)]).unwrap();
            let est = young_integral_operator(&z, &omega, order(a)).unwrap();
            let cz = z.sup_norm_on(0, 128) + z.holder_seminorm_on(b, 0, 128);
            let rhs = young_bound_constant(order(a), b, bp, 1.0) * cz * crate::fbm::holder_seminorm(&omega, bp);
            assert!(est.value[0].norm() <= rhs);
        }
    }
}
