//! Galerkin time stepping under piecewise-linear noise, the mild and weak
//! residuals, and numerical audits of the a priori estimates.
//!
//! The truncated system is
//!
//! ```text
//! du = (A u + B(u, u)) dt + G(u) ω'(t) dt,    A = -diag(k_n²)
//! ```
//!
//! advanced by exponential Euler, `u⁺ = S(dt) u + φ₁(dt) (B(u, u) + G(u) ω')`
//! with `φ₁(dt) = (1 - e^{-k² dt}) / k²`, or by the IMEX variant
//! `u⁺ = (u + dt F) / (1 + k² dt)`. The slope `ω'` is constant on every step
//! because steps never straddle a breakpoint of the noise.

use std::collections::BTreeMap;
use std::io::Write;
use std::sync::Arc;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::diffusion::DiffusionSpec;
use crate::error::{Error, Result};
use crate::fbm::{holder_seminorm, piecewise_linear_restrict, HilbertPath, PathKind};
use crate::frac::{left_derivative_norm_integral, right_derivative_constant, ConvolutionPlan, FracOrder, OperatorPath};
use crate::shell::{apply_b, ShellCoefficients};
use crate::spectral::{weighted_norm, SpectralState, WavenumberLadder};

const ZERO: Complex64 = Complex64 { re: 0.0, im: 0.0 };

/// Gauss-Legendre nodes and weights on `[-1, 1]`, positive half.
const GL_NODES: [f64; 4] = [
    0.183_434_642_495_649_8,
    0.525_532_409_916_329_0,
    0.796_666_477_413_626_7,
    0.960_289_856_497_536_3,
];
const GL_WEIGHTS: [f64; 4] = [
    0.362_683_783_378_362_0,
    0.313_706_645_877_887_3,
    0.222_381_034_453_374_5,
    0.101_228_536_290_376_3,
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    #[default]
    ExponentialEuler,
    Imex,
}

impl std::str::FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "exponential_euler" | "ee" => Ok(Scheme::ExponentialEuler),
            "imex" => Ok(Scheme::Imex),
            other => Err(Error::param("scheme", format!("unknown scheme `{other}`"))),
        }
    }
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Scheme::ExponentialEuler => "exponential_euler",
            Scheme::Imex => "imex",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub n_shells: usize,
    pub dt: f64,
    pub horizon: f64,
    pub hurst: f64,
    pub beta_prime: f64,
    pub beta_hat: f64,
    pub delta: f64,
    pub alpha: FracOrder,
    pub scheme: Scheme,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            n_shells: 16,
            dt: 1e-3,
            horizon: 1.0,
            hurst: 0.75,
            beta_prime: 0.7,
            beta_hat: 0.55,
            delta: 0.75,
            alpha: FracOrder::midpoint(0.55, 0.7).expect("default window is valid"),
            scheme: Scheme::ExponentialEuler,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_shells == 0 {
            return Err(Error::param("n_shells", "must be positive"));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::param("dt", "must be positive"));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::param("horizon", "must be positive"));
        }
        if !(self.hurst > 0.5 && self.hurst < 1.0) {
            return Err(Error::param("hurst", "must lie in (1/2, 1)"));
        }
        if !(self.beta_prime > 0.5 && self.beta_prime < self.hurst) {
            return Err(Error::param("beta_prime", "must lie in (1/2, hurst)"));
        }
        if !(self.beta_hat > 0.5 && self.beta_hat < self.beta_prime) {
            return Err(Error::param("beta_hat", "must lie in (1/2, beta_prime)"));
        }
        if !(self.delta > self.beta_hat && self.delta < 1.0) {
            return Err(Error::param("delta", "must lie in (beta_hat, 1)"));
        }
        self.alpha
            .check_window(self.beta_hat, self.beta_prime)
            .map_err(|_| Error::param("alpha", "must lie in (1 - beta_prime, beta_hat)"))?;
        self.n_steps().map(|_| ())
    }

    pub fn n_steps(&self) -> Result<usize> {
        let x = self.horizon / self.dt;
        let n = x.round();
        if n < 1.0 || (x - n).abs() > 1e-9 * x {
            return Err(Error::param("dt", "must divide the horizon"));
        }
        Ok(n as usize)
    }

    pub fn with_dt(self, dt: f64) -> Self {
        Self { dt, ..self }
    }

    pub fn with_scheme(self, scheme: Scheme) -> Self {
        Self { scheme, ..self }
    }
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<SpectralState>,
    /// The driving path on the time grid of the trajectory.
    pub noise: HilbertPath,
    /// Steps per linear segment of the noise.
    pub segment_steps: usize,
    pub config: SolverConfig,
}

impl Trajectory {
    pub fn ladder(&self) -> &Arc<WavenumberLadder> {
        self.states[0].ladder()
    }

    pub fn n_steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn dt(&self) -> f64 {
        self.config.dt
    }

    pub fn initial(&self) -> &SpectralState {
        &self.states[0]
    }

    pub fn last(&self) -> &SpectralState {
        self.states.last().expect("trajectory holds the initial state")
    }

    /// `ω'` on step `i`.
    pub fn slope(&self, i: usize) -> Vec<Complex64> {
        let dt = self.noise.dt();
        self.noise
            .node(i + 1)
            .iter()
            .zip(self.noise.node(i))
            .map(|(b, a)| (b - a) / dt)
            .collect()
    }

    /// `sup_t ‖u(t)‖` over the grid.
    pub fn sup_norm(&self) -> f64 {
        self.states.iter().map(|s| s.norm_v()).fold(0.0, f64::max)
    }

    /// Noise restricted to its breakpoints; Hölder seminorms computed on it
    /// are exact for the piecewise-linear path.
    pub fn noise_breakpoints(&self) -> HilbertPath {
        let m = self.segment_steps;
        let segs = self.n_steps() / m;
        let d = self.noise.dim();
        let values = (0..=segs).flat_map(|s| self.noise.node(s * m).to_vec()).collect::<Vec<_>>();
        HilbertPath::from_values(self.noise.horizon(), segs, d, values, PathKind::PiecewiseLinear)
            .expect("breakpoints form a valid path")
    }

    /// Columns `t, re_u1, im_u1, …`.
    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        let n = self.states[0].len();
        let mut header = String::from("t");
        for j in 1..=n {
            header.push_str(&format!(",re_u{j},im_u{j}"));
        }
        writeln!(w, "{header}")?;
        for (t, s) in self.times.iter().zip(&self.states) {
            let mut line = format!("{t}");
            for c in s.coeffs() {
                line.push_str(&format!(",{},{}", c.re, c.im));
            }
            writeln!(w, "{line}")?;
        }
        Ok(())
    }
}

/// Per-mode step factors.
struct Propagator {
    decay: Vec<f64>,
    gain: Vec<f64>,
    implicit: Vec<f64>,
}

impl Propagator {
    fn new(ladder: &WavenumberLadder, dt: f64) -> Self {
        let kappas: Vec<f64> = ladder.eigenvalues().collect();
        Self {
            decay: kappas.iter().map(|k| (-k * dt).exp()).collect(),
            gain: kappas.iter().map(|k| -(-k * dt).exp_m1() / k).collect(),
            implicit: kappas.iter().map(|k| 1.0 / (1.0 + k * dt)).collect(),
        }
    }
}

fn forcing(u: &SpectralState, slope: &[Complex64], spec: &DiffusionSpec, coeffs: &ShellCoefficients) -> Result<SpectralState> {
    let b = apply_b(u, u, coeffs)?;
    if spec.is_off() {
        return Ok(b);
    }
    Ok(&b + &spec.apply(u, slope)?)
}

fn check_inputs(u0: &SpectralState, omega: &HilbertPath, cfg: &SolverConfig, spec: &DiffusionSpec) -> Result<()> {
    cfg.validate()?;
    if omega.kind() != PathKind::PiecewiseLinear {
        return Err(Error::NotPiecewiseLinear);
    }
    if u0.len() != cfg.n_shells {
        return Err(Error::DimensionMismatch {
            expected: cfg.n_shells,
            found: u0.len(),
        });
    }
    if spec.rows() != cfg.n_shells || spec.cols() != omega.dim() {
        return Err(Error::DimensionMismatch {
            expected: cfg.n_shells * omega.dim(),
            found: spec.rows() * spec.cols(),
        });
    }
    if cfg.horizon > omega.horizon() * (1.0 + 1e-12) {
        return Err(Error::OutsideInterval {
            point: cfg.horizon,
            lower: 0.0,
            upper: omega.horizon(),
        });
    }
    Ok(())
}

/// Steps per noise segment, or an error when `dt` does not divide it.
fn steps_per_segment(omega: &HilbertPath, dt: f64) -> Result<usize> {
    let segment = omega.dt() * omega.stride() as f64;
    let x = segment / dt;
    let m = x.round();
    if m < 1.0 || (x - m).abs() > 1e-9 * x {
        return Err(Error::StepMismatch { dt, segment });
    }
    Ok(m as usize)
}

fn resample(omega: &HilbertPath, horizon: f64, n: usize) -> Result<HilbertPath> {
    let mut values = Vec::with_capacity((n + 1) * omega.dim());
    for i in 0..=n {
        let t = (horizon * i as f64 / n as f64).min(omega.horizon());
        values.extend(omega.value_at(t)?);
    }
    HilbertPath::from_values(horizon, n, omega.dim(), values, PathKind::PiecewiseLinear)
}

/// Integrate the Galerkin system on `[0, cfg.horizon]`.
pub fn integrate_galerkin(
    u0: &SpectralState,
    omega: &HilbertPath,
    cfg: &SolverConfig,
    spec: &DiffusionSpec,
    coeffs: &ShellCoefficients,
) -> Result<Trajectory> {
    check_inputs(u0, omega, cfg, spec)?;
    let n = cfg.n_steps()?;
    let per_segment = steps_per_segment(omega, cfg.dt)?;
    let noise = resample(omega, cfg.horizon, n)?;
    let prop = Propagator::new(u0.ladder(), cfg.dt);
    let guard = 1e6 * u0.norm_v().max(1.0);
    let mut traj = Trajectory {
        times: (0..=n).map(|i| cfg.horizon * i as f64 / n as f64).collect(),
        states: Vec::with_capacity(n + 1),
        noise,
        segment_steps: per_segment.min(n),
        config: *cfg,
    };
    // A path shorter than one segment on [0, T] is linear throughout.
    if n % traj.segment_steps != 0 {
        traj.segment_steps = 1;
    }
    traj.states.push(u0.clone());
    for i in 0..n {
        let u = &traj.states[i];
        let f = forcing(u, &traj.slope(i), spec, coeffs)?;
        let next = match cfg.scheme {
            Scheme::ExponentialEuler => u.map_coeffs(|j, c| c * prop.decay[j - 1] + f.coeffs()[j - 1] * prop.gain[j - 1]),
            Scheme::Imex => u.map_coeffs(|j, c| (c + f.coeffs()[j - 1] * cfg.dt) * prop.implicit[j - 1]),
        };
        let norm = next.norm_v();
        if !norm.is_finite() || norm > guard {
            return Err(Error::BlowUp {
                time: traj.times[i + 1],
                norm,
                guard,
            });
        }
        traj.states.push(next);
    }
    Ok(traj)
}

/// `ψ(x) = ∫_0^1 e^{-xσ} σ dσ`.
fn psi(x: f64) -> f64 {
    if x < 0.1 {
        let mut term = 1.0;
        let mut sum = 0.5;
        for k in 1..14 {
            term *= -x / k as f64;
            sum += term / (k + 2) as f64;
        }
        sum
    } else {
        (1.0 - (1.0 + x) * (-x).exp()) / (x * x)
    }
}

/// `∫_0^{t_i} S(t_i - r) B(u(r), u(r)) dr` at every node, with `B(u)`
/// interpolated linearly between nodes and the semigroup kept exact.
fn nonlinear_convolution(traj: &Trajectory, coeffs: &ShellCoefficients) -> Result<Vec<Vec<Complex64>>> {
    let dt = traj.dt();
    let ladder = traj.ladder();
    let kappas: Vec<f64> = ladder.eigenvalues().collect();
    let w: Vec<(f64, f64, f64)> = kappas
        .iter()
        .map(|k| {
            let x = k * dt;
            let phi1 = if x == 0.0 { 1.0 } else { -(-x).exp_m1() / x };
            let p = psi(x);
            ((-x).exp(), dt * p, dt * (phi1 - p))
        })
        .collect();
    let bs = traj
        .states
        .iter()
        .map(|u| apply_b(u, u, coeffs))
        .collect::<Result<Vec<_>>>()?;
    let mut acc = vec![ZERO; kappas.len()];
    let mut out = Vec::with_capacity(traj.states.len());
    out.push(acc.clone());
    for i in 0..traj.n_steps() {
        // With σ = t_{i+1} - r the older node carries weight σ / dt.
        for (j, (decay, w_old, w_new)) in w.iter().enumerate() {
            acc[j] = acc[j] * *decay + bs[i].coeffs()[j] * *w_old + bs[i + 1].coeffs()[j] * *w_new;
        }
        out.push(acc.clone());
    }
    Ok(out)
}

fn operator_path(traj: &Trajectory, spec: &DiffusionSpec) -> Result<OperatorPath> {
    let mut values = Vec::with_capacity(traj.states.len() * spec.rows() * spec.cols());
    for u in &traj.states {
        values.extend(spec.matrix(u)?);
    }
    OperatorPath::new(traj.config.horizon, traj.n_steps(), spec.rows(), spec.cols(), values)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MildResidual {
    pub times: Vec<f64>,
    pub defects: Vec<f64>,
    /// Largest quadrature error estimate of the stochastic convolution.
    pub quadrature_error: f64,
    pub defect: f64,
}

fn sample_nodes(n: usize, samples: usize) -> Vec<usize> {
    let samples = samples.clamp(1, n.max(1));
    let mut nodes: Vec<usize> = (1..=samples).map(|j| (n * j + samples / 2) / samples).collect();
    nodes.dedup();
    nodes
}

/// Defect of the variation-of-constants identity
/// `u(t) = S(t) u0 + ∫ S(t-r) B(u, u) dr + ∫ S(t-r) G(u) dω` at `samples`
/// equispaced nodes, in the norm of `V`.
pub fn mild_residual(traj: &Trajectory, spec: &DiffusionSpec, coeffs: &ShellCoefficients, samples: usize) -> Result<MildResidual> {
    if spec.rows() != traj.initial().len() || spec.cols() != traj.noise.dim() {
        return Err(Error::DimensionMismatch {
            expected: traj.initial().len() * traj.noise.dim(),
            found: spec.rows() * spec.cols(),
        });
    }
    let ladder = Arc::clone(traj.ladder());
    let kappas: Vec<f64> = ladder.eigenvalues().collect();
    let nl = nonlinear_convolution(traj, coeffs)?;
    let ops = if spec.is_off() { None } else { Some(operator_path(traj, spec)?) };
    let plan = ConvolutionPlan::new(&traj.noise, traj.config.alpha, &ladder)?;
    let u0 = traj.initial();
    let mut out = MildResidual {
        times: Vec::new(),
        defects: Vec::new(),
        quadrature_error: 0.0,
        defect: 0.0,
    };
    for i in sample_nodes(traj.n_steps(), samples) {
        let t = traj.times[i];
        let conv = match &ops {
            Some(g) => {
                let est = plan.evaluate(t, g)?;
                out.quadrature_error = out.quadrature_error.max(est.error);
                est.value.into_coeffs()
            }
            None => vec![ZERO; kappas.len()],
        };
        let d: f64 = (0..kappas.len())
            .map(|j| {
                let mild = u0.coeffs()[j] * (-kappas[j] * t).exp() + nl[i][j] + conv[j];
                (traj.states[i].coeffs()[j] - mild).norm_sqr()
            })
            .sum::<f64>()
            .sqrt();
        out.times.push(t);
        out.defects.push(d);
        out.defect = out.defect.max(d);
    }
    Ok(out)
}

/// Largest defect of the weak form tested against `e_1, …, e_{n_test}`:
/// `(u(t), e_j) - (u0, e_j) - ∫ (A u + B(u, u) + G(u) ω', e_j) dr`, with
/// the time integral by the trapezoid rule.
pub fn weak_residual(traj: &Trajectory, spec: &DiffusionSpec, coeffs: &ShellCoefficients, n_test: usize) -> Result<f64> {
    let n_test = n_test.min(traj.initial().len());
    let kappas: Vec<f64> = traj.ladder().eigenvalues().collect();
    let dt = traj.dt();
    let rate = |i: usize, slope: &[Complex64]| -> Result<Vec<Complex64>> {
        let u = &traj.states[i];
        let f = forcing(u, slope, spec, coeffs)?;
        Ok((0..n_test).map(|j| f.coeffs()[j] - u.coeffs()[j] * kappas[j]).collect())
    };
    let mut acc = vec![ZERO; n_test];
    let mut worst: f64 = 0.0;
    for i in 0..traj.n_steps() {
        let s = traj.slope(i);
        let (a, b) = (rate(i, &s)?, rate(i + 1, &s)?);
        for j in 0..n_test {
            acc[j] += (a[j] + b[j]) * (0.5 * dt);
            let d = traj.states[i + 1].coeffs()[j] - traj.initial().coeffs()[j] - acc[j];
            worst = worst.max(d.norm());
        }
    }
    Ok(worst)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub name: String,
    pub times: Vec<f64>,
    pub lhs: Vec<f64>,
    pub rhs: Vec<f64>,
    pub slack: Vec<f64>,
    pub tolerance: f64,
    pub pass: bool,
    pub fitted: BTreeMap<String, f64>,
}

impl AuditReport {
    pub fn new(name: &str, times: Vec<f64>, lhs: Vec<f64>, rhs: Vec<f64>, tolerance: f64) -> Self {
        let slack: Vec<f64> = rhs.iter().zip(&lhs).map(|(r, l)| r - l).collect();
        let pass = slack.iter().all(|s| *s >= -tolerance);
        Self {
            name: name.to_string(),
            times,
            lhs,
            rhs,
            slack,
            tolerance,
            pass,
            fitted: BTreeMap::new(),
        }
    }

    pub fn min_slack(&self) -> f64 {
        self.slack.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports serialize")
    }
}

/// `|v(s)|²` integrals over one step for the interpolant
/// `v(s) = e^{-κs} u + (1 - e^{-κs}) / (1 - e^{-κ dt}) · d`, which solves
/// `v' = -κ v + const` and hits both nodes; `d = u⁺ - e^{-κ dt} u`.
/// Returns `(∫|v|², ∫v)`.
fn step_moments(kappa: f64, dt: f64, u: Complex64, d: Complex64) -> (f64, Complex64) {
    let x = kappa * dt;
    if x < 0.5 {
        let e = -(-x).exp_m1();
        let (mut sq, mut lin) = (0.0, ZERO);
        for (node, weight) in GL_NODES.iter().zip(GL_WEIGHTS) {
            for sign in [-1.0, 1.0] {
                let s = 0.5 * dt * (1.0 + sign * node);
                let g = if e == 0.0 { s / dt } else { -(-kappa * s).exp_m1() / e };
                let v = u * (-kappa * s).exp() + d * g;
                sq += v.norm_sqr() * weight * 0.5 * dt;
                lin += v * (weight * 0.5 * dt);
            }
        }
        return (sq, lin);
    }
    let e = -(-x).exp_m1();
    let i1 = e / kappa;
    let i2 = -(-2.0 * x).exp_m1() / (2.0 * kappa);
    let j = (i1 - i2) / e;
    let k = (dt - 2.0 * i1 + i2) / (e * e);
    let sq = u.norm_sqr() * i2 + 2.0 * (u.conj() * d).re * j + d.norm_sqr() * k;
    let lin = u * i1 + d * ((dt - i1) / e);
    (sq, lin)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyAudit {
    pub report: AuditReport,
    pub majorant_times: Vec<f64>,
    /// `‖u0‖² + 2 c_er |||ω|||_{β'} ∫ (t-r)^{α+β'-1} ‖D^α G*(u)u[r]‖ dr`.
    pub majorant: Vec<f64>,
    /// `‖u0‖² + 2 |∫ (G*(u)u, ω') dr|` with `G*(u)u` interpolated linearly,
    /// the quantity the majorant bounds.
    pub pairing: Vec<f64>,
    pub majorant_holds: bool,
}

/// Energy inequality
/// `‖u(t)‖² + 2 ∫ ‖u‖²_{V_{1/2}} ≤ ‖u0‖² + 2 |∫ (G*(u)u, ω') dr|`.
///
/// Both time integrals are exact on each step for the exponential
/// interpolant through consecutive nodes, with `G` frozen at the left node as
/// in the stepper. The fractional-derivative majorant is evaluated at
/// `majorant_samples` nodes.
pub fn energy_audit(traj: &Trajectory, spec: &DiffusionSpec, tolerance: f64, majorant_samples: usize) -> Result<EnergyAudit> {
    let kappas: Vec<f64> = traj.ladder().eigenvalues().collect();
    let dt = traj.dt();
    let u0_sq = traj.initial().norm_v().powi(2);
    let n = traj.n_steps();
    let mut lhs = Vec::with_capacity(n + 1);
    let mut rhs = Vec::with_capacity(n + 1);
    lhs.push(u0_sq);
    rhs.push(u0_sq);
    let (mut dissipation, mut pairing) = (0.0, ZERO);
    for i in 0..n {
        let (u, next) = (&traj.states[i], &traj.states[i + 1]);
        let push = if spec.is_off() { None } else { Some(spec.apply(u, &traj.slope(i))?) };
        for (j, kappa) in kappas.iter().enumerate() {
            let d = next.coeffs()[j] - u.coeffs()[j] * (-kappa * dt).exp();
            let (sq, lin) = step_moments(*kappa, dt, u.coeffs()[j], d);
            dissipation += kappa * sq;
            if let Some(p) = &push {
                pairing += p.coeffs()[j] * lin.conj();
            }
        }
        lhs.push(next.norm_v().powi(2) + 2.0 * dissipation);
        rhs.push(u0_sq + 2.0 * pairing.norm());
    }
    let mut report = AuditReport::new("energy", traj.times.clone(), lhs, rhs, tolerance);

    // Majorant through the fractional-derivative bound of the pairing.
    let cfg = &traj.config;
    let f_values = traj
        .states
        .iter()
        .map(|u| spec.apply_adjoint(u, u))
        .collect::<Result<Vec<_>>>()?
        .concat();
    let f = HilbertPath::from_values(cfg.horizon, n, spec.cols(), f_values, PathKind::PiecewiseLinear)?;
    let omega_norm = holder_seminorm(&traj.noise_breakpoints(), cfg.beta_prime);
    let c_er = right_derivative_constant(cfg.alpha, cfg.beta_prime);
    let exponent = cfg.alpha.value() + cfg.beta_prime - 1.0;
    let mut pl_pairing = vec![ZERO];
    for i in 0..n {
        let s = traj.slope(i);
        let step: Complex64 = (0..spec.cols())
            .map(|m| (f.node(i)[m] + f.node(i + 1)[m]) * (0.5 * dt) * s[m].conj())
            .sum();
        let last = *pl_pairing.last().expect("seeded");
        pl_pairing.push(last + step);
    }
    let (mut times, mut majorant, mut pair) = (Vec::new(), Vec::new(), Vec::new());
    let mut holds = true;
    if majorant_samples > 0 {
        for i in sample_nodes(n, majorant_samples) {
            let integral = if spec.is_off() {
                0.0
            } else {
                left_derivative_norm_integral(&f, cfg.alpha, i, exponent).value
            };
            let m = u0_sq + 2.0 * c_er * omega_norm * integral;
            let p = u0_sq + 2.0 * pl_pairing[i].norm();
            holds &= m >= p * (1.0 - 1e-12);
            times.push(traj.times[i]);
            majorant.push(m);
            pair.push(p);
        }
    }
    report.fitted.insert("omega_seminorm".into(), omega_norm);
    report.fitted.insert("c_er".into(), c_er);
    Ok(EnergyAudit {
        report,
        majorant_times: times,
        majorant,
        pairing: pair,
        majorant_holds: holds,
    })
}

/// Lags used by the running Hölder seminorm: all of them up to 4096 steps,
/// beyond that every lag up to 64 plus the dyadic ones.
fn seminorm_lags(n: usize) -> Vec<usize> {
    if n <= crate::fbm::EXACT_SEMINORM_LIMIT {
        return (1..=n).collect();
    }
    let mut lags: Vec<usize> = (1..=64).collect();
    let mut l = 128;
    while l <= n {
        lags.push(l);
        l *= 2;
    }
    lags
}

/// `|||u|||_{β, μ, 0, t_i}` at every node `i`.
pub fn running_holder_seminorm(traj: &Trajectory, beta: f64, mu: f64) -> Vec<f64> {
    let ks = traj.ladder().wavenumbers();
    let scaled: Vec<Vec<Complex64>> = traj
        .states
        .iter()
        .map(|s| s.coeffs().iter().zip(ks).map(|(c, k)| c * k.powf(2.0 * mu)).collect())
        .collect();
    let dt = traj.dt();
    let lags = seminorm_lags(traj.n_steps());
    let mut out = Vec::with_capacity(scaled.len());
    let mut best: f64 = 0.0;
    out.push(0.0);
    for q in 1..scaled.len() {
        for &lag in lags.iter().take_while(|l| **l <= q) {
            let d: f64 = scaled[q]
                .iter()
                .zip(&scaled[q - lag])
                .map(|(a, b)| (a - b).norm_sqr())
                .sum::<f64>()
                .sqrt();
            best = best.max(d / (lag as f64 * dt).powf(beta));
        }
        out.push(best);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HolderAudit {
    pub report: AuditReport,
    /// Smallest common constant `c = c̄` for which the bound holds on the grid.
    pub fitted_constant: f64,
}

/// Hölder estimate
/// `|||u|||_{β̂,-δ,0,t} ≤ c̄ t^{δ-β̂} ‖u0‖ + c t^{1-β̂} ‖u‖²_{C,0,t}
///  + c |||ω|||_{β'} t^{β'-β̂} (1 + t^{β̂} |||u|||_{β̂,-δ,0,t})`
/// with a single constant `c = c̄`; passes when the fitted constant does not
/// exceed `fixture_constant`.
pub fn holder_audit(traj: &Trajectory, fixture_constant: f64) -> HolderAudit {
    let cfg = &traj.config;
    let (bh, bp, delta) = (cfg.beta_hat, cfg.beta_prime, cfg.delta);
    let semi = running_holder_seminorm(traj, bh, -delta);
    let u0 = traj.initial().norm_v();
    let omega = holder_seminorm(&traj.noise_breakpoints(), bp);
    let mut sup: f64 = 0.0;
    let mut shape = Vec::with_capacity(semi.len());
    for (i, t) in traj.times.iter().enumerate() {
        sup = sup.max(traj.states[i].norm_v());
        shape.push(if *t == 0.0 {
            0.0
        } else {
            t.powf(delta - bh) * u0 + t.powf(1.0 - bh) * sup * sup + omega * t.powf(bp - bh) * (1.0 + t.powf(bh) * semi[i])
        });
    }
    let fitted = semi
        .iter()
        .zip(&shape)
        .filter(|(_, r)| **r > 0.0)
        .map(|(l, r)| l / r)
        .fold(0.0, f64::max);
    let rhs = shape.iter().map(|r| fixture_constant * r).collect();
    let mut report = AuditReport::new("holder", traj.times.clone(), semi, rhs, 0.0);
    report.fitted.insert("c".into(), fitted);
    report.fitted.insert("omega_seminorm".into(), omega);
    HolderAudit {
        report,
        fitted_constant: fitted,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub times: Vec<f64>,
    pub y1: Vec<f64>,
    pub y2: Vec<f64>,
}

/// The two roots `Y_{1,2} = (1 ∓ √(1 - 4ab)) / (2a)` of `Y = b + a Y²` on
/// `n_points` equispaced times of `[0, t1]`.
///
/// `Y_1` is evaluated as `2b / (1 + √(1 - 4ab))`, which is exact as `a → 0`
/// (where `Y_1 → b` and `Y_2 → ∞`) and makes `Y_1 ≤ 2b` explicit.
pub fn apriori_envelope(a: impl Fn(f64) -> f64, b: impl Fn(f64) -> f64, t1: f64, n_points: usize) -> Result<Envelope> {
    if !(t1 >= 0.0) || n_points == 0 {
        return Err(Error::param("t1", "needs a nonnegative end time and at least one point"));
    }
    let mut env = Envelope {
        times: Vec::with_capacity(n_points),
        y1: Vec::with_capacity(n_points),
        y2: Vec::with_capacity(n_points),
    };
    for i in 0..n_points {
        let t = if n_points == 1 { t1 } else { t1 * i as f64 / (n_points - 1) as f64 };
        let (at, bt) = (a(t), b(t));
        if !(at >= 0.0 && bt >= 0.0) {
            return Err(Error::param("a, b", format!("must be nonnegative, got a = {at}, b = {bt} at t = {t}")));
        }
        let product = 4.0 * at * bt;
        if product >= 1.0 {
            return Err(Error::EnvelopeViolation { time: t, product });
        }
        let root = (1.0 - product).sqrt();
        let y1 = 2.0 * bt / (1.0 + root);
        let y2 = if at == 0.0 { f64::INFINITY } else { (1.0 + root) / (2.0 * at) };
        if y1 > 2.0 * bt {
            return Err(Error::param("envelope", format!("Y1 exceeds 2b at t = {t}")));
        }
        env.times.push(t);
        env.y1.push(y1);
        env.y2.push(y2);
    }
    Ok(env)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntervalConstants {
    /// The generic constant of the energy and Hölder estimates.
    pub c: f64,
    /// The constant in front of `‖u0‖` in the Hölder estimate.
    pub c_bar: f64,
    pub k_hat: f64,
    pub k: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntervalBound {
    pub start: f64,
    pub end: f64,
    pub holder_bound: f64,
    pub sup_bound: f64,
}

/// The number of intervals grows like `e^K`; larger partitions are refused.
pub const MAX_INTERVALS: usize = 1_000_000;

/// Partition of `[0, 1]` into `I_1 = [0, 1/K̂]`,
/// `I_i = [t̂_{i-1}, t̂_{i-1} + 1/(K i)]`, the last one clipped at 1, with
/// the bounds `(K i)^{β̂}` on the Hölder seminorm and
/// `3c (K i)^{1-β'} / (1 - β')` on the sup norm (`K̂` for `i = 1`).
pub fn interval_scheme(
    x0: f64,
    u0_norm: f64,
    consts: &IntervalConstants,
    beta_hat: f64,
    beta_prime: f64,
) -> Result<Vec<IntervalBound>> {
    let floor = 1f64.max(consts.c_bar * u0_norm).max(u0_norm);
    if !(x0 >= floor) {
        return Err(Error::param("x0", format!("must be at least {floor}")));
    }
    if !(consts.k_hat > 1.0 && consts.k >= consts.k_hat && consts.k.is_finite()) {
        return Err(Error::param("k", "need K >= K_hat > 1"));
    }
    if !(beta_prime > 0.5 && beta_prime < 1.0 && beta_hat > 0.5 && beta_hat < beta_prime) {
        return Err(Error::param("beta_hat", "need 1/2 < beta_hat < beta_prime < 1"));
    }
    let mut out = Vec::new();
    let mut start = 0.0;
    let mut i = 1usize;
    while start < 1.0 {
        if i > MAX_INTERVALS {
            return Err(Error::param("k", format!("the partition needs more than {MAX_INTERVALS} intervals")));
        }
        let scale = if i == 1 { consts.k_hat } else { consts.k * i as f64 };
        let end = (start + 1.0 / scale).min(1.0);
        out.push(IntervalBound {
            start,
            end,
            holder_bound: scale.powf(beta_hat),
            sup_bound: 3.0 * consts.c * scale.powf(1.0 - beta_prime) / (1.0 - beta_prime),
        });
        start = end;
        i += 1;
    }
    Ok(out)
}

/// Smallest `K̂`, then `K`, among powers of two that satisfy the smallness
/// conditions of the interval construction for the given constants.
pub fn admissible_interval_constants(
    x0: f64,
    c: f64,
    c_bar: f64,
    beta_hat: f64,
    beta_prime: f64,
    delta: f64,
) -> Result<IntervalConstants> {
    let (bh, bp) = (beta_hat, beta_prime);
    let d = |t: f64, x: f64| c * t.powf(bp) + 2.0 * c.powi(3) * t.powf(1.0 + 2.0 * bp) + 2.0 * c * c * x * t.powf(1.0 + bp);
    let f = |t: f64, x: f64| {
        x * t.powf(delta - bh)
            + c * x * x * t.powf(1.0 - bh)
            + c * c * x * t.powf(1.0 + bp - bh)
            + c.powi(3) * t.powf(1.0 + 2.0 * bp - bh)
            + c * t.powf(bp - bh)
    };
    let h = |t: f64| 4.0 * c.powi(3) * t.powf(1.0 + 2.0 * bp + bh);
    let mut k_hat = 2.0f64;
    loop {
        let t = 1.0 / k_hat;
        let (a, b) = (2.0 * h(t), 2.0 * f(t, x0));
        if d(t, x0) <= 0.5 && b <= 0.5 * k_hat.powf(bh) && 4.0 * a * b < 1.0 && x0 <= c * k_hat.powf(1.0 - bp) / (1.0 - bp) {
            break;
        }
        k_hat *= 2.0;
        if k_hat > 1e300 {
            return Err(Error::param("c", "no admissible K_hat"));
        }
    }
    // For i >= 2 every condition depends on i only through s = K i once
    // x̂_{i-1} is bounded by 4c s^{1-β'}/(1-β'), and each term is a negative
    // power of s; checking s = 2K covers all later intervals.
    let mut k = k_hat;
    loop {
        let s = 2.0 * k;
        let t = 1.0 / s;
        let x_hat = 4.0 * c * s.powf(1.0 - bp) / (1.0 - bp);
        let (a, b) = (2.0 * h(t), 2.0 * f(t, x_hat));
        if d(t, x_hat) <= 0.5 && f(t, x_hat) <= 0.25 * s.powf(bh) && 4.0 * a * b < 1.0 {
            break;
        }
        k *= 2.0;
        if k > 1e300 {
            return Err(Error::param("c", "no admissible K"));
        }
    }
    Ok(IntervalConstants { c, c_bar, k_hat, k })
}

/// `max_t ‖a(t) - b(t)‖_{V_μ}` over the nodes the two grids share; one grid
/// must refine the other by an integer factor.
pub fn trajectory_divergence(a: &Trajectory, b: &Trajectory, mu: f64) -> Result<f64> {
    let (coarse, fine) = if a.n_steps() <= b.n_steps() { (a, b) } else { (b, a) };
    if fine.n_steps() % coarse.n_steps() != 0 || (a.config.horizon - b.config.horizon).abs() > 1e-12 * a.config.horizon {
        return Err(Error::param("grid", "trajectories must live on nested grids"));
    }
    let r = fine.n_steps() / coarse.n_steps();
    let mut worst: f64 = 0.0;
    for i in 0..=coarse.n_steps() {
        let d = &coarse.states[i] - &fine.states[i * r];
        worst = worst.max(weighted_norm(&d, mu));
    }
    Ok(worst)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UniquenessReport {
    /// Exponential Euler against IMEX at `dt`.
    pub scheme_divergence: f64,
    /// Exponential Euler at `dt` against `dt / 2`.
    pub step_divergence: f64,
}

/// Two schemes and two step sizes on one noise path; both divergences
/// should vanish as `dt → 0`.
pub fn uniqueness_probe(
    u0: &SpectralState,
    omega: &HilbertPath,
    cfg: &SolverConfig,
    spec: &DiffusionSpec,
    coeffs: &ShellCoefficients,
) -> Result<UniquenessReport> {
    let ee = cfg.with_scheme(Scheme::ExponentialEuler);
    let (a, b, c) = std::thread::scope(|s| {
        let a = s.spawn(|| integrate_galerkin(u0, omega, &ee, spec, coeffs));
        let b = s.spawn(|| integrate_galerkin(u0, omega, &ee.with_scheme(Scheme::Imex), spec, coeffs));
        let c = s.spawn(|| integrate_galerkin(u0, omega, &ee.with_dt(0.5 * cfg.dt), spec, coeffs));
        (join(a), join(b), join(c))
    });
    let (a, b, c) = (a?, b?, c?);
    Ok(UniquenessReport {
        scheme_divergence: trajectory_divergence(&a, &b, 0.0)?,
        step_divergence: trajectory_divergence(&a, &c, 0.0)?,
    })
}

fn join<T>(h: std::thread::ScopedJoinHandle<'_, T>) -> T {
    h.join().unwrap_or_else(|e| std::panic::resume_unwind(e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementRow {
    pub level: u32,
    /// `sup_t ‖u_ℓ - u‖_{V_{-δ}}` against the solution driven by the full grid path.
    pub diff_minus_delta: f64,
    pub diff_v: f64,
    /// `|||ω_ℓ - ω|||_{β'}`.
    pub omega_seminorm: f64,
    /// `diff_minus_delta / omega_seminorm`.
    pub fitted_c: f64,
    /// `sup_t ‖u_ℓ - u_{ℓ'}‖_{V_{-δ}}` for the next level `ℓ'`.
    pub cauchy_minus_delta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementStudy {
    pub rows: Vec<RefinementRow>,
}

impl RefinementStudy {
    pub fn strictly_decreasing(&self) -> bool {
        self.rows.windows(2).all(|w| w[1].diff_minus_delta < w[0].diff_minus_delta)
    }

    /// `max C / min C` over the rows with a nonzero constant.
    pub fn constant_spread(&self) -> f64 {
        let cs: Vec<f64> = self.rows.iter().map(|r| r.fitted_c).filter(|c| *c > 0.0).collect();
        if cs.is_empty() {
            return 1.0;
        }
        cs.iter().copied().fold(0.0, f64::max) / cs.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "level,diff_minus_delta,diff_v,omega_seminorm,fitted_c,cauchy_minus_delta")?;
        for r in &self.rows {
            let cauchy = r.cauchy_minus_delta.map(|c| c.to_string()).unwrap_or_default();
            writeln!(
                w,
                "{},{},{},{},{},{}",
                r.level, r.diff_minus_delta, r.diff_v, r.omega_seminorm, r.fitted_c, cauchy
            )?;
        }
        Ok(())
    }
}

/// Solve under `piecewise_linear_restrict(ω, ℓ)` for every level and compare
/// with the solution driven by `ω` read as piecewise linear on its own grid.
pub fn noise_refinement_study(
    u0: &SpectralState,
    omega: &HilbertPath,
    levels: &[u32],
    cfg: &SolverConfig,
    spec: &DiffusionSpec,
    coeffs: &ShellCoefficients,
) -> Result<RefinementStudy> {
    if levels.is_empty() {
        return Err(Error::param("levels", "at least one level is required"));
    }
    let mut levels = levels.to_vec();
    levels.sort_unstable();
    levels.dedup();
    let reference_path = if omega.kind() == PathKind::PiecewiseLinear && omega.stride() == 1 {
        omega.clone()
    } else {
        let full = omega.n_cells().trailing_zeros();
        if 1usize << full != omega.n_cells() {
            return Err(Error::IndivisibleLevel {
                level: full,
                n_grid: omega.n_cells(),
            });
        }
        piecewise_linear_restrict(omega, full)?
    };
    let paths = levels
        .iter()
        .map(|l| piecewise_linear_restrict(omega, *l))
        .collect::<Result<Vec<_>>>()?;
    let runs: Vec<Result<Trajectory>> = std::thread::scope(|s| {
        let handles: Vec<_> = std::iter::once(&reference_path)
            .chain(&paths)
            .map(|p| s.spawn(move || integrate_galerkin(u0, p, cfg, spec, coeffs)))
            .collect();
        handles.into_iter().map(join).collect()
    });
    let mut runs = runs.into_iter().collect::<Result<Vec<_>>>()?;
    let reference = runs.remove(0);
    let mut rows = Vec::with_capacity(levels.len());
    for (k, level) in levels.iter().enumerate() {
        let diff_minus_delta = trajectory_divergence(&runs[k], &reference, -cfg.delta)?;
        let diff_v = trajectory_divergence(&runs[k], &reference, 0.0)?;
        let omega_seminorm = holder_seminorm(&paths[k].sub(&reference_path)?, cfg.beta_prime);
        let cauchy_minus_delta = match runs.get(k + 1) {
            Some(next) => Some(trajectory_divergence(&runs[k], next, -cfg.delta)?),
            None => None,
        };
        rows.push(RefinementRow {
            level: *level,
            diff_minus_delta,
            diff_v,
            omega_seminorm,
            fitted_c: if omega_seminorm > 0.0 { diff_minus_delta / omega_seminorm } else { 0.0 },
            cauchy_minus_delta,
        });
    }
    Ok(RefinementStudy { rows })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GalerkinRow {
    pub n_shells: usize,
    /// `sup_t ‖u^{(N)} - u^{(2N)}‖` with `u^{(N)}` padded by zeros.
    pub diff_to_double: f64,
}

/// Galerkin convergence in the number of shells: for every `N`, compare
/// with the solution on `2N` shells driven by the same noise.
pub fn galerkin_study(
    initial: impl Fn(&Arc<WavenumberLadder>) -> SpectralState + Sync,
    ladder: &WavenumberLadder,
    omega: &HilbertPath,
    cfg: &SolverConfig,
    diffusion_for: impl Fn(usize) -> Result<DiffusionSpec> + Sync,
    coeffs: &ShellCoefficients,
    sizes: &[usize],
) -> Result<Vec<GalerkinRow>> {
    let solve = |n: usize| -> Result<Trajectory> {
        let l = Arc::new(ladder.with_shells(n)?);
        let u0 = initial(&l);
        let c = SolverConfig { n_shells: n, ..*cfg };
        integrate_galerkin(&u0, omega, &c, &diffusion_for(n)?, coeffs)
    };
    let pairs: Vec<Result<(Trajectory, Trajectory)>> = std::thread::scope(|s| {
        let handles: Vec<_> = sizes
            .iter()
            .map(|n| {
                let solve = &solve;
                s.spawn(move || Ok((solve(*n)?, solve(2 * n)?)))
            })
            .collect();
        handles.into_iter().map(join).collect()
    });
    let mut rows = Vec::with_capacity(sizes.len());
    for (n, pair) in sizes.iter().zip(pairs) {
        let (small, large) = pair?;
        let mut worst: f64 = 0.0;
        for (a, b) in small.states.iter().zip(&large.states) {
            let d: f64 = (0..b.len())
                .map(|j| (b.coeffs()[j] - a.coeffs().get(j).copied().unwrap_or(ZERO)).norm_sqr())
                .sum::<f64>()
                .sqrt();
            worst = worst.max(d);
        }
        rows.push(GalerkinRow {
            n_shells: *n,
            diff_to_double: worst,
        });
    }
    Ok(rows)
}
