//! Weighted sequence spaces `V_α`, the diagonal operator `Λ = -A` and the
//! analytic semigroup it generates.
//!
//! A state is a truncated complex sequence `u_1, …, u_N` attached to a
//! geometric wavenumber ladder `k_n = k0 · λ^n`. The norm of `V_α` is
//!
//! ```text
//! ‖u‖²_{V_α} = Σ_n k_n^{4α} |u_n|²
//! ```
//!
//! and `Λ^γ` acts diagonally with symbol `k_n^{2γ}`, so `‖Λ^γ u‖ = ‖u‖_{V_γ}`.
//! The viscosity is fixed to one, hence `S(t) = exp(-tΛ)` has symbol
//! `exp(-k_n² t)`.

use std::ops::{Add, Mul, Sub};
use std::sync::Arc;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Geometric ladder `k_n = k0 · λ^n` for shells `n = 1..=N`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WavenumberLadder {
    k0: f64,
    lambda: f64,
    n_shells: usize,
    #[serde(skip)]
    wavenumbers: Vec<f64>,
}

impl WavenumberLadder {
    pub fn new(k0: f64, lambda: f64, n_shells: usize) -> Result<Self> {
        if !(k0 > 0.0 && k0.is_finite()) {
            return Err(Error::param("k0", format!("must be positive, got {k0}")));
        }
        if !(lambda > 1.0 && lambda.is_finite()) {
            return Err(Error::param("lambda", format!("must exceed 1, got {lambda}")));
        }
        if n_shells == 0 {
            return Err(Error::param("n_shells", "at least one shell is required"));
        }
        let wavenumbers = (1..=n_shells as i32).map(|n| k0 * lambda.powi(n)).collect();
        Ok(Self {
            k0,
            lambda,
            n_shells,
            wavenumbers,
        })
    }

    pub fn k0(&self) -> f64 {
        self.k0
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn n_shells(&self) -> usize {
        self.n_shells
    }

    /// `k_n` for any integer shell index, including the padding shells.
    pub fn k(&self, n: i64) -> f64 {
        self.k0 * self.lambda.powi(n as i32)
    }

    /// `k_1, …, k_N`.
    pub fn wavenumbers(&self) -> &[f64] {
        &self.wavenumbers
    }

    /// Diagonal of `Λ`, i.e. `k_n²`.
    pub fn eigenvalues(&self) -> impl Iterator<Item = f64> + '_ {
        self.wavenumbers.iter().map(|k| k * k)
    }

    /// Same ratio and base wavenumber with a different truncation.
    pub fn with_shells(&self, n_shells: usize) -> Result<Self> {
        Self::new(self.k0, self.lambda, n_shells)
    }
}

impl Default for WavenumberLadder {
    fn default() -> Self {
        Self::new(1.0, 2.0, 16).expect("default ladder is valid")
    }
}

/// Exponent `α` of the space `V_α`; may be negative.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct SobolevIndex(pub f64);

impl From<f64> for SobolevIndex {
    fn from(alpha: f64) -> Self {
        SobolevIndex(alpha)
    }
}

/// Truncated shell amplitudes with zero padding `u_{-1} = u_0 = u_{N+1} = u_{N+2} = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralState {
    coeffs: Vec<Complex64>,
    ladder: Arc<WavenumberLadder>,
}

impl SpectralState {
    pub fn new(ladder: Arc<WavenumberLadder>, coeffs: Vec<Complex64>) -> Result<Self> {
        if coeffs.len() != ladder.n_shells() {
            return Err(Error::DimensionMismatch {
                expected: ladder.n_shells(),
                found: coeffs.len(),
            });
        }
        Ok(Self { coeffs, ladder })
    }

    pub fn zeros(ladder: Arc<WavenumberLadder>) -> Self {
        let coeffs = vec![Complex64::new(0.0, 0.0); ladder.n_shells()];
        Self { coeffs, ladder }
    }

    /// The basis vector `e_n` (one-based shell index).
    pub fn unit(ladder: Arc<WavenumberLadder>, n: usize) -> Result<Self> {
        if n == 0 || n > ladder.n_shells() {
            return Err(Error::param(
                "n",
                format!("shell index must lie in 1..={}", ladder.n_shells()),
            ));
        }
        let mut state = Self::zeros(ladder);
        state.coeffs[n - 1] = Complex64::new(1.0, 0.0);
        Ok(state)
    }

    pub fn from_fn(ladder: Arc<WavenumberLadder>, f: impl FnMut(usize) -> Complex64) -> Self {
        let coeffs = (1..=ladder.n_shells()).map(f).collect();
        Self { coeffs, ladder }
    }

    pub fn coeffs(&self) -> &[Complex64] {
        &self.coeffs
    }

    pub fn into_coeffs(self) -> Vec<Complex64> {
        self.coeffs
    }

    pub fn ladder(&self) -> &Arc<WavenumberLadder> {
        &self.ladder
    }

    pub fn len(&self) -> usize {
        self.coeffs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coeffs.is_empty()
    }

    /// `u_n` for a one-based index, zero outside `1..=N`.
    #[inline]
    pub fn get(&self, n: i64) -> Complex64 {
        if n >= 1 && (n as usize) <= self.coeffs.len() {
            self.coeffs[n as usize - 1]
        } else {
            Complex64::new(0.0, 0.0)
        }
    }

    pub fn same_ladder(&self, other: &SpectralState) -> bool {
        Arc::ptr_eq(&self.ladder, &other.ladder) || *self.ladder == *other.ladder
    }

    pub(crate) fn ensure_same_ladder(&self, other: &SpectralState) -> Result<()> {
        if self.same_ladder(other) {
            Ok(())
        } else {
            Err(Error::LadderMismatch)
        }
    }

    pub fn map_coeffs(&self, mut f: impl FnMut(usize, Complex64) -> Complex64) -> Self {
        let coeffs = self
            .coeffs
            .iter()
            .enumerate()
            .map(|(i, &c)| f(i + 1, c))
            .collect();
        Self {
            coeffs,
            ladder: Arc::clone(&self.ladder),
        }
    }

    pub fn scale(&self, factor: f64) -> Self {
        self.map_coeffs(|_, c| c * factor)
    }

    pub fn norm(&self, alpha: impl Into<SobolevIndex>) -> f64 {
        weighted_norm(self, alpha)
    }

    /// Plain `V` norm.
    pub fn norm_v(&self) -> f64 {
        self.coeffs.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.coeffs.iter().all(|c| c.re.is_finite() && c.im.is_finite())
    }
}

impl Add for &SpectralState {
    type Output = SpectralState;

    /// Panics when the ladders differ.
    fn add(self, rhs: &SpectralState) -> SpectralState {
        assert!(self.same_ladder(rhs), "ladder mismatch in state addition");
        self.map_coeffs(|n, c| c + rhs.coeffs[n - 1])
    }
}

impl Sub for &SpectralState {
    type Output = SpectralState;

    /// Panics when the ladders differ.
    fn sub(self, rhs: &SpectralState) -> SpectralState {
        assert!(self.same_ladder(rhs), "ladder mismatch in state subtraction");
        self.map_coeffs(|n, c| c - rhs.coeffs[n - 1])
    }
}

impl Mul<Complex64> for &SpectralState {
    type Output = SpectralState;

    fn mul(self, rhs: Complex64) -> SpectralState {
        self.map_coeffs(|_, c| c * rhs)
    }
}

/// `(Σ k_n^{4α} |u_n|²)^{1/2}`.
pub fn weighted_norm(u: &SpectralState, alpha: impl Into<SobolevIndex>) -> f64 {
    let SobolevIndex(alpha) = alpha.into();
    if alpha == 0.0 {
        return u.norm_v();
    }
    u.coeffs
        .iter()
        .zip(u.ladder.wavenumbers())
        .map(|(c, k)| k.powf(4.0 * alpha) * c.norm_sqr())
        .sum::<f64>()
        .sqrt()
}

/// `Σ k_n^{4α} u_n conj(v_n)`.
pub fn weighted_inner(
    u: &SpectralState,
    v: &SpectralState,
    alpha: impl Into<SobolevIndex>,
) -> Result<Complex64> {
    u.ensure_same_ladder(v)?;
    let SobolevIndex(alpha) = alpha.into();
    Ok(u.coeffs
        .iter()
        .zip(&v.coeffs)
        .zip(u.ladder.wavenumbers())
        .map(|((a, b), k)| a * b.conj() * k.powf(4.0 * alpha))
        .sum())
}

/// `Λ^γ u`, componentwise `k_n^{2γ} u_n`.
pub fn apply_lambda_power(u: &SpectralState, gamma: impl Into<SobolevIndex>) -> SpectralState {
    let SobolevIndex(gamma) = gamma.into();
    let ks = u.ladder.wavenumbers();
    u.map_coeffs(|n, c| c * ks[n - 1].powf(2.0 * gamma))
}

/// `S(t) u`, componentwise `exp(-k_n² t) u_n`.
pub fn semigroup_apply(t: f64, u: &SpectralState) -> Result<SpectralState> {
    if !(t >= 0.0) {
        return Err(Error::NegativeTime(t));
    }
    let ks = u.ladder.wavenumbers();
    Ok(u.map_coeffs(|n, c| c * (-ks[n - 1] * ks[n - 1] * t).exp()))
}

/// Largest gain `max_n k_n^{2ζ} exp(-k_n² t)` of `Λ^ζ S(t)` on the truncation.
pub fn smoothing_gain(ladder: &WavenumberLadder, zeta: f64, t: f64) -> f64 {
    ladder
        .wavenumbers()
        .iter()
        .map(|k| k.powf(2.0 * zeta) * (-k * k * t).exp())
        .fold(0.0, f64::max)
}

/// Largest gain of `S(t) - id` from `V_σ` into `V_θ`:
/// `max_n (1 - exp(-k_n² t)) k_n^{2θ - 2σ}`.
pub fn semigroup_difference_gain(ladder: &WavenumberLadder, sigma: f64, theta: f64, t: f64) -> f64 {
    ladder
        .wavenumbers()
        .iter()
        .map(|k| -(-k * k * t).exp_m1() * k.powf(2.0 * theta - 2.0 * sigma))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ladder(n: usize) -> Arc<WavenumberLadder> {
        Arc::new(WavenumberLadder::new(1.0, 2.0, n).unwrap())
    }

    fn random_state(ladder: &Arc<WavenumberLadder>, rng: &mut ChaCha8Rng) -> SpectralState {
        SpectralState::from_fn(Arc::clone(ladder), |_| {
            Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
        })
    }

    #[test]
    fn ladder_rejects_bad_parameters() {
        assert!(WavenumberLadder::new(0.0, 2.0, 4).is_err());
        assert!(WavenumberLadder::new(1.0, 1.0, 4).is_err());
        assert!(WavenumberLadder::new(1.0, 2.0, 0).is_err());
        let l = WavenumberLadder::new(0.5, 3.0, 5).unwrap();
        assert!(l.wavenumbers().windows(2).all(|w| w[0] < w[1]));
        assert_eq!(l.k(0), 0.5);
    }

    #[test]
    fn norm_of_zero_and_unit_vectors() {
        let l = ladder(8);
        assert_eq!(weighted_norm(&SpectralState::zeros(Arc::clone(&l)), 0.7), 0.0);
        let e1 = SpectralState::unit(Arc::clone(&l), 1).unwrap();
        assert_relative_eq!(weighted_norm(&e1, 0.5), 2.0, max_relative = 1e-15);
    }

    #[test]
    fn norm_matches_direct_sum() {
        let l = ladder(16);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for alpha in [-0.75, 0.0, 0.25, 0.5] {
            let u = random_state(&l, &mut rng);
            let mut acc = 0.0;
            for n in 1..=16i64 {
                let k = 2f64.powi(n as i32);
                let c = u.get(n);
                acc += k.powf(4.0 * alpha) * (c.re * c.re + c.im * c.im);
            }
            assert_relative_eq!(weighted_norm(&u, alpha), acc.sqrt(), max_relative = 1e-14);
        }
    }

    #[test]
    fn inner_product_properties() {
        let l = ladder(6);
        let e1 = SpectralState::unit(Arc::clone(&l), 1).unwrap();
        let e2 = SpectralState::unit(Arc::clone(&l), 2).unwrap();
        assert_eq!(weighted_inner(&e1, &e1, 0.0).unwrap(), Complex64::new(1.0, 0.0));
        for alpha in [-0.5, 0.0, 0.3] {
            assert_eq!(weighted_inner(&e1, &e2, alpha).unwrap(), Complex64::new(0.0, 0.0));
        }

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let u = random_state(&l, &mut rng);
        let v = random_state(&l, &mut rng);
        let uv = weighted_inner(&u, &v, 0.25).unwrap();
        let vu = weighted_inner(&v, &u, 0.25).unwrap();
        assert!((uv - vu.conj()).norm() <= 1e-14 * uv.norm().max(1.0));
        let uu = weighted_inner(&u, &u, 0.25).unwrap();
        assert_relative_eq!(uu.re, weighted_norm(&u, 0.25).powi(2), max_relative = 1e-14);
        assert_eq!(uu.im, 0.0);

        let other = SpectralState::zeros(ladder(7));
        assert!(matches!(weighted_inner(&u, &other, 0.0), Err(Error::LadderMismatch)));
    }

    #[test]
    fn lambda_power_examples() {
        let l = ladder(5);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let u = random_state(&l, &mut rng);
        assert_eq!(apply_lambda_power(&u, 0.0), u);
        let e1 = SpectralState::unit(Arc::clone(&l), 1).unwrap();
        assert_relative_eq!(apply_lambda_power(&e1, 0.5).get(1).re, 2.0);
        for gamma in [0.25, 0.5, 1.0] {
            assert_relative_eq!(
                apply_lambda_power(&u, gamma).norm_v(),
                weighted_norm(&u, gamma),
                max_relative = 1e-14
            );
        }
    }

    #[test]
    fn semigroup_examples() {
        let l = ladder(4);
        let e2 = SpectralState::unit(Arc::clone(&l), 2).unwrap();
        assert_eq!(semigroup_apply(0.0, &e2).unwrap(), e2);
        let s = semigroup_apply(0.1, &e2).unwrap();
        assert_relative_eq!(s.get(2).re, (-1.6f64).exp(), max_relative = 1e-15);
        assert_relative_eq!(s.get(2).re, 0.201897, epsilon = 1e-6);
        assert!(matches!(semigroup_apply(-1e-3, &e2), Err(Error::NegativeTime(_))));

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let u = random_state(&l, &mut rng);
        let ab = semigroup_apply(0.03, &semigroup_apply(0.02, &u).unwrap()).unwrap();
        let direct = semigroup_apply(0.05, &u).unwrap();
        assert!((&ab - &direct).norm_v() <= 1e-15);
    }

    #[test]
    fn smoothing_bound_by_grid_maximisation() {
        // sup_n k^{2ζ} e^{-k² t} ≤ c t^{-ζ}; the continuous maximum over k gives
        // c = (ζ/e)^ζ, and the fitted grid constant must not exceed it.
        let l = WavenumberLadder::new(1.0, 2.0, 24).unwrap();
        for zeta in [0.25, 0.5] {
            let c_cont = (zeta / std::f64::consts::E).powf(zeta);
            let mut fitted: f64 = 0.0;
            for i in 0..=300 {
                let t = 1e-3 * 1e3f64.powf(i as f64 / 300.0);
                fitted = fitted.max(smoothing_gain(&l, zeta, t) * t.powf(zeta));
            }
            assert!(fitted > 0.5 * c_cont && fitted <= c_cont * (1.0 + 1e-12));
        }
    }

    #[test]
    fn semigroup_difference_bound() {
        // (1 - e^{-x}) x^{-(σ-θ)} ≤ 1 for σ - θ ∈ [0, 1], with x = k² t.
        let l = WavenumberLadder::new(1.0, 2.0, 20).unwrap();
        for (sigma, theta) in [(0.5, 0.0), (0.0, -0.75), (0.25, 0.0), (1.0, 0.0)] {
            for i in 0..=200 {
                let t = 1e-4 * 1e4f64.powf(i as f64 / 200.0);
                let gain = semigroup_difference_gain(&l, sigma, theta, t);
                assert!(gain <= t.powf(sigma - theta) * (1.0 + 1e-12));
            }
        }
    }

    #[test]
    fn embedding_and_interpolation() {
        let l = ladder(12);
        let k1 = l.wavenumbers()[0];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut worst: f64 = 0.0;
        for _ in 0..200 {
            let u = random_state(&l, &mut rng);
            for (a1, a2) in [(0.5, 0.0), (0.0, -0.75), (0.25, -0.25)] {
                assert!(
                    weighted_norm(&u, a2) <= k1.powf(2.0 * (a2 - a1)) * weighted_norm(&u, a1) * (1.0 + 1e-12)
                );
            }
            for delta in [0.6, 0.75, 0.9] {
                let lhs = weighted_norm(&u, 1.0 - delta);
                let rhs = u.norm_v().powf(2.0 * delta - 1.0) * weighted_norm(&u, 0.5).powf(2.0 - 2.0 * delta);
                worst = worst.max(lhs / rhs);
            }
        }
        // Hölder's inequality on the weights gives the constant one.
        assert!(worst <= 1.0 + 1e-12);

        let e3 = SpectralState::unit(Arc::clone(&l), 3).unwrap();
        let lhs = weighted_norm(&e3, 0.25);
        let rhs = e3.norm_v().powf(0.5) * weighted_norm(&e3, 0.5).powf(0.5);
        assert_relative_eq!(lhs, rhs, max_relative = 1e-14);
    }
}
