//! State-dependent diffusion `G(u)`, a matrix acting on the noise:
//!
//! ```text
//! (G(u) v)_n = Σ_m g^n_m(u) v_m,    g^n_m(u) = ρ_nm φ(Re⟨u, h_nm⟩_{V_{-δ}})
//! ```
//!
//! with `h_nm` the unit vector of `V_{-δ}` along shell `min(n, m)`, so that
//! `⟨u, h_nm⟩_{V_{-δ}} = u_j k_j^{-2δ}`. Because every `h_nm` has unit norm the
//! bounds of `G`, `DG` and `D²G` are `‖φ^{(i)}‖_∞ (Σ ρ²)^{1/2}`.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::{weighted_norm, SpectralState};

/// Sup of `|tanh''|`, attained where `tanh² = 1/3`.
const TANH_D2_SUP: f64 = 0.769_800_358_919_501;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Profile {
    /// `φ ≡ 1`: additive noise.
    Constant,
    /// `φ(x) = tanh(scale · x)`.
    Tanh { scale: f64 },
}

impl Profile {
    pub fn eval(&self, x: f64) -> f64 {
        match *self {
            Profile::Constant => 1.0,
            Profile::Tanh { scale } => (scale * x).tanh(),
        }
    }

    pub fn d1(&self, x: f64) -> f64 {
        match *self {
            Profile::Constant => 0.0,
            Profile::Tanh { scale } => {
                let t = (scale * x).tanh();
                scale * (1.0 - t * t)
            }
        }
    }

    pub fn d2(&self, x: f64) -> f64 {
        match *self {
            Profile::Constant => 0.0,
            Profile::Tanh { scale } => {
                let t = (scale * x).tanh();
                -2.0 * scale * scale * t * (1.0 - t * t)
            }
        }
    }

    /// `(‖φ‖_∞, ‖φ'‖_∞, ‖φ''‖_∞)`.
    pub fn sup_norms(&self) -> (f64, f64, f64) {
        match *self {
            Profile::Constant => (1.0, 0.0, 0.0),
            Profile::Tanh { scale } => (1.0, scale.abs(), scale * scale * TANH_D2_SUP),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiffusionConstants {
    pub c_g: f64,
    pub c_dg: f64,
    pub c_d2g: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSpec {
    rows: usize,
    cols: usize,
    rho: Vec<f64>,
    profile: Profile,
    delta: f64,
}

impl DiffusionSpec {
    /// `rho` is row-major, `rows` shells by `cols` noise modes.
    pub fn new(rows: usize, cols: usize, rho: Vec<f64>, profile: Profile, delta: f64) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::param("diffusion", "needs at least one shell and one noise mode"));
        }
        if rho.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                expected: rows * cols,
                found: rho.len(),
            });
        }
        if rho.iter().any(|r| !r.is_finite()) {
            return Err(Error::param("diffusion.sigma", "coefficients must be finite"));
        }
        if let Profile::Tanh { scale } = profile {
            if !scale.is_finite() {
                return Err(Error::param("diffusion.scale", "must be finite"));
            }
        }
        if !delta.is_finite() {
            return Err(Error::param("delta", "must be finite"));
        }
        Ok(Self {
            rows,
            cols,
            rho,
            profile,
            delta,
        })
    }

    /// `ρ_nm = σ · decay^{n+m}`; `decay = 2^{-1/2}` gives `σ 2^{-(n+m)/2}`.
    pub fn geometric(rows: usize, cols: usize, sigma: f64, decay: f64, profile: Profile, delta: f64) -> Result<Self> {
        let rho = (1..=rows)
            .flat_map(|n| (1..=cols).map(move |m| sigma * decay.powi((n + m) as i32)))
            .collect();
        Self::new(rows, cols, rho, profile, delta)
    }

    /// No noise at all.
    pub fn off(rows: usize, cols: usize) -> Self {
        Self::new(rows, cols, vec![0.0; rows * cols], Profile::Constant, 0.75).expect("valid zero diffusion")
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn profile(&self) -> Profile {
        self.profile
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn rho(&self) -> &[f64] {
        &self.rho
    }

    pub fn is_off(&self) -> bool {
        self.rho.iter().all(|r| *r == 0.0)
    }

    pub fn rho_norm(&self) -> f64 {
        self.rho.iter().map(|r| r * r).sum::<f64>().sqrt()
    }

    pub fn analytic_constants(&self) -> DiffusionConstants {
        let (s0, s1, s2) = self.profile.sup_norms();
        let r = self.rho_norm();
        DiffusionConstants {
            c_g: s0 * r,
            c_dg: s1 * r,
            c_d2g: s2 * r,
        }
    }

    fn check(&self, u: &SpectralState) -> Result<()> {
        if u.len() != self.rows {
            return Err(Error::DimensionMismatch {
                expected: self.rows,
                found: u.len(),
            });
        }
        Ok(())
    }

    /// `x_j = Re⟨u, h_j⟩_{V_{-δ}}` for the shells `j` that carry a direction.
    fn projections(&self, u: &SpectralState) -> Vec<f64> {
        let ks = u.ladder().wavenumbers();
        (0..self.rows.min(self.cols))
            .map(|j| u.coeffs()[j].re * ks[j].powf(-2.0 * self.delta))
            .collect()
    }

    /// Row-major matrix `(g^n_m(u))`.
    pub fn matrix(&self, u: &SpectralState) -> Result<Vec<Complex64>> {
        self.check(u)?;
        if let Profile::Constant = self.profile {
            return Ok(self.rho.iter().map(|r| Complex64::new(*r, 0.0)).collect());
        }
        let x = self.projections(u);
        let mut out = Vec::with_capacity(self.rows * self.cols);
        for n in 0..self.rows {
            for m in 0..self.cols {
                let j = n.min(m);
                out.push(Complex64::new(self.rho[n * self.cols + m] * self.profile.eval(x[j]), 0.0));
            }
        }
        Ok(out)
    }

    /// `‖G(u)‖_{L_2}`.
    pub fn hs_norm(&self, u: &SpectralState) -> Result<f64> {
        Ok(self.matrix(u)?.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt())
    }

    /// `G(u) v`.
    pub fn apply(&self, u: &SpectralState, v: &[Complex64]) -> Result<SpectralState> {
        if v.len() != self.cols {
            return Err(Error::DimensionMismatch {
                expected: self.cols,
                found: v.len(),
            });
        }
        let g = self.matrix(u)?;
        Ok(u.map_coeffs(|n, _| (0..self.cols).map(|m| g[(n - 1) * self.cols + m] * v[m]).sum()))
    }

    /// `G(u)* w`, a vector in noise coordinates.
    pub fn apply_adjoint(&self, u: &SpectralState, w: &SpectralState) -> Result<Vec<Complex64>> {
        let g = self.matrix(u)?;
        Ok((0..self.cols)
            .map(|m| (0..self.rows).map(|n| g[n * self.cols + m].conj() * w.coeffs()[n]).sum())
            .collect())
    }

    /// `DG(u) du` as a row-major matrix.
    pub fn derivative(&self, u: &SpectralState, du: &SpectralState) -> Result<Vec<Complex64>> {
        self.check(u)?;
        let x = self.projections(u);
        let dx = self.projections(du);
        let mut out = Vec::with_capacity(self.rows * self.cols);
        for n in 0..self.rows {
            for m in 0..self.cols {
                let j = n.min(m);
                out.push(Complex64::new(
                    self.rho[n * self.cols + m] * self.profile.d1(x[j]) * dx[j],
                    0.0,
                ));
            }
        }
        Ok(out)
    }
}

/// `G(u) v`.
pub fn apply_g(u: &SpectralState, v: &[Complex64], spec: &DiffusionSpec) -> Result<SpectralState> {
    spec.apply(u, v)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstantEstimates {
    pub analytic: DiffusionConstants,
    pub empirical: DiffusionConstants,
}

/// Analytic bounds next to empirical maxima over random states.
///
/// `c_G` is sampled as `sup ‖G(u)‖`, `c_DG` as the largest Lipschitz quotient
/// in `V_{-δ}` and `c_D²G` as the largest `‖D²G(u)(h, h)‖ / ‖h‖²` along random
/// directions.
pub fn estimate_constants(spec: &DiffusionSpec, samples: usize, ladder: &std::sync::Arc<crate::WavenumberLadder>, seed: u64) -> Result<ConstantEstimates> {
    if samples == 0 {
        return Err(Error::param("samples", "at least one sample is required"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let delta = spec.delta;
    let draw = |rng: &mut ChaCha8Rng, amp: f64| {
        SpectralState::from_fn(std::sync::Arc::clone(ladder), |n| {
            let k = ladder.wavenumbers()[n - 1];
            Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)) * (amp * k.powf(2.0 * delta))
        })
    };
    let mut emp = DiffusionConstants {
        c_g: 0.0,
        c_dg: 0.0,
        c_d2g: 0.0,
    };
    for _ in 0..samples {
        let amp = 10f64.powf(rng.random_range(-2.0..1.0));
        let u1 = draw(&mut rng, amp);
        let shrink = 10f64.powf(rng.random_range(-3.0..0.0));
        let u2 = draw(&mut rng, amp * shrink);
        emp.c_g = emp.c_g.max(spec.hs_norm(&u1)?);
        let v = &u1 + &u2;
        let diff: f64 = spec
            .matrix(&u1)?
            .iter()
            .zip(spec.matrix(&v)?)
            .map(|(a, b)| (a - b).norm_sqr())
            .sum::<f64>()
            .sqrt();
        let dn = weighted_norm(&u2, -delta);
        if dn > 0.0 {
            emp.c_dg = emp.c_dg.max(diff / dn);
        }
        // Exact second derivative along u2.
        let x = spec.projections(&u1);
        let hx = spec.projections(&u2);
        let mut d2 = 0.0;
        for n in 0..spec.rows {
            for m in 0..spec.cols {
                let j = n.min(m);
                d2 += (spec.rho[n * spec.cols + m] * spec.profile.d2(x[j]) * hx[j] * hx[j]).powi(2);
            }
        }
        if dn > 0.0 {
            emp.c_d2g = emp.c_d2g.max(d2.sqrt() / (dn * dn));
        }
    }
    Ok(ConstantEstimates {
        analytic: spec.analytic_constants(),
        empirical: emp,
    })
}
