//! GOY and SABRA nonlinearities.
//!
//! Both models couple nearest and next-nearest shells:
//!
//! ```text
//! GOY    b_n = i ( a k_{n+1} ū_{n+1} v̄_{n+2} + b k_n ū_{n-1} v̄_{n+1}
//!                - a k_{n-1} ū_{n-1} v̄_{n-2} - b k_{n-1} ū_{n-2} v̄_{n-1} )
//! SABRA  b_n = -i ( a k_{n+1} ū_{n+1} v_{n+2} + b k_n ū_{n-1} v_{n+1}
//!                 + a k_{n-1} u_{n-1} v_{n-2} + b k_{n-1} u_{n-2} v_{n-1} )
//! ```
//!
//! and `B(u, v) = -(b_1, b_2, …)`. Shells outside `1..=N` are zero.
//!
//! For GOY the complex identities `(B(u,v), w) = -(B(u,w), v)` and
//! `(B(u,v), v) = 0` hold exactly. For SABRA only their real parts hold: the
//! imaginary part of `(B(u,v), v)` is generally nonzero, while the energy
//! balance `Re Σ b_n(u,v) v̄_n = 0` is satisfied by both models.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::{weighted_inner, SpectralState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShellModel {
    Goy,
    Sabra,
}

impl std::str::FromStr for ShellModel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "goy" => Ok(ShellModel::Goy),
            "sabra" => Ok(ShellModel::Sabra),
            other => Err(Error::param("model", format!("unknown shell model `{other}`"))),
        }
    }
}

impl std::fmt::Display for ShellModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ShellModel::Goy => "goy",
            ShellModel::Sabra => "sabra",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShellCoefficients {
    pub a: f64,
    pub b: f64,
    pub kind: ShellModel,
    /// Flips the sign of the last coupling term. Breaks the energy
    /// cancellation on purpose; only for exercising the audits.
    #[doc(hidden)]
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub sign_defect: bool,
}

impl ShellCoefficients {
    pub fn new(a: f64, b: f64, kind: ShellModel) -> Result<Self> {
        if !a.is_finite() || !b.is_finite() {
            return Err(Error::param("a, b", "coefficients must be finite"));
        }
        Ok(Self {
            a,
            b,
            kind,
            sign_defect: false,
        })
    }

    pub fn goy() -> Self {
        Self {
            a: 1.0,
            b: -0.5,
            kind: ShellModel::Goy,
            sign_defect: false,
        }
    }

    pub fn sabra() -> Self {
        Self {
            a: 1.0,
            b: -0.5,
            kind: ShellModel::Sabra,
            sign_defect: false,
        }
    }
}

impl Default for ShellCoefficients {
    fn default() -> Self {
        Self::goy()
    }
}

const I: Complex64 = Complex64 { re: 0.0, im: 1.0 };

/// `b_n(u, v)` for a single one-based shell index.
#[inline]
fn b_component(u: &SpectralState, v: &SpectralState, n: i64, c: &ShellCoefficients) -> Complex64 {
    let k = |m: i64| u.ladder().k(m);
    let (a, b) = (c.a, c.b);
    let last = if c.sign_defect { -b } else { b };
    match c.kind {
        ShellModel::Goy => {
            let s = u.get(n + 1).conj() * v.get(n + 2).conj() * (a * k(n + 1))
                + u.get(n - 1).conj() * v.get(n + 1).conj() * (b * k(n))
                - u.get(n - 1).conj() * v.get(n - 2).conj() * (a * k(n - 1))
                - u.get(n - 2).conj() * v.get(n - 1).conj() * (last * k(n - 1));
            I * s
        }
        ShellModel::Sabra => {
            let s = u.get(n + 1).conj() * v.get(n + 2) * (a * k(n + 1))
                + u.get(n - 1).conj() * v.get(n + 1) * (b * k(n))
                + u.get(n - 1) * v.get(n - 2) * (a * k(n - 1))
                + u.get(n - 2) * v.get(n - 1) * (last * k(n - 1));
            -I * s
        }
    }
}

/// `B(u, v) = -(b_1(u, v), …, b_N(u, v))`.
pub fn apply_b(u: &SpectralState, v: &SpectralState, coeffs: &ShellCoefficients) -> Result<SpectralState> {
    u.ensure_same_ladder(v)?;
    Ok(u.map_coeffs(|n, _| -b_component(u, v, n as i64, coeffs)))
}

/// `(B(u, v), w)_V`.
pub fn trilinear_form(
    u: &SpectralState,
    v: &SpectralState,
    w: &SpectralState,
    coeffs: &ShellCoefficients,
) -> Result<Complex64> {
    u.ensure_same_ladder(w)?;
    weighted_inner(&apply_b(u, v, coeffs)?, w, 0.0)
}

/// `Re Σ b_n(u, v) v̄_n`, which vanishes for both models.
pub fn energy_transfer(u: &SpectralState, v: &SpectralState, coeffs: &ShellCoefficients) -> Result<f64> {
    u.ensure_same_ladder(v)?;
    Ok((1..=u.len() as i64)
        .map(|n| (b_component(u, v, n, coeffs) * v.get(n).conj()).re)
        .sum())
}
