//! Path-wise simulation of GOY and SABRA shell models driven by multiplicative
//! fractional Brownian motion with Hurst index in `(1/2, 1)`.

pub mod diffusion;
pub mod error;
pub mod fbm;
pub mod frac;
pub mod shell;
pub mod solver;
pub mod spectral;

pub use error::{Error, Result};
pub use shell::{apply_b, trilinear_form, ShellCoefficients, ShellModel};
pub use spectral::{
    apply_lambda_power, semigroup_apply, weighted_inner, weighted_norm, SobolevIndex, SpectralState,
    WavenumberLadder,
};
pub use fbm::{
    holder_seminorm, path_derivative, piecewise_linear_restrict, sample_fbm_1d, sample_fbm_hilbert, FbmSpec,
    HilbertPath, PathKind, TraceClassCov,
};
pub use frac::{
    frac_deriv_left, frac_deriv_right, semigroup_convolution, young_integral_operator, young_integral_scalar,
    ConvolutionPlan, Estimate, FracOrder, OperatorPath,
};
pub use diffusion::{apply_g, estimate_constants, DiffusionSpec, Profile};
pub use solver::{
    apriori_envelope, energy_audit, holder_audit, integrate_galerkin, interval_scheme, mild_residual,
    noise_refinement_study, uniqueness_probe, AuditReport, Scheme, SolverConfig, Trajectory,
};
