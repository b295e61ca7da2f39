//! Flat `key = value` run configuration.
//!
//! One entry per line, `#` starts a comment. Lists are comma-separated.
//! Unknown keys are rejected so that a typo never silently falls back to a
//! default.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use num_complex::Complex64;
use shellflow::{
    DiffusionSpec, FracOrder, Profile, Scheme, ShellCoefficients, ShellModel, SolverConfig, SpectralState,
    WavenumberLadder,
};

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub key: String,
    pub reason: String,
}

impl ConfigError {
    fn new(key: &str, reason: impl Into<String>) -> Self {
        Self {
            key: key.to_string(),
            reason: reason.into(),
        }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "config key `{}`: {}", self.key, self.reason)
    }
}

impl std::error::Error for ConfigError {}

/// Every key the parser accepts with its default. `None` marks a required
/// key, except for `a` and `b`, which default to the standard values of
/// `model`.
pub const KEYS: &[(&str, Option<&str>)] = &[
    ("model", Some("goy")),
    ("a", None),
    ("b", None),
    ("k0", Some("1")),
    ("lambda", Some("2")),
    ("n_shells", Some("16")),
    ("hurst", None),
    ("beta_prime", Some("0.7")),
    ("beta_hat", Some("0.55")),
    ("delta", Some("0.75")),
    ("alpha", Some("midpoint")),
    ("dt", Some("0.001")),
    ("horizon", Some("1")),
    ("seed", None),
    ("scheme", Some("exponential_euler")),
    ("levels", Some("4,5,6,7")),
    ("galerkin_sizes", Some("4,8")),
    ("audits", Some("skew_symmetry,integral_oracles,energy,holder,derivative_bound,integral_bound")),
    ("u0.amplitude", Some("1")),
    ("u0.power", Some("2")),
    ("noise.modes", Some("4")),
    ("noise.ratio", Some("0.5")),
    ("noise.cells", Some("1024")),
    ("noise.horizon", Some("1.024")),
    ("noise.level", Some("10")),
    ("diffusion.profile", Some("tanh")),
    ("diffusion.sigma", Some("0.1")),
    ("diffusion.decay", Some("0.7071067811865476")),
    ("diffusion.scale", Some("1")),
    ("audit.energy_tolerance", Some("1e-6")),
    ("audit.holder_constant", Some("10")),
    ("audit.majorant_samples", Some("2")),
    ("convergence.tolerance", Some("1e-14")),
    ("test.sign_defect", Some("false")),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Audit {
    SkewSymmetry,
    IntegralOracles,
    Energy,
    Holder,
    DerivativeBound,
    IntegralBound,
}

impl Audit {
    pub fn name(self) -> &'static str {
        match self {
            Audit::SkewSymmetry => "skew_symmetry",
            Audit::IntegralOracles => "integral_oracles",
            Audit::Energy => "energy",
            Audit::Holder => "holder",
            Audit::DerivativeBound => "derivative_bound",
            Audit::IntegralBound => "integral_bound",
        }
    }
}

impl FromStr for Audit {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        [
            Audit::SkewSymmetry,
            Audit::IntegralOracles,
            Audit::Energy,
            Audit::Holder,
            Audit::DerivativeBound,
            Audit::IntegralBound,
        ]
        .into_iter()
        .find(|a| a.name() == s)
        .ok_or_else(|| format!("unknown audit `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseConfig {
    pub modes: usize,
    pub ratio: f64,
    pub cells: usize,
    pub horizon: f64,
    pub level: u32,
}

#[derive(Debug, Clone)]
pub struct Config {
    /// Every key with its effective value, defaults filled in.
    pub entries: BTreeMap<String, String>,
    pub coeffs: ShellCoefficients,
    pub ladder: Arc<WavenumberLadder>,
    pub solver: SolverConfig,
    pub seed: u64,
    pub noise: NoiseConfig,
    pub diffusion: DiffusionSpec,
    pub sigma: f64,
    pub decay: f64,
    pub u0_amplitude: f64,
    pub u0_power: f64,
    pub levels: Vec<u32>,
    pub galerkin_sizes: Vec<usize>,
    pub audits: Vec<Audit>,
    pub energy_tolerance: f64,
    pub holder_constant: f64,
    pub majorant_samples: usize,
    pub convergence_tolerance: f64,
}

pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>, ConfigError> {
    let mut out = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(ConfigError::new(line, format!("line {} is not `key = value`", lineno + 1)));
        };
        let k = k.trim();
        if !KEYS.iter().any(|(known, _)| *known == k) {
            return Err(ConfigError::new(k, "unknown key"));
        }
        if out.insert(k.to_string(), v.trim().to_string()).is_some() {
            return Err(ConfigError::new(k, "given twice"));
        }
    }
    Ok(out)
}

struct Lookup(BTreeMap<String, String>);

impl Lookup {
    fn get<T: FromStr>(&self, key: &str) -> Result<T, ConfigError>
    where
        T::Err: fmt::Display,
    {
        let raw = self.raw(key)?;
        raw.parse().map_err(|e| ConfigError::new(key, format!("cannot parse `{raw}`: {e}")))
    }

    fn raw(&self, key: &str) -> Result<&str, ConfigError> {
        self.0.get(key).map(String::as_str).ok_or_else(|| ConfigError::new(key, "missing"))
    }

    fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>, ConfigError>
    where
        T::Err: fmt::Display,
    {
        let raw = self.raw(key)?;
        raw.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|e| ConfigError::new(key, format!("cannot parse `{s}`: {e}"))))
            .collect()
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::new("path", format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut entries = parse_pairs(text)?;
        let model: ShellModel = entries
            .get("model")
            .map(|m| m.parse().map_err(|e: shellflow::Error| ConfigError::new("model", e.to_string())))
            .transpose()?
            .unwrap_or(ShellModel::Goy);
        // The shell parameters default to the model's standard values.
        let standard = match model {
            ShellModel::Goy => ShellCoefficients::goy(),
            ShellModel::Sabra => ShellCoefficients::sabra(),
        };
        for (key, default) in KEYS {
            let fallback = match *key {
                "a" => Some(standard.a.to_string()),
                "b" => Some(standard.b.to_string()),
                _ => default.map(str::to_string),
            };
            if let Some(v) = fallback {
                entries.entry(key.to_string()).or_insert(v);
            }
        }
        let l = Lookup(entries);

        let mut coeffs = ShellCoefficients::new(l.get("a")?, l.get("b")?, model)
            .map_err(|e| ConfigError::new("a", e.to_string()))?;
        coeffs.sign_defect = l.get("test.sign_defect")?;
        let n_shells: usize = l.get("n_shells")?;
        let ladder = WavenumberLadder::new(l.get("k0")?, l.get("lambda")?, n_shells)
            .map_err(|e| ConfigError::new("lambda", e.to_string()))?;

        let hurst: f64 = l.get("hurst")?;
        let beta_prime: f64 = l.get("beta_prime")?;
        let beta_hat: f64 = l.get("beta_hat")?;
        let alpha = match l.raw("alpha")? {
            "midpoint" => FracOrder::midpoint(beta_hat, beta_prime),
            _ => FracOrder::new(l.get("alpha")?),
        }
        .map_err(|e| ConfigError::new("alpha", e.to_string()))?;
        let scheme: Scheme = l
            .raw("scheme")?
            .parse()
            .map_err(|e: shellflow::Error| ConfigError::new("scheme", e.to_string()))?;
        let solver = SolverConfig {
            n_shells,
            dt: l.get("dt")?,
            horizon: l.get("horizon")?,
            hurst,
            beta_prime,
            beta_hat,
            delta: l.get("delta")?,
            alpha,
            scheme,
        };
        solver.validate().map_err(|e| match e {
            shellflow::Error::InvalidParameter { name, reason } => ConfigError::new(name, reason),
            other => ConfigError::new("solver", other.to_string()),
        })?;

        let noise = NoiseConfig {
            modes: l.get("noise.modes")?,
            ratio: l.get("noise.ratio")?,
            cells: l.get("noise.cells")?,
            horizon: l.get("noise.horizon")?,
            level: l.get("noise.level")?,
        };
        if noise.horizon < solver.horizon {
            return Err(ConfigError::new("noise.horizon", "must cover the integration horizon"));
        }
        if noise.modes == 0 {
            return Err(ConfigError::new("noise.modes", "need at least one mode"));
        }

        let sigma: f64 = l.get("diffusion.sigma")?;
        let decay: f64 = l.get("diffusion.decay")?;
        let diffusion = match l.raw("diffusion.profile")? {
            "off" => Ok(DiffusionSpec::off(n_shells, noise.modes)),
            "constant" => DiffusionSpec::geometric(n_shells, noise.modes, sigma, decay, Profile::Constant, solver.delta),
            "tanh" => DiffusionSpec::geometric(
                n_shells,
                noise.modes,
                sigma,
                decay,
                Profile::Tanh {
                    scale: l.get("diffusion.scale")?,
                },
                solver.delta,
            ),
            other => return Err(ConfigError::new("diffusion.profile", format!("unknown profile `{other}`"))),
        }
        .map_err(|e| ConfigError::new("diffusion.sigma", e.to_string()))?;

        let audits: Vec<Audit> = l.list::<String>("audits")?
            .iter()
            .map(|s| s.parse().map_err(|e: String| ConfigError::new("audits", e)))
            .collect::<Result<_, _>>()?;

        Ok(Config {
            coeffs,
            ladder: Arc::new(ladder),
            solver,
            seed: l.get("seed")?,
            noise,
            diffusion,
            u0_amplitude: l.get("u0.amplitude")?,
            u0_power: l.get("u0.power")?,
            levels: l.list("levels")?,
            galerkin_sizes: l.list("galerkin_sizes")?,
            audits,
            energy_tolerance: l.get("audit.energy_tolerance")?,
            holder_constant: l.get("audit.holder_constant")?,
            majorant_samples: l.get("audit.majorant_samples")?,
            convergence_tolerance: l.get("convergence.tolerance")?,
            sigma,
            decay,
            entries: l.0,
        })
    }

    /// `u0_n = amplitude · k_n^{-power} · e^{0.7 i n}`.
    pub fn initial_state(&self, ladder: &Arc<WavenumberLadder>) -> SpectralState {
        let (amp, p) = (self.u0_amplitude, self.u0_power);
        SpectralState::from_fn(Arc::clone(ladder), |n| {
            Complex64::from_polar(amp * ladder.wavenumbers()[n - 1].powf(-p), 0.7 * n as f64)
        })
    }

    pub fn diffusion_for(&self, n_shells: usize) -> shellflow::Result<DiffusionSpec> {
        if self.diffusion.is_off() {
            return Ok(DiffusionSpec::off(n_shells, self.noise.modes));
        }
        DiffusionSpec::geometric(n_shells, self.noise.modes, self.sigma, self.decay, self.diffusion.profile(), self.solver.delta)
    }
}
