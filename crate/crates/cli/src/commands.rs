use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use shellflow::fbm::{write_binary, write_csv};
use shellflow::frac::{right_derivative_constant, young_bound_constant, young_integral_operator_on};
use shellflow::solver::{galerkin_study, EnergyAudit};
use shellflow::{
    apply_b, energy_audit, frac_deriv_right, holder_audit, holder_seminorm, integrate_galerkin, noise_refinement_study,
    piecewise_linear_restrict, sample_fbm_1d, sample_fbm_hilbert, uniqueness_probe, weighted_inner, weighted_norm,
    young_integral_scalar, AuditReport, Error, FbmSpec, HilbertPath, OperatorPath, TraceClassCov, Trajectory,
};

use crate::config::{Audit, Config, ConfigError};
use crate::run::{RunDir, Summary};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_BLOW_UP: i32 = 2;
pub const EXIT_AUDIT: i32 = 3;

/// A failure that ends a command, with its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure {
            code: EXIT_CONFIG,
            message: e.to_string(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = if matches!(e, Error::BlowUp { .. }) { EXIT_BLOW_UP } else { EXIT_CONFIG };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure {
            code: EXIT_CONFIG,
            message: format!("i/o: {e}"),
        }
    }
}

type Outcome = Result<Vec<String>, Failure>;

/// Loads the config, runs `body` inside a fresh run directory and always
/// closes it with a manifest. `body` returns the names of failed checks.
fn in_run_dir(command: &str, config: &Path, body: impl FnOnce(&Config, &mut RunDir) -> Outcome) -> i32 {
    let cfg = match Config::load(config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_CONFIG;
        }
    };
    let mut run = match RunDir::create(cfg.seed) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: cannot create run directory: {e}");
            return EXIT_CONFIG;
        }
    };
    let (code, summary) = match body(&cfg, &mut run) {
        Ok(failed) if failed.is_empty() => (
            EXIT_OK,
            Summary {
                pass: true,
                exit_code: EXIT_OK,
                failed,
                error: None,
            },
        ),
        Ok(failed) => {
            eprintln!("failed: {}", failed.join(", "));
            (
                EXIT_AUDIT,
                Summary {
                    pass: false,
                    exit_code: EXIT_AUDIT,
                    failed,
                    error: None,
                },
            )
        }
        Err(f) => {
            eprintln!("error: {}", f.message);
            (
                f.code,
                Summary {
                    pass: false,
                    exit_code: f.code,
                    failed: Vec::new(),
                    error: Some(f.message),
                },
            )
        }
    };
    match run.finish(command, &cfg, summary) {
        Ok(dir) => {
            println!("{}", dir.display());
            code
        }
        Err(e) => {
            eprintln!("error: cannot write manifest: {e}");
            EXIT_CONFIG
        }
    }
}

fn sampled_noise(cfg: &Config) -> Result<HilbertPath, Failure> {
    let n = &cfg.noise;
    let spec = FbmSpec::new(cfg.solver.hurst, n.horizon, n.cells, cfg.seed).map_err(|e| config_error("noise.cells", e))?;
    let cov = TraceClassCov::geometric(n.modes, n.ratio).map_err(|e| config_error("noise.ratio", e))?;
    Ok(sample_fbm_hilbert(&spec, &cov)?)
}

fn driving_noise(cfg: &Config, sampled: &HilbertPath) -> Result<HilbertPath, Failure> {
    piecewise_linear_restrict(sampled, cfg.noise.level).map_err(|e| config_error("noise.level", e))
}

fn config_error(key: &str, e: Error) -> Failure {
    Failure {
        code: EXIT_CONFIG,
        message: format!("config key `{key}`: {e}"),
    }
}

fn integrate(cfg: &Config, omega: &HilbertPath) -> Result<Trajectory, Failure> {
    let u0 = cfg.initial_state(&cfg.ladder);
    integrate_galerkin(&u0, omega, &cfg.solver, &cfg.diffusion, &cfg.coeffs).map_err(|e| match e {
        Error::StepMismatch { .. } => config_error("dt", e),
        other => other.into(),
    })
}

fn write_trajectory(run: &mut RunDir, traj: &Trajectory, omega: &HilbertPath) -> Result<(), Failure> {
    let mut csv = Vec::new();
    traj.write_csv(&mut csv)?;
    run.write("trajectory.csv", &csv)?;
    let mut bin = Vec::new();
    write_binary(omega, &mut bin)?;
    run.write("noise.bin", &bin)?;
    Ok(())
}

pub fn simulate(config: &Path) -> i32 {
    in_run_dir("simulate", config, |cfg, run| {
        let omega = driving_noise(cfg, &sampled_noise(cfg)?)?;
        let traj = integrate(cfg, &omega)?;
        write_trajectory(run, &traj, &omega)?;
        Ok(Vec::new())
    })
}

pub fn fbm_sample(config: &Path) -> i32 {
    in_run_dir("fbm-sample", config, |cfg, run| {
        let omega = sampled_noise(cfg)?;
        let mut bin = Vec::new();
        write_binary(&omega, &mut bin)?;
        run.write("noise.bin", &bin)?;
        let mut csv = Vec::new();
        write_csv(&omega, &mut csv)?;
        run.write("noise.csv", &csv)?;
        Ok(Vec::new())
    })
}

pub fn verify(config: &Path) -> i32 {
    in_run_dir("verify", config, |cfg, run| {
        if cfg.audits.is_empty() {
            return Err(ConfigError {
                key: "audits".into(),
                reason: "nothing to verify".into(),
            }
            .into());
        }
        let sampled = sampled_noise(cfg)?;
        let omega = driving_noise(cfg, &sampled)?;
        let traj = integrate(cfg, &omega)?;
        write_trajectory(run, &traj, &omega)?;
        let mut reports = Vec::new();
        for audit in &cfg.audits {
            let report = match audit {
                Audit::SkewSymmetry => skew_symmetry(cfg)?,
                Audit::IntegralOracles => integral_oracles(cfg)?,
                Audit::Energy => energy(cfg, &traj)?,
                Audit::Holder => holder_audit(&traj, cfg.holder_constant).report,
                Audit::DerivativeBound => derivative_bound(cfg, &sampled)?,
                Audit::IntegralBound => integral_bound(cfg, &traj)?,
            };
            reports.push(report);
        }
        let failed: Vec<String> = reports.iter().filter(|r| !r.pass).map(|r| r.name.clone()).collect();
        let bundle = json!({ "pass": failed.is_empty(), "failed": failed, "audits": reports });
        run.write("audits.json", (serde_json::to_string_pretty(&bundle).expect("serializable") + "\n").as_bytes())?;
        Ok(failed)
    })
}

pub fn convergence(config: &Path) -> i32 {
    in_run_dir("convergence", config, |cfg, run| {
        if cfg.levels.len() < 2 {
            return Err(ConfigError {
                key: "levels".into(),
                reason: "a convergence study needs at least two levels".into(),
            }
            .into());
        }
        let sampled = sampled_noise(cfg)?;
        let u0 = cfg.initial_state(&cfg.ladder);
        let study = noise_refinement_study(&u0, &sampled, &cfg.levels, &cfg.solver, &cfg.diffusion, &cfg.coeffs)
            .map_err(|e| match e {
                Error::IndivisibleLevel { .. } => config_error("levels", e),
                Error::StepMismatch { .. } => config_error("dt", e),
                other => other.into(),
            })?;
        let mut csv = Vec::new();
        study.write_csv(&mut csv)?;
        run.write("refinement.csv", &csv)?;

        let omega = driving_noise(cfg, &sampled)?;
        let probe = uniqueness_probe(&u0, &omega, &cfg.solver, &cfg.diffusion, &cfg.coeffs)?;
        let mut csv = Vec::new();
        writeln!(csv, "dt,scheme_divergence,step_divergence")?;
        writeln!(csv, "{},{},{}", cfg.solver.dt, probe.scheme_divergence, probe.step_divergence)?;
        run.write("uniqueness.csv", &csv)?;

        let mut csv = Vec::new();
        writeln!(csv, "n_shells,diff_to_double")?;
        if !cfg.galerkin_sizes.is_empty() {
            let rows = galerkin_study(
                |l| cfg.initial_state(l),
                &cfg.ladder,
                &omega,
                &cfg.solver,
                |n| cfg.diffusion_for(n),
                &cfg.coeffs,
                &cfg.galerkin_sizes,
            )?;
            for r in rows {
                writeln!(csv, "{},{}", r.n_shells, r.diff_to_double)?;
            }
        }
        run.write("galerkin.csv", &csv)?;

        let tol = cfg.convergence_tolerance;
        let decreasing = study.rows.windows(2).all(|w| {
            let (a, b) = (w[0].diff_minus_delta, w[1].diff_minus_delta);
            b < a || (a <= tol && b <= tol)
        });
        Ok(if decreasing { Vec::new() } else { vec!["refinement_decrease".to_string()] })
    })
}

fn skew_symmetry(cfg: &Config) -> Result<AuditReport, Failure> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let l = &cfg.ladder;
    let mut draw = || {
        shellflow::SpectralState::from_fn(std::sync::Arc::clone(l), |_| {
            num_complex::Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
        })
    };
    let (mut idx, mut lhs, mut rhs) = (Vec::new(), Vec::new(), Vec::new());
    let mut complex: f64 = 0.0;
    for i in 0..200 {
        let (u, v) = (draw(), draw());
        let scale = weighted_norm(&u, 0.5) * v.norm_v().powi(2);
        let pairing = weighted_inner(&apply_b(&u, &v, &cfg.coeffs)?, &v, 0.0)?;
        idx.push(i as f64);
        lhs.push(pairing.re.abs() / scale);
        rhs.push(1e-12);
        complex = complex.max(pairing.norm() / scale);
    }
    let mut report = AuditReport::new("skew_symmetry", idx, lhs, rhs, 0.0);
    report.fitted.insert("max_complex_ratio".into(), complex);
    Ok(report)
}

// Midpoint Stieltjes sum of two piecewise-linear paths, `sub` points per cell.
fn stieltjes(z: &HilbertPath, zeta: &HilbertPath, sub: usize) -> f64 {
    let mut s = 0.0;
    for k in 0..z.n_cells() {
        let (z0, z1) = (z.node(k)[0].re, z.node(k + 1)[0].re);
        let dzeta = zeta.node(k + 1)[0].re - zeta.node(k)[0].re;
        for j in 0..sub {
            let w = (j as f64 + 0.5) / sub as f64;
            s += (z0 * (1.0 - w) + z1 * w) * dzeta / sub as f64;
        }
    }
    s
}

fn integral_oracles(cfg: &Config) -> Result<AuditReport, Failure> {
    let alpha = cfg.solver.alpha;
    let n = 256;
    let z = HilbertPath::scalar(1.0, n, |t| (3.0 * t).sin() + 1.0);
    let zeta = HilbertPath::scalar(1.0, n, |t| t * t + 0.3 * t);
    let smooth = young_integral_scalar(&z, &zeta, alpha)?.value;
    let smooth_ref = stieltjes(&z, &zeta, 64);

    let fbm = sample_fbm_1d(&FbmSpec::new(cfg.solver.hurst, 1.0, n, cfg.seed)?)?;
    let end = fbm.node(n)[0].re;
    let one = HilbertPath::scalar(1.0, n, |_| 1.0);
    let unit = young_integral_scalar(&one, &fbm, alpha)?.value;
    let square = young_integral_scalar(&fbm, &fbm, alpha)?.value;

    let lhs = vec![(smooth - smooth_ref).abs(), (unit - end).abs(), (square - 0.5 * end * end).abs()];
    let rhs = vec![1e-6 * smooth_ref.abs(), 1e-6 * end.abs().max(1.0), 1e-6 * (0.5 * end * end).max(1.0)];
    let mut report = AuditReport::new("integral_oracles", vec![0.0, 1.0, 2.0], lhs, rhs, 0.0);
    report.fitted.insert("alpha".into(), alpha.value());
    Ok(report)
}

fn energy(cfg: &Config, traj: &Trajectory) -> Result<AuditReport, Failure> {
    let tol = cfg.energy_tolerance * traj.initial().norm_v().powi(2);
    let EnergyAudit {
        mut report,
        majorant_holds,
        ..
    } = energy_audit(traj, &cfg.diffusion, tol, cfg.majorant_samples)?;
    report.fitted.insert("majorant_holds".into(), f64::from(u8::from(majorant_holds)));
    report.pass &= majorant_holds;
    Ok(report)
}

fn derivative_bound(cfg: &Config, omega: &HilbertPath) -> Result<AuditReport, Failure> {
    let (alpha, bp) = (cfg.solver.alpha, cfg.solver.beta_prime);
    let c = right_derivative_constant(alpha, bp);
    let semi = holder_seminorm(omega, bp);
    let t2 = omega.horizon();
    let (mut times, mut lhs, mut rhs) = (Vec::new(), Vec::new(), Vec::new());
    for i in 0..20 {
        let r = t2 * (i as f64 + 0.37) / 20.0;
        let d = frac_deriv_right(omega, alpha, r, t2)?;
        times.push(r);
        lhs.push(d.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt());
        rhs.push(c * semi * (t2 - r).powf(alpha.value() + bp - 1.0));
    }
    let mut report = AuditReport::new("derivative_bound", times, lhs, rhs, 0.0);
    report.fitted.insert("constant".into(), c);
    report.fitted.insert("omega_seminorm".into(), semi);
    Ok(report)
}

/// `‖∫_0^t G(u) dω‖ ≤ c ‖G(u)‖_{C^β̂} |||ω|||_{β'} t^{β'}` along the run.
fn integral_bound(cfg: &Config, traj: &Trajectory) -> Result<AuditReport, Failure> {
    let (alpha, bh, bp) = (cfg.solver.alpha, cfg.solver.beta_hat, cfg.solver.beta_prime);
    let spec = &cfg.diffusion;
    let n = traj.n_steps();
    let mut values = Vec::with_capacity((n + 1) * spec.rows() * spec.cols());
    for s in &traj.states {
        values.extend(spec.matrix(s)?);
    }
    let z = OperatorPath::new(cfg.solver.horizon, n, spec.rows(), spec.cols(), values)?;
    let semi = holder_seminorm(&traj.noise, bp);
    let (mut times, mut lhs, mut rhs) = (Vec::new(), Vec::new(), Vec::new());
    for k in 1..=4 {
        let i1 = n * k / 4;
        let t = traj.times[i1];
        let est = young_integral_operator_on(&z, &traj.noise, alpha, 0.0, t)?;
        let c = young_bound_constant(alpha, bh, bp, t);
        times.push(t);
        lhs.push(est.value.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt());
        rhs.push(c * (z.sup_norm_on(0, i1) + z.holder_seminorm_on(bh, 0, i1)) * semi * t.powf(bp));
    }
    let mut report = AuditReport::new("integral_bound", times, lhs, rhs, 0.0);
    report.fitted.insert("omega_seminorm".into(), semi);
    Ok(report)
}
