//! Self-checks for a configured problem: operator adjoints, derivative
//! consistency and the basic information-theoretic invariants.

use std::fmt;

use cmi_dps_core::linalg::{min_eigenvalue, relative_l2, symmetrize};
use cmi_dps_core::rng::{standard_normal, stream, DATA_STREAM};
use cmi_dps_core::{
    cmi_value, finite_diff_grad, measurement_posterior_cov, CmiContext, HutchinsonConfig, InformationGram,
    LinearOperator, NoiseModel, ScoreModel, SpdFactor, DEFAULT_DENSE_LIMIT,
};
use nalgebra::DVector;

use crate::config::{DiagnoseSpec, Problem};
use crate::error::CliError;

const ADJOINT_PAIRS: usize = 100;
const ADJOINT_TOL: f64 = 1e-10;
const DENSE_OPERATOR_CHECK_LIMIT: usize = 256;
const HUTCHINSON_PROBES: [usize; 3] = [1, 100, 10_000];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Pass,
    Fail,
    Skipped,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub status: Status,
    pub detail: String,
}

impl Check {
    fn judge(name: &'static str, ok: bool, detail: String) -> Self {
        Self { name, status: if ok { Status::Pass } else { Status::Fail }, detail }
    }

    fn skip(name: &'static str, why: impl Into<String>) -> Self {
        Self { name, status: Status::Skipped, detail: why.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Report {
    pub checks: Vec<Check>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.status != Status::Fail)
    }

    pub fn get(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            let tag = match c.status {
                Status::Pass => "ok  ",
                Status::Fail => "FAIL",
                Status::Skipped => "skip",
            };
            writeln!(f, "[{tag}] {:<24} {}", c.name, c.detail)?;
        }
        Ok(())
    }
}

fn adjoint_check(a: &dyn LinearOperator, seed: u64) -> Result<Check, CliError> {
    let mut rng = stream(seed, 0xad);
    let mut worst = 0.0f64;
    for _ in 0..ADJOINT_PAIRS {
        let x = standard_normal(&mut rng, a.in_dim());
        let y = standard_normal(&mut rng, a.out_dim());
        let lhs = a.apply(&x)?.dot(&y);
        let rhs = x.dot(&a.adjoint(&y)?);
        worst = worst.max((lhs - rhs).abs() / lhs.abs().max(1.0));
    }
    Ok(Check::judge("adjoint", worst <= ADJOINT_TOL, format!("max |<Ax,y> - <x,A*y>| = {worst:.3e} over {ADJOINT_PAIRS} pairs")))
}

fn dense_check(a: &dyn LinearOperator, seed: u64) -> Result<Check, CliError> {
    if a.in_dim() > DENSE_OPERATOR_CHECK_LIMIT || a.out_dim() > DENSE_OPERATOR_CHECK_LIMIT {
        return Ok(Check::skip("dense matrix", "operator too large to materialize"));
    }
    let dense = a.to_dense()?;
    let mut rng = stream(seed, 0xde);
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let x = standard_normal(&mut rng, a.in_dim());
        let ax = a.apply(&x)?;
        worst = worst.max((&dense * &x - &ax).norm() / ax.norm().max(1.0));
        let y = standard_normal(&mut rng, a.out_dim());
        let aty = a.adjoint(&y)?;
        worst = worst.max((dense.transpose() * &y - &aty).norm() / aty.norm().max(1.0));
    }
    Ok(Check::judge("dense matrix", worst <= 1e-12, format!("max relative mismatch {worst:.3e}")))
}

/// Point `x_t ~ q(x_t | x₀)` with `x₀` from the prior, shared by all checks.
pub fn probe_point(problem: &Problem, t: usize, seed: u64) -> Result<DVector<f64>, CliError> {
    let mut rng = stream(seed, DATA_STREAM);
    let x0 = problem.prior.sample(&mut rng);
    let eps = standard_normal(&mut rng, problem.dim);
    Ok(problem.schedule.forward_marginal(&x0, t, &eps)?)
}

/// Runs every applicable check. CMI checks need `σ > 0` and a dimension
/// within the dense limit; otherwise they are reported as skipped.
pub fn diagnose_problem(problem: &Problem, spec: &DiagnoseSpec, seed: u64) -> Result<Report, CliError> {
    let n = problem.schedule.n_steps();
    let t = spec.t.unwrap_or((n / 3).max(1));
    problem.schedule.check_step(t)?;
    let a = problem.operator.as_ref();
    let model: &dyn ScoreModel = problem.model.as_ref();
    let mut checks = vec![adjoint_check(a, seed)?, dense_check(a, seed)?];

    let d = problem.dim;
    let x = probe_point(problem, t, seed)?;
    if d > DEFAULT_DENSE_LIMIT {
        let why = format!("dimension {d} exceeds the dense limit {DEFAULT_DENSE_LIMIT}");
        for name in CMI_CHECKS.iter().chain(["third symmetry"].iter()) {
            checks.push(Check::skip(name, why.clone()));
        }
        return Ok(Report { checks });
    }

    let third = model.third_tensor(&x, t)?;
    let defect = third.symmetry_defect();
    checks.push(Check::judge(
        "third symmetry",
        defect <= 1e-8 * third.max_abs().max(1.0),
        format!("max permutation defect {defect:.3e} at t={t}"),
    ));

    if !problem.noise.is_positive_definite() {
        for name in CMI_CHECKS {
            checks.push(Check::skip(name, "noise covariance is singular"));
        }
        return Ok(Report { checks });
    }
    checks.extend(cmi_checks(problem, spec, &x, t, seed)?);
    Ok(Report { checks })
}

const CMI_CHECKS: [&str; 6] =
    ["gradient vs fd", "reduced form", "duality", "hutchinson", "nonnegativity", "noise monotonicity"];

fn cmi_checks(
    problem: &Problem,
    spec: &DiagnoseSpec,
    x: &DVector<f64>,
    t: usize,
    seed: u64,
) -> Result<Vec<Check>, CliError> {
    let a = problem.operator.as_ref();
    let model: &dyn ScoreModel = problem.model.as_ref();
    let gram = InformationGram::new(a, &problem.noise)?;
    let ctx = CmiContext::new(model, &problem.schedule, &gram)?;
    let state = ctx.state(x, t)?;
    let exact = ctx.grad_exact_at(&state, x)?;
    let mut checks = Vec::new();

    let fd = finite_diff_grad(|z| ctx.value(z, t).unwrap_or(f64::NAN), x, spec.fd_step)?;
    let gap = (&exact - &fd).norm();
    checks.push(Check::judge(
        "gradient vs fd",
        gap <= 1e-4 * fd.norm() + 1e-8,
        format!("|exact - fd| = {gap:.3e}, |fd| = {:.3e}, |grad| = {:.3e}", fd.norm(), exact.norm()),
    ));

    let reduced = ctx.grad_exact_reduced(x, t)?;
    let rel = (&reduced - &exact).norm() / exact.norm().max(1e-300);
    let ok = (&reduced - &exact).norm() <= 1e-9 * exact.norm() + 1e-14;
    checks.push(Check::judge("reduced form", ok, format!("relative difference {rel:.3e}")));

    let value = state.value();
    let sp = &state.moments.sigma_post.sigma;
    let ad = a.to_dense()?;
    let m = a.out_dim();
    let noise_cov = problem.noise.covariance(m)?;
    let mut outer = &ad * sp * ad.transpose() + &noise_cov;
    symmetrize(&mut outer);
    let dual = 0.5 * (SpdFactor::new(&outer, "A Σ Aᵀ + Σn")?.log_det() - problem.noise.log_det(m)?);
    checks.push(Check::judge(
        "duality",
        (value - dual).abs() <= 1e-8 * value.abs().max(1.0),
        format!("I = {value:.12e}, measurement-space form differs by {:.3e}", (value - dual).abs()),
    ));

    checks.push(hutchinson_check(&ctx, &state, x, &exact, spec.probe_seeds, seed)?);

    let mut gap = sp - &state.posterior_y.sigma;
    symmetrize(&mut gap);
    let lam = min_eigenvalue(&gap);
    checks.push(Check::judge(
        "nonnegativity",
        value >= 0.0 && lam >= -1e-8 * sp.amax().max(1.0),
        format!("I = {value:.3e}, min eig(Σ - Σ_y) = {lam:.3e}"),
    ));

    checks.push(monotonicity_check(problem, &state.moments.sigma_post, a)?);
    Ok(checks)
}

fn hutchinson_check(
    ctx: &CmiContext<'_>,
    state: &cmi_dps_core::CmiState,
    x: &DVector<f64>,
    exact: &DVector<f64>,
    probe_seeds: u64,
    seed: u64,
) -> Result<Check, CliError> {
    if exact.norm() == 0.0 {
        return Ok(Check::judge("hutchinson", true, "exact gradient is identically zero".into()));
    }
    let mut errors = Vec::new();
    for &r in &HUTCHINSON_PROBES {
        let cfg = HutchinsonConfig { probes: r, two_term: false, parallel: true };
        let mut total = 0.0;
        for s in 0..probe_seeds.max(1) {
            let mut rng = stream(seed.wrapping_add(s), 0x4ac);
            total += relative_l2(&ctx.grad_hutchinson_at(state, x, &cfg, &mut rng)?.mean, exact);
        }
        errors.push(total / probe_seeds.max(1) as f64);
    }
    let decreasing = errors.windows(2).all(|w| w[1] < w[0]);
    // Error scales like r^{-1/2}; a factor 100 in r should buy well over 3x.
    let ok = decreasing && errors[2] < errors[0] / 10.0;
    let detail = HUTCHINSON_PROBES
        .iter()
        .zip(&errors)
        .map(|(r, e)| format!("r={r}: {e:.3e}"))
        .collect::<Vec<_>>()
        .join(", ");
    Ok(Check::judge("hutchinson", ok, format!("mean relative error {detail}")))
}

fn monotonicity_check(
    problem: &Problem,
    sigma_post: &cmi_dps_core::PosteriorCov,
    a: &dyn LinearOperator,
) -> Result<Check, CliError> {
    let NoiseModel::Scalar { sigma } = problem.noise else {
        return Ok(Check::skip("noise monotonicity", "only checked for scalar noise"));
    };
    let mut values = Vec::new();
    for factor in [0.5, 1.0, 2.0, 4.0] {
        let gram = InformationGram::new(a, &NoiseModel::scalar(sigma * factor)?)?;
        let py = measurement_posterior_cov(sigma_post, &gram)?;
        values.push(cmi_value(&sigma_post.sigma, &py.sigma)?);
    }
    let ok = values.windows(2).all(|w| w[1] < w[0]);
    let detail = values.iter().map(|v| format!("{v:.4e}")).collect::<Vec<_>>().join(" > ");
    Ok(Check::judge("noise monotonicity", ok, format!("I at σ×(0.5,1,2,4): {detail}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{ExperimentConfig, Problem};

    const CFG: &str = r#"
image = [3, 3]
[prior]
kind = "random_gmm"
dim = 9
components = 2
[operator]
kind = "blur"
kernel_size = 3
[[sampler]]
mode = "dps"
"#;

    #[test]
    fn healthy_problem_passes_every_check() {
        let (cfg, source) = ExperimentConfig::from_toml(CFG).unwrap();
        let problem = Problem::build(&cfg, &source).unwrap();
        let report = diagnose_problem(&problem, &cfg.diagnose, 1).unwrap();
        assert!(report.passed(), "{report}");
        assert!(report.checks.iter().all(|c| c.status == Status::Pass), "{report}");
    }

    #[test]
    fn gaussian_prior_has_zero_gradient() {
        let text = CFG.replace("kind = \"random_gmm\"\ndim = 9\ncomponents = 2", "kind = \"standard_normal\"\ndim = 9");
        let (cfg, source) = ExperimentConfig::from_toml(&text).unwrap();
        let problem = Problem::build(&cfg, &source).unwrap();
        let report = diagnose_problem(&problem, &cfg.diagnose, 1).unwrap();
        assert!(report.passed(), "{report}");
        assert!(report.get("hutchinson").unwrap().detail.contains("zero"));
    }
}
