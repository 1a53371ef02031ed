//! Reverse-diffusion samplers with measurement guidance and the CMI step.
//!
//! Every step starts from the DDPM ancestral update
//! `x' = √α_t(1 − ᾱ_{t−1})/(1 − ᾱ_t) · x_t + √ᾱ_{t−1} β_t/(1 − ᾱ_t) · x̃₀ + σ̃_t z`,
//! then optionally adds `η_t ∇_{x_t} I(x₀; y | x_t)`, then applies the
//! measurement correction of the chosen mode. All gradients are taken at
//! `x_t`.
//!
//! * `dps` subtracts `ζ₀ ∇_{x_t} ‖y − A x̃₀(x_t)‖`.
//! * `pigdm` adds `β_t/√α_t · Jᵀ Aᵀ (r_t² AAᵀ + Σ_n)⁻¹ (y − A x̃₀)` with
//!   `r_t² = (1 − ᾱ_t)/ᾱ_t`, the pseudoinverse-guided likelihood score
//!   pushed through the reverse-step drift.
//!
//! `J = (I + (1 − ᾱ_t) ∇² log p_t)/√ᾱ_t` is the Jacobian of the Tweedie
//! denoiser; it is symmetric, so `Jᵀ w` is one Hessian-vector product.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cmi::{CmiContext, HutchinsonConfig, InformationGram};
use crate::error::{check_len, Error, Result};
use crate::linalg::{symmetrize, SpdFactor};
use crate::operators::{LinearOperator, NoiseModel, OperatorDescriptor};
use crate::rng::{probe_stream, standard_normal, stream, SAMPLER_STREAM};
use crate::schedule::NoiseSchedule;
use crate::score::{tweedie_from_score, ScoreModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceMode {
    None,
    Dps,
    Pigdm,
    CmiDps,
    CmiPigdm,
}

impl GuidanceMode {
    pub const ALL: [GuidanceMode; 5] =
        [GuidanceMode::None, GuidanceMode::Dps, GuidanceMode::Pigdm, GuidanceMode::CmiDps, GuidanceMode::CmiPigdm];

    pub fn name(self) -> &'static str {
        match self {
            GuidanceMode::None => "none",
            GuidanceMode::Dps => "dps",
            GuidanceMode::Pigdm => "pigdm",
            GuidanceMode::CmiDps => "cmi_dps",
            GuidanceMode::CmiPigdm => "cmi_pigdm",
        }
    }

    pub fn uses_cmi(self) -> bool {
        matches!(self, GuidanceMode::CmiDps | GuidanceMode::CmiPigdm)
    }

    fn correction(self) -> Correction {
        match self {
            GuidanceMode::None => Correction::None,
            GuidanceMode::Dps | GuidanceMode::CmiDps => Correction::Dps,
            GuidanceMode::Pigdm | GuidanceMode::CmiPigdm => Correction::Pigdm,
        }
    }
}

impl std::fmt::Display for GuidanceMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for GuidanceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        GuidanceMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::config(format!("unknown guidance mode `{s}`")))
    }
}

enum Correction {
    None,
    Dps,
    Pigdm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CmiMode {
    #[default]
    Exact,
    Hutchinson,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceConfig {
    pub mode: GuidanceMode,
    /// CMI step scale `η₀`.
    pub eta0: f64,
    /// DPS step scale `ζ₀`.
    pub zeta0: f64,
    pub cmi_mode: CmiMode,
    pub probes: usize,
    /// Use `η_t = η₀ / (‖∇I‖ + 1e-12)` instead of the constant `η₀`.
    pub normalize_cmi_step: bool,
    pub two_term: bool,
    pub parallel_probes: bool,
    pub seed: u64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            mode: GuidanceMode::Dps,
            eta0: 0.05,
            zeta0: 1.0,
            cmi_mode: CmiMode::Exact,
            probes: 8,
            normalize_cmi_step: false,
            two_term: false,
            parallel_probes: false,
            seed: 0,
        }
    }
}

impl GuidanceConfig {
    pub fn new(mode: GuidanceMode, seed: u64) -> Self {
        Self { mode, seed, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta0.is_finite() && self.eta0 >= 0.0) {
            return Err(Error::config(format!("eta0 = {} must be finite and nonnegative", self.eta0)));
        }
        if !(self.zeta0.is_finite() && self.zeta0 >= 0.0) {
            return Err(Error::config(format!("zeta0 = {} must be finite and nonnegative", self.zeta0)));
        }
        if self.cmi_mode == CmiMode::Hutchinson && self.probes < 1 {
            return Err(Error::config("probes must be at least 1 for the Hutchinson estimator"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub t: usize,
    /// `‖∇I‖`, present for CMI modes.
    pub grad_norm: Option<f64>,
    pub cmi: Option<f64>,
    pub jitter: f64,
    /// `‖y − A x̃₀(x_t)‖`.
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    pub mode: GuidanceMode,
    pub eta0: f64,
    pub zeta0: f64,
    pub r: usize,
    pub config: GuidanceConfig,
    pub operator: OperatorDescriptor,
    pub steps: Vec<StepDiagnostics>,
    pub x0: Vec<f64>,
    pub wall_ms: f64,
}

impl RunRecord {
    /// Number of steps at which the CMI gradient was nonzero.
    pub fn cmi_steps_nonzero(&self) -> usize {
        self.steps.iter().filter(|s| s.grad_norm.is_some_and(|g| g > 0.0)).count()
    }
}

fn ancestral_coefficients(schedule: &NoiseSchedule, t: usize) -> Result<(f64, f64, f64)> {
    let ab = schedule.alpha_bar(t)?;
    let ab_prev = schedule.alpha_bar(t - 1)?;
    let beta = schedule.beta(t)?;
    let denom = 1.0 - ab;
    let c_x = schedule.alpha(t)?.sqrt() * (1.0 - ab_prev) / denom;
    let c_0 = ab_prev.sqrt() * beta / denom;
    Ok((c_x, c_0, schedule.sampler_std(t)?))
}

/// One DDPM ancestral update from `x_t` (pass `z = 0` for a noiseless step).
pub fn ddpm_ancestral_step(
    x_t: &DVector<f64>,
    t: usize,
    model: &dyn ScoreModel,
    schedule: &NoiseSchedule,
    z: &DVector<f64>,
) -> Result<DVector<f64>> {
    check_len("x_t", x_t.len(), model.dim())?;
    check_len("z", z.len(), model.dim())?;
    let ab = schedule.alpha_bar(t)?;
    let x0 = tweedie_from_score(x_t, &model.score(x_t, t)?, ab);
    let (c_x, c_0, std) = ancestral_coefficients(schedule, t)?;
    Ok(x_t * c_x + x0 * c_0 + z * std)
}

/// `Jᵀ w` for the Tweedie Jacobian at `x_t`.
fn tweedie_jt(model: &dyn ScoreModel, x_t: &DVector<f64>, t: usize, ab: f64, w: &DVector<f64>) -> Result<DVector<f64>> {
    Ok((w + model.hvp(x_t, t, w)? * (1.0 - ab)) / ab.sqrt())
}

/// `ζ₀ ∇_{x_t} ‖y − A x̃₀(x_t)‖`; zero when the residual vanishes.
pub fn dps_correction(
    x_t: &DVector<f64>,
    t: usize,
    model: &dyn ScoreModel,
    schedule: &NoiseSchedule,
    a: &dyn LinearOperator,
    y: &DVector<f64>,
    zeta0: f64,
) -> Result<DVector<f64>> {
    let ab = schedule.alpha_bar(t)?;
    let x0 = tweedie_from_score(x_t, &model.score(x_t, t)?, ab);
    dps_from_denoised(x_t, t, ab, &x0, model, a, y, zeta0)
}

#[allow(clippy::too_many_arguments)]
fn dps_from_denoised(
    x_t: &DVector<f64>,
    t: usize,
    ab: f64,
    x0: &DVector<f64>,
    model: &dyn ScoreModel,
    a: &dyn LinearOperator,
    y: &DVector<f64>,
    zeta0: f64,
) -> Result<DVector<f64>> {
    let res = y - a.apply(x0)?;
    let norm = res.norm();
    if norm == 0.0 {
        return Ok(DVector::zeros(x_t.len()));
    }
    let back = a.adjoint(&(res / norm))?;
    Ok(tweedie_jt(model, x_t, t, ab, &back)? * -zeta0)
}

/// `β_t/√α_t · Jᵀ Aᵀ (r_t² AAᵀ + Σ_n)⁻¹ (y − A x̃₀)`.
pub fn pigdm_correction(
    x_t: &DVector<f64>,
    t: usize,
    model: &dyn ScoreModel,
    schedule: &NoiseSchedule,
    a: &dyn LinearOperator,
    noise: &NoiseModel,
    y: &DVector<f64>,
) -> Result<DVector<f64>> {
    let ab = schedule.alpha_bar(t)?;
    let x0 = tweedie_from_score(x_t, &model.score(x_t, t)?, ab);
    let outer = PigdmOuter::new(a)?;
    pigdm_from_denoised(x_t, t, schedule, &x0, model, a, &outer, noise, y)
}

/// `AAᵀ` and the noise covariance, cached across steps.
struct PigdmOuter {
    aat: DMatrix<f64>,
}

impl PigdmOuter {
    fn new(a: &dyn LinearOperator) -> Result<Self> {
        let ad = a.to_dense()?;
        Ok(Self { aat: &ad * ad.transpose() })
    }
}

#[allow(clippy::too_many_arguments)]
fn pigdm_from_denoised(
    x_t: &DVector<f64>,
    t: usize,
    schedule: &NoiseSchedule,
    x0: &DVector<f64>,
    model: &dyn ScoreModel,
    a: &dyn LinearOperator,
    outer: &PigdmOuter,
    noise: &NoiseModel,
    y: &DVector<f64>,
) -> Result<DVector<f64>> {
    let ab = schedule.alpha_bar(t)?;
    let res = y - a.apply(x0)?;
    if res.iter().all(|v| *v == 0.0) {
        return Ok(DVector::zeros(x_t.len()));
    }
    let r2 = (1.0 - ab) / ab;
    let mut s = &outer.aat * r2 + noise.covariance(res.len())?;
    symmetrize(&mut s);
    let weighted = SpdFactor::new(&s, "r_t² AAᵀ + Σ_n")?.solve_vec(&res);
    let back = a.adjoint(&weighted)?;
    let scale = schedule.beta(t)? / schedule.alpha(t)?.sqrt();
    Ok(tweedie_jt(model, x_t, t, ab, &back)? * scale)
}

/// Runs the reverse chain from `x_N ~ N(0, I)` to `x₀`.
///
/// `x_N` and the per-step noise come from the sampler stream of
/// `config.seed`, shared by every mode, so different modes at one seed are
/// paired. Hutchinson probes use a separate stream keyed by the mode name.
pub fn sample(
    y: &DVector<f64>,
    a: &dyn LinearOperator,
    noise: &NoiseModel,
    model: &dyn ScoreModel,
    schedule: &NoiseSchedule,
    config: &GuidanceConfig,
) -> Result<RunRecord> {
    config.validate()?;
    let d = model.dim();
    check_len("operator input", a.in_dim(), d)?;
    check_len("y", y.len(), a.out_dim())?;
    let started = Instant::now();

    let gram = if config.mode.uses_cmi() { Some(InformationGram::new(a, noise)?) } else { None };
    let cmi = gram.as_ref().map(|g| CmiContext::new(model, schedule, g)).transpose()?;
    let pigdm = match config.mode.correction() {
        Correction::Pigdm => Some(PigdmOuter::new(a)?),
        _ => None,
    };
    let hutch = HutchinsonConfig { probes: config.probes, two_term: config.two_term, parallel: config.parallel_probes };

    let mut rng = stream(config.seed, SAMPLER_STREAM);
    let mut probe_rng = probe_stream(config.seed, config.mode.name());
    let mut x = standard_normal(&mut rng, d);
    let mut steps = Vec::with_capacity(schedule.n_steps());

    for t in (1..=schedule.n_steps()).rev() {
        let ab = schedule.alpha_bar(t)?;
        let x0 = tweedie_from_score(&x, &model.score(&x, t)?, ab);
        let (c_x, c_0, std) = ancestral_coefficients(schedule, t)?;
        let mut next = &x * c_x + &x0 * c_0;
        if t > 1 {
            next += standard_normal(&mut rng, d) * std;
        }

        let mut diag = StepDiagnostics { t, grad_norm: None, cmi: None, jitter: 0.0, residual: 0.0 };
        if let Some(ctx) = &cmi {
            let state = ctx.state(&x, t)?;
            let grad = match config.cmi_mode {
                CmiMode::Exact => ctx.grad_exact_at(&state, &x)?,
                CmiMode::Hutchinson => ctx.grad_hutchinson_at(&state, &x, &hutch, &mut probe_rng)?.mean,
            };
            let norm = grad.norm();
            let eta = if config.normalize_cmi_step { config.eta0 / (norm + 1e-12) } else { config.eta0 };
            next += grad * eta;
            diag.grad_norm = Some(norm);
            diag.cmi = Some(state.value());
            diag.jitter = state.jitter();
        }

        match config.mode.correction() {
            Correction::None => {}
            Correction::Dps => next -= dps_from_denoised(&x, t, ab, &x0, model, a, y, config.zeta0)?,
            Correction::Pigdm => {
                let outer = pigdm.as_ref().expect("built for pigdm modes");
                next += pigdm_from_denoised(&x, t, schedule, &x0, model, a, outer, noise, y)?;
            }
        }

        diag.residual = (y - a.apply(&x0)?).norm();
        steps.push(diag);
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { t });
        }
        x = next;
    }

    Ok(RunRecord {
        seed: config.seed,
        mode: config.mode,
        eta0: config.eta0,
        zeta0: config.zeta0,
        r: config.probes,
        config: config.clone(),
        operator: a.describe(),
        steps,
        x0: x.as_slice().to_vec(),
        wall_ms: started.elapsed().as_secs_f64() * 1e3,
    })
}

/// Draws `(x₀, y)` for a seed from its data stream.
pub fn draw_problem<R: Rng + ?Sized>(
    sample_prior: impl FnOnce(&mut R) -> DVector<f64>,
    a: &dyn LinearOperator,
    noise: &NoiseModel,
    rng: &mut R,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let x0 = sample_prior(rng);
    let y = crate::operators::measure(a, noise, &x0, rng)?;
    Ok((x0, y))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracles::finite_diff_grad;
    use crate::operators::{make_random_mask, DenseOperator, Selection};
    use crate::rng::DATA_STREAM;
    use crate::schedule::ScheduleKind;
    use crate::score::{DiffusedGmm, GaussianMixturePrior};
    use std::sync::Arc;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    fn standard(d: usize, schedule: &Arc<NoiseSchedule>) -> DiffusedGmm {
        DiffusedGmm::new(GaussianMixturePrior::standard_normal(d).unwrap(), schedule.clone())
    }

    #[test]
    fn ancestral_step_examples() {
        let two = Arc::new(NoiseSchedule::build(ScheduleKind::Linear, 2, 0.1, 0.2).unwrap());
        let model = standard(2, &two);
        let x2 = v(&[1.0, 0.0]);
        let x1 = ddpm_ancestral_step(&x2, 2, &model, &two, &DVector::zeros(2)).unwrap();
        assert!((x1[0] - 0.8944271909999157).abs() < 1e-15);
        assert_eq!(x1[1], 0.0);

        // β_t → 0 with ᾱ_{t−1} away from 1: α_t = 1 and ᾱ_{t−1} = ᾱ_t
        let tiny = Arc::new(NoiseSchedule::from_betas(vec![0.3, 1e-13]).unwrap());
        let gmm = GaussianMixturePrior::random(2, 2, 1.0, &mut stream(1, 0)).unwrap();
        let model = DiffusedGmm::new(gmm, tiny.clone());
        let x = v(&[0.3, -0.7]);
        let out = ddpm_ancestral_step(&x, 2, &model, &tiny, &DVector::zeros(2)).unwrap();
        assert!((out - x).amax() < 1e-10);
    }

    #[test]
    fn dps_correction_examples() {
        let schedule = Arc::new(NoiseSchedule::ddpm_equivalent(20).unwrap());
        let model = standard(3, &schedule);
        let a = Selection::new(3, vec![0, 2]).unwrap();
        let x = v(&[0.5, -0.2, 0.9]);
        let t = 7;
        let ab = schedule.alpha_bar(t).unwrap();
        let x0 = &x * ab.sqrt();
        let exact_y = a.apply(&crate::score::tweedie_denoise(&model, &schedule, &x, t).unwrap()).unwrap();
        assert_eq!(dps_correction(&x, t, &model, &schedule, &a, &exact_y, 1.0).unwrap(), DVector::zeros(3));

        let y = v(&[1.0, -1.0]);
        let res = &y - a.apply(&x0).unwrap();
        let want = a.adjoint(&res).unwrap() * (-0.7 * ab.sqrt() / res.norm());
        let got = dps_correction(&x, t, &model, &schedule, &a, &y, 0.7).unwrap();
        assert!((got - want).amax() < 1e-14);

        let gmm = DiffusedGmm::new(GaussianMixturePrior::random(2, 3, 1.0, &mut stream(5, 0)).unwrap(), schedule.clone());
        let a = Selection::new(2, vec![1]).unwrap();
        let y = v(&[0.4]);
        let x = v(&[0.1, -0.3]);
        let got = dps_correction(&x, t, &gmm, &schedule, &a, &y, 1.0).unwrap();
        let f = |z: &DVector<f64>| {
            let x0 = crate::score::tweedie_denoise(&gmm, &schedule, z, t).unwrap();
            (&y - a.apply(&x0).unwrap()).norm()
        };
        let fd = finite_diff_grad(f, &x, 1e-5).unwrap();
        assert!((got - fd).amax() < 1e-5);
    }

    #[test]
    fn pigdm_correction_examples() {
        let schedule = Arc::new(NoiseSchedule::ddpm_equivalent(20).unwrap());
        let model = standard(2, &schedule);
        let id = DenseOperator::identity(2);
        let x = v(&[0.3, 0.1]);
        let t = 5;
        let y = crate::score::tweedie_denoise(&model, &schedule, &x, t).unwrap();
        let noiseless = NoiseModel::scalar(0.0).unwrap();
        assert_eq!(pigdm_correction(&x, t, &model, &schedule, &id, &noiseless, &y).unwrap(), DVector::zeros(2));

        // scalar case evaluated by hand: J = √ᾱ for a standard-normal prior
        let one = standard(1, &schedule);
        let a = DenseOperator::new(DMatrix::from_element(1, 1, 2.0));
        let noise = NoiseModel::scalar(0.1).unwrap();
        let (xt, yv) = (v(&[0.8]), v(&[0.5]));
        let got = pigdm_correction(&xt, t, &one, &schedule, &a, &noise, &yv).unwrap()[0];
        let ab = schedule.alpha_bar(t).unwrap();
        let x0 = 0.8 * ab.sqrt();
        let r2 = (1.0 - ab) / ab;
        let want = schedule.beta(t).unwrap() / schedule.alpha(t).unwrap().sqrt()
            * ab.sqrt()
            * 2.0
            * (0.5 - 2.0 * x0)
            / (4.0 * r2 + 0.01);
        assert!((got - want).abs() < 1e-14 * want.abs().max(1.0));
    }

    #[test]
    fn unconditional_sampler_reproduces_standard_normal() {
        let schedule = Arc::new(NoiseSchedule::ddpm_equivalent(100).unwrap());
        let model = standard(2, &schedule);
        let a = DenseOperator::identity(2);
        let noise = NoiseModel::scalar(0.05).unwrap();
        let y = DVector::zeros(2);
        let n = 10_000;
        let mut sum = DVector::zeros(2);
        let mut sq = DVector::zeros(2);
        for seed in 0..n {
            let rec = sample(&y, &a, &noise, &model, &schedule, &GuidanceConfig::new(GuidanceMode::None, seed)).unwrap();
            let x = v(&rec.x0);
            sum += &x;
            sq += x.component_mul(&x);
        }
        // The σ̃ ancestral chain is not exactly variance preserving at finite N;
        // propagate the per-step variance map Var' = (c_x + c_0 √ᾱ_t)² Var + σ̃_t².
        let mut expected_var = 1.0;
        for t in (1..=schedule.n_steps()).rev() {
            let i = t - 1;
            let (b, ab) = (schedule.betas()[i], schedule.alpha_bars()[i]);
            let ab_prev = if i == 0 { 1.0 } else { schedule.alpha_bars()[i - 1] };
            let gain = (1.0 - b).sqrt() * (1.0 - ab_prev) / (1.0 - ab) + ab_prev.sqrt() * b / (1.0 - ab) * ab.sqrt();
            let noise_var = if t > 1 { (1.0 - ab_prev) / (1.0 - ab) * b } else { 0.0 };
            expected_var = gain * gain * expected_var + noise_var;
        }
        assert!(expected_var > 0.9 && expected_var < 0.95);
        let nf = n as f64;
        for k in 0..2 {
            let mean = sum[k] / nf;
            let var = sq[k] / nf - mean * mean;
            assert!(mean.abs() < 3.0 * (expected_var / nf).sqrt(), "mean {mean}");
            assert!((var - expected_var).abs() < 3.0 * expected_var * (2.0 / nf).sqrt(), "var {var} vs {expected_var}");
        }
    }

    #[test]
    fn final_step_is_noiseless_and_runs_are_deterministic() {
        let schedule = Arc::new(NoiseSchedule::ddpm_equivalent(30).unwrap());
        let gmm = DiffusedGmm::new(GaussianMixturePrior::random(4, 3, 1.0, &mut stream(3, 0)).unwrap(), schedule.clone());
        let a = make_random_mask(4, 0.5, &mut stream(3, 1)).unwrap();
        let noise = NoiseModel::scalar(0.05).unwrap();
        let (_, y) = draw_problem(|r| gmm.prior().sample(r), &a, &noise, &mut stream(3, DATA_STREAM)).unwrap();
        for mode in GuidanceMode::ALL {
            for cmi_mode in [CmiMode::Exact, CmiMode::Hutchinson] {
                let cfg = GuidanceConfig { cmi_mode, ..GuidanceConfig::new(mode, 9) };
                let first = sample(&y, &a, &noise, &gmm, &schedule, &cfg).unwrap();
                let par = GuidanceConfig { parallel_probes: true, ..cfg.clone() };
                let second = sample(&y, &a, &noise, &gmm, &schedule, &par).unwrap();
                assert_eq!(first.x0, second.x0, "{mode}");
                assert_eq!(first.steps.last().unwrap().t, 1);
                assert_eq!(first.steps.len(), 30);
                assert_eq!(first.cmi_steps_nonzero() > 0, mode.uses_cmi());
            }
        }
    }

    #[test]
    fn cmi_step_is_a_plug_in() {
        let schedule = Arc::new(NoiseSchedule::ddpm_equivalent(25).unwrap());
        let a = make_random_mask(3, 0.5, &mut stream(4, 1)).unwrap();
        let noise = NoiseModel::scalar(0.05).unwrap();
        let y = v(&[0.2, -0.4]);

        let gmm = DiffusedGmm::new(GaussianMixturePrior::random(3, 2, 1.0, &mut stream(4, 0)).unwrap(), schedule.clone());
        let dps = sample(&y, &a, &noise, &gmm, &schedule, &GuidanceConfig::new(GuidanceMode::Dps, 2)).unwrap();
        let off = GuidanceConfig { eta0: 0.0, ..GuidanceConfig::new(GuidanceMode::CmiDps, 2) };
        assert_eq!(sample(&y, &a, &noise, &gmm, &schedule, &off).unwrap().x0, dps.x0);
        let on = sample(&y, &a, &noise, &gmm, &schedule, &GuidanceConfig::new(GuidanceMode::CmiDps, 2)).unwrap();
        assert_ne!(on.x0, dps.x0);

        let gauss = DiffusedGmm::new(
            GaussianMixturePrior::gaussian(v(&[0.5, 0.0, -0.5]), DMatrix::identity(3, 3) * 0.4).unwrap(),
            schedule.clone(),
        );
        for cmi_mode in [CmiMode::Exact, CmiMode::Hutchinson] {
            let base = sample(&y, &a, &noise, &gauss, &schedule, &GuidanceConfig::new(GuidanceMode::Dps, 6)).unwrap();
            let cfg = GuidanceConfig { cmi_mode, ..GuidanceConfig::new(GuidanceMode::CmiDps, 6) };
            let with = sample(&y, &a, &noise, &gauss, &schedule, &cfg).unwrap();
            assert_eq!(with.x0, base.x0);
            assert_eq!(with.cmi_steps_nonzero(), 0);
        }
    }

    #[test]
    fn pigdm_beats_unguided_sampling() {
        let schedule = Arc::new(NoiseSchedule::ddpm_equivalent(50).unwrap());
        let gmm = DiffusedGmm::new(GaussianMixturePrior::random(2, 3, 1.5, &mut stream(8, 0)).unwrap(), schedule.clone());
        let a = Selection::new(2, vec![0]).unwrap();
        let noise = NoiseModel::scalar(0.05).unwrap();
        let (mut none_mse, mut pigdm_mse) = (0.0, 0.0);
        for seed in 0..50u64 {
            let (x0, y) = draw_problem(|r| gmm.prior().sample(r), &a, &noise, &mut stream(seed, DATA_STREAM)).unwrap();
            for (mode, acc) in [(GuidanceMode::None, &mut none_mse), (GuidanceMode::Pigdm, &mut pigdm_mse)] {
                let rec = sample(&y, &a, &noise, &gmm, &schedule, &GuidanceConfig::new(mode, seed)).unwrap();
                *acc += (v(&rec.x0) - &x0).norm_squared();
            }
        }
        assert!(pigdm_mse < none_mse, "pigdm {pigdm_mse} vs none {none_mse}");
    }

    #[test]
    fn invalid_configs_and_shapes_are_rejected() {
        let schedule = Arc::new(NoiseSchedule::ddpm_equivalent(5).unwrap());
        let model = standard(2, &schedule);
        let a = DenseOperator::identity(2);
        let noise = NoiseModel::scalar(0.05).unwrap();
        let bad = GuidanceConfig { eta0: -1.0, ..Default::default() };
        assert!(matches!(sample(&v(&[0.0, 0.0]), &a, &noise, &model, &schedule, &bad), Err(Error::Config(_))));
        let bad = GuidanceConfig { cmi_mode: CmiMode::Hutchinson, probes: 0, ..Default::default() };
        assert!(bad.validate().is_err());
        assert!(matches!(
            sample(&v(&[0.0]), &a, &noise, &model, &schedule, &GuidanceConfig::default()),
            Err(Error::Shape(_))
        ));
        assert_eq!("cmi_pigdm".parse::<GuidanceMode>().unwrap(), GuidanceMode::CmiPigdm);
        assert!("cmi".parse::<GuidanceMode>().is_err());
    }

    #[test]
    fn non_finite_state_aborts_with_the_offending_step() {
        let schedule = Arc::new(NoiseSchedule::ddpm_equivalent(10).unwrap());
        let model = crate::score::ScoreFn::new(1, |x, t| if t == 4 { x.map(|_| f64::NAN) } else { -x });
        let a = DenseOperator::identity(1);
        let noise = NoiseModel::scalar(0.05).unwrap();
        match sample(&v(&[3.0]), &a, &noise, &model, &schedule, &GuidanceConfig::new(GuidanceMode::None, 1)) {
            Err(Error::NonFinite { t }) => assert_eq!(t, 4),
            other => panic!("expected a non-finite abort, got {other:?}"),
        }
    }
}
