//! Conditional mutual information `I(x₀; y | x_t)` under a Gaussian
//! approximation of `p(x₀ | x_t)`, and its gradient in `x_t`.
//!
//! With `Σ_p = (1 − ᾱ)/ᾱ · (I + (1 − ᾱ) ∇² log p_t)` and
//! `Σ_py = (Σ_p⁻¹ + AᵀΣ_n⁻¹A)⁻¹`, the information is
//! `½ (log det Σ_p − log det Σ_py)`. Two gradient paths are provided: an exact
//! one built from the dense third-derivative tensor and a matrix-free
//! Hutchinson estimate that needs one third-order bilinear call per probe.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::linalg::{min_eigenvalue, symmetrize, SpdFactor, Tensor3};
use crate::operators::{LinearOperator, NoiseModel};
use crate::rng::rademacher;
use crate::schedule::NoiseSchedule;
use crate::score::{tweedie_from_score, ScoreModel};

/// Smallest eigenvalue tolerated in `I + (1 − ᾱ) ∇² log p_t` before jitter.
pub const SPD_EPSILON: f64 = 1e-8;

/// `Σ_post` with its Cholesky factor.
#[derive(Debug, Clone)]
pub struct PosteriorCov {
    pub sigma: DMatrix<f64>,
    pub factor: SpdFactor,
    /// Amount added to the diagonal of `I + (1 − ᾱ)H` (zero when none was needed).
    pub jitter: f64,
}

/// Tweedie mean and covariance of `p(x₀ | x_t)`.
#[derive(Debug, Clone)]
pub struct PosteriorMoments {
    pub t: usize,
    pub mu_post: DVector<f64>,
    pub sigma_post: PosteriorCov,
}

/// `Σ_post,y` with its Cholesky factor.
#[derive(Debug, Clone)]
pub struct MeasurementPosterior {
    pub sigma: DMatrix<f64>,
    pub factor: SpdFactor,
}

/// `AᵀΣ_n⁻¹A` together with the dense operator and noise it came from.
#[derive(Debug, Clone)]
pub struct InformationGram {
    gram: DMatrix<f64>,
    a_dense: DMatrix<f64>,
    noise: NoiseModel,
    is_zero: bool,
}

impl InformationGram {
    pub fn new(a: &dyn LinearOperator, noise: &NoiseModel) -> Result<Self> {
        Self::from_dense(a.to_dense()?, noise.clone())
    }

    pub fn from_dense(a_dense: DMatrix<f64>, noise: NoiseModel) -> Result<Self> {
        let d = a_dense.ncols();
        let is_zero = a_dense.nrows() == 0 || a_dense.iter().all(|v| *v == 0.0);
        let gram = if is_zero {
            DMatrix::zeros(d, d)
        } else {
            let mut g = a_dense.tr_mul(&noise.solve(&a_dense)?);
            symmetrize(&mut g);
            g
        };
        Ok(Self { gram, a_dense, noise, is_zero })
    }

    pub fn dim(&self) -> usize {
        self.gram.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.gram
    }

    pub fn operator_matrix(&self) -> &DMatrix<f64> {
        &self.a_dense
    }

    pub fn noise(&self) -> &NoiseModel {
        &self.noise
    }

    pub fn is_zero(&self) -> bool {
        self.is_zero
    }
}

/// `Σ_post = (1 − ᾱ_t)/ᾱ_t · (I + (1 − ᾱ_t) H)`, regularized to be SPD.
pub fn posterior_cov(hessian: &DMatrix<f64>, schedule: &NoiseSchedule, t: usize) -> Result<PosteriorCov> {
    let ab = schedule.alpha_bar(t)?;
    if ab <= 0.0 {
        return Err(Error::DegenerateStep(format!("alpha_bar is zero at t={t}")));
    }
    if !hessian.is_square() {
        return Err(Error::shape("hessian is not square"));
    }
    let d = hessian.nrows();
    let mut inner = hessian * (1.0 - ab);
    for i in 0..d {
        inner[(i, i)] += 1.0;
    }
    symmetrize(&mut inner);
    let lambda_min = min_eigenvalue(&inner);
    let jitter = if lambda_min < SPD_EPSILON { SPD_EPSILON - lambda_min } else { 0.0 };
    for i in 0..d {
        inner[(i, i)] += jitter;
    }
    let sigma = inner * ((1.0 - ab) / ab);
    let factor = SpdFactor::new(&sigma, "posterior covariance")?;
    Ok(PosteriorCov { sigma, factor, jitter })
}

/// `(Σ_post⁻¹ + G)⁻¹` evaluated as `L (I + LᵀGL)⁻¹ Lᵀ` with `Σ_post = LLᵀ`.
pub fn measurement_posterior_cov(sigma_post: &PosteriorCov, gram: &InformationGram) -> Result<MeasurementPosterior> {
    let d = sigma_post.sigma.nrows();
    check_len("information gram", gram.dim(), d)?;
    if gram.is_zero() {
        return Ok(MeasurementPosterior { sigma: sigma_post.sigma.clone(), factor: sigma_post.factor.clone() });
    }
    let l = sigma_post.factor.l();
    let mut inner = l.tr_mul(&(gram.matrix() * &l));
    for i in 0..d {
        inner[(i, i)] += 1.0;
    }
    symmetrize(&mut inner);
    let w = SpdFactor::new(&inner, "I + LᵀGL")?.l();
    let zt = w
        .solve_lower_triangular(&l.transpose())
        .ok_or_else(|| Error::Factorization("singular factor of I + LᵀGL".into()))?;
    let mut sigma = zt.tr_mul(&zt);
    symmetrize(&mut sigma);
    let factor = SpdFactor::new(&sigma, "measurement posterior covariance")?;
    Ok(MeasurementPosterior { sigma, factor })
}

/// `½ (log det Σ_post − log det Σ_post,y)` in nats.
pub fn cmi_value(sigma_post: &DMatrix<f64>, sigma_post_y: &DMatrix<f64>) -> Result<f64> {
    let p = SpdFactor::new(sigma_post, "posterior covariance")?;
    let py = SpdFactor::new(sigma_post_y, "measurement posterior covariance")?;
    check_len("measurement posterior covariance", py.dim(), p.dim())?;
    Ok(cmi_from_factors(&p, &py))
}

fn cmi_from_factors(p: &SpdFactor, py: &SpdFactor) -> f64 {
    0.5 * (p.log_det() - py.log_det())
}

/// Differential entropy `½ log det(2πe Σ)`.
pub fn gaussian_entropy(sigma: &DMatrix<f64>) -> Result<f64> {
    let f = SpdFactor::new(sigma, "covariance")?;
    let d = sigma.nrows() as f64;
    Ok(0.5 * (d * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln() + f.log_det()))
}

fn check_square(name: &str, m: &DMatrix<f64>, d: usize) -> Result<()> {
    if m.shape() != (d, d) {
        return Err(Error::shape(format!("{name} is {}x{}, expected {d}x{d}", m.nrows(), m.ncols())));
    }
    Ok(())
}

/// `[E ⊙₁ F]_{:,:,k} = E · F_{:,:,k}`.
pub fn contract1(e: &DMatrix<f64>, f: &Tensor3) -> Result<Tensor3> {
    check_square("E", e, f.dim())?;
    let slices: Vec<DMatrix<f64>> = (0..f.dim()).map(|k| e * f.slice(k)).collect();
    Tensor3::from_slices(&slices)
}

/// `[F ⊙₂ E]_{:,:,k} = F_{:,:,k} · E`.
pub fn contract2(f: &Tensor3, e: &DMatrix<f64>) -> Result<Tensor3> {
    check_square("E", e, f.dim())?;
    let slices: Vec<DMatrix<f64>> = (0..f.dim()).map(|k| f.slice(k) * e).collect();
    Tensor3::from_slices(&slices)
}

/// Entry `k` is `Tr(M · F_{:,:,k})`.
pub fn trace_slices(m: &DMatrix<f64>, f: &Tensor3) -> Result<DVector<f64>> {
    let d = f.dim();
    check_square("M", m, d)?;
    // Tr(M F) = Σ_ij M_ji F_ij
    let mt = m.transpose();
    Ok(DVector::from_fn(d, |k, _| mt.iter().zip(f.slice(k).iter()).map(|(a, b)| a * b).sum()))
}

/// `∇_x Σ_post = (1 − ᾱ_t)²/ᾱ_t · ∇³ log p_t`.
pub fn grad_sigma_post(third: &Tensor3, schedule: &NoiseSchedule, t: usize) -> Result<Tensor3> {
    let ab = schedule.alpha_bar(t)?;
    if ab <= 0.0 {
        return Err(Error::DegenerateStep(format!("alpha_bar is zero at t={t}")));
    }
    Ok(third.scale((1.0 - ab).powi(2) / ab))
}

/// `Σ_py ⊙₁ [Σ_p⁻¹ ⊙₁ ∇Σ_p ⊙₂ Σ_p⁻¹] ⊙₂ Σ_py`, computed slice-wise as
/// `Wᵀ F_k W` with `W = Σ_p⁻¹ Σ_py`.
pub fn grad_sigma_post_y(
    sigma_post: &PosteriorCov,
    sigma_post_y: &MeasurementPosterior,
    grad_sp: &Tensor3,
) -> Result<Tensor3> {
    let d = grad_sp.dim();
    check_square("posterior covariance", &sigma_post.sigma, d)?;
    check_square("measurement posterior covariance", &sigma_post_y.sigma, d)?;
    let w = sigma_post.factor.solve_mat(&sigma_post_y.sigma);
    let slices: Vec<DMatrix<f64>> = (0..d)
        .map(|k| {
            let mut s = w.tr_mul(&(grad_sp.slice(k) * &w));
            symmetrize(&mut s);
            s
        })
        .collect();
    Tensor3::from_slices(&slices)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HutchinsonConfig {
    pub probes: usize,
    /// Estimate the two trace terms separately instead of through the combined matrix.
    pub two_term: bool,
    pub parallel: bool,
}

impl Default for HutchinsonConfig {
    fn default() -> Self {
        Self { probes: 8, two_term: false, parallel: false }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HutchinsonEstimate {
    pub mean: DVector<f64>,
    /// Single-probe estimates; `mean` is their average.
    pub per_probe: Vec<DVector<f64>>,
}

/// Everything needed to evaluate the CMI and its gradient at any `(x_t, t)`.
#[derive(Clone, Copy)]
pub struct CmiContext<'a> {
    pub model: &'a dyn ScoreModel,
    pub schedule: &'a NoiseSchedule,
    pub gram: &'a InformationGram,
}

/// Covariances at one point, reusable across value and gradient evaluations.
#[derive(Debug, Clone)]
pub struct CmiState {
    pub t: usize,
    pub moments: PosteriorMoments,
    pub posterior_y: MeasurementPosterior,
}

impl CmiState {
    pub fn value(&self) -> f64 {
        cmi_from_factors(&self.moments.sigma_post.factor, &self.posterior_y.factor)
    }

    pub fn jitter(&self) -> f64 {
        self.moments.sigma_post.jitter
    }

    /// `Σ_p⁻¹ − Σ_p⁻¹ Σ_py Σ_p⁻¹`.
    pub fn reduced_matrix(&self) -> DMatrix<f64> {
        let fp = &self.moments.sigma_post.factor;
        let d = fp.dim();
        let inv = fp.solve_mat(&DMatrix::identity(d, d));
        let mut m = &inv - fp.solve_mat(&(&self.posterior_y.sigma * &inv));
        symmetrize(&mut m);
        m
    }
}

impl<'a> CmiContext<'a> {
    pub fn new(model: &'a dyn ScoreModel, schedule: &'a NoiseSchedule, gram: &'a InformationGram) -> Result<Self> {
        check_len("information gram", gram.dim(), model.dim())?;
        Ok(Self { model, schedule, gram })
    }

    pub fn state(&self, x: &DVector<f64>, t: usize) -> Result<CmiState> {
        check_len("x_t", x.len(), self.model.dim())?;
        let ab = self.schedule.alpha_bar(t)?;
        let hessian = self.model.hessian(x, t)?;
        let sigma_post = posterior_cov(&hessian, self.schedule, t)?;
        let score = self.model.score(x, t)?;
        let mu_post = tweedie_from_score(x, &score, ab);
        let posterior_y = measurement_posterior_cov(&sigma_post, self.gram)?;
        Ok(CmiState { t, moments: PosteriorMoments { t, mu_post, sigma_post }, posterior_y })
    }

    pub fn value(&self, x: &DVector<f64>, t: usize) -> Result<f64> {
        Ok(self.state(x, t)?.value())
    }

    fn grad_sp(&self, x: &DVector<f64>, t: usize) -> Result<Tensor3> {
        let d = self.model.dim();
        if d > self.model.dense_limit() {
            return Err(Error::DenseLimit { dim: d, limit: self.model.dense_limit() });
        }
        grad_sigma_post(&self.model.third_tensor(x, t)?, self.schedule, t)
    }

    /// `½ [Tr(Σ_p⁻¹ ∇Σ_p) − Tr(Σ_py⁻¹ ∇Σ_py)]` slice by slice.
    pub fn grad_exact(&self, x: &DVector<f64>, t: usize) -> Result<DVector<f64>> {
        let state = self.state(x, t)?;
        self.grad_exact_at(&state, x)
    }

    pub fn grad_exact_at(&self, state: &CmiState, x: &DVector<f64>) -> Result<DVector<f64>> {
        let d = self.model.dim();
        let gsp = self.grad_sp(x, state.t)?;
        let gspy = grad_sigma_post_y(&state.moments.sigma_post, &state.posterior_y, &gsp)?;
        let eye = DMatrix::identity(d, d);
        let p_inv = state.moments.sigma_post.factor.solve_mat(&eye);
        let py_inv = state.posterior_y.factor.solve_mat(&eye);
        let first = trace_slices(&p_inv, &gsp)?;
        let second = trace_slices(&py_inv, &gspy)?;
        Ok((first - second) * 0.5)
    }

    /// `½ Tr((Σ_p⁻¹ − Σ_p⁻¹ Σ_py Σ_p⁻¹) ∇Σ_p)` slice by slice.
    pub fn grad_exact_reduced(&self, x: &DVector<f64>, t: usize) -> Result<DVector<f64>> {
        let state = self.state(x, t)?;
        let gsp = self.grad_sp(x, t)?;
        Ok(trace_slices(&state.reduced_matrix(), &gsp)? * 0.5)
    }

    pub fn grad_hutchinson<R: Rng + ?Sized>(
        &self,
        x: &DVector<f64>,
        t: usize,
        config: &HutchinsonConfig,
        rng: &mut R,
    ) -> Result<HutchinsonEstimate> {
        let state = self.state(x, t)?;
        self.grad_hutchinson_at(&state, x, config, rng)
    }

    /// Probe `i` draws its Rademacher vector from an independent substream
    /// `i` of a key taken from `rng`, so results do not depend on whether
    /// probes run in parallel.
    pub fn grad_hutchinson_at<R: Rng + ?Sized>(
        &self,
        state: &CmiState,
        x: &DVector<f64>,
        config: &HutchinsonConfig,
        rng: &mut R,
    ) -> Result<HutchinsonEstimate> {
        if config.probes < 1 {
            return Err(Error::config("Hutchinson estimator needs at least one probe"));
        }
        let d = self.model.dim();
        let t = state.t;
        let ab = self.schedule.alpha_bar(t)?;
        let scale = 0.5 * (1.0 - ab).powi(2) / ab;
        let key: u64 = rng.random();
        let fp = &state.moments.sigma_post.factor;
        let spy = &state.posterior_y.sigma;

        let probe = |i: usize| -> Result<DVector<f64>> {
            let mut sub = ChaCha8Rng::seed_from_u64(key);
            sub.set_stream(i as u64);
            let v = rademacher(&mut sub, d);
            let a = fp.solve_vec(&v);
            let g = if config.two_term {
                let w = fp.solve_vec(&(spy * &v));
                self.model.third_bilinear_grad(x, t, &a, &v)? - self.model.third_bilinear_grad(x, t, &a, &w)?
            } else {
                let u = &a - fp.solve_vec(&(spy * &a));
                self.model.third_bilinear_grad(x, t, &u, &v)?
            };
            Ok(g * scale)
        };

        let per_probe: Vec<DVector<f64>> = if config.parallel {
            (0..config.probes).into_par_iter().map(probe).collect::<Result<_>>()?
        } else {
            (0..config.probes).map(probe).collect::<Result<_>>()?
        };
        let mut mean = DVector::zeros(d);
        for g in &per_probe {
            mean += g;
        }
        mean /= config.probes as f64;
        Ok(HutchinsonEstimate { mean, per_probe })
    }
}
