//! Score models with exact first-, second- and third-order derivatives.
//!
//! The central trait is [`ScoreModel`]: besides `∇ log p_t` it exposes the
//! Hessian, Hessian-vector products and the third-order bilinear gradient
//! `∇_x [uᵀ ∇² log p_t(x) v]`, which is everything the matrix-free CMI
//! gradient needs. [`DiffusedGmm`] implements all of these in closed form for
//! a Gaussian-mixture prior pushed through the VP forward process;
//! [`FiniteDiffScore`] supplies central-difference fallbacks for models that
//! only expose a score.

use std::sync::{Arc, OnceLock};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::linalg::{symmetrize, SpdFactor, Tensor3, DEFAULT_DENSE_LIMIT};
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Capabilities {
    pub has_dense_hessian: bool,
    pub has_third_order: bool,
}

/// Provider of `∇ log p_t` and its higher derivatives at diffusion step `t`.
pub trait ScoreModel: Send + Sync {
    fn dim(&self) -> usize;

    fn capabilities(&self) -> Capabilities;

    fn score(&self, x: &DVector<f64>, t: usize) -> Result<DVector<f64>>;

    fn hessian(&self, _x: &DVector<f64>, _t: usize) -> Result<DMatrix<f64>> {
        Err(Error::Capability("a dense Hessian"))
    }

    /// `∇² log p_t(x) · v`.
    fn hvp(&self, x: &DVector<f64>, t: usize, v: &DVector<f64>) -> Result<DVector<f64>> {
        check_len("v", v.len(), self.dim())?;
        Ok(self.hessian(x, t)? * v)
    }

    /// Vector with entry `k = Σ_ab u_a [∇³ log p_t]_{abk} v_b`, i.e. the gradient
    /// in `x` of `uᵀ ∇² log p_t(x) v`.
    fn third_bilinear_grad(
        &self,
        _x: &DVector<f64>,
        _t: usize,
        _u: &DVector<f64>,
        _v: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        Err(Error::Capability("third-order derivatives"))
    }

    fn dense_limit(&self) -> usize {
        DEFAULT_DENSE_LIMIT
    }

    /// Explicit `∇³ log p_t(x)`; only for small `d`.
    fn third_tensor(&self, x: &DVector<f64>, t: usize) -> Result<Tensor3> {
        let d = self.dim();
        if d > self.dense_limit() {
            return Err(Error::DenseLimit { dim: d, limit: self.dense_limit() });
        }
        let mut out = Tensor3::zeros(d);
        for a in 0..d {
            let ea = unit(d, a);
            for b in a..d {
                let col = self.third_bilinear_grad(x, t, &ea, &unit(d, b))?;
                for k in 0..d {
                    out.set(a, b, k, col[k]);
                    out.set(b, a, k, col[k]);
                }
            }
        }
        Ok(out)
    }
}

impl<M: ScoreModel + ?Sized> ScoreModel for Arc<M> {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn capabilities(&self) -> Capabilities {
        (**self).capabilities()
    }
    fn score(&self, x: &DVector<f64>, t: usize) -> Result<DVector<f64>> {
        (**self).score(x, t)
    }
    fn hessian(&self, x: &DVector<f64>, t: usize) -> Result<DMatrix<f64>> {
        (**self).hessian(x, t)
    }
    fn hvp(&self, x: &DVector<f64>, t: usize, v: &DVector<f64>) -> Result<DVector<f64>> {
        (**self).hvp(x, t, v)
    }
    fn third_bilinear_grad(
        &self,
        x: &DVector<f64>,
        t: usize,
        u: &DVector<f64>,
        v: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        (**self).third_bilinear_grad(x, t, u, v)
    }
    fn dense_limit(&self) -> usize {
        (**self).dense_limit()
    }
    fn third_tensor(&self, x: &DVector<f64>, t: usize) -> Result<Tensor3> {
        (**self).third_tensor(x, t)
    }
}

pub(crate) fn unit(d: usize, i: usize) -> DVector<f64> {
    let mut e = DVector::zeros(d);
    e[i] = 1.0;
    e
}

/// Tweedie denoiser `x̃₀ = (x_t + (1 − ᾱ_t) ∇ log p_t(x_t)) / √ᾱ_t`.
pub fn tweedie_denoise(
    model: &dyn ScoreModel,
    schedule: &NoiseSchedule,
    x_t: &DVector<f64>,
    t: usize,
) -> Result<DVector<f64>> {
    let ab = schedule.alpha_bar(t)?;
    let s = model.score(x_t, t)?;
    Ok(tweedie_from_score(x_t, &s, ab))
}

pub(crate) fn tweedie_from_score(x_t: &DVector<f64>, score: &DVector<f64>, alpha_bar: f64) -> DVector<f64> {
    (x_t + score * (1.0 - alpha_bar)) / alpha_bar.sqrt()
}

// ---------------------------------------------------------------------------
// Gaussian mixture prior
// ---------------------------------------------------------------------------

/// `p(x₀) = Σ_k w_k N(μ_k, C_k)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixturePrior {
    weights: Vec<f64>,
    means: Vec<DVector<f64>>,
    covariances: Vec<DMatrix<f64>>,
    #[serde(skip)]
    factors: Vec<Option<DMatrix<f64>>>,
}

impl GaussianMixturePrior {
    pub fn new(weights: Vec<f64>, means: Vec<DVector<f64>>, covariances: Vec<DMatrix<f64>>) -> Result<Self> {
        let k = weights.len();
        if k == 0 {
            return Err(Error::config("mixture needs at least one component"));
        }
        if means.len() != k || covariances.len() != k {
            return Err(Error::config(format!(
                "mixture has {k} weights, {} means and {} covariances",
                means.len(),
                covariances.len()
            )));
        }
        if weights.iter().any(|w| *w <= 0.0 || !w.is_finite()) {
            return Err(Error::config("mixture weights must be positive"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::config(format!("mixture weights sum to {total}, not 1")));
        }
        let d = means[0].len();
        if d == 0 {
            return Err(Error::config("mixture dimension must be positive"));
        }
        let mut factors = Vec::with_capacity(k);
        for (i, (m, c)) in means.iter().zip(&covariances).enumerate() {
            if m.len() != d {
                return Err(Error::config(format!("mean {i} has length {}, expected {d}", m.len())));
            }
            if c.shape() != (d, d) {
                return Err(Error::config(format!("covariance {i} is not {d}x{d}")));
            }
            if (c - c.transpose()).amax() > 1e-12 * c.amax().max(1.0) {
                return Err(Error::config(format!("covariance {i} is not symmetric")));
            }
            let f = SpdFactor::new(c, &format!("covariance {i}"))?;
            factors.push(Some(f.l()));
        }
        Ok(Self { weights, means, covariances, factors })
    }

    pub fn gaussian(mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        Self::new(vec![1.0], vec![mean], vec![covariance])
    }

    pub fn standard_normal(d: usize) -> Result<Self> {
        Self::gaussian(DVector::zeros(d), DMatrix::identity(d, d))
    }

    /// Random `k`-component mixture with uniform weights, means
    /// `mean_scale · N(0, I)` and covariances `0.5 BBᵀ/d + 0.05 I`, `B_ij ~ N(0, 1)`.
    pub fn random<R: Rng + ?Sized>(d: usize, k: usize, mean_scale: f64, rng: &mut R) -> Result<Self> {
        if d == 0 || k == 0 {
            return Err(Error::config("random mixture needs d ≥ 1 and k ≥ 1"));
        }
        let mut means = Vec::with_capacity(k);
        let mut covariances = Vec::with_capacity(k);
        for _ in 0..k {
            means.push(DVector::from_fn(d, |_, _| mean_scale * rng.sample::<f64, _>(StandardNormal)));
            let b = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
            let mut c = &b * b.transpose() * (0.5 / d as f64) + DMatrix::identity(d, d) * 0.05;
            symmetrize(&mut c);
            covariances.push(c);
        }
        let w = 1.0 / k as f64;
        let mut weights = vec![w; k];
        // keep the sum at exactly 1 for any k
        weights[k - 1] = 1.0 - w * (k - 1) as f64;
        Self::new(weights, means, covariances)
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[DVector<f64>] {
        &self.means
    }

    pub fn covariances(&self) -> &[DMatrix<f64>] {
        &self.covariances
    }

    fn factor(&self, k: usize) -> DMatrix<f64> {
        match self.factors.get(k).and_then(|f| f.clone()) {
            Some(l) => l,
            // deserialized priors skip the cached factors
            None => SpdFactor::new(&self.covariances[k], "covariance")
                .map(|f| f.l())
                .expect("covariance validated at construction"),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut k = self.weights.len() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                k = i;
                break;
            }
        }
        let z = DVector::from_fn(self.dim(), |_, _| rng.sample::<f64, _>(StandardNormal));
        &self.means[k] + self.factor(k) * z
    }

    /// Per-component state of `p_t`: means `√ᾱ μ_k`, covariances `ᾱ C_k + (1 − ᾱ) I`.
    fn diffuse(&self, alpha_bar: f64) -> Result<Vec<DiffusedComponent>> {
        let d = self.dim();
        let sqrt_ab = alpha_bar.sqrt();
        self.weights
            .iter()
            .zip(&self.means)
            .zip(&self.covariances)
            .map(|((w, mu), c)| {
                let mut cov = c * alpha_bar;
                for i in 0..d {
                    cov[(i, i)] += 1.0 - alpha_bar;
                }
                symmetrize(&mut cov);
                let factor = SpdFactor::new(&cov, "diffused component covariance")?;
                let precision = factor.solve_mat(&DMatrix::identity(d, d));
                let log_norm = w.ln() - 0.5 * (d as f64 * (2.0 * std::f64::consts::PI).ln() + factor.log_det());
                Ok(DiffusedComponent { mean: mu * sqrt_ab, factor, precision, log_norm })
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
struct DiffusedComponent {
    mean: DVector<f64>,
    factor: SpdFactor,
    precision: DMatrix<f64>,
    log_norm: f64,
}

/// Responsibilities and per-component scores of the diffused mixture at one point.
struct MixtureEval {
    resp: Vec<f64>,
    comp_scores: Vec<DVector<f64>>,
    score: DVector<f64>,
    log_density: f64,
}

fn evaluate(comps: &[DiffusedComponent], x: &DVector<f64>) -> MixtureEval {
    let mut logs = Vec::with_capacity(comps.len());
    let mut comp_scores = Vec::with_capacity(comps.len());
    for c in comps {
        let diff = x - &c.mean;
        let solved = c.factor.solve_vec(&diff);
        logs.push(c.log_norm - 0.5 * diff.dot(&solved));
        comp_scores.push(-solved);
    }
    let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logs.iter().map(|l| (l - max).exp()).sum();
    let log_density = max + sum.ln();
    let resp: Vec<f64> = logs.iter().map(|l| (l - log_density).exp()).collect();
    let score = if comps.len() == 1 {
        comp_scores[0].clone()
    } else {
        comp_scores
            .iter()
            .zip(&resp)
            .fold(DVector::zeros(x.len()), |acc, (g, r)| acc + g * *r)
    };
    MixtureEval { resp, comp_scores, score, log_density }
}

fn mixture_hessian(comps: &[DiffusedComponent], ev: &MixtureEval) -> DMatrix<f64> {
    if comps.len() == 1 {
        return -comps[0].precision.clone();
    }
    let d = ev.score.len();
    let mut h = DMatrix::zeros(d, d);
    for ((c, g), r) in comps.iter().zip(&ev.comp_scores).zip(&ev.resp) {
        h += (g * g.transpose() - &c.precision) * *r;
    }
    h -= &ev.score * ev.score.transpose();
    symmetrize(&mut h);
    h
}

fn mixture_hvp(comps: &[DiffusedComponent], ev: &MixtureEval, v: &DVector<f64>) -> DVector<f64> {
    if comps.len() == 1 {
        return -comps[0].factor.solve_vec(v);
    }
    let mut out = DVector::zeros(v.len());
    for ((c, g), r) in comps.iter().zip(&ev.comp_scores).zip(&ev.resp) {
        out += (g * g.dot(v) - c.factor.solve_vec(v)) * *r;
    }
    out - &ev.score * ev.score.dot(v)
}

fn mixture_third_bilinear(
    comps: &[DiffusedComponent],
    ev: &MixtureEval,
    u: &DVector<f64>,
    v: &DVector<f64>,
) -> DVector<f64> {
    let d = u.len();
    if comps.len() == 1 {
        return DVector::zeros(d);
    }
    let s = &ev.score;
    let hu = mixture_hvp(comps, ev, u);
    let hv = mixture_hvp(comps, ev, v);
    let mut out = DVector::zeros(d);
    for ((c, g), r) in comps.iter().zip(&ev.comp_scores).zip(&ev.resp) {
        let hk_u = -c.factor.solve_vec(u);
        let hk_v = -c.factor.solve_vec(v);
        let ug = u.dot(g);
        let vg = v.dot(g);
        let quad = v.dot(&hk_u) + ug * vg;
        out += ((g - s) * quad + hk_u * vg + hk_v * ug) * *r;
    }
    out - hu * s.dot(v) - hv * s.dot(u)
}

fn mixture_third_tensor(comps: &[DiffusedComponent], ev: &MixtureEval, hessian: &DMatrix<f64>) -> Tensor3 {
    let d = ev.score.len();
    if comps.len() == 1 {
        return Tensor3::zeros(d);
    }
    let s = &ev.score;
    let mut t = Tensor3::zeros(d);
    for ((c, g), r) in comps.iter().zip(&ev.comp_scores).zip(&ev.resp) {
        let p = &c.precision;
        for k in 0..d {
            let gc = g[k] - s[k];
            for b in 0..d {
                for a in 0..d {
                    let val = gc * (g[a] * g[b] - p[(a, b)]) - p[(a, k)] * g[b] - g[a] * p[(b, k)];
                    t.set(a, b, k, t.get(a, b, k) + r * val);
                }
            }
        }
    }
    for k in 0..d {
        for b in 0..d {
            for a in 0..d {
                let val = t.get(a, b, k) - hessian[(a, k)] * s[b] - s[a] * hessian[(b, k)];
                t.set(a, b, k, val);
            }
        }
    }
    t
}

/// Score model of a Gaussian-mixture prior diffused by the VP forward process.
///
/// Derivatives are exact. Per-step component factorizations are cached.
#[derive(Debug)]
pub struct DiffusedGmm {
    prior: GaussianMixturePrior,
    schedule: Arc<NoiseSchedule>,
    dense_limit: usize,
    cache: Vec<OnceLock<std::result::Result<Vec<DiffusedComponent>, Error>>>,
}

impl DiffusedGmm {
    pub fn new(prior: GaussianMixturePrior, schedule: Arc<NoiseSchedule>) -> Self {
        let cache = (0..schedule.n_steps()).map(|_| OnceLock::new()).collect();
        Self { prior, schedule, dense_limit: DEFAULT_DENSE_LIMIT, cache }
    }

    pub fn with_dense_limit(mut self, limit: usize) -> Self {
        self.dense_limit = limit;
        self
    }

    pub fn prior(&self) -> &GaussianMixturePrior {
        &self.prior
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn components(&self, x: &DVector<f64>, t: usize) -> Result<&[DiffusedComponent]> {
        check_len("x", x.len(), self.prior.dim())?;
        let ab = self.schedule.alpha_bar(t)?;
        let entry = self.cache[t - 1].get_or_init(|| self.prior.diffuse(ab));
        entry.as_deref().map_err(Clone::clone)
    }

    /// `log p_t(x)` in closed form.
    pub fn log_density(&self, x: &DVector<f64>, t: usize) -> Result<f64> {
        let comps = self.components(x, t)?;
        Ok(evaluate(comps, x).log_density)
    }
}

impl ScoreModel for DiffusedGmm {
    fn dim(&self) -> usize {
        self.prior.dim()
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities { has_dense_hessian: true, has_third_order: true }
    }

    fn score(&self, x: &DVector<f64>, t: usize) -> Result<DVector<f64>> {
        let comps = self.components(x, t)?;
        Ok(evaluate(comps, x).score)
    }

    fn hessian(&self, x: &DVector<f64>, t: usize) -> Result<DMatrix<f64>> {
        let comps = self.components(x, t)?;
        let ev = evaluate(comps, x);
        Ok(mixture_hessian(comps, &ev))
    }

    fn hvp(&self, x: &DVector<f64>, t: usize, v: &DVector<f64>) -> Result<DVector<f64>> {
        check_len("v", v.len(), self.dim())?;
        let comps = self.components(x, t)?;
        let ev = evaluate(comps, x);
        Ok(mixture_hvp(comps, &ev, v))
    }

    fn third_bilinear_grad(
        &self,
        x: &DVector<f64>,
        t: usize,
        u: &DVector<f64>,
        v: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        check_len("u", u.len(), self.dim())?;
        check_len("v", v.len(), self.dim())?;
        let comps = self.components(x, t)?;
        let ev = evaluate(comps, x);
        Ok(mixture_third_bilinear(comps, &ev, u, v))
    }

    fn dense_limit(&self) -> usize {
        self.dense_limit
    }

    fn third_tensor(&self, x: &DVector<f64>, t: usize) -> Result<Tensor3> {
        let d = self.dim();
        if d > self.dense_limit {
            return Err(Error::DenseLimit { dim: d, limit: self.dense_limit });
        }
        let comps = self.components(x, t)?;
        let ev = evaluate(comps, x);
        let h = mixture_hessian(comps, &ev);
        Ok(mixture_third_tensor(comps, &ev, &h))
    }
}

// ---------------------------------------------------------------------------
// Score-only models and the finite-difference fallback
// ---------------------------------------------------------------------------

type ScoreClosure = dyn Fn(&DVector<f64>, usize) -> DVector<f64> + Send + Sync;

/// A model that only knows its score function.
#[derive(Clone)]
pub struct ScoreFn {
    dim: usize,
    f: Arc<ScoreClosure>,
}

impl ScoreFn {
    pub fn new(dim: usize, f: impl Fn(&DVector<f64>, usize) -> DVector<f64> + Send + Sync + 'static) -> Self {
        Self { dim, f: Arc::new(f) }
    }

    /// Borrows the score of another model.
    pub fn from_model<M: ScoreModel + 'static>(model: Arc<M>) -> Self {
        let dim = model.dim();
        Self::new(dim, move |x, t| model.score(x, t).expect("wrapped score evaluation failed"))
    }
}

impl std::fmt::Debug for ScoreFn {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ScoreFn").field("dim", &self.dim).finish_non_exhaustive()
    }
}

impl ScoreModel for ScoreFn {
    fn dim(&self) -> usize {
        self.dim
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities::default()
    }

    fn score(&self, x: &DVector<f64>, t: usize) -> Result<DVector<f64>> {
        check_len("x", x.len(), self.dim)?;
        Ok((self.f)(x, t))
    }
}

pub const DEFAULT_FD_STEP: f64 = 1e-4;

/// Central finite differences of a score function.
///
/// `hvp` differentiates the score along `v`; `third_bilinear_grad` takes the
/// mixed second directional derivative along `u` and `v`, which by symmetry of
/// `∇³ log p` equals the contraction `Σ_ab u_a T_abk v_b`. Errors are `O(h²)`.
#[derive(Debug, Clone)]
pub struct FiniteDiffScore {
    base: ScoreFn,
    h: f64,
    dense_limit: usize,
}

pub fn finite_diff_wrap(base: ScoreFn, h: f64) -> Result<FiniteDiffScore> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::config(format!("finite-difference step h = {h} must be positive")));
    }
    Ok(FiniteDiffScore { base, h, dense_limit: DEFAULT_DENSE_LIMIT })
}

impl FiniteDiffScore {
    pub fn step(&self) -> f64 {
        self.h
    }
}

impl ScoreModel for FiniteDiffScore {
    fn dim(&self) -> usize {
        self.base.dim
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities { has_dense_hessian: true, has_third_order: true }
    }

    fn score(&self, x: &DVector<f64>, t: usize) -> Result<DVector<f64>> {
        self.base.score(x, t)
    }

    fn hessian(&self, x: &DVector<f64>, t: usize) -> Result<DMatrix<f64>> {
        let d = self.dim();
        let cols: Result<Vec<_>> = (0..d).map(|j| self.hvp(x, t, &unit(d, j))).collect();
        let mut h = DMatrix::from_columns(&cols?);
        symmetrize(&mut h);
        Ok(h)
    }

    fn hvp(&self, x: &DVector<f64>, t: usize, v: &DVector<f64>) -> Result<DVector<f64>> {
        check_len("v", v.len(), self.dim())?;
        let n = v.norm();
        if n == 0.0 {
            return Ok(DVector::zeros(v.len()));
        }
        let dir = v / n;
        let plus = self.base.score(&(x + &dir * self.h), t)?;
        let minus = self.base.score(&(x - &dir * self.h), t)?;
        Ok((plus - minus) * (n / (2.0 * self.h)))
    }

    fn third_bilinear_grad(
        &self,
        x: &DVector<f64>,
        t: usize,
        u: &DVector<f64>,
        v: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        check_len("u", u.len(), self.dim())?;
        check_len("v", v.len(), self.dim())?;
        let (nu, nv) = (u.norm(), v.norm());
        if nu == 0.0 || nv == 0.0 {
            return Ok(DVector::zeros(u.len()));
        }
        let h = self.h;
        let su = u * (h / nu);
        let sv = v * (h / nv);
        let pp = self.base.score(&(x + &su + &sv), t)?;
        let pm = self.base.score(&(x + &su - &sv), t)?;
        let mp = self.base.score(&(x - &su + &sv), t)?;
        let mm = self.base.score(&(x - &su - &sv), t)?;
        Ok((pp - pm - mp + mm) * (nu * nv / (4.0 * h * h)))
    }

    fn dense_limit(&self) -> usize {
        self.dense_limit
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::ScheduleKind;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn schedule() -> Arc<NoiseSchedule> {
        Arc::new(NoiseSchedule::build(ScheduleKind::Linear, 20, 1e-3, 0.2).unwrap())
    }

    fn vecf(v: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(v)
    }

    fn two_component(d: usize) -> GaussianMixturePrior {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let means = (0..2).map(|_| DVector::from_fn(d, |_, _| rng.random_range(-1.5..1.5))).collect();
        let covs = (0..2)
            .map(|k| {
                let b = DMatrix::from_fn(d, d, |_, _| rng.random_range(-0.5..0.5));
                &b * b.transpose() + DMatrix::identity(d, d) * (0.2 + 0.1 * k as f64)
            })
            .collect();
        GaussianMixturePrior::new(vec![0.35, 0.65], means, covs).unwrap()
    }

    // Independent oracle: log p_t evaluated directly from dense inverses and
    // determinants, then differenced.
    fn oracle_log_density(prior: &GaussianMixturePrior, ab: f64, x: &DVector<f64>) -> f64 {
        let d = prior.dim();
        let mut total = 0.0;
        for k in 0..prior.n_components() {
            let s = &prior.covariances()[k] * ab + DMatrix::identity(d, d) * (1.0 - ab);
            let diff = x - &prior.means()[k] * ab.sqrt();
            let inv = s.clone().try_inverse().unwrap();
            let q = (diff.transpose() * inv * &diff)[0];
            total += prior.weights()[k] * (-0.5 * q).exp()
                / ((2.0 * std::f64::consts::PI).powi(d as i32) * s.determinant()).sqrt();
        }
        total.ln()
    }

    fn fd_grad(f: impl Fn(&DVector<f64>) -> f64, x: &DVector<f64>, h: f64) -> DVector<f64> {
        DVector::from_fn(x.len(), |k, _| {
            let e = unit(x.len(), k) * h;
            (f(&(x + &e)) - f(&(x - &e))) / (2.0 * h)
        })
    }

    #[test]
    fn standard_normal_is_a_fixed_point() {
        let s = schedule();
        let m = DiffusedGmm::new(GaussianMixturePrior::standard_normal(3).unwrap(), s);
        let x = vecf(&[0.4, -1.2, 2.0]);
        for t in [1, 7, 20] {
            assert!((m.score(&x, t).unwrap() + &x).norm() < 1e-14);
            assert!((m.hessian(&x, t).unwrap() + DMatrix::identity(3, 3)).amax() < 1e-14);
            assert_eq!(m.third_tensor(&x, t).unwrap().max_abs(), 0.0);
            let u = vecf(&[1.0, 2.0, 3.0]);
            assert_eq!(m.third_bilinear_grad(&x, t, &u, &x).unwrap().amax(), 0.0);
        }
    }

    #[test]
    fn symmetric_mixture_has_zero_score_at_origin() {
        let mu = vecf(&[1.0, -0.5]);
        let prior = GaussianMixturePrior::new(
            vec![0.5, 0.5],
            vec![mu.clone(), -mu],
            vec![DMatrix::identity(2, 2), DMatrix::identity(2, 2)],
        )
        .unwrap();
        let m = DiffusedGmm::new(prior, schedule());
        assert!(m.score(&DVector::zeros(2), 5).unwrap().norm() < 1e-15);
    }

    #[test]
    fn single_gaussian_hessian_is_negative_inverse_covariance() {
        let c = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 0.5]);
        let prior = GaussianMixturePrior::gaussian(vecf(&[1.0, -2.0]), c.clone()).unwrap();
        let s = schedule();
        let m = DiffusedGmm::new(prior, s.clone());
        let ab = s.alpha_bar(9).unwrap();
        let expected = -(c * ab + DMatrix::identity(2, 2) * (1.0 - ab)).try_inverse().unwrap();
        let h = m.hessian(&vecf(&[0.1, 0.2]), 9).unwrap();
        assert!((h - expected).amax() < 1e-12);
    }

    #[test]
    fn gmm_score_matches_log_density_differences() {
        let prior = two_component(2);
        let s = schedule();
        let m = DiffusedGmm::new(prior.clone(), s.clone());
        let x = vecf(&[0.3, -0.1]);
        for t in [2, 10, 19] {
            let ab = s.alpha_bar(t).unwrap();
            let oracle = fd_grad(|y| oracle_log_density(&prior, ab, y), &x, 1e-5);
            let score = m.score(&x, t).unwrap();
            assert!((&score - &oracle).norm() / oracle.norm() < 1e-6, "t={t}");
            assert!((m.log_density(&x, t).unwrap() - oracle_log_density(&prior, ab, &x)).abs() < 1e-12);
        }
    }

    #[test]
    fn gmm_hessian_matches_score_jacobian() {
        let s = schedule();
        for d in [2, 4] {
            let m = DiffusedGmm::new(two_component(d), s.clone());
            let x = DVector::from_fn(d, |i, _| 0.2 * i as f64 - 0.3);
            let h = m.hessian(&x, 8).unwrap();
            assert!((&h - h.transpose()).amax() == 0.0);
            let step = 1e-5;
            for j in 0..d {
                let e = unit(d, j) * step;
                let col = (m.score(&(&x + &e), 8).unwrap() - m.score(&(&x - &e), 8).unwrap()) / (2.0 * step);
                let rel = (&col - h.column(j)).norm() / h.column(j).norm().max(1e-12);
                assert!(rel < 1e-5, "d={d} col={j} rel={rel}");
            }
        }
    }

    #[test]
    fn hvp_matches_dense_hessian() {
        let m = DiffusedGmm::new(two_component(4), schedule());
        let x = vecf(&[0.2, -0.4, 1.0, 0.0]);
        let v = vecf(&[0.7, -1.1, 0.3, 2.0]);
        let dense = m.hessian(&x, 12).unwrap() * &v;
        assert!((m.hvp(&x, 12, &v).unwrap() - dense).amax() < 1e-10);
        assert_eq!(m.hvp(&x, 12, &DVector::zeros(4)).unwrap().amax(), 0.0);
    }

    #[test]
    fn third_bilinear_matches_hessian_differences() {
        let s = schedule();
        let m = DiffusedGmm::new(two_component(3), s);
        let x = vecf(&[0.5, 0.1, -0.3]);
        let u = vecf(&[1.0, -0.4, 0.25]);
        let v = vecf(&[-0.3, 0.8, 1.5]);
        let oracle = fd_grad(|y| (u.transpose() * m.hessian(y, 6).unwrap() * &v)[0], &x, 1e-5);
        let got = m.third_bilinear_grad(&x, 6, &u, &v).unwrap();
        assert!((&got - &oracle).norm() / oracle.norm() < 1e-5);
        let swapped = m.third_bilinear_grad(&x, 6, &v, &u).unwrap();
        assert!((&got - swapped).amax() < 1e-10);
        assert_eq!(m.third_bilinear_grad(&x, 6, &DVector::zeros(3), &v).unwrap().amax(), 0.0);
    }

    #[test]
    fn dense_third_tensor_properties() {
        let s = schedule();
        let prior = two_component(2);
        let m = DiffusedGmm::new(prior.clone(), s.clone());
        let x = vecf(&[0.3, -0.6]);
        let t = 11;
        let tensor = m.third_tensor(&x, t).unwrap();
        assert!(tensor.symmetry_defect() < 1e-8);

        // triple finite differences of the closed-form log-density
        let ab = s.alpha_bar(t).unwrap();
        let f = |y: &DVector<f64>| oracle_log_density(&prior, ab, y);
        let h = 1e-3;
        for i in 0..2 {
            for j in 0..2 {
                for k in 0..2 {
                    let mut acc = 0.0;
                    for (si, sj, sk) in itertools_signs() {
                        let p = &x + unit(2, i) * (si * h) + unit(2, j) * (sj * h) + unit(2, k) * (sk * h);
                        acc += si * sj * sk * f(&p);
                    }
                    let fd = acc / (8.0 * h * h * h);
                    assert!((fd - tensor.get(i, j, k)).abs() < 1e-4, "({i},{j},{k}) fd={fd}");
                }
            }
        }

        // slices contracted with (u, v) agree with the matrix-free path
        let d4 = DiffusedGmm::new(two_component(4), s);
        let x4 = vecf(&[0.1, 0.2, -0.3, 0.4]);
        let big = d4.third_tensor(&x4, 4).unwrap();
        let u = vecf(&[1.0, 0.5, -0.5, 2.0]);
        let v = vecf(&[0.0, -1.0, 1.0, 0.3]);
        let tbg = d4.third_bilinear_grad(&x4, 4, &u, &v).unwrap();
        for k in 0..4 {
            let c = (u.transpose() * big.slice(k) * &v)[0];
            assert!((c - tbg[k]).abs() < 1e-8);
        }
        let default_path = ScoreModelDefault(&d4).third_tensor(&x4, 4).unwrap();
        assert!(default_path.as_slice().iter().zip(big.as_slice()).all(|(a, b)| (a - b).abs() < 1e-8));
    }

    fn itertools_signs() -> impl Iterator<Item = (f64, f64, f64)> {
        (0..8).map(|m| {
            let s = |b: usize| if m >> b & 1 == 1 { -1.0 } else { 1.0 };
            (s(0), s(1), s(2))
        })
    }

    /// Forwards everything except `third_tensor`, exercising the trait default.
    struct ScoreModelDefault<'a>(&'a DiffusedGmm);

    impl ScoreModel for ScoreModelDefault<'_> {
        fn dim(&self) -> usize {
            self.0.dim()
        }
        fn capabilities(&self) -> Capabilities {
            self.0.capabilities()
        }
        fn score(&self, x: &DVector<f64>, t: usize) -> Result<DVector<f64>> {
            self.0.score(x, t)
        }
        fn third_bilinear_grad(
            &self,
            x: &DVector<f64>,
            t: usize,
            u: &DVector<f64>,
            v: &DVector<f64>,
        ) -> Result<DVector<f64>> {
            self.0.third_bilinear_grad(x, t, u, v)
        }
    }

    #[test]
    fn dense_limit_is_enforced() {
        let m = DiffusedGmm::new(two_component(3), schedule()).with_dense_limit(2);
        let err = m.third_tensor(&DVector::zeros(3), 3).unwrap_err();
        assert!(matches!(err, Error::DenseLimit { dim: 3, limit: 2 }));
    }

    #[test]
    fn tweedie_examples() {
        // ᾱ_2 = 0.75 · (1/3) = 0.25
        let s = NoiseSchedule::build(ScheduleKind::Linear, 2, 0.25, 2.0 / 3.0).unwrap();
        let m = DiffusedGmm::new(GaussianMixturePrior::standard_normal(2).unwrap(), Arc::new(s.clone()));
        let x0 = tweedie_denoise(&m, &s, &vecf(&[2.0, -2.0]), 2).unwrap();
        assert!((x0 - vecf(&[1.0, -1.0])).amax() < 1e-12);

        let tiny = Arc::new(NoiseSchedule::build(ScheduleKind::Linear, 2, 1e-14, 1e-14).unwrap());
        let m = DiffusedGmm::new(two_component(2), tiny.clone());
        let x = vecf(&[0.3, 0.9]);
        assert!((tweedie_denoise(&m, &tiny, &x, 2).unwrap() - &x).amax() < 1e-10);
    }

    #[test]
    fn score_only_models_report_missing_capability() {
        let f = ScoreFn::new(2, |x, _| -x);
        assert_eq!(f.capabilities(), Capabilities::default());
        let x = vecf(&[1.0, 2.0]);
        assert!(matches!(f.hessian(&x, 1), Err(Error::Capability(_))));
        assert!(matches!(f.third_bilinear_grad(&x, 1, &x, &x), Err(Error::Capability(_))));
        assert!(matches!(f.third_tensor(&x, 1), Err(Error::Capability(_))));
    }

    #[test]
    fn finite_difference_wrapper() {
        let lin = finite_diff_wrap(ScoreFn::new(3, |x, _| -x), 1e-4).unwrap();
        let x = vecf(&[0.3, 1.0, -2.0]);
        let v = vecf(&[1.0, -0.5, 0.25]);
        assert!((lin.hvp(&x, 1, &v).unwrap() + &v).amax() < 1e-10);
        assert!(lin.third_bilinear_grad(&x, 1, &v, &x).unwrap().amax() < 1e-6);

        let gmm = Arc::new(DiffusedGmm::new(two_component(3), schedule()));
        let fd = finite_diff_wrap(ScoreFn::from_model(gmm.clone()), DEFAULT_FD_STEP).unwrap();
        let x = vecf(&[0.2, -0.1, 0.4]);
        let exact = gmm.hvp(&x, 9, &v).unwrap();
        assert!((fd.hvp(&x, 9, &v).unwrap() - &exact).amax() < 1e-5);
        let u = vecf(&[0.3, 0.3, -1.0]);
        let exact3 = gmm.third_bilinear_grad(&x, 9, &u, &v).unwrap();
        let approx3 = fd.third_bilinear_grad(&x, 9, &u, &v).unwrap();
        assert!((&approx3 - &exact3).norm() / exact3.norm() < 1e-4);
        assert!((fd.hessian(&x, 9).unwrap() - gmm.hessian(&x, 9).unwrap()).amax() < 1e-5);

        assert!(finite_diff_wrap(ScoreFn::new(1, |x, _| -x), 0.0).is_err());
    }

    #[test]
    fn prior_validation() {
        let i2 = DMatrix::identity(2, 2);
        let z = DVector::zeros(2);
        assert!(GaussianMixturePrior::new(vec![0.5, 0.6], vec![z.clone(), z.clone()], vec![i2.clone(), i2.clone()]).is_err());
        assert!(GaussianMixturePrior::new(vec![1.0], vec![z.clone()], vec![-i2.clone()]).is_err());
        assert!(GaussianMixturePrior::new(vec![1.0], vec![DVector::zeros(3)], vec![i2]).is_err());
    }

    #[test]
    fn prior_sampling_moments() {
        let prior = GaussianMixturePrior::gaussian(vecf(&[1.0, -1.0]), DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 2.0])).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 40_000;
        let xs: Vec<_> = (0..n).map(|_| prior.sample(&mut rng)).collect();
        let mean = xs.iter().fold(DVector::zeros(2), |a, x| a + x) / n as f64;
        assert!((mean - vecf(&[1.0, -1.0])).amax() < 0.03);
        let cov = xs.iter().fold(DMatrix::zeros(2, 2), |a, x| {
            let c = x - vecf(&[1.0, -1.0]);
            a + &c * c.transpose()
        }) / n as f64;
        assert!((cov - prior.covariances()[0].clone()).amax() < 0.06);
    }
}
