//! Independent reference computations and reconstruction metrics.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::linalg::{symmetrize, SpdFactor};
use crate::operators::{LinearOperator, NoiseModel};
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianDist {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianDist {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if cov.shape() != (mean.len(), mean.len()) {
            return Err(Error::shape("covariance does not match mean"));
        }
        SpdFactor::new(&cov, "Gaussian covariance")?;
        Ok(Self { mean, cov })
    }
}

/// Exact posterior of `x ~ N(μ, C)` given `y = Ax + n`, `n ~ N(0, Σ_n)`:
/// precision `C⁻¹ + AᵀΣ_n⁻¹A`, mean `cov · (C⁻¹μ + AᵀΣ_n⁻¹y)`.
pub fn conjugate_gaussian_posterior(
    prior: &GaussianDist,
    a: &dyn LinearOperator,
    noise: &NoiseModel,
    y: &DVector<f64>,
) -> Result<GaussianDist> {
    let d = prior.mean.len();
    check_len("operator input", a.in_dim(), d)?;
    check_len("y", y.len(), a.out_dim())?;
    let c = SpdFactor::new(&prior.cov, "prior covariance")?;
    let eye = DMatrix::identity(d, d);
    let mut precision = c.solve_mat(&eye);
    let mut info = c.solve_vec(&prior.mean);
    if a.out_dim() > 0 {
        let ad = a.to_dense()?;
        precision += ad.tr_mul(&noise.solve(&ad)?);
        let weighted = noise.solve(&DMatrix::from_column_slice(y.len(), 1, y.as_slice()))?;
        info += ad.tr_mul(&weighted).column(0);
    }
    symmetrize(&mut precision);
    let r = SpdFactor::new(&precision, "posterior precision")?;
    let mut cov = r.solve_mat(&eye);
    symmetrize(&mut cov);
    Ok(GaussianDist { mean: r.solve_vec(&info), cov })
}

/// Self-normalized importance-sampling moments of `p(x₀ | x_t)`.
#[derive(Debug, Clone)]
pub struct McMoments {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub ess: f64,
    /// Set when the effective sample size falls below [`MIN_ESS`].
    pub unreliable: bool,
}

pub const MIN_ESS: f64 = 50.0;

/// Draws `n_samples` prior samples and weights them by the forward kernel
/// `N(x_t; √ᾱ_t x₀, (1 − ᾱ_t) I)`.
pub fn mc_posterior_moments<R: Rng + ?Sized>(
    mut sample_prior: impl FnMut(&mut R) -> DVector<f64>,
    schedule: &NoiseSchedule,
    x_t: &DVector<f64>,
    t: usize,
    n_samples: usize,
    rng: &mut R,
) -> Result<McMoments> {
    if n_samples < 1000 {
        return Err(Error::config(format!("n_samples = {n_samples} must be at least 1000")));
    }
    let ab = schedule.alpha_bar(t)?;
    let sqrt_ab = ab.sqrt();
    let d = x_t.len();
    let mut samples = Vec::with_capacity(n_samples);
    let mut logw = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let x0 = sample_prior(rng);
        check_len("prior sample", x0.len(), d)?;
        logw.push(-(x_t - &x0 * sqrt_ab).norm_squared() / (2.0 * (1.0 - ab)));
        samples.push(x0);
    }
    let max = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logw.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = w.iter().sum();
    let mut mean = DVector::zeros(d);
    for (wi, x) in w.iter().zip(&samples) {
        mean += x * (wi / total);
    }
    let mut cov = DMatrix::zeros(d, d);
    for (wi, x) in w.iter().zip(&samples) {
        let c = x - &mean;
        cov += &c * c.transpose() * (wi / total);
    }
    let ess = total * total / w.iter().map(|v| v * v).sum::<f64>();
    Ok(McMoments { mean, cov, ess, unreliable: ess < MIN_ESS })
}

/// Central differences: entry `k` is `(f(x + h e_k) − f(x − h e_k)) / 2h`.
pub fn finite_diff_grad(f: impl Fn(&DVector<f64>) -> f64, x: &DVector<f64>, h: f64) -> Result<DVector<f64>> {
    if h.is_nan() || h <= 0.0 {
        return Err(Error::config(format!("finite-difference step h = {h} must be positive")));
    }
    let mut out = DVector::zeros(x.len());
    let mut xp = x.clone();
    for k in 0..x.len() {
        xp[k] = x[k] + h;
        let fp = f(&xp);
        xp[k] = x[k] - h;
        let fm = f(&xp);
        xp[k] = x[k];
        out[k] = (fp - fm) / (2.0 * h);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mse: f64,
    /// `+∞` when the clamped images coincide.
    pub psnr: f64,
    pub ssim: Option<f64>,
}

const SSIM_TAPS: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

/// MSE on raw values; PSNR with data range 1 after clamping to `[0, 1]`;
/// SSIM when `grid = Some((width, height))`.
pub fn metrics(x_hat: &DVector<f64>, x_true: &DVector<f64>, grid: Option<(usize, usize)>) -> Result<Metrics> {
    check_len("x_hat", x_hat.len(), x_true.len())?;
    if x_true.is_empty() {
        return Err(Error::shape("metrics need non-empty inputs"));
    }
    let n = x_true.len() as f64;
    let mse = (x_hat - x_true).norm_squared() / n;
    let clamped_mse = x_hat
        .iter()
        .zip(x_true.iter())
        .map(|(a, b)| (a.clamp(0.0, 1.0) - b.clamp(0.0, 1.0)).powi(2))
        .sum::<f64>()
        / n;
    let psnr = if clamped_mse == 0.0 { f64::INFINITY } else { -10.0 * clamped_mse.log10() };
    let ssim = match grid {
        Some((w, h)) => {
            check_len("image", x_true.len(), w * h)?;
            Some(ssim(x_hat.as_slice(), x_true.as_slice(), w, h))
        }
        None => None,
    };
    Ok(Metrics { mse, psnr, ssim })
}

/// Mean SSIM with a Gaussian window; near borders the window is truncated
/// to the image and renormalized.
fn ssim(x: &[f64], y: &[f64], w: usize, h: usize) -> f64 {
    let radius = (SSIM_TAPS / 2) as i64;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut total = 0.0;
    for r in 0..h as i64 {
        for c in 0..w as i64 {
            let (mut sw, mut mx, mut my, mut mxx, mut myy, mut mxy) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
            for (i, ti) in taps.iter().enumerate() {
                let rr = r + i as i64 - radius;
                if rr < 0 || rr >= h as i64 {
                    continue;
                }
                for (j, tj) in taps.iter().enumerate() {
                    let cc = c + j as i64 - radius;
                    if cc < 0 || cc >= w as i64 {
                        continue;
                    }
                    let p = (rr * w as i64 + cc) as usize;
                    let wt = ti * tj;
                    sw += wt;
                    mx += wt * x[p];
                    my += wt * y[p];
                    mxx += wt * x[p] * x[p];
                    myy += wt * y[p] * y[p];
                    mxy += wt * x[p] * y[p];
                }
            }
            let (mx, my) = (mx / sw, my / sw);
            let vx = mxx / sw - mx * mx;
            let vy = myy / sw - my * my;
            let cxy = mxy / sw - mx * my;
            total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
        }
    }
    total / (w * h) as f64
}
