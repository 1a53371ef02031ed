//! Linear measurement operators and Gaussian measurement noise.
//!
//! Image-shaped operators use row-major flattening: pixel `(row, col)` of a
//! `width × height` grid lives at index `row * width + col`.

use std::fmt::Debug;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::linalg::SpdFactor;
use crate::rng::standard_normal;

/// Largest input dimension for which operators are materialized densely.
pub const DENSE_OPERATOR_LIMIT: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OperatorKind {
    Mask,
    BoxMask,
    Blur,
    Downsample,
    Dense,
}

/// Serializable description of a constructed operator, including the index
/// set of masks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OperatorDescriptor {
    Mask { in_dim: usize, indices: Vec<usize> },
    BoxMask { width: usize, height: usize, region: BoxRegion, indices: Vec<usize> },
    Blur { width: usize, height: usize, kernel_size: usize, sigma: f64 },
    Downsample { width: usize, height: usize, factor: usize },
    Dense { rows: usize, cols: usize },
}

/// The measurement map `A ∈ ℝ^{m×d}`.
pub trait LinearOperator: Send + Sync + Debug {
    fn in_dim(&self) -> usize;
    fn out_dim(&self) -> usize;
    fn kind(&self) -> OperatorKind;
    fn describe(&self) -> OperatorDescriptor;

    /// `(width, height)` when the input is an image grid.
    fn grid(&self) -> Option<(usize, usize)> {
        None
    }

    fn apply(&self, x: &DVector<f64>) -> Result<DVector<f64>>;

    fn adjoint(&self, y: &DVector<f64>) -> Result<DVector<f64>>;

    fn to_dense(&self) -> Result<DMatrix<f64>> {
        let d = self.in_dim();
        if d > DENSE_OPERATOR_LIMIT {
            return Err(Error::DenseLimit { dim: d, limit: DENSE_OPERATOR_LIMIT });
        }
        let mut out = DMatrix::zeros(self.out_dim(), d);
        let mut e = DVector::zeros(d);
        for j in 0..d {
            e[j] = 1.0;
            out.set_column(j, &self.apply(&e)?);
            e[j] = 0.0;
        }
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// Coordinate selections: random masks and box masks
// ---------------------------------------------------------------------------

/// Keeps a subset of coordinates, in increasing index order.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    in_dim: usize,
    indices: Vec<usize>,
    kind: OperatorKind,
    grid: Option<(usize, usize)>,
    region: Option<BoxRegion>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoxRegion {
    pub left: usize,
    pub top: usize,
    pub width: usize,
    pub height: usize,
}

impl Selection {
    pub fn new(in_dim: usize, mut indices: Vec<usize>) -> Result<Self> {
        indices.sort_unstable();
        indices.dedup();
        if let Some(&bad) = indices.iter().find(|&&i| i >= in_dim) {
            return Err(Error::config(format!("mask index {bad} out of range for dimension {in_dim}")));
        }
        Ok(Self { in_dim, indices, kind: OperatorKind::Mask, grid: None, region: None })
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn with_grid(mut self, width: usize, height: usize) -> Result<Self> {
        if width * height != self.in_dim {
            return Err(Error::config(format!(
                "grid {width}x{height} does not match dimension {}",
                self.in_dim
            )));
        }
        self.grid = Some((width, height));
        Ok(self)
    }
}

/// Keeps `⌈keep_fraction · d⌉` coordinates drawn uniformly without replacement.
pub fn make_random_mask<R: Rng + ?Sized>(d: usize, keep_fraction: f64, rng: &mut R) -> Result<Selection> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(Error::config(format!("keep_fraction = {keep_fraction} must lie in (0, 1]")));
    }
    if d == 0 {
        return Err(Error::config("mask dimension must be positive"));
    }
    // guard against 0.7 * 10 = 7.000000000000001
    let m = ((keep_fraction * d as f64) - 1e-9).ceil().clamp(1.0, d as f64) as usize;
    let indices = sample_indices(rng, d, m).into_vec();
    Selection::new(d, indices)
}

/// Observes every pixel outside `region`.
pub fn make_box_mask(width: usize, height: usize, region: BoxRegion) -> Result<Selection> {
    if width == 0 || height == 0 {
        return Err(Error::config("box mask grid must be non-empty"));
    }
    if region.left + region.width > width || region.top + region.height > height {
        return Err(Error::config(format!(
            "box {region:?} extends outside the {width}x{height} grid"
        )));
    }
    let inside = |r: usize, c: usize| {
        r >= region.top && r < region.top + region.height && c >= region.left && c < region.left + region.width
    };
    let indices: Vec<usize> = (0..height)
        .flat_map(|r| (0..width).map(move |c| (r, c)))
        .filter(|&(r, c)| !inside(r, c))
        .map(|(r, c)| r * width + c)
        .collect();
    if indices.is_empty() {
        return Err(Error::config("box mask covers the whole grid, leaving no measurements"));
    }
    Ok(Selection {
        in_dim: width * height,
        indices,
        kind: OperatorKind::BoxMask,
        grid: Some((width, height)),
        region: Some(region),
    })
}

impl LinearOperator for Selection {
    fn in_dim(&self) -> usize {
        self.in_dim
    }

    fn out_dim(&self) -> usize {
        self.indices.len()
    }

    fn kind(&self) -> OperatorKind {
        self.kind
    }

    fn describe(&self) -> OperatorDescriptor {
        match (self.kind, self.grid, self.region) {
            (OperatorKind::BoxMask, Some((width, height)), Some(region)) => {
                OperatorDescriptor::BoxMask { width, height, region, indices: self.indices.clone() }
            }
            _ => OperatorDescriptor::Mask { in_dim: self.in_dim, indices: self.indices.clone() },
        }
    }

    fn grid(&self) -> Option<(usize, usize)> {
        self.grid
    }

    fn apply(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        check_len("operator input", x.len(), self.in_dim)?;
        Ok(DVector::from_iterator(self.indices.len(), self.indices.iter().map(|&i| x[i])))
    }

    fn adjoint(&self, y: &DVector<f64>) -> Result<DVector<f64>> {
        check_len("adjoint input", y.len(), self.indices.len())?;
        let mut out = DVector::zeros(self.in_dim);
        for (v, &i) in y.iter().zip(&self.indices) {
            out[i] = *v;
        }
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// Gaussian blur
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    #[default]
    ZeroPad,
}

/// Separable, normalized Gaussian convolution with zero padding.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBlur {
    width: usize,
    height: usize,
    sigma: f64,
    kernel: Vec<f64>,
}

pub fn make_gaussian_blur(
    width: usize,
    height: usize,
    kernel_size: usize,
    sigma: f64,
    boundary: Boundary,
) -> Result<GaussianBlur> {
    let Boundary::ZeroPad = boundary;
    if width == 0 || height == 0 {
        return Err(Error::config("blur grid must be non-empty"));
    }
    if kernel_size % 2 == 0 {
        return Err(Error::config(format!("kernel_size = {kernel_size} must be odd")));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::config(format!("blur sigma = {sigma} must be positive")));
    }
    let radius = (kernel_size / 2) as i64;
    let raw: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    let kernel = raw.into_iter().map(|v| v / total).collect();
    Ok(GaussianBlur { width, height, sigma, kernel })
}

impl GaussianBlur {
    pub fn kernel_1d(&self) -> &[f64] {
        &self.kernel
    }

    /// `out(r, c) = Σ_ij k[i] k[j] x(r + i − R, c + j − R)` over in-bounds pixels.
    fn correlate(&self, x: &DVector<f64>, kernel: &[f64]) -> DVector<f64> {
        let (w, h) = (self.width as i64, self.height as i64);
        let radius = (kernel.len() / 2) as i64;
        let mut rows = DVector::zeros(x.len());
        for r in 0..h {
            for c in 0..w {
                let mut acc = 0.0;
                for (j, kj) in kernel.iter().enumerate() {
                    let cc = c + j as i64 - radius;
                    if (0..w).contains(&cc) {
                        acc += kj * x[(r * w + cc) as usize];
                    }
                }
                rows[(r * w + c) as usize] = acc;
            }
        }
        let mut out = DVector::zeros(x.len());
        for r in 0..h {
            for c in 0..w {
                let mut acc = 0.0;
                for (i, ki) in kernel.iter().enumerate() {
                    let rr = r + i as i64 - radius;
                    if (0..h).contains(&rr) {
                        acc += ki * rows[(rr * w + c) as usize];
                    }
                }
                out[(r * w + c) as usize] = acc;
            }
        }
        out
    }
}

impl LinearOperator for GaussianBlur {
    fn in_dim(&self) -> usize {
        self.width * self.height
    }

    fn out_dim(&self) -> usize {
        self.width * self.height
    }

    fn kind(&self) -> OperatorKind {
        OperatorKind::Blur
    }

    fn describe(&self) -> OperatorDescriptor {
        OperatorDescriptor::Blur {
            width: self.width,
            height: self.height,
            kernel_size: self.kernel.len(),
            sigma: self.sigma,
        }
    }

    fn grid(&self) -> Option<(usize, usize)> {
        Some((self.width, self.height))
    }

    fn apply(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        check_len("operator input", x.len(), self.in_dim())?;
        Ok(self.correlate(x, &self.kernel))
    }

    fn adjoint(&self, y: &DVector<f64>) -> Result<DVector<f64>> {
        check_len("adjoint input", y.len(), self.out_dim())?;
        let flipped: Vec<f64> = self.kernel.iter().rev().copied().collect();
        Ok(self.correlate(y, &flipped))
    }
}

// ---------------------------------------------------------------------------
// Block-average downsampling
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct Downsample {
    width: usize,
    height: usize,
    factor: usize,
}

pub fn make_downsample(width: usize, height: usize, factor: usize) -> Result<Downsample> {
    if factor == 0 || width == 0 || height == 0 {
        return Err(Error::config("downsample factor and grid must be positive"));
    }
    if width % factor != 0 || height % factor != 0 {
        return Err(Error::config(format!(
            "factor {factor} does not divide the {width}x{height} grid"
        )));
    }
    Ok(Downsample { width, height, factor })
}

impl LinearOperator for Downsample {
    fn in_dim(&self) -> usize {
        self.width * self.height
    }

    fn out_dim(&self) -> usize {
        self.in_dim() / (self.factor * self.factor)
    }

    fn kind(&self) -> OperatorKind {
        OperatorKind::Downsample
    }

    fn describe(&self) -> OperatorDescriptor {
        OperatorDescriptor::Downsample { width: self.width, height: self.height, factor: self.factor }
    }

    fn grid(&self) -> Option<(usize, usize)> {
        Some((self.width, self.height))
    }

    fn apply(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        check_len("operator input", x.len(), self.in_dim())?;
        let f = self.factor;
        let ow = self.width / f;
        let mut out = DVector::zeros(self.out_dim());
        let inv = 1.0 / (f * f) as f64;
        for r in 0..self.height {
            for c in 0..self.width {
                out[(r / f) * ow + c / f] += x[r * self.width + c] * inv;
            }
        }
        Ok(out)
    }

    fn adjoint(&self, y: &DVector<f64>) -> Result<DVector<f64>> {
        check_len("adjoint input", y.len(), self.out_dim())?;
        let f = self.factor;
        let ow = self.width / f;
        let inv = 1.0 / (f * f) as f64;
        Ok(DVector::from_fn(self.in_dim(), |i, _| {
            let (r, c) = (i / self.width, i % self.width);
            y[(r / f) * ow + c / f] * inv
        }))
    }
}

// ---------------------------------------------------------------------------
// Explicit matrices
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct DenseOperator {
    matrix: DMatrix<f64>,
}

impl DenseOperator {
    pub fn new(matrix: DMatrix<f64>) -> Self {
        Self { matrix }
    }

    pub fn identity(d: usize) -> Self {
        Self::new(DMatrix::identity(d, d))
    }
}

impl LinearOperator for DenseOperator {
    fn in_dim(&self) -> usize {
        self.matrix.ncols()
    }

    fn out_dim(&self) -> usize {
        self.matrix.nrows()
    }

    fn kind(&self) -> OperatorKind {
        OperatorKind::Dense
    }

    fn describe(&self) -> OperatorDescriptor {
        OperatorDescriptor::Dense { rows: self.matrix.nrows(), cols: self.matrix.ncols() }
    }

    fn apply(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        check_len("operator input", x.len(), self.in_dim())?;
        Ok(&self.matrix * x)
    }

    fn adjoint(&self, y: &DVector<f64>) -> Result<DVector<f64>> {
        check_len("adjoint input", y.len(), self.out_dim())?;
        Ok(self.matrix.tr_mul(y))
    }

    fn to_dense(&self) -> Result<DMatrix<f64>> {
        Ok(self.matrix.clone())
    }
}

// ---------------------------------------------------------------------------
// Noise
// ---------------------------------------------------------------------------

/// Covariance `Σ_n` of the additive measurement noise.
#[derive(Debug, Clone)]
pub enum NoiseModel {
    /// `σ² I`.
    Scalar { sigma: f64 },
    Diagonal { variances: DVector<f64> },
    Dense { covariance: DMatrix<f64>, factor: SpdFactor },
}

impl NoiseModel {
    /// Isotropic noise with standard deviation `sigma ≥ 0`. `sigma = 0` is
    /// accepted for noiseless measurement but cannot be inverted.
    pub fn scalar(sigma: f64) -> Result<Self> {
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(Error::config(format!("noise sigma = {sigma} must be finite and nonnegative")));
        }
        Ok(NoiseModel::Scalar { sigma })
    }

    pub fn diagonal(variances: DVector<f64>) -> Result<Self> {
        if variances.iter().any(|v| *v <= 0.0 || !v.is_finite()) {
            return Err(Error::config("diagonal noise variances must be positive"));
        }
        Ok(NoiseModel::Diagonal { variances })
    }

    pub fn dense(covariance: DMatrix<f64>) -> Result<Self> {
        let factor = SpdFactor::new(&covariance, "noise covariance")?;
        Ok(NoiseModel::Dense { covariance, factor })
    }

    fn check_dim(&self, m: usize) -> Result<()> {
        match self {
            NoiseModel::Scalar { .. } => Ok(()),
            NoiseModel::Diagonal { variances } => check_len("noise variances", variances.len(), m),
            NoiseModel::Dense { covariance, .. } => check_len("noise covariance", covariance.nrows(), m),
        }
    }

    pub fn is_positive_definite(&self) -> bool {
        match self {
            NoiseModel::Scalar { sigma } => *sigma > 0.0,
            _ => true,
        }
    }

    pub fn covariance(&self, m: usize) -> Result<DMatrix<f64>> {
        self.check_dim(m)?;
        Ok(match self {
            NoiseModel::Scalar { sigma } => DMatrix::identity(m, m) * (sigma * sigma),
            NoiseModel::Diagonal { variances } => DMatrix::from_diagonal(variances),
            NoiseModel::Dense { covariance, .. } => covariance.clone(),
        })
    }

    /// `Σ_n⁻¹ B` for an `m × k` matrix `B`.
    pub fn solve(&self, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_dim(b.nrows())?;
        if !self.is_positive_definite() {
            return Err(Error::Factorization("noise covariance is singular (sigma = 0)".into()));
        }
        Ok(match self {
            NoiseModel::Scalar { sigma } => b / (sigma * sigma),
            NoiseModel::Diagonal { variances } => {
                let mut out = b.clone();
                for (i, v) in variances.iter().enumerate() {
                    out.row_mut(i).unscale_mut(*v);
                }
                out
            }
            NoiseModel::Dense { factor, .. } => factor.solve_mat(b),
        })
    }

    pub fn log_det(&self, m: usize) -> Result<f64> {
        self.check_dim(m)?;
        if !self.is_positive_definite() {
            return Err(Error::Factorization("noise covariance is singular (sigma = 0)".into()));
        }
        Ok(match self {
            NoiseModel::Scalar { sigma } => m as f64 * (sigma * sigma).ln(),
            NoiseModel::Diagonal { variances } => variances.iter().map(|v| v.ln()).sum(),
            NoiseModel::Dense { factor, .. } => factor.log_det(),
        })
    }

    pub fn sample<R: Rng + ?Sized>(&self, m: usize, rng: &mut R) -> Result<DVector<f64>> {
        self.check_dim(m)?;
        let z = standard_normal(rng, m);
        Ok(match self {
            NoiseModel::Scalar { sigma } => z * *sigma,
            NoiseModel::Diagonal { variances } => z.component_mul(&variances.map(f64::sqrt)),
            NoiseModel::Dense { factor, .. } => factor.l() * z,
        })
    }
}

/// `y = A x₀ + n`, `n ~ N(0, Σ_n)`.
pub fn measure<R: Rng + ?Sized>(
    a: &dyn LinearOperator,
    noise: &NoiseModel,
    x0: &DVector<f64>,
    rng: &mut R,
) -> Result<DVector<f64>> {
    let clean = a.apply(x0)?;
    let n = noise.sample(clean.len(), rng)?;
    Ok(clean + n)
}
