//! CMI-guided diffusion posterior sampling for noisy linear inverse problems.
//!
//! The crate is organized bottom-up:
//!
//! - [`schedule`]: the discrete VP noise schedule (`β_t`, `ᾱ_t`, `σ̃_t`).
//! - [`score`]: score models with exact Hessians and third-order contractions.
//! - [`operators`]: measurement operators `A` and Gaussian noise models.
//! - [`cmi`]: posterior covariances, the conditional mutual information
//!   `I(x₀; y | x_t)` and its exact and Hutchinson-estimated gradients.
//! - [`sampler`]: DDPM ancestral sampling with DPS / ΠGDM guidance and the
//!   optional CMI ascent step.
//! - [`oracles`]: independent reference computations and reconstruction metrics.

pub mod cmi;
pub mod error;
pub mod linalg;
pub mod operators;
pub mod oracles;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod score;

pub use cmi::{
    cmi_value, contract1, contract2, gaussian_entropy, grad_sigma_post, grad_sigma_post_y,
    measurement_posterior_cov, posterior_cov, trace_slices, CmiContext, HutchinsonConfig,
    CmiState, HutchinsonEstimate, InformationGram, MeasurementPosterior, PosteriorCov,
    PosteriorMoments,
};
pub use error::{Error, Result};
pub use linalg::{SpdFactor, Tensor3, DEFAULT_DENSE_LIMIT};
pub use operators::{
    make_box_mask, make_downsample, make_gaussian_blur, make_random_mask, measure, BoxRegion,
    DenseOperator, LinearOperator, NoiseModel, OperatorDescriptor, OperatorKind,
};
pub use oracles::{conjugate_gaussian_posterior, finite_diff_grad, metrics, GaussianDist, Metrics};
pub use sampler::{sample, CmiMode, GuidanceConfig, GuidanceMode, RunRecord, StepDiagnostics};
pub use schedule::{NoiseSchedule, ScheduleKind};
pub use score::{
    finite_diff_wrap, tweedie_denoise, Capabilities, DiffusedGmm, FiniteDiffScore,
    GaussianMixturePrior, ScoreFn, ScoreModel,
};
