//! Experiment configuration files (TOML).
//!
//! ```toml
//! base_seed = 0
//! batch = 100
//! output = "results/inpaint"
//! image = [4, 4]
//!
//! [schedule]
//! n_steps = 100
//!
//! [prior]
//! kind = "random_gmm"
//! dim = 16
//! components = 3
//!
//! [operator]
//! kind = "random_mask"
//! keep_fraction = 0.5
//!
//! [noise]
//! sigma = 0.05
//!
//! [[sampler]]
//! mode = "dps"
//!
//! [[sampler]]
//! mode = "cmi_dps"
//! eta0 = 0.05
//! ```

use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use cmi_dps_core::rng::stream;
use cmi_dps_core::{
    make_box_mask, make_downsample, make_gaussian_blur, make_random_mask, BoxRegion, CmiMode, DenseOperator,
    DiffusedGmm, GaussianMixturePrior, GuidanceConfig, LinearOperator, NoiseModel, NoiseSchedule, ScheduleKind,
    DEFAULT_DENSE_LIMIT,
};
use cmi_dps_core::operators::Boundary;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// Stream id used for randomness that defines the problem itself
/// (random priors, random masks), separate from per-seed streams.
const SETUP_STREAM: u64 = 0x5e7u64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub base_seed: u64,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    /// `[width, height]` when the signal is an image.
    #[serde(default)]
    pub image: Option<[usize; 2]>,
    /// Also write reconstructions as plain-text grids.
    #[serde(default)]
    pub dump_grids: bool,
    #[serde(default)]
    pub schedule: ScheduleSpec,
    pub prior: PriorSpec,
    #[serde(default)]
    pub operator: OperatorSpec,
    #[serde(default)]
    pub noise: NoiseSpec,
    #[serde(default)]
    pub diagnose: DiagnoseSpec,
    #[serde(default)]
    pub sampler: Vec<GuidanceConfig>,
}

fn default_batch() -> usize {
    1
}

fn default_output() -> PathBuf {
    PathBuf::from("results")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    #[serde(default = "default_steps")]
    pub n_steps: usize,
    #[serde(default)]
    pub kind: ScheduleKind,
    /// When both bounds are omitted the betas are rescaled from the
    /// 1000-step `1e-4..=0.02` range to `n_steps`.
    pub beta_min: Option<f64>,
    pub beta_max: Option<f64>,
}

fn default_steps() -> usize {
    100
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self { n_steps: default_steps(), kind: ScheduleKind::Linear, beta_min: None, beta_max: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PriorSpec {
    StandardNormal {
        dim: usize,
    },
    Gmm {
        weights: Vec<f64>,
        means: Vec<Vec<f64>>,
        covariances: Vec<Vec<Vec<f64>>>,
    },
    RandomGmm {
        dim: usize,
        components: usize,
        #[serde(default = "one")]
        mean_scale: f64,
        #[serde(default)]
        seed: u64,
    },
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OperatorSpec {
    #[default]
    Identity,
    RandomMask {
        keep_fraction: f64,
        #[serde(default)]
        seed: u64,
    },
    BoxMask {
        left: usize,
        top: usize,
        width: usize,
        height: usize,
    },
    Blur {
        #[serde(default = "default_kernel")]
        kernel_size: usize,
        #[serde(default = "one")]
        sigma: f64,
    },
    Downsample {
        factor: usize,
    },
    Dense {
        rows: Vec<Vec<f64>>,
    },
}

fn default_kernel() -> usize {
    5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    #[serde(default = "default_sigma")]
    pub sigma: f64,
}

fn default_sigma() -> f64 {
    0.05
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self { sigma: default_sigma() }
    }
}

/// Parameters of the `diagnose` subcommand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnoseSpec {
    /// Step at which derivatives are checked; defaults to `n_steps / 3`.
    pub t: Option<usize>,
    #[serde(default = "default_probe_seeds")]
    pub probe_seeds: u64,
    #[serde(default = "default_fd_step")]
    pub fd_step: f64,
}

fn default_probe_seeds() -> u64 {
    5
}

fn default_fd_step() -> f64 {
    1e-4
}

impl Default for DiagnoseSpec {
    fn default() -> Self {
        Self { t: None, probe_seeds: default_probe_seeds(), fd_step: default_fd_step() }
    }
}

/// A configuration problem, located in the source file when possible.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(line) => write!(f, "line {line}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

/// Source text kept around to attach line numbers to semantic errors.
#[derive(Debug, Clone, Default)]
pub struct Source {
    text: String,
}

impl Source {
    pub fn new(text: impl Into<String>) -> Self {
        Self { text: text.into() }
    }

    /// Lines of `section` (`""` for top level) as `(line number, key)`,
    /// plus the header line. For arrays of tables `index` picks the element.
    fn section_lines(&self, section: &str, index: usize) -> (Option<usize>, Vec<(usize, &str)>) {
        let mut current = "";
        let mut element = 0usize;
        let mut counts: Vec<(&str, usize)> = Vec::new();
        let mut header = None;
        let mut keys = Vec::new();
        for (i, raw) in self.text.lines().enumerate() {
            let line = raw.trim();
            let parsed = if let Some(rest) = line.strip_prefix("[[") {
                header_name(rest, "]]").map(|n| (n, true))
            } else if let Some(rest) = line.strip_prefix('[') {
                header_name(rest, "]").map(|n| (n, false))
            } else {
                None
            };
            let Some((name, array)) = parsed else {
                if current == section && element == index {
                    if let Some((key, _)) = line.split_once('=') {
                        keys.push((i + 1, key.trim()));
                    }
                }
                continue;
            };
            current = name;
            element = 0;
            if array {
                match counts.iter_mut().find(|(n, _)| *n == name) {
                    Some((_, c)) => {
                        *c += 1;
                        element = *c;
                    }
                    None => counts.push((name, 0)),
                }
            }
            if current == section && element == index {
                header = Some(i + 1);
            }
        }
        (header, keys)
    }

    /// Line (1-based) of `key` inside `section`; a missing key falls back to
    /// the section header.
    pub fn locate(&self, section: &str, index: usize, key: Option<&str>) -> Option<usize> {
        let (header, keys) = self.section_lines(section, index);
        key.and_then(|k| keys.iter().find(|(_, name)| *name == k).map(|(l, _)| *l)).or(header)
    }

    /// Like [`Source::locate`] with the first key of the section that the
    /// message mentions.
    pub fn locate_mentioned(&self, section: &str, index: usize, message: &str) -> Option<usize> {
        let (header, keys) = self.section_lines(section, index);
        keys.iter().find(|(_, name)| mentions(message, name)).map(|(l, _)| *l).or(header)
    }
}

fn header_name<'a>(rest: &'a str, close: &str) -> Option<&'a str> {
    let name = rest.split(close).next().unwrap_or("").trim();
    let is_name = name.starts_with(|c: char| c.is_ascii_alphabetic())
        && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.');
    is_name.then_some(name)
}

fn mentions(message: &str, key: &str) -> bool {
    message.match_indices(key).any(|(at, _)| {
        let before = message[..at].chars().next_back();
        let after = message[at + key.len()..].chars().next();
        let word = |c: Option<char>| c.is_some_and(|c| c.is_alphanumeric() || c == '_');
        !word(before) && !word(after)
    })
}

fn err(source: &Source, section: &str, index: usize, key: Option<&str>, message: impl Into<String>) -> ConfigError {
    ConfigError { line: source.locate(section, index, key), message: message.into() }
}

fn err_mentioned(source: &Source, section: &str, index: usize, message: String) -> ConfigError {
    ConfigError { line: source.locate_mentioned(section, index, &message), message }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<(Self, Source), ConfigError> {
        let source = Source::new(text);
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| ConfigError {
            line: e.span().map(|s| text[..s.start].lines().count().max(1)),
            message: e.message().to_string(),
        })?;
        cfg.validate(&source)?;
        Ok((cfg, source))
    }

    pub fn load(path: &Path) -> Result<(Self, Source), ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError { line: None, message: format!("cannot read {}: {e}", path.display()) })?;
        Self::from_toml(&text).map_err(|e| ConfigError { message: format!("{}: {}", path.display(), e.message), ..e })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn dim(&self) -> usize {
        match &self.prior {
            PriorSpec::StandardNormal { dim } | PriorSpec::RandomGmm { dim, .. } => *dim,
            PriorSpec::Gmm { means, .. } => means.first().map_or(0, |m| m.len()),
        }
    }

    /// Checks everything that can be checked without building the problem;
    /// [`Problem::build`] reports the rest.
    pub fn validate(&self, source: &Source) -> Result<(), ConfigError> {
        if self.batch < 1 {
            return Err(err(source, "", 0, Some("batch"), "batch must be at least 1"));
        }
        if self.sampler.is_empty() {
            return Err(err(source, "", 0, None, "at least one [[sampler]] section is required"));
        }
        let d = self.dim();
        if d == 0 {
            return Err(err(source, "prior", 0, Some("dim"), "prior dimension must be positive"));
        }
        if let Some([w, h]) = self.image {
            if w * h != d {
                return Err(err(source, "", 0, Some("image"), format!("image {w}x{h} does not match dimension {d}")));
            }
        }
        if !(self.noise.sigma >= 0.0 && self.noise.sigma.is_finite()) {
            return Err(err(source, "noise", 0, Some("sigma"), "noise sigma must be finite and nonnegative"));
        }
        let mut modes = Vec::new();
        for (i, s) in self.sampler.iter().enumerate() {
            if let Err(e) = s.validate() {
                return Err(err_mentioned(source, "sampler", i, e.to_string()));
            }
            if modes.contains(&s.mode) {
                return Err(err(source, "sampler", i, Some("mode"), format!("mode `{}` appears twice", s.mode)));
            }
            modes.push(s.mode);
            if s.mode.uses_cmi() {
                if self.noise.sigma == 0.0 {
                    return Err(err(source, "noise", 0, Some("sigma"), "CMI guidance needs sigma > 0"));
                }
                if s.cmi_mode == CmiMode::Exact && d > DEFAULT_DENSE_LIMIT {
                    return Err(err(
                        source,
                        "sampler",
                        i,
                        Some("cmi_mode"),
                        format!("exact CMI gradients need dim ≤ {DEFAULT_DENSE_LIMIT}; use cmi_mode = \"hutchinson\""),
                    ));
                }
            }
        }
        let grid_needed = matches!(
            self.operator,
            OperatorSpec::BoxMask { .. } | OperatorSpec::Blur { .. } | OperatorSpec::Downsample { .. }
        );
        if grid_needed && self.image.is_none() {
            return Err(err(source, "operator", 0, Some("kind"), "this operator needs `image = [width, height]`"));
        }
        Ok(())
    }
}

/// A fully constructed inverse problem.
#[derive(Clone)]
pub struct Problem {
    pub dim: usize,
    pub grid: Option<(usize, usize)>,
    pub schedule: Arc<NoiseSchedule>,
    pub prior: GaussianMixturePrior,
    pub model: Arc<DiffusedGmm>,
    pub operator: Arc<dyn LinearOperator>,
    pub noise: NoiseModel,
}

impl Problem {
    pub fn build(cfg: &ExperimentConfig, source: &Source) -> Result<Self, ConfigError> {
        let d = cfg.dim();
        let s = &cfg.schedule;
        let schedule = match (s.beta_min, s.beta_max) {
            (None, None) => NoiseSchedule::ddpm_equivalent(s.n_steps),
            (Some(lo), Some(hi)) => NoiseSchedule::build(s.kind, s.n_steps, lo, hi),
            _ => {
                return Err(err(source, "schedule", 0, None, "give both beta_min and beta_max or neither"));
            }
        }
        .map_err(|e| err_mentioned(source, "schedule", 0, e.to_string()))?;
        let schedule = Arc::new(schedule);

        let prior = match &cfg.prior {
            PriorSpec::StandardNormal { dim } => GaussianMixturePrior::standard_normal(*dim),
            PriorSpec::Gmm { weights, means, covariances } => {
                let means = means.iter().map(|m| DVector::from_column_slice(m)).collect();
                let covs = covariances
                    .iter()
                    .map(|c| {
                        let n = c.len();
                        if c.iter().any(|row| row.len() != n) {
                            return Err(err(source, "prior", 0, Some("covariances"), "covariance rows must be square"));
                        }
                        Ok(DMatrix::from_fn(n, n, |i, j| c[i][j]))
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                GaussianMixturePrior::new(weights.clone(), means, covs)
            }
            PriorSpec::RandomGmm { dim, components, mean_scale, seed } => {
                GaussianMixturePrior::random(*dim, *components, *mean_scale, &mut stream(*seed, SETUP_STREAM))
            }
        }
        .map_err(|e| err_mentioned(source, "prior", 0, e.to_string()))?;
        let model = Arc::new(DiffusedGmm::new(prior.clone(), schedule.clone()));

        let grid = cfg.image.map(|[w, h]| (w, h));
        let op_err = |e: cmi_dps_core::Error| err_mentioned(source, "operator", 0, e.to_string());
        let operator: Arc<dyn LinearOperator> = match &cfg.operator {
            OperatorSpec::Identity => Arc::new(DenseOperator::identity(d)),
            OperatorSpec::RandomMask { keep_fraction, seed } => {
                let mask = make_random_mask(d, *keep_fraction, &mut stream(*seed, SETUP_STREAM + 1)).map_err(op_err)?;
                match grid {
                    Some((w, h)) => Arc::new(mask.with_grid(w, h).map_err(op_err)?),
                    None => Arc::new(mask),
                }
            }
            OperatorSpec::BoxMask { left, top, width, height } => {
                let (w, h) = grid.expect("validated");
                let region = BoxRegion { left: *left, top: *top, width: *width, height: *height };
                Arc::new(make_box_mask(w, h, region).map_err(op_err)?)
            }
            OperatorSpec::Blur { kernel_size, sigma } => {
                let (w, h) = grid.expect("validated");
                Arc::new(make_gaussian_blur(w, h, *kernel_size, *sigma, Boundary::ZeroPad).map_err(op_err)?)
            }
            OperatorSpec::Downsample { factor } => {
                let (w, h) = grid.expect("validated");
                Arc::new(make_downsample(w, h, *factor).map_err(op_err)?)
            }
            OperatorSpec::Dense { rows } => {
                let m = rows.len();
                if rows.iter().any(|r| r.len() != d) {
                    return Err(err(source, "operator", 0, Some("rows"), format!("every row needs {d} entries")));
                }
                Arc::new(DenseOperator::new(DMatrix::from_fn(m, d, |i, j| rows[i][j])))
            }
        };
        let noise = NoiseModel::scalar(cfg.noise.sigma).map_err(|e| err(source, "noise", 0, Some("sigma"), e.to_string()))?;
        Ok(Problem { dim: d, grid, schedule, prior, model, operator, noise })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use cmi_dps_core::GuidanceMode;

    const BASIC: &str = r#"
base_seed = 3
batch = 2

[prior]
kind = "random_gmm"
dim = 4
components = 2

[operator]
kind = "random_mask"
keep_fraction = 0.5

[[sampler]]
mode = "dps"

[[sampler]]
mode = "cmi_dps"
eta0 = 0.1
"#;

    #[test]
    fn parses_with_defaults() {
        let (cfg, source) = ExperimentConfig::from_toml(BASIC).unwrap();
        assert_eq!(cfg.schedule.n_steps, 100);
        assert_eq!(cfg.noise.sigma, 0.05);
        assert_eq!(cfg.sampler[1].mode, GuidanceMode::CmiDps);
        assert_eq!(cfg.sampler[1].eta0, 0.1);
        assert_eq!(cfg.sampler[0].zeta0, 1.0);
        let problem = Problem::build(&cfg, &source).unwrap();
        assert_eq!(problem.operator.out_dim(), 2);
        assert!((problem.schedule.beta(100).unwrap() - 0.2).abs() < 1e-15);

        let again = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap().0;
        assert_eq!(again, cfg);
    }

    #[test]
    fn syntax_errors_carry_line_numbers() {
        let broken = BASIC.replace("components = 2", "components = ");
        let e = ExperimentConfig::from_toml(&broken).unwrap_err();
        assert_eq!(e.line, Some(8));
        let unknown = BASIC.replace("keep_fraction = 0.5", "keep_fraction = 0.5\nkeep = 1");
        let e = ExperimentConfig::from_toml(&unknown).unwrap_err();
        assert!(e.line.is_some(), "{e}");
    }

    #[test]
    fn semantic_errors_point_at_the_offending_key() {
        let zero_batch = BASIC.replace("batch = 2", "batch = 0");
        assert_eq!(ExperimentConfig::from_toml(&zero_batch).unwrap_err().line, Some(3));

        let negative = BASIC.replace("eta0 = 0.1", "eta0 = -0.1");
        let e = ExperimentConfig::from_toml(&negative).unwrap_err();
        assert_eq!(e.line, Some(19), "{e}");
        assert!(e.message.contains("eta0"));

        let duplicate = BASIC.replace("mode = \"cmi_dps\"", "mode = \"dps\"");
        assert_eq!(ExperimentConfig::from_toml(&duplicate).unwrap_err().line, Some(18));

        let no_grid = BASIC.replace("kind = \"random_mask\"\nkeep_fraction = 0.5", "kind = \"blur\"");
        assert_eq!(ExperimentConfig::from_toml(&no_grid).unwrap_err().line, Some(11));

        let bad_keep = BASIC.replace("keep_fraction = 0.5", "keep_fraction = 1.5");
        let (cfg, source) = ExperimentConfig::from_toml(&bad_keep).unwrap();
        let e = Problem::build(&cfg, &source).err().unwrap();
        assert_eq!(e.line, Some(12));
        assert!(e.message.contains("keep_fraction"));
    }
}
