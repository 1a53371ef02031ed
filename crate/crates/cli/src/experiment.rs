//! Batch runs: one problem instance per seed, every configured sampler on it.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use cmi_dps_core::rng::{stream, DATA_STREAM};
use cmi_dps_core::sampler::draw_problem;
use cmi_dps_core::{metrics, sample, Error as CoreError, GuidanceMode, Metrics, RunRecord};
use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Problem};
use crate::error::CliError;

pub const CSV_HEADER: &str = "seed,mode,mse,psnr,ssim,wall_ms,cmi_steps_nonzero";

/// One (seed, mode) outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub seed: u64,
    pub mode: GuidanceMode,
    /// `None` when the run aborted.
    pub metrics: Option<Metrics>,
    pub wall_ms: f64,
    pub cmi_steps_nonzero: usize,
    /// Step at which a non-finite state appeared.
    pub failed_at: Option<usize>,
}

fn num(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else if v.is_nan() {
        "nan".into()
    } else if v > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}

impl Row {
    pub fn to_csv(&self) -> String {
        let (mse, psnr, ssim) = match &self.metrics {
            Some(m) => (num(m.mse), num(m.psnr), m.ssim.map_or_else(String::new, num)),
            None => ("nan".into(), "nan".into(), "nan".into()),
        };
        format!(
            "{},{},{mse},{psnr},{ssim},{},{}",
            self.seed,
            self.mode,
            num(self.wall_ms),
            self.cmi_steps_nonzero
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub stderr: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Self> {
        let n = values.len();
        if n == 0 {
            return None;
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let stderr = if n > 1 {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            f64::NAN
        };
        Some(Self { mean, stderr })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeSummary {
    pub runs: usize,
    pub failures: usize,
    pub mse: Option<Stat>,
    pub psnr: Option<Stat>,
    pub ssim: Option<Stat>,
}

/// Per-seed MSE differences `guided − base` on seeds where both succeeded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedComparison {
    pub mode: GuidanceMode,
    pub base: GuidanceMode,
    pub pairs: usize,
    pub mse_diff: Option<Stat>,
    /// Mean difference over its sample standard deviation.
    pub effect_size: f64,
    pub wins: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub base_seed: u64,
    pub batch: usize,
    pub modes: BTreeMap<String, ModeSummary>,
    pub paired: Vec<PairedComparison>,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub rows: Vec<Row>,
    pub summary: Summary,
    pub records: Vec<RunRecord>,
    /// Ground truth per seed, in seed order.
    pub truths: Vec<(u64, DVector<f64>)>,
}

impl ExperimentOutput {
    pub fn csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.to_csv());
            out.push('\n');
        }
        out
    }

    /// Writes `results.csv`, `summary.json`, `records/` and, if asked, `grids/`.
    pub fn write(&self, dir: &Path, grid: Option<(usize, usize)>, dump_grids: bool) -> Result<(), CliError> {
        fs::create_dir_all(dir.join("records"))?;
        fs::write(dir.join("results.csv"), self.csv())?;
        fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&self.summary)?)?;
        for rec in &self.records {
            let path = dir.join("records").join(format!("{}_{}.json", rec.seed, rec.mode));
            fs::write(path, serde_json::to_string_pretty(rec)?)?;
        }
        if dump_grids {
            fs::create_dir_all(dir.join("grids"))?;
            for (seed, truth) in &self.truths {
                fs::write(dir.join("grids").join(format!("{seed}_truth.txt")), format_grid(truth.as_slice(), grid))?;
            }
            for rec in &self.records {
                let path = dir.join("grids").join(format!("{}_{}.txt", rec.seed, rec.mode));
                fs::write(path, format_grid(&rec.x0, grid))?;
            }
        }
        Ok(())
    }
}

/// Whitespace-separated values, one image row per line.
pub fn format_grid(values: &[f64], grid: Option<(usize, usize)>) -> String {
    let width = grid.map_or(values.len(), |(w, _)| w).max(1);
    let mut out = String::new();
    for row in values.chunks(width) {
        let line: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
        let _ = writeln!(out, "{}", line.join(" "));
    }
    out
}

/// Ground truth and the outcome of every sampler for one seed.
type SeedRuns = (DVector<f64>, Vec<(Row, Option<RunRecord>)>);

fn run_seed(
    cfg: &ExperimentConfig,
    problem: &Problem,
    seed: u64,
) -> Result<SeedRuns, CliError> {
    let mut data_rng = stream(seed, DATA_STREAM);
    let (x0, y) =
        draw_problem(|rng| problem.prior.sample(rng), problem.operator.as_ref(), &problem.noise, &mut data_rng)?;
    let mut out = Vec::with_capacity(cfg.sampler.len());
    for sampler in &cfg.sampler {
        let mut config = sampler.clone();
        config.seed = seed;
        match sample(&y, problem.operator.as_ref(), &problem.noise, problem.model.as_ref(), &problem.schedule, &config) {
            Ok(rec) => {
                let m = metrics(&DVector::from_column_slice(&rec.x0), &x0, problem.grid)?;
                let row = Row {
                    seed,
                    mode: config.mode,
                    metrics: Some(m),
                    wall_ms: rec.wall_ms,
                    cmi_steps_nonzero: rec.cmi_steps_nonzero(),
                    failed_at: None,
                };
                out.push((row, Some(rec)));
            }
            Err(CoreError::NonFinite { t }) => {
                let row =
                    Row { seed, mode: config.mode, metrics: None, wall_ms: 0.0, cmi_steps_nonzero: 0, failed_at: Some(t) };
                out.push((row, None));
            }
            Err(e) => return Err(e.into()),
        }
    }
    Ok((x0, out))
}

/// Runs seeds `base_seed .. base_seed + batch` in parallel. Output order is
/// `(seed, mode)` regardless of scheduling.
pub fn run_experiment(cfg: &ExperimentConfig, problem: &Problem) -> Result<ExperimentOutput, CliError> {
    let seeds: Vec<u64> = (0..cfg.batch as u64).map(|i| cfg.base_seed + i).collect();
    let per_seed = seeds
        .par_iter()
        .map(|&seed| run_seed(cfg, problem, seed).map(|r| (seed, r)))
        .collect::<Result<Vec<_>, _>>()?;

    let mut rows = Vec::new();
    let mut records = Vec::new();
    let mut truths = Vec::new();
    for (seed, (truth, runs)) in per_seed {
        truths.push((seed, truth));
        for (row, rec) in runs {
            rows.push(row);
            records.extend(rec);
        }
    }
    rows.sort_by_key(|r| (r.seed, r.mode));
    records.sort_by_key(|r| (r.seed, r.mode));
    let summary = summarize(cfg, &rows);
    Ok(ExperimentOutput { rows, summary, records, truths })
}

fn base_of(mode: GuidanceMode) -> Option<GuidanceMode> {
    match mode {
        GuidanceMode::CmiDps => Some(GuidanceMode::Dps),
        GuidanceMode::CmiPigdm => Some(GuidanceMode::Pigdm),
        _ => None,
    }
}

pub fn summarize(cfg: &ExperimentConfig, rows: &[Row]) -> Summary {
    let mut modes = BTreeMap::new();
    for sampler in &cfg.sampler {
        let mine: Vec<&Row> = rows.iter().filter(|r| r.mode == sampler.mode).collect();
        let ok: Vec<&Metrics> = mine.iter().filter_map(|r| r.metrics.as_ref()).collect();
        let mse: Vec<f64> = ok.iter().map(|m| m.mse).collect();
        let psnr: Vec<f64> = ok.iter().map(|m| m.psnr).collect();
        let ssim: Vec<f64> = ok.iter().filter_map(|m| m.ssim).collect();
        modes.insert(
            sampler.mode.to_string(),
            ModeSummary {
                runs: mine.len(),
                failures: mine.len() - ok.len(),
                mse: Stat::of(&mse),
                psnr: Stat::of(&psnr),
                ssim: Stat::of(&ssim),
            },
        );
    }

    let mut paired = Vec::new();
    for sampler in &cfg.sampler {
        let Some(base) = base_of(sampler.mode) else { continue };
        if !cfg.sampler.iter().any(|s| s.mode == base) {
            continue;
        }
        let mse_of = |mode: GuidanceMode, seed: u64| {
            rows.iter().find(|r| r.mode == mode && r.seed == seed).and_then(|r| r.metrics.map(|m| m.mse))
        };
        let diffs: Vec<f64> = rows
            .iter()
            .filter(|r| r.mode == sampler.mode)
            .filter_map(|r| Some(mse_of(sampler.mode, r.seed)? - mse_of(base, r.seed)?))
            .collect();
        let stat = Stat::of(&diffs);
        let effect_size = stat.map_or(f64::NAN, |s| s.mean / (s.stderr * (diffs.len() as f64).sqrt()));
        paired.push(PairedComparison {
            mode: sampler.mode,
            base,
            pairs: diffs.len(),
            mse_diff: stat,
            effect_size,
            wins: diffs.iter().filter(|d| **d < 0.0).count(),
        });
    }
    Summary { base_seed: cfg.base_seed, batch: cfg.batch, modes, paired }
}
