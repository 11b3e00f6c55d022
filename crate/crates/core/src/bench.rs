//! Inference-latency benchmark over network depth and width.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::denoiser::{Cond, ConditioningMode, Denoiser, DenoiserConfig, Normalizer};
use crate::error::{Error, Result};
use crate::guidance::{sample, GuidanceConfig};
use crate::nn::{Activation, Architecture, FinalInit};
use crate::rng::SeededRng;
use crate::schedule::ScheduleKind;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    #[serde(default = "d_depths")]
    pub depths: Vec<usize>,
    #[serde(default = "d_widths")]
    pub widths: Vec<usize>,
    /// Samples timed per cell and mode.
    #[serde(default = "d_reps")]
    pub repetitions: usize,
    /// Samples drawn together in one timed call; per-sample time is the
    /// call time divided by this.
    #[serde(default = "d_batch")]
    pub batch: usize,
    #[serde(default = "d_steps")]
    pub steps: usize,
    #[serde(default = "d_dim")]
    pub data_dim: usize,
    #[serde(default)]
    pub seed: u64,
}

fn d_depths() -> Vec<usize> {
    (1..=7).collect()
}
fn d_widths() -> Vec<usize> {
    vec![2056]
}
fn d_reps() -> usize {
    10_000
}
fn d_batch() -> usize {
    100
}
fn d_steps() -> usize {
    15
}
fn d_dim() -> usize {
    2
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            depths: d_depths(),
            widths: d_widths(),
            repetitions: d_reps(),
            batch: d_batch(),
            steps: d_steps(),
            data_dim: d_dim(),
            seed: 0,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depths.is_empty() || self.widths.is_empty() {
            return Err(Error::Invalid("bench needs at least one depth and one width".into()));
        }
        if self.depths.contains(&0) || self.widths.contains(&0) {
            return Err(Error::Invalid("depths and widths must be ≥ 1".into()));
        }
        if self.repetitions == 0 || self.batch == 0 || self.steps == 0 || self.data_dim == 0 {
            return Err(Error::Invalid("repetitions, batch, steps and data_dim must be ≥ 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchMode {
    Unguided,
    Guided,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchCell {
    pub depth: usize,
    pub width: usize,
    pub params: usize,
    pub mode: BenchMode,
    /// Mean per-sample inference time over all timed batches, seconds.
    pub mean_s: f64,
    pub std_s: f64,
    pub samples: usize,
}

/// Times `steps`-step sampling with and without guidance for every
/// (depth, width) cell.
pub fn run_bench(cfg: &BenchConfig, mut progress: impl FnMut(&BenchCell)) -> Result<Vec<BenchCell>> {
    cfg.validate()?;
    let mut out = Vec::new();
    for &width in &cfg.widths {
        for &depth in &cfg.depths {
            let dc = DenoiserConfig {
                arch: Architecture::Mlp {
                    depth,
                    width,
                    activation: Activation::Gelu,
                },
                data_dim: cfg.data_dim,
                conditioning: ConditioningMode::None,
                schedule: ScheduleKind::Cosine,
                steps: cfg.steps,
            };
            let mut rng = SeededRng::new(cfg.seed, depth as u64 * 65_537 + width as u64);
            let model = Denoiser::new(dc, Normalizer::identity(cfg.data_dim), FinalInit::He, &mut rng)?;
            for mode in [BenchMode::Unguided, BenchMode::Guided] {
                let g = GuidanceConfig::with_rho(if mode == BenchMode::Guided { 1.0 } else { 0.0 });
                let mut times = Vec::new();
                let mut done = 0;
                let mut call = 0u64;
                while done < cfg.repetitions {
                    let n = cfg.batch.min(cfg.repetitions - done);
                    let r = rng.derive(call);
                    let t = Instant::now();
                    let s = sample(&model, n, &Cond::None, &g, &r, None)?;
                    let dt = t.elapsed().as_secs_f64();
                    std::hint::black_box(&s);
                    times.push(dt / n as f64);
                    done += n;
                    call += 1;
                }
                let mean = times.iter().sum::<f64>() / times.len() as f64;
                let var = times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (times.len().max(2) - 1) as f64;
                let cell = BenchCell {
                    depth,
                    width,
                    params: model.param_count(),
                    mode,
                    mean_s: mean,
                    std_s: var.sqrt(),
                    samples: done,
                };
                progress(&cell);
                out.push(cell);
            }
        }
    }
    Ok(out)
}

pub fn write_bench_csv(path: &Path, cells: &[BenchCell]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for c in cells {
        w.serialize(c)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

/// Ordinary least squares `y ≈ slope·x + intercept`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> Result<LinearFit> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Invalid("linear fit needs ≥ 2 paired points".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|v| (v - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Invalid("linear fit needs distinct x values".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = x.iter().zip(y).map(|(a, b)| (b - slope * a - intercept).powi(2)).sum();
    let r2 = if syy == 0.0 { 1.0 } else { 1.0 - sse / syy };
    Ok(LinearFit { slope, intercept, r2 })
}

/// Fits time against depth for one width and mode.
pub fn depth_fit(cells: &[BenchCell], width: usize, mode: BenchMode) -> Result<LinearFit> {
    let sel: Vec<&BenchCell> = cells.iter().filter(|c| c.width == width && c.mode == mode).collect();
    let x: Vec<f64> = sel.iter().map(|c| c.depth as f64).collect();
    let y: Vec<f64> = sel.iter().map(|c| c.mean_s).collect();
    linear_fit(&x, &y)
}
