//! Two-sample statistics for comparing sample sets.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::toy::nearest_mode;

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn mean_cross(x: &[Vec<f64>], y: &[Vec<f64>]) -> f64 {
    let total: f64 = x.par_iter().map(|a| y.iter().map(|b| dist(a, b)).sum::<f64>()).sum();
    total / (x.len() * y.len()) as f64
}

fn check_sets(x: &[Vec<f64>], y: &[Vec<f64>]) -> Result<()> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::Invalid("two-sample statistics need non-empty sets".into()));
    }
    let d = x[0].len();
    if x.iter().chain(y).any(|p| p.len() != d) {
        return Err(Error::Invalid("sample points have mixed dimensions".into()));
    }
    Ok(())
}

/// `2 E‖X−Y‖ − E‖X−X'‖ − E‖Y−Y'‖` with all pairs included (V-statistic),
/// so the value is ≥ 0 and exactly 0 for identical sets.
pub fn energy_distance(x: &[Vec<f64>], y: &[Vec<f64>]) -> Result<f64> {
    check_sets(x, y)?;
    let e = 2.0 * mean_cross(x, y) - mean_cross(x, x) - mean_cross(y, y);
    Ok(e.max(0.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PermutationResult {
    pub statistic: f64,
    pub p_value: f64,
    pub permutations: usize,
    /// 99th percentile of the null statistics.
    pub null_q99: f64,
}

/// Pooled distance matrices above this many points are not precomputed.
const MATRIX_LIMIT: usize = 6000;

/// Energy-distance permutation test of `H0: X and Y share a distribution`.
/// `p = (1 + #{null ≥ observed}) / (1 + permutations)`.
pub fn permutation_test(x: &[Vec<f64>], y: &[Vec<f64>], permutations: usize, rng: &mut SeededRng) -> Result<PermutationResult> {
    check_sets(x, y)?;
    if permutations == 0 {
        return Err(Error::Invalid("permutation test needs at least one permutation".into()));
    }
    let pooled: Vec<&[f64]> = x.iter().chain(y).map(|v| v.as_slice()).collect();
    let n = pooled.len();
    let nx = x.len();
    let matrix: Option<Vec<f64>> = (n <= MATRIX_LIMIT).then(|| {
        (0..n)
            .into_par_iter()
            .flat_map_iter(|i| {
                let p = &pooled;
                (0..n).map(move |j| dist(p[i], p[j]))
            })
            .collect()
    });
    let d = |i: usize, j: usize| match &matrix {
        Some(m) => m[i * n + j],
        None => dist(pooled[i], pooled[j]),
    };
    let stat_of = |perm: &[usize]| -> f64 {
        let (a, b) = perm.split_at(nx);
        let cross = |u: &[usize], v: &[usize]| -> f64 {
            u.par_iter().map(|&i| v.iter().map(|&j| d(i, j)).sum::<f64>()).sum::<f64>() / (u.len() * v.len()) as f64
        };
        (2.0 * cross(a, b) - cross(a, a) - cross(b, b)).max(0.0)
    };
    let mut perm: Vec<usize> = (0..n).collect();
    let observed = stat_of(&perm);
    let mut null = Vec::with_capacity(permutations);
    for _ in 0..permutations {
        for i in (1..n).rev() {
            perm.swap(i, rng.index(i + 1));
        }
        null.push(stat_of(&perm));
    }
    let exceed = null.iter().filter(|&&s| s >= observed).count();
    null.sort_by(f64::total_cmp);
    let q = ((0.99 * permutations as f64).ceil() as usize).clamp(1, permutations) - 1;
    Ok(PermutationResult {
        statistic: observed,
        p_value: (1 + exceed) as f64 / (1 + permutations) as f64,
        permutations,
        null_q99: null[q],
    })
}

/// Regular grid of `bins` cells per axis on `[lo, hi]^d`; points outside fall
/// into one shared overflow cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HistGrid {
    pub lo: f64,
    pub hi: f64,
    pub bins: usize,
}

impl Default for HistGrid {
    fn default() -> Self {
        Self {
            lo: -4.0,
            hi: 4.0,
            bins: 32,
        }
    }
}

impl HistGrid {
    fn cell(&self, p: &[f64]) -> usize {
        let overflow = self.bins.pow(p.len() as u32);
        let mut idx = 0;
        for &v in p {
            if !(v >= self.lo && v <= self.hi) {
                return overflow;
            }
            let b = (((v - self.lo) / (self.hi - self.lo)) * self.bins as f64) as usize;
            idx = idx * self.bins + b.min(self.bins - 1);
        }
        idx
    }

    pub fn histogram(&self, x: &[Vec<f64>]) -> Vec<f64> {
        let d = x.first().map_or(1, |p| p.len());
        let mut h = vec![0.0; self.bins.pow(d as u32) + 1];
        for p in x {
            h[self.cell(p)] += 1.0;
        }
        for v in &mut h {
            *v /= x.len() as f64;
        }
        h
    }
}

/// `½ Σ |p_c − q_c|` over grid cells plus the overflow cell.
pub fn histogram_tv(x: &[Vec<f64>], y: &[Vec<f64>], grid: &HistGrid) -> Result<f64> {
    check_sets(x, y)?;
    if grid.bins == 0 || !(grid.hi > grid.lo) {
        return Err(Error::Invalid("histogram grid needs bins ≥ 1 and hi > lo".into()));
    }
    let (hx, hy) = (grid.histogram(x), grid.histogram(y));
    Ok((0.5 * hx.iter().zip(&hy).map(|(a, b)| (a - b).abs()).sum::<f64>()).min(1.0))
}

/// Fraction of points whose nearest mode is each entry of `modes`.
pub fn mode_frequencies(x: &[Vec<f64>], modes: &[Vec<f64>]) -> Result<Vec<f64>> {
    if x.is_empty() || modes.is_empty() {
        return Err(Error::Invalid("mode frequencies need points and modes".into()));
    }
    let mut f = vec![0.0; modes.len()];
    for j in nearest_mode(x, modes) {
        f[j] += 1.0;
    }
    for v in &mut f {
        *v /= x.len() as f64;
    }
    Ok(f)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n_samples: usize,
    pub n_reference: usize,
    pub energy_distance: f64,
    pub histogram_tv: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mode_frequencies: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub permutation: Option<PermutationResult>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clamp_rate: Option<f64>,
}

impl MetricsReport {
    pub fn compare(samples: &[Vec<f64>], reference: &[Vec<f64>], grid: &HistGrid, modes: Option<&[Vec<f64>]>) -> Result<Self> {
        Ok(Self {
            n_samples: samples.len(),
            n_reference: reference.len(),
            energy_distance: energy_distance(samples, reference)?,
            histogram_tv: histogram_tv(samples, reference, grid)?,
            mode_frequencies: modes.map(|m| mode_frequencies(samples, m)).transpose()?,
            permutation: None,
            clamp_rate: None,
        })
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}
