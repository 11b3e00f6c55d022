//! The β-conditioned toy experiment: build the augmented dataset, train one
//! model per distribution, and compare guided samples against an
//! importance-resampled target.

use serde::{Deserialize, Serialize};

use crate::denoiser::{train, Cond, Denoiser, DenoiserConfig, LossRecord, Normalizer, TrainConfig, WeightScale};
use crate::error::{Error, Result};
use crate::guidance::{sample, GuidanceConfig};
use crate::metrics::{energy_distance, permutation_test, PermutationResult};
use crate::nn::FinalInit;
use crate::oracle::importance_resample_target;
use crate::rng::SeededRng;
use crate::tensor::Tensor;
use crate::toy::{per_beta_scales, sample_toy, Energy, ToyDistribution};

/// Points on the β grid used for per-β weight normalization.
pub const BETA_GRID: usize = 201;

#[derive(Clone, Debug)]
pub struct BetaDataset {
    pub actions: Vec<Vec<f64>>,
    pub betas: Vec<f64>,
    pub weights: Vec<f64>,
    /// Model-space rows `[standardized a, w / c(β)]`.
    pub model_rows: Tensor,
    pub normalizer: Normalizer,
}

impl BetaDataset {
    pub fn cond(&self) -> Cond {
        Cond::Beta(self.betas.clone())
    }
}

/// Pairs every action with its own `β ~ U[0, β_max]` and weight
/// `exp(−β ξ(a))`. Weights are divided by `c(β) = E_a[exp(−β ξ(a))]` so the
/// weight channel has unit mean at every β.
pub fn beta_dataset(actions: Vec<Vec<f64>>, energy: &Energy, beta_max: f64, rng: &mut SeededRng) -> Result<BetaDataset> {
    if actions.is_empty() {
        return Err(Error::Invalid("empty action set".into()));
    }
    if !(beta_max >= 0.0 && beta_max.is_finite()) {
        return Err(Error::Invalid(format!("β_max {beta_max} must be ≥ 0")));
    }
    let xis = energy.eval_many(&actions);
    let grid: Vec<f64> = (0..BETA_GRID).map(|i| beta_max * i as f64 / (BETA_GRID - 1) as f64).collect();
    let scales = per_beta_scales(&xis, &grid);
    let d = actions[0].len();
    let n = actions.len() as f64;
    let mut mean = vec![0.0; d];
    for a in &actions {
        for (m, v) in mean.iter_mut().zip(a) {
            *m += v / n;
        }
    }
    let mut std = vec![0.0; d];
    for a in &actions {
        for ((s, v), m) in std.iter_mut().zip(a).zip(&mean) {
            *s += (v - m).powi(2) / n;
        }
    }
    let std: Vec<f64> = std.into_iter().map(|s| if s > 0.0 { s.sqrt() } else { 1.0 }).collect();
    let weight = if beta_max > 0.0 {
        WeightScale::PerBeta { betas: grid, scales }
    } else {
        WeightScale::Global { scale: 1.0 }
    };
    let normalizer = Normalizer { mean, std, weight };
    let betas: Vec<f64> = actions.iter().map(|_| rng.uniform_range(0.0, beta_max)).collect();
    let weights: Vec<f64> = xis.iter().zip(&betas).map(|(x, b)| (-b * x).exp()).collect();
    if let Some(i) = weights.iter().position(|w| !(*w > 0.0)) {
        return Err(Error::NonPositiveWeights { indices: vec![i] });
    }
    let rows: Vec<Vec<f64>> = actions
        .iter()
        .zip(&weights)
        .zip(&betas)
        .map(|((a, &w), &b)| normalizer.normalize(a, w, Some(b)))
        .collect();
    Ok(BetaDataset {
        model_rows: Tensor::from_rows(&rows)?,
        actions,
        betas,
        weights,
        normalizer,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyExperiment {
    pub dist: ToyDistribution,
    pub energy: Energy,
    #[serde(default = "d_beta_max")]
    pub beta_max: f64,
    pub n_data: usize,
    pub model: DenoiserConfig,
    pub train: TrainConfig,
}

fn d_beta_max() -> f64 {
    20.0
}

pub struct TrainedToy {
    pub model: Denoiser,
    pub data: BetaDataset,
    pub trace: Vec<LossRecord>,
}

pub fn train_toy(exp: &ToyExperiment) -> Result<TrainedToy> {
    let mut rng = SeededRng::new(exp.train.seed, 11);
    let actions = sample_toy(&exp.dist, exp.n_data, &mut rng)?;
    let data = beta_dataset(actions, &exp.energy, exp.beta_max, &mut rng)?;
    let mut model = Denoiser::new(exp.model.clone(), data.normalizer.clone(), FinalInit::Zero, &mut rng)?;
    let out = train(&mut model, &data.model_rows, &data.cond(), &exp.train, None)?;
    Ok(TrainedToy {
        model,
        data,
        trace: out.trace,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BetaEvaluation {
    pub beta: f64,
    pub rho: f64,
    pub n: usize,
    pub ed_guided: f64,
    pub ed_unguided: f64,
    pub clamp_rate: f64,
    pub diverged: usize,
    /// Guided samples against fresh data draws, when requested.
    pub permutation: Option<PermutationResult>,
}

/// Energy distances to an importance-resampled target of size `n` drawn
/// from a pool of `pool` fresh data points.
pub fn evaluate_beta(
    t: &TrainedToy,
    exp: &ToyExperiment,
    beta: f64,
    guidance: &GuidanceConfig,
    n: usize,
    pool: usize,
    permutations: usize,
    seed: u64,
) -> Result<BetaEvaluation> {
    let base = SeededRng::new(seed, 21);
    let mut rng = base.derive(1);
    let pool_pts = sample_toy(&exp.dist, pool, &mut rng)?;
    let w: Vec<f64> = exp.energy.eval_many(&pool_pts).iter().map(|x| (-beta * x).exp()).collect();
    let target = importance_resample_target(&pool_pts, &w, n, &mut rng)?;
    let cond = Cond::beta(beta);
    let guided = sample(&t.model, n, &cond, guidance, &base.derive(2), Some(&t.model.normalizer))?;
    let plain = GuidanceConfig {
        rho: 0.0,
        ..guidance.clone()
    };
    let unguided = sample(&t.model, n, &cond, &plain, &base.derive(3), Some(&t.model.normalizer))?;
    let acts = |rows: Vec<Vec<f64>>| -> Vec<Vec<f64>> { rows.into_iter().map(|mut r| {
        r.pop();
        r
    }).collect() };
    let g = acts(guided.finite_rows());
    let u = acts(unguided.finite_rows());
    let permutation = if permutations > 0 {
        let fresh = sample_toy(&exp.dist, n, &mut base.derive(4))?;
        Some(permutation_test(&g, &fresh, permutations, &mut base.derive(5))?)
    } else {
        None
    };
    Ok(BetaEvaluation {
        beta,
        rho: guidance.rho,
        n,
        ed_guided: energy_distance(&g, &target)?,
        ed_unguided: energy_distance(&u, &target)?,
        clamp_rate: guided.clamp_rate(),
        diverged: guided.diverged.len(),
        permutation,
    })
}
