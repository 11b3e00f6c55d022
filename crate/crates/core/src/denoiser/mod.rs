//! The noise-prediction network over `z = [a, w]` and its training loop.

mod embed;
mod train;

pub use embed::{beta_embed, sinusoidal, time_embed, BETA_RANGE, EMBED_DIM};
pub(crate) use train::batch_hash;
pub use train::{train, LossRecord, LrSchedule, TrainConfig, TrainOutcome, TrainState};

use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::nn::{Architecture, FinalInit, Network};
use crate::rng::SeededRng;
use crate::schedule::{NoiseSchedule, ScheduleKind};
use crate::tensor::Tensor;

/// A data vector with its positive weight.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedSample {
    pub a: Vec<f64>,
    pub w: f64,
}

impl AugmentedSample {
    pub fn z(&self) -> Vec<f64> {
        let mut z = self.a.clone();
        z.push(self.w);
        z
    }
}

/// Builds `z = [a, c·w(a)]`. Every weight must be positive and finite.
pub fn augment_dataset(
    actions: &[Vec<f64>],
    weight_fn: impl Fn(&[f64]) -> f64,
    rescale: f64,
) -> Result<Vec<AugmentedSample>> {
    if !(rescale > 0.0 && rescale.is_finite()) {
        return Err(Error::Invalid(format!("weight rescale {rescale} must be > 0")));
    }
    let mut bad = Vec::new();
    let mut out = Vec::with_capacity(actions.len());
    for (i, a) in actions.iter().enumerate() {
        let w = weight_fn(a);
        if !(w > 0.0 && w.is_finite()) || a.iter().any(|v| !v.is_finite()) {
            bad.push(i);
            continue;
        }
        out.push(AugmentedSample {
            a: a.clone(),
            w: rescale * w,
        });
    }
    if !bad.is_empty() {
        return Err(Error::NonPositiveWeights { indices: bad });
    }
    Ok(out)
}

/// How the weight channel is scaled into model space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WeightScale {
    /// Divide by one constant, usually the dataset mean.
    Global { scale: f64 },
    /// Divide by `c(β)`, log-linearly interpolated on an increasing β grid.
    PerBeta { betas: Vec<f64>, scales: Vec<f64> },
}

impl WeightScale {
    pub fn scale_at(&self, beta: Option<f64>) -> f64 {
        match self {
            WeightScale::Global { scale } => *scale,
            WeightScale::PerBeta { betas, scales } => {
                let b = beta.unwrap_or(0.0);
                let j = betas.partition_point(|&x| x <= b);
                if j == 0 {
                    return scales[0];
                }
                if j == betas.len() {
                    return scales[betas.len() - 1];
                }
                let t = (b - betas[j - 1]) / (betas[j] - betas[j - 1]);
                (scales[j - 1].ln() * (1.0 - t) + scales[j].ln() * t).exp()
            }
        }
    }
}

/// Affine map between data space and model space. Actions are standardized
/// per channel; the weight channel is only divided, never shifted, so
/// `∇ log w` is the same in both spaces.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub weight: WeightScale,
}

impl Normalizer {
    pub fn identity(d: usize) -> Self {
        Self {
            mean: vec![0.0; d],
            std: vec![1.0; d],
            weight: WeightScale::Global { scale: 1.0 },
        }
    }

    /// Standardizes actions and divides weights by their mean.
    pub fn fit(samples: &[AugmentedSample]) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::Invalid("cannot fit a normalizer on an empty dataset".into()))?;
        let d = first.a.len();
        let n = samples.len() as f64;
        let mut mean = vec![0.0; d];
        for s in samples {
            for (m, v) in mean.iter_mut().zip(&s.a) {
                *m += v / n;
            }
        }
        let mut std = vec![0.0; d];
        for s in samples {
            for ((sd, v), m) in std.iter_mut().zip(&s.a).zip(&mean) {
                *sd += (v - m).powi(2) / n;
            }
        }
        for sd in &mut std {
            *sd = if *sd > 0.0 { sd.sqrt() } else { 1.0 };
        }
        let wmean = samples.iter().map(|s| s.w).sum::<f64>() / n;
        Ok(Self {
            mean,
            std,
            weight: WeightScale::Global { scale: wmean },
        })
    }

    pub fn action_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn normalize(&self, a: &[f64], w: f64, beta: Option<f64>) -> Vec<f64> {
        let mut z: Vec<f64> = a
            .iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((v, m), s)| (v - m) / s)
            .collect();
        z.push(w / self.weight.scale_at(beta));
        z
    }

    /// Inverse of [`Normalizer::normalize`] applied to one model-space row.
    pub fn denormalize(&self, z: &[f64], beta: Option<f64>) -> Vec<f64> {
        let d = self.action_dim();
        let mut out: Vec<f64> = z[..d]
            .iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((v, m), s)| v * s + m)
            .collect();
        out.push(z[d] * self.weight.scale_at(beta));
        out
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum ConditioningMode {
    #[default]
    None,
    /// Scalar β, embedded like the step and added to the step embedding.
    Beta,
    /// A state vector appended to the network input.
    State { dim: usize },
}

/// Conditioning values: one entry shared by all rows, or one per row.
#[derive(Clone, Debug, PartialEq)]
pub enum Cond {
    None,
    Beta(Vec<f64>),
    State(Tensor),
}

impl Cond {
    pub fn beta(b: f64) -> Self {
        Cond::Beta(vec![b])
    }

    fn rows(&self) -> usize {
        match self {
            Cond::None => 1,
            Cond::Beta(b) => b.len(),
            Cond::State(s) => s.rows(),
        }
    }

    /// β of row `i`, if β-conditioned.
    pub fn beta_at(&self, i: usize) -> Option<f64> {
        match self {
            Cond::Beta(b) => Some(if b.len() == 1 { b[0] } else { b[i] }),
            _ => None,
        }
    }

    /// Rows `idx` of a per-row conditioning.
    pub fn gather(&self, idx: &[usize]) -> Cond {
        match self {
            Cond::None => Cond::None,
            Cond::Beta(b) if b.len() == 1 => self.clone(),
            Cond::Beta(b) => Cond::Beta(idx.iter().map(|&i| b[i]).collect()),
            Cond::State(s) if s.rows() == 1 => self.clone(),
            Cond::State(s) => Cond::State(s.gather_rows(idx)),
        }
    }

    pub fn check(&self, mode: ConditioningMode, n: usize) -> Result<()> {
        let ok_mode = match (mode, self) {
            (ConditioningMode::None, Cond::None) => true,
            (ConditioningMode::Beta, Cond::Beta(_)) => true,
            (ConditioningMode::State { dim }, Cond::State(s)) => s.cols() == dim,
            _ => false,
        };
        if !ok_mode {
            return Err(Error::Conditioning(format!(
                "model expects {mode:?}, got {}",
                match self {
                    Cond::None => "no conditioning".to_string(),
                    Cond::Beta(_) => "β values".to_string(),
                    Cond::State(s) => format!("state of shape {:?}", s.shape()),
                }
            )));
        }
        let r = self.rows();
        if r != 1 && r != n && !matches!(self, Cond::None) {
            return Err(Error::Conditioning(format!(
                "{r} conditioning rows for a batch of {n}"
            )));
        }
        if let Cond::Beta(b) = self {
            if b.iter().any(|v| !v.is_finite()) {
                return Err(Error::Conditioning("non-finite β".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    pub arch: Architecture,
    /// Dimension `d` of the data part; the model works on `d + 1` columns.
    pub data_dim: usize,
    #[serde(default)]
    pub conditioning: ConditioningMode,
    pub schedule: ScheduleKind,
    pub steps: usize,
}

impl DenoiserConfig {
    pub fn width(&self) -> usize {
        self.data_dim + 1
    }

    pub fn input_dim(&self) -> usize {
        let extra = match self.conditioning {
            ConditioningMode::State { dim } => dim,
            _ => 0,
        };
        self.width() + EMBED_DIM + extra
    }
}

/// Anything that predicts noise for a batch at step `k`: the trained network
/// or the exact empirical denoiser.
pub trait EpsModel: Sync {
    /// Width `d + 1` of `z`.
    fn width(&self) -> usize;

    fn schedule(&self) -> &NoiseSchedule;

    fn predict_eps(&self, zk: &Tensor, k: usize, cond: &Cond) -> Result<Tensor>;

    /// `ε̂` together with `∂⟨ε̂, cotangent⟩/∂z_k`.
    fn predict_eps_vjp(&self, zk: &Tensor, k: usize, cond: &Cond, cotangent: &Tensor) -> Result<(Tensor, Tensor)>;
}

/// Trained noise-prediction network.
#[derive(Clone, Debug, PartialEq)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    pub net: Network,
    pub schedule: NoiseSchedule,
    pub normalizer: Normalizer,
}

impl Denoiser {
    pub fn new(config: DenoiserConfig, normalizer: Normalizer, final_init: FinalInit, rng: &mut SeededRng) -> Result<Self> {
        if config.data_dim == 0 {
            return Err(Error::Invalid("data dimension must be ≥ 1".into()));
        }
        if normalizer.action_dim() != config.data_dim {
            return Err(Error::Invalid(format!(
                "normalizer covers {} channels, model has {}",
                normalizer.action_dim(),
                config.data_dim
            )));
        }
        let schedule = NoiseSchedule::build(config.schedule, config.steps)?;
        let net = Network::new(config.arch.clone(), config.input_dim(), config.width(), final_init, rng)?;
        Ok(Self {
            config,
            net,
            schedule,
            normalizer,
        })
    }

    /// Network input `[z_k, emb(k) (+ emb(β)), s]`; `ks` holds one step or
    /// one per row.
    pub(crate) fn features(&self, zk: &Tensor, ks: &[usize], cond: &Cond) -> Result<Tensor> {
        let n = zk.rows();
        let w = self.config.width();
        if zk.cols() != w || zk.shape().len() != 2 {
            return Err(Error::Shape {
                op: "predict_eps".into(),
                detail: format!("z_k must be [n, {w}], got {:?}", zk.shape()),
            });
        }
        cond.check(self.config.conditioning, n)?;
        let steps = self.config.steps;
        if let Some(&k) = ks.iter().find(|&&k| k > steps) {
            return Err(Error::Invalid(format!("step {k} outside 0..={steps}")));
        }
        let in_dim = self.config.input_dim();
        let mut x = Tensor::zeros(&[n, in_dim]);
        let mut emb = vec![0.0; EMBED_DIM];
        let mut beta_emb = vec![0.0; EMBED_DIM];
        for i in 0..n {
            let k = if ks.len() == 1 { ks[0] } else { ks[i] };
            let row = x.row_slice_mut(i);
            row[..w].copy_from_slice(zk.row_slice(i));
            sinusoidal(k as f64 / steps as f64, &mut emb);
            let e = &mut row[w..w + EMBED_DIM];
            e.copy_from_slice(&emb);
            match cond {
                Cond::None => {}
                Cond::Beta(_) => {
                    let b = cond.beta_at(i).unwrap_or(0.0);
                    sinusoidal(b / BETA_RANGE, &mut beta_emb);
                    for (o, v) in e.iter_mut().zip(&beta_emb) {
                        *o += v;
                    }
                }
                Cond::State(s) => {
                    let src = if s.rows() == 1 { s.row_slice(0) } else { s.row_slice(i) };
                    row[w + EMBED_DIM..].copy_from_slice(src);
                }
            }
        }
        Ok(x)
    }

    pub fn param_count(&self) -> usize {
        self.net.param_count()
    }
}

impl EpsModel for Denoiser {
    fn width(&self) -> usize {
        self.config.width()
    }

    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn predict_eps(&self, zk: &Tensor, k: usize, cond: &Cond) -> Result<Tensor> {
        let x = self.features(zk, &[k], cond)?;
        self.net.eval(&x)
    }

    fn predict_eps_vjp(&self, zk: &Tensor, k: usize, cond: &Cond, cotangent: &Tensor) -> Result<(Tensor, Tensor)> {
        let x = self.features(zk, &[k], cond)?;
        let w = self.config.width();
        let mut g = Graph::new();
        let p = self.net.params.bind(&mut g, false);
        let z = g.leaf(zk.clone(), true);
        let rest = g.constant(x.slice_cols(w, x.cols())?);
        let input = g.concat_cols(&[z, rest])?;
        let out = self.net.forward(&mut g, &p, input, None)?;
        let mut grads = g.backward(out, cotangent)?;
        let grad = grads.take(z).unwrap_or_else(|| Tensor::zeros(zk.shape()));
        Ok((g.value(out).clone(), grad))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Activation;

    pub(crate) fn small_config(conditioning: ConditioningMode) -> DenoiserConfig {
        DenoiserConfig {
            arch: Architecture::Mlp {
                depth: 2,
                width: 16,
                activation: Activation::Gelu,
            },
            data_dim: 2,
            conditioning,
            schedule: ScheduleKind::Cosine,
            steps: 20,
        }
    }

    #[test]
    fn augment_concatenates() {
        let z = augment_dataset(&[vec![0.3]], |_| 2.5, 1.0).unwrap();
        assert_eq!(z[0].z(), vec![0.3, 2.5]);
        let z = augment_dataset(&[vec![0.3]], |_| 2.5, 10.0).unwrap();
        assert_eq!(z[0].z(), vec![0.3, 25.0]);
        let ones = augment_dataset(&[vec![1.0, 2.0], vec![-3.0, 0.5]], |_| 1.0, 1.0).unwrap();
        assert!(ones.iter().all(|s| s.w == 1.0));
    }

    #[test]
    fn augment_lists_bad_indices() {
        let acts = vec![vec![1.0], vec![-1.0], vec![0.0], vec![2.0]];
        let err = augment_dataset(&acts, |a| a[0], 1.0).unwrap_err();
        match err {
            Error::NonPositiveWeights { indices } => assert_eq!(indices, vec![1, 2]),
            e => panic!("{e}"),
        }
        assert!(augment_dataset(&acts, |_| 1.0, 0.0).is_err());
    }

    #[test]
    fn normalizer_roundtrip() {
        let data = augment_dataset(&[vec![1.0, 10.0], vec![3.0, 14.0]], |a| a[0], 1.0).unwrap();
        let n = Normalizer::fit(&data).unwrap();
        assert_eq!(n.mean, vec![2.0, 12.0]);
        assert_eq!(n.std, vec![1.0, 2.0]);
        let z = n.normalize(&data[1].a, data[1].w, None);
        assert_eq!(z, vec![1.0, 1.0, 1.5]);
        assert_eq!(n.denormalize(&z, None), data[1].z());
    }

    #[test]
    fn per_beta_scale_interpolates_log_linearly() {
        let s = WeightScale::PerBeta {
            betas: vec![0.0, 10.0],
            scales: vec![1.0, 0.01],
        };
        assert_eq!(s.scale_at(Some(0.0)), 1.0);
        assert!((s.scale_at(Some(5.0)) - 0.1).abs() < 1e-12);
        assert_eq!(s.scale_at(Some(30.0)), 0.01);
    }

    #[test]
    fn zero_init_predicts_zero_with_input_shape() {
        let mut rng = SeededRng::new(0, 0);
        let cfg = small_config(ConditioningMode::None);
        let m = Denoiser::new(cfg, Normalizer::identity(2), FinalInit::Zero, &mut rng).unwrap();
        let z = rng.gaussian(&[7, 3]);
        let e = m.predict_eps(&z, 5, &Cond::None).unwrap();
        assert_eq!(e.shape(), z.shape());
        assert!(e.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conditioning_mismatch_rejected() {
        let mut rng = SeededRng::new(0, 0);
        let m = Denoiser::new(small_config(ConditioningMode::Beta), Normalizer::identity(2), FinalInit::He, &mut rng).unwrap();
        let z = rng.gaussian(&[3, 3]);
        assert!(matches!(m.predict_eps(&z, 1, &Cond::None), Err(Error::Conditioning(_))));
        assert!(matches!(
            m.predict_eps(&z, 1, &Cond::Beta(vec![1.0, 2.0])),
            Err(Error::Conditioning(_))
        ));
        assert!(m.predict_eps(&z, 1, &Cond::beta(4.0)).is_ok());
        let s = Denoiser::new(
            small_config(ConditioningMode::State { dim: 2 }),
            Normalizer::identity(2),
            FinalInit::He,
            &mut rng,
        )
        .unwrap();
        assert!(s.predict_eps(&z, 1, &Cond::State(Tensor::zeros(&[1, 3]))).is_err());
        assert!(s.predict_eps(&z, 1, &Cond::State(Tensor::zeros(&[3, 2]))).is_ok());
    }

    #[test]
    fn vjp_matches_finite_differences() {
        let mut rng = SeededRng::new(5, 0);
        let m = Denoiser::new(small_config(ConditioningMode::Beta), Normalizer::identity(2), FinalInit::He, &mut rng).unwrap();
        let z0 = rng.gaussian(&[4, 3]);
        let c = rng.gaussian(&[4, 3]);
        let cond = Cond::Beta(vec![0.0, 3.0, 8.0, 19.0]);
        let (eps, grad) = m.predict_eps_vjp(&z0, 9, &cond, &c).unwrap();
        assert_eq!(eps, m.predict_eps(&z0, 9, &cond).unwrap());
        let h = 1e-5;
        let dot = |t: &Tensor| t.data().iter().zip(c.data()).map(|(a, b)| a * b).sum::<f64>();
        for i in 0..z0.len() {
            let mut p = z0.clone();
            p.data_mut()[i] += h;
            let mut q = z0.clone();
            q.data_mut()[i] -= h;
            let fd = (dot(&m.predict_eps(&p, 9, &cond).unwrap()) - dot(&m.predict_eps(&q, 9, &cond).unwrap())) / (2.0 * h);
            let g = grad.data()[i];
            assert!((fd - g).abs() <= 1e-6 * (1.0 + g.abs()), "{i}: {fd} vs {g}");
        }
    }
}
