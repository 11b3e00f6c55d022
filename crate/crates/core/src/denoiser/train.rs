use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Cond, Denoiser};
use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::nn::Dropout;
use crate::optim::AdamState;
use crate::rng::{RngState, SeededRng};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    #[serde(default = "default_log_every")]
    pub log_every: usize,
    #[serde(default)]
    pub lr_schedule: LrSchedule,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine from `lr` at step 0 down to zero at `steps`.
    Cosine,
}

impl LrSchedule {
    pub fn at(self, lr: f64, step: usize, steps: usize) -> f64 {
        match self {
            LrSchedule::Constant => lr,
            LrSchedule::Cosine => 0.5 * lr * (1.0 + (std::f64::consts::PI * step as f64 / steps as f64).cos()),
        }
    }
}

fn default_log_every() -> usize {
    100
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch == 0 || self.log_every == 0 {
            return Err(Error::Invalid("steps, batch and log_every must be ≥ 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Invalid(format!("learning rate {} must be ≥ 0", self.lr)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub loss: f64,
    /// Mean loss over the steps since the previous record.
    pub window_mean: f64,
}

/// Everything needed to continue training bit-exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub step: usize,
    pub rng: RngState,
    pub adam: AdamState,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub trace: Vec<LossRecord>,
    pub state: TrainState,
}

/// Minimizes `E‖ε − ε_θ(α_k z0 + σ_k ε, k, c)‖²` with `k ~ U{1..K}` over
/// model-space rows `data` (`[N, d+1]`). `cond` is per row or shared.
/// Passing `resume` continues from a saved state up to `cfg.steps`.
pub fn train(
    model: &mut Denoiser,
    data: &Tensor,
    cond: &Cond,
    cfg: &TrainConfig,
    resume: Option<TrainState>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let n = data.rows();
    if n == 0 || data.is_empty() {
        return Err(Error::Invalid("training dataset is empty".into()));
    }
    let w = model.config.width();
    if data.cols() != w {
        return Err(Error::Shape {
            op: "train".into(),
            detail: format!("dataset has {} columns, model expects {w}", data.cols()),
        });
    }
    cond.check(model.config.conditioning, n)?;
    if !data.is_finite() {
        return Err(Error::Invalid("training dataset contains non-finite values".into()));
    }

    let (mut rng, mut adam, start) = match resume {
        Some(s) => {
            if s.adam.m.len() != model.net.params.len() {
                return Err(Error::Checkpoint("optimizer state does not match the network".into()));
            }
            (SeededRng::from_state(s.rng), s.adam, s.step)
        }
        None => (
            SeededRng::new(cfg.seed, 0),
            AdamState::new(&model.net.params.values, cfg.lr),
            0,
        ),
    };
    let steps_k = model.config.steps;
    let schedule = model.schedule.clone();
    let dropout_on = model.net.arch.dropout() > 0.0;
    let b = cfg.batch;

    let mut trace = Vec::new();
    let mut window = (0.0, 0usize);
    for step in start..cfg.steps {
        adam.lr = cfg.lr_schedule.at(cfg.lr, step, cfg.steps);
        let idx: Vec<usize> = (0..b).map(|_| rng.index(n)).collect();
        let ks: Vec<usize> = (0..b).map(|_| rng.int_inclusive(1, steps_k)).collect();
        let eps = rng.gaussian(&[b, w]);
        let mut zk = data.gather_rows(&idx);
        for (i, &k) in ks.iter().enumerate() {
            let (a, s) = (schedule.alpha(k), schedule.sigma(k));
            for (z, e) in zk.row_slice_mut(i).iter_mut().zip(eps.row_slice(i)) {
                *z = a * *z + s * e;
            }
        }
        let x = model.features(&zk, &ks, &cond.gather(&idx))?;

        let mut g = Graph::new();
        let p = model.net.params.bind(&mut g, true);
        let xi = g.constant(x);
        let drop = dropout_on.then_some(Dropout { rng: &mut rng });
        let out = model.net.forward(&mut g, &p, xi, drop)?;
        let target = g.constant(eps);
        let diff = g.sub(out, target)?;
        let sq = g.square(diff);
        let total = g.sum(sq);
        let loss_node = g.scale(total, 1.0 / b as f64);
        let loss = g.value(loss_node).data()[0];
        if !loss.is_finite() {
            return Err(Error::TrainingDiverged {
                step,
                batch_hash: batch_hash(&idx, &ks),
            });
        }
        let mut grads = g.backward_scalar(loss_node)?;
        let grads: Vec<Tensor> = p
            .iter()
            .zip(&model.net.params.values)
            .map(|(&id, v)| grads.take(id).unwrap_or_else(|| Tensor::zeros(v.shape())))
            .collect();
        drop_graph(g);
        adam.step(&mut model.net.params.values, &grads, &model.net.params.names)
            .map_err(|e| match e {
                Error::NonFiniteGradient { .. } => Error::TrainingDiverged {
                    step,
                    batch_hash: batch_hash(&idx, &ks),
                },
                e => e,
            })?;

        window.0 += loss;
        window.1 += 1;
        if step % cfg.log_every == 0 || step + 1 == cfg.steps {
            trace.push(LossRecord {
                step,
                loss,
                window_mean: window.0 / window.1 as f64,
            });
            window = (0.0, 0);
        }
    }
    Ok(TrainOutcome {
        trace,
        state: TrainState {
            step: cfg.steps.max(start),
            rng: rng.state(),
            adam,
        },
    })
}

// The graph holds clones of the parameter Arcs; it must be gone before Adam
// mutates them, or every step would deep-copy all parameters.
fn drop_graph(g: Graph) {
    drop(g);
}

pub(crate) fn batch_hash(idx: &[usize], ks: &[usize]) -> String {
    let mut h = Sha256::new();
    for &i in idx {
        h.update((i as u64).to_le_bytes());
    }
    for &k in ks {
        h.update((k as u64).to_le_bytes());
    }
    hex::encode(&h.finalize()[..8])
}

#[cfg(test)]
mod tests {
    use super::super::tests::small_config;
    use super::super::{ConditioningMode, Normalizer};
    use super::*;
    use crate::nn::FinalInit;

    fn cfg(steps: usize) -> TrainConfig {
        TrainConfig {
            steps,
            batch: 64,
            lr: 1e-3,
            seed: 3,
            log_every: 100,
            lr_schedule: LrSchedule::Constant,
        }
    }

    fn model() -> Denoiser {
        Denoiser::new(
            small_config(ConditioningMode::None),
            Normalizer::identity(2),
            FinalInit::Zero,
            &mut SeededRng::new(1, 0),
        )
        .unwrap()
    }

    fn data() -> Tensor {
        let mut rng = SeededRng::new(8, 0);
        rng.gaussian(&[500, 3])
    }

    #[test]
    fn initial_loss_is_width() {
        let mut m = model();
        let c = TrainConfig { batch: 4096, ..cfg(1) };
        let out = train(&mut m, &data(), &Cond::None, &c, None).unwrap();
        let l0 = out.trace[0].loss;
        assert!((l0 - 3.0).abs() < 0.6, "{l0}");
    }

    #[test]
    fn same_seed_same_trace() {
        let (mut a, mut b) = (model(), model());
        let ta = train(&mut a, &data(), &Cond::None, &cfg(250), None).unwrap();
        let tb = train(&mut b, &data(), &Cond::None, &cfg(250), None).unwrap();
        assert_eq!(ta.trace, tb.trace);
        assert_eq!(a.net.params, b.net.params);
        assert_eq!(ta.trace.iter().map(|r| r.step).collect::<Vec<_>>(), vec![0, 100, 200, 249]);
    }

    #[test]
    fn resume_is_bit_exact() {
        let mut full = model();
        train(&mut full, &data(), &Cond::None, &cfg(300), None).unwrap();
        let mut part = model();
        let first = train(&mut part, &data(), &Cond::None, &cfg(120), None).unwrap();
        train(&mut part, &data(), &Cond::None, &cfg(300), Some(first.state)).unwrap();
        assert_eq!(full.net.params, part.net.params);
    }

    #[test]
    fn rejects_empty_and_mismatched_data() {
        let mut m = model();
        assert!(train(&mut m, &Tensor::zeros(&[0, 3]), &Cond::None, &cfg(1), None).is_err());
        assert!(train(&mut m, &Tensor::zeros(&[4, 2]), &Cond::None, &cfg(1), None).is_err());
        assert!(train(&mut m, &Tensor::zeros(&[4, 3]), &Cond::beta(1.0), &cfg(1), None).is_err());
    }

    #[test]
    fn nan_loss_reports_step_and_batch() {
        let mut m = Denoiser::new(
            small_config(ConditioningMode::None),
            Normalizer::identity(2),
            FinalInit::He,
            &mut SeededRng::new(1, 0),
        )
        .unwrap();
        // finite data whose squared prediction error overflows on the first step
        let d = Tensor::full(&[20, 3], 1e300);
        let err = train(&mut m, &d, &Cond::None, &cfg(10), None).unwrap_err();
        match err {
            Error::TrainingDiverged { step, batch_hash } => {
                assert_eq!(step, 0);
                assert_eq!(batch_hash.len(), 16);
            }
            e => panic!("{e}"),
        }
    }
}
