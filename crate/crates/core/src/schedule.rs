//! Noise schedules, forward corruption and the ancestral reverse step.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Cosine,
    Vp,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    /// Stochastic posterior steps, deterministic final step.
    #[default]
    Ddpm,
    /// Deterministic η = 0 steps.
    Ddim,
}

const COSINE_OFFSET: f64 = 0.008;
const ALPHA_BAR_FLOOR: f64 = 1e-5;
const VP_BETA_MIN: f64 = 0.1;
const VP_BETA_MAX: f64 = 20.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    alpha: Vec<f64>,
    sigma: Vec<f64>,
}

impl NoiseSchedule {
    pub fn build(kind: ScheduleKind, steps: usize) -> Result<Self> {
        match kind {
            ScheduleKind::Cosine => Self::cosine(steps),
            ScheduleKind::Vp => Self::vp(steps),
        }
    }

    pub fn cosine(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Invalid("schedule needs K ≥ 1".into()));
        }
        let f = |k: usize| {
            let x = (k as f64 / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET);
            (x * std::f64::consts::FRAC_PI_2).cos().powi(2)
        };
        let f0 = f(0);
        let alpha_bar: Vec<f64> = (0..=steps)
            .map(|k| if k == 0 { 1.0 } else { (f(k) / f0).max(ALPHA_BAR_FLOOR) })
            .collect();
        Self::from_alpha_bar(ScheduleKind::Cosine, &alpha_bar)
    }

    pub fn vp(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Invalid("schedule needs K ≥ 1".into()));
        }
        let alpha_bar: Vec<f64> = (0..=steps)
            .map(|k| vp_alpha(k as f64 / steps as f64).powi(2))
            .collect();
        Self::from_alpha_bar(ScheduleKind::Vp, &alpha_bar)
    }

    fn from_alpha_bar(kind: ScheduleKind, alpha_bar: &[f64]) -> Result<Self> {
        let alpha: Vec<f64> = alpha_bar.iter().map(|a| a.sqrt()).collect();
        let sigma: Vec<f64> = alpha_bar.iter().map(|a| (1.0 - a).max(0.0).sqrt()).collect();
        for k in 1..alpha.len() {
            if alpha[k] >= alpha[k - 1] || sigma[k] <= sigma[k - 1] {
                return Err(Error::Invalid(format!(
                    "{kind:?} schedule with K = {} is not strictly monotone at k = {k}; \
                     the alpha-bar floor flattens the tail",
                    alpha.len() - 1
                )));
            }
        }
        Ok(Self { kind, alpha, sigma })
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// Number of diffusion steps `K`.
    pub fn steps(&self) -> usize {
        self.alpha.len() - 1
    }

    pub fn alpha(&self, k: usize) -> f64 {
        self.alpha[k]
    }

    pub fn sigma(&self, k: usize) -> f64 {
        self.sigma[k]
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigma
    }

    fn check_step(&self, k: usize, min: usize) -> Result<()> {
        if k < min || k > self.steps() {
            return Err(Error::Invalid(format!(
                "step {k} outside {min}..={}",
                self.steps()
            )));
        }
        Ok(())
    }

    /// `α_k z0 + σ_k ε`.
    pub fn forward_noise(&self, z0: &Tensor, k: usize, eps: &Tensor) -> Result<Tensor> {
        self.check_step(k, 0)?;
        let (a, s) = (self.alpha[k], self.sigma[k]);
        z0.zip_map(eps, "forward_noise", |z, e| a * z + s * e)
    }

    /// `(z_k − σ_k ε̂) / α_k`.
    pub fn data_prediction(&self, zk: &Tensor, eps_hat: &Tensor, k: usize) -> Result<Tensor> {
        self.check_step(k, 1)?;
        let a = self.alpha_guarded(k)?;
        let s = self.sigma[k];
        zk.zip_map(eps_hat, "data_prediction", |z, e| (z - s * e) / a)
    }

    pub(crate) fn alpha_guarded(&self, k: usize) -> Result<f64> {
        let a = self.alpha[k];
        if a < 1e-8 {
            return Err(Error::AlphaTooSmall { k, alpha: a });
        }
        Ok(a)
    }

    /// Coefficients `(c_z, c_0, variance)` of the reverse step
    /// `z_{k−1} = c_z·z_k + c_0·ẑ0 + sqrt(variance)·ξ`.
    pub fn posterior_coefficients(&self, k: usize, sampler: SamplerKind) -> Result<(f64, f64, f64)> {
        self.check_step(k, 1)?;
        let (ak, sk) = (self.alpha[k], self.sigma[k]);
        let (ap, sp) = (self.alpha[k - 1], self.sigma[k - 1]);
        match sampler {
            SamplerKind::Ddpm => {
                let r = ak / ap;
                let s2 = sk * sk - r * r * sp * sp;
                if s2 < -1e-12 {
                    return Err(Error::ScheduleInconsistent { k, s2 });
                }
                let s2 = s2.max(0.0);
                let var = if k == 1 { 0.0 } else { sp * sp * s2 / (sk * sk) };
                Ok((r * sp * sp / (sk * sk), ap * s2 / (sk * sk), var))
            }
            SamplerKind::Ddim => {
                // ẑ0-implied noise (z_k − α_k ẑ0)/σ_k carried to σ_{k−1}
                let c = sp / sk;
                Ok((c, ap - c * ak, 0.0))
            }
        }
    }

    /// One reverse step. Noise is drawn from `rng` only when the variance is
    /// positive.
    pub fn posterior_step(
        &self,
        zk: &Tensor,
        zhat0: &Tensor,
        k: usize,
        sampler: SamplerKind,
        rng: &mut SeededRng,
    ) -> Result<Tensor> {
        let (cz, c0, var) = self.posterior_coefficients(k, sampler)?;
        let mut out = zk.zip_map(zhat0, "posterior_step", |z, x| cz * z + c0 * x)?;
        if var > 0.0 {
            let sd = var.sqrt();
            let noise = rng.gaussian(out.shape());
            out.axpy(sd, &noise)?;
        }
        Ok(out)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["k", "alpha", "sigma"])?;
        for k in 0..=self.steps() {
            w.write_record(&[k.to_string(), self.alpha[k].to_string(), self.sigma[k].to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn vp_alpha(t: f64) -> f64 {
    (-0.25 * t * t * (VP_BETA_MAX - VP_BETA_MIN) - 0.5 * t * VP_BETA_MIN).exp()
}
