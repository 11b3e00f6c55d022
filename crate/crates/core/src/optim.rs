use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Adam with bias correction. `m` and `v` are kept per parameter tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &[Arc<Tensor>], lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    /// One update. Nothing is modified if any gradient is non-finite.
    pub fn step(&mut self, params: &mut [Arc<Tensor>], grads: &[Tensor], names: &[String]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(shape_err(
                "adam_step",
                format!(
                    "{} parameters, {} gradients, {} moment slots",
                    params.len(),
                    grads.len(),
                    self.m.len()
                ),
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || self.m[i].shape() != p.shape() {
                return Err(shape_err(
                    "adam_step",
                    format!("parameter `{}`: {:?} vs gradient {:?}", name_of(names, i), p.shape(), g.shape()),
                ));
            }
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient {
                    name: name_of(names, i),
                });
            }
        }
        self.t += 1;
        let t = self.t as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let p = Arc::make_mut(p);
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *pi -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

fn name_of(names: &[String], i: usize) -> String {
    names.get(i).cloned().unwrap_or_else(|| format!("#{i}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(v: f64) -> Vec<Arc<Tensor>> {
        vec![Arc::new(Tensor::scalar(v))]
    }

    #[test]
    fn first_step_by_hand() {
        let mut p = one(0.0);
        let mut s = AdamState::new(&p, 1e-3);
        s.step(&mut p, &[Tensor::scalar(1.0)], &["x".into()]).unwrap();
        let expected = -1e-3 * (1.0 / (1.0 + 1e-8));
        assert!((p[0].data()[0] - expected).abs() < 1e-18);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn zero_gradient_is_noop() {
        let mut p = one(0.37);
        let mut s = AdamState::new(&p, 1e-3);
        for _ in 0..5 {
            s.step(&mut p, &[Tensor::scalar(0.0)], &[]).unwrap();
        }
        assert_eq!(p[0].data()[0], 0.37);
        assert_eq!(s.t, 5);
    }

    #[test]
    fn zero_lr_is_identity() {
        let mut p = one(-1.5);
        let mut s = AdamState::new(&p, 0.0);
        s.step(&mut p, &[Tensor::scalar(3.0)], &[]).unwrap();
        assert_eq!(p[0].data()[0], -1.5);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = one(1.0);
        let mut s = AdamState::new(&p, 1e-3);
        let err = s
            .step(&mut p, &[Tensor::scalar(f64::NAN)], &["layer3.w".into()])
            .unwrap_err();
        assert!(err.to_string().contains("layer3.w"));
        assert_eq!(s.t, 0);
        assert_eq!(p[0].data()[0], 1.0);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = one(1.0);
        let mut s = AdamState::new(&p, 1e-3);
        assert!(s.step(&mut p, &[Tensor::zeros(&[2, 1])], &[]).is_err());
    }
}
