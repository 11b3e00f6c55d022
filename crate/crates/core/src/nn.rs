//! Feed-forward networks built from autodiff primitives.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    pub names: Vec<String>,
    pub values: Vec<Arc<Tensor>>,
}

impl ParamSet {
    fn push(&mut self, name: String, t: Tensor) -> usize {
        self.names.push(name);
        self.values.push(Arc::new(t));
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn count(&self) -> usize {
        self.values.iter().map(|t| t.len()).sum()
    }

    /// Places every parameter on `g` as a leaf, in order.
    pub fn bind(&self, g: &mut Graph, requires_grad: bool) -> Vec<NodeId> {
        self.values
            .iter()
            .map(|v| g.leaf_shared(Arc::clone(v), requires_grad))
            .collect()
    }

    /// `self ← (1 − λ)·self + λ·other`.
    pub fn soft_update_from(&mut self, other: &ParamSet, lambda: f64) -> Result<()> {
        self.check_compatible(other)?;
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            let a = Arc::make_mut(a);
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x = (1.0 - lambda) * *x + lambda * y;
            }
        }
        Ok(())
    }

    pub fn check_compatible(&self, other: &ParamSet) -> Result<()> {
        if self.names != other.names {
            return Err(Error::Checkpoint(format!(
                "parameter layout differs ({} vs {} tensors)",
                self.len(),
                other.len()
            )));
        }
        for ((n, a), b) in self.names.iter().zip(&self.values).zip(&other.values) {
            if a.shape() != b.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{n}` has shape {:?}, expected {:?}",
                    b.shape(),
                    a.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn l2_distance(&self, other: &ParamSet) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Gelu,
    Relu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Architecture {
    /// `depth` hidden layers of equal `width`.
    Mlp {
        depth: usize,
        width: usize,
        activation: Activation,
    },
    /// Pre-norm residual blocks. The last output column comes from a separate
    /// head reading the features after block `head_from`.
    ResNet {
        blocks: usize,
        width: usize,
        head_width: usize,
        head_from: usize,
        dropout: f64,
    },
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Architecture::Mlp { depth, width, .. } => {
                if width == 0 {
                    return Err(Error::Invalid("mlp width must be ≥ 1".into()));
                }
                let _ = depth;
            }
            Architecture::ResNet {
                blocks,
                width,
                head_width,
                head_from,
                dropout,
            } => {
                if blocks == 0 || width == 0 || head_width == 0 {
                    return Err(Error::Invalid("resnet sizes must be ≥ 1".into()));
                }
                if head_from >= blocks {
                    return Err(Error::Invalid(format!(
                        "head_from {head_from} must index one of {blocks} blocks"
                    )));
                }
                if !(0.0..1.0).contains(&dropout) {
                    return Err(Error::Invalid(format!("dropout {dropout} outside [0, 1)")));
                }
            }
        }
        Ok(())
    }

    pub fn dropout(&self) -> f64 {
        match self {
            Architecture::Mlp { .. } => 0.0,
            Architecture::ResNet { dropout, .. } => *dropout,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FinalInit {
    Zero,
    He,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub arch: Architecture,
    pub in_dim: usize,
    pub out_dim: usize,
    pub params: ParamSet,
}

/// Training-mode state for a forward pass.
pub struct Dropout<'a> {
    pub rng: &'a mut SeededRng,
}

fn he(rng: &mut SeededRng, fan_in: usize, fan_out: usize) -> Tensor {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    rng.gaussian(&[fan_in, fan_out]).scale(std)
}

fn linear(ps: &mut ParamSet, rng: &mut SeededRng, name: &str, i: usize, o: usize, init: FinalInit) {
    let w = match init {
        FinalInit::He => he(rng, i, o),
        FinalInit::Zero => Tensor::zeros(&[i, o]),
    };
    ps.push(format!("{name}.w"), w);
    ps.push(format!("{name}.b"), Tensor::zeros(&[1, o]));
}

impl Network {
    pub fn new(arch: Architecture, in_dim: usize, out_dim: usize, final_init: FinalInit, rng: &mut SeededRng) -> Result<Self> {
        arch.validate()?;
        let mut ps = ParamSet::default();
        match &arch {
            Architecture::Mlp { depth, width, .. } => {
                let mut prev = in_dim;
                for l in 0..*depth {
                    linear(&mut ps, rng, &format!("hidden{l}"), prev, *width, FinalInit::He);
                    prev = *width;
                }
                linear(&mut ps, rng, "out", prev, out_dim, final_init);
            }
            Architecture::ResNet {
                blocks,
                width,
                head_width,
                ..
            } => {
                if out_dim < 2 {
                    return Err(Error::Invalid("resnet needs at least two outputs".into()));
                }
                linear(&mut ps, rng, "in", in_dim, *width, FinalInit::He);
                for b in 0..*blocks {
                    ps.push(format!("block{b}.ln.g"), Tensor::full(&[1, *width], 1.0));
                    ps.push(format!("block{b}.ln.b"), Tensor::zeros(&[1, *width]));
                    linear(&mut ps, rng, &format!("block{b}.fc1"), *width, 4 * width, FinalInit::He);
                    linear(&mut ps, rng, &format!("block{b}.fc2"), 4 * width, *width, FinalInit::He);
                }
                linear(&mut ps, rng, "out", *width, out_dim - 1, final_init);
                linear(&mut ps, rng, "head.fc1", *width, *head_width, FinalInit::He);
                linear(&mut ps, rng, "head.out", *head_width, 1, final_init);
            }
        }
        Ok(Self {
            arch,
            in_dim,
            out_dim,
            params: ps,
        })
    }

    /// Records the network on `g`. `p` are the bound parameter nodes.
    pub fn forward(&self, g: &mut Graph, p: &[NodeId], x: NodeId, mut dropout: Option<Dropout<'_>>) -> Result<NodeId> {
        if g.value(x).cols() != self.in_dim {
            return Err(Error::Shape {
                op: "network input".into(),
                detail: format!("expected {} columns, got {:?}", self.in_dim, g.value(x).shape()),
            });
        }
        let dense = |g: &mut Graph, h: NodeId, i: usize| -> Result<NodeId> {
            let y = g.matmul(h, p[i])?;
            g.add_row(y, p[i + 1])
        };
        match &self.arch {
            Architecture::Mlp { depth, activation, .. } => {
                let mut h = x;
                for l in 0..*depth {
                    h = dense(g, h, 2 * l)?;
                    h = match activation {
                        Activation::Gelu => g.gelu(h),
                        Activation::Relu => g.relu(h),
                    };
                }
                dense(g, h, 2 * depth)
            }
            Architecture::ResNet {
                blocks,
                head_from,
                dropout: rate,
                ..
            } => {
                let mut h = dense(g, x, 0)?;
                let mut mid = None;
                for b in 0..*blocks {
                    let base = 2 + 6 * b;
                    let mut u = h;
                    if let (Some(d), true) = (dropout.as_mut(), *rate > 0.0) {
                        let shape = g.value(u).shape().to_vec();
                        let keep = 1.0 - rate;
                        let mut mask = Tensor::zeros(&shape);
                        for m in mask.data_mut() {
                            *m = if d.rng.uniform() < keep { 1.0 / keep } else { 0.0 };
                        }
                        u = g.mul_const(u, mask)?;
                    }
                    let u = g.layer_norm(u, 1e-5);
                    let u = g.mul_row(u, p[base])?;
                    let u = g.add_row(u, p[base + 1])?;
                    let u = dense(g, u, base + 2)?;
                    let u = g.gelu(u);
                    let u = dense(g, u, base + 4)?;
                    h = g.add(h, u)?;
                    if b == *head_from {
                        mid = Some(h);
                    }
                }
                let tail = 2 + 6 * blocks;
                let a = g.gelu(h);
                let a = dense(g, a, tail)?;
                let mid = mid.expect("head_from validated");
                let w = dense(g, mid, tail + 2)?;
                let w = g.gelu(w);
                let w = dense(g, w, tail + 4)?;
                g.concat_cols(&[a, w])
            }
        }
    }

    /// Plain evaluation, no gradients.
    pub fn eval(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let xi = g.constant(x.clone());
        let out = self.forward(&mut g, &p, xi, None)?;
        Ok(g.value(out).clone())
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mlp(depth: usize) -> Architecture {
        Architecture::Mlp {
            depth,
            width: 8,
            activation: Activation::Gelu,
        }
    }

    #[test]
    fn zero_final_layer_outputs_zero() {
        let mut rng = SeededRng::new(0, 0);
        let net = Network::new(mlp(3), 5, 3, FinalInit::Zero, &mut rng).unwrap();
        let x = rng.gaussian(&[4, 5]);
        let y = net.eval(&x).unwrap();
        assert_eq!(y.shape(), &[4, 3]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn resnet_shapes_and_count() {
        let mut rng = SeededRng::new(1, 0);
        let arch = Architecture::ResNet {
            blocks: 3,
            width: 16,
            head_width: 16,
            head_from: 1,
            dropout: 0.1,
        };
        let net = Network::new(arch, 7, 3, FinalInit::He, &mut rng).unwrap();
        let y = net.eval(&rng.gaussian(&[5, 7])).unwrap();
        assert_eq!(y.shape(), &[5, 3]);
        let per_block = 2 * 16 + (16 * 64 + 64) + (64 * 16 + 16);
        let expected = (7 * 16 + 16) + 3 * per_block + (16 * 2 + 2) + (16 * 16 + 16) + (16 + 1);
        assert_eq!(net.param_count(), expected);
    }

    #[test]
    fn rejects_wrong_input_width() {
        let mut rng = SeededRng::new(0, 0);
        let net = Network::new(mlp(1), 4, 2, FinalInit::He, &mut rng).unwrap();
        assert!(net.eval(&Tensor::zeros(&[1, 3])).is_err());
    }

    #[test]
    fn soft_update_full_copy_and_contraction() {
        let mut rng = SeededRng::new(2, 0);
        let a = Network::new(mlp(2), 3, 2, FinalInit::He, &mut rng).unwrap();
        let b = Network::new(mlp(2), 3, 2, FinalInit::He, &mut rng).unwrap();
        let mut t = b.params.clone();
        let mut last = t.l2_distance(&a.params);
        for _ in 0..10 {
            t.soft_update_from(&a.params, 0.005).unwrap();
            let d = t.l2_distance(&a.params);
            assert!(d <= last);
            last = d;
        }
        t.soft_update_from(&a.params, 1.0).unwrap();
        assert_eq!(t, a.params);
    }

    #[test]
    fn six_layer_input_gradient_matches_finite_differences() {
        let mut rng = SeededRng::new(9, 0);
        let net = Network::new(mlp(6), 3, 3, FinalInit::He, &mut rng).unwrap();
        let x0 = Tensor::new(vec![2, 3], (0..6).map(|_| rng.uniform_range(-2.0, 2.0)).collect()).unwrap();
        let c = rng.gaussian(&[2, 3]);
        let mut g = Graph::new();
        let p = net.params.bind(&mut g, false);
        let x = g.leaf(x0.clone(), true);
        let y = net.forward(&mut g, &p, x, None).unwrap();
        let grad = g.backward(y, &c).unwrap().take(x).unwrap();
        let h = 1e-5;
        let mut fd = Tensor::zeros(&[2, 3]);
        for i in 0..6 {
            let mut xp = x0.clone();
            xp.data_mut()[i] += h;
            let mut xm = x0.clone();
            xm.data_mut()[i] -= h;
            let dot = |t: Tensor| t.data().iter().zip(c.data()).map(|(a, b)| a * b).sum::<f64>();
            fd.data_mut()[i] = (dot(net.eval(&xp).unwrap()) - dot(net.eval(&xm).unwrap())) / (2.0 * h);
        }
        let err = grad.sub(&fd).unwrap().norm() / fd.norm();
        assert!(err < 1e-5, "relative error {err}");
    }
}
