//! Tape-based reverse-mode differentiation over rank-2 tensors.
//!
//! A [`Graph`] records primitive operations as they are evaluated. Calling
//! [`Graph::backward`] with a cotangent for some node returns the
//! vector–Jacobian product for every leaf created with `requires_grad`, which
//! covers both parameter gradients (training) and input gradients (guidance).
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and the graph cannot contain cycles.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Gelu,
    Relu,
    Sigmoid,
    Tanh,
    Exp,
    Log,
    Square,
}

impl Unary {
    fn name(self) -> &'static str {
        match self {
            Unary::Gelu => "gelu",
            Unary::Relu => "relu",
            Unary::Sigmoid => "sigmoid",
            Unary::Tanh => "tanh",
            Unary::Exp => "exp",
            Unary::Log => "log",
            Unary::Square => "square",
        }
    }

    pub fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Gelu => gelu(x),
            Unary::Relu => x.max(0.0),
            Unary::Sigmoid => sigmoid(x),
            Unary::Tanh => x.tanh(),
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Square => x * x,
        }
    }

    /// Derivative given the input `x` and the output `y = f(x)`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Gelu => gelu_grad(x),
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Tanh => 1.0 - y * y,
            Unary::Exp => y,
            Unary::Log => 1.0 / x,
            Unary::Square => 2.0 * x,
        }
    }
}

const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
// 1/sqrt(2π)
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Standard normal CDF.
pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

/// Exact gelu, `x·Φ(x)`.
pub fn gelu(x: f64) -> f64 {
    x * std_normal_cdf(x)
}

pub fn gelu_grad(x: f64) -> f64 {
    std_normal_cdf(x) + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    /// `x + b` with `b` a `[1, cols]` row broadcast over rows.
    AddRow(NodeId, NodeId),
    /// `x * g` with `g` a `[1, cols]` row broadcast over rows.
    MulRow(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    MulConst(NodeId, Arc<Tensor>),
    Unary(NodeId, Unary),
    /// Row-wise standardization; keeps `1/sqrt(var + eps)` per row.
    LayerNorm(NodeId, Vec<f64>),
    ConcatCols(Vec<NodeId>),
    SliceCols(NodeId, usize, usize),
    SumAll(NodeId),
    MeanAll(NodeId),
    /// Per-row sum, `[n, c] -> [n, 1]`.
    RowSum(NodeId),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::MulConst(..) => "mul_const",
            Op::Unary(_, u) => u.name(),
            Op::LayerNorm(..) => "layer_norm",
            Op::ConcatCols(..) => "concat_cols",
            Op::SliceCols(..) => "slice_cols",
            Op::SumAll(..) => "sum",
            Op::MeanAll(..) => "mean",
            Op::RowSum(..) => "row_sum",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

#[derive(Default, Debug)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a backward pass, indexed by leaf.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for a leaf. `None` when the leaf does not require gradients
    /// or the output does not depend on it.
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shared_value(&self, id: NodeId) -> Arc<Tensor> {
        Arc::clone(&self.nodes[id.0].value)
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.push_shared(Arc::new(value), op, requires_grad)
    }

    fn push_shared(&mut self, value: Arc<Tensor>, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn err(&self, op: &str, detail: String) -> Error {
        Error::Shape {
            op: format!("{op} (node #{})", self.nodes.len()),
            detail,
        }
    }

    fn shape_of(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Leaf sharing storage with the caller, e.g. a network parameter.
    pub fn leaf_shared(&mut self, value: Arc<Tensor>, requires_grad: bool) -> NodeId {
        self.push_shared(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.rows() {
            return Err(self.err(
                "matmul",
                format!("{:?} x {:?}", va.shape(), vb.shape()),
            ));
        }
        let out = va.matmul(vb)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn add_row(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (vx, vb) = (self.value(x), self.value(b));
        if vb.rows() != 1 || vb.cols() != vx.cols() {
            return Err(self.err(
                "add_row",
                format!("{:?} + row {:?}", vx.shape(), vb.shape()),
            ));
        }
        let mut out = vx.clone();
        let c = vx.cols();
        let bias = vb.data();
        for row in out.data_mut().chunks_exact_mut(c.max(1)) {
            for (o, bb) in row.iter_mut().zip(bias) {
                *o += bb;
            }
        }
        let rg = self.rg(&[x, b]);
        Ok(self.push(out, Op::AddRow(x, b), rg))
    }

    pub fn mul_row(&mut self, x: NodeId, g: NodeId) -> Result<NodeId> {
        let (vx, vg) = (self.value(x), self.value(g));
        if vg.rows() != 1 || vg.cols() != vx.cols() {
            return Err(self.err(
                "mul_row",
                format!("{:?} * row {:?}", vx.shape(), vg.shape()),
            ));
        }
        let mut out = vx.clone();
        let c = vx.cols();
        let gain = vg.data();
        for row in out.data_mut().chunks_exact_mut(c.max(1)) {
            for (o, gg) in row.iter_mut().zip(gain) {
                *o *= gg;
            }
        }
        let rg = self.rg(&[x, g]);
        Ok(self.push(out, Op::MulRow(x, g), rg))
    }

    fn binary(&mut self, a: NodeId, b: NodeId, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<NodeId> {
        if self.shape_of(a) != self.shape_of(b) {
            return Err(self.err(
                op.name(),
                format!("{:?} vs {:?}", self.shape_of(a), self.shape_of(b)),
            ));
        }
        let out = self.value(a).zip_map(self.value(b), op.name(), f)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, op, rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let out = self.value(x).scale(c);
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale(x, c), rg)
    }

    /// Elementwise product with a constant (dropout masks, loss weights).
    pub fn mul_const(&mut self, x: NodeId, c: Tensor) -> Result<NodeId> {
        if c.shape() != self.shape_of(x) {
            return Err(self.err(
                "mul_const",
                format!("{:?} vs {:?}", self.shape_of(x), c.shape()),
            ));
        }
        let out = self.value(x).mul(&c)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::MulConst(x, Arc::new(c)), rg))
    }

    pub fn unary(&mut self, x: NodeId, u: Unary) -> NodeId {
        let out = self.value(x).map(|v| u.apply(v));
        let rg = self.rg(&[x]);
        self.push(out, Op::Unary(x, u), rg)
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Unary::Gelu)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Unary::Relu)
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Unary::Square)
    }

    /// Row-wise `(x - mean) / sqrt(var + eps)` without affine parameters.
    pub fn layer_norm(&mut self, x: NodeId, eps: f64) -> NodeId {
        let vx = self.value(x);
        let c = vx.cols();
        let mut out = vx.clone();
        let mut inv_std = Vec::with_capacity(vx.rows());
        if c > 0 {
            for row in out.data_mut().chunks_exact_mut(c) {
                let mean = row.iter().sum::<f64>() / c as f64;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
                let is = 1.0 / (var + eps).sqrt();
                for v in row.iter_mut() {
                    *v = (*v - mean) * is;
                }
                inv_std.push(is);
            }
        }
        let rg = self.rg(&[x]);
        self.push(out, Op::LayerNorm(x, inv_std), rg)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let vals: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_cols(&vals).map_err(|e| self.err("concat_cols", e.to_string()))?;
        let rg = self.rg(parts);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let out = self
            .value(x)
            .slice_cols(start, end)
            .map_err(|e| self.err("slice_cols", e.to_string()))?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::SliceCols(x, start, end), rg))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg)
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).mean();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::MeanAll(x), rg)
    }

    pub fn row_sum(&mut self, x: NodeId) -> NodeId {
        let vx = self.value(x);
        let data: Vec<f64> = (0..vx.rows()).map(|i| vx.row_slice(i).iter().sum()).collect();
        let n = data.len();
        let rg = self.rg(&[x]);
        self.push(
            Tensor::new(vec![n, 1], data).expect("row_sum shape"),
            Op::RowSum(x),
            rg,
        )
    }

    /// Vector–Jacobian product of `output` with `cotangent`.
    pub fn backward(&self, output: NodeId, cotangent: &Tensor) -> Result<Gradients> {
        let out_val = self.value(output);
        if out_val.shape() != cotangent.shape() {
            return Err(Error::Shape {
                op: format!("vjp at node #{} ({})", output.0, self.nodes[output.0].op.name()),
                detail: format!(
                    "cotangent {:?} does not match output {:?}",
                    cotangent.shape(),
                    out_val.shape()
                ),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        if self.nodes[output.0].requires_grad {
            grads[output.0] = Some(cotangent.clone());
        }
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    /// Gradient of a `[1, 1]` output.
    pub fn backward_scalar(&self, output: NodeId) -> Result<Gradients> {
        self.backward(output, &Tensor::scalar(1.0))
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.requires_grad(*a) {
                    let vb = self.value(*b);
                    let mut ga = Tensor::zeros(self.shape_of(*a));
                    gemm(g, false, vb, true, &mut ga, 0.0);
                    accumulate(grads, *a, ga)?;
                }
                if self.requires_grad(*b) {
                    let va = self.value(*a);
                    let mut gb = Tensor::zeros(self.shape_of(*b));
                    gemm(va, true, g, false, &mut gb, 0.0);
                    accumulate(grads, *b, gb)?;
                }
            }
            Op::AddRow(x, b) => {
                if self.requires_grad(*x) {
                    accumulate(grads, *x, g.clone())?;
                }
                if self.requires_grad(*b) {
                    accumulate(grads, *b, g.sum_rows())?;
                }
            }
            Op::MulRow(x, gain) => {
                let vg = self.value(*gain);
                let c = g.cols();
                if self.requires_grad(*x) {
                    let mut gx = g.clone();
                    for row in gx.data_mut().chunks_exact_mut(c.max(1)) {
                        for (o, gg) in row.iter_mut().zip(vg.data()) {
                            *o *= gg;
                        }
                    }
                    accumulate(grads, *x, gx)?;
                }
                if self.requires_grad(*gain) {
                    let prod = g.mul(self.value(*x))?;
                    accumulate(grads, *gain, prod.sum_rows())?;
                }
            }
            Op::Add(a, b) => {
                if self.requires_grad(*a) {
                    accumulate(grads, *a, g.clone())?;
                }
                if self.requires_grad(*b) {
                    accumulate(grads, *b, g.clone())?;
                }
            }
            Op::Sub(a, b) => {
                if self.requires_grad(*a) {
                    accumulate(grads, *a, g.clone())?;
                }
                if self.requires_grad(*b) {
                    accumulate(grads, *b, g.scale(-1.0))?;
                }
            }
            Op::Mul(a, b) => {
                if self.requires_grad(*a) {
                    accumulate(grads, *a, g.mul(self.value(*b))?)?;
                }
                if self.requires_grad(*b) {
                    accumulate(grads, *b, g.mul(self.value(*a))?)?;
                }
            }
            Op::Scale(x, c) => {
                if self.requires_grad(*x) {
                    accumulate(grads, *x, g.scale(*c))?;
                }
            }
            Op::MulConst(x, c) => {
                if self.requires_grad(*x) {
                    accumulate(grads, *x, g.mul(c)?)?;
                }
            }
            Op::Unary(x, u) => {
                if self.requires_grad(*x) {
                    let vx = self.value(*x);
                    let vy = &node.value;
                    let mut gx = g.clone();
                    for ((o, &xi), &yi) in gx.data_mut().iter_mut().zip(vx.data()).zip(vy.data()) {
                        *o *= u.derivative(xi, yi);
                    }
                    accumulate(grads, *x, gx)?;
                }
            }
            Op::LayerNorm(x, inv_std) => {
                if self.requires_grad(*x) {
                    let y = &node.value;
                    let c = y.cols();
                    let mut gx = Tensor::zeros(y.shape());
                    for (i, is) in inv_std.iter().enumerate() {
                        let gy = g.row_slice(i);
                        let yr = y.row_slice(i);
                        let mean_g = gy.iter().sum::<f64>() / c as f64;
                        let mean_gy = gy.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for ((o, &gi), &yi) in gx.row_slice_mut(i).iter_mut().zip(gy).zip(yr) {
                            *o = is * (gi - mean_g - yi * mean_gy);
                        }
                    }
                    accumulate(grads, *x, gx)?;
                }
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    if self.requires_grad(*p) {
                        accumulate(grads, *p, g.slice_cols(start, start + w)?)?;
                    }
                    start += w;
                }
            }
            Op::SliceCols(x, start, end) => {
                if self.requires_grad(*x) {
                    let vx = self.value(*x);
                    let mut gx = Tensor::zeros(vx.shape());
                    for i in 0..vx.rows() {
                        gx.row_slice_mut(i)[*start..*end].copy_from_slice(g.row_slice(i));
                    }
                    accumulate(grads, *x, gx)?;
                }
            }
            Op::SumAll(x) => {
                if self.requires_grad(*x) {
                    let s = g.data()[0];
                    accumulate(grads, *x, Tensor::full(self.shape_of(*x), s))?;
                }
            }
            Op::MeanAll(x) => {
                if self.requires_grad(*x) {
                    let n = self.value(*x).len().max(1) as f64;
                    let s = g.data()[0] / n;
                    accumulate(grads, *x, Tensor::full(self.shape_of(*x), s))?;
                }
            }
            Op::RowSum(x) => {
                if self.requires_grad(*x) {
                    let vx = self.value(*x);
                    let mut gx = Tensor::zeros(vx.shape());
                    for i in 0..vx.rows() {
                        let gi = g.data()[i];
                        gx.row_slice_mut(i).iter_mut().for_each(|v| *v = gi);
                    }
                    accumulate(grads, *x, gx)?;
                }
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) -> Result<()> {
    match &mut grads[id.0] {
        Some(existing) => existing.axpy(1.0, &g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    fn rand_tensor(rng: &mut SeededRng, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform_range(-2.0, 2.0)).collect()).unwrap()
    }

    /// Central differences of `⟨f(x), c⟩` with respect to `x`.
    fn fd_grad(x: &Tensor, c: &Tensor, f: &dyn Fn(&Tensor) -> Tensor) -> Tensor {
        let h = 1e-5;
        let mut out = Tensor::zeros(x.shape());
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let fp: f64 = f(&xp).data().iter().zip(c.data()).map(|(a, b)| a * b).sum();
            let fm: f64 = f(&xm).data().iter().zip(c.data()).map(|(a, b)| a * b).sum();
            out.data_mut()[i] = (fp - fm) / (2.0 * h);
        }
        out
    }

    fn rel_err(a: &Tensor, b: &Tensor) -> f64 {
        let diff = a.sub(b).unwrap().norm();
        diff / b.norm().max(1e-12)
    }

    #[test]
    fn identity_matmul_transpose() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::new(vec![2, 2], vec![1., 0., 0., 1.]).unwrap());
        // x is a column vector so that f(x) = A·x
        let x = g.leaf(Tensor::new(vec![2, 1], vec![0.3, -0.7]).unwrap(), true);
        let y = g.matmul(a, x).unwrap();
        let grads = g.backward(y, &Tensor::new(vec![2, 1], vec![1., 0.]).unwrap()).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 0.0]);
        assert!(grads.get(a).is_none());
    }

    #[test]
    fn gelu_gradient_at_zero() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(0.0), true);
        let y = g.gelu(x);
        let grads = g.backward_scalar(y).unwrap();
        assert!((grads.get(x).unwrap().data()[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn cotangent_shape_error_names_node() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[2, 3]), true);
        let y = g.gelu(x);
        let err = g.backward(y, &Tensor::zeros(&[3, 2])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("node #1"), "{msg}");
        assert!(msg.contains("gelu"), "{msg}");
    }

    #[test]
    fn every_primitive_matches_finite_differences() {
        let mut rng = SeededRng::new(11, 0);
        let w = rand_tensor(&mut rng, &[3, 4]);
        let row = rand_tensor(&mut rng, &[1, 4]);
        let other = rand_tensor(&mut rng, &[5, 4]);
        let mask = rand_tensor(&mut rng, &[5, 4]);
        type Build = Box<dyn Fn(&mut Graph, NodeId) -> NodeId>;
        let cases: Vec<(&str, usize, Build)> = vec![
            ("matmul", 3, {
                let w = w.clone();
                Box::new(move |g, x| {
                    let w = g.constant(w.clone());
                    g.matmul(x, w).unwrap()
                })
            }),
            ("add_row", 4, {
                let r = row.clone();
                Box::new(move |g, x| {
                    let r = g.constant(r.clone());
                    g.add_row(x, r).unwrap()
                })
            }),
            ("mul_row", 4, {
                let r = row.clone();
                Box::new(move |g, x| {
                    let r = g.constant(r.clone());
                    g.mul_row(x, r).unwrap()
                })
            }),
            ("mul", 4, {
                let o = other.clone();
                Box::new(move |g, x| {
                    let o = g.constant(o.clone());
                    g.mul(x, o).unwrap()
                })
            }),
            ("sub", 4, {
                let o = other.clone();
                Box::new(move |g, x| {
                    let o = g.constant(o.clone());
                    g.sub(o, x).unwrap()
                })
            }),
            ("mul_const", 4, {
                let m = mask.clone();
                Box::new(move |g, x| g.mul_const(x, m.clone()).unwrap())
            }),
            ("scale", 4, Box::new(|g, x| g.scale(x, -1.7))),
            ("gelu", 4, Box::new(|g, x| g.gelu(x))),
            ("relu", 4, Box::new(|g, x| g.relu(x))),
            ("sigmoid", 4, Box::new(|g, x| g.unary(x, Unary::Sigmoid))),
            ("tanh", 4, Box::new(|g, x| g.unary(x, Unary::Tanh))),
            ("exp", 4, Box::new(|g, x| g.unary(x, Unary::Exp))),
            ("square", 4, Box::new(|g, x| g.square(x))),
            ("log", 4, Box::new(|g, x| {
                let sq = g.square(x);
                let e = g.unary(sq, Unary::Exp);
                g.unary(e, Unary::Log)
            })),
            ("layer_norm", 4, Box::new(|g, x| g.layer_norm(x, 1e-5))),
            ("concat_slice", 4, Box::new(|g, x| {
                let s = g.slice_cols(x, 1, 3).unwrap();
                g.concat_cols(&[x, s]).unwrap()
            })),
            ("sum", 4, Box::new(|g, x| g.sum(x))),
            ("mean", 4, Box::new(|g, x| g.mean(x))),
            ("row_sum", 4, Box::new(|g, x| g.row_sum(x))),
        ];
        for (name, cols, build) in cases {
            let mut x0 = rand_tensor(&mut rng, &[5, cols]);
            if name == "relu" {
                // keep away from the kink
                x0 = x0.map(|v| if v.abs() < 0.05 { v + 0.2 } else { v });
            }
            let f = |x: &Tensor| {
                let mut g = Graph::new();
                let id = g.leaf(x.clone(), false);
                let out = build(&mut g, id);
                g.value(out).clone()
            };
            let out_shape = f(&x0).shape().to_vec();
            let c = rand_tensor(&mut rng, &out_shape);
            let mut g = Graph::new();
            let x = g.leaf(x0.clone(), true);
            let out = build(&mut g, x);
            let ad = g.backward(out, &c).unwrap();
            let fd = fd_grad(&x0, &c, &f);
            let err = rel_err(ad.get(x).unwrap(), &fd);
            assert!(err < 1e-5, "{name}: relative error {err}");
        }
    }

    #[test]
    fn parameter_gradients_of_matmul_and_bias() {
        let mut rng = SeededRng::new(3, 0);
        let x0 = rand_tensor(&mut rng, &[4, 3]);
        let w0 = rand_tensor(&mut rng, &[3, 2]);
        let b0 = rand_tensor(&mut rng, &[1, 2]);
        let mut g = Graph::new();
        let x = g.constant(x0.clone());
        let w = g.leaf(w0.clone(), true);
        let b = g.leaf(b0.clone(), true);
        let h = g.matmul(x, w).unwrap();
        let h = g.add_row(h, b).unwrap();
        let h = g.gelu(h);
        let loss = g.sum(h);
        let grads = g.backward_scalar(loss).unwrap();
        let f_w = |wt: &Tensor| {
            let h = x0.matmul(wt).unwrap();
            let mut s = 0.0;
            for i in 0..4 {
                for j in 0..2 {
                    s += gelu(h[(i, j)] + b0[(0, j)]);
                }
            }
            Tensor::scalar(s)
        };
        let fd = fd_grad(&w0, &Tensor::scalar(1.0), &f_w);
        assert!(rel_err(grads.get(w).unwrap(), &fd) < 1e-6);
        assert_eq!(grads.get(b).unwrap().shape(), &[1, 2]);
    }
}
