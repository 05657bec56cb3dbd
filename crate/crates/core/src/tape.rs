//! Reverse-mode differentiation over a linear record of tensor operations.
//!
//! Every method on [`Tape`] evaluates its kernel immediately, stores the
//! value, and appends the operation. [`Tape::backward`] walks the record in
//! reverse, so gradient accumulation order depends only on recording order.

use crate::error::{Error, Result};
use crate::ops;
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulTn(Var, Var),
    Conv1x1 {
        x: Var,
        w: Var,
        bias: Option<Var>,
    },
    Conv3x3 {
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    },
    Relu(Var),
    Sigmoid(Var),
    GlobalAvgPool(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Reshape(Var),
    Unfold(Var),
    Fold(Var),
    Transpose(Var),
    ScaleRows(Var, Var),
    ScaleCols(Var, Var),
    ColSum(Var),
    InvSqrtEps(Var),
    SelectBatch(Var, usize),
    Stack(Vec<Var>),
    MaxPool(Var, Vec<usize>),
    Upsample(Var),
    CrossEntropy {
        logits: Var,
        probs: Vec<f64>,
        labels: Vec<usize>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    needs_grad: bool,
    is_param: bool,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for `v`. Every parameter leaf has one (zeros when the loss
    /// does not depend on it).
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            is_param: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant input; no gradient flows into it.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: false,
            is_param: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: true,
            is_param: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Distance of the recorded computation from its non-smooth points: the
    /// smallest `|input|` over ReLU nodes and the smallest winner/runner-up
    /// gap over max-pool windows. Finite differences with a step well below
    /// this margin never cross a kink.
    pub fn kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for node in &self.nodes {
            match &node.op {
                Op::Relu(a) => {
                    margin = self.nodes[a.0]
                        .value
                        .data()
                        .iter()
                        .fold(margin, |m, v| m.min(v.widen().abs()));
                }
                Op::MaxPool(a, _) => {
                    margin = margin.min(ops::max_pool2x2_gap(&self.nodes[a.0].value));
                }
                _ => {}
            }
        }
        margin
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    /// `aᵀ b`.
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul_tn(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMulTn(a, b), &[a, b]))
    }

    pub fn conv1x1(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let out = ops::conv1x1(self.value(x), self.value(w), bias.map(|b| self.value(b)))?;
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        Ok(self.push(out, Op::Conv1x1 { x, w, bias }, &inputs))
    }

    pub fn conv3x3(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let out = ops::conv3x3(
            self.value(x),
            self.value(w),
            bias.map(|b| self.value(b)),
            stride,
            padding,
        )?;
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        Ok(self.push(
            out,
            Op::Conv3x3 {
                x,
                w,
                bias,
                stride,
                padding,
            },
            &inputs,
        ))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = ops::relu(self.value(a));
        self.push(out, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = ops::sigmoid(self.value(a));
        self.push(out, Op::Sigmoid(a), &[a])
    }

    pub fn global_avg_pool(&mut self, a: Var) -> Var {
        let out = ops::global_avg_pool(self.value(a));
        self.push(out, Op::GlobalAvgPool(a), &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::add(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::sub(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::mul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = ops::scale(self.value(a), s)?;
        Ok(self.push(out, Op::Scale(a, s), &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(T::narrow(self.value(a).sum()));
        self.push(out, Op::Sum(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: Shape) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a), &[a]))
    }

    pub fn unfold(&mut self, a: Var) -> Result<Var> {
        let out = ops::unfold(self.value(a))?;
        Ok(self.push(out, Op::Unfold(a), &[a]))
    }

    pub fn fold(&mut self, a: Var, h: usize, w: usize) -> Result<Var> {
        let out = ops::fold(self.value(a), h, w)?;
        Ok(self.push(out, Op::Fold(a), &[a]))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = ops::transpose(self.value(a));
        self.push(out, Op::Transpose(a), &[a])
    }

    pub fn scale_rows(&mut self, m: Var, v: Var) -> Result<Var> {
        let out = ops::scale_rows(self.value(m), self.value(v))?;
        Ok(self.push(out, Op::ScaleRows(m, v), &[m, v]))
    }

    pub fn scale_cols(&mut self, m: Var, v: Var) -> Result<Var> {
        let out = ops::scale_cols(self.value(m), self.value(v))?;
        Ok(self.push(out, Op::ScaleCols(m, v), &[m, v]))
    }

    pub fn col_sum(&mut self, m: Var) -> Var {
        let out = ops::col_sum(self.value(m));
        self.push(out, Op::ColSum(m), &[m])
    }

    pub fn inv_sqrt_eps(&mut self, d: Var, eps: f64) -> Result<Var> {
        let out = ops::inv_sqrt_eps(self.value(d), eps)?;
        Ok(self.push(out, Op::InvSqrtEps(d), &[d]))
    }

    pub fn select_batch(&mut self, a: Var, i: usize) -> Result<Var> {
        let out = self.value(a).batch_item(i)?;
        Ok(self.push(out, Op::SelectBatch(a, i), &[a]))
    }

    pub fn stack(&mut self, items: &[Var]) -> Result<Var> {
        let values: Vec<_> = items.iter().map(|&v| self.value(v).clone()).collect();
        let out = Tensor::stack(&values)?;
        Ok(self.push(out, Op::Stack(items.to_vec()), items))
    }

    pub fn max_pool2x2(&mut self, a: Var) -> Var {
        let (out, arg) = ops::max_pool2x2(self.value(a));
        self.push(out, Op::MaxPool(a, arg), &[a])
    }

    pub fn upsample(&mut self, a: Var, h: usize, w: usize) -> Result<Var> {
        let out = ops::upsample_bilinear(self.value(a), h, w)?;
        Ok(self.push(out, Op::Upsample(a), &[a]))
    }

    /// Mean pixel cross entropy; `labels` are laid out `[N, H, W]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, probs) = ops::cross_entropy(self.value(logits), labels)?;
        Ok(self.push(
            Tensor::scalar(T::narrow(loss)),
            Op::CrossEntropy {
                logits,
                probs,
                labels: labels.to_vec(),
            },
            &[logits],
        ))
    }

    /// Adjoints of the scalar `loss` with respect to every recorded value
    /// that depends on a parameter.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let ls = self.value(loss).shape();
        if ls.numel() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be a scalar, got shape {ls}"),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(ls, T::one()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let g = match &node.op {
                Op::Leaf => continue,
                _ => match grads[idx].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            for (input, contribution) in self.adjoint(node, &g)? {
                if !self.nodes[input.0].needs_grad {
                    continue;
                }
                let slot = &mut grads[input.0];
                *slot = Some(match slot.take() {
                    Some(prev) => ops::add(&prev, &contribution)?,
                    None => contribution,
                });
            }
        }

        for (i, node) in self.nodes.iter().enumerate() {
            if node.is_param {
                if grads[i].is_none() {
                    grads[i] = Some(Tensor::zeros(node.value.shape()));
                }
            } else {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn adjoint(&self, node: &Node<T>, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let val = |v: Var| self.value(v);
        let out = match &node.op {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) => vec![
                (*a, ops::matmul_nt(g, val(*b))?.reshape(val(*a).shape())?),
                (*b, ops::matmul_tn(val(*a), g)?.reshape(val(*b).shape())?),
            ],
            Op::MatMulTn(a, b) => vec![
                (*a, ops::matmul_nt(val(*b), g)?.reshape(val(*a).shape())?),
                (*b, ops::matmul(val(*a), g)?.reshape(val(*b).shape())?),
            ],
            Op::Conv1x1 { x, w, bias } => {
                let (gx, gw, gb) = ops::conv1x1_backward(val(*x), val(*w), g);
                let mut v = vec![(*x, gx), (*w, gw)];
                if let Some(b) = bias {
                    v.push((*b, gb.reshape(val(*b).shape())?));
                }
                v
            }
            Op::Conv3x3 {
                x,
                w,
                bias,
                stride,
                padding,
            } => {
                let (gx, gw, gb) = ops::conv3x3_backward(val(*x), val(*w), g, *stride, *padding);
                let mut v = vec![(*x, gx), (*w, gw)];
                if let Some(b) = bias {
                    v.push((*b, gb.reshape(val(*b).shape())?));
                }
                v
            }
            Op::Relu(a) => {
                let data = node
                    .value
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&y, &gv)| if y > T::zero() { gv } else { T::zero() })
                    .collect();
                vec![(*a, Tensor::from_parts(g.shape(), data))]
            }
            Op::Sigmoid(a) => {
                let data = node
                    .value
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&s, &gv)| {
                        let s = s.widen();
                        T::narrow(gv.widen() * s * (1.0 - s))
                    })
                    .collect();
                vec![(*a, Tensor::from_parts(g.shape(), data))]
            }
            Op::GlobalAvgPool(a) => {
                let shape = val(*a).shape();
                let hw = shape.spatial();
                let gd = g.data();
                let data = (0..shape.numel())
                    .map(|k| T::narrow(gd[k / hw].widen() / hw as f64))
                    .collect();
                vec![(*a, Tensor::from_parts(shape, data))]
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|v| -v))],
            Op::Mul(a, b) => vec![
                (*a, ops::mul(g, val(*b))?),
                (*b, ops::mul(g, val(*a))?),
            ],
            Op::Scale(a, s) => vec![(*a, ops::scale(g, *s)?)],
            Op::Sum(a) => vec![(*a, Tensor::full(val(*a).shape(), g.data()[0]))],
            Op::Reshape(a) => vec![(*a, g.reshape(val(*a).shape())?)],
            Op::Unfold(a) => {
                let s = val(*a).shape();
                vec![(*a, ops::fold(g, s.h(), s.w())?)]
            }
            Op::Fold(a) => vec![(*a, ops::unfold(g)?)],
            Op::Transpose(a) => vec![(*a, ops::transpose(g).reshape(val(*a).shape())?)],
            Op::ScaleRows(m, v) => {
                let (p, q) = (g.shape().rows(), g.shape().cols());
                let gm = ops::scale_rows(g, val(*v))?;
                let prod = ops::mul(g, val(*m))?;
                let gv: Vec<f64> = prod
                    .data()
                    .chunks_exact(q.max(1))
                    .take(p)
                    .map(|row| row.iter().map(|x| x.widen()).sum())
                    .collect();
                vec![(*m, gm), (*v, Tensor::from_f64(val(*v).shape(), &gv)?)]
            }
            Op::ScaleCols(m, v) => {
                let gm = ops::scale_cols(g, val(*v))?;
                let gv = ops::col_sum(&ops::mul(g, val(*m))?);
                vec![(*m, gm), (*v, gv.reshape(val(*v).shape())?)]
            }
            Op::ColSum(m) => {
                let s = val(*m).shape();
                let q = s.cols();
                let gd = g.data();
                let data = (0..s.numel()).map(|k| gd[k % q]).collect();
                vec![(*m, Tensor::from_parts(s, data))]
            }
            Op::InvSqrtEps(d) => {
                let data = node
                    .value
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&y, &gv)| {
                        let y = y.widen();
                        T::narrow(-0.5 * y * y * y * gv.widen())
                    })
                    .collect();
                vec![(*d, Tensor::from_parts(g.shape(), data))]
            }
            Op::SelectBatch(a, i) => {
                let shape = val(*a).shape();
                let len = g.numel();
                let mut data = vec![T::zero(); shape.numel()];
                data[i * len..(i + 1) * len].copy_from_slice(g.data());
                vec![(*a, Tensor::from_parts(shape, data))]
            }
            Op::Stack(items) => {
                let mut offset = 0;
                let mut v = Vec::with_capacity(items.len());
                for &item in items {
                    let s = val(item).shape();
                    let len = s.numel();
                    v.push((
                        item,
                        Tensor::from_parts(s, g.data()[offset..offset + len].to_vec()),
                    ));
                    offset += len;
                }
                v
            }
            Op::MaxPool(a, arg) => {
                let shape = val(*a).shape();
                let mut data = vec![0.0; shape.numel()];
                for (&k, gv) in arg.iter().zip(g.data()) {
                    data[k] += gv.widen();
                }
                vec![(*a, Tensor::from_f64(shape, &data)?)]
            }
            Op::Upsample(a) => vec![(*a, ops::upsample_bilinear_backward(g, val(*a).shape()))],
            Op::CrossEntropy {
                logits,
                probs,
                labels,
            } => {
                let shape = val(*logits).shape();
                let [n, k, h, w] = shape.0;
                let hw = h * w;
                let scale = g.data()[0].widen() / (n * hw) as f64;
                let mut data: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for b in 0..n {
                    for p in 0..hw {
                        data[(b * k + labels[b * hw + p]) * hw + p] -= scale;
                    }
                }
                vec![(*logits, Tensor::from_f64(shape, &data)?)]
            }
        };
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::from_fn(Shape::new(1, 2, 3, 2), |[_, c, h, w]| {
            (c + h * w) as f64 - 2.0
        }));
        let loss = tape.sum(x);
        let g = tape.backward(loss).unwrap();
        assert!(g.get(x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn relu_kink_has_zero_subgradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::matrix(1, 4, vec![-1.0, -0.5, -3.0, 0.0]).unwrap());
        let r = tape.relu(x);
        let loss = tape.sum(r);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0; 4]);
    }

    #[test]
    fn kink_margin_sees_relu_and_pool_inputs() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::matrix(1, 3, vec![-0.5, 0.02, 2.0]).unwrap());
        assert_eq!(tape.kink_margin(), f64::INFINITY);
        tape.relu(x);
        assert!((tape.kink_margin() - 0.02).abs() < 1e-15);
        let img = tape.constant(
            Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![1.0, 1.005, 0.0, 0.5]).unwrap(),
        );
        tape.max_pool2x2(img);
        assert!((tape.kink_margin() - 0.005).abs() < 1e-12);
    }

    #[test]
    fn unreachable_leaf_gets_zero_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::full(Shape::matrix(2, 2), 1.0));
        let unused = tape.param(Tensor::full(Shape::matrix(3, 1), 1.0));
        let loss = tape.sum(x);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(unused).unwrap(), &Tensor::zeros(Shape::matrix(3, 1)));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::full(Shape::matrix(2, 2), 1.0));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn shared_input_accumulates() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::matrix(1, 2, vec![2.0, -3.0]).unwrap());
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[4.0, -6.0]);
    }
}
