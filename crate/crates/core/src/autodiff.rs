//! Reverse-mode differentiation over a Wengert list.
//!
//! Every operation appends a node whose operands already live on the tape, so
//! the node order is a topological order and `backward` is a single reverse
//! sweep. Node values are computed with the same kernels as untraced
//! evaluation in [`crate::tensor`].

use crate::error::{Error, Result};
use crate::tensor::{self, gemm, Elementwise, MatRef, Tensor};

/// Handle to a node on a [`GradTape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
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
    Binary(Elementwise, Var, Var),
    Unary(Elementwise, Var),
    AddBias(Var, Var),
    /// Multiplication by a constant tensor (dropout keep-and-rescale mask).
    ScaleBy(Var, Tensor),
    Sum(Var),
    /// Mean softmax cross-entropy; keeps the softmax probabilities.
    SoftmaxXent {
        logits: Var,
        labels: Vec<usize>,
        probs: Tensor,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records operations for one forward pass.
#[derive(Debug, Default)]
pub struct GradTape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`GradTape::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

impl GradTape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A constant input; no gradient is tracked for it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A trainable leaf whose gradient `backward` reports.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = tensor::matmul(self.value(a), self.value(b))?;
        let g = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::MatMul(a, b), g))
    }

    pub fn elementwise(&mut self, op: Elementwise, a: Var, b: Option<Var>) -> Result<Var> {
        let value = tensor::elementwise(op, self.value(a), b.map(|b| self.value(b)))?;
        let (node_op, g) = match b {
            Some(b) => (Op::Binary(op, a, b), self.needs(a) || self.needs(b)),
            None => (Op::Unary(op, a), self.needs(a)),
        };
        Ok(self.push(value, node_op, g))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Elementwise::Add, a, Some(b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Elementwise::Sub, a, Some(b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Elementwise::Mul, a, Some(b))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.elementwise(Elementwise::Relu, a, None)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.elementwise(Elementwise::Sigmoid, a, None)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.elementwise(Elementwise::Tanh, a, None)
    }

    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let value = tensor::add_bias(self.value(x), self.value(bias))?;
        let g = self.needs(x) || self.needs(bias);
        Ok(self.push(value, Op::AddBias(x, bias), g))
    }

    pub fn scale_by(&mut self, x: Var, factors: Tensor) -> Result<Var> {
        let value = tensor::elementwise(Elementwise::Mul, self.value(x), Some(&factors))?;
        let g = self.needs(x);
        Ok(self.push(value, Op::ScaleBy(x, factors), g))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let g = self.needs(x);
        self.push(value, Op::Sum(x), g)
    }

    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, probs) = softmax_xent_forward(self.value(logits), labels)?;
        let g = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxXent {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            g,
        ))
    }

    /// Reverse sweep from a scalar `loss`, visiting each node once.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = &self.nodes[loss.0];
        if !root.value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(root.value.shape()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(upstream) = grads[i].take() else {
                continue;
            };
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(upstream);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    let up = MatRef::of(&upstream)?;
                    if self.needs(*a) {
                        let mut ga = vec![0.0; av.len()];
                        gemm(up, MatRef::of(bv)?.t(), &mut ga, false);
                        accumulate(&mut grads, *a, av.shape(), ga);
                    }
                    if self.needs(*b) {
                        let mut gb = vec![0.0; bv.len()];
                        gemm(MatRef::of(av)?.t(), up, &mut gb, false);
                        accumulate(&mut grads, *b, bv.shape(), gb);
                    }
                }
                Op::Binary(op, a, b) => {
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    let up = upstream.data();
                    let (ga, gb): (Vec<f64>, Vec<f64>) = match op {
                        Elementwise::Add => (up.to_vec(), up.to_vec()),
                        Elementwise::Sub => (up.to_vec(), up.iter().map(|g| -g).collect()),
                        _ => (
                            up.iter().zip(bv.data()).map(|(g, y)| g * y).collect(),
                            up.iter().zip(av.data()).map(|(g, x)| g * x).collect(),
                        ),
                    };
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, av.shape(), ga);
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, bv.shape(), gb);
                    }
                }
                Op::Unary(op, a) => {
                    let out = node.value.data();
                    let x = self.nodes[a.0].value.data();
                    let up = upstream.data();
                    let g: Vec<f64> = match op {
                        // Subgradient 0 at the kink.
                        Elementwise::Relu => up
                            .iter()
                            .zip(x)
                            .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
                            .collect(),
                        Elementwise::Sigmoid => {
                            up.iter().zip(out).map(|(g, s)| g * s * (1.0 - s)).collect()
                        }
                        _ => up.iter().zip(out).map(|(g, t)| g * (1.0 - t * t)).collect(),
                    };
                    accumulate(&mut grads, *a, node.value.shape(), g);
                }
                Op::AddBias(x, bias) => {
                    let (rows, cols) = upstream.dims2()?;
                    if self.needs(*bias) {
                        let mut gb = vec![0.0; cols];
                        for r in 0..rows {
                            for (acc, g) in gb.iter_mut().zip(upstream.row(r)) {
                                *acc += g;
                            }
                        }
                        let shape = self.nodes[bias.0].value.shape().to_vec();
                        accumulate(&mut grads, *bias, &shape, gb);
                    }
                    if self.needs(*x) {
                        accumulate(&mut grads, *x, node.value.shape(), upstream.into_data());
                    }
                }
                Op::ScaleBy(x, factors) => {
                    let g = upstream
                        .data()
                        .iter()
                        .zip(factors.data())
                        .map(|(g, f)| g * f)
                        .collect();
                    accumulate(&mut grads, *x, node.value.shape(), g);
                }
                Op::Sum(x) => {
                    let shape = self.nodes[x.0].value.shape().to_vec();
                    let g = vec![upstream.data()[0]; shape.iter().product()];
                    accumulate(&mut grads, *x, &shape, g);
                }
                Op::SoftmaxXent {
                    logits,
                    labels,
                    probs,
                } => {
                    let scale = upstream.data()[0] / labels.len() as f64;
                    let (_, classes) = probs.dims2()?;
                    let mut g = probs.data().to_vec();
                    for (r, &label) in labels.iter().enumerate() {
                        g[r * classes + label] -= 1.0;
                    }
                    g.iter_mut().for_each(|v| *v *= scale);
                    accumulate(&mut grads, *logits, probs.shape(), g);
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], target: Var, shape: &[usize], g: Vec<f64>) {
    match &mut grads[target.0] {
        Some(existing) => {
            for (e, v) in existing.data_mut().iter_mut().zip(g) {
                *e += v;
            }
        }
        slot @ None => {
            *slot = Some(Tensor::new(shape.to_vec(), g).expect("gradient shape"));
        }
    }
}

/// Mean softmax cross-entropy with max-subtraction; also returns the
/// per-row softmax probabilities.
pub(crate) fn softmax_xent_forward(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (rows, classes) = logits.dims2()?;
    if labels.len() != rows {
        return Err(Error::Dimension(format!(
            "{} labels for {rows} logit rows",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Data(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    let mut probs = Vec::with_capacity(rows * classes);
    let mut total = 0.0;
    for (r, &label) in labels.iter().enumerate() {
        let row = logits.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&z| (z - max).exp()).collect();
        let norm: f64 = exps.iter().sum();
        total += norm.ln() - (row[label] - max);
        probs.extend(exps.iter().map(|e| e / norm));
    }
    Ok((
        total / rows as f64,
        Tensor::new(vec![rows, classes], probs)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = GradTape::new();
        let w = tape.param(Tensor::from_rows(&[&[1.0, -2.0], &[0.5, 3.0]]));
        let loss = tape.sum(w);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn square_sum_gradient_is_twice_w() {
        let mut tape = GradTape::new();
        let values = [0.3, -1.2, 2.5];
        let w = tape.param(Tensor::vector(&values));
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.sum(sq);
        let grads = tape.backward(loss).unwrap();
        let expected: Vec<f64> = values.iter().map(|v| 2.0 * v).collect();
        assert_eq!(grads.get(w).unwrap().data(), &expected[..]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = GradTape::new();
        let w = tape.param(Tensor::zeros(&[2, 2]));
        let r = tape.relu(w).unwrap();
        assert!(matches!(tape.backward(r), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = GradTape::new();
        let x = tape.constant(Tensor::from_rows(&[&[1.0, 2.0]]));
        let w = tape.param(Tensor::from_rows(&[&[3.0], &[4.0]]));
        let y = tape.matmul(x, w).unwrap();
        let loss = tape.sum(y);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(x).is_none());
        assert_eq!(grads.get(w).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn relu_kink_has_zero_gradient() {
        let mut tape = GradTape::new();
        let w = tape.param(Tensor::vector(&[0.0, 1.0, -1.0]));
        let r = tape.relu(w).unwrap();
        let loss = tape.sum(r);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn xent_rejects_out_of_range_label() {
        let logits = Tensor::zeros(&[1, 3]);
        assert!(matches!(
            softmax_xent_forward(&logits, &[3]),
            Err(Error::Data(_))
        ));
    }
}
