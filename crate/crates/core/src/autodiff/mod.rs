//! Tape-based reverse-mode differentiation.
//!
//! Every op appends a node holding its value and what backward needs; the
//! basis enters [`Tape::assemble_kernel`] as a constant and never receives a
//! gradient. Scale layers are composed from the primitives in [`layers`].

pub mod gradcheck;
pub mod layers;
pub mod optim;

use std::sync::Arc;

use crate::basis::{assemble_kernel, assemble_kernel_backward};
use crate::conv::{conv2d_grouped, conv2d_grouped_backward, ChannelLayout, Padding};
use crate::error::{Error, Result};
use crate::pool::{global_max_spatial_with_indices, max_over_axis, max_pool2d_with_indices, scatter_max_grad};
use crate::scaleconv::shift_scale;
use crate::tensor::{gemm, Scalar, Strides, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Constant,
    Add(Var, Var),
    Scale(Var, T),
    WeightedSum { x: Var, weights: Tensor<T> },
    Reshape(Var),
    Permute { x: Var, perm: Vec<usize> },
    SelectOuter { x: Var, index: usize },
    ShiftScale { x: Var, shift: isize },
    AssembleKernel { w: Var, basis: Arc<Tensor<T>> },
    Conv { x: Var, kernel: Var, layout: ChannelLayout, padding: Padding },
    ChannelBias { x: Var, bias: Var },
    Relu(Var),
    MaxGather { x: Var, argmax: Vec<usize> },
    Linear { x: Var, w: Var, b: Option<Var> },
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize>, probs: Tensor<T> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// One forward pass worth of recorded operations.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients of a scalar with respect to every node of the tape.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Zero for nodes the loss does not depend on.
    pub fn get(&self, v: Var) -> Tensor<T> {
        self.grads[v.0].clone().unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    pub fn take(&mut self, v: Var) -> Tensor<T> {
        self.grads[v.0].take().unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
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

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// A parameter or any input that needs a gradient.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// An input that never receives a gradient, such as a data batch.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Constant)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let value = self.value(x).scale(factor);
        self.push(value, Op::Scale(x, factor))
    }

    /// `sum(x * weights)` for a constant `weights`; a scalar.
    pub fn weighted_sum(&mut self, x: Var, weights: Tensor<T>) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).dot(&weights)?);
        Ok(self.push(value, Op::WeightedSum { x, weights }))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let ones = Tensor::full(self.shape(x), T::one());
        self.weighted_sum(x, ones)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x)))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let value = self.value(x).permute(perm)?;
        Ok(self.push(value, Op::Permute { x, perm: perm.to_vec() }))
    }

    /// `x[index]` along the leading axis.
    pub fn select_outer(&mut self, x: Var, index: usize) -> Result<Var> {
        let n = self.shape(x)[0];
        if index >= n {
            return Err(Error::invalid(format!("index {index} of leading extent {n}")));
        }
        let value = self.value(x).slice_outer(index);
        Ok(self.push(value, Op::SelectOuter { x, index }))
    }

    /// See [`shift_scale`]; axis 2 is the scale axis.
    pub fn shift_scale(&mut self, x: Var, shift: isize) -> Result<Var> {
        let value = shift_scale(self.value(x), shift)?;
        Ok(self.push(value, Op::ShiftScale { x, shift }))
    }

    pub fn assemble_kernel(&mut self, w: Var, basis: Arc<Tensor<T>>) -> Result<Var> {
        let value = assemble_kernel(self.value(w), &basis)?;
        Ok(self.push(value, Op::AssembleKernel { w, basis }))
    }

    /// Grouped convolution, kernel `[G, C_out, C_in, V, V]`.
    pub fn conv(&mut self, x: Var, kernel: Var, layout: ChannelLayout, padding: Padding) -> Result<Var> {
        let value = conv2d_grouped(self.value(x), self.value(kernel), layout, padding)?;
        Ok(self.push(value, Op::Conv { x, kernel, layout, padding }))
    }

    /// Adds `bias[c]` across every trailing axis of `[N, C, ...]`.
    pub fn channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let mut value = self.value(x).clone();
        crate::scaleconv::add_channel_bias(&mut value, self.value(bias))?;
        Ok(self.push(value, Op::ChannelBias { x, bias }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = crate::scaleconv::relu(self.value(x));
        self.push(value, Op::Relu(x))
    }

    pub fn max_pool2d(&mut self, x: Var, window: usize) -> Result<Var> {
        let (value, argmax) = max_pool2d_with_indices(self.value(x), window)?;
        Ok(self.push(value, Op::MaxGather { x, argmax }))
    }

    pub fn global_max_spatial(&mut self, x: Var) -> Result<Var> {
        let (value, argmax) = global_max_spatial_with_indices(self.value(x))?;
        Ok(self.push(value, Op::MaxGather { x, argmax }))
    }

    pub fn max_over_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (value, argmax) = max_over_axis(self.value(x), axis)?;
        Ok(self.push(value, Op::MaxGather { x, argmax }))
    }

    /// `x [N, in]`, `w [out, in]`, `b [out]` to `x w^T + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::shape(format!("linear: input {xs:?}, weight {ws:?}")));
        }
        let (n, k, m) = (xs[0], xs[1], ws[0]);
        let mut out = vec![T::zero(); n * m];
        if let Some(b) = b {
            let bias = self.value(b);
            if bias.shape() != [m] {
                return Err(Error::shape(format!("linear bias {:?} for {m} outputs", bias.shape())));
            }
            for row in out.chunks_mut(m) {
                row.copy_from_slice(bias.data());
            }
        }
        gemm(
            n,
            k,
            m,
            T::one(),
            self.value(x).data(),
            Strides::row_major(0, k),
            self.value(w).data(),
            Strides::transposed(0, k),
            T::one(),
            &mut out,
            Strides::row_major(0, m),
        );
        let value = Tensor::new(&[n, m], out)?;
        Ok(self.push(value, Op::Linear { x, w, b }))
    }

    /// Mean softmax cross-entropy of `[N, K]` logits.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits);
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(Error::shape(format!("logits {shape:?} for {} labels", labels.len())));
        }
        let k = shape[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::invalid(format!("label {bad} out of range for {k} classes")));
        }
        let probs = softmax(self.value(logits));
        let n = T::from_usize(labels.len()).unwrap();
        let mut loss = T::zero();
        let lv = self.value(logits).data();
        for (row, &label) in labels.iter().enumerate() {
            let r = &lv[row * k..(row + 1) * k];
            let max = r.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + r.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            loss = loss + (lse - r[label]);
        }
        let value = Tensor::scalar(loss / n);
        Ok(self.push(value, Op::SoftmaxCrossEntropy { logits, labels: labels.to_vec(), probs }))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::invalid(format!("backward needs a scalar loss, got shape {:?}", self.shape(loss))));
        }
        let shapes: Vec<Vec<usize>> = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf | Op::Constant) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let mut acc = |v: Var, delta: Tensor<T>| -> Result<()> {
                match &mut grads[v.0] {
                    Some(existing) => existing.add_assign(&delta),
                    slot @ None => {
                        *slot = Some(delta);
                        Ok(())
                    }
                }
            };
            match &node.op {
                Op::Leaf | Op::Constant => {}
                Op::Add(a, b) => {
                    acc(*a, g.clone())?;
                    acc(*b, g.clone())?;
                }
                Op::Scale(x, factor) => acc(*x, g.scale(*factor))?,
                Op::WeightedSum { x, weights } => acc(*x, weights.scale(g.item()))?,
                Op::Reshape(x) => acc(*x, g.clone().reshape(&shapes[x.0])?)?,
                Op::Permute { x, perm } => acc(*x, g.permute(&Tensor::<T>::inverse_permutation(perm))?)?,
                Op::SelectOuter { x, index } => {
                    let mut full = Tensor::zeros(&shapes[x.0]);
                    let n = g.len();
                    full.data_mut()[index * n..(index + 1) * n].copy_from_slice(g.data());
                    acc(*x, full)?;
                }
                Op::ShiftScale { x, shift } => acc(*x, shift_scale(&g, -shift)?)?,
                Op::AssembleKernel { w, basis } => acc(*w, assemble_kernel_backward(&g, &shapes[w.0], basis)?)?,
                Op::Conv { x, kernel, layout, padding } => {
                    let want_input = !matches!(self.nodes[x.0].op, Op::Constant);
                    let (gx, gk) = conv2d_grouped_backward(self.value(*x), self.value(*kernel), &g, *layout, *padding, want_input)?;
                    if let Some(gx) = gx {
                        acc(*x, gx)?;
                    }
                    acc(*kernel, gk)?;
                }
                Op::ChannelBias { x, bias } => {
                    let c = shapes[bias.0][0];
                    let inner: usize = g.shape()[2..].iter().product();
                    let mut gb = vec![T::zero(); c];
                    for (chunk_idx, chunk) in g.data().chunks(inner).enumerate() {
                        let s: T = chunk.iter().copied().sum();
                        gb[chunk_idx % c] = gb[chunk_idx % c] + s;
                    }
                    acc(*bias, Tensor::new(&[c], gb)?)?;
                    acc(*x, g)?;
                }
                Op::Relu(x) => {
                    let gx = g.zip_map(self.value(*x), |gv, xv| if xv > T::zero() { gv } else { T::zero() })?;
                    acc(*x, gx)?;
                }
                Op::MaxGather { x, argmax } => acc(*x, scatter_max_grad(&g, argmax, &shapes[x.0])?)?,
                Op::Linear { x, w, b } => {
                    let (n, k) = (shapes[x.0][0], shapes[x.0][1]);
                    let m = shapes[w.0][0];
                    let mut gx = vec![T::zero(); n * k];
                    gemm(n, m, k, T::one(), g.data(), Strides::row_major(0, m), self.value(*w).data(), Strides::row_major(0, k), T::zero(), &mut gx, Strides::row_major(0, k));
                    let mut gw = vec![T::zero(); m * k];
                    gemm(m, n, k, T::one(), g.data(), Strides::transposed(0, m), self.value(*x).data(), Strides::row_major(0, k), T::zero(), &mut gw, Strides::row_major(0, k));
                    if let Some(b) = b {
                        let mut gb = vec![T::zero(); m];
                        for row in g.data().chunks(m) {
                            for (acc_b, &v) in gb.iter_mut().zip(row) {
                                *acc_b = *acc_b + v;
                            }
                        }
                        acc(*b, Tensor::new(&[m], gb)?)?;
                    }
                    acc(*x, Tensor::new(&[n, k], gx)?)?;
                    acc(*w, Tensor::new(&[m, k], gw)?)?;
                }
                Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                    let k = probs.shape()[1];
                    let scale = g.item() / T::from_usize(labels.len()).unwrap();
                    let mut gl = probs.clone();
                    for (row, &label) in labels.iter().enumerate() {
                        let i = row * k + label;
                        gl.data_mut()[i] = gl.data()[i] - T::one();
                    }
                    acc(*logits, gl.scale(scale))?;
                }
            }
        }
        Ok(Gradients { grads, shapes })
    }
}

/// Row-wise softmax of `[N, K]`.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    let k = logits.shape()[logits.rank() - 1];
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(k) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        row.iter_mut().for_each(|v| *v = (*v - max).exp());
        let z: T = row.iter().copied().sum();
        row.iter_mut().for_each(|v| *v = *v / z);
    }
    out
}
