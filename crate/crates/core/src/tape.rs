//! Operation tape for reverse-mode differentiation.
//!
//! Every recorded op appends a node holding its output value, the ids of its
//! inputs and whatever it saved for the backward pass. Node ids increase in
//! execution order, so a reverse sweep visits each node after all its consumers.
//! Only the op set used by the model family is supported.

use rand::Rng;

use crate::error::{Error, Result};
use crate::loss::softmax_cross_entropy;
use crate::ops::activation::{activation, activation_backward, Activation};
use crate::ops::conv::{conv2d, conv2d_backward, Conv2dSpec};
use crate::ops::linear::{linear, linear_backward};
use crate::ops::misc::{self, Binary};
use crate::ops::norm::{layer_norm, layer_norm_backward, LayerNormCache};
use crate::ops::pool;
use crate::tensor::{Element, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv2d { input: Var, weight: Var, bias: Option<Var>, spec: Conv2dSpec },
    Linear { input: Var, weight: Var, bias: Option<Var> },
    LayerNorm { input: Var, gamma: Var, beta: Var, axis: usize, cache: LayerNormCache<T> },
    Activation { input: Var, kind: Activation },
    GlobalAvgPool { input: Var },
    GlobalMaxPool { input: Var, argmax: Vec<usize> },
    MaxPool2d { input: Var, argmax: Vec<usize> },
    Concat { a: Var, b: Var },
    Dropout { input: Var, mask: Option<Vec<T>> },
    Binary { a: Var, b: Var, op: Binary },
    Scale { input: Var, factor: T },
    SegmentMean { input: Var, segments: Vec<usize>, sizes: Vec<usize> },
    GatherRows { input: Var, index: Vec<usize> },
    WeightedRowSum { input: Var, weights: Vec<T> },
    CrossEntropy { logits: Var, labels: Vec<usize>, grad: Tensor<T> },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::Linear { .. } => "linear",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Activation { .. } => "activation",
            Op::GlobalAvgPool { .. } => "global_avg_pool",
            Op::GlobalMaxPool { .. } => "global_max_pool",
            Op::MaxPool2d { .. } => "max_pool2d",
            Op::Concat { .. } => "concat_channels",
            Op::Dropout { .. } => "dropout",
            Op::Binary { .. } => "elementwise",
            Op::Scale { .. } => "scale",
            Op::SegmentMean { .. } => "segment_mean",
            Op::GatherRows { .. } => "gather_rows",
            Op::WeightedRowSum { .. } => "weighted_row_sum",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

pub struct Tape<T: Element> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, requires_grad, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by the last backward pass, if `v` required one.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<T>> {
        self.nodes[v.0].value.take_grad()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.value.take_grad();
        }
    }

    fn push(&mut self, value: Tensor<T>, inputs: &[Var], op: Op<T>) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, spec: Conv2dSpec) -> Result<Var> {
        let out = conv2d(self.value(input), self.value(weight), bias.map(|b| self.value(b)), spec)?;
        let mut deps = vec![input, weight];
        deps.extend(bias);
        Ok(self.push(out, &deps, Op::Conv2d { input, weight, bias, spec }))
    }

    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let out = linear(self.value(input), self.value(weight), bias.map(|b| self.value(b)))?;
        let mut deps = vec![input, weight];
        deps.extend(bias);
        Ok(self.push(out, &deps, Op::Linear { input, weight, bias }))
    }

    pub fn layer_norm(&mut self, input: Var, gamma: Var, beta: Var, axis: usize, eps: f64) -> Result<Var> {
        let (out, cache) = layer_norm(self.value(input), self.value(gamma), self.value(beta), axis, eps)?;
        Ok(self.push(out, &[input, gamma, beta], Op::LayerNorm { input, gamma, beta, axis, cache }))
    }

    pub fn activation(&mut self, input: Var, kind: Activation) -> Var {
        let out = activation(self.value(input), kind);
        self.push(out, &[input], Op::Activation { input, kind })
    }

    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let out = pool::global_avg_pool(self.value(input))?;
        Ok(self.push(out, &[input], Op::GlobalAvgPool { input }))
    }

    pub fn global_max_pool(&mut self, input: Var) -> Result<Var> {
        let (out, argmax) = pool::global_max_pool(self.value(input))?;
        Ok(self.push(out, &[input], Op::GlobalMaxPool { input, argmax }))
    }

    pub fn max_pool2d(&mut self, input: Var, window: usize) -> Result<Var> {
        let (out, argmax) = pool::max_pool2d(self.value(input), window)?;
        Ok(self.push(out, &[input], Op::MaxPool2d { input, argmax }))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = misc::concat_channels(self.value(a), self.value(b))?;
        Ok(self.push(out, &[a, b], Op::Concat { a, b }))
    }

    pub fn dropout<R: Rng + ?Sized>(&mut self, input: Var, p: f64, training: bool, rng: &mut R) -> Result<Var> {
        let (out, mask) = misc::dropout(self.value(input), p, training, rng)?;
        Ok(self.push(out, &[input], Op::Dropout { input, mask }))
    }

    fn binary(&mut self, a: Var, b: Var, op: Binary) -> Result<Var> {
        let out = misc::binary(self.value(a), self.value(b), op)?;
        Ok(self.push(out, &[a, b], Op::Binary { a, b, op }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Mul)
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Var {
        let out = misc::scale(self.value(input), factor);
        self.push(out, &[input], Op::Scale { input, factor })
    }

    pub fn segment_mean(&mut self, input: Var, segments: &[usize], count: usize) -> Result<Var> {
        let (out, sizes) = misc::segment_mean(self.value(input), segments, count)?;
        Ok(self.push(out, &[input], Op::SegmentMean { input, segments: segments.to_vec(), sizes }))
    }

    pub fn gather_rows(&mut self, input: Var, index: &[usize]) -> Result<Var> {
        let out = misc::gather_rows(self.value(input), index)?;
        Ok(self.push(out, &[input], Op::GatherRows { input, index: index.to_vec() }))
    }

    pub fn weighted_row_sum(&mut self, input: Var, weights: &[T]) -> Result<Var> {
        let out = misc::weighted_row_sum(self.value(input), weights)?;
        Ok(self.push(out, &[input], Op::WeightedRowSum { input, weights: weights.to_vec() }))
    }

    /// Mean softmax cross-entropy of `logits` (N x K) against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, grad) = softmax_cross_entropy(self.value(logits), labels)?;
        Ok(self.push(Tensor::scalar(loss), &[logits], Op::CrossEntropy { logits, labels: labels.to_vec(), grad }))
    }

    /// Backpropagates from a single-element output seeded with 1.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        let value = self.value(output);
        if value.numel() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward from a non-scalar output of shape {:?} needs an explicit seed",
                value.shape()
            )));
        }
        let seed = Tensor::full(value.shape().to_vec(), T::one());
        self.backward_with_seeds(vec![(output, seed)])
    }

    /// Reverse sweep seeded with explicit upstream gradients for one or more outputs.
    /// Gradients land in the `grad` buffer of every node that requires one.
    pub fn backward_with_seeds(&mut self, seeds: Vec<(Var, Tensor<T>)>) -> Result<()> {
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut last = 0;
        for (v, seed) in seeds {
            let node = &self.nodes[v.0];
            if seed.shape() != node.value.shape() {
                return Err(Error::shape(
                    "backward",
                    format!("seed {:?} for output of shape {:?}", seed.shape(), node.value.shape()),
                ));
            }
            accumulate(&mut grads[v.0], seed.into_data());
            last = last.max(v.0);
        }
        for i in (0..=last).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            let gt = Tensor::new(self.nodes[i].value.shape().to_vec(), g)?;
            for (v, d) in self.input_grads(i, &gt)? {
                if self.nodes[v.0].requires_grad {
                    accumulate(&mut grads[v.0], d.into_data());
                }
            }
            self.nodes[i].value.accumulate_grad(gt.data());
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn input_grads(&self, i: usize, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let node = &self.nodes[i];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, weight, bias, spec } => {
                let gr = conv2d_backward(
                    self.value(*input),
                    self.value(*weight),
                    *spec,
                    g,
                    self.needs(*input),
                    self.needs(*weight),
                    bias.is_some_and(|b| self.needs(b)),
                )?;
                out.extend(gr.input.map(|t| (*input, t)));
                out.extend(gr.weight.map(|t| (*weight, t)));
                if let (Some(b), Some(t)) = (bias, gr.bias) {
                    out.push((*b, t));
                }
            }
            Op::Linear { input, weight, bias } => {
                let gr = linear_backward(
                    self.value(*input),
                    self.value(*weight),
                    g,
                    self.needs(*input),
                    self.needs(*weight),
                    bias.is_some_and(|b| self.needs(b)),
                )?;
                out.extend(gr.input.map(|t| (*input, t)));
                out.extend(gr.weight.map(|t| (*weight, t)));
                if let (Some(b), Some(t)) = (bias, gr.bias) {
                    out.push((*b, t));
                }
            }
            Op::LayerNorm { input, gamma, beta, axis, cache } => {
                let gr = layer_norm_backward(
                    self.value(*input).shape(),
                    self.value(*gamma),
                    *axis,
                    cache,
                    g,
                    self.needs(*input),
                )?;
                out.extend(gr.input.map(|t| (*input, t)));
                out.extend(gr.gamma.map(|t| (*gamma, t)));
                out.extend(gr.beta.map(|t| (*beta, t)));
            }
            Op::Activation { input, kind } => {
                out.push((*input, activation_backward(self.value(*input), &node.value, *kind, g)));
            }
            Op::GlobalAvgPool { input } => {
                out.push((*input, pool::global_avg_pool_backward(self.value(*input).shape(), g)));
            }
            Op::GlobalMaxPool { input, argmax } | Op::MaxPool2d { input, argmax } => {
                out.push((*input, pool::scatter_to_argmax(self.value(*input).shape(), argmax, g)));
            }
            Op::Concat { a, b } => {
                let (ga, gb) = misc::split_channels(g, self.value(*a).dim(1));
                out.push((*a, ga));
                out.push((*b, gb));
            }
            Op::Dropout { input, mask } => {
                let d = match mask {
                    Some(m) => Tensor::new(g.shape().to_vec(), g.data().iter().zip(m).map(|(&g, &m)| g * m).collect())?,
                    None => g.clone(),
                };
                out.push((*input, d));
            }
            Op::Binary { a, b, op } => match op {
                Binary::Add => {
                    out.push((*a, g.clone()));
                    out.push((*b, g.clone()));
                }
                Binary::Sub => {
                    out.push((*a, g.clone()));
                    out.push((*b, misc::scale(g, -T::one())));
                }
                Binary::Mul => {
                    out.push((*a, misc::binary(g, self.value(*b), Binary::Mul)?));
                    out.push((*b, misc::binary(g, self.value(*a), Binary::Mul)?));
                }
            },
            Op::Scale { input, factor } => out.push((*input, misc::scale(g, *factor))),
            Op::SegmentMean { input, segments, sizes } => {
                out.push((*input, misc::segment_mean_backward(segments, sizes, g)));
            }
            Op::GatherRows { input, index } => {
                out.push((*input, misc::gather_rows_backward(self.value(*input).dim(0), index, g)));
            }
            Op::WeightedRowSum { input, weights } => {
                let x = self.value(*input);
                let d = x.dim(1);
                let s = g.data()[0];
                let data = (0..x.numel()).map(|k| s * weights[k / d.max(1)]).collect();
                out.push((*input, Tensor::new(x.shape().to_vec(), data)?));
            }
            Op::CrossEntropy { logits, grad, .. } => {
                out.push((*logits, misc::scale(grad, g.data()[0])));
            }
        }
        debug_assert!(
            out.iter().all(|(v, t)| t.shape() == self.value(*v).shape()),
            "{} produced a gradient of the wrong shape",
            node.op.name()
        );
        Ok(out)
    }

    /// Name of the op that produced `v` (for diagnostics).
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    /// Distance to the nearest non-differentiable point: the smallest `|x|`
    /// fed to a ReLU and the smallest gap between a max-pool winner and its
    /// runner-up. Infinite when the tape has neither.
    pub fn kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        let gap = |window: &mut dyn Iterator<Item = f64>| {
            let (mut top, mut second) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
            for v in window {
                if v > top {
                    second = top;
                    top = v;
                } else if v > second {
                    second = v;
                }
            }
            top - second
        };
        for node in &self.nodes {
            match &node.op {
                Op::Activation { input, kind: Activation::Relu } => {
                    for &v in self.value(*input).data() {
                        margin = margin.min(Element::to_f64(v).abs());
                    }
                }
                Op::GlobalMaxPool { input, .. } => {
                    let x = self.value(*input);
                    let plane = x.numel() / node.value.numel().max(1);
                    for p in x.data().chunks(plane) {
                        margin = margin.min(gap(&mut p.iter().map(|&v| Element::to_f64(v))));
                    }
                }
                Op::MaxPool2d { input, .. } => {
                    let x = self.value(*input);
                    let (h, w) = (x.dim(2), x.dim(3));
                    let (oh, ow) = (node.value.dim(2), node.value.dim(3));
                    let k = h / oh;
                    for plane in x.data().chunks(h * w) {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let mut window = (0..k * k).map(|i| {
                                    Element::to_f64(plane[(oy * k + i / k) * w + ox * k + i % k])
                                });
                                margin = margin.min(gap(&mut window));
                            }
                        }
                    }
                }
                _ => {}
            }
        }
        margin
    }

    /// Labels recorded with a cross-entropy node.
    pub fn cross_entropy_labels(&self, v: Var) -> Option<&[usize]> {
        match &self.nodes[v.0].op {
            Op::CrossEntropy { labels, .. } => Some(labels),
            _ => None,
        }
    }
}

fn accumulate<T: Element>(slot: &mut Option<Vec<T>>, delta: Vec<T>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(&delta).for_each(|(a, &d)| *a = *a + d),
        None => *slot = Some(delta),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn product_rule_through_shared_input() {
        // y = sum((x * x) * w), dy/dx = 2 x w
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new([1, 3], vec![1.0, -2.0, 3.0]).unwrap(), true);
        let w = tape.leaf(Tensor::new([1, 3], vec![0.5, 0.5, 2.0]).unwrap(), false);
        let sq = tape.mul(x, x).unwrap();
        let p = tape.mul(sq, w).unwrap();
        let y = tape.weighted_row_sum(p, &[1.0]).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, -2.0, 12.0]);
        assert!(tape.grad(w).is_none());
    }

    #[test]
    fn non_scalar_backward_needs_seed() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros([2]), true);
        let y = tape.scale(x, 2.0);
        assert!(tape.backward(y).is_err());
        tape.backward_with_seeds(vec![(y, Tensor::full([2], 1.0))]).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::full([1, 2], 1.0), false);
        let y = tape.weighted_row_sum(x, &[1.0]).unwrap();
        assert!(!tape.requires_grad(y));
        tape.backward(y).unwrap();
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn kink_margin_sees_relu_and_pool_ties() {
        let mut tape = Tape::<f64>::new();
        assert_eq!(tape.kink_margin(), f64::INFINITY);
        let x = tape.leaf(Tensor::new([1, 3], vec![0.5, -0.02, 2.0]).unwrap(), false);
        tape.activation(x, Activation::Relu);
        assert!((tape.kink_margin() - 0.02).abs() < 1e-15);
        let p = tape.leaf(Tensor::new([1, 1, 2, 2], vec![1.0, 0.999, -3.0, 0.0]).unwrap(), false);
        tape.max_pool2d(p, 2).unwrap();
        assert!((tape.kink_margin() - 0.001).abs() < 1e-12);
        tape.global_max_pool(p).unwrap();
        assert!((tape.kink_margin() - 0.001).abs() < 1e-12);
    }
}
