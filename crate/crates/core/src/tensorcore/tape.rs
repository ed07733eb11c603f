//! A small reverse-mode tape over the operators in [`kernels`](super::kernels).
//!
//! Nodes are appended in evaluation order, so the node index is already a
//! topological order and backward is a single reverse sweep. Gradients only
//! flow into nodes that can reach a trainable parameter.

use std::fmt;

use crate::error::{Error, Result};

use super::kernels;
use super::{ParamStore, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// A differentiable operator defined outside this module.
///
/// `backward` receives the forward inputs, the forward output and the
/// upstream gradient, and returns one gradient per input. An input whose
/// `propagates` flag is false never receives a gradient.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;

    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad_output: &Tensor,
    ) -> Result<Vec<Option<Tensor>>>;
}

enum Op {
    Leaf,
    Param(String),
    Conv2d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    Deconv2d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    Dense { x: Var, w: Var, b: Var },
    Relu(Var),
    Add(Var, Var),
    GlobalAvgPool(Var),
    SoftmaxT { x: Var, mu: f32 },
    Sum(Var),
    Scale(Var, f32),
    Custom {
        inputs: Vec<Var>,
        propagates: Vec<bool>,
        op: Box<dyn CustomOp>,
    },
}

impl fmt::Debug for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::Conv2d { .. } => "conv2d",
            Op::Deconv2d { .. } => "deconv2d",
            Op::Dense { .. } => "dense",
            Op::Relu(_) => "relu",
            Op::Add(..) => "add",
            Op::GlobalAvgPool(_) => "global_avg_pool",
            Op::SoftmaxT { .. } => "softmax_t",
            Op::Sum(_) => "sum",
            Op::Scale(..) => "scale",
            Op::Custom { op, .. } => op.name(),
        };
        f.write_str(name)
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records a forward computation for later differentiation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`, or `None` when no gradient
    /// reached it.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A constant input; never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf that collects a gradient but is not tied to a parameter store.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Snapshot a named parameter. Frozen entries behave as constants.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let entry = store
            .get(name)
            .ok_or_else(|| Error::config(format!("unknown parameter `{name}`")))?;
        let trainable = entry.trainable;
        Ok(self.push(entry.value.clone(), Op::Param(name.to_string()), trainable))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let out = kernels::conv2d(self.value(x), self.value(w), self.value(b), stride, pad)?;
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(out, Op::Conv2d { x, w, b, stride, pad }, needs))
    }

    pub fn deconv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let out = kernels::deconv2d(self.value(x), self.value(w), self.value(b), stride, pad)?;
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(out, Op::Deconv2d { x, w, b, stride, pad }, needs))
    }

    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let out = kernels::dense(self.value(x), self.value(w), self.value(b))?;
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(out, Op::Dense { x, w, b }, needs))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = kernels::relu(self.value(x));
        let needs = self.needs(x);
        self.push(out, Op::Relu(x), needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), needs))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let out = kernels::global_avg_pool(self.value(x))?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::GlobalAvgPool(x), needs))
    }

    pub fn softmax_t(&mut self, x: Var, mu: f32) -> Result<Var> {
        let out = kernels::softmax_t(self.value(x), mu)?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::SoftmaxT { x, mu }, needs))
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let needs = self.needs(x);
        self.push(out, Op::Sum(x), needs)
    }

    pub fn scale(&mut self, x: Var, factor: f32) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v *= factor);
        let needs = self.needs(x);
        self.push(out, Op::Scale(x, factor), needs)
    }

    /// Record an externally defined operator whose forward value has already
    /// been computed. Inputs listed in `stop_gradient` are treated as
    /// constants regardless of where they came from.
    pub fn custom(
        &mut self,
        inputs: Vec<Var>,
        stop_gradient: &[Var],
        output: Tensor,
        op: Box<dyn CustomOp>,
    ) -> Var {
        let propagates: Vec<bool> = inputs
            .iter()
            .map(|v| self.needs(*v) && !stop_gradient.contains(v))
            .collect();
        let needs = propagates.iter().any(|&p| p);
        self.push(
            output,
            Op::Custom {
                inputs,
                propagates,
                op,
            },
            needs,
        )
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.needs(loss) {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let contributions = self.local_grads(node, &g)?;
            grads[idx] = Some(g);
            for (var, delta) in contributions {
                if !self.needs(var) {
                    continue;
                }
                match &mut grads[var.0] {
                    Some(acc) => acc.add_assign(&delta)?,
                    slot @ None => *slot = Some(delta),
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn local_grads(&self, node: &Node, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Conv2d { x, w, b, stride, pad } => {
                let need_params = self.needs(*w) || self.needs(*b);
                let r = kernels::conv2d_backward(
                    self.value(*x),
                    self.value(*w),
                    self.value(*b),
                    *stride,
                    *pad,
                    g,
                    self.needs(*x),
                    need_params,
                )?;
                push_grads(&mut out, (*x, r.dx), (*w, r.dw), (*b, r.db));
            }
            Op::Deconv2d { x, w, b, stride, pad } => {
                let need_params = self.needs(*w) || self.needs(*b);
                let r = kernels::deconv2d_backward(
                    self.value(*x),
                    self.value(*w),
                    self.value(*b),
                    *stride,
                    *pad,
                    g,
                    self.needs(*x),
                    need_params,
                )?;
                push_grads(&mut out, (*x, r.dx), (*w, r.dw), (*b, r.db));
            }
            Op::Dense { x, w, b } => {
                let need_params = self.needs(*w) || self.needs(*b);
                let r = kernels::dense_backward(
                    self.value(*x),
                    self.value(*w),
                    self.value(*b),
                    g,
                    self.needs(*x),
                    need_params,
                )?;
                push_grads(&mut out, (*x, r.dx), (*w, r.dw), (*b, r.db));
            }
            Op::Relu(x) => out.push((*x, kernels::relu_backward(self.value(*x), g))),
            Op::Add(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Op::GlobalAvgPool(x) => {
                out.push((*x, kernels::global_avg_pool_backward(self.value(*x).shape(), g)?));
            }
            Op::SoftmaxT { x, mu } => {
                out.push((*x, kernels::softmax_t_backward(&node.value, g, *mu)));
            }
            Op::Sum(x) => {
                let upstream = g.item()?;
                out.push((*x, Tensor::full(self.value(*x).shape(), upstream)));
            }
            Op::Scale(x, factor) => {
                let mut d = g.clone();
                d.data_mut().iter_mut().for_each(|v| *v *= factor);
                out.push((*x, d));
            }
            Op::Custom {
                inputs,
                propagates,
                op,
            } => {
                let values: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
                let local = op.backward(&values, &node.value, g)?;
                if local.len() != inputs.len() {
                    return Err(Error::usage(format!(
                        "{} returned {} gradients for {} inputs",
                        op.name(),
                        local.len(),
                        inputs.len()
                    )));
                }
                for ((var, grad), &flows) in inputs.iter().zip(local).zip(propagates) {
                    if let (true, Some(grad)) = (flows, grad) {
                        if grad.shape() != self.value(*var).shape() {
                            return Err(Error::shape(format!(
                                "{} produced gradient {:?} for input {:?}",
                                op.name(),
                                grad.shape(),
                                self.value(*var).shape()
                            )));
                        }
                        out.push((*var, grad));
                    }
                }
            }
        }
        Ok(out)
    }

    /// Add the gradients of every recorded parameter into `store`.
    pub fn accumulate(&self, grads: &Gradients, store: &mut ParamStore) -> Result<()> {
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Param(name) = &node.op {
                if !node.needs_grad {
                    continue;
                }
                if let Some(g) = &grads.grads[idx] {
                    store.accumulate_grad(name, g)?;
                }
            }
        }
        Ok(())
    }
}

fn push_grads(
    out: &mut Vec<(Var, Tensor)>,
    x: (Var, Option<Tensor>),
    w: (Var, Option<Tensor>),
    b: (Var, Option<Tensor>),
) {
    for (var, grad) in [x, w, b] {
        if let Some(grad) = grad {
            out.push((var, grad));
        }
    }
}
