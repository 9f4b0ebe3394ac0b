use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use super::sample::Fill;
use super::{conv, elementwise, nn, sample, Tensor};
use crate::error::{shape_err, Result};

/// Recorded operation. Indices refer to earlier nodes on the same tape.
#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    Const,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Offset(usize),
    Unary(usize, elementwise::Unary),
    Sum(usize),
    Mean(usize),
    Concat(Vec<usize>),
    Narrow { x: usize, start: usize },
    Reshape(usize),
    Crop { x: usize, top: usize, left: usize },
    Conv2d { x: usize, w: usize, b: usize, stride: usize, pad: usize },
    ConvTranspose2d { x: usize, w: usize, b: usize, stride: usize },
    Dense { x: usize, w: usize, b: usize },
    GlobalAvgPool(usize),
    GroupNorm { x: usize, gamma: usize, beta: usize, groups: usize, mean: Vec<f64>, rstd: Vec<f64> },
    Bilinear { image: usize, coords: usize, fill: Fill },
    AffineApply { params: usize, coords: usize },
    AffineCompose { outer: usize, inner: usize },
    RigidAffine { params: usize, center: (f64, f64) },
}

pub(crate) struct Node {
    pub(crate) value: Rc<Tensor>,
    pub(crate) requires_grad: bool,
    pub(crate) op: Op,
}

/// Define-by-run gradient tape.
///
/// Leaves receive accumulated gradients on every [`Tape::backward`] call until
/// [`Tape::zero_grad`]. Constants (including detached values) never do.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    leaf_grads: RefCell<HashMap<usize, Tensor>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .field("requires_grad", &self.requires_grad())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers a trainable leaf.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push_node(Rc::new(value), true, Op::Leaf)
    }

    /// Registers a value that never receives gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_node(Rc::new(value), false, Op::Const)
    }

    pub(crate) fn constant_rc(&self, value: Rc<Tensor>) -> Var<'_> {
        self.push_node(value, false, Op::Const)
    }

    fn push_node(&self, value: Rc<Tensor>, requires_grad: bool, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, requires_grad, op });
        Var { tape: self, id: nodes.len() - 1 }
    }

    /// Appends an op node; it tracks gradient iff any input does.
    pub(crate) fn push(&self, value: Tensor, op: Op, inputs: &[usize]) -> Var<'_> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|&i| nodes[i].requires_grad)
        };
        self.push_node(Rc::new(value), requires_grad, op)
    }

    pub(crate) fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    pub(crate) fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Accumulated gradient of a leaf, `None` if it never received any.
    pub fn grad(&self, var: Var<'_>) -> Option<Tensor> {
        self.leaf_grads.borrow().get(&var.id).cloned()
    }

    /// Gradient of a leaf, zeros if it never received any.
    pub fn grad_or_zeros(&self, var: Var<'_>) -> Tensor {
        self.grad(var).unwrap_or_else(|| Tensor::zeros(var.value().shape()))
    }

    pub fn zero_grad(&self) {
        self.leaf_grads.borrow_mut().clear();
    }

    /// Accumulates d(loss)/d(leaf) into every leaf the loss depends on.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return shape_err(format!("backward needs a scalar loss, got shape {:?}", root.value.shape()));
        }
        if !root.requires_grad {
            return Ok(());
        }
        let mut grads = GradBuf { nodes: &nodes, slots: (0..=loss.id).map(|_| None).collect() };
        grads.slots[loss.id] = Some(Tensor::full(root.value.shape(), 1.0));
        let mut leaf_grads = self.leaf_grads.borrow_mut();
        for id in (0..=loss.id).rev() {
            let Some(g) = grads.slots[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => match leaf_grads.get_mut(&id) {
                    Some(acc) => acc.add_assign(&g),
                    None => {
                        leaf_grads.insert(id, g);
                    }
                },
                Op::Const => {}
                op => backward_op(op, &node.value, &g, &mut grads),
            }
        }
        Ok(())
    }
}

/// Gradient slots for one backward pass.
pub(crate) struct GradBuf<'a> {
    nodes: &'a [Node],
    slots: Vec<Option<Tensor>>,
}

impl<'a> GradBuf<'a> {
    pub(crate) fn wants(&self, id: usize) -> bool {
        self.nodes[id].requires_grad
    }

    pub(crate) fn value(&self, id: usize) -> &'a Tensor {
        &self.nodes[id].value
    }

    pub(crate) fn add(&mut self, id: usize, g: Tensor) {
        if !self.nodes[id].requires_grad {
            return;
        }
        match &mut self.slots[id] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    /// Adds `g` to `id`, summing it down when `id` is a broadcast scalar.
    fn add_broadcast(&mut self, id: usize, g: Tensor) {
        if !self.wants(id) {
            return;
        }
        let target = self.nodes[id].value.shape().to_vec();
        if g.len() != self.nodes[id].value.len() {
            let s = g.sum();
            self.add(id, Tensor { shape: target, data: vec![s] });
        } else {
            self.add(id, Tensor { shape: target, data: g.data });
        }
    }
}

fn backward_op(op: &Op, out: &Tensor, g: &Tensor, grads: &mut GradBuf<'_>) {
    match *op {
        Op::Leaf | Op::Const => {}
        Op::Add(a, b) => {
            grads.add_broadcast(a, g.clone());
            grads.add_broadcast(b, g.clone());
        }
        Op::Sub(a, b) => {
            grads.add_broadcast(a, g.clone());
            grads.add_broadcast(b, g.map(|v| -v));
        }
        Op::Mul(a, b) => {
            let (va, vb) = (grads.value(a), grads.value(b));
            if grads.wants(a) {
                grads.add_broadcast(a, elementwise::mul_broadcast(g, vb));
            }
            if grads.wants(b) {
                grads.add_broadcast(b, elementwise::mul_broadcast(g, va));
            }
        }
        Op::Scale(x, k) => grads.add(x, g.map(|v| v * k)),
        Op::Offset(x) => grads.add(x, g.clone()),
        Op::Unary(x, u) => {
            let gx = u.backward(grads.value(x), out, g);
            grads.add(x, gx);
        }
        Op::Sum(x) => {
            let shape = grads.value(x).shape().to_vec();
            grads.add(x, Tensor::full(&shape, g.item()));
        }
        Op::Mean(x) => {
            let v = grads.value(x);
            let shape = v.shape().to_vec();
            let n = v.len() as f64;
            grads.add(x, Tensor::full(&shape, g.item() / n));
        }
        Op::Concat(ref xs) => {
            let mut offset = 0;
            for &x in xs {
                let v = grads.value(x);
                let n = v.len();
                let shape = v.shape().to_vec();
                if grads.wants(x) {
                    grads.add(x, Tensor { shape, data: g.data[offset..offset + n].to_vec() });
                }
                offset += n;
            }
        }
        Op::Narrow { x, start } => {
            if grads.wants(x) {
                let v = grads.value(x);
                let inner: usize = v.shape()[1..].iter().product();
                let mut gx = Tensor::zeros(v.shape());
                let off = start * inner;
                gx.data[off..off + g.len()].copy_from_slice(&g.data);
                grads.add(x, gx);
            }
        }
        Op::Reshape(x) => {
            let shape = grads.value(x).shape().to_vec();
            grads.add(x, Tensor { shape, data: g.data.clone() });
        }
        Op::Crop { x, top, left } => {
            if grads.wants(x) {
                let gx = elementwise::crop_backward(grads.value(x).shape(), g, top, left);
                grads.add(x, gx);
            }
        }
        Op::Conv2d { x, w, b, stride, pad } => conv::conv2d_backward(grads, g, x, w, b, stride, pad),
        Op::ConvTranspose2d { x, w, b, stride } => conv::conv_transpose2d_backward(grads, g, x, w, b, stride),
        Op::Dense { x, w, b } => nn::dense_backward(grads, g, x, w, b),
        Op::GlobalAvgPool(x) => nn::gap_backward(grads, g, x),
        Op::GroupNorm { x, gamma, beta, groups, ref mean, ref rstd } => {
            nn::group_norm_backward(grads, g, x, gamma, beta, groups, mean, rstd)
        }
        Op::Bilinear { image, coords, fill } => sample::bilinear_backward(grads, g, image, coords, fill),
        Op::AffineApply { params, coords } => sample::affine_apply_backward(grads, g, params, coords),
        Op::AffineCompose { outer, inner } => sample::affine_compose_backward(grads, g, outer, inner),
        Op::RigidAffine { params, center } => sample::rigid_affine_backward(grads, g, params, center),
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    /// Scalar value of a single-element var.
    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    /// Same value, cut from the gradient graph.
    pub fn detach(&self) -> Var<'t> {
        if !self.requires_grad() {
            return *self;
        }
        self.tape.constant_rc(self.value())
    }
}
