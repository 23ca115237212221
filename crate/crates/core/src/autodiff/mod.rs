//! Reverse-mode automatic differentiation over an append-only tape.
//!
//! Every primitive appends one node holding its output value plus whatever
//! forward context its backward rule needs. `backward` walks the tape once in
//! reverse insertion order and accumulates (`+=`) into gradient buffers.

mod conv;
mod linalg;
mod pointwise;
mod shape;

pub use conv::{conv_out_extent, conv_transpose_out_extent};

use crate::error::{Error, Result};
use crate::ssm::ScanCtx;
use crate::tensor::{Element, Tensor};
use crate::train::loss::DiceCeCtx;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) enum Op<E> {
    Leaf,
    Conv(conv::ConvCtx),
    ConvTranspose(conv::ConvCtx),
    LeakyRelu { x: Var, slope: E },
    Silu { x: Var },
    Softplus { x: Var },
    NegExp { x: Var },
    Softmax { x: Var, axis: usize },
    InstanceNorm(pointwise::NormCtx<E>),
    LayerNorm(pointwise::NormCtx<E>),
    Linear { x: Var, w: Var, b: Option<Var> },
    Matmul { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sum { x: Var },
    Reshape { x: Var },
    Permute { x: Var, perm: Vec<usize> },
    Concat { xs: Vec<Var>, axis: usize },
    CausalConv1d { x: Var, w: Var, b: Var },
    SelectiveScan(Box<ScanCtx<E>>),
    DiceCe(Box<DiceCeCtx<E>>),
}

pub(crate) struct Node<E> {
    pub(crate) value: Tensor<E>,
    pub(crate) requires_grad: bool,
    pub(crate) op: Op<E>,
}

/// The tape. Single writer; values are immutable once recorded.
pub struct Graph<E: Element> {
    nodes: Vec<Node<E>>,
    grads: Vec<Option<Vec<E>>>,
}

impl<E: Element> Default for Graph<E> {
    fn default() -> Self {
        Self::new()
    }
}

/// Mutable view of gradient slots handed to backward rules.
pub(crate) struct GradSink<'a, E> {
    nodes: &'a [Node<E>],
    slots: &'a mut [Option<Vec<E>>],
}

impl<'a, E: Element> GradSink<'a, E> {
    /// Recorded nodes; the returned borrow is independent of the sink's own.
    pub(crate) fn nodes(&self) -> &'a [Node<E>] {
        self.nodes
    }

    /// Gradient buffer of `v`, allocated on first use; `None` when `v` needs no gradient.
    pub(crate) fn slot(&mut self, v: Var) -> Option<&mut [E]> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let n = node.value.len();
        Some(self.slots[v.0].get_or_insert_with(|| vec![E::ZERO; n]))
    }

    pub(crate) fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub(crate) fn add(&mut self, v: Var, g: &[E]) {
        if let Some(s) = self.slot(v) {
            for (d, &x) in s.iter_mut().zip(g) {
                *d += x;
            }
        }
    }
}

impl<E: Element> Graph<E> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf tensor.
    pub fn leaf(&mut self, value: Tensor<E>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn param(&mut self, value: Tensor<E>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<E>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&[E]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Clears every accumulated gradient.
    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    pub(crate) fn push(&mut self, value: Tensor<E>, requires_grad: bool, op: Op<E>) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub(crate) fn node_op(&self, v: Var) -> &Op<E> {
        &self.nodes[v.0].op
    }

    /// Accumulates d`loss`/d`v` into every node that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::contract(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        // Seed separately so intermediate buffers from a previous pass are not reused.
        let mut work: Vec<Option<Vec<E>>> = vec![None; self.nodes.len()];
        work[loss.0] = Some(vec![E::ONE]);
        for i in (0..=loss.0).rev() {
            let Some(g) = work[i].take() else { continue };
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                let slot = self.grads[i].get_or_insert_with(|| vec![E::ZERO; g.len()]);
                for (d, x) in slot.iter_mut().zip(&g) {
                    *d += *x;
                }
                continue;
            }
            let mut sink = GradSink {
                nodes: &self.nodes,
                slots: &mut work,
            };
            backward_node(&self.nodes, i, &g, &mut sink);
        }
        Ok(())
    }
}

fn backward_node<E: Element>(nodes: &[Node<E>], i: usize, g: &[E], sink: &mut GradSink<'_, E>) {
    let node = &nodes[i];
    let val = |v: Var| &nodes[v.0].value;
    match &node.op {
        Op::Leaf => {}
        Op::Conv(ctx) => conv::conv_backward(ctx, val(ctx.x), val(ctx.w), g, sink),
        Op::ConvTranspose(ctx) => conv::conv_transpose_backward(ctx, val(ctx.x), val(ctx.w), g, sink),
        Op::LeakyRelu { x, slope } => pointwise::leaky_relu_backward(*x, *slope, val(*x), g, sink),
        Op::Silu { x } => pointwise::silu_backward(*x, val(*x), g, sink),
        Op::Softplus { x } => pointwise::softplus_backward(*x, val(*x), g, sink),
        Op::NegExp { x } => pointwise::neg_exp_backward(*x, &node.value, g, sink),
        Op::Softmax { x, axis } => pointwise::softmax_backward(*x, *axis, &node.value, g, sink),
        Op::InstanceNorm(ctx) => pointwise::instance_norm_backward(ctx, val(ctx.x), val(ctx.scale), g, sink),
        Op::LayerNorm(ctx) => pointwise::layer_norm_backward(ctx, val(ctx.x), val(ctx.scale), g, sink),
        Op::Linear { x, w, b } => linalg::linear_backward(*x, *w, *b, val(*x), val(*w), g, sink),
        Op::Matmul { a, b } => linalg::matmul_backward(*a, *b, val(*a), val(*b), g, sink),
        Op::Mul { a, b } => {
            if sink.wants(*a) {
                let ga: Vec<E> = g.iter().zip(val(*b).data()).map(|(&g, &y)| g * y).collect();
                sink.add(*a, &ga);
            }
            if sink.wants(*b) {
                let gb: Vec<E> = g.iter().zip(val(*a).data()).map(|(&g, &x)| g * x).collect();
                sink.add(*b, &gb);
            }
        }
        Op::Add { a, b } => {
            sink.add(*a, g);
            sink.add(*b, g);
        }
        Op::Sum { x } => {
            if let Some(s) = sink.slot(*x) {
                s.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        Op::Reshape { x } => sink.add(*x, g),
        Op::Permute { x, perm } => shape::permute_backward(*x, perm, &node.value, g, sink),
        Op::Concat { xs, axis } => shape::concat_backward(xs, *axis, nodes, &node.value, g, sink),
        Op::CausalConv1d { x, w, b } => conv::causal_conv1d_backward(*x, *w, *b, val(*x), val(*w), g, sink),
        Op::SelectiveScan(ctx) => crate::ssm::scan_backward(ctx, nodes, g, sink),
        Op::DiceCe(ctx) => crate::train::loss::dice_ce_backward(ctx, g, sink),
    }
}

// Elementwise and reduction ops that need no dedicated kernel file.
impl<E: Element> Graph<E> {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let out = Tensor::from_vec(self.shape(a), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, rg, Op::Add { a, b }))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor::from_vec(self.shape(a), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, rg, Op::Mul { a, b }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.requires_grad(x);
        self.push(Tensor::scalar(s), rg, Op::Sum { x })
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            let axis = self
                .shape(a)
                .iter()
                .zip(self.shape(b))
                .position(|(x, y)| x != y)
                .map(|ax| format!(" (axis {ax})"))
                .unwrap_or_default();
            return Err(Error::dim(
                op,
                format!("shapes {:?} and {:?} differ{axis}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }
}
