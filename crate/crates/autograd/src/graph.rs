//! The recording graph, differentiable variables, and reverse-mode gradients.
//!
//! Every backward rule is itself written in terms of graph ops, so calling
//! [`Graph::grad`] with `create_graph = true` records the gradient computation
//! and the result can be differentiated again.

use std::cell::{Cell, RefCell};
use std::fmt;
use std::ops;
use std::rc::Rc;

use crate::tensor::{self, ConvGeometry, Tensor};

#[derive(Clone, Copy, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    AddScalar(usize),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    Relu(usize),
    SumTo(usize),
    BroadcastTo(usize),
    Reshape(usize),
    MatMul(usize, usize),
    Transpose(usize),
    Narrow { src: usize, axis: usize, start: usize },
    Pad { src: usize, axis: usize, start: usize },
    Conv { x: usize, w: usize, geom: ConvGeometry },
    ConvGradInput { gy: usize, w: usize, geom: ConvGeometry },
    ConvGradWeight { x: usize, gy: usize, geom: ConvGeometry },
}

impl Op {
    fn parents(&self) -> ([usize; 2], usize) {
        use Op::*;
        match *self {
            Leaf => ([0, 0], 0),
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | MatMul(a, b) => ([a, b], 2),
            Conv { x, w, .. } => ([x, w], 2),
            ConvGradInput { gy, w, .. } => ([gy, w], 2),
            ConvGradWeight { x, gy, .. } => ([x, gy], 2),
            Neg(a) | Scale(a, _) | AddScalar(a) | Exp(a) | Log(a) | Sqrt(a) | Relu(a) | SumTo(a)
            | BroadcastTo(a) | Reshape(a) | Transpose(a) => ([a, 0], 1),
            Narrow { src, .. } | Pad { src, .. } => ([src, 0], 1),
        }
    }
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// An append-only tape of tensor operations.
///
/// Node ids increase in creation order, which is a valid topological order.
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    recording: Cell<bool>,
}

impl Default for Graph {
    fn default() -> Self {
        Graph::new()
    }
}

impl fmt::Debug for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Graph({} nodes)", self.len())
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}({:?})", self.id, self.value())
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            recording: Cell::new(true),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A leaf that receives gradients.
    pub fn param(&self, value: impl Into<Rc<Tensor>>) -> Var<'_> {
        self.leaf(value.into(), true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&self, value: impl Into<Rc<Tensor>>) -> Var<'_> {
        self.leaf(value.into(), false)
    }

    fn leaf(&self, value: Rc<Tensor>, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    /// Runs `f` with recording disabled: every op produces a constant leaf.
    pub fn no_grad<R>(&self, f: impl FnOnce() -> R) -> R {
        let prev = self.recording.replace(false);
        let out = f();
        self.recording.set(prev);
        out
    }

    fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        let (ps, n) = op.parents();
        let requires_grad = self.recording.get() && {
            let nodes = self.nodes.borrow();
            ps[..n].iter().any(|&p| nodes[p].requires_grad)
        };
        let op = if requires_grad { op } else { Op::Leaf };
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn var(&self, id: usize) -> Var<'_> {
        Var { graph: self, id }
    }

    /// Gradients of the scalar `output` with respect to each of `wrt`.
    ///
    /// With `create_graph` the returned gradients are themselves recorded and
    /// differentiable; otherwise they are constant leaves. Inputs that
    /// `output` does not depend on get zero gradients.
    pub fn grad<'g>(&'g self, output: Var<'g>, wrt: &[Var<'g>], create_graph: bool) -> Vec<Var<'g>> {
        assert!(std::ptr::eq(output.graph, self), "output belongs to another graph");
        assert_eq!(output.value().len(), 1, "grad() needs a scalar output");
        let out = output.id;
        let lo = wrt.iter().map(|v| v.id).min().unwrap_or(out).min(out);

        // Which nodes in [lo, out] lie on a path from some wrt node.
        let mut dep = vec![false; out + 1 - lo];
        {
            let nodes = self.nodes.borrow();
            for v in wrt {
                if v.id <= out && nodes[v.id].requires_grad {
                    dep[v.id - lo] = true;
                }
            }
            for i in lo..=out {
                if dep[i - lo] || !nodes[i].requires_grad {
                    continue;
                }
                let (ps, n) = nodes[i].op.parents();
                dep[i - lo] = ps[..n].iter().any(|&p| p >= lo && dep[p - lo]);
            }
        }

        let zeros = |v: &Var<'g>| self.constant(Tensor::zeros(v.value().shape()));
        if !dep[out - lo] {
            return wrt.iter().map(zeros).collect();
        }

        let prev = self.recording.replace(create_graph);
        let mut grads: Vec<Option<Var<'g>>> = vec![None; out + 1 - lo];
        grads[out - lo] = Some(self.constant(Tensor::ones(output.value().shape())));
        let mut found: Vec<Option<Var<'g>>> = vec![None; wrt.len()];

        for i in (lo..=out).rev() {
            let Some(g) = grads[i - lo] else { continue };
            for (slot, v) in found.iter_mut().zip(wrt) {
                if v.id == i {
                    *slot = Some(g);
                }
            }
            if wrt.iter().all(|v| v.id >= i) {
                // Nothing below i can reach a wrt node.
                break;
            }
            let op = self.nodes.borrow()[i].op;
            let need = |p: usize| p >= lo && dep[p - lo];
            for (p, contrib) in self.backward(i, op, g, need) {
                let slot = &mut grads[p - lo];
                *slot = Some(match *slot {
                    Some(acc) => acc + contrib,
                    None => contrib,
                });
            }
        }
        self.recording.set(prev);
        found
            .into_iter()
            .zip(wrt)
            .map(|(g, v)| g.unwrap_or_else(|| zeros(v)))
            .collect()
    }

    /// Parent contributions of one node given its output gradient `g`,
    /// computed only for parents where `need` holds.
    fn backward<'g>(&'g self, id: usize, op: Op, g: Var<'g>, need: impl Fn(usize) -> bool) -> Vec<(usize, Var<'g>)> {
        use Op::*;
        let v = |i| self.var(i);
        let mut out = Vec::with_capacity(2);
        let mut emit = |p: usize, f: &dyn Fn() -> Var<'g>| {
            if need(p) {
                out.push((p, f()));
            }
        };
        match op {
            Leaf => {}
            Add(a, b) => {
                emit(a, &|| g.sum_to(&v(a).shape()));
                emit(b, &|| g.sum_to(&v(b).shape()));
            }
            Sub(a, b) => {
                emit(a, &|| g.sum_to(&v(a).shape()));
                emit(b, &|| (-g).sum_to(&v(b).shape()));
            }
            Mul(a, b) => {
                emit(a, &|| (g * v(b)).sum_to(&v(a).shape()));
                emit(b, &|| (g * v(a)).sum_to(&v(b).shape()));
            }
            Div(a, b) => {
                emit(a, &|| (g / v(b)).sum_to(&v(a).shape()));
                emit(b, &|| (-(g * v(a)) / (v(b) * v(b))).sum_to(&v(b).shape()));
            }
            Neg(a) => emit(a, &|| -g),
            Scale(a, c) => emit(a, &|| g * c),
            AddScalar(a) => emit(a, &|| g),
            Exp(a) => emit(a, &|| g * v(id)),
            Log(a) => emit(a, &|| g / v(a)),
            Sqrt(a) => emit(a, &|| g * 0.5 / v(id)),
            Relu(a) => emit(a, &|| {
                let mask = self.constant(v(a).value().map(|x| if x > 0.0 { 1.0 } else { 0.0 }));
                g * mask
            }),
            SumTo(a) => emit(a, &|| g.broadcast_to(&v(a).shape())),
            BroadcastTo(a) => emit(a, &|| g.sum_to(&v(a).shape())),
            Reshape(a) => emit(a, &|| g.reshape(&v(a).shape())),
            MatMul(a, b) => {
                emit(a, &|| g.matmul(v(b).t()));
                emit(b, &|| v(a).t().matmul(g));
            }
            Transpose(a) => emit(a, &|| g.t()),
            Narrow { src, axis, start } => emit(src, &|| g.pad(axis, start, v(src).shape()[axis])),
            Pad { src, axis, start } => emit(src, &|| g.narrow(axis, start, v(src).shape()[axis])),
            Conv { x, w, geom } => {
                emit(x, &|| {
                    let xs = v(x).shape();
                    g.conv2d_grad_input(v(w), (xs[2], xs[3]), geom)
                });
                emit(w, &|| {
                    let ws = v(w).shape();
                    v(x).conv2d_grad_weight(g, (ws[2], ws[3]), geom)
                });
            }
            ConvGradInput { gy, w, geom } => {
                emit(gy, &|| g.conv2d(v(w), geom));
                emit(w, &|| {
                    let ws = v(w).shape();
                    g.conv2d_grad_weight(v(gy), (ws[2], ws[3]), geom)
                });
            }
            ConvGradWeight { x, gy, geom } => {
                emit(x, &|| {
                    let xs = v(x).shape();
                    v(gy).conv2d_grad_input(g, (xs[2], xs[3]), geom)
                });
                emit(gy, &|| v(x).conv2d(g, geom));
            }
        }
        out
    }
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    /// Scalar value of a one-element variable.
    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    /// Same value, cut from the graph.
    pub fn detach(self) -> Var<'g> {
        self.graph.constant(self.value())
    }

    fn unary(self, op: Op, f: impl Fn(&Tensor) -> Tensor) -> Var<'g> {
        let value = f(&self.value());
        self.graph.push(value, op)
    }

    fn binary(self, other: Var<'g>, op: Op, f: impl Fn(&Tensor, &Tensor) -> Tensor) -> Var<'g> {
        assert!(std::ptr::eq(self.graph, other.graph), "vars from different graphs");
        let value = f(&self.value(), &other.value());
        self.graph.push(value, op)
    }

    pub fn exp(self) -> Var<'g> {
        self.unary(Op::Exp(self.id), |t| t.map(f64::exp))
    }

    pub fn ln(self) -> Var<'g> {
        self.unary(Op::Log(self.id), |t| t.map(f64::ln))
    }

    pub fn sqrt(self) -> Var<'g> {
        self.unary(Op::Sqrt(self.id), |t| t.map(f64::sqrt))
    }

    pub fn relu(self) -> Var<'g> {
        self.unary(Op::Relu(self.id), |t| t.map(|x| x.max(0.0)))
    }

    pub fn square(self) -> Var<'g> {
        self * self
    }

    pub fn add_scalar(self, c: f64) -> Var<'g> {
        self.unary(Op::AddScalar(self.id), |t| t.map(|x| x + c))
    }

    pub fn sum_to(self, shape: &[usize]) -> Var<'g> {
        if self.shape() == shape {
            return self;
        }
        self.unary(Op::SumTo(self.id), |t| t.sum_to(shape))
    }

    pub fn broadcast_to(self, shape: &[usize]) -> Var<'g> {
        if self.shape() == shape {
            return self;
        }
        self.unary(Op::BroadcastTo(self.id), |t| t.broadcast_to(shape))
    }

    /// Sum of all entries, as a rank-0 scalar.
    pub fn sum(self) -> Var<'g> {
        self.sum_to(&[])
    }

    /// Sum over `axis`, keeping it with size 1.
    pub fn sum_axis_keep(self, axis: usize) -> Var<'g> {
        let mut s = self.shape();
        s[axis] = 1;
        self.sum_to(&s)
    }

    pub fn mean(self) -> Var<'g> {
        let n = self.value().len() as f64;
        self.sum() * (1.0 / n)
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'g> {
        if self.shape() == shape {
            return self;
        }
        self.unary(Op::Reshape(self.id), |t| t.reshape(shape))
    }

    pub fn matmul(self, other: Var<'g>) -> Var<'g> {
        self.binary(other, Op::MatMul(self.id, other.id), Tensor::matmul)
    }

    /// Matrix transpose.
    pub fn t(self) -> Var<'g> {
        self.unary(Op::Transpose(self.id), Tensor::transpose2)
    }

    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Var<'g> {
        if start == 0 && self.shape()[axis] == len {
            return self;
        }
        self.unary(Op::Narrow { src: self.id, axis, start }, |t| t.narrow(axis, start, len))
    }

    /// Embed into zeros of length `full` along `axis` at `start`.
    pub fn pad(self, axis: usize, start: usize, full: usize) -> Var<'g> {
        if start == 0 && self.shape()[axis] == full {
            return self;
        }
        self.unary(Op::Pad { src: self.id, axis, start }, |t| t.pad_axis(axis, start, full))
    }

    pub fn conv2d(self, weight: Var<'g>, geom: ConvGeometry) -> Var<'g> {
        self.binary(weight, Op::Conv { x: self.id, w: weight.id, geom }, |x, w| tensor::conv2d(x, w, geom))
    }

    /// `self` is the output gradient; result has the conv input's shape.
    pub fn conv2d_grad_input(self, weight: Var<'g>, input_hw: (usize, usize), geom: ConvGeometry) -> Var<'g> {
        self.binary(weight, Op::ConvGradInput { gy: self.id, w: weight.id, geom }, |gy, w| {
            tensor::conv2d_grad_input(gy, w, input_hw, geom)
        })
    }

    /// `self` is the conv input; result has the weight's shape.
    pub fn conv2d_grad_weight(self, gy: Var<'g>, kernel_hw: (usize, usize), geom: ConvGeometry) -> Var<'g> {
        self.binary(gy, Op::ConvGradWeight { x: self.id, gy: gy.id, geom }, |x, gy| {
            tensor::conv2d_grad_weight(x, gy, kernel_hw, geom)
        })
    }

    /// Multiply by a constant tensor (broadcast allowed).
    pub fn mul_const(self, c: Tensor) -> Var<'g> {
        self * self.graph.constant(c)
    }

    /// Max along `axis` (kept with size 1). Gradient flows to the first maximiser.
    pub fn max_axis_keep(self, axis: usize) -> Var<'g> {
        self.select_axis_keep(axis, |cand, best| cand > best)
    }

    /// Min along `axis` (kept with size 1). Gradient flows to the first minimiser.
    pub fn min_axis_keep(self, axis: usize) -> Var<'g> {
        self.select_axis_keep(axis, |cand, best| cand < best)
    }

    fn select_axis_keep(self, axis: usize, better: impl Fn(f64, f64) -> bool) -> Var<'g> {
        let value = self.value();
        let shape = value.shape();
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut mask = vec![0.0; value.len()];
        let data = value.data();
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * len + k) * inner + i;
                let mut best = 0;
                for k in 1..len {
                    if better(data[at(k)], data[at(best)]) {
                        best = k;
                    }
                }
                mask[at(best)] = 1.0;
            }
        }
        let mask = Tensor::new(shape.to_vec(), mask);
        self.mul_const(mask).sum_axis_keep(axis)
    }
}

macro_rules! binop {
    ($trait:ident, $method:ident, $op:ident, $f:expr) => {
        impl<'g> ops::$trait<Var<'g>> for Var<'g> {
            type Output = Var<'g>;
            fn $method(self, rhs: Var<'g>) -> Var<'g> {
                self.binary(rhs, Op::$op(self.id, rhs.id), |a, b| a.zip_broadcast(b, $f))
            }
        }
    };
}

binop!(Add, add, Add, |a, b| a + b);
binop!(Sub, sub, Sub, |a, b| a - b);
binop!(Mul, mul, Mul, |a, b| a * b);
binop!(Div, div, Div, |a, b| a / b);

impl<'g> ops::Neg for Var<'g> {
    type Output = Var<'g>;
    fn neg(self) -> Var<'g> {
        self.unary(Op::Neg(self.id), |t| t.map(|x| -x))
    }
}

impl<'g> ops::Mul<f64> for Var<'g> {
    type Output = Var<'g>;
    fn mul(self, c: f64) -> Var<'g> {
        self.unary(Op::Scale(self.id, c), |t| t.map(|x| x * c))
    }
}

impl<'g> ops::Div<f64> for Var<'g> {
    type Output = Var<'g>;
    fn div(self, c: f64) -> Var<'g> {
        self * (1.0 / c)
    }
}

impl<'g> ops::Add<f64> for Var<'g> {
    type Output = Var<'g>;
    fn add(self, c: f64) -> Var<'g> {
        self.add_scalar(c)
    }
}

impl<'g> ops::Sub<f64> for Var<'g> {
    type Output = Var<'g>;
    fn sub(self, c: f64) -> Var<'g> {
        self.add_scalar(-c)
    }
}
