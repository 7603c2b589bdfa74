use std::cell::{Cell, RefCell};
use std::fmt;

use super::kernels;
use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryOp {
    Sigmoid,
    Tanh,
    Relu,
    Log,
    Exp,
    Square,
    Sqrt,
    Neg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    /// Euclidean norm of the reduced cells. Backward is `x/‖x‖`, and zero at
    /// the origin.
    L2Norm,
}

/// Which axes a reduction collapses. Reduced axes are removed from the shape.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Axes {
    All,
    Only(Vec<usize>),
}

impl Axes {
    pub fn along(axis: usize) -> Self {
        Axes::Only(vec![axis])
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Binary {
        op: BinaryOp,
        a: usize,
        b: usize,
    },
    Unary {
        op: UnaryOp,
        x: usize,
    },
    /// y = x·scale + shift with constant scale/shift.
    Affine {
        x: usize,
        scale: f64,
    },
    Reduce {
        op: ReduceOp,
        x: usize,
        map: Vec<usize>,
        per_out: usize,
    },
    Reshape {
        x: usize,
    },
    Transpose {
        x: usize,
        rows: usize,
        cols: usize,
    },
    SliceRows {
        x: usize,
        offset: usize,
    },
    SliceCols {
        x: usize,
        start: usize,
        in_cols: usize,
    },
    ConcatRows {
        parts: Vec<usize>,
    },
    ConcatCols {
        parts: Vec<(usize, usize)>,
    },
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
    trainable_leaf: bool,
    grad: Option<Vec<f64>>,
}

/// A single-threaded tape of operations. Nodes are appended in evaluation
/// order, so the tape is already topologically sorted.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    freed: Cell<bool>,
}

impl fmt::Debug for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph")
            .field("nodes", &self.len())
            .field("freed", &self.freed.get())
            .finish()
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
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

fn is_scalar(shape: &[usize]) -> bool {
    shape.iter().product::<usize>() == 1
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_freed(&self) -> bool {
        self.freed.get()
    }

    fn push(&self, shape: Vec<usize>, value: Vec<f64>, op: Op, needs_grad: bool) -> Var<'_> {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
            trainable_leaf: false,
            grad: None,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn check_live(&self) -> Result<()> {
        if self.freed.get() {
            Err(Error::GraphFreed)
        } else {
            Ok(())
        }
    }

    /// Registers a leaf. It receives a gradient iff `t.requires_grad()`.
    pub fn leaf(&self, t: &Tensor) -> Var<'_> {
        let v = self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf,
            t.requires_grad(),
        );
        self.nodes.borrow_mut()[v.id].trainable_leaf = t.requires_grad();
        v
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var<'_>> {
        let t = Tensor::new(shape, data)?;
        Ok(self.leaf(&t))
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.leaf(&Tensor::scalar(value))
    }

    pub fn ones(&self, shape: &[usize]) -> Var<'_> {
        self.leaf(&Tensor::full(shape, 1.0))
    }

    /// Reverse pass from a scalar loss. The graph is freed afterwards; leaf
    /// gradients stay readable.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        self.run_backward(loss, false)
    }

    /// Reverse pass that keeps the graph so further passes can accumulate.
    pub fn backward_retain(&self, loss: Var<'_>) -> Result<()> {
        self.run_backward(loss, true)
    }

    fn run_backward(&self, loss: Var<'_>, retain: bool) -> Result<()> {
        assert!(std::ptr::eq(self, loss.graph), "loss belongs to another graph");
        self.check_live()?;
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if !is_scalar(&root.shape) {
            return Err(Error::NonScalarLoss(root.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.id + 1);
        grads.resize_with(loss.id + 1, || None);
        grads[loss.id] = Some(vec![1.0]);
        let mut leaf_grads = Vec::new();

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else {
                continue;
            };
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            propagate(&nodes, id, &g, &mut grads);
            if node.trainable_leaf {
                leaf_grads.push((id, g));
            }
        }
        drop(nodes);

        let mut nodes = self.nodes.borrow_mut();
        for (id, g) in leaf_grads {
            match &mut nodes[id].grad {
                Some(buf) => buf.iter_mut().zip(&g).for_each(|(b, x)| *b += x),
                slot @ None => *slot = Some(g),
            }
        }
        if !retain {
            for node in nodes.iter_mut() {
                if !matches!(node.op, Op::Leaf) {
                    node.value = Vec::new();
                    node.op = Op::Leaf;
                }
            }
            self.freed.set(true);
        }
        Ok(())
    }
}

fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], id: usize) -> Option<&'a mut Vec<f64>> {
    if !nodes[id].needs_grad {
        return None;
    }
    let len = nodes[id].value.len();
    Some(grads[id].get_or_insert_with(|| vec![0.0; len]))
}

fn propagate(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[id];
    match &node.op {
        Op::Leaf => {}
        &Op::MatMul { a, b, m, k, n } => {
            if let Some(ga) = slot(grads, nodes, a) {
                kernels::matmul_nt_acc(ga, g, &nodes[b].value, m, k, n);
            }
            if let Some(gb) = slot(grads, nodes, b) {
                kernels::matmul_tn_acc(gb, &nodes[a].value, g, m, k, n);
            }
        }
        &Op::Binary { op, a, b } => {
            let av = &nodes[a].value;
            let bv = &nodes[b].value;
            let out_len = node.value.len();
            let a_bcast = av.len() != out_len;
            let b_bcast = bv.len() != out_len;
            let at = |i: usize| if a_bcast { av[0] } else { av[i] };
            let bt = |i: usize| if b_bcast { bv[0] } else { bv[i] };
            if let Some(ga) = slot(grads, nodes, a) {
                for i in 0..out_len {
                    let d = match op {
                        BinaryOp::Add | BinaryOp::Sub => g[i],
                        BinaryOp::Mul => g[i] * bt(i),
                        BinaryOp::Div => g[i] / bt(i),
                    };
                    ga[if a_bcast { 0 } else { i }] += d;
                }
            }
            if let Some(gb) = slot(grads, nodes, b) {
                for i in 0..out_len {
                    let d = match op {
                        BinaryOp::Add => g[i],
                        BinaryOp::Sub => -g[i],
                        BinaryOp::Mul => g[i] * at(i),
                        BinaryOp::Div => -g[i] * at(i) / (bt(i) * bt(i)),
                    };
                    gb[if b_bcast { 0 } else { i }] += d;
                }
            }
        }
        &Op::Unary { op, x } => {
            let xv = &nodes[x].value;
            let y = &node.value;
            if let Some(gx) = slot(grads, nodes, x) {
                for i in 0..y.len() {
                    let d = match op {
                        UnaryOp::Sigmoid => y[i] * (1.0 - y[i]),
                        UnaryOp::Tanh => 1.0 - y[i] * y[i],
                        UnaryOp::Relu => {
                            if xv[i] > 0.0 {
                                1.0
                            } else {
                                0.0
                            }
                        }
                        UnaryOp::Log => 1.0 / xv[i],
                        UnaryOp::Exp => y[i],
                        UnaryOp::Square => 2.0 * xv[i],
                        UnaryOp::Sqrt => {
                            if y[i] > 0.0 {
                                0.5 / y[i]
                            } else {
                                0.0
                            }
                        }
                        UnaryOp::Neg => -1.0,
                    };
                    gx[i] += g[i] * d;
                }
            }
        }
        &Op::Affine { x, scale } => {
            if let Some(gx) = slot(grads, nodes, x) {
                gx.iter_mut().zip(g).for_each(|(o, gi)| *o += gi * scale);
            }
        }
        Op::Reduce {
            op,
            x,
            map,
            per_out,
        } => {
            let xv = &nodes[*x].value;
            let out = &node.value;
            if let Some(gx) = slot(grads, nodes, *x) {
                for (i, &o) in map.iter().enumerate() {
                    gx[i] += match op {
                        ReduceOp::Sum => g[o],
                        ReduceOp::Mean => g[o] / *per_out as f64,
                        ReduceOp::L2Norm => {
                            if out[o] > 0.0 {
                                g[o] * xv[i] / out[o]
                            } else {
                                0.0
                            }
                        }
                    };
                }
            }
        }
        &Op::Reshape { x } => {
            if let Some(gx) = slot(grads, nodes, x) {
                gx.iter_mut().zip(g).for_each(|(o, gi)| *o += gi);
            }
        }
        &Op::Transpose { x, rows, cols } => {
            if let Some(gx) = slot(grads, nodes, x) {
                // g has shape cols×rows
                for r in 0..rows {
                    for c in 0..cols {
                        gx[r * cols + c] += g[c * rows + r];
                    }
                }
            }
        }
        &Op::SliceRows { x, offset } => {
            if let Some(gx) = slot(grads, nodes, x) {
                gx[offset..offset + g.len()]
                    .iter_mut()
                    .zip(g)
                    .for_each(|(o, gi)| *o += gi);
            }
        }
        &Op::SliceCols { x, start, in_cols } => {
            let width = node.shape[1];
            if let Some(gx) = slot(grads, nodes, x) {
                for r in 0..node.shape[0] {
                    for c in 0..width {
                        gx[r * in_cols + start + c] += g[r * width + c];
                    }
                }
            }
        }
        Op::ConcatRows { parts } => {
            let mut offset = 0;
            for &p in parts {
                let len = nodes[p].value.len();
                if let Some(gp) = slot(grads, nodes, p) {
                    gp.iter_mut()
                        .zip(&g[offset..offset + len])
                        .for_each(|(o, gi)| *o += gi);
                }
                offset += len;
            }
        }
        Op::ConcatCols { parts } => {
            let rows = node.shape[0];
            let total = node.shape[1];
            let mut col0 = 0;
            for &(p, width) in parts {
                if let Some(gp) = slot(grads, nodes, p) {
                    for r in 0..rows {
                        for c in 0..width {
                            gp[r * width + c] += g[r * total + col0 + c];
                        }
                    }
                }
                col0 += width;
            }
        }
    }
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.graph.nodes.borrow()[self.id].value.len()
    }

    /// Copy of the forward value.
    pub fn value(&self) -> Tensor {
        let nodes = self.graph.nodes.borrow();
        let n = &nodes[self.id];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape matches value")
    }

    pub fn data(&self) -> Vec<f64> {
        self.graph.nodes.borrow()[self.id].value.clone()
    }

    /// Value of a single-element node.
    pub fn item(&self) -> Result<f64> {
        let nodes = self.graph.nodes.borrow();
        let n = &nodes[self.id];
        if n.value.len() == 1 {
            Ok(n.value[0])
        } else {
            Err(Error::shape("item", &n.shape, &[]))
        }
    }

    /// Accumulated gradient of a trainable leaf.
    pub fn grad(&self) -> Option<Tensor> {
        let nodes = self.graph.nodes.borrow();
        let n = &nodes[self.id];
        n.grad
            .as_ref()
            .map(|g| Tensor::new(n.shape.clone(), g.clone()).expect("grad shape matches"))
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].needs_grad
    }

    /// Same value, cut from the tape.
    pub fn detach(&self) -> Result<Var<'g>> {
        self.graph.check_live()?;
        let (shape, value) = {
            let nodes = self.graph.nodes.borrow();
            (nodes[self.id].shape.clone(), nodes[self.id].value.clone())
        };
        Ok(self.graph.push(shape, value, Op::Leaf, false))
    }

    fn same_graph(&self, other: &Var<'g>) {
        assert!(
            std::ptr::eq(self.graph, other.graph),
            "operands belong to different graphs"
        );
    }

    pub fn matmul(&self, other: &Var<'g>) -> Result<Var<'g>> {
        self.same_graph(other);
        self.graph.check_live()?;
        let (value, m, k, n, needs) = {
            let nodes = self.graph.nodes.borrow();
            let a = &nodes[self.id];
            let b = &nodes[other.id];
            if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
                return Err(Error::shape("matmul", &a.shape, &b.shape));
            }
            let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
            (
                kernels::matmul(&a.value, &b.value, m, k, n),
                m,
                k,
                n,
                a.needs_grad || b.needs_grad,
            )
        };
        Ok(self.graph.push(
            vec![m, n],
            value,
            Op::MatMul {
                a: self.id,
                b: other.id,
                m,
                k,
                n,
            },
            needs,
        ))
    }

    pub fn binary(&self, op: BinaryOp, other: &Var<'g>) -> Result<Var<'g>> {
        self.same_graph(other);
        self.graph.check_live()?;
        let (shape, value, needs) = {
            let nodes = self.graph.nodes.borrow();
            let a = &nodes[self.id];
            let b = &nodes[other.id];
            let shape = if a.shape == b.shape {
                a.shape.clone()
            } else if is_scalar(&b.shape) {
                a.shape.clone()
            } else if is_scalar(&a.shape) {
                b.shape.clone()
            } else {
                return Err(Error::shape("elementwise", &a.shape, &b.shape));
            };
            let len: usize = shape.iter().product();
            let at = |i: usize| if a.value.len() == len { a.value[i] } else { a.value[0] };
            let bt = |i: usize| if b.value.len() == len { b.value[i] } else { b.value[0] };
            if op == BinaryOp::Div && (0..b.value.len()).any(|i| b.value[i] == 0.0) {
                return Err(Error::Domain {
                    op: "div",
                    detail: "division by zero".into(),
                });
            }
            let value = (0..len)
                .map(|i| match op {
                    BinaryOp::Add => at(i) + bt(i),
                    BinaryOp::Sub => at(i) - bt(i),
                    BinaryOp::Mul => at(i) * bt(i),
                    BinaryOp::Div => at(i) / bt(i),
                })
                .collect();
            (shape, value, a.needs_grad || b.needs_grad)
        };
        Ok(self.graph.push(
            shape,
            value,
            Op::Binary {
                op,
                a: self.id,
                b: other.id,
            },
            needs,
        ))
    }

    pub fn add(&self, other: &Var<'g>) -> Result<Var<'g>> {
        self.binary(BinaryOp::Add, other)
    }

    pub fn sub(&self, other: &Var<'g>) -> Result<Var<'g>> {
        self.binary(BinaryOp::Sub, other)
    }

    pub fn mul(&self, other: &Var<'g>) -> Result<Var<'g>> {
        self.binary(BinaryOp::Mul, other)
    }

    pub fn div(&self, other: &Var<'g>) -> Result<Var<'g>> {
        self.binary(BinaryOp::Div, other)
    }

    pub fn unary(&self, op: UnaryOp) -> Result<Var<'g>> {
        self.graph.check_live()?;
        let (shape, value, needs) = {
            let nodes = self.graph.nodes.borrow();
            let x = &nodes[self.id];
            match op {
                UnaryOp::Log if x.value.iter().any(|&v| v <= 0.0) => {
                    return Err(Error::Domain {
                        op: "log",
                        detail: "non-positive argument".into(),
                    })
                }
                UnaryOp::Sqrt if x.value.iter().any(|&v| v < 0.0) => {
                    return Err(Error::Domain {
                        op: "sqrt",
                        detail: "negative argument".into(),
                    })
                }
                _ => {}
            }
            let f: fn(f64) -> f64 = match op {
                UnaryOp::Sigmoid => kernels::sigmoid,
                UnaryOp::Tanh => f64::tanh,
                UnaryOp::Relu => |v| if v > 0.0 { v } else { 0.0 },
                UnaryOp::Log => f64::ln,
                UnaryOp::Exp => f64::exp,
                UnaryOp::Square => |v| v * v,
                UnaryOp::Sqrt => f64::sqrt,
                UnaryOp::Neg => |v| -v,
            };
            (
                x.shape.clone(),
                x.value.iter().map(|&v| f(v)).collect(),
                x.needs_grad,
            )
        };
        Ok(self
            .graph
            .push(shape, value, Op::Unary { op, x: self.id }, needs))
    }

    pub fn sigmoid(&self) -> Result<Var<'g>> {
        self.unary(UnaryOp::Sigmoid)
    }

    pub fn tanh(&self) -> Result<Var<'g>> {
        self.unary(UnaryOp::Tanh)
    }

    pub fn relu(&self) -> Result<Var<'g>> {
        self.unary(UnaryOp::Relu)
    }

    pub fn log(&self) -> Result<Var<'g>> {
        self.unary(UnaryOp::Log)
    }

    pub fn exp(&self) -> Result<Var<'g>> {
        self.unary(UnaryOp::Exp)
    }

    pub fn square(&self) -> Result<Var<'g>> {
        self.unary(UnaryOp::Square)
    }

    pub fn sqrt(&self) -> Result<Var<'g>> {
        self.unary(UnaryOp::Sqrt)
    }

    pub fn neg(&self) -> Result<Var<'g>> {
        self.unary(UnaryOp::Neg)
    }

    /// x·scale + shift, both constants.
    pub fn affine(&self, scale: f64, shift: f64) -> Result<Var<'g>> {
        self.graph.check_live()?;
        let (shape, value, needs) = {
            let nodes = self.graph.nodes.borrow();
            let x = &nodes[self.id];
            (
                x.shape.clone(),
                x.value.iter().map(|v| v * scale + shift).collect(),
                x.needs_grad,
            )
        };
        Ok(self
            .graph
            .push(shape, value, Op::Affine { x: self.id, scale }, needs))
    }

    pub fn scale(&self, c: f64) -> Result<Var<'g>> {
        self.affine(c, 0.0)
    }

    pub fn reduce(&self, op: ReduceOp, axes: &Axes) -> Result<Var<'g>> {
        self.graph.check_live()?;
        let name = match op {
            ReduceOp::Sum => "sum",
            ReduceOp::Mean => "mean",
            ReduceOp::L2Norm => "l2norm",
        };
        let (out_shape, value, map, per_out, needs) = {
            let nodes = self.graph.nodes.borrow();
            let x = &nodes[self.id];
            let rank = x.shape.len();
            let mut reduced = vec![false; rank];
            match axes {
                Axes::All => reduced.iter_mut().for_each(|r| *r = true),
                Axes::Only(list) => {
                    for &axis in list {
                        if axis >= rank {
                            return Err(Error::InvalidAxis {
                                op: name,
                                axis,
                                rank,
                            });
                        }
                        reduced[axis] = true;
                    }
                }
            }
            let (map, out_shape, per_out) = kernels::reduction_map(&x.shape, &reduced);
            if per_out == 0 || x.value.is_empty() {
                return Err(Error::EmptyReduction(name));
            }
            let out_len: usize = out_shape.iter().product();
            let mut acc = vec![0.0; out_len];
            for (i, &o) in map.iter().enumerate() {
                let v = x.value[i];
                acc[o] += if op == ReduceOp::L2Norm { v * v } else { v };
            }
            match op {
                ReduceOp::Sum => {}
                ReduceOp::Mean => acc.iter_mut().for_each(|a| *a /= per_out as f64),
                ReduceOp::L2Norm => acc.iter_mut().for_each(|a| *a = a.sqrt()),
            }
            (out_shape, acc, map, per_out, x.needs_grad)
        };
        Ok(self.graph.push(
            out_shape,
            value,
            Op::Reduce {
                op,
                x: self.id,
                map,
                per_out,
            },
            needs,
        ))
    }

    pub fn sum(&self, axes: &Axes) -> Result<Var<'g>> {
        self.reduce(ReduceOp::Sum, axes)
    }

    pub fn mean(&self, axes: &Axes) -> Result<Var<'g>> {
        self.reduce(ReduceOp::Mean, axes)
    }

    pub fn l2norm(&self, axes: &Axes) -> Result<Var<'g>> {
        self.reduce(ReduceOp::L2Norm, axes)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'g>> {
        self.graph.check_live()?;
        let (value, needs) = {
            let nodes = self.graph.nodes.borrow();
            let x = &nodes[self.id];
            if shape.iter().product::<usize>() != x.value.len() {
                return Err(Error::shape("reshape", &x.shape, shape));
            }
            (x.value.clone(), x.needs_grad)
        };
        Ok(self
            .graph
            .push(shape.to_vec(), value, Op::Reshape { x: self.id }, needs))
    }

    pub fn transpose(&self) -> Result<Var<'g>> {
        self.graph.check_live()?;
        let (rows, cols, value, needs) = {
            let nodes = self.graph.nodes.borrow();
            let x = &nodes[self.id];
            if x.shape.len() != 2 {
                return Err(Error::shape("transpose", &x.shape, &[]));
            }
            let (r, c) = (x.shape[0], x.shape[1]);
            (r, c, kernels::transpose(&x.value, r, c), x.needs_grad)
        };
        Ok(self.graph.push(
            vec![cols, rows],
            value,
            Op::Transpose {
                x: self.id,
                rows,
                cols,
            },
            needs,
        ))
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Var<'g>> {
        self.graph.check_live()?;
        let (cols, value, needs) = {
            let nodes = self.graph.nodes.borrow();
            let x = &nodes[self.id];
            if x.shape.len() != 2 || start >= end || end > x.shape[0] {
                return Err(Error::shape("slice_rows", &x.shape, &[start, end]));
            }
            let cols = x.shape[1];
            (
                cols,
                x.value[start * cols..end * cols].to_vec(),
                x.needs_grad,
            )
        };
        Ok(self.graph.push(
            vec![end - start, cols],
            value,
            Op::SliceRows {
                x: self.id,
                offset: start * cols,
            },
            needs,
        ))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Var<'g>> {
        self.graph.check_live()?;
        let (rows, in_cols, value, needs) = {
            let nodes = self.graph.nodes.borrow();
            let x = &nodes[self.id];
            if x.shape.len() != 2 || start >= end || end > x.shape[1] {
                return Err(Error::shape("slice_cols", &x.shape, &[start, end]));
            }
            let (rows, cols) = (x.shape[0], x.shape[1]);
            let mut v = Vec::with_capacity(rows * (end - start));
            for r in 0..rows {
                v.extend_from_slice(&x.value[r * cols + start..r * cols + end]);
            }
            (rows, cols, v, x.needs_grad)
        };
        Ok(self.graph.push(
            vec![rows, end - start],
            value,
            Op::SliceCols {
                x: self.id,
                start,
                in_cols,
            },
            needs,
        ))
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn concat_rows(parts: &[Var<'g>]) -> Result<Var<'g>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat_rows of nothing".into()))?;
        let graph = first.graph;
        graph.check_live()?;
        let (shape, value, needs) = {
            let nodes = graph.nodes.borrow();
            let cols = nodes[first.id].shape.get(1).copied().unwrap_or(0);
            let mut rows = 0;
            let mut value = Vec::new();
            let mut needs = false;
            for p in parts {
                first.same_graph(p);
                let n = &nodes[p.id];
                if n.shape.len() != 2 || n.shape[1] != cols {
                    return Err(Error::shape("concat_rows", &nodes[first.id].shape, &n.shape));
                }
                rows += n.shape[0];
                value.extend_from_slice(&n.value);
                needs |= n.needs_grad;
            }
            (vec![rows, cols], value, needs)
        };
        Ok(graph.push(
            shape,
            value,
            Op::ConcatRows {
                parts: parts.iter().map(|p| p.id).collect(),
            },
            needs,
        ))
    }

    /// Places matrices with equal row counts side by side.
    pub fn concat_cols(parts: &[Var<'g>]) -> Result<Var<'g>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat_cols of nothing".into()))?;
        let graph = first.graph;
        graph.check_live()?;
        let (shape, value, widths, needs) = {
            let nodes = graph.nodes.borrow();
            let rows = nodes[first.id].shape.first().copied().unwrap_or(0);
            let mut widths = Vec::with_capacity(parts.len());
            let mut needs = false;
            for p in parts {
                first.same_graph(p);
                let n = &nodes[p.id];
                if n.shape.len() != 2 || n.shape[0] != rows {
                    return Err(Error::shape("concat_cols", &nodes[first.id].shape, &n.shape));
                }
                widths.push(n.shape[1]);
                needs |= n.needs_grad;
            }
            let total: usize = widths.iter().sum();
            let mut value = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for (p, &w) in parts.iter().zip(&widths) {
                    value.extend_from_slice(&nodes[p.id].value[r * w..(r + 1) * w]);
                }
            }
            (vec![rows, total], value, widths, needs)
        };
        Ok(graph.push(
            shape,
            value,
            Op::ConcatCols {
                parts: parts.iter().map(|p| p.id).zip(widths).collect(),
            },
            needs,
        ))
    }
}
