use std::cell::{Ref, RefCell};
use std::fmt;

use rand::{Rng, RngCore};

use super::Tensor;
use crate::error::{Error, Result};

/// Logit written into masked cells before normalizing.
pub const MASKED_LOGIT: f64 = -1e9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementwiseKind {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    /// Coordinatewise maximum over unmasked steps.
    Max,
    /// The row at the final unmasked step.
    Last,
}

enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Elementwise(usize, usize, ElementwiseKind),
    AddRow(usize, usize),
    ScaleRows(usize, Vec<f64>),
    MulConst(usize, Vec<f64>),
    Scale(usize, f64),
    Sigmoid(usize),
    Tanh(usize),
    Relu(usize),
    Concat { inputs: Vec<usize>, axis: usize },
    Slice { input: usize, axis: usize, start: usize },
    GatherRows { input: usize, index: Vec<Option<usize>> },
    Pick { input: usize, source: Vec<usize> },
    Reshape(usize),
    MaskedSoftmax(usize),
    Sum(usize),
    CrossEntropy { logits: usize, target: usize, probs: Vec<f64> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Elementwise(..) => "elementwise",
            Op::AddRow(..) => "add_row",
            Op::ScaleRows(..) => "scale_rows",
            Op::MulConst(..) => "dropout",
            Op::Scale(..) => "scale",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Relu(_) => "relu",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::GatherRows { .. } => "gather_rows",
            Op::Pick { .. } => "pool",
            Op::Reshape(_) => "reshape",
            Op::MaskedSoftmax(_) => "masked_softmax",
            Op::Sum(_) => "sum",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }

    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Elementwise(a, b, _) | Op::AddRow(a, b) => vec![*a, *b],
            Op::Transpose(a)
            | Op::ScaleRows(a, _)
            | Op::MulConst(a, _)
            | Op::Scale(a, _)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Relu(a)
            | Op::Reshape(a)
            | Op::MaskedSoftmax(a)
            | Op::Sum(a) => vec![*a],
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::Slice { input, .. } | Op::GatherRows { input, .. } | Op::Pick { input, .. } => {
                vec![*input]
            }
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A computation tape. Nodes are appended in evaluation order, which is a
/// topological order, so the backward pass is a single reverse sweep.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

impl fmt::Debug for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph").field("nodes", &self.len()).finish()
    }
}

/// Handle to a node on a [`Graph`].
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

/// Leaf gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `var`, or zeros of its shape when nothing flowed into it.
    pub fn get_or_zeros(&self, var: Var<'_>) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&var.shape()))
    }
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

    /// A trainable input: gradients are accumulated for it.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push_unchecked(value, Op::Leaf, true)
    }

    /// A constant input: no gradient flows into it.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_unchecked(value, Op::Leaf, false)
    }

    fn push_unchecked(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn push(&self, value: Tensor, op: Op) -> Result<Var<'_>> {
        if !value.is_finite() {
            return Err(Error::Numeric(format!(
                "{} produced a non-finite value",
                op.name()
            )));
        }
        let requires_grad = {
            let nodes = self.nodes.borrow();
            op.inputs().iter().any(|&i| nodes[i].requires_grad)
        };
        Ok(self.push_unchecked(value, op, requires_grad))
    }

    fn value(&self, id: usize) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        self.check_same(loss)?;
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![1.0]);

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                grads[id] = Some(g);
                continue;
            }
            backprop(&nodes, id, &g, &mut grads);
        }

        let grads = grads
            .into_iter()
            .zip(nodes.iter())
            .map(|(g, n)| match (&n.op, g) {
                (Op::Leaf, Some(g)) => Some(Tensor {
                    shape: n.value.shape().to_vec(),
                    data: g,
                }),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn check_same(&self, v: Var<'_>) -> Result<()> {
        if std::ptr::eq(self, v.graph) {
            Ok(())
        } else {
            Err(Error::Contract("variable belongs to another graph".into()))
        }
    }
}

fn slot<'a>(
    nodes: &[Node],
    grads: &'a mut [Option<Vec<f64>>],
    id: usize,
) -> Option<&'a mut Vec<f64>> {
    if !nodes[id].requires_grad {
        return None;
    }
    Some(grads[id].get_or_insert_with(|| vec![0.0; nodes[id].value.numel()]))
}

fn backprop(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out = &nodes[id].value;
    match &nodes[id].op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            let (m, k, n) = (av.rows(), av.cols(), bv.cols());
            if let Some(da) = slot(nodes, grads, *a) {
                // dA = G · Bᵀ
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let brow = &bv.data[p * n..(p + 1) * n];
                        da[i * k + p] += dot(grow, brow);
                    }
                }
            }
            if let Some(db) = slot(nodes, grads, *b) {
                // dB = Aᵀ · G
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let s = av.data[i * k + p];
                        if s != 0.0 {
                            axpy(s, grow, &mut db[p * n..(p + 1) * n]);
                        }
                    }
                }
            }
        }
        Op::Transpose(a) => {
            let (r, c) = (out.rows(), out.cols());
            if let Some(da) = slot(nodes, grads, *a) {
                for i in 0..r {
                    for j in 0..c {
                        da[j * r + i] += g[i * c + j];
                    }
                }
            }
        }
        Op::Elementwise(a, b, kind) => {
            let (av, bv) = (&nodes[*a].value.data, &nodes[*b].value.data);
            if let Some(da) = slot(nodes, grads, *a) {
                match kind {
                    ElementwiseKind::Add | ElementwiseKind::Sub => axpy(1.0, g, da),
                    ElementwiseKind::Mul => {
                        for ((d, gi), bi) in da.iter_mut().zip(g).zip(bv) {
                            *d += gi * bi;
                        }
                    }
                }
            }
            if let Some(db) = slot(nodes, grads, *b) {
                match kind {
                    ElementwiseKind::Add => axpy(1.0, g, db),
                    ElementwiseKind::Sub => axpy(-1.0, g, db),
                    ElementwiseKind::Mul => {
                        for ((d, gi), ai) in db.iter_mut().zip(g).zip(av) {
                            *d += gi * ai;
                        }
                    }
                }
            }
        }
        Op::AddRow(a, bias) => {
            if let Some(da) = slot(nodes, grads, *a) {
                axpy(1.0, g, da);
            }
            let n = nodes[*bias].value.numel();
            if let Some(db) = slot(nodes, grads, *bias) {
                for row in g.chunks(n) {
                    axpy(1.0, row, db);
                }
            }
        }
        Op::ScaleRows(a, scale) => {
            let cols = out.numel() / scale.len();
            if let Some(da) = slot(nodes, grads, *a) {
                for (r, &s) in scale.iter().enumerate() {
                    if s != 0.0 {
                        axpy(s, &g[r * cols..(r + 1) * cols], &mut da[r * cols..(r + 1) * cols]);
                    }
                }
            }
        }
        Op::MulConst(a, factors) => {
            if let Some(da) = slot(nodes, grads, *a) {
                for ((d, gi), f) in da.iter_mut().zip(g).zip(factors) {
                    *d += gi * f;
                }
            }
        }
        Op::Scale(a, s) => {
            if let Some(da) = slot(nodes, grads, *a) {
                axpy(*s, g, da);
            }
        }
        Op::Sigmoid(a) => {
            if let Some(da) = slot(nodes, grads, *a) {
                for ((d, gi), y) in da.iter_mut().zip(g).zip(&out.data) {
                    *d += gi * y * (1.0 - y);
                }
            }
        }
        Op::Tanh(a) => {
            if let Some(da) = slot(nodes, grads, *a) {
                for ((d, gi), y) in da.iter_mut().zip(g).zip(&out.data) {
                    *d += gi * (1.0 - y * y);
                }
            }
        }
        Op::Relu(a) => {
            let x = &nodes[*a].value.data;
            if let Some(da) = slot(nodes, grads, *a) {
                for ((d, gi), xi) in da.iter_mut().zip(g).zip(x) {
                    if *xi > 0.0 {
                        *d += gi;
                    }
                }
            }
        }
        Op::Concat { inputs, axis } => {
            let shape = out.shape();
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            let total = shape[*axis] * inner;
            let mut offset = 0;
            for &input in inputs {
                let width = nodes[input].value.shape()[*axis] * inner;
                if let Some(di) = slot(nodes, grads, input) {
                    for o in 0..outer {
                        let src = &g[o * total + offset..o * total + offset + width];
                        axpy(1.0, src, &mut di[o * width..(o + 1) * width]);
                    }
                }
                offset += width;
            }
        }
        Op::Slice { input, axis, start } => {
            let in_shape = nodes[*input].value.shape().to_vec();
            let outer: usize = in_shape[..*axis].iter().product();
            let inner: usize = in_shape[axis + 1..].iter().product();
            let in_total = in_shape[*axis] * inner;
            let width = out.shape()[*axis] * inner;
            if let Some(di) = slot(nodes, grads, *input) {
                for o in 0..outer {
                    let dst = &mut di[o * in_total + start * inner..][..width];
                    axpy(1.0, &g[o * width..(o + 1) * width], dst);
                }
            }
        }
        Op::GatherRows { input, index } => {
            let cols = out.cols();
            if let Some(di) = slot(nodes, grads, *input) {
                for (r, src) in index.iter().enumerate() {
                    if let Some(src) = src {
                        axpy(
                            1.0,
                            &g[r * cols..(r + 1) * cols],
                            &mut di[src * cols..(src + 1) * cols],
                        );
                    }
                }
            }
        }
        Op::Pick { input, source } => {
            if let Some(di) = slot(nodes, grads, *input) {
                for (gi, &s) in g.iter().zip(source) {
                    di[s] += gi;
                }
            }
        }
        Op::Reshape(a) => {
            if let Some(da) = slot(nodes, grads, *a) {
                axpy(1.0, g, da);
            }
        }
        Op::MaskedSoftmax(a) => {
            let n = *out.shape().last().unwrap();
            if let Some(da) = slot(nodes, grads, *a) {
                for ((grow, yrow), drow) in g.chunks(n).zip(out.data.chunks(n)).zip(da.chunks_mut(n))
                {
                    let inner = dot(grow, yrow);
                    for ((d, gi), y) in drow.iter_mut().zip(grow).zip(yrow) {
                        *d += y * (gi - inner);
                    }
                }
            }
        }
        Op::Sum(a) => {
            if let Some(da) = slot(nodes, grads, *a) {
                for d in da.iter_mut() {
                    *d += g[0];
                }
            }
        }
        Op::CrossEntropy {
            logits,
            target,
            probs,
        } => {
            if let Some(dl) = slot(nodes, grads, *logits) {
                for (i, (d, p)) in dl.iter_mut().zip(probs).enumerate() {
                    let onehot = if i == *target { 1.0 } else { 0.0 };
                    *d += g[0] * (p - onehot);
                }
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let s = a[i * k + p];
            if s != 0.0 {
                axpy(s, &b[p * n..(p + 1) * n], orow);
            }
        }
    }
    out
}

fn require_rank2(t: &Tensor, op: &str) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return Err(Error::Dimension(format!(
            "{op} expects a matrix, got shape {:?}",
            t.shape()
        )));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

fn check_mask(mask: &[f64], numel: usize, op: &str) -> Result<()> {
    if mask.len() != numel {
        return Err(Error::Dimension(format!(
            "{op}: mask has {} entries, expected {numel}",
            mask.len()
        )));
    }
    if mask.iter().any(|&m| m != 0.0 && m != 1.0) {
        return Err(Error::Contract(format!("{op}: mask must be binary")));
    }
    Ok(())
}

/// Concatenates tensors of equal rank along `axis`.
pub fn concat<'g>(parts: &[Var<'g>], axis: usize) -> Result<Var<'g>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
    let graph = first.graph;
    for p in parts {
        graph.check_same(*p)?;
    }
    let value = {
        let nodes = graph.nodes.borrow();
        let shapes: Vec<&[usize]> = parts.iter().map(|p| nodes[p.id].value.shape()).collect();
        let base = shapes[0];
        if axis >= base.len() {
            return Err(Error::Dimension(format!(
                "concat axis {axis} out of range for rank {}",
                base.len()
            )));
        }
        for s in &shapes {
            let same_side = s.len() == base.len()
                && s.iter()
                    .zip(base)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !same_side {
                return Err(Error::Dimension(format!(
                    "concat along axis {axis}: {s:?} does not match {base:?}"
                )));
            }
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut shape = base.to_vec();
        shape[axis] = shapes.iter().map(|s| s[axis]).sum();
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for (p, s) in parts.iter().zip(&shapes) {
                let width = s[axis] * inner;
                data.extend_from_slice(&nodes[p.id].value.data[o * width..(o + 1) * width]);
            }
        }
        Tensor { shape, data }
    };
    graph.push(
        value,
        Op::Concat {
            inputs: parts.iter().map(|p| p.id).collect(),
            axis,
        },
    )
}

/// Applies or skips dropout for a whole forward pass.
pub enum Dropout<'r> {
    Off,
    On { rate: f64, rng: &'r mut dyn RngCore },
}

impl Dropout<'_> {
    pub fn apply<'g>(&mut self, x: Var<'g>) -> Result<Var<'g>> {
        match self {
            Dropout::Off => Ok(x),
            Dropout::On { rate, rng } => x.dropout(*rate, true, *rng),
        }
    }

    pub fn is_training(&self) -> bool {
        matches!(self, Dropout::On { .. })
    }
}

impl<'g> Var<'g> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Tensor {
        self.graph.value(self.id).clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.value(self.id).shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    fn unary(&self, value: Tensor, op: Op) -> Result<Var<'g>> {
        self.graph.push(value, op)
    }

    fn same_graph(&self, other: Var<'g>) -> Result<()> {
        self.graph.check_same(other)
    }

    pub fn matmul(&self, other: Var<'g>) -> Result<Var<'g>> {
        self.same_graph(other)?;
        let value = {
            let (a, b) = (self.graph.value(self.id), self.graph.value(other.id));
            let (m, k) = require_rank2(&a, "matmul")?;
            let (k2, n) = require_rank2(&b, "matmul")?;
            if k != k2 {
                return Err(Error::Dimension(format!(
                    "matmul {:?} x {:?}: inner extents differ",
                    a.shape(),
                    b.shape()
                )));
            }
            Tensor {
                shape: vec![m, n],
                data: matmul_raw(&a.data, &b.data, m, k, n),
            }
        };
        self.graph.push(value, Op::MatMul(self.id, other.id))
    }

    pub fn transpose(&self) -> Result<Var<'g>> {
        let value = {
            let a = self.graph.value(self.id);
            let (r, c) = require_rank2(&a, "transpose")?;
            let mut data = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    data[j * r + i] = a.data[i * c + j];
                }
            }
            Tensor {
                shape: vec![c, r],
                data,
            }
        };
        self.unary(value, Op::Transpose(self.id))
    }

    pub fn elementwise(&self, other: Var<'g>, kind: ElementwiseKind) -> Result<Var<'g>> {
        self.same_graph(other)?;
        let value = {
            let (a, b) = (self.graph.value(self.id), self.graph.value(other.id));
            if a.shape() != b.shape() {
                return Err(Error::Dimension(format!(
                    "{kind:?}: shapes {:?} and {:?} differ",
                    a.shape(),
                    b.shape()
                )));
            }
            let f = match kind {
                ElementwiseKind::Add => |x: f64, y: f64| x + y,
                ElementwiseKind::Sub => |x: f64, y: f64| x - y,
                ElementwiseKind::Mul => |x: f64, y: f64| x * y,
            };
            Tensor {
                shape: a.shape.clone(),
                data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
            }
        };
        self.graph
            .push(value, Op::Elementwise(self.id, other.id, kind))
    }

    pub fn add(&self, other: Var<'g>) -> Result<Var<'g>> {
        self.elementwise(other, ElementwiseKind::Add)
    }

    pub fn sub(&self, other: Var<'g>) -> Result<Var<'g>> {
        self.elementwise(other, ElementwiseKind::Sub)
    }

    pub fn mul(&self, other: Var<'g>) -> Result<Var<'g>> {
        self.elementwise(other, ElementwiseKind::Mul)
    }

    /// Adds `bias` (n values) to every row of an `m x n` matrix.
    pub fn add_row(&self, bias: Var<'g>) -> Result<Var<'g>> {
        self.same_graph(bias)?;
        let value = {
            let (a, b) = (self.graph.value(self.id), self.graph.value(bias.id));
            let (_, n) = require_rank2(&a, "add_row")?;
            if b.numel() != n {
                return Err(Error::Dimension(format!(
                    "add_row: bias {:?} against {:?}",
                    b.shape(),
                    a.shape()
                )));
            }
            let mut data = a.data.clone();
            for row in data.chunks_mut(n) {
                axpy(1.0, &b.data, row);
            }
            Tensor {
                shape: a.shape.clone(),
                data,
            }
        };
        self.graph.push(value, Op::AddRow(self.id, bias.id))
    }

    /// Multiplies row `i` (along the first axis) by the constant `scale[i]`.
    pub fn scale_rows(&self, scale: &[f64]) -> Result<Var<'g>> {
        let value = {
            let a = self.graph.value(self.id);
            if scale.len() != a.shape()[0] {
                return Err(Error::Dimension(format!(
                    "scale_rows: {} factors for shape {:?}",
                    scale.len(),
                    a.shape()
                )));
            }
            let cols = a.numel() / scale.len();
            let mut data = a.data.clone();
            for (row, &s) in data.chunks_mut(cols).zip(scale) {
                for v in row {
                    *v *= s;
                }
            }
            Tensor {
                shape: a.shape.clone(),
                data,
            }
        };
        self.unary(value, Op::ScaleRows(self.id, scale.to_vec()))
    }

    pub fn scale(&self, factor: f64) -> Result<Var<'g>> {
        let value = self.map(|x| x * factor);
        self.unary(value, Op::Scale(self.id, factor))
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        let a = self.graph.value(self.id);
        Tensor {
            shape: a.shape.clone(),
            data: a.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn sigmoid(&self) -> Result<Var<'g>> {
        let value = self.map(|x| {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        });
        self.unary(value, Op::Sigmoid(self.id))
    }

    pub fn tanh(&self) -> Result<Var<'g>> {
        let value = self.map(f64::tanh);
        self.unary(value, Op::Tanh(self.id))
    }

    pub fn relu(&self) -> Result<Var<'g>> {
        let value = self.map(|x| x.max(0.0));
        self.unary(value, Op::Relu(self.id))
    }

    /// `len` entries along `axis` starting at `start`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Var<'g>> {
        let value = {
            let a = self.graph.value(self.id);
            let shape = a.shape();
            if axis >= shape.len() || len == 0 || start + len > shape[axis] {
                return Err(Error::Dimension(format!(
                    "slice [{start}, {}) on axis {axis} of {shape:?}",
                    start + len
                )));
            }
            let outer: usize = shape[..axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            let total = shape[axis] * inner;
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                data.extend_from_slice(&a.data[o * total + start * inner..][..len * inner]);
            }
            let mut out_shape = shape.to_vec();
            out_shape[axis] = len;
            Tensor {
                shape: out_shape,
                data,
            }
        };
        self.unary(
            value,
            Op::Slice {
                input: self.id,
                axis,
                start,
            },
        )
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Var<'g>> {
        self.slice(0, start, len)
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Var<'g>> {
        self.slice(1, start, len)
    }

    /// Row lookup: output row `r` is input row `index[r]`, or zeros for `None`.
    pub fn gather_rows(&self, index: &[Option<usize>]) -> Result<Var<'g>> {
        let value = {
            let a = self.graph.value(self.id);
            let (rows, cols) = require_rank2(&a, "gather_rows")?;
            if index.is_empty() {
                return Err(Error::Dimension("gather_rows with no rows".into()));
            }
            let mut data = vec![0.0; index.len() * cols];
            for (r, src) in index.iter().enumerate() {
                if let Some(src) = *src {
                    if src >= rows {
                        return Err(Error::Index(format!(
                            "row {src} out of range for {rows} rows"
                        )));
                    }
                    data[r * cols..(r + 1) * cols].copy_from_slice(a.row_slice(src));
                }
            }
            Tensor {
                shape: vec![index.len(), cols],
                data,
            }
        };
        self.unary(
            value,
            Op::GatherRows {
                input: self.id,
                index: index.to_vec(),
            },
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'g>> {
        let value = self.value().reshaped(shape)?;
        self.unary(value, Op::Reshape(self.id))
    }

    /// Softmax along the last axis restricted to cells where `mask == 1`.
    ///
    /// Masked logits are replaced by [`MASKED_LOGIT`] before normalizing and
    /// the masked outputs are then set to exactly zero.
    pub fn masked_softmax(&self, mask: &[f64]) -> Result<Var<'g>> {
        let value = {
            let a = self.graph.value(self.id);
            check_mask(mask, a.numel(), "masked_softmax")?;
            let n = *a.shape().last().unwrap();
            let mut data = vec![0.0; a.numel()];
            for (r, ((xrow, mrow), yrow)) in a
                .data
                .chunks(n)
                .zip(mask.chunks(n))
                .zip(data.chunks_mut(n))
                .enumerate()
            {
                if mrow.iter().all(|&m| m == 0.0) {
                    return Err(Error::Degenerate(format!(
                        "masked_softmax: row {r} is fully masked"
                    )));
                }
                let sub: Vec<f64> = xrow
                    .iter()
                    .zip(mrow)
                    .map(|(&x, &m)| if m > 0.0 { x } else { MASKED_LOGIT })
                    .collect();
                let max = sub.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for (y, s) in yrow.iter_mut().zip(&sub) {
                    *y = (s - max).exp();
                    total += *y;
                }
                for (y, m) in yrow.iter_mut().zip(mrow) {
                    *y = *y / total * m;
                }
            }
            Tensor {
                shape: a.shape.clone(),
                data,
            }
        };
        self.unary(value, Op::MaskedSoftmax(self.id))
    }

    /// Mask-aware pooling of `count` sequences of `len` steps stored as the
    /// rows of a `(count * len) x h` matrix. Returns `count x h`.
    pub fn pool_seqs(
        &self,
        count: usize,
        len: usize,
        mask: &[f64],
        kind: PoolKind,
    ) -> Result<Var<'g>> {
        let (value, source) = {
            let a = self.graph.value(self.id);
            let (rows, h) = require_rank2(&a, "pool")?;
            if rows != count * len {
                return Err(Error::Dimension(format!(
                    "pool: {rows} rows for {count} sequences of {len}"
                )));
            }
            check_mask(mask, rows, "pool")?;
            let mut data = Vec::with_capacity(count * h);
            let mut source = Vec::with_capacity(count * h);
            for s in 0..count {
                let steps: Vec<usize> = (0..len)
                    .map(|t| s * len + t)
                    .filter(|&r| mask[r] > 0.0)
                    .collect();
                if steps.is_empty() {
                    return Err(Error::Degenerate(format!(
                        "pool: sequence {s} has no unmasked step"
                    )));
                }
                for j in 0..h {
                    let row = match kind {
                        PoolKind::Last => *steps.last().unwrap(),
                        PoolKind::Max => {
                            let mut best = steps[0];
                            for &r in &steps[1..] {
                                if a.data[r * h + j] > a.data[best * h + j] {
                                    best = r;
                                }
                            }
                            best
                        }
                    };
                    data.push(a.data[row * h + j]);
                    source.push(row * h + j);
                }
            }
            (
                Tensor {
                    shape: vec![count, h],
                    data,
                },
                source,
            )
        };
        self.unary(
            value,
            Op::Pick {
                input: self.id,
                source,
            },
        )
    }

    /// Pools a single `t x h` sequence into a `1 x h` row.
    pub fn pool(&self, kind: PoolKind, mask: &[f64]) -> Result<Var<'g>> {
        let rows = self.shape()[0];
        self.pool_seqs(1, rows, mask, kind)
    }

    /// Inverted dropout: in training mode each unit is zeroed with
    /// probability `rate` and survivors are scaled by `1 / (1 - rate)`.
    pub fn dropout<R: Rng + ?Sized>(
        &self,
        rate: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var<'g>> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!(
                "dropout rate {rate} must lie in [0, 1)"
            )));
        }
        if !training || rate == 0.0 {
            return Ok(*self);
        }
        let keep = 1.0 / (1.0 - rate);
        let numel = self.graph.value(self.id).numel();
        let factors: Vec<f64> = (0..numel)
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let value = {
            let a = self.graph.value(self.id);
            Tensor {
                shape: a.shape.clone(),
                data: a.data.iter().zip(&factors).map(|(x, f)| x * f).collect(),
            }
        };
        self.unary(value, Op::MulConst(self.id, factors))
    }

    pub fn sum(&self) -> Result<Var<'g>> {
        let total = self.graph.value(self.id).data.iter().sum();
        self.unary(Tensor::scalar(total), Op::Sum(self.id))
    }

    /// `-log softmax(self)[target]` over all entries, as a scalar.
    pub fn cross_entropy(&self, target: usize) -> Result<Var<'g>> {
        let (loss, probs) = {
            let a = self.graph.value(self.id);
            if target >= a.numel() {
                return Err(Error::Index(format!(
                    "target {target} out of range for {} logits",
                    a.numel()
                )));
            }
            let max = a.data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = a.data.iter().map(|x| (x - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            let loss = total.ln() - (a.data[target] - max);
            (loss, exps.iter().map(|e| e / total).collect::<Vec<_>>())
        };
        self.unary(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: self.id,
                target,
                probs,
            },
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat<'g>(g: &'g Graph, rows: &[&[f64]]) -> Var<'g> {
        g.leaf(Tensor::from_rows(rows).unwrap())
    }

    #[test]
    fn matmul_by_hand() {
        let g = Graph::new();
        let a = mat(&g, &[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = mat(&g, &[&[1.0], &[1.0]]);
        assert_eq!(a.matmul(b).unwrap().value().data(), &[3.0, 7.0]);
        let i = g.constant(Tensor::eye(2));
        assert_eq!(i.matmul(i).unwrap().value(), Tensor::eye(2));
        assert!(matches!(b.matmul(b), Err(Error::Dimension(_))));
    }

    #[test]
    fn shared_input_accumulates() {
        let g = Graph::new();
        let a = mat(&g, &[&[1.5, -2.0], &[0.5, 3.0]]);
        let b = mat(&g, &[&[1.5, -2.0], &[0.5, 3.0]]);
        let aa = a.matmul(a).unwrap().sum().unwrap();
        let ab = a.matmul(b).unwrap().sum().unwrap();
        let grads = g.backward(aa).unwrap();
        let grad_shared = grads.get(a).unwrap().clone();
        let grads = g.backward(ab).unwrap();
        let expected: Vec<f64> = grads
            .get(a)
            .unwrap()
            .data()
            .iter()
            .zip(grads.get(b).unwrap().data())
            .map(|(x, y)| x + y)
            .collect();
        assert_eq!(grad_shared.data(), expected.as_slice());
    }

    #[test]
    fn elementwise_identities() {
        let g = Graph::new();
        let a = mat(&g, &[&[1.0, -2.0, 0.25]]);
        assert_eq!(a.sub(a).unwrap().value(), Tensor::zeros(&[1, 3]));
        let ones = g.constant(Tensor::full(&[1, 3], 1.0));
        assert_eq!(a.mul(ones).unwrap().value(), a.value());
        let wrong = g.constant(Tensor::zeros(&[3, 1]));
        assert!(matches!(a.add(wrong), Err(Error::Dimension(_))));
    }

    #[test]
    fn softmax_cases() {
        let g = Graph::new();
        let x = mat(&g, &[&[0.0, 0.0]]);
        assert_eq!(x.masked_softmax(&[1.0, 1.0]).unwrap().value().data(), &[0.5, 0.5]);
        let y = mat(&g, &[&[5.0, -100.0]]);
        assert_eq!(y.masked_softmax(&[1.0, 0.0]).unwrap().value().data(), &[1.0, 0.0]);
        assert!(matches!(
            y.masked_softmax(&[0.0, 0.0]),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn pool_by_hand() {
        let g = Graph::new();
        let x = mat(&g, &[&[1.0, 5.0], &[3.0, 2.0]]);
        let all = [1.0, 1.0];
        assert_eq!(x.pool(PoolKind::Max, &all).unwrap().value().data(), &[3.0, 5.0]);
        assert_eq!(x.pool(PoolKind::Last, &all).unwrap().value().data(), &[3.0, 2.0]);
        let single = mat(&g, &[&[4.0, -1.0]]);
        for kind in [PoolKind::Max, PoolKind::Last] {
            assert_eq!(single.pool(kind, &[1.0]).unwrap().value().data(), &[4.0, -1.0]);
        }
        assert!(matches!(
            x.pool(PoolKind::Max, &[0.0, 0.0]),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn concat_then_slice_round_trips() {
        let g = Graph::new();
        let parts: Vec<Var> = (0..4)
            .map(|i| g.leaf(Tensor::row(&[i as f64, 0.5 * i as f64, -1.0])))
            .collect();
        let joined = concat(&parts, 1).unwrap();
        assert_eq!(joined.shape(), vec![1, 12]);
        for (i, p) in parts.iter().enumerate() {
            assert_eq!(joined.slice_cols(3 * i, 3).unwrap().value(), p.value());
        }
        let tall = g.leaf(Tensor::zeros(&[2, 2]));
        assert!(matches!(
            concat(&[parts[0], tall], 1),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn dropout_modes() {
        let mut rng = rand::rngs::mock::StepRng::new(0, 1 << 60);
        let g = Graph::new();
        let x = mat(&g, &[&[1.0, 2.0, 3.0]]);
        assert_eq!(x.dropout(0.0, true, &mut rng).unwrap().id(), x.id());
        assert_eq!(x.dropout(0.2, false, &mut rng).unwrap().id(), x.id());
        assert!(matches!(
            x.dropout(1.0, true, &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn backward_needs_scalar() {
        let g = Graph::new();
        let x = mat(&g, &[&[1.0, 2.0]]);
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn non_finite_values_are_rejected() {
        let g = Graph::new();
        let x = mat(&g, &[&[1e300, 1.0]]);
        assert!(matches!(x.scale(1e300), Err(Error::Numeric(_))));
    }

    #[test]
    fn cross_entropy_uniform() {
        let g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[1, 20]));
        let loss = x.cross_entropy(3).unwrap().value().item();
        assert!((loss - 20f64.ln()).abs() < 1e-12);
        assert!(matches!(x.cross_entropy(20), Err(Error::Index(_))));
    }
}
