use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap};

use crate::error::{AutodiffError, Result};
use crate::kernels;
use crate::tensor::Tensor;

/// Index of a node inside its [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Source of leaf values for [`Graph::evaluate`].
pub trait Feed {
    fn lookup(&self, name: &str) -> Option<&Tensor>;
}

impl Feed for HashMap<String, Tensor> {
    fn lookup(&self, name: &str) -> Option<&Tensor> {
        self.get(name)
    }
}

impl Feed for BTreeMap<String, Tensor> {
    fn lookup(&self, name: &str) -> Option<&Tensor> {
        self.get(name)
    }
}

impl Feed for [(&str, Tensor)] {
    fn lookup(&self, name: &str) -> Option<&Tensor> {
        self.iter().find(|(n, _)| *n == name).map(|(_, t)| t)
    }
}

impl<const N: usize> Feed for [(&str, Tensor); N] {
    fn lookup(&self, name: &str) -> Option<&Tensor> {
        self.as_slice().lookup(name)
    }
}

impl<T: Feed + ?Sized> Feed for &T {
    fn lookup(&self, name: &str) -> Option<&Tensor> {
        (**self).lookup(name)
    }
}

/// Two feeds searched in order.
impl<A: Feed, B: Feed> Feed for (A, B) {
    fn lookup(&self, name: &str) -> Option<&Tensor> {
        self.0.lookup(name).or_else(|| self.1.lookup(name))
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf { name: String, trainable: bool },
    Constant(Tensor),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// `[n,m] + [m]`, the second operand broadcast over rows.
    AddRow(NodeId, NodeId),
    /// `[n,m] * [m]`, the second operand broadcast over rows.
    MulRow(NodeId, NodeId),
    /// `[n,m] * [n,1]`, the second operand broadcast over columns.
    MulCol(NodeId, NodeId),
    Scale(NodeId, f64),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Exp(NodeId),
    Log(NodeId, f64),
    Square(NodeId),
    Softmax(NodeId),
    Concat(Vec<NodeId>, usize),
    Slice { input: NodeId, axis: usize, start: usize, end: usize },
    Reshape(NodeId, Vec<usize>),
    Sum(NodeId),
    Mean(NodeId),
    SumRows(NodeId),
    BatchNormCols(NodeId, f64),
}

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::Constant(_) => "constant",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::MulCol(..) => "mul_col",
            Op::Scale(..) => "scale",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Exp(_) => "exp",
            Op::Log(..) => "log",
            Op::Square(_) => "square",
            Op::Softmax(_) => "softmax",
            Op::Concat(..) => "concat",
            Op::Slice { .. } => "slice",
            Op::Reshape(..) => "reshape",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SumRows(_) => "sum_rows",
            Op::BatchNormCols(..) => "batch_norm_cols",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf { .. } | Op::Constant(_) => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::MulRow(a, b)
            | Op::MulCol(a, b) => vec![*a, *b],
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Exp(a)
            | Op::Log(a, _)
            | Op::Square(a)
            | Op::Softmax(a)
            | Op::Slice { input: a, .. }
            | Op::Reshape(a, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SumRows(a)
            | Op::BatchNormCols(a, _) => vec![*a],
            Op::Concat(xs, _) => xs.clone(),
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    name: Option<String>,
}

/// A computation recorded as a list of nodes in topological order.
///
/// Nodes can only reference nodes created before them, so the insertion order
/// is always a valid evaluation order. Leaves are bound by name at
/// [`Graph::evaluate`] time; parameters are the trainable leaves.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    leaves: HashMap<String, NodeId>,
    names: HashMap<String, NodeId>,
}

/// Values of every node after a forward pass.
#[derive(Debug, Clone)]
pub struct Evaluation<'a> {
    values: Vec<Cow<'a, Tensor>>,
}

impl Evaluation<'_> {
    pub fn value(&self, node: NodeId) -> &Tensor {
        &self.values[node.0]
    }
}

/// Gradients of a scalar loss keyed by leaf name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    map: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor> {
        self.map
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op) -> NodeId {
        for input in op.inputs() {
            assert!(input.0 < self.nodes.len(), "node {} references a later node", self.nodes.len());
        }
        self.nodes.push(Node { op, name: None });
        NodeId(self.nodes.len() - 1)
    }

    fn leaf(&mut self, name: &str, trainable: bool) -> NodeId {
        if let Some(&id) = self.leaves.get(name) {
            match &self.nodes[id.0].op {
                Op::Leaf { trainable: t, .. } if *t == trainable => return id,
                _ => panic!("leaf `{name}` declared both as input and as parameter"),
            }
        }
        let id = self.push(Op::Leaf { name: name.to_string(), trainable });
        self.leaves.insert(name.to_string(), id);
        id
    }

    /// Non-trainable leaf bound from the feed.
    pub fn input(&mut self, name: &str) -> NodeId {
        self.leaf(name, false)
    }

    /// Trainable leaf bound from the feed.
    pub fn param(&mut self, name: &str) -> NodeId {
        self.leaf(name, true)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Constant(value))
    }

    /// Attaches an output name to an interior node.
    pub fn set_name(&mut self, node: NodeId, name: &str) {
        self.nodes[node.0].name = Some(name.to_string());
        self.names.insert(name.to_string(), node);
    }

    /// Looks up a leaf or a named node.
    pub fn node(&self, name: &str) -> Option<NodeId> {
        self.leaves.get(name).or_else(|| self.names.get(name)).copied()
    }

    /// Names of all trainable leaves, in creation order.
    pub fn param_names(&self) -> Vec<&str> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.op {
                Op::Leaf { name, trainable: true } => Some(name.as_str()),
                _ => None,
            })
            .collect()
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Transpose(a))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul(a, b))
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        self.push(Op::AddRow(a, row))
    }

    pub fn mul_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        self.push(Op::MulRow(a, row))
    }

    pub fn mul_col(&mut self, a: NodeId, col: NodeId) -> NodeId {
        self.push(Op::MulCol(a, col))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        self.push(Op::Scale(a, factor))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Tanh(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Exp(a))
    }

    /// `ln(a + eps)`.
    pub fn log(&mut self, a: NodeId, eps: f64) -> NodeId {
        self.push(Op::Log(a, eps))
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Square(a))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Softmax(a))
    }

    pub fn concat(&mut self, inputs: &[NodeId], axis: usize) -> NodeId {
        assert!(!inputs.is_empty(), "concat of nothing");
        self.push(Op::Concat(inputs.to_vec(), axis))
    }

    /// `a[.., start..end, ..]` along `axis`.
    pub fn slice(&mut self, a: NodeId, axis: usize, start: usize, end: usize) -> NodeId {
        self.push(Op::Slice { input: a, axis, start, end })
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> NodeId {
        self.push(Op::Reshape(a, shape.to_vec()))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Mean(a))
    }

    /// Column sums of a matrix, shape `[1, m]`.
    pub fn sum_rows(&mut self, a: NodeId) -> NodeId {
        self.push(Op::SumRows(a))
    }

    /// Standardizes each column of a matrix with the batch mean and biased
    /// variance of that column.
    pub fn batch_norm_cols(&mut self, a: NodeId, eps: f64) -> NodeId {
        self.push(Op::BatchNormCols(a, eps))
    }

    /// Runs the forward pass. Leaves borrow from `feed`.
    pub fn evaluate<'a, F: Feed + ?Sized>(&self, feed: &'a F) -> Result<Evaluation<'a>> {
        let mut values: Vec<Cow<'a, Tensor>> = Vec::with_capacity(self.nodes.len());
        for (idx, node) in self.nodes.iter().enumerate() {
            let value = match &node.op {
                Op::Leaf { name, .. } => Cow::Borrowed(
                    feed.lookup(name)
                        .ok_or_else(|| AutodiffError::UnboundLeaf { name: name.clone() })?,
                ),
                Op::Constant(t) => Cow::Owned(t.clone()),
                op => Cow::Owned(forward_op(idx, op, &values)?),
            };
            if !value.all_finite() {
                return Err(AutodiffError::NonFinite { node: idx, op: node.op.kind() });
            }
            values.push(value);
        }
        Ok(Evaluation { values })
    }

    /// Named outputs (interior nodes given a name with [`Graph::set_name`]).
    pub fn outputs(&self, eval: &Evaluation<'_>) -> BTreeMap<String, Tensor> {
        self.names
            .iter()
            .map(|(name, id)| (name.clone(), eval.value(*id).clone()))
            .collect()
    }

    /// Gradients of `loss` with respect to every parameter. Parameters the
    /// loss does not depend on get exact zeros.
    pub fn backprop(&self, eval: &Evaluation<'_>, loss: NodeId) -> Result<Gradients> {
        let names: Vec<&str> = self.param_names();
        self.backprop_wrt(eval, loss, &names)
    }

    /// Gradients of `loss` with respect to the named leaves (trainable or not).
    pub fn backprop_wrt(&self, eval: &Evaluation<'_>, loss: NodeId, wrt: &[&str]) -> Result<Gradients> {
        let loss_value = eval.value(loss);
        if !loss_value.is_scalar() {
            return Err(AutodiffError::LossNotScalar {
                node: loss.0,
                shape: loss_value.shape().to_vec(),
            });
        }
        let mut targets = Vec::with_capacity(wrt.len());
        for &name in wrt {
            match self.leaves.get(name) {
                Some(&id) => targets.push((name, id)),
                None if self.names.contains_key(name) => {
                    return Err(AutodiffError::NotALeaf { name: name.to_string() })
                }
                None => return Err(AutodiffError::UnknownName { name: name.to_string() }),
            }
        }

        let n = loss.0 + 1;
        let mut needs = vec![false; n];
        for &(_, id) in &targets {
            if id.0 < n {
                needs[id.0] = true;
            }
        }
        for idx in 0..n {
            if !needs[idx] {
                needs[idx] = self.nodes[idx].op.inputs().iter().any(|i| needs[i.0]);
            }
        }

        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        if needs[loss.0] {
            grads[loss.0] = Some(Tensor::new(loss_value.shape().to_vec(), vec![1.0]));
        }
        for idx in (0..n).rev() {
            if !needs[idx] {
                continue;
            }
            let op = &self.nodes[idx].op;
            if matches!(op, Op::Leaf { .. }) {
                continue;
            }
            let Some(upstream) = grads[idx].take() else { continue };
            backward_op(op, &upstream, eval.value(NodeId(idx)), &eval.values, &needs, &mut grads);
        }

        let map = targets
            .into_iter()
            .map(|(name, id)| {
                let grad = grads
                    .get_mut(id.0)
                    .and_then(Option::take)
                    .unwrap_or_else(|| Tensor::zeros(eval.value(id).shape()));
                (name.to_string(), grad)
            })
            .collect();
        Ok(Gradients { map })
    }
}

fn shape_err(node: usize, op: &Op, detail: String) -> AutodiffError {
    AutodiffError::ShapeMismatch { node, op: op.kind(), detail }
}

fn forward_op(idx: usize, op: &Op, values: &[Cow<'_, Tensor>]) -> Result<Tensor> {
    let v = |id: &NodeId| -> &Tensor { &values[id.0] };
    let unary = |a: &NodeId, f: &dyn Fn(f64) -> f64| v(a).map(f);
    let same_shape = |a: &Tensor, b: &Tensor| -> Result<()> {
        if a.shape() != b.shape() {
            return Err(shape_err(idx, op, format!("{:?} vs {:?}", a.shape(), b.shape())));
        }
        Ok(())
    };
    let out = match op {
        Op::Leaf { .. } | Op::Constant(_) => unreachable!("leaves are bound by evaluate"),
        Op::MatMul(a, b) => {
            let (a, b) = (v(a), v(b));
            if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[0] {
                return Err(shape_err(idx, op, format!("{:?} x {:?}", a.shape(), b.shape())));
            }
            let (n, k, m) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            Tensor::new(vec![n, m], kernels::matmul(a.data(), b.data(), n, k, m))
        }
        Op::Transpose(a) => {
            let a = v(a);
            if a.shape().len() != 2 {
                return Err(shape_err(idx, op, format!("expected matrix, got {:?}", a.shape())));
            }
            let (n, m) = (a.shape()[0], a.shape()[1]);
            Tensor::new(vec![m, n], kernels::transpose(a.data(), n, m))
        }
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
            let (a, b) = (v(a), v(b));
            same_shape(a, b)?;
            let f: fn(f64, f64) -> f64 = match op {
                Op::Add(..) => |x, y| x + y,
                Op::Sub(..) => |x, y| x - y,
                _ => |x, y| x * y,
            };
            let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(a.shape().to_vec(), data)
        }
        Op::AddRow(a, r) | Op::MulRow(a, r) => {
            let (a, r) = (v(a), v(r));
            if r.len() != a.cols() {
                return Err(shape_err(idx, op, format!("{:?} with row {:?}", a.shape(), r.shape())));
            }
            let mut out = a.clone();
            let add = matches!(op, Op::AddRow(..));
            for row in out.data_mut().chunks_exact_mut(r.len()) {
                for (x, y) in row.iter_mut().zip(r.data()) {
                    if add {
                        *x += y;
                    } else {
                        *x *= y;
                    }
                }
            }
            out
        }
        Op::MulCol(a, c) => {
            let (a, c) = (v(a), v(c));
            let (rows, cols) = a.as_matrix();
            if c.len() != rows {
                return Err(shape_err(idx, op, format!("{:?} with column {:?}", a.shape(), c.shape())));
            }
            let mut out = a.clone();
            for (row, &s) in out.data_mut().chunks_exact_mut(cols).zip(c.data()) {
                row.iter_mut().for_each(|x| *x *= s);
            }
            out
        }
        Op::Scale(a, s) => unary(a, &|x| x * s),
        Op::Sigmoid(a) => unary(a, &kernels::sigmoid),
        Op::Tanh(a) => unary(a, &f64::tanh),
        Op::Exp(a) => unary(a, &f64::exp),
        Op::Log(a, eps) => unary(a, &|x| (x + eps).ln()),
        Op::Square(a) => unary(a, &|x| x * x),
        Op::Softmax(a) => {
            let a = v(a);
            Tensor::new(a.shape().to_vec(), kernels::softmax_rows(a.data(), a.cols()))
        }
        Op::Concat(inputs, axis) => {
            let first = v(&inputs[0]);
            let rank = first.shape().len();
            if *axis >= rank {
                return Err(shape_err(idx, op, format!("axis {axis} out of range for {:?}", first.shape())));
            }
            let mut out_shape = first.shape().to_vec();
            out_shape[*axis] = 0;
            for i in inputs {
                let s = v(i).shape();
                let compatible = s.len() == rank
                    && s.iter().enumerate().all(|(d, &n)| d == *axis || n == first.shape()[d]);
                if !compatible {
                    return Err(shape_err(idx, op, format!("{:?} vs {:?} on axis {axis}", first.shape(), s)));
                }
                out_shape[*axis] += s[*axis];
            }
            let (outer, _, inner) = kernels::split_axis(&out_shape, *axis);
            let mut data = Vec::with_capacity(out_shape.iter().product());
            for o in 0..outer {
                for i in inputs {
                    let t = v(i);
                    let chunk = t.shape()[*axis] * inner;
                    data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
                }
            }
            Tensor::new(out_shape, data)
        }
        Op::Slice { input, axis, start, end } => {
            let a = v(input);
            if *axis >= a.shape().len() || start >= end || *end > a.shape()[*axis] {
                return Err(shape_err(idx, op, format!("{start}..{end} on axis {axis} of {:?}", a.shape())));
            }
            let (outer, len, inner) = kernels::split_axis(a.shape(), *axis);
            let mut data = Vec::with_capacity(outer * (end - start) * inner);
            for o in 0..outer {
                let base = o * len * inner;
                data.extend_from_slice(&a.data()[base + start * inner..base + end * inner]);
            }
            let mut shape = a.shape().to_vec();
            shape[*axis] = end - start;
            Tensor::new(shape, data)
        }
        Op::Reshape(a, shape) => {
            let a = v(a);
            if shape.iter().product::<usize>() != a.len() || shape.contains(&0) {
                return Err(shape_err(idx, op, format!("{:?} -> {:?}", a.shape(), shape)));
            }
            a.clone().reshaped(shape.clone())
        }
        Op::Sum(a) => Tensor::scalar(v(a).sum()),
        Op::Mean(a) => {
            let a = v(a);
            Tensor::scalar(a.sum() / a.len() as f64)
        }
        Op::SumRows(a) => {
            let a = v(a);
            let (_, cols) = a.as_matrix();
            let mut out = vec![0.0; cols];
            for row in a.data().chunks_exact(cols) {
                out.iter_mut().zip(row).for_each(|(o, x)| *o += x);
            }
            Tensor::new(vec![1, cols], out)
        }
        Op::BatchNormCols(a, eps) => {
            let a = v(a);
            let (rows, cols) = a.as_matrix();
            let (mean, var) = column_moments(a.data(), rows, cols);
            let mut out = a.clone();
            for row in out.data_mut().chunks_exact_mut(cols) {
                for (c, x) in row.iter_mut().enumerate() {
                    *x = (*x - mean[c]) / (var[c] + eps).sqrt();
                }
            }
            out
        }
    };
    Ok(out)
}

/// Per-column mean and biased variance of a row-major matrix.
pub fn column_moments(data: &[f64], rows: usize, cols: usize) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0; cols];
    for row in data.chunks_exact(cols) {
        mean.iter_mut().zip(row).for_each(|(m, x)| *m += x);
    }
    mean.iter_mut().for_each(|m| *m /= rows as f64);
    let mut var = vec![0.0; cols];
    for row in data.chunks_exact(cols) {
        for c in 0..cols {
            let d = row[c] - mean[c];
            var[c] += d * d;
        }
    }
    var.iter_mut().for_each(|s| *s /= rows as f64);
    (mean, var)
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn backward_op(
    op: &Op,
    up: &Tensor,
    out: &Tensor,
    values: &[Cow<'_, Tensor>],
    needs: &[bool],
    grads: &mut [Option<Tensor>],
) {
    let v = |id: &NodeId| -> &Tensor { &values[id.0] };
    let zip_map = |a: &Tensor, f: &dyn Fn(f64, f64) -> f64| {
        let data = up.data().iter().zip(a.data()).map(|(&g, &x)| f(g, x)).collect();
        Tensor::new(a.shape().to_vec(), data)
    };
    match op {
        Op::Leaf { .. } | Op::Constant(_) => {}
        Op::MatMul(a, b) => {
            let (av, bv) = (v(a), v(b));
            let (n, k, m) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
            if needs[a.0] {
                let g = kernels::matmul_nt(up.data(), bv.data(), n, m, k);
                accumulate(grads, *a, Tensor::new(vec![n, k], g));
            }
            if needs[b.0] {
                let g = kernels::matmul_tn(av.data(), up.data(), n, k, m);
                accumulate(grads, *b, Tensor::new(vec![k, m], g));
            }
        }
        Op::Transpose(a) => {
            let (m, n) = (up.shape()[0], up.shape()[1]);
            accumulate(grads, *a, Tensor::new(vec![n, m], kernels::transpose(up.data(), m, n)));
        }
        Op::Add(a, b) => {
            if needs[a.0] {
                accumulate(grads, *a, up.clone());
            }
            if needs[b.0] {
                accumulate(grads, *b, up.clone());
            }
        }
        Op::Sub(a, b) => {
            if needs[a.0] {
                accumulate(grads, *a, up.clone());
            }
            if needs[b.0] {
                accumulate(grads, *b, up.map(|g| -g));
            }
        }
        Op::Mul(a, b) => {
            if needs[a.0] {
                accumulate(grads, *a, zip_map(v(b), &|g, y| g * y));
            }
            if needs[b.0] {
                accumulate(grads, *b, zip_map(v(a), &|g, x| g * x));
            }
        }
        Op::AddRow(a, r) => {
            if needs[a.0] {
                accumulate(grads, *a, up.clone());
            }
            if needs[r.0] {
                let rv = v(r);
                let mut g = vec![0.0; rv.len()];
                for row in up.data().chunks_exact(rv.len()) {
                    g.iter_mut().zip(row).for_each(|(o, x)| *o += x);
                }
                accumulate(grads, *r, Tensor::new(rv.shape().to_vec(), g));
            }
        }
        Op::MulRow(a, r) => {
            let (av, rv) = (v(a), v(r));
            let cols = rv.len();
            if needs[a.0] {
                let mut g = up.clone();
                for row in g.data_mut().chunks_exact_mut(cols) {
                    row.iter_mut().zip(rv.data()).for_each(|(x, s)| *x *= s);
                }
                accumulate(grads, *a, g);
            }
            if needs[r.0] {
                let mut g = vec![0.0; cols];
                for (urow, arow) in up.data().chunks_exact(cols).zip(av.data().chunks_exact(cols)) {
                    for c in 0..cols {
                        g[c] += urow[c] * arow[c];
                    }
                }
                accumulate(grads, *r, Tensor::new(rv.shape().to_vec(), g));
            }
        }
        Op::MulCol(a, c) => {
            let (av, cv) = (v(a), v(c));
            let (_, cols) = av.as_matrix();
            if needs[a.0] {
                let mut g = up.clone();
                for (row, &s) in g.data_mut().chunks_exact_mut(cols).zip(cv.data()) {
                    row.iter_mut().for_each(|x| *x *= s);
                }
                accumulate(grads, *a, g);
            }
            if needs[c.0] {
                let g = up
                    .data()
                    .chunks_exact(cols)
                    .zip(av.data().chunks_exact(cols))
                    .map(|(u, x)| u.iter().zip(x).map(|(p, q)| p * q).sum())
                    .collect();
                accumulate(grads, *c, Tensor::new(cv.shape().to_vec(), g));
            }
        }
        Op::Scale(a, s) => accumulate(grads, *a, up.map(|g| g * s)),
        Op::Sigmoid(a) => accumulate(grads, *a, zip_map(out, &|g, y| g * y * (1.0 - y))),
        Op::Tanh(a) => accumulate(grads, *a, zip_map(out, &|g, y| g * (1.0 - y * y))),
        Op::Exp(a) => accumulate(grads, *a, zip_map(out, &|g, y| g * y)),
        Op::Log(a, eps) => accumulate(grads, *a, zip_map(v(a), &|g, x| g / (x + eps))),
        Op::Square(a) => accumulate(grads, *a, zip_map(v(a), &|g, x| 2.0 * g * x)),
        Op::Softmax(a) => {
            let cols = out.cols();
            let mut g = vec![0.0; out.len()];
            for ((gr, ur), yr) in g
                .chunks_exact_mut(cols)
                .zip(up.data().chunks_exact(cols))
                .zip(out.data().chunks_exact(cols))
            {
                let dot: f64 = ur.iter().zip(yr).map(|(u, y)| u * y).sum();
                for c in 0..cols {
                    gr[c] = yr[c] * (ur[c] - dot);
                }
            }
            accumulate(grads, *a, Tensor::new(out.shape().to_vec(), g));
        }
        Op::Concat(inputs, axis) => {
            let (outer, total, inner) = kernels::split_axis(out.shape(), *axis);
            let mut offset = 0;
            for i in inputs {
                let shape = v(i).shape();
                let len = shape[*axis];
                if needs[i.0] {
                    let mut data = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let base = o * total * inner + offset * inner;
                        data.extend_from_slice(&up.data()[base..base + len * inner]);
                    }
                    accumulate(grads, *i, Tensor::new(shape.to_vec(), data));
                }
                offset += len;
            }
        }
        Op::Slice { input, axis, start, end } => {
            let shape = v(input).shape();
            let (outer, len, inner) = kernels::split_axis(shape, *axis);
            let width = (end - start) * inner;
            let mut g = Tensor::zeros(shape);
            let data = g.data_mut();
            for o in 0..outer {
                let base = o * len * inner + start * inner;
                data[base..base + width].copy_from_slice(&up.data()[o * width..(o + 1) * width]);
            }
            accumulate(grads, *input, g);
        }
        Op::Reshape(a, _) => accumulate(grads, *a, up.clone().reshaped(v(a).shape().to_vec())),
        Op::Sum(a) => accumulate(grads, *a, Tensor::full(v(a).shape(), up.item())),
        Op::Mean(a) => {
            let shape = v(a).shape();
            let n = v(a).len() as f64;
            accumulate(grads, *a, Tensor::full(shape, up.item() / n));
        }
        Op::SumRows(a) => {
            let shape = v(a).shape();
            let cols = up.len();
            let mut g = Tensor::zeros(shape);
            for row in g.data_mut().chunks_exact_mut(cols) {
                row.copy_from_slice(up.data());
            }
            accumulate(grads, *a, g);
        }
        Op::BatchNormCols(a, eps) => {
            let av = v(a);
            let (rows, cols) = av.as_matrix();
            let (_, var) = column_moments(av.data(), rows, cols);
            let mut mean_up = vec![0.0; cols];
            let mut mean_up_y = vec![0.0; cols];
            for (ur, yr) in up.data().chunks_exact(cols).zip(out.data().chunks_exact(cols)) {
                for c in 0..cols {
                    mean_up[c] += ur[c];
                    mean_up_y[c] += ur[c] * yr[c];
                }
            }
            let n = rows as f64;
            mean_up.iter_mut().for_each(|x| *x /= n);
            mean_up_y.iter_mut().for_each(|x| *x /= n);
            let mut g = vec![0.0; av.len()];
            for ((gr, ur), yr) in g
                .chunks_exact_mut(cols)
                .zip(up.data().chunks_exact(cols))
                .zip(out.data().chunks_exact(cols))
            {
                for c in 0..cols {
                    gr[c] = (ur[c] - mean_up[c] - yr[c] * mean_up_y[c]) / (var[c] + eps).sqrt();
                }
            }
            accumulate(grads, *a, Tensor::new(av.shape().to_vec(), g));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn feed(pairs: &[(&str, Tensor)]) -> HashMap<String, Tensor> {
        pairs.iter().map(|(n, t)| (n.to_string(), t.clone())).collect()
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::new();
        let x = g.input("x");
        let y = g.softmax(x);
        let f = feed(&[("x", Tensor::zeros(&[1, 5]))]);
        let e = g.evaluate(&f).unwrap();
        for &p in e.value(y).data() {
            assert!((p - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn sigmoid_of_zero_is_half() {
        let mut g = Graph::new();
        let x = g.input("x");
        let y = g.sigmoid(x);
        let f = feed(&[("x", Tensor::scalar(0.0))]);
        assert_eq!(g.evaluate(&f).unwrap().value(y).item(), 0.5);
    }

    #[test]
    fn matmul_by_identity() {
        let mut g = Graph::new();
        let a = g.input("a");
        let i = g.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
        let c = g.matmul(a, i);
        g.set_name(c, "c");
        let m = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let f = feed(&[("a", m.clone())]);
        let e = g.evaluate(&f).unwrap();
        assert_eq!(g.outputs(&e)["c"], m);
    }

    #[test]
    fn shape_mismatch_names_the_node() {
        let mut g = Graph::new();
        let a = g.input("a");
        let b = g.input("b");
        let c = g.add(a, b);
        let f = feed(&[("a", Tensor::zeros(&[2, 2])), ("b", Tensor::zeros(&[2, 3]))]);
        match g.evaluate(&f) {
            Err(AutodiffError::ShapeMismatch { node, op, .. }) => {
                assert_eq!(node, c.index());
                assert_eq!(op, "add");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn non_finite_output_reports_node() {
        let mut g = Graph::new();
        let a = g.input("a");
        let l = g.log(a, 0.0);
        let f = feed(&[("a", Tensor::scalar(0.0))]);
        match g.evaluate(&f) {
            Err(AutodiffError::NonFinite { node, .. }) => assert_eq!(node, l.index()),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let w = g.param("w");
        let s = g.sum(w);
        let f = feed(&[("w", Tensor::new(vec![2, 3], vec![0.3, -1.0, 2.0, 5.0, 0.0, 1.0]))]);
        let e = g.evaluate(&f).unwrap();
        let grads = g.backprop(&e, s).unwrap();
        assert_eq!(grads.get("w").unwrap(), &Tensor::ones(&[2, 3]));
    }

    #[test]
    fn half_squared_norm_gradient_is_identity() {
        let mut g = Graph::new();
        let w = g.param("w");
        let sq = g.square(w);
        let s = g.sum(sq);
        let l = g.scale(s, 0.5);
        let w0 = Tensor::new(vec![4], vec![1.5, -2.0, 0.25, 3.0]);
        let f = feed(&[("w", w0.clone())]);
        let e = g.evaluate(&f).unwrap();
        assert_eq!(g.backprop(&e, l).unwrap().get("w").unwrap(), &w0);
    }

    #[test]
    fn unused_parameter_gets_exact_zeros() {
        let mut g = Graph::new();
        let w = g.param("w");
        let _unused = g.param("u");
        let s = g.sum(w);
        let f = feed(&[("w", Tensor::ones(&[2])), ("u", Tensor::ones(&[3]))]);
        let e = g.evaluate(&f).unwrap();
        let grads = g.backprop(&e, s).unwrap();
        assert_eq!(grads.get("u").unwrap(), &Tensor::zeros(&[3]));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let w = g.param("w");
        let y = g.tanh(w);
        let f = feed(&[("w", Tensor::ones(&[2]))]);
        let e = g.evaluate(&f).unwrap();
        assert!(matches!(g.backprop(&e, y), Err(AutodiffError::LossNotScalar { .. })));
    }

    #[test]
    fn gradient_of_interior_node_is_rejected() {
        let mut g = Graph::new();
        let w = g.param("w");
        let y = g.tanh(w);
        g.set_name(y, "hidden");
        let s = g.sum(y);
        let f = feed(&[("w", Tensor::ones(&[2]))]);
        let e = g.evaluate(&f).unwrap();
        assert!(matches!(
            g.backprop_wrt(&e, s, &["hidden"]),
            Err(AutodiffError::NotALeaf { .. })
        ));
    }

    #[test]
    fn unbound_leaf_is_reported() {
        let mut g = Graph::new();
        let _ = g.input("missing");
        let f: HashMap<String, Tensor> = HashMap::new();
        assert!(matches!(g.evaluate(&f), Err(AutodiffError::UnboundLeaf { .. })));
    }

    #[test]
    fn concat_and_slice_are_inverse() {
        let mut g = Graph::new();
        let a = g.input("a");
        let b = g.input("b");
        let c = g.concat(&[a, b], 1);
        let back = g.slice(c, 1, 2, 5);
        let f = feed(&[
            ("a", Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0])),
            ("b", Tensor::new(vec![2, 3], vec![5.0, 6.0, 7.0, 8.0, 9.0, 10.0])),
        ]);
        let e = g.evaluate(&f).unwrap();
        assert_eq!(e.value(c).data(), &[1.0, 2.0, 5.0, 6.0, 7.0, 3.0, 4.0, 8.0, 9.0, 10.0]);
        assert_eq!(e.value(back), f.get("b").unwrap());
    }
}
