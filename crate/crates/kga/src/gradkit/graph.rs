use crate::error::{Error, Result};
use crate::gradkit::array::DenseArray;
use std::collections::BTreeMap;

/// Handle to a node in a [`Graph`].
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

/// Named parameter collection. Ordered by name so that iteration, flattening
/// and checkpoint layout are deterministic.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamSet {
    map: BTreeMap<String, DenseArray>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: DenseArray) {
        self.map.insert(name.to_string(), value);
    }

    pub fn get(&self, name: &str) -> Option<&DenseArray> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut DenseArray> {
        self.map.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &DenseArray)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut DenseArray)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total number of scalar entries across all parameters.
    pub fn value_count(&self) -> usize {
        self.map.values().map(|a| a.len()).sum()
    }
}

/// Gradients per parameter name, as produced by [`backward`].
pub type GradMap = BTreeMap<String, DenseArray>;

/// Named input bindings for a forward pass.
#[derive(Clone, Debug, Default)]
pub struct Inputs {
    map: BTreeMap<String, DenseArray>,
}

impl Inputs {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bind(mut self, name: &str, value: DenseArray) -> Self {
        self.map.insert(name.to_string(), value);
        self
    }

    pub fn insert(&mut self, name: &str, value: DenseArray) {
        self.map.insert(name.to_string(), value);
    }

    fn get(&self, name: &str) -> Option<&DenseArray> {
        self.map.get(name)
    }
}

#[derive(Clone, Debug)]
enum Op {
    Param(String),
    Input(String),
    Const(DenseArray),
    Add(NodeId, NodeId),
    /// Broadcast add of a `[1, C]` row vector onto every row of a `[R, C]` matrix.
    AddRow(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    MatMul(NodeId, NodeId),
    /// `a · bᵀ` for `a: [m, k]`, `b: [n, k]`.
    MatMulTb(NodeId, NodeId),
    Concat(NodeId, NodeId, usize),
    /// Gathers rows of a 2-D node; indices are fixed at construction.
    RowLookup(NodeId, Vec<usize>),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Relu(NodeId),
    Log(NodeId),
    Abs(NodeId),
    /// Row-wise softmax (whole array for rank 1).
    Softmax(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    /// Column means of a `[R, C]` matrix, producing `[1, C]`.
    MeanRows(NodeId),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Param(_) => "param",
            Op::Input(_) => "input",
            Op::Const(_) => "const",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::MatMul(..) => "matmul",
            Op::MatMulTb(..) => "matmul_tb",
            Op::Concat(..) => "concat",
            Op::RowLookup(..) => "row_lookup",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::Relu(_) => "relu",
            Op::Log(_) => "log",
            Op::Abs(_) => "abs",
            Op::Softmax(_) => "softmax",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::MeanRows(_) => "mean_rows",
        }
    }
}

struct Node {
    op: Op,
    shape: Vec<usize>,
}

/// Computation graph over dense arrays. Nodes are appended in topological
/// order and shapes are checked at construction, so wiring errors surface
/// where the graph is built rather than at run time.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, NodeId>,
    inputs: BTreeMap<String, NodeId>,
}

fn err(op: &str, message: String) -> Error {
    Error::Shape { context: format!("graph op {op}"), message }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    /// Names of all parameter leaves in the graph.
    pub fn param_names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op, shape });
        id
    }

    /// Declares (or re-uses) a named parameter leaf.
    pub fn param(&mut self, name: &str, shape: &[usize]) -> Result<NodeId> {
        if let Some(&id) = self.params.get(name) {
            if self.nodes[id.0].shape != shape {
                return Err(err(
                    "param",
                    format!("parameter {name} redeclared with shape {:?} vs {:?}", shape, self.nodes[id.0].shape),
                ));
            }
            return Ok(id);
        }
        let id = self.push(Op::Param(name.to_string()), shape.to_vec());
        self.params.insert(name.to_string(), id);
        Ok(id)
    }

    /// Declares (or re-uses) a named input leaf.
    pub fn input(&mut self, name: &str, shape: &[usize]) -> Result<NodeId> {
        if let Some(&id) = self.inputs.get(name) {
            if self.nodes[id.0].shape != shape {
                return Err(err(
                    "input",
                    format!("input {name} redeclared with shape {:?} vs {:?}", shape, self.nodes[id.0].shape),
                ));
            }
            return Ok(id);
        }
        let id = self.push(Op::Input(name.to_string()), shape.to_vec());
        self.inputs.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn constant(&mut self, value: DenseArray) -> NodeId {
        let shape = value.shape().to_vec();
        self.push(Op::Const(value), shape)
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<Vec<usize>> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa != sb {
            return Err(err(op, format!("operand shapes differ: {sa:?} vs {sb:?} (nodes {} and {})", a.0, b.0)));
        }
        Ok(sa.clone())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.same_shape("add", a, b)?;
        Ok(self.push(Op::Add(a, b), shape))
    }

    /// `a + b` where `a: [R, C]` and `b: [1, C]` is added to every row.
    pub fn add_row(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.nodes[a.0].shape.clone(), &self.nodes[b.0].shape);
        if sa.len() != 2 || sb.len() != 2 || sb[0] != 1 || sb[1] != sa[1] {
            return Err(err("add_row", format!("want [R,C] plus [1,C], got {sa:?} plus {sb:?}")));
        }
        Ok(self.push(Op::AddRow(a, b), sa))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.same_shape("sub", a, b)?;
        Ok(self.push(Op::Sub(a, b), shape))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.same_shape("mul", a, b)?;
        Ok(self.push(Op::Mul(a, b), shape))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let shape = self.nodes[a.0].shape.clone();
        self.push(Op::Scale(a, factor), shape)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(err("matmul", format!("incompatible shapes {sa:?} · {sb:?}")));
        }
        let shape = vec![sa[0], sb[1]];
        Ok(self.push(Op::MatMul(a, b), shape))
    }

    /// `a · bᵀ`: `[m, k] · [n, k]ᵀ → [m, n]`.
    pub fn matmul_tb(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(err("matmul_tb", format!("incompatible shapes {sa:?} · {sb:?}ᵀ")));
        }
        let shape = vec![sa[0], sb[0]];
        Ok(self.push(Op::MatMulTb(a, b), shape))
    }

    pub fn concat(&mut self, a: NodeId, b: NodeId, axis: usize) -> Result<NodeId> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        let shape = match (sa.len(), sb.len(), axis) {
            (1, 1, 0) => vec![sa[0] + sb[0]],
            (2, 2, 0) if sa[1] == sb[1] => vec![sa[0] + sb[0], sa[1]],
            (2, 2, 1) if sa[0] == sb[0] => vec![sa[0], sa[1] + sb[1]],
            _ => return Err(err("concat", format!("cannot concat {sa:?} and {sb:?} on axis {axis}"))),
        };
        Ok(self.push(Op::Concat(a, b, axis), shape))
    }

    /// Gathers `rows` from a 2-D node.
    pub fn row_lookup(&mut self, table: NodeId, rows: Vec<usize>) -> Result<NodeId> {
        let st = &self.nodes[table.0].shape;
        if st.len() != 2 {
            return Err(err("row_lookup", format!("table must be 2-D, got {st:?}")));
        }
        if rows.is_empty() {
            return Err(err("row_lookup", "empty row list".into()));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= st[0]) {
            return Err(err("row_lookup", format!("row {bad} out of range for table with {} rows", st[0])));
        }
        let shape = vec![rows.len(), st[1]];
        Ok(self.push(Op::RowLookup(table, rows), shape))
    }

    fn unary(&mut self, make: impl FnOnce(NodeId) -> Op, a: NodeId) -> NodeId {
        let shape = self.nodes[a.0].shape.clone();
        self.push(make(a), shape)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Tanh, a)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Sigmoid, a)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Relu, a)
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Log, a)
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Abs, a)
    }

    /// Softmax over the last axis: whole array for rank 1, per row for rank 2.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let s = &self.nodes[a.0].shape;
        if s.is_empty() || s.len() > 2 {
            return Err(err("softmax", format!("rank 1 or 2 required, got {s:?}")));
        }
        Ok(self.unary(Op::Softmax, a))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a), vec![1])
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Mean(a), vec![1])
    }

    /// Column means over rows: `[R, C] → [1, C]`.
    pub fn mean_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let s = &self.nodes[a.0].shape;
        if s.len() != 2 {
            return Err(err("mean_rows", format!("2-D required, got {s:?}")));
        }
        let shape = vec![1, s[1]];
        Ok(self.push(Op::MeanRows(a), shape))
    }
}

enum Value<'a> {
    Ref(&'a DenseArray),
    Own(DenseArray),
}

impl<'a> Value<'a> {
    fn get(&self) -> &DenseArray {
        match self {
            Value::Ref(a) => a,
            Value::Own(a) => a,
        }
    }
}

/// All node values from one forward pass over a fixed binding.
pub struct Evaluation<'a> {
    values: Vec<Value<'a>>,
}

impl<'a> Evaluation<'a> {
    pub fn value(&self, id: NodeId) -> &DenseArray {
        self.values[id.0].get()
    }
}

fn matmul_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    }
}

fn softmax_rows(input: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; input.len()];
    for r in 0..rows {
        let row = &input[r * cols..(r + 1) * cols];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let orow = &mut out[r * cols..(r + 1) * cols];
        let mut total = 0.0;
        for (o, &v) in orow.iter_mut().zip(row.iter()) {
            *o = (v - max).exp();
            total += *o;
        }
        for o in orow.iter_mut() {
            *o /= total;
        }
    }
    out
}

/// Evaluates every node of `graph` under the given parameter and input
/// bindings. Pure: identical bindings produce bit-identical values. Any
/// non-finite intermediate is rejected with the offending node named.
pub fn forward<'a>(graph: &'a Graph, params: &'a ParamSet, inputs: &'a Inputs) -> Result<Evaluation<'a>> {
    let mut values: Vec<Value<'a>> = Vec::with_capacity(graph.nodes.len());
    for (idx, node) in graph.nodes.iter().enumerate() {
        let val = |id: NodeId| -> &DenseArray { values[id.0].get() };
        let value: Value<'a> = match &node.op {
            Op::Param(name) => {
                let arr = params
                    .get(name)
                    .ok_or_else(|| Error::Graph(format!("unbound parameter {name}")))?;
                if arr.shape() != node.shape.as_slice() {
                    return Err(err("param", format!("{name} bound with shape {:?}, declared {:?}", arr.shape(), node.shape)));
                }
                Value::Ref(arr)
            }
            Op::Input(name) => {
                let arr = inputs
                    .get(name)
                    .ok_or_else(|| Error::Graph(format!("unbound input {name}")))?;
                if arr.shape() != node.shape.as_slice() {
                    return Err(err("input", format!("{name} bound with shape {:?}, declared {:?}", arr.shape(), node.shape)));
                }
                Value::Ref(arr)
            }
            Op::Const(c) => Value::Ref(c),
            Op::Add(a, b) => {
                let (x, y) = (val(*a).data(), val(*b).data());
                let data = x.iter().zip(y).map(|(p, q)| p + q).collect();
                Value::Own(DenseArray::new(node.shape.clone(), data)?)
            }
            Op::AddRow(a, b) => {
                let x = val(*a);
                let y = val(*b).data();
                let cols = x.cols();
                let data = x
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, p)| p + y[i % cols])
                    .collect();
                Value::Own(DenseArray::new(node.shape.clone(), data)?)
            }
            Op::Sub(a, b) => {
                let (x, y) = (val(*a).data(), val(*b).data());
                let data = x.iter().zip(y).map(|(p, q)| p - q).collect();
                Value::Own(DenseArray::new(node.shape.clone(), data)?)
            }
            Op::Mul(a, b) => {
                let (x, y) = (val(*a).data(), val(*b).data());
                let data = x.iter().zip(y).map(|(p, q)| p * q).collect();
                Value::Own(DenseArray::new(node.shape.clone(), data)?)
            }
            Op::Scale(a, f) => {
                let data = val(*a).data().iter().map(|p| p * f).collect();
                Value::Own(DenseArray::new(node.shape.clone(), data)?)
            }
            Op::MatMul(a, b) => {
                let (x, y) = (val(*a), val(*b));
                let (m, k, n) = (x.shape()[0], x.shape()[1], y.shape()[1]);
                let mut out = vec![0.0; m * n];
                matmul_into(x.data(), y.data(), m, k, n, &mut out);
                Value::Own(DenseArray::new(node.shape.clone(), out)?)
            }
            Op::MatMulTb(a, b) => {
                let (x, y) = (val(*a), val(*b));
                let (m, k, n) = (x.shape()[0], x.shape()[1], y.shape()[0]);
                let mut out = vec![0.0; m * n];
                for i in 0..m {
                    let xr = &x.data()[i * k..(i + 1) * k];
                    for j in 0..n {
                        let yr = &y.data()[j * k..(j + 1) * k];
                        out[i * n + j] = xr.iter().zip(yr).map(|(p, q)| p * q).sum();
                    }
                }
                Value::Own(DenseArray::new(node.shape.clone(), out)?)
            }
            Op::Concat(a, b, axis) => {
                let (x, y) = (val(*a), val(*b));
                let data = if *axis == 0 || x.rank() == 1 {
                    let mut d = x.data().to_vec();
                    d.extend_from_slice(y.data());
                    d
                } else {
                    let mut d = Vec::with_capacity(x.len() + y.len());
                    for r in 0..x.shape()[0] {
                        d.extend_from_slice(x.row(r));
                        d.extend_from_slice(y.row(r));
                    }
                    d
                };
                Value::Own(DenseArray::new(node.shape.clone(), data)?)
            }
            Op::RowLookup(t, rows) => {
                let x = val(*t);
                let cols = x.shape()[1];
                let mut data = Vec::with_capacity(rows.len() * cols);
                for &r in rows {
                    data.extend_from_slice(x.row(r));
                }
                Value::Own(DenseArray::new(node.shape.clone(), data)?)
            }
            Op::Tanh(a) => {
                let data = val(*a).data().iter().map(|v| v.tanh()).collect();
                Value::Own(DenseArray::new(node.shape.clone(), data)?)
            }
            Op::Sigmoid(a) => {
                let data = val(*a).data().iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect();
                Value::Own(DenseArray::new(node.shape.clone(), data)?)
            }
            Op::Relu(a) => {
                let data = val(*a).data().iter().map(|v| v.max(0.0)).collect();
                Value::Own(DenseArray::new(node.shape.clone(), data)?)
            }
            Op::Log(a) => {
                let data = val(*a).data().iter().map(|v| v.ln()).collect();
                Value::Own(DenseArray::new(node.shape.clone(), data)?)
            }
            Op::Abs(a) => {
                let data = val(*a).data().iter().map(|v| v.abs()).collect();
                Value::Own(DenseArray::new(node.shape.clone(), data)?)
            }
            Op::Softmax(a) => {
                let x = val(*a);
                let (rows, cols) = if x.rank() == 2 { (x.shape()[0], x.shape()[1]) } else { (1, x.shape()[0]) };
                Value::Own(DenseArray::new(node.shape.clone(), softmax_rows(x.data(), rows, cols))?)
            }
            Op::Sum(a) => Value::Own(DenseArray::scalar(val(*a).data().iter().sum())),
            Op::Mean(a) => {
                let x = val(*a).data();
                Value::Own(DenseArray::scalar(x.iter().sum::<f64>() / x.len() as f64))
            }
            Op::MeanRows(a) => {
                let x = val(*a);
                let (rows, cols) = (x.shape()[0], x.shape()[1]);
                let mut out = vec![0.0; cols];
                for r in 0..rows {
                    for (o, &v) in out.iter_mut().zip(x.row(r)) {
                        *o += v;
                    }
                }
                for o in out.iter_mut() {
                    *o /= rows as f64;
                }
                Value::Own(DenseArray::new(node.shape.clone(), out)?)
            }
        };
        if !value.get().all_finite() {
            return Err(Error::NonFinite { node: idx, op: node.op.name().into() });
        }
        values.push(value);
    }
    Ok(Evaluation { values })
}

/// Reverse-mode gradients of `output` with respect to every parameter leaf.
/// Parameters the output does not depend on get exact zero gradients. With
/// `seed` omitted the output must be a scalar (seed 1).
pub fn backward(graph: &Graph, eval: &Evaluation, output: NodeId, seed: Option<&DenseArray>) -> Result<GradMap> {
    let out_shape = &graph.nodes[output.0].shape;
    let seed_arr = match seed {
        Some(s) => {
            if s.shape() != out_shape.as_slice() {
                return Err(err("backward", format!("seed shape {:?} does not match output {:?}", s.shape(), out_shape)));
            }
            s.clone()
        }
        None => {
            if out_shape != &vec![1] {
                return Err(Error::Graph(format!(
                    "backward without a seed requires a scalar output, got shape {out_shape:?}"
                )));
            }
            DenseArray::scalar(1.0)
        }
    };

    let mut adjoints: Vec<Option<DenseArray>> = (0..graph.nodes.len()).map(|_| None).collect();
    adjoints[output.0] = Some(seed_arr);

    for idx in (0..=output.0).rev() {
        let g = match adjoints[idx].take() {
            Some(g) => g,
            None => continue,
        };
        let node = &graph.nodes[idx];
        // Accumulate into an input's adjoint slot.
        macro_rules! acc {
            ($id:expr, $update:expr) => {{
                let id: NodeId = $id;
                if adjoints[id.0].is_none() {
                    adjoints[id.0] = Some(DenseArray::zeros(&graph.nodes[id.0].shape));
                }
                let slot = adjoints[id.0].as_mut().unwrap();
                #[allow(clippy::redundant_closure_call)]
                ($update)(slot.data_mut());
            }};
        }
        match &node.op {
            Op::Param(_) => {
                // collected by name after the sweep
                adjoints[idx] = Some(g);
            }
            Op::Input(_) | Op::Const(_) => {}
            Op::Add(a, b) => {
                acc!(*a, |d: &mut [f64]| for (o, &v) in d.iter_mut().zip(g.data()) { *o += v; });
                acc!(*b, |d: &mut [f64]| for (o, &v) in d.iter_mut().zip(g.data()) { *o += v; });
            }
            Op::AddRow(a, b) => {
                let cols = graph.nodes[b.0].shape[1];
                acc!(*a, |d: &mut [f64]| for (o, &v) in d.iter_mut().zip(g.data()) { *o += v; });
                acc!(*b, |d: &mut [f64]| for (i, &v) in g.data().iter().enumerate() { d[i % cols] += v; });
            }
            Op::Sub(a, b) => {
                acc!(*a, |d: &mut [f64]| for (o, &v) in d.iter_mut().zip(g.data()) { *o += v; });
                acc!(*b, |d: &mut [f64]| for (o, &v) in d.iter_mut().zip(g.data()) { *o -= v; });
            }
            Op::Mul(a, b) => {
                let (xa, xb) = (eval.value(*a).data(), eval.value(*b).data());
                acc!(*a, |d: &mut [f64]| for i in 0..d.len() { d[i] += g.data()[i] * xb[i]; });
                acc!(*b, |d: &mut [f64]| for i in 0..d.len() { d[i] += g.data()[i] * xa[i]; });
            }
            Op::Scale(a, f) => {
                acc!(*a, |d: &mut [f64]| for (o, &v) in d.iter_mut().zip(g.data()) { *o += f * v; });
            }
            Op::MatMul(a, b) => {
                let (x, y) = (eval.value(*a), eval.value(*b));
                let (m, k, n) = (x.shape()[0], x.shape()[1], y.shape()[1]);
                // da = g · yᵀ
                acc!(*a, |d: &mut [f64]| {
                    for i in 0..m {
                        for kk in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g.data()[i * n + j] * y.data()[kk * n + j];
                            }
                            d[i * k + kk] += s;
                        }
                    }
                });
                // db = xᵀ · g
                acc!(*b, |d: &mut [f64]| {
                    for kk in 0..k {
                        for i in 0..m {
                            let xv = x.data()[i * k + kk];
                            if xv == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                d[kk * n + j] += xv * g.data()[i * n + j];
                            }
                        }
                    }
                });
            }
            Op::MatMulTb(a, b) => {
                let (x, y) = (eval.value(*a), eval.value(*b));
                let (m, k, n) = (x.shape()[0], x.shape()[1], y.shape()[0]);
                // da = g · y
                acc!(*a, |d: &mut [f64]| matmul_into(g.data(), y.data(), m, n, k, d));
                // db = gᵀ · x
                acc!(*b, |d: &mut [f64]| {
                    for j in 0..n {
                        for i in 0..m {
                            let gv = g.data()[i * n + j];
                            if gv == 0.0 {
                                continue;
                            }
                            for kk in 0..k {
                                d[j * k + kk] += gv * x.data()[i * k + kk];
                            }
                        }
                    }
                });
            }
            Op::Concat(a, b, axis) => {
                let (sa, sb) = (&graph.nodes[a.0].shape, &graph.nodes[b.0].shape);
                if *axis == 0 || sa.len() == 1 {
                    let na: usize = sa.iter().product();
                    acc!(*a, |d: &mut [f64]| for (o, &v) in d.iter_mut().zip(&g.data()[..na]) { *o += v; });
                    acc!(*b, |d: &mut [f64]| for (o, &v) in d.iter_mut().zip(&g.data()[na..]) { *o += v; });
                } else {
                    let (rows, ca, cb) = (sa[0], sa[1], sb[1]);
                    let cols = ca + cb;
                    acc!(*a, |d: &mut [f64]| {
                        for r in 0..rows {
                            for c in 0..ca {
                                d[r * ca + c] += g.data()[r * cols + c];
                            }
                        }
                    });
                    acc!(*b, |d: &mut [f64]| {
                        for r in 0..rows {
                            for c in 0..cb {
                                d[r * cb + c] += g.data()[r * cols + ca + c];
                            }
                        }
                    });
                }
            }
            Op::RowLookup(t, rows) => {
                let cols = graph.nodes[t.0].shape[1];
                acc!(*t, |d: &mut [f64]| {
                    for (i, &r) in rows.iter().enumerate() {
                        for c in 0..cols {
                            d[r * cols + c] += g.data()[i * cols + c];
                        }
                    }
                });
            }
            Op::Tanh(a) => {
                let y = eval.value(NodeId(idx)).data();
                acc!(*a, |d: &mut [f64]| for i in 0..d.len() { d[i] += g.data()[i] * (1.0 - y[i] * y[i]); });
            }
            Op::Sigmoid(a) => {
                let y = eval.value(NodeId(idx)).data();
                acc!(*a, |d: &mut [f64]| for i in 0..d.len() { d[i] += g.data()[i] * y[i] * (1.0 - y[i]); });
            }
            Op::Relu(a) => {
                let x = eval.value(*a).data();
                acc!(*a, |d: &mut [f64]| for i in 0..d.len() { if x[i] > 0.0 { d[i] += g.data()[i]; } });
            }
            Op::Log(a) => {
                let x = eval.value(*a).data();
                acc!(*a, |d: &mut [f64]| for i in 0..d.len() { d[i] += g.data()[i] / x[i]; });
            }
            Op::Abs(a) => {
                // subgradient: sign(x), with sign(0) = 0
                let x = eval.value(*a).data();
                acc!(*a, |d: &mut [f64]| for i in 0..d.len() {
                    let s = if x[i] > 0.0 { 1.0 } else if x[i] < 0.0 { -1.0 } else { 0.0 };
                    d[i] += g.data()[i] * s;
                });
            }
            Op::Softmax(a) => {
                let y = eval.value(NodeId(idx));
                let (rows, cols) = if y.rank() == 2 { (y.shape()[0], y.shape()[1]) } else { (1, y.shape()[0]) };
                acc!(*a, |d: &mut [f64]| {
                    for r in 0..rows {
                        let yr = &y.data()[r * cols..(r + 1) * cols];
                        let gr = &g.data()[r * cols..(r + 1) * cols];
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for c in 0..cols {
                            d[r * cols + c] += yr[c] * (gr[c] - dot);
                        }
                    }
                });
            }
            Op::Sum(a) => {
                let gv = g.data()[0];
                acc!(*a, |d: &mut [f64]| for o in d.iter_mut() { *o += gv; });
            }
            Op::Mean(a) => {
                let n: usize = graph.nodes[a.0].shape.iter().product();
                let gv = g.data()[0] / n as f64;
                acc!(*a, |d: &mut [f64]| for o in d.iter_mut() { *o += gv; });
            }
            Op::MeanRows(a) => {
                let (rows, cols) = (graph.nodes[a.0].shape[0], graph.nodes[a.0].shape[1]);
                acc!(*a, |d: &mut [f64]| {
                    for r in 0..rows {
                        for c in 0..cols {
                            d[r * cols + c] += g.data()[c] / rows as f64;
                        }
                    }
                });
            }
        }
    }

    let mut grads = GradMap::new();
    for (name, id) in &graph.params {
        let g = adjoints[id.0]
            .take()
            .unwrap_or_else(|| DenseArray::zeros(&graph.nodes[id.0].shape));
        grads.insert(name.clone(), g);
    }
    Ok(grads)
}

/// Maximum relative error between reverse-mode gradients and central finite
/// differences over every parameter entry of a scalar-output graph. Returns
/// `f64::INFINITY` when any comparison is non-finite.
pub fn grad_check(graph: &Graph, params: &ParamSet, inputs: &Inputs, output: NodeId, h: f64) -> Result<f64> {
    if graph.shape(output) != [1] {
        return Err(Error::Graph("grad_check requires a scalar output".into()));
    }
    let eval = forward(graph, params, inputs)?;
    let analytic = backward(graph, &eval, output, None)?;

    let mut worst: f64 = 0.0;
    let mut perturbed = params.clone();
    for (name, base) in params.iter() {
        for i in 0..base.len() {
            let orig = base.data()[i];
            perturbed.get_mut(name).unwrap().data_mut()[i] = orig + h;
            let up = forward(graph, &perturbed, inputs)?.value(output).scalar_value();
            perturbed.get_mut(name).unwrap().data_mut()[i] = orig - h;
            let down = forward(graph, &perturbed, inputs)?.value(output).scalar_value();
            perturbed.get_mut(name).unwrap().data_mut()[i] = orig;

            let numeric = (up - down) / (2.0 * h);
            let a = analytic[name].data()[i];
            if !numeric.is_finite() || !a.is_finite() {
                return Ok(f64::INFINITY);
            }
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;


    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut g = Graph::new();
        let no_params = ParamSet::new();
        let no_inputs = Inputs::new();
        let x = g.constant(DenseArray::vector(vec![0.0, 0.0]));
        let s = g.softmax(x).unwrap();
        let eval = forward(&g, &no_params, &no_inputs).unwrap();
        assert_eq!(eval.value(s).data(), &[0.5, 0.5]);
    }

    #[test]
    fn log_softmax_against_onehot_is_negative_cross_entropy() {
        let mut g = Graph::new();
        let no_params = ParamSet::new();
        let no_inputs = Inputs::new();
        let x = g.constant(DenseArray::vector(vec![1.0, 2.0, -0.5]));
        let p = g.softmax(x).unwrap();
        let lp = g.log(p);
        let onehot = g.constant(DenseArray::vector(vec![0.0, 1.0, 0.0]));
        let prod = g.mul(lp, onehot).unwrap();
        let s = g.sum(prod);
        let eval = forward(&g, &no_params, &no_inputs).unwrap();
        let probs = eval.value(p).data().to_vec();
        assert!((eval.value(s).scalar_value() - probs[1].ln()).abs() < 1e-15);
    }

    #[test]
    fn identity_matmul_passes_values_through() {
        let mut g = Graph::new();
        let no_params = ParamSet::new();
        let no_inputs = Inputs::new();
        let ident = g.constant(DenseArray::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let m = g.constant(DenseArray::matrix(2, 2, vec![3.0, -1.0, 2.5, 7.0]).unwrap());
        let prod = g.matmul(ident, m).unwrap();
        let eval = forward(&g, &no_params, &no_inputs).unwrap();
        assert_eq!(eval.value(prod).data(), &[3.0, -1.0, 2.5, 7.0]);
    }

    #[test]
    fn d_x_squared_is_2x() {
        let mut g = Graph::new();
        let no_inputs = Inputs::new();
        let mut params = ParamSet::new();
        params.insert("x", DenseArray::scalar(3.0));
        let x = g.param("x", &[1]).unwrap();
        let y = g.mul(x, x).unwrap();
        let eval = forward(&g, &params, &no_inputs).unwrap();
        let grads = backward(&g, &eval, y, None).unwrap();
        assert_eq!(grads["x"].data(), &[6.0]);
    }

    #[test]
    fn softmax_cross_entropy_gradient_is_probs_minus_onehot() {
        let mut g = Graph::new();
        let no_inputs = Inputs::new();
        let mut params = ParamSet::new();
        params.insert("logits", DenseArray::vector(vec![0.3, -1.2, 2.0]));
        let x = g.param("logits", &[3]).unwrap();
        let p = g.softmax(x).unwrap();
        let lp = g.log(p);
        let onehot = g.constant(DenseArray::vector(vec![0.0, 0.0, 1.0]));
        let prod = g.mul(lp, onehot).unwrap();
        let sum = g.sum(prod);
        let loss = g.scale(sum, -1.0);
        let eval = forward(&g, &params, &no_inputs).unwrap();
        let grads = backward(&g, &eval, loss, None).unwrap();
        let probs = eval.value(p).data();
        let expect = [probs[0], probs[1], probs[2] - 1.0];
        for (a, e) in grads["logits"].data().iter().zip(expect.iter()) {
            assert!((a - e).abs() < 1e-12, "{a} vs {e}");
        }
    }

    #[test]
    fn unreached_parameters_get_zero_gradients() {
        let mut g = Graph::new();
        let no_inputs = Inputs::new();
        let mut params = ParamSet::new();
        params.insert("used", DenseArray::scalar(2.0));
        params.insert("unused", DenseArray::vector(vec![1.0, 1.0]));
        let x = g.param("used", &[1]).unwrap();
        let _dead = g.param("unused", &[2]).unwrap();
        let y = g.mul(x, x).unwrap();
        let eval = forward(&g, &params, &no_inputs).unwrap();
        let grads = backward(&g, &eval, y, None).unwrap();
        assert_eq!(grads["unused"].data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_missing_seed_on_non_scalar() {
        let mut g = Graph::new();
        let no_params = ParamSet::new();
        let no_inputs = Inputs::new();
        let x = g.constant(DenseArray::vector(vec![1.0, 2.0]));
        let y = g.scale(x, 2.0);
        let eval = forward(&g, &no_params, &no_inputs).unwrap();
        assert!(backward(&g, &eval, y, None).is_err());
    }

    #[test]
    fn forward_rejects_non_finite_intermediates() {
        let mut g = Graph::new();
        let no_params = ParamSet::new();
        let no_inputs = Inputs::new();
        let x = g.constant(DenseArray::vector(vec![0.0, 1.0]));
        let y = g.log(x); // ln(0) = -inf
        let _ = y;
        let got = forward(&g, &no_params, &no_inputs);
        match got.err() {
            Some(Error::NonFinite { op, .. }) => assert_eq!(op, "log"),
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn shape_mismatch_identifies_offender() {
        let mut g = Graph::new();
        let a = g.constant(DenseArray::vector(vec![1.0, 2.0]));
        let b = g.constant(DenseArray::vector(vec![1.0, 2.0, 3.0]));
        let got = g.add(a, b);
        assert!(matches!(got, Err(Error::Shape { .. })));
    }

    #[test]
    fn constant_graph_grad_check_is_zero() {
        let mut g = Graph::new();
        let no_inputs = Inputs::new();
        let mut params = ParamSet::new();
        params.insert("w", DenseArray::vector(vec![1.0, -2.0]));
        let _w = g.param("w", &[2]).unwrap();
        let c = g.constant(DenseArray::scalar(4.0));
        let out = g.scale(c, 2.0);
        let err = grad_check(&g, &params, &no_inputs, out, 1e-5).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn linear_regression_loss_grad_check_tight() {
        // loss = mean((x·w + b - y)^2) on a fixed tiny batch
        let mut g = Graph::new();
        let no_inputs = Inputs::new();
        let mut params = ParamSet::new();
        params.insert("w", DenseArray::matrix(3, 1, vec![0.2, -0.4, 0.9]).unwrap());
        params.insert("b", DenseArray::matrix(1, 1, vec![0.1]).unwrap());
        let x = g.constant(DenseArray::matrix(4, 3, vec![
            0.5, -1.0, 0.3, 1.2, 0.8, -0.7, -0.2, 0.1, 0.6, 0.9, -0.5, -0.1,
        ]).unwrap());
        let w = g.param("w", &[3, 1]).unwrap();
        let b = g.param("b", &[1, 1]).unwrap();
        let pred = g.matmul(x, w).unwrap();
        let pred_b = g.add_row(pred, b).unwrap();
        let y = g.constant(DenseArray::matrix(4, 1, vec![0.4, 0.2, -0.3, 1.0]).unwrap());
        let diff = g.sub(pred_b, y).unwrap();
        let sq = g.mul(diff, diff).unwrap();
        let loss = g.mean(sq);
        let err = grad_check(&g, &params, &no_inputs, loss, 1e-5).unwrap();
        assert!(err < 1e-6, "grad_check error {err}");
    }

    #[test]
    fn three_layer_graph_matches_finite_differences() {
        let mut g = Graph::new();
        let no_inputs = Inputs::new();
        let mut params = ParamSet::new();
        params.insert("w1", DenseArray::matrix(3, 4, (0..12).map(|i| ((i * 7 % 11) as f64 - 5.0) * 0.13).collect()).unwrap());
        params.insert("w2", DenseArray::matrix(4, 3, (0..12).map(|i| ((i * 5 % 13) as f64 - 6.0) * 0.11).collect()).unwrap());
        params.insert("w3", DenseArray::matrix(3, 2, (0..6).map(|i| ((i * 3 % 7) as f64 - 3.0) * 0.2).collect()).unwrap());
        let x = g.constant(DenseArray::matrix(2, 3, vec![0.3, -0.5, 0.8, 1.1, 0.2, -0.4]).unwrap());
        let w1 = g.param("w1", &[3, 4]).unwrap();
        let w2 = g.param("w2", &[4, 3]).unwrap();
        let w3 = g.param("w3", &[3, 2]).unwrap();
        let h1 = g.matmul(x, w1).unwrap();
        let a1 = g.tanh(h1);
        let h2 = g.matmul(a1, w2).unwrap();
        let a2 = g.sigmoid(h2);
        let h3 = g.matmul(a2, w3).unwrap();
        let p = g.softmax(h3).unwrap();
        let lp = g.log(p);
        let mask = g.constant(DenseArray::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let picked = g.mul(lp, mask).unwrap();
        let s = g.sum(picked);
        let loss = g.scale(s, -0.5);
        let err = grad_check(&g, &params, &no_inputs, loss, 1e-5).unwrap();
        assert!(err < 1e-4, "grad_check error {err}");
    }

    #[test]
    fn forward_is_pure_and_bit_identical() {
        let mut g = Graph::new();
        let mut params = ParamSet::new();
        params.insert("w", DenseArray::matrix(2, 2, vec![0.1, 0.7, -0.3, 0.5]).unwrap());
        let w = g.param("w", &[2, 2]).unwrap();
        let x = g.constant(DenseArray::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = g.matmul(x, w).unwrap();
        let s = g.softmax(y).unwrap();
        let a = forward(&g, &params, &Inputs::new()).unwrap().value(s).data().to_vec();
        let b = forward(&g, &params, &Inputs::new()).unwrap().value(s).data().to_vec();
        assert!(a.iter().zip(&b).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}
