use std::collections::HashMap;

use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::{Tensor, TensorError};

/// Variance floor inside layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;
/// Inputs with a smaller Euclidean norm normalize to the zero vector.
pub const L2_NORM_FLOOR: f64 = 1e-8;
/// Additive logit applied to masked attention keys.
pub const ATTENTION_MASK_LOGIT: f64 = -1e9;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    Row,
    Scalar,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Unary {
    Relu,
    Sigmoid,
    Exp,
    Log,
    Softplus,
    LogSigmoid,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var, Bcast),
    Sub(Var, Var, Bcast),
    Mul(Var, Var, Bcast),
    Scale(Var, f64),
    Unary(Var, Unary),
    Softmax(Var),
    LogSumExp(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    L2Normalize {
        x: Var,
        inv_norm: Vec<f64>,
    },
    Gather {
        table: Var,
        rows: Vec<usize>,
    },
    EmbeddingBag {
        table: Var,
        bags: Vec<Vec<usize>>,
    },
    SumRows(Var),
    SumAll(Var),
    Concat(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    Reshape(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
enum Value {
    Owned(Tensor),
    Param(ParamId),
}

#[derive(Debug)]
struct Node {
    value: Value,
    op: Op,
    requires_grad: bool,
}

/// A primitive with its static attributes, for generic application.
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    MatMul,
    Transpose,
    Add,
    Sub,
    Mul,
    Scale(f64),
    Relu,
    Sigmoid,
    Exp,
    Log,
    Softplus,
    LogSigmoid,
    Softmax,
    LogSumExp,
    LayerNorm,
    L2Normalize,
    Gather(Vec<usize>),
    EmbeddingBag(Vec<Vec<usize>>),
    SumRows,
    SumAll,
    Concat,
    SliceRows { start: usize, len: usize },
    Reshape(Vec<usize>),
    Attention { heads: usize, key_mask: Vec<bool> },
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::MatMul => "matmul",
            Primitive::Transpose => "transpose",
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::Scale(_) => "scale",
            Primitive::Relu => "relu",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Exp => "exp",
            Primitive::Log => "log",
            Primitive::Softplus => "softplus",
            Primitive::LogSigmoid => "log_sigmoid",
            Primitive::Softmax => "softmax",
            Primitive::LogSumExp => "logsumexp",
            Primitive::LayerNorm => "layer_norm",
            Primitive::L2Normalize => "l2_normalize",
            Primitive::Gather(_) => "gather",
            Primitive::EmbeddingBag(_) => "embedding_bag",
            Primitive::SumRows => "sum_rows",
            Primitive::SumAll => "sum_all",
            Primitive::Concat => "concat",
            Primitive::SliceRows { .. } => "slice_rows",
            Primitive::Reshape(_) => "reshape",
            Primitive::Attention { .. } => "attention",
        }
    }
}

/// Result of a backward pass: parameter gradients plus gradients of the
/// leaves created with [`Graph::input`].
#[derive(Debug)]
pub struct Backward {
    pub params: Gradients,
    leaves: HashMap<Var, Vec<f64>>,
}

impl Backward {
    /// Gradient of the root with respect to an input leaf.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.leaves.get(&v).map(|g| g.as_slice())
    }
}

/// Records primitive applications in topological order (every input of a
/// node has a smaller index) so backward is a single reverse sweep.
///
/// Parameters are read from an immutable [`ParamStore`] without copying.
pub struct Graph<'p> {
    store: &'p ParamStore,
    track_params: bool,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
    degenerate_norms: usize,
}

fn shape_err(primitive: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        primitive,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

fn accumulate_with(grads: &mut [Option<Vec<f64>>], v: Var, len: usize, f: impl FnOnce(&mut [f64])) {
    let slot = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
    f(slot);
}

impl<'p> Graph<'p> {
    /// A graph whose parameter reads are differentiated.
    pub fn new(store: &'p ParamStore) -> Self {
        Self {
            store,
            track_params: true,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            degenerate_norms: 0,
        }
    }

    /// A graph for inference; parameters are treated as constants.
    pub fn inference(store: &'p ParamStore) -> Self {
        Self {
            track_params: false,
            ..Self::new(store)
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of l2-normalize rows that hit the zero-norm guard so far.
    pub fn degenerate_norms(&self) -> usize {
        self.degenerate_norms
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.store.value(*id),
        }
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A constant leaf.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A differentiable input leaf; its gradient is available via
    /// [`Backward::wrt`].
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.get(&id) {
            return *v;
        }
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Param(id),
            requires_grad: self.track_params,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    /// Generic entry point used by the gradient-check suite.
    pub fn apply(&mut self, prim: &Primitive, inputs: &[Var]) -> Result<Var, TensorError> {
        let arity = |n: usize| -> Result<(), TensorError> {
            if inputs.len() != n {
                return Err(TensorError::Invalid {
                    primitive: prim.name(),
                    detail: format!("expected {n} inputs, got {}", inputs.len()),
                });
            }
            Ok(())
        };
        match prim {
            Primitive::Concat => {
                if inputs.is_empty() {
                    return Err(TensorError::Invalid {
                        primitive: "concat",
                        detail: "no inputs".into(),
                    });
                }
                self.concat(inputs)
            }
            Primitive::MatMul | Primitive::Add | Primitive::Sub | Primitive::Mul => {
                arity(2)?;
                let (a, b) = (inputs[0], inputs[1]);
                match prim {
                    Primitive::MatMul => self.matmul(a, b),
                    Primitive::Add => self.add(a, b),
                    Primitive::Sub => self.sub(a, b),
                    _ => self.mul(a, b),
                }
            }
            Primitive::LayerNorm => {
                arity(3)?;
                self.layer_norm(inputs[0], inputs[1], inputs[2])
            }
            Primitive::Attention { heads, key_mask } => {
                arity(3)?;
                self.attention(inputs[0], inputs[1], inputs[2], *heads, key_mask)
            }
            _ => {
                arity(1)?;
                let x = inputs[0];
                match prim {
                    Primitive::Transpose => self.transpose(x),
                    Primitive::Scale(c) => Ok(self.scale(x, *c)),
                    Primitive::Relu => Ok(self.relu(x)),
                    Primitive::Sigmoid => Ok(self.sigmoid(x)),
                    Primitive::Exp => Ok(self.exp(x)),
                    Primitive::Log => Ok(self.log(x)),
                    Primitive::Softplus => Ok(self.softplus(x)),
                    Primitive::LogSigmoid => Ok(self.log_sigmoid(x)),
                    Primitive::Softmax => Ok(self.softmax(x)),
                    Primitive::LogSumExp => Ok(self.logsumexp(x)),
                    Primitive::L2Normalize => Ok(self.l2_normalize(x)),
                    Primitive::Gather(rows) => self.gather(x, rows),
                    Primitive::EmbeddingBag(bags) => self.embedding_bag(x, bags),
                    Primitive::SumRows => Ok(self.sum_rows(x)),
                    Primitive::SumAll => Ok(self.sum_all(x)),
                    Primitive::SliceRows { start, len } => self.slice_rows(x, *start, *len),
                    Primitive::Reshape(shape) => self.reshape(x, shape.clone()),
                    _ => unreachable!(),
                }
            }
        }
    }

    /// `[m,k] · [k,n] → [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(shape_err("matmul", ta, tb));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        let (ad, bd) = (ta.data(), tb.data());
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let s = ad[i * k + p];
                if s == 0.0 {
                    continue;
                }
                let brow = &bd[p * n..(p + 1) * n];
                orow.iter_mut().zip(brow).for_each(|(o, b)| *o += s * b);
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let t = self.value(a);
        if t.shape().len() != 2 {
            return Err(TensorError::Invalid {
                primitive: "transpose",
                detail: format!("needs a 2-d tensor, got {:?}", t.shape()),
            });
        }
        let (m, n) = (t.shape()[0], t.shape()[1]);
        let d = t.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = d[i * n + j];
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::from_parts(vec![n, m], out), Op::Transpose(a), rg))
    }

    fn bcast(&self, primitive: &'static str, a: Var, b: Var) -> Result<Bcast, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            Ok(Bcast::Same)
        } else if tb.len() == 1 {
            Ok(Bcast::Scalar)
        } else if tb.rows() == 1 && tb.cols() == ta.cols() {
            Ok(Bcast::Row)
        } else {
            Err(shape_err(primitive, ta, tb))
        }
    }

    fn binary(&mut self, a: Var, b: Var, bc: Bcast, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let bd = tb.data();
        let out: Vec<f64> = match bc {
            Bcast::Same => ta.data().iter().zip(bd).map(|(x, y)| f(*x, *y)).collect(),
            Bcast::Scalar => ta.data().iter().map(|x| f(*x, bd[0])).collect(),
            Bcast::Row => {
                let c = ta.cols();
                ta.data()
                    .iter()
                    .enumerate()
                    .map(|(i, x)| f(*x, bd[i % c]))
                    .collect()
            }
        };
        Tensor::from_parts(ta.shape().to_vec(), out)
    }

    /// Elementwise sum; `b` may broadcast as a row over the last axis or as
    /// a scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let bc = self.bcast("add", a, b)?;
        let t = self.binary(a, b, bc, |x, y| x + y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add(a, b, bc), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let bc = self.bcast("sub", a, b)?;
        let t = self.binary(a, b, bc, |x, y| x - y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Sub(a, b, bc), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let bc = self.bcast("mul", a, b)?;
        let t = self.binary(a, b, bc, |x, y| x * y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b, bc), rg))
    }

    /// Multiplication by a constant.
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a);
        let out = Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|x| x * c).collect());
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, c), rg)
    }

    fn unary(&mut self, a: Var, kind: Unary) -> Var {
        let t = self.value(a);
        let f: fn(f64) -> f64 = match kind {
            Unary::Relu => |x: f64| x.max(0.0),
            Unary::Sigmoid => sigmoid,
            Unary::Exp => f64::exp,
            Unary::Log => f64::ln,
            Unary::Softplus => softplus,
            Unary::LogSigmoid => |x: f64| -softplus(-x),
        };
        let out = Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|x| f(*x)).collect());
        let rg = self.rg(&[a]);
        self.push(out, Op::Unary(a, kind), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Relu)
    }
    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }
    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }
    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Log)
    }
    /// `ln(1 + e^x)`, overflow-safe.
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Softplus)
    }
    /// `ln σ(x)`, overflow-safe.
    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::LogSigmoid)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let c = t.cols();
        let mut out = t.data().to_vec();
        if c > 0 {
            for row in out.chunks_mut(c) {
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for x in row.iter_mut() {
                    *x = (*x - m).exp();
                    s += *x;
                }
                row.iter_mut().for_each(|x| *x /= s);
            }
        }
        let out = Tensor::from_parts(t.shape().to_vec(), out);
        let rg = self.rg(&[a]);
        self.push(out, Op::Softmax(a), rg)
    }

    /// Log-sum-exp over the last axis; the last extent becomes 1.
    pub fn logsumexp(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let c = t.cols();
        let out: Vec<f64> = t
            .data()
            .chunks(c.max(1))
            .map(|row| {
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
            })
            .collect();
        let mut shape = t.shape().to_vec();
        match shape.last_mut() {
            Some(l) => *l = 1,
            None => shape.push(1),
        }
        let rg = self.rg(&[a]);
        self.push(Tensor::from_parts(shape, out), Op::LogSumExp(a), rg)
    }

    /// Layer normalization over the last axis with learnable gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var, TensorError> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let c = tx.cols();
        if c < 2 {
            return Err(TensorError::DegenerateNorm(c));
        }
        if tg.len() != c {
            return Err(shape_err("layer_norm", tx, tg));
        }
        if tb.len() != c {
            return Err(shape_err("layer_norm", tx, tb));
        }
        let rows = tx.rows();
        let mut xhat = vec![0.0; tx.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; tx.len()];
        let (gd, bd) = (tg.data(), tb.data());
        for r in 0..rows {
            let row = tx.row_slice(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                out[r * c + j] = h * gd[j] + bd[j];
            }
        }
        let out = Tensor::from_parts(tx.shape().to_vec(), out);
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Scales each last-axis row to unit Euclidean norm. Rows with norm below
    /// [`L2_NORM_FLOOR`] become zero and are counted in
    /// [`Graph::degenerate_norms`].
    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let c = t.cols();
        let rows = t.rows();
        let mut out = vec![0.0; t.len()];
        let mut inv_norm = vec![0.0; rows];
        let mut degenerate = 0;
        for r in 0..rows {
            let row = t.row_slice(r);
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n < L2_NORM_FLOOR {
                degenerate += 1;
                continue;
            }
            let inv = 1.0 / n;
            inv_norm[r] = inv;
            for j in 0..c {
                out[r * c + j] = row[j] * inv;
            }
        }
        let out = Tensor::from_parts(t.shape().to_vec(), out);
        self.degenerate_norms += degenerate;
        let rg = self.rg(&[x]);
        self.push(out, Op::L2Normalize { x, inv_norm }, rg)
    }

    fn check_rows(&self, primitive: &'static str, table: Var, rows: &[usize]) -> Result<(), TensorError> {
        let t = self.value(table);
        let len = t.rows();
        if let Some(&bad) = rows.iter().find(|r| **r >= len) {
            return Err(TensorError::IndexOutOfRange {
                primitive,
                index: bad,
                len,
            });
        }
        Ok(())
    }

    /// Row lookup: `[V,d]`, `n` ids → `[n,d]`.
    pub fn gather(&mut self, table: Var, rows: &[usize]) -> Result<Var, TensorError> {
        self.check_rows("gather", table, rows)?;
        let t = self.value(table);
        let c = t.cols();
        let mut out = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            out.extend_from_slice(t.row_slice(r));
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            Tensor::from_parts(vec![rows.len(), c], out),
            Op::Gather {
                table,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    /// Sum of looked-up rows per bag: `[V,d]`, `n` bags → `[n,d]`. An empty
    /// bag yields a zero row.
    pub fn embedding_bag(&mut self, table: Var, bags: &[Vec<usize>]) -> Result<Var, TensorError> {
        for bag in bags {
            self.check_rows("embedding_bag", table, bag)?;
        }
        let t = self.value(table);
        let c = t.cols();
        let mut out = vec![0.0; bags.len() * c];
        for (b, bag) in bags.iter().enumerate() {
            let orow = &mut out[b * c..(b + 1) * c];
            for &r in bag {
                orow.iter_mut().zip(t.row_slice(r)).for_each(|(o, v)| *o += v);
            }
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            Tensor::from_parts(vec![bags.len(), c], out),
            Op::EmbeddingBag {
                table,
                bags: bags.to_vec(),
            },
            rg,
        ))
    }

    /// Sum over rows: `[m,n] → [1,n]`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let c = t.cols();
        let mut out = vec![0.0; c];
        for r in 0..t.rows() {
            out.iter_mut().zip(t.row_slice(r)).for_each(|(o, v)| *o += v);
        }
        let rg = self.rg(&[a]);
        self.push(Tensor::from_parts(vec![1, c], out), Op::SumRows(a), rg)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::SumAll(a), rg)
    }

    /// Stacks rows of inputs sharing the last extent.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let c = self.value(parts[0]).cols();
        let mut rows = 0;
        for p in parts {
            let t = self.value(*p);
            if t.cols() != c {
                return Err(shape_err("concat", self.value(parts[0]), t));
            }
            rows += t.rows();
        }
        let mut out = Vec::with_capacity(rows * c);
        for p in parts {
            out.extend_from_slice(self.value(*p).data());
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::from_parts(vec![rows, c], out),
            Op::Concat(parts.to_vec()),
            rg,
        ))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let t = self.value(a);
        if start + len > t.rows() {
            return Err(TensorError::IndexOutOfRange {
                primitive: "slice_rows",
                index: start + len,
                len: t.rows(),
            });
        }
        let c = t.cols();
        let out = t.data()[start * c..(start + len) * c].to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor::from_parts(vec![len, c], out),
            Op::SliceRows { x: a, start },
            rg,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var, TensorError> {
        let t = self.value(a);
        if shape.iter().product::<usize>() != t.len() {
            return Err(TensorError::ShapeMismatch {
                primitive: "reshape",
                lhs: t.shape().to_vec(),
                rhs: shape,
            });
        }
        let out = Tensor::from_parts(shape, t.data().to_vec());
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    /// Multi-head scaled dot-product attention over `[L,d]` queries, keys and
    /// values. `key_mask[j] == false` removes key `j` from every softmax.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        key_mask: &[bool],
    ) -> Result<Var, TensorError> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        if tq.shape().len() != 2 || tq.shape() != tk.shape() {
            return Err(shape_err("attention", tq, tk));
        }
        if tq.shape() != tv.shape() {
            return Err(shape_err("attention", tq, tv));
        }
        let (l, d) = (tq.shape()[0], tq.shape()[1]);
        if heads == 0 || d % heads != 0 {
            return Err(TensorError::Invalid {
                primitive: "attention",
                detail: format!("width {d} not divisible by {heads} heads"),
            });
        }
        if key_mask.len() != l {
            return Err(TensorError::Invalid {
                primitive: "attention",
                detail: format!("mask length {} for sequence length {l}", key_mask.len()),
            });
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
        let mut probs = vec![0.0; heads * l * l];
        let mut out = vec![0.0; l * d];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..l {
                let qi = &qd[i * d + off..i * d + off + dh];
                let p = &mut probs[(h * l + i) * l..(h * l + i + 1) * l];
                let mut m = f64::NEG_INFINITY;
                for j in 0..l {
                    let kj = &kd[j * d + off..j * d + off + dh];
                    let mut s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                    if !key_mask[j] {
                        s += ATTENTION_MASK_LOGIT;
                    }
                    p[j] = s;
                    m = m.max(s);
                }
                let mut z = 0.0;
                for pj in p.iter_mut() {
                    *pj = (*pj - m).exp();
                    z += *pj;
                }
                let orow = &mut out[i * d + off..i * d + off + dh];
                for j in 0..l {
                    p[j] /= z;
                    let w = p[j];
                    if w == 0.0 {
                        continue;
                    }
                    let vj = &vd[j * d + off..j * d + off + dh];
                    orow.iter_mut().zip(vj).for_each(|(o, x)| *o += w * x);
                }
            }
        }
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            Tensor::from_parts(vec![l, d], out),
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Backward, TensorError> {
        let rt = self.value(root);
        if !rt.is_scalar() {
            return Err(TensorError::NonScalarRoot(rt.shape().to_vec()));
        }
        let mut params = Gradients::new();
        let mut leaves = HashMap::new();
        if !self.nodes[root.0].requires_grad {
            return Ok(Backward { params, leaves });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Leaf => {
                    leaves.insert(Var(idx), g);
                }
                Op::Param(id) => params.add_dense(*id, &g),
                op => self.propagate(Var(idx), op, &g, &mut grads, &mut params),
            }
        }
        Ok(Backward { params, leaves })
    }

    fn propagate(
        &self,
        out: Var,
        op: &Op,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        params: &mut Gradients,
    ) {
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        match op {
            Op::Leaf | Op::Param(_) => unreachable!(),
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if needs(*a) {
                    let bd = tb.data();
                    accumulate_with(grads, *a, m * k, |ga| {
                        for i in 0..m {
                            let grow = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                let brow = &bd[p * n..(p + 1) * n];
                                ga[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                            }
                        }
                    });
                }
                if needs(*b) {
                    let ad = ta.data();
                    accumulate_with(grads, *b, k * n, |gb| {
                        for i in 0..m {
                            let grow = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                let s = ad[i * k + p];
                                if s == 0.0 {
                                    continue;
                                }
                                gb[p * n..(p + 1) * n]
                                    .iter_mut()
                                    .zip(grow)
                                    .for_each(|(o, x)| *o += s * x);
                            }
                        }
                    });
                }
            }
            Op::Transpose(a) => {
                let t = self.value(out);
                let (n, m) = (t.shape()[0], t.shape()[1]);
                let mut ga = vec![0.0; n * m];
                for j in 0..n {
                    for i in 0..m {
                        ga[i * n + j] = g[j * m + i];
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::Add(a, b, bc) | Op::Sub(a, b, bc) => {
                let sign = if matches!(op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if needs(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if needs(*b) {
                    let gb = self.reduce_bcast(*b, *bc, g.iter().map(|x| x * sign), g.len());
                    accumulate(grads, *b, gb);
                }
            }
            Op::Mul(a, b, bc) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if needs(*a) {
                    let bd = tb.data();
                    let c = ta.cols();
                    let ga: Vec<f64> = match bc {
                        Bcast::Same => g.iter().zip(bd).map(|(x, y)| x * y).collect(),
                        Bcast::Scalar => g.iter().map(|x| x * bd[0]).collect(),
                        Bcast::Row => g.iter().enumerate().map(|(i, x)| x * bd[i % c]).collect(),
                    };
                    accumulate(grads, *a, ga);
                }
                if needs(*b) {
                    let gb = self.reduce_bcast(
                        *b,
                        *bc,
                        g.iter().zip(ta.data()).map(|(x, y)| x * y),
                        g.len(),
                    );
                    accumulate(grads, *b, gb);
                }
            }
            Op::Scale(a, c) => accumulate(grads, *a, g.iter().map(|x| x * c).collect()),
            Op::Unary(a, kind) => {
                let x = self.value(*a).data();
                let y = self.value(out).data();
                let ga: Vec<f64> = match kind {
                    Unary::Relu => g
                        .iter()
                        .zip(x)
                        .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                        .collect(),
                    Unary::Sigmoid => g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect(),
                    Unary::Exp => g.iter().zip(y).map(|(g, y)| g * y).collect(),
                    Unary::Log => g.iter().zip(x).map(|(g, x)| g / x).collect(),
                    Unary::Softplus => g.iter().zip(x).map(|(g, x)| g * sigmoid(*x)).collect(),
                    Unary::LogSigmoid => g.iter().zip(x).map(|(g, x)| g * sigmoid(-*x)).collect(),
                };
                accumulate(grads, *a, ga);
            }
            Op::Softmax(a) => {
                let y = self.value(out);
                let c = y.cols();
                let mut ga = vec![0.0; y.len()];
                for r in 0..y.rows() {
                    let yr = y.row_slice(r);
                    let gr = &g[r * c..(r + 1) * c];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        ga[r * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::LogSumExp(a) => {
                let x = self.value(*a);
                let y = self.value(out).data();
                let c = x.cols();
                let mut ga = vec![0.0; x.len()];
                for r in 0..x.rows() {
                    for j in 0..c {
                        ga[r * c + j] = g[r] * (x.data()[r * c + j] - y[r]).exp();
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let tg = self.value(*gain).data();
                let c = tg.len();
                let rows = rstd.len();
                if needs(*x) {
                    let mut gx = vec![0.0; rows * c];
                    for r in 0..rows {
                        let gr = &g[r * c..(r + 1) * c];
                        let hr = &xhat[r * c..(r + 1) * c];
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..c {
                            let dh = gr[j] * tg[j];
                            m1 += dh;
                            m2 += dh * hr[j];
                        }
                        m1 /= c as f64;
                        m2 /= c as f64;
                        for j in 0..c {
                            let dh = gr[j] * tg[j];
                            gx[r * c + j] = rstd[r] * (dh - m1 - hr[j] * m2);
                        }
                    }
                    accumulate(grads, *x, gx);
                }
                if needs(*gain) {
                    accumulate_with(grads, *gain, c, |gg| {
                        for r in 0..rows {
                            for j in 0..c {
                                gg[j] += g[r * c + j] * xhat[r * c + j];
                            }
                        }
                    });
                }
                if needs(*bias) {
                    accumulate_with(grads, *bias, c, |gb| {
                        for r in 0..rows {
                            for j in 0..c {
                                gb[j] += g[r * c + j];
                            }
                        }
                    });
                }
            }
            Op::L2Normalize { x, inv_norm } => {
                let y = self.value(out);
                let c = y.cols();
                let mut gx = vec![0.0; y.len()];
                for (r, inv) in inv_norm.iter().enumerate() {
                    if *inv == 0.0 {
                        continue;
                    }
                    let yr = y.row_slice(r);
                    let gr = &g[r * c..(r + 1) * c];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        gx[r * c + j] = (gr[j] - yr[j] * dot) * inv;
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::Gather { table, rows } => {
                let c = self.value(*table).cols();
                let bags = rows.iter().map(|r| std::slice::from_ref(r));
                self.scatter_rows(*table, c, bags, g, grads, params);
            }
            Op::EmbeddingBag { table, bags } => {
                let c = self.value(*table).cols();
                self.scatter_rows(*table, c, bags.iter().map(|b| b.as_slice()), g, grads, params);
            }
            Op::SumRows(a) => {
                let t = self.value(*a);
                let c = t.cols();
                let mut ga = vec![0.0; t.len()];
                for row in ga.chunks_mut(c.max(1)) {
                    row.copy_from_slice(&g[..c]);
                }
                accumulate(grads, *a, ga);
            }
            Op::SumAll(a) => {
                let n = self.value(*a).len();
                accumulate(grads, *a, vec![g[0]; n]);
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = self.value(*p).len();
                    if needs(*p) {
                        accumulate(grads, *p, g[off..off + n].to_vec());
                    }
                    off += n;
                }
            }
            Op::SliceRows { x, start } => {
                let t = self.value(*x);
                let c = t.cols();
                let len = t.len();
                let off = start * c;
                accumulate_with(grads, *x, len, |gx| {
                    gx[off..off + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(a, b)| *a += b);
                });
            }
            Op::Reshape(a) => accumulate(grads, *a, g.to_vec()),
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                let (tq, tk, tv) = (self.value(*q), self.value(*k), self.value(*v));
                let (l, d) = (tq.shape()[0], tq.shape()[1]);
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
                let mut gq = vec![0.0; l * d];
                let mut gk = vec![0.0; l * d];
                let mut gv = vec![0.0; l * d];
                let mut dp = vec![0.0; l];
                for h in 0..*heads {
                    let off = h * dh;
                    for i in 0..l {
                        let p = &probs[(h * l + i) * l..(h * l + i + 1) * l];
                        let gi = &g[i * d + off..i * d + off + dh];
                        let mut dot = 0.0;
                        for j in 0..l {
                            let vj = &vd[j * d + off..j * d + off + dh];
                            dp[j] = gi.iter().zip(vj).map(|(a, b)| a * b).sum();
                            dot += p[j] * dp[j];
                            if p[j] != 0.0 {
                                gv[j * d + off..j * d + off + dh]
                                    .iter_mut()
                                    .zip(gi)
                                    .for_each(|(o, x)| *o += p[j] * x);
                            }
                        }
                        for j in 0..l {
                            let ds = p[j] * (dp[j] - dot) * scale;
                            if ds == 0.0 {
                                continue;
                            }
                            let (qi, kj) = (i * d + off, j * d + off);
                            for t in 0..dh {
                                gq[qi + t] += ds * kd[kj + t];
                                gk[kj + t] += ds * qd[qi + t];
                            }
                        }
                    }
                }
                if needs(*q) {
                    accumulate(grads, *q, gq);
                }
                if needs(*k) {
                    accumulate(grads, *k, gk);
                }
                if needs(*v) {
                    accumulate(grads, *v, gv);
                }
            }
        }
    }

    fn reduce_bcast(
        &self,
        b: Var,
        bc: Bcast,
        g: impl Iterator<Item = f64>,
        glen: usize,
    ) -> Vec<f64> {
        let n = self.value(b).len();
        match bc {
            Bcast::Same => g.collect(),
            Bcast::Scalar => vec![g.sum()],
            Bcast::Row => {
                let mut out = vec![0.0; n];
                debug_assert_eq!(glen % n, 0);
                for (i, x) in g.enumerate() {
                    out[i % n] += x;
                }
                out
            }
        }
    }

    /// Backward of row lookups. Lookups straight from a parameter accumulate
    /// sparse rows instead of a dense table-sized buffer.
    fn scatter_rows<'a>(
        &self,
        table: Var,
        c: usize,
        bags: impl Iterator<Item = &'a [usize]>,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        params: &mut Gradients,
    ) {
        if let Op::Param(id) = self.nodes[table.0].op {
            for (b, bag) in bags.enumerate() {
                let gr = &g[b * c..(b + 1) * c];
                for &r in bag {
                    params.add_row(id, c, r, gr);
                }
            }
            return;
        }
        let len = self.value(table).len();
        accumulate_with(grads, table, len, |gt| {
            for (b, bag) in bags.enumerate() {
                let gr = &g[b * c..(b + 1) * c];
                for &r in bag {
                    gt[r * c..(r + 1) * c]
                        .iter_mut()
                        .zip(gr)
                        .for_each(|(a, x)| *a += x);
                }
            }
        });
    }
}
