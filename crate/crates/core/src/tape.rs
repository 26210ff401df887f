//! Define-by-run reverse-mode differentiation.
//!
//! Every operation appends a node holding its output value and whatever the
//! backward rule needs. Nodes are only ever appended, so the tape is
//! topologically ordered by construction and [`Tape::backward`] is a single
//! reverse sweep that visits each node once.

use crate::error::{Error, Result};
use crate::tensor::{gemm, gemm_at, gemm_bt, Real, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which `(row, col)` entries of a square score matrix take part in softmax.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mask {
    None,
    /// Column `i` is visible from row `t` when `i <= t`.
    Causal,
    /// Column `i` is visible from row `t` when `i < t`; row 0 is empty.
    StrictlyCausal,
}

impl Mask {
    #[inline]
    pub fn allows(self, row: usize, col: usize) -> bool {
        match self {
            Mask::None => true,
            Mask::Causal => col <= row,
            Mask::StrictlyCausal => col < row,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Tanh,
    Relu,
}

impl Activation {
    pub fn apply<T: Real>(self, x: T) -> T {
        match self {
            Activation::Sigmoid => T::one() / (T::one() + (-x).exp()),
            Activation::Tanh => x.tanh(),
            Activation::Relu => {
                if x > T::zero() {
                    x
                } else {
                    T::zero()
                }
            }
        }
    }

    /// Derivative expressed through the output `y`.
    fn slope<T: Real>(self, y: T) -> T {
        match self {
            Activation::Sigmoid => y * (T::one() - y),
            Activation::Tanh => T::one() - y * y,
            Activation::Relu => {
                if y > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
        }
    }
}

/// Operation families, used to name a rule for fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    MatMul,
    Add,
    Mul,
    Scale,
    Activation,
    Softmax,
    LayerNorm,
    CrossEntropy,
    Gather,
    Reshape,
    Sum,
}

impl std::str::FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "matmul" => OpKind::MatMul,
            "add" => OpKind::Add,
            "mul" => OpKind::Mul,
            "scale" => OpKind::Scale,
            "activation" => OpKind::Activation,
            "softmax" => OpKind::Softmax,
            "layer_norm" => OpKind::LayerNorm,
            "cross_entropy" => OpKind::CrossEntropy,
            "gather" => OpKind::Gather,
            "reshape" => OpKind::Reshape,
            "sum" => OpKind::Sum,
            other => return Err(Error::Config(format!("unknown op kind {other}"))),
        })
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Act(Var, Activation),
    Softmax(Var, Mask),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    Transpose(Var),
    Sum(Var),
}

impl<T> Op<T> {
    fn kind(&self) -> Option<OpKind> {
        Some(match self {
            Op::Leaf => return None,
            Op::MatMul(..) | Op::MatMulBt(..) => OpKind::MatMul,
            Op::Add(..) | Op::AddBias(..) => OpKind::Add,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::Act(..) => OpKind::Activation,
            Op::Softmax(..) => OpKind::Softmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::Gather { .. } => OpKind::Gather,
            Op::SliceCols { .. }
            | Op::ConcatCols(_)
            | Op::SliceRows { .. }
            | Op::ConcatRows(_)
            | Op::Transpose(_) => OpKind::Reshape,
            Op::Sum(_) => OpKind::Sum,
        })
    }
}

struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients produced by one backward sweep, indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
    fault: Option<(OpKind, f64)>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            fault: None,
        }
    }

    /// Scales every gradient flowing through rules of `kind` by `factor`.
    /// Exists so verification harnesses can prove they catch a wrong rule.
    #[doc(hidden)]
    pub fn corrupt_rule(&mut self, kind: OpKind, factor: f64) {
        self.fault = Some((kind, factor));
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a tensor as a leaf; it receives a gradient iff it requires one.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    pub fn param(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true)
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<T>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t.shape().to_vec(), t.into_data(), Op::Leaf, false))
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.value.clone()).expect("node shape is valid")
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::Shape {
                op,
                left: s.to_vec(),
                right: vec![0, 0],
            }),
        }
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                left: vec![m, k],
                right: vec![k2, n],
            });
        }
        let mut out = vec![T::zero(); m * n];
        gemm(self.value(a), self.value(b), m, k, n, &mut out);
        let g = self.needs(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), g))
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul_bt")?;
        let (n, k2) = self.dims2(b, "matmul_bt")?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul_bt",
                left: vec![m, k],
                right: vec![n, k2],
            });
        }
        let mut out = vec![T::zero(); m * n];
        gemm_bt(self.value(a), self.value(b), m, k, n, &mut out);
        let g = self.needs(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatMulBt(a, b), g))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let g = self.needs(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b), g))
    }

    /// Adds a length-`c` vector to every row of an `r×c` matrix.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (_, c) = self.dims2(x, "add_bias")?;
        if self.shape(b) != [c] {
            return Err(Error::Shape {
                op: "add_bias",
                left: self.shape(x).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let bias = self.value(b);
        let out: Vec<T> = self
            .value(x)
            .chunks(c)
            .flat_map(|row| row.iter().zip(bias).map(|(&v, &w)| v + w))
            .collect();
        let g = self.needs(&[x, b]);
        Ok(self.push(self.shape(x).to_vec(), out, Op::AddBias(x, b), g))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let g = self.needs(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a, b), g))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let out = self.value(x).iter().map(|&v| v * s).collect();
        let g = self.needs(&[x]);
        self.push(self.shape(x).to_vec(), out, Op::Scale(x, s), g)
    }

    /// Sign of every ReLU input recorded so far, in recording order. Two runs
    /// with equal patterns lie on the same linear piece of every ReLU.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            if let Op::Act(x, Activation::Relu) = node.op {
                out.extend(self.nodes[x.0].value.iter().map(|&v| v > T::zero()));
            }
        }
        out
    }

    pub fn activation(&mut self, x: Var, f: Activation) -> Var {
        let out = self.value(x).iter().map(|&v| f.apply(v)).collect();
        let g = self.needs(&[x]);
        self.push(self.shape(x).to_vec(), out, Op::Act(x, f), g)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Tanh)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu)
    }

    /// Row-wise softmax over the entries `mask` allows. Excluded entries are
    /// exactly zero.
    pub fn softmax_masked(&mut self, scores: Var, mask: Mask) -> Result<Var> {
        let (r, c) = self.dims2(scores, "softmax_masked")?;
        if mask != Mask::None && r != c {
            return Err(Error::Shape {
                op: "softmax_masked",
                left: vec![r, c],
                right: vec![r, r],
            });
        }
        let x = self.value(scores);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            let row = &x[i * c..(i + 1) * c];
            let max = (0..c)
                .filter(|&j| mask.allows(i, j))
                .map(|j| row[j])
                .fold(None, |m: Option<T>, v| Some(m.map_or(v, |m| m.max(v))))
                .ok_or(Error::DegenerateRow { row: i })?;
            let orow = &mut out[i * c..(i + 1) * c];
            let mut z = T::zero();
            for j in (0..c).filter(|&j| mask.allows(i, j)) {
                let e = (row[j] - max).exp();
                orow[j] = e;
                z = z + e;
            }
            for j in (0..c).filter(|&j| mask.allows(i, j)) {
                orow[j] = orow[j] / z;
            }
        }
        let g = self.needs(&[scores]);
        Ok(self.push(vec![r, c], out, Op::Softmax(scores, mask), g))
    }

    /// Normalizes each row to zero mean and unit variance, then applies
    /// `gain` and `bias`. Uses [`LAYER_NORM_EPS`] inside the square root.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let d = *self.shape(x).last().expect("rank >= 1");
        for p in [gain, bias] {
            if self.shape(p) != [d] {
                return Err(Error::Shape {
                    op: "layer_norm",
                    left: self.shape(x).to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
        }
        let eps = T::of(LAYER_NORM_EPS);
        let dn = T::of(d as f64);
        let xs = self.value(x);
        let (gv, bv) = (self.value(gain), self.value(bias));
        let rows = xs.len() / d;
        let mut xhat = vec![T::zero(); xs.len()];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xs.len()];
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let inv = T::one() / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv[j] + bv[j];
            }
        }
        let g = self.needs(&[x, gain, bias]);
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            shape,
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            g,
        ))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits` (`T×V`). Produces a shape-`[1]` node.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (t, v) = self.dims2(logits, "cross_entropy")?;
        if targets.len() != t {
            return Err(Error::Shape {
                op: "cross_entropy",
                left: vec![t, v],
                right: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&id| id >= v) {
            return Err(Error::Index {
                index: bad,
                limit: v,
            });
        }
        let x = self.value(logits);
        let mut probs = vec![T::zero(); t * v];
        let mut total = T::zero();
        for (r, &target) in targets.iter().enumerate() {
            let row = &x[r * v..(r + 1) * v];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&l| (l - max).exp()).sum();
            let lse = z.ln() + max;
            total = total + (lse - row[target]);
            for j in 0..v {
                probs[r * v + j] = (row[j] - lse).exp();
            }
        }
        let loss = total / T::of(t as f64);
        let g = self.needs(&[logits]);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            g,
        ))
    }

    /// Selects rows of a `V×d` table.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.dims2(table, "gather")?;
        let src = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Index { index: id, limit: v });
            }
            out.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        let g = self.needs(&[table]);
        Ok(self.push(
            vec![ids.len(), d],
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            g,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims2(x, "slice_cols")?;
        if start + len > c || len == 0 {
            return Err(Error::Index {
                index: start + len,
                limit: c,
            });
        }
        let out: Vec<T> = self
            .value(x)
            .chunks(c)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let g = self.needs(&[x]);
        Ok(self.push(vec![r, len], out, Op::SliceCols { x, start }, g))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::Shape {
            op: "concat_cols",
            left: vec![],
            right: vec![],
        })?;
        let (r, _) = self.dims2(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.dims2(p, "concat_cols")?;
            if pr != r {
                return Err(Error::Shape {
                    op: "concat_cols",
                    left: vec![r],
                    right: vec![pr],
                });
            }
            widths.push(pc);
        }
        let c: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[i * w..(i + 1) * w]);
            }
        }
        let g = self.needs(parts);
        Ok(self.push(vec![r, c], out, Op::ConcatCols(parts.to_vec()), g))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims2(x, "slice_rows")?;
        if start + len > r || len == 0 {
            return Err(Error::Index {
                index: start + len,
                limit: r,
            });
        }
        let out = self.value(x)[start * c..(start + len) * c].to_vec();
        let g = self.needs(&[x]);
        Ok(self.push(vec![len, c], out, Op::SliceRows { x, start }, g))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::Shape {
            op: "concat_rows",
            left: vec![],
            right: vec![],
        })?;
        let (_, c) = self.dims2(first, "concat_rows")?;
        let mut r = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (pr, pc) = self.dims2(p, "concat_rows")?;
            if pc != c {
                return Err(Error::Shape {
                    op: "concat_rows",
                    left: vec![c],
                    right: vec![pc],
                });
            }
            r += pr;
            out.extend_from_slice(self.value(p));
        }
        let g = self.needs(parts);
        Ok(self.push(vec![r, c], out, Op::ConcatRows(parts.to_vec()), g))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.tensor(x);
        if t.rank() != 2 {
            return Err(Error::Shape {
                op: "transpose",
                left: t.shape().to_vec(),
                right: vec![0, 0],
            });
        }
        let tt = t.transpose();
        let g = self.needs(&[x]);
        Ok(self.push(tt.shape().to_vec(), tt.into_data(), Op::Transpose(x), g))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum();
        let g = self.needs(&[x]);
        self.push(vec![1], vec![s], Op::Sum(x), g)
    }

    /// Reverse sweep from a scalar `loss`, consuming the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::NotScalar {
                shape: self.nodes[loss.0].shape.clone(),
            });
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(mut gout) = grads[i].take() else {
                continue;
            };
            if let (Some((kind, factor)), Some(k)) = (self.fault, node.op.kind()) {
                if kind == k {
                    let f = T::of(factor);
                    gout.iter_mut().for_each(|g| *g = *g * f);
                }
            }
            self.backprop_node(node, &gout, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(gout);
            }
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].needs_grad;
        let len_of = |v: Var| nodes[v.0].value.len();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let n = nodes[b.0].shape[1];
                if wants(*a) {
                    gemm_bt(g, &nodes[b.0].value, m, n, k, grad_buf(grads, *a, m * k));
                }
                if wants(*b) {
                    gemm_at(&nodes[a.0].value, g, m, k, n, grad_buf(grads, *b, k * n));
                }
            }
            Op::MatMulBt(a, b) => {
                let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let n = nodes[b.0].shape[0];
                if wants(*a) {
                    gemm(g, &nodes[b.0].value, m, n, k, grad_buf(grads, *a, m * k));
                }
                if wants(*b) {
                    gemm_at(g, &nodes[a.0].value, m, n, k, grad_buf(grads, *b, n * k));
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if wants(*v) {
                        accumulate(grads, *v, g);
                    }
                }
            }
            Op::AddBias(x, b) => {
                if wants(*x) {
                    accumulate(grads, *x, g);
                }
                if wants(*b) {
                    let c = len_of(*b);
                    let mut db = vec![T::zero(); c];
                    for row in g.chunks(c) {
                        db.iter_mut().zip(row).for_each(|(d, &v)| *d = *d + v);
                    }
                    accumulate(grads, *b, &db);
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let da = zip_map(g, &nodes[b.0].value, |x, y| x * y);
                    accumulate(grads, *a, &da);
                }
                if wants(*b) {
                    let db = zip_map(g, &nodes[a.0].value, |x, y| x * y);
                    accumulate(grads, *b, &db);
                }
            }
            Op::Scale(x, s) => {
                let dx: Vec<T> = g.iter().map(|&v| v * *s).collect();
                accumulate(grads, *x, &dx);
            }
            Op::Act(x, f) => {
                let dx = zip_map(g, &node.value, |gv, y| gv * f.slope(y));
                accumulate(grads, *x, &dx);
            }
            Op::Softmax(x, mask) => {
                let (r, c) = (node.shape[0], node.shape[1]);
                let y = &node.value;
                let mut dx = vec![T::zero(); r * c];
                for i in 0..r {
                    let yr = &y[i * c..(i + 1) * c];
                    let gr = &g[i * c..(i + 1) * c];
                    let dot: T = (0..c)
                        .filter(|&j| mask.allows(i, j))
                        .map(|j| yr[j] * gr[j])
                        .sum();
                    for j in (0..c).filter(|&j| mask.allows(i, j)) {
                        dx[i * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                accumulate(grads, *x, &dx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = len_of(*gain);
                let gv = &nodes[gain.0].value;
                if wants(*x) {
                    let dn = T::of(d as f64);
                    let mut dx = vec![T::zero(); xhat.len()];
                    for (r, &inv) in inv_std.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let dh: Vec<T> = gr.iter().zip(gv).map(|(&a, &b)| a * b).collect();
                        let sum_dh: T = dh.iter().copied().sum();
                        let sum_dh_h: T = dh.iter().zip(hr).map(|(&a, &b)| a * b).sum();
                        for j in 0..d {
                            dx[r * d + j] = inv / dn * (dn * dh[j] - sum_dh - hr[j] * sum_dh_h);
                        }
                    }
                    accumulate(grads, *x, &dx);
                }
                if wants(*gain) {
                    let mut dg = vec![T::zero(); d];
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dg[j] = dg[j] + gr[j] * hr[j];
                        }
                    }
                    accumulate(grads, *gain, &dg);
                }
                if wants(*bias) {
                    let mut db = vec![T::zero(); d];
                    for gr in g.chunks(d) {
                        db.iter_mut().zip(gr).for_each(|(a, &b)| *a = *a + b);
                    }
                    accumulate(grads, *bias, &db);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let v = nodes[logits.0].shape[1];
                let scale = g[0] / T::of(targets.len() as f64);
                let mut dx: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (r, &t) in targets.iter().enumerate() {
                    dx[r * v + t] = dx[r * v + t] - scale;
                }
                accumulate(grads, *logits, &dx);
            }
            Op::Gather { table, ids } => {
                let d = nodes[table.0].shape[1];
                let mut dt = vec![T::zero(); len_of(*table)];
                for (r, &id) in ids.iter().enumerate() {
                    let src = &g[r * d..(r + 1) * d];
                    dt[id * d..(id + 1) * d]
                        .iter_mut()
                        .zip(src)
                        .for_each(|(a, &b)| *a = *a + b);
                }
                accumulate(grads, *table, &dt);
            }
            Op::SliceCols { x, start } => {
                let c = nodes[x.0].shape[1];
                let w = node.shape[1];
                let mut dx = vec![T::zero(); len_of(*x)];
                for (r, gr) in g.chunks(w).enumerate() {
                    dx[r * c + start..r * c + start + w].copy_from_slice(gr);
                }
                accumulate(grads, *x, &dx);
            }
            Op::ConcatCols(parts) => {
                let c = node.shape[1];
                let mut off = 0;
                for p in parts {
                    let w = nodes[p.0].shape[1];
                    if wants(*p) {
                        let dp: Vec<T> = g
                            .chunks(c)
                            .flat_map(|row| row[off..off + w].iter().copied())
                            .collect();
                        accumulate(grads, *p, &dp);
                    }
                    off += w;
                }
            }
            Op::SliceRows { x, start } => {
                let c = node.shape[1];
                let mut dx = vec![T::zero(); len_of(*x)];
                dx[start * c..start * c + g.len()].copy_from_slice(g);
                accumulate(grads, *x, &dx);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = len_of(*p);
                    if wants(*p) {
                        accumulate(grads, *p, &g[off..off + n]);
                    }
                    off += n;
                }
            }
            Op::Transpose(x) => {
                let (r, c) = (node.shape[0], node.shape[1]);
                let mut dx = vec![T::zero(); r * c];
                for i in 0..r {
                    for j in 0..c {
                        dx[j * r + i] = g[i * c + j];
                    }
                }
                accumulate(grads, *x, &dx);
            }
            Op::Sum(x) => {
                let dx = vec![g[0]; len_of(*x)];
                accumulate(grads, *x, &dx);
            }
        }
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, g: &[T]) {
    match &mut grads[v.0] {
        Some(buf) => buf.iter_mut().zip(g).for_each(|(a, &b)| *a = *a + b),
        slot @ None => *slot = Some(g.to_vec()),
    }
}

/// Gradient buffer of `v`, created zeroed on first use; kernels add into it.
fn grad_buf<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut [T] {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn zip_map<T: Real>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}
