use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{gemm, MatView, Result, Scalar, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Fill value for causally masked attention scores.
pub(crate) const CAUSAL_FILL: f64 = -1e9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OpKind {
    Leaf,
    Add,
    AddBroadcast,
    Mul,
    MulBroadcast,
    Scale,
    Matmul,
    Transpose,
    Reshape,
    Embedding,
    Softmax,
    LayerNorm,
    Gelu,
    Dropout,
    CausalMask,
    FillColumns,
    CrossEntropy,
    Sum,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Add => "add",
            OpKind::AddBroadcast => "add_broadcast",
            OpKind::Mul => "mul",
            OpKind::MulBroadcast => "mul_broadcast",
            OpKind::Scale => "scale",
            OpKind::Matmul => "matmul",
            OpKind::Transpose => "transpose",
            OpKind::Reshape => "reshape",
            OpKind::Embedding => "embedding_lookup",
            OpKind::Softmax => "softmax",
            OpKind::LayerNorm => "layer_norm",
            OpKind::Gelu => "gelu",
            OpKind::Dropout => "dropout",
            OpKind::CausalMask => "causal_mask",
            OpKind::FillColumns => "fill_columns",
            OpKind::CrossEntropy => "cross_entropy",
            OpKind::Sum => "sum",
        }
    }
}

impl std::fmt::Display for OpKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    AddBroadcast(Var, Var),
    Mul(Var, Var),
    MulBroadcast(Var, Var),
    Scale(Var, T),
    Matmul {
        a: Var,
        b: Var,
        trans_b: bool,
        shared_b: bool,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Transpose {
        a: Var,
        d0: usize,
        d1: usize,
    },
    Reshape(Var),
    Embedding {
        table: Var,
        ids: Vec<u32>,
    },
    Softmax {
        a: Var,
        axis: usize,
    },
    LayerNorm {
        a: Var,
        rstd: Vec<T>,
    },
    Gelu(Var),
    Dropout {
        a: Var,
        mask: Vec<T>,
    },
    CausalMask(Var),
    FillColumns {
        a: Var,
        cols: Vec<bool>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<u32>,
        ignore: Option<u32>,
        probs: Vec<T>,
        count: usize,
    },
    Sum(Var),
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add(..) => OpKind::Add,
            Op::AddBroadcast(..) => OpKind::AddBroadcast,
            Op::Mul(..) => OpKind::Mul,
            Op::MulBroadcast(..) => OpKind::MulBroadcast,
            Op::Scale(..) => OpKind::Scale,
            Op::Matmul { .. } => OpKind::Matmul,
            Op::Transpose { .. } => OpKind::Transpose,
            Op::Reshape(..) => OpKind::Reshape,
            Op::Embedding { .. } => OpKind::Embedding,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Gelu(..) => OpKind::Gelu,
            Op::Dropout { .. } => OpKind::Dropout,
            Op::CausalMask(..) => OpKind::CausalMask,
            Op::FillColumns { .. } => OpKind::FillColumns,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::Sum(..) => OpKind::Sum,
        }
    }
}

struct Node<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    grad: Option<Vec<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records operations in execution order for one forward/backward pass.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    consumed: bool,
    fault: Option<OpKind>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn transpose_data<T: Copy>(data: &[T], shape: &[usize], d0: usize, d1: usize) -> (Vec<usize>, Vec<T>) {
    let mut out_shape = shape.to_vec();
    out_shape.swap(d0, d1);
    let in_strides = row_major_strides(shape);
    let mut perm_strides = in_strides.clone();
    perm_strides.swap(d0, d1);
    let mut out = Vec::with_capacity(data.len());
    let nd = out_shape.len();
    let mut idx = vec![0usize; nd];
    for _ in 0..data.len() {
        let src: usize = idx.iter().zip(&perm_strides).map(|(i, s)| i * s).sum();
        out.push(data[src]);
        for d in (0..nd).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    (out_shape, out)
}

fn gelu_parts<T: Scalar>(x: T) -> (T, T) {
    // tanh approximation; returns (value, derivative)
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let k = T::lit(0.044715);
    let half = T::lit(0.5);
    let one = T::one();
    let x2 = x * x;
    let inner = c * (x + k * x2 * x);
    let t = inner.tanh();
    let value = half * x * (one + t);
    let d_inner = c * (one + T::lit(3.0) * k * x2);
    let deriv = half * (one + t) + half * x * (one - t * t) * d_inner;
    (value, deriv)
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
            fault: None,
        }
    }

    /// Corrupts the backward rule of one op kind (gradient-check fault injection).
    pub fn inject_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Distinct op kinds recorded so far, leaves excluded.
    pub fn ops_used(&self) -> BTreeSet<OpKind> {
        self.nodes
            .iter()
            .map(|n| n.op.kind())
            .filter(|&k| k != OpKind::Leaf)
            .collect()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<T>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), data.len());
        self.nodes.push(Node {
            shape,
            data,
            grad: None,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Registers a tensor; it receives a gradient if `requires_grad` is set.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape.clone(), t.data.clone(), Op::Leaf, t.requires_grad)
    }

    /// Registers a trainable parameter.
    pub fn param(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape.clone(), t.data.clone(), Op::Leaf, true)
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<T>) -> Result<Var> {
        if numel(&shape) != data.len() {
            return Err(TensorError::Parameter {
                op: "constant",
                msg: format!("shape {shape:?} needs {} values, got {}", numel(&shape), data.len()),
            });
        }
        Ok(self.push(shape, data, Op::Leaf, false))
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor {
            shape: n.shape.clone(),
            data: n.data.clone(),
            requires_grad: n.needs_grad,
            grad: n.grad.clone(),
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::Shape {
                op,
                a: self.shape(a).to_vec(),
                b: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn broadcastable(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(TensorError::Shape {
                op,
                a: sa.to_vec(),
                b: sb.to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(self.shape(a).to_vec(), data, Op::Add(a, b), ng))
    }

    /// `a + b` with `b` repeated over the leading dimensions of `a`.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcastable("add_broadcast", a, b)?;
        let bv = self.value(b);
        let nb = bv.len();
        let data = self
            .value(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bv[i % nb])
            .collect();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(self.shape(a).to_vec(), data, Op::AddBroadcast(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(self.shape(a).to_vec(), data, Op::Mul(a, b), ng))
    }

    /// `a ⊙ b` with `b` repeated over the leading dimensions of `a`.
    pub fn mul_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcastable("mul_broadcast", a, b)?;
        let bv = self.value(b);
        let nb = bv.len();
        let data = self
            .value(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| x * bv[i % nb])
            .collect();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(self.shape(a).to_vec(), data, Op::MulBroadcast(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let data = self.value(a).iter().map(|&x| x * s).collect();
        let ng = self.ng(a);
        Ok(self.push(self.shape(a).to_vec(), data, Op::Scale(a, s), ng))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ`, reading `b` in its stored layout.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let err = || TensorError::Shape {
            op: "matmul",
            a: sa.clone(),
            b: sb.clone(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(err());
        }
        let m = sa[sa.len() - 2];
        let k = sa[sa.len() - 1];
        let (kb, n) = if trans_b {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        if kb != k {
            return Err(err());
        }
        let shared_b = sb.len() == 2;
        let batch: usize = numel(&sa[..sa.len() - 2]);
        if !shared_b && sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(err());
        }
        let mut out_shape = sa[..sa.len() - 2].to_vec();
        out_shape.extend([m, n]);
        let mut out = vec![T::zero(); batch * m * n];
        {
            let (av, bv) = (self.value(a), self.value(b));
            if shared_b {
                gemm(
                    MatView { data: av, rows: batch * m, cols: k, transposed: false },
                    MatView { data: bv, rows: k, cols: n, transposed: trans_b },
                    &mut out,
                    false,
                );
            } else {
                for bi in 0..batch {
                    gemm(
                        MatView { data: &av[bi * m * k..], rows: m, cols: k, transposed: false },
                        MatView { data: &bv[bi * k * n..], rows: k, cols: n, transposed: trans_b },
                        &mut out[bi * m * n..],
                        false,
                    );
                }
            }
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(
            out_shape,
            out,
            Op::Matmul { a, b, trans_b, shared_b, batch, m, k, n },
            ng,
        ))
    }

    /// Swaps two axes.
    pub fn transpose(&mut self, a: Var, d0: usize, d1: usize) -> Result<Var> {
        let rank = self.shape(a).len();
        if d0 >= rank || d1 >= rank {
            return Err(TensorError::Parameter {
                op: "transpose",
                msg: format!("axes ({d0}, {d1}) out of range for rank {rank}"),
            });
        }
        let (shape, data) = transpose_data(self.value(a), self.shape(a), d0, d1);
        let ng = self.ng(a);
        Ok(self.push(shape, data, Op::Transpose { a, d0, d1 }, ng))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        if numel(&shape) != self.value(a).len() {
            return Err(TensorError::Shape {
                op: "reshape",
                a: self.shape(a).to_vec(),
                b: shape,
            });
        }
        let data = self.value(a).to_vec();
        let ng = self.ng(a);
        Ok(self.push(shape, data, Op::Reshape(a), ng))
    }

    /// Rows of a `[V, d]` table gathered by id into `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let s = self.shape(table);
        if s.len() != 2 {
            return Err(TensorError::Parameter {
                op: "embedding_lookup",
                msg: format!("table must be 2-D, got {s:?}"),
            });
        }
        let (v, d) = (s[0], s[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= v) {
            return Err(TensorError::Parameter {
                op: "embedding_lookup",
                msg: format!("id {bad} out of range for {v} rows"),
            });
        }
        let tv = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&tv[i as usize * d..(i as usize + 1) * d]);
        }
        let ng = self.ng(table);
        Ok(self.push(
            vec![ids.len(), d],
            data,
            Op::Embedding { table, ids: ids.to_vec() },
            ng,
        ))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::Parameter {
                op: "softmax",
                msg: format!("axis {axis} out of range for {shape:?}"),
            });
        }
        let outer = numel(&shape[..axis]);
        let dim = shape[axis];
        let inner = numel(&shape[axis + 1..]);
        let x = self.value(a);
        let mut out = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * dim + j) * inner + i;
                let mut mx = T::neg_infinity();
                for j in 0..dim {
                    mx = mx.max(x[at(j)]);
                }
                let mut z = T::zero();
                for j in 0..dim {
                    let e = (x[at(j)] - mx).exp();
                    out[at(j)] = e;
                    z = z + e;
                }
                for j in 0..dim {
                    out[at(j)] = out[at(j)] / z;
                }
            }
        }
        let ng = self.ng(a);
        Ok(self.push(shape, out, Op::Softmax { a, axis }, ng))
    }

    /// Normalizes each last-axis row to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(TensorError::Parameter {
                op: "layer_norm",
                msg: format!("eps must be > 0, got {eps}"),
            });
        }
        let shape = self.shape(a).to_vec();
        let d = *shape.last().ok_or_else(|| TensorError::Parameter {
            op: "layer_norm",
            msg: "scalar input".into(),
        })?;
        let x = self.value(a);
        let rows = x.len() / d.max(1);
        let eps = T::lit(eps);
        let dn = T::from_usize(d).unwrap();
        let mut out = vec![T::zero(); x.len()];
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            for (o, &v) in out[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = (v - mean) * rs;
            }
            rstd.push(rs);
        }
        let ng = self.ng(a);
        Ok(self.push(shape, out, Op::LayerNorm { a, rstd }, ng))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let data = self.value(a).iter().map(|&x| gelu_parts(x).0).collect();
        let ng = self.ng(a);
        Ok(self.push(self.shape(a).to_vec(), data, Op::Gelu(a), ng))
    }

    /// Inverted dropout with a seeded mask; `p = 0` returns `a` unchanged.
    pub fn dropout(&mut self, a: Var, p: f64, seed: u64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::Parameter {
                op: "dropout",
                msg: format!("p must lie in [0, 1), got {p}"),
            });
        }
        if p == 0.0 {
            return Ok(a);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep = T::lit(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.value(a).len())
            .map(|_| {
                if rng.random::<f64>() < p {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let data = self.value(a).iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let ng = self.ng(a);
        Ok(self.push(self.shape(a).to_vec(), data, Op::Dropout { a, mask }, ng))
    }

    /// Replaces entries above the diagonal of the trailing square matrices
    /// with a large negative value.
    pub fn causal_mask(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let r = shape.len();
        if r < 2 || shape[r - 1] != shape[r - 2] {
            return Err(TensorError::Parameter {
                op: "causal_mask",
                msg: format!("needs trailing square dims, got {shape:?}"),
            });
        }
        let t = shape[r - 1];
        let fill = T::lit(CAUSAL_FILL);
        let mut data = self.value(a).to_vec();
        for (idx, v) in data.iter_mut().enumerate() {
            let j = idx % t;
            let i = (idx / t) % t;
            if j > i {
                *v = fill;
            }
        }
        let ng = self.ng(a);
        Ok(self.push(shape, data, Op::CausalMask(a), ng))
    }

    /// Overwrites the last-axis columns flagged in `cols` with `value`.
    pub fn fill_columns(&mut self, a: Var, cols: &[bool], value: T) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.last() != Some(&cols.len()) {
            return Err(TensorError::Shape {
                op: "fill_columns",
                a: shape,
                b: vec![cols.len()],
            });
        }
        let c = cols.len();
        let mut data = self.value(a).to_vec();
        for (idx, v) in data.iter_mut().enumerate() {
            if cols[idx % c] {
                *v = value;
            }
        }
        let ng = self.ng(a);
        Ok(self.push(shape, data, Op::FillColumns { a, cols: cols.to_vec() }, ng))
    }

    /// Mean negative log-likelihood over rows whose target is not `ignore_index`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[u32], ignore_index: Option<u32>) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        let v = *shape.last().ok_or_else(|| TensorError::Parameter {
            op: "cross_entropy",
            msg: "scalar logits".into(),
        })?;
        let rows = numel(&shape) / v.max(1);
        if targets.len() != rows {
            return Err(TensorError::Shape {
                op: "cross_entropy",
                a: shape,
                b: vec![targets.len()],
            });
        }
        if let Some(ig) = ignore_index {
            if ig as usize >= v {
                return Err(TensorError::Parameter {
                    op: "cross_entropy",
                    msg: format!("ignore_index {ig} outside vocabulary of {v}"),
                });
            }
        }
        let x = self.value(logits);
        let mut probs = vec![T::zero(); x.len()];
        let mut total = 0.0f64;
        let mut count = 0usize;
        for r in 0..rows {
            let t = targets[r];
            let row = &x[r * v..(r + 1) * v];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for (p, &l) in probs[r * v..(r + 1) * v].iter_mut().zip(row) {
                *p = (l - mx).exp();
                z = z + *p;
            }
            for p in &mut probs[r * v..(r + 1) * v] {
                *p = *p / z;
            }
            if Some(t) == ignore_index {
                continue;
            }
            if t as usize >= v {
                return Err(TensorError::Parameter {
                    op: "cross_entropy",
                    msg: format!("target {t} outside vocabulary of {v}"),
                });
            }
            let logp = row[t as usize] - mx - z.ln();
            total -= logp.to_f64().unwrap();
            count += 1;
        }
        if count == 0 {
            return Err(TensorError::Parameter {
                op: "cross_entropy",
                msg: "no supervised positions".into(),
            });
        }
        let loss = T::from_f64(total / count as f64).unwrap();
        let ng = self.ng(logits);
        Ok(self.push(
            vec![],
            vec![loss],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                ignore: ignore_index,
                probs,
                count,
            },
            ng,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).iter().copied().sum();
        let ng = self.ng(a);
        Ok(self.push(vec![], vec![s], Op::Sum(a), ng))
    }

    /// Populates gradients of every node that depends on a trainable leaf.
    /// A tape supports exactly one backward pass.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(TensorError::Backward("tape already used for a backward pass".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(TensorError::Backward(format!(
                "loss must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_with(loss, vec![T::one()])
    }

    /// Backward pass seeded with an explicit upstream gradient for `out`.
    pub fn backward_with(&mut self, out: Var, seed: Vec<T>) -> Result<()> {
        if self.consumed {
            return Err(TensorError::Backward("tape already used for a backward pass".into()));
        }
        if seed.len() != self.value(out).len() {
            return Err(TensorError::Backward(format!(
                "seed has {} values, output has {}",
                seed.len(),
                self.value(out).len()
            )));
        }
        self.consumed = true;
        self.nodes[out.0].grad = Some(seed);
        for i in (0..=out.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let mut contribs = self.local_grads(i, &g);
            if self.fault == Some(self.nodes[i].op.kind()) {
                let s = T::lit(1.25);
                for (_, c) in &mut contribs {
                    c.iter_mut().for_each(|x| *x = *x * s);
                }
            }
            self.nodes[i].grad = Some(g);
            for (v, c) in contribs {
                let node = &mut self.nodes[v.0];
                if !node.needs_grad {
                    continue;
                }
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&c).for_each(|(a, &b)| *a = *a + b),
                    None => node.grad = Some(c),
                }
            }
        }
        Ok(())
    }

    fn local_grads(&self, i: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::AddBroadcast(a, b) => {
                let nb = self.value(*b).len();
                let mut gb = vec![T::zero(); nb];
                for (j, &x) in g.iter().enumerate() {
                    gb[j % nb] = gb[j % nb] + x;
                }
                vec![(*a, g.to_vec()), (*b, gb)]
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let ga = g.iter().zip(bv).map(|(&x, &y)| x * y).collect();
                let gb = g.iter().zip(av).map(|(&x, &y)| x * y).collect();
                vec![(*a, ga), (*b, gb)]
            }
            Op::MulBroadcast(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let nb = bv.len();
                let mut gb = vec![T::zero(); nb];
                let mut ga = Vec::with_capacity(g.len());
                for (j, &x) in g.iter().enumerate() {
                    ga.push(x * bv[j % nb]);
                    gb[j % nb] = gb[j % nb] + x * av[j];
                }
                vec![(*a, ga), (*b, gb)]
            }
            Op::Scale(a, s) => vec![(*a, g.iter().map(|&x| x * *s).collect())],
            Op::Matmul { a, b, trans_b, shared_b, batch, m, k, n } => {
                let (a, b, trans_b, batch, m, k, n) = (*a, *b, *trans_b, *batch, *m, *k, *n);
                let (av, bv) = (self.value(a), self.value(b));
                let mut out = Vec::new();
                if self.ng(a) {
                    let mut ga = vec![T::zero(); av.len()];
                    // dA = dC · Bᵀ; Bᵀ is the stored layout when trans_b
                    let bt = |data| MatView { data, rows: n, cols: k, transposed: !trans_b };
                    if *shared_b {
                        gemm(
                            MatView { data: g, rows: batch * m, cols: n, transposed: false },
                            bt(bv),
                            &mut ga,
                            false,
                        );
                    } else {
                        for bi in 0..batch {
                            gemm(
                                MatView { data: &g[bi * m * n..], rows: m, cols: n, transposed: false },
                                bt(&bv[bi * k * n..]),
                                &mut ga[bi * m * k..],
                                false,
                            );
                        }
                    }
                    out.push((a, ga));
                }
                if self.ng(b) {
                    let mut gb = vec![T::zero(); bv.len()];
                    let rows_a = if *shared_b { batch * m } else { m };
                    let groups = if *shared_b { 1 } else { batch };
                    for bi in 0..groups {
                        let a_blk = &av[bi * m * k..];
                        let g_blk = &g[bi * m * n..];
                        let gb_blk = &mut gb[bi * k * n..];
                        if trans_b {
                            // dBᵀ[n,k] = dCᵀ · A
                            gemm(
                                MatView { data: g_blk, rows: n, cols: rows_a, transposed: true },
                                MatView { data: a_blk, rows: rows_a, cols: k, transposed: false },
                                gb_blk,
                                false,
                            );
                        } else {
                            // dB[k,n] = Aᵀ · dC
                            gemm(
                                MatView { data: a_blk, rows: k, cols: rows_a, transposed: true },
                                MatView { data: g_blk, rows: rows_a, cols: n, transposed: false },
                                gb_blk,
                                false,
                            );
                        }
                    }
                    out.push((b, gb));
                }
                out
            }
            Op::Transpose { a, d0, d1 } => {
                let (_, back) = transpose_data(g, &node.shape, *d0, *d1);
                vec![(*a, back)]
            }
            Op::Reshape(a) => vec![(*a, g.to_vec())],
            Op::Embedding { table, ids } => {
                let tshape = self.shape(*table);
                let d = tshape[1];
                let mut gt = vec![T::zero(); tshape[0] * d];
                for (r, &id) in ids.iter().enumerate() {
                    let dst = &mut gt[id as usize * d..(id as usize + 1) * d];
                    for (x, &y) in dst.iter_mut().zip(&g[r * d..(r + 1) * d]) {
                        *x = *x + y;
                    }
                }
                vec![(*table, gt)]
            }
            Op::Softmax { a, axis } => {
                let shape = &node.shape;
                let y = &node.data;
                let outer = numel(&shape[..*axis]);
                let dim = shape[*axis];
                let inner = numel(&shape[*axis + 1..]);
                let mut gx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * dim + j) * inner + i;
                        let dot: T = (0..dim).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..dim {
                            gx[at(j)] = y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
                vec![(*a, gx)]
            }
            Op::LayerNorm { a, rstd } => {
                let d = *node.shape.last().unwrap();
                let xhat = &node.data;
                let dn = T::from_usize(d).unwrap();
                let mut gx = vec![T::zero(); xhat.len()];
                for (r, &rs) in rstd.iter().enumerate() {
                    let gr = &g[r * d..(r + 1) * d];
                    let xr = &xhat[r * d..(r + 1) * d];
                    let mg = gr.iter().copied().sum::<T>() / dn;
                    let mgx = gr.iter().zip(xr).map(|(&u, &v)| u * v).sum::<T>() / dn;
                    for j in 0..d {
                        gx[r * d + j] = rs * (gr[j] - mg - xr[j] * mgx);
                    }
                }
                vec![(*a, gx)]
            }
            Op::Gelu(a) => {
                let x = self.value(*a);
                vec![(*a, g.iter().zip(x).map(|(&u, &v)| u * gelu_parts(v).1).collect())]
            }
            Op::Dropout { a, mask } => vec![(*a, g.iter().zip(mask).map(|(&u, &m)| u * m).collect())],
            Op::CausalMask(a) => {
                let t = *node.shape.last().unwrap();
                let gx = g
                    .iter()
                    .enumerate()
                    .map(|(idx, &u)| if idx % t > (idx / t) % t { T::zero() } else { u })
                    .collect();
                vec![(*a, gx)]
            }
            Op::FillColumns { a, cols } => {
                let c = cols.len();
                let gx = g
                    .iter()
                    .enumerate()
                    .map(|(idx, &u)| if cols[idx % c] { T::zero() } else { u })
                    .collect();
                vec![(*a, gx)]
            }
            Op::CrossEntropy { logits, targets, ignore, probs, count } => {
                let v = *self.shape(*logits).last().unwrap();
                let scale = g[0] / T::from_usize(*count).unwrap();
                let mut gx = vec![T::zero(); probs.len()];
                for (r, &t) in targets.iter().enumerate() {
                    if Some(t) == *ignore {
                        continue;
                    }
                    for j in 0..v {
                        gx[r * v + j] = probs[r * v + j] * scale;
                    }
                    gx[r * v + t as usize] = gx[r * v + t as usize] - scale;
                }
                vec![(*logits, gx)]
            }
            Op::Sum(a) => vec![(*a, vec![g[0]; self.value(*a).len()])],
        }
    }
}
