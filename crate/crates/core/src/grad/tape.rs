//! Define-by-run tape for reverse-mode differentiation.
//!
//! Every forward operation appends a node holding its output value and the
//! information its backward rule needs. Nodes only ever reference earlier
//! nodes, so a single reverse sweep over the arena visits them in a valid
//! topological order.

use std::collections::HashMap;

use rand::Rng;

use super::params::{ParamId, ParamStore};
use super::scalar::{sigmoid, softmax_into, Scalar};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Floor added inside the logarithm of [`Tape::cross_entropy`].
pub const CE_FLOOR: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive operation kinds, used for fault injection and diagnostics.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    MatMulT,
    Add,
    Sub,
    Mul,
    Sigmoid,
    Tanh,
    Exp,
    Log,
    Affine,
    Softmax,
    Concat,
    Narrow,
    Reshape,
    Embedding,
    ScatterAdd,
    CrossEntropy,
    Sum,
    Dropout,
    Mixture,
}

impl std::str::FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "matmul" => OpKind::MatMul,
            "matmul_t" => OpKind::MatMulT,
            "add" => OpKind::Add,
            "sub" => OpKind::Sub,
            "mul" => OpKind::Mul,
            "sigmoid" => OpKind::Sigmoid,
            "tanh" => OpKind::Tanh,
            "exp" => OpKind::Exp,
            "log" => OpKind::Log,
            "affine" => OpKind::Affine,
            "softmax" => OpKind::Softmax,
            "concat" => OpKind::Concat,
            "narrow" => OpKind::Narrow,
            "reshape" => OpKind::Reshape,
            "embedding" => OpKind::Embedding,
            "scatter_add" => OpKind::ScatterAdd,
            "cross_entropy" => OpKind::CrossEntropy,
            "sum" => OpKind::Sum,
            "dropout" => OpKind::Dropout,
            "mixture" => OpKind::Mixture,
            other => return Err(Error::Config(format!("unknown op kind `{other}`"))),
        })
    }
}

#[derive(Clone, Copy, Debug)]
enum BinKind {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug)]
enum UnaryKind<T> {
    Sigmoid,
    Tanh,
    Exp,
    Log,
    Affine { scale: T, shift: T },
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    MatMulT {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Binary {
        kind: BinKind,
        a: Var,
        b: Var,
    },
    Unary {
        kind: UnaryKind<T>,
        x: Var,
    },
    Softmax {
        x: Var,
        outer: usize,
        n: usize,
        inner: usize,
    },
    Concat {
        parts: Vec<Var>,
        outer: usize,
        widths: Vec<usize>,
    },
    Narrow {
        x: Var,
        outer: usize,
        full: usize,
        start: usize,
        len: usize,
    },
    Reshape {
        x: Var,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    ScatterAdd {
        x: Var,
        words: Vec<usize>,
    },
    CrossEntropy {
        p: Var,
        cols: usize,
        targets: Vec<Option<usize>>,
    },
    Sum {
        x: Var,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    Mixture {
        alpha: Var,
        beta: Var,
        pv: Var,
        pa: Var,
        pu: Var,
    },
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::MatMulT { .. } => OpKind::MatMulT,
            Op::Binary { kind, .. } => match kind {
                BinKind::Add => OpKind::Add,
                BinKind::Sub => OpKind::Sub,
                BinKind::Mul => OpKind::Mul,
            },
            Op::Unary { kind, .. } => match kind {
                UnaryKind::Sigmoid => OpKind::Sigmoid,
                UnaryKind::Tanh => OpKind::Tanh,
                UnaryKind::Exp => OpKind::Exp,
                UnaryKind::Log => OpKind::Log,
                UnaryKind::Affine { .. } => OpKind::Affine,
            },
            Op::Softmax { .. } => OpKind::Softmax,
            Op::Concat { .. } => OpKind::Concat,
            Op::Narrow { .. } => OpKind::Narrow,
            Op::Reshape { .. } => OpKind::Reshape,
            Op::Embedding { .. } => OpKind::Embedding,
            Op::ScatterAdd { .. } => OpKind::ScatterAdd,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::Sum { .. } => OpKind::Sum,
            Op::Dropout { .. } => OpKind::Dropout,
            Op::Mixture { .. } => OpKind::Mixture,
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded forward computation.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    bound: HashMap<ParamId, Var>,
    fault: Option<OpKind>,
}

/// Result of [`Tape::backward`]: gradients of the leaves reachable from the loss.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&[T]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// One gradient tensor per parameter in store order; parameters not bound
    /// on the tape or not reachable from the loss get zeros.
    pub fn param_grads(&self, tape: &Tape<T>, store: &ParamStore<T>) -> Vec<Tensor<T>> {
        store
            .iter()
            .map(|(id, _, value)| {
                let mut out = Tensor::zeros(value.shape());
                if let Some(g) = tape.bound.get(&id).and_then(|&v| self.get(v)) {
                    out.data_mut().copy_from_slice(g);
                }
                out
            })
            .collect()
    }
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    fn strip(s: &[usize]) -> &[usize] {
        let lead = s.iter().take_while(|&&d| d == 1).count();
        &s[lead..]
    }
    let na: usize = a.iter().product();
    let nb: usize = b.iter().product();
    if a == b {
        return Ok(a.to_vec());
    }
    let (big, small, n_small) = if na >= nb { (a, b, nb) } else { (b, a, na) };
    if n_small == 1 || strip(big).ends_with(strip(small)) {
        Ok(big.to_vec())
    } else {
        Err(Error::dim(op, a, b))
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn grad_slot<T: Scalar>(grads: &mut [Option<Vec<T>>], var: Var, len: usize) -> &mut [T] {
    grads[var.0].get_or_insert_with(|| vec![T::zero(); len])
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            bound: HashMap::new(),
            fault: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Scales the backward contribution of every `kind` node by 1.1. Used by
    /// verification harnesses to confirm that gradient checks catch a broken rule.
    pub fn inject_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// First element, for scalar nodes.
    pub fn item(&self, v: Var) -> T {
        self.data(v)[0]
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf that receives a gradient.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Binds a stored parameter onto the tape (once per tape).
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let v = self.leaf(store.get(id).clone());
        self.bound.insert(id, v);
        v
    }

    /// Matrix product. Rank-1 operands act as a row vector on the left or a
    /// column vector on the right, and the corresponding output axis is dropped.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let (m, k, a_vec) = match sa.as_slice() {
            [k] => (1, *k, true),
            [m, k] => (*m, *k, false),
            _ => return Err(Error::dim("matmul", &sa, &sb)),
        };
        let (k2, n, b_vec) = match sb.as_slice() {
            [k2] => (*k2, 1, true),
            [k2, n] => (*k2, *n, false),
            _ => return Err(Error::dim("matmul", &sa, &sb)),
        };
        if k != k2 {
            return Err(Error::dim("matmul", &sa, &sb));
        }
        let out_shape = match (a_vec, b_vec) {
            (true, true) => vec![1],
            (true, false) => vec![n],
            (false, true) => vec![m],
            (false, false) => vec![m, n],
        };
        let mut out = vec![T::zero(); m * n];
        let ad = self.data(a);
        let bd = self.data(b);
        if n == 1 {
            for i in 0..m {
                out[i] = dot(&ad[i * k..(i + 1) * k], bd);
            }
        } else {
            for i in 0..m {
                let orow = &mut out[i * n..(i + 1) * n];
                for p in 0..k {
                    let s = ad[i * k + p];
                    if s != T::zero() {
                        axpy(s, &bd[p * n..(p + 1) * n], orow);
                    }
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::MatMul { a, b, m, k, n }, rg))
    }

    /// `a · bᵀ` for 2-D `a: [m, k]` and `b: [n, k]`, giving `[m, n]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (m, k, n) = match (sa.as_slice(), sb.as_slice()) {
            ([m, k], [n, k2]) if k == k2 => (*m, *k, *n),
            _ => return Err(Error::dim("matmul_t", &sa, &sb)),
        };
        let (ad, bd) = (self.data(a), self.data(b));
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let ar = &ad[i * k..(i + 1) * k];
            for j in 0..n {
                out[i * n + j] = dot(ar, &bd[j * k..(j + 1) * k]);
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulT { a, b, m, k, n }, rg))
    }

    fn binary(&mut self, kind: BinKind, op: &'static str, a: Var, b: Var) -> Result<Var> {
        let shape = broadcast_shape(op, self.shape(a), self.shape(b))?;
        let ad = self.data(a);
        let bd = self.data(b);
        let (na, nb) = (ad.len(), bd.len());
        let numel = na.max(nb);
        let out: Vec<T> = (0..numel)
            .map(|i| {
                let (x, y) = (ad[i % na], bd[i % nb]);
                match kind {
                    BinKind::Add => x + y,
                    BinKind::Sub => x - y,
                    BinKind::Mul => x * y,
                }
            })
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::Binary { kind, a, b }, rg))
    }

    /// Elementwise sum; the smaller operand may broadcast over leading axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Add, "add", a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Sub, "sub", a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Mul, "mul", a, b)
    }

    fn unary(&mut self, kind: UnaryKind<T>, x: Var) -> Var {
        let value = self.value(x);
        let out: Vec<T> = value
            .data()
            .iter()
            .map(|&v| match kind {
                UnaryKind::Sigmoid => sigmoid(v),
                UnaryKind::Tanh => v.tanh(),
                UnaryKind::Exp => v.exp(),
                UnaryKind::Log => v.ln(),
                UnaryKind::Affine { scale, shift } => scale * v + shift,
            })
            .collect();
        let shape = value.shape().to_vec();
        let rg = self.rg(x);
        self.push(Tensor::new(shape, out).expect("same shape"), Op::Unary { kind, x }, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Sigmoid, x)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Tanh, x)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Exp, x)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Log, x)
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        self.affine(x, factor, T::zero())
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Var {
        self.unary(UnaryKind::Affine { scale, shift }, x)
    }

    /// `1 - x`.
    pub fn one_minus(&mut self, x: Var) -> Var {
        self.affine(x, -T::one(), T::one())
    }

    /// Softmax along `axis`, shifted by the per-slice maximum.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Contract(format!(
                "softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let xd = self.data(x);
        let mut out = vec![T::zero(); xd.len()];
        let mut buf_in = vec![T::zero(); n];
        let mut buf_out = vec![T::zero(); n];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                for j in 0..n {
                    buf_in[j] = xd[base + j * inner];
                }
                softmax_into(&buf_in, &mut buf_out);
                for j in 0..n {
                    out[base + j * inner] = buf_out[j];
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax { x, outer, n, inner }, rg))
    }

    /// Concatenation along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero parts".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::Contract(format!(
                "concat axis {axis} out of range for shape {base:?}"
            )));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(Error::dim("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let widths: Vec<usize> = parts.iter().map(|&p| self.shape(p)[axis] * inner).collect();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.data(p)[o * w..(o + 1) * w]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                parts: parts.to_vec(),
                outer,
                widths,
            },
            rg,
        ))
    }

    /// Stacks equal-shaped tensors along a new leading axis.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        let rows: Vec<Var> = parts
            .iter()
            .map(|&p| {
                let mut s = vec![1];
                s.extend_from_slice(self.shape(p));
                self.reshape(p, &s)
            })
            .collect::<Result<_>>()?;
        self.concat(&rows, 0)
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::Contract(format!(
                "narrow [{start}, {}) on axis {axis} of shape {shape:?}",
                start + len
            )));
        }
        let (outer, dim, inner) = split_axis(&shape, axis);
        let (full, s, l) = (dim * inner, start * inner, len * inner);
        let xd = self.data(x);
        let mut out = Vec::with_capacity(outer * l);
        for o in 0..outer {
            out.extend_from_slice(&xd[o * full + s..o * full + s + l]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            Op::Narrow {
                x,
                outer,
                full,
                start: s,
                len: l,
            },
            rg,
        ))
    }

    /// Row `i` of a 2-D tensor as a rank-1 tensor.
    pub fn row(&mut self, x: Var, i: usize) -> Result<Var> {
        let cols = match self.shape(x) {
            [_, c] => *c,
            s => return Err(Error::dim("row", s, &[i])),
        };
        let r = self.narrow(x, 0, i, 1)?;
        self.reshape(r, &[cols])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).numel() {
            return Err(Error::dim("reshape", self.shape(x), shape));
        }
        let value = Tensor::new(shape.to_vec(), self.data(x).to_vec())?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape { x }, rg))
    }

    /// Gathers rows of `table` (shape `[vocab, dim]`).
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, dim) = match self.shape(table) {
            [v, d] => (*v, *d),
            s => return Err(Error::dim("embedding", s, &[ids.len()])),
        };
        if ids.is_empty() {
            return Err(Error::Contract("embedding lookup of zero ids".into()));
        }
        let td = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            if id >= vocab {
                return Err(Error::Index {
                    op: "embedding",
                    index: id,
                    size: vocab,
                });
            }
            out.extend_from_slice(&td[id * dim..(id + 1) * dim]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::new(vec![ids.len(), dim], out)?,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Maps a distribution over positions onto the vocabulary:
    /// `out[w] = sum of x[k] over positions k whose word is w`. A 2-D `x`
    /// of shape `[rows, L]` is mapped row by row to `[rows, vocab]`.
    pub fn scatter_add_by_word(&mut self, x: Var, words: &[usize], vocab: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let rows = match shape.as_slice() {
            [l] if *l == words.len() => None,
            [r, l] if *l == words.len() => Some(*r),
            _ => return Err(Error::dim("scatter_add_by_word", &shape, &[words.len()])),
        };
        if let Some(&w) = words.iter().find(|&&w| w >= vocab) {
            return Err(Error::Index {
                op: "scatter_add_by_word",
                index: w,
                size: vocab,
            });
        }
        let xd = self.data(x);
        let r = rows.unwrap_or(1);
        let l = words.len();
        let mut out = vec![T::zero(); r * vocab];
        for i in 0..r {
            let dst = &mut out[i * vocab..(i + 1) * vocab];
            for (&w, &v) in words.iter().zip(&xd[i * l..(i + 1) * l]) {
                dst[w] += v;
            }
        }
        let out_shape = match rows {
            Some(r) => vec![r, vocab],
            None => vec![vocab],
        };
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            Op::ScatterAdd {
                x,
                words: words.to_vec(),
            },
            rg,
        ))
    }

    /// `-ln(p[target] + 1e-12)` for a distribution `p`.
    pub fn cross_entropy(&mut self, p: Var, target: usize) -> Result<Var> {
        let n = self.value(p).numel();
        self.ce(p, n, &[Some(target)])
    }

    /// Sum over rows of `p: [rows, n]` of `-ln(p[row, target] + 1e-12)`;
    /// rows whose target is `None` contribute nothing.
    pub fn cross_entropy_rows(&mut self, p: Var, targets: &[Option<usize>]) -> Result<Var> {
        match self.shape(p) {
            [r, n] if *r == targets.len() => {
                let n = *n;
                self.ce(p, n, targets)
            }
            s => Err(Error::dim("cross_entropy_rows", s, &[targets.len()])),
        }
    }

    fn ce(&mut self, p: Var, cols: usize, targets: &[Option<usize>]) -> Result<Var> {
        let pd = self.data(p);
        let mut loss = T::zero();
        for (r, t) in targets.iter().enumerate() {
            if let Some(t) = *t {
                if t >= cols {
                    return Err(Error::Index {
                        op: "cross_entropy",
                        index: t,
                        size: cols,
                    });
                }
                loss -= (pd[r * cols + t] + T::from_f64(CE_FLOOR)).ln();
            }
        }
        let rg = self.rg(p);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                p,
                cols,
                targets: targets.to_vec(),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.data(x).iter().copied().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(total), Op::Sum { x }, rg)
    }

    /// Sum of several scalars (or equal-shaped tensors).
    pub fn add_all(&mut self, parts: &[Var]) -> Result<Var> {
        let (&first, rest) = parts
            .split_first()
            .ok_or_else(|| Error::Contract("add_all of zero parts".into()))?;
        rest.iter().try_fold(first, |acc, &p| self.add(acc, p))
    }

    /// Inverted dropout: zeroes each element with probability `rate` and
    /// rescales survivors by `1 / (1 - rate)`. Identity when `rate == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Contract(format!("dropout rate {rate} outside [0, 1)")));
        }
        if rate == 0.0 {
            return Ok(x);
        }
        let keep = T::from_f64(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..self.value(x).numel())
            .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
            .collect();
        let out: Vec<T> = self.data(x).iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Dropout { x, mask }, rg))
    }

    /// Fused `alpha * pv + (1 - alpha) * (beta * pa + (1 - beta) * pu)`.
    /// `alpha` and `beta` hold one coefficient per row of the distributions
    /// (a single coefficient for rank-1 inputs).
    pub fn mixture(&mut self, alpha: Var, beta: Var, pv: Var, pa: Var, pu: Var) -> Result<Var> {
        let rows = self.value(alpha).numel();
        if self.value(beta).numel() != rows {
            return Err(Error::dim("mixture", self.shape(alpha), self.shape(beta)));
        }
        let n = self.value(pv).numel();
        if n % rows != 0 {
            return Err(Error::dim("mixture", self.shape(alpha), self.shape(pv)));
        }
        for p in [pa, pu] {
            if self.shape(p) != self.shape(pv) {
                return Err(Error::dim("mixture", self.shape(pv), self.shape(p)));
            }
        }
        let cols = n / rows;
        let mut out = vec![T::zero(); n];
        for r in 0..rows {
            let span = r * cols..(r + 1) * cols;
            mixture_into(
                self.data(alpha)[r],
                self.data(beta)[r],
                &self.data(pv)[span.clone()],
                &self.data(pa)[span.clone()],
                &self.data(pu)[span.clone()],
                &mut out[span],
            );
        }
        let shape = self.shape(pv).to_vec();
        let rg = [alpha, beta, pv, pa, pu].iter().any(|&v| self.rg(v));
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Mixture {
                alpha,
                beta,
                pv,
                pa,
                pu,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Contract("loss is not on this tape".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(mut g) = grads[i].take() else {
                continue;
            };
            if self.fault == Some(node.op.kind()) {
                let f = T::from_f64(1.1);
                g.iter_mut().for_each(|v| *v *= f);
            }
            self.backward_node(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                let ad = self.data(a);
                let bd = self.data(b);
                if self.rg(a) {
                    // dA = dC · Bᵀ
                    let da = grad_slot(grads, a, m * k);
                    for i in 0..m {
                        let gi = &g[i * n..(i + 1) * n];
                        let row = &mut da[i * k..(i + 1) * k];
                        if n == 1 {
                            axpy(gi[0], bd, row);
                        } else {
                            for (p, r) in row.iter_mut().enumerate() {
                                *r += dot(gi, &bd[p * n..(p + 1) * n]);
                            }
                        }
                    }
                }
                if self.rg(b) {
                    // dB = Aᵀ · dC
                    let db = grad_slot(grads, b, k * n);
                    for i in 0..m {
                        let gi = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let s = ad[i * k + p];
                            if s != T::zero() {
                                axpy(s, gi, &mut db[p * n..(p + 1) * n]);
                            }
                        }
                    }
                }
            }
            &Op::MatMulT { a, b, m, k, n } => {
                let ad = self.data(a);
                let bd = self.data(b);
                if self.rg(a) {
                    let da = grad_slot(grads, a, m * k);
                    for i in 0..m {
                        let row = &mut da[i * k..(i + 1) * k];
                        for j in 0..n {
                            let gij = g[i * n + j];
                            if gij != T::zero() {
                                axpy(gij, &bd[j * k..(j + 1) * k], row);
                            }
                        }
                    }
                }
                if self.rg(b) {
                    let db = grad_slot(grads, b, n * k);
                    for i in 0..m {
                        let ar = &ad[i * k..(i + 1) * k];
                        for j in 0..n {
                            let gij = g[i * n + j];
                            if gij != T::zero() {
                                axpy(gij, ar, &mut db[j * k..(j + 1) * k]);
                            }
                        }
                    }
                }
            }
            &Op::Binary { kind, a, b } => {
                let na = self.value(a).numel();
                let nb = self.value(b).numel();
                if self.rg(a) {
                    let bd = self.data(b);
                    let da = grad_slot(grads, a, na);
                    for (i, &gi) in g.iter().enumerate() {
                        da[i % na] += match kind {
                            BinKind::Add | BinKind::Sub => gi,
                            BinKind::Mul => gi * bd[i % nb],
                        };
                    }
                }
                if self.rg(b) {
                    let ad = self.data(a);
                    let db = grad_slot(grads, b, nb);
                    for (i, &gi) in g.iter().enumerate() {
                        db[i % nb] += match kind {
                            BinKind::Add => gi,
                            BinKind::Sub => -gi,
                            BinKind::Mul => gi * ad[i % na],
                        };
                    }
                }
            }
            &Op::Unary { kind, x } => {
                let xd = self.data(x);
                let dx = grad_slot(grads, x, xd.len());
                for i in 0..g.len() {
                    dx[i] += g[i]
                        * match kind {
                            UnaryKind::Sigmoid => y[i] * (T::one() - y[i]),
                            UnaryKind::Tanh => T::one() - y[i] * y[i],
                            UnaryKind::Exp => y[i],
                            UnaryKind::Log => T::one() / xd[i],
                            UnaryKind::Affine { scale, .. } => scale,
                        };
                }
            }
            &Op::Softmax { x, outer, n, inner } => {
                let dx = grad_slot(grads, x, y.len());
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * n * inner + i;
                        let mut s = T::zero();
                        for j in 0..n {
                            s += g[base + j * inner] * y[base + j * inner];
                        }
                        for j in 0..n {
                            let idx = base + j * inner;
                            dx[idx] += y[idx] * (g[idx] - s);
                        }
                    }
                }
            }
            Op::Concat { parts, outer, widths } => {
                let total: usize = widths.iter().sum();
                let mut offset = 0;
                for (&p, &w) in parts.iter().zip(widths) {
                    if self.rg(p) {
                        let dp = grad_slot(grads, p, outer * w);
                        for o in 0..*outer {
                            let src = &g[o * total + offset..o * total + offset + w];
                            for (d, &s) in dp[o * w..(o + 1) * w].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                    offset += w;
                }
            }
            &Op::Narrow {
                x,
                outer,
                full,
                start,
                len,
            } => {
                let dx = grad_slot(grads, x, outer * full);
                for o in 0..outer {
                    let dst = &mut dx[o * full + start..o * full + start + len];
                    for (d, &s) in dst.iter_mut().zip(&g[o * len..(o + 1) * len]) {
                        *d += s;
                    }
                }
            }
            &Op::Reshape { x } => {
                let dx = grad_slot(grads, x, g.len());
                for (d, &s) in dx.iter_mut().zip(g) {
                    *d += s;
                }
            }
            Op::Embedding { table, ids } => {
                let numel = self.value(*table).numel();
                let dim = self.shape(*table)[1];
                let dt = grad_slot(grads, *table, numel);
                for (r, &id) in ids.iter().enumerate() {
                    let dst = &mut dt[id * dim..(id + 1) * dim];
                    for (d, &s) in dst.iter_mut().zip(&g[r * dim..(r + 1) * dim]) {
                        *d += s;
                    }
                }
            }
            Op::ScatterAdd { x, words } => {
                let l = words.len();
                let numel = self.value(*x).numel();
                let vocab = g.len() / (numel / l);
                let dx = grad_slot(grads, *x, numel);
                for (r, drow) in dx.chunks_mut(l).enumerate() {
                    let grow = &g[r * vocab..(r + 1) * vocab];
                    for (d, &w) in drow.iter_mut().zip(words) {
                        *d += grow[w];
                    }
                }
            }
            Op::CrossEntropy { p, cols, targets } => {
                let pd = self.data(*p);
                let dp = grad_slot(grads, *p, pd.len());
                for (r, t) in targets.iter().enumerate() {
                    if let Some(t) = *t {
                        let i = r * cols + t;
                        dp[i] -= g[0] / (pd[i] + T::from_f64(CE_FLOOR));
                    }
                }
            }
            &Op::Sum { x } => {
                let numel = self.value(x).numel();
                let dx = grad_slot(grads, x, numel);
                for d in dx.iter_mut() {
                    *d += g[0];
                }
            }
            Op::Dropout { x, mask } => {
                let dx = grad_slot(grads, *x, mask.len());
                for i in 0..mask.len() {
                    dx[i] += g[i] * mask[i];
                }
            }
            &Op::Mixture {
                alpha,
                beta,
                pv,
                pa,
                pu,
            } => {
                let (al, bl) = (self.data(alpha), self.data(beta));
                let (vd, ad, ud) = (self.data(pv), self.data(pa), self.data(pu));
                let one = T::one();
                let rows = al.len();
                let cols = g.len() / rows;
                for r in 0..rows {
                    let (a, b) = (al[r], bl[r]);
                    let span = r * cols..(r + 1) * cols;
                    let gr = &g[span.clone()];
                    let (vr, ar, ur) = (&vd[span.clone()], &ad[span.clone()], &ud[span.clone()]);
                    if self.rg(alpha) {
                        let mut s = T::zero();
                        for i in 0..cols {
                            s += gr[i] * (vr[i] - (b * ar[i] + (one - b) * ur[i]));
                        }
                        grad_slot(grads, alpha, rows)[r] += s;
                    }
                    if self.rg(beta) {
                        let mut s = T::zero();
                        for i in 0..cols {
                            s += gr[i] * (ar[i] - ur[i]);
                        }
                        grad_slot(grads, beta, rows)[r] += s * (one - a);
                    }
                    for (var, w) in [(pv, a), (pa, (one - a) * b), (pu, (one - a) * (one - b))] {
                        if self.rg(var) {
                            let dp = grad_slot(grads, var, g.len());
                            axpy(w, gr, &mut dp[span.clone()]);
                        }
                    }
                }
            }
        }
    }
}

/// Plain-slice evaluation of the three-way mixture.
pub fn mixture_into<T: Scalar>(alpha: T, beta: T, pv: &[T], pa: &[T], pu: &[T], out: &mut [T]) {
    let one = T::one();
    for i in 0..out.len() {
        out[i] = alpha * pv[i] + (one - alpha) * (beta * pa[i] + (one - beta) * pu[i]);
    }
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut s = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

fn axpy<T: Scalar>(s: T, x: &[T], y: &mut [T]) {
    for (d, &v) in y.iter_mut().zip(x) {
        *d += s * v;
    }
}
