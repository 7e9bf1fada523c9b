//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value and the handles of
//! its inputs. Nodes are only ever appended, so index order is a topological
//! order and `backward` is a single reverse sweep.

use std::cell::{Ref, RefCell};
use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Param, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    MatMulNt { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Div { a: Var, b: Var },
    AddRow { a: Var, row: Var },
    MulRow { a: Var, row: Var },
    Scale { a: Var, c: f64 },
    Shift { a: Var },
    MulScalar { a: Var, s: Var },
    Reshape { a: Var },
    Transpose { a: Var },
    SliceRows { a: Var, start: usize },
    ConcatRows { parts: Vec<Var> },
    SliceCols { a: Var, start: usize },
    ConcatCols { parts: Vec<Var> },
    Gather { a: Var, index: Vec<usize> },
    Softmax { a: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    QuickGelu { a: Var },
    Relu { a: Var },
    Sigmoid { a: Var },
    Softplus { a: Var },
    Sum { a: Var },
    Mean { a: Var },
    Conv2d { x: Var, kernel: Var, bias: Option<Var>, padding: usize },
    Bilinear { x: Var, factor: usize },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul { a, b } | MatMulNt { a, b } | Add { a, b } | Sub { a, b } | Mul { a, b } | Div { a, b } => {
                vec![*a, *b]
            }
            AddRow { a, row } | MulRow { a, row } => vec![*a, *row],
            MulScalar { a, s } => vec![*a, *s],
            Scale { a, .. }
            | Shift { a }
            | Reshape { a }
            | Transpose { a }
            | SliceRows { a, .. }
            | SliceCols { a, .. }
            | Gather { a, .. }
            | Softmax { a }
            | QuickGelu { a }
            | Relu { a }
            | Sigmoid { a }
            | Softplus { a }
            | Sum { a }
            | Mean { a } => vec![*a],
            ConcatRows { parts } | ConcatCols { parts } => parts.clone(),
            LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Conv2d { x, kernel, bias, .. } => {
                let mut v = vec![*x, *kernel];
                v.extend(bias);
                v
            }
            Bilinear { x, .. } => vec![*x],
        }
    }
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], keyed by leaf handle.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Handles of every leaf that received a gradient.
    pub fn leaves(&self) -> Vec<Var> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|_| Var(i)))
            .collect()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<HashMap<String, Var>>,
    dropout_rng: RefCell<Option<ChaCha8Rng>>,
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let cols = *shape.last().unwrap_or(&1);
    let rows = shape[..shape.len().saturating_sub(1)].iter().product();
    (rows, cols)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape whose dropout layers sample masks from `seed`. Without a seed
    /// dropout is the identity (evaluation mode).
    pub fn with_dropout_seed(seed: u64) -> Self {
        let tape = Self::default();
        *tape.dropout_rng.borrow_mut() = Some(ChaCha8Rng::seed_from_u64(seed));
        tape
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, shape: Vec<usize>, value: Vec<f64>, op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = op.inputs().iter().any(|v| nodes[v.0].requires_grad);
        nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn push_leaf(&self, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    /// Records a copy of `tensor` as a leaf, inheriting its `requires_grad`.
    pub fn leaf(&self, tensor: &Tensor) -> Var {
        self.push_leaf(
            tensor.shape().to_vec(),
            tensor.data().to_vec(),
            tensor.requires_grad(),
        )
    }

    pub fn constant(&self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.push_leaf(t.shape().to_vec(), t.into_data(), false))
    }

    /// Records a named parameter once; later calls with the same name return
    /// the same handle so gradients from every use accumulate on one leaf.
    pub fn param(&self, p: &Param) -> Var {
        if let Some(v) = self.params.borrow().get(&p.name) {
            return *v;
        }
        let v = self.leaf(&p.tensor);
        self.params.borrow_mut().insert(p.name.clone(), v);
        v
    }

    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.params.borrow().get(name).copied()
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names: Vec<_> = self.params.borrow().keys().cloned().collect();
        names.sort();
        names
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].shape.clone()
    }

    pub fn value(&self, v: Var) -> Ref<'_, [f64]> {
        Ref::map(self.nodes.borrow(), |n| n[v.0].value.as_slice())
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let nodes = self.nodes.borrow();
        Tensor::new(&nodes[v.0].shape, nodes[v.0].value.clone()).expect("node shapes are valid")
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes.borrow()[v.0].value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = {
            let nodes = self.nodes.borrow();
            let mut out = vec![0.0; m * n];
            gemm_nn(&nodes[a.0].value, &nodes[b.0].value, &mut out, m, k, n);
            out
        };
        Ok(self.push(vec![m, n], out, Op::MatMul { a, b }))
    }

    /// `a · bᵀ` for `a: [m,k]`, `b: [n,k]`.
    pub fn matmul_nt(&self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::shape("matmul_nt", &sa, &sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let out = {
            let nodes = self.nodes.borrow();
            let mut out = vec![0.0; m * n];
            gemm_nt(&nodes[a.0].value, &nodes[b.0].value, &mut out, m, k, n);
            out
        };
        Ok(self.push(vec![m, n], out, Op::MatMulNt { a, b }))
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::shape("transpose", &s, &[2]));
        }
        let (r, c) = (s[0], s[1]);
        let out = {
            let v = self.value(a);
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    out[j * r + i] = v[i * c + j];
                }
            }
            out
        };
        Ok(self.push(vec![c, r], out, Op::Transpose { a }))
    }

    // ---- elementwise ----------------------------------------------------

    fn binary(&self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<(Vec<usize>, Vec<f64>)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(name, &sa, &sb));
        }
        let nodes = self.nodes.borrow();
        let out = nodes[a.0]
            .value
            .iter()
            .zip(&nodes[b.0].value)
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok((sa, out))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (s, out) = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(s, out, Op::Add { a, b }))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let (s, out) = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(s, out, Op::Sub { a, b }))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (s, out) = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(s, out, Op::Mul { a, b }))
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        let (s, out) = self.binary(a, b, "div", |x, y| x / y)?;
        Ok(self.push(s, out, Op::Div { a, b }))
    }

    fn row_broadcast(&self, a: Var, row: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<(Vec<usize>, Vec<f64>)> {
        let (sa, sr) = (self.shape(a), self.shape(row));
        let (_, cols) = rows_cols(&sa);
        if sr.len() != 1 || sr[0] != cols {
            return Err(Error::shape(name, &sa, &sr));
        }
        let nodes = self.nodes.borrow();
        let r = &nodes[row.0].value;
        let out = nodes[a.0]
            .value
            .chunks(cols)
            .flat_map(|chunk| chunk.iter().zip(r).map(|(&x, &y)| f(x, y)))
            .collect();
        Ok((sa, out))
    }

    /// `a[.., n] + row[n]` broadcast over leading axes.
    pub fn add_row(&self, a: Var, row: Var) -> Result<Var> {
        let (s, out) = self.row_broadcast(a, row, "add_row", |x, y| x + y)?;
        Ok(self.push(s, out, Op::AddRow { a, row }))
    }

    /// `a[.., n] * row[n]` broadcast over leading axes.
    pub fn mul_row(&self, a: Var, row: Var) -> Result<Var> {
        let (s, out) = self.row_broadcast(a, row, "mul_row", |x, y| x * y)?;
        Ok(self.push(s, out, Op::MulRow { a, row }))
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        let (s, out) = {
            let nodes = self.nodes.borrow();
            (nodes[a.0].shape.clone(), nodes[a.0].value.iter().map(|x| x * c).collect())
        };
        self.push(s, out, Op::Scale { a, c })
    }

    /// Adds a constant to every entry.
    pub fn shift(&self, a: Var, c: f64) -> Var {
        let (s, out) = {
            let nodes = self.nodes.borrow();
            (nodes[a.0].shape.clone(), nodes[a.0].value.iter().map(|x| x + c).collect())
        };
        self.push(s, out, Op::Shift { a })
    }

    /// Multiplies every entry of `a` by the single-element tensor `s`.
    pub fn mul_scalar(&self, a: Var, s: Var) -> Result<Var> {
        let ss = self.shape(s);
        if ss.iter().product::<usize>() != 1 {
            return Err(Error::shape("mul_scalar", &self.shape(a), &ss));
        }
        let (shape, out) = {
            let nodes = self.nodes.borrow();
            let k = nodes[s.0].value[0];
            (nodes[a.0].shape.clone(), nodes[a.0].value.iter().map(|x| x * k).collect())
        };
        Ok(self.push(shape, out, Op::MulScalar { a, s }))
    }

    fn unary(&self, a: Var, f: impl Fn(f64) -> f64) -> (Vec<usize>, Vec<f64>) {
        let nodes = self.nodes.borrow();
        (nodes[a.0].shape.clone(), nodes[a.0].value.iter().map(|&x| f(x)).collect())
    }

    /// `x · σ(1.702 x)`, the sigmoid approximation of GELU.
    pub fn quick_gelu(&self, a: Var) -> Var {
        let (s, out) = self.unary(a, |x| x * sigmoid(1.702 * x));
        self.push(s, out, Op::QuickGelu { a })
    }

    pub fn relu(&self, a: Var) -> Var {
        let (s, out) = self.unary(a, |x| x.max(0.0));
        self.push(s, out, Op::Relu { a })
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let (s, out) = self.unary(a, sigmoid);
        self.push(s, out, Op::Sigmoid { a })
    }

    /// `ln(1 + eˣ)` evaluated without overflow.
    pub fn softplus(&self, a: Var) -> Var {
        let (s, out) = self.unary(a, softplus);
        self.push(s, out, Op::Softplus { a })
    }

    /// Multiplies by a Bernoulli keep-mask scaled by `1/(1-p)`. Identity when
    /// the tape has no dropout seed or `p == 0`.
    pub fn dropout(&self, a: Var, p: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::config(format!("dropout probability {p} outside [0, 1)")));
        }
        let mask = {
            let mut rng = self.dropout_rng.borrow_mut();
            match rng.as_mut() {
                Some(rng) if p > 0.0 => {
                    let n = self.nodes.borrow()[a.0].value.len();
                    let keep = 1.0 / (1.0 - p);
                    (0..n)
                        .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
                        .collect::<Vec<_>>()
                }
                _ => return Ok(a),
            }
        };
        let m = self.constant(&self.shape(a), mask)?;
        self.mul(a, m)
    }

    // ---- reductions -----------------------------------------------------

    pub fn sum(&self, a: Var) -> Var {
        let total = self.value(a).iter().sum();
        self.push(vec![1], vec![total], Op::Sum { a })
    }

    pub fn mean(&self, a: Var) -> Var {
        let total: f64 = {
            let v = self.value(a);
            v.iter().sum::<f64>() / v.len() as f64
        };
        self.push(vec![1], vec![total], Op::Mean { a })
    }

    // ---- structural -----------------------------------------------------

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let sa = self.shape(a);
        if shape.iter().product::<usize>() != sa.iter().product::<usize>() || shape.contains(&0) {
            return Err(Error::shape("reshape", &sa, shape));
        }
        let data = self.value(a).to_vec();
        Ok(self.push(shape.to_vec(), data, Op::Reshape { a }))
    }

    /// Rows `[start, end)` of a 2-D tensor.
    pub fn slice_rows(&self, a: Var, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 || start >= end || end > s[0] {
            return Err(Error::shape("slice_rows", &s, &[start, end]));
        }
        let c = s[1];
        let data = self.value(a)[start * c..end * c].to_vec();
        Ok(self.push(vec![end - start, c], data, Op::SliceRows { a, start }))
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat_rows of nothing"))?;
        let c = self.shape(*first)[1];
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            let s = self.shape(*p);
            if s.len() != 2 || s[1] != c {
                return Err(Error::shape("concat_rows", &self.shape(*first), &s));
            }
            rows += s[0];
            data.extend_from_slice(&self.value(*p));
        }
        Ok(self.push(vec![rows, c], data, Op::ConcatRows { parts: parts.to_vec() }))
    }

    /// Columns `[start, end)` of a 2-D tensor.
    pub fn slice_cols(&self, a: Var, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 || start >= end || end > s[1] {
            return Err(Error::shape("slice_cols", &s, &[start, end]));
        }
        let (r, c) = (s[0], s[1]);
        let w = end - start;
        let data = {
            let v = self.value(a);
            let mut out = Vec::with_capacity(r * w);
            for i in 0..r {
                out.extend_from_slice(&v[i * c + start..i * c + end]);
            }
            out
        };
        Ok(self.push(vec![r, w], data, Op::SliceCols { a, start }))
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat_cols of nothing"))?;
        let r = self.shape(*first)[0];
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let s = self.shape(*p);
            if s.len() != 2 || s[0] != r {
                return Err(Error::shape("concat_cols", &self.shape(*first), &s));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let data = {
            let nodes = self.nodes.borrow();
            let mut out = vec![0.0; r * total];
            let mut off = 0;
            for (p, &w) in parts.iter().zip(&widths) {
                let v = &nodes[p.0].value;
                for i in 0..r {
                    out[i * total + off..i * total + off + w].copy_from_slice(&v[i * w..(i + 1) * w]);
                }
                off += w;
            }
            out
        };
        Ok(self.push(vec![r, total], data, Op::ConcatCols { parts: parts.to_vec() }))
    }

    /// `out[i] = a.flat[index[i]]`, reshaped to `shape`.
    pub fn gather(&self, a: Var, index: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let n = self.value(a).len();
        if index.len() != shape.iter().product::<usize>() || shape.contains(&0) {
            return Err(Error::shape("gather", shape, &[index.len()]));
        }
        if let Some(bad) = index.iter().find(|&&i| i >= n) {
            return Err(Error::shape("gather", &self.shape(a), &[*bad]));
        }
        let data = {
            let v = self.value(a);
            index.iter().map(|&i| v[i]).collect()
        };
        Ok(self.push(shape.to_vec(), data, Op::Gather { a, index }))
    }

    // ---- neural network primitives ----------------------------------------

    /// Softmax along the last axis.
    pub fn softmax(&self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        let (_, c) = rows_cols(&s);
        if c == 0 {
            return Err(Error::EmptyAxis { op: "softmax" });
        }
        let out = {
            let v = self.value(a);
            let mut out = vec![0.0; v.len()];
            for (src, dst) in v.chunks(c).zip(out.chunks_mut(c)) {
                let m = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for (d, &x) in dst.iter_mut().zip(src) {
                    *d = (x - m).exp();
                    z += *d;
                }
                for d in dst.iter_mut() {
                    *d /= z;
                }
            }
            out
        };
        Ok(self.push(s, out, Op::Softmax { a }))
    }

    /// Normalizes along the last axis then applies `gamma · x̂ + beta`.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let s = self.shape(x);
        let (rows, d) = rows_cols(&s);
        if d == 0 || s.is_empty() {
            return Err(Error::EmptyAxis { op: "layer_norm" });
        }
        if eps <= 0.0 {
            return Err(Error::config("layer_norm eps must be positive"));
        }
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape("layer_norm", &s, &self.shape(gamma)));
        }
        let (out, xhat, rstd) = {
            let nodes = self.nodes.borrow();
            let v = &nodes[x.0].value;
            let g = &nodes[gamma.0].value;
            let b = &nodes[beta.0].value;
            let mut out = vec![0.0; v.len()];
            let mut xhat = vec![0.0; v.len()];
            let mut rstd = vec![0.0; rows];
            for r in 0..rows {
                let row = &v[r * d..(r + 1) * d];
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|&u| (u - mean) * (u - mean)).sum::<f64>() / d as f64;
                let inv = 1.0 / (var + eps).sqrt();
                rstd[r] = inv;
                for j in 0..d {
                    let h = (row[j] - mean) * inv;
                    xhat[r * d + j] = h;
                    out[r * d + j] = g[j] * h + b[j];
                }
            }
            (out, xhat, rstd)
        };
        Ok(self.push(s, out, Op::LayerNorm { x, gamma, beta, xhat, rstd }))
    }

    /// Zero-padded cross-correlation of `x: [c_in,h,w]` with
    /// `kernel: [c_out,c_in,kh,kw]`, optional `bias: [c_out]`.
    pub fn conv2d(&self, x: Var, kernel: Var, bias: Option<Var>, padding: usize) -> Result<Var> {
        let (sx, sk) = (self.shape(x), self.shape(kernel));
        if sx.len() != 3 || sk.len() != 4 || sx[0] != sk[1] {
            return Err(Error::shape("conv2d", &sx, &sk));
        }
        let (cin, h, w) = (sx[0], sx[1], sx[2]);
        let (cout, kh, kw) = (sk[0], sk[2], sk[3]);
        if kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(Error::shape("conv2d: kernel larger than padded input", &sx, &sk));
        }
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(Error::shape("conv2d bias", &sk, &self.shape(b)));
            }
        }
        let (oh, ow) = (h + 2 * padding - kh + 1, w + 2 * padding - kw + 1);
        let out = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            let kv = &nodes[kernel.0].value;
            let mut out = vec![0.0; cout * oh * ow];
            for co in 0..cout {
                let base = bias.map_or(0.0, |b| nodes[b.0].value[co]);
                out[co * oh * ow..(co + 1) * oh * ow].fill(base);
                for ci in 0..cin {
                    for ki in 0..kh {
                        for kj in 0..kw {
                            let wgt = kv[((co * cin + ci) * kh + ki) * kw + kj];
                            for oi in 0..oh {
                                let ii = oi + ki;
                                if ii < padding || ii >= h + padding {
                                    continue;
                                }
                                let xrow = &xv[(ci * h + ii - padding) * w..(ci * h + ii - padding + 1) * w];
                                let orow = &mut out[(co * oh + oi) * ow..(co * oh + oi + 1) * ow];
                                let j_lo = padding.saturating_sub(kj);
                                let j_hi = (w + padding - kj).min(ow);
                                for oj in j_lo..j_hi {
                                    orow[oj] += wgt * xrow[oj + kj - padding];
                                }
                            }
                        }
                    }
                }
            }
            out
        };
        Ok(self.push(vec![cout, oh, ow], out, Op::Conv2d { x, kernel, bias, padding }))
    }

    /// Bilinear upsampling of `x: [c,h,w]` by an integer factor with
    /// half-pixel (align-corners = false) sampling.
    pub fn bilinear_upsample(&self, x: Var, factor: usize) -> Result<Var> {
        if factor == 0 {
            return Err(Error::config("bilinear upsample factor must be >= 1"));
        }
        let s = self.shape(x);
        if s.len() != 3 {
            return Err(Error::shape("bilinear_upsample", &s, &[3]));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (oh, ow) = (h * factor, w * factor);
        let ys = bilinear_taps(h, factor);
        let xs = bilinear_taps(w, factor);
        let out = {
            let v = self.value(x);
            let mut out = vec![0.0; c * oh * ow];
            for ch in 0..c {
                let img = &v[ch * h * w..(ch + 1) * h * w];
                for (oi, &(y0, y1, ly)) in ys.iter().enumerate() {
                    for (oj, &(x0, x1, lx)) in xs.iter().enumerate() {
                        let top = img[y0 * w + x0] * (1.0 - lx) + img[y0 * w + x1] * lx;
                        let bot = img[y1 * w + x0] * (1.0 - lx) + img[y1 * w + x1] * lx;
                        out[(ch * oh + oi) * ow + oj] = top * (1.0 - ly) + bot * ly;
                    }
                }
            }
            out
        };
        Ok(self.push(vec![c, oh, ow], out, Op::Bilinear { x, factor }))
    }

    // ---- reverse pass ---------------------------------------------------

    /// Nodes with a dependency path to `root` (including `root`).
    pub fn reachable(&self, root: Var) -> Vec<bool> {
        let nodes = self.nodes.borrow();
        let mut mark = vec![false; nodes.len()];
        mark[root.0] = true;
        for i in (0..=root.0).rev() {
            if mark[i] {
                for v in nodes[i].op.inputs() {
                    mark[v.0] = true;
                }
            }
        }
        mark
    }

    /// Accumulates d(root)/d(leaf) for every leaf that requires grad.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[root.0].value.len() != 1 {
            return Err(Error::contract(format!(
                "backward root must be a scalar, got shape {:?}",
                nodes[root.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        if !nodes[root.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let node = &nodes[i];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backprop_node(&nodes, node, &g, &mut grads);
        }
        for (i, n) in nodes.iter().enumerate() {
            if !matches!(n.op, Op::Leaf) || !n.requires_grad {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
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
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Per output coordinate: (lower tap, upper tap, weight of upper tap).
fn bilinear_taps(n: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..n * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

fn gemm_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

fn gemm_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] += dot(arow, brow);
        }
    }
}

/// `out[k,n] += aᵀ · g` for `a: [m,k]`, `g: [m,n]`.
fn gemm_tn(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += aip * gv;
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for l in 0..4 {
            acc[l] += a[c * 4 + l] * b[c * 4 + l];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

fn grad_slot<'g>(nodes: &[Node], grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let len = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
}

fn backprop_node(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |v: Var| nodes[v.0].value.as_slice();
    match &node.op {
        Op::Leaf => {}
        Op::MatMul { a, b } => {
            let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
            let n = nodes[b.0].shape[1];
            if let Some(ga) = grad_slot(nodes, grads, *a) {
                // dA = dC · Bᵀ
                gemm_nt(g, val(*b), ga, m, n, k);
            }
            if let Some(gb) = grad_slot(nodes, grads, *b) {
                // dB = Aᵀ · dC
                gemm_tn(val(*a), g, gb, m, k, n);
            }
        }
        Op::MatMulNt { a, b } => {
            let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
            let n = nodes[b.0].shape[0];
            if let Some(ga) = grad_slot(nodes, grads, *a) {
                // dA = dC · B
                gemm_nn(g, val(*b), ga, m, n, k);
            }
            if let Some(gb) = grad_slot(nodes, grads, *b) {
                // dB = dCᵀ · A
                gemm_tn(g, val(*a), gb, m, n, k);
            }
        }
        Op::Add { a, b } => {
            for v in [*a, *b] {
                if let Some(gv) = grad_slot(nodes, grads, v) {
                    gv.iter_mut().zip(g).for_each(|(o, d)| *o += d);
                }
            }
        }
        Op::Sub { a, b } => {
            if let Some(ga) = grad_slot(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(o, d)| *o += d);
            }
            if let Some(gb) = grad_slot(nodes, grads, *b) {
                gb.iter_mut().zip(g).for_each(|(o, d)| *o -= d);
            }
        }
        Op::Mul { a, b } => {
            if let Some(ga) = grad_slot(nodes, grads, *a) {
                for ((o, d), y) in ga.iter_mut().zip(g).zip(val(*b)) {
                    *o += d * y;
                }
            }
            if let Some(gb) = grad_slot(nodes, grads, *b) {
                for ((o, d), x) in gb.iter_mut().zip(g).zip(val(*a)) {
                    *o += d * x;
                }
            }
        }
        Op::Div { a, b } => {
            if let Some(ga) = grad_slot(nodes, grads, *a) {
                for ((o, d), y) in ga.iter_mut().zip(g).zip(val(*b)) {
                    *o += d / y;
                }
            }
            if let Some(gb) = grad_slot(nodes, grads, *b) {
                for (((o, d), y), q) in gb.iter_mut().zip(g).zip(val(*b)).zip(&node.value) {
                    *o -= d * q / y;
                }
            }
        }
        Op::AddRow { a, row } => {
            if let Some(ga) = grad_slot(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(o, d)| *o += d);
            }
            if let Some(gr) = grad_slot(nodes, grads, *row) {
                let c = gr.len();
                for chunk in g.chunks(c) {
                    gr.iter_mut().zip(chunk).for_each(|(o, d)| *o += d);
                }
            }
        }
        Op::MulRow { a, row } => {
            let r = val(*row);
            let c = r.len();
            if let Some(ga) = grad_slot(nodes, grads, *a) {
                for (och, gch) in ga.chunks_mut(c).zip(g.chunks(c)) {
                    for j in 0..c {
                        och[j] += gch[j] * r[j];
                    }
                }
            }
            if let Some(gr) = grad_slot(nodes, grads, *row) {
                for (gch, ach) in g.chunks(c).zip(val(*a).chunks(c)) {
                    for j in 0..c {
                        gr[j] += gch[j] * ach[j];
                    }
                }
            }
        }
        Op::Scale { a, c } => {
            if let Some(ga) = grad_slot(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(o, d)| *o += d * c);
            }
        }
        Op::Shift { a } | Op::Reshape { a } => {
            if let Some(ga) = grad_slot(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(o, d)| *o += d);
            }
        }
        Op::MulScalar { a, s } => {
            let k = val(*s)[0];
            if let Some(ga) = grad_slot(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(o, d)| *o += d * k);
            }
            if let Some(gs) = grad_slot(nodes, grads, *s) {
                gs[0] += g.iter().zip(val(*a)).map(|(d, x)| d * x).sum::<f64>();
            }
        }
        Op::Transpose { a } => {
            let (r, c) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
            if let Some(ga) = grad_slot(nodes, grads, *a) {
                for i in 0..r {
                    for j in 0..c {
                        ga[i * c + j] += g[j * r + i];
                    }
                }
            }
        }
        Op::SliceRows { a, start } => {
            let c = node.shape[1];
            if let Some(ga) = grad_slot(nodes, grads, *a) {
                ga[start * c..start * c + g.len()]
                    .iter_mut()
                    .zip(g)
                    .for_each(|(o, d)| *o += d);
            }
        }
        Op::ConcatRows { parts } => {
            let mut off = 0;
            for p in parts {
                let len = nodes[p.0].value.len();
                if let Some(gp) = grad_slot(nodes, grads, *p) {
                    gp.iter_mut().zip(&g[off..off + len]).for_each(|(o, d)| *o += d);
                }
                off += len;
            }
        }
        Op::SliceCols { a, start } => {
            let (r, w) = (node.shape[0], node.shape[1]);
            let c = nodes[a.0].shape[1];
            if let Some(ga) = grad_slot(nodes, grads, *a) {
                for i in 0..r {
                    for j in 0..w {
                        ga[i * c + start + j] += g[i * w + j];
                    }
                }
            }
        }
        Op::ConcatCols { parts } => {
            let (r, total) = (node.shape[0], node.shape[1]);
            let mut off = 0;
            for p in parts {
                let w = nodes[p.0].shape[1];
                if let Some(gp) = grad_slot(nodes, grads, *p) {
                    for i in 0..r {
                        for j in 0..w {
                            gp[i * w + j] += g[i * total + off + j];
                        }
                    }
                }
                off += w;
            }
        }
        Op::Gather { a, index } => {
            if let Some(ga) = grad_slot(nodes, grads, *a) {
                for (&i, d) in index.iter().zip(g) {
                    ga[i] += d;
                }
            }
        }
        Op::Softmax { a } => {
            let c = *node.shape.last().unwrap();
            if let Some(ga) = grad_slot(nodes, grads, *a) {
                for ((och, gch), ych) in ga.chunks_mut(c).zip(g.chunks(c)).zip(node.value.chunks(c)) {
                    let s: f64 = gch.iter().zip(ych).map(|(d, y)| d * y).sum();
                    for j in 0..c {
                        och[j] += ych[j] * (gch[j] - s);
                    }
                }
            }
        }
        Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
            let d = nodes[gamma.0].value.len();
            let gam = val(*gamma);
            if let Some(gx) = grad_slot(nodes, grads, *x) {
                for (r, &inv) in rstd.iter().enumerate() {
                    let gr = &g[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let mut mean_dh = 0.0;
                    let mut mean_dh_h = 0.0;
                    for j in 0..d {
                        let dh = gr[j] * gam[j];
                        mean_dh += dh;
                        mean_dh_h += dh * hr[j];
                    }
                    mean_dh /= d as f64;
                    mean_dh_h /= d as f64;
                    for j in 0..d {
                        let dh = gr[j] * gam[j];
                        gx[r * d + j] += inv * (dh - mean_dh - hr[j] * mean_dh_h);
                    }
                }
            }
            if let Some(gg) = grad_slot(nodes, grads, *gamma) {
                for (gch, hch) in g.chunks(d).zip(xhat.chunks(d)) {
                    for j in 0..d {
                        gg[j] += gch[j] * hch[j];
                    }
                }
            }
            if let Some(gb) = grad_slot(nodes, grads, *beta) {
                for gch in g.chunks(d) {
                    gb.iter_mut().zip(gch).for_each(|(o, d)| *o += d);
                }
            }
        }
        Op::QuickGelu { a } => {
            if let Some(ga) = grad_slot(nodes, grads, *a) {
                for ((o, d), &x) in ga.iter_mut().zip(g).zip(val(*a)) {
                    let s = sigmoid(1.702 * x);
                    *o += d * (s + 1.702 * x * s * (1.0 - s));
                }
            }
        }
        Op::Relu { a } => {
            if let Some(ga) = grad_slot(nodes, grads, *a) {
                for ((o, d), &x) in ga.iter_mut().zip(g).zip(val(*a)) {
                    if x > 0.0 {
                        *o += d;
                    }
                }
            }
        }
        Op::Sigmoid { a } => {
            if let Some(ga) = grad_slot(nodes, grads, *a) {
                for ((o, d), &y) in ga.iter_mut().zip(g).zip(&node.value) {
                    *o += d * y * (1.0 - y);
                }
            }
        }
        Op::Softplus { a } => {
            if let Some(ga) = grad_slot(nodes, grads, *a) {
                for ((o, d), &x) in ga.iter_mut().zip(g).zip(val(*a)) {
                    *o += d * sigmoid(x);
                }
            }
        }
        Op::Sum { a } => {
            if let Some(ga) = grad_slot(nodes, grads, *a) {
                ga.iter_mut().for_each(|o| *o += g[0]);
            }
        }
        Op::Mean { a } => {
            if let Some(ga) = grad_slot(nodes, grads, *a) {
                let k = g[0] / ga.len() as f64;
                ga.iter_mut().for_each(|o| *o += k);
            }
        }
        Op::Conv2d { x, kernel, bias, padding } => {
            let padding = *padding;
            let (cin, h, w) = (nodes[x.0].shape[0], nodes[x.0].shape[1], nodes[x.0].shape[2]);
            let ks = &nodes[kernel.0].shape;
            let (cout, kh, kw) = (ks[0], ks[2], ks[3]);
            let (oh, ow) = (node.shape[1], node.shape[2]);
            if let Some(b) = bias {
                if let Some(gb) = grad_slot(nodes, grads, *b) {
                    for co in 0..cout {
                        gb[co] += g[co * oh * ow..(co + 1) * oh * ow].iter().sum::<f64>();
                    }
                }
            }
            let xv = val(*x);
            let kv = val(*kernel);
            let x_needs = nodes[x.0].requires_grad;
            let k_needs = nodes[kernel.0].requires_grad;
            let mut gx = x_needs.then(|| vec![0.0; xv.len()]);
            let mut gk = k_needs.then(|| vec![0.0; kv.len()]);
            for co in 0..cout {
                for ci in 0..cin {
                    for ki in 0..kh {
                        for kj in 0..kw {
                            let kidx = ((co * cin + ci) * kh + ki) * kw + kj;
                            let wgt = kv[kidx];
                            let mut acc = 0.0;
                            for oi in 0..oh {
                                let ii = oi + ki;
                                if ii < padding || ii >= h + padding {
                                    continue;
                                }
                                let xoff = (ci * h + ii - padding) * w;
                                let goff = (co * oh + oi) * ow;
                                let j_lo = padding.saturating_sub(kj);
                                let j_hi = (w + padding - kj).min(ow);
                                for oj in j_lo..j_hi {
                                    let xi = xoff + oj + kj - padding;
                                    let d = g[goff + oj];
                                    acc += d * xv[xi];
                                    if let Some(gx) = gx.as_mut() {
                                        gx[xi] += d * wgt;
                                    }
                                }
                            }
                            if let Some(gk) = gk.as_mut() {
                                gk[kidx] += acc;
                            }
                        }
                    }
                }
            }
            if let (Some(local), Some(slot)) = (gx, grad_slot(nodes, grads, *x)) {
                slot.iter_mut().zip(local).for_each(|(o, d)| *o += d);
            }
            if let (Some(local), Some(slot)) = (gk, grad_slot(nodes, grads, *kernel)) {
                slot.iter_mut().zip(local).for_each(|(o, d)| *o += d);
            }
        }
        Op::Bilinear { x, factor } => {
            let (c, h, w) = (nodes[x.0].shape[0], nodes[x.0].shape[1], nodes[x.0].shape[2]);
            let (oh, ow) = (h * factor, w * factor);
            let ys = bilinear_taps(h, *factor);
            let xs = bilinear_taps(w, *factor);
            if let Some(gx) = grad_slot(nodes, grads, *x) {
                for ch in 0..c {
                    let base = ch * h * w;
                    for (oi, &(y0, y1, ly)) in ys.iter().enumerate() {
                        for (oj, &(x0, x1, lx)) in xs.iter().enumerate() {
                            let d = g[(ch * oh + oi) * ow + oj];
                            gx[base + y0 * w + x0] += d * (1.0 - ly) * (1.0 - lx);
                            gx[base + y0 * w + x1] += d * (1.0 - ly) * lx;
                            gx[base + y1 * w + x0] += d * ly * (1.0 - lx);
                            gx[base + y1 * w + x1] += d * ly * lx;
                        }
                    }
                }
            }
        }
    }
}
