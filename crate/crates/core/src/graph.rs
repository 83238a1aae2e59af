//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! A [`Graph`] records every operation of one forward pass. Parameters are
//! borrowed from a [`ParamSet`] rather than copied, so a graph lives no
//! longer than the parameters it reads. [`Graph::backward`] walks the tape in
//! reverse and returns exact analytic gradients for every node that depends
//! on a parameter or a differentiable leaf.

use std::borrow::Cow;
use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRowVec { x: Var, v: Var, n: usize },
    AddColVec { x: Var, v: Var, n: usize },
    MulRowVec { x: Var, v: Var, n: usize },
    Affine { x: Var, scale: T },
    ScaleBy { x: Var, s: Var },
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Concat { parts: Vec<(Var, usize)>, rows: usize, width: usize },
    SliceLast { x: Var, start: usize, len: usize, width: usize },
    Reshape(Var),
    Transpose { x: Var, m: usize, n: usize },
    StackRows(Vec<Var>),
    SelectRow { x: Var, row: usize, n: usize },
    Index { x: Var, i: usize },
    Sum(Var),
    SoftmaxRows { x: Var, n: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, n: usize, xhat: Vec<T>, inv_std: Vec<T> },
    Dropout { x: Var, scale: Vec<T> },
    Conv2d(Box<ConvSaved>),
    AvgPool { x: Var, h: usize, w: usize, c: usize, k: usize },
    MeanRows { x: Var, rows: Vec<usize>, n: usize },
    MaxRows { x: Var, arg: Vec<usize>, n: usize },
    MaxCols { x: Var, arg: Vec<usize>, n: usize },
    MaskFill { x: Var, keep: Vec<bool> },
    Embedding { table: Var, ids: Vec<usize>, d: usize },
    CrossEntropy { logits: Var, label: usize, probs: Vec<T> },
}

#[derive(Debug)]
struct ConvSaved {
    x: Var,
    w: Var,
    b: Var,
    geom: ConvGeom,
}

/// Geometry of a 2-D convolution over an `[H, W, C]` feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

struct Node<'a, T: Clone> {
    value: Cow<'a, [T]>,
    shape: Vec<usize>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<'a, T: Real> {
    nodes: Vec<Node<'a, T>>,
    params: Option<&'a ParamSet<T>>,
    param_vars: BTreeMap<&'a str, Var>,
    mode: Mode,
    rng: ChaCha8Rng,
}

/// Gradients produced by one backward pass.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    params: Vec<(String, Var, Vec<usize>)>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient for every parameter read by the graph. Parameters that were
    /// read but received no gradient map to zeros.
    pub fn param_grads(&self) -> BTreeMap<String, Tensor<T>> {
        self.params
            .iter()
            .map(|(name, v, shape)| {
                let t = match self.get(*v) {
                    Some(g) => Tensor::new(shape.clone(), g.to_vec()).expect("grad shape"),
                    None => Tensor::zeros(shape),
                };
                (name.clone(), t)
            })
            .collect()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<'a, T: Real> Graph<'a, T> {
    pub fn new(params: &'a ParamSet<T>, mode: Mode, seed: u64) -> Self {
        Graph { nodes: Vec::new(), params: Some(params), param_vars: BTreeMap::new(), mode, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// A graph with no parameter set; only leaves and constants.
    pub fn detached(mode: Mode, seed: u64) -> Self {
        Graph { nodes: Vec::new(), params: None, param_vars: BTreeMap::new(), mode, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, [T]>, shape: Vec<usize>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert_eq!(value.len(), numel(&shape));
        self.nodes.push(Node { value, shape, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).expect("node shape")
    }

    pub fn scalar(&self, v: Var) -> T {
        self.value(v)[0]
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        let shape = t.shape().to_vec();
        self.push(Cow::Owned(t.into_data()), shape, Op::Leaf, false)
    }

    pub fn constant_vec(&mut self, data: Vec<T>) -> Var {
        let n = data.len();
        self.push(Cow::Owned(data), vec![n], Op::Leaf, false)
    }

    /// Differentiable input not backed by a named parameter.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let shape = t.shape().to_vec();
        self.push(Cow::Owned(t.into_data()), shape, Op::Leaf, true)
    }

    /// Reads a named parameter. Each parameter gets one node per graph.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.param_vars.get(name) {
            return Ok(v);
        }
        let params = self.params.ok_or_else(|| Error::config(format!("graph has no parameter set (asked for {name})")))?;
        let (key, t) = params.get_key_value(name).ok_or_else(|| Error::config(format!("unknown parameter `{name}`")))?;
        let v = self.push(Cow::Borrowed(t.data()), t.shape().to_vec(), Op::Leaf, true);
        self.param_vars.insert(key, v);
        Ok(v)
    }

    pub fn has_param(&self, name: &str) -> bool {
        self.params.is_some_and(|p| p.contains(name))
    }

    pub fn param_vars(&self) -> impl Iterator<Item = (&str, Var)> {
        self.param_vars.iter().map(|(k, v)| (*k, *v))
    }

    // ---- linear algebra -------------------------------------------------

    /// `a` is `[m, k]` or `[k]`, `b` is `[k, n]`. A vector `a` yields `[n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (m, k, vec_out) = match sa.len() {
            1 => (1, sa[0], true),
            2 => (sa[0], sa[1], false),
            _ => return Err(Error::shape("matmul", format!("lhs rank {} unsupported", sa.len()))),
        };
        if sb.len() != 2 || sb[0] != k {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let n = sb[1];
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let x = av[i * k + p];
                if x == T::zero() {
                    continue;
                }
                let brow = &bv[p * n..(p + 1) * n];
                for (o, &bw) in row.iter_mut().zip(brow) {
                    *o = *o + x * bw;
                }
            }
        }
        let shape = if vec_out { vec![n] } else { vec![m, n] };
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Cow::Owned(out), shape, Op::MatMul { a, b, m, k, n }, ng))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, rec: Op<T>) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let out: Vec<T> = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Cow::Owned(out), shape, rec, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn trailing(&self, op: &'static str, x: Var, v: Var) -> Result<usize> {
        let n = *self.shape(v).first().unwrap_or(&0);
        if self.shape(v).len() != 1 || self.shape(x).last() != Some(&n) {
            return Err(Error::shape(op, format!("{:?} with vector {:?}", self.shape(x), self.shape(v))));
        }
        Ok(n)
    }

    /// `x[..., n] + v[n]`, broadcast over leading axes.
    pub fn add_row_vec(&mut self, x: Var, v: Var) -> Result<Var> {
        let n = self.trailing("add_row_vec", x, v)?;
        let vv = self.value(v);
        let out: Vec<T> = self.value(x).iter().enumerate().map(|(i, &a)| a + vv[i % n]).collect();
        let shape = self.shape(x).to_vec();
        let ng = self.ng(x) || self.ng(v);
        Ok(self.push(Cow::Owned(out), shape, Op::AddRowVec { x, v, n }, ng))
    }

    /// `x[..., n] * v[n]`, broadcast over leading axes.
    pub fn mul_row_vec(&mut self, x: Var, v: Var) -> Result<Var> {
        let n = self.trailing("mul_row_vec", x, v)?;
        let vv = self.value(v);
        let out: Vec<T> = self.value(x).iter().enumerate().map(|(i, &a)| a * vv[i % n]).collect();
        let shape = self.shape(x).to_vec();
        let ng = self.ng(x) || self.ng(v);
        Ok(self.push(Cow::Owned(out), shape, Op::MulRowVec { x, v, n }, ng))
    }

    /// `x[m, n] + v[m]`, each row `i` shifted by `v[i]`.
    pub fn add_col_vec(&mut self, x: Var, v: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 || self.shape(v) != [sx[0]] {
            return Err(Error::shape("add_col_vec", format!("{sx:?} with {:?}", self.shape(v))));
        }
        let n = sx[1];
        let vv = self.value(v);
        let out: Vec<T> = self.value(x).iter().enumerate().map(|(i, &a)| a + vv[i / n]).collect();
        let ng = self.ng(x) || self.ng(v);
        Ok(self.push(Cow::Owned(out), sx, Op::AddColVec { x, v, n }, ng))
    }

    /// `scale * x + shift` with constant coefficients.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Var {
        let out: Vec<T> = self.value(x).iter().map(|&a| scale * a + shift).collect();
        let shape = self.shape(x).to_vec();
        let ng = self.ng(x);
        self.push(Cow::Owned(out), shape, Op::Affine { x, scale }, ng)
    }

    /// Multiplies every element of `x` by the single-element node `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::shape("scale_by", format!("scale {:?} is not a scalar", self.shape(s))));
        }
        let sv = self.value(s)[0];
        let out: Vec<T> = self.value(x).iter().map(|&a| a * sv).collect();
        let shape = self.shape(x).to_vec();
        let ng = self.ng(x) || self.ng(s);
        Ok(self.push(Cow::Owned(out), shape, Op::ScaleBy { x, s }, ng))
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, rec: Op<T>) -> Var {
        let out: Vec<T> = self.value(x).iter().map(|&a| f(a)).collect();
        let shape = self.shape(x).to_vec();
        let ng = self.ng(x);
        self.push(Cow::Owned(out), shape, rec, ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |a| if a <= T::zero() { T::zero() } else { a }, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, |a| a.tanh(), Op::Tanh(x))
    }

    // ---- shape manipulation ---------------------------------------------

    /// Concatenates along the last axis. All parts share their leading shape.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let lead = self.shape(*first)[..self.shape(*first).len() - 1].to_vec();
        let rows = numel(&lead);
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != lead.len() + 1 || s[..lead.len()] != lead[..] {
                return Err(Error::shape("concat", format!("{s:?} does not match leading {lead:?}")));
            }
            widths.push(*s.last().unwrap());
        }
        let width: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(width);
        let ng = parts.iter().any(|&p| self.ng(p));
        let rec = Op::Concat { parts: parts.iter().copied().zip(widths).collect(), rows, width };
        Ok(self.push(Cow::Owned(out), shape, rec, ng))
    }

    /// Columns `start..start+len` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let width = *s.last().ok_or_else(|| Error::shape("slice_last", "scalar input"))?;
        if start + len > width {
            return Err(Error::shape("slice_last", format!("{start}+{len} > {width}")));
        }
        let rows = numel(&s) / width;
        let xv = self.value(x);
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&xv[r * width + start..r * width + start + len]);
        }
        let mut shape = s;
        *shape.last_mut().unwrap() = len;
        let ng = self.ng(x);
        Ok(self.push(Cow::Owned(out), shape, Op::SliceLast { x, start, len, width }, ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(x).len() {
            return Err(Error::shape("reshape", format!("{:?} -> {shape:?}", self.shape(x))));
        }
        let out = self.value(x).to_vec();
        let ng = self.ng(x);
        Ok(self.push(Cow::Owned(out), shape.to_vec(), Op::Reshape(x), ng))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::shape("transpose", format!("rank {} input", s.len())));
        }
        let (m, n) = (s[0], s[1]);
        let xv = self.value(x);
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = xv[i * n + j];
            }
        }
        let ng = self.ng(x);
        Ok(self.push(Cow::Owned(out), vec![n, m], Op::Transpose { x, m, n }, ng))
    }

    /// Stacks equal-length vectors into a `[rows, n]` matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        let first = rows.first().ok_or_else(|| Error::shape("stack_rows", "no inputs"))?;
        let n = self.value(*first).len();
        let mut out = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            if self.shape(r) != [n] {
                return Err(Error::shape("stack_rows", format!("row {:?} vs [{n}]", self.shape(r))));
            }
            out.extend_from_slice(self.value(r));
        }
        let ng = rows.iter().any(|&r| self.ng(r));
        Ok(self.push(Cow::Owned(out), vec![rows.len(), n], Op::StackRows(rows.to_vec()), ng))
    }

    pub fn select_row(&mut self, x: Var, row: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || row >= s[0] {
            return Err(Error::shape("select_row", format!("row {row} of {s:?}")));
        }
        let n = s[1];
        let out = self.value(x)[row * n..(row + 1) * n].to_vec();
        let ng = self.ng(x);
        Ok(self.push(Cow::Owned(out), vec![n], Op::SelectRow { x, row, n }, ng))
    }

    /// Single element `i` of the flattened input, as a `[1]` tensor.
    pub fn index(&mut self, x: Var, i: usize) -> Result<Var> {
        let len = self.value(x).len();
        if i >= len {
            return Err(Error::shape("index", format!("{i} >= {len}")));
        }
        let out = vec![self.value(x)[i]];
        let ng = self.ng(x);
        Ok(self.push(Cow::Owned(out), vec![1], Op::Index { x, i }, ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.value(x).iter().copied().sum();
        let ng = self.ng(x);
        self.push(Cow::Owned(vec![s]), vec![1], Op::Sum(x), ng)
    }

    // ---- normalisation, attention ---------------------------------------

    /// Row-wise softmax of `x[m, n]` over the columns where `mask` is true.
    /// Masked columns receive exactly zero. Fails when every column is masked.
    pub fn masked_softmax_rows(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let n = *s.last().ok_or_else(|| Error::shape("masked_softmax", "scalar input"))?;
        if mask.len() != n {
            return Err(Error::shape("masked_softmax", format!("mask {} vs width {n}", mask.len())));
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::Numeric("masked_softmax: every entry is masked".into()));
        }
        let out = softmax_rows(self.value(x), n, mask);
        let ng = self.ng(x);
        Ok(self.push(Cow::Owned(out), s, Op::SoftmaxRows { x, n }, ng))
    }

    /// Layer normalisation over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let n = self.trailing("layer_norm", x, gain)?;
        if self.shape(bias) != [n] {
            return Err(Error::shape("layer_norm", "bias width mismatch"));
        }
        let xv = self.value(x);
        let (gv, bv) = (self.value(gain), self.value(bias));
        let rows = xv.len() / n;
        let nt = T::from_usize(n).unwrap();
        let mut out = vec![T::zero(); xv.len()];
        let mut xhat = vec![T::zero(); xv.len()];
        let mut inv_std = vec![T::zero(); rows];
        for r in 0..rows {
            let row = &xv[r * n..(r + 1) * n];
            let mean = row.iter().copied().sum::<T>() / nt;
            let var = row.iter().map(|&a| (a - mean) * (a - mean)).sum::<T>() / nt;
            let inv = T::one() / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..n {
                let h = (row[j] - mean) * inv;
                xhat[r * n + j] = h;
                out[r * n + j] = h * gv[j] + bv[j];
            }
        }
        let shape = self.shape(x).to_vec();
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        Ok(self.push(Cow::Owned(out), shape, Op::LayerNorm { x, gain, bias, n, xhat, inv_std }, ng))
    }

    /// Inverted dropout; identity in eval mode or when `rate` is zero.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Var {
        if self.mode == Mode::Eval || rate <= 0.0 {
            return x;
        }
        let keep = T::lit(1.0 / (1.0 - rate));
        let n = self.value(x).len();
        let scale: Vec<T> = (0..n).map(|_| if self.rng.random::<f64>() < rate { T::zero() } else { keep }).collect();
        let out: Vec<T> = self.value(x).iter().zip(&scale).map(|(&a, &s)| a * s).collect();
        let shape = self.shape(x).to_vec();
        let ng = self.ng(x);
        self.push(Cow::Owned(out), shape, Op::Dropout { x, scale }, ng)
    }

    // ---- convolution and pooling ----------------------------------------

    /// 2-D convolution of an `[H, W, Cin]` map with `w[k, k, Cin, Cout]` and
    /// bias `b[Cout]`, zero padding `pad`, stride `stride`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 3 || sw.len() != 4 || sw[0] != sw[1] || sw[2] != sx[2] || stride == 0 {
            return Err(Error::shape("conv2d", format!("input {sx:?} kernel {sw:?}")));
        }
        let (h, wd, cin) = (sx[0], sx[1], sx[2]);
        let (k, cout) = (sw[0], sw[3]);
        if self.shape(b) != [cout] || h + 2 * pad < k || wd + 2 * pad < k {
            return Err(Error::shape("conv2d", format!("input {sx:?} kernel {sw:?} bias {:?}", self.shape(b))));
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let geom = ConvGeom { h, w: wd, cin, cout, k, stride, pad, ho, wo };
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let mut out = vec![T::zero(); ho * wo * cout];
        for oy in 0..ho {
            for ox in 0..wo {
                let o = &mut out[(oy * wo + ox) * cout..(oy * wo + ox + 1) * cout];
                o.copy_from_slice(bv);
                for ky in 0..k {
                    let Some(iy) = (oy * stride + ky).checked_sub(pad).filter(|&v| v < h) else {
                        continue;
                    };
                    for kx in 0..k {
                        let Some(ix) = (ox * stride + kx).checked_sub(pad).filter(|&v| v < wd) else {
                            continue;
                        };
                        let xin = &xv[(iy * wd + ix) * cin..(iy * wd + ix + 1) * cin];
                        for (ci, &xval) in xin.iter().enumerate() {
                            if xval == T::zero() {
                                continue;
                            }
                            let wrow = &wv[((ky * k + kx) * cin + ci) * cout..((ky * k + kx) * cin + ci + 1) * cout];
                            for (oo, &ww) in o.iter_mut().zip(wrow) {
                                *oo = *oo + xval * ww;
                            }
                        }
                    }
                }
            }
        }
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        Ok(self.push(Cow::Owned(out), vec![ho, wo, cout], Op::Conv2d(Box::new(ConvSaved { x, w, b, geom })), ng))
    }

    /// Non-overlapping `k x k` average pooling of an `[H, W, C]` map.
    pub fn avg_pool(&mut self, x: Var, k: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || k == 0 || !s[0].is_multiple_of(k) || !s[1].is_multiple_of(k) {
            return Err(Error::shape("avg_pool", format!("{s:?} with window {k}")));
        }
        let (h, w, c) = (s[0], s[1], s[2]);
        let (ho, wo) = (h / k, w / k);
        let norm = T::one() / T::from_usize(k * k).unwrap();
        let xv = self.value(x);
        let mut out = vec![T::zero(); ho * wo * c];
        for y in 0..h {
            for xx in 0..w {
                let o = ((y / k) * wo + xx / k) * c;
                for ch in 0..c {
                    out[o + ch] = out[o + ch] + xv[(y * w + xx) * c + ch] * norm;
                }
            }
        }
        let ng = self.ng(x);
        Ok(self.push(Cow::Owned(out), vec![ho, wo, c], Op::AvgPool { x, h, w, c, k }, ng))
    }

    /// Mean over the rows of `x[m, n]` selected by `mask`.
    pub fn mean_rows(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let (m, n) = self.matrix_dims("mean_rows", x)?;
        let rows = selected(m, mask, "mean_rows")?;
        let inv = T::one() / T::from_usize(rows.len()).unwrap();
        let xv = self.value(x);
        let mut out = vec![T::zero(); n];
        for &r in &rows {
            for j in 0..n {
                out[j] = out[j] + xv[r * n + j];
            }
        }
        out.iter_mut().for_each(|o| *o = *o * inv);
        let ng = self.ng(x);
        Ok(self.push(Cow::Owned(out), vec![n], Op::MeanRows { x, rows, n }, ng))
    }

    /// Elementwise max over the rows of `x[m, n]` selected by `mask`, giving
    /// `[n]`. Ties resolve to the lowest row index.
    pub fn max_rows(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let (m, n) = self.matrix_dims("max_rows", x)?;
        let rows = selected(m, mask, "max_rows")?;
        let xv = self.value(x);
        let mut arg = vec![rows[0]; n];
        for j in 0..n {
            for &r in &rows[1..] {
                if xv[r * n + j] > xv[arg[j] * n + j] {
                    arg[j] = r;
                }
            }
        }
        let out: Vec<T> = (0..n).map(|j| xv[arg[j] * n + j]).collect();
        let ng = self.ng(x);
        Ok(self.push(Cow::Owned(out), vec![n], Op::MaxRows { x, arg, n }, ng))
    }

    /// Max over the columns of `x[m, n]` selected by `mask`, giving `[m]`.
    pub fn max_cols(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let (m, n) = self.matrix_dims("max_cols", x)?;
        let cols = selected(n, mask, "max_cols")?;
        let xv = self.value(x);
        let mut arg = vec![cols[0]; m];
        for i in 0..m {
            for &c in &cols[1..] {
                if xv[i * n + c] > xv[i * n + arg[i]] {
                    arg[i] = c;
                }
            }
        }
        let out: Vec<T> = (0..m).map(|i| xv[i * n + arg[i]]).collect();
        let ng = self.ng(x);
        Ok(self.push(Cow::Owned(out), vec![m], Op::MaxCols { x, arg, n }, ng))
    }

    fn matrix_dims(&self, op: &'static str, x: Var) -> Result<(usize, usize)> {
        match self.shape(x) {
            [m, n] => Ok((*m, *n)),
            s => Err(Error::shape(op, format!("expected a matrix, got {s:?}"))),
        }
    }

    /// Replaces entries where `keep` is false with `fill`; those entries pass
    /// no gradient.
    pub fn mask_fill(&mut self, x: Var, keep: &[bool], fill: T) -> Result<Var> {
        let len = self.value(x).len();
        if keep.len() != len {
            return Err(Error::shape("mask_fill", format!("mask {} vs {len}", keep.len())));
        }
        let out: Vec<T> = self.value(x).iter().zip(keep).map(|(&a, &k)| if k { a } else { fill }).collect();
        let shape = self.shape(x).to_vec();
        let ng = self.ng(x);
        Ok(self.push(Cow::Owned(out), shape, Op::MaskFill { x, keep: keep.to_vec() }, ng))
    }

    /// Zeroes the rows of `x[m, n]` whose mask entry is false.
    pub fn mask_rows(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let (m, n) = self.matrix_dims("mask_rows", x)?;
        if mask.len() != m {
            return Err(Error::shape("mask_rows", format!("mask {} vs {m} rows", mask.len())));
        }
        let keep: Vec<bool> = (0..m * n).map(|i| mask[i / n]).collect();
        self.mask_fill(x, &keep, T::zero())
    }

    /// Rows of `table[V, d]` for each id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.matrix_dims("embedding", table)?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::data(None, format!("token id {bad} outside vocabulary of {v}")));
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let ng = self.ng(table);
        Ok(self.push(Cow::Owned(out), vec![ids.len(), d], Op::Embedding { table, ids: ids.to_vec(), d }, ng))
    }

    /// Negative log-softmax probability of `label` under `logits[n]`.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let n = self.value(logits).len();
        if self.shape(logits).len() != 1 || label >= n {
            return Err(Error::shape("cross_entropy", format!("label {label} for logits {:?}", self.shape(logits))));
        }
        let probs = softmax_rows(self.value(logits), n, &vec![true; n]);
        let lv = self.value(logits);
        let max = lv.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = max + lv.iter().map(|&a| (a - max).exp()).sum::<T>().ln();
        let loss = lse - lv[label];
        let ng = self.ng(logits);
        Ok(self.push(Cow::Owned(vec![loss]), vec![1], Op::CrossEntropy { logits, label, probs }, ng))
    }

    // ---- backward -------------------------------------------------------

    /// Reverse pass from a single-element `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        if self.value(root).len() != 1 {
            return Err(Error::shape("backward", format!("root {:?} is not a scalar", self.shape(root))));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![T::one()]);
        for i in (0..=root.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            if self.nodes[i].needs_grad {
                self.backprop(i, &gy, &mut grads);
            }
            grads[i] = Some(gy);
        }
        let params = self.param_vars.iter().map(|(name, v)| (name.to_string(), *v, self.shape(*v).to_vec())).collect();
        Ok(Gradients { grads, params })
    }

    fn acc(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.ng(v) {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.len()]);
        f(slot);
    }

    fn backprop(&self, i: usize, gy: &[T], grads: &mut [Option<Vec<T>>]) {
        let y = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                let bv = self.value(b);
                self.acc(grads, a, |ga| {
                    for r in 0..m {
                        for p in 0..k {
                            let mut s = T::zero();
                            for j in 0..n {
                                s = s + gy[r * n + j] * bv[p * n + j];
                            }
                            ga[r * k + p] = ga[r * k + p] + s;
                        }
                    }
                });
                let av = self.value(a);
                self.acc(grads, b, |gb| {
                    for r in 0..m {
                        for p in 0..k {
                            let x = av[r * k + p];
                            if x == T::zero() {
                                continue;
                            }
                            for j in 0..n {
                                gb[p * n + j] = gb[p * n + j] + x * gy[r * n + j];
                            }
                        }
                    }
                });
            }
            &Op::Add(a, b) => {
                self.acc(grads, a, |g| add_into(g, gy));
                self.acc(grads, b, |g| add_into(g, gy));
            }
            &Op::Sub(a, b) => {
                self.acc(grads, a, |g| add_into(g, gy));
                self.acc(grads, b, |g| g.iter_mut().zip(gy).for_each(|(o, &d)| *o = *o - d));
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                self.acc(grads, a, |g| {
                    for j in 0..g.len() {
                        g[j] = g[j] + gy[j] * bv[j];
                    }
                });
                self.acc(grads, b, |g| {
                    for j in 0..g.len() {
                        g[j] = g[j] + gy[j] * av[j];
                    }
                });
            }
            &Op::AddRowVec { x, v, n } => {
                self.acc(grads, x, |g| add_into(g, gy));
                self.acc(grads, v, |g| {
                    for (j, &d) in gy.iter().enumerate() {
                        g[j % n] = g[j % n] + d;
                    }
                });
            }
            &Op::AddColVec { x, v, n } => {
                self.acc(grads, x, |g| add_into(g, gy));
                self.acc(grads, v, |g| {
                    for (j, &d) in gy.iter().enumerate() {
                        g[j / n] = g[j / n] + d;
                    }
                });
            }
            &Op::MulRowVec { x, v, n } => {
                let (xv, vv) = (self.value(x), self.value(v));
                self.acc(grads, x, |g| {
                    for j in 0..g.len() {
                        g[j] = g[j] + gy[j] * vv[j % n];
                    }
                });
                self.acc(grads, v, |g| {
                    for (j, &d) in gy.iter().enumerate() {
                        g[j % n] = g[j % n] + d * xv[j];
                    }
                });
            }
            &Op::Affine { x, scale } => {
                self.acc(grads, x, |g| g.iter_mut().zip(gy).for_each(|(o, &d)| *o = *o + d * scale));
            }
            &Op::ScaleBy { x, s } => {
                let sv = self.value(s)[0];
                let xv = self.value(x);
                self.acc(grads, x, |g| g.iter_mut().zip(gy).for_each(|(o, &d)| *o = *o + d * sv));
                self.acc(grads, s, |g| {
                    g[0] = g[0] + gy.iter().zip(xv).map(|(&d, &a)| d * a).sum::<T>();
                });
            }
            &Op::Relu(x) => {
                let xv = self.value(x);
                self.acc(grads, x, |g| {
                    for j in 0..g.len() {
                        if xv[j] > T::zero() {
                            g[j] = g[j] + gy[j];
                        }
                    }
                });
            }
            &Op::Sigmoid(x) => {
                self.acc(grads, x, |g| {
                    for j in 0..g.len() {
                        g[j] = g[j] + gy[j] * y[j] * (T::one() - y[j]);
                    }
                });
            }
            &Op::Tanh(x) => {
                self.acc(grads, x, |g| {
                    for j in 0..g.len() {
                        g[j] = g[j] + gy[j] * (T::one() - y[j] * y[j]);
                    }
                });
            }
            Op::Concat { parts, rows, width } => {
                let mut off = 0;
                for &(p, w) in parts {
                    self.acc(grads, p, |g| {
                        for r in 0..*rows {
                            for j in 0..w {
                                g[r * w + j] = g[r * w + j] + gy[r * width + off + j];
                            }
                        }
                    });
                    off += w;
                }
            }
            &Op::SliceLast { x, start, len, width } => {
                self.acc(grads, x, |g| {
                    let rows = g.len() / width;
                    for r in 0..rows {
                        for j in 0..len {
                            g[r * width + start + j] = g[r * width + start + j] + gy[r * len + j];
                        }
                    }
                });
            }
            &Op::Reshape(x) => self.acc(grads, x, |g| add_into(g, gy)),
            &Op::Transpose { x, m, n } => {
                self.acc(grads, x, |g| {
                    for r in 0..m {
                        for c in 0..n {
                            g[r * n + c] = g[r * n + c] + gy[c * m + r];
                        }
                    }
                });
            }
            Op::StackRows(rows) => {
                let n = gy.len() / rows.len().max(1);
                for (r, &v) in rows.iter().enumerate() {
                    self.acc(grads, v, |g| add_into(g, &gy[r * n..(r + 1) * n]));
                }
            }
            &Op::SelectRow { x, row, n } => {
                self.acc(grads, x, |g| add_into(&mut g[row * n..(row + 1) * n], gy));
            }
            &Op::Index { x, i } => self.acc(grads, x, |g| g[i] = g[i] + gy[0]),
            &Op::Sum(x) => self.acc(grads, x, |g| g.iter_mut().for_each(|o| *o = *o + gy[0])),
            &Op::SoftmaxRows { x, n } => {
                self.acc(grads, x, |g| {
                    for r in 0..g.len() / n {
                        let (yr, gr) = (&y[r * n..(r + 1) * n], &gy[r * n..(r + 1) * n]);
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for j in 0..n {
                            g[r * n + j] = g[r * n + j] + yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, n, xhat, inv_std } => {
                let n = *n;
                let gv = self.value(*gain);
                let rows = gy.len() / n;
                let nt = T::from_usize(n).unwrap();
                self.acc(grads, *x, |g| {
                    for r in 0..rows {
                        let mut mean_g = T::zero();
                        let mut mean_gx = T::zero();
                        for j in 0..n {
                            let gh = gy[r * n + j] * gv[j];
                            mean_g = mean_g + gh;
                            mean_gx = mean_gx + gh * xhat[r * n + j];
                        }
                        mean_g = mean_g / nt;
                        mean_gx = mean_gx / nt;
                        for j in 0..n {
                            let gh = gy[r * n + j] * gv[j];
                            g[r * n + j] = g[r * n + j] + inv_std[r] * (gh - mean_g - xhat[r * n + j] * mean_gx);
                        }
                    }
                });
                self.acc(grads, *gain, |g| {
                    for (j, (&d, &h)) in gy.iter().zip(xhat).enumerate() {
                        g[j % n] = g[j % n] + d * h;
                    }
                });
                self.acc(grads, *bias, |g| {
                    for (j, &d) in gy.iter().enumerate() {
                        g[j % n] = g[j % n] + d;
                    }
                });
            }
            Op::Dropout { x, scale } => {
                self.acc(grads, *x, |g| {
                    for j in 0..g.len() {
                        g[j] = g[j] + gy[j] * scale[j];
                    }
                });
            }
            Op::Conv2d(saved) => self.conv_backward(saved, gy, grads),
            &Op::AvgPool { x, h, w, c, k } => {
                let wo = w / k;
                let norm = T::one() / T::from_usize(k * k).unwrap();
                self.acc(grads, x, |g| {
                    for yy in 0..h {
                        for xx in 0..w {
                            let o = ((yy / k) * wo + xx / k) * c;
                            for ch in 0..c {
                                g[(yy * w + xx) * c + ch] = g[(yy * w + xx) * c + ch] + gy[o + ch] * norm;
                            }
                        }
                    }
                });
            }
            Op::MeanRows { x, rows, n } => {
                let inv = T::one() / T::from_usize(rows.len()).unwrap();
                self.acc(grads, *x, |g| {
                    for &r in rows {
                        for j in 0..*n {
                            g[r * n + j] = g[r * n + j] + gy[j] * inv;
                        }
                    }
                });
            }
            Op::MaxRows { x, arg, n } => {
                self.acc(grads, *x, |g| {
                    for (j, &r) in arg.iter().enumerate() {
                        g[r * n + j] = g[r * n + j] + gy[j];
                    }
                });
            }
            Op::MaxCols { x, arg, n } => {
                self.acc(grads, *x, |g| {
                    for (i, &c) in arg.iter().enumerate() {
                        g[i * n + c] = g[i * n + c] + gy[i];
                    }
                });
            }
            Op::MaskFill { x, keep } => {
                self.acc(grads, *x, |g| {
                    for j in 0..g.len() {
                        if keep[j] {
                            g[j] = g[j] + gy[j];
                        }
                    }
                });
            }
            Op::Embedding { table, ids, d } => {
                self.acc(grads, *table, |g| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut g[id * d..(id + 1) * d], &gy[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::CrossEntropy { logits, label, probs } => {
                self.acc(grads, *logits, |g| {
                    for j in 0..g.len() {
                        let t = if j == *label { T::one() } else { T::zero() };
                        g[j] = g[j] + gy[0] * (probs[j] - t);
                    }
                });
            }
        }
    }

    fn conv_backward(&self, saved: &ConvSaved, gy: &[T], grads: &mut [Option<Vec<T>>]) {
        let ConvGeom { h, w, cin, cout, k, stride, pad, ho, wo } = saved.geom;
        let (xv, wv) = (self.value(saved.x), self.value(saved.w));
        let taps = |oy: usize, ox: usize, ky: usize, kx: usize| -> Option<(usize, usize)> {
            let iy = (oy * stride + ky).checked_sub(pad).filter(|&v| v < h)?;
            let ix = (ox * stride + kx).checked_sub(pad).filter(|&v| v < w)?;
            Some((iy, ix))
        };
        self.acc(grads, saved.b, |gb| {
            for p in 0..ho * wo {
                add_into(gb, &gy[p * cout..(p + 1) * cout]);
            }
        });
        self.acc(grads, saved.w, |gw| {
            for oy in 0..ho {
                for ox in 0..wo {
                    let go = &gy[(oy * wo + ox) * cout..(oy * wo + ox + 1) * cout];
                    for ky in 0..k {
                        for kx in 0..k {
                            let Some((iy, ix)) = taps(oy, ox, ky, kx) else { continue };
                            for ci in 0..cin {
                                let xval = xv[(iy * w + ix) * cin + ci];
                                if xval == T::zero() {
                                    continue;
                                }
                                let base = ((ky * k + kx) * cin + ci) * cout;
                                for co in 0..cout {
                                    gw[base + co] = gw[base + co] + xval * go[co];
                                }
                            }
                        }
                    }
                }
            }
        });
        self.acc(grads, saved.x, |gx| {
            for oy in 0..ho {
                for ox in 0..wo {
                    let go = &gy[(oy * wo + ox) * cout..(oy * wo + ox + 1) * cout];
                    for ky in 0..k {
                        for kx in 0..k {
                            let Some((iy, ix)) = taps(oy, ox, ky, kx) else { continue };
                            for ci in 0..cin {
                                let base = ((ky * k + kx) * cin + ci) * cout;
                                let s: T = go.iter().zip(&wv[base..base + cout]).map(|(&a, &b)| a * b).sum();
                                let at = (iy * w + ix) * cin + ci;
                                gx[at] = gx[at] + s;
                            }
                        }
                    }
                }
            }
        });
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(o, &s)| *o = *o + s);
}

fn selected(len: usize, mask: Option<&[bool]>, op: &'static str) -> Result<Vec<usize>> {
    let idx: Vec<usize> = match mask {
        Some(m) if m.len() != len => return Err(Error::shape(op, format!("mask {} vs {len}", m.len()))),
        Some(m) => (0..len).filter(|&i| m[i]).collect(),
        None => (0..len).collect(),
    };
    if idx.is_empty() {
        return Err(Error::shape(op, "nothing selected"));
    }
    Ok(idx)
}

pub(crate) fn sigmoid<T: Real>(a: T) -> T {
    if a >= T::zero() {
        T::one() / (T::one() + (-a).exp())
    } else {
        let e = a.exp();
        e / (T::one() + e)
    }
}

/// Row-wise masked softmax over rows of width `n`.
pub(crate) fn softmax_rows<T: Real>(x: &[T], n: usize, mask: &[bool]) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for r in 0..x.len() / n {
        let row = &x[r * n..(r + 1) * n];
        let max = (0..n).filter(|&j| mask[j]).map(|j| row[j]).fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for j in 0..n {
            if mask[j] {
                let e = (row[j] - max).exp();
                out[r * n + j] = e;
                z = z + e;
            }
        }
        for j in 0..n {
            out[r * n + j] = out[r * n + j] / z;
        }
    }
    out
}
