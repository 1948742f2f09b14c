//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation appends a node holding its forward value and the indices of
//! its inputs. [`Tape::backward`] walks the record in reverse, so each node is
//! visited once, and returns a [`Gradients`] table. The record is cleared
//! afterwards unless [`Tape::retain`] was set.
//!
//! Only same-shape elementwise ops and explicit row broadcasts (`add_row`,
//! `mul_row`) exist; anything else is a dimension error.

use std::collections::HashMap;

use crate::error::{contract, dim_err, Error, Result};
use crate::kan::SplineBasis;
use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Gelu(Var),
    Silu(Var),
    Conv2d { x: Var, w: Var, b: Var, cols: Vec<f64>, geo: ConvGeo },
    AvgPool2d { x: Var, win: usize },
    Gather { table: Var, ids: Vec<usize> },
    SliceCols { a: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Reshape(Var),
    Transpose(Var),
    SumAll(Var),
    LocalAttention { q: Var, k: Var, v: Var, group: usize, scale: f64, probs: Vec<f64> },
    Kan { x: Var, wb: Var, ws: Var, coef: Var, aug: Vec<f64>, dbasis: Vec<f64>, k: usize },
    CrossEntropy { logits: Var, targets: Vec<usize>, mask: Vec<bool>, probs: Vec<f64> },
    RmsComplex(Var),
    DivScalar(Var, Var),
    MulScalar(Var, Var),
    ComplexScale { a: Var, re: f64, im: f64 },
}

#[derive(Debug, Clone, Copy)]
struct ConvGeo {
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    retain: bool,
}

/// Gradients produced by one backward pass, indexed by tape node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradients of every parameter that was put on the tape with
    /// `requires_grad`, sorted by parameter id.
    pub fn param_grads(&self) -> Vec<(ParamId, &[f64])> {
        let mut out: Vec<_> = self
            .params
            .iter()
            .filter_map(|&(p, v)| self.get(v).map(|g| (p, g)))
            .collect();
        out.sort_by_key(|(p, _)| *p);
        out
    }
}

fn gelu_parts(x: f64) -> (f64, f64) {
    // tanh approximation
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
    (y, dy)
}

pub fn gelu_scalar(x: f64) -> f64 {
    gelu_parts(x).0
}

pub fn silu_scalar(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: &[f64]) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g.to_vec()),
    }
}

fn accumulate_owned(slot: &mut Option<Vec<f64>>, g: Vec<f64>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Keep the record after `backward` (needed to run backward twice).
    pub fn retain(&mut self, yes: bool) {
        self.retain = yes;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    /// Places a stored parameter on the tape once; later calls reuse the node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.leaf(store.value(id).clone(), store.is_trainable(id));
        self.params.insert(id, v);
        v
    }

    /// Copy of `v` that is cut off from gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.leaf(t, false)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(dim_err(op, sa, sb));
        }
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(va.shape().to_vec(), data).expect("shape checked by caller")
    }

    fn unary(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let va = &self.nodes[a.0].value;
        let data = va.data().iter().map(|&x| f(x)).collect();
        Tensor::new(va.shape().to_vec(), data).expect("same shape")
    }

    fn matmul_impl(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (ar, ac) = self.value(a).dims2()?;
        let (br, bc) = self.value(b).dims2()?;
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(dim_err("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            ta,
            self.value(b).data(),
            tb,
            &mut out,
            0.0,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul { a, b, ta, tb }, rg))
    }

    /// `a·b` for `a: m×k`, `b: k×n`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false, false)
    }

    /// `a·bᵀ` for `a: m×k`, `b: n×k`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false, true)
    }

    /// `aᵀ·b` for `a: k×m`, `b: k×n`.
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let t = self.binary(a, b, |x, y| x + y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let t = self.binary(a, b, |x, y| x - y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let t = self.binary(a, b, |x, y| x * y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    fn row_broadcast_check(&self, op: &'static str, a: Var, b: Var) -> Result<usize> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        let n = *sa.last().expect("non-empty shape");
        if sb.len() != 1 || sb[0] != n {
            return Err(dim_err(op, sa, sb));
        }
        Ok(n)
    }

    /// Adds vector `b` (length = last extent of `a`) to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let n = self.row_broadcast_check("add_row", a, b)?;
        let mut t = self.value(a).clone();
        let bv = self.value(b).data().to_vec();
        for row in t.data_mut().chunks_mut(n) {
            row.iter_mut().zip(&bv).for_each(|(x, y)| *x += y);
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::AddRow(a, b), rg))
    }

    /// Multiplies every row of `a` elementwise by vector `b`.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let n = self.row_broadcast_check("mul_row", a, b)?;
        let mut t = self.value(a).clone();
        let bv = self.value(b).data().to_vec();
        for row in t.data_mut().chunks_mut(n) {
            row.iter_mut().zip(&bv).for_each(|(x, y)| *x *= y);
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::MulRow(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.unary(a, |x| x * c);
        let rg = self.rg(&[a]);
        self.push(t, Op::Scale(a, c), rg)
    }

    /// Softmax over the last extent of `x`.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.data().iter().any(|z| z.is_nan()) {
            return Err(Error::Numeric("NaN input to softmax".into()));
        }
        let n = *v.shape().last().expect("non-empty shape");
        let mut t = v.clone();
        for row in t.data_mut().chunks_mut(n) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for z in row.iter_mut() {
                *z = (*z - m).exp();
                s += *z;
            }
            row.iter_mut().for_each(|z| *z /= s);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Softmax(x), rg))
    }

    /// Layer normalization over the last extent with affine `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(contract("layer_norm eps must be positive"));
        }
        let d = self.row_broadcast_check("layer_norm", x, gain)?;
        self.row_broadcast_check("layer_norm", x, bias)?;
        let xv = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = xv.len() / d;
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|z| (z - mean) * (z - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            t,
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

    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.unary(x, gelu_scalar);
        let rg = self.rg(&[x]);
        self.push(t, Op::Gelu(x), rg)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let t = self.unary(x, silu_scalar);
        let rg = self.rg(&[x]);
        self.push(t, Op::Silu(x), rg)
    }

    /// 2-D convolution of `x: [C,H,W]` with `w: [O,C,kh,kw]` and bias `b: [O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let [c, h, wd] = xs[..] else {
            return Err(contract(format!("conv2d expects [C,H,W], got {xs:?}")));
        };
        let [o, ci, kh, kw] = ws[..] else {
            return Err(contract(format!("conv2d kernel expects [O,C,kh,kw], got {ws:?}")));
        };
        if ci != c {
            return Err(dim_err("conv2d", &xs, &ws));
        }
        if self.shape(b) != [o] {
            return Err(dim_err("conv2d bias", &ws, self.shape(b)));
        }
        if stride == 0 || kh > h + 2 * pad || kw > wd + 2 * pad || stride > h.max(wd) {
            return Err(dim_err("conv2d window", &xs, &[kh, kw, stride]));
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let geo = ConvGeo {
            c,
            h,
            w: wd,
            o,
            kh,
            kw,
            stride,
            pad,
            ho,
            wo,
        };
        let cols = im2col(self.value(x).data(), &geo);
        let kk = c * kh * kw;
        let p = ho * wo;
        let mut out = vec![0.0; o * p];
        let bv = self.value(b).data();
        for oc in 0..o {
            out[oc * p..(oc + 1) * p].iter_mut().for_each(|z| *z = bv[oc]);
        }
        gemm(o, kk, p, self.value(w).data(), false, &cols, false, &mut out, 1.0);
        let t = Tensor::new(vec![o, ho, wo], out)?;
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(t, Op::Conv2d { x, w, b, cols, geo }, rg))
    }

    /// Non-overlapping average pooling of `x: [C,H,W]` with a square window.
    pub fn avg_pool2d(&mut self, x: Var, win: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let [c, h, w] = xs[..] else {
            return Err(contract(format!("avg_pool2d expects [C,H,W], got {xs:?}")));
        };
        if win == 0 || win > h || win > w || h % win != 0 || w % win != 0 {
            return Err(dim_err("avg_pool2d", &xs, &[win, win]));
        }
        let (ho, wo) = (h / win, w / win);
        let xv = self.value(x).data();
        let mut out = vec![0.0; c * ho * wo];
        let norm = 1.0 / (win * win) as f64;
        for ch in 0..c {
            for i in 0..ho {
                for j in 0..wo {
                    let mut s = 0.0;
                    for di in 0..win {
                        for dj in 0..win {
                            s += xv[ch * h * w + (i * win + di) * w + j * win + dj];
                        }
                    }
                    out[ch * ho * wo + i * wo + j] = s * norm;
                }
            }
        }
        let t = Tensor::new(vec![c, ho, wo], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::AvgPool2d { x, win }, rg))
    }

    /// Row gather: `out[r] = table[ids[r]]`. Also serves as embedding lookup.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.value(table).dims2()?;
        if ids.is_empty() {
            return Err(contract("gather_rows with no ids"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(contract(format!("row id {bad} out of range for {v} rows")));
        }
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let t = Tensor::new(vec![ids.len(), d], out)?;
        let rg = self.rg(&[table]);
        Ok(self.push(
            t,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.gather_rows(table, ids)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.value(a).dims2()?;
        if len == 0 || start + len > n {
            return Err(dim_err("slice_cols", &[m, n], &[start, len]));
        }
        let av = self.value(a).data();
        let mut out = Vec::with_capacity(m * len);
        for r in 0..m {
            out.extend_from_slice(&av[r * n + start..r * n + start + len]);
        }
        let t = Tensor::new(vec![m, len], out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::SliceCols { a, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = self.value(parts[0]).dims2()?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.value(p).dims2()?;
            if pm != m {
                return Err(dim_err("concat_cols", self.shape(parts[0]), self.shape(p)));
            }
            widths.push(pn);
        }
        let n: usize = widths.iter().sum();
        let mut out = vec![0.0; m * n];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pv = self.value(p).data();
            for r in 0..m {
                out[r * n + off..r * n + off + w].copy_from_slice(&pv[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let t = Tensor::new(vec![m, n], out)?;
        let rg = self.rg(parts);
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.value(parts[0]).dims2()?.1;
        let mut out = Vec::new();
        let mut m = 0;
        for &p in parts {
            let (pm, pn) = self.value(p).dims2()?;
            if pn != n {
                return Err(dim_err("concat_rows", self.shape(parts[0]), self.shape(p)));
            }
            out.extend_from_slice(self.value(p).data());
            m += pm;
        }
        let t = Tensor::new(vec![m, n], out)?;
        let rg = self.rg(parts);
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).transpose()?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Transpose(a), rg))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::SumAll(a), rg)
    }

    /// Grouped attention: query row `i` attends only to key/value rows
    /// `i*group .. (i+1)*group`.
    pub fn local_attention(&mut self, q: Var, k: Var, v: Var, group: usize, scale: f64) -> Result<Var> {
        let (nq, d) = self.value(q).dims2()?;
        let (nk, dk) = self.value(k).dims2()?;
        let (nv, dv) = self.value(v).dims2()?;
        if group == 0 || dk != d || nk != nq * group || nv != nk {
            return Err(dim_err("local_attention", &[nq, d, group], &[nk, dk, nv]));
        }
        let qv = self.value(q).data();
        let kv = self.value(k).data();
        let vv = self.value(v).data();
        let mut probs = vec![0.0; nq * group];
        let mut out = vec![0.0; nq * dv];
        for i in 0..nq {
            let qi = &qv[i * d..(i + 1) * d];
            let p = &mut probs[i * group..(i + 1) * group];
            for (c, pc) in p.iter_mut().enumerate() {
                let kr = &kv[(i * group + c) * d..(i * group + c + 1) * d];
                *pc = qi.iter().zip(kr).map(|(a, b)| a * b).sum::<f64>() * scale;
            }
            let m = p.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for pc in p.iter_mut() {
                *pc = (*pc - m).exp();
                s += *pc;
            }
            p.iter_mut().for_each(|z| *z /= s);
            let oi = &mut out[i * dv..(i + 1) * dv];
            for (c, &pc) in p.iter().enumerate() {
                let vr = &vv[(i * group + c) * dv..(i * group + c + 1) * dv];
                oi.iter_mut().zip(vr).for_each(|(o, x)| *o += pc * x);
            }
        }
        let t = Tensor::new(vec![nq, dv], out)?;
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            t,
            Op::LocalAttention {
                q,
                k,
                v,
                group,
                scale,
                probs,
            },
            rg,
        ))
    }

    /// Attention weights saved by the most recent `local_attention` node `v`.
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::LocalAttention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Kolmogorov–Arnold layer: `out[t,j] = Σ_i wb[j,i]·SiLU(x[t,i]) +
    /// ws[j,i]·Σ_m coef[j,i,m]·B_m(x[t,i])`.
    pub fn kan_layer(&mut self, x: Var, wb: Var, ws: Var, coef: Var, basis: &SplineBasis) -> Result<Var> {
        let (n, din) = self.value(x).dims2()?;
        let (dout, din2) = self.value(wb).dims2()?;
        let k = basis.num_basis();
        if din2 != din || self.shape(ws) != [dout, din] || self.shape(coef) != [dout, din, k] {
            return Err(dim_err("kan_layer", &[n, din], self.shape(coef)));
        }
        let row = din * (1 + k);
        let xv = self.value(x).data();
        let mut aug = vec![0.0; n * row];
        let mut dbasis = vec![0.0; n * din * k];
        let mut vals = vec![0.0; k];
        let mut ders = vec![0.0; k];
        for t in 0..n {
            for i in 0..din {
                let xi = xv[t * din + i];
                aug[t * row + i] = silu_scalar(xi);
                basis.eval_with_derivative(xi, &mut vals, &mut ders);
                aug[t * row + din + i * k..t * row + din + (i + 1) * k].copy_from_slice(&vals);
                dbasis[(t * din + i) * k..(t * din + i + 1) * k].copy_from_slice(&ders);
            }
        }
        let waug = kan_weight_matrix(
            self.value(wb).data(),
            self.value(ws).data(),
            self.value(coef).data(),
            din,
            dout,
            k,
        );
        let mut out = vec![0.0; n * dout];
        gemm(n, row, dout, &aug, false, &waug, false, &mut out, 0.0);
        let t = Tensor::new(vec![n, dout], out)?;
        let rg = self.rg(&[x, wb, ws, coef]);
        Ok(self.push(
            t,
            Op::Kan {
                x,
                wb,
                ws,
                coef,
                aug,
                dbasis,
                k,
            },
            rg,
        ))
    }

    /// Mean over masked positions of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let (n, v) = self.value(logits).dims2()?;
        if targets.len() != n || mask.len() != n {
            return Err(dim_err("cross_entropy", &[n, v], &[targets.len(), mask.len()]));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(contract("cross_entropy with empty mask"));
        }
        if let Some(&bad) = targets.iter().zip(mask).filter(|(_, &m)| m).map(|(t, _)| t).find(|&&t| t >= v) {
            return Err(contract(format!("target id {bad} outside vocabulary of {v}")));
        }
        let lv = self.value(logits).data();
        if lv.iter().any(|z| z.is_nan()) {
            return Err(Error::Numeric("NaN logits".into()));
        }
        let mut probs = vec![0.0; n * v];
        let mut loss = 0.0;
        for r in 0..n {
            let row = &lv[r * v..(r + 1) * v];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
            for j in 0..v {
                probs[r * v + j] = (row[j] - lse).exp();
            }
            if mask[r] {
                loss += lse - row[targets[r]];
            }
        }
        let t = Tensor::scalar(loss / count as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            t,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Root-mean-square magnitude of interleaved complex samples:
    /// `sqrt(Σ x² / (len/2))`, a 1-element tensor.
    pub fn rms_complex(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a).data();
        if !av.len().is_multiple_of(2) {
            return Err(contract("interleaved complex data needs even length"));
        }
        let p = av.iter().map(|z| z * z).sum::<f64>() / (av.len() / 2) as f64;
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::scalar(p.sqrt()), Op::RmsComplex(a), rg))
    }

    fn scalar_check(&self, s: Var) -> Result<f64> {
        let t = self.value(s);
        if t.len() != 1 {
            return Err(contract(format!("expected scalar, got shape {:?}", t.shape())));
        }
        Ok(t.data()[0])
    }

    pub fn div_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let sv = self.scalar_check(s)?;
        let t = self.unary(a, |x| x / sv);
        let rg = self.rg(&[a, s]);
        Ok(self.push(t, Op::DivScalar(a, s), rg))
    }

    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let sv = self.scalar_check(s)?;
        let t = self.unary(a, |x| x * sv);
        let rg = self.rg(&[a, s]);
        Ok(self.push(t, Op::MulScalar(a, s), rg))
    }

    /// Multiplies interleaved complex samples by the constant `re + j·im`.
    pub fn complex_scale(&mut self, a: Var, re: f64, im: f64) -> Result<Var> {
        let av = self.value(a);
        if !av.len().is_multiple_of(2) {
            return Err(contract("interleaved complex data needs even length"));
        }
        let mut t = av.clone();
        for z in t.data_mut().chunks_mut(2) {
            let (x, y) = (z[0], z[1]);
            z[0] = re * x - im * y;
            z[1] = im * x + re * y;
        }
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::ComplexScale { a, re, im }, rg))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let params = self.params.iter().map(|(&p, &v)| (p, v)).collect();
        if !self.retain {
            self.nodes.clear();
            self.params.clear();
        }
        Ok(Gradients { grads, params })
    }

    fn backward_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, ta, tb } => {
                let (m, n) = node.value.dims2().expect("rank 2");
                let av = val(a);
                let bv = val(b);
                let k = if ta { av.shape()[0] } else { av.shape()[1] };
                if rg(a) {
                    // C = op(A)·op(B); dop(A) = G·op(B)ᵀ
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g, false, bv.data(), !tb, &mut da, 0.0);
                    let da = if ta { transpose_vec(&da, m, k) } else { da };
                    accumulate_owned(&mut grads[a.0], da);
                }
                if rg(b) {
                    // dop(B) = op(A)ᵀ·G
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, av.data(), !ta, g, false, &mut db, 0.0);
                    let db = if tb { transpose_vec(&db, k, n) } else { db };
                    accumulate_owned(&mut grads[b.0], db);
                }
            }
            &Op::Add(a, b) => {
                if rg(a) {
                    accumulate(&mut grads[a.0], g);
                }
                if rg(b) {
                    accumulate(&mut grads[b.0], g);
                }
            }
            &Op::Sub(a, b) => {
                if rg(a) {
                    accumulate(&mut grads[a.0], g);
                }
                if rg(b) {
                    accumulate_owned(&mut grads[b.0], g.iter().map(|x| -x).collect());
                }
            }
            &Op::Mul(a, b) => {
                if rg(a) {
                    let d = g.iter().zip(val(b).data()).map(|(x, y)| x * y).collect();
                    accumulate_owned(&mut grads[a.0], d);
                }
                if rg(b) {
                    let d = g.iter().zip(val(a).data()).map(|(x, y)| x * y).collect();
                    accumulate_owned(&mut grads[b.0], d);
                }
            }
            &Op::AddRow(a, b) => {
                if rg(a) {
                    accumulate(&mut grads[a.0], g);
                }
                if rg(b) {
                    let n = val(b).len();
                    let mut db = vec![0.0; n];
                    for row in g.chunks(n) {
                        db.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                    }
                    accumulate_owned(&mut grads[b.0], db);
                }
            }
            &Op::MulRow(a, b) => {
                let bv = val(b).data();
                let n = bv.len();
                if rg(a) {
                    let mut da = g.to_vec();
                    for row in da.chunks_mut(n) {
                        row.iter_mut().zip(bv).for_each(|(x, y)| *x *= y);
                    }
                    accumulate_owned(&mut grads[a.0], da);
                }
                if rg(b) {
                    let mut db = vec![0.0; n];
                    for (grow, arow) in g.chunks(n).zip(val(a).data().chunks(n)) {
                        for j in 0..n {
                            db[j] += grow[j] * arow[j];
                        }
                    }
                    accumulate_owned(&mut grads[b.0], db);
                }
            }
            &Op::Scale(a, c) => {
                if rg(a) {
                    accumulate_owned(&mut grads[a.0], g.iter().map(|x| x * c).collect());
                }
            }
            &Op::Softmax(a) => {
                if rg(a) {
                    let y = node.value.data();
                    let n = *node.value.shape().last().expect("shape");
                    let mut da = vec![0.0; y.len()];
                    for ((dr, yr), gr) in da.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for j in 0..n {
                            dr[j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    accumulate_owned(&mut grads[a.0], da);
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let gv = val(*gain).data();
                let d = gv.len();
                if rg(*x) {
                    let mut dx = vec![0.0; g.len()];
                    for r in 0..rstd.len() {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..d {
                            let dh = gr[j] * gv[j];
                            m1 += dh;
                            m2 += dh * hr[j];
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        for j in 0..d {
                            dx[r * d + j] = rstd[r] * (gr[j] * gv[j] - m1 - hr[j] * m2);
                        }
                    }
                    accumulate_owned(&mut grads[x.0], dx);
                }
                if rg(*gain) {
                    let mut dg = vec![0.0; d];
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dg[j] += gr[j] * hr[j];
                        }
                    }
                    accumulate_owned(&mut grads[gain.0], dg);
                }
                if rg(*bias) {
                    let mut db = vec![0.0; d];
                    for gr in g.chunks(d) {
                        db.iter_mut().zip(gr).for_each(|(a, b)| *a += b);
                    }
                    accumulate_owned(&mut grads[bias.0], db);
                }
            }
            &Op::Gelu(a) => {
                if rg(a) {
                    let d = g
                        .iter()
                        .zip(val(a).data())
                        .map(|(gg, &x)| gg * gelu_parts(x).1)
                        .collect();
                    accumulate_owned(&mut grads[a.0], d);
                }
            }
            &Op::Silu(a) => {
                if rg(a) {
                    let d = g
                        .iter()
                        .zip(val(a).data())
                        .map(|(gg, &x)| gg * silu_grad(x))
                        .collect();
                    accumulate_owned(&mut grads[a.0], d);
                }
            }
            Op::Conv2d { x, w, b, cols, geo } => {
                let kk = geo.c * geo.kh * geo.kw;
                let p = geo.ho * geo.wo;
                if rg(*w) {
                    let mut dw = vec![0.0; geo.o * kk];
                    gemm(geo.o, p, kk, g, false, cols, true, &mut dw, 0.0);
                    accumulate_owned(&mut grads[w.0], dw);
                }
                if rg(*b) {
                    let db = g.chunks(p).map(|r| r.iter().sum()).collect();
                    accumulate_owned(&mut grads[b.0], db);
                }
                if rg(*x) {
                    let mut dcols = vec![0.0; kk * p];
                    gemm(kk, geo.o, p, val(*w).data(), true, g, false, &mut dcols, 0.0);
                    accumulate_owned(&mut grads[x.0], col2im(&dcols, geo));
                }
            }
            &Op::AvgPool2d { x, win } => {
                if rg(x) {
                    let xs = val(x).shape();
                    let (c, h, w) = (xs[0], xs[1], xs[2]);
                    let (ho, wo) = (h / win, w / win);
                    let norm = 1.0 / (win * win) as f64;
                    let mut dx = vec![0.0; c * h * w];
                    for ch in 0..c {
                        for i in 0..h {
                            for j in 0..w {
                                dx[ch * h * w + i * w + j] =
                                    g[ch * ho * wo + (i / win) * wo + j / win] * norm;
                            }
                        }
                    }
                    accumulate_owned(&mut grads[x.0], dx);
                }
            }
            Op::Gather { table, ids } => {
                if rg(*table) {
                    let d = val(*table).shape()[1];
                    let mut dt = vec![0.0; val(*table).len()];
                    for (r, &i) in ids.iter().enumerate() {
                        dt[i * d..(i + 1) * d]
                            .iter_mut()
                            .zip(&g[r * d..(r + 1) * d])
                            .for_each(|(a, b)| *a += b);
                    }
                    accumulate_owned(&mut grads[table.0], dt);
                }
            }
            &Op::SliceCols { a, start } => {
                if rg(a) {
                    let (m, n) = val(a).dims2().expect("rank 2");
                    let len = node.value.shape()[1];
                    let mut da = vec![0.0; m * n];
                    for r in 0..m {
                        da[r * n + start..r * n + start + len]
                            .copy_from_slice(&g[r * len..(r + 1) * len]);
                    }
                    accumulate_owned(&mut grads[a.0], da);
                }
            }
            Op::ConcatCols(parts) => {
                let (m, n) = node.value.dims2().expect("rank 2");
                let mut off = 0;
                for &p in parts {
                    let w = val(p).shape()[1];
                    if rg(p) {
                        let mut dp = vec![0.0; m * w];
                        for r in 0..m {
                            dp[r * w..(r + 1) * w].copy_from_slice(&g[r * n + off..r * n + off + w]);
                        }
                        accumulate_owned(&mut grads[p.0], dp);
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = val(p).len();
                    if rg(p) {
                        accumulate(&mut grads[p.0], &g[off..off + len]);
                    }
                    off += len;
                }
            }
            &Op::Reshape(a) => {
                if rg(a) {
                    accumulate(&mut grads[a.0], g);
                }
            }
            &Op::Transpose(a) => {
                if rg(a) {
                    let (m, n) = node.value.dims2().expect("rank 2");
                    accumulate_owned(&mut grads[a.0], transpose_vec(g, m, n));
                }
            }
            &Op::SumAll(a) => {
                if rg(a) {
                    accumulate_owned(&mut grads[a.0], vec![g[0]; val(a).len()]);
                }
            }
            Op::LocalAttention {
                q,
                k,
                v,
                group,
                scale,
                probs,
            } => {
                let (q, k, v, group, scale) = (*q, *k, *v, *group, *scale);
                let (nq, d) = val(q).dims2().expect("rank 2");
                let dv = val(v).shape()[1];
                let qv = val(q).data();
                let kv = val(k).data();
                let vv = val(v).data();
                let mut dq = vec![0.0; nq * d];
                let mut dk = vec![0.0; nq * group * d];
                let mut dvv = vec![0.0; nq * group * dv];
                let mut dp = vec![0.0; group];
                for i in 0..nq {
                    let gi = &g[i * dv..(i + 1) * dv];
                    let p = &probs[i * group..(i + 1) * group];
                    for c in 0..group {
                        let row = i * group + c;
                        let vr = &vv[row * dv..(row + 1) * dv];
                        dp[c] = gi.iter().zip(vr).map(|(a, b)| a * b).sum();
                        dvv[row * dv..(row + 1) * dv]
                            .iter_mut()
                            .zip(gi)
                            .for_each(|(o, x)| *o = p[c] * x);
                    }
                    let dot: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                    for c in 0..group {
                        let ds = p[c] * (dp[c] - dot) * scale;
                        let row = i * group + c;
                        for j in 0..d {
                            dq[i * d + j] += ds * kv[row * d + j];
                            dk[row * d + j] += ds * qv[i * d + j];
                        }
                    }
                }
                if rg(q) {
                    accumulate_owned(&mut grads[q.0], dq);
                }
                if rg(k) {
                    accumulate_owned(&mut grads[k.0], dk);
                }
                if rg(v) {
                    accumulate_owned(&mut grads[v.0], dvv);
                }
            }
            Op::Kan {
                x,
                wb,
                ws,
                coef,
                aug,
                dbasis,
                k,
            } => {
                let (x, wb, ws, coef, k) = (*x, *wb, *ws, *coef, *k);
                let (n, din) = val(x).dims2().expect("rank 2");
                let dout = val(wb).shape()[0];
                let row = din * (1 + k);
                if rg(wb) || rg(ws) || rg(coef) {
                    // daug_w[r, j] = Σ_t aug[t, r]·g[t, j]
                    let mut dw = vec![0.0; row * dout];
                    gemm(row, n, dout, aug, true, g, false, &mut dw, 0.0);
                    let wsv = val(ws).data();
                    let cv = val(coef).data();
                    let mut dwb = vec![0.0; dout * din];
                    let mut dws = vec![0.0; dout * din];
                    let mut dc = vec![0.0; dout * din * k];
                    for j in 0..dout {
                        for i in 0..din {
                            dwb[j * din + i] = dw[i * dout + j];
                            let mut acc = 0.0;
                            for m in 0..k {
                                let de = dw[(din + i * k + m) * dout + j];
                                let ci = (j * din + i) * k + m;
                                acc += de * cv[ci];
                                dc[ci] = de * wsv[j * din + i];
                            }
                            dws[j * din + i] = acc;
                        }
                    }
                    if rg(wb) {
                        accumulate_owned(&mut grads[wb.0], dwb);
                    }
                    if rg(ws) {
                        accumulate_owned(&mut grads[ws.0], dws);
                    }
                    if rg(coef) {
                        accumulate_owned(&mut grads[coef.0], dc);
                    }
                }
                if rg(x) {
                    let waug = kan_weight_matrix(
                        val(wb).data(),
                        val(ws).data(),
                        val(coef).data(),
                        din,
                        dout,
                        k,
                    );
                    let mut daug = vec![0.0; n * row];
                    gemm(n, dout, row, g, false, &waug, true, &mut daug, 0.0);
                    let xv = val(x).data();
                    let mut dx = vec![0.0; n * din];
                    for t in 0..n {
                        for i in 0..din {
                            let mut s = daug[t * row + i] * silu_grad(xv[t * din + i]);
                            for m in 0..k {
                                s += daug[t * row + din + i * k + m] * dbasis[(t * din + i) * k + m];
                            }
                            dx[t * din + i] = s;
                        }
                    }
                    accumulate_owned(&mut grads[x.0], dx);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                probs,
            } => {
                if rg(*logits) {
                    let v = val(*logits).shape()[1];
                    let count = mask.iter().filter(|&&m| m).count() as f64;
                    let mut dl = vec![0.0; probs.len()];
                    for (r, (&t, &m)) in targets.iter().zip(mask).enumerate() {
                        if !m {
                            continue;
                        }
                        for j in 0..v {
                            let ind = if j == t { 1.0 } else { 0.0 };
                            dl[r * v + j] = g[0] * (probs[r * v + j] - ind) / count;
                        }
                    }
                    accumulate_owned(&mut grads[logits.0], dl);
                }
            }
            &Op::RmsComplex(a) => {
                if rg(a) {
                    let av = val(a).data();
                    let r = node.value.data()[0];
                    let half = (av.len() / 2) as f64;
                    let da = if r > 0.0 {
                        av.iter().map(|x| g[0] * x / (half * r)).collect()
                    } else {
                        vec![0.0; av.len()]
                    };
                    accumulate_owned(&mut grads[a.0], da);
                }
            }
            &Op::DivScalar(a, s) => {
                let sv = val(s).data()[0];
                if rg(a) {
                    accumulate_owned(&mut grads[a.0], g.iter().map(|x| x / sv).collect());
                }
                if rg(s) {
                    let ds: f64 = g
                        .iter()
                        .zip(val(a).data())
                        .map(|(gg, x)| -gg * x / (sv * sv))
                        .sum();
                    accumulate_owned(&mut grads[s.0], vec![ds]);
                }
            }
            &Op::MulScalar(a, s) => {
                let sv = val(s).data()[0];
                if rg(a) {
                    accumulate_owned(&mut grads[a.0], g.iter().map(|x| x * sv).collect());
                }
                if rg(s) {
                    let ds: f64 = g.iter().zip(val(a).data()).map(|(gg, x)| gg * x).sum();
                    accumulate_owned(&mut grads[s.0], vec![ds]);
                }
            }
            &Op::ComplexScale { a, re, im } => {
                if rg(a) {
                    // adjoint of multiplication by h is multiplication by conj(h)
                    let mut da = g.to_vec();
                    for z in da.chunks_mut(2) {
                        let (x, y) = (z[0], z[1]);
                        z[0] = re * x + im * y;
                        z[1] = -im * x + re * y;
                    }
                    accumulate_owned(&mut grads[a.0], da);
                }
            }
        }
    }
}

fn transpose_vec(src: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = src[i * cols + j];
        }
    }
    out
}

fn kan_weight_matrix(wb: &[f64], ws: &[f64], coef: &[f64], din: usize, dout: usize, k: usize) -> Vec<f64> {
    let row = din * (1 + k);
    let mut w = vec![0.0; row * dout];
    for j in 0..dout {
        for i in 0..din {
            w[i * dout + j] = wb[j * din + i];
            let s = ws[j * din + i];
            for m in 0..k {
                w[(din + i * k + m) * dout + j] = s * coef[(j * din + i) * k + m];
            }
        }
    }
    w
}

fn im2col(x: &[f64], g: &ConvGeo) -> Vec<f64> {
    let p = g.ho * g.wo;
    let mut cols = vec![0.0; g.c * g.kh * g.kw * p];
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let r = (c * g.kh + ki) * g.kw + kj;
                for oi in 0..g.ho {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii >= g.h as isize {
                        continue;
                    }
                    for oj in 0..g.wo {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        if jj < 0 || jj >= g.w as isize {
                            continue;
                        }
                        cols[r * p + oi * g.wo + oj] = x[c * g.h * g.w + ii as usize * g.w + jj as usize];
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &ConvGeo) -> Vec<f64> {
    let p = g.ho * g.wo;
    let mut x = vec![0.0; g.c * g.h * g.w];
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let r = (c * g.kh + ki) * g.kw + kj;
                for oi in 0..g.ho {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii >= g.h as isize {
                        continue;
                    }
                    for oj in 0..g.wo {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        if jj < 0 || jj >= g.w as isize {
                            continue;
                        }
                        x[c * g.h * g.w + ii as usize * g.w + jj as usize] += cols[r * p + oi * g.wo + oj];
                    }
                }
            }
        }
    }
    x
}

/// Central finite-difference gradient checking.
pub mod check {
    use super::*;

    /// Worst relative error `|a−f| / (|a|+|f|+1e-8)` over all entries of all
    /// inputs, comparing analytic gradients of `f` against central differences
    /// with step `h`. `f` must return a scalar.
    pub fn max_rel_error<F>(inputs: &[Tensor], h: f64, f: F) -> Result<f64>
    where
        F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let out = f(&mut tape, &vars)?;
        let grads = tape.backward(out)?;
        let analytic: Vec<Vec<f64>> = vars
            .iter()
            .zip(inputs)
            .map(|(&v, t)| grads.get(v).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
            .collect();
        let eval = |ins: &[Tensor]| -> Result<f64> {
            let mut tape = Tape::new();
            let vars: Vec<Var> = ins.iter().map(|t| tape.leaf(t.clone(), false)).collect();
            let out = f(&mut tape, &vars)?;
            Ok(tape.value(out).data()[0])
        };
        let mut worst: f64 = 0.0;
        let mut work: Vec<Tensor> = inputs.to_vec();
        for (ti, t) in inputs.iter().enumerate() {
            for (e, &orig) in t.data().iter().enumerate() {
                work[ti].data_mut()[e] = orig + h;
                let fp = eval(&work)?;
                work[ti].data_mut()[e] = orig - h;
                let fm = eval(&work)?;
                work[ti].data_mut()[e] = orig;
                let fd = (fp - fm) / (2.0 * h);
                let a = analytic[ti][e];
                worst = worst.max((a - fd).abs() / (a.abs() + fd.abs() + 1e-8));
            }
        }
        Ok(worst)
    }
}

#[cfg(test)]
mod tests {
    use super::check::max_rel_error;
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const FD_H: f64 = 1e-5;
    const FD_TOL: f64 = 1e-4;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn weighted_sum(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
        // random projection to a scalar so every output entry matters
        let w = Tensor::randn(tape.shape(y), 1.0, &mut rng(seed ^ 0xabc));
        let w = tape.constant(w);
        let p = tape.mul(y, w)?;
        Ok(tape.sum_all(p))
    }

    fn check_op<F>(shapes: &[&[usize]], f: F)
    where
        F: Fn(&mut Tape, &[Var]) -> Result<Var> + Copy,
    {
        for seed in 0..10 {
            let mut r = rng(seed);
            let ins: Vec<Tensor> = shapes.iter().map(|s| Tensor::randn(s, 1.0, &mut r)).collect();
            let err = max_rel_error(&ins, FD_H, |t, v| {
                let y = f(t, v)?;
                weighted_sum(t, y, seed)
            })
            .unwrap();
            assert!(err <= FD_TOL, "seed {seed}: rel err {err}");
        }
    }

    #[test]
    fn softmax_uniform_and_single() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::from_rows(&[vec![0.0, 0.0, 0.0]]).unwrap());
        let y = t.softmax_rows(x).unwrap();
        for &p in t.value(y).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = t.constant(Tensor::from_rows(&[vec![42.0]]).unwrap());
        let y = t.softmax_rows(x).unwrap();
        assert_eq!(t.value(y).data(), &[1.0]);
    }

    #[test]
    fn softmax_matches_reference_values() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap());
        let y = t.softmax_rows(x).unwrap();
        let want = [0.090_030_573_170_380_46, 0.244_728_471_054_797_65, 0.665_240_955_774_821_9];
        for (p, w) in t.value(y).data().iter().zip(want) {
            assert!((p - w).abs() < 1e-15, "{p} vs {w}");
        }
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn layer_norm_matches_row_oracle() {
        let mut r = rng(11);
        let x = Tensor::randn(&[4, 7], 2.0, &mut r);
        let g = Tensor::randn(&[7], 1.0, &mut r);
        let b = Tensor::randn(&[7], 1.0, &mut r);
        let mut t = Tape::new();
        let (xv, gv, bv) = (t.constant(x.clone()), t.constant(g.clone()), t.constant(b.clone()));
        let y = t.layer_norm(xv, gv, bv, LAYER_NORM_EPS).unwrap();
        for i in 0..4 {
            let row = &x.data()[i * 7..(i + 1) * 7];
            let mu = row.iter().sum::<f64>() / 7.0;
            let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / 7.0;
            for j in 0..7 {
                let want = g.data()[j] * (row[j] - mu) / (var + LAYER_NORM_EPS).sqrt() + b.data()[j];
                assert!((t.value(y).data()[i * 7 + j] - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn softmax_rejects_nan() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::from_rows(&[vec![0.0, f64::NAN]]).unwrap());
        assert!(matches!(t.softmax_rows(x), Err(Error::Numeric(_))));
    }

    #[test]
    fn layer_norm_constant_row_and_zero_gain() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::from_rows(&[vec![3.0, 3.0, 3.0]]).unwrap());
        let g = t.constant(Tensor::full(&[3], 1.0));
        let b = t.constant(Tensor::zeros(&[3]));
        let y = t.layer_norm(x, g, b, LAYER_NORM_EPS).unwrap();
        assert_eq!(t.value(y).data(), &[0.0, 0.0, 0.0]);

        let x = t.constant(Tensor::from_rows(&[vec![1.0, -2.0, 5.0]]).unwrap());
        let g0 = t.constant(Tensor::zeros(&[3]));
        let b = t.constant(Tensor::full(&[3], 0.7));
        let y = t.layer_norm(x, g0, b, LAYER_NORM_EPS).unwrap();
        assert_eq!(t.value(y).data(), &[0.7, 0.7, 0.7]);
    }

    #[test]
    fn silu_at_zero_and_pool_of_constant() {
        assert_eq!(silu_scalar(0.0), 0.0);
        let mut t = Tape::new();
        let x = t.constant(Tensor::full(&[2, 4, 4], 0.3));
        let y = t.avg_pool2d(x, 2).unwrap();
        assert!(t.value(y).data().iter().all(|&v| (v - 0.3).abs() < 1e-15));
        let y = t.avg_pool2d(x, 4).unwrap();
        assert!(t.value(y).data().iter().all(|&v| (v - 0.3).abs() < 1e-15));
    }

    #[test]
    fn oversize_windows_are_dimension_errors() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros(&[1, 4, 4]));
        assert!(matches!(t.avg_pool2d(x, 8), Err(Error::Dimension { .. })));
        let w = t.constant(Tensor::zeros(&[1, 1, 6, 6]));
        let b = t.constant(Tensor::zeros(&[1]));
        assert!(matches!(t.conv2d(x, w, b, 1, 0), Err(Error::Dimension { .. })));
    }

    #[test]
    fn conv_of_zero_image_is_zero() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros(&[3, 8, 8]));
        let w = t.constant(Tensor::randn(&[4, 3, 3, 3], 1.0, &mut rng(1)));
        let b = t.constant(Tensor::zeros(&[4]));
        let y = t.conv2d(x, w, b, 1, 1).unwrap();
        assert_eq!(t.shape(y), &[4, 8, 8]);
        assert!(t.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_matches_direct_loop() {
        let mut r = rng(3);
        let xt = Tensor::randn(&[2, 5, 5], 1.0, &mut r);
        let wt = Tensor::randn(&[3, 2, 3, 3], 1.0, &mut r);
        let bt = Tensor::randn(&[3], 1.0, &mut r);
        let mut t = Tape::new();
        let x = t.constant(xt.clone());
        let w = t.constant(wt.clone());
        let b = t.constant(bt.clone());
        let y = t.conv2d(x, w, b, 2, 1).unwrap();
        assert_eq!(t.shape(y), &[3, 3, 3]);
        for o in 0..3 {
            for i in 0..3 {
                for j in 0..3 {
                    let mut s = bt.data()[o];
                    for c in 0..2 {
                        for ki in 0..3 {
                            for kj in 0..3 {
                                let ii = (i * 2 + ki) as isize - 1;
                                let jj = (j * 2 + kj) as isize - 1;
                                if (0..5).contains(&ii) && (0..5).contains(&jj) {
                                    s += wt.data()[((o * 2 + c) * 3 + ki) * 3 + kj]
                                        * xt.data()[c * 25 + ii as usize * 5 + jj as usize];
                                }
                            }
                        }
                    }
                    let got = t.value(y).data()[o * 9 + i * 3 + j];
                    assert!((got - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn linear_sum_grad_is_broadcast_of_x() {
        let mut t = Tape::new();
        let w = t.leaf(Tensor::randn(&[3, 2], 1.0, &mut rng(5)), true);
        let xt = Tensor::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap();
        let x = t.constant(xt);
        let y = t.matmul(x, w).unwrap();
        let l = t.sum_all(y);
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(w).unwrap(), &[1.0, 1.0, 2.0, 2.0, 3.0, 3.0]);
        assert!(g.get(x).is_none());
    }

    #[test]
    fn detached_tensor_receives_no_grad() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::full(&[2], 1.0), true);
        let d = t.detach(a);
        let y = t.mul(a, d).unwrap();
        let l = t.sum_all(y);
        let g = t.backward(l).unwrap();
        assert!(g.get(d).is_none());
        assert_eq!(g.get(a).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_clears_tape() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::zeros(&[2, 2]), true);
        assert!(matches!(t.backward(a), Err(Error::Contract(_))));
        let l = t.sum_all(a);
        t.backward(l).unwrap();
        assert!(t.is_empty());
    }

    #[test]
    fn retained_tape_survives_backward() {
        let mut t = Tape::new();
        t.retain(true);
        let a = t.leaf(Tensor::full(&[2], 2.0), true);
        let l = t.sum_all(a);
        let g1 = t.backward(l).unwrap();
        let g2 = t.backward(l).unwrap();
        assert_eq!(g1.get(a), g2.get(a));
    }

    #[test]
    fn fd_matmul_variants() {
        check_op(&[&[3, 4], &[4, 2]], |t, v| t.matmul(v[0], v[1]));
        check_op(&[&[3, 4], &[2, 4]], |t, v| t.matmul_nt(v[0], v[1]));
        check_op(&[&[4, 3], &[4, 2]], |t, v| t.matmul_tn(v[0], v[1]));
    }

    #[test]
    fn fd_elementwise_and_broadcast() {
        check_op(&[&[2, 3], &[2, 3]], |t, v| t.add(v[0], v[1]));
        check_op(&[&[2, 3], &[2, 3]], |t, v| t.sub(v[0], v[1]));
        check_op(&[&[2, 3], &[2, 3]], |t, v| t.mul(v[0], v[1]));
        check_op(&[&[2, 3], &[3]], |t, v| t.add_row(v[0], v[1]));
        check_op(&[&[2, 3], &[3]], |t, v| t.mul_row(v[0], v[1]));
        check_op(&[&[2, 3]], |t, v| Ok(t.scale(v[0], -1.7)));
        check_op(&[&[2, 3]], |t, v| Ok(t.gelu(v[0])));
        check_op(&[&[2, 3]], |t, v| Ok(t.silu(v[0])));
    }

    #[test]
    fn fd_softmax_layernorm() {
        check_op(&[&[3, 4]], |t, v| t.softmax_rows(v[0]));
        check_op(&[&[3, 5], &[5], &[5]], |t, v| t.layer_norm(v[0], v[1], v[2], LAYER_NORM_EPS));
    }

    #[test]
    fn fd_conv_pool_gather() {
        check_op(&[&[2, 6, 6], &[3, 2, 3, 3], &[3]], |t, v| t.conv2d(v[0], v[1], v[2], 1, 1));
        check_op(&[&[2, 6, 6], &[3, 2, 2, 2], &[3]], |t, v| t.conv2d(v[0], v[1], v[2], 2, 0));
        check_op(&[&[2, 4, 4]], |t, v| t.avg_pool2d(v[0], 2));
        check_op(&[&[5, 3]], |t, v| t.gather_rows(v[0], &[4, 0, 4, 2]));
    }

    #[test]
    fn fd_structural_ops() {
        check_op(&[&[3, 5]], |t, v| t.slice_cols(v[0], 1, 3));
        check_op(&[&[3, 2], &[3, 4]], |t, v| t.concat_cols(&[v[0], v[1]]));
        check_op(&[&[2, 3], &[4, 3]], |t, v| t.concat_rows(&[v[0], v[1]]));
        check_op(&[&[2, 6]], |t, v| t.reshape(v[0], vec![3, 4]));
        check_op(&[&[2, 5]], |t, v| t.transpose(v[0]));
    }

    #[test]
    fn fd_local_attention() {
        check_op(&[&[3, 4], &[12, 4], &[12, 5]], |t, v| t.local_attention(v[0], v[1], v[2], 4, 0.5));
        check_op(&[&[3, 4], &[3, 4], &[3, 2]], |t, v| t.local_attention(v[0], v[1], v[2], 1, 0.5));
    }

    #[test]
    fn fd_cross_entropy() {
        for seed in 0..10 {
            let logits = Tensor::randn(&[4, 6], 1.0, &mut rng(seed));
            let err = max_rel_error(&[logits], FD_H, |t, v| {
                t.cross_entropy(v[0], &[1, 5, 0, 2], &[true, false, true, true])
            })
            .unwrap();
            assert!(err <= FD_TOL);
        }
    }

    #[test]
    fn fd_channel_scalar_ops() {
        check_op(&[&[3, 4]], |t, v| {
            let s = t.rms_complex(v[0])?;
            t.div_scalar(v[0], s)
        });
        check_op(&[&[3, 4], &[1]], |t, v| t.mul_scalar(v[0], v[1]));
        check_op(&[&[3, 4]], |t, v| t.complex_scale(v[0], 0.3, -1.2));
    }

    #[test]
    fn identical_inputs_give_bit_identical_grads() {
        let run = || {
            let mut t = Tape::new();
            let mut r = rng(11);
            let a = t.leaf(Tensor::randn(&[4, 4], 1.0, &mut r), true);
            let b = t.leaf(Tensor::randn(&[4, 4], 1.0, &mut r), true);
            let c = t.matmul(a, b).unwrap();
            let s = t.softmax_rows(c).unwrap();
            let l = t.sum_all(s);
            let l2 = t.mul(l, l).unwrap();
            let g = t.backward(l2).unwrap();
            (g.get(a).unwrap().to_vec(), g.get(b).unwrap().to_vec())
        };
        assert_eq!(run(), run());
    }

    proptest::proptest! {
        #[test]
        fn softmax_rows_sum_to_one_and_shift_invariant(
            row in proptest::collection::vec(-30.0f64..30.0, 1..12),
            shift in -100.0f64..100.0,
        ) {
            let n = row.len();
            let mut t = Tape::new();
            let x = t.constant(Tensor::new(vec![1, n], row.clone()).unwrap());
            let xs = t.constant(Tensor::new(vec![1, n], row.iter().map(|v| v + shift).collect()).unwrap());
            let y = t.softmax_rows(x).unwrap();
            let ys = t.softmax_rows(xs).unwrap();
            let s: f64 = t.value(y).data().iter().sum();
            proptest::prop_assert!((s - 1.0).abs() <= 1e-6);
            proptest::prop_assert!(t.value(y).data().iter().all(|&p| p >= 0.0));
            proptest::prop_assert!(t.value(y).max_abs_diff(t.value(ys)) <= 1e-12);
        }
    }
}
