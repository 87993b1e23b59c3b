//! Reverse-mode differentiation over a linear tape.
//!
//! Nodes are appended in evaluation order, so the tape is already a
//! topological order; `backward` walks it once in reverse.

use crate::error::{invalid, shape_err, Result};
use crate::numerics::attention::{self, AttentionStats, AttnDims, BlockSparsity};
use crate::numerics::special::{digamma, ln_beta};
use crate::numerics::{Real, Tensor};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    MatMul(Var, Var),
    Transpose(Var),
    BatchedTranspose { x: Var, batch: usize },
    Reshape(Var),
    LayerNorm { x: Var, rstd: Vec<T> },
    Modulate { x: Var, shift: Var, scale: Var, group: usize },
    GroupMul { x: Var, gate: Var, group: usize },
    Silu(Var),
    Gelu(Var),
    Softplus(Var),
    Exp(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Conv2d { x: Var, w: Var, b: Var, geo: ConvGeometry },
    MeanLast(Var),
    MeanRows { x: Var, group: usize },
    Sum(Var),
    Mean(Var),
    WeightedSum { x: Var, w: Vec<T> },
    Pick { x: Var, idx: Vec<usize>, live: Vec<bool> },
    Column { x: Var, col: usize },
    Concat(Vec<Var>),
    Embedding { table: Var, ids: Vec<usize> },
    BetaLogProb { alpha: Var, beta: Var, a: Vec<f64> },
    Clamp { x: Var, lo: f64, hi: f64 },
    Minimum(Var, Var),
    BceLogits { z: Var, y: Vec<f64> },
    Attention { qkv: Var, dims: AttnDims, probs: Vec<T>, uniform: Vec<bool> },
}

#[derive(Clone, Copy, Debug)]
struct ConvGeometry {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

#[derive(Clone, Debug)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recording of one forward computation.
#[derive(Debug, Default)]
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    attention: AttentionStats,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), attention: AttentionStats::default() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node { shape, value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.value.iter().map(|x| x.f32()).collect()).expect("node shape")
    }

    /// First element as `f64`; intended for scalar nodes.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0].f64()
    }

    pub fn attention_stats(&self) -> AttentionStats {
        self.attention
    }

    pub fn reset_attention_stats(&mut self) -> AttentionStats {
        std::mem::take(&mut self.attention)
    }

    pub fn leaf(&mut self, t: &Tensor, needs_grad: bool) -> Var {
        let value = t.data().iter().map(|&x| T::of_f32(x)).collect();
        self.push(t.shape().to_vec(), value, Op::Leaf, needs_grad)
    }

    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.leaf(t, false)
    }

    pub fn leaf_values(&mut self, shape: &[usize], values: Vec<T>, needs_grad: bool) -> Result<Var> {
        if numel(shape) != values.len() {
            return shape_err(format!("{shape:?} vs {} values", values.len()));
        }
        Ok(self.push(shape.to_vec(), values, Op::Leaf, needs_grad))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(format!("{what}: {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        self.same_shape(a, b, what)?;
        let value = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.ng(&[a, b]);
        Ok(self.push(shape, value, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "minimum", |x, y| if x <= y { x } else { y }, Op::Minimum(a, b))
    }

    /// `a (m, n) + row (n)` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let n = *self.shape(a).last().unwrap_or(&0);
        if numel(self.shape(row)) != n {
            return shape_err(format!("add_row {:?} + {:?}", self.shape(a), self.shape(row)));
        }
        let r = self.value(row).to_vec();
        let value = self.value(a).iter().enumerate().map(|(i, &x)| x + r[i % n]).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.ng(&[a, row]);
        Ok(self.push(shape, value, Op::AddRow(a, row), ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let s = T::of(s);
        let value = self.value(a).iter().map(|&x| x * s).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.ng(&[a]);
        self.push(shape, value, Op::Scale(a, s), ng)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let s = T::of(s);
        let value = self.value(a).iter().map(|&x| x + s).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.ng(&[a]);
        self.push(shape, value, Op::AddScalar(a), ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return shape_err(format!("matmul {sa:?} x {sb:?}"));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, self.value(a), false, self.value(b), false, &mut out, false);
        let ng = self.ng(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return shape_err(format!("transpose needs 2-D, got {s:?}"));
        }
        let (m, n) = (s[0], s[1]);
        let v = self.value(a);
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = v[i * n + j];
            }
        }
        let ng = self.ng(&[a]);
        Ok(self.push(vec![n, m], out, Op::Transpose(a), ng))
    }

    /// `(batch, m, n) -> (batch, n, m)`, with the input viewed as
    /// `batch` contiguous `m x n` matrices.
    pub fn batched_transpose(&mut self, a: Var, batch: usize, m: usize, n: usize) -> Result<Var> {
        if numel(self.shape(a)) != batch * m * n {
            return shape_err(format!("batched_transpose {:?} as {batch}x{m}x{n}", self.shape(a)));
        }
        let v = self.value(a);
        let mut out = vec![T::zero(); batch * m * n];
        for b in 0..batch {
            let o = b * m * n;
            for i in 0..m {
                for j in 0..n {
                    out[o + j * m + i] = v[o + i * n + j];
                }
            }
        }
        let ng = self.ng(&[a]);
        Ok(self.push(vec![batch, n, m], out, Op::BatchedTranspose { x: a, batch }, ng))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != numel(self.shape(a)) {
            return shape_err(format!("reshape {:?} -> {shape:?}", self.shape(a)));
        }
        let value = self.value(a).to_vec();
        let ng = self.ng(&[a]);
        Ok(self.push(shape.to_vec(), value, Op::Reshape(a), ng))
    }

    /// Normalizes each row (last axis) to zero mean and unit variance, no affine.
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let n = *self.shape(a).last().unwrap();
        let v = self.value(a);
        let rows = v.len() / n;
        let mut out = vec![T::zero(); v.len()];
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let x = &v[r * n..(r + 1) * n];
            let mean = x.iter().map(|t| t.f64()).sum::<f64>() / n as f64;
            let var = x.iter().map(|t| (t.f64() - mean).powi(2)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            for j in 0..n {
                out[r * n + j] = T::of((x[j].f64() - mean) * rs);
            }
            rstd.push(T::of(rs));
        }
        let shape = self.shape(a).to_vec();
        let ng = self.ng(&[a]);
        self.push(shape, out, Op::LayerNorm { x: a, rstd }, ng)
    }

    fn check_grouped(&self, x: Var, p: Var, group: usize, what: &str) -> Result<(usize, usize)> {
        let sx = self.shape(x);
        let sp = self.shape(p);
        let n = *sx.last().unwrap_or(&0);
        let rows = numel(sx) / n.max(1);
        if group == 0 || rows % group != 0 || numel(sp) != (rows / group) * n {
            return shape_err(format!("{what}: x {sx:?}, params {sp:?}, group {group}"));
        }
        Ok((rows, n))
    }

    /// `x * (1 + scale) + shift`, where consecutive blocks of `group` rows of
    /// `x` share one row of `shift` and `scale`.
    pub fn modulate(&mut self, x: Var, shift: Var, scale: Var, group: usize) -> Result<Var> {
        let (rows, n) = self.check_grouped(x, shift, group, "modulate")?;
        self.same_shape(shift, scale, "modulate")?;
        let (xv, sh, sc) = (self.value(x), self.value(shift), self.value(scale));
        let mut out = vec![T::zero(); rows * n];
        for r in 0..rows {
            let g = r / group;
            for j in 0..n {
                out[r * n + j] = xv[r * n + j] * (T::one() + sc[g * n + j]) + sh[g * n + j];
            }
        }
        let shape = self.shape(x).to_vec();
        let ng = self.ng(&[x, shift, scale]);
        Ok(self.push(shape, out, Op::Modulate { x, shift, scale, group }, ng))
    }

    /// `x * gate` with one gate row per block of `group` rows.
    pub fn group_mul(&mut self, x: Var, gate: Var, group: usize) -> Result<Var> {
        let (rows, n) = self.check_grouped(x, gate, group, "group_mul")?;
        let (xv, gv) = (self.value(x), self.value(gate));
        let out = (0..rows * n).map(|i| xv[i] * gv[(i / n / group) * n + i % n]).collect();
        let shape = self.shape(x).to_vec();
        let ng = self.ng(&[x, gate]);
        Ok(self.push(shape, out, Op::GroupMul { x, gate, group }, ng))
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let value = self.value(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.ng(&[a]);
        self.push(shape, value, op, ng)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * sigmoid(x), Op::Silu(a))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(
            a,
            |x| {
                let c = T::of(GELU_C);
                let inner = c * (x + T::of(0.044715) * x * x * x);
                T::of(0.5) * x * (T::one() + inner.tanh())
            },
            Op::Gelu(a),
        )
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.exp(), Op::Exp(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let (l, h) = (T::of(lo), T::of(hi));
        self.unary(a, |x| x.max(l).min(h), Op::Clamp { x: a, lo, hi })
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let n = *self.shape(a).last().unwrap();
        let v = self.value(a);
        let mut out = vec![T::zero(); v.len()];
        for (x, o) in v.chunks(n).zip(out.chunks_mut(n)) {
            let m = x.iter().cloned().fold(T::neg_infinity(), T::max);
            let z: f64 = x.iter().map(|&t| (t - m).exp().f64()).sum();
            for (oj, &xj) in o.iter_mut().zip(x) {
                *oj = T::of((xj - m).exp().f64() / z);
            }
        }
        let shape = self.shape(a).to_vec();
        let ng = self.ng(&[a]);
        self.push(shape, out, Op::Softmax(a), ng)
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let n = *self.shape(a).last().unwrap();
        let v = self.value(a);
        let mut out = vec![T::zero(); v.len()];
        for (x, o) in v.chunks(n).zip(out.chunks_mut(n)) {
            let m = x.iter().cloned().fold(T::neg_infinity(), T::max).f64();
            let lse = m + x.iter().map(|&t| (t.f64() - m).exp()).sum::<f64>().ln();
            for (oj, &xj) in o.iter_mut().zip(x) {
                *oj = T::of(xj.f64() - lse);
            }
        }
        let shape = self.shape(a).to_vec();
        let ng = self.ng(&[a]);
        self.push(shape, out, Op::LogSoftmax(a), ng)
    }

    /// 2-D convolution, NCHW input, `(cout, cin, kh, kw)` weights.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || numel(self.shape(b)) != sw[0] || stride == 0 {
            return shape_err(format!("conv2d x {sx:?}, w {sw:?}, b {:?}", self.shape(b)));
        }
        let (batch, cin, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (cout, kh, kw) = (sw[0], sw[2], sw[3]);
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return shape_err("conv2d kernel larger than padded input");
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let geo = ConvGeometry { batch, cin, h, w: wd, cout, kh, kw, stride, pad, ho, wo };
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let mut out = vec![T::zero(); batch * cout * ho * wo];
        for n in 0..batch {
            for o in 0..cout {
                for y in 0..ho {
                    for xo in 0..wo {
                        let mut acc = bv[o];
                        for c in 0..cin {
                            for ky in 0..kh {
                                let iy = (y * stride + ky) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let ix = (xo * stride + kx) as isize - pad as isize;
                                    if ix < 0 || ix >= wd as isize {
                                        continue;
                                    }
                                    acc += wv[((o * cin + c) * kh + ky) * kw + kx]
                                        * xv[((n * cin + c) * h + iy as usize) * wd + ix as usize];
                                }
                            }
                        }
                        out[((n * cout + o) * ho + y) * wo + xo] = acc;
                    }
                }
            }
        }
        let ng = self.ng(&[x, w, b]);
        Ok(self.push(vec![batch, cout, ho, wo], out, Op::Conv2d { x, w, b, geo }, ng))
    }

    /// Mean over the last axis: `(.., n) -> (..)`.
    pub fn mean_last(&mut self, a: Var) -> Var {
        let s = self.shape(a).to_vec();
        let n = *s.last().unwrap();
        let out = self
            .value(a)
            .chunks(n)
            .map(|c| T::of(c.iter().map(|t| t.f64()).sum::<f64>() / n as f64))
            .collect();
        let mut shape = s[..s.len() - 1].to_vec();
        if shape.is_empty() {
            shape.push(1);
        }
        let ng = self.ng(&[a]);
        self.push(shape, out, Op::MeanLast(a), ng)
    }

    /// Mean over each block of `group` consecutive rows: `(g*group, n) -> (g, n)`.
    pub fn mean_rows(&mut self, a: Var, group: usize) -> Result<Var> {
        let s = self.shape(a);
        let n = *s.last().unwrap();
        let rows = numel(s) / n;
        if group == 0 || rows % group != 0 {
            return shape_err(format!("mean_rows {s:?} by {group}"));
        }
        let g = rows / group;
        let v = self.value(a);
        let mut acc = vec![0.0f64; g * n];
        for r in 0..rows {
            for j in 0..n {
                acc[(r / group) * n + j] += v[r * n + j].f64();
            }
        }
        let out = acc.into_iter().map(|x| T::of(x / group as f64)).collect();
        let ng = self.ng(&[a]);
        Ok(self.push(vec![g, n], out, Op::MeanRows { x: a, group }, ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().map(|t| t.f64()).sum::<f64>();
        let ng = self.ng(&[a]);
        self.push(vec![1], vec![T::of(s)], Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.iter().map(|t| t.f64()).sum::<f64>() / v.len() as f64;
        let ng = self.ng(&[a]);
        self.push(vec![1], vec![T::of(s)], Op::Mean(a), ng)
    }

    /// `sum_i w_i x_i` with constant weights.
    pub fn weighted_sum(&mut self, a: Var, w: &[f64]) -> Result<Var> {
        if w.len() != self.value(a).len() {
            return shape_err(format!("weighted_sum: {} weights for {:?}", w.len(), self.shape(a)));
        }
        let s = self.value(a).iter().zip(w).map(|(t, &wi)| t.f64() * wi).sum::<f64>();
        let ng = self.ng(&[a]);
        let w = w.iter().map(|&x| T::of(x)).collect();
        Ok(self.push(vec![1], vec![T::of(s)], Op::WeightedSum { x: a, w }, ng))
    }

    /// Picks `x[i, idx[i]]` for each row, clamped from below at `floor`.
    /// Entries at the floor carry no gradient.
    pub fn pick(&mut self, x: Var, idx: &[usize], floor: f64) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || s[0] != idx.len() || idx.iter().any(|&i| i >= s[1]) {
            return shape_err(format!("pick {s:?} with {idx:?}"));
        }
        let k = s[1];
        let v = self.value(x);
        let mut out = Vec::with_capacity(idx.len());
        let mut live = Vec::with_capacity(idx.len());
        for (r, &i) in idx.iter().enumerate() {
            let val = v[r * k + i].f64();
            live.push(val >= floor);
            out.push(T::of(val.max(floor)));
        }
        let ng = self.ng(&[x]);
        Ok(self.push(vec![idx.len()], out, Op::Pick { x, idx: idx.to_vec(), live }, ng))
    }

    /// Column `col` of a 2-D node.
    pub fn column(&mut self, x: Var, col: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || col >= s[1] {
            return shape_err(format!("column {col} of {s:?}"));
        }
        let k = s[1];
        let out = self.value(x).chunks(k).map(|r| r[col]).collect();
        let rows = s[0];
        let ng = self.ng(&[x]);
        Ok(self.push(vec![rows], out, Op::Column { x, col }, ng))
    }

    /// Flattens and concatenates.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return invalid("concat of nothing");
        }
        let mut out = Vec::new();
        for &p in parts {
            out.extend_from_slice(self.value(p));
        }
        let n = out.len();
        let ng = self.ng(parts);
        Ok(self.push(vec![n], out, Op::Concat(parts.to_vec()), ng))
    }

    /// Rows of `table` selected by `ids`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table);
        if s.len() != 2 || ids.iter().any(|&i| i >= s[0]) {
            return shape_err(format!("embedding {s:?} with ids {ids:?}"));
        }
        let c = s[1];
        let t = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            out.extend_from_slice(&t[i * c..(i + 1) * c]);
        }
        let ng = self.ng(&[table]);
        Ok(self.push(vec![ids.len(), c], out, Op::Embedding { table, ids: ids.to_vec() }, ng))
    }

    /// Elementwise Beta log-density at fixed sample points `a`.
    pub fn beta_logprob(&mut self, alpha: Var, beta: Var, a: &[f64]) -> Result<Var> {
        self.same_shape(alpha, beta, "beta_logprob")?;
        if self.value(alpha).len() != a.len() {
            return shape_err("beta_logprob: sample count");
        }
        let mut out = Vec::with_capacity(a.len());
        for ((&al, &be), &x) in self.value(alpha).iter().zip(self.value(beta)).zip(a) {
            let (al, be) = (al.f64(), be.f64());
            if !(al > 0.0 && be > 0.0) || !(x > 0.0 && x < 1.0) {
                return invalid(format!("beta_logprob outside domain: alpha {al}, beta {be}, a {x}"));
            }
            out.push(T::of((al - 1.0) * x.ln() + (be - 1.0) * (1.0 - x).ln() - ln_beta(al, be)));
        }
        let n = out.len();
        let ng = self.ng(&[alpha, beta]);
        Ok(self.push(vec![n], out, Op::BetaLogProb { alpha, beta, a: a.to_vec() }, ng))
    }

    /// Mean binary cross-entropy of logits `z` against targets in `[0, 1]`.
    pub fn bce_with_logits(&mut self, z: Var, targets: &[f64]) -> Result<Var> {
        if self.value(z).len() != targets.len() || targets.is_empty() {
            return shape_err("bce_with_logits: target count");
        }
        let loss = self
            .value(z)
            .iter()
            .zip(targets)
            .map(|(&zi, &y)| {
                let z = zi.f64();
                z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
            })
            .sum::<f64>()
            / targets.len() as f64;
        let ng = self.ng(&[z]);
        Ok(self.push(vec![1], vec![T::of(loss)], Op::BceLogits { z, y: targets.to_vec() }, ng))
    }

    /// Mean cross-entropy of row logits against class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lp = self.log_softmax(logits);
        let picked = self.pick(lp, labels, f64::NEG_INFINITY)?;
        let m = self.mean(picked);
        Ok(self.scale(m, -1.0))
    }

    /// Mean squared error against another node.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean(sq))
    }

    /// Multi-head self-attention over `qkv (batch*tokens, 3*width)`,
    /// returning `(batch*tokens, width)`. `sparse` enables block pruning.
    pub fn attention(
        &mut self,
        qkv: Var,
        batch: usize,
        tokens: usize,
        heads: usize,
        sparse: Option<&BlockSparsity>,
    ) -> Result<Var> {
        let s = self.shape(qkv);
        if s.len() != 2 || s[0] != batch * tokens || s[1] % 3 != 0 || (s[1] / 3) % heads != 0 {
            return shape_err(format!("attention qkv {s:?}, batch {batch}, tokens {tokens}, heads {heads}"));
        }
        if let Some(sp) = sparse {
            if sp.block == 0 || tokens % sp.block != 0 {
                return invalid(format!("block size {} does not divide {tokens} tokens", sp.block));
            }
        }
        let width = s[1] / 3;
        let dims = AttnDims { batch, tokens, heads, width };
        let mut out = vec![T::zero(); batch * tokens * width];
        let mut probs = vec![T::zero(); batch * heads * tokens * tokens];
        let mut uniform = vec![false; batch * heads * tokens];
        let mut stats = AttentionStats::default();
        attention::forward(self.value(qkv), dims, sparse, &mut out, &mut probs, &mut uniform, &mut stats);
        self.attention.merge(&stats);
        let ng = self.ng(&[qkv]);
        Ok(self.push(vec![batch * tokens, width], out, Op::Attention { qkv, dims, probs, uniform }, ng))
    }

    /// Gradients of the scalar `loss` with respect to every node that
    /// depends on a gradient-requiring leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if numel(self.shape(loss)) != 1 {
            return invalid(format!("loss must be scalar, got shape {:?}", self.shape(loss)));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !nodes[v.0].needs_grad {
                return;
            }
            let n = nodes[v.0].value.len();
            let buf = grads[v.0].get_or_insert_with(|| vec![T::zero(); n]);
            f(buf);
        };
        let val = |v: Var| nodes[v.0].value.as_slice();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(x, &y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |d| (0..d.len()).for_each(|i| d[i] += g[i] * bv[i]));
                acc(*b, &mut |d| (0..d.len()).for_each(|i| d[i] += g[i] * av[i]));
            }
            Op::Minimum(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |d| (0..d.len()).for_each(|i| if av[i] <= bv[i] { d[i] += g[i] }));
                acc(*b, &mut |d| (0..d.len()).for_each(|i| if av[i] > bv[i] { d[i] += g[i] }));
            }
            Op::AddRow(a, r) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*r, &mut |d| {
                    let n = d.len();
                    g.iter().enumerate().for_each(|(i, &x)| d[i % n] += x)
                });
            }
            Op::Scale(a, s) => acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(x, &y)| *x += y * *s)),
            Op::AddScalar(a) | Op::Reshape(a) => acc(*a, &mut |d| add_into(d, g)),
            Op::MatMul(a, b) => {
                let (sa, sb) = (&nodes[a.0].shape, &nodes[b.0].shape);
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (av, bv) = (val(*a), val(*b));
                // dA = G B^T, dB = A^T G
                acc(*a, &mut |d| T::gemm(m, n, k, g, false, bv, true, d, true));
                acc(*b, &mut |d| T::gemm(k, m, n, av, true, g, false, d, true));
            }
            Op::Transpose(a) => {
                let s = &nodes[a.0].shape;
                let (m, n) = (s[0], s[1]);
                acc(*a, &mut |d| {
                    for i in 0..m {
                        for j in 0..n {
                            d[i * n + j] += g[j * m + i];
                        }
                    }
                });
            }
            Op::BatchedTranspose { x, batch } => {
                // output is (batch, n, m)
                let (n, m) = (node.shape[1], node.shape[2]);
                acc(*x, &mut |d| {
                    for b in 0..*batch {
                        let o = b * m * n;
                        for i in 0..m {
                            for j in 0..n {
                                d[o + i * n + j] += g[o + j * m + i];
                            }
                        }
                    }
                });
            }
            Op::LayerNorm { x, rstd } => {
                let n = *node.shape.last().unwrap();
                let y = &node.value;
                acc(*x, &mut |d| {
                    for (r, rs) in rstd.iter().enumerate() {
                        let gy = &g[r * n..(r + 1) * n];
                        let yy = &y[r * n..(r + 1) * n];
                        let mg = gy.iter().map(|t| t.f64()).sum::<f64>() / n as f64;
                        let mgy = gy.iter().zip(yy).map(|(a, b)| a.f64() * b.f64()).sum::<f64>() / n as f64;
                        for j in 0..n {
                            d[r * n + j] += *rs * (gy[j] - T::of(mg) - yy[j] * T::of(mgy));
                        }
                    }
                });
            }
            Op::Modulate { x, shift, scale, group } => {
                let n = *node.shape.last().unwrap();
                let (xv, sc) = (val(*x), val(*scale));
                let group = *group;
                acc(*x, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * (T::one() + sc[(i / n / group) * n + i % n]);
                    }
                });
                acc(*shift, &mut |d| {
                    for i in 0..g.len() {
                        d[(i / n / group) * n + i % n] += g[i];
                    }
                });
                acc(*scale, &mut |d| {
                    for i in 0..g.len() {
                        d[(i / n / group) * n + i % n] += g[i] * xv[i];
                    }
                });
            }
            Op::GroupMul { x, gate, group } => {
                let n = *node.shape.last().unwrap();
                let (xv, gv) = (val(*x), val(*gate));
                let group = *group;
                acc(*x, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * gv[(i / n / group) * n + i % n];
                    }
                });
                acc(*gate, &mut |d| {
                    for i in 0..g.len() {
                        d[(i / n / group) * n + i % n] += g[i] * xv[i];
                    }
                });
            }
            Op::Silu(a) => {
                let av = val(*a);
                acc(*a, &mut |d| {
                    for i in 0..d.len() {
                        let s = sigmoid(av[i]);
                        d[i] += g[i] * s * (T::one() + av[i] * (T::one() - s));
                    }
                });
            }
            Op::Gelu(a) => {
                let av = val(*a);
                acc(*a, &mut |d| {
                    for i in 0..d.len() {
                        let x = av[i];
                        let c = T::of(GELU_C);
                        let k = T::of(0.044715);
                        let th = (c * (x + k * x * x * x)).tanh();
                        let half = T::of(0.5);
                        let dx = half * (T::one() + th)
                            + half * x * (T::one() - th * th) * c * (T::one() + T::of(3.0) * k * x * x);
                        d[i] += g[i] * dx;
                    }
                });
            }
            Op::Softplus(a) => {
                let av = val(*a);
                acc(*a, &mut |d| (0..d.len()).for_each(|i| d[i] += g[i] * sigmoid(av[i])));
            }
            Op::Exp(a) => {
                let y = &node.value;
                acc(*a, &mut |d| (0..d.len()).for_each(|i| d[i] += g[i] * y[i]));
            }
            Op::Clamp { x, lo, hi } => {
                let xv = val(*x);
                let (l, h) = (T::of(*lo), T::of(*hi));
                acc(*x, &mut |d| {
                    (0..d.len()).for_each(|i| if xv[i] >= l && xv[i] <= h { d[i] += g[i] })
                });
            }
            Op::Softmax(a) => {
                let n = *node.shape.last().unwrap();
                let y = &node.value;
                acc(*a, &mut |d| {
                    for r in 0..y.len() / n {
                        let sl = r * n..(r + 1) * n;
                        let dot = g[sl.clone()].iter().zip(&y[sl.clone()]).map(|(a, b)| a.f64() * b.f64()).sum::<f64>();
                        for j in sl {
                            d[j] += y[j] * (g[j] - T::of(dot));
                        }
                    }
                });
            }
            Op::LogSoftmax(a) => {
                let n = *node.shape.last().unwrap();
                let y = &node.value;
                acc(*a, &mut |d| {
                    for r in 0..y.len() / n {
                        let sl = r * n..(r + 1) * n;
                        let gs = g[sl.clone()].iter().map(|t| t.f64()).sum::<f64>();
                        for j in sl {
                            d[j] += g[j] - y[j].exp() * T::of(gs);
                        }
                    }
                });
            }
            Op::Conv2d { x, w, b, geo } => {
                let ConvGeometry { batch, cin, h, w: wd, cout, kh, kw, stride, pad, ho, wo } = *geo;
                let (xv, wv) = (val(*x), val(*w));
                let gidx = |n: usize, o: usize, y: usize, xo: usize| ((n * cout + o) * ho + y) * wo + xo;
                let src = |y: usize, ky: usize, lim: usize| -> Option<usize> {
                    let i = (y * stride + ky) as isize - pad as isize;
                    (i >= 0 && i < lim as isize).then_some(i as usize)
                };
                acc(*b, &mut |d| {
                    for n in 0..batch {
                        for o in 0..cout {
                            for y in 0..ho {
                                for xo in 0..wo {
                                    d[o] += g[gidx(n, o, y, xo)];
                                }
                            }
                        }
                    }
                });
                acc(*w, &mut |d| {
                    for n in 0..batch {
                        for o in 0..cout {
                            for y in 0..ho {
                                for xo in 0..wo {
                                    let go = g[gidx(n, o, y, xo)];
                                    for c in 0..cin {
                                        for ky in 0..kh {
                                            let Some(iy) = src(y, ky, h) else { continue };
                                            for kx in 0..kw {
                                                let Some(ix) = src(xo, kx, wd) else { continue };
                                                d[((o * cin + c) * kh + ky) * kw + kx] +=
                                                    go * xv[((n * cin + c) * h + iy) * wd + ix];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
                acc(*x, &mut |d| {
                    for n in 0..batch {
                        for o in 0..cout {
                            for y in 0..ho {
                                for xo in 0..wo {
                                    let go = g[gidx(n, o, y, xo)];
                                    for c in 0..cin {
                                        for ky in 0..kh {
                                            let Some(iy) = src(y, ky, h) else { continue };
                                            for kx in 0..kw {
                                                let Some(ix) = src(xo, kx, wd) else { continue };
                                                d[((n * cin + c) * h + iy) * wd + ix] +=
                                                    go * wv[((o * cin + c) * kh + ky) * kw + kx];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::MeanLast(a) => {
                let n = *nodes[a.0].shape.last().unwrap();
                let inv = T::of(1.0 / n as f64);
                acc(*a, &mut |d| (0..d.len()).for_each(|i| d[i] += g[i / n] * inv));
            }
            Op::MeanRows { x, group } => {
                let n = *node.shape.last().unwrap();
                let inv = T::of(1.0 / *group as f64);
                let group = *group;
                acc(*x, &mut |d| (0..d.len()).for_each(|i| d[i] += g[(i / n / group) * n + i % n] * inv));
            }
            Op::Sum(a) => acc(*a, &mut |d| d.iter_mut().for_each(|x| *x += g[0])),
            Op::Mean(a) => {
                let n = nodes[a.0].value.len();
                let s = g[0] * T::of(1.0 / n as f64);
                acc(*a, &mut |d| d.iter_mut().for_each(|x| *x += s));
            }
            Op::WeightedSum { x, w } => acc(*x, &mut |d| (0..d.len()).for_each(|i| d[i] += g[0] * w[i])),
            Op::Pick { x, idx, live } => {
                let k = nodes[x.0].shape[1];
                acc(*x, &mut |d| {
                    for (r, &i) in idx.iter().enumerate() {
                        if live[r] {
                            d[r * k + i] += g[r];
                        }
                    }
                });
            }
            Op::Column { x, col } => {
                let k = nodes[x.0].shape[1];
                acc(*x, &mut |d| (0..g.len()).for_each(|r| d[r * k + col] += g[r]));
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = nodes[p.0].value.len();
                    acc(p, &mut |d| add_into(d, &g[off..off + n]));
                    off += n;
                }
            }
            Op::Embedding { table, ids } => {
                let c = nodes[table.0].shape[1];
                acc(*table, &mut |d| {
                    for (r, &i) in ids.iter().enumerate() {
                        add_into(&mut d[i * c..(i + 1) * c], &g[r * c..(r + 1) * c]);
                    }
                });
            }
            Op::BetaLogProb { alpha, beta, a } => {
                let (av, bv) = (val(*alpha), val(*beta));
                let common: Vec<f64> = av.iter().zip(bv).map(|(x, y)| digamma(x.f64() + y.f64())).collect();
                acc(*alpha, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * T::of(a[i].ln() - digamma(av[i].f64()) + common[i]);
                    }
                });
                acc(*beta, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * T::of((1.0 - a[i]).ln() - digamma(bv[i].f64()) + common[i]);
                    }
                });
            }
            Op::BceLogits { z, y } => {
                let zv = val(*z);
                let inv = 1.0 / y.len() as f64;
                acc(*z, &mut |d| {
                    for i in 0..d.len() {
                        let s = 1.0 / (1.0 + (-zv[i].f64()).exp());
                        d[i] += g[0] * T::of((s - y[i]) * inv);
                    }
                });
            }
            Op::Attention { qkv, dims, probs, uniform } => {
                let qv = val(*qkv);
                acc(*qkv, &mut |d| attention::backward(qv, *dims, probs, uniform, g, d));
            }
        }
    }
}

fn add_into<T: Real>(d: &mut [T], g: &[T]) {
    d.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
}

fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-(x.abs())).exp().ln_1p()
}
