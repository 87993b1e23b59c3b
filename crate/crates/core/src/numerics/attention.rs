//! Multi-head self-attention kernel with optional block-sparse pruning.
//!
//! Tokens are split into contiguous blocks. For each head, block means of
//! the queries and keys give a pooled score map; a pooled softmax row
//! decides which key blocks a query block may attend to. Kept pairs are
//! attended exactly and renormalized. A query row whose largest weight
//! stays below `zeta2` falls back to uniform weights over its kept keys.

use crate::numerics::Real;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlockSparsity {
    /// Pooled softmax mass below which a block pair is skipped.
    pub zeta1: f64,
    /// Row maximum below which attention degenerates to uniform weights.
    pub zeta2: f64,
    pub block: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AttentionStats {
    pub pairs_total: u64,
    pub pairs_skipped: u64,
    pub rows_total: u64,
    pub rows_uniform: u64,
}

impl AttentionStats {
    pub fn merge(&mut self, other: &AttentionStats) {
        self.pairs_total += other.pairs_total;
        self.pairs_skipped += other.pairs_skipped;
        self.rows_total += other.rows_total;
        self.rows_uniform += other.rows_uniform;
    }

    pub fn skipped_fraction(&self) -> f64 {
        if self.pairs_total == 0 {
            0.0
        } else {
            self.pairs_skipped as f64 / self.pairs_total as f64
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct AttnDims {
    pub batch: usize,
    pub tokens: usize,
    pub heads: usize,
    pub width: usize,
}

impl AttnDims {
    fn head_dim(&self) -> usize {
        self.width / self.heads
    }
}

/// Writes `out` (rows x width) and the attention probabilities
/// (batch x heads x tokens x tokens); `uniform` flags rows that fell back
/// to uniform weights.
pub(crate) fn forward<T: Real>(
    qkv: &[T],
    dims: AttnDims,
    sparse: Option<&BlockSparsity>,
    out: &mut [T],
    probs: &mut [T],
    uniform: &mut [bool],
    stats: &mut AttentionStats,
) {
    let AttnDims { batch, tokens: n, heads, width: c } = dims;
    let d = dims.head_dim();
    let scale = 1.0 / (d as f64).sqrt();
    let stride = 3 * c;
    let mut scores = vec![T::zero(); n];
    let mut keep_key = vec![true; n];
    for b in 0..batch {
        for h in 0..heads {
            let q_off = h * d;
            let k_off = c + h * d;
            let v_off = 2 * c + h * d;
            let row = |i: usize, off: usize| &qkv[(b * n + i) * stride + off..(b * n + i) * stride + off + d];
            let base = (b * heads + h) * n * n;
            let block_keep = sparse.map(|s| pooled_keep(&row, n, d, scale, s, q_off, k_off, stats));
            for i in 0..n {
                match (&block_keep, sparse) {
                    (Some(keep), Some(s)) => {
                        let bi = i / s.block;
                        let nb = n / s.block;
                        for j in 0..n {
                            keep_key[j] = keep[bi * nb + j / s.block];
                        }
                    }
                    _ => keep_key.iter_mut().for_each(|k| *k = true),
                }
                let qi = row(i, q_off);
                let mut max = T::neg_infinity();
                for j in 0..n {
                    if keep_key[j] {
                        let kj = row(j, k_off);
                        let mut acc = T::zero();
                        for e in 0..d {
                            acc += qi[e] * kj[e];
                        }
                        let s = acc * T::of(scale);
                        scores[j] = s;
                        if s > max {
                            max = s;
                        }
                    }
                }
                let p = &mut probs[base + i * n..base + (i + 1) * n];
                let mut z = 0.0f64;
                for j in 0..n {
                    if keep_key[j] {
                        let e = (scores[j] - max).exp();
                        p[j] = e;
                        z += e.f64();
                    } else {
                        p[j] = T::zero();
                    }
                }
                let inv = T::of(1.0 / z);
                let mut pmax = T::zero();
                for j in 0..n {
                    p[j] *= inv;
                    if p[j] > pmax {
                        pmax = p[j];
                    }
                }
                let flat = sparse.map_or(false, |s| pmax.f64() < s.zeta2);
                uniform[(b * heads + h) * n + i] = flat;
                stats.rows_total += 1;
                if flat {
                    stats.rows_uniform += 1;
                    let kept = keep_key.iter().filter(|&&k| k).count();
                    let w = T::of(1.0 / kept as f64);
                    for j in 0..n {
                        p[j] = if keep_key[j] { w } else { T::zero() };
                    }
                }
                let o = &mut out[(b * n + i) * c + h * d..(b * n + i) * c + (h + 1) * d];
                o.iter_mut().for_each(|v| *v = T::zero());
                for j in 0..n {
                    if keep_key[j] {
                        let pj = p[j];
                        let vj = row(j, v_off);
                        for e in 0..d {
                            o[e] += pj * vj[e];
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn pooled_keep<'a, T: Real>(
    row: &impl Fn(usize, usize) -> &'a [T],
    n: usize,
    d: usize,
    scale: f64,
    s: &BlockSparsity,
    q_off: usize,
    k_off: usize,
    stats: &mut AttentionStats,
) -> Vec<bool> {
    let nb = n / s.block;
    let pool = |off: usize| -> Vec<f64> {
        let mut m = vec![0.0f64; nb * d];
        for i in 0..n {
            let r = row(i, off);
            for e in 0..d {
                m[(i / s.block) * d + e] += r[e].f64();
            }
        }
        m.iter_mut().for_each(|v| *v /= s.block as f64);
        m
    };
    let qp = pool(q_off);
    let kp = pool(k_off);
    let mut keep = vec![false; nb * nb];
    for bi in 0..nb {
        let sc: Vec<f64> = (0..nb)
            .map(|bj| (0..d).map(|e| qp[bi * d + e] * kp[bj * d + e]).sum::<f64>() * scale)
            .collect();
        let m = sc.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let ex: Vec<f64> = sc.iter().map(|v| (v - m).exp()).collect();
        let z: f64 = ex.iter().sum();
        let argmax = (0..nb).fold(0, |a, j| if sc[j] > sc[a] { j } else { a });
        for bj in 0..nb {
            let mass = ex[bj] / z;
            let k = mass >= s.zeta1 || bj == argmax;
            keep[bi * nb + bj] = k;
            stats.pairs_total += 1;
            if !k {
                stats.pairs_skipped += 1;
            }
        }
    }
    keep
}

pub(crate) fn backward<T: Real>(
    qkv: &[T],
    dims: AttnDims,
    probs: &[T],
    uniform: &[bool],
    dout: &[T],
    dqkv: &mut [T],
) {
    let AttnDims { batch, tokens: n, heads, width: c } = dims;
    let d = dims.head_dim();
    let scale = T::of(1.0 / (d as f64).sqrt());
    let stride = 3 * c;
    let mut dp = vec![T::zero(); n];
    for b in 0..batch {
        for h in 0..heads {
            let base = (b * heads + h) * n * n;
            let idx = |i: usize, off: usize| (b * n + i) * stride + off;
            let (q_off, k_off, v_off) = (h * d, c + h * d, 2 * c + h * d);
            for i in 0..n {
                let p = &probs[base + i * n..base + (i + 1) * n];
                let go = &dout[(b * n + i) * c + h * d..(b * n + i) * c + (h + 1) * d];
                for j in 0..n {
                    let pj = p[j];
                    let vj = idx(j, v_off);
                    let mut acc = T::zero();
                    for e in 0..d {
                        acc += go[e] * qkv[vj + e];
                        dqkv[vj + e] += pj * go[e];
                    }
                    dp[j] = acc;
                }
                if uniform[(b * heads + h) * n + i] {
                    continue;
                }
                let mut dot = T::zero();
                for j in 0..n {
                    dot += p[j] * dp[j];
                }
                let qi = idx(i, q_off);
                for j in 0..n {
                    let ds = p[j] * (dp[j] - dot) * scale;
                    if ds == T::zero() {
                        continue;
                    }
                    let kj = idx(j, k_off);
                    for e in 0..d {
                        dqkv[qi + e] += ds * qkv[kj + e];
                        dqkv[kj + e] += ds * qkv[qi + e];
                    }
                }
            }
        }
    }
}
