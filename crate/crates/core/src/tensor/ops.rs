use serde::{Deserialize, Serialize};

use super::tape::{Tape, Var};
use super::{Tensor, TensorError};

const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Sigmoid,
    SoftmaxLastDim,
}

/// Exponential moving averages of per-channel batch statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

pub enum BatchNormMode<'a> {
    Train {
        stats: &'a mut RunningStats,
        momentum: f64,
    },
    Eval {
        stats: &'a RunningStats,
    },
}

pub(crate) enum Op {
    Leaf,
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    Dense {
        x: Var,
        w: Var,
        b: Var,
    },
    Act(Var, Activation),
    AvgPool {
        x: Var,
        kernel: usize,
        stride: usize,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    Concat {
        parts: Vec<Var>,
        dim: usize,
    },
    Narrow {
        x: Var,
        dim: usize,
        start: usize,
    },
    SwapLast(Var),
    Reshape(Var),
    Add(Var, Var),
    Mul(Var, Var),
    ChannelScale {
        x: Var,
        s: Var,
    },
    Scale(Var, f64),
    Sum(Var),
    CrossEntropy {
        probs: Var,
        labels: Vec<usize>,
    },
}

fn mismatch(msg: String) -> TensorError {
    TensorError::ShapeMismatch(msg)
}

fn dims3(shape: &[usize], what: &str) -> Result<(usize, usize, usize), TensorError> {
    match shape {
        [a, b, c] => Ok((*a, *b, *c)),
        _ => Err(mismatch(format!("{what} expects 3 dims, got {shape:?}"))),
    }
}

fn dims2(shape: &[usize], what: &str) -> Result<(usize, usize), TensorError> {
    match shape {
        [a, b] => Ok((*a, *b)),
        _ => Err(mismatch(format!("{what} expects 2 dims, got {shape:?}"))),
    }
}

fn finite(data: &[f64], what: &'static str) -> Result<(), TensorError> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite(what))
    }
}

/// Splits a shape around `dim` into (outer, extent, inner).
fn around(shape: &[usize], dim: usize) -> (usize, usize, usize) {
    let outer = shape[..dim].iter().product();
    let inner = shape[dim + 1..].iter().product();
    (outer, shape[dim], inner)
}

/// Range of output positions `t` with `0 <= t*stride + k - pad < len`.
#[inline]
fn valid_range(out_len: usize, len: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let limit = len + pad;
    if limit <= k {
        return (0, 0);
    }
    let hi = ((limit - k - 1) / stride + 1).min(out_len);
    (lo.min(hi), hi)
}

impl Tape {
    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.requires_grad(*v))
    }

    fn record(&mut self, shape: Vec<usize>, data: Vec<f64>, inputs: &[Var], op: Op, what: &'static str) -> Result<Var, TensorError> {
        finite(&data, what)?;
        let rg = self.any_grad(inputs);
        let value = Tensor::new(shape, data)?.with_grad(rg);
        Ok(self.push(value, op))
    }

    /// 1-D cross-correlation with zero padding: `[B,Cin,L] * [Cout,Cin,K] -> [B,Cout,L']`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var, TensorError> {
        for v in [x, w, b] {
            self.check(v)?;
        }
        let (bs, cin, len) = dims3(self.shape(x), "conv1d input")?;
        let (cout, wcin, k) = dims3(self.shape(w), "conv1d weight")?;
        if wcin != cin {
            return Err(mismatch(format!("conv1d: input has {cin} channels, weight expects {wcin}")));
        }
        if self.shape(b) != [cout] {
            return Err(mismatch(format!("conv1d: bias shape {:?}, expected [{cout}]", self.shape(b))));
        }
        if stride == 0 || k > len + 2 * pad {
            return Err(mismatch(format!("conv1d: kernel {k} stride {stride} pad {pad} on length {len}")));
        }
        let out_len = (len + 2 * pad - k) / stride + 1;
        let xd = self.data(x);
        let wd = self.data(w);
        let bd = self.data(b);
        let mut out = vec![0.0; bs * cout * out_len];
        for bi in 0..bs {
            for o in 0..cout {
                let row = &mut out[(bi * cout + o) * out_len..(bi * cout + o + 1) * out_len];
                row.iter_mut().for_each(|v| *v = bd[o]);
                for c in 0..cin {
                    let xr = &xd[(bi * cin + c) * len..(bi * cin + c + 1) * len];
                    for kk in 0..k {
                        let wv = wd[(o * cin + c) * k + kk];
                        if wv == 0.0 {
                            continue;
                        }
                        let (lo, hi) = valid_range(out_len, len, kk, stride, pad);
                        if stride == 1 {
                            let off = lo + kk - pad;
                            for (r, xv) in row[lo..hi].iter_mut().zip(&xr[off..off + (hi - lo)]) {
                                *r += wv * xv;
                            }
                        } else {
                            for t in lo..hi {
                                row[t] += wv * xr[t * stride + kk - pad];
                            }
                        }
                    }
                }
            }
        }
        self.record(vec![bs, cout, out_len], out, &[x, w, b], Op::Conv1d { x, w, b, stride, pad }, "conv1d")
    }

    /// Per-channel normalization over (batch, length) of a `[B,C,L]` input.
    pub fn batchnorm1d(&mut self, x: Var, gamma: Var, beta: Var, mode: BatchNormMode<'_>, eps: f64) -> Result<Var, TensorError> {
        for v in [x, gamma, beta] {
            self.check(v)?;
        }
        let (bs, c, len) = dims3(self.shape(x), "batchnorm input")?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(mismatch(format!("batchnorm: affine params must have shape [{c}]")));
        }
        if !(eps >= 0.0) {
            return Err(mismatch(format!("batchnorm: eps must be non-negative, got {eps}")));
        }
        let n = (bs * len) as f64;
        let xd = self.data(x);
        let g = self.data(gamma);
        let be = self.data(beta);
        let mut xhat = vec![0.0; xd.len()];
        let mut inv_std = vec![0.0; c];
        let train = matches!(mode, BatchNormMode::Train { .. });
        let (mean, var) = if train {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for bi in 0..bs {
                for ch in 0..c {
                    let row = &xd[(bi * c + ch) * len..(bi * c + ch + 1) * len];
                    mean[ch] += row.iter().sum::<f64>();
                }
            }
            mean.iter_mut().for_each(|m| *m /= n);
            for bi in 0..bs {
                for ch in 0..c {
                    let row = &xd[(bi * c + ch) * len..(bi * c + ch + 1) * len];
                    var[ch] += row.iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>();
                }
            }
            var.iter_mut().for_each(|v| *v /= n);
            (mean, var)
        } else {
            let BatchNormMode::Eval { stats } = &mode else { unreachable!() };
            if stats.mean.len() != c || stats.var.len() != c {
                return Err(mismatch(format!("batchnorm: running stats sized for {} channels", stats.mean.len())));
            }
            (stats.mean.clone(), stats.var.clone())
        };
        for ch in 0..c {
            let denom = (var[ch] + eps).sqrt();
            inv_std[ch] = if denom > 0.0 { 1.0 / denom } else { 0.0 };
        }
        let mut out = vec![0.0; xd.len()];
        for bi in 0..bs {
            for ch in 0..c {
                let base = (bi * c + ch) * len;
                for t in 0..len {
                    let h = (xd[base + t] - mean[ch]) * inv_std[ch];
                    xhat[base + t] = h;
                    out[base + t] = g[ch] * h + be[ch];
                }
            }
        }
        if let BatchNormMode::Train { stats, momentum } = mode {
            if stats.mean.len() != c || stats.var.len() != c {
                return Err(mismatch(format!("batchnorm: running stats sized for {} channels", stats.mean.len())));
            }
            let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
            for ch in 0..c {
                stats.mean[ch] = (1.0 - momentum) * stats.mean[ch] + momentum * mean[ch];
                stats.var[ch] = (1.0 - momentum) * stats.var[ch] + momentum * var[ch] * unbias;
            }
        }
        let shape = vec![bs, c, len];
        self.record(shape, out, &[x, gamma, beta], Op::BatchNorm { x, gamma, beta, xhat, inv_std, train }, "batchnorm1d")
    }

    /// `[B,F] x [F,G] + [G] -> [B,G]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var, TensorError> {
        for v in [x, w, b] {
            self.check(v)?;
        }
        let (bs, f) = dims2(self.shape(x), "dense input")?;
        let (wf, g) = dims2(self.shape(w), "dense weight")?;
        if wf != f || self.shape(b) != [g] {
            return Err(mismatch(format!(
                "dense: input {:?}, weight {:?}, bias {:?}",
                self.shape(x),
                self.shape(w),
                self.shape(b)
            )));
        }
        let xd = self.data(x);
        let wd = self.data(w);
        let bd = self.data(b);
        let mut out = vec![0.0; bs * g];
        for bi in 0..bs {
            let row = &mut out[bi * g..(bi + 1) * g];
            row.copy_from_slice(bd);
            for i in 0..f {
                let xv = xd[bi * f + i];
                if xv == 0.0 {
                    continue;
                }
                for (r, wv) in row.iter_mut().zip(&wd[i * g..(i + 1) * g]) {
                    *r += xv * wv;
                }
            }
        }
        self.record(vec![bs, g], out, &[x, w, b], Op::Dense { x, w, b }, "dense")
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var, TensorError> {
        self.check(x)?;
        let shape = self.shape(x).to_vec();
        let xd = self.data(x);
        let out: Vec<f64> = match kind {
            Activation::Relu => xd.iter().map(|v| v.max(0.0)).collect(),
            Activation::Sigmoid => xd.iter().map(|&v| sigmoid(v)).collect(),
            Activation::SoftmaxLastDim => {
                let last = *shape.last().expect("non-empty shape");
                let mut out = vec![0.0; xd.len()];
                for (src, dst) in xd.chunks(last).zip(out.chunks_mut(last)) {
                    let m = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut s = 0.0;
                    for (d, v) in dst.iter_mut().zip(src) {
                        *d = (v - m).exp();
                        s += *d;
                    }
                    dst.iter_mut().for_each(|d| *d /= s);
                }
                out
            }
        };
        self.record(shape, out, &[x], Op::Act(x, kind), "activation")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, TensorError> {
        self.activation(x, Activation::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, TensorError> {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var, TensorError> {
        self.activation(x, Activation::SoftmaxLastDim)
    }

    /// Windowed mean over the last axis of a `[B,C,L]` input.
    pub fn avgpool1d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var, TensorError> {
        self.check(x)?;
        let (bs, c, len) = dims3(self.shape(x), "avgpool input")?;
        if kernel == 0 || stride == 0 || kernel > len {
            return Err(mismatch(format!("avgpool: kernel {kernel} stride {stride} on length {len}")));
        }
        let out_len = (len - kernel) / stride + 1;
        let xd = self.data(x);
        let inv = 1.0 / kernel as f64;
        let mut out = vec![0.0; bs * c * out_len];
        for (src, dst) in xd.chunks(len).zip(out.chunks_mut(out_len)) {
            for (t, d) in dst.iter_mut().enumerate() {
                *d = src[t * stride..t * stride + kernel].iter().sum::<f64>() * inv;
            }
        }
        self.record(vec![bs, c, out_len], out, &[x], Op::AvgPool { x, kernel, stride }, "avgpool1d")
    }

    /// Per-batch matrix product `[B,M,K] x [B,K,N] -> [B,M,N]`.
    pub fn matmul_batched(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.check(a)?;
        self.check(b)?;
        let (ba, m, k) = dims3(self.shape(a), "matmul lhs")?;
        let (bb, kb, n) = dims3(self.shape(b), "matmul rhs")?;
        if ba != bb || k != kb {
            return Err(mismatch(format!("matmul: {:?} x {:?}", self.shape(a), self.shape(b))));
        }
        let ad = self.data(a);
        let bd = self.data(b);
        let mut out = vec![0.0; ba * m * n];
        for bi in 0..ba {
            let am = &ad[bi * m * k..(bi + 1) * m * k];
            let bm = &bd[bi * k * n..(bi + 1) * k * n];
            let om = &mut out[bi * m * n..(bi + 1) * m * n];
            matmul_acc(am, bm, om, m, k, n);
        }
        self.record(vec![ba, m, n], out, &[a, b], Op::MatMul { a, b }, "matmul_batched")
    }

    pub fn concat(&mut self, parts: &[Var], dim: usize) -> Result<Var, TensorError> {
        let first = *parts.first().ok_or_else(|| mismatch("concat of zero parts".into()))?;
        for &p in parts {
            self.check(p)?;
        }
        let base = self.shape(first).to_vec();
        if dim >= base.len() {
            return Err(mismatch(format!("concat: dim {dim} out of range for {base:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len() || s.iter().zip(&base).enumerate().any(|(i, (a, b))| i != dim && a != b) {
                return Err(mismatch(format!("concat: {s:?} incompatible with {base:?} along {dim}")));
            }
            total += s[dim];
        }
        let mut shape = base.clone();
        shape[dim] = total;
        let (outer, _, inner) = around(&shape, dim);
        let mut out = vec![0.0; shape.iter().product()];
        let mut offset = 0;
        for &p in parts {
            let ext = self.shape(p)[dim];
            let src = self.data(p);
            for o in 0..outer {
                let dst = (o * total + offset) * inner;
                out[dst..dst + ext * inner].copy_from_slice(&src[o * ext * inner..(o + 1) * ext * inner]);
            }
            offset += ext;
        }
        let parts = parts.to_vec();
        let rg_parts = parts.clone();
        self.record(shape, out, &rg_parts, Op::Concat { parts, dim }, "concat")
    }

    /// Contiguous slice `[start, start+len)` along `dim`.
    pub fn narrow(&mut self, x: Var, dim: usize, start: usize, len: usize) -> Result<Var, TensorError> {
        self.check(x)?;
        let shape = self.shape(x).to_vec();
        if dim >= shape.len() || len == 0 || start + len > shape[dim] {
            return Err(mismatch(format!("narrow: [{start}, {}) along {dim} of {shape:?}", start + len)));
        }
        let (outer, ext, inner) = around(&shape, dim);
        let src = self.data(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * ext + start) * inner;
            out.extend_from_slice(&src[from..from + len * inner]);
        }
        let mut new_shape = shape;
        new_shape[dim] = len;
        self.record(new_shape, out, &[x], Op::Narrow { x, dim, start }, "narrow")
    }

    /// `[B,M,N] -> [B,N,M]`.
    pub fn swap_last(&mut self, x: Var) -> Result<Var, TensorError> {
        self.check(x)?;
        let (b, m, n) = dims3(self.shape(x), "swap_last")?;
        let src = self.data(x);
        let mut out = vec![0.0; src.len()];
        for bi in 0..b {
            for i in 0..m {
                for j in 0..n {
                    out[bi * m * n + j * m + i] = src[bi * m * n + i * n + j];
                }
            }
        }
        self.record(vec![b, n, m], out, &[x], Op::SwapLast(x), "swap_last")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        self.check(x)?;
        let numel: usize = shape.iter().product();
        if numel != self.value(x).numel() {
            return Err(mismatch(format!("reshape {:?} -> {shape:?}", self.shape(x))));
        }
        let data = self.data(x).to_vec();
        self.record(shape.to_vec(), data, &[x], Op::Reshape(x), "reshape")
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<(), TensorError> {
        self.check(a)?;
        self.check(b)?;
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(format!("{what}: {:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape(a, b, "add")?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        self.record(shape, out, &[a, b], Op::Add(a, b), "add")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape(a, b, "mul")?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        self.record(shape, out, &[a, b], Op::Mul(a, b), "mul")
    }

    /// Scales every channel of `[B,C,T]` by the matching entry of `[B,C]`.
    pub fn channel_scale(&mut self, x: Var, s: Var) -> Result<Var, TensorError> {
        self.check(x)?;
        self.check(s)?;
        let (b, c, t) = dims3(self.shape(x), "channel_scale input")?;
        if self.shape(s) != [b, c] {
            return Err(mismatch(format!("channel_scale: weights {:?} for input {:?}", self.shape(s), self.shape(x))));
        }
        let sd = self.data(s);
        let mut out = self.data(x).to_vec();
        for (row, w) in out.chunks_mut(t).zip(sd) {
            row.iter_mut().for_each(|v| *v *= w);
        }
        self.record(vec![b, c, t], out, &[x, s], Op::ChannelScale { x, s }, "channel_scale")
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var, TensorError> {
        self.check(x)?;
        let out = self.data(x).iter().map(|v| v * c).collect();
        let shape = self.shape(x).to_vec();
        self.record(shape, out, &[x], Op::Scale(x, c), "scale")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, TensorError> {
        self.check(x)?;
        let s = self.data(x).iter().sum();
        self.record(vec![1], vec![s], &[x], Op::Sum(x), "sum")
    }

    /// Mean negative log-likelihood of already-normalized class probabilities.
    pub fn cross_entropy(&mut self, probs: Var, labels: &[usize]) -> Result<Var, TensorError> {
        self.check(probs)?;
        let (b, c) = dims2(self.shape(probs), "cross_entropy input")?;
        if labels.len() != b {
            return Err(mismatch(format!("cross_entropy: {} labels for batch of {b}", labels.len())));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= c) {
            return Err(TensorError::BadLabel { label, classes: c });
        }
        let pd = self.data(probs);
        let mut loss = 0.0;
        for (row, (chunk, &l)) in pd.chunks(c).zip(labels).enumerate() {
            let sum: f64 = chunk.iter().sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(TensorError::NotNormalized { row, sum });
            }
            loss -= chunk[l].max(PROB_FLOOR).ln();
        }
        loss /= b as f64;
        let labels = labels.to_vec();
        self.record(vec![1], vec![loss], &[probs], Op::CrossEntropy { probs, labels }, "cross_entropy")
    }
}

#[inline]
pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// `out += a[m,k] * b[k,n]`.
fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, bv) in orow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
}

/// Gradient contributions of node `idx` to its inputs.
pub(crate) fn backward(tape: &Tape, idx: usize, dy: &[f64]) -> Result<Vec<(Var, Vec<f64>)>, TensorError> {
    let node = &tape.nodes[idx];
    let out_shape = node.value.shape();
    let want = |v: Var| tape.requires_grad(v);
    let mut res = Vec::new();
    match &node.op {
        Op::Leaf => {}
        Op::Conv1d { x, w, b, stride, pad } => {
            let (stride, pad) = (*stride, *pad);
            let (bs, cin, len) = dims3(tape.shape(*x), "conv1d")?;
            let (cout, _, k) = dims3(tape.shape(*w), "conv1d")?;
            let out_len = out_shape[2];
            let xd = tape.data(*x);
            let wd = tape.data(*w);
            if want(*b) {
                let mut db = vec![0.0; cout];
                for bi in 0..bs {
                    for o in 0..cout {
                        db[o] += dy[(bi * cout + o) * out_len..(bi * cout + o + 1) * out_len].iter().sum::<f64>();
                    }
                }
                res.push((*b, db));
            }
            let gx = want(*x);
            let gw = want(*w);
            if gx || gw {
                let mut dx = if gx { vec![0.0; xd.len()] } else { Vec::new() };
                let mut dw = if gw { vec![0.0; wd.len()] } else { Vec::new() };
                for bi in 0..bs {
                    for o in 0..cout {
                        let drow = &dy[(bi * cout + o) * out_len..(bi * cout + o + 1) * out_len];
                        for c in 0..cin {
                            let xoff = (bi * cin + c) * len;
                            for kk in 0..k {
                                let widx = (o * cin + c) * k + kk;
                                let (lo, hi) = valid_range(out_len, len, kk, stride, pad);
                                if lo >= hi {
                                    continue;
                                }
                                if gw {
                                    let mut acc = 0.0;
                                    for t in lo..hi {
                                        acc += xd[xoff + t * stride + kk - pad] * drow[t];
                                    }
                                    dw[widx] += acc;
                                }
                                if gx {
                                    let wv = wd[widx];
                                    if wv != 0.0 {
                                        for t in lo..hi {
                                            dx[xoff + t * stride + kk - pad] += wv * drow[t];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                if gx {
                    res.push((*x, dx));
                }
                if gw {
                    res.push((*w, dw));
                }
            }
        }
        Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
            let (bs, c, len) = dims3(out_shape, "batchnorm")?;
            let g = tape.data(*gamma);
            let mut sum_dy = vec![0.0; c];
            let mut sum_dy_xhat = vec![0.0; c];
            for bi in 0..bs {
                for ch in 0..c {
                    let base = (bi * c + ch) * len;
                    for t in 0..len {
                        sum_dy[ch] += dy[base + t];
                        sum_dy_xhat[ch] += dy[base + t] * xhat[base + t];
                    }
                }
            }
            if want(*gamma) {
                res.push((*gamma, sum_dy_xhat.clone()));
            }
            if want(*beta) {
                res.push((*beta, sum_dy.clone()));
            }
            if want(*x) {
                let n = (bs * len) as f64;
                let mut dx = vec![0.0; dy.len()];
                for bi in 0..bs {
                    for ch in 0..c {
                        let base = (bi * c + ch) * len;
                        let scale = g[ch] * inv_std[ch];
                        for t in 0..len {
                            dx[base + t] = if *train {
                                scale * (dy[base + t] - sum_dy[ch] / n - xhat[base + t] * sum_dy_xhat[ch] / n)
                            } else {
                                scale * dy[base + t]
                            };
                        }
                    }
                }
                res.push((*x, dx));
            }
        }
        Op::Dense { x, w, b } => {
            let (bs, f) = dims2(tape.shape(*x), "dense")?;
            let g = out_shape[1];
            if want(*b) {
                let mut db = vec![0.0; g];
                for row in dy.chunks(g) {
                    db.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                }
                res.push((*b, db));
            }
            if want(*w) {
                let xd = tape.data(*x);
                let mut dw = vec![0.0; f * g];
                for bi in 0..bs {
                    let drow = &dy[bi * g..(bi + 1) * g];
                    for i in 0..f {
                        let xv = xd[bi * f + i];
                        if xv == 0.0 {
                            continue;
                        }
                        for (d, v) in dw[i * g..(i + 1) * g].iter_mut().zip(drow) {
                            *d += xv * v;
                        }
                    }
                }
                res.push((*w, dw));
            }
            if want(*x) {
                let wd = tape.data(*w);
                let mut dx = vec![0.0; bs * f];
                for bi in 0..bs {
                    let drow = &dy[bi * g..(bi + 1) * g];
                    for i in 0..f {
                        dx[bi * f + i] = wd[i * g..(i + 1) * g].iter().zip(drow).map(|(a, b)| a * b).sum();
                    }
                }
                res.push((*x, dx));
            }
        }
        Op::Act(x, kind) => {
            let y = node.value.data();
            let dx: Vec<f64> = match kind {
                Activation::Relu => y.iter().zip(dy).map(|(&o, &g)| if o > 0.0 { g } else { 0.0 }).collect(),
                Activation::Sigmoid => y.iter().zip(dy).map(|(&o, &g)| g * o * (1.0 - o)).collect(),
                Activation::SoftmaxLastDim => {
                    let last = *out_shape.last().expect("shape");
                    let mut dx = vec![0.0; y.len()];
                    for ((yr, gr), dr) in y.chunks(last).zip(dy.chunks(last)).zip(dx.chunks_mut(last)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                            *d = yv * (gv - dot);
                        }
                    }
                    dx
                }
            };
            if want(*x) {
                res.push((*x, dx));
            }
        }
        Op::AvgPool { x, kernel, stride } => {
            if want(*x) {
                let len = tape.shape(*x)[2];
                let out_len = out_shape[2];
                let inv = 1.0 / *kernel as f64;
                let mut dx = vec![0.0; tape.value(*x).numel()];
                for (drow, xrow) in dy.chunks(out_len).zip(dx.chunks_mut(len)) {
                    for (t, g) in drow.iter().enumerate() {
                        for v in &mut xrow[t * stride..t * stride + kernel] {
                            *v += g * inv;
                        }
                    }
                }
                res.push((*x, dx));
            }
        }
        Op::MatMul { a, b } => {
            let (bs, m, k) = dims3(tape.shape(*a), "matmul")?;
            let n = tape.shape(*b)[2];
            let ad = tape.data(*a);
            let bd = tape.data(*b);
            if want(*a) {
                // dA = dY B^T
                let mut da = vec![0.0; ad.len()];
                for bi in 0..bs {
                    let bm = &bd[bi * k * n..(bi + 1) * k * n];
                    for i in 0..m {
                        let drow = &dy[bi * m * n + i * n..bi * m * n + (i + 1) * n];
                        for p in 0..k {
                            da[bi * m * k + i * k + p] = drow.iter().zip(&bm[p * n..(p + 1) * n]).map(|(x, y)| x * y).sum();
                        }
                    }
                }
                res.push((*a, da));
            }
            if want(*b) {
                // dB = A^T dY
                let mut db = vec![0.0; bd.len()];
                for bi in 0..bs {
                    let am = &ad[bi * m * k..(bi + 1) * m * k];
                    let dm = &dy[bi * m * n..(bi + 1) * m * n];
                    let om = &mut db[bi * k * n..(bi + 1) * k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let av = am[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for (o, g) in om[p * n..(p + 1) * n].iter_mut().zip(&dm[i * n..(i + 1) * n]) {
                                *o += av * g;
                            }
                        }
                    }
                }
                res.push((*b, db));
            }
        }
        Op::Concat { parts, dim } => {
            let (outer, total, inner) = around(out_shape, *dim);
            let mut offset = 0;
            for &p in parts {
                let ext = tape.shape(p)[*dim];
                if want(p) {
                    let mut g = Vec::with_capacity(outer * ext * inner);
                    for o in 0..outer {
                        let from = (o * total + offset) * inner;
                        g.extend_from_slice(&dy[from..from + ext * inner]);
                    }
                    res.push((p, g));
                }
                offset += ext;
            }
        }
        Op::Narrow { x, dim, start } => {
            if want(*x) {
                let (outer, ext, inner) = around(tape.shape(*x), *dim);
                let len = out_shape[*dim];
                let mut dx = vec![0.0; tape.value(*x).numel()];
                for o in 0..outer {
                    let to = (o * ext + start) * inner;
                    dx[to..to + len * inner].copy_from_slice(&dy[o * len * inner..(o + 1) * len * inner]);
                }
                res.push((*x, dx));
            }
        }
        Op::SwapLast(x) => {
            if want(*x) {
                let (b, m, n) = dims3(tape.shape(*x), "swap_last")?;
                let mut dx = vec![0.0; dy.len()];
                for bi in 0..b {
                    for i in 0..m {
                        for j in 0..n {
                            dx[bi * m * n + i * n + j] = dy[bi * m * n + j * m + i];
                        }
                    }
                }
                res.push((*x, dx));
            }
        }
        Op::Reshape(x) => {
            if want(*x) {
                res.push((*x, dy.to_vec()));
            }
        }
        Op::Add(a, b) => {
            if want(*a) {
                res.push((*a, dy.to_vec()));
            }
            if want(*b) {
                res.push((*b, dy.to_vec()));
            }
        }
        Op::Mul(a, b) => {
            if want(*a) {
                res.push((*a, dy.iter().zip(tape.data(*b)).map(|(g, v)| g * v).collect()));
            }
            if want(*b) {
                res.push((*b, dy.iter().zip(tape.data(*a)).map(|(g, v)| g * v).collect()));
            }
        }
        Op::ChannelScale { x, s } => {
            let t = out_shape[2];
            if want(*x) {
                let mut dx = dy.to_vec();
                for (row, w) in dx.chunks_mut(t).zip(tape.data(*s)) {
                    row.iter_mut().for_each(|v| *v *= w);
                }
                res.push((*x, dx));
            }
            if want(*s) {
                let ds = dy
                    .chunks(t)
                    .zip(tape.data(*x).chunks(t))
                    .map(|(g, v)| g.iter().zip(v).map(|(a, b)| a * b).sum())
                    .collect();
                res.push((*s, ds));
            }
        }
        Op::Scale(x, c) => {
            if want(*x) {
                res.push((*x, dy.iter().map(|g| g * c).collect()));
            }
        }
        Op::Sum(x) => {
            if want(*x) {
                res.push((*x, vec![dy[0]; tape.value(*x).numel()]));
            }
        }
        Op::CrossEntropy { probs, labels } => {
            if want(*probs) {
                let (b, c) = dims2(tape.shape(*probs), "cross_entropy")?;
                let pd = tape.data(*probs);
                let mut dp = vec![0.0; b * c];
                for (i, &l) in labels.iter().enumerate() {
                    let p = pd[i * c + l];
                    if p > PROB_FLOOR {
                        dp[i * c + l] = -dy[0] / (b as f64 * p);
                    }
                }
                res.push((*probs, dp));
            }
        }
    }
    Ok(res)
}
