//! Forward operators and the gradient kernels the tape uses to invert them.
//!
//! Channel-time maps are `[C × T]` row-major: one contiguous row per channel.

use super::gemm::{gemm_acc, Layout};
use super::Tensor;
use crate::error::{Error, Result};

/// Variance floor inside the cumulative normalization square root.
pub const CGLN_EPS: f64 = 1e-8;
/// Fixed negative slope of LeakyReLU.
pub const LEAKY_SLOPE: f64 = 0.01;
/// Initial PReLU slope.
pub const PRELU_INIT: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Relu,
    Prelu(f64),
    LeakyRelu(f64),
    Sigmoid,
}

pub fn activation(input: &Tensor, kind: Activation) -> Tensor {
    let data = input
        .data()
        .iter()
        .map(|&x| match kind {
            Activation::Relu => x.max(0.0),
            Activation::Prelu(a) | Activation::LeakyRelu(a) => {
                if x >= 0.0 {
                    x
                } else {
                    a * x
                }
            }
            Activation::Sigmoid => sigmoid(x),
        })
        .collect();
    Tensor {
        shape: input.shape().to_vec(),
        data,
    }
}

/// Logistic function kept strictly inside (0, 1) for every finite input.
pub fn sigmoid(x: f64) -> f64 {
    let s = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    s.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub frames: usize,
    pub kernel: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl ConvGeom {
    fn in_per_group(&self) -> usize {
        self.c_in / self.groups
    }

    fn out_per_group(&self) -> usize {
        self.c_out / self.groups
    }

    fn is_depthwise(&self) -> bool {
        self.in_per_group() == 1 && self.out_per_group() == 1
    }

    /// Left shift (in frames) applied to kernel tap `j`.
    fn shift(&self, j: usize) -> usize {
        (self.kernel - 1 - j) * self.dilation
    }
}

pub(crate) fn conv_geometry(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    dilation: usize,
    groups: usize,
) -> Result<ConvGeom> {
    let (c_in, frames) = input.dims2()?;
    let (c_out, in_per_group, kernel) = weight.dims3()?;
    if groups == 0 || dilation == 0 || kernel == 0 {
        return Err(Error::dim("conv1d needs groups, dilation and kernel >= 1"));
    }
    if c_in % groups != 0 || c_out % groups != 0 {
        return Err(Error::dim(format!(
            "conv1d channels ({c_in} in, {c_out} out) not divisible by groups {groups}"
        )));
    }
    if in_per_group != c_in / groups {
        return Err(Error::dim(format!(
            "conv1d weight expects {in_per_group} input channels per group, input gives {}",
            c_in / groups
        )));
    }
    if bias.shape() != [c_out] {
        return Err(Error::dim(format!("conv1d bias shape {:?} != [{c_out}]", bias.shape())));
    }
    Ok(ConvGeom {
        c_in,
        c_out,
        frames,
        kernel,
        dilation,
        groups,
    })
}

/// Causal 1-D convolution with implicit zero left padding of `(K-1)·dilation`.
///
/// `weight` is `[C_out × C_in/groups × K]`; tap `K-1` aligns with the current frame.
pub fn conv1d_causal(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    dilation: usize,
    groups: usize,
) -> Result<Tensor> {
    let g = conv_geometry(input, weight, bias, dilation, groups)?;
    let t = g.frames;
    let mut out = vec![0.0; g.c_out * t];
    for (o, row) in out.chunks_mut(t.max(1)).enumerate().take(g.c_out) {
        row.fill(bias.data()[o]);
    }
    conv_forward_acc(&g, input.data(), weight.data(), &mut out);
    Tensor::new(vec![g.c_out, t], out)
}

pub(crate) fn conv_forward_acc(g: &ConvGeom, x: &[f64], w: &[f64], out: &mut [f64]) {
    let t = g.frames;
    let k = g.kernel;
    if g.is_depthwise() {
        for c in 0..g.c_out {
            let xr = &x[c * t..(c + 1) * t];
            let orow = &mut out[c * t..(c + 1) * t];
            for j in 0..k {
                let s = g.shift(j);
                if s >= t {
                    continue;
                }
                let wv = w[c * k + j];
                for (o, &xv) in orow[s..].iter_mut().zip(&xr[..t - s]) {
                    *o += wv * xv;
                }
            }
        }
        return;
    }
    let (cig, cog) = (g.in_per_group(), g.out_per_group());
    for grp in 0..g.groups {
        for j in 0..k {
            let s = g.shift(j);
            if s >= t {
                continue;
            }
            gemm_acc(
                cog,
                cig,
                t - s,
                w,
                Layout::new(grp * cog * cig * k + j, cig * k, k),
                x,
                Layout::row_major(grp * cig * t, t),
                out,
                Layout::row_major(grp * cog * t + s, t),
            );
        }
    }
}

/// Accumulates input, weight and bias gradients of a causal convolution.
pub(crate) fn conv_backward_acc(
    g: &ConvGeom,
    x: &[f64],
    w: &[f64],
    dout: &[f64],
    dx: Option<&mut [f64]>,
    dw: Option<&mut [f64]>,
    db: Option<&mut [f64]>,
) {
    let t = g.frames;
    let k = g.kernel;
    if let Some(db) = db {
        for (o, d) in db.iter_mut().enumerate() {
            *d += dout[o * t..(o + 1) * t].iter().sum::<f64>();
        }
    }
    if g.is_depthwise() {
        if let Some(dx) = dx {
            for c in 0..g.c_out {
                let drow = &dout[c * t..(c + 1) * t];
                let dxr = &mut dx[c * t..(c + 1) * t];
                for j in 0..k {
                    let s = g.shift(j);
                    if s >= t {
                        continue;
                    }
                    let wv = w[c * k + j];
                    for (d, &go) in dxr[..t - s].iter_mut().zip(&drow[s..]) {
                        *d += wv * go;
                    }
                }
            }
        }
        if let Some(dw) = dw {
            for c in 0..g.c_out {
                let drow = &dout[c * t..(c + 1) * t];
                let xr = &x[c * t..(c + 1) * t];
                for j in 0..k {
                    let s = g.shift(j);
                    if s >= t {
                        continue;
                    }
                    dw[c * k + j] += drow[s..].iter().zip(&xr[..t - s]).map(|(a, b)| a * b).sum::<f64>();
                }
            }
        }
        return;
    }
    let (cig, cog) = (g.in_per_group(), g.out_per_group());
    let mut dx = dx;
    let mut dw = dw;
    for grp in 0..g.groups {
        for j in 0..k {
            let s = g.shift(j);
            if s >= t {
                continue;
            }
            if let Some(dx) = dx.as_deref_mut() {
                // dX[:, 0..t-s] += W_jᵀ · dOut[:, s..t]
                gemm_acc(
                    cig,
                    cog,
                    t - s,
                    w,
                    Layout::new(grp * cog * cig * k + j, k, cig * k),
                    dout,
                    Layout::row_major(grp * cog * t + s, t),
                    dx,
                    Layout::row_major(grp * cig * t, t),
                );
            }
            if let Some(dw) = dw.as_deref_mut() {
                // dW_j += dOut[:, s..t] · X[:, 0..t-s]ᵀ
                gemm_acc(
                    cog,
                    t - s,
                    cig,
                    dout,
                    Layout::row_major(grp * cog * t + s, t),
                    x,
                    Layout::new(grp * cig * t, 1, t),
                    dw,
                    Layout::new(grp * cog * cig * k + j, cig * k, k),
                );
            }
        }
    }
}

/// Affine map along the trailing dimension: `y = x·Wᵀ + b`.
pub fn fully_connected(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (rows, d_in, d_out) = fc_geometry(input, weight, bias)?;
    let mut out = Vec::with_capacity(rows * d_out);
    for _ in 0..rows {
        out.extend_from_slice(bias.data());
    }
    gemm_acc(
        rows,
        d_in,
        d_out,
        input.data(),
        Layout::row_major(0, d_in),
        weight.data(),
        Layout::new(0, 1, d_in),
        &mut out,
        Layout::row_major(0, d_out),
    );
    let mut shape = input.shape().to_vec();
    *shape.last_mut().expect("rank checked") = d_out;
    Tensor::new(shape, out)
}

pub(crate) fn fc_geometry(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<(usize, usize, usize)> {
    let (d_out, d_in) = weight.dims2()?;
    let last = *input
        .shape()
        .last()
        .ok_or_else(|| Error::dim("fully_connected input has rank 0"))?;
    if last != d_in {
        return Err(Error::dim(format!(
            "fully_connected trailing dim {last} != weight input dim {d_in}"
        )));
    }
    if bias.shape() != [d_out] {
        return Err(Error::dim(format!("fully_connected bias shape {:?} != [{d_out}]", bias.shape())));
    }
    Ok((input.numel() / d_in, d_in, d_out))
}

pub(crate) fn fc_backward_acc(
    rows: usize,
    d_in: usize,
    d_out: usize,
    x: &[f64],
    w: &[f64],
    dout: &[f64],
    dx: Option<&mut [f64]>,
    dw: Option<&mut [f64]>,
    db: Option<&mut [f64]>,
) {
    if let Some(dx) = dx {
        gemm_acc(
            rows,
            d_out,
            d_in,
            dout,
            Layout::row_major(0, d_out),
            w,
            Layout::row_major(0, d_in),
            dx,
            Layout::row_major(0, d_in),
        );
    }
    if let Some(dw) = dw {
        gemm_acc(
            d_out,
            rows,
            d_in,
            dout,
            Layout::new(0, 1, d_out),
            x,
            Layout::row_major(0, d_in),
            dw,
            Layout::row_major(0, d_in),
        );
    }
    if let Some(db) = db {
        for r in 0..rows {
            for (d, &g) in db.iter_mut().zip(&dout[r * d_out..(r + 1) * d_out]) {
                *d += g;
            }
        }
    }
}

/// Per-frame statistics of a cumulative normalization pass.
#[derive(Clone, Debug)]
pub(crate) struct CglnStats {
    pub mean: Vec<f64>,
    pub inv_std: Vec<f64>,
}

/// Running channel-pooled sums used by cumulative normalization.
///
/// The offline operator and the streaming runtime both fold frames through
/// this accumulator, so their statistics agree bit for bit.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CumulativeStats {
    pub sum: f64,
    pub sum_sq: f64,
    pub count: u64,
}

impl CumulativeStats {
    /// Folds in one frame and returns `(mean, 1/sqrt(var + eps))` over the prefix.
    pub fn push_frame(&mut self, frame: impl Iterator<Item = f64>, eps: f64) -> (f64, f64) {
        let mut s1 = 0.0;
        let mut s2 = 0.0;
        let mut n = 0u64;
        for v in frame {
            s1 += v;
            s2 += v * v;
            n += 1;
        }
        self.sum += s1;
        self.sum_sq += s2;
        self.count += n;
        let count = self.count as f64;
        let mean = self.sum / count;
        let var = (self.sum_sq / count - mean * mean).max(0.0);
        (mean, 1.0 / (var + eps).sqrt())
    }
}

/// Cumulative global layer normalization over `[C × T]`.
///
/// Frame `t` is normalized by the mean and (population) variance pooled over
/// all channels of frames `0..=t`, then scaled by `gain` and shifted by `bias`.
pub fn cgln(input: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    Ok(cgln_with_stats(input, gain, bias, eps)?.0)
}

pub(crate) fn cgln_with_stats(input: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<(Tensor, CglnStats)> {
    let (c, t) = input.dims2()?;
    if t == 0 {
        return Err(Error::dim("cgln needs at least one frame"));
    }
    if gain.shape() != [c] || bias.shape() != [c] {
        return Err(Error::dim(format!(
            "cgln gain/bias shapes {:?}/{:?} != [{c}]",
            gain.shape(),
            bias.shape()
        )));
    }
    let x = input.data();
    let mut acc = CumulativeStats::default();
    let mut mean = Vec::with_capacity(t);
    let mut inv_std = Vec::with_capacity(t);
    for tau in 0..t {
        let (m, s) = acc.push_frame((0..c).map(|ch| x[ch * t + tau]), eps);
        mean.push(m);
        inv_std.push(s);
    }
    let mut out = vec![0.0; c * t];
    for ch in 0..c {
        let (gv, bv) = (gain.data()[ch], bias.data()[ch]);
        let row = &x[ch * t..(ch + 1) * t];
        for (tau, o) in out[ch * t..(ch + 1) * t].iter_mut().enumerate() {
            *o = gv * (row[tau] - mean[tau]) * inv_std[tau] + bv;
        }
    }
    Ok((Tensor::new(vec![c, t], out)?, CglnStats { mean, inv_std }))
}

/// Returns `(dx, dgain, dbias)`.
pub(crate) fn cgln_backward(
    x: &[f64],
    c: usize,
    t: usize,
    gain: &[f64],
    stats: &CglnStats,
    dout: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut dgain = vec![0.0; c];
    let mut dbias = vec![0.0; c];
    // h = dL/dx̂, accumulated per frame into dL/dS1 and dL/dS2 of the prefix sums.
    let mut d_s1 = vec![0.0; t];
    let mut d_s2 = vec![0.0; t];
    let mut h_sum = vec![0.0; t];
    let mut h_xc = vec![0.0; t];
    for ch in 0..c {
        let row = &x[ch * t..(ch + 1) * t];
        let drow = &dout[ch * t..(ch + 1) * t];
        for tau in 0..t {
            let xc = row[tau] - stats.mean[tau];
            let xhat = xc * stats.inv_std[tau];
            dgain[ch] += drow[tau] * xhat;
            dbias[ch] += drow[tau];
            let h = drow[tau] * gain[ch];
            h_sum[tau] += h;
            h_xc[tau] += h * xc;
        }
    }
    for tau in 0..t {
        let n = (c * (tau + 1)) as f64;
        let inv = stats.inv_std[tau];
        let d_mu_direct = -h_sum[tau] * inv;
        let d_sigma = -h_xc[tau] * inv * inv;
        // dσ/dv = 1/(2σ) = inv/2
        let d_var = d_sigma * 0.5 * inv;
        let d_mu = d_mu_direct - 2.0 * stats.mean[tau] * d_var;
        d_s1[tau] = d_mu / n;
        d_s2[tau] = d_var / n;
    }
    // Reverse cumulative sums: frame τ contributes to every prefix t >= τ.
    for tau in (0..t.saturating_sub(1)).rev() {
        d_s1[tau] += d_s1[tau + 1];
        d_s2[tau] += d_s2[tau + 1];
    }
    let mut dx = vec![0.0; c * t];
    for ch in 0..c {
        let row = &x[ch * t..(ch + 1) * t];
        let drow = &dout[ch * t..(ch + 1) * t];
        for tau in 0..t {
            let h = drow[tau] * gain[ch];
            dx[ch * t + tau] = h * stats.inv_std[tau] + d_s1[tau] + 2.0 * row[tau] * d_s2[tau];
        }
    }
    (dx, dgain, dbias)
}

/// Non-overlapping max pooling along time; trailing frames that do not fill a
/// window are dropped.
pub fn maxpool1d(input: &Tensor, window: usize) -> Result<Tensor> {
    Ok(maxpool_with_argmax(input, window)?.0)
}

pub(crate) fn maxpool_with_argmax(input: &Tensor, window: usize) -> Result<(Tensor, Vec<usize>)> {
    let (c, t) = input.dims2()?;
    if window == 0 {
        return Err(Error::dim("maxpool window must be >= 1"));
    }
    if t < window {
        return Err(Error::dim(format!("maxpool: {t} frames shorter than window {window}")));
    }
    let out_t = t / window;
    let x = input.data();
    let mut out = Vec::with_capacity(c * out_t);
    let mut arg = Vec::with_capacity(c * out_t);
    for ch in 0..c {
        for w in 0..out_t {
            let start = ch * t + w * window;
            let mut best = start;
            for i in start + 1..start + window {
                if x[i] > x[best] {
                    best = i;
                }
            }
            out.push(x[best]);
            arg.push(best);
        }
    }
    Ok((Tensor::new(vec![c, out_t], out)?, arg))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Mul,
    Add,
}

/// How the operands of a binary op line up.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Broadcast {
    Same,
    /// lhs is `[C]`, rhs is `[C × T]`
    LhsChannels { c: usize, t: usize },
    /// lhs is `[C × T]`, rhs is `[C]`
    RhsChannels { c: usize, t: usize },
}

pub(crate) fn broadcast_of(a: &Tensor, b: &Tensor) -> Result<Broadcast> {
    if a.shape() == b.shape() {
        return Ok(Broadcast::Same);
    }
    match (a.shape(), b.shape()) {
        ([c1], [c2, t]) if c1 == c2 => Ok(Broadcast::LhsChannels { c: *c2, t: *t }),
        ([c1, t], [c2]) if c1 == c2 => Ok(Broadcast::RhsChannels { c: *c1, t: *t }),
        _ => Err(Error::dim(format!(
            "incompatible shapes {:?} and {:?}",
            a.shape(),
            b.shape()
        ))),
    }
}

/// Elementwise `mul`/`add` with channel-vector × channel-time broadcasting.
pub fn elementwise(a: &Tensor, b: &Tensor, op: BinaryOp) -> Result<Tensor> {
    let f = |x: f64, y: f64| match op {
        BinaryOp::Mul => x * y,
        BinaryOp::Add => x + y,
    };
    let (shape, data) = match broadcast_of(a, b)? {
        Broadcast::Same => (
            a.shape().to_vec(),
            a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
        ),
        Broadcast::LhsChannels { c, t } => (
            vec![c, t],
            b.data()
                .iter()
                .enumerate()
                .map(|(i, &y)| f(a.data()[i / t], y))
                .collect(),
        ),
        Broadcast::RhsChannels { c, t } => (
            vec![c, t],
            a.data()
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, b.data()[i / t]))
                .collect(),
        ),
    };
    Tensor::new(shape, data)
}

pub fn concat(tensors: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = tensors.first().ok_or_else(|| Error::dim("concat of zero tensors"))?;
    let rank = first.rank();
    if axis >= rank {
        return Err(Error::dim(format!("concat axis {axis} out of range for rank {rank}")));
    }
    for t in tensors {
        let same_rank = t.rank() == rank;
        if !same_rank
            || t.shape()
                .iter()
                .zip(first.shape())
                .enumerate()
                .any(|(i, (a, b))| i != axis && a != b)
        {
            return Err(Error::dim(format!(
                "concat shape mismatch: {:?} vs {:?} on axis {axis}",
                t.shape(),
                first.shape()
            )));
        }
    }
    let outer: usize = first.shape()[..axis].iter().product();
    let inner: usize = first.shape()[axis + 1..].iter().product();
    let total_axis: usize = tensors.iter().map(|t| t.shape()[axis]).sum();
    let mut data = Vec::with_capacity(outer * total_axis * inner);
    for o in 0..outer {
        for t in tensors {
            let span = t.shape()[axis] * inner;
            data.extend_from_slice(&t.data()[o * span..(o + 1) * span]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total_axis;
    Tensor::new(shape, data)
}

/// Average over the time axis of `[C × T]`.
pub fn mean_time(input: &Tensor) -> Result<Tensor> {
    let (c, t) = input.dims2()?;
    if t == 0 {
        return Err(Error::dim("mean over zero frames"));
    }
    let data = (0..c)
        .map(|ch| input.row(ch).iter().sum::<f64>() / t as f64)
        .collect();
    Ok(Tensor::from_vec(data))
}
