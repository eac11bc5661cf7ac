//! Forward kernels and their hand-written backward passes.
//!
//! Layout convention: sequence tensors are [channels, time] row-major, so a
//! channel's timeline is contiguous. Convolutions and projections reduce to
//! axpy/dot over contiguous slices, which the compiler vectorizes.

use super::{Rng, Tensor};
use crate::error::{Error, Result};

/// y += a * x over equal-length slices.
#[inline]
pub(crate) fn axpy(y: &mut [f32], a: f32, x: &[f32]) {
    debug_assert_eq!(y.len(), x.len());
    for (yo, xi) in y.iter_mut().zip(x) {
        *yo += a * *xi;
    }
}

/// Dot product with split accumulators so the reduction vectorizes.
#[inline]
pub(crate) fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f32; 8];
    let mut ia = a.chunks_exact(8);
    let mut ib = b.chunks_exact(8);
    for (ca, cb) in (&mut ia).zip(&mut ib) {
        for j in 0..8 {
            acc[j] += ca[j] * cb[j];
        }
    }
    let mut s = acc.iter().sum::<f32>();
    for (xa, xb) in ia.remainder().iter().zip(ib.remainder()) {
        s += xa * xb;
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// (K-1)*dilation zeros on the left only; output at t never reads inputs past t.
    Causal,
    /// Zeros split evenly (left gets the smaller half); T' = ceil(T/stride).
    Same,
}

fn conv_pad_left(padding: Padding, t: usize, t_out: usize, k: usize, stride: usize, dilation: usize) -> usize {
    match padding {
        Padding::Causal => (k - 1) * dilation,
        Padding::Same => {
            let span = (t_out - 1) * stride + (k - 1) * dilation + 1;
            span.saturating_sub(t) / 2
        }
    }
}

fn conv_check(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, stride: usize, dilation: usize) -> Result<(usize, usize, usize, usize)> {
    if x.rank() != 2 || weight.rank() != 3 {
        return Err(Error::ShapeMismatch(format!(
            "conv1d: x rank {} (want 2), weight rank {} (want 3)",
            x.rank(),
            weight.rank()
        )));
    }
    let (c_in, t) = (x.shape[0], x.shape[1]);
    let (c_out, w_cin, k) = (weight.shape[0], weight.shape[1], weight.shape[2]);
    if w_cin != c_in {
        return Err(Error::ShapeMismatch(format!(
            "conv1d: weight expects {w_cin} input channels, x has {c_in}"
        )));
    }
    if let Some(b) = bias {
        if b.numel() != c_out {
            return Err(Error::ShapeMismatch(format!(
                "conv1d: bias has {} entries, want {c_out}",
                b.numel()
            )));
        }
    }
    if stride == 0 || dilation == 0 || k == 0 {
        return Err(Error::ShapeMismatch(
            "conv1d: stride, dilation, kernel must be >= 1".into(),
        ));
    }
    Ok((c_in, t, c_out, k))
}

/// 1-D convolution: x [C_in, T], weight [C_out, C_in, K] -> [C_out, ceil(T/stride)].
pub fn conv1d(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    dilation: usize,
    padding: Padding,
) -> Result<Tensor> {
    let (c_in, t, c_out, k) = conv_check(x, weight, bias, stride, dilation)?;
    let t_out = t.div_ceil(stride);
    let pad_left = conv_pad_left(padding, t, t_out, k, stride, dilation);
    let mut y = Tensor::zeros(&[c_out, t_out]);

    for co in 0..c_out {
        let yrow = &mut y.data[co * t_out..(co + 1) * t_out];
        if let Some(b) = bias {
            yrow.fill(b.data[co]);
        }
        for ci in 0..c_in {
            let xrow = &x.data[ci * t..(ci + 1) * t];
            let wrow = &weight.data[(co * c_in + ci) * k..(co * c_in + ci + 1) * k];
            for (kk, &w) in wrow.iter().enumerate() {
                let off = (kk * dilation) as isize - pad_left as isize;
                if stride == 1 {
                    let lo = (-off).max(0) as usize;
                    let hi = ((t as isize - off).min(t_out as isize)).max(0) as usize;
                    if lo < hi {
                        let xs = &xrow[(lo as isize + off) as usize..(hi as isize + off) as usize];
                        axpy(&mut yrow[lo..hi], w, xs);
                    }
                } else {
                    for tp in 0..t_out {
                        let j = (tp * stride) as isize + off;
                        if j >= 0 && (j as usize) < t {
                            yrow[tp] += w * xrow[j as usize];
                        }
                    }
                }
            }
        }
    }
    Ok(y)
}

/// Gradients of conv1d w.r.t. input, weight, and bias given dL/dy.
pub fn conv1d_backward(
    x: &Tensor,
    weight: &Tensor,
    stride: usize,
    dilation: usize,
    padding: Padding,
    dy: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (c_in, t, c_out, k) = conv_check(x, weight, None, stride, dilation)?;
    let t_out = t.div_ceil(stride);
    if dy.shape != [c_out, t_out] {
        return Err(Error::ShapeMismatch(format!(
            "conv1d_backward: dy shape {:?}, want [{c_out}, {t_out}]",
            dy.shape
        )));
    }
    let pad_left = conv_pad_left(padding, t, t_out, k, stride, dilation);

    let mut dx = Tensor::zeros(&[c_in, t]);
    let mut dw = Tensor::zeros(&[c_out, c_in, k]);
    let mut db = Tensor::zeros(&[c_out]);

    for co in 0..c_out {
        let dyrow = &dy.data[co * t_out..(co + 1) * t_out];
        db.data[co] = dyrow.iter().map(|&v| v as f64).sum::<f64>() as f32;
        for ci in 0..c_in {
            let xrow = &x.data[ci * t..(ci + 1) * t];
            let dxrow = &mut dx.data[ci * t..(ci + 1) * t];
            for kk in 0..k {
                let w = weight.data[(co * c_in + ci) * k + kk];
                let off = (kk * dilation) as isize - pad_left as isize;
                let mut grad_w = 0.0f32;
                if stride == 1 {
                    let lo = (-off).max(0) as usize;
                    let hi = ((t as isize - off).min(t_out as isize)).max(0) as usize;
                    if lo < hi {
                        let xs = &xrow[(lo as isize + off) as usize..(hi as isize + off) as usize];
                        grad_w = dot(&dyrow[lo..hi], xs);
                        axpy(
                            &mut dxrow[(lo as isize + off) as usize..(hi as isize + off) as usize],
                            w,
                            &dyrow[lo..hi],
                        );
                    }
                } else {
                    for tp in 0..t_out {
                        let j = (tp * stride) as isize + off;
                        if j >= 0 && (j as usize) < t {
                            grad_w += dyrow[tp] * xrow[j as usize];
                            dxrow[j as usize] += w * dyrow[tp];
                        }
                    }
                }
                dw.data[(co * c_in + ci) * k + kk] = grad_w;
            }
        }
    }
    Ok((dx, dw, db))
}

fn dense_check(w: &Tensor, bias: Option<&Tensor>, x: &Tensor) -> Result<(usize, usize, usize)> {
    if w.rank() != 2 || x.rank() != 2 {
        return Err(Error::ShapeMismatch(format!(
            "dense: weight rank {} and input rank {} must both be 2",
            w.rank(),
            x.rank()
        )));
    }
    let (o, i) = (w.shape[0], w.shape[1]);
    let (xi, t) = (x.shape[0], x.shape[1]);
    if i != xi {
        return Err(Error::ShapeMismatch(format!(
            "dense: weight expects {i} inputs, x has {xi}"
        )));
    }
    if let Some(b) = bias {
        if b.numel() != o {
            return Err(Error::ShapeMismatch(format!(
                "dense: bias has {} entries, want {o}",
                b.numel()
            )));
        }
    }
    Ok((o, i, t))
}

/// Per-timestep affine map: weight [O, I] applied to x [I, T] -> [O, T].
pub fn dense(w: &Tensor, bias: Option<&Tensor>, x: &Tensor) -> Result<Tensor> {
    let (o, i, t) = dense_check(w, bias, x)?;
    let mut y = Tensor::zeros(&[o, t]);
    for oo in 0..o {
        let yrow = &mut y.data[oo * t..(oo + 1) * t];
        if let Some(b) = bias {
            yrow.fill(b.data[oo]);
        }
        for ii in 0..i {
            axpy(yrow, w.data[oo * i + ii], &x.data[ii * t..(ii + 1) * t]);
        }
    }
    Ok(y)
}

pub fn dense_backward(w: &Tensor, x: &Tensor, dy: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let (o, i, t) = dense_check(w, None, x)?;
    if dy.shape != [o, t] {
        return Err(Error::ShapeMismatch(format!(
            "dense_backward: dy shape {:?}, want [{o}, {t}]",
            dy.shape
        )));
    }
    let mut dx = Tensor::zeros(&[i, t]);
    let mut dw = Tensor::zeros(&[o, i]);
    let mut db = Tensor::zeros(&[o]);
    for oo in 0..o {
        let dyrow = &dy.data[oo * t..(oo + 1) * t];
        db.data[oo] = dyrow.iter().map(|&v| v as f64).sum::<f64>() as f32;
        for ii in 0..i {
            dw.data[oo * i + ii] = dot(dyrow, &x.data[ii * t..(ii + 1) * t]);
            axpy(&mut dx.data[ii * t..(ii + 1) * t], w.data[oo * i + ii], dyrow);
        }
    }
    Ok((dx, dw, db))
}

/// Saved normalization state for the backward pass.
pub struct BnCache {
    xhat: Vec<f32>,
    invstd: Vec<f32>,
    gamma: Vec<f32>,
    channels: usize,
    per_channel: usize,
}

fn bn_dims(x: &Tensor) -> Result<(usize, usize)> {
    if x.rank() < 2 || x.shape[0] == 0 {
        return Err(Error::ShapeMismatch(format!(
            "batch_norm: input shape {:?} needs [C, ...] with C >= 1",
            x.shape
        )));
    }
    let c = x.shape[0];
    Ok((c, x.numel() / c))
}

/// Train-mode batch norm over [C, ...]: normalize by batch statistics
/// (64-bit accumulation, eps 1e-5) and update running stats with momentum 0.9.
pub fn batch_norm_train(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &mut Tensor,
    running_var: &mut Tensor,
) -> Result<(Tensor, BnCache)> {
    const EPS: f64 = 1e-5;
    const MOMENTUM: f32 = 0.9;
    let (c, p) = bn_dims(x)?;
    if gamma.numel() != c || beta.numel() != c || running_mean.numel() != c || running_var.numel() != c {
        return Err(Error::ShapeMismatch(format!(
            "batch_norm: per-channel params must have {c} entries"
        )));
    }
    let mut y = Tensor::zeros(&x.shape);
    let mut cache = BnCache {
        xhat: vec![0.0; x.numel()],
        invstd: vec![0.0; c],
        gamma: gamma.data.clone(),
        channels: c,
        per_channel: p,
    };
    for ch in 0..c {
        let xrow = &x.data[ch * p..(ch + 1) * p];
        let mean = xrow.iter().map(|&v| v as f64).sum::<f64>() / p as f64;
        let var = xrow
            .iter()
            .map(|&v| {
                let d = v as f64 - mean;
                d * d
            })
            .sum::<f64>()
            / p as f64;
        let invstd = 1.0 / (var + EPS).sqrt();
        cache.invstd[ch] = invstd as f32;
        running_mean.data[ch] = MOMENTUM * running_mean.data[ch] + (1.0 - MOMENTUM) * mean as f32;
        running_var.data[ch] = MOMENTUM * running_var.data[ch] + (1.0 - MOMENTUM) * var as f32;
        let (g, b) = (gamma.data[ch], beta.data[ch]);
        for i in 0..p {
            let xh = ((xrow[i] as f64 - mean) * invstd) as f32;
            cache.xhat[ch * p + i] = xh;
            y.data[ch * p + i] = g * xh + b;
        }
    }
    Ok((y, cache))
}

/// Eval-mode batch norm: normalize with the running statistics.
pub fn batch_norm_eval(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &Tensor,
    running_var: &Tensor,
) -> Result<Tensor> {
    const EPS: f64 = 1e-5;
    let (c, p) = bn_dims(x)?;
    if gamma.numel() != c || beta.numel() != c || running_mean.numel() != c || running_var.numel() != c {
        return Err(Error::ShapeMismatch(format!(
            "batch_norm: per-channel params must have {c} entries"
        )));
    }
    let mut y = Tensor::zeros(&x.shape);
    for ch in 0..c {
        let mean = running_mean.data[ch] as f64;
        let invstd = 1.0 / (running_var.data[ch] as f64 + EPS).sqrt();
        let (g, b) = (gamma.data[ch] as f64, beta.data[ch] as f64);
        for i in 0..p {
            y.data[ch * p + i] = ((x.data[ch * p + i] as f64 - mean) * invstd * g + b) as f32;
        }
    }
    Ok(y)
}

pub fn batch_norm_backward(cache: &BnCache, dy: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let (c, p) = (cache.channels, cache.per_channel);
    if dy.numel() != c * p {
        return Err(Error::ShapeMismatch(format!(
            "batch_norm_backward: dy has {} elements, want {}",
            dy.numel(),
            c * p
        )));
    }
    let mut dx = Tensor::zeros(&dy.shape);
    let mut dgamma = Tensor::zeros(&[c]);
    let mut dbeta = Tensor::zeros(&[c]);
    for ch in 0..c {
        let dyrow = &dy.data[ch * p..(ch + 1) * p];
        let xhrow = &cache.xhat[ch * p..(ch + 1) * p];
        let mut sum_dy = 0.0f64;
        let mut sum_dy_xh = 0.0f64;
        for i in 0..p {
            sum_dy += dyrow[i] as f64;
            sum_dy_xh += dyrow[i] as f64 * xhrow[i] as f64;
        }
        dbeta.data[ch] = sum_dy as f32;
        dgamma.data[ch] = sum_dy_xh as f32;
        let scale = cache.gamma[ch] as f64 * cache.invstd[ch] as f64 / p as f64;
        for i in 0..p {
            dx.data[ch * p + i] = (scale
                * (p as f64 * dyrow[i] as f64 - sum_dy - xhrow[i] as f64 * sum_dy_xh))
                as f32;
        }
    }
    Ok((dx, dgamma, dbeta))
}

/// min(max(x, 0), cap) elementwise. cap = +inf gives plain ReLU.
pub fn clipped_relu(x: &Tensor, cap: f32) -> Tensor {
    let data = x.data.iter().map(|&v| v.clamp(0.0, cap)).collect();
    Tensor {
        shape: x.shape.clone(),
        data,
    }
}

/// Gradient is 1 strictly inside (0, cap), 0 at the kinks and outside.
pub fn clipped_relu_backward(x: &Tensor, cap: f32, dy: &Tensor) -> Tensor {
    debug_assert_eq!(x.shape, dy.shape);
    let data = x
        .data
        .iter()
        .zip(&dy.data)
        .map(|(&v, &g)| if v > 0.0 && v < cap { g } else { 0.0 })
        .collect();
    Tensor {
        shape: x.shape.clone(),
        data,
    }
}

/// Inverted-scaling dropout: kept entries are scaled by 1/(1-rate).
/// Returns the output and the mask (holding 0 or the scale factor).
pub fn dropout_train(x: &Tensor, rate: f32, rng: &mut Rng) -> (Tensor, Vec<f32>) {
    assert!((0.0..1.0).contains(&rate), "dropout rate must be in [0, 1)");
    let scale = 1.0 / (1.0 - rate);
    let mask: Vec<f32> = x
        .data
        .iter()
        .map(|_| if rng.next_f32() < rate { 0.0 } else { scale })
        .collect();
    let data = x.data.iter().zip(&mask).map(|(&v, &m)| v * m).collect();
    (
        Tensor {
            shape: x.shape.clone(),
            data,
        },
        mask,
    )
}

pub fn dropout_backward(mask: &[f32], dy: &Tensor) -> Tensor {
    debug_assert_eq!(mask.len(), dy.numel());
    let data = dy.data.iter().zip(mask).map(|(&g, &m)| g * m).collect();
    Tensor {
        shape: dy.shape.clone(),
        data,
    }
}

#[inline]
pub fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// tanh(x_filter) * sigmoid(x_gate) elementwise.
pub fn gated_unit(x_filter: &Tensor, x_gate: &Tensor) -> Result<Tensor> {
    if x_filter.shape != x_gate.shape {
        return Err(Error::ShapeMismatch(format!(
            "gated_unit: filter shape {:?} vs gate shape {:?}",
            x_filter.shape, x_gate.shape
        )));
    }
    let data = x_filter
        .data
        .iter()
        .zip(&x_gate.data)
        .map(|(&f, &g)| f.tanh() * sigmoid(g))
        .collect();
    Ok(Tensor {
        shape: x_filter.shape.clone(),
        data,
    })
}

pub fn gated_unit_backward(x_filter: &Tensor, x_gate: &Tensor, dy: &Tensor) -> Result<(Tensor, Tensor)> {
    if x_filter.shape != x_gate.shape || dy.shape != x_filter.shape {
        return Err(Error::ShapeMismatch(
            "gated_unit_backward: shapes must all match".into(),
        ));
    }
    let n = dy.numel();
    let mut df = Tensor::zeros(&dy.shape);
    let mut dg = Tensor::zeros(&dy.shape);
    for i in 0..n {
        let th = x_filter.data[i].tanh();
        let sg = sigmoid(x_gate.data[i]);
        df.data[i] = dy.data[i] * sg * (1.0 - th * th);
        dg.data[i] = dy.data[i] * th * sg * (1.0 - sg);
    }
    Ok((df, dg))
}

/// Numerically stable in-place softmax of one column.
pub fn softmax_in_place(v: &mut [f32]) {
    let max = v.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f64;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x as f64;
    }
    let inv = (1.0 / sum) as f32;
    for x in v.iter_mut() {
        *x *= inv;
    }
}

/// Mean cross entropy over columns of logits [C, T] against target class
/// indices. Gradient is (softmax - onehot) / T.
pub fn softmax_cross_entropy(logits: &Tensor, targets: &[usize]) -> Result<(f64, Tensor)> {
    if logits.rank() != 2 {
        return Err(Error::ShapeMismatch(format!(
            "softmax_cross_entropy: logits rank {}, want 2",
            logits.rank()
        )));
    }
    let (c, t) = (logits.shape[0], logits.shape[1]);
    if targets.len() != t {
        return Err(Error::ShapeMismatch(format!(
            "softmax_cross_entropy: {} targets for {t} columns",
            targets.len()
        )));
    }
    let mut grad = Tensor::zeros(&[c, t]);
    let mut col = vec![0.0f32; c];
    let mut loss = 0.0f64;
    for tt in 0..t {
        let target = targets[tt];
        if target >= c {
            return Err(Error::IndexOutOfRange(format!(
                "softmax_cross_entropy: target {target} at position {tt}, {c} classes"
            )));
        }
        for ch in 0..c {
            col[ch] = logits.data[ch * t + tt];
        }
        let max = col.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f64;
        for ch in 0..c {
            sum += ((col[ch] - max) as f64).exp();
        }
        let log_sum = sum.ln();
        loss += log_sum - (col[target] - max) as f64;
        let inv_t = 1.0 / t as f32;
        for ch in 0..c {
            let p = (((col[ch] - max) as f64).exp() / sum) as f32;
            let onehot = if ch == target { 1.0 } else { 0.0 };
            grad.data[ch * t + tt] = (p - onehot) * inv_t;
        }
    }
    Ok((loss / t as f64, grad))
}

/// table [V, R], ids length T -> output [R, T] with column t = table[ids[t], :].
pub fn embedding_lookup(table: &Tensor, ids: &[usize]) -> Result<Tensor> {
    if table.rank() != 2 {
        return Err(Error::ShapeMismatch(format!(
            "embedding_lookup: table rank {}, want 2",
            table.rank()
        )));
    }
    let (v, r) = (table.shape[0], table.shape[1]);
    let t = ids.len();
    let mut y = Tensor::zeros(&[r, t]);
    for (tt, &id) in ids.iter().enumerate() {
        if id >= v {
            return Err(Error::IndexOutOfRange(format!(
                "embedding_lookup: id {id} at position {tt}, table has {v} rows"
            )));
        }
        for rr in 0..r {
            y.data[rr * t + tt] = table.data[id * r + rr];
        }
    }
    Ok(y)
}

/// Scatter-add of dy [R, T] back into a [V, R] gradient table.
pub fn embedding_backward(dy: &Tensor, ids: &[usize], vocab: usize) -> Result<Tensor> {
    if dy.rank() != 2 || dy.shape[1] != ids.len() {
        return Err(Error::ShapeMismatch(format!(
            "embedding_backward: dy shape {:?} vs {} ids",
            dy.shape,
            ids.len()
        )));
    }
    let (r, t) = (dy.shape[0], dy.shape[1]);
    let mut dtable = Tensor::zeros(&[vocab, r]);
    for (tt, &id) in ids.iter().enumerate() {
        for rr in 0..r {
            dtable.data[id * r + rr] += dy.data[rr * t + tt];
        }
    }
    Ok(dtable)
}
