//! Automatic evaluation: mel-cepstral distortion under dynamic time warping,
//! and a convolutional speaker-identification classifier.

use crate::audio::Waveform;
use crate::dsp::{estimate_f0, mel_cepstra, normalized_log_f0, CepstraFrames, DEFAULT_CEPSTRA_ORDER};
use crate::error::{Error, Result};
use crate::neural::{
    archive, batch_norm_backward, batch_norm_eval, batch_norm_train, softmax_cross_entropy, Adam,
    AdamState, Parameter, Rng, Tensor,
};
use crate::train::Manifest;
use sha2::Digest;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

/// dB scaling of the per-frame cepstral distance: (10/ln 10) * sqrt(2).
pub fn mcd_constant() -> f64 {
    10.0 / std::f64::consts::LN_10 * 2.0f64.sqrt()
}

/// Monotone alignment path from (0,0) to (N-1, M-1) over steps
/// {(1,0), (0,1), (1,1)}.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DtwPath {
    pub pairs: Vec<(usize, usize)>,
}

/// Per-pair frame cost: (10/ln10) * sqrt(2 * sum_d (a_d - b_d)^2).
pub fn frame_cost(a: &[f32], b: &[f32]) -> f64 {
    let mut sq = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        let d = x as f64 - y as f64;
        sq += d * d;
    }
    10.0 / std::f64::consts::LN_10 * (2.0 * sq).sqrt()
}

/// Dynamic program minimizing the summed frame cost along the path. Ties
/// prefer the diagonal step, then (1,0), then (0,1).
pub fn dtw_align(a: &CepstraFrames, b: &CepstraFrames) -> Result<DtwPath> {
    let n = a.t_frames();
    let m = b.t_frames();
    if n == 0 || m == 0 {
        return Err(Error::EmptyInput("dtw_align: empty cepstra sequence".into()));
    }
    if a.order != b.order {
        return Err(Error::ShapeMismatch(format!(
            "dtw_align: order {} vs {}",
            a.order, b.order
        )));
    }
    let mut dist = vec![f64::INFINITY; n * m];
    // 0 = diagonal (1,1), 1 = (1,0) advance a, 2 = (0,1) advance b
    let mut back = vec![0u8; n * m];
    for i in 0..n {
        let ra = a.row(i);
        for j in 0..m {
            let c = frame_cost(ra, b.row(j));
            if i == 0 && j == 0 {
                dist[0] = c;
                continue;
            }
            let diag = if i > 0 && j > 0 {
                dist[(i - 1) * m + (j - 1)]
            } else {
                f64::INFINITY
            };
            let up = if i > 0 { dist[(i - 1) * m + j] } else { f64::INFINITY };
            let left = if j > 0 { dist[i * m + (j - 1)] } else { f64::INFINITY };
            let (best, step) = if diag <= up && diag <= left {
                (diag, 0u8)
            } else if up <= left {
                (up, 1u8)
            } else {
                (left, 2u8)
            };
            dist[i * m + j] = best + c;
            back[i * m + j] = step;
        }
    }
    let mut pairs = Vec::with_capacity(n + m);
    let (mut i, mut j) = (n - 1, m - 1);
    loop {
        pairs.push((i, j));
        if i == 0 && j == 0 {
            break;
        }
        match back[i * m + j] {
            0 => {
                i -= 1;
                j -= 1;
            }
            1 => i -= 1,
            _ => j -= 1,
        }
    }
    pairs.reverse();
    Ok(DtwPath { pairs })
}

/// Mean frame cost along the optimal alignment of two cepstra sequences.
pub fn mcd_frames(a: &CepstraFrames, b: &CepstraFrames) -> Result<f64> {
    let path = dtw_align(a, b)?;
    let total: f64 = path
        .pairs
        .iter()
        .map(|&(i, j)| frame_cost(a.row(i), b.row(j)))
        .sum();
    Ok(total / path.pairs.len() as f64)
}

/// Mel-cepstral distortion in dB between two waveforms: order-13 cepstra
/// (c_0 excluded), DTW alignment, mean cost along the path.
pub fn mcd(reference: &Waveform, hypothesis: &Waveform) -> Result<f64> {
    let a = mel_cepstra(reference, DEFAULT_CEPSTRA_ORDER)?;
    let b = mel_cepstra(hypothesis, DEFAULT_CEPSTRA_ORDER)?;
    mcd_frames(&a, &b)
}

/// Detailed result for the CLI report line.
pub struct McdReport {
    pub mcd_db: f64,
    pub frames_ref: usize,
    pub frames_hyp: usize,
    pub path_len: usize,
}

pub fn mcd_report(reference: &Waveform, hypothesis: &Waveform) -> Result<McdReport> {
    let a = mel_cepstra(reference, DEFAULT_CEPSTRA_ORDER)?;
    let b = mel_cepstra(hypothesis, DEFAULT_CEPSTRA_ORDER)?;
    let path = dtw_align(&a, &b)?;
    let total: f64 = path
        .pairs
        .iter()
        .map(|&(i, j)| frame_cost(a.row(i), b.row(j)))
        .sum();
    Ok(McdReport {
        mcd_db: total / path.pairs.len() as f64,
        frames_ref: a.t_frames(),
        frames_hyp: b.t_frames(),
        path_len: path.pairs.len(),
    })
}

/// Speaker-ID CNN geometry. The full-scale preset is 5 batch-normalized
/// 3x3 conv layers of 128 channels with 2x1 max-pools after layers 2 and 4,
/// mean pooling over time, and two fully connected layers.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierConfig {
    pub n_conv: usize,
    pub kernel: usize,
    pub channels: usize,
    pub n_fc: usize,
    pub n_classes: usize,
    /// Input rows: 13 cepstra + normalized log-F0 + voiced flag.
    pub input_features: usize,
    /// Frames per training crop.
    pub max_frames: usize,
}

impl ClassifierConfig {
    pub fn paper(n_classes: usize) -> Self {
        ClassifierConfig {
            n_conv: 5,
            kernel: 3,
            channels: 128,
            n_fc: 2,
            n_classes,
            input_features: 15,
            max_frames: 200,
        }
    }

    pub fn toy(n_classes: usize) -> Self {
        ClassifierConfig {
            channels: 16,
            ..Self::paper(n_classes)
        }
    }

    /// Feature rows after the two 2x1 max-pools.
    fn pooled_rows(&self) -> usize {
        self.input_features / 2 / 2
    }
}

#[derive(Debug, Clone)]
pub struct ConvBn2d {
    pub weight: Parameter, // [C_out, C_in, 3, 3]
    pub bias: Parameter,
    pub bn_gamma: Parameter,
    pub bn_beta: Parameter,
    pub bn_mean: Tensor,
    pub bn_var: Tensor,
}

#[derive(Debug, Clone)]
pub struct ClassifierParams {
    pub convs: Vec<ConvBn2d>,
    pub fc1_w: Parameter,
    pub fc1_b: Parameter,
    pub fc2_w: Parameter,
    pub fc2_b: Parameter,
}

impl ClassifierParams {
    pub fn init(config: &ClassifierConfig, seed: u64) -> Self {
        let mut rng = Rng::seed_from_u64(seed);
        let c = config.channels;
        let k = config.kernel;
        let mut convs = Vec::with_capacity(config.n_conv);
        for l in 0..config.n_conv {
            let c_in = if l == 0 { 1 } else { c };
            let bound = (1.0 / (c_in * k * k) as f32).sqrt();
            convs.push(ConvBn2d {
                weight: Parameter::new(Tensor::uniform(&[c, c_in, k, k], bound, &mut rng)),
                bias: Parameter::new(Tensor::zeros(&[c])),
                bn_gamma: Parameter::new(Tensor::full(&[c], 1.0)),
                bn_beta: Parameter::new(Tensor::zeros(&[c])),
                bn_mean: Tensor::zeros(&[c]),
                bn_var: Tensor::full(&[c], 1.0),
            });
        }
        let flat = c * config.pooled_rows();
        ClassifierParams {
            convs,
            fc1_w: Parameter::new(Tensor::uniform(&[c, flat], (1.0 / flat as f32).sqrt(), &mut rng)),
            fc1_b: Parameter::new(Tensor::zeros(&[c])),
            fc2_w: Parameter::new(Tensor::uniform(&[config.n_classes, c], (1.0 / c as f32).sqrt(), &mut rng)),
            fc2_b: Parameter::new(Tensor::zeros(&[config.n_classes])),
        }
    }

    fn named_mut(&mut self) -> Vec<(String, &mut Parameter)> {
        let mut out: Vec<(String, &mut Parameter)> = Vec::new();
        for (l, conv) in self.convs.iter_mut().enumerate() {
            out.push((format!("cls.conv{l}.weight"), &mut conv.weight));
            out.push((format!("cls.conv{l}.bias"), &mut conv.bias));
            out.push((format!("cls.conv{l}.bn_gamma"), &mut conv.bn_gamma));
            out.push((format!("cls.conv{l}.bn_beta"), &mut conv.bn_beta));
        }
        out.push(("cls.fc1.weight".into(), &mut self.fc1_w));
        out.push(("cls.fc1.bias".into(), &mut self.fc1_b));
        out.push(("cls.fc2.weight".into(), &mut self.fc2_w));
        out.push(("cls.fc2.bias".into(), &mut self.fc2_b));
        out
    }

    fn named(&self) -> Vec<(String, &Parameter)> {
        let mut out: Vec<(String, &Parameter)> = Vec::new();
        for (l, conv) in self.convs.iter().enumerate() {
            out.push((format!("cls.conv{l}.weight"), &conv.weight));
            out.push((format!("cls.conv{l}.bias"), &conv.bias));
            out.push((format!("cls.conv{l}.bn_gamma"), &conv.bn_gamma));
            out.push((format!("cls.conv{l}.bn_beta"), &conv.bn_beta));
        }
        out.push(("cls.fc1.weight".into(), &self.fc1_w));
        out.push(("cls.fc1.bias".into(), &self.fc1_b));
        out.push(("cls.fc2.weight".into(), &self.fc2_w));
        out.push(("cls.fc2.bias".into(), &self.fc2_b));
        out
    }
}

/// 3x3 same-padded 2-D convolution over [C_in, F, T].
fn conv2d(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Tensor {
    let (c_in, f, t) = (x.shape[0], x.shape[1], x.shape[2]);
    let (c_out, _, k, _) = (
        weight.shape[0],
        weight.shape[1],
        weight.shape[2],
        weight.shape[3],
    );
    let pad = k / 2;
    let mut y = Tensor::zeros(&[c_out, f, t]);
    for co in 0..c_out {
        for row in 0..f {
            let dst = &mut y.data[(co * f + row) * t..(co * f + row + 1) * t];
            dst.fill(bias.data[co]);
        }
        for ci in 0..c_in {
            for df in 0..k {
                for dt in 0..k {
                    let w = weight.data[((co * c_in + ci) * k + df) * k + dt];
                    let toff = dt as isize - pad as isize;
                    let lo = (-toff).max(0) as usize;
                    let hi = ((t as isize - toff).min(t as isize)).max(0) as usize;
                    if lo >= hi {
                        continue;
                    }
                    for f_out in 0..f {
                        let f_in = f_out as isize + df as isize - pad as isize;
                        if f_in < 0 || f_in >= f as isize {
                            continue;
                        }
                        let src = &x.data[(ci * f + f_in as usize) * t..][..t];
                        let dst = &mut y.data[(co * f + f_out) * t..][..t];
                        for i in lo..hi {
                            dst[i] += w * src[(i as isize + toff) as usize];
                        }
                    }
                }
            }
        }
    }
    y
}

fn conv2d_backward(x: &Tensor, weight: &Tensor, dy: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (c_in, f, t) = (x.shape[0], x.shape[1], x.shape[2]);
    let (c_out, _, k, _) = (
        weight.shape[0],
        weight.shape[1],
        weight.shape[2],
        weight.shape[3],
    );
    let pad = k / 2;
    let mut dx = Tensor::zeros(&x.shape);
    let mut dw = Tensor::zeros(&weight.shape);
    let mut db = Tensor::zeros(&[c_out]);
    for co in 0..c_out {
        let mut bsum = 0.0f64;
        for row in 0..f {
            bsum += dy.data[(co * f + row) * t..(co * f + row + 1) * t]
                .iter()
                .map(|&v| v as f64)
                .sum::<f64>();
        }
        db.data[co] = bsum as f32;
        for ci in 0..c_in {
            for df in 0..k {
                for dt in 0..k {
                    let widx = ((co * c_in + ci) * k + df) * k + dt;
                    let w = weight.data[widx];
                    let toff = dt as isize - pad as isize;
                    let lo = (-toff).max(0) as usize;
                    let hi = ((t as isize - toff).min(t as isize)).max(0) as usize;
                    if lo >= hi {
                        continue;
                    }
                    let mut grad_w = 0.0f32;
                    for f_out in 0..f {
                        let f_in = f_out as isize + df as isize - pad as isize;
                        if f_in < 0 || f_in >= f as isize {
                            continue;
                        }
                        let dyrow = &dy.data[(co * f + f_out) * t..][..t];
                        let xrow_base = (ci * f + f_in as usize) * t;
                        for i in lo..hi {
                            let xi = (i as isize + toff) as usize;
                            grad_w += dyrow[i] * x.data[xrow_base + xi];
                            dx.data[xrow_base + xi] += w * dyrow[i];
                        }
                    }
                    dw.data[widx] += grad_w;
                }
            }
        }
    }
    (dx, dw, db)
}

/// 2x1 max pool along the feature axis; floor semantics drop a trailing row.
fn maxpool_2x1(x: &Tensor) -> (Tensor, Vec<usize>) {
    let (c, f, t) = (x.shape[0], x.shape[1], x.shape[2]);
    let f_out = f / 2;
    let mut y = Tensor::zeros(&[c, f_out, t]);
    let mut arg = vec![0usize; c * f_out * t];
    for ch in 0..c {
        for row in 0..f_out {
            for i in 0..t {
                let a_idx = (ch * f + 2 * row) * t + i;
                let b_idx = (ch * f + 2 * row + 1) * t + i;
                let (v, src) = if x.data[a_idx] >= x.data[b_idx] {
                    (x.data[a_idx], a_idx)
                } else {
                    (x.data[b_idx], b_idx)
                };
                let o = (ch * f_out + row) * t + i;
                y.data[o] = v;
                arg[o] = src;
            }
        }
    }
    (y, arg)
}

fn maxpool_2x1_backward(arg: &[usize], dy: &Tensor, in_shape: &[usize]) -> Tensor {
    let mut dx = Tensor::zeros(in_shape);
    for (o, &src) in arg.iter().enumerate() {
        dx.data[src] += dy.data[o];
    }
    dx
}

/// The classifier input grid: 13 cepstra rows, then normalized log-F0 and
/// the voiced flag, as a [1, 15, T] map. The pitch contour is padded with
/// unvoiced frames to the cepstra length.
pub fn classifier_features(w: &Waveform) -> Result<Tensor> {
    let cep = mel_cepstra(w, DEFAULT_CEPSTRA_ORDER)?;
    let f0 = estimate_f0(w)?;
    let t = cep.t_frames();
    let rows = DEFAULT_CEPSTRA_ORDER + 2;
    let mut grid = Tensor::zeros(&[1, rows, t]);
    for tt in 0..t {
        let row = cep.row(tt);
        for (d, &v) in row.iter().enumerate() {
            grid.data[d * t + tt] = v;
        }
        let hz = if tt < f0.len() { f0.values_hz[tt] } else { 0.0 };
        grid.data[DEFAULT_CEPSTRA_ORDER * t + tt] = normalized_log_f0(hz);
        grid.data[(DEFAULT_CEPSTRA_ORDER + 1) * t + tt] = if hz > 0.0 { 1.0 } else { 0.0 };
    }
    Ok(grid)
}

enum BnMode<'a> {
    Train(&'a mut ClassifierParams),
    Eval(&'a ClassifierParams),
}

struct ClsCache {
    conv_inputs: Vec<Tensor>,
    bn_caches: Vec<crate::neural::ops::BnCache>,
    bn_outputs: Vec<Tensor>,
    pool_args: Vec<(Vec<usize>, Vec<usize>)>, // (argmax, input shape)
    pooled_time: Tensor,                      // [flat] after mean over time
    fc1_pre: Tensor,
    fc1_out: Tensor,
    t_frames: usize,
}

/// Forward pass; train mode updates running stats and returns a cache.
fn classifier_forward(
    grid: &Tensor,
    config: &ClassifierConfig,
    mode: &mut BnMode,
) -> Result<(Tensor, Option<ClsCache>)> {
    let train = matches!(mode, BnMode::Train(_));
    let mut h = grid.clone();
    let mut conv_inputs = Vec::new();
    let mut bn_caches = Vec::new();
    let mut bn_outputs = Vec::new();
    let mut pool_args = Vec::new();

    let n_conv = config.n_conv;
    for l in 0..n_conv {
        let conv_out = match mode {
            BnMode::Train(p) => conv2d(&h, &p.convs[l].weight.value, &p.convs[l].bias.value),
            BnMode::Eval(p) => conv2d(&h, &p.convs[l].weight.value, &p.convs[l].bias.value),
        };
        if train {
            conv_inputs.push(h.clone());
        }
        let bn_out = match mode {
            BnMode::Train(p) => {
                let conv = &mut p.convs[l];
                let (y, cache) = batch_norm_train(
                    &conv_out,
                    &conv.bn_gamma.value,
                    &conv.bn_beta.value,
                    &mut conv.bn_mean,
                    &mut conv.bn_var,
                )?;
                bn_caches.push(cache);
                y
            }
            BnMode::Eval(p) => {
                let conv = &p.convs[l];
                batch_norm_eval(
                    &conv_out,
                    &conv.bn_gamma.value,
                    &conv.bn_beta.value,
                    &conv.bn_mean,
                    &conv.bn_var,
                )?
            }
        };
        if train {
            bn_outputs.push(bn_out.clone());
        }
        let mut act = Tensor {
            shape: bn_out.shape.clone(),
            data: bn_out.data.iter().map(|&v| v.max(0.0)).collect(),
        };
        // 2x1 max-pool after the 2nd and 4th conv layers
        if l == 1 || l == 3 {
            let in_shape = act.shape.clone();
            let (pooled, arg) = maxpool_2x1(&act);
            if train {
                pool_args.push((arg, in_shape));
            }
            act = pooled;
        }
        h = act;
    }

    // mean over time -> [C * F]
    let (c, f, t) = (h.shape[0], h.shape[1], h.shape[2]);
    let mut flat = Tensor::zeros(&[c * f]);
    for ch in 0..c {
        for row in 0..f {
            let seg = &h.data[(ch * f + row) * t..(ch * f + row + 1) * t];
            flat.data[ch * f + row] =
                (seg.iter().map(|&v| v as f64).sum::<f64>() / t as f64) as f32;
        }
    }

    let params = match mode {
        BnMode::Train(p) => &**p,
        BnMode::Eval(p) => p,
    };
    let cdim = config.channels;
    let mut fc1_pre = Tensor::zeros(&[cdim]);
    for o in 0..cdim {
        let wrow = &params.fc1_w.value.data[o * flat.numel()..(o + 1) * flat.numel()];
        fc1_pre.data[o] = crate::neural::ops::dot(wrow, &flat.data) + params.fc1_b.value.data[o];
    }
    let fc1_out = Tensor {
        shape: fc1_pre.shape.clone(),
        data: fc1_pre.data.iter().map(|&v| v.max(0.0)).collect(),
    };
    let mut logits = Tensor::zeros(&[config.n_classes, 1]);
    for o in 0..config.n_classes {
        let wrow = &params.fc2_w.value.data[o * cdim..(o + 1) * cdim];
        logits.data[o] = crate::neural::ops::dot(wrow, &fc1_out.data) + params.fc2_b.value.data[o];
    }

    let cache = train.then_some(ClsCache {
        conv_inputs,
        bn_caches,
        bn_outputs,
        pool_args,
        pooled_time: flat,
        fc1_pre,
        fc1_out,
        t_frames: t,
    });
    Ok((logits, cache))
}

fn classifier_backward(
    dlogits: &Tensor,
    cache: &ClsCache,
    params: &mut ClassifierParams,
    config: &ClassifierConfig,
) -> Result<()> {
    let cdim = config.channels;
    let flat_n = cache.pooled_time.numel();
    // fc2
    let mut dfc1_out = vec![0.0f32; cdim];
    for o in 0..config.n_classes {
        let g = dlogits.data[o];
        params.fc2_b.grad.data[o] += g;
        for i in 0..cdim {
            params.fc2_w.grad.data[o * cdim + i] += g * cache.fc1_out.data[i];
            dfc1_out[i] += g * params.fc2_w.value.data[o * cdim + i];
        }
    }
    // fc1 + relu
    let mut dflat = vec![0.0f32; flat_n];
    for o in 0..cdim {
        let g = if cache.fc1_pre.data[o] > 0.0 { dfc1_out[o] } else { 0.0 };
        params.fc1_b.grad.data[o] += g;
        for i in 0..flat_n {
            params.fc1_w.grad.data[o * flat_n + i] += g * cache.pooled_time.data[i];
            dflat[i] += g * params.fc1_w.value.data[o * flat_n + i];
        }
    }
    // undo mean over time: broadcast /T
    let t = cache.t_frames;
    let pooled_rows = config.pooled_rows();
    let mut dh = Tensor::zeros(&[cdim, pooled_rows, t]);
    for ch in 0..cdim {
        for row in 0..pooled_rows {
            let g = dflat[ch * pooled_rows + row] / t as f32;
            for i in 0..t {
                dh.data[(ch * pooled_rows + row) * t + i] = g;
            }
        }
    }

    // walk conv stack backwards
    let mut pool_idx = cache.pool_args.len();
    for l in (0..config.n_conv).rev() {
        // backward through pool placed after layers 1 and 3
        if l == 1 || l == 3 {
            pool_idx -= 1;
            let (arg, in_shape) = &cache.pool_args[pool_idx];
            dh = maxpool_2x1_backward(arg, &dh, in_shape);
        }
        // relu (post-BN activations were bn_outputs[l] clamped at 0)
        let bn_out = &cache.bn_outputs[l];
        for (g, &v) in dh.data.iter_mut().zip(&bn_out.data) {
            if v <= 0.0 {
                *g = 0.0;
            }
        }
        let (dconv_out, dgamma, dbeta) = batch_norm_backward(&cache.bn_caches[l], &dh)?;
        let conv = &mut params.convs[l];
        for (a, b) in conv.bn_gamma.grad.data.iter_mut().zip(&dgamma.data) {
            *a += b;
        }
        for (a, b) in conv.bn_beta.grad.data.iter_mut().zip(&dbeta.data) {
            *a += b;
        }
        let (dx, dw, db) = conv2d_backward(&cache.conv_inputs[l], &conv.weight.value, &dconv_out);
        for (a, b) in conv.weight.grad.data.iter_mut().zip(&dw.data) {
            *a += b;
        }
        for (a, b) in conv.bias.grad.data.iter_mut().zip(&db.data) {
            *a += b;
        }
        dh = dx;
    }
    Ok(())
}

/// A trained classifier with its label set.
#[derive(Debug, Clone)]
pub struct ClassifierCheckpoint {
    pub config: ClassifierConfig,
    pub params: ClassifierParams,
    pub speakers: Vec<String>,
}

const CLS_MAGIC: &str = "REVO-CLS v1";

impl ClassifierCheckpoint {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut s = String::new();
        let _ = writeln!(s, "{CLS_MAGIC}");
        let _ = writeln!(s, "channels={}", self.config.channels);
        let _ = writeln!(s, "n_conv={}", self.config.n_conv);
        let _ = writeln!(s, "n_classes={}", self.config.n_classes);
        let _ = writeln!(s, "input_features={}", self.config.input_features);
        let _ = writeln!(s, "max_frames={}", self.config.max_frames);
        let _ = writeln!(s, "speakers={}", self.speakers.join("\t"));
        let _ = writeln!(s, "---");
        let mut entries: Vec<(String, Tensor)> = Vec::new();
        for (name, p) in self.params.named() {
            entries.push((name, p.value.clone()));
        }
        for (l, conv) in self.params.convs.iter().enumerate() {
            entries.push((format!("cls.conv{l}.bn_mean"), conv.bn_mean.clone()));
            entries.push((format!("cls.conv{l}.bn_var"), conv.bn_var.clone()));
        }
        let refs: Vec<(&str, &Tensor)> = entries.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let mut bytes = s.into_bytes();
        bytes.extend_from_slice(&archive::write_entries(&refs));
        crate::cli::write_atomic(path.as_ref(), &bytes)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let sep = b"\n---\n";
        let pos = bytes
            .windows(sep.len())
            .position(|w| w == sep)
            .ok_or_else(|| {
                Error::UnsupportedFormat(format!("{}: missing classifier header", path.display()))
            })?;
        let header = std::str::from_utf8(&bytes[..pos])
            .map_err(|_| Error::UnsupportedFormat(format!("{}: non-UTF8 header", path.display())))?;
        let mut lines = header.lines();
        if lines.next() != Some(CLS_MAGIC) {
            return Err(Error::VersionMismatch(format!(
                "{}: expected '{CLS_MAGIC}' header",
                path.display()
            )));
        }
        let mut map = BTreeMap::new();
        for line in lines {
            if let Some((k, v)) = line.split_once('=') {
                map.insert(k.to_string(), v.to_string());
            }
        }
        let origin = path.display().to_string();
        let num = |k: &str| -> Result<usize> {
            map.get(k)
                .ok_or_else(|| Error::UnsupportedFormat(format!("{origin}: missing '{k}'")))?
                .parse()
                .map_err(|_| Error::UnsupportedFormat(format!("{origin}: bad '{k}'")))
        };
        let config = ClassifierConfig {
            n_conv: num("n_conv")?,
            kernel: 3,
            channels: num("channels")?,
            n_fc: 2,
            n_classes: num("n_classes")?,
            input_features: num("input_features")?,
            max_frames: num("max_frames")?,
        };
        let speakers: Vec<String> = map
            .get("speakers")
            .map(|s| s.split('\t').map(|x| x.to_string()).collect())
            .unwrap_or_default();
        let entries = archive::read_entries(&bytes[pos + sep.len()..])?;
        let mut params = ClassifierParams::init(&config, 0);
        for (name, p) in params.named_mut() {
            p.value = archive::find_shaped(&entries, &name, &p.value.shape)?.clone();
            p.zero_grad();
        }
        for (l, conv) in params.convs.iter_mut().enumerate() {
            conv.bn_mean =
                archive::find_shaped(&entries, &format!("cls.conv{l}.bn_mean"), &[config.channels])?.clone();
            conv.bn_var =
                archive::find_shaped(&entries, &format!("cls.conv{l}.bn_var"), &[config.channels])?.clone();
        }
        Ok(ClassifierCheckpoint {
            config,
            params,
            speakers,
        })
    }
}

/// Train the speaker-ID CNN on the manifest's labeled utterances. One
/// utterance (randomly cropped to max_frames) per step, cross entropy on the
/// speaker label.
pub fn train_classifier(
    manifest: &Manifest,
    config: &ClassifierConfig,
    steps: usize,
    seed: u64,
    on_step: &mut dyn FnMut(u64, f64),
) -> Result<ClassifierCheckpoint> {
    let speakers = manifest.speakers();
    if speakers.len() < 2 {
        return Err(Error::TooFewSpeakers(format!(
            "classifier needs >= 2 speakers, manifest has {}",
            speakers.len()
        )));
    }
    if config.n_classes != speakers.len() {
        return Err(Error::ConfigMismatch(format!(
            "classifier config has {} classes, manifest {} speakers",
            config.n_classes,
            speakers.len()
        )));
    }
    // precompute features per utterance
    let mut data: Vec<(usize, Tensor)> = Vec::with_capacity(manifest.entries.len());
    for (name, path) in &manifest.entries {
        let w = crate::audio::read_wav(path)?;
        let grid = classifier_features(&w)
            .map_err(|e| Error::TooShort(format!("{}: {e}", path.display())))?;
        let label = speakers.iter().position(|s| s == name).unwrap();
        data.push((label, grid));
    }

    let mut params = ClassifierParams::init(config, seed);
    let hyper = Adam::with_lr(1e-3);
    let mut states: BTreeMap<String, AdamState> = params
        .named()
        .into_iter()
        .map(|(n, p)| (n, AdamState::new(p.value.numel())))
        .collect();
    let mut rng = Rng::seed_from_u64(seed);

    for step in 1..=steps as u64 {
        let (label, grid) = &data[rng.below(data.len())];
        // random crop along time
        let t = grid.shape[2];
        let crop = config.max_frames.min(t);
        let start = if t > crop { rng.below(t - crop + 1) } else { 0 };
        let rows = grid.shape[1];
        let mut window = Tensor::zeros(&[1, rows, crop]);
        for r in 0..rows {
            window.data[r * crop..(r + 1) * crop]
                .copy_from_slice(&grid.data[r * t + start..r * t + start + crop]);
        }

        for (_, p) in params.named_mut() {
            p.zero_grad();
        }
        let mut mode = BnMode::Train(&mut params);
        let (logits, cache) = classifier_forward(&window, config, &mut mode)?;
        let (loss, dlogits) = softmax_cross_entropy(&logits, &[*label])?;
        if !loss.is_finite() {
            return Err(Error::NonFinite("classifier training loss".into()));
        }
        classifier_backward(&dlogits, &cache.unwrap(), &mut params, config)?;
        for (name, p) in params.named_mut() {
            states.get_mut(&name).unwrap().step(&hyper, &mut p.value.data, &p.grad.data);
        }
        on_step(step, loss);
    }
    Ok(ClassifierCheckpoint {
        config: config.clone(),
        params,
        speakers,
    })
}

/// Predicted class distribution for one utterance (eval mode).
pub fn classify(ckpt: &ClassifierCheckpoint, w: &Waveform) -> Result<Vec<f32>> {
    let grid = classifier_features(w)?;
    let mut mode = BnMode::Eval(&ckpt.params);
    let (logits, _) = classifier_forward(&grid, &ckpt.config, &mut mode)?;
    let mut probs: Vec<f32> = logits.data.clone();
    crate::neural::softmax_in_place(&mut probs);
    Ok(probs)
}

/// Fraction of manifest utterances classified as their labeled speaker, as
/// a percentage.
pub fn identification_accuracy(ckpt: &ClassifierCheckpoint, manifest: &Manifest) -> Result<(f64, usize)> {
    if manifest.entries.is_empty() {
        return Err(Error::EmptyManifest("speaker-id evaluation manifest".into()));
    }
    for (name, _) in &manifest.entries {
        if !ckpt.speakers.iter().any(|s| s == name) {
            return Err(Error::UnknownSpeaker {
                name: name.clone(),
                available: ckpt.speakers.join(","),
            });
        }
    }
    let mut correct = 0usize;
    for (name, path) in &manifest.entries {
        let w = crate::audio::read_wav(path)?;
        let probs = classify(ckpt, &w)?;
        let pred = probs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        let label = ckpt.speakers.iter().position(|s| s == name).unwrap();
        if pred == label {
            correct += 1;
        }
    }
    let n = manifest.entries.len();
    Ok((correct as f64 / n as f64 * 100.0, n))
}

/// Stable digest of a waveform's samples; handy for determinism checks.
pub fn wave_digest(w: &Waveform) -> String {
    let mut h = sha2::Sha256::new();
    for &s in &w.samples {
        h.update(s.to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::gradcheck::{central_diff, vector_rel_error};

    fn cep(rows: &[&[f32]]) -> CepstraFrames {
        let order = rows[0].len();
        CepstraFrames {
            frames: rows.iter().flat_map(|r| r.iter().cloned()).collect(),
            order,
        }
    }

    #[test]
    fn identical_sequences_align_on_the_diagonal() {
        let a = cep(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]);
        let path = dtw_align(&a, &a).unwrap();
        assert_eq!(path.pairs, vec![(0, 0), (1, 1), (2, 2)]);
        assert_eq!(mcd_frames(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn path_endpoints_and_steps_are_valid() {
        let mut rng = Rng::seed_from_u64(3);
        for _ in 0..20 {
            let n = 1 + rng.below(10);
            let m = 1 + rng.below(10);
            let a = CepstraFrames {
                frames: (0..n * 3).map(|_| rng.uniform(-1.0, 1.0)).collect(),
                order: 3,
            };
            let b = CepstraFrames {
                frames: (0..m * 3).map(|_| rng.uniform(-1.0, 1.0)).collect(),
                order: 3,
            };
            let path = dtw_align(&a, &b).unwrap();
            assert_eq!(*path.pairs.first().unwrap(), (0, 0));
            assert_eq!(*path.pairs.last().unwrap(), (n - 1, m - 1));
            for w in path.pairs.windows(2) {
                let (di, dj) = (w[1].0 - w[0].0, w[1].1 - w[0].1);
                assert!(matches!((di, dj), (1, 0) | (0, 1) | (1, 1)));
            }
        }
    }

    /// Exhaustive enumeration of all monotone paths, the independent oracle
    /// for the DP.
    fn brute_force_cost(a: &CepstraFrames, b: &CepstraFrames) -> f64 {
        fn go(a: &CepstraFrames, b: &CepstraFrames, i: usize, j: usize) -> f64 {
            let here = frame_cost(a.row(i), b.row(j));
            if i == 0 && j == 0 {
                return here;
            }
            let mut best = f64::INFINITY;
            if i > 0 && j > 0 {
                best = best.min(go(a, b, i - 1, j - 1));
            }
            if i > 0 {
                best = best.min(go(a, b, i - 1, j));
            }
            if j > 0 {
                best = best.min(go(a, b, i, j - 1));
            }
            here + best
        }
        go(a, b, a.t_frames() - 1, b.t_frames() - 1)
    }

    #[test]
    fn dp_cost_matches_brute_force_up_to_len_8() {
        let mut rng = Rng::seed_from_u64(5);
        for n in 1..=8usize {
            for m in 1..=8usize {
                let a = CepstraFrames {
                    frames: (0..n * 2).map(|_| rng.uniform(-1.0, 1.0)).collect(),
                    order: 2,
                };
                let b = CepstraFrames {
                    frames: (0..m * 2).map(|_| rng.uniform(-1.0, 1.0)).collect(),
                    order: 2,
                };
                let path = dtw_align(&a, &b).unwrap();
                let dp_cost: f64 = path
                    .pairs
                    .iter()
                    .map(|&(i, j)| frame_cost(a.row(i), b.row(j)))
                    .sum();
                let brute = brute_force_cost(&a, &b);
                assert!(
                    (dp_cost - brute).abs() < 1e-9,
                    "n={n} m={m}: dp {dp_cost} vs brute {brute}"
                );
            }
        }
    }

    #[test]
    fn single_frame_closed_form() {
        let delta = 0.37f32;
        let a = cep(&[&[0.0; 13]]);
        let mut row = [0.0f32; 13];
        row[4] = delta;
        let b = cep(&[&row]);
        let expect = mcd_constant() * delta as f64;
        // sqrt(2 * delta^2) = sqrt(2) * |delta|; constant already carries sqrt(2)
        let got = mcd_frames(&a, &b).unwrap();
        assert!((got - expect).abs() < 1e-9, "{got} vs {expect}");
    }

    #[test]
    fn mcd_is_symmetric_on_random_pairs() {
        let mut rng = Rng::seed_from_u64(7);
        for _ in 0..10 {
            let n = 3 + rng.below(10);
            let m = 3 + rng.below(10);
            let a = CepstraFrames {
                frames: (0..n * 13).map(|_| rng.uniform(-2.0, 2.0)).collect(),
                order: 13,
            };
            let b = CepstraFrames {
                frames: (0..m * 13).map(|_| rng.uniform(-2.0, 2.0)).collect(),
                order: 13,
            };
            let ab = mcd_frames(&a, &b).unwrap();
            let ba = mcd_frames(&b, &a).unwrap();
            assert!((ab - ba).abs() < 1e-9, "{ab} vs {ba}");
            assert!(ab >= 0.0);
        }
    }

    #[test]
    fn mcd_self_is_zero_on_waveforms() {
        let w = crate::dsp::sine(180.0, 0.4, 4000);
        assert_eq!(mcd(&w, &w).unwrap(), 0.0);
        let r = mcd_report(&w, &w).unwrap();
        assert_eq!(r.mcd_db, 0.0);
        assert_eq!(r.frames_ref, r.frames_hyp);
        assert_eq!(r.path_len, r.frames_ref);
    }

    #[test]
    fn conv2d_and_pool_gradients_match_finite_differences() {
        let mut rng = Rng::seed_from_u64(11);
        let x = Tensor::uniform(&[2, 5, 7], 1.0, &mut rng);
        let w = Tensor::uniform(&[3, 2, 3, 3], 0.4, &mut rng);
        let b = Tensor::uniform(&[3], 0.2, &mut rng);
        let proj = Tensor::uniform(&[3, 5, 7], 1.0, &mut rng);
        let loss = |xv: &Tensor, wv: &Tensor, bv: &Tensor| -> f64 {
            conv2d(xv, wv, bv)
                .data
                .iter()
                .zip(&proj.data)
                .map(|(&a, &p)| a as f64 * p as f64)
                .sum()
        };
        let (dx, dw, db) = conv2d_backward(&x, &w, &proj);
        let fd_x = central_diff(&x.data, 1e-3, |d| loss(&Tensor::from_vec(&x.shape, d.to_vec()), &w, &b));
        let fd_w = central_diff(&w.data, 1e-3, |d| loss(&x, &Tensor::from_vec(&w.shape, d.to_vec()), &b));
        let fd_b = central_diff(&b.data, 1e-3, |d| loss(&x, &w, &Tensor::from_vec(&b.shape, d.to_vec())));
        assert!(vector_rel_error(&dx.data, &fd_x) < 1e-3);
        assert!(vector_rel_error(&dw.data, &fd_w) < 1e-3);
        assert!(vector_rel_error(&db.data, &fd_b) < 1e-3);

        // pool: forward picks maxima, backward routes to them
        let (pooled, arg) = maxpool_2x1(&x);
        assert_eq!(pooled.shape, vec![2, 2, 7]);
        let dy = Tensor::uniform(&[2, 2, 7], 1.0, &mut rng);
        let dxp = maxpool_2x1_backward(&arg, &dy, &x.shape);
        let fd = central_diff(&x.data, 1e-4, |d| {
            let (p, _) = maxpool_2x1(&Tensor::from_vec(&x.shape, d.to_vec()));
            p.data.iter().zip(&dy.data).map(|(&a, &g)| a as f64 * g as f64).sum()
        });
        assert!(vector_rel_error(&dxp.data, &fd) < 1e-2); // kinks at ties
    }

    #[test]
    fn classifier_features_shape() {
        let w = crate::dsp::sine(150.0, 0.4, 4000);
        let grid = classifier_features(&w).unwrap();
        assert_eq!(grid.shape[0], 1);
        assert_eq!(grid.shape[1], 15);
        assert_eq!(grid.shape[2], crate::dsp::frame_count(4000, 320, 160));
        // voiced flag row is 0/1
        let t = grid.shape[2];
        for tt in 0..t {
            let v = grid.data[14 * t + tt];
            assert!(v == 0.0 || v == 1.0);
        }
    }

    #[test]
    fn classifier_distribution_sums_to_one() {
        let config = ClassifierConfig::toy(3);
        let params = ClassifierParams::init(&config, 3);
        let ckpt = ClassifierCheckpoint {
            config,
            params,
            speakers: vec!["a".into(), "b".into(), "c".into()],
        };
        let w = crate::dsp::sine(200.0, 0.4, 4000);
        let probs = classify(&ckpt, &w).unwrap();
        let s: f64 = probs.iter().map(|&p| p as f64).sum();
        assert!((s - 1.0).abs() < 1e-6);
    }
}
