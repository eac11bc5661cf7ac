//! The conditioned autoregressive waveform decoder.
//!
//! A stack of gated, dilated causal convolutions over the mu-law class
//! sequence, conditioned at every layer (and at the final fully connected
//! stage) on upsampled latents, a broadcast speaker embedding, and optional
//! pitch channels. Produces next-sample logits over 256 classes.
//!
//! Conditioning columns repeat in long runs (nearest-neighbor upsampling),
//! so per-layer conditioning projections are computed once per run of
//! identical columns and broadcast. This changes no arithmetic: equal inputs
//! give bitwise-equal projections.

use crate::audio::QuantizedWave;
use crate::dsp::{normalized_log_f0, F0Contour};
use crate::encoder::LatentSeq;
use crate::error::{Error, Result};
use crate::neural::{
    conv1d, conv1d_backward, dense, dense_backward, embedding_backward, embedding_lookup,
    ops::{axpy, dot, sigmoid, Padding},
    Parameter, Rng, Tensor,
};

/// Mu-law class of the zero sample; the first autoregressive input.
pub const START_INDEX: usize = 128;
pub const N_CLASSES: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderConfig {
    pub n_blocks: usize,
    pub layers_per_block: usize,
    pub kernel_size: usize,
    /// Dilation schedule within one block, repeated per block.
    pub dilations: Vec<usize>,
    pub residual_channels: usize,
    pub skip_channels: usize,
    pub n_classes: usize,
    pub latent_channels: usize,
    pub speaker_dim: usize,
    pub use_f0: bool,
    pub upsample_latent: usize,
    pub upsample_f0: usize,
    /// Skip-sum term projected straight from the embedded input signal.
    pub wav_skip: bool,
    /// Conditioning added to the last fully connected stage.
    pub fc_cond: bool,
}

impl DecoderConfig {
    /// Full-scale preset: 4 blocks of 10 layers, dilations 1..512, kernel 2,
    /// 128 residual channels. Receptive field 4093 samples.
    pub fn paper(latent_channels: usize, use_f0: bool) -> Self {
        DecoderConfig {
            n_blocks: 4,
            layers_per_block: 10,
            kernel_size: 2,
            dilations: (0..10).map(|i| 1 << i).collect(),
            residual_channels: 128,
            skip_channels: 128,
            n_classes: N_CLASSES,
            latent_channels,
            speaker_dim: 64,
            use_f0,
            upsample_latent: 320,
            upsample_f0: 160,
            wav_skip: true,
            fc_cond: true,
        }
    }

    /// Desk-scale preset: 2 blocks of 5 layers, 32 residual channels. The
    /// dilations are spread (1..256) so the receptive field still covers a
    /// few pitch periods.
    pub fn toy(latent_channels: usize, use_f0: bool) -> Self {
        DecoderConfig {
            n_blocks: 2,
            layers_per_block: 5,
            kernel_size: 2,
            dilations: vec![1, 4, 16, 64, 256],
            residual_channels: 32,
            skip_channels: 32,
            n_classes: N_CLASSES,
            latent_channels,
            speaker_dim: 64,
            use_f0,
            upsample_latent: 320,
            upsample_f0: 160,
            wav_skip: true,
            fc_cond: true,
        }
    }

    pub fn n_layers(&self) -> usize {
        self.n_blocks * self.layers_per_block
    }

    pub fn layer_dilation(&self, layer: usize) -> usize {
        self.dilations[layer % self.layers_per_block]
    }

    /// Latent + speaker (+2 pitch channels when enabled).
    pub fn cond_channels(&self) -> usize {
        self.latent_channels + self.speaker_dim + if self.use_f0 { 2 } else { 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dilations.len() != self.layers_per_block {
            return Err(Error::ConfigMismatch(format!(
                "decoder: {} dilations for {} layers per block",
                self.dilations.len(),
                self.layers_per_block
            )));
        }
        if self.kernel_size < 2 {
            return Err(Error::ConfigMismatch(
                "decoder: kernel size must be >= 2".into(),
            ));
        }
        if self.n_classes != N_CLASSES {
            return Err(Error::ConfigMismatch(format!(
                "decoder: {} classes, the mu-law alphabet has {N_CLASSES}",
                self.n_classes
            )));
        }
        Ok(())
    }
}

/// Number of past positions (input included) that one output can see.
pub fn receptive_field(config: &DecoderConfig) -> usize {
    let per_block: usize = config.dilations.iter().sum();
    1 + (config.kernel_size - 1) * config.n_blocks * per_block
}

/// The learned speaker lookup table.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerTable {
    /// [k, d_spk]
    pub embeddings: Tensor,
    pub names: Vec<String>,
}

impl SpeakerTable {
    pub fn new(names: Vec<String>, dim: usize, seed: u64) -> Result<Self> {
        let mut uniq = std::collections::BTreeSet::new();
        for n in &names {
            if !uniq.insert(n.clone()) {
                return Err(Error::DuplicateSpeaker(n.clone()));
            }
        }
        let mut rng = Rng::seed_from_u64(seed);
        let embeddings = Tensor::uniform(&[names.len(), dim], 0.1, &mut rng);
        Ok(SpeakerTable { embeddings, names })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.shape[1]
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::UnknownSpeaker {
                name: name.to_string(),
                available: self.names.join(","),
            })
    }

    pub fn row(&self, index: usize) -> &[f32] {
        let d = self.dim();
        &self.embeddings.data[index * d..(index + 1) * d]
    }

    pub fn row_mut(&mut self, index: usize) -> &mut [f32] {
        let d = self.dim();
        &mut self.embeddings.data[index * d..(index + 1) * d]
    }

    /// Append a new speaker initialized to the exact mean of the existing
    /// rows (64-bit accumulation, rounded once).
    pub fn add_speaker_mean(&mut self, name: &str) -> Result<usize> {
        if self.names.iter().any(|n| n == name) {
            return Err(Error::DuplicateSpeaker(name.to_string()));
        }
        if self.is_empty() {
            return Err(Error::EmptyInput("speaker table has no rows to average".into()));
        }
        let (k, d) = (self.len(), self.dim());
        let mut mean = vec![0.0f64; d];
        for r in 0..k {
            for (m, &v) in mean.iter_mut().zip(self.row(r)) {
                *m += v as f64;
            }
        }
        self.embeddings.data.extend(mean.iter().map(|&s| (s / k as f64) as f32));
        self.embeddings.shape[0] = k + 1;
        self.names.push(name.to_string());
        Ok(k)
    }
}

/// Fetch one speaker's embedding row by name.
pub fn speaker_lookup<'a>(table: &'a SpeakerTable, name: &str) -> Result<&'a [f32]> {
    let idx = table.index_of(name)?;
    Ok(table.row(idx))
}

/// Audio-rate conditioning matrix [cond_channels, T_audio].
#[derive(Debug, Clone, PartialEq)]
pub struct ConditioningSeq {
    pub channels: Tensor,
}

impl ConditioningSeq {
    pub fn cond_channels(&self) -> usize {
        self.channels.shape[0]
    }

    pub fn len(&self) -> usize {
        self.channels.shape[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Copy column t into a contiguous scratch buffer.
    pub fn column_into(&self, t: usize, out: &mut [f32]) {
        let (c, len) = (self.cond_channels(), self.len());
        debug_assert_eq!(out.len(), c);
        for (ch, o) in out.iter_mut().enumerate() {
            *o = self.channels.data[ch * len + t];
        }
    }

    /// Runs of bitwise-identical consecutive columns as (start, len) pairs.
    pub fn runs(&self) -> Vec<(usize, usize)> {
        let (c, t) = (self.cond_channels(), self.len());
        let mut runs = Vec::new();
        if t == 0 {
            return runs;
        }
        let mut start = 0usize;
        for col in 1..t {
            let mut same = true;
            for ch in 0..c {
                if self.channels.data[ch * t + col].to_bits()
                    != self.channels.data[ch * t + col - 1].to_bits()
                {
                    same = false;
                    break;
                }
            }
            if !same {
                runs.push((start, col - start));
                start = col;
            }
        }
        runs.push((start, t - start));
        runs
    }
}

/// Upsample latents x320 by repetition, broadcast the speaker vector, and
/// (optionally) append voiced-flag and normalized log-F0 channels upsampled
/// x160. Channel order: [latent, speaker, f0]. Trimmed or right-zero-padded
/// to `target_len`.
pub fn build_conditioning(
    latent: &LatentSeq,
    speaker: &[f32],
    f0: Option<&F0Contour>,
    target_len: usize,
    config: &DecoderConfig,
) -> Result<ConditioningSeq> {
    if latent.channels() != config.latent_channels {
        return Err(Error::ShapeMismatch(format!(
            "conditioning: latent has {} channels, config says {}",
            latent.channels(),
            config.latent_channels
        )));
    }
    if speaker.len() != config.speaker_dim {
        return Err(Error::ShapeMismatch(format!(
            "conditioning: speaker vector dim {}, config says {}",
            speaker.len(),
            config.speaker_dim
        )));
    }
    if config.use_f0 && f0.is_none() {
        return Err(Error::MissingF0(
            "decoder was configured with pitch conditioning".into(),
        ));
    }
    let c_total = config.cond_channels();
    let t_lat = latent.len();
    let mut out = Tensor::zeros(&[c_total, target_len]);

    // latent rows, each latent column repeated upsample_latent times
    for ch in 0..config.latent_channels {
        let src = &latent.features.data[ch * t_lat..(ch + 1) * t_lat];
        let dst = &mut out.data[ch * target_len..(ch + 1) * target_len];
        for (t, d) in dst.iter_mut().enumerate() {
            let idx = t / config.upsample_latent;
            if idx < t_lat {
                *d = src[idx];
            }
        }
    }
    // speaker rows, broadcast to every timestep
    for (i, &v) in speaker.iter().enumerate() {
        let ch = config.latent_channels + i;
        out.data[ch * target_len..(ch + 1) * target_len].fill(v);
    }
    // pitch rows: voiced flag and normalized log-f0
    if config.use_f0 {
        let f0 = f0.unwrap();
        let voiced_ch = config.latent_channels + config.speaker_dim;
        for t in 0..target_len {
            let idx = t / config.upsample_f0;
            if idx < f0.len() {
                let hz = f0.values_hz[idx];
                if hz > 0.0 {
                    out.data[voiced_ch * target_len + t] = 1.0;
                    out.data[(voiced_ch + 1) * target_len + t] = normalized_log_f0(hz);
                }
            }
        }
    }
    Ok(ConditioningSeq { channels: out })
}

/// One residual layer: fused filter+gate dilated conv, per-layer conditioning
/// projection, residual and skip 1x1s. Rows 0..R of the fused tensors are the
/// filter half, rows R..2R the gate half.
#[derive(Debug, Clone)]
pub struct DecoderLayer {
    pub conv_w: Parameter,
    pub conv_b: Parameter,
    pub cond_w: Parameter,
    pub cond_b: Parameter,
    pub res_w: Parameter,
    pub res_b: Parameter,
    pub skip_w: Parameter,
    pub skip_b: Parameter,
}

#[derive(Debug, Clone)]
pub struct DecoderParams {
    pub embed: Parameter,
    pub layers: Vec<DecoderLayer>,
    pub wavskip_w: Parameter,
    pub wavskip_b: Parameter,
    pub fc1_w: Parameter,
    pub fc1_b: Parameter,
    pub fccond_w: Parameter,
    pub fccond_b: Parameter,
    pub fc2_w: Parameter,
    pub fc2_b: Parameter,
}

impl DecoderParams {
    pub fn init(config: &DecoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::seed_from_u64(seed);
        let r = config.residual_channels;
        let s = config.skip_channels;
        let c = config.cond_channels();
        let k = config.kernel_size;
        let u = |shape: &[usize], fan_in: usize, rng: &mut Rng| {
            Parameter::new(Tensor::uniform(shape, (1.0 / fan_in as f32).sqrt(), rng))
        };
        let zeros = |shape: &[usize]| Parameter::new(Tensor::zeros(shape));

        let embed = Parameter::new(Tensor::uniform(&[config.n_classes, r], 0.5, &mut rng));
        let mut layers = Vec::with_capacity(config.n_layers());
        for _ in 0..config.n_layers() {
            layers.push(DecoderLayer {
                conv_w: u(&[2 * r, r, k], r * k, &mut rng),
                conv_b: zeros(&[2 * r]),
                cond_w: u(&[2 * r, c], c, &mut rng),
                cond_b: zeros(&[2 * r]),
                res_w: u(&[r, r], r, &mut rng),
                res_b: zeros(&[r]),
                skip_w: u(&[s, r], r, &mut rng),
                skip_b: zeros(&[s]),
            });
        }
        Ok(DecoderParams {
            embed,
            layers,
            wavskip_w: u(&[s, r], r, &mut rng),
            wavskip_b: zeros(&[s]),
            fc1_w: u(&[s, s], s, &mut rng),
            fc1_b: zeros(&[s]),
            fccond_w: u(&[s, c], c, &mut rng),
            fccond_b: zeros(&[s]),
            fc2_w: u(&[config.n_classes, s], s, &mut rng),
            fc2_b: zeros(&[config.n_classes]),
        })
    }

    pub fn named(&self) -> Vec<(String, &Parameter)> {
        let mut out: Vec<(String, &Parameter)> = vec![("dec.embed".into(), &self.embed)];
        for (l, layer) in self.layers.iter().enumerate() {
            out.push((format!("dec.layer{l}.conv.weight"), &layer.conv_w));
            out.push((format!("dec.layer{l}.conv.bias"), &layer.conv_b));
            out.push((format!("dec.layer{l}.cond.weight"), &layer.cond_w));
            out.push((format!("dec.layer{l}.cond.bias"), &layer.cond_b));
            out.push((format!("dec.layer{l}.res.weight"), &layer.res_w));
            out.push((format!("dec.layer{l}.res.bias"), &layer.res_b));
            out.push((format!("dec.layer{l}.skip.weight"), &layer.skip_w));
            out.push((format!("dec.layer{l}.skip.bias"), &layer.skip_b));
        }
        out.push(("dec.wavskip.weight".into(), &self.wavskip_w));
        out.push(("dec.wavskip.bias".into(), &self.wavskip_b));
        out.push(("dec.fc1.weight".into(), &self.fc1_w));
        out.push(("dec.fc1.bias".into(), &self.fc1_b));
        out.push(("dec.fccond.weight".into(), &self.fccond_w));
        out.push(("dec.fccond.bias".into(), &self.fccond_b));
        out.push(("dec.fc2.weight".into(), &self.fc2_w));
        out.push(("dec.fc2.bias".into(), &self.fc2_b));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Parameter)> {
        let mut out: Vec<(String, &mut Parameter)> = vec![("dec.embed".into(), &mut self.embed)];
        for (l, layer) in self.layers.iter_mut().enumerate() {
            out.push((format!("dec.layer{l}.conv.weight"), &mut layer.conv_w));
            out.push((format!("dec.layer{l}.conv.bias"), &mut layer.conv_b));
            out.push((format!("dec.layer{l}.cond.weight"), &mut layer.cond_w));
            out.push((format!("dec.layer{l}.cond.bias"), &mut layer.cond_b));
            out.push((format!("dec.layer{l}.res.weight"), &mut layer.res_w));
            out.push((format!("dec.layer{l}.res.bias"), &mut layer.res_b));
            out.push((format!("dec.layer{l}.skip.weight"), &mut layer.skip_w));
            out.push((format!("dec.layer{l}.skip.bias"), &mut layer.skip_b));
        }
        out.push(("dec.wavskip.weight".into(), &mut self.wavskip_w));
        out.push(("dec.wavskip.bias".into(), &mut self.wavskip_b));
        out.push(("dec.fc1.weight".into(), &mut self.fc1_w));
        out.push(("dec.fc1.bias".into(), &mut self.fc1_b));
        out.push(("dec.fccond.weight".into(), &mut self.fccond_w));
        out.push(("dec.fccond.bias".into(), &mut self.fccond_b));
        out.push(("dec.fc2.weight".into(), &mut self.fc2_w));
        out.push(("dec.fc2.bias".into(), &mut self.fc2_b));
        out
    }

    pub fn zero_grads(&mut self) {
        for (_, p) in self.named_mut() {
            p.zero_grad();
        }
    }

    pub fn validate_against(&self, config: &DecoderConfig) -> Result<()> {
        config.validate()?;
        let r = config.residual_channels;
        let s = config.skip_channels;
        let c = config.cond_channels();
        let k = config.kernel_size;
        if self.layers.len() != config.n_layers() {
            return Err(Error::ShapeMismatch(format!(
                "decoder params: {} layers, config says {}",
                self.layers.len(),
                config.n_layers()
            )));
        }
        let expect = |name: &str, t: &Tensor, shape: &[usize]| -> Result<()> {
            if t.shape != shape {
                return Err(Error::ShapeMismatch(format!(
                    "decoder params: {name} has shape {:?}, expected {:?}",
                    t.shape, shape
                )));
            }
            Ok(())
        };
        expect("embed", &self.embed.value, &[config.n_classes, r])?;
        for (l, layer) in self.layers.iter().enumerate() {
            expect(&format!("layer{l}.conv.weight"), &layer.conv_w.value, &[2 * r, r, k])?;
            expect(&format!("layer{l}.cond.weight"), &layer.cond_w.value, &[2 * r, c])?;
            expect(&format!("layer{l}.res.weight"), &layer.res_w.value, &[r, r])?;
            expect(&format!("layer{l}.skip.weight"), &layer.skip_w.value, &[s, r])?;
        }
        expect("fc2.weight", &self.fc2_w.value, &[config.n_classes, s])?;
        expect("fccond.weight", &self.fccond_w.value, &[s, c])?;
        Ok(())
    }
}

/// Everything the backward pass needs from a teacher-forced forward.
pub struct DecoderCache {
    shifted_ids: Vec<usize>,
    h0: Tensor,
    layer_inputs: Vec<Tensor>,
    pre: Vec<Tensor>,
    z: Vec<Tensor>,
    skip_sum: Tensor,
    relu_skip: Tensor,
    f_pre: Tensor,
    g: Tensor,
    cond_runs: Vec<(usize, usize)>,
}

/// pre[rows, run] += cond_w * cond[:, run_start] + cond_b, computed once per
/// run of identical columns.
fn add_cond_projection(
    pre: &mut Tensor,
    cond_w: &Tensor,
    cond_b: &Tensor,
    cond: &ConditioningSeq,
    runs: &[(usize, usize)],
    col_scratch: &mut [f32],
) {
    let rows = cond_w.shape[0];
    let c = cond_w.shape[1];
    let t = pre.shape[1];
    let mut proj = vec![0.0f32; rows];
    for &(start, len) in runs {
        cond.column_into(start, col_scratch);
        for (row, p) in proj.iter_mut().enumerate() {
            *p = dot(&cond_w.data[row * c..(row + 1) * c], col_scratch) + cond_b.data[row];
        }
        for (row, &p) in proj.iter().enumerate() {
            for v in &mut pre.data[row * t + start..row * t + start + len] {
                *v += p;
            }
        }
    }
}

/// Gradients of a run-projected conditioning stage. Accumulates dW and db
/// into the parameter grads and returns w^T * rowsum(dpre), the total
/// gradient each conditioning channel receives (summed over time) -- the
/// speaker rows of this vector are the speaker-embedding gradient.
fn cond_projection_backward(
    dpre: &Tensor,
    cond: &ConditioningSeq,
    runs: &[(usize, usize)],
    cond_w: &mut Parameter,
    cond_b: &mut Parameter,
    col_scratch: &mut [f32],
) -> Vec<f32> {
    let rows = cond_w.value.shape[0];
    let c = cond_w.value.shape[1];
    let t = dpre.shape[1];
    let mut rowsum_all = vec![0.0f32; rows];
    let mut rowsum_run = vec![0.0f32; rows];
    for &(start, len) in runs {
        cond.column_into(start, col_scratch);
        for (row, s) in rowsum_run.iter_mut().enumerate() {
            let seg = &dpre.data[row * t + start..row * t + start + len];
            *s = seg.iter().map(|&v| v as f64).sum::<f64>() as f32;
        }
        for row in 0..rows {
            axpy(
                &mut cond_w.grad.data[row * c..(row + 1) * c],
                rowsum_run[row],
                col_scratch,
            );
            rowsum_all[row] += rowsum_run[row];
        }
    }
    for (row, &s) in rowsum_all.iter().enumerate() {
        cond_b.grad.data[row] += s;
    }
    // w^T * rowsum_all
    let mut dcond_sum = vec![0.0f32; c];
    for (row, &s) in rowsum_all.iter().enumerate() {
        axpy(&mut dcond_sum, s, &cond_w.value.data[row * c..(row + 1) * c]);
    }
    dcond_sum
}

/// Gated activation over the fused pre-activation tensor: rows 0..R filter,
/// rows R..2R gate. Output [R, T].
fn gated_from_fused(pre: &Tensor) -> Tensor {
    let r = pre.shape[0] / 2;
    let t = pre.shape[1];
    let mut z = Tensor::zeros(&[r, t]);
    for row in 0..r {
        let f = &pre.data[row * t..(row + 1) * t];
        let g = &pre.data[(r + row) * t..(r + row + 1) * t];
        let o = &mut z.data[row * t..(row + 1) * t];
        for i in 0..t {
            o[i] = f[i].tanh() * sigmoid(g[i]);
        }
    }
    z
}

fn gated_from_fused_backward(pre: &Tensor, dz: &Tensor) -> Tensor {
    let r = dz.shape[0];
    let t = dz.shape[1];
    let mut dpre = Tensor::zeros(&[2 * r, t]);
    for row in 0..r {
        let f = &pre.data[row * t..(row + 1) * t];
        let g = &pre.data[(r + row) * t..(r + row + 1) * t];
        let d = &dz.data[row * t..(row + 1) * t];
        for i in 0..t {
            let th = f[i].tanh();
            let sg = sigmoid(g[i]);
            dpre.data[row * t + i] = d[i] * sg * (1.0 - th * th);
            dpre.data[(r + row) * t + i] = d[i] * th * sg * (1.0 - sg);
        }
    }
    dpre
}

fn relu(x: &Tensor) -> Tensor {
    let data = x.data.iter().map(|&v| v.max(0.0)).collect();
    Tensor {
        shape: x.shape.clone(),
        data,
    }
}

fn relu_backward(x: &Tensor, dy: &Tensor) -> Tensor {
    let data = x
        .data
        .iter()
        .zip(&dy.data)
        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
        .collect();
    Tensor {
        shape: x.shape.clone(),
        data,
    }
}

/// Teacher-forced forward pass. `logits[:, t]` is the distribution over
/// `x[t]` given `x[0..t-1]` and the conditioning up to t; the input sequence
/// is shifted right by one with the zero-sample class at position 0.
pub fn decoder_forward(
    x: &QuantizedWave,
    cond: &ConditioningSeq,
    params: &DecoderParams,
    config: &DecoderConfig,
    want_cache: bool,
) -> Result<(Tensor, Option<DecoderCache>)> {
    params.validate_against(config)?;
    let t = x.indices.len();
    if cond.len() != t {
        return Err(Error::ShapeMismatch(format!(
            "decoder: {} input samples vs {} conditioning columns",
            t,
            cond.len()
        )));
    }
    if cond.cond_channels() != config.cond_channels() {
        return Err(Error::ShapeMismatch(format!(
            "decoder: conditioning has {} channels, config says {}",
            cond.cond_channels(),
            config.cond_channels()
        )));
    }
    let mut shifted = Vec::with_capacity(t);
    shifted.push(START_INDEX);
    shifted.extend(x.indices[..t - 1].iter().map(|&i| i as usize));

    let h0 = embedding_lookup(&params.embed.value, &shifted)?;
    let runs = cond.runs();
    let s_ch = config.skip_channels;
    let mut col_scratch = vec![0.0f32; config.cond_channels()];

    let mut skip_sum = Tensor::zeros(&[s_ch, t]);
    let mut h = h0.clone();
    let mut layer_inputs = Vec::new();
    let mut pres = Vec::new();
    let mut zs = Vec::new();

    for (l, layer) in params.layers.iter().enumerate() {
        let dilation = config.layer_dilation(l);
        let mut pre = conv1d(
            &h,
            &layer.conv_w.value,
            Some(&layer.conv_b.value),
            1,
            dilation,
            Padding::Causal,
        )?;
        add_cond_projection(
            &mut pre,
            &layer.cond_w.value,
            &layer.cond_b.value,
            cond,
            &runs,
            &mut col_scratch,
        );
        let z = gated_from_fused(&pre);
        let sk = dense(&layer.skip_w.value, Some(&layer.skip_b.value), &z)?;
        for (o, v) in skip_sum.data.iter_mut().zip(&sk.data) {
            *o += v;
        }
        let res = dense(&layer.res_w.value, Some(&layer.res_b.value), &z)?;
        let mut h_next = h.clone();
        for (o, v) in h_next.data.iter_mut().zip(&res.data) {
            *o += v;
        }
        if want_cache {
            layer_inputs.push(h);
            pres.push(pre);
            zs.push(z);
        }
        h = h_next;
    }

    if config.wav_skip {
        let ws = dense(&params.wavskip_w.value, Some(&params.wavskip_b.value), &h0)?;
        for (o, v) in skip_sum.data.iter_mut().zip(&ws.data) {
            *o += v;
        }
    }
    let relu_skip = relu(&skip_sum);
    let mut f_pre = dense(&params.fc1_w.value, Some(&params.fc1_b.value), &relu_skip)?;
    if config.fc_cond {
        add_cond_projection(
            &mut f_pre,
            &params.fccond_w.value,
            &params.fccond_b.value,
            cond,
            &runs,
            &mut col_scratch,
        );
    }
    let g = relu(&f_pre);
    let logits = dense(&params.fc2_w.value, Some(&params.fc2_b.value), &g)?;

    let cache = if want_cache {
        Some(DecoderCache {
            shifted_ids: shifted,
            h0,
            layer_inputs,
            pre: pres,
            z: zs,
            skip_sum,
            relu_skip,
            f_pre,
            g,
            cond_runs: runs,
        })
    } else {
        None
    };
    Ok((logits, cache))
}

/// Teacher-forced next-sample logits [256, T].
pub fn teacher_forced_logits(
    x: &QuantizedWave,
    cond: &ConditioningSeq,
    params: &DecoderParams,
    config: &DecoderConfig,
) -> Result<Tensor> {
    Ok(decoder_forward(x, cond, params, config, false)?.0)
}

/// Reverse pass for the teacher-forced decoder. Accumulates parameter
/// gradients in place and returns the conditioning gradient summed over
/// time, one entry per conditioning channel. The speaker-embedding gradient
/// is the slice [latent_channels, latent_channels + speaker_dim).
pub fn decoder_backward(
    dlogits: &Tensor,
    cache: &DecoderCache,
    cond: &ConditioningSeq,
    params: &mut DecoderParams,
    config: &DecoderConfig,
) -> Result<Vec<f32>> {
    let mut col_scratch = vec![0.0f32; config.cond_channels()];
    let mut dcond_sum = vec![0.0f32; config.cond_channels()];

    // final stack: logits = fc2(relu(fc1(relu(skip)) + fccond(cond)))
    let (dg, dfc2_w, dfc2_b) = dense_backward(&params.fc2_w.value, &cache.g, dlogits)?;
    acc(&mut params.fc2_w.grad, &dfc2_w);
    acc(&mut params.fc2_b.grad, &dfc2_b);
    let df_pre = relu_backward(&cache.f_pre, &dg);
    if config.fc_cond {
        let d = cond_projection_backward(
            &df_pre,
            cond,
            &cache.cond_runs,
            &mut params.fccond_w,
            &mut params.fccond_b,
            &mut col_scratch,
        );
        for (a, b) in dcond_sum.iter_mut().zip(&d) {
            *a += b;
        }
    }
    let (drelu_skip, dfc1_w, dfc1_b) = dense_backward(&params.fc1_w.value, &cache.relu_skip, &df_pre)?;
    acc(&mut params.fc1_w.grad, &dfc1_w);
    acc(&mut params.fc1_b.grad, &dfc1_b);
    let dskip_sum = relu_backward(&cache.skip_sum, &drelu_skip);

    // wav-derived skip term
    let mut dh0 = Tensor::zeros(&cache.h0.shape);
    if config.wav_skip {
        let (dh0_ws, dws_w, dws_b) = dense_backward(&params.wavskip_w.value, &cache.h0, &dskip_sum)?;
        acc(&mut params.wavskip_w.grad, &dws_w);
        acc(&mut params.wavskip_b.grad, &dws_b);
        acc(&mut dh0, &dh0_ws);
    }

    // walk the residual stack backwards; dh is dL/d(layer l output)
    let mut dh = Tensor::zeros(&cache.h0.shape);
    for l in (0..params.layers.len()).rev() {
        let dilation = config.layer_dilation(l);
        let layer = &mut params.layers[l];

        let (dz_skip, dskip_w, dskip_b) = dense_backward(&layer.skip_w.value, &cache.z[l], &dskip_sum)?;
        acc(&mut layer.skip_w.grad, &dskip_w);
        acc(&mut layer.skip_b.grad, &dskip_b);

        let (dz_res, dres_w, dres_b) = dense_backward(&layer.res_w.value, &cache.z[l], &dh)?;
        acc(&mut layer.res_w.grad, &dres_w);
        acc(&mut layer.res_b.grad, &dres_b);

        let mut dz = dz_skip;
        acc(&mut dz, &dz_res);
        let dpre = gated_from_fused_backward(&cache.pre[l], &dz);

        let d = cond_projection_backward(
            &dpre,
            cond,
            &cache.cond_runs,
            &mut layer.cond_w,
            &mut layer.cond_b,
            &mut col_scratch,
        );
        for (a, b) in dcond_sum.iter_mut().zip(&d) {
            *a += b;
        }

        let (dh_conv, dconv_w, dconv_b) = conv1d_backward(
            &cache.layer_inputs[l],
            &layer.conv_w.value,
            1,
            dilation,
            Padding::Causal,
            &dpre,
        )?;
        acc(&mut layer.conv_w.grad, &dconv_w);
        acc(&mut layer.conv_b.grad, &dconv_b);
        // identity residual path keeps dh; the conv path adds to it
        acc(&mut dh, &dh_conv);
    }
    acc(&mut dh0, &dh);
    let dembed = embedding_backward(&dh0, &cache.shifted_ids, config.n_classes)?;
    acc(&mut params.embed.grad, &dembed);
    Ok(dcond_sum)
}

fn acc(into: &mut Tensor, from: &Tensor) {
    debug_assert_eq!(into.shape, from.shape);
    for (a, b) in into.data.iter_mut().zip(&from.data) {
        *a += b;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::{gradcheck, softmax_cross_entropy, softmax_in_place};

    fn toy_fd_config() -> DecoderConfig {
        // tiny shapes for exhaustive finite-difference checks
        DecoderConfig {
            n_blocks: 1,
            layers_per_block: 3,
            kernel_size: 2,
            dilations: vec![1, 2, 4],
            residual_channels: 8,
            skip_channels: 8,
            n_classes: N_CLASSES,
            latent_channels: 4,
            speaker_dim: 4,
            use_f0: false,
            upsample_latent: 8,
            upsample_f0: 4,
            wav_skip: true,
            fc_cond: true,
        }
    }

    fn random_wave(t: usize, seed: u64) -> QuantizedWave {
        let mut rng = Rng::seed_from_u64(seed);
        QuantizedWave {
            indices: (0..t).map(|_| rng.below(256) as u8).collect(),
        }
    }

    fn random_cond(config: &DecoderConfig, t: usize, seed: u64) -> ConditioningSeq {
        let mut rng = Rng::seed_from_u64(seed);
        let lat_cols = t.div_ceil(config.upsample_latent);
        let latent = LatentSeq {
            features: Tensor::uniform(&[config.latent_channels, lat_cols], 1.0, &mut rng),
        };
        let speaker: Vec<f32> = (0..config.speaker_dim).map(|_| rng.uniform(-0.5, 0.5)).collect();
        build_conditioning(&latent, &speaker, None, t, config).unwrap()
    }

    #[test]
    fn receptive_field_values() {
        let paper = DecoderConfig::paper(64, false);
        assert_eq!(receptive_field(&paper), 4093);

        let mut one = toy_fd_config();
        one.n_blocks = 1;
        one.layers_per_block = 1;
        one.dilations = vec![1];
        assert_eq!(receptive_field(&one), 2);

        let mut two = toy_fd_config();
        two.n_blocks = 2;
        two.layers_per_block = 3;
        two.dilations = vec![1, 2, 4];
        assert_eq!(receptive_field(&two), 15);
    }

    #[test]
    fn conditioning_shapes_and_zero_case() {
        let config = DecoderConfig::toy(64, true);
        let latent = LatentSeq {
            features: Tensor::zeros(&[64, 50]),
        };
        let f0 = F0Contour {
            values_hz: vec![0.0; 100],
            hop_samples: 160,
        };
        let cond = build_conditioning(&latent, &vec![0.0; 64], Some(&f0), 16000, &config).unwrap();
        assert_eq!(cond.len(), 16000);
        assert_eq!(cond.cond_channels(), 64 + 64 + 2);
        assert!(cond.channels.data.iter().all(|&v| v == 0.0));

        // f0 required when configured
        assert!(matches!(
            build_conditioning(&latent, &vec![0.0; 64], None, 100, &config),
            Err(Error::MissingF0(_))
        ));
    }

    #[test]
    fn speaker_vectors_differ_only_in_speaker_rows() {
        let config = DecoderConfig::toy(8, false);
        let mut cfg = config.clone();
        cfg.latent_channels = 8;
        let mut rng = Rng::seed_from_u64(5);
        let latent = LatentSeq {
            features: Tensor::uniform(&[8, 3], 1.0, &mut rng),
        };
        let va: Vec<f32> = (0..64).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let vb: Vec<f32> = (0..64).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let ca = build_conditioning(&latent, &va, None, 960, &cfg).unwrap();
        let cb = build_conditioning(&latent, &vb, None, 960, &cfg).unwrap();
        let t = ca.len();
        for ch in 0..ca.cond_channels() {
            let differs = (0..t).any(|i| ca.channels.data[ch * t + i] != cb.channels.data[ch * t + i]);
            let is_speaker_row = (8..8 + 64).contains(&ch);
            assert_eq!(differs, is_speaker_row && va[ch - 8] != vb[ch - 8], "channel {ch}");
        }
    }

    #[test]
    fn conditioning_runs_cover_sequence() {
        let config = DecoderConfig::toy(4, false);
        let mut cfg = config;
        cfg.latent_channels = 4;
        let mut rng = Rng::seed_from_u64(6);
        let latent = LatentSeq {
            features: Tensor::uniform(&[4, 5], 1.0, &mut rng),
        };
        let v: Vec<f32> = (0..64).map(|_| rng.uniform(-1.0, 1.0)).collect();
        // 5*320 = 1600, pad to 1700
        let cond = build_conditioning(&latent, &v, None, 1700, &cfg).unwrap();
        let runs = cond.runs();
        let total: usize = runs.iter().map(|r| r.1).sum();
        assert_eq!(total, 1700);
        assert_eq!(runs.len(), 6); // 5 latent repeats + zero pad
        assert!(runs.iter().all(|&(_, len)| len == 320 || len == 100));
    }

    #[test]
    fn speaker_table_lookup_and_mean_append() {
        let mut table = SpeakerTable::new(vec!["alice".into(), "bob".into()], 2, 1).unwrap();
        table.embeddings = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        assert_eq!(speaker_lookup(&table, "bob").unwrap(), &[0.0, 1.0]);
        match speaker_lookup(&table, "carol") {
            Err(Error::UnknownSpeaker { name, available }) => {
                assert_eq!(name, "carol");
                assert!(available.contains("alice") && available.contains("bob"));
            }
            other => panic!("expected UnknownSpeaker, got {other:?}"),
        }

        let idx = table.add_speaker_mean("carol").unwrap();
        assert_eq!(idx, 2);
        assert_eq!(table.row(2), &[0.5, 0.5]);
        assert!(matches!(
            table.add_speaker_mean("carol"),
            Err(Error::DuplicateSpeaker(_))
        ));

        // mean of a single row is that row
        let mut single = SpeakerTable::new(vec!["solo".into()], 3, 2).unwrap();
        let row0: Vec<f32> = single.row(0).to_vec();
        single.add_speaker_mean("dup").unwrap();
        assert_eq!(single.row(1), row0.as_slice());
    }

    #[test]
    fn strict_causality_of_logits() {
        let config = toy_fd_config();
        let params = DecoderParams::init(&config, 3).unwrap();
        let t = 48;
        let x = random_wave(t, 7);
        let cond = random_cond(&config, t, 8);
        let base = teacher_forced_logits(&x, &cond, &params, &config).unwrap();

        let flip = 20;
        let mut x2 = x.clone();
        x2.indices[flip] = x2.indices[flip].wrapping_add(13);
        let changed = teacher_forced_logits(&x2, &cond, &params, &config).unwrap();
        for tt in 0..t {
            let col_equal = (0..N_CLASSES).all(|c| base.data[c * t + tt] == changed.data[c * t + tt]);
            if tt <= flip {
                assert!(col_equal, "position {tt} changed but only saw x[..{tt}]");
            }
        }
        // the very next position must see it
        let col_equal = (0..N_CLASSES).all(|c| base.data[c * t + flip + 1] == changed.data[c * t + flip + 1]);
        assert!(!col_equal, "position {} blind to x[{flip}]", flip + 1);
    }

    #[test]
    fn receptive_field_probe_exact() {
        let config = toy_fd_config(); // rf = 1 + 1*(1+2+4) = 8
        let rf = receptive_field(&config);
        assert_eq!(rf, 8);
        let params = DecoderParams::init(&config, 9).unwrap();
        let t = 40;
        let x = random_wave(t, 10);
        let cond = random_cond(&config, t, 11);
        let base = teacher_forced_logits(&x, &cond, &params, &config).unwrap();
        let probe = 30usize;

        // logits[:, probe] sees x[probe - rf .. probe - 1]: the shift by one
        // plus a conv stack spanning rf positions
        let oldest_visible = probe - rf;
        let first_hidden = probe - rf - 1;
        for (pos, expect_change) in [(oldest_visible, true), (first_hidden, false)] {
            let mut x2 = x.clone();
            x2.indices[pos] = x2.indices[pos].wrapping_add(41);
            let out = teacher_forced_logits(&x2, &cond, &params, &config).unwrap();
            let changed = (0..N_CLASSES).any(|c| out.data[c * t + probe] != base.data[c * t + probe]);
            assert_eq!(changed, expect_change, "perturb at {pos}, probe {probe}");
        }
    }

    #[test]
    fn zero_params_give_uniform_distribution() {
        let config = toy_fd_config();
        let mut params = DecoderParams::init(&config, 1).unwrap();
        for (_, p) in params.named_mut() {
            p.value.data.fill(0.0);
        }
        let t: usize = 12;
        let x = random_wave(t, 2);
        let cond = random_cond(&config, t, 3);
        let logits = teacher_forced_logits(&x, &cond, &params, &config).unwrap();
        assert!(logits.data.iter().all(|&v| v == 0.0));
        let mut col = vec![0.0f32; N_CLASSES];
        softmax_in_place(&mut col);
        assert!(col.iter().all(|&p| (p - 1.0 / 256.0).abs() < 1e-9));
    }

    #[test]
    fn softmax_of_logit_columns_sums_to_one() {
        let config = toy_fd_config();
        let params = DecoderParams::init(&config, 21).unwrap();
        let t = 16;
        let x = random_wave(t, 22);
        let cond = random_cond(&config, t, 23);
        let logits = teacher_forced_logits(&x, &cond, &params, &config).unwrap();
        for tt in 0..t {
            let mut col: Vec<f32> = (0..N_CLASSES).map(|c| logits.data[c * t + tt]).collect();
            softmax_in_place(&mut col);
            let s: f64 = col.iter().map(|&v| v as f64).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let config = toy_fd_config();
        let params = DecoderParams::init(&config, 31).unwrap();
        let x = random_wave(32, 32);
        let cond = random_cond(&config, 32, 33);
        let a = teacher_forced_logits(&x, &cond, &params, &config).unwrap();
        let b = teacher_forced_logits(&x, &cond, &params, &config).unwrap();
        for (x, y) in a.data.iter().zip(&b.data) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    /// Fast sanity pass over every parameter tensor against f32 finite
    /// differences. The f32 forward puts the noise floor of this comparison
    /// near 1e-3, so the bound here is coarse; the tight 1e-3 check against
    /// an f64 reference forward runs in the acceptance suite.
    #[test]
    fn decoder_gradients_track_finite_differences() {
        let config = toy_fd_config();
        let t = 16;
        let x = random_wave(t, 41);
        let targets: Vec<usize> = x.indices.iter().map(|&i| i as usize).collect();
        let mut rng = Rng::seed_from_u64(42);
        let latent = LatentSeq {
            features: Tensor::uniform(&[config.latent_channels, t.div_ceil(config.upsample_latent)], 2.0, &mut rng),
        };
        let speaker: Vec<f32> = (0..config.speaker_dim).map(|_| rng.uniform(-1.5, 1.5)).collect();

        let loss_with = |params: &DecoderParams, spk: &[f32]| -> f64 {
            let cond = build_conditioning(&latent, spk, None, t, &config).unwrap();
            let logits = teacher_forced_logits(&x, &cond, params, &config).unwrap();
            softmax_cross_entropy(&logits, &targets).unwrap().0
        };

        let mut params = DecoderParams::init(&config, 43).unwrap();
        let cond = build_conditioning(&latent, &speaker, None, t, &config).unwrap();
        let (logits, cache) = decoder_forward(&x, &cond, &params, &config, true).unwrap();
        let (_, dlogits) = softmax_cross_entropy(&logits, &targets).unwrap();
        let dcond = decoder_backward(&dlogits, &cache.unwrap(), &cond, &mut params, &config).unwrap();

        let reference = params.clone();
        let names: Vec<String> = reference.named().iter().map(|(n, _)| n.clone()).collect();
        for name in names {
            let (analytic, theta) = {
                let named = reference.named();
                let (_, p) = named.iter().find(|(n, _)| *n == name).unwrap();
                (p.grad.data.clone(), p.value.data.clone())
            };
            let fd = gradcheck::central_diff(&theta, 1e-3, |v| {
                let mut probe = reference.clone();
                {
                    let mut named = probe.named_mut();
                    let (_, p) = named.iter_mut().find(|(n, _)| *n == name).unwrap();
                    p.value.data.copy_from_slice(v);
                }
                loss_with(&probe, &speaker)
            });
            let rel = gradcheck::vector_rel_error(&analytic, &fd);
            assert!(rel < 1e-2, "{name}: rel error {rel}");
        }

        let analytic_spk =
            &dcond[config.latent_channels..config.latent_channels + config.speaker_dim];
        let fd_spk = gradcheck::central_diff(&speaker, 1e-3, |v| loss_with(&reference, v));
        let rel = gradcheck::vector_rel_error(analytic_spk, &fd_spk);
        assert!(rel < 1e-2, "speaker embedding: rel error {rel}");
    }
}


