//! The frozen feature encoder: a TDNN of 1-D convolutional blocks mapping
//! log-mel frames to a half-rate latent sequence.
//!
//! The encoder is inference-only by contract: batch norm runs in eval mode,
//! dropout is disabled, and no gradient ever flows into it. Weights arrive
//! through `load_encoder`; `init_random_encoder` is the deterministic test
//! fallback.

use crate::dsp::MelFrames;
use crate::error::{Error, Result};
use crate::neural::{
    archive, batch_norm_eval, clipped_relu, conv1d, dense, ops::Padding, Rng, Tensor,
};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

pub const RELU_CAP: f32 = 20.0;

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub n_mels: usize,
    pub downsample_stride: usize,
    pub n_blocks: usize,
    pub layers_per_block: usize,
    /// Output channels per block.
    pub channels: Vec<usize>,
    /// Kernel size per block; the downsampling layer uses the first entry.
    pub kernel_sizes: Vec<usize>,
    pub dropout_rate: f32,
    /// Which block's output is tapped as the latent sequence (1-based).
    pub output_block: usize,
}

impl EncoderConfig {
    /// Desk-scale preset: 7 blocks x 5 layers of 64 channels.
    pub fn toy() -> Self {
        EncoderConfig {
            n_mels: 64,
            downsample_stride: 2,
            n_blocks: 7,
            layers_per_block: 5,
            channels: vec![64; 7],
            kernel_sizes: vec![5; 7],
            dropout_rate: 0.0,
            output_block: 7,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.len() != self.n_blocks || self.kernel_sizes.len() != self.n_blocks {
            return Err(Error::ConfigMismatch(format!(
                "encoder: {} blocks but {} channel and {} kernel entries",
                self.n_blocks,
                self.channels.len(),
                self.kernel_sizes.len()
            )));
        }
        if self.output_block == 0 || self.output_block > self.n_blocks {
            return Err(Error::ConfigMismatch(format!(
                "encoder: output_block {} out of 1..={}",
                self.output_block, self.n_blocks
            )));
        }
        if self.kernel_sizes.iter().any(|&k| k % 2 == 0) {
            return Err(Error::ConfigMismatch(
                "encoder: kernel sizes must be odd for symmetric same padding".into(),
            ));
        }
        Ok(())
    }

    /// Channel count of the tapped latent sequence.
    pub fn latent_channels(&self) -> usize {
        self.channels[self.output_block - 1]
    }

    /// Input channels of block b (0-based).
    fn block_in_channels(&self, b: usize) -> usize {
        if b == 0 {
            self.channels[0]
        } else {
            self.channels[b - 1]
        }
    }
}

/// Speaker-agnostic feature sequence E(s): [C_lat, T_lat] at half the mel
/// frame rate (50 Hz).
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSeq {
    pub features: Tensor,
}

impl LatentSeq {
    pub fn channels(&self) -> usize {
        self.features.shape[0]
    }

    pub fn len(&self) -> usize {
        self.features.shape[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One conv + batch-norm layer of a block. Frozen, so plain tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBnLayer {
    pub weight: Tensor,
    pub bias: Tensor,
    pub bn_gamma: Tensor,
    pub bn_beta: Tensor,
    pub bn_mean: Tensor,
    pub bn_var: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub down_weight: Tensor,
    pub down_bias: Tensor,
    pub blocks: Vec<Vec<ConvBnLayer>>,
    /// Residual 1x1 projection (weight, bias) per block.
    pub projs: Vec<(Tensor, Tensor)>,
}

/// Run the frozen encoder: strided downsampling conv, then convolutional
/// blocks with a projected residual connection around each block. The
/// latent is the configured block's output.
pub fn encode(mel: &MelFrames, params: &EncoderParams, config: &EncoderConfig) -> Result<LatentSeq> {
    config.validate()?;
    if mel.n_mels != config.n_mels {
        return Err(Error::ConfigMismatch(format!(
            "encoder expects {} mel bins, input has {}",
            config.n_mels, mel.n_mels
        )));
    }
    let x = mel.to_tensor();
    let mut h = conv1d(
        &x,
        &params.down_weight,
        Some(&params.down_bias),
        config.downsample_stride,
        1,
        Padding::Same,
    )?;
    for b in 0..config.output_block {
        let block_input = h.clone();
        for layer in &params.blocks[b] {
            let c = conv1d(&h, &layer.weight, Some(&layer.bias), 1, 1, Padding::Same)?;
            let n = batch_norm_eval(&c, &layer.bn_gamma, &layer.bn_beta, &layer.bn_mean, &layer.bn_var)?;
            h = clipped_relu(&n, RELU_CAP);
            // dropout is identity in eval mode
        }
        let (pw, pb) = &params.projs[b];
        let proj = dense(pw, Some(pb), &block_input)?;
        if proj.shape != h.shape {
            return Err(Error::ShapeMismatch(format!(
                "encoder block {b}: residual projection {:?} vs block output {:?}",
                proj.shape, h.shape
            )));
        }
        for (o, p) in h.data.iter_mut().zip(&proj.data) {
            *o += p;
        }
    }
    h.check_finite("encoder latent")?;
    Ok(LatentSeq { features: h })
}

/// Deterministic uniform fan-in initialization. Batch-norm stats start at
/// mean 0, var 1; biases at zero.
pub fn init_random_encoder(config: &EncoderConfig, seed: u64) -> Result<EncoderParams> {
    config.validate()?;
    let mut rng = Rng::seed_from_u64(seed);
    let k0 = config.kernel_sizes[0];
    let down_fan_in = config.n_mels * k0;
    let down_weight = Tensor::uniform(
        &[config.channels[0], config.n_mels, k0],
        (1.0 / down_fan_in as f32).sqrt(),
        &mut rng,
    );
    let down_bias = Tensor::zeros(&[config.channels[0]]);

    let mut blocks = Vec::with_capacity(config.n_blocks);
    let mut projs = Vec::with_capacity(config.n_blocks);
    for b in 0..config.n_blocks {
        let c_out = config.channels[b];
        let k = config.kernel_sizes[b];
        let mut layers = Vec::with_capacity(config.layers_per_block);
        for j in 0..config.layers_per_block {
            let c_in = if j == 0 { config.block_in_channels(b) } else { c_out };
            let bound = (1.0 / (c_in * k) as f32).sqrt();
            layers.push(ConvBnLayer {
                weight: Tensor::uniform(&[c_out, c_in, k], bound, &mut rng),
                bias: Tensor::zeros(&[c_out]),
                bn_gamma: Tensor::full(&[c_out], 1.0),
                bn_beta: Tensor::zeros(&[c_out]),
                bn_mean: Tensor::zeros(&[c_out]),
                bn_var: Tensor::full(&[c_out], 1.0),
            });
        }
        blocks.push(layers);
        let c_in = config.block_in_channels(b);
        let bound = (1.0 / c_in as f32).sqrt();
        projs.push((
            Tensor::uniform(&[c_out, c_in], bound, &mut rng),
            Tensor::zeros(&[c_out]),
        ));
    }
    Ok(EncoderParams {
        down_weight,
        down_bias,
        blocks,
        projs,
    })
}

fn config_text(config: &EncoderConfig) -> String {
    let join = |v: &[usize]| {
        v.iter()
            .map(|x| x.to_string())
            .collect::<Vec<_>>()
            .join(",")
    };
    let mut s = String::new();
    let _ = writeln!(s, "n_mels={}", config.n_mels);
    let _ = writeln!(s, "downsample_stride={}", config.downsample_stride);
    let _ = writeln!(s, "n_blocks={}", config.n_blocks);
    let _ = writeln!(s, "layers_per_block={}", config.layers_per_block);
    let _ = writeln!(s, "channels={}", join(&config.channels));
    let _ = writeln!(s, "kernel_sizes={}", join(&config.kernel_sizes));
    let _ = writeln!(s, "dropout_rate={}", config.dropout_rate);
    let _ = writeln!(s, "output_block={}", config.output_block);
    s
}

fn parse_config_text(text: &str, origin: &str) -> Result<EncoderConfig> {
    let mut map = std::collections::BTreeMap::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::UnsupportedFormat(format!("{origin}: bad config line '{line}'"))
        })?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    let get = |k: &str| -> Result<&String> {
        map.get(k)
            .ok_or_else(|| Error::UnsupportedFormat(format!("{origin}: missing config key '{k}'")))
    };
    let usize_of = |k: &str| -> Result<usize> {
        get(k)?
            .parse()
            .map_err(|_| Error::UnsupportedFormat(format!("{origin}: bad value for '{k}'")))
    };
    let list_of = |k: &str| -> Result<Vec<usize>> {
        get(k)?
            .split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| Error::UnsupportedFormat(format!("{origin}: bad value for '{k}'")))
            })
            .collect()
    };
    let config = EncoderConfig {
        n_mels: usize_of("n_mels")?,
        downsample_stride: usize_of("downsample_stride")?,
        n_blocks: usize_of("n_blocks")?,
        layers_per_block: usize_of("layers_per_block")?,
        channels: list_of("channels")?,
        kernel_sizes: list_of("kernel_sizes")?,
        dropout_rate: get("dropout_rate")?
            .parse()
            .map_err(|_| Error::UnsupportedFormat(format!("{origin}: bad value for 'dropout_rate'")))?,
        output_block: usize_of("output_block")?,
    };
    config.validate()?;
    Ok(config)
}

fn config_path(archive_path: &Path) -> std::path::PathBuf {
    let mut p = archive_path.as_os_str().to_owned();
    p.push(".cfg");
    std::path::PathBuf::from(p)
}

/// Flatten params to named tensors: enc.down.*, enc.block{i}.layer{j}.*,
/// enc.proj{i}.* (0-based indices).
pub fn named_tensors(params: &EncoderParams) -> Vec<(String, &Tensor)> {
    let mut out: Vec<(String, &Tensor)> = vec![
        ("enc.down.weight".into(), &params.down_weight),
        ("enc.down.bias".into(), &params.down_bias),
    ];
    for (i, block) in params.blocks.iter().enumerate() {
        for (j, layer) in block.iter().enumerate() {
            let base = format!("enc.block{i}.layer{j}");
            out.push((format!("{base}.weight"), &layer.weight));
            out.push((format!("{base}.bias"), &layer.bias));
            out.push((format!("{base}.bn_gamma"), &layer.bn_gamma));
            out.push((format!("{base}.bn_beta"), &layer.bn_beta));
            out.push((format!("{base}.bn_mean"), &layer.bn_mean));
            out.push((format!("{base}.bn_var"), &layer.bn_var));
        }
    }
    for (i, (w, b)) in params.projs.iter().enumerate() {
        out.push((format!("enc.proj{i}.weight"), w));
        out.push((format!("enc.proj{i}.bias"), b));
    }
    out
}

/// Write the archive plus the adjacent `<path>.cfg` text config.
pub fn save_encoder(path: impl AsRef<Path>, config: &EncoderConfig, params: &EncoderParams) -> Result<()> {
    let path = path.as_ref();
    let named = named_tensors(params);
    let refs: Vec<(&str, &Tensor)> = named.iter().map(|(n, t)| (n.as_str(), *t)).collect();
    let bytes = archive::write_entries(&refs);
    fs::write(path, &bytes).map_err(|e| Error::io(path.display().to_string(), e))?;
    let cfg = config_path(path);
    fs::write(&cfg, config_text(config)).map_err(|e| Error::io(cfg.display().to_string(), e))?;
    Ok(())
}

/// Load and shape-check an encoder checkpoint (archive + adjacent config).
pub fn load_encoder(path: impl AsRef<Path>) -> Result<(EncoderConfig, EncoderParams)> {
    let path = path.as_ref();
    let cfg_path = config_path(path);
    let cfg_text = fs::read_to_string(&cfg_path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::NotFound(cfg_path.display().to_string())
        } else {
            Error::io(cfg_path.display().to_string(), e)
        }
    })?;
    let config = parse_config_text(&cfg_text, &cfg_path.display().to_string())?;

    let bytes = fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::NotFound(path.display().to_string())
        } else {
            Error::io(path.display().to_string(), e)
        }
    })?;
    let entries = archive::read_entries(&bytes)?;

    let k0 = config.kernel_sizes[0];
    let down_weight = archive::find_shaped(
        &entries,
        "enc.down.weight",
        &[config.channels[0], config.n_mels, k0],
    )?
    .clone();
    let down_bias = archive::find_shaped(&entries, "enc.down.bias", &[config.channels[0]])?.clone();

    let mut blocks = Vec::with_capacity(config.n_blocks);
    for b in 0..config.n_blocks {
        let c_out = config.channels[b];
        let k = config.kernel_sizes[b];
        let mut layers = Vec::with_capacity(config.layers_per_block);
        for j in 0..config.layers_per_block {
            let c_in = if j == 0 { config.block_in_channels(b) } else { c_out };
            let base = format!("enc.block{b}.layer{j}");
            layers.push(ConvBnLayer {
                weight: archive::find_shaped(&entries, &format!("{base}.weight"), &[c_out, c_in, k])?.clone(),
                bias: archive::find_shaped(&entries, &format!("{base}.bias"), &[c_out])?.clone(),
                bn_gamma: archive::find_shaped(&entries, &format!("{base}.bn_gamma"), &[c_out])?.clone(),
                bn_beta: archive::find_shaped(&entries, &format!("{base}.bn_beta"), &[c_out])?.clone(),
                bn_mean: archive::find_shaped(&entries, &format!("{base}.bn_mean"), &[c_out])?.clone(),
                bn_var: archive::find_shaped(&entries, &format!("{base}.bn_var"), &[c_out])?.clone(),
            });
        }
        blocks.push(layers);
    }
    let mut projs = Vec::with_capacity(config.n_blocks);
    for b in 0..config.n_blocks {
        let c_in = config.block_in_channels(b);
        let c_out = config.channels[b];
        projs.push((
            archive::find_shaped(&entries, &format!("enc.proj{b}.weight"), &[c_out, c_in])?.clone(),
            archive::find_shaped(&entries, &format!("enc.proj{b}.bias"), &[c_out])?.clone(),
        ));
    }
    Ok((
        config,
        EncoderParams {
            down_weight,
            down_bias,
            blocks,
            projs,
        },
    ))
}

/// Analytic influence interval: which latent positions a given mel frame can
/// reach, computed from the layer geometry (parity-exact). Returns an
/// inclusive [lo, hi] in latent coordinates.
pub fn influence_interval(config: &EncoderConfig, t_mel: usize, t_mel_len: usize) -> (usize, usize) {
    // one layer maps an influenced input interval [lo, hi] to the outputs
    // o with o*stride - pad_left <= hi and o*stride - pad_left + k - 1 >= lo
    fn through_layer(lo: usize, hi: usize, t_in: usize, k: usize, stride: usize) -> (usize, usize, usize) {
        let t_out = t_in.div_ceil(stride);
        let span = (t_out - 1) * stride + k;
        let pad_left = span.saturating_sub(t_in) / 2;
        let o_lo = (lo + pad_left).saturating_sub(k - 1).div_ceil(stride);
        let o_hi = ((hi + pad_left) / stride).min(t_out - 1);
        (o_lo.min(t_out - 1), o_hi, t_out)
    }

    let k0 = config.kernel_sizes[0];
    let (mut lo, mut hi, mut t_len) =
        through_layer(t_mel, t_mel, t_mel_len, k0, config.downsample_stride);
    for b in 0..config.output_block {
        let k = config.kernel_sizes[b];
        for _ in 0..config.layers_per_block {
            let (l, h, t) = through_layer(lo, hi, t_len, k, 1);
            lo = l;
            hi = h;
            t_len = t;
        }
        // residual 1x1 projection adds no reach
    }
    (lo, hi)
}
