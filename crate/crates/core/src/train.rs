//! Training, new-speaker fitting, and end-to-end conversion.
//!
//! Each step samples one (speaker, crop) uniformly over manifest entries and
//! valid crop positions, extracts features on the crop, runs the frozen
//! encoder, and optimizes the decoder parameters plus that speaker's
//! embedding row under teacher-forced cross entropy over all crop positions.
//! The speaker table is updated row-wise so untouched rows stay bitwise
//! identical.

use crate::audio::{read_wav, QuantizedWave, Waveform};
use crate::decoder::{
    build_conditioning, decoder_backward, decoder_forward, DecoderConfig, DecoderParams,
    SpeakerTable,
};
use crate::dsp::{estimate_f0, log_mel, F0Contour};
use crate::encoder::{encode, load_encoder, EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::infer::generate;
use crate::neural::{archive, softmax_cross_entropy, Adam, AdamState, Rng, RowAdamState, Tensor};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

pub const SPEAKER_DIM: usize = 64;

/// Training corpus: (speaker_name, wav_path) pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub entries: Vec<(String, PathBuf)>,
}

impl Manifest {
    /// One `speaker<TAB>path` entry per line; `#` lines are comments.
    /// Relative paths are resolved against `base_dir`.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (name, path) = line.split_once('\t').ok_or_else(|| {
                Error::UnsupportedFormat(format!(
                    "manifest line {}: expected speaker<TAB>path",
                    lineno + 1
                ))
            })?;
            let name = name.trim();
            if name.is_empty() {
                return Err(Error::UnsupportedFormat(format!(
                    "manifest line {}: empty speaker name",
                    lineno + 1
                )));
            }
            let p = PathBuf::from(path.trim());
            let p = if p.is_absolute() { p } else { base_dir.join(p) };
            entries.push((name.to_string(), p));
        }
        Ok(Manifest { entries })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::NotFound(path.display().to_string())
            } else {
                Error::io(path.display().to_string(), e)
            }
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    /// Unique speaker names in order of first appearance.
    pub fn speakers(&self) -> Vec<String> {
        let mut seen = std::collections::BTreeSet::new();
        let mut out = Vec::new();
        for (name, _) in &self.entries {
            if seen.insert(name.clone()) {
                out.push(name.clone());
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Toy,
    Paper,
}

impl Preset {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "toy" => Ok(Preset::Toy),
            "paper" => Ok(Preset::Paper),
            other => Err(Error::UnsupportedFormat(format!(
                "unknown preset '{other}', expected toy or paper"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Preset::Toy => "toy",
            Preset::Paper => "paper",
        }
    }

    pub fn decoder_config(&self, latent_channels: usize, use_f0: bool) -> DecoderConfig {
        match self {
            Preset::Toy => DecoderConfig::toy(latent_channels, use_f0),
            Preset::Paper => DecoderConfig::paper(latent_channels, use_f0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub crop_samples: usize,
    pub lr: f32,
    pub seed: u64,
    pub use_f0: bool,
    pub preset: Preset,
    /// Save every N steps when a checkpoint path is given (0 = only at end).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 1000,
            batch_size: 1,
            crop_samples: 8192,
            lr: 1e-3,
            seed: 0,
            use_f0: false,
            preset: Preset::Toy,
            checkpoint_every: 0,
        }
    }
}

/// Optimizer state for the decoder tensors plus the row-wise speaker table.
#[derive(Debug, Clone)]
pub struct OptState {
    pub hyper: Adam,
    pub tensors: BTreeMap<String, AdamState>,
    pub table: RowAdamState,
}

impl OptState {
    fn new(params: &DecoderParams, table: &SpeakerTable, lr: f32) -> Self {
        let mut tensors = BTreeMap::new();
        for (name, p) in params.named() {
            tensors.insert(name, AdamState::new(p.value.numel()));
        }
        OptState {
            hyper: Adam::with_lr(lr),
            tensors,
            table: RowAdamState::new(table.len(), table.dim()),
        }
    }
}

/// Full training state: everything needed to resume fitting and to convert.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub decoder: DecoderParams,
    pub speakers: SpeakerTable,
    pub decoder_config: DecoderConfig,
    pub train_config: TrainConfig,
    pub opt: OptState,
    pub step: u64,
    pub encoder_path: String,
    pub encoder_hash: String,
}

pub fn hash_file(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut h = Sha256::new();
    h.update(&bytes);
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

const CKPT_MAGIC: &str = "REVO-CKPT v1";

impl Checkpoint {
    fn header_text(&self) -> String {
        let c = &self.decoder_config;
        let t = &self.train_config;
        let mut s = String::new();
        let _ = writeln!(s, "{CKPT_MAGIC}");
        let _ = writeln!(s, "step={}", self.step);
        let _ = writeln!(s, "encoder_path={}", self.encoder_path);
        let _ = writeln!(s, "encoder_hash={}", self.encoder_hash);
        let _ = writeln!(s, "speakers={}", self.speakers.names.join("\t"));
        let _ = writeln!(s, "dec.n_blocks={}", c.n_blocks);
        let _ = writeln!(s, "dec.layers_per_block={}", c.layers_per_block);
        let _ = writeln!(s, "dec.kernel_size={}", c.kernel_size);
        let dil: Vec<String> = c.dilations.iter().map(|d| d.to_string()).collect();
        let _ = writeln!(s, "dec.dilations={}", dil.join(","));
        let _ = writeln!(s, "dec.residual_channels={}", c.residual_channels);
        let _ = writeln!(s, "dec.skip_channels={}", c.skip_channels);
        let _ = writeln!(s, "dec.latent_channels={}", c.latent_channels);
        let _ = writeln!(s, "dec.speaker_dim={}", c.speaker_dim);
        let _ = writeln!(s, "dec.use_f0={}", u8::from(c.use_f0));
        let _ = writeln!(s, "dec.upsample_latent={}", c.upsample_latent);
        let _ = writeln!(s, "dec.upsample_f0={}", c.upsample_f0);
        let _ = writeln!(s, "dec.wav_skip={}", u8::from(c.wav_skip));
        let _ = writeln!(s, "dec.fc_cond={}", u8::from(c.fc_cond));
        let _ = writeln!(s, "train.steps={}", t.steps);
        let _ = writeln!(s, "train.batch_size={}", t.batch_size);
        let _ = writeln!(s, "train.crop_samples={}", t.crop_samples);
        let _ = writeln!(s, "train.lr={}", t.lr);
        let _ = writeln!(s, "train.seed={}", t.seed);
        let _ = writeln!(s, "train.preset={}", t.preset.name());
        let _ = writeln!(s, "train.checkpoint_every={}", t.checkpoint_every);
        let _ = writeln!(s, "---");
        s
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut entries: Vec<(String, Tensor)> = Vec::new();
        for (name, p) in self.decoder.named() {
            entries.push((name.clone(), p.value.clone()));
            let st = &self.opt.tensors[&name];
            entries.push((format!("opt.m.{name}"), Tensor::from_vec(&[st.m.len()], st.m.clone())));
            entries.push((format!("opt.v.{name}"), Tensor::from_vec(&[st.v.len()], st.v.clone())));
            entries.push((format!("opt.t.{name}"), Tensor::from_vec(&[1], vec![st.step_count as f32])));
        }
        entries.push(("spk.table".into(), self.speakers.embeddings.clone()));
        let tb = &self.opt.table;
        entries.push(("opt.m.spk.table".into(), Tensor::from_vec(&[tb.m.len()], tb.m.clone())));
        entries.push(("opt.v.spk.table".into(), Tensor::from_vec(&[tb.v.len()], tb.v.clone())));
        entries.push((
            "opt.rowsteps.spk.table".into(),
            Tensor::from_vec(&[tb.row_steps.len()], tb.row_steps.iter().map(|&x| x as f32).collect()),
        ));
        let refs: Vec<(&str, &Tensor)> = entries.iter().map(|(n, t)| (n.as_str(), t)).collect();

        let mut bytes = self.header_text().into_bytes();
        bytes.extend_from_slice(&archive::write_entries(&refs));
        crate::cli::write_atomic(path, &bytes)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::NotFound(path.display().to_string())
            } else {
                Error::io(path.display().to_string(), e)
            }
        })?;
        let sep = b"\n---\n";
        let pos = bytes
            .windows(sep.len())
            .position(|w| w == sep)
            .ok_or_else(|| {
                Error::UnsupportedFormat(format!("{}: missing checkpoint header", path.display()))
            })?;
        let header = std::str::from_utf8(&bytes[..pos + 1])
            .map_err(|_| Error::UnsupportedFormat(format!("{}: non-UTF8 header", path.display())))?;
        let payload = &bytes[pos + sep.len()..];

        let mut lines = header.lines();
        let magic = lines.next().unwrap_or("");
        if magic != CKPT_MAGIC {
            return Err(Error::VersionMismatch(format!(
                "{}: header '{magic}', expected '{CKPT_MAGIC}'",
                path.display()
            )));
        }
        let mut map: BTreeMap<String, String> = BTreeMap::new();
        for line in lines {
            if let Some((k, v)) = line.split_once('=') {
                map.insert(k.to_string(), v.to_string());
            }
        }
        let origin = path.display().to_string();
        let get = |k: &str| -> Result<&String> {
            map.get(k)
                .ok_or_else(|| Error::UnsupportedFormat(format!("{origin}: missing key '{k}'")))
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::UnsupportedFormat(format!("{origin}: bad value for '{k}'")))
        };
        let flag = |k: &str| -> Result<bool> { Ok(num(k)? != 0) };

        let decoder_config = DecoderConfig {
            n_blocks: num("dec.n_blocks")?,
            layers_per_block: num("dec.layers_per_block")?,
            kernel_size: num("dec.kernel_size")?,
            dilations: get("dec.dilations")?
                .split(',')
                .map(|s| {
                    s.trim().parse().map_err(|_| {
                        Error::UnsupportedFormat(format!("{origin}: bad dilation list"))
                    })
                })
                .collect::<Result<Vec<usize>>>()?,
            residual_channels: num("dec.residual_channels")?,
            skip_channels: num("dec.skip_channels")?,
            n_classes: crate::decoder::N_CLASSES,
            latent_channels: num("dec.latent_channels")?,
            speaker_dim: num("dec.speaker_dim")?,
            use_f0: flag("dec.use_f0")?,
            upsample_latent: num("dec.upsample_latent")?,
            upsample_f0: num("dec.upsample_f0")?,
            wav_skip: flag("dec.wav_skip")?,
            fc_cond: flag("dec.fc_cond")?,
        };
        let train_config = TrainConfig {
            steps: num("train.steps")?,
            batch_size: num("train.batch_size")?,
            crop_samples: num("train.crop_samples")?,
            lr: get("train.lr")?
                .parse()
                .map_err(|_| Error::UnsupportedFormat(format!("{origin}: bad train.lr")))?,
            seed: get("train.seed")?
                .parse()
                .map_err(|_| Error::UnsupportedFormat(format!("{origin}: bad train.seed")))?,
            use_f0: decoder_config.use_f0,
            preset: Preset::parse(get("train.preset")?)?,
            checkpoint_every: num("train.checkpoint_every")?,
        };
        let names: Vec<String> = {
            let raw = get("speakers")?;
            if raw.is_empty() {
                Vec::new()
            } else {
                raw.split('\t').map(|s| s.to_string()).collect()
            }
        };

        let entries = archive::read_entries(payload)?;
        // decoder tensors
        let mut decoder = DecoderParams::init(&decoder_config, 0)?;
        for (name, p) in decoder.named_mut() {
            let t = archive::find_shaped(&entries, &name, &p.value.shape)?;
            p.value = t.clone();
            p.zero_grad();
        }
        decoder.validate_against(&decoder_config)?;

        let table_tensor =
            archive::find_shaped(&entries, "spk.table", &[names.len(), decoder_config.speaker_dim])?
                .clone();
        let speakers = SpeakerTable {
            embeddings: table_tensor,
            names,
        };

        let mut opt = OptState::new(&decoder, &speakers, train_config.lr);
        for (name, p) in decoder.named() {
            let n = p.value.numel();
            let st = opt.tensors.get_mut(&name).unwrap();
            st.m = archive::find_shaped(&entries, &format!("opt.m.{name}"), &[n])?.data.clone();
            st.v = archive::find_shaped(&entries, &format!("opt.v.{name}"), &[n])?.data.clone();
            st.step_count = archive::find_shaped(&entries, &format!("opt.t.{name}"), &[1])?.data[0] as u64;
        }
        let k = speakers.len() * speakers.dim();
        opt.table.m = archive::find_shaped(&entries, "opt.m.spk.table", &[k])?.data.clone();
        opt.table.v = archive::find_shaped(&entries, "opt.v.spk.table", &[k])?.data.clone();
        opt.table.row_steps = archive::find_shaped(&entries, "opt.rowsteps.spk.table", &[speakers.len()])?
            .data
            .iter()
            .map(|&x| x as u64)
            .collect();

        Ok(Checkpoint {
            decoder,
            speakers,
            decoder_config,
            train_config,
            opt,
            step: num("step")? as u64,
            encoder_path: get("encoder_path")?.clone(),
            encoder_hash: get("encoder_hash")?.clone(),
        })
    }
}

/// An in-memory training clip.
struct Clip {
    speaker: usize,
    wave: Waveform,
    quantized: QuantizedWave,
    path: String,
}

fn load_clips(manifest: &Manifest, speakers: &[String], crop: usize) -> Result<Vec<Clip>> {
    if manifest.entries.is_empty() {
        return Err(Error::EmptyManifest("manifest has no entries".into()));
    }
    let mut clips = Vec::with_capacity(manifest.entries.len());
    for (name, path) in &manifest.entries {
        let wave = read_wav(path)?;
        if wave.len() < crop {
            return Err(Error::TooShort(format!(
                "{}: {} samples, need at least crop_samples = {crop}",
                path.display(),
                wave.len()
            )));
        }
        let quantized = wave.quantize().map_err(|e| {
            Error::Domain(format!("{}: {e}", path.display()))
        })?;
        let speaker = speakers.iter().position(|s| s == name).unwrap();
        clips.push(Clip {
            speaker,
            wave,
            quantized,
            path: path.display().to_string(),
        });
    }
    Ok(clips)
}

/// One teacher-forced optimization step over `batch_size` sampled crops.
/// Returns the mean loss. Touches decoder grads + the sampled speakers' rows.
#[allow(clippy::too_many_arguments)]
fn train_step(
    clips: &[Clip],
    table: &mut SpeakerTable,
    params: &mut DecoderParams,
    opt: &mut OptState,
    enc: &(EncoderConfig, EncoderParams),
    dec_config: &DecoderConfig,
    config: &TrainConfig,
    rng: &mut Rng,
) -> Result<f64> {
    params.zero_grads();
    let mut row_grads: BTreeMap<usize, Vec<f32>> = BTreeMap::new();
    let mut total_loss = 0.0f64;

    for _ in 0..config.batch_size {
        let clip = &clips[rng.below(clips.len())];
        let max_start = clip.wave.len() - config.crop_samples;
        let start = if max_start == 0 { 0 } else { rng.below(max_start + 1) };
        let crop = Waveform::new(clip.wave.samples[start..start + config.crop_samples].to_vec());
        let targets: Vec<usize> = clip.quantized.indices[start..start + config.crop_samples]
            .iter()
            .map(|&i| i as usize)
            .collect();
        let x = QuantizedWave {
            indices: clip.quantized.indices[start..start + config.crop_samples].to_vec(),
        };

        let mel = log_mel(&crop, enc.0.n_mels)
            .map_err(|e| Error::TooShort(format!("{}: {e}", clip.path)))?;
        let latent = encode(&mel, &enc.1, &enc.0)?;
        let f0: Option<F0Contour> = if config.use_f0 {
            Some(estimate_f0(&crop).map_err(|e| Error::TooShort(format!("{}: {e}", clip.path)))?)
        } else {
            None
        };
        let cond = build_conditioning(
            &latent,
            table.row(clip.speaker),
            f0.as_ref(),
            config.crop_samples,
            dec_config,
        )?;
        let (logits, cache) = decoder_forward(&x, &cond, params, dec_config, true)?;
        let (loss, dlogits) = softmax_cross_entropy(&logits, &targets)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("training loss on {}", clip.path)));
        }
        total_loss += loss;
        let dcond = decoder_backward(&dlogits, &cache.unwrap(), &cond, params, dec_config)?;
        let spk_grad =
            dcond[dec_config.latent_channels..dec_config.latent_channels + dec_config.speaker_dim].to_vec();
        row_grads
            .entry(clip.speaker)
            .and_modify(|g| {
                for (a, b) in g.iter_mut().zip(&spk_grad) {
                    *a += b;
                }
            })
            .or_insert(spk_grad);
    }

    let scale = 1.0 / config.batch_size as f32;
    for (name, p) in params.named_mut() {
        if scale != 1.0 {
            for g in &mut p.grad.data {
                *g *= scale;
            }
        }
        opt.tensors.get_mut(&name).unwrap().step(&opt.hyper, &mut p.value.data, &p.grad.data);
    }
    for (row, mut grad) in row_grads {
        if scale != 1.0 {
            for g in &mut grad {
                *g *= scale;
            }
        }
        opt.table.step_row(&opt.hyper, row, table.row_mut(row), &grad);
    }
    Ok(total_loss / config.batch_size as f64)
}

fn ensure_valid_speaker_names(names: &[String]) -> Result<()> {
    for n in names {
        if n.contains('\t') || n.contains('\n') || n.contains('\r') {
            return Err(Error::UnsupportedFormat(format!(
                "speaker name '{n}' contains tab or newline"
            )));
        }
    }
    Ok(())
}

/// Train a decoder + speaker table from scratch over a manifest, encoding
/// with the frozen encoder at `encoder_path`. Emits one `(step, loss)`
/// callback per step; saves periodic checkpoints when `checkpoint_to` is
/// given and `checkpoint_every > 0`.
pub fn train(
    manifest: &Manifest,
    encoder_path: &Path,
    config: &TrainConfig,
    checkpoint_to: Option<&Path>,
    on_step: &mut dyn FnMut(u64, f64),
) -> Result<Checkpoint> {
    let enc = load_encoder(encoder_path)?;
    let speakers = manifest.speakers();
    ensure_valid_speaker_names(&speakers)?;
    let clips = load_clips(manifest, &speakers, config.crop_samples)?;
    let dec_config = config.preset.decoder_config(enc.0.latent_channels(), config.use_f0);

    let mut table = SpeakerTable::new(speakers, dec_config.speaker_dim, config.seed ^ 0x5eed)?;
    let mut params = DecoderParams::init(&dec_config, config.seed)?;
    let mut opt = OptState::new(&params, &table, config.lr);
    let mut rng = Rng::seed_from_u64(config.seed);

    let mut ckpt = Checkpoint {
        decoder: params.clone(),
        speakers: table.clone(),
        decoder_config: dec_config.clone(),
        train_config: config.clone(),
        opt: opt.clone(),
        step: 0,
        encoder_path: encoder_path.display().to_string(),
        encoder_hash: hash_file(encoder_path)?,
    };

    for step in 1..=config.steps as u64 {
        let loss = train_step(
            &clips, &mut table, &mut params, &mut opt, &enc, &dec_config, config, &mut rng,
        )?;
        on_step(step, loss);
        if let Some(path) = checkpoint_to {
            if config.checkpoint_every > 0 && step % config.checkpoint_every as u64 == 0 {
                ckpt.decoder = params.clone();
                ckpt.speakers = table.clone();
                ckpt.opt = opt.clone();
                ckpt.step = step;
                ckpt.save(path)?;
            }
        }
    }
    ckpt.decoder = params;
    ckpt.speakers = table;
    ckpt.opt = opt;
    ckpt.step = config.steps as u64;
    Ok(ckpt)
}

/// Add one speaker after training: the new embedding row starts at the exact
/// mean of the existing rows, then the decoder and that row alone are
/// fine-tuned on the new speaker's clips. Existing rows are never touched.
pub fn fit_speaker(
    mut ckpt: Checkpoint,
    manifest: &Manifest,
    name: &str,
    steps: usize,
    encoder_path: &Path,
    seed: u64,
    on_step: &mut dyn FnMut(u64, f64),
) -> Result<Checkpoint> {
    ensure_valid_speaker_names(&[name.to_string()])?;
    let entries: Vec<(String, PathBuf)> = manifest
        .entries
        .iter()
        .filter(|(n, _)| n == name)
        .cloned()
        .collect();
    if entries.is_empty() {
        return Err(Error::EmptyManifest(format!(
            "manifest has no entries for speaker '{name}'"
        )));
    }
    let enc = load_encoder(encoder_path)?;
    let actual = hash_file(encoder_path)?;
    if actual != ckpt.encoder_hash {
        return Err(Error::ConfigMismatch(format!(
            "encoder hash {actual} does not match checkpoint's {}",
            ckpt.encoder_hash
        )));
    }

    let row = ckpt.speakers.add_speaker_mean(name)?;
    ckpt.opt.table.append_row();

    let sub = Manifest { entries };
    let speakers = vec![name.to_string()];
    let clips = load_clips(&sub, &speakers, ckpt.train_config.crop_samples)?;
    // remap the single-speaker clips onto the appended row
    let clips: Vec<Clip> = clips
        .into_iter()
        .map(|mut c| {
            c.speaker = row;
            c
        })
        .collect();

    let mut rng = Rng::seed_from_u64(seed);
    let config = ckpt.train_config.clone();
    let dec_config = ckpt.decoder_config.clone();
    for step in 1..=steps as u64 {
        let loss = train_step(
            &clips,
            &mut ckpt.speakers,
            &mut ckpt.decoder,
            &mut ckpt.opt,
            &enc,
            &dec_config,
            &config,
            &mut rng,
        )?;
        on_step(ckpt.step + step, loss);
    }
    ckpt.step += steps as u64;
    Ok(ckpt)
}

/// Convert an utterance to a target voice: encode the input, condition on
/// the target speaker's embedding (and the input's pitch when the decoder
/// was trained with it), and generate autoregressively.
pub fn convert(
    ckpt: &Checkpoint,
    encoder_path: &Path,
    input: &Waveform,
    target_speaker: &str,
    temperature: f32,
    seed: u64,
) -> Result<Waveform> {
    let enc = load_encoder(encoder_path)?;
    let actual = hash_file(encoder_path)?;
    if actual != ckpt.encoder_hash {
        return Err(Error::ConfigMismatch(format!(
            "encoder hash {actual} does not match checkpoint's {}",
            ckpt.encoder_hash
        )));
    }
    let row = ckpt.speakers.index_of(target_speaker)?;
    let mel = log_mel(input, enc.0.n_mels)?;
    let latent = encode(&mel, &enc.1, &enc.0)?;
    let f0 = if ckpt.decoder_config.use_f0 {
        Some(estimate_f0(input)?)
    } else {
        None
    };
    let t_audio = latent.len() * ckpt.decoder_config.upsample_latent;
    let cond = build_conditioning(
        &latent,
        ckpt.speakers.row(row),
        f0.as_ref(),
        t_audio,
        &ckpt.decoder_config,
    )?;
    let (_, wave) = generate(&cond, &ckpt.decoder, &ckpt.decoder_config, temperature, seed)?;
    Ok(wave)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::write_wav;
    use crate::decoder::teacher_forced_logits;
    use crate::dsp::sine;
    use crate::encoder::{init_random_encoder, save_encoder};
    use tempfile::TempDir;

    /// Small-everything config for fast unit runs.
    fn tiny_train_config() -> TrainConfig {
        TrainConfig {
            steps: 3,
            batch_size: 1,
            crop_samples: 640,
            lr: 2e-3,
            seed: 7,
            use_f0: false,
            preset: Preset::Toy,
            checkpoint_every: 0,
        }
    }

    fn tiny_encoder(dir: &Path) -> PathBuf {
        let mut cfg = EncoderConfig::toy();
        // shrink for unit-test speed; latent stays 16 channels
        cfg.n_blocks = 2;
        cfg.layers_per_block = 2;
        cfg.channels = vec![16, 16];
        cfg.kernel_sizes = vec![3, 3];
        cfg.output_block = 2;
        let params = init_random_encoder(&cfg, 99).unwrap();
        let p = dir.join("enc.ntar");
        save_encoder(&p, &cfg, &params).unwrap();
        p
    }

    fn tiny_corpus(dir: &Path) -> PathBuf {
        let a = sine(150.0, 0.4, 1600);
        let b = sine(260.0, 0.4, 1600);
        write_wav(dir.join("a.wav"), &a).unwrap();
        write_wav(dir.join("b.wav"), &b).unwrap();
        let manifest = dir.join("train.tsv");
        fs::write(&manifest, "# corpus\nalice\ta.wav\nbob\tb.wav\n").unwrap();
        manifest
    }

    #[test]
    fn manifest_parsing() {
        let m = Manifest::parse("# c\nalice\t/x/a.wav\n\nbob\tb.wav\n", Path::new("/base")).unwrap();
        assert_eq!(m.entries.len(), 2);
        assert_eq!(m.entries[0].1, PathBuf::from("/x/a.wav"));
        assert_eq!(m.entries[1].1, PathBuf::from("/base/b.wav"));
        assert_eq!(m.speakers(), vec!["alice".to_string(), "bob".to_string()]);
        assert!(Manifest::parse("alice a.wav", Path::new(".")).is_err());
    }

    #[test]
    fn train_smoke_and_initial_loss_near_uniform() {
        let dir = TempDir::new().unwrap();
        let enc = tiny_encoder(dir.path());
        let manifest = Manifest::load(tiny_corpus(dir.path())).unwrap();
        let config = tiny_train_config();
        let mut losses = Vec::new();
        let ckpt = train(&manifest, &enc, &config, None, &mut |s, l| {
            losses.push((s, l));
        })
        .unwrap();
        assert_eq!(losses.len(), 3);
        // step-0 loss is near ln(256) under random init
        let ln256 = (256.0f64).ln();
        assert!(
            (losses[0].1 - ln256).abs() < 0.5,
            "first loss {} vs ln256 {ln256}",
            losses[0].1
        );
        assert_eq!(ckpt.step, 3);
        assert_eq!(ckpt.speakers.names, vec!["alice", "bob"]);
    }

    #[test]
    fn train_step_isolates_other_speaker_rows() {
        let dir = TempDir::new().unwrap();
        let enc = tiny_encoder(dir.path());
        let manifest = Manifest::load(tiny_corpus(dir.path())).unwrap();
        let mut config = tiny_train_config();
        config.steps = 1;
        let ckpt = train(&manifest, &enc, &config, None, &mut |_, _| {}).unwrap();
        // one step samples exactly one clip; the other speaker's row must be
        // bit-identical to a fresh table with the same seed
        let fresh = SpeakerTable::new(
            vec!["alice".into(), "bob".into()],
            ckpt.decoder_config.speaker_dim,
            config.seed ^ 0x5eed,
        )
        .unwrap();
        let changed: Vec<usize> = (0..2)
            .filter(|&r| ckpt.speakers.row(r) != fresh.row(r))
            .collect();
        assert_eq!(changed.len(), 1, "exactly one row should move");
    }

    #[test]
    fn encoder_is_bitwise_frozen_through_training() {
        let dir = TempDir::new().unwrap();
        let enc_path = tiny_encoder(dir.path());
        let before = fs::read(&enc_path).unwrap();
        let in_memory_before = load_encoder(&enc_path).unwrap();
        let manifest = Manifest::load(tiny_corpus(dir.path())).unwrap();
        let config = tiny_train_config();
        let _ = train(&manifest, &enc_path, &config, None, &mut |_, _| {}).unwrap();
        assert_eq!(fs::read(&enc_path).unwrap(), before);
        let in_memory_after = load_encoder(&enc_path).unwrap();
        assert_eq!(in_memory_before.1, in_memory_after.1);
    }

    #[test]
    fn checkpoint_roundtrip_reproduces_logits_bitwise() {
        let dir = TempDir::new().unwrap();
        let enc = tiny_encoder(dir.path());
        let manifest = Manifest::load(tiny_corpus(dir.path())).unwrap();
        let config = tiny_train_config();
        let ckpt = train(&manifest, &enc, &config, None, &mut |_, _| {}).unwrap();
        let p = dir.path().join("model.ckpt");
        ckpt.save(&p).unwrap();
        let back = Checkpoint::load(&p).unwrap();

        assert_eq!(back.step, ckpt.step);
        assert_eq!(back.speakers, ckpt.speakers);
        assert_eq!(back.encoder_hash, ckpt.encoder_hash);

        // probe forward bitwise
        let mut rng = Rng::seed_from_u64(1);
        let t = 200usize;
        let x = QuantizedWave {
            indices: (0..t).map(|_| rng.below(256) as u8).collect(),
        };
        let cond = crate::infer::bench_conditioning(&ckpt.decoder_config, t, 2);
        let a = teacher_forced_logits(&x, &cond, &ckpt.decoder, &ckpt.decoder_config).unwrap();
        let b = teacher_forced_logits(&x, &cond, &back.decoder, &back.decoder_config).unwrap();
        for (p, q) in a.data.iter().zip(&b.data) {
            assert_eq!(p.to_bits(), q.to_bits());
        }

        // save -> load -> save is byte-identical
        let p2 = dir.path().join("model2.ckpt");
        back.save(&p2).unwrap();
        assert_eq!(fs::read(&p).unwrap(), fs::read(&p2).unwrap());
    }

    #[test]
    fn fit_speaker_mean_init_and_frozen_old_rows() {
        let dir = TempDir::new().unwrap();
        let enc = tiny_encoder(dir.path());
        let manifest = Manifest::load(tiny_corpus(dir.path())).unwrap();
        let config = tiny_train_config();
        let ckpt = train(&manifest, &enc, &config, None, &mut |_, _| {}).unwrap();

        let c = sine(200.0, 0.35, 1600);
        write_wav(dir.path().join("c.wav"), &c).unwrap();
        let new_manifest =
            Manifest::parse("carol\tc.wav\n", dir.path()).unwrap();

        let d = ckpt.speakers.dim();
        let mut expect_mean = vec![0.0f64; d];
        for r in 0..2 {
            for (m, &v) in expect_mean.iter_mut().zip(ckpt.speakers.row(r)) {
                *m += v as f64;
            }
        }
        let expect_mean: Vec<f32> = expect_mean.iter().map(|&v| (v / 2.0) as f32).collect();
        let old_rows: Vec<Vec<f32>> = (0..2).map(|r| ckpt.speakers.row(r).to_vec()).collect();

        let mut losses = Vec::new();
        let fitted = fit_speaker(ckpt, &new_manifest, "carol", 4, &enc, 11, &mut |s, l| {
            losses.push((s, l));
        })
        .unwrap();
        assert_eq!(fitted.speakers.names, vec!["alice", "bob", "carol"]);
        assert_eq!(fitted.step, 3 + 4);
        // old rows untouched, bitwise
        for r in 0..2 {
            assert_eq!(fitted.speakers.row(r), old_rows[r].as_slice());
        }
        // the new row moved away from its exact-mean initialization
        assert_ne!(fitted.speakers.row(2), expect_mean.as_slice());
        assert_eq!(fitted.opt.table.row_steps[0], old_row_steps_check(&fitted, 0));

        // duplicate and missing-name errors
        let again = fit_speaker(fitted.clone(), &new_manifest, "carol", 1, &enc, 1, &mut |_, _| {});
        assert!(matches!(again, Err(Error::DuplicateSpeaker(_))));
        let missing = fit_speaker(fitted, &new_manifest, "dave", 1, &enc, 1, &mut |_, _| {});
        assert!(matches!(missing, Err(Error::EmptyManifest(_))));
    }

    fn old_row_steps_check(ckpt: &Checkpoint, row: usize) -> u64 {
        // helper so the assert reads naturally
        ckpt.opt.table.row_steps[row]
    }

    #[test]
    fn convert_shape_determinism_and_errors() {
        let dir = TempDir::new().unwrap();
        let enc = tiny_encoder(dir.path());
        let manifest = Manifest::load(tiny_corpus(dir.path())).unwrap();
        let config = tiny_train_config();
        let ckpt = train(&manifest, &enc, &config, None, &mut |_, _| {}).unwrap();

        let input = sine(170.0, 0.4, 2000);
        let out = convert(&ckpt, &enc, &input, "bob", 1.0, 5).unwrap();
        assert!(
            (out.len() as isize - input.len() as isize).unsigned_abs() <= 320,
            "{} vs {}",
            out.len(),
            input.len()
        );
        let out2 = convert(&ckpt, &enc, &input, "bob", 1.0, 5).unwrap();
        assert_eq!(out.samples, out2.samples);

        assert!(matches!(
            convert(&ckpt, &enc, &input, "nobody", 1.0, 5),
            Err(Error::UnknownSpeaker { .. })
        ));

        // encoder swap is rejected by the content hash
        let other = dir.path().join("enc2.ntar");
        let cfg2 = {
            let mut c = EncoderConfig::toy();
            c.n_blocks = 2;
            c.layers_per_block = 2;
            c.channels = vec![16, 16];
            c.kernel_sizes = vec![3, 3];
            c.output_block = 2;
            c
        };
        save_encoder(&other, &cfg2, &init_random_encoder(&cfg2, 123).unwrap()).unwrap();
        assert!(matches!(
            convert(&ckpt, &other, &input, "bob", 1.0, 5),
            Err(Error::ConfigMismatch(_))
        ));
    }
}
