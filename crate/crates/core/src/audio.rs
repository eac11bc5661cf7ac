//! 16 kHz mono WAV I/O and mu-law companding between continuous samples
//! in [-1, 1] and the decoder's 256-class alphabet.

use crate::error::{Error, Result};
use std::fs;
use std::io::Write;
use std::path::Path;

pub const SAMPLE_RATE: u32 = 16_000;

/// Mu-law constant: 256 quantization levels, mu = 255.
const MU: f64 = 255.0;

/// Continuous waveform, samples in [-1, 1] at 16 kHz.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate_hz: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>) -> Self {
        Waveform {
            samples,
            sample_rate_hz: SAMPLE_RATE,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Quantize every sample to its mu-law class index.
    pub fn quantize(&self) -> Result<QuantizedWave> {
        let mut indices = Vec::with_capacity(self.samples.len());
        for &x in &self.samples {
            indices.push(mulaw_encode(x)?);
        }
        Ok(QuantizedWave { indices })
    }
}

/// Mu-law class indices in [0, 255].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantizedWave {
    pub indices: Vec<u8>,
}

impl QuantizedWave {
    /// Reconstruct the waveform from bin centers in companded space.
    pub fn dequantize(&self) -> Waveform {
        let samples = self.indices.iter().map(|&i| mulaw_decode(i)).collect();
        Waveform::new(samples)
    }
}

/// Companding law F(x) = sign(x) * ln(1 + 255|x|) / ln(256), mapping
/// [-1, 1] onto [-1, 1].
fn compand(x: f64) -> f64 {
    x.signum() * (1.0 + MU * x.abs()).ln() / (1.0 + MU).ln()
}

fn expand(c: f64) -> f64 {
    c.signum() * ((1.0 + MU).powf(c.abs()) - 1.0) / MU
}

/// Map a sample in [-1, 1] to its mu-law class: clamp(floor((F(x)+1)/2 * 256), 0, 255).
pub fn mulaw_encode(x: f32) -> Result<u8> {
    if !x.is_finite() {
        return Err(Error::Domain(format!("mulaw_encode: non-finite sample {x}")));
    }
    if x.abs() > 1.0 {
        return Err(Error::Domain(format!(
            "mulaw_encode: sample {x} outside [-1, 1]"
        )));
    }
    let c = compand(x as f64);
    let idx = ((c + 1.0) / 2.0 * 256.0).floor();
    Ok(idx.clamp(0.0, 255.0) as u8)
}

/// Inverse companding at the bin center c = (i + 0.5)/128 - 1.
pub fn mulaw_decode(i: u8) -> f32 {
    let c = (i as f64 + 0.5) / 128.0 - 1.0;
    expand(c) as f32
}

/// Checked variant for callers holding untrusted integers.
pub fn mulaw_decode_checked(i: i64) -> Result<f32> {
    if !(0..=255).contains(&i) {
        return Err(Error::Domain(format!("mulaw_decode: index {i} outside [0, 255]")));
    }
    Ok(mulaw_decode(i as u8))
}

fn read_u32_le(b: &[u8], off: usize) -> u32 {
    u32::from_le_bytes([b[off], b[off + 1], b[off + 2], b[off + 3]])
}

fn read_u16_le(b: &[u8], off: usize) -> u16 {
    u16::from_le_bytes([b[off], b[off + 1]])
}

/// Read a RIFF/WAVE file: PCM (tag 1), 16-bit, mono, 16000 Hz. Extra chunks
/// are skipped. Each 16-bit sample p maps to p / 32768.
pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::NotFound(path.display().to_string())
        } else {
            Error::io(path.display().to_string(), e)
        }
    })?;
    let name = path.display();
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(Error::UnsupportedFormat(format!(
            "{name}: not a RIFF/WAVE container"
        )));
    }

    let mut fmt: Option<(u16, u16, u32, u16)> = None; // (tag, channels, rate, bits)
    let mut data: Option<&[u8]> = None;
    let mut off = 12usize;
    while off + 8 <= bytes.len() {
        let id = &bytes[off..off + 4];
        let size = read_u32_le(&bytes, off + 4) as usize;
        let body_start = off + 8;
        let body_end = (body_start + size).min(bytes.len());
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(Error::UnsupportedFormat(format!(
                        "{name}: fmt chunk truncated ({size} bytes)"
                    )));
                }
                let tag = read_u16_le(&bytes, body_start);
                let channels = read_u16_le(&bytes, body_start + 2);
                let rate = read_u32_le(&bytes, body_start + 4);
                let bits = read_u16_le(&bytes, body_start + 14);
                fmt = Some((tag, channels, rate, bits));
            }
            b"data" => data = Some(&bytes[body_start..body_end]),
            _ => {} // ignore LIST, fact, cue, ...
        }
        // chunks are word-aligned
        off = body_start + size + (size & 1);
    }

    let (tag, channels, rate, bits) =
        fmt.ok_or_else(|| Error::UnsupportedFormat(format!("{name}: missing fmt chunk")))?;
    if tag != 1 {
        return Err(Error::UnsupportedFormat(format!(
            "{name}: encoding tag {tag}, expected PCM (1)"
        )));
    }
    if channels != 1 {
        return Err(Error::UnsupportedFormat(format!(
            "{name}: {channels} channels, expected mono"
        )));
    }
    if rate != SAMPLE_RATE {
        return Err(Error::UnsupportedFormat(format!(
            "{name}: sample rate {rate} Hz, expected {SAMPLE_RATE} Hz"
        )));
    }
    if bits != 16 {
        return Err(Error::UnsupportedFormat(format!(
            "{name}: {bits}-bit samples, expected 16-bit"
        )));
    }
    let data = data.ok_or_else(|| Error::UnsupportedFormat(format!("{name}: missing data chunk")))?;

    let mut samples = Vec::with_capacity(data.len() / 2);
    for pair in data.chunks_exact(2) {
        let p = i16::from_le_bytes([pair[0], pair[1]]);
        samples.push(p as f32 / 32768.0);
    }
    Ok(Waveform::new(samples))
}

/// Write a 16-bit PCM mono 16 kHz file. Sample x is stored as
/// clamp(round(x * 32768), -32768, 32767).
pub fn write_wav(path: impl AsRef<Path>, w: &Waveform) -> Result<()> {
    let path = path.as_ref();
    let bytes = wav_bytes(w);
    let mut f = fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    f.write_all(&bytes)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

/// Serialize to RIFF/WAVE bytes (fmt + data chunks only).
pub fn wav_bytes(w: &Waveform) -> Vec<u8> {
    let data_len = w.samples.len() * 2;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&((36 + data_len) as u32).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // PCM
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&SAMPLE_RATE.to_le_bytes());
    out.extend_from_slice(&(SAMPLE_RATE * 2).to_le_bytes()); // byte rate
    out.extend_from_slice(&2u16.to_le_bytes()); // block align
    out.extend_from_slice(&16u16.to_le_bytes()); // bits per sample
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for &x in &w.samples {
        let p = (x as f64 * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}
