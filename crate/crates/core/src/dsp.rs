//! Frame-level features: log-mel filterbank (encoder input), fundamental
//! frequency contours (optional conditioning), mel-cepstra (MCD input).
//!
//! Frame geometry is 320-sample windows with 160-sample hops (20 ms / 10 ms
//! at 16 kHz).

use crate::audio::Waveform;
use crate::error::{Error, Result};
use crate::neural::Tensor;
use rustfft::{num_complex::Complex32, FftPlanner};
use std::fs;
use std::io::Write;
use std::path::Path;

pub const WINDOW_SAMPLES: usize = 320;
pub const HOP_SAMPLES: usize = 160;
pub const FFT_SIZE: usize = 512;
pub const DEFAULT_N_MELS: usize = 64;
pub const DEFAULT_CEPSTRA_ORDER: usize = 13;
pub const ENERGY_FLOOR: f32 = 1e-5;

/// F0 search range in Hz; values outside are reported as unvoiced.
pub const F0_MIN_HZ: f32 = 60.0;
pub const F0_MAX_HZ: f32 = 400.0;
const F0_WINDOW: usize = 400; // 25 ms
const VOICING_THRESHOLD: f64 = 0.3;

/// Log mel filterbank energies, one row per frame: [T_frames, n_mels].
#[derive(Debug, Clone, PartialEq)]
pub struct MelFrames {
    pub frames: Vec<f32>,
    pub n_mels: usize,
    pub hop_samples: usize,
    pub window_samples: usize,
}

impl MelFrames {
    pub fn t_frames(&self) -> usize {
        self.frames.len() / self.n_mels
    }

    pub fn row(&self, t: usize) -> &[f32] {
        &self.frames[t * self.n_mels..(t + 1) * self.n_mels]
    }

    /// Transpose into a [n_mels, T] tensor for the encoder.
    pub fn to_tensor(&self) -> Tensor {
        let t = self.t_frames();
        let mut out = Tensor::zeros(&[self.n_mels, t]);
        for tt in 0..t {
            for m in 0..self.n_mels {
                out.data[m * t + tt] = self.frames[tt * self.n_mels + m];
            }
        }
        out
    }
}

/// Per-frame pitch values; 0.0 marks unvoiced frames.
#[derive(Debug, Clone, PartialEq)]
pub struct F0Contour {
    pub values_hz: Vec<f32>,
    pub hop_samples: usize,
}

impl F0Contour {
    pub fn len(&self) -> usize {
        self.values_hz.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values_hz.is_empty()
    }
}

/// Mel-cepstral coefficients c_1..c_order per frame: [T_frames, order].
/// c_0 is excluded.
#[derive(Debug, Clone, PartialEq)]
pub struct CepstraFrames {
    pub frames: Vec<f32>,
    pub order: usize,
}

impl CepstraFrames {
    pub fn t_frames(&self) -> usize {
        if self.order == 0 {
            0
        } else {
            self.frames.len() / self.order
        }
    }

    pub fn row(&self, t: usize) -> &[f32] {
        &self.frames[t * self.order..(t + 1) * self.order]
    }
}

pub fn frame_count(samples: usize, window: usize, hop: usize) -> usize {
    if samples < window {
        0
    } else {
        (samples - window) / hop + 1
    }
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filterbank spanning 0-8000 Hz over FFT bins 0..=FFT_SIZE/2.
/// Returned dense as [n_mels, n_bins].
fn mel_filterbank(n_mels: usize, sample_rate: f64) -> Vec<f32> {
    let n_bins = FFT_SIZE / 2 + 1;
    let f_max = sample_rate / 2.0;
    let mel_max = hz_to_mel(f_max);
    // n_mels + 2 edge points, mel-spaced
    let edges_hz: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(mel_max * i as f64 / (n_mels + 1) as f64))
        .collect();
    let mut bank = vec![0.0f32; n_mels * n_bins];
    for b in 0..n_mels {
        let (lo, center, hi) = (edges_hz[b], edges_hz[b + 1], edges_hz[b + 2]);
        for k in 0..n_bins {
            let f = k as f64 * sample_rate / FFT_SIZE as f64;
            let w = if f >= lo && f <= center && center > lo {
                (f - lo) / (center - lo)
            } else if f > center && f <= hi && hi > center {
                (hi - f) / (hi - center)
            } else {
                0.0
            };
            bank[b * n_bins + k] = w as f32;
        }
    }
    bank
}

/// Center frequencies (Hz) of the mel bins; useful for tests and tooling.
pub fn mel_bin_centers_hz(n_mels: usize) -> Vec<f64> {
    let mel_max = hz_to_mel(8000.0);
    (1..=n_mels)
        .map(|i| mel_to_hz(mel_max * i as f64 / (n_mels + 1) as f64))
        .collect()
}

/// Log-mel filterbank frames: Hann window, 512-point FFT, triangular mel
/// bank over 0-8000 Hz, natural log with a 1e-5 energy floor.
pub fn log_mel(w: &Waveform, n_mels: usize) -> Result<MelFrames> {
    if w.len() < WINDOW_SAMPLES {
        return Err(Error::TooShort(format!(
            "log_mel needs >= {WINDOW_SAMPLES} samples, got {}",
            w.len()
        )));
    }
    let t_frames = frame_count(w.len(), WINDOW_SAMPLES, HOP_SAMPLES);
    let bank = mel_filterbank(n_mels, w.sample_rate_hz as f64);
    let n_bins = FFT_SIZE / 2 + 1;

    let mut planner = FftPlanner::<f32>::new();
    let fft = planner.plan_fft_forward(FFT_SIZE);
    let hann: Vec<f32> = (0..WINDOW_SAMPLES)
        .map(|n| 0.5 - 0.5 * (2.0 * std::f32::consts::PI * n as f32 / WINDOW_SAMPLES as f32).cos())
        .collect();

    let mut frames = vec![0.0f32; t_frames * n_mels];
    let mut buf = vec![Complex32::new(0.0, 0.0); FFT_SIZE];
    let mut mag = vec![0.0f32; n_bins];
    for t in 0..t_frames {
        let start = t * HOP_SAMPLES;
        for i in 0..FFT_SIZE {
            let v = if i < WINDOW_SAMPLES {
                w.samples[start + i] * hann[i]
            } else {
                0.0
            };
            buf[i] = Complex32::new(v, 0.0);
        }
        fft.process(&mut buf);
        for (k, m) in mag.iter_mut().enumerate() {
            *m = buf[k].norm();
        }
        for b in 0..n_mels {
            let row = &bank[b * n_bins..(b + 1) * n_bins];
            let mut e = 0.0f64;
            for (wgt, v) in row.iter().zip(&mag) {
                e += *wgt as f64 * *v as f64;
            }
            frames[t * n_mels + b] = (e.max(ENERGY_FLOOR as f64)).ln() as f32;
        }
    }
    Ok(MelFrames {
        frames,
        n_mels,
        hop_samples: HOP_SAMPLES,
        window_samples: WINDOW_SAMPLES,
    })
}

/// Pitch tracking by normalized autocorrelation over 25 ms windows at 10 ms
/// hops. A frame is voiced iff the best peak exceeds 0.3; the lag is refined
/// by parabolic interpolation and reported as 16000/lag Hz.
pub fn estimate_f0(w: &Waveform) -> Result<F0Contour> {
    if w.len() < F0_WINDOW {
        return Err(Error::TooShort(format!(
            "estimate_f0 needs >= {F0_WINDOW} samples, got {}",
            w.len()
        )));
    }
    let sr = w.sample_rate_hz as f64;
    let lag_min = (sr / F0_MAX_HZ as f64).ceil() as usize; // 40
    let lag_max = (sr / F0_MIN_HZ as f64).floor() as usize; // 266
    let t_frames = frame_count(w.len(), F0_WINDOW, HOP_SAMPLES);
    let mut values = Vec::with_capacity(t_frames);
    // r needs one lag of margin on both sides for interpolation
    let mut r = vec![0.0f64; lag_max + 2];
    let mut win = vec![0.0f64; F0_WINDOW];

    for t in 0..t_frames {
        let start = t * HOP_SAMPLES;
        let seg = &w.samples[start..start + F0_WINDOW];
        let mean = seg.iter().map(|&v| v as f64).sum::<f64>() / F0_WINDOW as f64;
        for (d, &s) in win.iter_mut().zip(seg) {
            *d = s as f64 - mean;
        }
        for (lag, rv) in r.iter_mut().enumerate().take(lag_max + 2).skip(lag_min - 1) {
            let n = F0_WINDOW - lag;
            let mut num = 0.0f64;
            let mut e0 = 0.0f64;
            let mut e1 = 0.0f64;
            for i in 0..n {
                num += win[i] * win[i + lag];
                e0 += win[i] * win[i];
                e1 += win[i + lag] * win[i + lag];
            }
            let denom = (e0 * e1).sqrt();
            *rv = if denom > 1e-12 { num / denom } else { 0.0 };
        }
        let mut best = lag_min;
        for lag in lag_min..=lag_max {
            if r[lag] > r[best] {
                best = lag;
            }
        }
        if r[best] > VOICING_THRESHOLD {
            // a multiple of the true period correlates as well as the period
            // itself, so take the shortest local peak close to the global max
            let gate = 0.9 * r[best];
            for lag in lag_min..best {
                if r[lag] >= gate && r[lag] >= r[lag - 1] && r[lag] >= r[lag + 1] {
                    best = lag;
                    break;
                }
            }
            // parabolic refinement around the peak
            let (ym, y0, yp) = (r[best - 1], r[best], r[best + 1]);
            let denom = ym - 2.0 * y0 + yp;
            let delta = if denom.abs() > 1e-12 {
                (0.5 * (ym - yp) / denom).clamp(-0.5, 0.5)
            } else {
                0.0
            };
            let f0 = (sr / (best as f64 + delta)).clamp(F0_MIN_HZ as f64, F0_MAX_HZ as f64);
            values.push(f0 as f32);
        } else {
            values.push(0.0);
        }
    }
    Ok(F0Contour {
        values_hz: values,
        hop_samples: HOP_SAMPLES,
    })
}

/// DCT-II of each log-mel row, keeping coefficients 1..=order (c_0 dropped).
pub fn cepstra_from_log_mel(mel: &MelFrames, order: usize) -> CepstraFrames {
    let t_frames = mel.t_frames();
    let n = mel.n_mels;
    let mut frames = vec![0.0f32; t_frames * order];
    for t in 0..t_frames {
        let row = mel.row(t);
        for k in 1..=order {
            let mut acc = 0.0f64;
            for (i, &m) in row.iter().enumerate() {
                acc += m as f64
                    * (std::f64::consts::PI * k as f64 * (i as f64 + 0.5) / n as f64).cos();
            }
            frames[t * order + k - 1] = acc as f32;
        }
    }
    CepstraFrames { frames, order }
}

/// Mel-cepstra straight from a waveform (64-bank log-mel, then DCT).
pub fn mel_cepstra(w: &Waveform, order: usize) -> Result<CepstraFrames> {
    let mel = log_mel(w, DEFAULT_N_MELS)?;
    Ok(cepstra_from_log_mel(&mel, order))
}

/// Normalized log-pitch in [0, 1]: log(f0/60)/log(400/60), 0 when unvoiced.
pub fn normalized_log_f0(f0_hz: f32) -> f32 {
    if f0_hz <= 0.0 {
        0.0
    } else {
        ((f0_hz / F0_MIN_HZ).ln() / (F0_MAX_HZ / F0_MIN_HZ).ln()).clamp(0.0, 1.0)
    }
}

const FEAT_MAGIC: &[u8; 4] = b"FEAT";
const FEAT_VERSION: u32 = 1;

/// Binary matrix bytes: magic "FEAT", u32 version=1, u32 rows, u32 cols,
/// row-major f32, little-endian.
pub fn feature_matrix_bytes(rows: usize, cols: usize, data: &[f32]) -> Vec<u8> {
    assert_eq!(rows * cols, data.len());
    let mut out = Vec::with_capacity(16 + data.len() * 4);
    out.extend_from_slice(FEAT_MAGIC);
    out.extend_from_slice(&FEAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(rows as u32).to_le_bytes());
    out.extend_from_slice(&(cols as u32).to_le_bytes());
    for &x in data {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn write_feature_matrix(path: impl AsRef<Path>, rows: usize, cols: usize, data: &[f32]) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    f.write_all(&feature_matrix_bytes(rows, cols, data))
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

pub fn read_feature_matrix(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<f32>)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    if bytes.len() < 16 || &bytes[0..4] != FEAT_MAGIC {
        return Err(Error::UnsupportedFormat(format!(
            "{}: not a FEAT matrix",
            path.display()
        )));
    }
    let version = u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]);
    if version != FEAT_VERSION {
        return Err(Error::VersionMismatch(format!(
            "{}: FEAT version {version}, expected {FEAT_VERSION}",
            path.display()
        )));
    }
    let rows = u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize;
    let cols = u32::from_le_bytes([bytes[12], bytes[13], bytes[14], bytes[15]]) as usize;
    let expect = 16 + rows * cols * 4;
    if bytes.len() != expect {
        return Err(Error::UnsupportedFormat(format!(
            "{}: FEAT payload {} bytes, expected {expect}",
            path.display(),
            bytes.len()
        )));
    }
    let data = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((rows, cols, data))
}

/// Synthesize a test sine at the given frequency and amplitude.
pub fn sine(freq_hz: f32, amplitude: f32, samples: usize) -> Waveform {
    let sr = crate::audio::SAMPLE_RATE as f32;
    let data = (0..samples)
        .map(|i| amplitude * (2.0 * std::f32::consts::PI * freq_hz * i as f32 / sr).sin())
        .collect();
    Waveform::new(data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn silence_hits_energy_floor() {
        let w = Waveform::new(vec![0.0; 16000]);
        let mel = log_mel(&w, 64).unwrap();
        assert_eq!(mel.t_frames(), 99);
        let floor = (ENERGY_FLOOR).ln();
        for &v in &mel.frames {
            assert!((v - floor).abs() < 1e-6);
        }
    }

    #[test]
    fn exact_window_gives_one_frame() {
        let w = Waveform::new(vec![0.1; WINDOW_SAMPLES]);
        let mel = log_mel(&w, 64).unwrap();
        assert_eq!(mel.t_frames(), 1);
        assert!(log_mel(&Waveform::new(vec![0.1; WINDOW_SAMPLES - 1]), 64).is_err());
    }

    #[test]
    fn sine_at_bin_center_peaks_in_that_bin() {
        let centers = mel_bin_centers_hz(64);
        for &b in &[16usize, 24, 32, 40, 48, 56] {
            let w = sine(centers[b] as f32, 0.5, 8000);
            let mel = log_mel(&w, 64).unwrap();
            for t in 0..mel.t_frames() {
                let row = mel.row(t);
                let argmax = row
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .unwrap()
                    .0;
                assert_eq!(argmax, b, "frame {t}, center {:.1} Hz", centers[b]);
            }
        }
    }

    #[test]
    fn log_mel_deterministic() {
        let w = sine(440.0, 0.3, 4800);
        let a = log_mel(&w, 64).unwrap();
        let b = log_mel(&w, 64).unwrap();
        assert_eq!(a.frames.len(), b.frames.len());
        for (x, y) in a.frames.iter().zip(&b.frames) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn f0_tracks_sines() {
        for &(freq, tol) in &[(100.0f32, 2.0f32), (200.0, 2.0)] {
            let w = sine(freq, 0.5, 16000);
            let f0 = estimate_f0(&w).unwrap();
            let voiced: Vec<f32> = f0.values_hz.iter().cloned().filter(|&v| v > 0.0).collect();
            assert!(
                voiced.len() as f64 >= 0.95 * f0.len() as f64,
                "only {}/{} voiced at {freq} Hz",
                voiced.len(),
                f0.len()
            );
            for v in voiced {
                assert!((v - freq).abs() <= tol, "{v} vs {freq}");
            }
        }
    }

    #[test]
    fn f0_silence_is_unvoiced() {
        let w = Waveform::new(vec![0.0; 16000]);
        let f0 = estimate_f0(&w).unwrap();
        assert_eq!(f0.len(), 98);
        assert!(f0.values_hz.iter().all(|&v| v == 0.0));
        // DC offset is not voicing either
        let w = Waveform::new(vec![0.25; 16000]);
        let f0 = estimate_f0(&w).unwrap();
        assert!(f0.values_hz.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn f0_range_invariant() {
        // mixed content: sine, noise burst, silence
        let mut samples = sine(130.0, 0.4, 6000).samples;
        let mut state = 1u64;
        for _ in 0..6000 {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
            samples.push(((state >> 40) as i32 - (1 << 23)) as f32 / (1 << 24) as f32);
        }
        samples.extend(std::iter::repeat_n(0.0f32, 4000));
        let f0 = estimate_f0(&Waveform::new(samples)).unwrap();
        for &v in &f0.values_hz {
            assert!(v == 0.0 || (F0_MIN_HZ..=F0_MAX_HZ).contains(&v), "f0 {v}");
        }
    }

    #[test]
    fn cepstra_deterministic_and_constant_frame_is_zero() {
        let w = sine(220.0, 0.4, 4800);
        let a = mel_cepstra(&w, 13).unwrap();
        let b = mel_cepstra(&w, 13).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.order, 13);
        assert_eq!(a.t_frames(), frame_count(4800, WINDOW_SAMPLES, HOP_SAMPLES));

        // DC-only log-mel: c_0 absorbs everything, kept coefficients vanish
        let mel = MelFrames {
            frames: vec![3.7; 64],
            n_mels: 64,
            hop_samples: HOP_SAMPLES,
            window_samples: WINDOW_SAMPLES,
        };
        let c = cepstra_from_log_mel(&mel, 13);
        for &v in &c.frames {
            assert!(v.abs() < 1e-3, "coefficient {v}");
        }
    }

    #[test]
    fn cepstra_nearly_scale_invariant_on_noise() {
        // fixed-seed white noise in [-0.45, 0.45]
        let mut state = 0xfeedu64;
        let mut noise = Vec::with_capacity(8000);
        for _ in 0..8000 {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            noise.push(0.9 * ((state >> 40) as f32 / 16_777_216.0 - 0.5));
        }
        let x = Waveform::new(noise.clone());
        let x2 = Waveform::new(noise.iter().map(|&v| 2.0 * v).collect());
        let ca = mel_cepstra(&x, 13).unwrap();
        let cb = mel_cepstra(&x2, 13).unwrap();
        let mean_abs_diff: f64 = ca
            .frames
            .iter()
            .zip(&cb.frames)
            .map(|(&a, &b)| (a - b).abs() as f64)
            .sum::<f64>()
            / ca.frames.len() as f64;
        assert!(mean_abs_diff < 0.3, "mean |delta c| = {mean_abs_diff}");
    }

    #[test]
    fn feature_matrix_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.feat");
        let data = vec![1.0f32, 2.5, -3.0, 0.125, 9.0, -0.5];
        write_feature_matrix(&p, 2, 3, &data).unwrap();
        let (r, c, back) = read_feature_matrix(&p).unwrap();
        assert_eq!((r, c), (2, 3));
        assert_eq!(back, data);
    }

    #[test]
    fn normalized_log_f0_endpoints() {
        assert_eq!(normalized_log_f0(0.0), 0.0);
        assert!((normalized_log_f0(60.0)).abs() < 1e-6);
        assert!((normalized_log_f0(400.0) - 1.0).abs() < 1e-6);
    }

    proptest! {
        #[test]
        fn frame_count_formula_exact(extra in 0usize..2000) {
            let len = WINDOW_SAMPLES + extra;
            let w = Waveform::new(vec![0.01; len]);
            let mel = log_mel(&w, 8).unwrap();
            prop_assert_eq!(mel.t_frames(), (len - WINDOW_SAMPLES) / HOP_SAMPLES + 1);
        }

        #[test]
        fn cepstra_always_finite(seed in 0u64..1000) {
            let mut state = seed.wrapping_add(1);
            let samples: Vec<f32> = (0..800).map(|_| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
                (state >> 40) as f32 / 16_777_216.0 * 2.0 - 1.0
            }).collect();
            let c = mel_cepstra(&Waveform::new(samples), 13).unwrap();
            prop_assert!(c.frames.iter().all(|v| v.is_finite()));
        }
    }
}
