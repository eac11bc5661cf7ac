//! Shared oracles and fixtures for the integration suites.
//!
//! `shadow` re-implements the decoder forward in f64 as an independent
//! reference path: the finite-difference checks probe it instead of the f32
//! production forward so the estimate is limited by truncation, not by f32
//! rounding. `corpus` synthesizes deterministic multi-speaker audio.

#![allow(dead_code)]

use revoice::audio::QuantizedWave;
use revoice::decoder::{ConditioningSeq, DecoderConfig, DecoderParams, START_INDEX};

/// f64 reference forward of the decoder + mean cross entropy. Mirrors the
/// production pipeline op for op; only the arithmetic width differs.
pub mod shadow {
    use super::*;

    fn sigmoid(x: f64) -> f64 {
        if x >= 0.0 {
            1.0 / (1.0 + (-x).exp())
        } else {
            let e = x.exp();
            e / (1.0 + e)
        }
    }

    /// Mean teacher-forced cross entropy of targets under the decoder, all
    /// internal arithmetic in f64.
    pub fn cross_entropy(
        x: &QuantizedWave,
        cond: &ConditioningSeq,
        params: &DecoderParams,
        config: &DecoderConfig,
        targets: &[usize],
    ) -> f64 {
        let t = x.indices.len();
        let r = config.residual_channels;
        let s = config.skip_channels;
        let c = config.cond_channels();
        let n_classes = config.n_classes;
        let t_cond = cond.len();
        assert_eq!(t_cond, t);

        let mut shifted = Vec::with_capacity(t);
        shifted.push(START_INDEX);
        shifted.extend(x.indices[..t - 1].iter().map(|&i| i as usize));

        // h0 [r][t]
        let mut h0 = vec![0.0f64; r * t];
        for (tt, &id) in shifted.iter().enumerate() {
            for rr in 0..r {
                h0[rr * t + tt] = params.embed.value.data[id * r + rr] as f64;
            }
        }
        let cond_at = |ch: usize, tt: usize| cond.channels.data[ch * t + tt] as f64;

        let mut h = h0.clone();
        let mut skip = vec![0.0f64; s * t];
        for (l, layer) in params.layers.iter().enumerate() {
            let dilation = config.layer_dilation(l);
            let k = config.kernel_size;
            // fused conv + conditioning projection + bias
            let mut pre = vec![0.0f64; 2 * r * t];
            for row in 0..2 * r {
                for tt in 0..t {
                    let mut acc = layer.conv_b.value.data[row] as f64
                        + layer.cond_b.value.data[row] as f64;
                    for ci in 0..r {
                        for kk in 0..k {
                            let j = tt as isize - ((k - 1 - kk) * dilation) as isize;
                            if j >= 0 {
                                acc += layer.conv_w.value.data[(row * r + ci) * k + kk] as f64
                                    * h[ci * t + j as usize];
                            }
                        }
                    }
                    for cc in 0..c {
                        acc += layer.cond_w.value.data[row * c + cc] as f64 * cond_at(cc, tt);
                    }
                    pre[row * t + tt] = acc;
                }
            }
            // gated, then skip/residual projections
            let mut z = vec![0.0f64; r * t];
            for row in 0..r {
                for tt in 0..t {
                    z[row * t + tt] = pre[row * t + tt].tanh() * sigmoid(pre[(r + row) * t + tt]);
                }
            }
            for row in 0..s {
                for tt in 0..t {
                    let mut acc = layer.skip_b.value.data[row] as f64;
                    for ci in 0..r {
                        acc += layer.skip_w.value.data[row * r + ci] as f64 * z[ci * t + tt];
                    }
                    skip[row * t + tt] += acc;
                }
            }
            let mut h_next = h.clone();
            for row in 0..r {
                for tt in 0..t {
                    let mut acc = layer.res_b.value.data[row] as f64;
                    for ci in 0..r {
                        acc += layer.res_w.value.data[row * r + ci] as f64 * z[ci * t + tt];
                    }
                    h_next[row * t + tt] += acc;
                }
            }
            h = h_next;
        }
        if config.wav_skip {
            for row in 0..s {
                for tt in 0..t {
                    let mut acc = params.wavskip_b.value.data[row] as f64;
                    for ci in 0..r {
                        acc += params.wavskip_w.value.data[row * r + ci] as f64 * h0[ci * t + tt];
                    }
                    skip[row * t + tt] += acc;
                }
            }
        }
        for v in skip.iter_mut() {
            *v = v.max(0.0);
        }
        let mut f = vec![0.0f64; s * t];
        for row in 0..s {
            for tt in 0..t {
                let mut acc = params.fc1_b.value.data[row] as f64;
                for ci in 0..s {
                    acc += params.fc1_w.value.data[row * s + ci] as f64 * skip[ci * t + tt];
                }
                if config.fc_cond {
                    acc += params.fccond_b.value.data[row] as f64;
                    for cc in 0..c {
                        acc += params.fccond_w.value.data[row * c + cc] as f64 * cond_at(cc, tt);
                    }
                }
                f[row * t + tt] = acc.max(0.0);
            }
        }
        // logits and mean cross entropy
        let mut loss = 0.0f64;
        let mut col = vec![0.0f64; n_classes];
        for tt in 0..t {
            for (cl, v) in col.iter_mut().enumerate() {
                let mut acc = params.fc2_b.value.data[cl] as f64;
                for ci in 0..s {
                    acc += params.fc2_w.value.data[cl * s + ci] as f64 * f[ci * t + tt];
                }
                *v = acc;
            }
            let max = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = col.iter().map(|&v| (v - max).exp()).sum();
            loss += sum.ln() - (col[targets[tt]] - max);
        }
        loss / t as f64
    }
}

/// Deterministic synthetic speech-like audio: a pulse-excited resonant
/// "vowel" generator with per-speaker pitch and spectral tilt, plus pauses.
pub mod corpus {
    use revoice::audio::{Waveform, SAMPLE_RATE};
    use revoice::neural::Rng;

    #[derive(Debug, Clone, Copy)]
    pub struct SpeakerTimbre {
        /// Base pitch in Hz.
        pub f0: f32,
        /// Pitch wobble depth (fraction of f0).
        pub vibrato: f32,
        /// Per-harmonic amplitude decay; smaller = brighter voice.
        pub tilt: f32,
        /// Number of harmonics.
        pub harmonics: usize,
    }

    /// Two far-apart timbres: a low dark voice and a high bright one.
    pub const SPEAKER_A: SpeakerTimbre = SpeakerTimbre {
        f0: 130.0,
        vibrato: 0.04,
        tilt: 0.55,
        harmonics: 10,
    };
    pub const SPEAKER_B: SpeakerTimbre = SpeakerTimbre {
        f0: 250.0,
        vibrato: 0.04,
        tilt: 0.92,
        harmonics: 14,
    };

    /// One utterance: a few voiced "syllables" with random slowly-varying
    /// formant emphasis, separated by short silences.
    pub fn utterance(timbre: &SpeakerTimbre, seconds: f32, seed: u64) -> Waveform {
        let sr = SAMPLE_RATE as f32;
        let total = (seconds * sr) as usize;
        let mut rng = Rng::seed_from_u64(seed);
        let mut samples = vec![0.0f32; total];
        let mut pos = 0usize;
        let mut phase = 0.0f32;
        while pos < total {
            // syllable of 150-350 ms, then 30-80 ms pause
            let syl = (sr * rng.uniform(0.15, 0.35)) as usize;
            let pause = (sr * rng.uniform(0.03, 0.08)) as usize;
            let end = (pos + syl).min(total);
            // shared "content": formant emphasis sweeping between harmonics
            let emph_start = rng.uniform(1.0, 5.0);
            let emph_end = rng.uniform(1.0, 5.0);
            let vib_rate = rng.uniform(4.0, 7.0);
            let len = end - pos;
            for i in 0..len {
                let frac = i as f32 / len.max(1) as f32;
                // amplitude envelope with soft attack/decay
                let env = (frac * 8.0).min(1.0) * ((1.0 - frac) * 8.0).min(1.0);
                let f0 = timbre.f0
                    * (1.0
                        + timbre.vibrato
                            * (2.0 * std::f32::consts::PI * vib_rate * i as f32 / sr).sin());
                phase += 2.0 * std::f32::consts::PI * f0 / sr;
                let emph = emph_start + (emph_end - emph_start) * frac;
                let mut v = 0.0f32;
                let mut amp = 1.0f32;
                for h in 1..=timbre.harmonics {
                    // raise amplitude near the emphasized harmonic
                    let boost = 1.0 + 1.5 * (-((h as f32 - emph) * (h as f32 - emph)) / 2.0).exp();
                    v += amp * boost * (phase * h as f32).sin();
                    amp *= timbre.tilt;
                }
                samples[pos + i] = 0.22 * env * v;
            }
            pos = end + pause;
        }
        // low noise floor so frames are never perfectly silent
        for s in samples.iter_mut() {
            *s = (*s + rng.uniform(-0.003, 0.003)).clamp(-1.0, 1.0);
        }
        Waveform::new(samples)
    }
}
