// scratch experiment: overfit a single 1s clip (criterion-5 tuning)
use revoice::audio::{write_wav, Waveform, SAMPLE_RATE};
use revoice::encoder::{init_random_encoder, save_encoder, EncoderConfig};
use revoice::neural::Rng;
use revoice::train::{train, Manifest, Preset, TrainConfig};
use std::time::Instant;

fn speech_like(seconds: f32, f0: f32, seed: u64) -> Waveform {
    let sr = SAMPLE_RATE as f32;
    let total = (seconds * sr) as usize;
    let mut rng = Rng::seed_from_u64(seed);
    let mut samples = vec![0.0f32; total];
    let mut phase = 0.0f32;
    let mut pos = 0usize;
    while pos < total {
        let syl = (sr * rng.uniform(0.15, 0.35)) as usize;
        let pause = (sr * rng.uniform(0.03, 0.08)) as usize;
        let end = (pos + syl).min(total);
        let emph_a = rng.uniform(1.0, 5.0);
        let emph_b = rng.uniform(1.0, 5.0);
        let len = end - pos;
        for i in 0..len {
            let frac = i as f32 / len.max(1) as f32;
            let env = (frac * 8.0).min(1.0) * ((1.0 - frac) * 8.0).min(1.0);
            let f = f0 * (1.0 + 0.04 * (2.0 * std::f32::consts::PI * 5.0 * i as f32 / sr).sin());
            phase += 2.0 * std::f32::consts::PI * f / sr;
            let emph = emph_a + (emph_b - emph_a) * frac;
            let mut v = 0.0f32;
            let mut amp = 1.0f32;
            for h in 1..=10 {
                let boost = 1.0 + 1.5 * (-((h as f32 - emph) * (h as f32 - emph)) / 2.0).exp();
                v += amp * boost * (phase * h as f32).sin();
                amp *= 0.6;
            }
            samples[pos + i] = 0.22 * env * v;
        }
        pos = end + pause;
    }
    for s in samples.iter_mut() {
        *s = (*s + rng.uniform(-0.003, 0.003)).clamp(-1.0, 1.0);
    }
    Waveform::new(samples)
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lr: f32 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(2e-3);
    let crop: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(2048);
    let steps: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(2000);

    let dir = std::env::temp_dir().join("exp_overfit");
    std::fs::create_dir_all(&dir).unwrap();
    let clip = speech_like(1.0, 150.0, 42);
    write_wav(dir.join("clip.wav"), &clip).unwrap();
    std::fs::write(dir.join("m.tsv"), "solo\tclip.wav\n").unwrap();

    let enc_cfg = EncoderConfig::toy();
    let enc = init_random_encoder(&enc_cfg, 7).unwrap();
    save_encoder(dir.join("enc.ntar"), &enc_cfg, &enc).unwrap();

    let manifest = Manifest::load(dir.join("m.tsv")).unwrap();
    let config = TrainConfig {
        steps,
        batch_size: 1,
        crop_samples: crop,
        lr,
        seed: 1,
        use_f0: false,
        preset: Preset::Toy,
        checkpoint_every: 0,
    };
    let t0 = Instant::now();
    let mut recent = std::collections::VecDeque::new();
    train(&manifest, &dir.join("enc.ntar"), &config, None, &mut |s, l| {
        recent.push_back(l);
        if recent.len() > 100 {
            recent.pop_front();
        }
        if s % 100 == 0 {
            let mean: f64 = recent.iter().sum::<f64>() / recent.len() as f64;
            println!(
                "step={s} loss={l:.4} mean100={mean:.4} elapsed={:.1}s",
                t0.elapsed().as_secs_f64()
            );
        }
    })
    .unwrap();
}
