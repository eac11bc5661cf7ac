// scratch experiment: 2-speaker train -> convert -> classify (criterion-9 tuning)
use revoice::audio::{write_wav, Waveform, SAMPLE_RATE};
use revoice::encoder::{init_random_encoder, save_encoder, EncoderConfig};
use revoice::metrics::{classify, train_classifier, ClassifierConfig};
use revoice::neural::Rng;
use revoice::train::{convert, train, Manifest, Preset, TrainConfig};
use std::path::PathBuf;
use std::time::Instant;

#[derive(Clone, Copy)]
struct Timbre {
    f0: f32,
    vibrato: f32,
    tilt: f32,
    harmonics: usize,
}

fn utterance(t: &Timbre, seconds: f32, seed: u64) -> Waveform {
    let sr = SAMPLE_RATE as f32;
    let total = (seconds * sr) as usize;
    let mut rng = Rng::seed_from_u64(seed);
    let mut samples = vec![0.0f32; total];
    let mut pos = 0usize;
    let mut phase = 0.0f32;
    while pos < total {
        let syl = (sr * rng.uniform(0.15, 0.35)) as usize;
        let pause = (sr * rng.uniform(0.03, 0.08)) as usize;
        let end = (pos + syl).min(total);
        let emph_a = rng.uniform(1.0, 5.0);
        let emph_b = rng.uniform(1.0, 5.0);
        let vib_rate = rng.uniform(4.0, 7.0);
        let len = end - pos;
        for i in 0..len {
            let frac = i as f32 / len.max(1) as f32;
            let env = (frac * 8.0).min(1.0) * ((1.0 - frac) * 8.0).min(1.0);
            let f0 = t.f0
                * (1.0 + t.vibrato * (2.0 * std::f32::consts::PI * vib_rate * i as f32 / sr).sin());
            phase += 2.0 * std::f32::consts::PI * f0 / sr;
            let emph = emph_a + (emph_b - emph_a) * frac;
            let mut v = 0.0f32;
            let mut amp = 1.0f32;
            for h in 1..=t.harmonics {
                let boost = 1.0 + 1.5 * (-((h as f32 - emph) * (h as f32 - emph)) / 2.0).exp();
                v += amp * boost * (phase * h as f32).sin();
                amp *= t.tilt;
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
    let steps: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(3000);
    let lr: f32 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(2e-3);
    let temp: f32 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(0.8);
    let crop: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(2048);

    let ta = Timbre { f0: 130.0, vibrato: 0.04, tilt: 0.55, harmonics: 10 };
    let tb = Timbre { f0: 250.0, vibrato: 0.04, tilt: 0.92, harmonics: 14 };

    let dir = std::env::temp_dir().join("exp_e2e");
    std::fs::create_dir_all(&dir).unwrap();
    let t0 = Instant::now();

    // 15 x 4 s per speaker for training, 4 held-out clips each
    let mut train_lines = String::new();
    for i in 0..15 {
        let wa = utterance(&ta, 4.0, 1000 + i);
        let wb = utterance(&tb, 4.0, 2000 + i);
        write_wav(dir.join(format!("a{i}.wav")), &wa).unwrap();
        write_wav(dir.join(format!("b{i}.wav")), &wb).unwrap();
        train_lines.push_str(&format!("alice\ta{i}.wav\nbob\tb{i}.wav\n"));
    }
    std::fs::write(dir.join("train.tsv"), &train_lines).unwrap();
    let mut held_a: Vec<PathBuf> = Vec::new();
    let mut held_b: Vec<PathBuf> = Vec::new();
    for i in 0..4 {
        let wa = utterance(&ta, 2.0, 9000 + i);
        let wb = utterance(&tb, 2.0, 9500 + i);
        let pa = dir.join(format!("held_a{i}.wav"));
        let pb = dir.join(format!("held_b{i}.wav"));
        write_wav(&pa, &wa).unwrap();
        write_wav(&pb, &wb).unwrap();
        held_a.push(pa);
        held_b.push(pb);
    }

    let enc_cfg = EncoderConfig::toy();
    let enc = init_random_encoder(&enc_cfg, 7).unwrap();
    let enc_path = dir.join("enc.ntar");
    save_encoder(&enc_path, &enc_cfg, &enc).unwrap();

    // classifier on the real training clips
    let manifest = Manifest::load(dir.join("train.tsv")).unwrap();
    let cls_cfg = ClassifierConfig::toy(2);
    let cls = train_classifier(&manifest, &cls_cfg, 1200, 5, &mut |s, l| {
        if s % 300 == 0 {
            println!("cls step={s} loss={l:.4} elapsed={:.0}s", t0.elapsed().as_secs_f64());
        }
    })
    .unwrap();
    // sanity: held-out real clips classify correctly
    let mut ok = 0;
    for p in held_a.iter() {
        let probs = classify(&cls, &revoice::audio::read_wav(p).unwrap()).unwrap();
        if probs[0] > probs[1] { ok += 1; }
    }
    for p in held_b.iter() {
        let probs = classify(&cls, &revoice::audio::read_wav(p).unwrap()).unwrap();
        if probs[1] > probs[0] { ok += 1; }
    }
    println!("classifier held-out real accuracy: {ok}/8 elapsed={:.0}s", t0.elapsed().as_secs_f64());

    // converter training
    let config = TrainConfig {
        steps,
        batch_size: 1,
        crop_samples: crop,
        lr,
        seed: 3,
        use_f0: false,
        preset: Preset::Toy,
        checkpoint_every: 0,
    };
    let ckpt = train(&manifest, &enc_path, &config, None, &mut |s, l| {
        if s % 500 == 0 {
            println!("vc step={s} loss={l:.4} elapsed={:.0}s", t0.elapsed().as_secs_f64());
        }
    })
    .unwrap();

    // convert held-out clips to each target and classify
    let mut hits = 0usize;
    let mut total = 0usize;
    for (srcs, target, target_idx) in [(&held_a, "bob", 1usize), (&held_b, "alice", 0usize)] {
        for (i, p) in srcs.iter().enumerate() {
            let input = revoice::audio::read_wav(p).unwrap();
            let out = convert(&ckpt, &enc_path, &input, target, temp, 77 + i as u64).unwrap();
            let probs = classify(&cls, &out).unwrap();
            let pred = if probs[0] > probs[1] { 0 } else { 1 };
            hits += usize::from(pred == target_idx);
            total += 1;
            println!(
                "convert {} -> {target}: p_target={:.3} {}",
                p.file_name().unwrap().to_string_lossy(),
                probs[target_idx],
                if pred == target_idx { "HIT" } else { "MISS" }
            );
        }
    }
    println!(
        "target-label rate: {hits}/{total} = {:.0}% elapsed={:.0}s",
        hits as f64 / total as f64 * 100.0,
        t0.elapsed().as_secs_f64()
    );
}
