//! Command-line front end.
//!
//! Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numeric
//! failure (NaN/Inf). Every command echoes a one-line config summary to
//! stderr before doing work, and all machine-readable output is
//! line-oriented `key=value`. Output files are written to a temp name and
//! renamed into place so failures never leave partial artifacts.

use crate::audio::{read_wav, wav_bytes};
use crate::dsp;
use crate::error::{Error, Result};
use crate::infer::bench_infer;
use crate::metrics::{
    identification_accuracy, mcd_report, train_classifier, ClassifierCheckpoint, ClassifierConfig,
};
use crate::train::{convert, fit_speaker, train, Checkpoint, Manifest, Preset, TrainConfig};
use clap::{Args, Parser, Subcommand};
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

/// Write bytes to `<path>.tmp.<pid>` and rename over the target.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::UnsupportedFormat(format!("{}: not a file path", path.display())))?;
    let tmp = dir.join(format!(
        ".{}.tmp.{}",
        name.to_string_lossy(),
        std::process::id()
    ));
    fs::write(&tmp, bytes).map_err(|e| Error::io(tmp.display().to_string(), e))?;
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path.display().to_string(), e)
    })?;
    Ok(())
}

#[derive(Parser)]
#[command(
    name = "revoice",
    version,
    about = "Voice conversion through an ASR-feature bottleneck"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the waveform decoder and speaker table on a manifest
    Train(TrainArgs),
    /// Add one new speaker to a trained checkpoint
    FitSpeaker(FitArgs),
    /// Convert an utterance to a target speaker's voice
    Convert(ConvertArgs),
    /// Evaluation metrics
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Train the speaker-identification classifier
    TrainClassifier(TrainClassifierArgs),
    /// Benchmark incremental against naive generation
    Bench(BenchArgs),
    /// Dump frame features to a binary matrix file
    Features(FeaturesArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Manifest: one `speaker<TAB>wav_path` per line
    #[arg(long)]
    manifest: PathBuf,
    /// Encoder checkpoint (tensor archive with adjacent .cfg)
    #[arg(long)]
    encoder: PathBuf,
    /// Output checkpoint path
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    steps: usize,
    /// Condition the decoder on the input pitch contour
    #[arg(long)]
    f0: bool,
    #[arg(long, default_value = "toy")]
    preset: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-3)]
    lr: f32,
    #[arg(long, default_value_t = 8192)]
    crop_samples: usize,
    #[arg(long, default_value_t = 1)]
    batch_size: usize,
    /// Save an intermediate checkpoint every N steps (0 = only at the end)
    #[arg(long, default_value_t = 0)]
    checkpoint_every: usize,
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Name of the new speaker (must appear in the manifest)
    #[arg(long)]
    name: String,
    #[arg(long)]
    steps: usize,
    #[arg(long)]
    out: PathBuf,
    /// Encoder checkpoint; defaults to the path recorded in the checkpoint
    #[arg(long)]
    encoder: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ConvertArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    encoder: PathBuf,
    /// Input WAV (16 kHz mono PCM16)
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Target speaker name
    #[arg(long)]
    speaker: String,
    #[arg(long, default_value_t = 1.0)]
    temperature: f32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Subcommand)]
enum EvalCommand {
    /// Mel-cepstral distortion with DTW alignment
    Mcd {
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        hyp: PathBuf,
    },
    /// Speaker-identification accuracy over a manifest
    SpeakerId {
        #[arg(long)]
        classifier: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
    },
}

#[derive(Args)]
struct TrainClassifierArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    steps: usize,
    /// Conv channels (128 is the full-scale setting; use fewer for quick runs)
    #[arg(long, default_value_t = 128)]
    channels: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Seconds of audio to generate (steps = seconds * 16000)
    #[arg(long)]
    seconds: f64,
}

#[derive(Args)]
struct FeaturesArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// mel | f0 | cepstra
    #[arg(long)]
    kind: String,
}

pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Train(a) => {
            eprintln!(
                "config: cmd=train manifest={} encoder={} out={} steps={} f0={} preset={} seed={} lr={} crop_samples={} batch_size={} checkpoint_every={}",
                a.manifest.display(), a.encoder.display(), a.out.display(), a.steps,
                u8::from(a.f0), a.preset, a.seed, a.lr, a.crop_samples, a.batch_size, a.checkpoint_every
            );
            let manifest = Manifest::load(&a.manifest)?;
            let config = TrainConfig {
                steps: a.steps,
                batch_size: a.batch_size,
                crop_samples: a.crop_samples,
                lr: a.lr,
                seed: a.seed,
                use_f0: a.f0,
                preset: Preset::parse(&a.preset)?,
                checkpoint_every: a.checkpoint_every,
            };
            let ckpt = train(&manifest, &a.encoder, &config, Some(&a.out), &mut |s, l| {
                println!("step={s} loss={l:.4}");
            })?;
            ckpt.save(&a.out)?;
            println!("checkpoint={}", a.out.display());
            Ok(())
        }
        Command::FitSpeaker(a) => {
            eprintln!(
                "config: cmd=fit-speaker ckpt={} manifest={} name={} steps={} out={} seed={}",
                a.ckpt.display(), a.manifest.display(), a.name, a.steps, a.out.display(), a.seed
            );
            let ckpt = Checkpoint::load(&a.ckpt)?;
            let encoder = a.encoder.unwrap_or_else(|| PathBuf::from(&ckpt.encoder_path));
            let manifest = Manifest::load(&a.manifest)?;
            let fitted = fit_speaker(ckpt, &manifest, &a.name, a.steps, &encoder, a.seed, &mut |s, l| {
                println!("step={s} loss={l:.4}");
            })?;
            fitted.save(&a.out)?;
            println!("checkpoint={}", a.out.display());
            Ok(())
        }
        Command::Convert(a) => {
            eprintln!(
                "config: cmd=convert ckpt={} encoder={} in={} out={} speaker={} temperature={} seed={}",
                a.ckpt.display(), a.encoder.display(), a.input.display(), a.out.display(),
                a.speaker, a.temperature, a.seed
            );
            let ckpt = Checkpoint::load(&a.ckpt)?;
            let input = read_wav(&a.input)?;
            let out = convert(&ckpt, &a.encoder, &input, &a.speaker, a.temperature, a.seed)?;
            write_atomic(&a.out, &wav_bytes(&out))?;
            println!("out={} samples={}", a.out.display(), out.len());
            Ok(())
        }
        Command::Eval(EvalCommand::Mcd { reference, hyp }) => {
            eprintln!(
                "config: cmd=eval-mcd ref={} hyp={}",
                reference.display(),
                hyp.display()
            );
            let r = read_wav(&reference)?;
            let h = read_wav(&hyp)?;
            let report = mcd_report(&r, &h)?;
            println!(
                "mcd_db={:.3} frames_ref={} frames_hyp={} path_len={}",
                report.mcd_db, report.frames_ref, report.frames_hyp, report.path_len
            );
            Ok(())
        }
        Command::Eval(EvalCommand::SpeakerId { classifier, manifest }) => {
            eprintln!(
                "config: cmd=eval-speaker-id classifier={} manifest={}",
                classifier.display(),
                manifest.display()
            );
            let ckpt = ClassifierCheckpoint::load(&classifier)?;
            let manifest = Manifest::load(&manifest)?;
            let (pct, n) = identification_accuracy(&ckpt, &manifest)?;
            println!("accuracy_pct={pct:.2} n={n}");
            Ok(())
        }
        Command::TrainClassifier(a) => {
            eprintln!(
                "config: cmd=train-classifier manifest={} out={} steps={} channels={} seed={}",
                a.manifest.display(), a.out.display(), a.steps, a.channels, a.seed
            );
            let manifest = Manifest::load(&a.manifest)?;
            let n_classes = manifest.speakers().len();
            let mut config = ClassifierConfig::paper(n_classes);
            config.channels = a.channels;
            let ckpt = train_classifier(&manifest, &config, a.steps, a.seed, &mut |s, l| {
                println!("step={s} loss={l:.4}");
            })?;
            ckpt.save(&a.out)?;
            println!("classifier={}", a.out.display());
            Ok(())
        }
        Command::Bench(a) => {
            eprintln!(
                "config: cmd=bench ckpt={} seconds={}",
                a.ckpt.display(),
                a.seconds
            );
            let ckpt = Checkpoint::load(&a.ckpt)?;
            let report = bench_infer(&ckpt.decoder, &ckpt.decoder_config, a.seconds)?;
            print!("{}", report.to_text());
            Ok(())
        }
        Command::Features(a) => {
            eprintln!(
                "config: cmd=features in={} out={} kind={}",
                a.input.display(),
                a.out.display(),
                a.kind
            );
            let w = read_wav(&a.input)?;
            let (rows, cols, data) = match a.kind.as_str() {
                "mel" => {
                    let mel = dsp::log_mel(&w, dsp::DEFAULT_N_MELS)?;
                    (mel.t_frames(), mel.n_mels, mel.frames)
                }
                "f0" => {
                    let f0 = dsp::estimate_f0(&w)?;
                    (f0.len(), 1, f0.values_hz)
                }
                "cepstra" => {
                    let c = dsp::mel_cepstra(&w, dsp::DEFAULT_CEPSTRA_ORDER)?;
                    (c.t_frames(), c.order, c.frames)
                }
                other => {
                    return Err(Error::UnsupportedFormat(format!(
                        "unknown feature kind '{other}', expected mel|f0|cepstra"
                    )))
                }
            };
            let bytes = dsp::feature_matrix_bytes(rows, cols, &data);
            write_atomic(&a.out, &bytes)?;
            println!("out={} rows={rows} cols={cols}", a.out.display());
            Ok(())
        }
    }
}
