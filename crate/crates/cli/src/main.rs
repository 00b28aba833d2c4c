use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use avsr_core::audio;
use avsr_core::augment::NoiseSpec;
use avsr_core::io::{read_wav, AvtFile, Checkpoint};
use avsr_core::rnnt::WerTally;
use avsr_core::train::{
    bench_frontend, gen_synthetic, load_params, model_from_checkpoint, write_dataset, ModelConfig, ModelInput,
    RunConfig, SynthConfig, Trainer,
};
use avsr_core::video::{FrontEndKind, VideoClip, TARGET_FPS};
use clap::{Parser, Subcommand, ValueEnum};

/// Audio-visual speech recognition: features, synthetic data, training,
/// evaluation, decoding and front-end benchmarks.
#[derive(Parser)]
#[command(name = "avsr", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Stacked log-mel features of a 16 kHz mono WAV, written as a [T, 240, 1, 1] f64 AVT file.
    Features {
        #[arg(long)]
        wav: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Writes a synthetic corpus: NNNN.avt, NNNN.wav and transcripts.tsv.
    Synth {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 3)]
        min_len: usize,
        #[arg(long, default_value_t = 6)]
        max_len: usize,
    },
    /// Trains from a JSON run configuration; writes metrics.csv, eval.csv and checkpoints.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Corpus WER of a checkpoint on the configuration's held-out synthetic set.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// none, babble20, babble10, babble0 or overlap
        #[arg(long, default_value = "none")]
        noise: String,
    },
    /// Greedy transcript of one clip, printed as one line.
    Decode {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        wav: Option<PathBuf>,
        /// Frame rate of the input clip.
        #[arg(long, default_value_t = TARGET_FPS)]
        fps: f64,
    },
    /// Parameter count, analytic FLOPs and forward latency of a video front-end.
    Bench {
        #[arg(long, value_enum)]
        frontend: Frontend,
        #[arg(long, default_value_t = 8)]
        frames: usize,
        #[arg(long, default_value_t = 20)]
        repeats: usize,
        #[arg(long, value_enum, default_value_t = Preset::Full)]
        preset: Preset,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Corpus WER between two parallel text files, one utterance per line.
    Wer {
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        hyp: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Frontend {
    Vgg,
    Vit,
}

impl From<Frontend> for FrontEndKind {
    fn from(f: Frontend) -> Self {
        match f {
            Frontend::Vgg => FrontEndKind::Vgg,
            Frontend::Vit => FrontEndKind::Vit,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Full,
    Desk,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Features { wav, out } => features(&wav, &out),
        Command::Synth {
            seed,
            n,
            out,
            min_len,
            max_len,
        } => {
            let cfg = SynthConfig {
                len_min: min_len,
                len_max: max_len,
                spaces: true,
            };
            let items = gen_synthetic(seed, n, &cfg)?;
            write_dataset(&out, &items)?;
            println!("wrote {n} examples to {}", out.display());
            Ok(())
        }
        Command::Train { config, out, resume } => train(&config, &out, resume.as_deref()),
        Command::Eval { config, ckpt, noise } => {
            let cfg = RunConfig::load(&config).with_context(|| format!("loading {}", config.display()))?;
            let noise: NoiseSpec = noise.parse()?;
            let mut trainer = Trainer::new(cfg)?;
            load_params(&mut trainer.model, &Checkpoint::load(&ckpt)?)?;
            let wer = trainer.evaluate(&trainer.data.eval, &noise)?;
            println!("noise={noise} utterances={} wer={wer:.4}", trainer.data.eval.len());
            Ok(())
        }
        Command::Decode { ckpt, input, wav, fps } => decode(&ckpt, &input, wav.as_deref(), fps),
        Command::Bench {
            frontend,
            frames,
            repeats,
            preset,
            seed,
        } => {
            let kind = FrontEndKind::from(frontend);
            let m = match preset {
                Preset::Full => ModelConfig::full(kind),
                Preset::Desk => ModelConfig::desk(kind),
            };
            let r = bench_frontend(kind, &m.vit, &m.vgg, frames, repeats, seed)?;
            println!("frontend={kind:?} frames={} params={} flops={}", r.frames, r.params, r.flops);
            println!("gflops_per_frame={:.4}", r.flops as f64 / r.frames as f64 / 1e9);
            println!("repeats={} mean_ms={:.3} std_ms={:.3}", r.latency.runs_ms.len(), r.latency.mean_ms, r.latency.std_ms);
            Ok(())
        }
        Command::Wer { reference, hyp } => {
            let read = |p: &Path| fs::read_to_string(p).with_context(|| format!("reading {}", p.display()));
            let (r, h) = (read(&reference)?, read(&hyp)?);
            let (r, h): (Vec<&str>, Vec<&str>) = (r.lines().collect(), h.lines().collect());
            if r.len() != h.len() {
                bail!("{} reference lines but {} hypothesis lines", r.len(), h.len());
            }
            let mut tally = WerTally::default();
            for (a, b) in r.iter().zip(&h) {
                tally.add(a, b);
            }
            println!("utterances={} words={} edits={} wer={:.4}", r.len(), tally.words, tally.edits, tally.rate()?);
            Ok(())
        }
    }
}

fn features(wav: &Path, out: &Path) -> Result<()> {
    let wave = read_wav(wav)?;
    let f = audio::features(&wave)?;
    let t = f.frames();
    AvtFile::from_tensor(&f.values.reshape([t, audio::FEATURE_DIM, 1, 1])?)?.write(out)?;
    println!("{t} frames × {} features at {:.3} Hz", audio::FEATURE_DIM, f.frame_rate);
    Ok(())
}

fn train(config: &Path, out: &Path, resume: Option<&Path>) -> Result<()> {
    let mut trainer = match resume {
        Some(ckpt) => Trainer::resume(&Checkpoint::load(ckpt)?)?,
        None => Trainer::new(RunConfig::load(config).with_context(|| format!("loading {}", config.display()))?)?,
    };
    trainer.cfg.out_dir = Some(out.to_path_buf());
    fs::create_dir_all(out)?;
    fs::write(out.join("config.json"), serde_json::to_string_pretty(&trainer.cfg)?)?;
    log::info!("{} parameters, {} threads", trainer.model.param_count(), trainer.pool.threads());
    let every = (trainer.cfg.steps / 20).max(1);
    let report = trainer.run(|r| {
        if r.step % every == 0 {
            log::info!("step {} loss {:.4} lr {:.3e} grad_norm {:.3}", r.step, r.loss, r.lr, r.grad_norm);
        }
    })?;
    if let Some((step, wer)) = report.evals.last() {
        println!("step={step} eval_wer={wer:.4}");
    }
    if let Some(ckpt) = report.checkpoints.last() {
        println!("checkpoint={}", ckpt.display());
    }
    Ok(())
}

fn decode(ckpt: &Path, input: &Path, wav: Option<&Path>, fps: f64) -> Result<()> {
    let (_, model) = model_from_checkpoint(&Checkpoint::load(ckpt)?)?;
    let clip = VideoClip::from_avt(&AvtFile::read(input)?, fps)?;
    let audio = match wav {
        Some(p) => Some(audio::features(&read_wav(p)?)?),
        None => None,
    };
    let hyp = model.decode(&ModelInput {
        video: Some(clip),
        audio,
    })?;
    println!("{}", hyp.to_text());
    Ok(())
}
