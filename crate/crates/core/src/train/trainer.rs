use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::mpsc::sync_channel;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{clip_global_norm, Adam, AdamConfig};
use super::model::{AvsrModel, ModelConfig, ModelInput};
use super::schedule::LrSchedule;
use super::synth::{gen_synthetic, SynthConfig, SynthItem};
use crate::audio;
use crate::augment::{apply_noise, mtr_sample, MtrConfig, NoiseKind, NoiseSpec};
use crate::error::{Error, Result};
use crate::io::Checkpoint;
use crate::par::Pool;
use crate::rnnt::{LabelSequence, WerTally};
use crate::tensor::Tensor;
use crate::video::FrontEndKind;

pub const METRICS_HEADER: &str = "step,loss,lr,grad_norm";
const PREFETCH: usize = 2;

/// Multi-style training noise on the audio stream.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub mtr: MtrConfig,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            mtr: MtrConfig::default(),
        }
    }
}

/// Synthetic corpus sizes and generator settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train_examples: usize,
    pub eval_examples: usize,
    /// Seed of the corpus; the eval split uses a derived seed.
    pub seed: u64,
    pub synth: SynthConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_examples: 500,
            eval_examples: 50,
            seed: 1,
            synth: SynthConfig::default(),
        }
    }
}

/// Everything a training run depends on. Missing JSON fields take the desk
/// defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    /// Examples per optimizer step.
    pub batch_size: usize,
    /// Seeds initialization, batch order and augmentation.
    pub seed: u64,
    /// Optimizer steps to run.
    pub steps: u64,
    pub schedule: LrSchedule,
    pub adam: AdamConfig,
    /// Global gradient-norm clip.
    pub clip_norm: f64,
    pub augment: AugmentConfig,
    pub data: DataConfig,
    /// Evaluate every this many steps (0 disables periodic evaluation).
    pub eval_every: u64,
    /// Stop once eval WER reaches this value.
    pub target_wer: Option<f64>,
    /// Save a checkpoint every this many steps (0 disables).
    pub checkpoint_every: u64,
    /// Checkpoints kept on disk.
    pub keep_checkpoints: usize,
    /// Worker threads; `AVT_THREADS` or the machine's parallelism when absent.
    pub threads: Option<usize>,
    /// Output directory for metrics and checkpoints; the CLI's `--out` wins.
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk(FrontEndKind::Vit)
    }
}

impl RunConfig {
    pub fn desk(frontend: FrontEndKind) -> Self {
        Self {
            model: ModelConfig::desk(frontend),
            batch_size: 8,
            seed: 0,
            steps: 3000,
            schedule: LrSchedule {
                peak: 3e-3,
                warmup_iters: 100,
                plateau_end: 2000,
                final_lr: 3e-4,
                total_iters: 3000,
                ..LrSchedule::transformer()
            },
            adam: AdamConfig::default(),
            clip_norm: 5.0,
            augment: AugmentConfig::default(),
            data: DataConfig::default(),
            eval_every: 250,
            target_wer: None,
            checkpoint_every: 500,
            keep_checkpoints: 3,
            threads: None,
            out_dir: None,
        }
    }

    pub fn full(frontend: FrontEndKind) -> Self {
        Self {
            model: ModelConfig::full(frontend),
            steps: 300_000,
            schedule: LrSchedule::transformer(),
            ..Self::desk(frontend)
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        if self.data.train_examples == 0 {
            return Err(Error::Config("training set is empty".into()));
        }
        self.schedule.validate()?;
        self.model.encoder.validate()
    }

    pub fn pool(&self) -> Pool {
        match self.threads {
            Some(n) => Pool::new(n),
            None => Pool::from_env(),
        }
    }
}

/// One CSV row.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub records: Vec<StepRecord>,
    /// `(step, wer)` for every evaluation.
    pub evals: Vec<(u64, f64)>,
    pub final_step: u64,
    pub checkpoints: Vec<PathBuf>,
}

impl TrainReport {
    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }
}

/// SplitMix64 over the parts, for independent per-(step, example) streams.
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut z = 0x9E37_79B9_7F4A_7C15u64;
    for &p in parts {
        z = z.wrapping_add(p).wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

/// The corpus and the stateless batch order over it.
#[derive(Clone, Debug)]
pub struct DataSource {
    pub train: Vec<SynthItem>,
    pub eval: Vec<SynthItem>,
    cfg: RunConfig,
}

pub type Batch = Vec<(ModelInput, LabelSequence)>;

impl DataSource {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        let d = &cfg.data;
        let train = gen_synthetic(d.seed, d.train_examples, &d.synth)?;
        let eval = if d.eval_examples > 0 {
            gen_synthetic(derive_seed(&[d.seed, 1]), d.eval_examples, &d.synth)?
        } else {
            Vec::new()
        };
        Ok(Self {
            train,
            eval,
            cfg: cfg.clone(),
        })
    }

    /// Training indices for 1-based `step`: consecutive slices of per-epoch
    /// permutations, a pure function of (seed, step).
    pub fn batch_indices(&self, step: u64) -> Vec<usize> {
        let n = self.train.len() as u64;
        let b = self.cfg.batch_size as u64;
        let mut perm_epoch = u64::MAX;
        let mut perm: Vec<usize> = Vec::new();
        (0..b)
            .map(|j| {
                let k = (step - 1) * b + j;
                let epoch = k / n;
                if epoch != perm_epoch {
                    perm = (0..n as usize).collect();
                    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(&[self.cfg.seed, epoch])));
                    perm_epoch = epoch;
                }
                perm[(k % n) as usize]
            })
            .collect()
    }

    /// Renders `item` into model inputs, computing only the streams in use.
    pub fn input(&self, item: &SynthItem, noise: Option<(&NoiseSpec, Option<&audio::Waveform>)>, mtr_seed: Option<u64>) -> Result<ModelInput> {
        let modality = self.cfg.model.modality;
        let video = if modality.uses_video() { Some(item.render_video()?) } else { None };
        let audio = if modality.uses_audio() {
            let mut wave = item.render_audio()?;
            if let Some(seed) = mtr_seed {
                wave = mtr_sample(&wave, &self.cfg.augment.mtr, &mut ChaCha8Rng::seed_from_u64(seed))?;
            }
            if let Some((spec, other)) = noise {
                wave = apply_noise(&wave, spec, other)?;
            }
            Some(audio::features(&wave)?)
        } else {
            None
        };
        Ok(ModelInput { video, audio })
    }

    pub fn batch(&self, step: u64) -> Result<Batch> {
        self.batch_indices(step)
            .into_iter()
            .enumerate()
            .map(|(j, i)| {
                let item = &self.train[i];
                let mtr = self.cfg.augment.enabled.then(|| derive_seed(&[self.cfg.seed, step, j as u64]));
                Ok((self.input(item, None, mtr)?, item.transcript()?))
            })
            .collect()
    }
}

pub struct Trainer {
    pub cfg: RunConfig,
    pub model: AvsrModel,
    pub adam: Adam,
    /// Completed optimizer steps.
    pub step: u64,
    pub data: Arc<DataSource>,
    pub pool: Pool,
}

impl Trainer {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        crate::heap::retain_freed_memory();
        let model = AvsrModel::new(cfg.model.clone(), cfg.seed)?;
        let adam = Adam::new(cfg.adam, &model.store);
        Ok(Self {
            data: Arc::new(DataSource::new(&cfg)?),
            pool: cfg.pool(),
            cfg,
            model,
            adam,
            step: 0,
        })
    }

    pub fn with_pool(mut self, pool: Pool) -> Self {
        self.pool = pool;
        self
    }

    /// Restores parameters, optimizer moments and step from a checkpoint
    /// written by [`Trainer::checkpoint`]; the run configuration comes from
    /// the checkpoint.
    pub fn resume(ckpt: &Checkpoint) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_value(ckpt.config.clone())?;
        let mut t = Self::new(cfg)?;
        load_params(&mut t.model, ckpt)?;
        for (i, id) in t.model.store.ids().enumerate() {
            let name = t.model.store.name(id).to_string();
            for (prefix, slot) in [("adam.m.", &mut t.adam.m[i]), ("adam.v.", &mut t.adam.v[i])] {
                let v = ckpt.get(&format!("{prefix}{name}")).ok_or_else(|| Error::Format(format!("checkpoint lacks {prefix}{name}")))?;
                if v.shape() != slot.shape() {
                    return Err(Error::dim("resume", slot.shape(), v.shape()));
                }
                *slot = v.clone();
            }
        }
        t.step = ckpt.step;
        t.adam.steps = ckpt.step;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let store = &self.model.store;
        let mut tensors: Vec<(String, Tensor)> = store.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
        for (i, (name, _)) in store.iter().enumerate() {
            tensors.push((format!("adam.m.{name}"), self.adam.m[i].clone()));
            tensors.push((format!("adam.v.{name}"), self.adam.v[i].clone()));
        }
        Ok(Checkpoint {
            step: self.step,
            config: serde_json::to_value(&self.cfg)?,
            tensors,
        })
    }

    /// Forward/backward over the batch on the pool, then a clipped Adam update.
    pub fn train_step(&mut self, batch: &Batch) -> Result<StepRecord> {
        let model = &self.model;
        let results = self.pool.map(batch, |(input, labels)| model.gradients(input, labels));
        let n = batch.len() as f64;
        let mut loss = 0.0;
        let mut grads: Option<Vec<Tensor>> = None;
        for r in results {
            let (l, g) = r?;
            loss += l;
            match &mut grads {
                None => grads = Some(g),
                Some(acc) => {
                    for (a, b) in acc.iter_mut().zip(&g) {
                        a.data_mut().iter_mut().zip(b.data()).for_each(|(x, y)| *x += y);
                    }
                }
            }
        }
        let loss = loss / n;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("training loss at step {}", self.step + 1)));
        }
        let mut grads = grads.unwrap_or_default();
        grads.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|x| *x /= n));
        let grad_norm = clip_global_norm(&mut grads, self.cfg.clip_norm);
        let step = self.step + 1;
        let lr = self.cfg.schedule.lr(step);
        self.adam.step(&mut self.model.store, &grads, lr)?;
        self.step = step;
        Ok(StepRecord { step, loss, lr, grad_norm })
    }

    /// Corpus WER of greedy decodes on `items` under an evaluation noise
    /// condition. Overlap borrows one fixed other utterance of the set.
    pub fn evaluate(&self, items: &[SynthItem], noise: &NoiseSpec) -> Result<f64> {
        let overlap_src = match noise.kind {
            NoiseKind::Overlap if items.len() < 2 => {
                return Err(Error::Config("overlap evaluation needs at least two utterances".into()))
            }
            NoiseKind::Overlap => Some((derive_seed(&[self.cfg.seed, noise.seed]) % items.len() as u64) as usize),
            _ => None,
        };
        let indexed: Vec<usize> = (0..items.len()).collect();
        let hyps = self.pool.map(&indexed, |&i| -> Result<String> {
            let item = &items[i];
            let other = match overlap_src {
                Some(o) => Some(items[if o == i { (o + 1) % items.len() } else { o }].render_audio()?),
                None => None,
            };
            let spec = NoiseSpec {
                seed: derive_seed(&[noise.seed, i as u64]),
                ..*noise
            };
            let input = self.data.input(item, Some((&spec, other.as_ref())), None)?;
            Ok(self.model.decode(&input)?.to_text())
        });
        let mut tally = WerTally::default();
        for (item, hyp) in items.iter().zip(hyps) {
            tally.add(&item.text, &hyp?);
        }
        tally.rate()
    }

    pub fn evaluate_clean(&self) -> Result<f64> {
        self.evaluate(&self.data.eval, &NoiseSpec::clean())
    }

    /// Runs until `cfg.steps` (or the WER target), prefetching batches on a
    /// worker thread. Writes `metrics.csv`, `eval.csv` and checkpoints when an
    /// output directory is configured.
    pub fn run(&mut self, mut on_step: impl FnMut(&StepRecord)) -> Result<TrainReport> {
        let out = self.cfg.out_dir.clone();
        let mut metrics = match &out {
            Some(dir) => Some(open_csv(dir, "metrics.csv", METRICS_HEADER)?),
            None => None,
        };
        let mut evals_csv = match &out {
            Some(dir) => Some(open_csv(dir, "eval.csv", "step,wer")?),
            None => None,
        };
        let mut report = TrainReport::default();
        let (start, end) = (self.step + 1, self.cfg.steps);
        let data = Arc::clone(&self.data);
        let result = std::thread::scope(|scope| -> Result<()> {
            let (tx, rx) = sync_channel::<Result<Batch>>(PREFETCH);
            scope.spawn(move || {
                for step in start..=end {
                    if tx.send(data.batch(step)).is_err() {
                        break;
                    }
                }
            });
            for batch in rx {
                let batch = batch?;
                let rec = self.train_step(&batch)?;
                on_step(&rec);
                if let Some(f) = &mut metrics {
                    writeln!(f, "{},{},{},{}", rec.step, rec.loss, rec.lr, rec.grad_norm).map_err(|e| io_err(out.as_deref(), e))?;
                }
                report.records.push(rec);
                let step = rec.step;
                if let Some(dir) = &out {
                    if self.cfg.checkpoint_every > 0 && step % self.cfg.checkpoint_every == 0 {
                        report.checkpoints.push(self.save_checkpoint(dir)?);
                    }
                }
                let last = step == end;
                if !self.data.eval.is_empty() && ((self.cfg.eval_every > 0 && step % self.cfg.eval_every == 0) || last) {
                    let wer = self.evaluate_clean()?;
                    log::info!("step {step}: eval WER {wer:.4}");
                    report.evals.push((step, wer));
                    if let Some(f) = &mut evals_csv {
                        writeln!(f, "{step},{wer}").map_err(|e| io_err(out.as_deref(), e))?;
                    }
                    if self.cfg.target_wer.is_some_and(|t| wer <= t) {
                        break;
                    }
                }
            }
            Ok(())
        });
        result?;
        report.final_step = self.step;
        if let Some(dir) = &out {
            if report.checkpoints.last().is_none_or(|p| !p.ends_with(checkpoint_name(self.step))) {
                report.checkpoints.push(self.save_checkpoint(dir)?);
            }
        }
        Ok(report)
    }

    /// Writes `ckpt-NNNNNN.json` and prunes all but the newest
    /// `keep_checkpoints`.
    pub fn save_checkpoint(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| io_err(Some(dir), e))?;
        let path = dir.join(checkpoint_name(self.step));
        self.checkpoint()?.save(&path)?;
        let mut existing = list_checkpoints(dir)?;
        while existing.len() > self.cfg.keep_checkpoints.max(1) {
            let old = existing.remove(0);
            for p in [old.clone(), crate::io::checkpoint::blob_path(&old)] {
                fs::remove_file(&p).map_err(|e| io_err(Some(&p), e))?;
            }
        }
        Ok(path)
    }
}

fn checkpoint_name(step: u64) -> String {
    format!("ckpt-{step:06}.json")
}

/// Checkpoint manifests in `dir`, oldest first.
pub fn list_checkpoints(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| io_err(Some(dir), e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("ckpt-") && n.ends_with(".json"))
        })
        .collect();
    out.sort();
    Ok(out)
}

/// Copies named parameters from a checkpoint into `model`.
pub fn load_params(model: &mut AvsrModel, ckpt: &Checkpoint) -> Result<()> {
    let names: Vec<String> = model.store.iter().map(|(n, _)| n.to_string()).collect();
    for name in names {
        let t = ckpt.get(&name).ok_or_else(|| Error::Format(format!("checkpoint lacks parameter {name}")))?;
        model.store.set(&name, t.clone())?;
    }
    Ok(())
}

/// Rebuilds the model a checkpoint was trained with.
pub fn model_from_checkpoint(ckpt: &Checkpoint) -> Result<(RunConfig, AvsrModel)> {
    let cfg: RunConfig = serde_json::from_value(ckpt.config.clone())?;
    let mut model = AvsrModel::new(cfg.model.clone(), cfg.seed)?;
    load_params(&mut model, ckpt)?;
    Ok((cfg, model))
}

fn io_err(path: Option<&Path>, source: std::io::Error) -> Error {
    Error::Io {
        path: path.map(Path::to_path_buf).unwrap_or_default(),
        source,
    }
}

fn open_csv(dir: &Path, name: &str, header: &str) -> Result<File> {
    fs::create_dir_all(dir).map_err(|e| io_err(Some(dir), e))?;
    let path = dir.join(name);
    let fresh = !path.exists();
    let mut f = OpenOptions::new().create(true).append(true).open(&path).map_err(|e| io_err(Some(&path), e))?;
    if fresh {
        writeln!(f, "{header}").map_err(|e| io_err(Some(&path), e))?;
    }
    Ok(f)
}
