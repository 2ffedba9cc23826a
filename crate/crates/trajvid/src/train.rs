//! Training loop, checkpoints and the NDJSON training log.
//!
//! Steps `1..=core_steps` pretrain the backbone without conditioning; steps
//! after that train the injector, flow mapper and adapters with the backbone
//! frozen. All randomness of step `s` (batch choice, timesteps, noise) is
//! derived from `(seed, s)`, so a resumed run replays an uninterrupted one.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use trajvid_core::scene::mix64;
use trajvid_core::trajectory::SparseFlow;
use trajvid_core::FlowField;

use crate::config::{Phase, TrainConfig};
use crate::dataset::ClipRecord;
use crate::error::{Error, Result};
use crate::io;
use crate::model::{Ablation, ConditionInputs, Model, ModelConfig};
use crate::nn::optim::{AdamW, AdamWConfig};
use crate::nn::params::{read_manifest, Group};

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub loss: f32,
    pub lr: f64,
    pub wall_ms: u64,
}

/// Training progress stored in a checkpoint manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub seed: u64,
    pub step: usize,
    pub core_steps: usize,
    pub cond_steps: usize,
    /// Phase whose optimizer moments are stored, if any.
    pub optimizer_phase: Option<Phase>,
    pub optimizer_steps: u64,
    pub completion_trained: bool,
}

/// `extra` section of a checkpoint manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointInfo {
    pub model: ModelConfig,
    pub ablation: Ablation,
    pub train: TrainState,
}

pub fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix64(seed ^ mix64(step as u64 ^ 0x7472_6169_6e00)))
}

pub fn standard_normal(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

pub struct Trainer {
    pub model: Model,
    pub config: TrainConfig,
    pub seed: u64,
    step: usize,
    optimizer: Option<(Phase, AdamW)>,
    pub completion_trained: bool,
}

impl Trainer {
    pub fn new(model: Model, config: &TrainConfig, seed: u64) -> Self {
        Self {
            model,
            config: config.clone(),
            seed,
            step: 0,
            optimizer: None,
            completion_trained: false,
        }
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn total_steps(&self) -> usize {
        self.config.core_steps + self.config.cond_steps
    }

    pub fn phase_of(&self, step: usize) -> Phase {
        if step <= self.config.core_steps {
            Phase::Core
        } else {
            Phase::Conditioned
        }
    }

    fn lr_for(&self, phase: Phase) -> f64 {
        match phase {
            Phase::Core => self.config.core_lr,
            Phase::Conditioned => self.config.lr,
        }
    }

    fn groups_for(&self, phase: Phase) -> Vec<Group> {
        Model::trainable_groups(phase == Phase::Conditioned, self.config.freeze_core)
    }

    fn optimizer_for(&mut self, phase: Phase) -> Result<&mut AdamW> {
        if self.optimizer.as_ref().map(|(p, _)| *p) != Some(phase) {
            let cfg = AdamWConfig {
                lr: self.lr_for(phase),
                weight_decay: self.config.weight_decay,
                ..Default::default()
            };
            let vars = self.model.store.in_groups(&self.groups_for(phase));
            self.optimizer = Some((phase, AdamW::new(vars, cfg)?));
        }
        Ok(&mut self.optimizer.as_mut().expect("just set").1)
    }

    /// Batch indices, timesteps and noise for step `step`.
    pub fn draw(&self, step: usize, pool: &[usize]) -> Result<(Vec<usize>, Vec<usize>, Tensor)> {
        if pool.is_empty() {
            return Err(Error::Usage("no training clips".into()));
        }
        let c = &self.model.config;
        let b = self.config.batch_size;
        let mut rng = step_rng(self.seed, step);
        let picks: Vec<usize> = (0..b).map(|_| pool[rng.random_range(0..pool.len())]).collect();
        let n_steps = self.model.schedule.num_steps();
        let ts: Vec<usize> = (0..b).map(|_| rng.random_range(1..=n_steps)).collect();
        let shape = [b, c.frames - 1, 3, c.height, c.width];
        let noise = standard_normal(&mut rng, shape.iter().product());
        let noise = Tensor::from_vec(noise, &shape[..], &Device::Cpu)?.to_dtype(self.model.dtype())?;
        Ok((picks, ts, noise))
    }

    /// Loss at the next step without updating anything.
    pub fn peek_loss(&self, clips: &[ClipRecord], pool: &[usize]) -> Result<f32> {
        let step = self.step + 1;
        let (picks, ts, noise) = self.draw(step, pool)?;
        let loss = self.loss_for(clips, &picks, &ts, &noise, self.phase_of(step))?;
        Ok(loss.to_dtype(DType::F32)?.to_scalar::<f32>()?)
    }

    fn loss_for(&self, clips: &[ClipRecord], picks: &[usize], ts: &[usize], noise: &Tensor, phase: Phase) -> Result<Tensor> {
        let s = self.model.config.injector.seg_channels;
        let inputs: Vec<ConditionInputs> = picks.iter().map(|&i| clips[i].condition_inputs(s)).collect();
        let items: Vec<&ConditionInputs> = inputs.iter().collect();
        let videos: Vec<_> = picks.iter().map(|&i| &clips[i].video).collect();
        self.model.loss(&items, &videos, ts, noise, phase == Phase::Conditioned)
    }

    /// One optimizer step on clips drawn from `pool`.
    pub fn train_step(&mut self, clips: &[ClipRecord], pool: &[usize]) -> Result<LogRecord> {
        let start = Instant::now();
        let step = self.step + 1;
        let phase = self.phase_of(step);
        let (picks, ts, noise) = self.draw(step, pool)?;
        let loss = self.loss_for(clips, &picks, &ts, &noise, phase)?;
        let value = loss.to_dtype(DType::F32)?.to_scalar::<f32>()?;
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { step, loss: value });
        }
        let grads = loss.backward()?;
        let lr = self.lr_for(phase);
        self.optimizer_for(phase)?.step(&grads)?;
        self.step = step;
        Ok(LogRecord {
            step,
            loss: value,
            lr,
            wall_ms: start.elapsed().as_millis() as u64,
        })
    }

    pub fn state(&self) -> TrainState {
        TrainState {
            seed: self.seed,
            step: self.step,
            core_steps: self.config.core_steps,
            cond_steps: self.config.cond_steps,
            optimizer_phase: self.optimizer.as_ref().map(|(p, _)| *p),
            optimizer_steps: self.optimizer.as_ref().map(|(_, o)| o.steps_taken()).unwrap_or(0),
            completion_trained: self.completion_trained,
        }
    }

    pub fn checkpoint_bytes(&self) -> Result<Vec<u8>> {
        let info = CheckpointInfo {
            model: self.model.config.clone(),
            ablation: self.model.config.ablation(),
            train: self.state(),
        };
        let extra_tensors = self.optimizer.as_ref().map(|(_, o)| o.state_tensors()).unwrap_or_default();
        let extra = serde_json::to_value(&info).map_err(|e| Error::Checkpoint(e.to_string()))?;
        self.model.store.to_bytes(&extra_tensors, extra)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        io::write_atomic(path, &self.checkpoint_bytes()?)
    }

    /// Restores parameters, optimizer moments and the step counter.
    pub fn resume(&mut self, path: &Path) -> Result<()> {
        let bytes = io::read(path)?;
        let (manifest, rest) = self.model.store.load_bytes(&bytes)?;
        let info: CheckpointInfo =
            serde_json::from_value(manifest.extra).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if info.model != self.model.config {
            return Err(Error::Checkpoint("checkpoint model config differs from the run config".into()));
        }
        self.step = info.train.step;
        self.completion_trained = info.train.completion_trained;
        self.optimizer = None;
        if let Some(phase) = info.train.optimizer_phase {
            let opt = self.optimizer_for(phase)?;
            opt.load_state(info.train.optimizer_steps, &rest)?;
        }
        Ok(())
    }

    /// Runs to the configured total, logging every step and checkpointing
    /// every `checkpoint_every` steps and at the end.
    pub fn fit(
        &mut self,
        clips: &[ClipRecord],
        pool: &[usize],
        out_dir: Option<&Path>,
        mut on_step: impl FnMut(&LogRecord),
    ) -> Result<Vec<PathBuf>> {
        let mut log = match out_dir {
            Some(dir) => {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                let p = dir.join(LOG_FILE);
                Some((
                    fs::OpenOptions::new()
                        .create(true)
                        .append(true)
                        .open(&p)
                        .map_err(|e| Error::io(&p, e))?,
                    p,
                ))
            }
            None => None,
        };
        let mut written = Vec::new();
        let total = self.total_steps();
        while self.step < total {
            let rec = self.train_step(clips, pool)?;
            if let Some((f, p)) = log.as_mut() {
                let line = serde_json::to_string(&rec).expect("log record serializes");
                writeln!(f, "{line}").map_err(|e| Error::io(&*p, e))?;
            }
            on_step(&rec);
            if let Some(dir) = out_dir {
                if rec.step % self.config.checkpoint_every == 0 || rec.step == total {
                    let p = dir.join(checkpoint_name(rec.step));
                    self.save(&p)?;
                    written.push(p);
                }
            }
        }
        Ok(written)
    }
}

pub const LOG_FILE: &str = "train_log.ndjson";

pub fn checkpoint_name(step: usize) -> String {
    format!("ckpt_{step:06}.safetensors")
}

/// Builds a model from a checkpoint archive.
pub fn load_model(path: &Path) -> Result<(Model, CheckpointInfo)> {
    let bytes = io::read(path)?;
    let manifest = read_manifest(&bytes)?;
    let info: CheckpointInfo =
        serde_json::from_value(manifest.extra).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let model = Model::new(&info.model, info.train.seed, DType::F32)?;
    model.store.load_bytes(&bytes)?;
    Ok((model, info))
}

/// Sparse controls drawn from a dense ground-truth flow: `objects` pixels on
/// moving instances and `background` pixels elsewhere.
pub fn sample_sparse(clip: &ClipRecord, objects: usize, background: usize, rng: &mut ChaCha8Rng) -> Result<SparseFlow> {
    let flow = &clip.flow;
    let (t_n, h, w) = (flow.frames(), flow.height(), flow.width());
    let n = h * w;
    let fg: Vec<usize> = (0..n).filter(|&i| clip.ids0[i] != 0).collect();
    let bg: Vec<usize> = (0..n).filter(|&i| clip.ids0[i] == 0).collect();
    let mut picks = Vec::new();
    for (pool, k) in [(&fg, objects), (&bg, background)] {
        for _ in 0..k.min(pool.len()) {
            picks.push(pool[rng.random_range(0..pool.len())]);
        }
    }
    let mut data = vec![0.0f32; t_n * 2 * n];
    let mut mask = vec![false; t_n * n];
    for t in 0..t_n {
        let (dx, dy) = (flow.dx(t), flow.dy(t));
        for &i in &picks {
            data[2 * t * n + i] = dx[i];
            data[(2 * t + 1) * n + i] = dy[i];
            mask[t * n + i] = true;
        }
    }
    Ok(SparseFlow::new(FlowField::new(t_n, h, w, true, data)?, mask)?)
}

/// Fits the completion network to reproduce dense ground-truth flow from
/// sparse samples of it. Returns the per-step losses.
pub fn train_completion(model: &Model, clips: &[ClipRecord], pool: &[usize], steps: usize, lr: f64, seed: u64) -> Result<Vec<f32>> {
    if pool.is_empty() {
        return Err(Error::Usage("no training clips".into()));
    }
    let cfg = AdamWConfig {
        lr,
        weight_decay: 0.0,
        ..Default::default()
    };
    let mut opt = AdamW::new(model.store.in_groups(&[Group::Completion]), cfg)?;
    let dtype = model.dtype();
    let mut losses = Vec::with_capacity(steps);
    for step in 1..=steps {
        let mut rng = step_rng(seed ^ 0x636f_6d70, step);
        let clip = &clips[pool[rng.random_range(0..pool.len())]];
        let objects = rng.random_range(0..=4);
        let background = rng.random_range(0..=2);
        let sparse = sample_sparse(clip, objects, background, &mut rng)?;
        let f0 = clip.frame0();
        let frame = Tensor::from_vec(f0.data().to_vec(), (3, f0.height(), f0.width()), &Device::Cpu)?.to_dtype(dtype)?;
        let pred = model.completion.forward(&frame, &sparse)?;
        let target = Tensor::from_vec(clip.flow.data().to_vec(), pred.dims(), &Device::Cpu)?.to_dtype(dtype)?;
        let loss = (pred - target)?.sqr()?.mean_all()?;
        let value = loss.to_dtype(DType::F32)?.to_scalar::<f32>()?;
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { step, loss: value });
        }
        opt.step(&loss.backward()?)?;
        losses.push(value);
    }
    Ok(losses)
}
