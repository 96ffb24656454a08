//! Slot-based streaming training over variable-length episodes.
//!
//! `B` slots each follow one episode cursor and own one recurrent state.
//! Every step takes the current frame of every slot, so the batch is always
//! exactly `B` frames and no padding is ever produced. When a cursor runs
//! off the end of its episode the slot resets its state and pulls the next
//! episode from a global queue that is reshuffled every epoch.

use std::fs::{self, File, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::backbone::Image;
use crate::config::{Config, TrainConfig};
use crate::envsuite::{Dataset, Episode};
use crate::error::{Error, Result};
use crate::heads::Normalizer;
use crate::memory::{Memory, RecurrentState};
use crate::model::{Model, Phase};
use crate::numerics::graph::GradientReport;
use crate::numerics::io::{ByteReader, ByteWriter};
use crate::numerics::optim::{clip_global_norm, AdamW, CosineSchedule};
use crate::numerics::params::{derive_seed, fnv1a};
use crate::numerics::{Matrix, ParamStore};

const SHUFFLE_SALT: u64 = 0x5f_u64;
const NOISE_SALT: u64 = 0x7a_u64;

/// One frame of a batch: which slot, which episode, which timestep.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchItem {
    pub slot: usize,
    pub episode: usize,
    pub t: usize,
    /// Identity of this episode visit; the slot's state carries the same tag.
    pub tag: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Slot {
    pub episode: usize,
    pub t: usize,
    pub tag: u64,
    pub state: RecurrentState,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SlotPool {
    pub slots: Vec<Slot>,
    lengths: Vec<usize>,
    order: Vec<usize>,
    pos: usize,
    epoch: u64,
    shuffle: bool,
    seed: u64,
    visits: u64,
}

impl SlotPool {
    pub fn new(lengths: Vec<usize>, batch: usize, shuffle: bool, seed: u64, memory: &Memory, store: &ParamStore) -> Result<Self> {
        if lengths.is_empty() {
            return Err(Error::Data("dataset has no episodes".into()));
        }
        if let Some(i) = lengths.iter().position(|&l| l == 0) {
            return Err(Error::Data(format!("episode {i} has zero frames")));
        }
        if batch == 0 {
            return Err(Error::Config("batch must be at least 1".into()));
        }
        let mut pool = Self {
            slots: Vec::with_capacity(batch),
            lengths,
            order: Vec::new(),
            pos: 0,
            epoch: 0,
            shuffle,
            seed,
            visits: 0,
        };
        pool.order = pool.epoch_order(0);
        for _ in 0..batch {
            let (episode, tag) = pool.next_episode();
            let mut state = RecurrentState::new(memory, store);
            state.tag = Some(tag);
            pool.slots.push(Slot { episode, t: 0, tag, state });
        }
        Ok(pool)
    }

    fn epoch_order(&self, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.lengths.len()).collect();
        if self.shuffle {
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &[SHUFFLE_SALT, epoch])));
        }
        order
    }

    fn next_episode(&mut self) -> (usize, u64) {
        if self.pos == self.order.len() {
            self.epoch += 1;
            self.order = self.epoch_order(self.epoch);
            self.pos = 0;
        }
        let e = self.order[self.pos];
        self.pos += 1;
        self.visits += 1;
        (e, self.visits)
    }

    pub fn batch(&self) -> usize {
        self.slots.len()
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    /// The frames the next step consumes, one per slot.
    pub fn current(&self) -> Vec<BatchItem> {
        self.slots
            .iter()
            .enumerate()
            .map(|(slot, s)| BatchItem { slot, episode: s.episode, t: s.t, tag: s.tag })
            .collect()
    }

    /// Moves every cursor one frame forward. A slot that finishes its
    /// episode resets its state and loads the next episode at frame 0.
    pub fn advance(&mut self, memory: &Memory, store: &ParamStore) {
        for i in 0..self.slots.len() {
            self.slots[i].t += 1;
            if self.slots[i].t == self.lengths[self.slots[i].episode] {
                let (episode, tag) = self.next_episode();
                let s = &mut self.slots[i];
                s.episode = episode;
                s.t = 0;
                s.tag = tag;
                s.state.reset(memory, store, Some(tag));
            }
        }
    }

    /// Restarts every slot's current episode at frame 0 with a fresh state.
    pub fn rewind(&mut self, memory: &Memory, store: &ParamStore) {
        for s in &mut self.slots {
            s.t = 0;
            s.state.reset(memory, store, Some(s.tag));
        }
    }

    fn write(&self, w: &mut ByteWriter) {
        w.u64(self.epoch);
        w.u64(self.pos as u64);
        w.u64(self.visits);
        w.u32(self.slots.len() as u32);
        for s in &self.slots {
            w.u64(s.episode as u64);
            w.u64(s.t as u64);
            w.u64(s.tag);
            s.state.write(w);
        }
    }

    fn read_into(&mut self, r: &mut ByteReader<'_>) -> Result<()> {
        self.epoch = r.u64()?;
        self.pos = r.u64()? as usize;
        self.visits = r.u64()?;
        self.order = self.epoch_order(self.epoch);
        let n = r.u32()? as usize;
        if n != self.slots.len() {
            return Err(Error::Config(format!("checkpoint has {n} slots, config asks for {}", self.slots.len())));
        }
        for s in &mut self.slots {
            s.episode = r.u64()? as usize;
            s.t = r.u64()? as usize;
            s.tag = r.u64()?;
            s.state = RecurrentState::read(r)?;
            if s.episode >= self.lengths.len() || s.t >= self.lengths[s.episode] {
                return Err(Error::Format("slot cursor outside the dataset".into()));
            }
        }
        Ok(())
    }
}

/// Diffusion noise stream of one slot at one step.
pub fn noise_rng(seed: u64, step: u64, slot: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, &[NOISE_SALT, step, slot as u64]))
}

/// Normalized `k×n` target of future actions from `t`; past the end the
/// final action repeats.
pub fn action_chunk(ep: &Episode, t: usize, k: usize, normalizer: &Normalizer) -> Matrix {
    let n = normalizer.dim();
    let mut out = Matrix::zeros(k, n);
    for i in 0..k {
        let a = ep.actions[(t + i).min(ep.actions.len() - 1)];
        out.row_mut(i).copy_from_slice(&normalizer.normalize(&a));
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepReport {
    pub step: u64,
    pub loss: f64,
    pub action_loss: f64,
    pub image_loss: Option<f64>,
    pub lr: f64,
    pub grad_norm: f64,
    pub phase: &'static str,
    pub wall_ms: f64,
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub seed: u64,
    pub model: Model,
    pub optimizer: AdamW,
    pub schedule: CosineSchedule,
    pub pool: SlotPool,
    pub step: u64,
    fingerprint: u64,
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RMCK";
pub const CHECKPOINT_VERSION: u32 = 1;

fn fingerprint(data: &Dataset) -> u64 {
    let mut key = String::new();
    for e in &data.episodes {
        key.push_str(&format!("{}:{}:{};", e.task.name(), e.seed, e.len()));
    }
    fnv1a(key.as_bytes())
}

impl Trainer {
    pub fn new(cfg: &Config, data: &Dataset) -> Result<Self> {
        cfg.validate()?;
        let mut model = Model::new(&cfg.model, cfg.seed)?;
        if model.cfg.heads.action_dim != data.action_min.len() {
            return Err(Error::Data(format!(
                "dataset actions have {} dims, model expects {}",
                data.action_min.len(),
                model.cfg.heads.action_dim
            )));
        }
        model.normalizer = data.normalizer();
        let lengths = data.episodes.iter().map(Episode::len).collect();
        let pool = SlotPool::new(lengths, cfg.train.batch, cfg.train.shuffle, cfg.seed, &model.memory, &model.store)?;
        let optimizer = AdamW::new(&model.store, cfg.train.weight_decay);
        let schedule = CosineSchedule { initial: cfg.train.lr, min: cfg.train.lr_min, total: cfg.train.steps };
        let mut t = Self { cfg: cfg.train.clone(), seed: cfg.seed, model, optimizer, schedule, pool, step: 0, fingerprint: fingerprint(data) };
        t.sync_phase();
        Ok(t)
    }

    pub fn phase(&self) -> Phase {
        if self.step < self.cfg.phase1_steps() {
            Phase::Pretrain
        } else {
            Phase::Memory
        }
    }

    fn sync_phase(&mut self) {
        let frozen = self.phase() == Phase::Memory && !self.cfg.trainable_backbone;
        self.model.set_backbone_frozen(frozen);
    }

    pub fn done(&self) -> bool {
        self.step >= self.cfg.steps
    }

    /// One optimizer step over the current batch.
    pub fn train_step(&mut self, data: &Dataset) -> Result<StepReport> {
        self.run_step(data, true)
    }

    /// Forward and state bookkeeping for one batch without touching the
    /// parameters.
    pub fn eval_step(&mut self, data: &Dataset) -> Result<StepReport> {
        self.run_step(data, false)
    }

    fn run_step(&mut self, data: &Dataset, update: bool) -> Result<StepReport> {
        let started = Instant::now();
        if self.step > 0 && self.step == self.cfg.phase1_steps() {
            self.pool.rewind(&self.model.memory, &self.model.store);
        }
        self.sync_phase();
        let phase = self.phase();
        let b = self.pool.batch();
        let k = self.model.cfg.heads.chunk;
        let past = self.model.cfg.heads.past_target();
        let mut total = GradientReport::empty(self.model.store.len());
        let (mut action_sum, mut image_sum, mut image_n) = (0.0, 0.0, 0usize);
        for item in self.pool.current() {
            let slot = &mut self.pool.slots[item.slot];
            slot.state.check_tag(item.tag)?;
            let ep = data.episodes.get(item.episode).ok_or_else(|| Error::Data(format!("episode {} missing", item.episode)))?;
            let chunk = action_chunk(ep, item.t, k, &self.model.normalizer);
            let target: Option<&Image> = past.index(item.t).map(|i| &ep.frames[i].views[0]);
            let mut rng = noise_rng(self.seed, self.step, item.slot);
            let diverged = |loss: f64| Error::Divergence { step: self.step, detail: format!("loss {loss} on episode {} frame {}", item.episode, item.t) };
            let r = match self.model.train_frame(&ep.frames[item.t], &ep.instruction, &slot.state, &chunk, target, phase, &mut rng) {
                Err(Error::NonFiniteLoss(l)) => return Err(diverged(l)),
                r => r?,
            };
            if !r.loss.is_finite() {
                return Err(diverged(r.loss));
            }
            total.accumulate(&r.grads);
            action_sum += r.action_loss;
            if let Some(l) = r.image_loss {
                image_sum += l;
                image_n += 1;
            }
            if phase == Phase::Memory {
                self.model.memory.advance(&self.model.store, &mut slot.state, &r.frame_x, &r.chunk_x)?;
            }
        }
        total.scale(1.0 / b as f64);
        let loss = total.loss;
        let lr = self.schedule.lr(self.step);
        let grad_norm = if update {
            let norm = clip_global_norm(&mut total, self.cfg.grad_clip);
            if !norm.is_finite() {
                return Err(Error::Divergence { step: self.step, detail: format!("gradient norm {norm}") });
            }
            self.optimizer.step(&mut self.model.store, &total, lr);
            norm
        } else {
            total.global_norm()
        };
        self.pool.advance(&self.model.memory, &self.model.store);
        let report = StepReport {
            step: self.step,
            loss,
            action_loss: action_sum / b as f64,
            image_loss: (image_n > 0).then(|| image_sum / image_n as f64),
            lr,
            grad_norm,
            phase: match phase {
                Phase::Pretrain => "pretrain",
                Phase::Memory => "memory",
            },
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        };
        self.step += 1;
        Ok(report)
    }

    pub fn write_checkpoint(&self, w: &mut ByteWriter) -> Result<()> {
        w.bytes(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        w.u64(self.step);
        w.u64(self.seed);
        w.u64(self.fingerprint);
        w.str(&serde_json::to_string(&self.cfg)?);
        self.model.write(w)?;
        w.u64(self.optimizer.t);
        for m in self.optimizer.m.iter().chain(&self.optimizer.v) {
            w.matrix(m);
        }
        self.pool.write(w);
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = ByteWriter::new();
        self.write_checkpoint(&mut w)?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, w.into_inner())?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    /// Restores a checkpoint written by a trainer with the same config and data.
    pub fn resume(cfg: &Config, data: &Dataset, path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        let mut r = ByteReader::new(&bytes);
        r.expect_magic(CHECKPOINT_MAGIC)?;
        r.version(CHECKPOINT_VERSION)?;
        let step = r.u64()?;
        let seed = r.u64()?;
        let fp = r.u64()?;
        let train: TrainConfig = serde_json::from_str(&r.str()?)?;
        if seed != cfg.seed || train != cfg.train {
            return Err(Error::Config("checkpoint was written with a different training configuration".into()));
        }
        let mut t = Trainer::new(cfg, data)?;
        if fp != t.fingerprint {
            return Err(Error::Data("checkpoint was written for a different dataset".into()));
        }
        let model = Model::read(&mut r)?;
        model.check_compatible(&cfg.model)?;
        t.model = model;
        t.optimizer.t = r.u64()?;
        let groups = t.model.store.len();
        let mut moments = Vec::with_capacity(2 * groups);
        for _ in 0..2 * groups {
            moments.push(r.matrix()?);
        }
        t.optimizer.v = moments.split_off(groups);
        t.optimizer.m = moments;
        t.pool.read_into(&mut r)?;
        if r.remaining() != 0 {
            return Err(Error::Format("trailing bytes in checkpoint".into()));
        }
        t.step = step;
        t.sync_phase();
        Ok(t)
    }
}

/// Appends one JSON record per step.
pub struct MetricsLog {
    file: File,
}

impl MetricsLog {
    pub fn open(path: &Path) -> Result<Self> {
        Ok(Self { file: OpenOptions::new().create(true).append(true).open(path)? })
    }

    pub fn record(&mut self, r: &StepReport) -> Result<()> {
        writeln!(self.file, "{}", serde_json::to_string(r)?)?;
        Ok(())
    }
}

/// Output of [`train`].
pub struct TrainOutcome {
    pub model: Model,
    pub final_checkpoint: PathBuf,
    pub last_loss: f64,
}

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("step-{step:07}.ckpt"))
}

/// Runs training to completion, writing periodic checkpoints and a metrics
/// log into `dir`. On divergence the last good checkpoint stays on disk.
pub fn train(cfg: &Config, data: &Dataset, dir: &Path, resume: Option<&Path>, mut on_step: impl FnMut(&StepReport)) -> Result<TrainOutcome> {
    fs::create_dir_all(dir)?;
    let mut t = match resume {
        Some(p) => Trainer::resume(cfg, data, p)?,
        None => Trainer::new(cfg, data)?,
    };
    let mut log = MetricsLog::open(&dir.join("metrics.jsonl"))?;
    let mut last_loss = f64::NAN;
    while !t.done() {
        let report = t.train_step(data)?;
        last_loss = report.loss;
        if cfg.train.log_every > 0 && report.step % cfg.train.log_every == 0 {
            log.record(&report)?;
        }
        on_step(&report);
        if cfg.train.checkpoint_every > 0 && t.step % cfg.train.checkpoint_every == 0 && !t.done() {
            t.save(&checkpoint_path(dir, t.step))?;
        }
    }
    let final_checkpoint = dir.join("final.ckpt");
    t.save(&final_checkpoint)?;
    let mut w = ByteWriter::new();
    t.model.write(&mut w)?;
    fs::write(dir.join("model.bin"), w.into_inner())?;
    Ok(TrainOutcome { model: t.model, final_checkpoint, last_loss })
}

pub fn load_model(path: &Path) -> Result<Model> {
    let bytes = fs::read(path)?;
    let mut r = ByteReader::new(&bytes);
    if bytes.starts_with(CHECKPOINT_MAGIC) {
        r.expect_magic(CHECKPOINT_MAGIC)?;
        r.version(CHECKPOINT_VERSION)?;
        r.u64()?;
        r.u64()?;
        r.u64()?;
        r.str()?;
    }
    Model::read(&mut r)
}
