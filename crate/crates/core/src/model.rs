//! The full policy: backbone, query banks, connector and both heads.

use rand::Rng;

use crate::backbone::{freeze_backbone, Backbone, Image, Observation};
use crate::config::ModelConfig;
use crate::connector::{Connector, FusedQueries};
use crate::error::{Error, Result};
use crate::heads::{ddim_sample, ddpm_loss, total_loss, DiffusionHead, DiffusionSchedule, ImageHead, Normalizer, PopMode};
use crate::memory::{EmaSource, Memory, QueryKind, RecurrentState};
use crate::numerics::graph::{GradientReport, Graph, Var};
use crate::numerics::io::{self, ByteReader, ByteWriter};
use crate::numerics::{Matrix, ParamStore};

/// Training phase: backbone pretraining without memory, then memory training.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Pretrain,
    Memory,
}

pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub backbone: Backbone,
    pub memory: Memory,
    pub connector: Connector,
    pub diffusion: DiffusionHead,
    pub image: ImageHead,
    pub schedule: DiffusionSchedule,
    pub normalizer: Normalizer,
}

/// Result of one frame's forward and backward pass.
pub struct FrameResult {
    pub loss: f64,
    pub action_loss: f64,
    pub image_loss: Option<f64>,
    pub grads: GradientReport,
    pub frame_x: Matrix,
    pub chunk_x: Matrix,
}

/// Graph nodes of one frame.
pub struct Forward {
    pub fused: FusedQueries,
    frame_x: Option<Var>,
    chunk_x: Option<Var>,
}

pub const MODEL_MAGIC: &[u8; 4] = b"RMMD";
pub const MODEL_VERSION: u32 = 1;

impl Model {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new(seed);
        let d = cfg.backbone.width;
        let backbone = Backbone::new(&mut store, &cfg.backbone)?;
        let memory = Memory::new(&mut store, &cfg.memory, d)?;
        let connector = Connector::new(&mut store, &cfg.connector, d)?;
        let diffusion = DiffusionHead::new(&mut store, &cfg.heads, d)?;
        let image = ImageHead::new(&mut store, &cfg.heads, d, cfg.backbone.image, cfg.backbone.patch)?;
        let h = &cfg.heads;
        let schedule = DiffusionSchedule::linear(h.t_diff, h.beta_start, h.beta_end, h.ddim_steps)?;
        Ok(Self {
            cfg: cfg.clone(),
            store,
            backbone,
            memory,
            connector,
            diffusion,
            image,
            schedule,
            normalizer: Normalizer::identity(h.action_dim),
        })
    }

    pub fn fresh_state(&self) -> RecurrentState {
        RecurrentState::new(&self.memory, &self.store)
    }

    pub fn reset_state(&self, state: &mut RecurrentState, tag: Option<u64>) {
        state.reset(&self.memory, &self.store, tag);
    }

    pub fn set_backbone_frozen(&mut self, frozen: bool) {
        freeze_backbone(&mut self.store, frozen);
    }

    pub fn forward(&self, g: &mut Graph<'_>, obs: &Observation, instruction: &[u16], state: &RecurrentState, phase: Phase) -> Result<Forward> {
        let mut queries = Vec::with_capacity(4);
        let action = self.memory.action.node(g).ok_or_else(|| Error::Config("model has no action queries".into()))?;
        queries.push((QueryKind::Action, action));
        if let Some(h) = self.memory.hindsight.node(g) {
            queries.push((QueryKind::Hindsight, h));
        }
        let (frame_in, chunk_in) = match phase {
            Phase::Pretrain => (None, None),
            Phase::Memory => self.memory.state_nodes(g, state),
        };
        if let Some(f) = frame_in {
            queries.push((QueryKind::Frame, f));
        }
        if let Some(c) = chunk_in {
            queries.push((QueryKind::Chunk, c));
        }
        let seq = self.backbone.sequence(g, obs, instruction, &queries)?;
        let enc = self.backbone.encode(g, seq)?;
        let fused = self.connector.fuse(g, enc.action, enc.hindsight, frame_in, chunk_in)?;
        let (frame_x, chunk_x) = match self.cfg.memory.ema_source {
            EmaSource::Backbone => (enc.frame, enc.chunk),
            EmaSource::Connector => (fused.frame_out, fused.chunk_out),
        };
        Ok(Forward { fused, frame_x, chunk_x })
    }

    fn extraction(&self, g: &Graph<'_>, v: Option<Var>, rows: usize) -> Matrix {
        match v {
            Some(v) => g.value(v).clone(),
            None => Matrix::zeros(rows, self.cfg.backbone.width),
        }
    }

    /// Forward and backward for one training frame. `chunk` is the
    /// normalized k×n target; `past` is the reconstruction target, if any.
    #[allow(clippy::too_many_arguments)]
    pub fn train_frame<R: Rng>(
        &self,
        obs: &Observation,
        instruction: &[u16],
        state: &RecurrentState,
        chunk: &Matrix,
        past: Option<&Image>,
        phase: Phase,
        rng: &mut R,
    ) -> Result<FrameResult> {
        let mut g = Graph::new(&self.store);
        let f = self.forward(&mut g, obs, instruction, state, phase)?;
        let samples = self.cfg.heads.noise_samples;
        let mut losses = Vec::with_capacity(samples);
        for _ in 0..samples {
            losses.push(ddpm_loss(&mut g, &self.diffusion, chunk, f.fused.action_out, &self.schedule, rng)?);
        }
        let mut action = losses[0];
        for &l in &losses[1..] {
            action = g.add(action, l);
        }
        let action = g.scale(action, 1.0 / samples as f64);
        let use_image = phase == Phase::Memory && self.cfg.heads.pop_mode != PopMode::Off && self.cfg.heads.lambda_img > 0.0;
        let image = match (use_image, past, f.fused.hindsight_out) {
            (true, Some(target), Some(h)) => {
                let pred = self.image.decode(&mut g, h)?;
                Some(self.image.loss(&mut g, pred, target)?)
            }
            _ => None,
        };
        let loss = total_loss(&mut g, action, image, self.cfg.heads.lambda_img)?;
        let action_loss = g.scalar(action);
        let image_loss = image.map(|i| g.scalar(i));
        let frame_x = self.extraction(&g, f.frame_x, self.memory.frame.rows);
        let chunk_x = self.extraction(&g, f.chunk_x, self.memory.chunk.rows);
        let grads = g.backward(loss)?;
        Ok(FrameResult { loss: grads.loss, action_loss, image_loss, grads, frame_x, chunk_x })
    }

    /// Inference for one frame: optionally samples a normalized chunk, then
    /// advances the recurrent state with this frame's extraction.
    pub fn step<R: Rng>(
        &self,
        state: &mut RecurrentState,
        obs: &Observation,
        instruction: &[u16],
        predict: bool,
        ddim_steps: usize,
        rng: &mut R,
    ) -> Result<Option<Matrix>> {
        let mut g = Graph::new(&self.store);
        let f = self.forward(&mut g, obs, instruction, state, Phase::Memory)?;
        let chunk = if predict {
            let cond = g.value(f.fused.action_out).clone();
            let shape = (self.cfg.heads.chunk, self.cfg.heads.action_dim);
            Some(ddim_sample(&self.diffusion, &self.store, &cond, &self.schedule, ddim_steps, shape, rng)?)
        } else {
            None
        };
        let frame_x = self.extraction(&g, f.frame_x, self.memory.frame.rows);
        let chunk_x = self.extraction(&g, f.chunk_x, self.memory.chunk.rows);
        drop(g);
        self.memory.advance(&self.store, state, &frame_x, &chunk_x)?;
        Ok(chunk)
    }

    /// Fused action and hindsight outputs for one frame without touching the
    /// state (diagnostics and tests).
    pub fn fused_outputs(&self, state: &RecurrentState, obs: &Observation, instruction: &[u16]) -> Result<(Matrix, Option<Matrix>)> {
        let mut g = Graph::new(&self.store);
        let f = self.forward(&mut g, obs, instruction, state, Phase::Memory)?;
        let a = g.value(f.fused.action_out).clone();
        let h = f.fused.hindsight_out.map(|h| g.value(h).clone());
        Ok((a, h))
    }

    pub fn predict_past_image(&self, state: &RecurrentState, obs: &Observation, instruction: &[u16]) -> Result<Option<Image>> {
        let (_, h) = self.fused_outputs(state, obs, instruction)?;
        h.map(|h| self.image.decode_image(&self.store, &h)).transpose()
    }

    pub fn write(&self, w: &mut ByteWriter) -> Result<()> {
        w.bytes(MODEL_MAGIC);
        w.u32(MODEL_VERSION);
        w.str(&serde_json::to_string(&self.cfg)?);
        w.str(&serde_json::to_string(&self.normalizer)?);
        io::write_params(w, &self.store);
        Ok(())
    }

    pub fn read(r: &mut ByteReader<'_>) -> Result<Self> {
        r.expect_magic(MODEL_MAGIC)?;
        r.version(MODEL_VERSION)?;
        let cfg: ModelConfig = serde_json::from_str(&r.str()?)?;
        let normalizer: Normalizer = serde_json::from_str(&r.str()?)?;
        let loaded = io::read_params(r)?;
        let mut model = Model::new(&cfg, loaded.seed())?;
        io::load_into(&mut model.store, &loaded)?;
        model.normalizer = normalizer;
        Ok(model)
    }

    /// Fails unless `other` describes the same architecture.
    pub fn check_compatible(&self, cfg: &ModelConfig) -> Result<()> {
        if &self.cfg != cfg {
            return Err(Error::Config("checkpoint model configuration differs from the requested one".into()));
        }
        Ok(())
    }
}
