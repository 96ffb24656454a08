//! Query banks, the fixed EMA recurrence and per-episode recurrent state.
//!
//! A recurrent bank feeds its current state into the backbone and receives an
//! extraction back. The state is then blended toward the extraction and stored
//! as a plain value, so no gradient ever crosses from one frame into the next.
//! The only in-graph use of a bank's `learned_init` is frame 0 of an episode,
//! where the state still equals it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::graph::{Graph, Var};
use crate::numerics::io::{ByteReader, ByteWriter};
use crate::numerics::nn::Linear;
use crate::numerics::{Init, Matrix, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryKind {
    Action,
    Hindsight,
    Frame,
    Chunk,
}

impl QueryKind {
    pub const ALL: [QueryKind; 4] = [QueryKind::Action, QueryKind::Hindsight, QueryKind::Frame, QueryKind::Chunk];

    pub fn name(self) -> &'static str {
        match self {
            QueryKind::Action => "action",
            QueryKind::Hindsight => "hindsight",
            QueryKind::Frame => "frame",
            QueryKind::Chunk => "chunk",
        }
    }

    pub fn is_recurrent(self) -> bool {
        matches!(self, QueryKind::Frame | QueryKind::Chunk)
    }
}

/// How recurrent states move from one frame to the next.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Recurrence {
    #[default]
    Ema,
    /// Trainable gated update over (prev, extracted).
    Gru,
    /// Trainable two-layer map over (prev, extracted).
    Mlp,
    /// No state is carried: the banks are re-read from their learned
    /// embeddings every frame.
    Stateless,
}

/// Where the extraction blended into the recurrent state is read.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmaSource {
    #[default]
    Backbone,
    Connector,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemoryConfig {
    pub n_action: usize,
    pub n_hindsight: usize,
    pub n_frame: usize,
    pub n_chunk: usize,
    pub beta_frame: f64,
    pub beta_chunk: f64,
    /// Chunk update interval K in frames.
    pub chunk_interval: usize,
    pub recurrence: Recurrence,
    pub ema_source: EmaSource,
    /// Std of the normal init for query embeddings.
    pub query_init_std: f64,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        Self {
            n_action: 8,
            n_hindsight: 8,
            n_frame: 16,
            n_chunk: 16,
            beta_frame: 0.5,
            beta_chunk: 0.5,
            chunk_interval: 8,
            recurrence: Recurrence::Ema,
            ema_source: EmaSource::Backbone,
            query_init_std: 0.02,
        }
    }
}

impl MemoryConfig {
    pub fn validate(&self) -> Result<()> {
        check_beta(self.beta_frame)?;
        check_beta(self.beta_chunk)?;
        if self.chunk_interval < 1 {
            return Err(Error::Config("chunk_interval must be at least 1".into()));
        }
        if self.n_action == 0 {
            return Err(Error::Config("n_action must be at least 1".into()));
        }
        if !(self.query_init_std > 0.0) {
            return Err(Error::Config("query_init_std must be positive".into()));
        }
        Ok(())
    }

    pub fn count(&self, kind: QueryKind) -> usize {
        match kind {
            QueryKind::Action => self.n_action,
            QueryKind::Hindsight => self.n_hindsight,
            QueryKind::Frame => self.n_frame,
            QueryKind::Chunk => self.n_chunk,
        }
    }
}

fn check_beta(beta: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::InvalidArgument(format!("beta {beta} outside [0, 1]")));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct QueryBank {
    pub kind: QueryKind,
    /// `None` when the bank is empty.
    pub learned_init: Option<ParamId>,
    pub rows: usize,
    pub beta: f64,
    pub update_interval: usize,
}

impl QueryBank {
    pub fn new(store: &mut ParamStore, kind: QueryKind, rows: usize, width: usize, cfg: &MemoryConfig) -> Result<Self> {
        let learned_init = if rows > 0 {
            Some(store.add(&format!("query.{}", kind.name()), rows, width, Init::Normal(cfg.query_init_std))?)
        } else {
            None
        };
        let (beta, update_interval) = match kind {
            QueryKind::Frame => (cfg.beta_frame, 1),
            QueryKind::Chunk => (cfg.beta_chunk, cfg.chunk_interval),
            _ => (0.0, 1),
        };
        Ok(Self { kind, learned_init, rows, beta, update_interval })
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0
    }

    pub fn init_value(&self, store: &ParamStore, width: usize) -> Matrix {
        match self.learned_init {
            Some(id) => store.get(id).clone(),
            None => Matrix::zeros(0, width),
        }
    }

    /// Graph node for the bank's embedding, or `None` for an empty bank.
    pub fn node(&self, g: &mut Graph<'_>) -> Option<Var> {
        self.learned_init.map(|id| g.param(id))
    }
}

/// `beta·extracted + (1−beta)·prev`, elementwise.
pub fn ema_update_frame(prev: &Matrix, extracted: &Matrix, beta: f64) -> Result<Matrix> {
    check_beta(beta)?;
    if prev.shape() != extracted.shape() {
        return Err(Error::Shape(format!("state {:?} vs extraction {:?}", prev.shape(), extracted.shape())));
    }
    Ok(prev.zip_map(extracted, |p, e| (beta * e as f64 + (1.0 - beta) * p as f64) as f32))
}

/// Chunk-level blend: fires only when `t` is a positive multiple of `k`.
pub fn ema_update_chunk(prev: &Matrix, extracted: &Matrix, beta: f64, t: u64, k: usize) -> Result<Matrix> {
    if k < 1 {
        return Err(Error::InvalidArgument("chunk interval must be at least 1".into()));
    }
    if t > 0 && t % k as u64 == 0 {
        ema_update_frame(prev, extracted, beta)
    } else {
        check_beta(beta)?;
        Ok(prev.clone())
    }
}

/// Frames after which an old contribution's weight has halved.
pub fn decay_half_life(beta: f64, interval: usize) -> Result<f64> {
    if !(beta > 0.0 && beta < 1.0) {
        return Err(Error::InvalidArgument(format!("beta {beta} has no finite half-life")));
    }
    if interval < 1 {
        return Err(Error::InvalidArgument("interval must be at least 1".into()));
    }
    Ok(interval as f64 * 0.5f64.ln() / (1.0 - beta).ln())
}

/// Inputs of the most recent learnable transition, kept so the transition can
/// be replayed inside the next frame's graph.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub prev: Matrix,
    pub extracted: Matrix,
}

/// Live recurrent state of one slot or rollout.
#[derive(Clone, Debug, PartialEq)]
pub struct RecurrentState {
    pub frame: Matrix,
    pub chunk: Matrix,
    /// Frames processed since the last reset.
    pub t: u64,
    /// Chunk extraction recorded at the last boundary, blended at the next.
    pub pending_chunk: Option<Matrix>,
    /// Episode this state belongs to.
    pub tag: Option<u64>,
    pub frame_transition: Option<Transition>,
    pub chunk_transition: Option<Transition>,
    /// Number of chunk blends since reset.
    pub chunk_updates: u64,
}

pub const STATE_MAGIC: &[u8; 4] = b"RMST";
pub const STATE_VERSION: u32 = 1;

impl RecurrentState {
    pub fn new(memory: &Memory, store: &ParamStore) -> Self {
        let mut s = Self {
            frame: Matrix::zeros(0, 0),
            chunk: Matrix::zeros(0, 0),
            t: 0,
            pending_chunk: None,
            tag: None,
            frame_transition: None,
            chunk_transition: None,
            chunk_updates: 0,
        };
        s.reset(memory, store, None);
        s
    }

    /// Hard reset: both states become value copies of their learned inits.
    pub fn reset(&mut self, memory: &Memory, store: &ParamStore, tag: Option<u64>) {
        self.frame = memory.frame.init_value(store, memory.width);
        self.chunk = memory.chunk.init_value(store, memory.width);
        self.t = 0;
        self.pending_chunk = None;
        self.tag = tag;
        self.frame_transition = None;
        self.chunk_transition = None;
        self.chunk_updates = 0;
    }

    pub fn check_tag(&self, episode: u64) -> Result<()> {
        match self.tag {
            Some(tag) if tag == episode => Ok(()),
            other => Err(Error::StateTagMismatch { state: other.unwrap_or(u64::MAX), cursor: episode }),
        }
    }

    pub fn write(&self, w: &mut ByteWriter) {
        w.bytes(STATE_MAGIC);
        w.u32(STATE_VERSION);
        w.u32(self.frame.rows() as u32);
        w.u32(self.chunk.rows() as u32);
        w.u32(self.frame.cols().max(self.chunk.cols()) as u32);
        w.u64(self.t);
        w.u64(self.chunk_updates);
        w.u8(self.tag.is_some() as u8);
        w.u64(self.tag.unwrap_or(0));
        w.matrix(&self.frame);
        w.matrix(&self.chunk);
        write_opt(w, self.pending_chunk.as_ref());
        for tr in [&self.frame_transition, &self.chunk_transition] {
            w.u8(tr.is_some() as u8);
            if let Some(tr) = tr {
                w.matrix(&tr.prev);
                w.matrix(&tr.extracted);
            }
        }
    }

    pub fn read(r: &mut ByteReader<'_>) -> Result<Self> {
        r.expect_magic(STATE_MAGIC)?;
        r.version(STATE_VERSION)?;
        let n_f = r.u32()? as usize;
        let n_c = r.u32()? as usize;
        let _width = r.u32()?;
        let t = r.u64()?;
        let chunk_updates = r.u64()?;
        let has_tag = r.u8()? != 0;
        let tag = r.u64()?;
        let frame = r.matrix()?;
        let chunk = r.matrix()?;
        if frame.rows() != n_f || chunk.rows() != n_c {
            return Err(Error::Format("state header does not match payload".into()));
        }
        let pending_chunk = read_opt(r)?;
        let mut transitions = [None, None];
        for slot in transitions.iter_mut() {
            if r.u8()? != 0 {
                *slot = Some(Transition { prev: r.matrix()?, extracted: r.matrix()? });
            }
        }
        let [frame_transition, chunk_transition] = transitions;
        Ok(Self {
            frame,
            chunk,
            t,
            pending_chunk,
            tag: has_tag.then_some(tag),
            frame_transition,
            chunk_transition,
            chunk_updates,
        })
    }
}

fn write_opt(w: &mut ByteWriter, m: Option<&Matrix>) {
    w.u8(m.is_some() as u8);
    if let Some(m) = m {
        w.matrix(m);
    }
}

fn read_opt(r: &mut ByteReader<'_>) -> Result<Option<Matrix>> {
    Ok(if r.u8()? != 0 { Some(r.matrix()?) } else { None })
}

/// Trainable replacement for the EMA blend, applied row-wise.
#[derive(Clone, Copy, Debug)]
pub enum Cell {
    Gru { xz: Linear, hz: Linear, xr: Linear, hr: Linear, xn: Linear, hn: Linear },
    Mlp { x: Linear, h: Linear, out: Linear },
}

impl Cell {
    fn new(store: &mut ParamStore, name: &str, kind: Recurrence, width: usize) -> Result<Option<Self>> {
        let lin = |store: &mut ParamStore, part: &str, bias: bool| Linear::new(store, &format!("{name}.{part}"), width, width, bias);
        Ok(match kind {
            Recurrence::Ema | Recurrence::Stateless => None,
            Recurrence::Gru => Some(Cell::Gru {
                xz: lin(store, "xz", true)?,
                hz: lin(store, "hz", false)?,
                xr: lin(store, "xr", true)?,
                hr: lin(store, "hr", false)?,
                xn: lin(store, "xn", true)?,
                hn: lin(store, "hn", false)?,
            }),
            Recurrence::Mlp => Some(Cell::Mlp { x: lin(store, "x", true)?, h: lin(store, "h", false)?, out: lin(store, "out", true)? }),
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, prev: Var, extracted: Var) -> Var {
        match *self {
            Cell::Gru { xz, hz, xr, hr, xn, hn } => {
                let z = {
                    let a = xz.forward(g, extracted);
                    let b = hz.forward(g, prev);
                    let s = g.add(a, b);
                    g.sigmoid(s)
                };
                let r = {
                    let a = xr.forward(g, extracted);
                    let b = hr.forward(g, prev);
                    let s = g.add(a, b);
                    g.sigmoid(s)
                };
                let n = {
                    let a = xn.forward(g, extracted);
                    let rh = g.mul(r, prev);
                    let b = hn.forward(g, rh);
                    let s = g.add(a, b);
                    g.tanh(s)
                };
                // prev + z·(n − prev)
                let d = g.sub(n, prev);
                let zd = g.mul(z, d);
                g.add(prev, zd)
            }
            Cell::Mlp { x, h, out } => {
                let a = x.forward(g, extracted);
                let b = h.forward(g, prev);
                let s = g.add(a, b);
                let s = g.gelu(s);
                out.forward(g, s)
            }
        }
    }

    fn apply(&self, store: &ParamStore, prev: &Matrix, extracted: &Matrix) -> Matrix {
        let mut g = Graph::new(store);
        let p = g.constant(prev.clone());
        let e = g.constant(extracted.clone());
        let y = self.forward(&mut g, p, e);
        g.value(y).clone()
    }
}

/// The four banks plus the recurrence rule.
#[derive(Clone, Debug)]
pub struct Memory {
    pub cfg: MemoryConfig,
    pub width: usize,
    pub action: QueryBank,
    pub hindsight: QueryBank,
    pub frame: QueryBank,
    pub chunk: QueryBank,
    pub frame_cell: Option<Cell>,
    pub chunk_cell: Option<Cell>,
}

impl Memory {
    pub fn new(store: &mut ParamStore, cfg: &MemoryConfig, width: usize) -> Result<Self> {
        cfg.validate()?;
        let bank = |store: &mut ParamStore, kind| QueryBank::new(store, kind, cfg.count(kind), width, cfg);
        let action = bank(store, QueryKind::Action)?;
        let hindsight = bank(store, QueryKind::Hindsight)?;
        let frame = bank(store, QueryKind::Frame)?;
        let chunk = bank(store, QueryKind::Chunk)?;
        let frame_cell = if frame.is_empty() { None } else { Cell::new(store, "recurrence.frame", cfg.recurrence, width)? };
        let chunk_cell = if chunk.is_empty() { None } else { Cell::new(store, "recurrence.chunk", cfg.recurrence, width)? };
        Ok(Self { cfg: cfg.clone(), width, action, hindsight, frame, chunk, frame_cell, chunk_cell })
    }

    pub fn bank(&self, kind: QueryKind) -> &QueryBank {
        match kind {
            QueryKind::Action => &self.action,
            QueryKind::Hindsight => &self.hindsight,
            QueryKind::Frame => &self.frame,
            QueryKind::Chunk => &self.chunk,
        }
    }

    pub fn has_recurrent(&self) -> bool {
        !self.frame.is_empty() || !self.chunk.is_empty()
    }

    /// Graph nodes for the frame and chunk states at the current frame.
    ///
    /// Frame 0 uses the learned init directly. Later frames use detached
    /// values, except that a learnable recurrence replays its latest
    /// transition in-graph so its own parameters receive gradient.
    pub fn state_nodes(&self, g: &mut Graph<'_>, state: &RecurrentState) -> (Option<Var>, Option<Var>) {
        let frame = self.state_node(g, &self.frame, self.frame_cell.as_ref(), &state.frame, state.frame_transition.as_ref(), state.t);
        let chunk = self.state_node(g, &self.chunk, self.chunk_cell.as_ref(), &state.chunk, state.chunk_transition.as_ref(), state.t);
        (frame, chunk)
    }

    fn state_node(
        &self,
        g: &mut Graph<'_>,
        bank: &QueryBank,
        cell: Option<&Cell>,
        value: &Matrix,
        transition: Option<&Transition>,
        t: u64,
    ) -> Option<Var> {
        if bank.is_empty() {
            return None;
        }
        if t == 0 || self.cfg.recurrence == Recurrence::Stateless {
            return bank.node(g);
        }
        if let (Some(cell), Some(tr)) = (cell, transition) {
            let p = g.constant(tr.prev.clone());
            let e = g.constant(tr.extracted.clone());
            return Some(cell.forward(g, p, e));
        }
        Some(g.constant(value.clone()))
    }

    /// Consumes this frame's extractions and moves the state to the next frame.
    pub fn advance(&self, store: &ParamStore, state: &mut RecurrentState, frame_x: &Matrix, chunk_x: &Matrix) -> Result<()> {
        if self.cfg.recurrence == Recurrence::Stateless {
            state.t += 1;
            return Ok(());
        }
        if !self.frame.is_empty() {
            state.frame_transition = None;
            state.frame = match &self.frame_cell {
                None => ema_update_frame(&state.frame, frame_x, self.frame.beta)?,
                Some(cell) => {
                    check_shapes(&state.frame, frame_x)?;
                    let next = cell.apply(store, &state.frame, frame_x);
                    state.frame_transition = Some(Transition { prev: state.frame.clone(), extracted: frame_x.clone() });
                    next
                }
            };
        }
        let k = self.chunk.update_interval as u64;
        if !self.chunk.is_empty() && state.t % k == 0 {
            check_shapes(&state.chunk, chunk_x)?;
            state.pending_chunk = Some(chunk_x.clone());
        }
        state.t += 1;
        if !self.chunk.is_empty() {
            state.chunk_transition = None;
            // A state created mid-episode (e.g. at the phase switch) has no
            // recorded extraction until its first boundary.
            let pending = if state.t % k == 0 { state.pending_chunk.take() } else { None };
            if let Some(pending) = pending {
                state.chunk = match &self.chunk_cell {
                    None => ema_update_chunk(&state.chunk, &pending, self.chunk.beta, state.t, self.chunk.update_interval)?,
                    Some(cell) => {
                        let next = cell.apply(store, &state.chunk, &pending);
                        state.chunk_transition = Some(Transition { prev: state.chunk.clone(), extracted: pending });
                        next
                    }
                };
                state.chunk_updates += 1;
            }
        }
        Ok(())
    }
}

fn check_shapes(a: &Matrix, b: &Matrix) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("state {:?} vs extraction {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ones(r: usize, c: usize, v: f32) -> Matrix {
        Matrix::filled(r, c, v)
    }

    #[test]
    fn frame_update_examples() {
        let out = ema_update_frame(&ones(2, 3, 0.0), &ones(2, 3, 1.0), 0.5).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.5));
        let prev = Matrix::from_vec(1, 3, vec![0.1, -0.7, 3.0]);
        assert_eq!(ema_update_frame(&prev, &ones(1, 3, 9.0), 0.0).unwrap(), prev);
        assert!(ema_update_frame(&prev, &ones(1, 3, 9.0), 1.5).is_err());
        assert!(ema_update_frame(&prev, &ones(2, 3, 9.0), 0.5).is_err());
    }

    #[test]
    fn closed_form_matches_iteration() {
        let (beta, n) = (0.3f64, 5);
        let q0 = Matrix::from_vec(1, 4, vec![0.2, -1.0, 0.5, 2.0]);
        let c = Matrix::from_vec(1, 4, vec![1.0, 0.25, -0.5, 0.0]);
        let mut s = q0.clone();
        for _ in 0..n {
            s = ema_update_frame(&s, &c, beta).unwrap();
        }
        let keep = (1.0 - beta).powi(n);
        for i in 0..4 {
            let closed = c.data()[i] as f64 * (1.0 - keep) + q0.data()[i] as f64 * keep;
            assert!((s.data()[i] as f64 - closed).abs() < 1e-7);
        }
    }

    #[test]
    fn chunk_update_fires_on_boundaries_only() {
        let prev = Matrix::from_vec(1, 2, vec![0.3, -0.4]);
        let out = ema_update_chunk(&prev, &ones(1, 2, 1.0), 0.5, 7, 8).unwrap();
        assert_eq!(out.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>(), prev.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>());
        let out = ema_update_chunk(&ones(1, 2, 0.0), &ones(1, 2, 1.0), 0.5, 8, 8).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.5));
        assert_eq!(ema_update_chunk(&prev, &ones(1, 2, 1.0), 0.5, 0, 8).unwrap(), prev);
        assert!(ema_update_chunk(&prev, &prev, 0.5, 8, 0).is_err());
    }

    #[test]
    fn half_life_values() {
        assert!((decay_half_life(0.5, 1).unwrap() - 1.0).abs() < 1e-12);
        assert!((decay_half_life(0.5, 8).unwrap() - 8.0).abs() < 1e-12);
        assert!((decay_half_life(0.3, 1).unwrap() - 1.9433582).abs() < 1e-6);
        assert!(decay_half_life(0.0, 1).is_err());
        assert!(decay_half_life(1.0, 1).is_err());
    }
}
