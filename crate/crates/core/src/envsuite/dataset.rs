//! Expert demonstrations and their binary file format.

use std::path::Path;

use super::{env_reset, env_step, expert_action, success, Action, Outcome, TaskId, TaskSpec, ACTION_DIM, IMAGE_SIZE};
use crate::backbone::{Image, Observation};
use crate::error::{Error, Result};
use crate::heads::Normalizer;
use crate::numerics::io::{ByteReader, ByteWriter};
use crate::numerics::params::derive_seed;

pub const EPISODE_MAGIC: &[u8; 4] = b"RMEP";
pub const EPISODE_VERSION: u32 = 1;
const VIEWS: usize = 2;

/// One demonstration: the observation before each action, and the action.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub task: TaskId,
    pub seed: u64,
    pub instruction: Vec<u16>,
    pub frames: Vec<Observation>,
    pub actions: Vec<Action>,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub episodes: Vec<Episode>,
    /// Per-dimension action range over every episode.
    pub action_min: Vec<f32>,
    pub action_max: Vec<f32>,
}

impl Dataset {
    pub fn new(episodes: Vec<Episode>) -> Self {
        let mut lo = vec![f32::INFINITY; ACTION_DIM];
        let mut hi = vec![f32::NEG_INFINITY; ACTION_DIM];
        for a in episodes.iter().flat_map(|e| &e.actions) {
            for d in 0..ACTION_DIM {
                lo[d] = lo[d].min(a[d]);
                hi[d] = hi[d].max(a[d]);
            }
        }
        Self { episodes, action_min: lo, action_max: hi }
    }

    pub fn normalizer(&self) -> Normalizer {
        Normalizer { min: self.action_min.clone(), max: self.action_max.clone() }
    }

    pub fn frames(&self) -> usize {
        self.episodes.iter().map(Episode::len).sum()
    }

    /// The single task name, or `mixed`.
    pub fn task_label(&self) -> String {
        match self.episodes.first() {
            Some(e) if self.episodes.iter().all(|x| x.task == e.task) => e.task.name().to_string(),
            Some(_) => "mixed".to_string(),
            None => "empty".to_string(),
        }
    }

    pub fn merge(mut self, other: Dataset) -> Self {
        self.episodes.extend(other.episodes);
        Dataset::new(self.episodes)
    }
}

/// Rolls out the expert on `count` seeded episodes; every one must succeed.
pub fn generate_dataset(task: TaskId, count: usize, seed: u64) -> Result<Dataset> {
    let spec = TaskSpec::new(task);
    let mut episodes = Vec::with_capacity(count);
    for i in 0..count {
        let ep_seed = derive_seed(seed, &[task.index() as u64, i as u64]);
        let (mut state, mut obs, instruction) = env_reset(&spec, ep_seed);
        let mut frames = Vec::new();
        let mut actions = Vec::new();
        loop {
            let a = expert_action(&state);
            frames.push(obs);
            actions.push(a);
            let (next, done) = env_step(&mut state, &a);
            obs = next;
            if done {
                break;
            }
        }
        if success(&state.trace()) != Outcome::Success {
            return Err(Error::ExpertFailure { task: task.name().into(), seed: ep_seed });
        }
        episodes.push(Episode { task, seed: ep_seed, instruction, frames, actions });
    }
    Ok(Dataset::new(episodes))
}

pub fn write_dataset(path: &Path, data: &Dataset) -> Result<()> {
    let mut w = ByteWriter::new();
    w.bytes(EPISODE_MAGIC);
    w.u32(EPISODE_VERSION);
    w.str(&data.task_label());
    for v in [data.episodes.len(), VIEWS, IMAGE_SIZE, IMAGE_SIZE, ACTION_DIM] {
        w.u32(v as u32);
    }
    for e in &data.episodes {
        w.str(e.task.name());
        w.u64(e.seed);
        w.u32(e.instruction.len() as u32);
        for &t in &e.instruction {
            w.bytes(&t.to_le_bytes());
        }
        w.u32(e.frames.len() as u32);
        for (o, a) in e.frames.iter().zip(&e.actions) {
            for v in &o.views {
                w.bytes(&v.data);
            }
            w.f32s(a);
        }
    }
    w.f32s(&data.action_min);
    w.f32s(&data.action_max);
    std::fs::write(path, w.into_inner())?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path)?;
    let mut r = ByteReader::new(&bytes);
    r.expect_magic(EPISODE_MAGIC)?;
    r.version(EPISODE_VERSION)?;
    let label = r.str()?;
    let count = r.u32()? as usize;
    let dims = [r.u32()?, r.u32()?, r.u32()?, r.u32()?].map(|v| v as usize);
    if dims != [VIEWS, IMAGE_SIZE, IMAGE_SIZE, ACTION_DIM] {
        return Err(Error::Format(format!("episode file has layout {dims:?}")));
    }
    let mut episodes = Vec::with_capacity(count);
    for _ in 0..count {
        let task = TaskId::parse(&r.str()?)?;
        let seed = r.u64()?;
        let n = r.u32()? as usize;
        let mut instruction = Vec::with_capacity(n);
        for _ in 0..n {
            let b = r.take(2)?;
            instruction.push(u16::from_le_bytes([b[0], b[1]]));
        }
        let t = r.u32()? as usize;
        let mut frames = Vec::with_capacity(t);
        let mut actions = Vec::with_capacity(t);
        for _ in 0..t {
            let mut views = Vec::with_capacity(VIEWS);
            for _ in 0..VIEWS {
                let data = r.take(IMAGE_SIZE * IMAGE_SIZE * 3)?.to_vec();
                views.push(Image { height: IMAGE_SIZE, width: IMAGE_SIZE, data });
            }
            frames.push(Observation { views });
            let a = r.f32s(ACTION_DIM)?;
            actions.push([a[0], a[1], a[2], a[3]]);
        }
        episodes.push(Episode { task, seed, instruction, frames, actions });
    }
    let action_min = r.f32s(ACTION_DIM)?;
    let action_max = r.f32s(ACTION_DIM)?;
    if r.remaining() != 0 {
        return Err(Error::Format(format!("{} trailing bytes in episode file", r.remaining())));
    }
    let data = Dataset::new(episodes);
    if data.task_label() != label {
        return Err(Error::Format(format!("header says `{label}` but episodes are `{}`", data.task_label())));
    }
    if data.action_min != action_min || data.action_max != action_max {
        return Err(Error::Data("stored action range disagrees with the episodes".into()));
    }
    Ok(data)
}
