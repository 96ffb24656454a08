//! Continuous 2-D tabletop tasks whose success depends on remembering
//! something that is no longer visible.
//!
//! The agent is a point on the unit table. An action is
//! `[dx, dy, interact, grip]` in [−1, 1]: the first two move the agent by at
//! most [`SPEED`] per step, `interact > 0` holds the interact trigger and
//! `grip > 0` closes the gripper. Everything that matters for scoring is
//! logged as an [`Event`], and [`success`] judges a trace from its events
//! alone.

mod dataset;
mod render;
mod tasks;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use dataset::{generate_dataset, read_dataset, write_dataset, Dataset, Episode, EPISODE_MAGIC, EPISODE_VERSION};
pub use render::{render, IMAGE_SIZE};
pub use tasks::{expert_action, memory_witness, Witness};

use crate::backbone::Observation;
use crate::error::{Error, Result};
use crate::numerics::params::derive_seed;

/// Maximum displacement per step, in table units.
pub const SPEED: f64 = 0.08;
/// Interaction and success radius r.
pub const RADIUS: f64 = 0.07;
pub const ACTION_DIM: usize = 4;

pub type Action = [f32; ACTION_DIM];
pub type Pos = [f64; 2];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskId {
    PutBack,
    Rearrange,
    Reopen,
    LongHorizon,
    HoldDuration,
    PressSequence,
    ScoopTwice,
    ReturnFruit,
}

impl TaskId {
    pub const ALL: [TaskId; 8] = [
        TaskId::PutBack,
        TaskId::Rearrange,
        TaskId::Reopen,
        TaskId::LongHorizon,
        TaskId::HoldDuration,
        TaskId::PressSequence,
        TaskId::ScoopTwice,
        TaskId::ReturnFruit,
    ];

    /// The four spatial/episodic tasks with latching buttons.
    pub const MEMORY_BENCH: [TaskId; 4] = [TaskId::PutBack, TaskId::Rearrange, TaskId::Reopen, TaskId::LongHorizon];

    pub fn name(self) -> &'static str {
        match self {
            TaskId::PutBack => "put_back",
            TaskId::Rearrange => "rearrange",
            TaskId::Reopen => "reopen",
            TaskId::LongHorizon => "long_horizon",
            TaskId::HoldDuration => "hold_duration",
            TaskId::PressSequence => "press_sequence",
            TaskId::ScoopTwice => "scoop_twice",
            TaskId::ReturnFruit => "return_fruit",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        TaskId::ALL.iter().copied().find(|t| t.name() == s).ok_or_else(|| Error::UnknownTask(s.to_string()))
    }

    pub fn index(self) -> usize {
        TaskId::ALL.iter().position(|&t| t == self).unwrap()
    }
}

impl std::fmt::Display for TaskId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Static description of a task.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskSpec {
    pub task: TaskId,
    pub max_steps: u32,
    pub instruction: Vec<u16>,
    /// Hold length for `hold_duration`, nominal press length for `press_sequence`.
    pub duration: u32,
    /// Accepted deviation from `duration`.
    pub tolerance: u32,
    /// Shift unpressed buttons after the first press (`press_sequence`).
    pub perturb: bool,
}

pub const INSTRUCTION_LEN: usize = 6;
pub const VOCAB: &[&str] = &[
    "<pad>", "put", "the", "block", "back", "after", "button", "move", "to", "empty", "pad", "then", "restore", "close",
    "open", "drawer", "again", "water", "plant", "for", "a", "while", "press", "buttons", "in", "order", "scoop", "rice",
    "twice", "and", "finish", "return", "fruit", "plate", "both", "tasks",
];

fn words(ws: &[&str]) -> Vec<u16> {
    let mut out: Vec<u16> = ws.iter().map(|w| VOCAB.iter().position(|v| v == w).expect("word in vocabulary") as u16).collect();
    out.resize(INSTRUCTION_LEN, 0);
    out
}

impl TaskSpec {
    pub fn new(task: TaskId) -> Self {
        let (max_steps, text, duration, tolerance): (u32, &[&str], u32, u32) = match task {
            TaskId::PutBack => (34, &["put", "the", "block", "back", "after", "button"], 0, 0),
            TaskId::Rearrange => (56, &["move", "block", "to", "empty", "pad", "restore"], 0, 0),
            TaskId::Reopen => (40, &["close", "drawer", "button", "open", "again"], 0, 0),
            TaskId::LongHorizon => (150, &["move", "block", "restore", "then", "put", "back"], 0, 0),
            TaskId::HoldDuration => (40, &["water", "the", "plant", "for", "a", "while"], 12, 2),
            TaskId::PressSequence => (64, &["press", "buttons", "in", "order"], 5, 2),
            TaskId::ScoopTwice => (72, &["scoop", "rice", "twice", "and", "finish"], 0, 0),
            TaskId::ReturnFruit => (56, &["return", "the", "fruit", "to", "plate"], 0, 0),
        };
        Self { task, max_steps, instruction: words(text), duration, tolerance, perturb: false }
    }

    pub fn with_perturbation(mut self, on: bool) -> Self {
        self.perturb = on;
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureCause {
    MemoryError,
    ManipulationError,
    Timeout,
}

impl FailureCause {
    pub const ALL: [FailureCause; 3] = [FailureCause::MemoryError, FailureCause::ManipulationError, FailureCause::Timeout];

    pub fn name(self) -> &'static str {
        match self {
            FailureCause::MemoryError => "memory_error",
            FailureCause::ManipulationError => "manipulation_error",
            FailureCause::Timeout => "timeout",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Success,
    Failure(FailureCause),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Color {
    Table,
    Pad,
    Target,
    Plate,
    ButtonIdle,
    ButtonDone,
    Green,
    Red,
    Blue,
    Orange,
    Cyan,
    Yellow,
    Purple,
    Wood,
    WoodOpen,
    Rice,
    Pot,
    Plant,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ObjectKind {
    Block,
    Fruit,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Object {
    pub kind: ObjectKind,
    pub pos: Pos,
    pub color: Color,
}

/// Flat scenery drawn under everything else.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Marker {
    pub pos: Pos,
    pub half: f64,
    pub color: Color,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Button {
    pub pos: Pos,
    pub color: Color,
    pub pressed: bool,
    /// Pressed buttons change color.
    pub latching: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Drawer {
    pub pos: Pos,
    pub open: bool,
}

/// Things the judge needs to see, in order.
#[derive(Clone, Debug, PartialEq)]
pub enum Event {
    Grasp { object: usize, pos: Pos },
    /// Gripper opened while holding; `objects` is every object position after the drop.
    Release { object: usize, pos: Pos, from: Pos, objects: Vec<Pos> },
    /// An effective button press.
    Press { button: usize },
    Toggle { drawer: usize, open: bool },
    /// Interact held on a hold target for `steps` steps, then released (or cut off).
    Hold { target: usize, steps: u32 },
    Scoop,
    Pour,
    Shuffle,
    Shift,
}

/// Hidden per-episode goal; never rendered.
#[derive(Clone, Debug, PartialEq)]
pub enum Goal {
    PutBack { block: usize, cell: Pos, center: Pos, button: usize },
    Rearrange { blocks: [usize; 2], pads: [Pos; 3], initial: [bool; 3], moved: usize, from: usize, to: usize, button: usize },
    Reopen { drawer: usize, button: usize },
    LongHorizon { rearrange: Box<Goal>, put_back: Box<Goal> },
    HoldDuration { duration: u32, tolerance: u32 },
    PressSequence { order: [usize; 3], duration: u32, tolerance: u32 },
    ScoopTwice { source: Pos, pot: Pos, button: usize },
    ReturnFruit { fruit: usize, plate: Pos, slots: [Pos; 3], empty: usize, shuffle: [usize; 3], button: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct WorldState {
    pub spec: TaskSpec,
    pub seed: u64,
    pub step: u32,
    pub agent: Pos,
    pub gripper_closed: bool,
    pub interact_down: bool,
    pub holding: Option<usize>,
    pub grasp_from: Pos,
    /// Consecutive interact steps on the current hold target.
    pub hold_steps: u32,
    pub hold_target: Option<usize>,
    pub objects: Vec<Object>,
    pub markers: Vec<Marker>,
    pub buttons: Vec<Button>,
    pub drawers: Vec<Drawer>,
    /// Hold targets (plant or press-sequence buttons).
    pub hold_targets: Vec<Pos>,
    pub carrying_rice: bool,
    pub pours: u32,
    pub presses_done: usize,
    pub goal: Goal,
    pub events: Vec<(u32, Event)>,
    pub outcome: Option<Outcome>,
    pub clamped_actions: u32,
    pub shifted: bool,
}

/// What [`success`] needs: the goal, the event log and the step budget.
#[derive(Clone, Debug, PartialEq)]
pub struct Trace {
    pub task: TaskId,
    pub goal: Goal,
    pub events: Vec<(u32, Event)>,
    pub steps: u32,
    pub max_steps: u32,
}

impl WorldState {
    pub fn trace(&self) -> Trace {
        Trace {
            task: self.spec.task,
            goal: self.goal.clone(),
            events: self.events.clone(),
            steps: self.step,
            max_steps: self.spec.max_steps,
        }
    }

    pub fn done(&self) -> bool {
        self.outcome.is_some()
    }

    pub fn rng(&self, salt: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &[salt, self.step as u64]))
    }

    pub fn observe(&self) -> Observation {
        render(self)
    }
}

pub fn dist(a: Pos, b: Pos) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Deterministic initial state and first observation.
pub fn env_reset(spec: &TaskSpec, seed: u64) -> (WorldState, Observation, Vec<u16>) {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[spec.task.index() as u64, 0x5eed]));
    let state = tasks::layout(spec, seed, &mut rng);
    let obs = render(&state);
    (state, obs, spec.instruction.clone())
}

pub fn env_reset_named(task: &str, seed: u64) -> Result<(WorldState, Observation, Vec<u16>)> {
    Ok(env_reset(&TaskSpec::new(TaskId::parse(task)?), seed))
}

/// Applies one action. Out-of-range components are clamped and counted.
pub fn env_step(state: &mut WorldState, action: &Action) -> (Observation, bool) {
    if state.done() {
        return (render(state), true);
    }
    let mut a = [0f64; ACTION_DIM];
    let mut clamped = false;
    for (o, &x) in a.iter_mut().zip(action) {
        let x = if x.is_finite() { x as f64 } else { 0.0 };
        if !(-1.0..=1.0).contains(&x) {
            clamped = true;
        }
        *o = x.clamp(-1.0, 1.0);
    }
    if clamped {
        state.clamped_actions += 1;
    }
    state.agent = snap([state.agent[0] + SPEED * a[0], state.agent[1] + SPEED * a[1]]);
    if let Some(h) = state.holding {
        state.objects[h].pos = state.agent;
    }
    let step = state.step;
    let mut events = Vec::new();

    let grip = a[3] > 0.0;
    if grip && !state.gripper_closed && state.holding.is_none() {
        let nearest = state
            .objects
            .iter()
            .enumerate()
            .map(|(i, o)| (i, dist(o.pos, state.agent)))
            .filter(|&(_, d)| d <= RADIUS)
            .min_by(|x, y| x.1.total_cmp(&y.1));
        if let Some((i, _)) = nearest {
            state.holding = Some(i);
            state.grasp_from = state.objects[i].pos;
            state.objects[i].pos = state.agent;
            events.push(Event::Grasp { object: i, pos: state.grasp_from });
        }
    }
    if !grip && state.gripper_closed {
        if let Some(i) = state.holding.take() {
            state.objects[i].pos = state.agent;
            events.push(Event::Release {
                object: i,
                pos: state.agent,
                from: state.grasp_from,
                objects: state.objects.iter().map(|o| o.pos).collect(),
            });
        }
    }
    state.gripper_closed = grip;

    let pressed = a[2] > 0.0;
    let rising = pressed && !state.interact_down;
    tasks::interact(state, pressed, rising, &mut events);
    state.interact_down = pressed;

    for e in events {
        state.events.push((step, e));
    }
    tasks::after_events(state);
    state.step += 1;
    let trace = state.trace();
    state.outcome = judge(&trace);
    if state.outcome.is_none() && state.step >= state.spec.max_steps {
        state.outcome = Some(Outcome::Failure(FailureCause::Timeout));
    }
    (render(state), state.done())
}

/// Verdict so far, or `None` while the episode is undecided.
pub fn judge(trace: &Trace) -> Option<Outcome> {
    tasks::judge(&trace.goal, &trace.events)
}

/// Final classification of a completed trace.
pub fn success(trace: &Trace) -> Outcome {
    judge(trace).unwrap_or(Outcome::Failure(FailureCause::Timeout))
}

/// Positions live on a 1/4096 grid clamped to the table, so a scripted
/// final approach lands exactly on its target.
pub(crate) fn snap(p: Pos) -> Pos {
    let q = |v: f64| (v.clamp(0.0, 1.0) * GRID).round() / GRID;
    [q(p[0]), q(p[1])]
}

const GRID: f64 = 4096.0;

/// Uniform sample in `[lo, hi)`.
pub(crate) fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}
