//! Closed-loop rollouts, benchmark tables and the ablation matrix.

use std::collections::{BTreeMap, VecDeque};
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::Observation;
use crate::config::{Config, EvalConfig};
use crate::envsuite::{env_reset, env_step, expert_action, success, Action, Dataset, FailureCause, Outcome, TaskId, TaskSpec, WorldState, ACTION_DIM};
use crate::error::{Error, Result};
use crate::heads::PopMode;
use crate::memory::{RecurrentState, Recurrence};
use crate::model::Model;
use crate::numerics::params::derive_seed;
use crate::trainer;

/// Something that picks actions in a running episode.
pub trait Policy {
    /// Called once before the first frame of every episode.
    fn reset(&mut self, seed: u64) -> Result<()>;
    fn act(&mut self, world: &WorldState, obs: &Observation, instruction: &[u16]) -> Result<Action>;
}

/// Runs a trained model: samples a chunk, executes its first `execute`
/// actions, and feeds every frame through the recurrent state.
pub struct ModelPolicy<'a> {
    pub model: &'a Model,
    pub state: RecurrentState,
    pub ddim_steps: usize,
    pub execute: usize,
    queue: VecDeque<Action>,
    rng: ChaCha8Rng,
    /// Wipe the recurrent state right before this frame (fault injection).
    pub reset_at: Option<u32>,
    pub resets: u32,
    pub predictions: u32,
    tag: u64,
}

impl<'a> ModelPolicy<'a> {
    pub fn new(model: &'a Model, eval: &EvalConfig) -> Self {
        Self {
            model,
            state: model.fresh_state(),
            ddim_steps: eval.ddim_steps,
            execute: eval.execute,
            queue: VecDeque::new(),
            rng: ChaCha8Rng::seed_from_u64(0),
            reset_at: None,
            resets: 0,
            predictions: 0,
            tag: 0,
        }
    }

    pub fn with_fault(mut self, at: u32) -> Self {
        self.reset_at = Some(at);
        self
    }
}

impl Policy for ModelPolicy<'_> {
    fn reset(&mut self, seed: u64) -> Result<()> {
        self.tag = seed;
        self.model.reset_state(&mut self.state, Some(seed));
        self.queue.clear();
        self.rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0xd1]));
        self.resets += 1;
        self.predictions = 0;
        Ok(())
    }

    fn act(&mut self, world: &WorldState, obs: &Observation, instruction: &[u16]) -> Result<Action> {
        self.state.check_tag(self.tag)?;
        if self.reset_at == Some(world.step) {
            self.model.reset_state(&mut self.state, Some(self.tag));
        }
        let predict = self.queue.is_empty();
        let chunk = self.model.step(&mut self.state, obs, instruction, predict, self.ddim_steps, &mut self.rng)?;
        if let Some(chunk) = chunk {
            self.predictions += 1;
            for i in 0..self.execute.min(chunk.rows()) {
                let a = self.model.normalizer.denormalize(chunk.row(i));
                let mut out = [0f32; ACTION_DIM];
                for (o, v) in out.iter_mut().zip(a) {
                    *o = v.clamp(-1.0, 1.0);
                }
                self.queue.push_back(out);
            }
        }
        self.queue.pop_front().ok_or_else(|| Error::InvalidArgument("empty action chunk".into()))
    }
}

/// The scripted expert behind the policy interface.
pub struct ExpertPolicy;

impl Policy for ExpertPolicy {
    fn reset(&mut self, _seed: u64) -> Result<()> {
        Ok(())
    }

    fn act(&mut self, world: &WorldState, _obs: &Observation, _instruction: &[u16]) -> Result<Action> {
        Ok(expert_action(world))
    }
}

/// Uniform actions in [−1, 1].
pub struct RandomPolicy {
    rng: ChaCha8Rng,
}

impl RandomPolicy {
    pub fn new() -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(0) }
    }
}

impl Default for RandomPolicy {
    fn default() -> Self {
        Self::new()
    }
}

impl Policy for RandomPolicy {
    fn reset(&mut self, seed: u64) -> Result<()> {
        self.rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x7a4d]));
        Ok(())
    }

    fn act(&mut self, _world: &WorldState, _obs: &Observation, _instruction: &[u16]) -> Result<Action> {
        Ok(std::array::from_fn(|_| self.rng.random_range(-1.0..=1.0)))
    }
}

/// Replays a fixed action sequence without looking at observations.
pub struct ReplayPolicy {
    pub actions: Vec<Action>,
    cursor: usize,
}

impl ReplayPolicy {
    pub fn new(actions: Vec<Action>) -> Self {
        Self { actions, cursor: 0 }
    }
}

impl Policy for ReplayPolicy {
    fn reset(&mut self, _seed: u64) -> Result<()> {
        self.cursor = 0;
        Ok(())
    }

    fn act(&mut self, _world: &WorldState, _obs: &Observation, _instruction: &[u16]) -> Result<Action> {
        let a = self.actions.get(self.cursor).copied().unwrap_or([0.0, 0.0, -1.0, -1.0]);
        self.cursor += 1;
        Ok(a)
    }
}

#[derive(Clone, Debug)]
pub struct Rollout {
    pub outcome: Outcome,
    pub world: WorldState,
    pub actions: Vec<Action>,
}

/// Seed of evaluation trial `i` of `task`.
pub fn trial_seed(seed_base: u64, task: TaskId, i: usize) -> u64 {
    derive_seed(seed_base, &[0xe7a1, task.index() as u64, i as u64])
}

pub fn rollout(policy: &mut dyn Policy, spec: &TaskSpec, seed: u64) -> Result<Rollout> {
    let (mut world, mut obs, instruction) = env_reset(spec, seed);
    policy.reset(seed)?;
    let mut actions = Vec::new();
    while !world.done() {
        let a = policy.act(&world, &obs, &instruction)?;
        actions.push(a);
        obs = env_step(&mut world, &a).0;
    }
    Ok(Rollout { outcome: success(&world.trace()), world, actions })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskScore {
    pub task: TaskId,
    pub trials: usize,
    pub successes: usize,
    pub causes: BTreeMap<FailureCause, usize>,
}

impl TaskScore {
    pub fn new(task: TaskId) -> Self {
        Self { task, trials: 0, successes: 0, causes: FailureCause::ALL.iter().map(|&c| (c, 0)).collect() }
    }

    pub fn record(&mut self, outcome: Outcome) {
        self.trials += 1;
        match outcome {
            Outcome::Success => self.successes += 1,
            Outcome::Failure(c) => *self.causes.entry(c).or_default() += 1,
        }
    }

    pub fn merge(&mut self, other: &TaskScore) {
        self.trials += other.trials;
        self.successes += other.successes;
        for (c, n) in &other.causes {
            *self.causes.entry(*c).or_default() += n;
        }
    }

    pub fn success_pct(&self) -> f64 {
        if self.trials == 0 {
            0.0
        } else {
            100.0 * self.successes as f64 / self.trials as f64
        }
    }

    pub fn cause_share(&self, cause: FailureCause) -> f64 {
        let failures = self.trials - self.successes;
        if failures == 0 {
            0.0
        } else {
            self.causes.get(&cause).copied().unwrap_or(0) as f64 / failures as f64
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    pub rows: Vec<TaskScore>,
}

impl ScoreTable {
    pub fn get(&self, task: TaskId) -> Option<&TaskScore> {
        self.rows.iter().find(|r| r.task == task)
    }

    pub fn pct(&self, task: TaskId) -> f64 {
        self.get(task).map_or(0.0, TaskScore::success_pct)
    }

    /// Unweighted mean of the per-task success percentages.
    pub fn average(&self) -> f64 {
        average(&self.rows.iter().map(TaskScore::success_pct).collect::<Vec<_>>())
    }

    pub fn merge(&mut self, other: &ScoreTable) {
        for r in &other.rows {
            match self.rows.iter_mut().find(|x| x.task == r.task) {
                Some(x) => x.merge(r),
                None => self.rows.push(r.clone()),
            }
        }
    }
}

pub fn average(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

/// Scores a policy on `trials` seeded episodes of every task.
pub fn run_benchmark(policy: &mut dyn Policy, tasks: &[TaskId], eval: &EvalConfig) -> Result<ScoreTable> {
    if eval.trials < 50 {
        return Err(Error::Config(format!("benchmarks need at least 50 trials, got {}", eval.trials)));
    }
    score(policy, tasks, eval)
}

/// [`run_benchmark`] without the trial-count floor.
pub fn score(policy: &mut dyn Policy, tasks: &[TaskId], eval: &EvalConfig) -> Result<ScoreTable> {
    let mut table = ScoreTable::default();
    for &task in tasks {
        let spec = TaskSpec::new(task).with_perturbation(eval.perturb);
        let mut row = TaskScore::new(task);
        for i in 0..eval.trials {
            row.record(rollout(policy, &spec, trial_seed(eval.seed_base, task, i))?.outcome);
        }
        table.rows.push(row);
    }
    Ok(table)
}

/// One configuration change studied in isolation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationArm {
    NoQuery,
    FrameOnly,
    ChunkOnly,
    Dual,
    BetaSweep(f64),
    /// Total recurrent query count, split evenly between the two levels.
    QueryCount(usize),
    /// Chunk update interval in frames.
    Interval(usize),
    LearnableGru,
    LearnableMlp,
    TrainableBackbone,
    PopOn,
    PopOff,
    PopFirstFrame,
}

impl AblationArm {
    pub fn name(&self) -> String {
        match self {
            AblationArm::NoQuery => "no_query".into(),
            AblationArm::FrameOnly => "frame_only".into(),
            AblationArm::ChunkOnly => "chunk_only".into(),
            AblationArm::Dual => "dual".into(),
            AblationArm::BetaSweep(b) => format!("beta_{b}"),
            AblationArm::QueryCount(n) => format!("queries_{n}"),
            AblationArm::Interval(k) => format!("interval_{k}"),
            AblationArm::LearnableGru => "learnable_gru".into(),
            AblationArm::LearnableMlp => "learnable_mlp".into(),
            AblationArm::TrainableBackbone => "trainable_backbone".into(),
            AblationArm::PopOn => "pop_on".into(),
            AblationArm::PopOff => "pop_off".into(),
            AblationArm::PopFirstFrame => "pop_first_frame".into(),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let num = |p: &str| s.strip_prefix(p).map(str::parse::<f64>);
        Ok(match s {
            "no_query" => AblationArm::NoQuery,
            "frame_only" => AblationArm::FrameOnly,
            "chunk_only" => AblationArm::ChunkOnly,
            "dual" => AblationArm::Dual,
            "learnable_gru" => AblationArm::LearnableGru,
            "learnable_mlp" => AblationArm::LearnableMlp,
            "trainable_backbone" => AblationArm::TrainableBackbone,
            "pop_on" => AblationArm::PopOn,
            "pop_off" => AblationArm::PopOff,
            "pop_first_frame" => AblationArm::PopFirstFrame,
            _ => match (num("beta_"), num("queries_"), num("interval_")) {
                (Some(Ok(b)), _, _) => AblationArm::BetaSweep(b),
                (_, Some(Ok(n)), _) => AblationArm::QueryCount(n as usize),
                (_, _, Some(Ok(k))) => AblationArm::Interval(k as usize),
                _ => return Err(Error::Config(format!("unknown ablation arm `{s}`"))),
            },
        })
    }

    /// Rewrites `cfg` for this arm. The four level arms keep the total
    /// recurrent query count of the base configuration.
    pub fn apply(&self, cfg: &mut Config) -> Result<()> {
        let m = &mut cfg.model.memory;
        let total = m.n_frame + m.n_chunk;
        match *self {
            AblationArm::NoQuery => {
                m.n_frame = total;
                m.n_chunk = 0;
                m.recurrence = Recurrence::Stateless;
            }
            AblationArm::FrameOnly => {
                m.n_frame = total;
                m.n_chunk = 0;
            }
            AblationArm::ChunkOnly => {
                m.n_frame = 0;
                m.n_chunk = total;
            }
            AblationArm::Dual => {
                m.n_frame = total / 2;
                m.n_chunk = total - total / 2;
            }
            AblationArm::BetaSweep(b) => {
                m.beta_frame = b;
                m.beta_chunk = b;
            }
            AblationArm::QueryCount(n) => {
                m.n_frame = n / 2;
                m.n_chunk = n - n / 2;
            }
            AblationArm::Interval(k) => m.chunk_interval = k,
            AblationArm::LearnableGru => m.recurrence = Recurrence::Gru,
            AblationArm::LearnableMlp => m.recurrence = Recurrence::Mlp,
            AblationArm::TrainableBackbone => cfg.train.trainable_backbone = true,
            AblationArm::PopOn => cfg.model.heads.pop_mode = PopMode::FixedOffset,
            AblationArm::PopOff => cfg.model.heads.pop_mode = PopMode::Off,
            AblationArm::PopFirstFrame => cfg.model.heads.pop_mode = PopMode::FirstFrame,
        }
        cfg.validate()
    }
}

/// Named arm groups.
pub fn matrix(name: &str) -> Result<Vec<AblationArm>> {
    use AblationArm::*;
    Ok(match name {
        "levels" => vec![NoQuery, FrameOnly, ChunkOnly, Dual],
        "recurrence" => vec![Dual, LearnableGru, LearnableMlp, TrainableBackbone, NoQuery],
        "pop" => vec![PopFirstFrame, PopOn, PopOff],
        "beta" => [0.0, 0.3, 0.5, 0.7, 0.9, 1.0].into_iter().map(BetaSweep).collect(),
        "queries" => [4, 8, 16, 32, 64].into_iter().map(QueryCount).collect(),
        "interval" => [2, 4, 8, 16, 32].into_iter().map(Interval).collect(),
        other => {
            return Err(Error::Config(format!("unknown matrix `{other}` (levels, recurrence, pop, beta, queries, interval)")))
        }
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub arm: String,
    pub scores: ScoreTable,
    /// Set when training the arm failed; the arm then has no scores.
    pub error: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub arms: Vec<ArmResult>,
}

impl AblationReport {
    pub fn arm(&self, name: &str) -> Option<&ArmResult> {
        self.arms.iter().find(|a| a.arm == name)
    }
}

/// Trains every arm from the same seed and data, then scores it.
pub fn run_ablation(base: &Config, arms: &[AblationArm], data: &Dataset, tasks: &[TaskId], dir: &Path) -> Result<AblationReport> {
    let mut report = AblationReport::default();
    for arm in arms {
        let mut cfg = base.clone();
        arm.apply(&mut cfg)?;
        let arm_dir = dir.join(arm.name());
        let result = match trainer::train(&cfg, data, &arm_dir, None, |_| {}) {
            Ok(out) => {
                let mut policy = ModelPolicy::new(&out.model, &cfg.eval);
                ArmResult { arm: arm.name(), scores: score(&mut policy, tasks, &cfg.eval)?, error: None }
            }
            Err(e @ Error::Divergence { .. }) => ArmResult { arm: arm.name(), scores: ScoreTable::default(), error: Some(e.to_string()) },
            Err(e) => return Err(e),
        };
        report.arms.push(result);
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub task: String,
    pub arm: String,
    pub success_pct: f64,
    pub trials: usize,
    pub causes: BTreeMap<String, usize>,
}

/// Flattens arm tables into the score-file record list.
pub fn score_records(arm: &str, table: &ScoreTable) -> Vec<ScoreRecord> {
    table
        .rows
        .iter()
        .map(|r| ScoreRecord {
            task: r.task.name().into(),
            arm: arm.into(),
            success_pct: r.success_pct(),
            trials: r.trials,
            causes: r.causes.iter().map(|(c, n)| (c.name().to_string(), *n)).collect(),
        })
        .collect()
}

pub fn write_scores(path: &Path, records: &[ScoreRecord]) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(records)? + "\n")?;
    Ok(())
}

pub fn read_scores(path: &Path) -> Result<Vec<ScoreRecord>> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

/// Markdown table: one row per arm, one column per task, then the average.
pub fn render_table(records: &[ScoreRecord]) -> String {
    let mut arms: Vec<&str> = Vec::new();
    let mut tasks: Vec<&str> = Vec::new();
    for r in records {
        if !arms.contains(&r.arm.as_str()) {
            arms.push(&r.arm);
        }
        if !tasks.contains(&r.task.as_str()) {
            tasks.push(&r.task);
        }
    }
    let mut out = String::new();
    let _ = writeln!(out, "| arm | {} | average |", tasks.join(" | "));
    let _ = writeln!(out, "|---|{}---|", "---|".repeat(tasks.len()));
    for arm in arms {
        let mut cells = Vec::new();
        let mut values = Vec::new();
        for task in &tasks {
            match records.iter().find(|r| r.arm == arm && r.task == *task) {
                Some(r) => {
                    values.push(r.success_pct);
                    cells.push(format!("{:.1}", r.success_pct));
                }
                None => cells.push("-".into()),
            }
        }
        let _ = writeln!(out, "| {arm} | {} | {:.2} |", cells.join(" | "), average(&values));
    }
    out
}

/// Failure-cause shares per (arm, task) as a markdown table.
pub fn render_causes(records: &[ScoreRecord]) -> String {
    let mut out = String::from("| arm | task | success | memory_error | manipulation_error | timeout |\n|---|---|---|---|---|---|\n");
    for r in records {
        let n = |c: FailureCause| r.causes.get(c.name()).copied().unwrap_or(0);
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} | {} | {} |",
            r.arm,
            r.task,
            r.trials - n(FailureCause::MemoryError) - n(FailureCause::ManipulationError) - n(FailureCause::Timeout),
            n(FailureCause::MemoryError),
            n(FailureCause::ManipulationError),
            n(FailureCause::Timeout)
        );
    }
    out
}

/// One sweep curve: x values and success percentages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub name: String,
    pub x_label: String,
    pub points: Vec<(f64, f64)>,
}

impl Curve {
    /// Index of the best point if it is strictly inside the sweep.
    pub fn interior_maximum(&self) -> Option<usize> {
        let best = self.points.iter().enumerate().max_by(|a, b| a.1 .1.total_cmp(&b.1 .1))?.0;
        (best > 0 && best + 1 < self.points.len()).then_some(best)
    }

    pub fn csv(&self) -> String {
        let mut out = format!("{},success_pct\n", self.x_label);
        for (x, y) in &self.points {
            let _ = writeln!(out, "{x},{y:.2}");
        }
        out
    }

    /// Minimal line plot.
    pub fn svg(&self) -> String {
        let (w, h, pad) = (360.0, 240.0, 36.0);
        let xs: Vec<f64> = self.points.iter().map(|p| p.0).collect();
        let (lo, hi) = xs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
        let span = if hi > lo { hi - lo } else { 1.0 };
        let px = |x: f64| pad + (x - lo) / span * (w - 2.0 * pad);
        let py = |y: f64| h - pad - y / 100.0 * (h - 2.0 * pad);
        let path: Vec<String> = self.points.iter().map(|&(x, y)| format!("{:.1},{:.1}", px(x), py(y))).collect();
        let mut out = String::new();
        let _ = writeln!(out, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
        let _ = writeln!(out, r##"<rect width="{w}" height="{h}" fill="#fff"/>"##);
        let _ = writeln!(out, r##"<line x1="{pad}" y1="{0}" x2="{1}" y2="{0}" stroke="#000"/>"##, h - pad, w - pad);
        let _ = writeln!(out, r##"<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{0}" stroke="#000"/>"##, h - pad);
        let _ = writeln!(out, r##"<polyline fill="none" stroke="#1f77b4" stroke-width="2" points="{}"/>"##, path.join(" "));
        for &(x, y) in &self.points {
            let _ = writeln!(out, r##"<circle cx="{:.1}" cy="{:.1}" r="3" fill="#1f77b4"/>"##, px(x), py(y));
            let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" font-size="10" text-anchor="middle">{x}</text>"#, px(x), h - pad + 14.0);
        }
        let _ = writeln!(out, r#"<text x="{:.1}" y="14" font-size="12" text-anchor="middle">{}</text>"#, w / 2.0, self.name);
        out.push_str("</svg>\n");
        out
    }
}

/// Builds a curve over sweep arms from their per-task scores on `task`.
pub fn sweep_curve(name: &str, report: &AblationReport, task: TaskId) -> Curve {
    let arms: Vec<(String, f64)> = report.arms.iter().map(|a| (a.arm.clone(), a.scores.pct(task))).collect();
    Curve::from_arms(name, &arms)
}

impl Curve {
    /// Keeps the `(arm, success)` pairs whose arm is a sweep arm, ordered by
    /// the swept value.
    pub fn from_arms(name: &str, arms: &[(String, f64)]) -> Curve {
        let mut points = Vec::new();
        let mut x_label = "x".to_string();
        for (arm, pct) in arms {
            let Ok(arm) = AblationArm::parse(arm) else { continue };
            let (x, label) = match arm {
                AblationArm::BetaSweep(b) => (b, "beta"),
                AblationArm::QueryCount(n) => (n as f64, "queries"),
                AblationArm::Interval(k) => (k as f64, "interval"),
                _ => continue,
            };
            x_label = label.into();
            points.push((x, *pct));
        }
        points.sort_by(|a, b| a.0.total_cmp(&b.0));
        Curve { name: name.into(), x_label, points }
    }
}

/// Applies the evaluation part of a config to a trained model's policy.
pub fn model_policy<'a>(model: &'a Model, cfg: &Config) -> ModelPolicy<'a> {
    ModelPolicy::new(model, &cfg.eval)
}
