use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use remem::config::Config;
use remem::envsuite::{generate_dataset, read_dataset, write_dataset, Dataset, TaskId};
use remem::evaluator::{
    matrix, read_scores, render_causes, render_table, run_ablation, run_benchmark, score_records, write_scores, AblationArm, Curve, ModelPolicy,
    ScoreRecord,
};
use remem::trainer::{load_model, train};
use remem::Error;

mod config;

#[derive(Parser)]
#[command(name = "remem", version, about = "Recurrent-memory diffusion policies on synthetic manipulation tasks")]
struct Cli {
    /// Root directory for every command's output.
    #[arg(long, global = true, env = "REMEM_OUT", default_value = "runs")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// Named profile (desk, paper, tiny).
    #[arg(long)]
    profile: Option<String>,
    /// TOML file layered over the profile.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `key.path=value` override, applied last. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Output directory name under the root.
    #[arg(long)]
    name: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Roll out the scripted experts into episode files.
    Generate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Comma-separated task names; defaults to the configured tasks.
        #[arg(long, value_delimiter = ',')]
        tasks: Vec<String>,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train one model on generated episodes.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Directory written by `generate`.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Ablation arm applied before training.
        #[arg(long)]
        arm: Option<String>,
        /// Checkpoint to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a trained model.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// `model.bin` or a checkpoint.
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_delimiter = ',')]
        tasks: Vec<String>,
        #[arg(long)]
        trials: Option<usize>,
        /// Displace buttons mid-episode.
        #[arg(long)]
        perturb: bool,
    },
    /// Train and score a set of ablation arms.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Named arm group (levels, recurrence, pop, beta, queries, interval).
        #[arg(long, conflicts_with = "arms")]
        matrix: Option<String>,
        /// Explicit comma-separated arm names.
        #[arg(long, value_delimiter = ',')]
        arms: Vec<String>,
        /// Tasks to score; defaults to the training tasks.
        #[arg(long, value_delimiter = ',')]
        tasks: Vec<String>,
    },
    /// Render score files into tables and sweep curves.
    Report {
        /// Score files written by `eval` or `ablate`.
        #[arg(long, required = true, num_args = 1..)]
        scores: Vec<PathBuf>,
        #[arg(long)]
        name: Option<String>,
    },
}

/// Episode-file index written next to the data.
#[derive(Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    seed: u64,
    tasks: Vec<ManifestEntry>,
    action_min: Vec<f32>,
    action_max: Vec<f32>,
}

#[derive(Debug, PartialEq, Serialize, Deserialize)]
struct ManifestEntry {
    task: String,
    file: String,
    episodes: usize,
    frames: usize,
}

const MANIFEST: &str = "manifest.json";

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    let Some(err) = e.chain().find_map(|c| c.downcast_ref::<Error>()) else {
        return if e.chain().any(|c| c.downcast_ref::<config::ConfigError>().is_some()) { 2 } else { 1 };
    };
    match err {
        Error::Config(_) | Error::UnknownTask(_) => 2,
        Error::Data(_) | Error::ExpertFailure { .. } | Error::Io(_) | Error::Format(_) | Error::Version { .. } | Error::Json(_) => 3,
        Error::Divergence { .. } | Error::NonFiniteLoss(_) => 4,
        _ => 1,
    }
}

/// Resolves the config, folds in command flags, creates the run directory
/// and writes the resolved config into it before anything else happens.
fn prepare(root: &Path, default_name: &str, args: &ConfigArgs, adjust: impl FnOnce(&mut Config) -> anyhow::Result<()>) -> anyhow::Result<(Config, PathBuf)> {
    let mut cfg = config::resolve(args.profile.as_deref(), args.config.as_deref(), &args.sets)?;
    adjust(&mut cfg)?;
    cfg.validate()?;
    let dir = root.join(args.name.as_deref().unwrap_or(default_name));
    fs::create_dir_all(&dir).map_err(Error::from)?;
    fs::write(dir.join("config.toml"), config::render(&cfg)?).map_err(Error::from)?;
    Ok((cfg, dir))
}

fn parse_tasks(names: &[String]) -> anyhow::Result<Vec<TaskId>> {
    Ok(names.iter().map(|t| TaskId::parse(t)).collect::<Result<_, _>>()?)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let root = cli.out;
    match cli.command {
        Command::Generate { cfg, tasks, count, seed } => {
            let (c, dir) = prepare(&root, "data", &cfg, |c| {
                if !tasks.is_empty() {
                    c.data.tasks = tasks;
                }
                c.data.episodes = count.unwrap_or(c.data.episodes);
                c.data.seed = seed.unwrap_or(c.data.seed);
                Ok(())
            })?;
            generate(&c, &dir)
        }
        Command::Train { cfg, data, arm, resume } => {
            let (c, dir) = prepare(&root, "train", &cfg, |c| {
                if let Some(arm) = arm {
                    AblationArm::parse(&arm)?.apply(c)?;
                }
                Ok(())
            })?;
            let data = load_data(&data.unwrap_or_else(|| root.join("data")), &c.data.tasks)?;
            let out = train(&c, &data, &dir, resume.as_deref(), |r| {
                if r.step % 100 == 0 {
                    eprintln!("step {} loss {:.4} lr {:.2e}", r.step, r.loss, r.lr);
                }
            })?;
            eprintln!("trained {} steps, final loss {:.4}, model at {}", c.train.steps, out.last_loss, dir.join("model.bin").display());
            Ok(())
        }
        Command::Eval { cfg, model, tasks, trials, perturb } => {
            let (c, dir) = prepare(&root, "eval", &cfg, |c| {
                c.eval.trials = trials.unwrap_or(c.eval.trials);
                c.eval.perturb |= perturb;
                Ok(())
            })?;
            let tasks = if tasks.is_empty() { parse_tasks(&c.data.tasks)? } else { parse_tasks(&tasks)? };
            let model = load_model(&model).with_context(|| format!("loading {}", model.display()))?;
            let mut policy = ModelPolicy::new(&model, &c.eval);
            let table = run_benchmark(&mut policy, &tasks, &c.eval)?;
            let records = score_records("model", &table);
            write_scores(&dir.join("scores.json"), &records)?;
            let rendered = render_table(&records);
            fs::write(dir.join("table.md"), &rendered).map_err(Error::from)?;
            print!("{rendered}");
            Ok(())
        }
        Command::Ablate { cfg, data, matrix: m, arms, tasks } => {
            let (c, dir) = prepare(&root, "ablate", &cfg, |_| Ok(()))?;
            let arms: Vec<AblationArm> = match m {
                Some(name) => matrix(&name)?,
                None if !arms.is_empty() => arms.iter().map(|a| AblationArm::parse(a)).collect::<Result<_, _>>()?,
                None => bail!(config::ConfigError("ablate needs --matrix or --arms".into())),
            };
            let data = load_data(&data.unwrap_or_else(|| root.join("data")), &c.data.tasks)?;
            let tasks = if tasks.is_empty() { parse_tasks(&c.data.tasks)? } else { parse_tasks(&tasks)? };
            let report = run_ablation(&c, &arms, &data, &tasks, &dir.join("arms"))?;
            fs::write(dir.join("report.json"), serde_json::to_string_pretty(&report).map_err(Error::from)? + "\n").map_err(Error::from)?;
            let records: Vec<ScoreRecord> = report.arms.iter().flat_map(|a| score_records(&a.arm, &a.scores)).collect();
            write_scores(&dir.join("scores.json"), &records)?;
            for a in report.arms.iter().filter(|a| a.error.is_some()) {
                eprintln!("arm {} diverged: {}", a.arm, a.error.as_deref().unwrap_or_default());
            }
            print!("{}", render_table(&records));
            Ok(())
        }
        Command::Report { scores, name } => {
            let dir = root.join(name.as_deref().unwrap_or("report"));
            fs::create_dir_all(&dir).map_err(Error::from)?;
            let mut records = Vec::new();
            for path in &scores {
                records.extend(read_scores(path).with_context(|| format!("reading {}", path.display()))?);
            }
            report(&records, &dir)
        }
    }
}

fn generate(c: &Config, dir: &Path) -> anyhow::Result<()> {
    let tasks = parse_tasks(&c.data.tasks)?;
    let mut entries = Vec::new();
    let mut all: Option<Dataset> = None;
    for task in tasks {
        let data = generate_dataset(task, c.data.episodes, c.data.seed)?;
        let file = format!("{}.episodes", task.name());
        write_dataset(&dir.join(&file), &data)?;
        entries.push(ManifestEntry { task: task.name().into(), file, episodes: data.episodes.len(), frames: data.frames() });
        all = Some(match all {
            None => data,
            Some(prev) => prev.merge(data),
        });
    }
    let all = all.ok_or_else(|| Error::Config("no tasks to generate".into()))?;
    let manifest = Manifest { version: 1, seed: c.data.seed, tasks: entries, action_min: all.action_min, action_max: all.action_max };
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest).map_err(Error::from)? + "\n").map_err(Error::from)?;
    eprintln!("wrote {} task files to {}", manifest.tasks.len(), dir.display());
    Ok(())
}

/// Loads the episode files of `tasks` listed in the manifest under `dir`.
fn load_data(dir: &Path, tasks: &[String]) -> anyhow::Result<Dataset> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::Data(format!("{}: {e}; run `generate` first", path.display())))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut data: Option<Dataset> = None;
    for task in tasks {
        let entry = manifest.tasks.iter().find(|e| &e.task == task).ok_or_else(|| Error::Data(format!("no episodes for `{task}` in {}", path.display())))?;
        let d = read_dataset(&dir.join(&entry.file))?;
        data = Some(match data {
            None => d,
            Some(prev) => prev.merge(d),
        });
    }
    Ok(data.ok_or_else(|| Error::Config("no training tasks configured".into()))?)
}

fn report(records: &[ScoreRecord], dir: &Path) -> anyhow::Result<()> {
    let mut md = String::from("# Success rates\n\n");
    md.push_str(&render_table(records));
    md.push_str("\n# Failure causes\n\n");
    md.push_str(&render_causes(records));
    let mut tasks: Vec<&str> = Vec::new();
    for r in records {
        if !tasks.contains(&r.task.as_str()) {
            tasks.push(&r.task);
        }
    }
    for prefix in ["beta_", "queries_", "interval_"] {
        for task in &tasks {
            let arms: Vec<(String, f64)> =
                records.iter().filter(|r| r.task == *task && r.arm.starts_with(prefix)).map(|r| (r.arm.clone(), r.success_pct)).collect();
            if arms.len() < 2 {
                continue;
            }
            let name = format!("{}{task}", prefix);
            let curve = Curve::from_arms(&name, &arms);
            fs::write(dir.join(format!("{name}.csv")), curve.csv()).map_err(Error::from)?;
            fs::write(dir.join(format!("{name}.svg")), curve.svg()).map_err(Error::from)?;
            let peak = match curve.interior_maximum() {
                Some(i) => format!("interior maximum at {} = {}", curve.x_label, curve.points[i].0),
                None => "no interior maximum".into(),
            };
            md.push_str(&format!("\n{name}: {peak}\n"));
        }
    }
    fs::write(dir.join("report.md"), &md).map_err(Error::from)?;
    print!("{md}");
    Ok(())
}
