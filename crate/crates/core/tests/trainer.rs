use std::collections::VecDeque;

use remem::config::Config;
use remem::envsuite::{generate_dataset, Dataset, TaskId};
use remem::model::{Model, Phase};
use remem::numerics::graph::GradientReport;
use remem::numerics::optim::AdamW;
use remem::trainer::{action_chunk, checkpoint_path, load_model, noise_rng, train, SlotPool, Trainer};
use remem::Error;

fn small_config() -> Config {
    let mut cfg = Config::profile("tiny").unwrap();
    cfg.model.heads.noise_samples = 1;
    cfg.train.batch = 2;
    cfg.train.steps = 40;
    cfg.train.checkpoint_every = 0;
    cfg.seed = 11;
    cfg
}

fn data(count: usize) -> Dataset {
    generate_dataset(TaskId::HoldDuration, count, 3).unwrap()
}

fn pool(lengths: &[usize], batch: usize, shuffle: bool) -> (Model, SlotPool) {
    let model = Model::new(&small_config().model, 0).unwrap();
    let p = SlotPool::new(lengths.to_vec(), batch, shuffle, 5, &model.memory, &model.store).unwrap();
    (model, p)
}

/// Reference scheduler: a FIFO of episode indices, refilled in order, and
/// slots that pull from it in slot order whenever they finish.
fn enumerate(lengths: &[usize], batch: usize, steps: usize) -> Vec<Vec<(usize, usize)>> {
    let mut queue: VecDeque<usize> = VecDeque::new();
    let pull = |q: &mut VecDeque<usize>| {
        if q.is_empty() {
            q.extend(0..lengths.len());
        }
        q.pop_front().unwrap()
    };
    let mut cursors: Vec<(usize, usize)> = (0..batch).map(|_| (pull(&mut queue), 0)).collect();
    let mut out = Vec::new();
    for _ in 0..steps {
        out.push(cursors.clone());
        for c in cursors.iter_mut() {
            c.1 += 1;
            if c.1 == lengths[c.0] {
                *c = (pull(&mut queue), 0);
            }
        }
    }
    out
}

#[test]
fn slot_schedule_matches_hand_enumeration() {
    let (model, mut p) = pool(&[2, 3, 4], 2, false);
    let expected = [
        [(0, 0), (1, 0)],
        [(0, 1), (1, 1)],
        [(2, 0), (1, 2)],
        [(2, 1), (0, 0)],
        [(2, 2), (0, 1)],
        [(2, 3), (1, 0)],
        [(2, 0), (1, 1)],
    ];
    for want in expected {
        let got: Vec<(usize, usize)> = p.current().iter().map(|b| (b.episode, b.t)).collect();
        assert_eq!(got, want.to_vec());
        p.advance(&model.memory, &model.store);
    }
}

#[test]
fn slot_schedule_matches_reference_simulator() {
    for (lengths, batch) in [(vec![2, 3, 4], 2), (vec![1, 1, 5, 2], 3), (vec![7], 4), (vec![3, 1, 4, 1, 5, 9, 2, 6], 5)] {
        let (model, mut p) = pool(&lengths, batch, false);
        for (step, want) in enumerate(&lengths, batch, 60).into_iter().enumerate() {
            let items = p.current();
            assert_eq!(items.len(), batch, "batch is always full");
            let got: Vec<(usize, usize)> = items.iter().map(|b| (b.episode, b.t)).collect();
            assert_eq!(got, want, "lengths {lengths:?} step {step}");
            p.advance(&model.memory, &model.store);
        }
    }
}

#[test]
fn shuffled_epochs_are_permutations() {
    let lengths = [1usize; 9];
    let (model, mut p) = pool(&lengths, 1, true);
    let mut epochs = Vec::new();
    for _ in 0..4 {
        let mut seen: Vec<usize> = (0..9)
            .map(|_| {
                let e = p.current()[0].episode;
                p.advance(&model.memory, &model.store);
                e
            })
            .collect();
        epochs.push(seen.clone());
        seen.sort_unstable();
        assert_eq!(seen, (0..9).collect::<Vec<_>>());
    }
    assert!(epochs.windows(2).any(|w| w[0] != w[1]), "order changes between epochs");
    let (model, mut q) = pool(&lengths, 1, true);
    for e in epochs.concat() {
        assert_eq!(q.current()[0].episode, e, "same seed, same order");
        q.advance(&model.memory, &model.store);
    }
}

#[test]
fn each_visit_gets_a_fresh_tag_and_state() {
    let (model, mut p) = pool(&[2, 3], 2, false);
    let mut tags = Vec::new();
    for _ in 0..12 {
        for (item, slot) in p.current().iter().zip(&p.slots) {
            assert_eq!(slot.state.tag, Some(item.tag));
            if item.t == 0 {
                assert_eq!(slot.state.t, 0);
                tags.push(item.tag);
            }
        }
        p.advance(&model.memory, &model.store);
    }
    let mut unique = tags.clone();
    unique.dedup();
    unique.sort_unstable();
    unique.dedup();
    assert_eq!(unique.len(), tags.len());
}

#[test]
fn pool_rejects_bad_inputs() {
    let model = Model::new(&small_config().model, 0).unwrap();
    assert!(matches!(SlotPool::new(vec![], 2, false, 0, &model.memory, &model.store), Err(Error::Data(_))));
    assert!(matches!(SlotPool::new(vec![3, 0], 2, false, 0, &model.memory, &model.store), Err(Error::Data(_))));
    assert!(SlotPool::new(vec![3], 0, false, 0, &model.memory, &model.store).is_err());
    let mut empty = data(1);
    empty.episodes.clear();
    assert!(Trainer::new(&small_config(), &empty).is_err());
}

#[test]
fn action_chunk_repeats_the_last_action() {
    let d = data(1);
    let ep = &d.episodes[0];
    let n = d.normalizer();
    let last = n.normalize(ep.actions.last().unwrap());
    let c = action_chunk(ep, ep.len() - 2, 8, &n);
    assert_eq!(c.row(0), n.normalize(&ep.actions[ep.len() - 2]).as_slice());
    for i in 1..8 {
        assert_eq!(c.row(i), last.as_slice());
    }
}

#[test]
fn single_slot_stream_equals_per_episode_processing() {
    let mut cfg = small_config();
    cfg.train.batch = 1;
    cfg.train.shuffle = false;
    cfg.train.phase1_fraction = 0.0;
    let d = data(3);
    let mut t = Trainer::new(&cfg, &d).unwrap();
    let frames = d.frames();
    let streamed: Vec<f64> = (0..frames).map(|_| t.eval_step(&d).unwrap().loss).collect();

    let model = Model::new(&cfg.model, cfg.seed).unwrap();
    let mut model = model;
    model.normalizer = d.normalizer();
    let past = cfg.model.heads.past_target();
    let mut reference = Vec::new();
    let mut step = 0u64;
    for ep in &d.episodes {
        let mut state = model.fresh_state();
        for i in 0..ep.len() {
            let chunk = action_chunk(ep, i, cfg.model.heads.chunk, &model.normalizer);
            let target = past.index(i).map(|j| &ep.frames[j].views[0]);
            let r = model
                .train_frame(&ep.frames[i], &ep.instruction, &state, &chunk, target, Phase::Memory, &mut noise_rng(cfg.seed, step, 0))
                .unwrap();
            model.memory.advance(&model.store, &mut state, &r.frame_x, &r.chunk_x).unwrap();
            reference.push(r.loss);
            step += 1;
        }
    }
    assert_eq!(streamed, reference);
}

#[test]
fn learning_rate_endpoints() {
    let mut cfg = small_config();
    cfg.train.lr = 5e-5;
    cfg.train.lr_min = 1e-7;
    cfg.train.steps = 6;
    let d = data(2);
    let mut t = Trainer::new(&cfg, &d).unwrap();
    let lrs: Vec<f64> = (0..6).map(|_| t.train_step(&d).unwrap().lr).collect();
    assert!((lrs[0] - 5e-5).abs() < 1e-12);
    assert!((lrs[5] - 1e-7).abs() < 1e-9);
    assert!(lrs.windows(2).all(|w| w[1] < w[0]));
    for (s, lr) in lrs.iter().enumerate() {
        let oracle = 1e-7 + 0.5 * (5e-5 - 1e-7) * (1.0 + (std::f64::consts::PI * s as f64 / 5.0).cos());
        assert!((lr - oracle).abs() < 1e-15);
    }
}

#[test]
fn zero_gradient_leaves_parameters_unchanged_without_decay() {
    let mut model = Model::new(&small_config().model, 0).unwrap();
    let before = model.store.clone();
    let mut opt = AdamW::new(&model.store, 0.0);
    let zero = GradientReport::empty(model.store.len());
    for _ in 0..3 {
        opt.step(&mut model.store, &zero, 1e-3);
    }
    assert!(model.store.bit_equal(&before));
}

#[test]
fn recurrent_state_is_a_gradient_barrier() {
    let cfg = small_config();
    let d = data(1);
    let ep = &d.episodes[0];
    let mut model = Model::new(&cfg.model, 0).unwrap();
    model.normalizer = d.normalizer();
    let chunk = action_chunk(ep, 0, cfg.model.heads.chunk, &model.normalizer);
    let frame = model.store.id("query.frame").unwrap();
    let chunk_q = model.store.id("query.chunk").unwrap();
    let norm = |g: Option<&remem::numerics::Matrix>| g.map_or(0.0, |m| m.data().iter().map(|v| v.abs() as f64).sum::<f64>());

    let mut state = model.fresh_state();
    let r = model.train_frame(&ep.frames[0], &ep.instruction, &state, &chunk, None, Phase::Memory, &mut noise_rng(0, 0, 0)).unwrap();
    assert!(norm(r.grads.grad(frame)) > 0.0, "first frame reads the learned init");
    assert!(norm(r.grads.grad(chunk_q)) > 0.0);
    model.memory.advance(&model.store, &mut state, &r.frame_x, &r.chunk_x).unwrap();
    let r = model.train_frame(&ep.frames[1], &ep.instruction, &state, &chunk, None, Phase::Memory, &mut noise_rng(0, 1, 0)).unwrap();
    assert_eq!(norm(r.grads.grad(frame)), 0.0, "propagated state carries no gradient");
    assert_eq!(norm(r.grads.grad(chunk_q)), 0.0);
    assert!(norm(r.grads.grad(model.store.id("query.action").unwrap())) > 0.0);
}

#[test]
fn backbone_is_frozen_only_in_the_memory_phase() {
    let mut cfg = small_config();
    cfg.train.steps = 4;
    cfg.train.phase1_fraction = 0.5;
    let d = data(2);
    let mut t = Trainer::new(&cfg, &d).unwrap();
    let patch = t.model.store.id("backbone.patch.w").unwrap();
    let snapshot = |t: &Trainer| t.model.store.get(patch).clone();
    let mut phases = Vec::new();
    let mut changed = Vec::new();
    for _ in 0..4 {
        let before = snapshot(&t);
        phases.push(t.train_step(&d).unwrap().phase);
        changed.push(snapshot(&t) != before);
    }
    assert_eq!(phases, ["pretrain", "pretrain", "memory", "memory"]);
    assert_eq!(changed, [true, true, false, false]);

    cfg.train.trainable_backbone = true;
    let mut t = Trainer::new(&cfg, &d).unwrap();
    for _ in 0..3 {
        t.train_step(&d).unwrap();
    }
    let before = snapshot(&t);
    t.train_step(&d).unwrap();
    assert_ne!(snapshot(&t), before);
}

#[test]
fn resume_is_bit_identical_over_100_steps() {
    let mut cfg = small_config();
    cfg.train.steps = 100;
    let d = data(3);
    let dir = tempfile::tempdir().unwrap();

    let mut straight = Trainer::new(&cfg, &d).unwrap();
    let mut losses = Vec::new();
    for _ in 0..100 {
        losses.push(straight.train_step(&d).unwrap().loss);
    }

    // Split before the phase switch at step 30 so the rewind is replayed too.
    let mut first = Trainer::new(&cfg, &d).unwrap();
    let mut resumed_losses = Vec::new();
    for _ in 0..20 {
        resumed_losses.push(first.train_step(&d).unwrap().loss);
    }
    let ckpt = dir.path().join("mid.ckpt");
    first.save(&ckpt).unwrap();
    drop(first);
    let mut second = Trainer::resume(&cfg, &d, &ckpt).unwrap();
    assert_eq!(second.step, 20);
    while !second.done() {
        resumed_losses.push(second.train_step(&d).unwrap().loss);
    }
    assert_eq!(losses, resumed_losses);
    assert!(straight.model.store.bit_equal(&second.model.store));
    assert_eq!(straight.pool, second.pool);
}

#[test]
fn resume_rejects_mismatched_runs() {
    let cfg = small_config();
    let d = data(2);
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("a.ckpt");
    let mut t = Trainer::new(&cfg, &d).unwrap();
    t.train_step(&d).unwrap();
    t.save(&ckpt).unwrap();

    let mut other = cfg.clone();
    other.train.lr *= 2.0;
    assert!(matches!(Trainer::resume(&other, &d, &ckpt), Err(Error::Config(_))));
    let mut other = cfg.clone();
    other.seed += 1;
    assert!(Trainer::resume(&other, &d, &ckpt).is_err());
    assert!(matches!(Trainer::resume(&cfg, &data(3), &ckpt), Err(Error::Data(_))));
    let mut other = cfg.clone();
    other.model.memory.n_frame += 2;
    assert!(Trainer::resume(&other, &d, &ckpt).is_err());

    let bytes = std::fs::read(&ckpt).unwrap();
    let cut = dir.path().join("cut.ckpt");
    std::fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
    assert!(Trainer::resume(&cfg, &d, &cut).is_err());
    std::fs::write(&cut, b"nope").unwrap();
    assert!(Trainer::resume(&cfg, &d, &cut).is_err());
}

#[test]
fn fresh_checkpoint_reproduces_initialization() {
    let cfg = small_config();
    let d = data(2);
    let dir = tempfile::tempdir().unwrap();
    let t = Trainer::new(&cfg, &d).unwrap();
    let path = dir.path().join("init.ckpt");
    t.save(&path).unwrap();
    let r = Trainer::resume(&cfg, &d, &path).unwrap();
    assert!(r.model.store.bit_equal(&Model::new(&cfg.model, cfg.seed).unwrap().store));
    assert_eq!(r.step, 0);
}

#[test]
fn train_writes_logs_checkpoints_and_model() {
    let mut cfg = small_config();
    cfg.train.steps = 6;
    cfg.train.checkpoint_every = 2;
    let d = data(2);
    let dir = tempfile::tempdir().unwrap();
    let mut seen = 0;
    let out = train(&cfg, &d, dir.path(), None, |_| seen += 1).unwrap();
    assert_eq!(seen, 6);
    assert!(out.last_loss.is_finite());
    let log = std::fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 6);
    let first: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert_eq!(first["step"], 0);
    assert!(checkpoint_path(dir.path(), 2).exists() && checkpoint_path(dir.path(), 4).exists());
    assert!(!checkpoint_path(dir.path(), 6).exists());
    for p in [dir.path().join("model.bin"), out.final_checkpoint.clone()] {
        assert!(load_model(&p).unwrap().store.bit_equal(&out.model.store));
    }

    // Resuming from the step-4 checkpoint finishes with the same weights.
    let again = tempfile::tempdir().unwrap();
    let resumed = train(&cfg, &d, again.path(), Some(&checkpoint_path(dir.path(), 4)), |_| {}).unwrap();
    assert!(resumed.model.store.bit_equal(&out.model.store));
}
