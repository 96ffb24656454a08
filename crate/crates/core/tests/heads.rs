use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use remem::config::Config;
use remem::envsuite::{generate_dataset, TaskId};
use remem::heads::{ddim_sample, ddpm_loss, DiffusionHead, DiffusionSchedule, HeadsConfig, PastTarget, PopMode};
use remem::model::{Model, Phase};
use remem::numerics::graph::Graph;
use remem::numerics::io::{ByteReader, ByteWriter};
use remem::numerics::{Matrix, ParamStore};
use remem::trainer::action_chunk;

fn head() -> (ParamStore, DiffusionHead, DiffusionSchedule) {
    let cfg = HeadsConfig { heads: 2, diffusion_layers: 1, ..HeadsConfig::default() };
    let mut store = ParamStore::new(5);
    let head = DiffusionHead::new(&mut store, &cfg, 16).unwrap();
    let sched = DiffusionSchedule::linear(cfg.t_diff, cfg.beta_start, cfg.beta_end, cfg.ddim_steps).unwrap();
    (store, head, sched)
}

fn cond() -> Matrix {
    Matrix::from_vec(4, 16, (0..64).map(|i| (i % 9) as f32 / 4.0 - 1.0).collect())
}

#[test]
fn sampling_is_seeded_clamped_and_bounded_in_steps() {
    let (store, head, sched) = head();
    let sample = |seed| ddim_sample(&head, &store, &cond(), &sched, 20, (8, 4), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    assert_eq!(sample(3), sample(3));
    assert_ne!(sample(3), sample(4));
    for seed in 0..5 {
        let s = sample(seed);
        assert_eq!(s.shape(), (8, 4));
        assert!(s.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }
    assert!(ddim_sample(&head, &store, &cond(), &sched, 101, (8, 4), &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    assert!(ddim_sample(&head, &store, &cond(), &sched, 0, (8, 4), &mut ChaCha8Rng::seed_from_u64(0)).is_err());
}

#[test]
fn ddpm_loss_is_seed_deterministic() {
    let (store, head, sched) = head();
    let chunk = Matrix::filled(8, 4, 0.25);
    let loss = |seed| {
        let mut g = Graph::new(&store);
        let c = g.constant(cond());
        let l = ddpm_loss(&mut g, &head, &chunk, c, &sched, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        g.scalar(l)
    };
    assert_eq!(loss(8).to_bits(), loss(8).to_bits());
}

#[test]
fn past_target_indices() {
    let fixed = PastTarget { mode: PopMode::FixedOffset, offset: 3 };
    assert_eq!((fixed.index(0), fixed.index(2), fixed.index(10)), (Some(0), Some(0), Some(7)));
    let first = PastTarget { mode: PopMode::FirstFrame, offset: 3 };
    assert_eq!(first.index(40), Some(0));
    assert_eq!(PastTarget { mode: PopMode::Off, offset: 3 }.index(5), None);
    assert!(HeadsConfig { pop_mode: PopMode::FixedOffset, pop_offset: 0, ..HeadsConfig::default() }.validate().is_err());
}

fn tiny_model() -> Model {
    Model::new(&Config::profile("tiny").unwrap().model, 6).unwrap()
}

#[test]
fn reconstruction_gradient_reaches_hindsight_queries() {
    let model = tiny_model();
    let data = generate_dataset(TaskId::ReturnFruit, 1, 0).unwrap();
    let ep = &data.episodes[0];
    let mut g = Graph::new(&model.store);
    let f = model.forward(&mut g, &ep.frames[5], &ep.instruction, &model.fresh_state(), Phase::Memory).unwrap();
    let pred = model.image.decode(&mut g, f.fused.hindsight_out.unwrap()).unwrap();
    let loss = model.image.loss(&mut g, pred, ep.frames[0].scene()).unwrap();
    let grads = g.backward(loss).unwrap();
    let h = grads.grad(model.store.id("query.hindsight").unwrap()).expect("hindsight gradient");
    assert!(h.data().iter().any(|&v| v != 0.0));
}

#[test]
fn decoded_image_matches_scene_view_and_is_deterministic() {
    let model = tiny_model();
    let data = generate_dataset(TaskId::PutBack, 1, 0).unwrap();
    let ep = &data.episodes[0];
    let state = model.fresh_state();
    let a = model.predict_past_image(&state, &ep.frames[0], &ep.instruction).unwrap().unwrap();
    let b = model.predict_past_image(&state, &ep.frames[0], &ep.instruction).unwrap().unwrap();
    assert_eq!(a, b);
    let scene = ep.frames[0].scene();
    assert_eq!((a.height, a.width, a.data.len()), (scene.height, scene.width, scene.data.len()));
}

#[test]
fn zero_image_weight_silences_the_image_head() {
    let mut cfg = Config::profile("tiny").unwrap().model;
    for lambda in [0.0, 0.5] {
        cfg.heads.lambda_img = lambda;
        let model = Model::new(&cfg, 6).unwrap();
        let data = generate_dataset(TaskId::PutBack, 1, 0).unwrap();
        let ep = &data.episodes[0];
        let chunk = action_chunk(ep, 3, cfg.heads.chunk, &model.normalizer);
        let r = model
            .train_frame(&ep.frames[3], &ep.instruction, &model.fresh_state(), &chunk, Some(ep.frames[0].scene()), Phase::Memory, &mut ChaCha8Rng::seed_from_u64(1))
            .unwrap();
        let touched = model.store.ids().filter(|&id| model.store.group(id).name.starts_with("image.")).any(|id| r.grads.grad(id).is_some_and(|g| g.data().iter().any(|&v| v != 0.0)));
        assert_eq!(touched, lambda > 0.0, "lambda {lambda}");
        assert_eq!(r.image_loss.is_some(), lambda > 0.0);
    }
}

#[test]
fn action_loss_reaches_frame_and_chunk_initial_queries() {
    let model = tiny_model();
    let data = generate_dataset(TaskId::PutBack, 1, 0).unwrap();
    let ep = &data.episodes[0];
    let chunk = action_chunk(ep, 0, 8, &model.normalizer);
    let r = model.train_frame(&ep.frames[0], &ep.instruction, &model.fresh_state(), &chunk, None, Phase::Memory, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    for name in ["query.frame", "query.chunk"] {
        let g = r.grads.grad(model.store.id(name).unwrap()).expect(name);
        assert!(g.data().iter().any(|&v| v != 0.0), "{name}");
    }
}

#[test]
fn model_round_trips_through_bytes() {
    let mut model = tiny_model();
    let data = generate_dataset(TaskId::PutBack, 2, 0).unwrap();
    model.normalizer = data.normalizer();
    let mut w = ByteWriter::new();
    model.write(&mut w).unwrap();
    let bytes = w.into_inner();
    let back = Model::read(&mut ByteReader::new(&bytes)).unwrap();
    assert!(back.store.bit_equal(&model.store));
    assert_eq!(back.normalizer, model.normalizer);
    back.check_compatible(&model.cfg).unwrap();
    let ep = &data.episodes[0];
    let run = |m: &Model| m.step(&mut m.fresh_state(), &ep.frames[0], &ep.instruction, true, 5, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    assert_eq!(run(&model), run(&back));

    let mut other = model.cfg.clone();
    other.memory.n_frame += 1;
    assert!(back.check_compatible(&other).is_err());
    assert!(Model::read(&mut ByteReader::new(&bytes[..bytes.len() / 2])).is_err());
}
