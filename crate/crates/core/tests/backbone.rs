use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use remem::backbone::{freeze_backbone, Backbone, BackboneConfig, Image, Observation, Segment, TokenSequence, PREFIX};
use remem::config::Config;
use remem::envsuite::{env_reset, TaskId, TaskSpec, INSTRUCTION_LEN};
use remem::memory::QueryKind;
use remem::model::{Model, Phase};
use remem::numerics::graph::Graph;
use remem::numerics::optim::AdamW;
use remem::numerics::{Matrix, ParamStore};
use remem::trainer::action_chunk;

fn small() -> BackboneConfig {
    BackboneConfig { width: 16, heads: 2, layers: 2, ..BackboneConfig::default() }
}

fn backbone(cfg: &BackboneConfig) -> (ParamStore, Backbone) {
    let mut store = ParamStore::new(9);
    let b = Backbone::new(&mut store, cfg).unwrap();
    (store, b)
}

fn textured(seed: u8) -> Observation {
    let view = |k: u8| {
        let mut img = Image::new(24, 24);
        for (i, p) in img.data.iter_mut().enumerate() {
            *p = ((i as u32 * 37 + k as u32 * 101 + seed as u32 * 13) % 256) as u8;
        }
        img
    };
    Observation { views: vec![view(0), view(1)] }
}

fn queries(g: &mut Graph<'_>, width: usize) -> Vec<(QueryKind, remem::numerics::Var)> {
    QueryKind::ALL
        .iter()
        .enumerate()
        .map(|(k, &kind)| (kind, g.constant(Matrix::from_vec(2, width, (0..2 * width).map(|i| ((i + k * 5) % 7) as f32 / 7.0 - 0.4).collect()))))
        .collect()
}

#[test]
fn patchify_shapes() {
    let (store, b) = backbone(&small());
    let mut g = Graph::new(&store);
    let p = b.patchify(&mut g, &textured(0)).unwrap();
    assert_eq!(g.shape(p), (18, 16));
    let bad = BackboneConfig { patch: 7, ..small() };
    assert!(bad.validate().is_err());
}

#[test]
fn blank_image_rows_are_position_plus_view_codes() {
    let (store, b) = backbone(&small());
    let obs = Observation { views: vec![Image::new(24, 24), Image::new(24, 24)] };
    let mut g = Graph::new(&store);
    let p = b.patchify(&mut g, &obs).unwrap();
    let rows = g.value(p);
    let pos = store.get(b.patch_pos);
    let view = store.get(b.view_code);
    let bias = store.by_name("backbone.patch.b").unwrap();
    for r in 0..18 {
        for c in 0..16 {
            let want = pos.get(r % 9, c) + view.get(r / 9, c) + bias.get(0, c);
            assert!((rows.get(r, c) - want).abs() < 1e-6);
        }
    }
}

#[test]
fn swapping_views_permutes_blocks() {
    let (store, b) = backbone(&small());
    let obs = textured(3);
    let swapped = Observation { views: vec![obs.views[1].clone(), obs.views[0].clone()] };
    let mut g = Graph::new(&store);
    let a = b.patchify(&mut g, &obs).unwrap();
    let s = b.patchify(&mut g, &swapped).unwrap();
    let view = store.get(b.view_code);
    for r in 0..18 {
        let v = r / 9;
        let other = (1 - v) * 9 + r % 9;
        for c in 0..16 {
            let lhs = g.value(s).get(r, c) - view.get(v, c);
            let rhs = g.value(a).get(other, c) - view.get(1 - v, c);
            assert!((lhs - rhs).abs() < 1e-5);
        }
    }
}

#[test]
fn sequence_segments_are_ordered_and_cover_everything() {
    let (store, b) = backbone(&small());
    let mut g = Graph::new(&store);
    let q = queries(&mut g, 16);
    let seq = b.sequence(&mut g, &textured(0), &[1; INSTRUCTION_LEN], &q).unwrap();
    let order: Vec<Segment> = seq.segments.iter().map(|s| s.0).collect();
    let mut want = vec![Segment::View(0), Segment::View(1), Segment::Instruction];
    want.extend(QueryKind::ALL.iter().map(|&k| Segment::Query(k)));
    assert_eq!(order, want);
    assert_eq!(seq.segments[0].1, 0);
    for w in seq.segments.windows(2) {
        assert_eq!(w[0].2, w[1].1);
        assert!(w[0].1 < w[0].2);
    }
    assert_eq!(seq.segments.last().unwrap().2, seq.len);
    assert_eq!(seq.len, 18 + INSTRUCTION_LEN + 8);

    let reversed: Vec<_> = q.iter().rev().cloned().collect();
    assert!(b.sequence(&mut g, &textured(0), &[1; INSTRUCTION_LEN], &reversed).is_err());
}

#[test]
fn sequence_length_is_constant_over_an_episode() {
    let cfg = Config::profile("tiny").unwrap();
    let model = Model::new(&cfg.model, 1).unwrap();
    let spec = TaskSpec::new(TaskId::PutBack);
    let (mut world, mut obs, instr) = env_reset(&spec, 4);
    let mut lens = Vec::new();
    for _ in 0..5 {
        let mut g = Graph::new(&model.store);
        let mut q = vec![(QueryKind::Action, model.memory.action.node(&mut g).unwrap())];
        q.push((QueryKind::Hindsight, model.memory.hindsight.node(&mut g).unwrap()));
        lens.push(model.backbone.sequence(&mut g, &obs, &instr, &q).unwrap().len);
        obs = remem::envsuite::env_step(&mut world, &[0.5, 0.0, -1.0, -1.0]).0;
    }
    assert!(lens.windows(2).all(|w| w[0] == w[1]));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    /// Perturbing any segment leaves every earlier segment's outputs unchanged.
    #[test]
    fn causal_segment_independence(target in 0usize..7, scale in 0.1f32..3.0) {
        let (store, b) = backbone(&small());
        let run = |perturb: bool| {
            let mut g = Graph::new(&store);
            let q = queries(&mut g, 16);
            let seq = b.sequence(&mut g, &textured(1), &[2, 3, 4, 0, 0, 0], &q).unwrap();
            let (s, e) = (seq.segments[target].1, seq.segments[target].2);
            let mut m = g.value(seq.tokens).clone();
            if perturb {
                for r in s..e {
                    for v in m.row_mut(r) {
                        *v += scale;
                    }
                }
            }
            let tokens = g.constant(m);
            let seq = TokenSequence { tokens, ..seq };
            let segs = seq.segments.clone();
            let enc = b.encode(&mut g, seq).unwrap();
            (g.value(enc.hidden).clone(), segs)
        };
        let (base, segs) = run(false);
        let (moved, _) = run(true);
        let start = segs[target].1;
        prop_assert_eq!(base.slice_rows(0, start), moved.slice_rows(0, start));
        prop_assert!(base.slice_rows(start, segs[target].2) != moved.slice_rows(start, segs[target].2));
    }
}

#[test]
fn observation_change_reaches_every_query() {
    let (store, b) = backbone(&small());
    let outputs = |obs: &Observation| {
        let mut g = Graph::new(&store);
        let q = queries(&mut g, 16);
        let seq = b.sequence(&mut g, obs, &[1; INSTRUCTION_LEN], &q).unwrap();
        let enc = b.encode(&mut g, seq).unwrap();
        [enc.action, enc.hindsight.unwrap(), enc.frame.unwrap(), enc.chunk.unwrap()].map(|v| g.value(v).clone())
    };
    let base = outputs(&textured(0));
    let mut obs = textured(0);
    obs.views[0].data[5] = obs.views[0].data[5].wrapping_add(90);
    let moved = outputs(&obs);
    for (a, m) in base.iter().zip(&moved) {
        assert!(a.max_abs_diff(m) > 0.0);
    }
}

#[test]
fn zero_depth_passes_queries_through() {
    let (store, b) = backbone(&BackboneConfig { layers: 0, ..small() });
    let mut g = Graph::new(&store);
    let q = queries(&mut g, 16);
    let seq = b.sequence(&mut g, &textured(0), &[1; INSTRUCTION_LEN], &q).unwrap();
    let enc = b.encode(&mut g, seq).unwrap();
    let outs = [enc.action, enc.hindsight.unwrap(), enc.frame.unwrap(), enc.chunk.unwrap()];
    for ((_, input), out) in q.iter().zip(outs) {
        assert_eq!(g.value(*input), g.value(out));
    }
}

#[test]
fn frozen_backbone_is_untouched_but_passes_gradient() {
    let cfg = Config::profile("tiny").unwrap();
    let mut model = Model::new(&cfg.model, 3).unwrap();
    let data = remem::envsuite::generate_dataset(TaskId::PutBack, 1, 0).unwrap();
    let ep = &data.episodes[0];
    let chunk = action_chunk(ep, 0, cfg.model.heads.chunk, &model.normalizer);
    let state = model.fresh_state();
    let mut rng = ChaCha8Rng::seed_from_u64(0);

    let step = |model: &mut Model, rng: &mut ChaCha8Rng| {
        let r = model.train_frame(&ep.frames[0], &ep.instruction, &state, &chunk, None, Phase::Memory, rng).unwrap();
        let mut opt = AdamW::new(&model.store, 0.01);
        opt.step(&mut model.store, &r.grads, 1e-2);
        r
    };
    let backbone_values = |store: &ParamStore| -> Vec<Matrix> {
        store.ids().filter(|&id| store.group(id).name.starts_with(PREFIX)).map(|id| store.get(id).clone()).collect()
    };

    model.set_backbone_frozen(true);
    let before = backbone_values(&model.store);
    let query = model.store.id("query.action").unwrap();
    let q_before = model.store.get(query).clone();
    let r = step(&mut model, &mut rng);
    assert_eq!(backbone_values(&model.store), before);
    let g = r.grads.grad(query).expect("query gradient");
    assert!(g.data().iter().any(|&v| v != 0.0));
    assert_ne!(model.store.get(query), &q_before);

    assert!(freeze_backbone(&mut model.store, false) > 0);
    step(&mut model, &mut rng);
    assert_ne!(backbone_values(&model.store), before);
}
