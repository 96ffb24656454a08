use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{
    dist, snap, uniform, Action, Button, Color, Drawer, Event, FailureCause, Goal, Marker, Object, ObjectKind,
    Outcome, Pos, TaskId, TaskSpec, WorldState, RADIUS, SPEED,
};
use crate::error::{Error, Result};

/// Closer than this counts as "at" a target for the scripted expert.
const NEAR: f64 = 1e-6;
const JITTER_SALT: u64 = 0x71_77e5;
const SHIFT_SALT: u64 = 0x5_41f7;

fn blank(spec: &TaskSpec, seed: u64, agent: Pos, goal: Goal) -> WorldState {
    WorldState {
        spec: spec.clone(),
        seed,
        step: 0,
        agent: snap(agent),
        gripper_closed: false,
        interact_down: false,
        holding: None,
        grasp_from: [0.0; 2],
        hold_steps: 0,
        hold_target: None,
        objects: Vec::new(),
        markers: Vec::new(),
        buttons: Vec::new(),
        drawers: Vec::new(),
        hold_targets: Vec::new(),
        carrying_rice: false,
        pours: 0,
        presses_done: 0,
        goal,
        events: Vec::new(),
        outcome: None,
        clamped_actions: 0,
        shifted: false,
    }
}

fn marker(pos: Pos, half: f64, color: Color) -> Marker {
    Marker { pos: snap(pos), half, color }
}

fn button(pos: Pos, color: Color, latching: bool) -> Button {
    Button { pos: snap(pos), color, pressed: false, latching }
}

fn block(pos: Pos, color: Color) -> Object {
    Object { kind: ObjectKind::Block, pos: snap(pos), color }
}

/// Adds the put-back scenery; returns the goal.
fn put_back_parts(s: &mut WorldState, cells: [Pos; 3], center: Pos, button_pos: Pos, rng: &mut ChaCha8Rng) -> Goal {
    for c in cells {
        s.markers.push(marker(c, 0.055, Color::Pad));
    }
    s.markers.push(marker(center, 0.06, Color::Target));
    let cell = snap(cells[rng.random_range(0..3)]);
    let b = s.objects.len();
    s.objects.push(block(cell, Color::Orange));
    let bi = s.buttons.len();
    s.buttons.push(button(button_pos, Color::ButtonIdle, true));
    Goal::PutBack { block: b, cell, center: snap(center), button: bi }
}

fn rearrange_parts(s: &mut WorldState, pads: [Pos; 3], button_pos: Pos, rng: &mut ChaCha8Rng) -> Goal {
    let pads = pads.map(snap);
    for p in pads {
        s.markers.push(marker(p, 0.055, Color::Pad));
    }
    let empty = rng.random_range(0..3);
    rearrange_fill(s, pads, empty, button_pos)
}

fn rearrange_fill(s: &mut WorldState, pads: [Pos; 3], empty: usize, button_pos: Pos) -> Goal {
    let occupied: Vec<usize> = (0..3).filter(|&i| i != empty).collect();
    let first = s.objects.len();
    for &p in &occupied {
        s.objects.push(block(pads[p], Color::Cyan));
    }
    let bi = s.buttons.len();
    s.buttons.push(button(button_pos, Color::ButtonIdle, true));
    let mut initial = [true; 3];
    initial[empty] = false;
    Goal::Rearrange {
        blocks: [first, first + 1],
        pads,
        initial,
        moved: first,
        from: occupied[0],
        to: empty,
        button: bi,
    }
}

pub(super) fn layout(spec: &TaskSpec, seed: u64, rng: &mut ChaCha8Rng) -> WorldState {
    let placeholder = Goal::HoldDuration { duration: 0, tolerance: 0 };
    match spec.task {
        TaskId::PutBack => {
            let agent = [uniform(rng, 0.3, 0.7), uniform(rng, 0.3, 0.4)];
            let mut s = blank(spec, seed, agent, placeholder);
            let cells = [[0.3, 0.68], [0.5, 0.68], [0.7, 0.68]];
            let bx = uniform(rng, 0.4, 0.6);
            s.goal = put_back_parts(&mut s, cells, [0.5, 0.5], [bx, 0.33], rng);
            s
        }
        TaskId::Rearrange => {
            let agent = [uniform(rng, 0.3, 0.7), uniform(rng, 0.4, 0.5)];
            let mut s = blank(spec, seed, agent, placeholder);
            let pads = [[0.25, 0.72], [0.5, 0.72], [0.75, 0.72]];
            let bx = uniform(rng, 0.35, 0.65);
            s.goal = rearrange_parts(&mut s, pads, [bx, 0.25], rng);
            s
        }
        TaskId::Reopen => {
            let agent = [uniform(rng, 0.3, 0.7), uniform(rng, 0.35, 0.45)];
            let mut s = blank(spec, seed, agent, placeholder);
            let open = rng.random_range(0..3);
            for (i, x) in [0.25, 0.5, 0.75].into_iter().enumerate() {
                s.drawers.push(Drawer { pos: snap([x, 0.78]), open: i == open });
            }
            let bx = uniform(rng, 0.35, 0.65);
            s.buttons.push(button([bx, 0.22], Color::ButtonIdle, true));
            s.goal = Goal::Reopen { drawer: open, button: 0 };
            s
        }
        TaskId::LongHorizon => {
            let agent = [uniform(rng, 0.75, 0.9), uniform(rng, 0.3, 0.4)];
            let mut s = blank(spec, seed, agent, placeholder);
            let pads = [[0.15, 0.88], [0.5, 0.88], [0.85, 0.88]];
            let ay = uniform(rng, 0.25, 0.4);
            let rearrange = rearrange_parts(&mut s, pads, [0.06, ay], rng);
            let cells = [[0.15, 0.12], [0.5, 0.12], [0.85, 0.12]];
            let by = uniform(rng, 0.4, 0.6);
            let put_back = put_back_parts(&mut s, cells, [0.5, 0.5], [0.94, by], rng);
            s.goal = Goal::LongHorizon { rearrange: Box::new(rearrange), put_back: Box::new(put_back) };
            s
        }
        TaskId::HoldDuration => {
            let agent = [uniform(rng, 0.2, 0.8), 0.2];
            let mut s = blank(spec, seed, agent, placeholder);
            let plant = snap([uniform(rng, 0.25, 0.75), uniform(rng, 0.5, 0.75)]);
            s.markers.push(marker(plant, 0.05, Color::Plant));
            s.hold_targets.push(plant);
            s.goal = Goal::HoldDuration { duration: spec.duration, tolerance: spec.tolerance };
            s
        }
        TaskId::PressSequence => {
            let agent = [uniform(rng, 0.25, 0.75), 0.15];
            let mut s = blank(spec, seed, agent, placeholder);
            let mut spots: Vec<Pos> = Vec::new();
            while spots.len() < 3 {
                let p = [uniform(rng, 0.15, 0.85), uniform(rng, 0.4, 0.85)];
                if spots.iter().all(|&q| dist(p, q) >= 0.25) {
                    spots.push(p);
                }
            }
            for (p, c) in spots.into_iter().zip([Color::Green, Color::Red, Color::Blue]) {
                s.buttons.push(button(p, c, false));
            }
            s.hold_targets = s.buttons.iter().map(|b| b.pos).collect();
            s.goal = Goal::PressSequence { order: [0, 1, 2], duration: spec.duration, tolerance: spec.tolerance };
            s
        }
        TaskId::ScoopTwice => {
            let agent = [uniform(rng, 0.3, 0.7), uniform(rng, 0.3, 0.4)];
            let mut s = blank(spec, seed, agent, placeholder);
            let source = snap([uniform(rng, 0.15, 0.35), uniform(rng, 0.5, 0.8)]);
            let pot = snap([uniform(rng, 0.65, 0.85), uniform(rng, 0.5, 0.8)]);
            s.markers.push(marker(source, 0.06, Color::Rice));
            s.markers.push(marker(pot, 0.06, Color::Pot));
            s.buttons.push(button([uniform(rng, 0.3, 0.7), 0.15], Color::ButtonIdle, true));
            s.goal = Goal::ScoopTwice { source, pot, button: 0 };
            s
        }
        TaskId::ReturnFruit => {
            let agent = [uniform(rng, 0.3, 0.7), uniform(rng, 0.45, 0.55)];
            let mut s = blank(spec, seed, agent, placeholder);
            let plate = snap([0.5, 0.75]);
            let slots = [[0.25, 0.28], [0.5, 0.28], [0.75, 0.28]].map(snap);
            s.markers.push(marker(plate, 0.07, Color::Plate));
            for p in slots {
                s.markers.push(marker(p, 0.055, Color::Pad));
            }
            let mut colors = [Color::Red, Color::Yellow, Color::Purple];
            colors.shuffle(rng);
            let empty = rng.random_range(0..3);
            let others: Vec<usize> = (0..3).filter(|&i| i != empty).collect();
            s.objects.push(Object { kind: ObjectKind::Fruit, pos: plate, color: colors[0] });
            for (k, &slot) in others.iter().enumerate() {
                s.objects.push(Object { kind: ObjectKind::Fruit, pos: slots[slot], color: colors[k + 1] });
            }
            let mut shuffle = [0, 1, 2];
            shuffle.shuffle(rng);
            s.buttons.push(button([0.9, uniform(rng, 0.45, 0.75)], Color::ButtonIdle, true));
            s.goal = Goal::ReturnFruit { fruit: 0, plate, slots, empty, shuffle, button: 0 };
            s
        }
    }
}

fn blocks_on_pads(s: &WorldState, blocks: &[usize], pads: &[Pos]) -> bool {
    blocks.iter().all(|&b| s.holding != Some(b) && pads.iter().any(|&p| dist(s.objects[b].pos, p) < RADIUS))
}

fn button_enabled(s: &WorldState, goal: &Goal, b: usize) -> Option<bool> {
    match goal {
        Goal::PutBack { block, center, button, .. } if *button == b => {
            Some(s.holding != Some(*block) && dist(s.objects[*block].pos, *center) < RADIUS)
        }
        Goal::Rearrange { blocks, pads, button, .. } if *button == b => Some(blocks_on_pads(s, blocks, pads)),
        Goal::Reopen { button, .. } if *button == b => Some(s.drawers.iter().all(|d| !d.open)),
        Goal::LongHorizon { rearrange, put_back } => button_enabled(s, rearrange, b).or_else(|| button_enabled(s, put_back, b)),
        Goal::ScoopTwice { button, .. } if *button == b => Some(true),
        Goal::ReturnFruit { plate, button, .. } if *button == b => {
            Some(s.holding.is_none() && s.objects.iter().all(|o| dist(o.pos, *plate) >= RADIUS))
        }
        _ => None,
    }
}

fn nearest(points: impl Iterator<Item = Pos>, at: Pos) -> Option<usize> {
    points
        .enumerate()
        .map(|(i, p)| (i, dist(p, at)))
        .filter(|&(_, d)| d <= RADIUS)
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(i, _)| i)
}

/// Interact-trigger effects: holds, button presses, drawers, scooping.
pub(super) fn interact(s: &mut WorldState, pressed: bool, rising: bool, events: &mut Vec<Event>) {
    let target = if pressed { nearest(s.hold_targets.iter().copied(), s.agent) } else { None };
    if let Some(t) = s.hold_target {
        if target != Some(t) {
            events.push(Event::Hold { target: t, steps: s.hold_steps });
            s.hold_target = None;
            s.hold_steps = 0;
        }
    }
    if let Some(t) = target {
        if s.hold_target == Some(t) {
            s.hold_steps += 1;
        } else if rising {
            s.hold_target = Some(t);
            s.hold_steps = 1;
        }
        if s.hold_target.is_some() && s.hold_steps > s.spec.duration + s.spec.tolerance {
            events.push(Event::Hold { target: t, steps: s.hold_steps });
            s.hold_target = None;
            s.hold_steps = 0;
        }
    }
    if !rising || s.spec.task == TaskId::PressSequence {
        return;
    }
    if let Some(b) = nearest(s.buttons.iter().map(|b| b.pos), s.agent) {
        if !s.buttons[b].pressed && button_enabled(s, &s.goal, b) == Some(true) {
            s.buttons[b].pressed = true;
            events.push(Event::Press { button: b });
            if let Goal::ReturnFruit { slots, shuffle, .. } = s.goal.clone() {
                for o in s.objects.iter_mut() {
                    if let Some(k) = slots.iter().position(|&p| dist(p, o.pos) < RADIUS) {
                        o.pos = slots[shuffle[k]];
                    }
                }
                events.push(Event::Shuffle);
            }
        }
        return;
    }
    if let Some(d) = nearest(s.drawers.iter().map(|d| d.pos), s.agent) {
        s.drawers[d].open = !s.drawers[d].open;
        events.push(Event::Toggle { drawer: d, open: s.drawers[d].open });
        return;
    }
    if let Goal::ScoopTwice { source, pot, .. } = s.goal {
        if !s.carrying_rice && dist(s.agent, source) <= RADIUS {
            s.carrying_rice = true;
            events.push(Event::Scoop);
        } else if s.carrying_rice && dist(s.agent, pot) <= RADIUS {
            s.carrying_rice = false;
            s.pours += 1;
            events.push(Event::Pour);
        }
    }
}

/// Bookkeeping after the step's events are logged.
pub(super) fn after_events(s: &mut WorldState) {
    if let Goal::PressSequence { order, duration, tolerance } = s.goal {
        s.presses_done = press_progress(&order, duration, tolerance, &s.events).0;
        if s.spec.perturb && !s.shifted && s.presses_done >= 1 {
            let mut rng = s.rng(SHIFT_SALT);
            for &b in &order[s.presses_done..] {
                let angle = uniform(&mut rng, 0.0, std::f64::consts::TAU);
                let r = uniform(&mut rng, 0.12, 0.2);
                let p = s.buttons[b].pos;
                s.buttons[b].pos = snap([(p[0] + r * angle.cos()).clamp(0.1, 0.9), (p[1] + r * angle.sin()).clamp(0.1, 0.9)]);
            }
            s.hold_targets = s.buttons.iter().map(|b| b.pos).collect();
            s.shifted = true;
            let step = s.step;
            s.events.push((step, Event::Shift));
        }
    }
}

/// Registered presses so far and whether a timing or order error occurred.
fn press_progress(order: &[usize; 3], duration: u32, tolerance: u32, events: &[(u32, Event)]) -> (usize, bool) {
    let mut done = 0;
    for (_, e) in events {
        if let Event::Hold { target, steps } = *e {
            if steps + tolerance < duration {
                continue;
            }
            if steps > duration + tolerance || done >= 3 || target != order[done] {
                return (done, true);
            }
            done += 1;
        }
    }
    (done, false)
}

fn judge_put_back(block: usize, cell: Pos, center: Pos, button: usize, events: &[(u32, Event)]) -> Option<Outcome> {
    let mut armed = false;
    for (_, e) in events {
        match e {
            Event::Press { button: b } if *b == button => armed = true,
            Event::Release { object, pos, .. } if armed && *object == block && dist(*pos, center) >= RADIUS => {
                let d = dist(*pos, cell);
                return Some(if d < RADIUS {
                    Outcome::Success
                } else if d >= 2.0 * RADIUS {
                    Outcome::Failure(FailureCause::MemoryError)
                } else {
                    Outcome::Failure(FailureCause::ManipulationError)
                });
            }
            _ => {}
        }
    }
    None
}

fn judge_rearrange(blocks: [usize; 2], pads: [Pos; 3], initial: [bool; 3], button: usize, events: &[(u32, Event)]) -> Option<Outcome> {
    let mut armed = false;
    for (_, e) in events {
        match e {
            Event::Press { button: b } if *b == button => armed = true,
            Event::Release { object, pos, from, objects } if armed && blocks.contains(object) && dist(*pos, *from) >= RADIUS => {
                let mut occupied = [false; 3];
                for &b in &blocks {
                    match pads.iter().position(|&p| dist(p, objects[b]) < RADIUS) {
                        Some(k) => occupied[k] = true,
                        None => return Some(Outcome::Failure(FailureCause::ManipulationError)),
                    }
                }
                return Some(if occupied == initial {
                    Outcome::Success
                } else if occupied.iter().filter(|&&o| o).count() == 2 {
                    Outcome::Failure(FailureCause::MemoryError)
                } else {
                    Outcome::Failure(FailureCause::ManipulationError)
                });
            }
            _ => {}
        }
    }
    None
}

pub(super) fn judge(goal: &Goal, events: &[(u32, Event)]) -> Option<Outcome> {
    use FailureCause::*;
    match goal {
        Goal::PutBack { block, cell, center, button } => judge_put_back(*block, *cell, *center, *button, events),
        Goal::Rearrange { blocks, pads, initial, button, .. } => judge_rearrange(*blocks, *pads, *initial, *button, events),
        Goal::Reopen { drawer, button } => {
            let mut armed = false;
            for (_, e) in events {
                match e {
                    Event::Press { button: b } if b == button => armed = true,
                    Event::Toggle { drawer: d, open: true } if armed => {
                        return Some(if d == drawer { Outcome::Success } else { Outcome::Failure(MemoryError) });
                    }
                    _ => {}
                }
            }
            None
        }
        Goal::LongHorizon { rearrange, put_back } => match (judge(rearrange, events), judge(put_back, events)) {
            (Some(Outcome::Failure(c)), _) | (_, Some(Outcome::Failure(c))) => Some(Outcome::Failure(c)),
            (Some(Outcome::Success), Some(Outcome::Success)) => Some(Outcome::Success),
            _ => None,
        },
        Goal::HoldDuration { duration, tolerance } => events.iter().find_map(|(_, e)| match e {
            Event::Hold { steps, .. } => Some(if steps.abs_diff(*duration) <= *tolerance {
                Outcome::Success
            } else {
                Outcome::Failure(MemoryError)
            }),
            _ => None,
        }),
        Goal::PressSequence { order, duration, tolerance } => match press_progress(order, *duration, *tolerance, events) {
            (_, true) => Some(Outcome::Failure(MemoryError)),
            (3, false) => Some(Outcome::Success),
            _ => None,
        },
        Goal::ScoopTwice { button, .. } => {
            let mut pours = 0;
            for (_, e) in events {
                match e {
                    Event::Pour => pours += 1,
                    Event::Scoop if pours >= 2 => return Some(Outcome::Failure(MemoryError)),
                    Event::Press { button: b } if b == button => {
                        return Some(if pours == 2 { Outcome::Success } else { Outcome::Failure(MemoryError) });
                    }
                    _ => {}
                }
            }
            None
        }
        Goal::ReturnFruit { fruit, plate, button, .. } => {
            let mut armed = false;
            for (_, e) in events {
                match e {
                    Event::Press { button: b } if b == button => armed = true,
                    Event::Release { object, pos, .. } if armed && dist(*pos, *plate) < RADIUS => {
                        return Some(if object == fruit { Outcome::Success } else { Outcome::Failure(MemoryError) });
                    }
                    _ => {}
                }
            }
            None
        }
    }
}

fn act(dx: f64, dy: f64, interact: bool, grip: bool) -> Action {
    let b = |on: bool| if on { 1.0 } else { -1.0 };
    [dx as f32, dy as f32, b(interact), b(grip)]
}

fn arrived(s: &WorldState, p: Pos) -> bool {
    dist(s.agent, p) < NEAR
}

/// Heads straight for `target`, with a little seeded heading noise while far away.
fn go(s: &WorldState, target: Pos, grip: bool) -> Action {
    let d = [target[0] - s.agent[0], target[1] - s.agent[1]];
    let n = (d[0] * d[0] + d[1] * d[1]).sqrt();
    if n <= SPEED {
        return act(d[0] / SPEED, d[1] / SPEED, false, grip);
    }
    let (mut x, mut y) = (d[0] / n, d[1] / n);
    if n > 3.0 * SPEED {
        let theta = uniform(&mut s.rng(JITTER_SALT), -0.35, 0.35);
        let (sin, cos) = theta.sin_cos();
        (x, y) = (x * cos - y * sin, x * sin + y * cos);
    }
    act(x, y, false, grip)
}

fn pick(s: &WorldState, object: usize) -> Action {
    let p = s.objects[object].pos;
    if !arrived(s, p) {
        go(s, p, false)
    } else if s.gripper_closed {
        act(0.0, 0.0, false, false)
    } else {
        act(0.0, 0.0, false, true)
    }
}

fn place(s: &WorldState, target: Pos) -> Action {
    if arrived(s, target) {
        act(0.0, 0.0, false, false)
    } else {
        go(s, target, true)
    }
}

/// Walks to `p` and taps interact once.
fn tap(s: &WorldState, p: Pos) -> Action {
    if !arrived(s, p) {
        go(s, p, false)
    } else {
        act(0.0, 0.0, !s.interact_down, false)
    }
}

fn hold(s: &WorldState, p: Pos, steps: u32) -> Action {
    if !arrived(s, p) {
        go(s, p, false)
    } else {
        let keep = s.hold_target.is_some() && s.hold_steps < steps || s.hold_target.is_none() && !s.interact_down;
        act(0.0, 0.0, keep, false)
    }
}

fn expert_for(s: &WorldState, goal: &Goal) -> Action {
    match goal {
        Goal::PutBack { block, cell, center, button } => {
            let holding = s.holding == Some(*block);
            if !s.buttons[*button].pressed {
                if holding {
                    place(s, *center)
                } else if dist(s.objects[*block].pos, *center) < NEAR {
                    tap(s, s.buttons[*button].pos)
                } else {
                    pick(s, *block)
                }
            } else if holding {
                place(s, *cell)
            } else {
                pick(s, *block)
            }
        }
        Goal::Rearrange { pads, moved, from, to, button, .. } => {
            let holding = s.holding == Some(*moved);
            if !s.buttons[*button].pressed {
                if holding {
                    place(s, pads[*to])
                } else if dist(s.objects[*moved].pos, pads[*to]) < NEAR {
                    tap(s, s.buttons[*button].pos)
                } else {
                    pick(s, *moved)
                }
            } else if holding {
                place(s, pads[*from])
            } else {
                pick(s, *moved)
            }
        }
        Goal::Reopen { drawer, button } => {
            if s.buttons[*button].pressed {
                tap(s, s.drawers[*drawer].pos)
            } else if let Some(d) = s.drawers.iter().position(|d| d.open) {
                tap(s, s.drawers[d].pos)
            } else {
                tap(s, s.buttons[*button].pos)
            }
        }
        Goal::LongHorizon { rearrange, put_back } => {
            if judge(rearrange, &s.events) == Some(Outcome::Success) {
                expert_for(s, put_back)
            } else {
                expert_for(s, rearrange)
            }
        }
        Goal::HoldDuration { duration, .. } => hold(s, s.hold_targets[0], *duration),
        Goal::PressSequence { order, duration, .. } => {
            let next = order[s.presses_done.min(2)];
            hold(s, s.buttons[next].pos, *duration)
        }
        Goal::ScoopTwice { source, pot, button } => {
            if s.pours >= 2 {
                tap(s, s.buttons[*button].pos)
            } else if s.carrying_rice {
                tap(s, *pot)
            } else {
                tap(s, *source)
            }
        }
        Goal::ReturnFruit { fruit, plate, slots, empty, button, .. } => {
            let holding = s.holding == Some(*fruit);
            if !s.buttons[*button].pressed {
                if holding {
                    place(s, slots[*empty])
                } else if s.objects.iter().all(|o| dist(o.pos, *plate) >= RADIUS) {
                    tap(s, s.buttons[*button].pos)
                } else {
                    pick(s, *fruit)
                }
            } else if holding {
                place(s, *plate)
            } else {
                pick(s, *fruit)
            }
        }
    }
}

/// Scripted policy with access to the hidden goal.
pub fn expert_action(s: &WorldState) -> Action {
    expert_for(s, &s.goal)
}

/// Two states with pixel-identical observations whose expert actions
/// differ: evidence that the task cannot be solved from the current frame.
#[derive(Clone, Debug)]
pub struct Witness {
    pub a: WorldState,
    pub b: WorldState,
    pub action_a: Action,
    pub action_b: Action,
}

fn run_until(s: &mut WorldState, pred: impl Fn(&WorldState) -> bool) -> Result<()> {
    while !pred(s) {
        if s.done() {
            return Err(Error::ExpertFailure { task: s.spec.task.name().into(), seed: s.seed });
        }
        let a = expert_action(s);
        super::env_step(s, &a);
    }
    Ok(())
}

fn other_cell(s: &mut WorldState, goal: &mut Goal) {
    if let Goal::PutBack { block, cell, .. } = goal {
        let cells: Vec<Pos> = s.markers.iter().filter(|m| m.color == Color::Pad).map(|m| m.pos).collect();
        let k = cells.iter().position(|&c| dist(c, *cell) < NEAR).unwrap();
        let pb_cells = if cells.len() > 3 { &cells[cells.len() - 3..] } else { &cells[..] };
        let k = if cells.len() > 3 { k - (cells.len() - 3) } else { k };
        *cell = pb_cells[(k + 1) % 3];
        s.objects[*block].pos = *cell;
    }
}

pub fn memory_witness(task: TaskId, seed: u64) -> Result<Witness> {
    let spec = TaskSpec::new(task);
    let (mut a, _, _) = super::env_reset(&spec, seed);
    let mut b = a.clone();
    match task {
        TaskId::PutBack => {
            let mut g = b.goal.clone();
            other_cell(&mut b, &mut g);
            b.goal = g;
            let Goal::PutBack { block, button, .. } = a.goal else { unreachable!() };
            let pred = move |s: &WorldState| s.buttons[button].pressed && s.holding == Some(block);
            run_until(&mut a, pred)?;
            run_until(&mut b, pred)?;
        }
        TaskId::LongHorizon => {
            let Goal::LongHorizon { rearrange, put_back } = b.goal.clone() else { unreachable!() };
            let mut pb = *put_back;
            other_cell(&mut b, &mut pb);
            b.goal = Goal::LongHorizon { rearrange, put_back: Box::new(pb) };
            let Goal::LongHorizon { put_back, .. } = &a.goal else { unreachable!() };
            let Goal::PutBack { block, button, .. } = **put_back else { unreachable!() };
            let pred = move |s: &WorldState| s.buttons[button].pressed && s.holding == Some(block);
            run_until(&mut a, pred)?;
            run_until(&mut b, pred)?;
        }
        TaskId::Rearrange => {
            let Goal::Rearrange { pads, button, .. } = a.goal else { unreachable!() };
            let bpos = a.buttons[button].pos;
            for (s, empty) in [(&mut a, 1), (&mut b, 2)] {
                s.objects.clear();
                s.buttons.clear();
                s.goal = rearrange_fill(s, pads, empty, bpos);
            }
            let pred = move |s: &WorldState| s.buttons[button].pressed;
            run_until(&mut a, pred)?;
            run_until(&mut b, pred)?;
        }
        TaskId::Reopen => {
            let Goal::Reopen { drawer, button } = a.goal else { unreachable!() };
            let other = (drawer + 1) % 3;
            for (i, d) in b.drawers.iter_mut().enumerate() {
                d.open = i == other;
            }
            b.goal = Goal::Reopen { drawer: other, button };
            let pred = move |s: &WorldState| s.buttons[button].pressed;
            run_until(&mut a, pred)?;
            run_until(&mut b, pred)?;
        }
        TaskId::HoldDuration => {
            run_until(&mut b, |s| s.hold_steps == 5)?;
            a = b.clone();
            run_until(&mut a, |s| s.hold_steps == spec.duration)?;
        }
        TaskId::PressSequence => {
            let first = a.buttons[0].pos;
            run_until(&mut a, move |s| arrived(s, first) && !s.interact_down)?;
            b = a.clone();
            run_until(&mut b, |s| s.presses_done == 1)?;
        }
        TaskId::ScoopTwice => {
            run_until(&mut a, |s| s.pours == 1)?;
            b = a.clone();
            run_until(&mut b, |s| s.pours == 2)?;
        }
        TaskId::ReturnFruit => {
            let Goal::ReturnFruit { fruit, plate, slots, empty, shuffle, button } = a.goal.clone() else { unreachable!() };
            let other = (0..b.objects.len()).find(|&i| i != fruit).unwrap();
            let slot = slots.iter().position(|&p| dist(p, b.objects[other].pos) < NEAR).unwrap();
            b.objects[other].pos = plate;
            b.objects[fruit].pos = slots[slot];
            let mut swapped = shuffle;
            swapped[empty] = shuffle[slot];
            swapped[slot] = shuffle[empty];
            b.goal = Goal::ReturnFruit { fruit: other, plate, slots, empty, shuffle: swapped, button };
            let pred = move |s: &WorldState| s.buttons[button].pressed;
            run_until(&mut a, pred)?;
            run_until(&mut b, pred)?;
        }
    }
    let (action_a, action_b) = (expert_action(&a), expert_action(&b));
    Ok(Witness { a, b, action_a, action_b })
}
