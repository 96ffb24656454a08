//! Area-coverage rasterizer for the scene camera and the wrist camera.

use super::{Color, ObjectKind, Pos, WorldState};
use crate::backbone::{Image, Observation};

pub const IMAGE_SIZE: usize = 24;
/// Width of the wrist camera's field of view in table units.
const WRIST_SPAN: f64 = 0.5;

const BLOCK_HALF: f64 = 0.04;
const BUTTON_HALF: f64 = 0.045;
const AGENT_HALF: f64 = 0.025;

fn rgb(c: Color) -> [f64; 3] {
    let v: [u8; 3] = match c {
        Color::Table => [40, 40, 40],
        Color::Pad => [95, 95, 95],
        Color::Target => [70, 70, 140],
        Color::Plate => [210, 210, 210],
        Color::ButtonIdle => [200, 40, 40],
        Color::ButtonDone => [40, 200, 60],
        Color::Green => [40, 180, 40],
        Color::Red => [220, 30, 30],
        Color::Blue => [40, 80, 230],
        Color::Orange => [235, 150, 30],
        Color::Cyan => [30, 200, 200],
        Color::Yellow => [230, 220, 40],
        Color::Purple => [150, 40, 200],
        Color::Wood => [120, 80, 40],
        Color::WoodOpen => [185, 145, 85],
        Color::Rice => [245, 240, 205],
        Color::Pot => [90, 55, 30],
        Color::Plant => [30, 150, 60],
    };
    [v[0] as f64, v[1] as f64, v[2] as f64]
}

/// Maps table coordinates to pixels; y grows upward on the table.
struct Canvas {
    size: usize,
    origin: Pos,
    scale: f64,
    px: Vec<[f64; 3]>,
}

impl Canvas {
    fn new(size: usize, origin: Pos, span: f64) -> Self {
        Self { size, origin, scale: size as f64 / span, px: vec![[0.0; 3]; size * size] }
    }

    /// Alpha-composites an axis-aligned rectangle weighted by pixel coverage.
    fn rect(&mut self, center: Pos, half: [f64; 2], color: [f64; 3], alpha: f64) {
        let n = self.size as f64;
        let x0 = (center[0] - half[0] - self.origin[0]) * self.scale;
        let x1 = (center[0] + half[0] - self.origin[0]) * self.scale;
        let top = n - (center[1] + half[1] - self.origin[1]) * self.scale;
        let bottom = n - (center[1] - half[1] - self.origin[1]) * self.scale;
        if x1 <= 0.0 || top >= n || x0 >= n || bottom <= 0.0 {
            return;
        }
        let (c0, c1) = (x0.max(0.0).floor() as usize, (x1.min(n).ceil() as usize).min(self.size));
        let (r0, r1) = (top.max(0.0).floor() as usize, (bottom.min(n).ceil() as usize).min(self.size));
        for r in r0..r1 {
            let cy = ((r as f64 + 1.0).min(bottom) - (r as f64).max(top)).max(0.0);
            for c in c0..c1 {
                let cx = ((c as f64 + 1.0).min(x1) - (c as f64).max(x0)).max(0.0);
                let a = alpha * cx * cy;
                if a > 0.0 {
                    let p = &mut self.px[r * self.size + c];
                    for k in 0..3 {
                        p[k] = p[k] * (1.0 - a) + color[k] * a;
                    }
                }
            }
        }
    }

    fn image(&self) -> Image {
        let mut img = Image::new(self.size, self.size);
        for (i, p) in self.px.iter().enumerate() {
            for k in 0..3 {
                img.data[i * 3 + k] = p[k].round().clamp(0.0, 255.0) as u8;
            }
        }
        img
    }
}

fn paint(state: &WorldState, canvas: &mut Canvas) {
    canvas.rect([0.5, 0.5], [0.5, 0.5], rgb(Color::Table), 1.0);
    for m in &state.markers {
        canvas.rect(m.pos, [m.half, m.half], rgb(m.color), 1.0);
    }
    for d in &state.drawers {
        canvas.rect(d.pos, [0.07, 0.04], rgb(Color::Wood), 1.0);
        if d.open {
            canvas.rect([d.pos[0], d.pos[1] - 0.08], [0.06, 0.05], rgb(Color::WoodOpen), 1.0);
        }
    }
    for b in &state.buttons {
        let color = if b.latching && b.pressed { Color::ButtonDone } else { b.color };
        canvas.rect(b.pos, [BUTTON_HALF, BUTTON_HALF], rgb(color), 1.0);
    }
    for (i, o) in state.objects.iter().enumerate() {
        if state.holding == Some(i) {
            continue;
        }
        let half = match o.kind {
            ObjectKind::Block => BLOCK_HALF,
            ObjectKind::Fruit => BLOCK_HALF * 0.9,
        };
        canvas.rect(o.pos, [half, half], rgb(o.color), 1.0);
    }
    if let Some(i) = state.holding {
        let o = &state.objects[i];
        canvas.rect(o.pos, [BLOCK_HALF, BLOCK_HALF], rgb(o.color), 1.0);
    }
    if state.carrying_rice {
        canvas.rect([state.agent[0] + 0.035, state.agent[1]], [0.02, 0.02], rgb(Color::Rice), 1.0);
    }
    let agent = match (state.interact_down, state.gripper_closed) {
        (true, _) => [255.0, 0.0, 255.0],
        (false, true) => [255.0, 255.0, 0.0],
        (false, false) => [255.0, 255.0, 255.0],
    };
    canvas.rect(state.agent, [AGENT_HALF, AGENT_HALF], agent, 0.85);
}

/// Scene view plus wrist view centred on the agent.
pub fn render(state: &WorldState) -> Observation {
    let mut scene = Canvas::new(IMAGE_SIZE, [0.0, 0.0], 1.0);
    paint(state, &mut scene);
    let h = WRIST_SPAN / 2.0;
    let mut wrist = Canvas::new(IMAGE_SIZE, [state.agent[0] - h, state.agent[1] - h], WRIST_SPAN);
    paint(state, &mut wrist);
    Observation { views: vec![scene.image(), wrist.image()] }
}
