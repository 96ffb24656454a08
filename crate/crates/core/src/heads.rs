//! Diffusion action head, past-image decoder and the combined loss.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::backbone::Image;
use crate::error::{Error, Result};
use crate::numerics::graph::{Graph, Var};
use crate::numerics::nn::{CrossBlock, LayerNorm, Linear};
use crate::numerics::{Init, Matrix, ParamId, ParamStore};

/// Which past frame the image head reconstructs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PopMode {
    Off,
    /// `o_{t−m}`, clamped to the episode start.
    FixedOffset,
    #[default]
    FirstFrame,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PastTarget {
    pub mode: PopMode,
    pub offset: usize,
}

impl PastTarget {
    /// Frame index of the target at timestep `t`, or `None` when off.
    pub fn index(&self, t: usize) -> Option<usize> {
        match self.mode {
            PopMode::Off => None,
            PopMode::FirstFrame => Some(0),
            PopMode::FixedOffset => Some(t.saturating_sub(self.offset.max(1))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadsConfig {
    /// Action chunk length k.
    pub chunk: usize,
    /// Action dimension n.
    pub action_dim: usize,
    pub diffusion_layers: usize,
    pub image_layers: usize,
    pub heads: usize,
    pub t_diff: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub ddim_steps: usize,
    /// Noise draws per frame in the action loss.
    pub noise_samples: usize,
    pub lambda_img: f64,
    pub pop_mode: PopMode,
    pub pop_offset: usize,
}

impl Default for HeadsConfig {
    fn default() -> Self {
        Self {
            chunk: 8,
            action_dim: 4,
            diffusion_layers: 2,
            image_layers: 1,
            heads: 4,
            t_diff: 100,
            beta_start: 1e-3,
            beta_end: 0.2,
            ddim_steps: 20,
            noise_samples: 1,
            lambda_img: 0.5,
            pop_mode: PopMode::FirstFrame,
            pop_offset: 8,
        }
    }
}

impl HeadsConfig {
    pub fn past_target(&self) -> PastTarget {
        PastTarget { mode: self.pop_mode, offset: self.pop_offset }
    }

    pub fn validate(&self) -> Result<()> {
        if self.chunk == 0 || self.action_dim == 0 {
            return Err(Error::Config("chunk and action_dim must be positive".into()));
        }
        if !(self.lambda_img >= 0.0 && self.lambda_img.is_finite()) {
            return Err(Error::Config("lambda_img must be finite and non-negative".into()));
        }
        if self.pop_mode == PopMode::FixedOffset && self.pop_offset == 0 {
            return Err(Error::Config("pop_offset must be at least 1".into()));
        }
        if self.noise_samples == 0 {
            return Err(Error::Config("noise_samples must be at least 1".into()));
        }
        DiffusionSchedule::linear(self.t_diff, self.beta_start, self.beta_end, self.ddim_steps).map(|_| ())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    pub t_diff: usize,
    pub betas: Vec<f64>,
    /// `alpha_bar[τ−1]` for τ in 1..=T.
    pub alpha_bar: Vec<f64>,
    pub ddim_steps: usize,
}

impl DiffusionSchedule {
    pub fn linear(t_diff: usize, start: f64, end: f64, ddim_steps: usize) -> Result<Self> {
        if t_diff < 2 {
            return Err(Error::Config("t_diff must be at least 2".into()));
        }
        if !(0.0 < start && start < end && end < 1.0) {
            return Err(Error::Config(format!("noise variances {start}..{end} must satisfy 0 < start < end < 1")));
        }
        if ddim_steps == 0 || ddim_steps > t_diff {
            return Err(Error::Config(format!("ddim_steps {ddim_steps} must be in 1..={t_diff}")));
        }
        let betas: Vec<f64> = (0..t_diff).map(|i| start + (end - start) * i as f64 / (t_diff - 1) as f64).collect();
        let mut acc = 1.0;
        let alpha_bar = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Ok(Self { t_diff, betas, alpha_bar, ddim_steps })
    }

    pub fn alpha_bar(&self, tau: usize) -> f64 {
        if tau == 0 {
            1.0
        } else {
            self.alpha_bar[tau - 1]
        }
    }

    /// Descending timesteps visited by a `steps`-step sampler, ending at 0.
    pub fn ddim_timesteps(&self, steps: usize) -> Result<Vec<usize>> {
        if steps == 0 || steps > self.t_diff {
            return Err(Error::InvalidArgument(format!("{steps} sampling steps for a {}-step schedule", self.t_diff)));
        }
        let mut ts: Vec<usize> = (1..=steps).rev().map(|i| (i * self.t_diff + steps / 2) / steps).collect();
        ts.dedup();
        ts.push(0);
        Ok(ts)
    }
}

/// Per-dimension min/max scaling to [−1, 1].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub min: Vec<f32>,
    pub max: Vec<f32>,
}

impl Normalizer {
    pub fn identity(dim: usize) -> Self {
        Self { min: vec![-1.0; dim], max: vec![1.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.min.len()
    }

    pub fn merge(&self, other: &Normalizer) -> Normalizer {
        Normalizer {
            min: self.min.iter().zip(&other.min).map(|(a, b)| a.min(*b)).collect(),
            max: self.max.iter().zip(&other.max).map(|(a, b)| a.max(*b)).collect(),
        }
    }

    pub fn normalize(&self, a: &[f32]) -> Vec<f32> {
        a.iter()
            .zip(self.min.iter().zip(&self.max))
            .map(|(&x, (&lo, &hi))| {
                let span = hi as f64 - lo as f64;
                if span <= 1e-12 {
                    0.0
                } else {
                    (2.0 * (x as f64 - lo as f64) / span - 1.0) as f32
                }
            })
            .collect()
    }

    pub fn denormalize(&self, a: &[f32]) -> Vec<f32> {
        a.iter()
            .zip(self.min.iter().zip(&self.max))
            .map(|(&x, (&lo, &hi))| ((x as f64 + 1.0) * 0.5 * (hi as f64 - lo as f64) + lo as f64) as f32)
            .collect()
    }
}

/// Noise predictor ε_θ(A_τ, τ, cond).
pub trait Denoiser {
    fn eps(&self, g: &mut Graph<'_>, noisy: Var, tau: usize, cond: Var) -> Result<Var>;
}

fn timestep_code(tau: usize, width: usize) -> Matrix {
    let half = width / 2;
    let mut row = vec![0.0f32; width];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        row[i] = (tau as f64 * freq).sin() as f32;
        row[half + i] = (tau as f64 * freq).cos() as f32;
    }
    Matrix::row_vector(row)
}

/// Chunk rows cross-attending to the fused action queries.
#[derive(Clone, Debug)]
pub struct DiffusionHead {
    pub width: usize,
    pub chunk: usize,
    pub action_dim: usize,
    pub input: Linear,
    pub time1: Linear,
    pub time2: Linear,
    /// Pooled condition added to the timestep embedding.
    pub cond: Linear,
    pub pos: ParamId,
    pub blocks: Vec<CrossBlock>,
    pub out_ln: LayerNorm,
    pub out: Linear,
}

impl DiffusionHead {
    pub fn new(store: &mut ParamStore, cfg: &HeadsConfig, width: usize) -> Result<Self> {
        Ok(Self {
            width,
            chunk: cfg.chunk,
            action_dim: cfg.action_dim,
            input: Linear::new(store, "diffusion.input", cfg.action_dim, width, true)?,
            time1: Linear::new(store, "diffusion.time1", width, width, true)?,
            time2: Linear::new(store, "diffusion.time2", width, width, true)?,
            cond: Linear::new(store, "diffusion.cond", width, width, true)?,
            pos: store.add("diffusion.pos", cfg.chunk, width, Init::TruncNormal(0.02))?,
            blocks: (0..cfg.diffusion_layers)
                .map(|i| CrossBlock::new(store, &format!("diffusion.layer{i}"), width, cfg.heads, 4))
                .collect::<Result<_>>()?,
            out_ln: LayerNorm::new(store, "diffusion.out_ln", width)?,
            out: Linear::new(store, "diffusion.out", width, cfg.action_dim, true)?,
        })
    }
}

impl Denoiser for DiffusionHead {
    fn eps(&self, g: &mut Graph<'_>, noisy: Var, tau: usize, cond: Var) -> Result<Var> {
        if g.shape(noisy) != (self.chunk, self.action_dim) {
            return Err(Error::Shape(format!("noisy chunk {:?}, expected {}x{}", g.shape(noisy), self.chunk, self.action_dim)));
        }
        let x = self.input.forward(g, noisy);
        let pos = g.param(self.pos);
        let x = g.add(x, pos);
        let code = g.constant(timestep_code(tau, self.width));
        let t = self.time1.forward(g, code);
        let t = g.gelu(t);
        let t = self.time2.forward(g, t);
        let rows = g.shape(cond).0;
        let pool = g.constant(Matrix::row_vector(vec![1.0 / rows as f32; rows]));
        let pooled = g.matmul(pool, cond);
        let c = self.cond.forward(g, pooled);
        let t = g.add(t, c);
        let mut x = g.add_row(x, t);
        for block in &self.blocks {
            x = block.forward(g, x, cond)?;
        }
        let x = self.out_ln.forward(g, x);
        Ok(self.out.forward(g, x))
    }
}

fn check_normalized(chunk: &Matrix) -> Result<()> {
    if let Some(v) = chunk.data().iter().find(|v| !(v.abs() <= 1.0 + 1e-6)) {
        return Err(Error::InvalidArgument(format!("action chunk entry {v} outside [-1, 1]")));
    }
    Ok(())
}

/// Noise-prediction loss for one chunk: τ uniform in 1..=T, ε standard normal.
pub fn ddpm_loss<R: Rng>(
    g: &mut Graph<'_>,
    den: &dyn Denoiser,
    chunk: &Matrix,
    cond: Var,
    sched: &DiffusionSchedule,
    rng: &mut R,
) -> Result<Var> {
    check_normalized(chunk)?;
    let tau = rng.random_range(1..=sched.t_diff);
    let ab = sched.alpha_bar(tau);
    let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
    let eps: Vec<f32> = (0..chunk.len()).map(|_| rng.sample::<f64, _>(StandardNormal) as f32).collect();
    let noisy: Vec<f32> = chunk.data().iter().zip(&eps).map(|(&a, &e)| (sa * a as f64 + sn * e as f64) as f32).collect();
    let noisy = g.constant(Matrix::from_vec(chunk.rows(), chunk.cols(), noisy));
    let target = g.constant(Matrix::from_vec(chunk.rows(), chunk.cols(), eps));
    let pred = den.eps(g, noisy, tau, cond)?;
    Ok(g.mse(pred, target))
}

/// Deterministic DDIM sampling from a standard-normal start.
#[allow(clippy::too_many_arguments)]
pub fn ddim_sample<R: Rng>(
    den: &dyn Denoiser,
    store: &ParamStore,
    cond: &Matrix,
    sched: &DiffusionSchedule,
    steps: usize,
    shape: (usize, usize),
    rng: &mut R,
) -> Result<Matrix> {
    let ts = sched.ddim_timesteps(steps)?;
    let mut x: Vec<f64> = (0..shape.0 * shape.1).map(|_| rng.sample(StandardNormal)).collect();
    for w in ts.windows(2) {
        let (tau, prev) = (w[0], w[1]);
        let mut g = Graph::new(store);
        let c = g.constant(cond.clone());
        let xin = g.constant(Matrix::from_vec(shape.0, shape.1, x.iter().map(|&v| v as f32).collect()));
        let e = den.eps(&mut g, xin, tau, c)?;
        let e = g.value(e);
        let (ab, ab_prev) = (sched.alpha_bar(tau), sched.alpha_bar(prev));
        for (xi, &ei) in x.iter_mut().zip(e.data()) {
            let x0 = ((*xi - (1.0 - ab).sqrt() * ei as f64) / ab.sqrt()).clamp(-1.0, 1.0);
            let eps = (*xi - ab.sqrt() * x0) / (1.0 - ab).sqrt();
            *xi = ab_prev.sqrt() * x0 + (1.0 - ab_prev).sqrt() * eps;
        }
    }
    Ok(Matrix::from_vec(shape.0, shape.1, x.iter().map(|&v| v.clamp(-1.0, 1.0) as f32).collect()))
}

/// Learned patch queries attend to the fused hindsight queries and emit
/// scene-view pixels.
#[derive(Clone, Debug)]
pub struct ImageHead {
    pub image: usize,
    pub patch: usize,
    pub queries: ParamId,
    pub blocks: Vec<CrossBlock>,
    pub out_ln: LayerNorm,
    pub out: Linear,
}

impl ImageHead {
    pub fn new(store: &mut ParamStore, cfg: &HeadsConfig, width: usize, image: usize, patch: usize) -> Result<Self> {
        let n = (image / patch).pow(2);
        Ok(Self {
            image,
            patch,
            queries: store.add("image.queries", n, width, Init::TruncNormal(0.02))?,
            blocks: (0..cfg.image_layers.max(1))
                .map(|i| CrossBlock::new(store, &format!("image.layer{i}"), width, cfg.heads, 4))
                .collect::<Result<_>>()?,
            out_ln: LayerNorm::new(store, "image.out_ln", width)?,
            out: Linear::new(store, "image.out", width, patch * patch * 3, true)?,
        })
    }

    /// Patch-matrix prediction with values in (0, 1).
    pub fn decode(&self, g: &mut Graph<'_>, hindsight_out: Var) -> Result<Var> {
        let mut x = g.param(self.queries);
        for block in &self.blocks {
            x = block.forward(g, x, hindsight_out)?;
        }
        let x = self.out_ln.forward(g, x);
        let x = self.out.forward(g, x);
        Ok(g.sigmoid(x))
    }

    pub fn decode_image(&self, store: &ParamStore, hindsight_out: &Matrix) -> Result<Image> {
        let mut g = Graph::new(store);
        let h = g.constant(hindsight_out.clone());
        let p = self.decode(&mut g, h)?;
        Image::from_patches(g.value(p), self.image, self.image, self.patch)
    }

    /// Mean squared pixel error against `target`.
    pub fn loss(&self, g: &mut Graph<'_>, pred: Var, target: &Image) -> Result<Var> {
        let t = g.constant(target.patches(self.patch)?);
        if g.shape(t) != g.shape(pred) {
            return Err(Error::Shape(format!("target patches {:?} vs prediction {:?}", g.shape(t), g.shape(pred))));
        }
        Ok(g.mse(pred, t))
    }
}

/// `action + lambda·image` as a graph node.
pub fn total_loss(g: &mut Graph<'_>, action: Var, image: Option<Var>, lambda_img: f64) -> Result<Var> {
    let a = g.scalar(action);
    let i = image.map(|v| g.scalar(v)).unwrap_or(0.0);
    combine_losses(a, i, lambda_img)?;
    Ok(match image {
        Some(i) if lambda_img > 0.0 => {
            let s = g.scale(i, lambda_img);
            g.add(action, s)
        }
        _ => action,
    })
}

pub fn combine_losses(action: f64, image: f64, lambda_img: f64) -> Result<f64> {
    if !action.is_finite() || !image.is_finite() {
        return Err(Error::NonFiniteLoss(if action.is_finite() { image } else { action }));
    }
    if !(lambda_img >= 0.0 && lambda_img.is_finite()) {
        return Err(Error::InvalidArgument(format!("lambda_img {lambda_img} must be finite and non-negative")));
    }
    Ok(action + lambda_img * image)
}
