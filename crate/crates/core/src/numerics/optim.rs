use super::graph::GradientReport;
use super::matrix::Matrix;
use super::params::ParamStore;

/// Cosine decay from `initial` at step 0 to `min` at step `total - 1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CosineSchedule {
    pub initial: f64,
    pub min: f64,
    pub total: u64,
}

impl CosineSchedule {
    pub fn lr(&self, step: u64) -> f64 {
        if self.total <= 1 {
            return self.initial;
        }
        let progress = (step.min(self.total - 1)) as f64 / (self.total - 1) as f64;
        self.min + 0.5 * (self.initial - self.min) * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Adam with decoupled weight decay. Decay applies to projection matrices
/// (groups named `*.w`) only.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub t: u64,
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
}

impl AdamW {
    pub fn new(store: &ParamStore, weight_decay: f64) -> Self {
        let zeros = |s: &ParamStore| {
            s.groups().iter().map(|g| Matrix::zeros(g.value.rows(), g.value.cols())).collect::<Vec<_>>()
        };
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, t: 0, m: zeros(store), v: zeros(store) }
    }

    /// One update. Non-trainable groups are left untouched, as are groups the
    /// report has no gradient for.
    pub fn step(&mut self, store: &mut ParamStore, grads: &GradientReport, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            if !store.is_trainable(id) {
                continue;
            }
            let Some(g) = grads.grad(id) else { continue };
            let decay = if store.group(id).name.ends_with(".w") { self.weight_decay } else { 0.0 };
            let m = self.m[id.0].data_mut();
            let v = self.v[id.0].data_mut();
            let p = store.get_mut(id).data_mut();
            for i in 0..p.len() {
                let gi = g.data()[i] as f64;
                let mi = self.beta1 * m[i] as f64 + (1.0 - self.beta1) * gi;
                let vi = self.beta2 * v[i] as f64 + (1.0 - self.beta2) * gi * gi;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let update = (mi / bc1) / ((vi / bc2).sqrt() + self.eps);
                let pi = p[i] as f64;
                p[i] = (pi - lr * (update + decay * pi)) as f32;
            }
        }
    }
}

/// Scales gradients so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut GradientReport, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if max_norm > 0.0 && norm > max_norm {
        let loss = grads.loss;
        grads.scale(max_norm / norm);
        grads.loss = loss;
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints() {
        let s = CosineSchedule { initial: 5e-5, min: 1e-7, total: 1000 };
        assert_eq!(s.lr(0), 5e-5);
        assert!((s.lr(999) - 1e-7).abs() < 1e-9);
        let mut prev = f64::INFINITY;
        for step in 0..1000 {
            let lr = s.lr(step);
            assert!(lr <= prev);
            prev = lr;
        }
    }
}
