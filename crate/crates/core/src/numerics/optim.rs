use super::graph::Gradients;
use super::params::{Matrix, ParamId, ParameterStore};

/// Dense per-parameter gradient buffer aligned with a [`ParameterStore`].
#[derive(Debug, Clone)]
pub struct GradBuffer {
    grads: Vec<Matrix>,
}

impl GradBuffer {
    pub fn zeros_like(store: &ParameterStore) -> Self {
        GradBuffer {
            grads: store.iter().map(|(_, _, m)| Matrix::zeros(m.dim())).collect(),
        }
    }

    pub fn add(&mut self, grads: &Gradients) {
        for (id, g) in grads.params() {
            self.grads[id.index()] += g;
        }
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.grads[id.index()]
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .map(|g| g.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales so the global L2 norm is at most `max_norm`. Returns the norm
    /// before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            let factor = max_norm / norm;
            for g in &mut self.grads {
                *g *= factor;
            }
        }
        norm
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().all(|g| g.iter().all(|v| v.is_finite()))
    }

    pub fn fill_zero(&mut self) {
        for g in &mut self.grads {
            g.fill(0.0);
        }
    }
}

/// Adaptive-moment optimizer.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Adam {
    pub fn new(store: &ParameterStore, lr: f64) -> Self {
        let zeros: Vec<Matrix> = store.iter().map(|(_, _, m)| Matrix::zeros(m.dim())).collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn update(&mut self, store: &mut ParameterStore, grads: &GradBuffer) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for id in store.ids() {
            let g = grads.get(id);
            let m = &mut self.m[id.index()];
            let v = &mut self.v[id.index()];
            let p = store.get_mut(id);
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *p -= lr * mhat / (vhat.sqrt() + eps);
                });
        }
    }
}
