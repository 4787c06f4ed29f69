use ndarray::Zip;

use super::{ParamStore, Tensor};

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    step: i32,
    moments: Vec<Option<(Tensor, Tensor)>>,
}

impl Adam {
    pub fn new(lr: f32) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step as usize
    }

    /// Applies one update from the gradients accumulated in `params`, then clears them.
    pub fn step(&mut self, params: &mut ParamStore) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        let step_size = self.lr / bc1;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        if self.moments.len() < params.len() {
            self.moments.resize(params.len(), None);
        }
        for id in params.ids().collect::<Vec<_>>() {
            let Some(g) = params.grad(id).cloned() else { continue };
            let (m, v) = self.moments[id.0].get_or_insert_with(|| (Tensor::zeros(g.raw_dim()), Tensor::zeros(g.raw_dim())));
            let w = params.value_mut(id);
            Zip::from(w).and(&mut *m).and(&mut *v).and(&g).for_each(|w, m, v, &g| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *w -= step_size * *m / ((*v / bc2).sqrt() + eps);
            });
        }
        params.zero_grads();
    }
}
