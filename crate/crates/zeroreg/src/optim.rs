//! First-order optimizer shared by grid fitting and pose registration.

/// Adam with bias correction. Defaults: β₁ = 0.9, β₂ = 0.999, ε = 1e-8.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    step_count: u64,
}

impl Adam {
    pub fn new(params: usize) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            m: vec![0.0; params],
            v: vec![0.0; params],
            step_count: 0,
        }
    }

    /// One update step; `params`, `grad`, and the optimizer state must share
    /// a length.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grad.len(), self.m.len());
        self.step_count += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step_count as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step_count as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= lr * mhat / (vhat.sqrt() + self.epsilon);
        }
    }
}

/// Geometric interpolation from `lr_start` at step 0 to `lr_end` at the last
/// step.
pub fn lr_log_decay(step: usize, total_steps: usize, lr_start: f64, lr_end: f64) -> f64 {
    debug_assert!(step < total_steps);
    if total_steps <= 1 {
        return lr_start;
    }
    let s = step as f64 / (total_steps - 1) as f64;
    lr_start * (lr_end / lr_start).powf(s)
}
