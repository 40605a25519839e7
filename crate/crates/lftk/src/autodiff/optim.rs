//! Adam with one-cycle learning-rate scheduling.

use super::Tensor;

pub struct Adam {
    params: Vec<Tensor>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(params: Vec<Tensor>) -> Adam {
        let m = params.iter().map(|p| vec![0f64; p.len()]).collect();
        let v = params.iter().map(|p| vec![0f64; p.len()]).collect();
        Adam { params, m, v, t: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    /// One update with the given learning rate. Parameters whose gradient was
    /// never touched this step are left unchanged. Gradients are cleared.
    pub fn step(&mut self, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (pi, p) in self.params.iter().enumerate() {
            let grad = match p.grad() {
                Some(g) => g,
                None => continue,
            };
            let m = &mut self.m[pi];
            let v = &mut self.v[pi];
            let mut vals = p.values_mut();
            for i in 0..grad.len() {
                let g = grad[i] as f64;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                vals[i] = (vals[i] as f64 - lr * mh / (vh.sqrt() + self.eps)) as f32;
            }
            drop(vals);
            p.zero_grad();
        }
    }

    pub fn zero_grad(&self) {
        for p in &self.params {
            p.zero_grad();
        }
    }
}

/// One-cycle schedule: linear warmup from max_lr/25 to max_lr over the first
/// `warmup_frac` of steps, then cosine decay down to max_lr/1e4. Always
/// strictly positive.
#[derive(Clone, Copy)]
pub struct OneCycle {
    pub max_lr: f64,
    pub total_steps: usize,
    pub warmup_frac: f64,
}

impl OneCycle {
    pub fn new(max_lr: f64, total_steps: usize) -> OneCycle {
        OneCycle { max_lr, total_steps, warmup_frac: 0.3 }
    }

    /// Learning rate used for step `step` (0-based).
    pub fn lr_at(&self, step: usize) -> f64 {
        let total = self.total_steps.max(1);
        let warmup = ((total as f64 * self.warmup_frac).ceil() as usize).clamp(1, total);
        let start = self.max_lr / 25.0;
        let floor = self.max_lr / 1e4;
        if step < warmup {
            // step+1 so the last warmup step lands exactly on max_lr
            start + (self.max_lr - start) * (step + 1) as f64 / warmup as f64
        } else if step >= total {
            floor
        } else if warmup == total {
            self.max_lr
        } else {
            // hit the floor exactly on the last step
            let denom = (total - 1 - warmup).max(1) as f64;
            let p = ((step - warmup) as f64 / denom).min(1.0);
            floor + (self.max_lr - floor) * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
        }
    }
}
