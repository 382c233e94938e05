//! Flat-vector optimizers. State lives in f32 alongside the parameters;
//! moment updates run in f64 per element, which keeps steps deterministic
//! and platform-stable.

/// Adam with bias correction, default betas (0.9, 0.999), eps 1e-8.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f32>,
    v: Vec<f32>,
    t: u64,
}

impl Adam {
    pub fn new(len: usize, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f32], grads: &[f32]) {
        debug_assert_eq!(params.len(), grads.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i] as f64;
            let m = self.beta1 * self.m[i] as f64 + (1.0 - self.beta1) * g;
            let v = self.beta2 * self.v[i] as f64 + (1.0 - self.beta2) * g * g;
            self.m[i] = m as f32;
            self.v[i] = v as f32;
            let mhat = m / bc1;
            let vhat = v / bc2;
            params[i] = (params[i] as f64 - self.lr * mhat / (vhat.sqrt() + self.eps)) as f32;
        }
    }
}

/// Plain SGD step: p -= lr * g.
pub fn sgd_step(params: &mut [f32], grads: &[f32], lr: f64) {
    for (p, g) in params.iter_mut().zip(grads) {
        *p = (*p as f64 - lr * *g as f64) as f32;
    }
}
