use super::param::{Module, Param};
use super::tensor::Real;

/// Adam with bias correction. Parameters whose gradient was not written
/// since the last `zero_grad` are left untouched.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    state: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, state: Vec::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step<T: Real>(&mut self, model: &mut dyn Module<T>) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        let state = &mut self.state;
        let mut k = 0;
        model.visit(&mut |p: &mut Param<T>| {
            if !p.trainable {
                return;
            }
            if state.len() <= k {
                state.push((vec![0.0; p.len()], vec![0.0; p.len()]));
            }
            let (m, v) = &mut state[k];
            k += 1;
            if !p.touched {
                return;
            }
            for i in 0..p.len() {
                let g = p.grad[i].to_f64();
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                let update = lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + eps);
                p.value[i] = T::cast(p.value[i].to_f64() - update);
            }
        });
    }
}
