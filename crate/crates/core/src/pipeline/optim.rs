use crate::numcore::{ParamStore, Tensor};

/// Step-decay schedule: `base * factor^(epoch / period)`.
pub fn lr_at(base: f64, factor: f64, period: usize, epoch: usize) -> f64 {
    base * factor.powi((epoch / period.max(1)) as i32)
}

/// Adam with weight decay applied directly to the parameters rather than
/// folded into the gradient.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    step: i32,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(store: &ParamStore, weight_decay: f64) -> Self {
        let zeros = |store: &ParamStore| store.ids().map(|id| Tensor::zeros(store.value(id).shape())).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay,
            step: 0,
            m: zeros(store),
            v: zeros(store),
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.step
    }

    /// Updates every parameter from the gradients accumulated in `store`.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let g = store.grad(id).data().to_vec();
            let m = self.m[id.index()].data_mut();
            let v = self.v[id.index()].data_mut();
            let theta = store.value_mut(id).data_mut();
            for i in 0..theta.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.epsilon);
                theta[i] -= lr * self.weight_decay * theta[i];
                theta[i] -= lr * update;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_steps_every_period() {
        assert_eq!(lr_at(1.0, 0.2, 15, 14), 1.0);
        assert!((lr_at(1.0, 0.2, 15, 15) - 0.2).abs() < 1e-15);
        assert!((lr_at(1.0, 0.2, 15, 30) - 0.04).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_only_decays() {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::from_vec(vec![2.0, -4.0])).unwrap();
        let mut opt = AdamW::new(&store, 1e-4);
        opt.step(&mut store, 0.1);
        let got = store.value(id).data();
        assert_eq!(got, &[2.0 - 0.1 * 1e-4 * 2.0, -4.0 - 0.1 * 1e-4 * -4.0]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::from_vec(vec![0.0])).unwrap();
        store.accumulate(&[(id, Tensor::from_vec(vec![3.0]))], 1.0);
        let mut opt = AdamW::new(&store, 0.0);
        opt.step(&mut store, 0.01);
        assert!((store.value(id).data()[0] + 0.01).abs() < 1e-9);
    }
}
