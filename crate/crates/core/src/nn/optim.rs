use serde::Serialize;

use super::tensor::Tensor;

/// AdamW hyperparameters other than the learning rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub cfg: AdamWConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl AdamW {
    pub fn new(params: &[Tensor], lr: f64, cfg: AdamWConfig) -> Self {
        Self {
            lr,
            cfg,
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            t: 0,
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// One update. A missing gradient counts as zero (decay still applies).
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Option<&[f64]>]) {
        self.t += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.t);
        let bc2 = 1.0 - beta2.powi(self.t);
        for (i, p) in params.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for k in 0..p.data.len() {
                let g = grads[i].map_or(0.0, |g| g[k]);
                m[k] = beta1 * m[k] + (1.0 - beta1) * g;
                v[k] = beta2 * v[k] + (1.0 - beta2) * g * g;
                let update = (m[k] / bc1) / ((v[k] / bc2).sqrt() + eps);
                p.data[k] -= self.lr * (update + weight_decay * p.data[k]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut p = vec![Tensor::from_vec([1, 1, 1, 2], vec![1.0, -2.0]).unwrap()];
        let mut opt = AdamW::new(&p, 0.1, AdamWConfig { weight_decay: 0.0, ..Default::default() });
        let g = [3.0, -0.5];
        opt.step(&mut p, &[Some(&g)]);
        assert!((p[0].data[0] - 0.9).abs() < 1e-6);
        assert!((p[0].data[1] + 1.9).abs() < 1e-6);
    }

    #[test]
    fn decay_is_decoupled_from_the_gradient() {
        let mut p = vec![Tensor::from_vec([1, 1, 1, 1], vec![2.0]).unwrap()];
        let mut opt = AdamW::new(&p, 0.1, AdamWConfig::default());
        opt.step(&mut p, &[None]);
        assert!((p[0].data[0] - (2.0 - 0.1 * 0.01 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = vec![Tensor::from_vec([1, 1, 1, 3], vec![5.0, -3.0, 0.5]).unwrap()];
        let mut opt = AdamW::new(&p, 0.05, AdamWConfig { weight_decay: 0.0, ..Default::default() });
        for _ in 0..2000 {
            let g: Vec<f64> = p[0].data.iter().map(|x| 2.0 * (x - 1.0)).collect();
            opt.step(&mut p, &[Some(&g)]);
        }
        assert!(p[0].data.iter().all(|x| (x - 1.0).abs() < 1e-3), "{:?}", p[0].data);
    }
}
