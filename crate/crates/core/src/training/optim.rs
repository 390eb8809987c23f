//! Adam and the learning-rate schedules.

use std::f64::consts::PI;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Array2<f64>>) -> Self {
        let m: Vec<_> = params
            .into_iter()
            .map(|p| Array2::zeros(p.dim()))
            .collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            v: m.clone(),
            m,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update. `params` and `grads` are in the order the
    /// optimiser was created with.
    pub fn update(&mut self, params: Vec<&mut Array2<f64>>, grads: &[Array2<f64>], lr: f64) {
        assert_eq!(params.len(), self.m.len(), "parameter count changed");
        assert_eq!(grads.len(), self.m.len(), "gradient count mismatch");
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for (((p, g), m), v) in params
            .into_iter()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            ndarray::Zip::from(p)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
                });
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Schedule {
    Constant { lr: f64 },
    /// Half-period cosine from `lr_max` at step 0 to `lr_min` at `period`.
    Cosine { lr_max: f64, lr_min: f64, period: usize },
}

impl Schedule {
    pub fn lr(&self, step: usize) -> f64 {
        match *self {
            Schedule::Constant { lr } => lr,
            Schedule::Cosine {
                lr_max,
                lr_min,
                period,
            } => {
                let t = (step.min(period) as f64) / period.max(1) as f64;
                lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (PI * t).cos())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = array![[1.0, -2.0], [0.5, 3.0]];
        let before = p.clone();
        let mut adam = Adam::new([&p]);
        adam.update(vec![&mut p], &[Array2::zeros((2, 2))], 0.1);
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_lr_against_the_gradient_sign() {
        let mut p = array![[0.0, 0.0]];
        let mut adam = Adam::new([&p]);
        adam.update(vec![&mut p], &[array![[3.0, -0.2]]], 0.01);
        assert!((p[[0, 0]] + 0.01).abs() < 1e-8);
        assert!((p[[0, 1]] - 0.01).abs() < 1e-8);
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut p = array![[4.0, -3.0]];
        let mut adam = Adam::new([&p]);
        for _ in 0..2000 {
            let g = &p * 2.0;
            adam.update(vec![&mut p], &[g], 0.05);
        }
        assert!(p.iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn cosine_endpoints_and_midpoint() {
        let s = Schedule::Cosine {
            lr_max: 1e-3,
            lr_min: 1e-5,
            period: 200,
        };
        assert!((s.lr(0) - 1e-3).abs() < 1e-15);
        assert!((s.lr(100) - (1e-3 + 1e-5) / 2.0).abs() < 1e-15);
        assert!((s.lr(200) - 1e-5).abs() < 1e-15);
        assert!((s.lr(500) - 1e-5).abs() < 1e-15);
        assert_eq!(Schedule::Constant { lr: 0.1 }.lr(77), 0.1);
    }
}
