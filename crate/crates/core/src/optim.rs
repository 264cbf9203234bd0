use serde::{Deserialize, Serialize};

use crate::nn::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

/// Per-epoch learning rate. `Cosine` follows the closed form
/// `eta_min + (base - eta_min)·(1 + cos(π·epoch / t_max)) / 2`, which is
/// periodic past `t_max`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LrSchedule {
    Constant,
    Cosine { t_max: usize, eta_min: f64 },
}

impl LrSchedule {
    pub fn lr_at(&self, base: f64, epoch: usize) -> f64 {
        match *self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine { t_max, eta_min } => {
                let phase = std::f64::consts::PI * epoch as f64 / t_max.max(1) as f64;
                eta_min + (base - eta_min) * (1.0 + phase.cos()) / 2.0
            }
        }
    }
}

/// Adam with decoupled weight decay. Frozen parameters are never touched.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    m: Vec<Option<Vec<f64>>>,
    v: Vec<Option<Vec<f64>>>,
    t: u64,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, store: &ParamStore) -> Self {
        Self {
            cfg,
            m: vec![None; store.len()],
            v: vec![None; store.len()],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update from `grads`; parameters without a gradient still decay.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)]) {
        self.t += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let ids: Vec<ParamId> = store.ids().collect();
        for (slot, id) in ids.into_iter().enumerate() {
            if store.is_frozen(id) {
                continue;
            }
            let grad = grads.iter().find(|(g, _)| *g == id).map(|(_, t)| t);
            let p = store.get_mut(id).data_mut();
            let m = self.m[slot].get_or_insert_with(|| vec![0.0; p.len()]);
            let v = self.v[slot].get_or_insert_with(|| vec![0.0; p.len()]);
            for i in 0..p.len() {
                let g = grad.map_or(0.0, |t| t.data()[i]);
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
                p[i] -= c.lr * c.weight_decay * p[i];
                p[i] -= c.lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + c.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut s = ParamStore::new();
        let a = s.add("a", Tensor::new(vec![2], vec![1.0, -1.0]).unwrap());
        let b = s.add("b", Tensor::new(vec![1], vec![5.0]).unwrap());
        s.set_frozen(b, true);
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        let mut opt = AdamW::new(cfg, &s);
        let g = Tensor::new(vec![2], vec![3.0, -0.5]).unwrap();
        opt.step(&mut s, &[(a, g)]);
        let v = s.get(a).data();
        assert!((v[0] - 0.9).abs() < 1e-6 && (v[1] + 0.9).abs() < 1e-6);
        assert_eq!(s.get(b).data(), &[5.0]);
    }

    #[test]
    fn cosine_schedule_points() {
        let s = LrSchedule::Cosine { t_max: 20, eta_min: 0.0 };
        assert_eq!(s.lr_at(1.0, 0), 1.0);
        assert!((s.lr_at(1.0, 10) - 0.5).abs() < 1e-15);
        assert!(s.lr_at(1.0, 20).abs() < 1e-15);
        assert!((s.lr_at(1.0, 40) - 1.0).abs() < 1e-15);
        assert_eq!(LrSchedule::Constant.lr_at(0.3, 7), 0.3);
    }

    #[test]
    fn decay_is_decoupled() {
        let mut s = ParamStore::new();
        let a = s.add("a", Tensor::new(vec![1], vec![2.0]).unwrap());
        let mut opt = AdamW::new(
            AdamWConfig {
                lr: 0.5,
                weight_decay: 0.1,
                ..AdamWConfig::default()
            },
            &s,
        );
        opt.step(&mut s, &[]);
        assert!((s.get(a).data()[0] - 1.9).abs() < 1e-15);
    }
}
