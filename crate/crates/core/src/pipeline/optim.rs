//! First-order optimizers over the trainable partition of a [`ParamStore`].

use serde::{Deserialize, Serialize};

use crate::autograd::Mat;
use crate::params::{ParamId, ParamStore};

use super::config::{OptimizerKind, RunConfig};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

/// Per-parameter buffers, in trainable-parameter order.
#[derive(Debug, Clone, PartialEq)]
pub struct Slot {
    pub name: String,
    /// Momentum buffer, or the first moment for Adam.
    pub first: Mat,
    /// Second moment, Adam only.
    pub second: Option<Mat>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerMeta {
    pub kind: OptimizerKind,
    pub updates: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub momentum: f64,
    pub grad_clip: f64,
    pub updates: u64,
    pub slots: Vec<Slot>,
}

impl Optimizer {
    pub fn new(cfg: &RunConfig, params: &ParamStore) -> Self {
        let slots = params
            .trainable_ids()
            .into_iter()
            .map(|id| {
                let p = params.param(id);
                Slot {
                    name: p.name.clone(),
                    first: Mat::zeros(p.value.dim()),
                    second: (cfg.optimizer == OptimizerKind::Adam)
                        .then(|| Mat::zeros(p.value.dim())),
                }
            })
            .collect();
        Self {
            kind: cfg.optimizer,
            learning_rate: cfg.learning_rate,
            momentum: cfg.momentum,
            grad_clip: cfg.grad_clip,
            updates: 0,
            slots,
        }
    }

    /// Applies one update. `grads` must list the trainable parameters in
    /// store order. Returns the gradient norm before clipping.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[(ParamId, Mat)]) -> f64 {
        assert_eq!(grads.len(), self.slots.len(), "one gradient per trainable parameter");
        let norm = grads
            .iter()
            .map(|(_, g)| g.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        let scale = if self.grad_clip > 0.0 && norm > self.grad_clip {
            self.grad_clip / norm
        } else {
            1.0
        };
        self.updates += 1;
        let t = self.updates as f64;
        for ((id, g), slot) in grads.iter().zip(&mut self.slots) {
            debug_assert_eq!(params.param(*id).name, slot.name);
            let p = params.get_mut(*id);
            match self.kind {
                OptimizerKind::Sgd => {
                    let mu = self.momentum;
                    slot.first.zip_mut_with(g, |v, &g| *v = mu * *v + g * scale);
                    p.scaled_add(-self.learning_rate, &slot.first);
                }
                OptimizerKind::Adam => {
                    let second = slot.second.as_mut().expect("adam second moment");
                    slot.first
                        .zip_mut_with(g, |m, &g| *m = BETA1 * *m + (1.0 - BETA1) * g * scale);
                    second.zip_mut_with(g, |v, &g| {
                        let g = g * scale;
                        *v = BETA2 * *v + (1.0 - BETA2) * g * g
                    });
                    let c1 = 1.0 - BETA1.powf(t);
                    let c2 = 1.0 - BETA2.powf(t);
                    let lr = self.learning_rate;
                    ndarray::Zip::from(p)
                        .and(&slot.first)
                        .and(&*second)
                        .for_each(|p, &m, &v| *p -= lr * (m / c1) / ((v / c2).sqrt() + EPS));
                }
            }
        }
        norm
    }

    pub fn meta(&self) -> OptimizerMeta {
        OptimizerMeta {
            kind: self.kind,
            updates: self.updates,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn store() -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("w", array![[1.0, -2.0]], true);
        s.add("frozen", array![[3.0]], false);
        (s, id)
    }

    #[test]
    fn sgd_momentum_matches_hand_computation() {
        let (mut s, id) = store();
        let cfg = RunConfig {
            learning_rate: 0.1,
            ..RunConfig::default()
        };
        let mut opt = Optimizer::new(&cfg, &s);
        assert_eq!(opt.slots.len(), 1);
        let g = array![[1.0, 0.5]];
        opt.step(&mut s, &[(id, g.clone())]);
        assert_eq!(s.get(id), &array![[0.9, -2.05]]);
        opt.step(&mut s, &[(id, g)]);
        // v = 0.9 * g + g = 1.9 g
        assert_eq!(s.get(id), &array![[0.9 - 0.1 * 1.9, -2.05 - 0.1 * 0.95]]);
        assert_eq!(s.get(s.id("frozen").unwrap()), &array![[3.0]]);
    }

    #[test]
    fn clipping_scales_to_the_cap() {
        let (mut s, id) = store();
        let cfg = RunConfig {
            learning_rate: 1.0,
            momentum: 0.0,
            grad_clip: 1.0,
            ..RunConfig::default()
        };
        let mut opt = Optimizer::new(&cfg, &s);
        let norm = opt.step(&mut s, &[(id, array![[3.0, 4.0]])]);
        assert_eq!(norm, 5.0);
        let want = array![[1.0 - 0.6, -2.0 - 0.8]];
        assert!(s.get(id).iter().zip(&want).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn adam_first_step_is_sign_times_rate() {
        let (mut s, id) = store();
        let cfg = RunConfig {
            optimizer: OptimizerKind::Adam,
            learning_rate: 0.01,
            ..RunConfig::default()
        };
        let mut opt = Optimizer::new(&cfg, &s);
        opt.step(&mut s, &[(id, array![[2.0, -0.5]])]);
        let w = s.get(id);
        assert!((w[[0, 0]] - 0.99).abs() < 1e-6);
        assert!((w[[0, 1]] + 1.99).abs() < 1e-6);
    }
}
