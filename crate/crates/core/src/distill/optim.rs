//! AdamW with global-norm gradient clipping. Moments are kept in f64 no
//! matter the training dtype; decoupled weight decay applies to matrices only
//! (norm gains and biases are rank-1 and decay-free, the usual convention).

use crate::tensor::Real;
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// global L2 clip threshold; 0 disables clipping
    pub clip_norm: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
            clip_norm: 1.0,
        }
    }
}

/// One named parameter's update inputs for a step.
pub struct ParamUpdate<'a, F: Real> {
    pub name: &'a str,
    pub value: &'a [F],
    pub grad: &'a [F],
    /// weight decay applies only when true (rank ≥ 2 tensors)
    pub decay: bool,
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub cfg: OptimConfig,
    t: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new(cfg: OptimConfig) -> Self {
        AdamW {
            cfg,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One optimizer step over the trainable set. Returns the updated buffers
    /// (same order as the input) and the pre-clip global gradient norm.
    pub fn step<F: Real>(&mut self, lr: f64, params: &[ParamUpdate<'_, F>]) -> (Vec<Vec<F>>, f64) {
        self.t += 1;
        let mut sq = 0.0f64;
        for p in params {
            debug_assert_eq!(p.value.len(), p.grad.len(), "grad shape for {}", p.name);
            for g in p.grad {
                let g = g.to_f64();
                sq += g * g;
            }
        }
        let norm = sq.sqrt();
        let scale = if self.cfg.clip_norm > 0.0 && norm > self.cfg.clip_norm {
            self.cfg.clip_norm / norm
        } else {
            1.0
        };

        let bc1 = 1.0 - self.cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.cfg.beta2.powi(self.t as i32);

        let mut out = Vec::with_capacity(params.len());
        for p in params {
            let m = self
                .m
                .entry(p.name.to_string())
                .or_insert_with(|| vec![0.0; p.value.len()]);
            let v = self
                .v
                .entry(p.name.to_string())
                .or_insert_with(|| vec![0.0; p.value.len()]);
            assert_eq!(m.len(), p.value.len(), "moment shape changed for {}", p.name);

            let wd = if p.decay { self.cfg.weight_decay } else { 0.0 };
            let mut next = Vec::with_capacity(p.value.len());
            for i in 0..p.value.len() {
                let g = p.grad[i].to_f64() * scale;
                m[i] = self.cfg.beta1 * m[i] + (1.0 - self.cfg.beta1) * g;
                v[i] = self.cfg.beta2 * v[i] + (1.0 - self.cfg.beta2) * g * g;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                let x = p.value[i].to_f64();
                next.push(F::from_f64(x - lr * (mh / (vh.sqrt() + self.cfg.eps) + wd * x)));
            }
            out.push(next);
        }
        (out, norm)
    }
}
