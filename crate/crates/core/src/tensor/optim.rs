use std::collections::HashMap;

use super::checkpoint::Checkpoint;
use super::graph::Gradients;
use super::param::{Module, ParamId};
use crate::error::Result;

/// Adam with global gradient-norm clipping.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: Option<f64>,
    step: u64,
    moments: HashMap<ParamId, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(5.0),
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn with_clip(mut self, clip: Option<f64>) -> Self {
        self.clip_norm = clip;
        self
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter of `module` that has a gradient.
    /// Returns the pre-clipping global gradient norm.
    pub fn step<M: Module + ?Sized>(&mut self, module: &mut M, grads: &Gradients) -> f64 {
        let norm = grads.global_norm();
        let scale = match self.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for p in module.params_mut() {
            let Some(g) = grads.get(p) else { continue };
            let (m, v) = self
                .moments
                .entry(p.id())
                .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            let data = p.data_mut();
            for j in 0..g.len() {
                let gj = g[j] * scale;
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                data[j] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        norm
    }

    /// Stores moment buffers keyed by parameter name so a run can resume.
    pub fn export<M: Module + ?Sized>(&self, module: &M, prefix: &str, ck: &mut Checkpoint) {
        ck.push(format!("{prefix}step"), &[1], vec![self.step as f64]);
        for p in module.params() {
            if let Some((m, v)) = self.moments.get(&p.id()) {
                ck.push(format!("{prefix}m.{}", p.name()), p.shape(), m.clone());
                ck.push(format!("{prefix}v.{}", p.name()), p.shape(), v.clone());
            }
        }
    }

    pub fn import<M: Module + ?Sized>(
        &mut self,
        module: &M,
        prefix: &str,
        ck: &Checkpoint,
    ) -> Result<()> {
        if let Some(e) = ck.get(&format!("{prefix}step")) {
            self.step = e.values[0] as u64;
        }
        self.moments.clear();
        for p in module.params() {
            let m = ck.get(&format!("{prefix}m.{}", p.name()));
            let v = ck.get(&format!("{prefix}v.{}", p.name()));
            if let (Some(m), Some(v)) = (m, v) {
                self.moments
                    .insert(p.id(), (m.values.clone(), v.values.clone()));
            }
        }
        Ok(())
    }
}
