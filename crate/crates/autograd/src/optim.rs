//! Adam optimizer with optional global-norm gradient clipping.

use std::collections::HashMap;

use crate::graph::{Gradients, Graph};
use crate::params::ParamStore;
use crate::tensor::{Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub clip_global_norm: Option<f32>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_global_norm: None,
        }
    }
}

/// First/second moment estimates are keyed by parameter name so optimizer
/// state survives store reconstruction and can be checkpointed.
pub struct Adam {
    pub cfg: AdamConfig,
    t: u64,
    m: HashMap<String, Tensor>,
    v: HashMap<String, Tensor>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            t: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    pub fn set_lr(&mut self, lr: f32) {
        self.cfg.lr = lr;
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Applies one update to every parameter bound into `graph`.
    /// Parameters with no gradient path get a zero gradient (their moments
    /// still decay).  A non-finite gradient aborts the step with the
    /// offending parameter's name.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        graph: &Graph,
        grads: &Gradients,
    ) -> Result<()> {
        // Global-norm clip factor, from a deterministic pass in bind order.
        let mut clip = 1.0f32;
        if let Some(max_norm) = self.cfg.clip_global_norm {
            let mut sq = 0.0f64;
            for &(id, var) in graph.bound_params() {
                if let Some(g) = grads.get(var) {
                    if !g.is_finite() {
                        return Err(TensorError::NonFiniteGrad {
                            name: store.name(id).to_string(),
                        });
                    }
                    for &v in g.data() {
                        sq += (v as f64) * (v as f64);
                    }
                }
            }
            let norm = sq.sqrt() as f32;
            if norm > max_norm {
                clip = max_norm / norm;
            }
        }

        self.t += 1;
        let bc1 = 1.0 - self.cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.cfg.beta2.powi(self.t as i32);
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);

        for &(id, var) in graph.bound_params() {
            let name = store.name(id).to_string();
            let shape = store.get(id).shape().to_vec();
            let zero;
            let g = match grads.get(var) {
                Some(g) => {
                    if !g.is_finite() {
                        return Err(TensorError::NonFiniteGrad { name });
                    }
                    g
                }
                None => {
                    zero = Tensor::zeros(&shape);
                    &zero
                }
            };
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(&shape));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(&shape));
            let p = store.get_mut(id);
            for i in 0..p.numel() {
                let gi = g.data()[i] * clip;
                let mi = b1 * m.data()[i] + (1.0 - b1) * gi;
                let vi = b2 * v.data()[i] + (1.0 - b2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                p.data_mut()[i] -= self.cfg.lr * mhat / (vhat.sqrt() + self.cfg.eps);
            }
        }
        Ok(())
    }

    /// Optimizer state as named tensors, in canonical (sorted) order.
    /// The step counter is exported as a one-element tensor.
    pub fn export_state(&self) -> Vec<(String, Tensor)> {
        let mut out = vec![("opt.t".to_string(), Tensor::scalar(self.t as f32))];
        let mut names: Vec<&String> = self.m.keys().collect();
        names.sort();
        for name in names {
            out.push((format!("opt.m.{name}"), self.m[name].clone()));
            out.push((format!("opt.v.{name}"), self.v[name].clone()));
        }
        out
    }

    pub fn load_state(&mut self, entries: &[(String, Tensor)]) -> Result<()> {
        for (name, tensor) in entries {
            if name == "opt.t" {
                self.t = tensor.item()? as u64;
            } else if let Some(p) = name.strip_prefix("opt.m.") {
                self.m.insert(p.to_string(), tensor.clone());
            } else if let Some(p) = name.strip_prefix("opt.v.") {
                self.v.insert(p.to_string(), tensor.clone());
            } else {
                return Err(TensorError::Invalid {
                    op: "adam_load",
                    msg: format!("unrecognized state entry `{name}`"),
                });
            }
        }
        Ok(())
    }
}
