//! AdamW with linear warmup to a constant rate.

use lmlp_core::blocks::NamedParams;
use lmlp_core::{Error, Result};

use crate::config::TrainConfig;

/// First and second moment estimates for one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub name: String,
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    /// Updates applied so far.
    pub step: u64,
    pub state: Vec<Moments>,
}

impl AdamW {
    pub fn new(params: &NamedParams<f32>, cfg: &TrainConfig) -> Self {
        Self {
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
            warmup_steps: cfg.warmup_steps,
            step: 0,
            state: params
                .iter()
                .map(|(n, p)| Moments { name: n.clone(), m: vec![0.0; p.numel()], v: vec![0.0; p.numel()] })
                .collect(),
        }
    }

    /// Rate for update number `step` (0-based).
    pub fn rate_at(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 {
            self.lr
        } else {
            self.lr * ((step + 1) as f64 / self.warmup_steps as f64).min(1.0)
        }
    }

    /// Applies one update from the accumulated gradients. Weight decay is
    /// decoupled and applied to matrices only, not to biases or norm gains.
    pub fn update(&mut self, params: &NamedParams<f32>) -> Result<()> {
        if params.len() != self.state.len() {
            return Err(Error::Usage(format!("optimizer tracks {} tensors, got {}", self.state.len(), params.len())));
        }
        let lr = self.rate_at(self.step);
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps) = (self.beta1 as f32, self.beta2 as f32, self.eps as f32);
        for ((name, p), st) in params.iter().zip(&mut self.state) {
            if *name != st.name || p.numel() != st.m.len() {
                return Err(Error::Usage(format!("optimizer state for {} does not match parameter {name}", st.name)));
            }
            let Some(g) = p.grad() else { continue };
            let decay = if p.rank() >= 2 { (lr * self.weight_decay) as f32 } else { 0.0 };
            let (step_size, c2_sqrt) = ((lr / c1) as f32, c2.sqrt() as f32);
            p.update_data(|w| {
                for i in 0..w.len() {
                    st.m[i] = b1 * st.m[i] + (1.0 - b1) * g[i];
                    st.v[i] = b2 * st.v[i] + (1.0 - b2) * g[i] * g[i];
                    let denom = st.v[i].sqrt() / c2_sqrt + eps;
                    w[i] -= decay * w[i] + step_size * st.m[i] / denom;
                }
            })?;
        }
        Ok(())
    }
}
