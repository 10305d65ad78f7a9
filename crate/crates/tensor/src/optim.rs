use indexmap::IndexMap;

use crate::error::{Result, TensorError};
use crate::weights::ModelWeights;

/// Learning rate interpolated linearly from `start` to `end` over a number of
/// global rounds and held constant within each round.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub start: f64,
    pub end: f64,
    pub rounds: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            start: 5e-4,
            end: 1e-4,
            rounds: 1,
        }
    }
}

impl LrSchedule {
    pub fn new(rounds: usize) -> Self {
        Self {
            rounds,
            ..Self::default()
        }
    }

    /// Learning rate for zero-based `round`.
    pub fn lr_at(&self, round: usize) -> f64 {
        if self.rounds <= 1 {
            return self.start;
        }
        if round + 1 >= self.rounds {
            return self.end;
        }
        let t = round as f64 / (self.rounds - 1) as f64;
        let (lo, hi) = (self.start.min(self.end), self.start.max(self.end));
        (self.start + (self.end - self.start) * t).clamp(lo, hi)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
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
            weight_decay: 0.05,
        }
    }
}

/// AdamW with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    first: IndexMap<String, Vec<f64>>,
    second: IndexMap<String, Vec<f64>>,
    step: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            first: IndexMap::new(),
            second: IndexMap::new(),
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Updates every trainable tensor in `params` from its gradient and then
    /// clears the gradients. Fails before touching anything if a trainable
    /// tensor has no gradient.
    pub fn step(&mut self, params: &mut ModelWeights, lr: f64) -> Result<()> {
        for (name, t) in params.iter() {
            match &t.grad {
                Some(g) if g.len() == t.numel() => {}
                Some(_) => return Err(TensorError::ShapeMismatch {
                    op: "adamw",
                    lhs: t.shape().to_vec(),
                    rhs: vec![t.grad.as_ref().map_or(0, Vec::len)],
                }),
                None if t.requires_grad => return Err(TensorError::MissingGrad(name.to_string())),
                None => {}
            }
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (name, t) in params.iter_mut() {
            if !t.requires_grad {
                t.grad = None;
                continue;
            }
            let g = t.grad.take().expect("checked above");
            let m = self.first.entry(name.to_string()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.second.entry(name.to_string()).or_insert_with(|| vec![0.0; g.len()]);
            for (((p, gi), mi), vi) in t.data_mut().iter_mut().zip(&g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *p *= 1.0 - lr * c.weight_decay;
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *p -= lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}
