use cfgcd_autodiff::Tensor;

use crate::error::{NetError, Result};
use crate::net::DenoiserNet;

/// Exponential moving average of a network's parameters.
///
/// With `warmup` enabled the effective decay after `k` updates is
/// `min(decay, (1 + k) / (10 + k))`, so a slow average does not spend most of
/// a short run anchored to its initial weights.
#[derive(Debug, Clone, PartialEq)]
pub struct EmaTracker {
    decay: f64,
    warmup: bool,
    updates: u64,
    shadow: DenoiserNet,
}

impl EmaTracker {
    pub fn new(source: &DenoiserNet, decay: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&decay) {
            return Err(NetError::InvalidConfig(format!("EMA decay {decay} outside [0, 1]")));
        }
        Ok(EmaTracker { decay, warmup: false, updates: 0, shadow: source.clone() })
    }

    pub fn with_warmup(mut self, on: bool) -> Self {
        self.warmup = on;
        self
    }

    pub fn decay(&self) -> f64 {
        self.decay
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    /// Decay that the next update will use.
    pub fn effective_decay(&self) -> f64 {
        if self.warmup {
            let k = self.updates as f64;
            self.decay.min((1.0 + k) / (10.0 + k))
        } else {
            self.decay
        }
    }

    /// `shadow <- decay * shadow + (1 - decay) * source`.
    pub fn update(&mut self, source: &DenoiserNet) -> Result<()> {
        self.update_params(source.params())
    }

    pub fn update_params(&mut self, source: &[Tensor]) -> Result<()> {
        let names = self.shadow.names().to_vec();
        if source.len() != names.len() {
            return Err(NetError::Incompatible(format!(
                "EMA tracks {} tensors, source has {}",
                names.len(),
                source.len()
            )));
        }
        for (i, (s, p)) in self.shadow.params().iter().zip(source).enumerate() {
            if s.shape() != p.shape() {
                return Err(NetError::ShapeDrift { name: names[i].clone(), got: p.shape(), expected: s.shape() });
            }
        }
        let d = self.effective_decay();
        for (s, p) in self.shadow.params_mut().iter_mut().zip(source) {
            for (a, &b) in s.data_mut().iter_mut().zip(p.data()) {
                *a = d * *a + (1.0 - d) * b;
            }
        }
        self.updates += 1;
        Ok(())
    }

    pub fn shadow(&self) -> &DenoiserNet {
        &self.shadow
    }

    pub fn into_shadow(self) -> DenoiserNet {
        self.shadow
    }
}
