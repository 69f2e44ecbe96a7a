use super::params::ParamSet;
use crate::error::{Error, Result};

/// Plain SGD with global-norm gradient clipping.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sgd {
    pub learning_rate: f64,
    pub clip_threshold: f64,
}

impl Sgd {
    pub fn new(learning_rate: f64, clip_threshold: f64) -> Self {
        Sgd {
            learning_rate,
            clip_threshold,
        }
    }

    /// Clips, applies, and zeroes the accumulated gradients. Returns the
    /// gradient norm measured before clipping.
    pub fn step(&self, params: &mut ParamSet) -> Result<f64> {
        let norm = params.grad_norm();
        if !norm.is_finite() {
            let name = params
                .iter()
                .find(|p| !p.grad.is_finite())
                .map_or_else(|| "<unknown>".to_string(), |p| p.name.clone());
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
        let factor = if norm > self.clip_threshold {
            self.clip_threshold / norm
        } else {
            1.0
        };
        let rate = self.learning_rate * factor;
        for p in params.iter_mut() {
            for (w, g) in p.value.data_mut().iter_mut().zip(p.grad.data()) {
                *w -= rate * g;
            }
        }
        params.zero_grads();
        Ok(norm)
    }
}
