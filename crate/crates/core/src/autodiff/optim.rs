use super::{Parameter, Result, Tensor, TensorError};

/// Linear warmup to `peak_lr`, then inverse-square-root decay.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoamSchedule {
    pub peak_lr: f64,
    pub warmup_steps: u64,
}

impl NoamSchedule {
    /// Learning rate for 1-based `step`.
    pub fn lr(&self, step: u64) -> f64 {
        let step = step.max(1) as f64;
        let warmup = self.warmup_steps.max(1) as f64;
        self.peak_lr * (step / warmup).min((warmup / step).sqrt())
    }

    /// Default peak for a model of width `hidden`: `base / √hidden`.
    pub fn scaled_peak(base: f64, hidden: usize) -> f64 {
        base / (hidden as f64).sqrt()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Rescale gradients so their global L2 norm is at most this.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            clip_norm: Some(1.0),
        }
    }
}

/// Adam over a fixed list of distinct parameters.
pub struct Adam {
    config: AdamConfig,
    params: Vec<Parameter>,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    step: u64,
}

impl Adam {
    pub fn new(params: Vec<Parameter>, config: AdamConfig) -> Self {
        let first = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        let second = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        Adam {
            config,
            params,
            first,
            second,
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    /// Applies one update with learning rate `lr`, consuming every stored
    /// gradient. Parameters without a gradient are left untouched apart from
    /// moment decay. Returns the pre-clipping gradient norm.
    pub fn step(&mut self, lr: f64) -> Result<f64> {
        let grads: Vec<Option<Tensor>> = self.params.iter().map(Parameter::take_grad).collect();
        let norm = grads
            .iter()
            .flatten()
            .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() {
            return Err(TensorError::NonFinite { op: "adam gradient" });
        }
        let clip = match self.config.clip_norm {
            Some(max) if norm > max => max / norm,
            _ => 1.0,
        };
        self.step += 1;
        let t = self.step as i32;
        let AdamConfig { beta1, beta2, eps, .. } = self.config;
        let correction1 = 1.0 - beta1.powi(t);
        let correction2 = 1.0 - beta2.powi(t);
        for (i, param) in self.params.iter().enumerate() {
            let Some(grad) = &grads[i] else { continue };
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            param.update(|w| {
                for j in 0..w.len() {
                    let g = grad.data()[j] * clip;
                    m[j] = beta1 * m[j] + (1.0 - beta1) * g;
                    v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
                    let m_hat = m[j] / correction1;
                    let v_hat = v[j] / correction2;
                    w[j] -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            });
        }
        Ok(norm)
    }
}
