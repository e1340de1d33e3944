use crate::error::{Result, TensorError};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub base_rate: f64,
    pub warmup_steps: u64,
    /// Model width; the rate is scaled by `model_dim^-0.5`.
    pub model_dim: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            base_rate: 1.0,
            warmup_steps: 16_000,
            model_dim: 256,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-9,
        }
    }
}

impl AdamConfig {
    /// Inverse-square-root schedule with linear warm-up, peaking at `warmup_steps`.
    pub fn learning_rate(&self, step: u64) -> f64 {
        let s = step.max(1) as f64;
        let w = self.warmup_steps.max(1) as f64;
        self.base_rate * (self.model_dim as f64).powf(-0.5) * s.powf(-0.5).min(s * w.powf(-1.5))
    }
}

/// Adam moments for every parameter of one [`ParamStore`].
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
        Self {
            config,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    /// One bias-corrected Adam update from the gradients stored on `params`.
    /// Parameters without a gradient are treated as having a zero gradient.
    /// Returns the learning rate used.
    pub fn step(&mut self, params: &mut ParamStore) -> Result<f64> {
        let tensors = params.tensors_mut();
        if tensors.len() != self.first.len() {
            return Err(TensorError::Shape {
                op: "adam_step",
                lhs: vec![self.first.len()],
                rhs: vec![tensors.len()],
            });
        }
        for (t, m) in tensors.iter().zip(&self.first) {
            if t.numel() != m.len() || t.grad().is_some_and(|g| g.len() != m.len()) {
                return Err(TensorError::Shape {
                    op: "adam_step",
                    lhs: t.shape().to_vec(),
                    rhs: vec![m.len()],
                });
            }
        }
        self.step += 1;
        let lr = self.config.learning_rate(self.step);
        let AdamConfig { beta1, beta2, eps, .. } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for ((t, m), v) in tensors.iter_mut().zip(&mut self.first).zip(&mut self.second) {
            let g = t.grad().map(<[f64]>::to_vec);
            let data = t.data_mut();
            for i in 0..data.len() {
                let gi = g.as_ref().map_or(0.0, |g| g[i]);
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                data[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(lr)
    }

    /// Moments and step as checkpoint entries, named after `params`.
    pub fn entries(&self, params: &ParamStore) -> Vec<(String, Tensor)> {
        let mut out = vec![("adam.step".to_string(), Tensor::scalar(self.step as f64))];
        for ((_, name, t), (m, v)) in params.iter().zip(self.first.iter().zip(&self.second)) {
            let shape = t.shape().to_vec();
            out.push((
                format!("adam.m.{name}"),
                Tensor::new(shape.clone(), m.clone()).expect("shape"),
            ));
            out.push((format!("adam.v.{name}"), Tensor::new(shape, v.clone()).expect("shape")));
        }
        out
    }

    pub fn load_entries(&mut self, params: &ParamStore, entries: &[(String, Tensor)]) -> Result<()> {
        let find = |key: &str| {
            entries
                .iter()
                .find(|(n, _)| n == key)
                .map(|(_, t)| t)
                .ok_or_else(|| TensorError::Checkpoint(format!("missing optimizer entry {key}")))
        };
        self.step = find("adam.step")?.item()? as u64;
        for (i, (_, name, t)) in params.iter().enumerate() {
            let m = find(&format!("adam.m.{name}"))?;
            let v = find(&format!("adam.v.{name}"))?;
            if m.numel() != t.numel() || v.numel() != t.numel() {
                return Err(TensorError::Shape {
                    op: "adam_load",
                    lhs: t.shape().to_vec(),
                    rhs: m.shape().to_vec(),
                });
            }
            self.first[i] = m.data().to_vec();
            self.second[i] = v.data().to_vec();
        }
        Ok(())
    }
}
