use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

pub const ADAM_BETA1: f32 = 0.9;
pub const ADAM_BETA2: f32 = 0.98;
pub const ADAM_EPS: f32 = 1e-9;

/// Linear warmup to `peak_lr` at step `warmup`, then inverse square-root decay.
pub fn lr_at_step(step: u64, peak_lr: f64, warmup: u64) -> f64 {
    let s = step.max(1) as f64;
    let w = warmup.max(1) as f64;
    peak_lr * (s / w).min((w / s).sqrt())
}

/// Adaptive-moment optimizer state, one moment buffer pair per parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    pub t: u64,
}

impl Adam {
    pub fn new(params: &[Tensor<f32>]) -> Self {
        Self {
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            t: 0,
        }
    }

    /// One update. Rows of parameter 0 flagged in `frozen_rows` (row width
    /// `row_len`) are skipped entirely, moments included.
    pub fn step(&mut self, params: &mut [Tensor<f32>], grads: &[Vec<f32>], lr: f32, frozen_rows: Option<(&[bool], usize)>) {
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - ADAM_BETA1.powi(t);
        let bc2 = 1.0 - ADAM_BETA2.powi(t);
        for (pi, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[pi], &mut self.v[pi]);
            for j in 0..p.data.len() {
                if pi == 0 {
                    if let Some((frozen, row_len)) = frozen_rows {
                        if frozen[j / row_len] {
                            continue;
                        }
                    }
                }
                m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * g[j];
                v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * g[j] * g[j];
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                p.data[j] -= lr * mh / (vh.sqrt() + ADAM_EPS);
            }
        }
    }
}
