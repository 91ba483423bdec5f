//! Adam optimizer with AMSGrad and global-norm gradient clipping.

use super::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub amsgrad: bool,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            amsgrad: true,
        }
    }
}

struct Slot {
    m: Vec<f32>,
    v: Vec<f32>,
    v_max: Vec<f32>,
}

/// Per-parameter moment accumulators, aligned positionally with the parameter
/// list the state was created for.
pub struct AdamState {
    pub cfg: AdamConfig,
    step: u64,
    slots: Vec<Slot>,
}

impl AdamState {
    pub fn new(params: &[Tensor], cfg: AdamConfig) -> AdamState {
        let slots = params
            .iter()
            .map(|p| Slot {
                m: vec![0.0; p.numel()],
                v: vec![0.0; p.numel()],
                v_max: vec![0.0; p.numel()],
            })
            .collect();
        AdamState {
            cfg,
            step: 0,
            slots,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over all parameters. Missing gradients are treated as zero.
    /// Gradients are left untouched; the caller clears them.
    pub fn step(&mut self, params: &[Tensor]) {
        assert_eq!(params.len(), self.slots.len(), "optimizer/param mismatch");
        self.step += 1;
        let t = self.step as f64;
        let c = self.cfg;
        let bc1 = 1.0 - (c.beta1 as f64).powi(t as i32).max(0.0);
        let bc2 = 1.0 - (c.beta2 as f64).powi(t as i32).max(0.0);
        for (p, slot) in params.iter().zip(self.slots.iter_mut()) {
            let grad = p.grad();
            let g = match grad.as_deref() {
                Some(g) => g,
                None => continue, // no contribution; moments still decay below
            };
            debug_assert_eq!(g.len(), slot.m.len());
            let mut data = Vec::new();
            {
                let d = p.data();
                data.extend_from_slice(&d);
            }
            for i in 0..g.len() {
                slot.m[i] = c.beta1 * slot.m[i] + (1.0 - c.beta1) * g[i];
                slot.v[i] = c.beta2 * slot.v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let m_hat = slot.m[i] as f64 / bc1;
                let v_used = if c.amsgrad {
                    if slot.v[i] > slot.v_max[i] {
                        slot.v_max[i] = slot.v[i];
                    }
                    slot.v_max[i]
                } else {
                    slot.v[i]
                };
                let denom = (v_used as f64 / bc2).sqrt() + c.eps as f64;
                data[i] -= (c.lr as f64 * m_hat / denom) as f32;
            }
            p.set_data(&data);
        }
    }
}

/// Scale all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the pre-clip norm; parameters without gradients contribute zero.
pub fn clip_global_norm(params: &[Tensor], max_norm: f32) -> f32 {
    let mut sq = 0.0f64;
    for p in params {
        if let Some(g) = p.grad() {
            for v in g {
                sq += v as f64 * v as f64;
            }
        }
    }
    let norm = sq.sqrt() as f32;
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for p in params {
            if let Some(mut g) = p.grad() {
                for v in g.iter_mut() {
                    *v *= scale;
                }
                p.zero_grad();
                p.accumulate_grad(&g);
            }
        }
    }
    norm
}
