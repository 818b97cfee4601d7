//! AdamW with decoupled weight decay, warmup + half-cosine learning rate
//! schedule, and layer-wise learning-rate decay.

use crate::error::{Error, Result};
use crate::model::params::ParamMeta;
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

/// Linear warmup from 0 to base over the warmup span, then half-cosine decay
/// to 0 at the horizon.
pub fn lr_at(step: usize, s: &Schedule) -> f64 {
    if s.total_steps == 0 {
        return s.base_lr;
    }
    if step < s.warmup_steps {
        return s.base_lr * step as f64 / s.warmup_steps as f64;
    }
    let span = (s.total_steps - s.warmup_steps).max(1);
    let t = ((step - s.warmup_steps) as f64 / span as f64).min(1.0);
    s.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Multiplier decay^(n_blocks - depth) clamped so the head (depth past the
/// last block) gets 1 and the stem (depth 0) is deepest.
pub fn layerwise_lr_scale(depth: usize, n_blocks: usize, decay: f64) -> f64 {
    decay.powi(n_blocks.saturating_sub(depth) as i32)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimConfig {
    pub schedule: Schedule,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    pub layer_decay: f64,
    /// Global-norm gradient clipping threshold; None disables.
    pub grad_clip: Option<f64>,
}

impl OptimConfig {
    pub fn pretrain(base_lr: f64, warmup: usize, total: usize) -> OptimConfig {
        OptimConfig {
            schedule: Schedule { base_lr, warmup_steps: warmup, total_steps: total },
            betas: (0.9, 0.95),
            eps: 1e-8,
            weight_decay: 0.05,
            layer_decay: 1.0,
            grad_clip: None,
        }
    }

    pub fn finetune(base_lr: f64, warmup: usize, total: usize, layer_decay: f64) -> OptimConfig {
        OptimConfig {
            schedule: Schedule { base_lr, warmup_steps: warmup, total_steps: total },
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 0.05,
            layer_decay,
            grad_clip: None,
        }
    }
}

/// Parameters plus optimizer state; the unit of checkpointing.
pub struct TrainState<E: Element> {
    pub entries: Vec<(String, Tensor<E>, ParamMeta)>,
    pub m: Vec<Vec<E>>,
    pub v: Vec<Vec<E>>,
    pub step: usize,
    pub opt: OptimConfig,
    pub seed: u64,
    pub config_hash: u64,
    /// Block count for layer-wise decay exponents.
    pub n_blocks: usize,
}

impl<E: Element> TrainState<E> {
    pub fn new(
        entries: Vec<(String, Tensor<E>, ParamMeta)>,
        opt: OptimConfig,
        seed: u64,
        config_hash: u64,
        n_blocks: usize,
    ) -> TrainState<E> {
        let m = entries.iter().map(|(_, t, _)| vec![E::zero(); t.numel()]).collect();
        let v = entries.iter().map(|(_, t, _)| vec![E::zero(); t.numel()]).collect();
        TrainState { entries, m, v, step: 0, opt, seed, config_hash, n_blocks }
    }

    pub fn zero_grads(&self) {
        for (_, t, _) in &self.entries {
            t.zero_grad();
        }
    }

    /// One AdamW update from the gradients currently accumulated on the
    /// parameters. Parameters without a gradient are skipped. Gradients are
    /// cleared afterwards.
    pub fn adamw_step(&mut self) -> Result<()> {
        let t = self.step + 1;
        let lr = lr_at(t, &self.opt.schedule);
        let (b1, b2) = self.opt.betas;
        let bc1 = 1.0 - b1.powi(t as i32);
        let bc2 = 1.0 - b2.powi(t as i32);

        let mut grads: Vec<Option<Vec<E>>> = Vec::with_capacity(self.entries.len());
        let mut sq_norm = 0.0f64;
        for (name, p, _) in &self.entries {
            match p.grad() {
                Some(g) => {
                    for &v in &g {
                        let v = v.to_f64();
                        if !v.is_finite() {
                            return Err(Error::NonFinite(format!(
                                "gradient of {name} is not finite at step {t}"
                            )));
                        }
                        sq_norm += v * v;
                    }
                    grads.push(Some(g));
                }
                None => grads.push(None),
            }
        }
        let clip_scale = match self.opt.grad_clip {
            Some(c) if sq_norm.sqrt() > c => c / sq_norm.sqrt(),
            _ => 1.0,
        };

        for (i, (_, p, meta)) in self.entries.iter().enumerate() {
            let Some(g) = &grads[i] else { continue };
            let scale = lr * layerwise_lr_scale(meta.depth, self.n_blocks, self.opt.layer_decay);
            let wd = if meta.no_decay { 0.0 } else { self.opt.weight_decay };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let mut data = p.to_vec();
            for j in 0..data.len() {
                let gj = g[j].to_f64() * clip_scale;
                let mj = b1 * m[j].to_f64() + (1.0 - b1) * gj;
                let vj = b2 * v[j].to_f64() + (1.0 - b2) * gj * gj;
                m[j] = E::from_f64(mj);
                v[j] = E::from_f64(vj);
                let update = (mj / bc1) / ((vj / bc2).sqrt() + self.opt.eps);
                let pj = data[j].to_f64();
                data[j] = E::from_f64(pj - scale * (update + wd * pj));
            }
            p.set_data(data)?;
        }
        self.zero_grads();
        self.step = t;
        Ok(())
    }
}
