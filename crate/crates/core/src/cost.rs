//! Analytic parameter and multiply-accumulate counts for a config, with a
//! per-stage breakdown. Conventions: one fused multiply-add counts as one
//! FLOP; softmax, norms, activations, and max pools count zero.

use crate::error::Result;
use crate::layout::build_layout;
use crate::model::{AttnMode, HieraConfig};

#[derive(Debug, Clone)]
pub struct CostRow {
    pub name: String,
    pub params: u64,
    pub flops: u64,
}

#[derive(Debug, Clone)]
pub struct CostReport {
    pub rows: Vec<CostRow>,
    pub total_params: u64,
    pub total_flops: u64,
    /// Token grid (h, w) at each stage output.
    pub stage_resolutions: Vec<(usize, usize)>,
}

pub fn count_params(cfg: &HieraConfig) -> Result<u64> {
    Ok(cost_report(cfg)?.total_params)
}

pub fn count_flops(cfg: &HieraConfig) -> Result<u64> {
    Ok(cost_report(cfg)?.total_flops)
}

pub fn cost_report(cfg: &HieraConfig) -> Result<CostReport> {
    let layout = build_layout(cfg.input)?;
    let units = layout.total_units() as u64;
    let pd = layout.patch_dim() as u64;
    let c1 = cfg.channels[0] as u64;
    let n1 = layout.total_tokens() as u64;

    let mut rows = Vec::new();
    let pos_params = if layout.temporal {
        let [gt, gh, gw] = layout.grid;
        ((gh * gw + gt) as u64) * c1
    } else {
        n1 * c1
    };
    rows.push(CostRow {
        name: "stem".into(),
        params: pd * c1 + c1 + pos_params,
        flops: n1 * pd * c1,
    });

    // Per-unit spatial extent of tokens entering each block.
    let mut uh = layout.unit_tokens[1] as u64;
    let mut prev_dim = c1;
    let mut stage_resolutions = Vec::with_capacity(4);
    for s in 0..4 {
        let dout = cfg.channels[s] as u64;
        let hidden = (dout as f64 * cfg.mlp_ratio) as u64;
        let local = match cfg.ladder.attn_mode {
            AttnMode::MaskUnit => s < 2,
            AttnMode::KvPool => false,
        };
        let kv_stride = match cfg.ladder.attn_mode {
            AttnMode::KvPool if s < 2 => 2u64,
            _ => 1,
        };
        let mut params = 0u64;
        let mut flops = 0u64;
        for j in 0..cfg.blocks[s] {
            let transition = s > 0 && j == 0;
            let din = if transition { prev_dim } else { dout };
            let q_stride = if transition {
                cfg.transition_stride(s) as u64
            } else {
                1
            };
            let t_in = uh * uh;
            let n_in = units * t_in;
            let tq = (uh / q_stride) * (uh / q_stride);
            let tk = (uh / kv_stride) * (uh / kv_stride);
            let nq = units * tq;

            params += 2 * din; // norm1
            params += 3 * (din * dout + dout); // q, k, v
            params += dout * dout + dout; // proj
            if transition {
                params += din * dout + dout; // skip projection
            }
            params += 2 * dout; // norm2
            params += dout * hidden + hidden + hidden * dout + dout; // mlp

            flops += 3 * n_in * din * dout; // q, k, v
            if transition {
                flops += n_in * din * dout; // skip projection
            }
            // Attention scores and value mixing.
            flops += if local {
                2 * units * tq * tk * dout
            } else {
                2 * nq * (units * tk) * dout
            };
            flops += nq * dout * dout; // output projection
            flops += 2 * nq * dout * hidden; // mlp

            uh /= q_stride;
        }
        prev_dim = dout;
        rows.push(CostRow { name: format!("stage{}", s + 1), params, flops });
        let ug = layout.unit_grid();
        stage_resolutions.push((ug[1] * uh as usize, ug[2] * uh as usize));
    }

    let c4 = cfg.channels[3] as u64;
    let ncls = cfg.num_classes as u64;
    rows.push(CostRow {
        name: "head".into(),
        params: 2 * c4 + c4 * ncls + ncls,
        flops: c4 * ncls,
    });

    let total_params = rows.iter().map(|r| r.params).sum();
    let total_flops = rows.iter().map(|r| r.flops).sum();
    Ok(CostReport { rows, total_params, total_flops, stage_resolutions })
}
