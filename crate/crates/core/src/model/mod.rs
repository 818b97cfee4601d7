//! The hierarchical encoder: patch embedding, learned position embeddings,
//! four stages of pre-norm transformer blocks with unit-local attention in
//! the early stages and global attention later, and pooled stage
//! transitions that double the width.

pub mod config;
pub mod params;

use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

pub use config::{parse_config, AttnMode, HieraConfig, LadderConfig, PoolKernel, Variant, ACTIVATION};
pub use params::{Builder, Linear, Norm, ParamMeta, ParamStore};

use crate::error::{Error, Result};
use crate::layout::{
    build_layout, expand_rows, group_by_units, sparse_delete, MaskSpec, TokenLayout,
};
use crate::tensor::{Element, Tensor};

/// All four stage outputs of one forward pass, in grouped layout
/// [kept_units, tokens_per_unit, C_s], with the geometry to interpret them.
pub struct StageFeatures<E: Element> {
    pub stages: Vec<Tensor<E>>,
    /// Per-unit spatial extent (tokens per axis) at each stage output.
    pub unit_extents: Vec<usize>,
    pub mask: MaskSpec,
    pub layout: TokenLayout,
}

impl<E: Element> StageFeatures<E> {
    pub fn last(&self) -> &Tensor<E> {
        self.stages.last().expect("four stages")
    }

    pub fn is_dense(&self) -> bool {
        self.mask.masked.is_empty()
    }
}

pub struct Block<E: Element> {
    norm1: Norm<E>,
    wq: Linear<E>,
    wk: Linear<E>,
    wv: Linear<E>,
    proj: Linear<E>,
    /// Projection on the residual path at stage transitions.
    skip: Option<Linear<E>>,
    norm2: Norm<E>,
    fc1: Linear<E>,
    fc2: Linear<E>,
    heads: usize,
    dim_out: usize,
    q_stride: usize,
    kv_stride: usize,
    local: bool,
    drop_path: f64,
    pool_kernel: PoolKernel,
    stride1_pools: bool,
    q_attn_residual: bool,
}

/// Max-pool inside each unit's local grid: [U, uh*uh, C] -> [U, oh*oh, C].
pub(crate) fn pool_unit<E: Element>(
    x: &Tensor<E>,
    uh: usize,
    stride: usize,
    kernel: PoolKernel,
) -> Result<(Tensor<E>, usize)> {
    let sh = x.shape().to_vec();
    let (u, c) = (sh[0], sh[2]);
    let x4 = x.reshape(&[u, uh, uh, c])?;
    let (k, p) = match kernel {
        PoolKernel::EqualStride => ((stride, stride), (0, 0)),
        PoolKernel::Overlap3 => ((3, 3), (1, 1)),
    };
    let y = x4.max_pool2d(k, (stride, stride), p)?;
    let oh = y.shape()[1];
    Ok((y.reshape(&[u, oh * oh, c])?, oh))
}

fn pool_unit_stride1<E: Element>(x: &Tensor<E>, uh: usize) -> Result<Tensor<E>> {
    let sh = x.shape().to_vec();
    let (u, c) = (sh[0], sh[2]);
    let y = x
        .reshape(&[u, uh, uh, c])?
        .max_pool2d((3, 3), (1, 1), (1, 1))?;
    y.reshape(&[u, uh * uh, c])
}

impl<E: Element> Block<E> {
    /// Plain pre-norm global-attention block: no pooling, no transition.
    pub fn plain(
        b: &mut Builder<'_, E>,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: f64,
        eps: f64,
        depth: usize,
    ) -> Block<E> {
        Block {
            norm1: b.norm(&format!("{name}.norm1"), dim, eps, depth),
            wq: b.linear(&format!("{name}.q"), dim, dim, depth),
            wk: b.linear(&format!("{name}.k"), dim, dim, depth),
            wv: b.linear(&format!("{name}.v"), dim, dim, depth),
            proj: b.linear(&format!("{name}.proj"), dim, dim, depth),
            skip: None,
            norm2: b.norm(&format!("{name}.norm2"), dim, eps, depth),
            fc1: b.linear(&format!("{name}.fc1"), dim, (dim as f64 * mlp_ratio) as usize, depth),
            fc2: b.linear(&format!("{name}.fc2"), (dim as f64 * mlp_ratio) as usize, dim, depth),
            heads,
            dim_out: dim,
            q_stride: 1,
            kv_stride: 1,
            local: false,
            drop_path: 0.0,
            pool_kernel: PoolKernel::EqualStride,
            stride1_pools: false,
            q_attn_residual: false,
        }
    }

    /// Switches between unit-local (batched per unit) and global attention.
    pub fn with_local(mut self, local: bool) -> Block<E> {
        self.local = local;
        self
    }

    /// x: [U, uh*uh, C_in]; returns ([U, oh*oh, C_out], oh).
    pub fn forward(
        &self,
        x: &Tensor<E>,
        uh: usize,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Tensor<E>, usize)> {
        let xn = self.norm1.apply(x)?;

        let (shortcut, out_uh) = match &self.skip {
            Some(sp) => {
                let s = sp.apply(&xn)?;
                if self.q_stride > 1 {
                    pool_unit(&s, uh, self.q_stride, self.pool_kernel)?
                } else {
                    (s, uh)
                }
            }
            None => (x.clone(), uh),
        };

        let att = self.attention(&xn, uh)?;
        let x1 = shortcut.add(&self.drop_branch(att, rng.as_deref_mut())?)?;

        let h = self.fc2.apply(&self.fc1.apply(&self.norm2.apply(&x1)?)?.gelu())?;
        let x2 = x1.add(&self.drop_branch(h, rng)?)?;
        Ok((x2, out_uh))
    }

    fn drop_branch(
        &self,
        branch: Tensor<E>,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Tensor<E>> {
        match rng {
            Some(rng) if self.drop_path > 0.0 => {
                if rng.gen::<f64>() < self.drop_path {
                    Ok(branch.scale(0.0))
                } else {
                    Ok(branch)
                }
            }
            _ => Ok(branch),
        }
    }

    pub fn attention(&self, xn: &Tensor<E>, uh: usize) -> Result<Tensor<E>> {
        let units = xn.shape()[0];
        let c = self.dim_out;
        if c % self.heads != 0 {
            return Err(Error::Config(format!(
                "width {c} not divisible by {} heads",
                self.heads
            )));
        }
        let hd = c / self.heads;

        let mut q = self.wq.apply(xn)?;
        let mut k = self.wk.apply(xn)?;
        let mut v = self.wv.apply(xn)?;
        if self.stride1_pools {
            q = pool_unit_stride1(&q, uh)?;
            k = pool_unit_stride1(&k, uh)?;
            v = pool_unit_stride1(&v, uh)?;
        }
        let t_in = xn.shape()[1];
        let (q, tq) = if self.q_stride > 1 {
            let (t, oh) = pool_unit(&q, uh, self.q_stride, self.pool_kernel)?;
            (t, oh * oh)
        } else {
            (q, t_in)
        };
        let (k, v, tk) = if self.kv_stride > 1 {
            let (kp, oh) = pool_unit(&k, uh, self.kv_stride, self.pool_kernel)?;
            let vp = pool_unit(&v, uh, self.kv_stride, self.pool_kernel)?.0;
            (kp, vp, oh * oh)
        } else {
            (k, v, t_in)
        };

        // Unit-local attention batches over units; global attention treats
        // all visible tokens as one sequence.
        let (b, nq, nk) = if self.local {
            (units, tq, tk)
        } else {
            (1, units * tq, units * tk)
        };
        let q = q.reshape(&[b, nq, c])?;
        let k = k.reshape(&[b, nk, c])?;
        let v = v.reshape(&[b, nk, c])?;

        let qh = q.reshape(&[b, nq, self.heads, hd])?.permute(&[0, 2, 1, 3])?;
        let kh = k.reshape(&[b, nk, self.heads, hd])?.permute(&[0, 2, 1, 3])?;
        let vh = v.reshape(&[b, nk, self.heads, hd])?.permute(&[0, 2, 1, 3])?;

        let scores = qh
            .matmul(&kh.transpose_last2()?)?
            .scale(1.0 / (hd as f64).sqrt());
        let attn = scores.softmax(3)?;
        let mut out = attn
            .matmul(&vh)?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[b, nq, c])?;
        if self.q_attn_residual {
            out = out.add(&q)?;
        }
        self.proj.apply(&out)?.reshape(&[units, tq, c])
    }
}

pub struct Hiera<E: Element> {
    pub config: HieraConfig,
    pub layout: TokenLayout,
    pub params: ParamStore<E>,
    patch: Linear<E>,
    pos_spatial: Tensor<E>,
    pos_temporal: Option<Tensor<E>>,
    blocks: Vec<Block<E>>,
    head_norm: Norm<E>,
    head: Linear<E>,
    patch_map: Rc<Vec<usize>>,
    pos_spatial_map: Option<Rc<Vec<usize>>>,
    pos_temporal_map: Option<Rc<Vec<usize>>>,
}

impl<E: Element> Hiera<E> {
    pub fn build(config: HieraConfig, seed: u64) -> Result<Hiera<E>> {
        config.validate()?;
        let layout = build_layout(config.input)?;
        let mut params = ParamStore::default();
        let mut b = Builder {
            store: &mut params,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };

        let c1 = config.channels[0];
        let patch = b.linear("patch", layout.patch_dim(), c1, 0);
        let n = layout.total_tokens();
        let [gt, gh, gw] = layout.grid;
        let (pos_spatial, pos_temporal, pos_spatial_map, pos_temporal_map) = if layout.temporal {
            let sp = b.embedding("pos_spatial", &[gh * gw, c1], 0);
            let tp = b.embedding("pos_temporal", &[gt, c1], 0);
            let mut sp_rows = Vec::with_capacity(n);
            let mut tp_rows = Vec::with_capacity(n);
            for t in 0..gt {
                for y in 0..gh {
                    for x in 0..gw {
                        sp_rows.push(y * gw + x);
                        tp_rows.push(t);
                    }
                }
            }
            (
                sp,
                Some(tp),
                Some(Rc::new(expand_rows(&sp_rows, c1))),
                Some(Rc::new(expand_rows(&tp_rows, c1))),
            )
        } else {
            (b.embedding("pos", &[n, c1], 0), None, None, None)
        };

        let total_blocks = config.total_blocks();
        let mut blocks = Vec::with_capacity(total_blocks);
        let mut global_idx = 0usize;
        for s in 0..4 {
            for j in 0..config.blocks[s] {
                let transition = s > 0 && j == 0;
                let dim_in = if transition {
                    config.channels[s - 1]
                } else {
                    config.channels[s]
                };
                let dim_out = config.channels[s];
                let name = format!("s{s}.b{j}");
                let depth = global_idx + 1;
                let drop_path = if total_blocks > 1 {
                    config.drop_path_max * global_idx as f64 / (total_blocks - 1) as f64
                } else {
                    0.0
                };
                let local = match config.ladder.attn_mode {
                    AttnMode::MaskUnit => s < 2,
                    AttnMode::KvPool => false,
                };
                let kv_stride = match config.ladder.attn_mode {
                    AttnMode::KvPool if s < 2 => 2,
                    _ => 1,
                };
                let mlp_hidden = (dim_out as f64 * config.mlp_ratio) as usize;
                blocks.push(Block {
                    norm1: b.norm(&format!("{name}.norm1"), dim_in, config.norm_eps, depth),
                    wq: b.linear(&format!("{name}.q"), dim_in, dim_out, depth),
                    wk: b.linear(&format!("{name}.k"), dim_in, dim_out, depth),
                    wv: b.linear(&format!("{name}.v"), dim_in, dim_out, depth),
                    proj: b.linear(&format!("{name}.proj"), dim_out, dim_out, depth),
                    skip: transition
                        .then(|| b.linear(&format!("{name}.skip"), dim_in, dim_out, depth)),
                    norm2: b.norm(&format!("{name}.norm2"), dim_out, config.norm_eps, depth),
                    fc1: b.linear(&format!("{name}.fc1"), dim_out, mlp_hidden, depth),
                    fc2: b.linear(&format!("{name}.fc2"), mlp_hidden, dim_out, depth),
                    heads: config.heads[s],
                    dim_out,
                    q_stride: if transition { config.transition_stride(s) } else { 1 },
                    kv_stride,
                    local,
                    drop_path,
                    pool_kernel: config.ladder.pool_kernel,
                    stride1_pools: config.ladder.stride1_pools,
                    q_attn_residual: config.ladder.q_attn_residual
                        && config.ladder.attn_mode == AttnMode::KvPool
                        && s < 2,
                });
                global_idx += 1;
            }
        }

        let c4 = config.channels[3];
        let head_norm = b.norm("head_norm", c4, config.norm_eps, total_blocks + 1);
        let head = b.linear_zero("head", c4, config.num_classes, total_blocks + 1);

        let patch_map = Rc::new(layout.patchify_map());
        Ok(Hiera {
            config,
            layout,
            params,
            patch,
            pos_spatial,
            pos_temporal,
            blocks,
            head_norm,
            head,
            patch_map,
            pos_spatial_map,
            pos_temporal_map,
        })
    }

    /// Embeds pixels (flat or shaped [frames, H, W, 3]) into position-coded
    /// tokens on the full raster grid.
    pub fn blocks(&self) -> &[Block<E>] {
        &self.blocks
    }

    /// Patchifies and adds position embeddings: [N, C1] in raster order.
    pub fn embed(&self, pixels: &Tensor<E>) -> Result<Tensor<E>> {
        let expect = self.patch_map.len();
        if pixels.numel() != expect {
            return Err(Error::Shape(format!(
                "input has {} values, layout expects {expect}",
                pixels.numel()
            )));
        }
        let n = self.layout.total_tokens();
        let pd = self.layout.patch_dim();
        let patched = pixels.gather_map(Rc::clone(&self.patch_map), vec![n, pd])?;
        let tokens = self.patch.apply(&patched)?;
        match (&self.pos_temporal, &self.pos_spatial_map, &self.pos_temporal_map) {
            (Some(tp), Some(sp_map), Some(tp_map)) => {
                let c1 = self.config.channels[0];
                let sp = self.pos_spatial.gather_map(Rc::clone(sp_map), vec![n, c1])?;
                let tpos = tp.gather_map(Rc::clone(tp_map), vec![n, c1])?;
                tokens.add(&sp)?.add(&tpos)
            }
            _ => tokens.add(&self.pos_spatial),
        }
    }

    /// Runs the encoder. `mask` deletes whole mask units before any block
    /// runs; `rng` enables stochastic depth (training mode).
    pub fn forward_encoder(
        &self,
        pixels: &Tensor<E>,
        mask: Option<&MaskSpec>,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<StageFeatures<E>> {
        if mask.is_some() && !self.config.pretrain_mode {
            return Err(Error::Config(
                "masked forward requires pretrain_mode".into(),
            ));
        }
        let total_units = self.layout.total_units();
        let mask = match mask {
            Some(m) => {
                if m.total_units != total_units {
                    return Err(Error::Config(format!(
                        "mask covers {} units, layout has {total_units}",
                        m.total_units
                    )));
                }
                m.clone()
            }
            None => MaskSpec::keep_all(total_units),
        };

        let tokens = self.embed(pixels)?;
        let grouped = group_by_units(&tokens, &self.layout, 0)?;
        let mut x = if mask.masked.is_empty() {
            grouped
        } else {
            sparse_delete(&grouped, &mask)?
        };

        let mut uh = self.layout.unit_tokens[1];
        let mut stages = Vec::with_capacity(4);
        let mut unit_extents = Vec::with_capacity(4);
        let mut bi = 0usize;
        for s in 0..4 {
            for _ in 0..self.config.blocks[s] {
                let (nx, nuh) = self.blocks[bi].forward(&x, uh, rng.as_deref_mut())?;
                x = nx;
                uh = nuh;
                bi += 1;
            }
            stages.push(x.clone());
            unit_extents.push(uh);
        }
        Ok(StageFeatures {
            stages,
            unit_extents,
            mask,
            layout: self.layout.clone(),
        })
    }

    /// Mean-pool over tokens, norm, and project to class logits.
    pub fn classifier_head(&self, feats: &StageFeatures<E>) -> Result<Tensor<E>> {
        if !feats.is_dense() {
            return Err(Error::Config(
                "classifier head requires a dense (unmasked) forward".into(),
            ));
        }
        let x = feats.last();
        let sh = x.shape().to_vec();
        let flat = x.reshape(&[sh[0] * sh[1], sh[2]])?;
        let pooled = flat.mean_rows()?.reshape(&[1, sh[2]])?;
        let logits = self.head.apply(&self.head_norm.apply(&pooled)?)?;
        logits.reshape(&[self.config.num_classes])
    }
}
