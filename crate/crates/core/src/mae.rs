//! Masked-autoencoder pretraining head: multi-scale fusion of the encoder
//! stages, a global-attention decoder over the restored token grid, pixel
//! and gradient-histogram reconstruction targets, and the masked-only loss.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::hog;
use crate::layout::{restore_with_mask_tokens, sparse_delete, MaskSpec, TokenLayout};
use crate::model::params::{Builder, Linear, Norm, ParamMeta, ParamStore};
use crate::model::{pool_unit, Block, Hiera, HieraConfig, PoolKernel, StageFeatures};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetKind {
    PixelNorm,
    Hog,
}

impl TargetKind {
    pub fn parse(s: &str) -> Result<TargetKind> {
        match s {
            "pixel_norm" => Ok(TargetKind::PixelNorm),
            "hog" => Ok(TargetKind::Hog),
            _ => Err(Error::Config(format!(
                "target {s:?}; valid: pixel_norm, hog"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecoderConfig {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub target_kind: TargetKind,
    pub mask_ratio: f64,
}

impl DecoderConfig {
    pub fn default_image() -> DecoderConfig {
        DecoderConfig {
            depth: 8,
            width: 512,
            heads: 16,
            target_kind: TargetKind::PixelNorm,
            mask_ratio: 0.6,
        }
    }

    pub fn default_video() -> DecoderConfig {
        DecoderConfig {
            depth: 8,
            width: 512,
            heads: 8,
            target_kind: TargetKind::PixelNorm,
            mask_ratio: 0.9,
        }
    }

    pub fn tiny() -> DecoderConfig {
        DecoderConfig {
            depth: 1,
            width: 16,
            heads: 2,
            target_kind: TargetKind::PixelNorm,
            mask_ratio: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 1 {
            return Err(Error::Config("decoder depth must be >= 1".into()));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "decoder width {} not divisible by heads {}",
                self.width, self.heads
            )));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(Error::Config(format!(
                "mask_ratio {} not in (0, 1)",
                self.mask_ratio
            )));
        }
        Ok(())
    }

    pub fn from_map(map: &BTreeMap<String, Vec<String>>, temporal: bool) -> Result<DecoderConfig> {
        let mut cfg = if temporal {
            DecoderConfig::default_video()
        } else {
            DecoderConfig::default_image()
        };
        let one = |key: &str, vals: &[String]| -> Result<usize> {
            vals[0]
                .parse()
                .map_err(|_| Error::Config(format!("{key}: bad value {:?}", vals[0])))
        };
        for (key, vals) in map {
            match key.as_str() {
                "decoder_depth" => cfg.depth = one(key, vals)?,
                "decoder_width" => cfg.width = one(key, vals)?,
                "decoder_heads" => cfg.heads = one(key, vals)?,
                "target" => cfg.target_kind = TargetKind::parse(&vals[0])?,
                "mask_ratio" => {
                    cfg.mask_ratio = vals[0]
                        .parse()
                        .map_err(|_| Error::Config(format!("mask_ratio: bad value {:?}", vals[0])))?
                }
                _ => {}
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Geometry of the reconstruction targets: one target token per final-stage
/// encoder token.
#[derive(Debug, Clone, Copy)]
pub struct TargetGeometry {
    /// Final-stage per-unit spatial extent (tokens per axis).
    pub t4_extent: usize,
    /// Square pixel footprint of one target token.
    pub token_px: usize,
    /// Frames covered by one target token (1 image, 2 video).
    pub frames_per_token: usize,
    /// Encoder stage index whose grid matches the target resolution.
    pub stage: usize,
}

pub fn target_geometry(cfg: &HieraConfig, layout: &TokenLayout) -> Result<TargetGeometry> {
    let t4_extent = cfg.unit_extent_at(3);
    let unit_px = layout.unit_tokens[1] * layout.pixel_patch[1];
    let token_px = unit_px / t4_extent;
    let stage = (0..4)
        .find(|&s| layout.unit_tokens[1] >> s == t4_extent)
        .ok_or_else(|| {
            Error::Internal(format!("no stage has per-unit extent {t4_extent}"))
        })?;
    Ok(TargetGeometry {
        t4_extent,
        token_px,
        frames_per_token: layout.pixel_patch[0],
        stage,
    })
}

/// Per-token reconstruction targets in grouped layout [units, t4, P].
pub struct ReconTarget<E: Element> {
    pub kind: TargetKind,
    pub values: Tensor<E>,
}

fn pixels_f64<E: Element>(pixels: &Tensor<E>) -> Vec<f64> {
    pixels.data().iter().map(|&v| Element::to_f64(v)).collect()
}

fn group_rows<E: Element>(
    rows: Vec<Vec<f64>>,
    layout: &TokenLayout,
    geom: &TargetGeometry,
) -> Result<Tensor<E>> {
    let map = layout.group_token_map(geom.stage);
    let units = layout.total_units();
    let t = layout.tokens_per_unit_at(geom.stage);
    let p = rows.first().map(|r| r.len()).unwrap_or(0);
    debug_assert_eq!(map.len(), rows.len());
    let mut data = Vec::with_capacity(units * t * p);
    for &raster in &map {
        data.extend(rows[raster].iter().map(|&v| E::from_f64(v)));
    }
    Tensor::from_vec(data, &[units, t, p])
}

/// Per-patch zero-mean unit-variance pixel targets.
pub fn pixel_target<E: Element>(
    pixels: &Tensor<E>,
    layout: &TokenLayout,
    geom: &TargetGeometry,
) -> Result<ReconTarget<E>> {
    let px = pixels_f64(pixels);
    let (h, w) = (layout.input.height, layout.input.width);
    let tp = geom.token_px;
    let pf = geom.frames_per_token;
    let [gt, _, _] = layout.grid;
    let (ty, tx) = (h / tp, w / tp);
    let eps = 1e-6;
    let mut rows = Vec::with_capacity(gt * ty * tx);
    for t in 0..gt {
        for y in 0..ty {
            for x in 0..tx {
                let mut row = Vec::with_capacity(pf * tp * tp * 3);
                for f in 0..pf {
                    let fr = t * pf + f;
                    for py in 0..tp {
                        for qx in 0..tp {
                            let iy = y * tp + py;
                            let ix = x * tp + qx;
                            let base = ((fr * h + iy) * w + ix) * 3;
                            row.extend_from_slice(&px[base..base + 3]);
                        }
                    }
                }
                let n = row.len() as f64;
                let mean = row.iter().sum::<f64>() / n;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                let denom = (var + eps).sqrt();
                for v in row.iter_mut() {
                    *v = (*v - mean) / denom;
                }
                rows.push(row);
            }
        }
    }
    Ok(ReconTarget {
        kind: TargetKind::PixelNorm,
        values: group_rows(rows, layout, geom)?,
    })
}

/// Oriented-gradient histogram targets; video tokens concatenate their
/// frames' descriptors.
pub fn hog_target<E: Element>(
    pixels: &Tensor<E>,
    layout: &TokenLayout,
    geom: &TargetGeometry,
) -> Result<ReconTarget<E>> {
    let px = pixels_f64(pixels);
    let (h, w) = (layout.input.height, layout.input.width);
    let tp = geom.token_px;
    let pf = geom.frames_per_token;
    let [gt, _, _] = layout.grid;
    let frames = gt * pf;
    let per_frame: Vec<Vec<Vec<f64>>> = (0..frames)
        .map(|fr| hog::frame_descriptor_rows(&px[fr * h * w * 3..(fr + 1) * h * w * 3], h, w, tp))
        .collect();
    let (ty, tx) = (h / tp, w / tp);
    let mut rows = Vec::with_capacity(gt * ty * tx);
    for t in 0..gt {
        for y in 0..ty {
            for x in 0..tx {
                let mut row = Vec::new();
                for f in 0..pf {
                    row.extend_from_slice(&per_frame[t * pf + f][y * tx + x]);
                }
                rows.push(row);
            }
        }
    }
    Ok(ReconTarget {
        kind: TargetKind::Hog,
        values: group_rows(rows, layout, geom)?,
    })
}

pub fn make_target<E: Element>(
    kind: TargetKind,
    pixels: &Tensor<E>,
    layout: &TokenLayout,
    geom: &TargetGeometry,
) -> Result<ReconTarget<E>> {
    match kind {
        TargetKind::PixelNorm => pixel_target(pixels, layout, geom),
        TargetKind::Hog => hog_target(pixels, layout, geom),
    }
}

/// Values per predicted token for a target kind.
pub fn pred_dim(kind: TargetKind, geom: &TargetGeometry) -> usize {
    let cells = (geom.token_px / hog::CELL_PX) * (geom.token_px / hog::CELL_PX);
    match kind {
        TargetKind::PixelNorm => geom.frames_per_token * geom.token_px * geom.token_px * 3,
        TargetKind::Hog => geom.frames_per_token * cells * hog::BINS,
    }
}

pub struct MaeDecoder<E: Element> {
    pub config: DecoderConfig,
    pub params: ParamStore<E>,
    pub geom: TargetGeometry,
    fuse: Vec<Linear<E>>,
    mask_token: Tensor<E>,
    pos: Tensor<E>,
    blocks: Vec<Block<E>>,
    norm: Norm<E>,
    pred: Linear<E>,
}

impl<E: Element> MaeDecoder<E> {
    pub fn build(
        enc: &HieraConfig,
        layout: &TokenLayout,
        config: DecoderConfig,
        seed: u64,
    ) -> Result<MaeDecoder<E>> {
        config.validate()?;
        let geom = target_geometry(enc, layout)?;
        let mut params = ParamStore::default();
        let mut b = Builder {
            store: &mut params,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let w = config.width;
        let fuse = (0..4)
            .map(|s| b.linear(&format!("fuse{s}"), enc.channels[s], w, 0))
            .collect();
        let mask_token = {
            let t = Tensor::param(
                crate::model::params::trunc_normal_vec(&mut b.rng, w, 0.02),
                &[w],
            )
            .unwrap();
            b.store.add("mask_token", t, ParamMeta { no_decay: true, depth: 0 })
        };
        let t4 = layout.tokens_per_unit_at(geom.stage);
        let pos = b.embedding("dec_pos", &[layout.total_units() * t4, w], 0);
        let blocks = (0..config.depth)
            .map(|d| Block::plain(&mut b, &format!("dec{d}"), w, config.heads, 4.0, enc.norm_eps, d + 1))
            .collect();
        let norm = b.norm("dec_norm", w, enc.norm_eps, config.depth + 1);
        let pred = b.linear(
            "pred",
            w,
            pred_dim(config.target_kind, &geom),
            config.depth + 1,
        );
        Ok(MaeDecoder {
            config,
            params,
            geom,
            fuse,
            mask_token,
            pos,
            blocks,
            norm,
            pred,
        })
    }

    /// Pools every stage's kept-unit features down to the final per-unit
    /// extent, projects each to the decoder width, and sums.
    pub fn fuse_multiscale(&self, f: &StageFeatures<E>) -> Result<Tensor<E>> {
        if *f.unit_extents.last().unwrap() != self.geom.t4_extent {
            return Err(Error::Internal(format!(
                "final stage extent {} != target extent {}",
                f.unit_extents.last().unwrap(),
                self.geom.t4_extent
            )));
        }
        let mut acc: Option<Tensor<E>> = None;
        for (s, x) in f.stages.iter().enumerate() {
            let e = f.unit_extents[s];
            if e % self.geom.t4_extent != 0 {
                return Err(Error::Internal(format!(
                    "stage {s} extent {e} not divisible by {}",
                    self.geom.t4_extent
                )));
            }
            let stride = e / self.geom.t4_extent;
            let pooled = if stride > 1 {
                pool_unit(x, e, stride, PoolKernel::EqualStride)?.0
            } else {
                x.clone()
            };
            let proj = self.fuse[s].apply(&pooled)?;
            acc = Some(match acc {
                Some(a) => a.add(&proj)?,
                None => proj,
            });
        }
        Ok(acc.unwrap())
    }

    /// Restores the full unit grid with mask tokens, adds decoder position
    /// embeddings, runs the decoder blocks, and predicts target vectors.
    pub fn decode(&self, fused: &Tensor<E>, mask: &MaskSpec) -> Result<Tensor<E>> {
        let restored = restore_with_mask_tokens(fused, mask, &self.mask_token)?;
        let sh = restored.shape().to_vec();
        let (units, t, w) = (sh[0], sh[1], sh[2]);
        let flat = restored.reshape(&[units * t, w])?;
        let mut x = flat.add(&self.pos)?.reshape(&[units, t, w])?;
        for blk in &self.blocks {
            x = blk.forward(&x, self.geom.t4_extent, None)?.0;
        }
        self.pred.apply(&self.norm.apply(&x)?)
    }

    pub fn forward(&self, f: &StageFeatures<E>) -> Result<Tensor<E>> {
        let fused = self.fuse_multiscale(f)?;
        self.decode(&fused, &f.mask)
    }
}

/// Mean squared error over masked-unit tokens only.
pub fn mae_loss<E: Element>(
    pred: &Tensor<E>,
    target: &ReconTarget<E>,
    mask: &MaskSpec,
) -> Result<Tensor<E>> {
    if mask.masked.is_empty() {
        return Err(Error::Config(
            "reconstruction loss needs at least one masked unit".into(),
        ));
    }
    if pred.shape() != target.values.shape() {
        return Err(Error::Shape(format!(
            "prediction shape {:?} vs target shape {:?}",
            pred.shape(),
            target.values.shape()
        )));
    }
    let inverted = MaskSpec {
        total_units: mask.total_units,
        kept: mask.masked.clone(),
        masked: mask.kept.clone(),
        seed: mask.seed,
    };
    let pm = sparse_delete(pred, &inverted)?;
    let tm = sparse_delete(&target.values, &inverted)?;
    pm.mse(&tm)
}

/// Encoder plus decoder with a single loss entry point for pretraining.
pub struct MaePretrainer<E: Element> {
    pub encoder: Hiera<E>,
    pub decoder: MaeDecoder<E>,
}

impl<E: Element> MaePretrainer<E> {
    pub fn build(mut enc: HieraConfig, dec: DecoderConfig, seed: u64) -> Result<MaePretrainer<E>> {
        enc.pretrain_mode = true;
        let encoder = Hiera::build(enc, seed)?;
        let decoder = MaeDecoder::build(
            &encoder.config,
            &encoder.layout,
            dec,
            seed.wrapping_add(1),
        )?;
        Ok(MaePretrainer { encoder, decoder })
    }

    /// Full pretraining objective for one sample under a given mask.
    pub fn loss_for(
        &self,
        pixels: &Tensor<E>,
        mask: &MaskSpec,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Tensor<E>> {
        let feats = self.encoder.forward_encoder(pixels, Some(mask), rng)?;
        let pred = self.decoder.forward(&feats)?;
        let target = make_target(
            self.decoder.config.target_kind,
            pixels,
            &self.encoder.layout,
            &self.decoder.geom,
        )?;
        mae_loss(&pred, &target, mask)
    }

    /// All trainable parameters with namespaced names.
    pub fn param_entries(&self) -> Vec<(String, Tensor<E>, ParamMeta)> {
        let mut out = Vec::new();
        for (n, t, m) in self.encoder.params.iter() {
            out.push((format!("enc.{n}"), t.clone(), m));
        }
        let enc_depth = self.encoder.params.max_depth();
        for (n, t, mut m) in self.decoder.params.iter() {
            // Decoder sits past the encoder for layer-wise scaling purposes.
            m.depth = enc_depth;
            out.push((format!("dec.{n}"), t.clone(), m));
        }
        out
    }
}
