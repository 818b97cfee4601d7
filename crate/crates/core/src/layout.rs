//! Token grid and mask-unit bookkeeping: grouping tokens into mask units,
//! sampling masks, sparse deletion/restoration, and the separate-and-pad
//! pooling baseline.

use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Pixels (and frames) of one input sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InputExtents {
    /// None for images; Some(frames) for video.
    pub frames: Option<usize>,
    pub height: usize,
    pub width: usize,
}

impl InputExtents {
    pub fn image(height: usize, width: usize) -> Self {
        InputExtents { frames: None, height, width }
    }
    pub fn video(frames: usize, height: usize, width: usize) -> Self {
        InputExtents { frames: Some(frames), height, width }
    }
}

/// Description of the token grid: patch footprint, token extents, and the
/// tokens-per-mask-unit structure at stage 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenLayout {
    pub temporal: bool,
    /// Token footprint in pixels as [frames, h, w] (image: [1, 4, 4]).
    pub pixel_patch: [usize; 3],
    /// Token grid extents [t, h, w] (image: t = 1).
    pub grid: [usize; 3],
    /// Tokens per mask unit per axis at stage 1 ([1, 8, 8]).
    pub unit_tokens: [usize; 3],
    /// Input pixel extents, kept for target construction.
    pub input: InputExtents,
}

const UNIT_PX: usize = 32;
const PATCH_PX: usize = 4;
const VIDEO_PATCH_FRAMES: usize = 2;

/// Builds the token layout for an input. Spatial extents must divide by 32
/// pixels; video frame counts must divide by 2.
pub fn build_layout(input: InputExtents) -> Result<TokenLayout> {
    if input.height % UNIT_PX != 0 {
        return Err(Error::Layout(format!(
            "input height {} is not divisible by {UNIT_PX}",
            input.height
        )));
    }
    if input.width % UNIT_PX != 0 {
        return Err(Error::Layout(format!(
            "input width {} is not divisible by {UNIT_PX}",
            input.width
        )));
    }
    let (temporal, patch_frames, grid_t) = match input.frames {
        None => (false, 1, 1),
        Some(f) => {
            if f % VIDEO_PATCH_FRAMES != 0 {
                return Err(Error::Layout(format!(
                    "frame count {f} is not divisible by {VIDEO_PATCH_FRAMES}"
                )));
            }
            (true, VIDEO_PATCH_FRAMES, f / VIDEO_PATCH_FRAMES)
        }
    };
    Ok(TokenLayout {
        temporal,
        pixel_patch: [patch_frames, PATCH_PX, PATCH_PX],
        grid: [grid_t, input.height / PATCH_PX, input.width / PATCH_PX],
        unit_tokens: [1, UNIT_PX / PATCH_PX, UNIT_PX / PATCH_PX],
        input,
    })
}

impl TokenLayout {
    /// Mask-unit grid extents [t, h, w].
    pub fn unit_grid(&self) -> [usize; 3] {
        [
            self.grid[0] / self.unit_tokens[0],
            self.grid[1] / self.unit_tokens[1],
            self.grid[2] / self.unit_tokens[2],
        ]
    }

    pub fn total_units(&self) -> usize {
        let g = self.unit_grid();
        g[0] * g[1] * g[2]
    }

    pub fn total_tokens(&self) -> usize {
        self.grid.iter().product()
    }

    /// Tokens per mask unit per axis at a 0-based stage (8, 4, 2, 1 spatial).
    pub fn unit_tokens_at(&self, stage: usize) -> [usize; 3] {
        [
            self.unit_tokens[0],
            self.unit_tokens[1] >> stage,
            self.unit_tokens[2] >> stage,
        ]
    }

    pub fn tokens_per_unit_at(&self, stage: usize) -> usize {
        self.unit_tokens_at(stage).iter().product()
    }

    /// Token grid at a stage: spatial extents halve per stage, time is fixed.
    pub fn grid_at(&self, stage: usize) -> [usize; 3] {
        [self.grid[0], self.grid[1] >> stage, self.grid[2] >> stage]
    }

    pub fn patch_dim(&self) -> usize {
        self.pixel_patch.iter().product::<usize>() * 3
    }

    /// Flat index map for rearranging pixels [frames, H, W, 3] into
    /// patch rows [tokens, patch_dim] in raster token order.
    pub fn patchify_map(&self) -> Vec<usize> {
        let [gt, gh, gw] = self.grid;
        let [pf, ph, pw] = self.pixel_patch;
        let (ih, iw) = (self.input.height, self.input.width);
        let mut map = Vec::with_capacity(gt * gh * gw * pf * ph * pw * 3);
        for t in 0..gt {
            for y in 0..gh {
                for x in 0..gw {
                    for f in 0..pf {
                        for py in 0..ph {
                            for px in 0..pw {
                                for c in 0..3 {
                                    let fr = t * pf + f;
                                    let iy = y * ph + py;
                                    let ix = x * pw + px;
                                    map.push(((fr * ih + iy) * iw + ix) * 3 + c);
                                }
                            }
                        }
                    }
                }
            }
        }
        map
    }

    /// Token index map from grouped order (units raster, then local raster
    /// within each unit) to raster grid order, at a given stage resolution.
    pub fn group_token_map(&self, stage: usize) -> Vec<usize> {
        let [gt, gh, gw] = self.grid_at(stage);
        let [ut, uh, uw] = self.unit_tokens_at(stage);
        let [nt, nh, nw] = self.unit_grid();
        let mut map = Vec::with_capacity(gt * gh * gw);
        for iu in 0..nt {
            for ju in 0..nh {
                for ku in 0..nw {
                    for lt in 0..ut {
                        for ly in 0..uh {
                            for lx in 0..uw {
                                let t = iu * ut + lt;
                                let y = ju * uh + ly;
                                let x = ku * uw + lx;
                                map.push((t * gh + y) * gw + x);
                            }
                        }
                    }
                }
            }
        }
        map
    }
}

pub(crate) fn expand_rows(token_map: &[usize], row_len: usize) -> Vec<usize> {
    let mut map = Vec::with_capacity(token_map.len() * row_len);
    for &t in token_map {
        for j in 0..row_len {
            map.push(t * row_len + j);
        }
    }
    map
}

/// Which mask units are kept vs. deleted for one sample.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskSpec {
    pub total_units: usize,
    /// Ascending kept unit indices.
    pub kept: Vec<usize>,
    /// Ascending deleted unit indices.
    pub masked: Vec<usize>,
    pub seed: u64,
}

impl MaskSpec {
    /// Mask that keeps every unit (the dense / masking-disabled case).
    pub fn keep_all(total_units: usize) -> Self {
        MaskSpec {
            total_units,
            kept: (0..total_units).collect(),
            masked: Vec::new(),
            seed: 0,
        }
    }

    /// Line-oriented text record for reproducibility dumps.
    pub fn to_record(&self) -> String {
        let kept: Vec<String> = self.kept.iter().map(|k| k.to_string()).collect();
        format!(
            "total {}\nseed {}\nkept {}\n",
            self.total_units,
            self.seed,
            kept.join(" ")
        )
    }

    pub fn from_record(text: &str) -> Result<Self> {
        let mut total = None;
        let mut seed = None;
        let mut kept: Option<Vec<usize>> = None;
        for line in text.lines() {
            let mut parts = line.split_whitespace();
            match parts.next() {
                Some("total") => {
                    total = Some(parse_num(parts.next())?);
                }
                Some("seed") => {
                    seed = Some(parse_num(parts.next())? as u64);
                }
                Some("kept") => {
                    kept = Some(
                        parts
                            .map(|p| parse_num(Some(p)))
                            .collect::<Result<Vec<usize>>>()?,
                    );
                }
                _ => {}
            }
        }
        let total = total.ok_or_else(|| Error::Layout("mask record missing total".into()))?;
        let seed = seed.ok_or_else(|| Error::Layout("mask record missing seed".into()))?;
        let kept = kept.ok_or_else(|| Error::Layout("mask record missing kept".into()))?;
        let masked = (0..total).filter(|u| !kept.contains(u)).collect();
        Ok(MaskSpec { total_units: total, kept, masked, seed })
    }
}

fn parse_num(p: Option<&str>) -> Result<usize> {
    p.and_then(|p| p.parse().ok())
        .ok_or_else(|| Error::Layout("bad number in mask record".into()))
}

/// Samples a mask deleting roughly `ratio` of the units, uniformly without
/// replacement, deterministic per seed. Keeps floor(total*(1-ratio))
/// clamped to [1, total-1].
pub fn sample_mask(layout: &TokenLayout, ratio: f64, seed: u64) -> Result<MaskSpec> {
    sample_mask_units(layout.total_units(), ratio, seed)
}

pub fn sample_mask_units(total_units: usize, ratio: f64, seed: u64) -> Result<MaskSpec> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("mask ratio {ratio} not in (0, 1)")));
    }
    if total_units < 2 {
        return Err(Error::Config(format!(
            "need at least 2 mask units, have {total_units}"
        )));
    }
    let keep = ((total_units as f64) * (1.0 - ratio)).floor() as usize;
    let keep = keep.clamp(1, total_units - 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perm: Vec<usize> = (0..total_units).collect();
    perm.shuffle(&mut rng);
    let mut kept: Vec<usize> = perm[..keep].to_vec();
    let mut masked: Vec<usize> = perm[keep..].to_vec();
    kept.sort_unstable();
    masked.sort_unstable();
    Ok(MaskSpec { total_units, kept, masked, seed })
}

/// Rearranges [tokens, C] on the raster grid into [units, tokens_per_unit, C].
pub fn group_by_units<E: Element>(
    tokens: &Tensor<E>,
    layout: &TokenLayout,
    stage: usize,
) -> Result<Tensor<E>> {
    let c = *tokens
        .shape()
        .last()
        .ok_or_else(|| Error::Shape("group_by_units on 0-d tensor".into()))?;
    let n = layout.grid_at(stage).iter().product::<usize>();
    if tokens.numel() != n * c {
        return Err(Error::Shape(format!(
            "group_by_units: {} tokens expected, tensor has shape {:?}",
            n,
            tokens.shape()
        )));
    }
    let map = expand_rows(&layout.group_token_map(stage), c);
    tokens.gather_map(
        Rc::new(map),
        vec![layout.total_units(), layout.tokens_per_unit_at(stage), c],
    )
}

/// Inverse of `group_by_units`: [units, tokens_per_unit, C] -> [tokens, C].
pub fn ungroup_by_units<E: Element>(
    grouped: &Tensor<E>,
    layout: &TokenLayout,
    stage: usize,
) -> Result<Tensor<E>> {
    let c = *grouped
        .shape()
        .last()
        .ok_or_else(|| Error::Shape("ungroup_by_units on 0-d tensor".into()))?;
    let fwd = layout.group_token_map(stage);
    let mut inv = vec![0usize; fwd.len()];
    for (grouped_idx, &raster_idx) in fwd.iter().enumerate() {
        inv[raster_idx] = grouped_idx;
    }
    let n = fwd.len();
    if grouped.numel() != n * c {
        return Err(Error::Shape(format!(
            "ungroup_by_units: expected {} tokens, got shape {:?}",
            n,
            grouped.shape()
        )));
    }
    grouped.gather_map(Rc::new(expand_rows(&inv, c)), vec![n, c])
}

/// Deletes masked units: keeps rows listed in `mask.kept`, in kept order.
pub fn sparse_delete<E: Element>(grouped: &Tensor<E>, mask: &MaskSpec) -> Result<Tensor<E>> {
    let sh = grouped.shape().to_vec();
    if sh.is_empty() || sh[0] != mask.total_units {
        return Err(Error::Shape(format!(
            "sparse_delete: first extent of {:?} != total units {}",
            sh, mask.total_units
        )));
    }
    let row_len: usize = sh[1..].iter().product();
    let map = expand_rows(&mask.kept, row_len);
    let mut out_shape = sh;
    out_shape[0] = mask.kept.len();
    grouped.gather_map(Rc::new(map), out_shape)
}

/// Places kept rows back at their original unit indices and fills masked
/// units with `mask_token` broadcast over tokens.
pub fn restore_with_mask_tokens<E: Element>(
    visible: &Tensor<E>,
    mask: &MaskSpec,
    mask_token: &Tensor<E>,
) -> Result<Tensor<E>> {
    let sh = visible.shape().to_vec();
    if sh.len() != 3 || sh[0] != mask.kept.len() {
        return Err(Error::Shape(format!(
            "restore_with_mask_tokens: visible shape {:?} vs {} kept units",
            sh,
            mask.kept.len()
        )));
    }
    let (t, c) = (sh[1], sh[2]);
    if mask_token.shape() != [c] {
        return Err(Error::Shape(format!(
            "restore_with_mask_tokens: mask token shape {:?} vs channels {c}",
            mask_token.shape()
        )));
    }
    let units = mask.total_units;
    let mut data = vec![E::zero(); units * t * c];
    {
        let vis = visible.data();
        let tok = mask_token.data();
        for (k, &u) in mask.kept.iter().enumerate() {
            data[u * t * c..(u + 1) * t * c].copy_from_slice(&vis[k * t * c..(k + 1) * t * c]);
        }
        for &u in &mask.masked {
            for lt in 0..t {
                data[(u * t + lt) * c..(u * t + lt + 1) * c].copy_from_slice(&tok);
            }
        }
    }
    let kept = mask.kept.clone();
    let masked = mask.masked.clone();
    Ok(Tensor::from_op(
        data,
        vec![units, t, c],
        vec![visible.clone(), mask_token.clone()],
        Box::new(move |g, _, parents| {
            let mut dvis = vec![E::zero(); kept.len() * t * c];
            for (k, &u) in kept.iter().enumerate() {
                dvis[k * t * c..(k + 1) * t * c].copy_from_slice(&g[u * t * c..(u + 1) * t * c]);
            }
            parents[0].accumulate_grad(&dvis);
            let mut dtok = vec![E::zero(); c];
            for &u in &masked {
                for lt in 0..t {
                    for j in 0..c {
                        dtok[j] = dtok[j] + g[(u * t + lt) * c + j];
                    }
                }
            }
            parents[1].accumulate_grad(&dtok);
        }),
    ))
}

/// Max-pools independently inside each kept mask unit with zero padding at
/// unit borders; units never exchange information (the separate-and-pad
/// baseline for overlapping kernels).
pub fn separate_and_pad_pool<E: Element>(
    grouped: &Tensor<E>,
    kernel: (usize, usize),
    stride: (usize, usize),
    padding: (usize, usize),
) -> Result<Tensor<E>> {
    let sh = grouped.shape().to_vec();
    if sh.len() != 4 {
        return Err(Error::Shape(format!(
            "separate_and_pad_pool expects [units, h, w, C], got {:?}",
            sh
        )));
    }
    grouped.max_pool2d(kernel, stride, padding)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn image_224_layout() {
        let l = build_layout(InputExtents::image(224, 224)).unwrap();
        assert_eq!(l.grid, [1, 56, 56]);
        assert_eq!(l.unit_grid(), [1, 7, 7]);
        assert_eq!(l.total_units(), 49);
        assert_eq!(l.tokens_per_unit_at(0), 64);
        assert_eq!(l.tokens_per_unit_at(3), 1);
        assert_eq!(l.patch_dim(), 48);
    }

    #[test]
    fn video_16x224_layout() {
        let l = build_layout(InputExtents::video(16, 224, 224)).unwrap();
        assert_eq!(l.grid, [8, 56, 56]);
        assert_eq!(l.unit_grid(), [8, 7, 7]);
        assert_eq!(l.total_units(), 392);
        assert_eq!(l.unit_tokens, [1, 8, 8]);
        assert_eq!(l.patch_dim(), 96);
    }

    #[test]
    fn layout_rejects_bad_extents() {
        assert!(build_layout(InputExtents::image(224, 100)).is_err());
        assert!(build_layout(InputExtents::image(100, 224)).is_err());
        assert!(build_layout(InputExtents::video(15, 224, 224)).is_err());
    }

    #[test]
    fn patchify_map_is_permutation_with_contiguous_rows() {
        let l = build_layout(InputExtents::image(64, 32)).unwrap();
        let map = l.patchify_map();
        let total = 64 * 32 * 3;
        assert_eq!(map.len(), total);
        let mut seen = vec![false; total];
        for &i in &map {
            assert!(!seen[i]);
            seen[i] = true;
        }
        // First token row covers the top-left 4x4 patch, channel-interleaved.
        assert_eq!(map[0], 0);
        assert_eq!(map[3], 3); // pixel (0,1), channel 0
        assert_eq!(map[12], 32 * 3); // pixel (1,0), channel 0
    }

    #[test]
    fn group_roundtrip_restores_raster_order() {
        let l = build_layout(InputExtents::image(64, 64)).unwrap();
        let n = l.total_tokens();
        let c = 3;
        let data: Vec<f64> = (0..n * c).map(|v| v as f64).collect();
        let x = Tensor::from_vec(data.clone(), &[n, c]).unwrap();
        let g = group_by_units(&x, &l, 0).unwrap();
        assert_eq!(g.shape(), &[4, 64, 3]);
        let back = ungroup_by_units(&g, &l, 0).unwrap();
        assert_eq!(back.to_vec(), data);
    }

    #[test]
    fn grouping_places_unit_local_rasters() {
        // 64x64 image: 16x16 token grid, 2x2 units of 8x8 tokens.
        let l = build_layout(InputExtents::image(64, 64)).unwrap();
        let n = l.total_tokens();
        let data: Vec<f64> = (0..n).map(|v| v as f64).collect();
        let x = Tensor::from_vec(data, &[n, 1]).unwrap();
        let g = group_by_units(&x, &l, 0).unwrap().to_vec();
        // Unit 0 local (0,0) is raster token 0; unit 1 local (0,0) is token 8.
        assert_eq!(g[0], 0.0);
        assert_eq!(g[64], 8.0);
        // Unit 0 local (1,0) is raster token 16 (second grid row).
        assert_eq!(g[8], 16.0);
    }

    #[test]
    fn sample_mask_counts_and_determinism() {
        let l = build_layout(InputExtents::image(224, 224)).unwrap();
        let m = sample_mask(&l, 0.6, 7).unwrap();
        assert_eq!(m.kept.len(), 19); // floor(49 * 0.4)
        assert_eq!(m.masked.len(), 30);
        let m2 = sample_mask(&l, 0.6, 7).unwrap();
        assert_eq!(m, m2);
        let m3 = sample_mask(&l, 0.6, 8).unwrap();
        assert_ne!(m.kept, m3.kept);
    }

    #[test]
    fn sample_mask_partitions_units() {
        for seed in 0..20 {
            let m = sample_mask_units(49, 0.75, seed).unwrap();
            let mut all: Vec<usize> = m.kept.iter().chain(&m.masked).copied().collect();
            all.sort_unstable();
            assert_eq!(all, (0..49).collect::<Vec<_>>());
            assert!(m.kept.windows(2).all(|w| w[0] < w[1]));
            assert!(m.masked.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn sample_mask_clamps_extremes() {
        let m = sample_mask_units(4, 0.999, 0).unwrap();
        assert_eq!(m.kept.len(), 1);
        let m = sample_mask_units(4, 0.001, 0).unwrap();
        assert_eq!(m.kept.len(), 3);
        assert!(sample_mask_units(4, 1.0, 0).is_err());
        assert!(sample_mask_units(4, 0.0, 0).is_err());
    }

    #[test]
    fn mask_record_round_trip() {
        let m = sample_mask_units(49, 0.6, 123).unwrap();
        let back = MaskSpec::from_record(&m.to_record()).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn sparse_delete_keeps_selected_rows() {
        let g = Tensor::from_vec((0..12).map(|v| v as f64).collect(), &[4, 3]).unwrap();
        let mask = MaskSpec {
            total_units: 4,
            kept: vec![0, 2],
            masked: vec![1, 3],
            seed: 0,
        };
        let v = sparse_delete(&g, &mask).unwrap();
        assert_eq!(v.shape(), &[2, 3]);
        assert_eq!(v.to_vec(), vec![0.0, 1.0, 2.0, 6.0, 7.0, 8.0]);
    }

    #[test]
    fn restore_fills_mask_tokens_and_routes_gradients() {
        let vis = Tensor::<f64>::param(vec![1.0, 2.0, 3.0, 4.0], &[2, 1, 2]).unwrap();
        let tok = Tensor::<f64>::param(vec![9.0, 8.0], &[2]).unwrap();
        let mask = MaskSpec {
            total_units: 3,
            kept: vec![0, 2],
            masked: vec![1],
            seed: 0,
        };
        let full = restore_with_mask_tokens(&vis, &mask, &tok).unwrap();
        assert_eq!(full.shape(), &[3, 1, 2]);
        assert_eq!(full.to_vec(), vec![1.0, 2.0, 9.0, 8.0, 3.0, 4.0]);
        full.mul(&full).unwrap().sum_all().backward().unwrap();
        assert_eq!(vis.grad().unwrap(), vec![2.0, 4.0, 6.0, 8.0]);
        assert_eq!(tok.grad().unwrap(), vec![18.0, 16.0]);
    }

    #[test]
    fn unit_pool_kernel_equals_stride_matches_dense_grid_pool() {
        // Pooling inside units with kernel == stride == 2 must equal pooling
        // the full raster grid and regrouping, since windows never straddle
        // unit borders.
        let l = build_layout(InputExtents::image(64, 64)).unwrap();
        let n = l.total_tokens();
        let data: Vec<f64> = (0..n).map(|v| ((v * 37) % 101) as f64).collect();
        let x = Tensor::from_vec(data.clone(), &[n, 1]).unwrap();

        let g = group_by_units(&x, &l, 0).unwrap();
        let g4 = g.reshape(&[4, 8, 8, 1]).unwrap();
        let pooled_units = separate_and_pad_pool(&g4, (2, 2), (2, 2), (0, 0)).unwrap();

        let dense = x.reshape(&[1, 16, 16, 1]).unwrap();
        let pooled_dense = dense.max_pool2d((2, 2), (2, 2), (0, 0)).unwrap();
        let flat = pooled_dense.reshape(&[64, 1]).unwrap();
        let regrouped = group_by_units(&flat, &l, 1).unwrap();

        assert_eq!(
            pooled_units.to_vec(),
            regrouped.to_vec(),
            "unit-local pooling differs from dense pooling"
        );
    }
}
