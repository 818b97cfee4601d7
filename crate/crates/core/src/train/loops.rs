//! Training loops: masked-autoencoder pretraining, supervised training
//! (finetune or from scratch), evaluation, and trace output.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layout::sample_mask;
use crate::mae::{make_target, mae_loss, MaePretrainer};
use crate::model::Hiera;
use crate::train::checkpoint::{load_encoder_weights, save_state, CheckpointData, LoadReport};
use crate::train::data::Sample;
use crate::train::optim::TrainState;

#[derive(Debug, Clone)]
pub struct LoopOptions {
    pub epochs: usize,
    pub batch: usize,
    pub label_smoothing: f64,
    pub checkpoint: Option<PathBuf>,
    /// Print a progress line every this many steps; 0 silences.
    pub log_every: usize,
}

impl Default for LoopOptions {
    fn default() -> Self {
        LoopOptions {
            epochs: 1,
            batch: 1,
            label_smoothing: 0.1,
            checkpoint: None,
            log_every: 0,
        }
    }
}

fn mask_seed(base: u64, sample_counter: u64) -> u64 {
    base ^ sample_counter.wrapping_mul(0x9E3779B97F4A7C15)
}

fn steps_per_epoch(n: usize, batch: usize) -> usize {
    n.div_ceil(batch)
}

/// Sparse-MAE pretraining. Returns the per-step loss trace (step, loss).
/// On a non-finite loss or gradient the loop halts with an error; the last
/// epoch's checkpoint (if any) is left in place.
pub fn pretrain_loop(
    mae: &MaePretrainer<f32>,
    data: &[Sample],
    state: &mut TrainState<f32>,
    opts: &LoopOptions,
) -> Result<Vec<(usize, f64)>> {
    if data.is_empty() {
        return Err(Error::Config("pretraining needs at least one sample".into()));
    }
    let ratio = mae.decoder.config.mask_ratio;
    let layout = &mae.encoder.layout;
    let spe = steps_per_epoch(data.len(), opts.batch);
    let mut trace = Vec::new();
    for _epoch in 0..opts.epochs {
        for _ in 0..spe {
            let step = state.step as u64;
            let mut rng = ChaCha8Rng::seed_from_u64(state.seed ^ step.wrapping_mul(0x2545F4914F6CDD1D));
            let mut mean_loss = 0.0f64;
            for k in 0..opts.batch {
                let counter = step * opts.batch as u64 + k as u64;
                let sample = &data[(counter as usize) % data.len()];
                let mask = sample_mask(layout, ratio, mask_seed(state.seed, counter))?;
                let feats = mae
                    .encoder
                    .forward_encoder(&sample.pixels, Some(&mask), Some(&mut rng))?;
                let pred = mae.decoder.forward(&feats)?;
                let target = make_target(
                    mae.decoder.config.target_kind,
                    &sample.pixels,
                    layout,
                    &mae.decoder.geom,
                )?;
                let loss = mae_loss(&pred, &target, &mask)?;
                let v = loss.to_vec()[0] as f64;
                if !v.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "loss {v} at step {}; last-good checkpoint retained",
                        state.step
                    )));
                }
                mean_loss += v / opts.batch as f64;
                loss.scale(1.0 / opts.batch as f64).backward()?;
            }
            state.adamw_step()?;
            trace.push((state.step, mean_loss));
            if opts.log_every > 0 && state.step % opts.log_every == 0 {
                println!("step {} loss {mean_loss:.6}", state.step);
            }
        }
        if let Some(path) = &opts.checkpoint {
            save_state(path, state)?;
        }
    }
    Ok(trace)
}

pub struct SupervisedTrace {
    /// Per optimization step: (step, mean batch loss).
    pub loss: Vec<(usize, f64)>,
    /// Per epoch: (step, training accuracy over the epoch).
    pub accuracy: Vec<(usize, f64)>,
}

/// Supervised training with smoothed cross entropy; used for finetuning and
/// from-scratch runs alike.
pub fn supervised_loop(
    model: &Hiera<f32>,
    data: &[Sample],
    state: &mut TrainState<f32>,
    opts: &LoopOptions,
) -> Result<SupervisedTrace> {
    if data.is_empty() {
        return Err(Error::Config("training needs at least one sample".into()));
    }
    let spe = steps_per_epoch(data.len(), opts.batch);
    let mut trace = SupervisedTrace { loss: Vec::new(), accuracy: Vec::new() };
    for _epoch in 0..opts.epochs {
        let mut correct = 0usize;
        let mut seen = 0usize;
        for _ in 0..spe {
            let step = state.step as u64;
            let mut rng = ChaCha8Rng::seed_from_u64(state.seed ^ step.wrapping_mul(0x2545F4914F6CDD1D));
            let mut mean_loss = 0.0f64;
            for k in 0..opts.batch {
                let counter = step * opts.batch as u64 + k as u64;
                let sample = &data[(counter as usize) % data.len()];
                let feats = model.forward_encoder(&sample.pixels, None, Some(&mut rng))?;
                let logits = model.classifier_head(&feats)?;
                if argmax(&logits.to_vec()) == sample.label {
                    correct += 1;
                }
                seen += 1;
                let loss = logits.cross_entropy_smoothed(sample.label, opts.label_smoothing)?;
                let v = loss.to_vec()[0] as f64;
                if !v.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "loss {v} at step {}; last-good checkpoint retained",
                        state.step
                    )));
                }
                mean_loss += v / opts.batch as f64;
                loss.scale(1.0 / opts.batch as f64).backward()?;
            }
            state.adamw_step()?;
            trace.loss.push((state.step, mean_loss));
            if opts.log_every > 0 && state.step % opts.log_every == 0 {
                println!("step {} loss {mean_loss:.6}", state.step);
            }
        }
        trace.accuracy.push((state.step, correct as f64 / seen as f64));
        if let Some(path) = &opts.checkpoint {
            save_state(path, state)?;
        }
    }
    Ok(trace)
}

/// Loads pretrained encoder weights, then trains supervised.
pub fn finetune_loop(
    model: &Hiera<f32>,
    pretrained: &CheckpointData,
    data: &[Sample],
    state: &mut TrainState<f32>,
    opts: &LoopOptions,
) -> Result<(LoadReport, SupervisedTrace)> {
    let report = load_encoder_weights(model, pretrained)?;
    let trace = supervised_loop(model, data, state, opts)?;
    Ok((report, trace))
}

/// Top-1 accuracy of the dense classifier over a dataset.
pub fn evaluate(model: &Hiera<f32>, data: &[Sample]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Config("evaluation needs at least one sample".into()));
    }
    let mut correct = 0usize;
    for sample in data {
        let feats = model.forward_encoder(&sample.pixels, None, None)?;
        let logits = model.classifier_head(&feats)?;
        if argmax(&logits.to_vec()) == sample.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

pub fn argmax(v: &[f32]) -> usize {
    v.iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap_or(std::cmp::Ordering::Equal))
        .map(|(i, _)| i)
        .unwrap_or(0)
}

/// Comma-separated (step, value) rows.
pub fn write_trace(path: &Path, rows: &[(usize, f64)]) -> Result<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "step,value")?;
    for (s, v) in rows {
        writeln!(f, "{s},{v}")?;
    }
    Ok(())
}

/// Reconstruction of one sample as input / masked-input / prediction rows,
/// written as a portable pixel map for qualitative inspection. Only pixel
/// targets can be visualized directly.
pub fn dump_reconstruction(
    mae: &MaePretrainer<f32>,
    sample: &Sample,
    mask_seed_val: u64,
    path: &Path,
) -> Result<()> {
    use crate::mae::TargetKind;
    if mae.decoder.config.target_kind != TargetKind::PixelNorm {
        return Err(Error::Config(
            "reconstruction dumps require pixel targets".into(),
        ));
    }
    let layout = &mae.encoder.layout;
    if layout.temporal {
        return Err(Error::Config(
            "reconstruction dumps are image-only".into(),
        ));
    }
    let (h, w) = (layout.input.height, layout.input.width);
    let mask = sample_mask(layout, mae.decoder.config.mask_ratio, mask_seed_val)?;
    let feats = mae.encoder.forward_encoder(&sample.pixels, Some(&mask), None)?;
    let pred = mae.decoder.forward(&feats)?;

    let geom = &mae.decoder.geom;
    let tp = geom.token_px;
    let tx = w / tp;
    let input = sample.pixels.to_vec();
    let mut masked_img = input.clone();
    let mut recon = input.clone();
    // Unit footprint in pixels for the masked view.
    let unit_px = layout.unit_tokens[1] * layout.pixel_patch[1];
    let units_x = w / unit_px;
    for &u in &mask.masked {
        let (uy, ux) = (u / units_x, u % units_x);
        for y in uy * unit_px..(uy + 1) * unit_px {
            for x in ux * unit_px..(ux + 1) * unit_px {
                for c in 0..3 {
                    masked_img[(y * w + x) * 3 + c] = 0.5;
                }
            }
        }
    }
    // Paint predictions back, un-normalizing with each patch's own stats.
    let pv = pred.to_vec();
    let map = layout.group_token_map(geom.stage);
    let t4 = layout.tokens_per_unit_at(geom.stage);
    let p_dim = tp * tp * 3;
    for (grouped_idx, &raster) in map.iter().enumerate() {
        let u = grouped_idx / t4;
        if !mask.masked.contains(&u) {
            continue;
        }
        let (ty, txi) = (raster / tx, raster % tx);
        // Patch statistics from the original pixels.
        let mut vals = Vec::with_capacity(p_dim);
        for py in 0..tp {
            for px in 0..tp {
                let base = ((ty * tp + py) * w + txi * tp + px) * 3;
                vals.extend_from_slice(&input[base..base + 3]);
            }
        }
        let n = vals.len() as f32;
        let mean = vals.iter().sum::<f32>() / n;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n;
        let sd = (var + 1e-6).sqrt();
        for py in 0..tp {
            for px in 0..tp {
                for c in 0..3 {
                    let src = pv[grouped_idx * p_dim + (py * tp + px) * 3 + c];
                    let base = ((ty * tp + py) * w + txi * tp + px) * 3 + c;
                    recon[base] = (src * sd + mean).clamp(0.0, 1.0);
                }
            }
        }
    }

    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "P6\n{} {}\n255", w, 3 * h)?;
    for img in [&input, &masked_img, &recon] {
        for v in img.iter() {
            f.write_all(&[(v * 255.0).round().clamp(0.0, 255.0) as u8])?;
        }
    }
    Ok(())
}
