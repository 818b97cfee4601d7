//! Built-in synthetic dataset of structured textures: class-dependent
//! oriented gratings with random phase and mild noise, so tiny models can
//! overfit or classify at desk scale. Also loads user-supplied image
//! directories.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layout::InputExtents;
use crate::tensor::Tensor;

#[derive(Clone)]
pub struct Sample {
    /// Flat [frames * H * W * 3] pixel values in [0, 1].
    pub pixels: Tensor<f32>,
    pub label: usize,
}

pub fn synthetic_dataset(
    input: InputExtents,
    n: usize,
    classes: usize,
    seed: u64,
) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frames = input.frames.unwrap_or(1);
    let (h, w) = (input.height, input.width);
    (0..n)
        .map(|i| {
            let label = i % classes;
            let theta = std::f64::consts::PI * label as f64 / classes as f64;
            let freq = 0.12 + 0.04 * (label % 3) as f64;
            let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let drift: f64 = rng.gen_range(-0.3..0.3);
            let (cs, sn) = (theta.cos(), theta.sin());
            let mut data = Vec::with_capacity(frames * h * w * 3);
            for f in 0..frames {
                let ph = phase + drift * f as f64;
                for y in 0..h {
                    for x in 0..w {
                        let u = freq * (x as f64 * cs + y as f64 * sn);
                        let base = (std::f64::consts::TAU * u + ph).sin();
                        for c in 0..3 {
                            let shift = 0.35 * c as f64;
                            let noise: f64 = rng.gen_range(-0.02..0.02);
                            let v = 0.5 + 0.4 * (base * (1.0 - 0.1 * c as f64) + shift * 0.1)
                                + noise;
                            data.push(v.clamp(0.0, 1.0) as f32);
                        }
                    }
                }
            }
            Sample {
                pixels: Tensor::from_vec(data, &[frames * h * w * 3]).unwrap(),
                label,
            }
        })
        .collect()
}

/// Loads every `.png`/`.jpg` in a directory as one sample (label 0),
/// resized by center-crop-free nearest sampling to the target extents.
pub fn load_image_dir(dir: &Path, input: InputExtents) -> Result<Vec<Sample>> {
    if input.frames.is_some() {
        return Err(Error::Config(
            "image directories are only supported for image inputs".into(),
        ));
    }
    let (h, w) = (input.height, input.width);
    let mut names: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()),
                Some("png") | Some("jpg") | Some("jpeg")
            )
        })
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::Config(format!(
            "no .png/.jpg files in {}",
            dir.display()
        )));
    }
    let mut out = Vec::with_capacity(names.len());
    for path in names {
        let img = image::open(&path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
            .to_rgb8();
        let (iw, ih) = img.dimensions();
        let mut data = Vec::with_capacity(h * w * 3);
        for y in 0..h {
            for x in 0..w {
                let sy = (y as u32 * ih / h as u32).min(ih - 1);
                let sx = (x as u32 * iw / w as u32).min(iw - 1);
                let px = img.get_pixel(sx, sy);
                for c in 0..3 {
                    data.push(px[c] as f32 / 255.0);
                }
            }
        }
        out.push(Sample {
            pixels: Tensor::from_vec(data, &[h * w * 3]).unwrap(),
            label: 0,
        });
    }
    Ok(out)
}
