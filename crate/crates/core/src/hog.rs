//! Histogram-of-oriented-gradients descriptors used as reconstruction
//! targets: 8x8 cells, 9 unsigned orientation bins over [0, 180), [-1, 0, 1]
//! gradient filters on channel-mean grayscale, bilinear orientation binning,
//! and per-token L2 normalization.

pub const CELL_PX: usize = 8;
pub const BINS: usize = 9;
const EPS: f64 = 1e-6;

/// Channel-mean grayscale of one [H, W, 3] frame stored row-major.
pub fn grayscale(frame: &[f64], h: usize, w: usize) -> Vec<f64> {
    assert_eq!(frame.len(), h * w * 3);
    frame
        .chunks_exact(3)
        .map(|px| (px[0] + px[1] + px[2]) / 3.0)
        .collect()
}

/// Per-cell unnormalized histograms of one grayscale frame:
/// [cells_y, cells_x, BINS] row-major. Gradients use [-1, 0, 1] filters with
/// replicated borders; magnitude votes split bilinearly between the two
/// nearest orientation-bin centers.
pub fn cell_histograms(gray: &[f64], h: usize, w: usize) -> Vec<f64> {
    assert_eq!(gray.len(), h * w);
    assert_eq!(h % CELL_PX, 0);
    assert_eq!(w % CELL_PX, 0);
    let (cy, cx) = (h / CELL_PX, w / CELL_PX);
    let mut hist = vec![0.0f64; cy * cx * BINS];
    let at = |y: usize, x: usize| gray[y * w + x];
    for y in 0..h {
        for x in 0..w {
            let gx = at(y, (x + 1).min(w - 1)) - at(y, x.saturating_sub(1));
            let gy = at((y + 1).min(h - 1), x) - at(y.saturating_sub(1), x);
            let mag = (gx * gx + gy * gy).sqrt();
            if mag == 0.0 {
                continue;
            }
            let mut deg = gy.atan2(gx).to_degrees();
            if deg < 0.0 {
                deg += 180.0;
            }
            if deg >= 180.0 {
                deg -= 180.0;
            }
            // Bin centers at 10, 30, ..., 170 degrees.
            let pos = deg / 20.0 - 0.5;
            let i0 = pos.floor();
            let frac = pos - i0;
            let b0 = i0.rem_euclid(BINS as f64) as usize;
            let b1 = (b0 + 1) % BINS;
            let cell = (y / CELL_PX) * cx + x / CELL_PX;
            hist[cell * BINS + b0] += mag * (1.0 - frac);
            hist[cell * BINS + b1] += mag * frac;
        }
    }
    hist
}

/// L2-normalizes a block of histogram values in place.
pub fn l2_normalize(block: &mut [f64]) {
    let sumsq: f64 = block.iter().map(|v| v * v).sum();
    let denom = (sumsq + EPS * EPS).sqrt();
    for v in block.iter_mut() {
        *v /= denom;
    }
}

/// Descriptor rows for square tokens of `token_px` pixels tiling one frame:
/// [tokens, cells_per_token * BINS] in raster token order, each token's cell
/// block L2-normalized.
pub fn frame_descriptor_rows(
    frame: &[f64],
    h: usize,
    w: usize,
    token_px: usize,
) -> Vec<Vec<f64>> {
    assert_eq!(token_px % CELL_PX, 0);
    let gray = grayscale(frame, h, w);
    let hist = cell_histograms(&gray, h, w);
    let cx = w / CELL_PX;
    let cpt = token_px / CELL_PX; // cells per token per axis
    let (ty, tx) = (h / token_px, w / token_px);
    let mut rows = Vec::with_capacity(ty * tx);
    for y in 0..ty {
        for x in 0..tx {
            let mut row = Vec::with_capacity(cpt * cpt * BINS);
            for dy in 0..cpt {
                for dx in 0..cpt {
                    let cell = (y * cpt + dy) * cx + (x * cpt + dx);
                    row.extend_from_slice(&hist[cell * BINS..(cell + 1) * BINS]);
                }
            }
            l2_normalize(&mut row);
            rows.push(row);
        }
    }
    rows
}
