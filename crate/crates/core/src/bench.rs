//! Forward-only throughput microbenchmark: at least two warmup passes, at
//! least five timed repetitions, median-of-reps throughput, with recorded
//! environment metadata. Absolute numbers are machine-bound; only relative
//! orderings are meaningful.

use std::time::Instant;

use crate::error::{Error, Result};
use crate::layout::sample_mask;
use crate::model::{Hiera, HieraConfig};
use crate::train::synthetic_dataset;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BenchMode {
    Dense,
    /// Masked forward deleting roughly this fraction of units.
    Sparse(f64),
}

impl BenchMode {
    pub fn parse(s: &str) -> Result<BenchMode> {
        if s == "dense" {
            return Ok(BenchMode::Dense);
        }
        if let Some(r) = s.strip_prefix("sparse:") {
            let ratio: f64 = r
                .parse()
                .map_err(|_| Error::Config(format!("bad sparse ratio {r:?}")))?;
            return Ok(BenchMode::Sparse(ratio));
        }
        Err(Error::Config(format!(
            "bench mode {s:?}; valid: dense, sparse:RATIO"
        )))
    }
}

#[derive(Debug, Clone)]
pub struct BenchResult {
    pub id: String,
    pub batch: usize,
    /// Items per second of the median repetition.
    pub throughput: f64,
    /// Wall-clock seconds of every timed repetition.
    pub rep_seconds: Vec<f64>,
    pub warmups: usize,
    pub env: Vec<(String, String)>,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    xs[xs.len() / 2]
}

pub fn bench_throughput(
    cfg: &HieraConfig,
    mode: BenchMode,
    batch: usize,
    warmups: usize,
    reps: usize,
    seed: u64,
) -> Result<BenchResult> {
    let warmups = warmups.max(2);
    let reps = reps.max(5);
    let mut cfg = cfg.clone();
    if let BenchMode::Sparse(r) = mode {
        if !(r > 0.0 && r < 1.0) {
            return Err(Error::Config(format!("sparse ratio {r} not in (0, 1)")));
        }
        cfg.pretrain_mode = true;
    }
    let model: Hiera<f32> = Hiera::build(cfg.clone(), seed)?;
    let data = synthetic_dataset(cfg.input, batch, 2, seed);

    let run_once = |rep: u64| -> Result<()> {
        for (i, sample) in data.iter().enumerate() {
            let mask = match mode {
                BenchMode::Dense => None,
                BenchMode::Sparse(r) => Some(sample_mask(
                    &model.layout,
                    r,
                    seed ^ (rep * 1000 + i as u64),
                )?),
            };
            let feats = model.forward_encoder(&sample.pixels, mask.as_ref(), None)?;
            // Touch the output so the forward cannot be elided.
            if !feats.last().is_finite() {
                return Err(Error::NonFinite("benchmark forward".into()));
            }
        }
        Ok(())
    };

    for w in 0..warmups {
        run_once(w as u64)?;
    }
    let mut rep_seconds = Vec::with_capacity(reps);
    for rep in 0..reps {
        let t0 = Instant::now();
        run_once((warmups + rep) as u64)?;
        rep_seconds.push(t0.elapsed().as_secs_f64());
    }
    let med = median(rep_seconds.clone());
    let mode_id = match mode {
        BenchMode::Dense => "dense".to_string(),
        BenchMode::Sparse(r) => format!("sparse:{r}"),
    };
    Ok(BenchResult {
        id: format!(
            "{:?}/{:?}/{mode_id}",
            cfg.channels, cfg.ladder
        ),
        batch,
        throughput: batch as f64 / med,
        rep_seconds,
        warmups,
        env: vec![
            ("os".into(), std::env::consts::OS.into()),
            ("arch".into(), std::env::consts::ARCH.into()),
            ("threads".into(), "1".into()),
        ],
    })
}
