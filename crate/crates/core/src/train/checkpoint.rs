//! Checkpoints: a textual manifest (config hash, step, seed, tensor
//! name/shape table) followed by raw little-endian f32 blocks in manifest
//! order. Moment accumulators ride along as `name#m` / `name#v` entries.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Element;
use crate::train::optim::TrainState;

pub struct CheckpointData {
    pub config_hash: u64,
    pub step: usize,
    pub seed: u64,
    pub tensors: Vec<(String, Vec<usize>, Vec<f32>)>,
}

impl CheckpointData {
    pub fn get(&self, name: &str) -> Option<&(String, Vec<usize>, Vec<f32>)> {
        self.tensors.iter().find(|(n, _, _)| n == name)
    }
}

/// FNV-1a over a canonical debug rendering; used to tie checkpoints to the
/// config that produced them.
pub fn fingerprint(text: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in text.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

pub fn save_state<E: Element>(path: &Path, state: &TrainState<E>) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "ckpt 1")?;
    writeln!(w, "config {}", state.config_hash)?;
    writeln!(w, "step {}", state.step)?;
    writeln!(w, "seed {}", state.seed)?;
    writeln!(w, "blocks {}", state.n_blocks)?;
    writeln!(w, "tensors {}", state.entries.len() * 3)?;
    let shape_line = |name: &str, shape: &[usize]| {
        let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
        format!("{name} {}", dims.join(" "))
    };
    for (name, p, _) in &state.entries {
        writeln!(w, "{}", shape_line(name, p.shape()))?;
        writeln!(w, "{}", shape_line(&format!("{name}#m"), p.shape()))?;
        writeln!(w, "{}", shape_line(&format!("{name}#v"), p.shape()))?;
    }
    writeln!(w, "data")?;
    let write_block = |w: &mut BufWriter<std::fs::File>, vals: &[E]| -> Result<()> {
        for &v in vals {
            w.write_all(&(v.to_f64() as f32).to_le_bytes())?;
        }
        Ok(())
    };
    for (i, (_, p, _)) in state.entries.iter().enumerate() {
        write_block(&mut w, &p.data())?;
        write_block(&mut w, &state.m[i])?;
        write_block(&mut w, &state.v[i])?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_raw(path: &Path) -> Result<CheckpointData> {
    let file = std::fs::File::open(path).map_err(|e| {
        Error::Checkpoint(format!("cannot open {}: {e}", path.display()))
    })?;
    let mut r = BufReader::new(file);
    let mut header = String::new();
    // The manifest is line-oriented; read until the `data` marker.
    let mut byte = [0u8; 1];
    loop {
        r.read_exact(&mut byte)
            .map_err(|_| Error::Checkpoint("truncated manifest".into()))?;
        header.push(byte[0] as char);
        if header.ends_with("\ndata\n") {
            break;
        }
        if header.len() > 1 << 24 {
            return Err(Error::Checkpoint("manifest too large".into()));
        }
    }
    let mut lines = header.lines();
    let magic = lines.next().unwrap_or("");
    if magic != "ckpt 1" {
        return Err(Error::Checkpoint(format!("bad magic line {magic:?}")));
    }
    let mut config_hash = 0u64;
    let mut step = 0usize;
    let mut seed = 0u64;
    let mut count = None;
    let mut shapes: Vec<(String, Vec<usize>)> = Vec::new();
    for line in lines {
        if line == "data" {
            break;
        }
        let mut parts = line.split_whitespace();
        let key = parts.next().unwrap_or("");
        let rest: Vec<&str> = parts.collect();
        let num = |v: &[&str]| -> Result<u64> {
            v.first()
                .and_then(|p| p.parse().ok())
                .ok_or_else(|| Error::Checkpoint(format!("bad manifest line {line:?}")))
        };
        match key {
            "config" => config_hash = num(&rest)?,
            "step" => step = num(&rest)? as usize,
            "seed" => seed = num(&rest)?,
            "blocks" => {}
            "tensors" => count = Some(num(&rest)? as usize),
            name => {
                let shape: Vec<usize> = rest
                    .iter()
                    .map(|p| {
                        p.parse::<usize>().map_err(|_| {
                            Error::Checkpoint(format!("bad extent {p:?} for {name}"))
                        })
                    })
                    .collect::<Result<_>>()?;
                shapes.push((name.to_string(), shape));
            }
        }
    }
    if let Some(c) = count {
        if c != shapes.len() {
            return Err(Error::Checkpoint(format!(
                "manifest lists {c} tensors, found {}",
                shapes.len()
            )));
        }
    }
    let mut tensors = Vec::with_capacity(shapes.len());
    for (name, shape) in shapes {
        let n: usize = shape.iter().product();
        let mut buf = vec![0u8; n * 4];
        r.read_exact(&mut buf)
            .map_err(|_| Error::Checkpoint(format!("truncated data for {name}")))?;
        let vals: Vec<f32> = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.push((name, shape, vals));
    }
    Ok(CheckpointData { config_hash, step, seed, tensors })
}

impl<E: Element> TrainState<E> {
    /// Restores parameters, moments, and counters from a checkpoint. Fails
    /// listing every missing or shape-mismatched tensor.
    pub fn restore(&mut self, ck: &CheckpointData) -> Result<()> {
        if ck.config_hash != self.config_hash {
            return Err(Error::Checkpoint(format!(
                "config hash {} does not match checkpoint {}",
                self.config_hash, ck.config_hash
            )));
        }
        let mut problems = Vec::new();
        for (name, p, _) in &self.entries {
            for suffix in ["", "#m", "#v"] {
                let full = format!("{name}{suffix}");
                match ck.get(&full) {
                    Some((_, shape, _)) if shape == p.shape() => {}
                    Some((_, shape, _)) => {
                        problems.push(format!("{full}: shape {shape:?} vs {:?}", p.shape()))
                    }
                    None => problems.push(format!("{full}: missing")),
                }
            }
        }
        if !problems.is_empty() {
            return Err(Error::Checkpoint(format!(
                "checkpoint mismatch: {}",
                problems.join("; ")
            )));
        }
        for (i, (name, p, _)) in self.entries.iter().enumerate() {
            let to_e = |vals: &[f32]| vals.iter().map(|&v| E::from_f64(v as f64)).collect();
            p.set_data(to_e(&ck.get(name).unwrap().2))?;
            self.m[i] = to_e(&ck.get(&format!("{name}#m")).unwrap().2);
            self.v[i] = to_e(&ck.get(&format!("{name}#v")).unwrap().2);
        }
        self.step = ck.step;
        self.seed = ck.seed;
        Ok(())
    }
}

/// Report from mapping a pretraining checkpoint onto a bare encoder.
pub struct LoadReport {
    pub loaded: Vec<String>,
    pub dropped: Vec<String>,
}

/// Copies `enc.*` weights from a pretraining checkpoint into encoder
/// parameters by name, skipping the classification head (kept fresh) and all
/// decoder weights. Moment entries are ignored.
pub fn load_encoder_weights<E: Element>(
    encoder: &crate::model::Hiera<E>,
    ck: &CheckpointData,
) -> Result<LoadReport> {
    let mut loaded = Vec::new();
    let mut dropped = Vec::new();
    let mut problems = Vec::new();
    for (name, shape, vals) in &ck.tensors {
        if name.contains('#') {
            continue;
        }
        let target = match name.strip_prefix("enc.") {
            Some(rest) if !rest.starts_with("head") => rest,
            _ => {
                dropped.push(name.clone());
                continue;
            }
        };
        match encoder.params.get(target) {
            Some(p) if p.shape() == shape.as_slice() => {
                p.set_data(vals.iter().map(|&v| E::from_f64(v as f64)).collect())?;
                loaded.push(name.clone());
            }
            Some(p) => problems.push(format!(
                "{name}: shape {shape:?} vs {:?}",
                p.shape()
            )),
            None => problems.push(format!("{name}: no matching encoder parameter")),
        }
    }
    if !problems.is_empty() {
        return Err(Error::Checkpoint(format!(
            "encoder load mismatch: {}",
            problems.join("; ")
        )));
    }
    Ok(LoadReport { loaded, dropped })
}
