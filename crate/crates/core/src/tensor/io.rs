//! Tensor serialization: a text header with the shape as decimal integers,
//! followed by raw little-endian 32-bit floats in row-major order.

use std::io::{Read, Write};

use super::{Element, Tensor};
use crate::error::{Error, Result};

pub fn write_tensor<E: Element, W: Write>(w: &mut W, t: &Tensor<E>) -> Result<()> {
    let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
    writeln!(w, "tensor {}", dims.join(" "))?;
    for &v in t.data().iter() {
        w.write_all(&(v.to_f64() as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor<E: Element, R: Read>(r: &mut R) -> Result<Tensor<E>> {
    // Header line up to '\n'.
    let mut line = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        r.read_exact(&mut byte)?;
        if byte[0] == b'\n' {
            break;
        }
        line.push(byte[0]);
        if line.len() > 4096 {
            return Err(Error::Checkpoint("tensor header too long".into()));
        }
    }
    let line = String::from_utf8(line)
        .map_err(|_| Error::Checkpoint("tensor header is not UTF-8".into()))?;
    let mut parts = line.split_whitespace();
    if parts.next() != Some("tensor") {
        return Err(Error::Checkpoint(format!("bad tensor header: {line:?}")));
    }
    let shape: Vec<usize> = parts
        .map(|p| {
            p.parse::<usize>()
                .map_err(|_| Error::Checkpoint(format!("bad extent {p:?}")))
        })
        .collect::<Result<_>>()?;
    let n: usize = shape.iter().product();
    let mut buf = vec![0u8; n * 4];
    r.read_exact(&mut buf)?;
    let data: Vec<E> = buf
        .chunks_exact(4)
        .map(|c| E::from_f64(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
        .collect();
    Tensor::from_vec(data, &shape)
}
