//! Named parameter registry with optimizer metadata and init helpers.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamMeta {
    /// Excluded from weight decay (norm scales, biases, embeddings, tokens).
    pub no_decay: bool,
    /// Position for layer-wise lr decay: 0 = stem, rising through the
    /// blocks; the head sits past the last block.
    pub depth: usize,
}

pub struct ParamStore<E: Element> {
    entries: Vec<(String, Tensor<E>, ParamMeta)>,
    index: HashMap<String, usize>,
}

impl<E: Element> Default for ParamStore<E> {
    fn default() -> Self {
        ParamStore { entries: Vec::new(), index: HashMap::new() }
    }
}

impl<E: Element> ParamStore<E> {
    pub fn add(&mut self, name: &str, t: Tensor<E>, meta: ParamMeta) -> Tensor<E> {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        assert!(t.requires_grad(), "parameter {name} must be a leaf");
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push((name.to_string(), t.clone(), meta));
        t
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<E>> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn meta(&self, name: &str) -> Option<ParamMeta> {
        self.index.get(name).map(|&i| self.entries[i].2)
    }

    /// Entries in registration order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<E>, ParamMeta)> {
        self.entries.iter().map(|(n, t, m)| (n.as_str(), t, *m))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_params(&self) -> usize {
        self.entries.iter().map(|(_, t, _)| t.numel()).sum()
    }

    pub fn max_depth(&self) -> usize {
        self.entries.iter().map(|(_, _, m)| m.depth).max().unwrap_or(0)
    }

    pub fn zero_grads(&self) {
        for (_, t, _) in &self.entries {
            t.zero_grad();
        }
    }

    /// Overwrites a parameter's data from another store by name.
    pub fn copy_from(&self, other: &ParamStore<E>, name: &str) -> Result<()> {
        let src = other
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
        let dst = self
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
        if src.shape() != dst.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter {name}: shape {:?} vs {:?}",
                src.shape(),
                dst.shape()
            )));
        }
        dst.set_data(src.to_vec())
    }
}

/// Truncated normal sample: std-scaled, resampled until |z| <= 2.
pub fn trunc_normal<E: Element>(rng: &mut ChaCha8Rng, std: f64) -> E {
    loop {
        // Box-Muller; only one of the pair is used to keep the stream simple.
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        if z.abs() <= 2.0 {
            return E::from_f64(z * std);
        }
    }
}

pub fn trunc_normal_vec<E: Element>(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<E> {
    (0..n).map(|_| trunc_normal(rng, std)).collect()
}

/// Linear layer x[..., in] -> x[..., out]; weight stored input-major.
pub struct Linear<E: Element> {
    pub w: Tensor<E>,
    pub b: Tensor<E>,
}

impl<E: Element> Linear<E> {
    pub fn apply(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        x.matmul(&self.w)?.add_bias(&self.b)
    }
}

/// Layer norm affine pair over the last axis.
pub struct Norm<E: Element> {
    pub g: Tensor<E>,
    pub b: Tensor<E>,
    pub eps: f64,
}

impl<E: Element> Norm<E> {
    pub fn apply(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        x.layer_norm(&self.g, &self.b, self.eps)
    }
}

/// Registers parameters with consistent naming and init while building a
/// model.
pub struct Builder<'a, E: Element> {
    pub store: &'a mut ParamStore<E>,
    pub rng: ChaCha8Rng,
}

impl<'a, E: Element> Builder<'a, E> {
    pub fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, depth: usize) -> Linear<E> {
        // Fan-in scaling keeps activations and gradients usable across the
        // whole width range, including the very narrow test configs.
        let std = 1.0 / (fan_in as f64).sqrt();
        let w = Tensor::param(
            trunc_normal_vec(&mut self.rng, fan_in * fan_out, std),
            &[fan_in, fan_out],
        )
        .unwrap();
        let b = Tensor::param(vec![E::zero(); fan_out], &[fan_out]).unwrap();
        Linear {
            w: self.store.add(
                &format!("{name}.w"),
                w,
                ParamMeta { no_decay: false, depth },
            ),
            b: self.store.add(
                &format!("{name}.b"),
                b,
                ParamMeta { no_decay: true, depth },
            ),
        }
    }

    /// Linear with zero weights (classifier head init).
    pub fn linear_zero(&mut self, name: &str, fan_in: usize, fan_out: usize, depth: usize) -> Linear<E> {
        let w = Tensor::param(vec![E::zero(); fan_in * fan_out], &[fan_in, fan_out]).unwrap();
        let b = Tensor::param(vec![E::zero(); fan_out], &[fan_out]).unwrap();
        Linear {
            w: self.store.add(
                &format!("{name}.w"),
                w,
                ParamMeta { no_decay: false, depth },
            ),
            b: self.store.add(
                &format!("{name}.b"),
                b,
                ParamMeta { no_decay: true, depth },
            ),
        }
    }

    pub fn norm(&mut self, name: &str, dim: usize, eps: f64, depth: usize) -> Norm<E> {
        let g = Tensor::param(vec![E::one(); dim], &[dim]).unwrap();
        let b = Tensor::param(vec![E::zero(); dim], &[dim]).unwrap();
        Norm {
            g: self.store.add(
                &format!("{name}.g"),
                g,
                ParamMeta { no_decay: true, depth },
            ),
            b: self.store.add(
                &format!("{name}.b"),
                b,
                ParamMeta { no_decay: true, depth },
            ),
            eps,
        }
    }

    /// Learned embedding table, trunc-normal init, no weight decay.
    pub fn embedding(&mut self, name: &str, shape: &[usize], depth: usize) -> Tensor<E> {
        let t = Tensor::param(
            trunc_normal_vec(&mut self.rng, shape.iter().product(), 0.02),
            shape,
        )
        .unwrap();
        self.store.add(name, t, ParamMeta { no_decay: true, depth })
    }
}
