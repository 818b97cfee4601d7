//! Forward operations and their gradient rules.

use std::rc::Rc;

use super::{numel_of, Element, Tensor};
use crate::error::{Error, Result};

/// Raw 2-d matrix product: a[m,k] * b[k,n] -> out[m,n], accumulated into `out`.
pub(crate) fn matmul_raw<E: Element>(a: &[E], b: &[E], out: &mut [E], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
}

fn transpose_raw<E: Element>(x: &[E], rows: usize, cols: usize) -> Vec<E> {
    let mut out = vec![E::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

fn tanh_gelu<E: Element>(x: E) -> E {
    // 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
    let c = E::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let k = E::from_f64(0.044715);
    let half = E::from_f64(0.5);
    half * x * (E::one() + (c * (x + k * x * x * x)).tanh())
}

fn tanh_gelu_grad<E: Element>(x: E) -> E {
    let c = E::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let k = E::from_f64(0.044715);
    let half = E::from_f64(0.5);
    let three = E::from_f64(3.0);
    let inner = c * (x + k * x * x * x);
    let t = inner.tanh();
    let sech2 = E::one() - t * t;
    let dinner = c * (E::one() + three * k * x * x);
    half * (E::one() + t) + half * x * sech2 * dinner
}

impl<E: Element> Tensor<E> {
    fn check_same_shape(&self, other: &Tensor<E>, op: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "{op}: shapes {:?} and {:?} differ",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        self.check_same_shape(other, "add")?;
        let data: Vec<E> = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(&a, &b)| a + b)
            .collect();
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone(), other.clone()],
            Box::new(|g, _, parents| {
                parents[0].accumulate_grad(g);
                parents[1].accumulate_grad(g);
            }),
        ))
    }

    pub fn sub(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        self.check_same_shape(other, "sub")?;
        let data: Vec<E> = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(&a, &b)| a - b)
            .collect();
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone(), other.clone()],
            Box::new(|g, _, parents| {
                parents[0].accumulate_grad(g);
                let neg: Vec<E> = g.iter().map(|&v| -v).collect();
                parents[1].accumulate_grad(&neg);
            }),
        ))
    }

    pub fn mul(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        self.check_same_shape(other, "mul")?;
        let data: Vec<E> = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(&a, &b)| a * b)
            .collect();
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone(), other.clone()],
            Box::new(|g, _, parents| {
                let a = parents[0].to_vec();
                let b = parents[1].to_vec();
                let da: Vec<E> = g.iter().zip(&b).map(|(&gv, &bv)| gv * bv).collect();
                let db: Vec<E> = g.iter().zip(&a).map(|(&gv, &av)| gv * av).collect();
                parents[0].accumulate_grad(&da);
                parents[1].accumulate_grad(&db);
            }),
        ))
    }

    pub fn scale(&self, c: f64) -> Tensor<E> {
        let ce = E::from_f64(c);
        let data: Vec<E> = self.data().iter().map(|&v| v * ce).collect();
        Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |g, _, parents| {
                let dg: Vec<E> = g.iter().map(|&v| v * ce).collect();
                parents[0].accumulate_grad(&dg);
            }),
        )
    }

    /// self [..., C] + bias [C], broadcast over leading axes.
    pub fn add_bias(&self, bias: &Tensor<E>) -> Result<Tensor<E>> {
        let c = *self.shape().last().ok_or_else(|| {
            Error::Shape("add_bias on 0-d tensor".into())
        })?;
        if bias.shape() != [c] {
            return Err(Error::Shape(format!(
                "add_bias: bias shape {:?} vs last axis {c}",
                bias.shape()
            )));
        }
        let b = bias.to_vec();
        let data: Vec<E> = self
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b[i % c])
            .collect();
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone(), bias.clone()],
            Box::new(move |g, _, parents| {
                parents[0].accumulate_grad(g);
                let mut db = vec![E::zero(); c];
                for (i, &gv) in g.iter().enumerate() {
                    db[i % c] = db[i % c] + gv;
                }
                parents[1].accumulate_grad(&db);
            }),
        ))
    }

    /// Matrix product over the last two axes. `self` is [B.., m, k]; `other`
    /// is either [k, n] (shared across batches) or [B.., k, n].
    pub fn matmul(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        let ash = self.shape().to_vec();
        let bsh = other.shape().to_vec();
        if ash.len() < 2 || bsh.len() < 2 {
            return Err(Error::Shape(format!(
                "matmul needs >=2-d operands, got {:?} x {:?}",
                ash, bsh
            )));
        }
        let (m, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
        let (bk, n) = (bsh[bsh.len() - 2], bsh[bsh.len() - 1]);
        let batched_rhs = bsh.len() > 2;
        let abatch = &ash[..ash.len() - 2];
        if k != bk || (batched_rhs && &bsh[..bsh.len() - 2] != abatch) {
            return Err(Error::Shape(format!(
                "matmul: incompatible shapes {:?} x {:?}",
                ash, bsh
            )));
        }
        let batch = numel_of(abatch);
        let mut out = vec![E::zero(); batch * m * n];
        {
            let a = self.data();
            let b = other.data();
            for bi in 0..batch {
                let bo = if batched_rhs { bi * k * n } else { 0 };
                matmul_raw(
                    &a[bi * m * k..(bi + 1) * m * k],
                    &b[bo..bo + k * n],
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let mut out_shape = abatch.to_vec();
        out_shape.push(m);
        out_shape.push(n);
        Ok(Tensor::from_op(
            out,
            out_shape,
            vec![self.clone(), other.clone()],
            Box::new(move |g, _, parents| {
                let a = parents[0].to_vec();
                let b = parents[1].to_vec();
                let mut da = vec![E::zero(); a.len()];
                let mut db = vec![E::zero(); b.len()];
                for bi in 0..batch {
                    let bo = if batched_rhs { bi * k * n } else { 0 };
                    let gb = &g[bi * m * n..(bi + 1) * m * n];
                    // dA = g * B^T
                    let bt = transpose_raw(&b[bo..bo + k * n], k, n);
                    matmul_raw(gb, &bt, &mut da[bi * m * k..(bi + 1) * m * k], m, n, k);
                    // dB += A^T * g
                    let at = transpose_raw(&a[bi * m * k..(bi + 1) * m * k], m, k);
                    matmul_raw(&at, gb, &mut db[bo..bo + k * n], k, m, n);
                }
                parents[0].accumulate_grad(&da);
                parents[1].accumulate_grad(&db);
            }),
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<E>> {
        if numel_of(shape) != self.numel() {
            return Err(Error::Shape(format!(
                "reshape {:?} -> {:?}: element count differs",
                self.shape(),
                shape
            )));
        }
        Ok(Tensor::from_op(
            self.to_vec(),
            shape.to_vec(),
            vec![self.clone()],
            Box::new(|g, _, parents| parents[0].accumulate_grad(g)),
        ))
    }

    /// Gather: out[i] = self.flat[map[i]]. Indices may repeat; the gradient
    /// scatter-adds back. This is the primitive behind permutes, unit
    /// grouping and sparse deletion.
    pub fn gather_map(&self, map: Rc<Vec<usize>>, out_shape: Vec<usize>) -> Result<Tensor<E>> {
        if map.len() != numel_of(&out_shape) {
            return Err(Error::Shape(format!(
                "gather_map: {} indices vs out shape {:?}",
                map.len(),
                out_shape
            )));
        }
        let n = self.numel();
        if let Some(&bad) = map.iter().find(|&&i| i >= n) {
            return Err(Error::Shape(format!(
                "gather_map: index {bad} out of range for {n} elements"
            )));
        }
        let data = {
            let x = self.data();
            map.iter().map(|&i| x[i]).collect::<Vec<E>>()
        };
        let map_b = Rc::clone(&map);
        Ok(Tensor::from_op(
            data,
            out_shape,
            vec![self.clone()],
            Box::new(move |g, _, parents| {
                let mut dx = vec![E::zero(); n];
                for (&idx, &gv) in map_b.iter().zip(g) {
                    dx[idx] = dx[idx] + gv;
                }
                parents[0].accumulate_grad(&dx);
            }),
        ))
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Tensor<E>> {
        let sh = self.shape().to_vec();
        if axes.len() != sh.len() {
            return Err(Error::Shape(format!(
                "permute: {} axes for shape {:?}",
                axes.len(),
                sh
            )));
        }
        let mut seen = vec![false; sh.len()];
        for &a in axes {
            if a >= sh.len() || seen[a] {
                return Err(Error::Shape(format!("permute: invalid axes {:?}", axes)));
            }
            seen[a] = true;
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| sh[a]).collect();
        let mut strides = vec![1usize; sh.len()];
        for d in (0..sh.len().saturating_sub(1)).rev() {
            strides[d] = strides[d + 1] * sh[d + 1];
        }
        let mut map = Vec::with_capacity(self.numel());
        let mut coords = vec![0usize; sh.len()];
        let total = self.numel();
        for _ in 0..total {
            let mut src = 0;
            for (d, &a) in axes.iter().enumerate() {
                src += coords[d] * strides[a];
            }
            map.push(src);
            for d in (0..out_shape.len()).rev() {
                coords[d] += 1;
                if coords[d] < out_shape[d] {
                    break;
                }
                coords[d] = 0;
            }
        }
        self.gather_map(Rc::new(map), out_shape)
    }

    pub fn transpose_last2(&self) -> Result<Tensor<E>> {
        let nd = self.shape().len();
        if nd < 2 {
            return Err(Error::Shape("transpose_last2 on <2-d tensor".into()));
        }
        let mut axes: Vec<usize> = (0..nd).collect();
        axes.swap(nd - 2, nd - 1);
        self.permute(&axes)
    }

    pub fn softmax(&self, axis: usize) -> Result<Tensor<E>> {
        let sh = self.shape().to_vec();
        if axis >= sh.len() {
            return Err(Error::Shape(format!(
                "softmax axis {axis} out of range for shape {:?}",
                sh
            )));
        }
        let asz = sh[axis];
        let outer: usize = sh[..axis].iter().product();
        let inner: usize = sh[axis + 1..].iter().product();
        let mut out = vec![E::zero(); self.numel()];
        {
            let x = self.data();
            for o in 0..outer {
                for i in 0..inner {
                    let at = |a: usize| o * asz * inner + a * inner + i;
                    let mut mx = E::neg_infinity();
                    for a in 0..asz {
                        mx = mx.max(x[at(a)]);
                    }
                    let mut sum = E::zero();
                    for a in 0..asz {
                        let e = (x[at(a)] - mx).exp();
                        out[at(a)] = e;
                        sum = sum + e;
                    }
                    for a in 0..asz {
                        out[at(a)] = out[at(a)] / sum;
                    }
                }
            }
        }
        Ok(Tensor::from_op(
            out,
            sh,
            vec![self.clone()],
            Box::new(move |g, y, parents| {
                // dx_a = y_a (g_a - sum_b g_b y_b)
                let mut dx = vec![E::zero(); g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |a: usize| o * asz * inner + a * inner + i;
                        let mut dot = E::zero();
                        for a in 0..asz {
                            dot = dot + g[at(a)] * y[at(a)];
                        }
                        for a in 0..asz {
                            dx[at(a)] = y[at(a)] * (g[at(a)] - dot);
                        }
                    }
                }
                parents[0].accumulate_grad(&dx);
            }),
        ))
    }

    /// Last-axis layer norm with affine parameters.
    pub fn layer_norm(&self, gamma: &Tensor<E>, beta: &Tensor<E>, eps: f64) -> Result<Tensor<E>> {
        let d = *self
            .shape()
            .last()
            .ok_or_else(|| Error::Shape("layer_norm on 0-d tensor".into()))?;
        if gamma.shape() != [d] || beta.shape() != [d] {
            return Err(Error::Shape(format!(
                "layer_norm: gamma {:?} / beta {:?} vs last axis {d}",
                gamma.shape(),
                beta.shape()
            )));
        }
        let rows = self.numel() / d;
        let epse = E::from_f64(eps);
        let mut out = vec![E::zero(); self.numel()];
        {
            let x = self.data();
            let gm = gamma.data();
            let bt = beta.data();
            let dn = E::from_f64(d as f64);
            for r in 0..rows {
                let row = &x[r * d..(r + 1) * d];
                let mean = row.iter().copied().sum::<E>() / dn;
                let var = row
                    .iter()
                    .map(|&v| (v - mean) * (v - mean))
                    .sum::<E>()
                    / dn;
                let inv = (var + epse).sqrt().recip();
                for j in 0..d {
                    out[r * d + j] = (row[j] - mean) * inv * gm[j] + bt[j];
                }
            }
        }
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |g, _, parents| {
                let x = parents[0].to_vec();
                let gm = parents[1].to_vec();
                let dn = E::from_f64(d as f64);
                let mut dx = vec![E::zero(); x.len()];
                let mut dgamma = vec![E::zero(); d];
                let mut dbeta = vec![E::zero(); d];
                for r in 0..rows {
                    let row = &x[r * d..(r + 1) * d];
                    let grow = &g[r * d..(r + 1) * d];
                    let mean = row.iter().copied().sum::<E>() / dn;
                    let var = row
                        .iter()
                        .map(|&v| (v - mean) * (v - mean))
                        .sum::<E>()
                        / dn;
                    let inv = (var + epse).sqrt().recip();
                    let xhat: Vec<E> = row.iter().map(|&v| (v - mean) * inv).collect();
                    let mut dxhat = vec![E::zero(); d];
                    for j in 0..d {
                        dgamma[j] = dgamma[j] + grow[j] * xhat[j];
                        dbeta[j] = dbeta[j] + grow[j];
                        dxhat[j] = grow[j] * gm[j];
                    }
                    let s1: E = dxhat.iter().copied().sum();
                    let s2: E = dxhat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum();
                    for j in 0..d {
                        dx[r * d + j] = inv / dn * (dn * dxhat[j] - s1 - xhat[j] * s2);
                    }
                }
                parents[0].accumulate_grad(&dx);
                parents[1].accumulate_grad(&dgamma);
                parents[2].accumulate_grad(&dbeta);
            }),
        ))
    }

    /// Tanh-approximation gelu.
    pub fn gelu(&self) -> Tensor<E> {
        let data: Vec<E> = self.data().iter().map(|&v| tanh_gelu(v)).collect();
        Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(|g, _, parents| {
                let x = parents[0].to_vec();
                let dx: Vec<E> = g
                    .iter()
                    .zip(&x)
                    .map(|(&gv, &xv)| gv * tanh_gelu_grad(xv))
                    .collect();
                parents[0].accumulate_grad(&dx);
            }),
        )
    }

    /// Max pooling over the two middle axes of [N, H, W, C]. Zero padding:
    /// padded positions compete as value 0 and receive no gradient. Ties go
    /// to the first maximal element in window scan order.
    pub fn max_pool2d(
        &self,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<Tensor<E>> {
        let sh = self.shape().to_vec();
        if sh.len() != 4 {
            return Err(Error::Shape(format!(
                "max_pool2d expects [N,H,W,C], got {:?}",
                sh
            )));
        }
        let (n, h, w, c) = (sh[0], sh[1], sh[2], sh[3]);
        let (kh, kw) = kernel;
        let (sh_, sw) = stride;
        let (ph, pw) = padding;
        if kh == 0 || kw == 0 || sh_ == 0 || sw == 0 {
            return Err(Error::Shape("max_pool2d: kernel and stride must be >= 1".into()));
        }
        if h + 2 * ph < kh || w + 2 * pw < kw {
            return Err(Error::Shape(format!(
                "max_pool2d: output extent < 1 for input {h}x{w}, kernel {kh}x{kw}, pad {ph}x{pw}"
            )));
        }
        let oh = (h + 2 * ph - kh) / sh_ + 1;
        let ow = (w + 2 * pw - kw) / sw + 1;
        let mut out = vec![E::zero(); n * oh * ow * c];
        let mut argmax: Vec<isize> = vec![-1; n * oh * ow * c];
        {
            let x = self.data();
            for ni in 0..n {
                for oy in 0..oh {
                    for ox in 0..ow {
                        for ch in 0..c {
                            let mut best = E::neg_infinity();
                            let mut best_idx: isize = -1;
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * sh_ + ky) as isize - ph as isize;
                                    let ix = (ox * sw + kx) as isize - pw as isize;
                                    let (v, idx) = if iy >= 0
                                        && iy < h as isize
                                        && ix >= 0
                                        && ix < w as isize
                                    {
                                        let fi = ((ni * h + iy as usize) * w + ix as usize) * c + ch;
                                        (x[fi], fi as isize)
                                    } else {
                                        (E::zero(), -1)
                                    };
                                    if v > best {
                                        best = v;
                                        best_idx = idx;
                                    }
                                }
                            }
                            let oi = ((ni * oh + oy) * ow + ox) * c + ch;
                            out[oi] = best;
                            argmax[oi] = best_idx;
                        }
                    }
                }
            }
        }
        let in_numel = self.numel();
        Ok(Tensor::from_op(
            out,
            vec![n, oh, ow, c],
            vec![self.clone()],
            Box::new(move |g, _, parents| {
                let mut dx = vec![E::zero(); in_numel];
                for (oi, &idx) in argmax.iter().enumerate() {
                    if idx >= 0 {
                        dx[idx as usize] = dx[idx as usize] + g[oi];
                    }
                }
                parents[0].accumulate_grad(&dx);
            }),
        ))
    }

    pub fn sum_all(&self) -> Tensor<E> {
        let s: E = self.data().iter().copied().sum();
        let n = self.numel();
        Tensor::from_op(
            vec![s],
            vec![1],
            vec![self.clone()],
            Box::new(move |g, _, parents| {
                parents[0].accumulate_grad(&vec![g[0]; n]);
            }),
        )
    }

    pub fn mean_all(&self) -> Tensor<E> {
        self.sum_all().scale(1.0 / self.numel() as f64)
    }

    /// Mean over axis 0 of a [N, C] tensor.
    pub fn mean_rows(&self) -> Result<Tensor<E>> {
        let sh = self.shape().to_vec();
        if sh.len() != 2 {
            return Err(Error::Shape(format!("mean_rows expects [N,C], got {:?}", sh)));
        }
        let (n, c) = (sh[0], sh[1]);
        let inv = E::from_f64(1.0 / n as f64);
        let mut out = vec![E::zero(); c];
        {
            let x = self.data();
            for r in 0..n {
                for j in 0..c {
                    out[j] = out[j] + x[r * c + j] * inv;
                }
            }
        }
        Ok(Tensor::from_op(
            out,
            vec![c],
            vec![self.clone()],
            Box::new(move |g, _, parents| {
                let mut dx = vec![E::zero(); n * c];
                for r in 0..n {
                    for j in 0..c {
                        dx[r * c + j] = g[j] * inv;
                    }
                }
                parents[0].accumulate_grad(&dx);
            }),
        ))
    }

    /// Mean squared error against a target of identical shape.
    pub fn mse(&self, target: &Tensor<E>) -> Result<Tensor<E>> {
        let d = self.sub(target)?;
        d.mul(&d)?.mean_all().reshape(&[1])
    }

    /// Cross entropy with label smoothing on a single logit vector [C].
    pub fn cross_entropy_smoothed(&self, target: usize, smoothing: f64) -> Result<Tensor<E>> {
        let sh = self.shape().to_vec();
        if sh.len() != 1 {
            return Err(Error::Shape(format!(
                "cross_entropy_smoothed expects [C], got {:?}",
                sh
            )));
        }
        let c = sh[0];
        if target >= c {
            return Err(Error::Shape(format!("target {target} out of range {c}")));
        }
        let x = self.to_vec();
        let mx = x.iter().copied().fold(E::neg_infinity(), E::max);
        let lse = mx + x.iter().map(|&v| (v - mx).exp()).sum::<E>().ln();
        let off = E::from_f64(smoothing / c as f64);
        let on = E::from_f64(1.0 - smoothing) + off;
        let mut loss = E::zero();
        for (j, &v) in x.iter().enumerate() {
            let q = if j == target { on } else { off };
            loss = loss - q * (v - lse);
        }
        Ok(Tensor::from_op(
            vec![loss],
            vec![1],
            vec![self.clone()],
            Box::new(move |g, _, parents| {
                let x = parents[0].to_vec();
                let mx = x.iter().copied().fold(E::neg_infinity(), E::max);
                let denom: E = x.iter().map(|&v| (v - mx).exp()).sum();
                let dx: Vec<E> = x
                    .iter()
                    .enumerate()
                    .map(|(j, &v)| {
                        let p = (v - mx).exp() / denom;
                        let q = if j == target { on } else { off };
                        g[0] * (p - q)
                    })
                    .collect();
                parents[0].accumulate_grad(&dx);
            }),
        ))
    }
}
