//! Forward ops and their adjoints.
//!
//! Matrix ops are rank-2, convolutions rank-4 `[channels, depth, height,
//! width]`. Softmax subtracts the max before exponentiation; sigmoid is
//! branch-guarded against overflow; dropout in eval mode returns its input
//! id untouched.

use super::{numel, Op, Tape, TensorId};
use crate::error::{Error, Result};

/// C = A·B with A m×k, B k×n.
fn mm(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut c = vec![0.0f32; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}

/// C = A·Bᵀ with A m×k, B n×k.
fn mm_nt(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut c = vec![0.0f32; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0f32;
            for p in 0..k {
                s += arow[p] * brow[p];
            }
            c[i * n + j] = s;
        }
    }
    c
}

/// C = Aᵀ·B with A k×m, B k×n.
fn mm_tn(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut c = vec![0.0f32; m * n];
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = arow[i];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}

fn sigmoid_scalar(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// SplitMix64 mix; the dropout stream is `mix(key + i·GAMMA)` per element.
fn splitmix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

const GAMMA: u64 = 0x9e3779b97f4a7c15;

/// Deterministic dropout key from (global seed, dropout site, step, sample).
pub fn dropout_key(seed: u64, site: u64, step: u64, sample: u64) -> u64 {
    let mut k = splitmix(seed ^ GAMMA.wrapping_mul(site.wrapping_add(1)));
    k = splitmix(k ^ GAMMA.wrapping_mul(step.wrapping_add(1)));
    splitmix(k ^ GAMMA.wrapping_mul(sample.wrapping_add(1)))
}

/// Inverted-dropout mask for a given key: 0 with probability `rate`,
/// otherwise `1/(1-rate)`.
pub fn dropout_mask(len: usize, rate: f32, key: u64) -> Vec<f32> {
    let keep = 1.0 - rate;
    (0..len)
        .map(|i| {
            let u = (splitmix(key.wrapping_add(GAMMA.wrapping_mul(i as u64 + 1))) >> 40) as f32
                / (1u64 << 24) as f32;
            if u < rate {
                0.0
            } else {
                1.0 / keep
            }
        })
        .collect()
}

impl Tape {
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, k) = self.dims2(a, "matmul lhs")?;
        let (k2, n) = self.dims2(b, "matmul rhs")?;
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul: [{m}, {k}] x [{k2}, {n}] inner dimensions differ"
            )));
        }
        let data = mm(&self.nodes[a.0].data, &self.nodes[b.0].data, m, k, n);
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(vec![m, n], data, rg, Op::Matmul { a, b }))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::Shape(format!(
                "add: {:?} vs {:?}",
                self.nodes[a.0].shape, self.nodes[b.0].shape
            )));
        }
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x + y)
            .collect();
        let rg = self.needs_grad(&[a, b]);
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(shape, data, rg, Op::Add { a, b }))
    }

    /// Broadcast-add a length-n row vector to every row of an m×n matrix.
    pub fn add_row(&mut self, a: TensorId, row: TensorId) -> Result<TensorId> {
        let (m, n) = self.dims2(a, "add_row lhs")?;
        let rs = self.nodes[row.0].shape.clone();
        if rs != [n] {
            return Err(Error::Shape(format!("add_row: matrix [{m}, {n}] vs row {rs:?}")));
        }
        let mut data = self.nodes[a.0].data.clone();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] += self.nodes[row.0].data[j];
            }
        }
        let rg = self.needs_grad(&[a, row]);
        Ok(self.push(vec![m, n], data, rg, Op::AddRow { a, row }))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::Shape(format!(
                "mul: {:?} vs {:?}",
                self.nodes[a.0].shape, self.nodes[b.0].shape
            )));
        }
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x * y)
            .collect();
        let rg = self.needs_grad(&[a, b]);
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(shape, data, rg, Op::Mul { a, b }))
    }

    /// y = mul·x + add, elementwise with scalar constants.
    pub fn affine(&mut self, a: TensorId, mul: f32, add: f32) -> TensorId {
        let data = self.nodes[a.0].data.iter().map(|x| mul * x + add).collect();
        let rg = self.nodes[a.0].requires_grad;
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, data, rg, Op::Affine { a, mul })
    }

    pub fn scale(&mut self, a: TensorId, c: f32) -> TensorId {
        self.affine(a, c, 0.0)
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        let data = self.nodes[a.0].data.iter().map(|x| x.max(0.0)).collect();
        let rg = self.nodes[a.0].requires_grad;
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, data, rg, Op::Relu { a })
    }

    pub fn gelu(&mut self, a: TensorId) -> TensorId {
        let data = self.nodes[a.0]
            .data
            .iter()
            .map(|&x| {
                let u = GELU_C * (x + GELU_A * x * x * x);
                0.5 * x * (1.0 + u.tanh())
            })
            .collect();
        let rg = self.nodes[a.0].requires_grad;
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, data, rg, Op::Gelu { a })
    }

    pub fn sigmoid(&mut self, a: TensorId) -> TensorId {
        let data = self.nodes[a.0].data.iter().map(|&x| sigmoid_scalar(x)).collect();
        let rg = self.nodes[a.0].requires_grad;
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, data, rg, Op::Sigmoid { a })
    }

    /// Softmax along `axis` of a rank-2 tensor (1 = rows, 0 = columns).
    pub fn softmax(&mut self, a: TensorId, axis: usize) -> Result<TensorId> {
        let (m, n) = self.dims2(a, "softmax")?;
        if axis > 1 {
            return Err(Error::Shape(format!("softmax: axis {axis} out of range for rank 2")));
        }
        let x = &self.nodes[a.0].data;
        let mut data = vec![0.0f32; m * n];
        let (outer, inner, os, is) = if axis == 1 { (m, n, n, 1) } else { (n, m, 1, n) };
        for o in 0..outer {
            let mut mx = f32::NEG_INFINITY;
            for i in 0..inner {
                mx = mx.max(x[o * os + i * is]);
            }
            let mut sum = 0.0f32;
            for i in 0..inner {
                let e = (x[o * os + i * is] - mx).exp().max(f32::MIN_POSITIVE);
                data[o * os + i * is] = e;
                sum += e;
            }
            for i in 0..inner {
                data[o * os + i * is] /= sum;
            }
        }
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(vec![m, n], data, rg, Op::Softmax { a, axis }))
    }

    pub fn log(&mut self, a: TensorId) -> TensorId {
        let data = self.nodes[a.0].data.iter().map(|x| x.ln()).collect();
        let rg = self.nodes[a.0].requires_grad;
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, data, rg, Op::Log { a })
    }

    pub fn clamp(&mut self, a: TensorId, lo: f32, hi: f32) -> TensorId {
        let data = self.nodes[a.0].data.iter().map(|x| x.clamp(lo, hi)).collect();
        let rg = self.nodes[a.0].requires_grad;
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, data, rg, Op::Clamp { a, lo, hi })
    }

    /// Layer normalization over the last axis of an m×n tensor with learned
    /// per-feature gain and bias.
    pub fn layer_norm(&mut self, a: TensorId, gamma: TensorId, beta: TensorId) -> Result<TensorId> {
        let (m, n) = self.dims2(a, "layer_norm")?;
        for (name, id) in [("gamma", gamma), ("beta", beta)] {
            let s = &self.nodes[id.0].shape;
            if s != &[n] {
                return Err(Error::Shape(format!(
                    "layer_norm {name}: expected [{n}], got {s:?}"
                )));
            }
        }
        let eps = 1e-5f32;
        let x = &self.nodes[a.0].data;
        let g = &self.nodes[gamma.0].data;
        let b = &self.nodes[beta.0].data;
        let mut data = vec![0.0f32; m * n];
        for i in 0..m {
            let row = &x[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f32>() / n as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n as f32;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..n {
                data[i * n + j] = g[j] * (row[j] - mean) * inv + b[j];
            }
        }
        let rg = self.needs_grad(&[a, gamma, beta]);
        Ok(self.push(vec![m, n], data, rg, Op::LayerNorm { a, gamma, beta, eps }))
    }

    /// Inverted dropout. Identity (same id, no node) when not training or
    /// rate is zero. `key` comes from [`dropout_key`].
    pub fn dropout(&mut self, a: TensorId, rate: f32, training: bool, key: u64) -> TensorId {
        if !training || rate == 0.0 {
            return a;
        }
        debug_assert!((0.0..1.0).contains(&rate));
        let mask = dropout_mask(self.nodes[a.0].data.len(), rate, key);
        let data = self.nodes[a.0].data.iter().zip(&mask).map(|(x, m)| x * m).collect();
        let rg = self.nodes[a.0].requires_grad;
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, data, rg, Op::Dropout { a, mask })
    }

    /// Concatenate rank-2 tensors along `axis` (0 = stack rows, 1 = widen).
    pub fn concat(&mut self, parts: &[TensorId], axis: usize) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::Shape("concat: no parts".into()));
        }
        let (m0, n0) = self.dims2(parts[0], "concat")?;
        let (mut rows, mut cols) = (m0, n0);
        for &p in &parts[1..] {
            let (m, n) = self.dims2(p, "concat")?;
            match axis {
                0 if n == n0 => rows += m,
                1 if m == m0 => cols += n,
                0 | 1 => {
                    return Err(Error::Shape(format!(
                        "concat axis {axis}: [{m0}, {n0}] vs [{m}, {n}]"
                    )))
                }
                _ => return Err(Error::Shape(format!("concat: axis {axis} out of range"))),
            }
        }
        let mut data = vec![0.0f32; rows * cols];
        if axis == 0 {
            let mut at = 0;
            for &p in parts {
                let d = &self.nodes[p.0].data;
                data[at..at + d.len()].copy_from_slice(d);
                at += d.len();
            }
        } else {
            let mut col_at = 0;
            for &p in parts {
                let (m, n) = self.dims2(p, "concat")?;
                let d = &self.nodes[p.0].data;
                for i in 0..m {
                    data[i * cols + col_at..i * cols + col_at + n]
                        .copy_from_slice(&d[i * n..(i + 1) * n]);
                }
                col_at += n;
            }
        }
        let rg = self.needs_grad(parts);
        Ok(self.push(vec![rows, cols], data, rg, Op::Concat { parts: parts.to_vec(), axis }))
    }

    pub fn slice_rows(&mut self, a: TensorId, start: usize, end: usize) -> Result<TensorId> {
        let (m, n) = self.dims2(a, "slice_rows")?;
        if start >= end || end > m {
            return Err(Error::Shape(format!("slice_rows: {start}..{end} out of [{m}, {n}]")));
        }
        let data = self.nodes[a.0].data[start * n..end * n].to_vec();
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(vec![end - start, n], data, rg, Op::SliceRows { a, start }))
    }

    pub fn slice_cols(&mut self, a: TensorId, start: usize, end: usize) -> Result<TensorId> {
        let (m, n) = self.dims2(a, "slice_cols")?;
        if start >= end || end > n {
            return Err(Error::Shape(format!("slice_cols: {start}..{end} out of [{m}, {n}]")));
        }
        let w = end - start;
        let mut data = vec![0.0f32; m * w];
        for i in 0..m {
            data[i * w..(i + 1) * w]
                .copy_from_slice(&self.nodes[a.0].data[i * n + start..i * n + end]);
        }
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(vec![m, w], data, rg, Op::SliceCols { a, start }))
    }

    pub fn sum(&mut self, a: TensorId) -> TensorId {
        let s = self.nodes[a.0].data.iter().sum();
        let rg = self.nodes[a.0].requires_grad;
        self.push(vec![1], vec![s], rg, Op::Sum { a })
    }

    pub fn mean(&mut self, a: TensorId) -> TensorId {
        let n = self.nodes[a.0].data.len().max(1);
        let s = self.nodes[a.0].data.iter().sum::<f32>() / n as f32;
        let rg = self.nodes[a.0].requires_grad;
        self.push(vec![1], vec![s], rg, Op::Mean { a })
    }

    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId> {
        let (m, n) = self.dims2(a, "transpose")?;
        let x = &self.nodes[a.0].data;
        let mut data = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = x[i * n + j];
            }
        }
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(vec![n, m], data, rg, Op::Transpose { a }))
    }

    /// View with a new shape; element count must match.
    pub fn reshape(&mut self, a: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        if numel(&shape) != self.nodes[a.0].data.len() {
            return Err(Error::Shape(format!(
                "reshape: {:?} -> {:?} changes element count",
                self.nodes[a.0].shape, shape
            )));
        }
        let data = self.nodes[a.0].data.clone();
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(shape, data, rg, Op::Reshape { a }))
    }

    /// Global average pool of a `[c, d, h, w]` tensor to `[1, c]`.
    pub fn spatial_mean(&mut self, a: TensorId) -> Result<TensorId> {
        let s = self.nodes[a.0].shape.clone();
        if s.len() != 4 {
            return Err(Error::Shape(format!("spatial_mean: expected rank 4, got {s:?}")));
        }
        let (c, vol) = (s[0], s[1] * s[2] * s[3]);
        let x = &self.nodes[a.0].data;
        let data: Vec<f32> = (0..c)
            .map(|ch| x[ch * vol..(ch + 1) * vol].iter().sum::<f32>() / vol as f32)
            .collect();
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(vec![1, c], data, rg, Op::SpatialMean { a }))
    }

    /// 3D convolution, kernel 3, stride 2, padding 1. Halves each spatial
    /// side (which must be even). Input `[ci, d, h, w]`, weight
    /// `[co, ci, 3, 3, 3]`, bias `[co]`.
    pub fn conv3(&mut self, input: TensorId, weight: TensorId, bias: TensorId) -> Result<TensorId> {
        let is = self.nodes[input.0].shape.clone();
        let ws = self.nodes[weight.0].shape.clone();
        if is.len() != 4 || ws.len() != 5 || ws[2] != 3 || ws[3] != 3 || ws[4] != 3 {
            return Err(Error::Shape(format!("conv3: input {is:?}, weight {ws:?}")));
        }
        if is[0] != ws[1] {
            return Err(Error::Shape(format!(
                "conv3: input channels {} vs weight {}",
                is[0], ws[1]
            )));
        }
        if self.nodes[bias.0].shape != [ws[0]] {
            return Err(Error::Shape(format!(
                "conv3: bias {:?} vs out channels {}",
                self.nodes[bias.0].shape, ws[0]
            )));
        }
        let (ci, d, h, w) = (is[0], is[1], is[2], is[3]);
        let co = ws[0];
        let (od, oh, ow) = (d / 2, h / 2, w / 2);
        let x = &self.nodes[input.0].data;
        let wt = &self.nodes[weight.0].data;
        let b = &self.nodes[bias.0].data;
        let mut out = vec![0.0f32; co * od * oh * ow];
        for c_out in 0..co {
            for zo in 0..od {
                for yo in 0..oh {
                    for xo in 0..ow {
                        let mut acc = b[c_out];
                        for c_in in 0..ci {
                            for kz in 0..3usize {
                                let zi = (2 * zo + kz) as isize - 1;
                                if zi < 0 || zi >= d as isize {
                                    continue;
                                }
                                for ky in 0..3usize {
                                    let yi = (2 * yo + ky) as isize - 1;
                                    if yi < 0 || yi >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..3usize {
                                        let xi = (2 * xo + kx) as isize - 1;
                                        if xi < 0 || xi >= w as isize {
                                            continue;
                                        }
                                        let xv = x[((c_in * d + zi as usize) * h + yi as usize) * w
                                            + xi as usize];
                                        let wv = wt[(((c_out * ci + c_in) * 3 + kz) * 3 + ky) * 3
                                            + kx];
                                        acc += xv * wv;
                                    }
                                }
                            }
                        }
                        out[((c_out * od + zo) * oh + yo) * ow + xo] = acc;
                    }
                }
            }
        }
        let rg = self.needs_grad(&[input, weight, bias]);
        Ok(self.push(vec![co, od, oh, ow], out, rg, Op::Conv3 { input, weight, bias }))
    }

    /// Transposed 3D convolution, kernel 2, stride 2: exact 2x upsampling.
    /// Input `[ci, d, h, w]`, weight `[ci, co, 2, 2, 2]`, bias `[co]`.
    pub fn conv3_transpose(
        &mut self,
        input: TensorId,
        weight: TensorId,
        bias: TensorId,
    ) -> Result<TensorId> {
        let is = self.nodes[input.0].shape.clone();
        let ws = self.nodes[weight.0].shape.clone();
        if is.len() != 4 || ws.len() != 5 || ws[2] != 2 || ws[3] != 2 || ws[4] != 2 {
            return Err(Error::Shape(format!("conv3_transpose: input {is:?}, weight {ws:?}")));
        }
        if is[0] != ws[0] {
            return Err(Error::Shape(format!(
                "conv3_transpose: input channels {} vs weight {}",
                is[0], ws[0]
            )));
        }
        if self.nodes[bias.0].shape != [ws[1]] {
            return Err(Error::Shape(format!(
                "conv3_transpose: bias {:?} vs out channels {}",
                self.nodes[bias.0].shape, ws[1]
            )));
        }
        let (ci, d, h, w) = (is[0], is[1], is[2], is[3]);
        let co = ws[1];
        let (od, oh, ow) = (2 * d, 2 * h, 2 * w);
        let x = &self.nodes[input.0].data;
        let wt = &self.nodes[weight.0].data;
        let b = &self.nodes[bias.0].data;
        let mut out = vec![0.0f32; co * od * oh * ow];
        for c_out in 0..co {
            let base = c_out * od * oh * ow;
            for v in &mut out[base..base + od * oh * ow] {
                *v = b[c_out];
            }
        }
        for c_in in 0..ci {
            for z in 0..d {
                for y in 0..h {
                    for xq in 0..w {
                        let xv = x[((c_in * d + z) * h + y) * w + xq];
                        if xv == 0.0 {
                            continue;
                        }
                        for c_out in 0..co {
                            for kz in 0..2usize {
                                for ky in 0..2usize {
                                    for kx in 0..2usize {
                                        let wv = wt[(((c_in * co + c_out) * 2 + kz) * 2 + ky) * 2
                                            + kx];
                                        out[((c_out * od + 2 * z + kz) * oh + 2 * y + ky) * ow
                                            + 2 * xq
                                            + kx] += xv * wv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        let rg = self.needs_grad(&[input, weight, bias]);
        Ok(self.push(vec![co, od, oh, ow], out, rg, Op::Conv3T { input, weight, bias }))
    }

    /// x·W + b, the everyday composite.
    pub fn linear(&mut self, x: TensorId, w: TensorId, b: TensorId) -> Result<TensorId> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    fn accumulate(&mut self, id: TensorId, delta: &[f32]) {
        if let Some(g) = self.nodes[id.0].grad.as_mut() {
            for (gi, di) in g.iter_mut().zip(delta) {
                *gi += di;
            }
        }
    }

    pub(super) fn backward_node(&mut self, i: usize) {
        let g = match self.nodes[i].grad.take() {
            Some(g) => g,
            None => return,
        };
        let op = self.nodes[i].op.clone();
        match op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = self.nodes[b.0].shape[1];
                if self.nodes[a.0].requires_grad {
                    let da = mm_nt(&g, &self.nodes[b.0].data, m, n, k);
                    self.accumulate(a, &da);
                }
                if self.nodes[b.0].requires_grad {
                    let db = mm_tn(&self.nodes[a.0].data, &g, k, m, n);
                    self.accumulate(b, &db);
                }
            }
            Op::Add { a, b } => {
                self.accumulate(a, &g);
                self.accumulate(b, &g);
            }
            Op::AddRow { a, row } => {
                self.accumulate(a, &g);
                if self.nodes[row.0].requires_grad {
                    let n = self.nodes[row.0].data.len();
                    let m = g.len() / n;
                    let mut dr = vec![0.0f32; n];
                    for r in 0..m {
                        for j in 0..n {
                            dr[j] += g[r * n + j];
                        }
                    }
                    self.accumulate(row, &dr);
                }
            }
            Op::Mul { a, b } => {
                if self.nodes[a.0].requires_grad {
                    let da: Vec<f32> =
                        g.iter().zip(&self.nodes[b.0].data).map(|(gi, bi)| gi * bi).collect();
                    self.accumulate(a, &da);
                }
                if self.nodes[b.0].requires_grad {
                    let db: Vec<f32> =
                        g.iter().zip(&self.nodes[a.0].data).map(|(gi, ai)| gi * ai).collect();
                    self.accumulate(b, &db);
                }
            }
            Op::Affine { a, mul } => {
                let da: Vec<f32> = g.iter().map(|gi| gi * mul).collect();
                self.accumulate(a, &da);
            }
            Op::Relu { a } => {
                let da: Vec<f32> = g
                    .iter()
                    .zip(&self.nodes[a.0].data)
                    .map(|(gi, &x)| if x > 0.0 { *gi } else { 0.0 })
                    .collect();
                self.accumulate(a, &da);
            }
            Op::Gelu { a } => {
                let da: Vec<f32> = g
                    .iter()
                    .zip(&self.nodes[a.0].data)
                    .map(|(gi, &x)| {
                        let u = GELU_C * (x + GELU_A * x * x * x);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                        gi * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                    })
                    .collect();
                self.accumulate(a, &da);
            }
            Op::Sigmoid { a } => {
                let da: Vec<f32> = g
                    .iter()
                    .zip(&self.nodes[i].data)
                    .map(|(gi, &y)| gi * y * (1.0 - y))
                    .collect();
                self.accumulate(a, &da);
            }
            Op::Softmax { a, axis } => {
                let (m, n) = (self.nodes[i].shape[0], self.nodes[i].shape[1]);
                let y = &self.nodes[i].data;
                let mut da = vec![0.0f32; m * n];
                let (outer, inner, os, is) = if axis == 1 { (m, n, n, 1) } else { (n, m, 1, n) };
                for o in 0..outer {
                    let mut dot = 0.0f32;
                    for q in 0..inner {
                        dot += g[o * os + q * is] * y[o * os + q * is];
                    }
                    for q in 0..inner {
                        let idx = o * os + q * is;
                        da[idx] = y[idx] * (g[idx] - dot);
                    }
                }
                self.accumulate(a, &da);
            }
            Op::Log { a } => {
                let da: Vec<f32> =
                    g.iter().zip(&self.nodes[a.0].data).map(|(gi, &x)| gi / x).collect();
                self.accumulate(a, &da);
            }
            Op::Clamp { a, lo, hi } => {
                let da: Vec<f32> = g
                    .iter()
                    .zip(&self.nodes[a.0].data)
                    .map(|(gi, &x)| if x >= lo && x <= hi { *gi } else { 0.0 })
                    .collect();
                self.accumulate(a, &da);
            }
            Op::LayerNorm { a, gamma, beta, eps } => {
                let (m, n) = (self.nodes[i].shape[0], self.nodes[i].shape[1]);
                let x = self.nodes[a.0].data.clone();
                let gm = self.nodes[gamma.0].data.clone();
                let mut da = vec![0.0f32; m * n];
                let mut dgamma = vec![0.0f32; n];
                let mut dbeta = vec![0.0f32; n];
                for r in 0..m {
                    let row = &x[r * n..(r + 1) * n];
                    let mean = row.iter().sum::<f32>() / n as f32;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n as f32;
                    let inv = 1.0 / (var + eps).sqrt();
                    let gr = &g[r * n..(r + 1) * n];
                    let mut sum_gg = 0.0f32;
                    let mut sum_ggx = 0.0f32;
                    for j in 0..n {
                        let xh = (row[j] - mean) * inv;
                        let gg = gm[j] * gr[j];
                        sum_gg += gg;
                        sum_ggx += gg * xh;
                        dgamma[j] += gr[j] * xh;
                        dbeta[j] += gr[j];
                    }
                    for j in 0..n {
                        let xh = (row[j] - mean) * inv;
                        let gg = gm[j] * gr[j];
                        da[r * n + j] =
                            inv * (gg - sum_gg / n as f32 - xh * sum_ggx / n as f32);
                    }
                }
                self.accumulate(a, &da);
                self.accumulate(gamma, &dgamma);
                self.accumulate(beta, &dbeta);
            }
            Op::Dropout { a, mask } => {
                let da: Vec<f32> = g.iter().zip(&mask).map(|(gi, mi)| gi * mi).collect();
                self.accumulate(a, &da);
            }
            Op::Concat { parts, axis } => {
                let cols = self.nodes[i].shape[1];
                if axis == 0 {
                    let mut at = 0;
                    for p in parts {
                        let len = self.nodes[p.0].data.len();
                        let slice = g[at..at + len].to_vec();
                        self.accumulate(p, &slice);
                        at += len;
                    }
                } else {
                    let rows = self.nodes[i].shape[0];
                    let mut col_at = 0;
                    for p in parts {
                        let n = self.nodes[p.0].shape[1];
                        let mut dp = vec![0.0f32; rows * n];
                        for r in 0..rows {
                            dp[r * n..(r + 1) * n]
                                .copy_from_slice(&g[r * cols + col_at..r * cols + col_at + n]);
                        }
                        self.accumulate(p, &dp);
                        col_at += n;
                    }
                }
            }
            Op::SliceRows { a, start } => {
                let n = self.nodes[a.0].shape[1];
                let mut da = vec![0.0f32; self.nodes[a.0].data.len()];
                da[start * n..start * n + g.len()].copy_from_slice(&g);
                self.accumulate(a, &da);
            }
            Op::SliceCols { a, start } => {
                let (m, n) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let w = self.nodes[i].shape[1];
                let mut da = vec![0.0f32; m * n];
                for r in 0..m {
                    da[r * n + start..r * n + start + w].copy_from_slice(&g[r * w..(r + 1) * w]);
                }
                self.accumulate(a, &da);
            }
            Op::Sum { a } => {
                let da = vec![g[0]; self.nodes[a.0].data.len()];
                self.accumulate(a, &da);
            }
            Op::Mean { a } => {
                let n = self.nodes[a.0].data.len().max(1);
                let da = vec![g[0] / n as f32; self.nodes[a.0].data.len()];
                self.accumulate(a, &da);
            }
            Op::Transpose { a } => {
                let (n, m) = (self.nodes[i].shape[0], self.nodes[i].shape[1]);
                let mut da = vec![0.0f32; n * m];
                for r in 0..n {
                    for c in 0..m {
                        da[c * n + r] = g[r * m + c];
                    }
                }
                self.accumulate(a, &da);
            }
            Op::Reshape { a } => {
                self.accumulate(a, &g);
            }
            Op::SpatialMean { a } => {
                let s = self.nodes[a.0].shape.clone();
                let vol = s[1] * s[2] * s[3];
                let mut da = vec![0.0f32; self.nodes[a.0].data.len()];
                for ch in 0..s[0] {
                    let gv = g[ch] / vol as f32;
                    for v in &mut da[ch * vol..(ch + 1) * vol] {
                        *v = gv;
                    }
                }
                self.accumulate(a, &da);
            }
            Op::Conv3 { input, weight, bias } => {
                self.backward_conv3(i, input, weight, bias, &g);
            }
            Op::Conv3T { input, weight, bias } => {
                self.backward_conv3t(i, input, weight, bias, &g);
            }
        }
        self.nodes[i].grad = Some(g);
    }

    fn backward_conv3(
        &mut self,
        out: usize,
        input: TensorId,
        weight: TensorId,
        bias: TensorId,
        g: &[f32],
    ) {
        let is = self.nodes[input.0].shape.clone();
        let os = self.nodes[out].shape.clone();
        let (ci, d, h, w) = (is[0], is[1], is[2], is[3]);
        let (co, od, oh, ow) = (os[0], os[1], os[2], os[3]);
        let x = self.nodes[input.0].data.clone();
        let wt = self.nodes[weight.0].data.clone();

        let mut dx = vec![0.0f32; x.len()];
        let mut dw = vec![0.0f32; wt.len()];
        let mut db = vec![0.0f32; co];
        for c_out in 0..co {
            for zo in 0..od {
                for yo in 0..oh {
                    for xo in 0..ow {
                        let gv = g[((c_out * od + zo) * oh + yo) * ow + xo];
                        if gv == 0.0 {
                            continue;
                        }
                        db[c_out] += gv;
                        for c_in in 0..ci {
                            for kz in 0..3usize {
                                let zi = (2 * zo + kz) as isize - 1;
                                if zi < 0 || zi >= d as isize {
                                    continue;
                                }
                                for ky in 0..3usize {
                                    let yi = (2 * yo + ky) as isize - 1;
                                    if yi < 0 || yi >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..3usize {
                                        let xi = (2 * xo + kx) as isize - 1;
                                        if xi < 0 || xi >= w as isize {
                                            continue;
                                        }
                                        let xi_flat = ((c_in * d + zi as usize) * h + yi as usize)
                                            * w
                                            + xi as usize;
                                        let wi_flat =
                                            (((c_out * ci + c_in) * 3 + kz) * 3 + ky) * 3 + kx;
                                        dx[xi_flat] += gv * wt[wi_flat];
                                        dw[wi_flat] += gv * x[xi_flat];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        self.accumulate(input, &dx);
        self.accumulate(weight, &dw);
        self.accumulate(bias, &db);
    }

    fn backward_conv3t(
        &mut self,
        out: usize,
        input: TensorId,
        weight: TensorId,
        bias: TensorId,
        g: &[f32],
    ) {
        let is = self.nodes[input.0].shape.clone();
        let os = self.nodes[out].shape.clone();
        let (ci, d, h, w) = (is[0], is[1], is[2], is[3]);
        let (co, od, oh, ow) = (os[0], os[1], os[2], os[3]);
        let x = self.nodes[input.0].data.clone();
        let wt = self.nodes[weight.0].data.clone();

        let mut dx = vec![0.0f32; x.len()];
        let mut dw = vec![0.0f32; wt.len()];
        let mut db = vec![0.0f32; co];
        for c_out in 0..co {
            for zo in 0..od {
                for yo in 0..oh {
                    for xo in 0..ow {
                        db[c_out] += g[((c_out * od + zo) * oh + yo) * ow + xo];
                    }
                }
            }
        }
        for c_in in 0..ci {
            for z in 0..d {
                for y in 0..h {
                    for xq in 0..w {
                        let xi_flat = ((c_in * d + z) * h + y) * w + xq;
                        let xv = x[xi_flat];
                        let mut acc = 0.0f32;
                        for c_out in 0..co {
                            for kz in 0..2usize {
                                for ky in 0..2usize {
                                    for kx in 0..2usize {
                                        let gv = g[((c_out * od + 2 * z + kz) * oh + 2 * y + ky)
                                            * ow
                                            + 2 * xq
                                            + kx];
                                        let wi_flat =
                                            (((c_in * co + c_out) * 2 + kz) * 2 + ky) * 2 + kx;
                                        acc += gv * wt[wi_flat];
                                        dw[wi_flat] += gv * xv;
                                    }
                                }
                            }
                        }
                        dx[xi_flat] = acc;
                    }
                }
            }
        }
        self.accumulate(input, &dx);
        self.accumulate(weight, &dw);
        self.accumulate(bias, &db);
    }
}

const GELU_C: f32 = 0.797_884_56; // sqrt(2/pi)
const GELU_A: f32 = 0.044715;
