//! Differentiable operations recorded on the [`Tape`] and their backward rules.

use super::tape::{grad_slot, Node};
use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const GELU_COEF: f64 = 0.044_715;

/// Geometry of a square-kernel strided convolution over an `[H, W, C]` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.channels
    }
}

pub(crate) enum Op {
    Leaf(Option<super::ParamId>),
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Identity(Var),
    Gelu(Var),
    Softmax {
        input: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        center: bool,
    },
    Transpose(Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        input: Var,
        axis: usize,
        start: usize,
    },
    Mean {
        input: Var,
        axis: usize,
    },
    Sum(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Im2Col {
        input: Var,
        geom: ConvGeom,
    },
    CausalAttention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<f64>,
        count: usize,
    },
}

/// Splits `shape` around `axis` into (outer, len, inner) extents.
fn axis_extents(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let pad = |s: &[usize]| -> Vec<usize> {
        let mut v = vec![1; rank - s.len()];
        v.extend_from_slice(s);
        v
    };
    let (a, b) = (pad(a), pad(b));
    a.iter()
        .zip(&b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Some(x),
            (1, y) => Some(y),
            (x, 1) => Some(x),
            _ => None,
        })
        .collect()
}

/// For each flat index of `out`, the flat index it reads from an input of shape `input`.
fn broadcast_map(out: &[usize], input: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut padded = vec![1; rank - input.len()];
    padded.extend_from_slice(input);
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for d in (0..rank).rev() {
        strides[d] = if padded[d] == 1 { 0 } else { acc };
        acc *= padded[d];
    }
    let numel: usize = out.iter().product();
    let mut map = Vec::with_capacity(numel);
    let mut idx = vec![0usize; rank];
    for _ in 0..numel {
        map.push(idx.iter().zip(&strides).map(|(i, s)| i * s).sum());
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    map
}

enum Bcast {
    Same,
    Map(Vec<usize>),
}

impl Bcast {
    fn new(out: &[usize], input: &[usize]) -> Self {
        if out == input {
            Bcast::Same
        } else {
            Bcast::Map(broadcast_map(out, input))
        }
    }

    #[inline]
    fn at(&self, i: usize) -> usize {
        match self {
            Bcast::Same => i,
            Bcast::Map(m) => m[i],
        }
    }
}

fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: (&[f64], isize, isize),
    b: (&[f64], isize, isize),
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: pointers cover m*k, k*n and m*n elements under the given strides,
    // and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.0.as_ptr(),
            a.1,
            a.2,
            b.0.as_ptr(),
            b.1,
            b.2,
            if accumulate { 1.0 } else { 0.0 },
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + GELU_COEF * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let t = (c * (x + GELU_COEF * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * GELU_COEF * x * x)
}

impl Tape {
    /// `[m×k] · [k×n] → [m×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::dim("matmul", self.value(a).shape(), self.value(b).shape()));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            (self.value(a).data(), k as isize, 1),
            (self.value(b).data(), n as isize, 1),
            &mut out,
            false,
        );
        let value = Tensor::new(&[m, n], out)?;
        Ok(self.push(value, &[a, b], Op::MatMul(a, b)))
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<(Tensor, Vec<usize>)> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        let out_shape = broadcast_shape(sa, sb).ok_or_else(|| Error::dim(name, sa, sb))?;
        let (ma, mb) = (Bcast::new(&out_shape, sa), Bcast::new(&out_shape, sb));
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let numel: usize = out_shape.iter().product();
        let data = (0..numel).map(|i| f(da[ma.at(i)], db[mb.at(i)])).collect();
        Ok((Tensor::new(&out_shape, data)?, out_shape))
    }

    /// Elementwise sum with broadcasting over size-1 (or missing leading) dimensions.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, _) = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(value, &[a, b], Op::Add(a, b)))
    }

    /// Elementwise product with broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, _) = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(value, &[a, b], Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a);
        let value = Tensor::new(t.shape(), t.data().iter().map(|x| x * s).collect()).expect("shape");
        self.push(value, &[a], Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a);
        let value = Tensor::new(t.shape(), t.data().iter().map(|x| x + s).collect()).expect("shape");
        self.push(value, &[a], Op::Identity(a))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let value = Tensor::new(t.shape(), t.data().iter().map(|&x| gelu(x)).collect()).expect("shape");
        self.push(value, &[a], Op::Gelu(a))
    }

    /// Softmax along `axis`, with max subtraction.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        if axis >= t.shape().len() {
            return Err(Error::Contract(format!("softmax axis {axis} on shape {:?}", t.shape())));
        }
        if t.data().iter().any(|x| x.is_nan()) {
            return Err(Error::Numeric("softmax"));
        }
        let (outer, n, inner) = axis_extents(t.shape(), axis);
        let x = t.data();
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * n * inner + j * inner + i;
                let max = (0..n).map(|j| x[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for j in 0..n {
                    let e = (x[at(j)] - max).exp();
                    y[at(j)] = e;
                    sum += e;
                }
                for j in 0..n {
                    y[at(j)] /= sum;
                }
            }
        }
        let value = Tensor::new(t.shape(), y)?;
        Ok(self.push(value, &[a], Op::Softmax { input: a, axis }))
    }

    /// Layer normalization over the last dimension with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        self.normalize(x, gain, bias, eps, true)
    }

    /// Root-mean-square normalization over the last dimension: like
    /// [`layer_norm`](Self::layer_norm) without subtracting the mean, so a
    /// constant shift of a row changes the output.
    pub fn rms_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        self.normalize(x, gain, bias, eps, false)
    }

    fn normalize(&mut self, x: Var, gain: Var, bias: Var, eps: f64, center: bool) -> Result<Var> {
        let t = self.value(x);
        let d = *t.shape().last().ok_or_else(|| Error::Contract("normalization of a scalar".into()))?;
        if self.value(gain).numel() != d || self.value(bias).numel() != d {
            return Err(Error::dim("normalize", t.shape(), self.value(gain).shape()));
        }
        let rows = t.numel() / d;
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut xhat = vec![0.0; t.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut y = vec![0.0; t.numel()];
        for r in 0..rows {
            let row = &t.data()[r * d..(r + 1) * d];
            let mean = if center { row.iter().sum::<f64>() / d as f64 } else { 0.0 };
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                y[r * d + j] = h * g[j] + b[j];
            }
        }
        let value = Tensor::new(t.shape(), y)?;
        Ok(self.push(
            value,
            &[x, gain, bias],
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
                center,
            },
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape)?;
        Ok(self.push(value, &[a], Op::Identity(a)))
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = t.dims2()?;
        let x = t.data();
        let value = Tensor::from_fn(&[c, r], |i| x[(i % r) * c + i / r]);
        Ok(self.push(value, &[a], Op::Transpose(a)))
    }

    /// Concatenation along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .value(*parts.first().ok_or_else(|| Error::Contract("concat of nothing".into()))?)
            .shape()
            .to_vec();
        if axis >= first.len() {
            return Err(Error::Contract(format!("concat axis {axis} on shape {first:?}")));
        }
        let mut total = 0;
        for p in parts {
            let s = self.value(*p).shape();
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(Error::dim("concat", &first, s));
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_extents(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for p in parts {
                let t = self.value(*p);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let value = Tensor::new(&shape, data)?;
        Ok(self.push(
            value,
            parts,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    /// `len` entries along `axis` starting at `start`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        let shape = t.shape();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::Index {
                op: "slice",
                index: start + len,
                bound: shape.get(axis).copied().unwrap_or(0),
            });
        }
        let (outer, n, inner) = axis_extents(shape, axis);
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner + start * inner;
            data.extend_from_slice(&t.data()[base..base + len * inner]);
        }
        let value = Tensor::new(&out_shape, data)?;
        Ok(self.push(value, &[a], Op::Slice { input: a, axis, start }))
    }

    /// Mean along `axis`, keeping it as a size-1 dimension.
    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        if axis >= t.shape().len() {
            return Err(Error::Contract(format!("mean axis {axis} on shape {:?}", t.shape())));
        }
        let (outer, n, inner) = axis_extents(t.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                for i in 0..inner {
                    out[o * inner + i] += t.data()[o * n * inner + j * inner + i];
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= n as f64);
        let mut shape = t.shape().to_vec();
        shape[axis] = 1;
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, &[a], Op::Mean { input: a, axis }))
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), &[a], Op::Sum(a))
    }

    /// Gathers rows of a `[V×D]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (v, d) = t.dims2()?;
        if ids.is_empty() {
            return Err(Error::Contract("embedding of empty id list".into()));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Index {
                    op: "embedding",
                    index: id,
                    bound: v,
                });
            }
            data.extend_from_slice(t.row(id));
        }
        let value = Tensor::new(&[ids.len(), d], data)?;
        Ok(self.push(
            value,
            &[table],
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Unfolds an `[H, W, C]` input into `[Ho·Wo, k·k·C]` patches, zero padded.
    /// Patch columns are ordered (ky, kx, c).
    pub fn im2col(&mut self, input: Var, kernel: usize, stride: usize, padding: usize) -> Result<Var> {
        let t = self.value(input);
        let [height, width, channels] = t.shape()[..] else {
            return Err(Error::Contract(format!("im2col expects [H, W, C], got {:?}", t.shape())));
        };
        let geom = ConvGeom {
            height,
            width,
            channels,
            kernel,
            stride,
            padding,
        };
        if height + 2 * padding < kernel || width + 2 * padding < kernel || stride == 0 {
            return Err(Error::Config(format!("convolution geometry {geom:?} is empty")));
        }
        let (ho, wo, pl) = (geom.out_height(), geom.out_width(), geom.patch_len());
        let mut out = vec![0.0; ho * wo * pl];
        for_each_tap(&geom, |o, col, src| out[o * pl + col] = t.data()[src]);
        let value = Tensor::new(&[ho * wo, pl], out)?;
        Ok(self.push(value, &[input], Op::Im2Col { input, geom }))
    }

    /// Multi-head causal self-attention over `[K×D]` queries, keys and values.
    /// Row `i` of the output attends to rows `0..=i` only.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (len, d) = self.value(q).dims2()?;
        for other in [k, v] {
            if self.value(other).shape() != self.value(q).shape() {
                return Err(Error::dim("attention", self.value(q).shape(), self.value(other).shape()));
            }
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("{d} channels do not split into {heads} heads")));
        }
        let hd = d / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![0.0; heads * len * len];
        let mut out = vec![0.0; len * d];
        let mut scores = vec![0.0; len];
        for h in 0..heads {
            let off = h * hd;
            for i in 0..len {
                let qi = &qd[i * d + off..i * d + off + hd];
                let mut max = f64::NEG_INFINITY;
                for j in 0..=i {
                    let kj = &kd[j * d + off..j * d + off + hd];
                    let s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                    scores[j] = s;
                    max = max.max(s);
                }
                let mut sum = 0.0;
                for s in &mut scores[..=i] {
                    *s = (*s - max).exp();
                    sum += *s;
                }
                let prow = &mut probs[(h * len + i) * len..(h * len + i + 1) * len];
                let orow = &mut out[i * d + off..i * d + off + hd];
                for j in 0..=i {
                    let p = scores[j] / sum;
                    prow[j] = p;
                    let vj = &vd[j * d + off..j * d + off + hd];
                    for (o, x) in orow.iter_mut().zip(vj) {
                        *o += p * x;
                    }
                }
            }
        }
        let value = Tensor::new(&[len, d], out)?;
        Ok(self.push(value, &[q, k, v], Op::CausalAttention { q, k, v, heads, probs }))
    }

    /// Mean over masked rows of `-log softmax(logits[row])[target[row]]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let t = self.value(logits);
        let (rows, vocab) = t.dims2()?;
        if targets.len() != rows || mask.len() != rows {
            return Err(Error::dim("cross_entropy", t.shape(), &[targets.len(), mask.len()]));
        }
        let count = mask.iter().filter(|m| **m).count();
        if count == 0 {
            return Err(Error::DegenerateBatch);
        }
        let mut probs = vec![0.0; rows * vocab];
        let mut total = 0.0;
        for r in (0..rows).filter(|&r| mask[r]) {
            let target = targets[r];
            if target >= vocab {
                return Err(Error::Index {
                    op: "cross_entropy",
                    index: target,
                    bound: vocab,
                });
            }
            let row = t.row(r);
            if row.iter().any(|x| x.is_nan()) {
                return Err(Error::Numeric("cross_entropy"));
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|x| (x - max).exp()).sum();
            let lse = max + sum.ln();
            total += lse - row[target];
            for (p, x) in probs[r * vocab..(r + 1) * vocab].iter_mut().zip(row) {
                *p = (x - lse).exp();
            }
        }
        let value = Tensor::scalar(total / count as f64);
        Ok(self.push(
            value,
            &[logits],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                count,
            },
        ))
    }
}

/// Visits every (output position, patch column, source index) triple of a
/// convolution unfold, skipping taps that land in the zero padding.
fn for_each_tap(geom: &ConvGeom, mut f: impl FnMut(usize, usize, usize)) {
    let (ho, wo) = (geom.out_height(), geom.out_width());
    let c = geom.channels;
    for oy in 0..ho {
        for ox in 0..wo {
            let o = oy * wo + ox;
            for ky in 0..geom.kernel {
                let iy = (oy * geom.stride + ky) as isize - geom.padding as isize;
                if iy < 0 || iy >= geom.height as isize {
                    continue;
                }
                for kx in 0..geom.kernel {
                    let ix = (ox * geom.stride + kx) as isize - geom.padding as isize;
                    if ix < 0 || ix >= geom.width as isize {
                        continue;
                    }
                    let src = (iy as usize * geom.width + ix as usize) * c;
                    let col = (ky * geom.kernel + kx) * c;
                    for ch in 0..c {
                        f(o, col + ch, src + ch);
                    }
                }
            }
        }
    }
}

fn value<'a>(nodes: &'a [Node], v: Var) -> &'a Tensor {
    &nodes[v.0].value
}

fn accumulate_broadcast(
    grads: &mut [Option<Vec<f64>>],
    nodes: &[Node],
    target: Var,
    out_shape: &[usize],
    g: &[f64],
    factor: Option<(&[f64], &Bcast)>,
) {
    let shape = value(nodes, target).shape().to_vec();
    let map = Bcast::new(out_shape, &shape);
    if let Some(slot) = grad_slot(grads, nodes, target) {
        for (i, gi) in g.iter().enumerate() {
            let scale = factor.map_or(1.0, |(d, m)| d[m.at(i)]);
            slot[map.at(i)] += gi * scale;
        }
    }
}

pub(crate) fn backward(op: &Op, out: &Tensor, g: &[f64], nodes: &[Node], grads: &mut [Option<Vec<f64>>]) {
    match op {
        Op::Leaf(_) => {}
        Op::MatMul(a, b) => {
            let (m, k) = value(nodes, *a).dims2().expect("2-D");
            let n = out.shape()[1];
            if nodes[a.0].requires_grad {
                let bd = value(nodes, *b).data();
                let slot = grad_slot(grads, nodes, *a).expect("tracked");
                // dA += G · Bᵀ
                gemm(m, n, k, (g, n as isize, 1), (bd, 1, n as isize), slot, true);
            }
            if nodes[b.0].requires_grad {
                let ad = value(nodes, *a).data();
                let slot = grad_slot(grads, nodes, *b).expect("tracked");
                // dB += Aᵀ · G
                gemm(k, m, n, (ad, 1, k as isize), (g, n as isize, 1), slot, true);
            }
        }
        Op::Add(a, b) => {
            accumulate_broadcast(grads, nodes, *a, out.shape(), g, None);
            accumulate_broadcast(grads, nodes, *b, out.shape(), g, None);
        }
        Op::Mul(a, b) => {
            let (ta, tb) = (value(nodes, *a), value(nodes, *b));
            let ma = Bcast::new(out.shape(), ta.shape());
            let mb = Bcast::new(out.shape(), tb.shape());
            accumulate_broadcast(grads, nodes, *a, out.shape(), g, Some((tb.data(), &mb)));
            accumulate_broadcast(grads, nodes, *b, out.shape(), g, Some((ta.data(), &ma)));
        }
        Op::Scale(a, s) => {
            if let Some(slot) = grad_slot(grads, nodes, *a) {
                slot.iter_mut().zip(g).for_each(|(d, gi)| *d += gi * s);
            }
        }
        Op::Identity(a) => {
            if let Some(slot) = grad_slot(grads, nodes, *a) {
                slot.iter_mut().zip(g).for_each(|(d, gi)| *d += gi);
            }
        }
        Op::Gelu(a) => {
            let x = value(nodes, *a).data();
            if let Some(slot) = grad_slot(grads, nodes, *a) {
                for ((d, gi), xi) in slot.iter_mut().zip(g).zip(x) {
                    *d += gi * gelu_grad(*xi);
                }
            }
        }
        Op::Softmax { input, axis } => {
            let (outer, n, inner) = axis_extents(out.shape(), *axis);
            let y = out.data();
            if let Some(slot) = grad_slot(grads, nodes, *input) {
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| o * n * inner + j * inner + i;
                        let dot: f64 = (0..n).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..n {
                            slot[at(j)] += y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
            center,
        } => {
            let d = out.shape()[out.shape().len() - 1];
            let rows = out.numel() / d;
            let gv = value(nodes, *gain).data().to_vec();
            if let Some(slot) = grad_slot(grads, nodes, *gain) {
                for r in 0..rows {
                    for j in 0..d {
                        slot[j] += g[r * d + j] * xhat[r * d + j];
                    }
                }
            }
            if let Some(slot) = grad_slot(grads, nodes, *bias) {
                for r in 0..rows {
                    for j in 0..d {
                        slot[j] += g[r * d + j];
                    }
                }
            }
            if let Some(slot) = grad_slot(grads, nodes, *x) {
                let mut gh = vec![0.0; d];
                for r in 0..rows {
                    let base = r * d;
                    for j in 0..d {
                        gh[j] = g[base + j] * gv[j];
                    }
                    let mean_gh = if *center { gh.iter().sum::<f64>() / d as f64 } else { 0.0 };
                    let mean_ghx = gh.iter().zip(&xhat[base..base + d]).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for j in 0..d {
                        slot[base + j] += inv_std[r] * (gh[j] - mean_gh - xhat[base + j] * mean_ghx);
                    }
                }
            }
        }
        Op::Transpose(a) => {
            let (r, c) = value(nodes, *a).dims2().expect("2-D");
            if let Some(slot) = grad_slot(grads, nodes, *a) {
                // out is [c×r]; out[j][i] = a[i][j]
                for i in 0..r {
                    for j in 0..c {
                        slot[i * c + j] += g[j * r + i];
                    }
                }
            }
        }
        Op::Concat { parts, axis } => {
            let (outer, _, inner) = axis_extents(out.shape(), *axis);
            let total = out.shape()[*axis] * inner;
            let mut offset = 0;
            for p in parts {
                let chunk = value(nodes, *p).shape()[*axis] * inner;
                if let Some(slot) = grad_slot(grads, nodes, *p) {
                    for o in 0..outer {
                        let src = &g[o * total + offset..o * total + offset + chunk];
                        for (d, s) in slot[o * chunk..(o + 1) * chunk].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
                offset += chunk;
            }
        }
        Op::Slice { input, axis, start } => {
            let in_shape = value(nodes, *input).shape().to_vec();
            let (outer, n, inner) = axis_extents(&in_shape, *axis);
            let len = out.shape()[*axis];
            if let Some(slot) = grad_slot(grads, nodes, *input) {
                for o in 0..outer {
                    let base = o * n * inner + start * inner;
                    let src = &g[o * len * inner..(o + 1) * len * inner];
                    for (d, s) in slot[base..base + len * inner].iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
        }
        Op::Mean { input, axis } => {
            let in_shape = value(nodes, *input).shape().to_vec();
            let (outer, n, inner) = axis_extents(&in_shape, *axis);
            if let Some(slot) = grad_slot(grads, nodes, *input) {
                for o in 0..outer {
                    for j in 0..n {
                        for i in 0..inner {
                            slot[o * n * inner + j * inner + i] += g[o * inner + i] / n as f64;
                        }
                    }
                }
            }
        }
        Op::Sum(a) => {
            if let Some(slot) = grad_slot(grads, nodes, *a) {
                slot.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        Op::Embedding { table, ids } => {
            let d = out.shape()[1];
            if let Some(slot) = grad_slot(grads, nodes, *table) {
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        slot[id * d + j] += g[r * d + j];
                    }
                }
            }
        }
        Op::Im2Col { input, geom } => {
            let pl = geom.patch_len();
            if let Some(slot) = grad_slot(grads, nodes, *input) {
                for_each_tap(geom, |o, col, src| slot[src] += g[o * pl + col]);
            }
        }
        Op::CausalAttention { q, k, v, heads, probs } => {
            attention_backward(nodes, grads, g, (*q, *k, *v), *heads, probs);
        }
        Op::CrossEntropy {
            logits,
            targets,
            mask,
            probs,
            count,
        } => {
            let vocab = value(nodes, *logits).shape()[1];
            let scale = g[0] / *count as f64;
            if let Some(slot) = grad_slot(grads, nodes, *logits) {
                for r in (0..mask.len()).filter(|&r| mask[r]) {
                    for j in 0..vocab {
                        let onehot = if j == targets[r] { 1.0 } else { 0.0 };
                        slot[r * vocab + j] += scale * (probs[r * vocab + j] - onehot);
                    }
                }
            }
        }
    }
}

fn attention_backward(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    g: &[f64],
    (q, k, v): (Var, Var, Var),
    heads: usize,
    probs: &[f64],
) {
    let (len, d) = value(nodes, q).dims2().expect("2-D");
    let hd = d / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let (qd, kd, vd) = (value(nodes, q).data(), value(nodes, k).data(), value(nodes, v).data());
    let mut dq = vec![0.0; len * d];
    let mut dk = vec![0.0; len * d];
    let mut dv = vec![0.0; len * d];
    let mut dp = vec![0.0; len];
    for h in 0..heads {
        let off = h * hd;
        for i in 0..len {
            let gi = &g[i * d + off..i * d + off + hd];
            let prow = &probs[(h * len + i) * len..(h * len + i + 1) * len];
            let mut dot = 0.0;
            for j in 0..=i {
                let vj = &vd[j * d + off..j * d + off + hd];
                dp[j] = gi.iter().zip(vj).map(|(a, b)| a * b).sum();
                dot += prow[j] * dp[j];
                for (dvj, gv) in dv[j * d + off..j * d + off + hd].iter_mut().zip(gi) {
                    *dvj += prow[j] * gv;
                }
            }
            for j in 0..=i {
                let ds = prow[j] * (dp[j] - dot) * scale;
                if ds == 0.0 {
                    continue;
                }
                for c in 0..hd {
                    dq[i * d + off + c] += ds * kd[j * d + off + c];
                    dk[j * d + off + c] += ds * qd[i * d + off + c];
                }
            }
        }
    }
    for (var, delta) in [(q, dq), (k, dk), (v, dv)] {
        if let Some(slot) = grad_slot(grads, nodes, var) {
            slot.iter_mut().zip(&delta).for_each(|(s, x)| *s += x);
        }
    }
}
