use super::Tensor;
use crate::error::{Error, Result};

/// Splits `shape` around `axis` into (outer, extent, inner) element counts.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Numerically stable softmax along the named axis.
pub fn softmax(x: &Tensor, axis: &str) -> Result<Tensor> {
    let ax = x.axis(axis)?;
    let (outer, n, inner) = split_axis(x.shape(), ax);
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * n + k) * inner + i;
            let max = (0..n).map(|k| src[at(k)]).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for k in 0..n {
                let e = (src[at(k)] - max).exp();
                out[at(k)] = e;
                sum += e;
            }
            for k in 0..n {
                out[at(k)] /= sum;
            }
        }
    }
    Tensor::from_parts(x.names().to_vec(), x.shape().to_vec(), out)
}

/// `max + ln Σ exp(x - max)` along the named axis, which is removed.
pub fn logsumexp(x: &Tensor, axis: &str) -> Result<Tensor> {
    let ax = x.axis(axis)?;
    let (outer, n, inner) = split_axis(x.shape(), ax);
    let src = x.data();
    let mut out = Vec::with_capacity(outer * inner);
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * n + k) * inner + i;
            let max = (0..n).map(|k| src[at(k)]).fold(f64::NEG_INFINITY, f64::max);
            let sum = (0..n).fold(0.0, |acc, k| acc + (src[at(k)] - max).exp());
            out.push(max + sum.ln());
        }
    }
    let mut names = x.names().to_vec();
    let mut shape = x.shape().to_vec();
    names.remove(ax);
    shape.remove(ax);
    Tensor::from_parts(names, shape, out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TopK {
    /// Same dims as the input with the selected axis cut to `k`.
    pub values: Tensor,
    /// Source positions along the axis, laid out like `values`.
    pub indices: Vec<usize>,
}

/// Largest `k` entries along `axis`, descending, ties to the lowest index.
pub fn top_k(x: &Tensor, axis: &str, k: usize) -> Result<TopK> {
    let ax = x.axis(axis)?;
    let (outer, n, inner) = split_axis(x.shape(), ax);
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!(
            "k={k} outside 1..={n} for axis '{axis}'"
        )));
    }
    let src = x.data();
    let mut values = vec![0.0; outer * k * inner];
    let mut indices = vec![0usize; outer * k * inner];
    let mut order: Vec<usize> = Vec::with_capacity(n);
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * n + j) * inner + i;
            order.clear();
            order.extend(0..n);
            order.sort_by(|&a, &b| src[at(b)].total_cmp(&src[at(a)]).then(a.cmp(&b)));
            for (r, &j) in order.iter().take(k).enumerate() {
                let dst = (o * k + r) * inner + i;
                values[dst] = src[at(j)];
                indices[dst] = j;
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape[ax] = k;
    Ok(TopK {
        values: Tensor::from_parts(x.names().to_vec(), shape, values)?,
        indices,
    })
}

/// RMS normalisation over the axis named by `gain`'s only dimension:
/// `x * gain / sqrt(mean(x²) + eps)`.
pub fn rms_norm(x: &Tensor, gain: &Tensor, eps: f64) -> Result<Tensor> {
    if gain.rank() != 1 {
        return Err(Error::Shape(format!("gain must be rank 1, has {:?}", gain.shape())));
    }
    if !(eps >= 0.0) {
        return Err(Error::InvalidArgument(format!("eps must be >= 0, got {eps}")));
    }
    let axis = &gain.names()[0];
    let ax = x.axis(axis)?;
    let (outer, n, inner) = split_axis(x.shape(), ax);
    if n != gain.len() {
        return Err(Error::Shape(format!(
            "gain has {} entries, axis '{axis}' has {n}",
            gain.len()
        )));
    }
    let (src, g) = (x.data(), gain.data());
    let mut out = vec![0.0; src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * n + k) * inner + i;
            let ms = (0..n).fold(0.0, |acc, k| acc + src[at(k)] * src[at(k)]) / n as f64;
            let r = 1.0 / (ms + eps).sqrt();
            for k in 0..n {
                out[at(k)] = src[at(k)] * r * g[k];
            }
        }
    }
    Tensor::from_parts(x.names().to_vec(), x.shape().to_vec(), out)
}

/// Rotary position embedding. Adjacent pairs `(2i, 2i+1)` along `head_axis`
/// are rotated by `positions[t] * base^(-2i/d)` where `t` indexes `seq_axis`.
pub fn rope_apply(
    x: &Tensor,
    seq_axis: &str,
    head_axis: &str,
    positions: &[usize],
    base: f64,
) -> Result<Tensor> {
    rope_rotate(x, seq_axis, head_axis, positions, base, 1.0)
}

/// `direction = -1` applies the inverse rotation (used by the backward pass).
pub(crate) fn rope_rotate(
    x: &Tensor,
    seq_axis: &str,
    head_axis: &str,
    positions: &[usize],
    base: f64,
    direction: f64,
) -> Result<Tensor> {
    let sa = x.axis(seq_axis)?;
    let ha = x.axis(head_axis)?;
    let d = x.shape()[ha];
    if d % 2 != 0 {
        return Err(Error::Shape(format!("head dimension {d} is odd")));
    }
    if positions.len() != x.shape()[sa] {
        return Err(Error::Shape(format!(
            "{} positions for sequence extent {}",
            positions.len(),
            x.shape()[sa]
        )));
    }
    let strides = x.strides();
    let h_stride = strides[ha];
    let inv_freq: Vec<f64> = (0..d / 2)
        .map(|i| base.powf(-2.0 * i as f64 / d as f64))
        .collect();
    let src = x.data();
    let mut out = src.to_vec();
    // Walk every element whose head index is even; it anchors one rotation pair.
    let mut idx = vec![0usize; x.rank()];
    let shape = x.shape();
    loop {
        if idx[ha] % 2 == 0 {
            let off: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
            let t = idx[sa];
            let theta = positions[t] as f64 * inv_freq[idx[ha] / 2];
            let (sin, cos) = (direction * theta).sin_cos();
            let (a, b) = (src[off], src[off + h_stride]);
            out[off] = a * cos - b * sin;
            out[off + h_stride] = a * sin + b * cos;
        }
        if !super::increment(&mut idx, shape) {
            break;
        }
    }
    Tensor::from_parts(x.names().to_vec(), x.shape().to_vec(), out)
}

pub fn silu(v: f64) -> f64 {
    v / (1.0 + (-v).exp())
}

/// d/dv of `silu(v)`.
pub fn silu_grad(v: f64) -> f64 {
    let s = 1.0 / (1.0 + (-v).exp());
    s * (1.0 + v * (1.0 - s))
}
