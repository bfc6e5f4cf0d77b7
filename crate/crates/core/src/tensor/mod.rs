//! Dense row-major `f64` tensors with named dimensions.
//!
//! Dimension names double as einsum subscripts: `einsum("ogsm,me->ogse", ..)`
//! names the output dims `o`, `g`, `s`, `e`. Names are ordinary strings, so
//! longer names work everywhere except inside einsum specs.

mod einsum;
mod ops;

pub use einsum::{einsum, EinsumSpec};
pub use ops::{logsumexp, rms_norm, rope_apply, silu, silu_grad, softmax, top_k, TopK};
pub(crate) use einsum::einsum_parsed;
pub(crate) use ops::rope_rotate;

use crate::error::{Error, Result};

/// Highest rank any tensor may have.
pub const MAX_RANK: usize = 6;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    names: Vec<String>,
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor from `(name, extent)` pairs and row-major data.
    pub fn new(dims: &[(&str, usize)], data: Vec<f64>) -> Result<Self> {
        let names: Vec<String> = dims.iter().map(|(n, _)| n.to_string()).collect();
        let shape: Vec<usize> = dims.iter().map(|(_, e)| *e).collect();
        Self::from_parts(names, shape, data)
    }

    pub fn from_parts(names: Vec<String>, shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if names.len() != shape.len() {
            return Err(Error::Shape(format!(
                "{} names for {} extents",
                names.len(),
                shape.len()
            )));
        }
        if shape.len() > MAX_RANK {
            return Err(Error::Shape(format!(
                "rank {} exceeds maximum {MAX_RANK}",
                shape.len()
            )));
        }
        for (i, n) in names.iter().enumerate() {
            if n.is_empty() {
                return Err(Error::Shape("empty dimension name".into()));
            }
            if names[..i].contains(n) {
                return Err(Error::Shape(format!("duplicate dimension name '{n}'")));
            }
        }
        if let Some(pos) = shape.iter().position(|&e| e == 0) {
            return Err(Error::Shape(format!("dimension '{}' has extent 0", names[pos])));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} needs {expected} values, got {}",
                shape,
                data.len()
            )));
        }
        Ok(Self { names, shape, data })
    }

    pub fn full(dims: &[(&str, usize)], value: f64) -> Result<Self> {
        let n = dims.iter().map(|(_, e)| *e).product();
        Self::new(dims, vec![value; n])
    }

    pub fn zeros(dims: &[(&str, usize)]) -> Result<Self> {
        Self::full(dims, 0.0)
    }

    pub fn ones(dims: &[(&str, usize)]) -> Result<Self> {
        Self::full(dims, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            names: Vec::new(),
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(name: &str, data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Self::new(&[(name, n)], data)
    }

    /// Evaluates `f` at every multi-index in row-major order.
    pub fn from_fn(dims: &[(&str, usize)], mut f: impl FnMut(&[usize]) -> f64) -> Result<Self> {
        let shape: Vec<usize> = dims.iter().map(|(_, e)| *e).collect();
        let n: usize = shape.iter().product();
        let mut idx = vec![0usize; shape.len()];
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f(&idx));
            increment(&mut idx, &shape);
        }
        Self::new(dims, data)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dims(&self) -> Vec<(&str, usize)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.shape.iter().copied())
            .collect()
    }

    pub fn axis(&self, name: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::Spec(format!("no axis '{name}' in {:?}", self.names)))
    }

    pub fn extent(&self, name: &str) -> Result<usize> {
        Ok(self.shape[self.axis(name)?])
    }

    pub fn strides(&self) -> Vec<usize> {
        strides_of(&self.shape)
    }

    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut off = 0;
        for (i, (&ix, &ext)) in index.iter().zip(&self.shape).enumerate() {
            debug_assert!(ix < ext, "index {ix} out of range on axis {i}");
            off = off * ext + ix;
        }
        off
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let off = self.offset(index);
        self.data[off] = value;
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(Error::Shape(format!(
                "expected a single element, shape is {:?}",
                self.shape
            )))
        }
    }

    /// Same data under new names and extents (row-major reinterpretation).
    pub fn reshape(&self, dims: &[(&str, usize)]) -> Result<Self> {
        Self::new(dims, self.data.clone())
    }

    pub fn rename(&self, names: &[&str]) -> Result<Self> {
        if names.len() != self.rank() {
            return Err(Error::Shape(format!(
                "rename with {} names on rank {}",
                names.len(),
                self.rank()
            )));
        }
        Self::from_parts(
            names.iter().map(|s| s.to_string()).collect(),
            self.shape.clone(),
            self.data.clone(),
        )
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            names: self.names.clone(),
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise combination of two tensors with identical dims.
    pub fn zip_with(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.expect_same_dims(other)?;
        Ok(Self {
            names: self.names.clone(),
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn expect_same_dims(&self, other: &Tensor) -> Result<()> {
        if self.names != other.names || self.shape != other.shape {
            return Err(Error::Shape(format!(
                "dims {:?} do not match {:?}",
                self.dims(),
                other.dims()
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn scale(&self, factor: f64) -> Self {
        self.map(|v| v * factor)
    }

    /// Sum of all elements, ascending index order.
    pub fn sum(&self) -> f64 {
        self.data.iter().fold(0.0, |acc, &v| acc + v)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        self.expect_same_dims(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    /// Moves axes into the order given by `names`.
    pub fn permute(&self, names: &[&str]) -> Result<Self> {
        if names.len() != self.rank() {
            return Err(Error::Spec(format!(
                "permute needs {} names, got {}",
                self.rank(),
                names.len()
            )));
        }
        let perm = names
            .iter()
            .map(|n| self.axis(n))
            .collect::<Result<Vec<_>>>()?;
        let data = permute_data(&self.data, &self.shape, &perm);
        Self::from_parts(
            names.iter().map(|s| s.to_string()).collect(),
            perm.iter().map(|&p| self.shape[p]).collect(),
            data,
        )
    }
}

pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// Row-major odometer step. Returns false once the index wraps to zero.
pub(crate) fn increment(idx: &mut [usize], shape: &[usize]) -> bool {
    for d in (0..idx.len()).rev() {
        idx[d] += 1;
        if idx[d] < shape[d] {
            return true;
        }
        idx[d] = 0;
    }
    false
}

/// Gathers `data` (with `shape`) so that output axis `i` is input axis `perm[i]`.
pub(crate) fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    if perm.iter().enumerate().all(|(i, &p)| i == p) {
        return data.to_vec();
    }
    let strides = strides_of(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let out_strides: Vec<usize> = perm.iter().map(|&p| strides[p]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    if out_shape.is_empty() {
        out.extend_from_slice(data);
        return out;
    }
    let last = out_shape.len() - 1;
    let (inner_ext, inner_stride) = (out_shape[last], out_strides[last]);
    let mut idx = vec![0usize; last];
    loop {
        let base: usize = idx.iter().zip(&out_strides).map(|(i, s)| i * s).sum();
        for j in 0..inner_ext {
            out.push(data[base + j * inner_stride]);
        }
        if !increment(&mut idx, &out_shape[..last]) {
            break;
        }
    }
    out
}
