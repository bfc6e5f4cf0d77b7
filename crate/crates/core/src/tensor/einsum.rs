//! Named-subscript contraction.
//!
//! Two-operand contractions where every summed subscript appears in both
//! operands are lowered to a batched matrix product. Everything else goes
//! through a generic multi-index loop. Both kernels accumulate each output
//! element from `0.0` over the summed subscripts in ascending row-major order
//! (subscripts ordered by first appearance), so results do not depend on the
//! kernel that ran.

use super::{permute_data, strides_of, Tensor, MAX_RANK};
use crate::error::{Error, Result};

/// A parsed `"ab,bc->ac"` subscript string.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EinsumSpec {
    pub inputs: Vec<Vec<char>>,
    pub output: Vec<char>,
}

impl EinsumSpec {
    pub fn parse(spec: &str) -> Result<Self> {
        let spec: String = spec.chars().filter(|c| !c.is_whitespace()).collect();
        let (lhs, rhs) = spec
            .split_once("->")
            .ok_or_else(|| Error::Spec(format!("'{spec}' has no '->'")))?;
        let parse_term = |term: &str| -> Result<Vec<char>> {
            let chars: Vec<char> = term.chars().collect();
            for (i, c) in chars.iter().enumerate() {
                if !c.is_ascii_alphabetic() {
                    return Err(Error::Spec(format!("bad subscript '{c}' in '{spec}'")));
                }
                if chars[..i].contains(c) {
                    return Err(Error::Spec(format!(
                        "repeated subscript '{c}' in term '{term}'"
                    )));
                }
            }
            if chars.len() > MAX_RANK {
                return Err(Error::Spec(format!("term '{term}' exceeds rank {MAX_RANK}")));
            }
            Ok(chars)
        };
        let inputs = lhs.split(',').map(parse_term).collect::<Result<Vec<_>>>()?;
        let output = parse_term(rhs)?;
        for c in &output {
            if !inputs.iter().any(|t| t.contains(c)) {
                return Err(Error::Spec(format!(
                    "output subscript '{c}' appears in no input of '{spec}'"
                )));
            }
        }
        Ok(Self { inputs, output })
    }

    /// Subscripts summed over, in order of first appearance.
    pub fn contracted(&self) -> Vec<char> {
        let mut out = Vec::new();
        for term in &self.inputs {
            for &c in term {
                if !self.output.contains(&c) && !out.contains(&c) {
                    out.push(c);
                }
            }
        }
        out
    }
}

pub fn einsum(spec: &str, inputs: &[&Tensor]) -> Result<Tensor> {
    let parsed = EinsumSpec::parse(spec)?;
    einsum_parsed(&parsed, inputs)
}

pub(crate) fn einsum_parsed(spec: &EinsumSpec, inputs: &[&Tensor]) -> Result<Tensor> {
    if spec.inputs.len() != inputs.len() {
        return Err(Error::Spec(format!(
            "spec has {} operands, got {} tensors",
            spec.inputs.len(),
            inputs.len()
        )));
    }
    let mut extents = [0usize; 128];
    for (term, t) in spec.inputs.iter().zip(inputs) {
        if term.len() != t.rank() {
            return Err(Error::Spec(format!(
                "term '{}' names {} dims but tensor has rank {}",
                term.iter().collect::<String>(),
                term.len(),
                t.rank()
            )));
        }
        for (&c, &ext) in term.iter().zip(t.shape()) {
            let slot = &mut extents[c as usize];
            if *slot == 0 {
                *slot = ext;
            } else if *slot != ext {
                return Err(Error::Shape(format!(
                    "subscript '{c}' has extents {} and {ext}",
                    *slot
                )));
            }
        }
    }
    let out_shape: Vec<usize> = spec.output.iter().map(|&c| extents[c as usize]).collect();
    let out_names: Vec<String> = spec.output.iter().map(|c| c.to_string()).collect();

    let data = if inputs.len() == 2 && matmul_compatible(spec) {
        batched_matmul(spec, inputs[0], inputs[1], &extents)
    } else {
        generic(spec, inputs, &extents)
    };
    Tensor::from_parts(out_names, out_shape, data)
}

fn matmul_compatible(spec: &EinsumSpec) -> bool {
    let (a, b) = (&spec.inputs[0], &spec.inputs[1]);
    a.iter().all(|c| spec.output.contains(c) || b.contains(c))
        && b.iter().all(|c| spec.output.contains(c) || a.contains(c))
}

fn batched_matmul(spec: &EinsumSpec, a: &Tensor, b: &Tensor, extents: &[usize; 128]) -> Vec<f64> {
    let (ta, tb, out) = (&spec.inputs[0], &spec.inputs[1], &spec.output);
    let batch: Vec<char> = ta
        .iter()
        .copied()
        .filter(|c| tb.contains(c) && out.contains(c))
        .collect();
    let left: Vec<char> = ta
        .iter()
        .copied()
        .filter(|c| !tb.contains(c) && out.contains(c))
        .collect();
    let right: Vec<char> = tb
        .iter()
        .copied()
        .filter(|c| !ta.contains(c) && out.contains(c))
        .collect();
    let contracted = spec.contracted();

    let pos = |term: &[char], c: char| term.iter().position(|&x| x == c).unwrap();
    let ext = |cs: &[char]| cs.iter().map(|&c| extents[c as usize]).product::<usize>();
    let (nb, ni, nj, nk) = (ext(&batch), ext(&left), ext(&right), ext(&contracted));

    let perm_a: Vec<usize> = batch
        .iter()
        .chain(&left)
        .chain(&contracted)
        .map(|&c| pos(ta, c))
        .collect();
    let perm_b: Vec<usize> = batch
        .iter()
        .chain(&contracted)
        .chain(&right)
        .map(|&c| pos(tb, c))
        .collect();
    let ap = permute_data(a.data(), a.shape(), &perm_a);
    let bp = permute_data(b.data(), b.shape(), &perm_b);

    let mut c = vec![0.0; nb * ni * nj];
    for bi in 0..nb {
        for i in 0..ni {
            let row = (bi * ni + i) * nj;
            let crow = &mut c[row..row + nj];
            let arow = &ap[(bi * ni + i) * nk..(bi * ni + i + 1) * nk];
            for (k, &av) in arow.iter().enumerate() {
                // Skipping exact zeros leaves the running sum unchanged for finite operands.
                if av == 0.0 {
                    continue;
                }
                let brow = &bp[(bi * nk + k) * nj..(bi * nk + k + 1) * nj];
                for (cv, &bv) in crow.iter_mut().zip(brow) {
                    *cv += av * bv;
                }
            }
        }
    }

    // c is laid out as [batch.., left.., right..]; reorder to the output subscripts.
    let produced: Vec<char> = batch.iter().chain(&left).chain(&right).copied().collect();
    let produced_shape: Vec<usize> = produced.iter().map(|&c| extents[c as usize]).collect();
    let perm_out: Vec<usize> = out.iter().map(|&ch| pos(&produced, ch)).collect();
    permute_data(&c, &produced_shape, &perm_out)
}

fn generic(spec: &EinsumSpec, inputs: &[&Tensor], extents: &[usize; 128]) -> Vec<f64> {
    let contracted = spec.contracted();
    let out_shape: Vec<usize> = spec.output.iter().map(|&c| extents[c as usize]).collect();
    let sum_shape: Vec<usize> = contracted.iter().map(|&c| extents[c as usize]).collect();

    // Per-operand stride of every output / summed subscript (0 when absent).
    let stride_tables = |letters: &[char]| -> Vec<Vec<usize>> {
        spec.inputs
            .iter()
            .zip(inputs)
            .map(|(term, t)| {
                let strides = strides_of(t.shape());
                letters
                    .iter()
                    .map(|c| term.iter().position(|x| x == c).map_or(0, |p| strides[p]))
                    .collect()
            })
            .collect()
    };
    let out_strides = stride_tables(&spec.output);
    let sum_strides = stride_tables(&contracted);

    let n_out: usize = out_shape.iter().product();
    let n_sum: usize = sum_shape.iter().product();
    let mut result = Vec::with_capacity(n_out);
    let mut out_idx = vec![0usize; out_shape.len()];
    let mut base = vec![0usize; inputs.len()];
    let mut sum_idx = vec![0usize; sum_shape.len()];
    for _ in 0..n_out {
        for (op, b) in base.iter_mut().enumerate() {
            *b = out_idx
                .iter()
                .zip(&out_strides[op])
                .map(|(i, s)| i * s)
                .sum();
        }
        let mut acc = 0.0;
        sum_idx.iter_mut().for_each(|v| *v = 0);
        for _ in 0..n_sum {
            let mut prod = 0.0;
            for (op, t) in inputs.iter().enumerate() {
                let off = base[op]
                    + sum_idx
                        .iter()
                        .zip(&sum_strides[op])
                        .map(|(i, s)| i * s)
                        .sum::<usize>();
                let v = t.data()[off];
                prod = if op == 0 { v } else { prod * v };
            }
            acc += prod;
            super::increment(&mut sum_idx, &sum_shape);
        }
        result.push(acc);
        super::increment(&mut out_idx, &out_shape);
    }
    result
}
