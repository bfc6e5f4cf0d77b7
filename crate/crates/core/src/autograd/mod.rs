//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation as a node holding its output value.
//! Nodes are appended in evaluation order, so the tape is acyclic and the
//! reverse pass is a single backwards sweep.

mod gradcheck;

pub use gradcheck::{grad_check, GradCheckReport};

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::routing::GatePlan;
use crate::tensor::{self, EinsumSpec, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Param,
    Constant,
    Einsum { spec: EinsumSpec, inputs: Vec<Var> },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var, Arc<Tensor>),
    Softmax(Var, String),
    LogSumExp(Var, String),
    RmsNorm { x: Var, gain: Var, eps: f64 },
    Rope { x: Var, seq: String, head: String, positions: Arc<Vec<usize>>, base: f64 },
    Silu(Var),
    Square(Var),
    Reshape { x: Var, names: Vec<String>, shape: Vec<usize> },
    Embed { table: Var, ids: Arc<Vec<usize>>, names: Vec<String>, shape: Vec<usize> },
    CrossEntropy { logits: Var, targets: Arc<Vec<usize>> },
    Sum(Var),
    Mean(Var),
    Gates { probs: Var, plan: Arc<GatePlan> },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Param | Op::Constant => vec![],
            Op::Einsum { inputs, .. } => inputs.clone(),
            Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::RmsNorm { x, gain, .. } => vec![*x, *gain],
            Op::Scale(a, _)
            | Op::AddConst(a, _)
            | Op::Softmax(a, _)
            | Op::LogSumExp(a, _)
            | Op::Silu(a)
            | Op::Square(a)
            | Op::Sum(a)
            | Op::Mean(a) => vec![*a],
            Op::Rope { x, .. } | Op::Reshape { x, .. } => vec![*x],
            Op::Embed { table, .. } => vec![*table],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::Gates { probs, .. } => vec![*probs],
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recorded computation. Parameters are leaves that receive gradients;
/// constants (masks, routing decisions) block them.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    zeros_like: Vec<(Vec<String>, Vec<usize>)>,
}

impl Gradients {
    /// Gradient for `var`; zeros when the loss does not depend on it.
    pub fn get(&self, var: Var) -> Tensor {
        match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => {
                let (names, shape) = &self.zeros_like[var.0];
                let n = shape.iter().product();
                Tensor::from_parts(names.clone(), shape.clone(), vec![0.0; n])
                    .expect("dims copied from a valid tensor")
            }
        }
    }

    pub fn try_get(&self, var: Var) -> Option<&Tensor> {
        self.grads[var.0].as_ref()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push_raw(t, Op::Param, true)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_raw(t, Op::Constant, false)
    }

    fn push_raw(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, op: Op) -> Result<Var> {
        let value = compute(&op, &self.nodes)?;
        let needs_grad = op.inputs().iter().any(|v| self.nodes[v.0].needs_grad);
        Ok(self.push_raw(value, op, needs_grad))
    }

    pub fn einsum(&mut self, spec: &str, inputs: &[Var]) -> Result<Var> {
        let spec = EinsumSpec::parse(spec)?;
        self.record(Op::Einsum {
            spec,
            inputs: inputs.to_vec(),
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        self.record(Op::Scale(a, factor))
    }

    /// Adds a constant tensor with identical dims (e.g. an attention mask).
    pub fn add_const(&mut self, a: Var, c: Tensor) -> Result<Var> {
        self.record(Op::AddConst(a, Arc::new(c)))
    }

    pub fn softmax(&mut self, a: Var, axis: &str) -> Result<Var> {
        self.record(Op::Softmax(a, axis.to_string()))
    }

    pub fn logsumexp(&mut self, a: Var, axis: &str) -> Result<Var> {
        self.record(Op::LogSumExp(a, axis.to_string()))
    }

    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        self.record(Op::RmsNorm { x, gain, eps })
    }

    pub fn rope(
        &mut self,
        x: Var,
        seq: &str,
        head: &str,
        positions: Vec<usize>,
        base: f64,
    ) -> Result<Var> {
        self.record(Op::Rope {
            x,
            seq: seq.to_string(),
            head: head.to_string(),
            positions: Arc::new(positions),
            base,
        })
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Silu(a))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Square(a))
    }

    pub fn reshape(&mut self, x: Var, dims: &[(&str, usize)]) -> Result<Var> {
        self.record(Op::Reshape {
            x,
            names: dims.iter().map(|(n, _)| n.to_string()).collect(),
            shape: dims.iter().map(|(_, e)| *e).collect(),
        })
    }

    /// Row lookup into a `(vocab, width)` table. `dims` describe the id
    /// layout; the table's width axis is appended.
    pub fn embed(&mut self, table: Var, ids: Vec<usize>, dims: &[(&str, usize)]) -> Result<Var> {
        let t = &self.nodes[table.0].value;
        if t.rank() != 2 {
            return Err(Error::Shape("embedding table must be rank 2".into()));
        }
        let mut names: Vec<String> = dims.iter().map(|(n, _)| n.to_string()).collect();
        let mut shape: Vec<usize> = dims.iter().map(|(_, e)| *e).collect();
        names.push(t.names()[1].clone());
        shape.push(t.shape()[1]);
        self.record(Op::Embed {
            table,
            ids: Arc::new(ids),
            names,
            shape,
        })
    }

    /// Mean token cross-entropy. The class axis must be the last axis.
    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<usize>) -> Result<Var> {
        self.record(Op::CrossEntropy {
            logits,
            targets: Arc::new(targets),
        })
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Mean(a))
    }

    /// Combine weights for a fixed routing decision; differentiable in `probs`.
    pub fn gates(&mut self, probs: Var, plan: Arc<GatePlan>) -> Result<Var> {
        self.record(Op::Gates { probs, plan })
    }

    /// Recomputes every recorded operation from its inputs and checks the
    /// results are bit-identical to the stored values.
    pub fn replay(&self) -> Result<()> {
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Param | Op::Constant) {
                continue;
            }
            let again = compute(&node.op, &self.nodes[..i])?;
            let same = again.names() == node.value.names()
                && again.shape() == node.value.shape()
                && again
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .all(|(a, b)| a.to_bits() == b.to_bits());
            if !same {
                return Err(Error::Numerical(format!("node {i} does not replay exactly")));
            }
        }
        Ok(())
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let n = self.nodes.len();
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Shape(format!(
                "loss must be scalar, has shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        let seed = self.nodes[loss.0].value.map(|_| 1.0);
        grads[loss.0] = Some(seed);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let contributions = self.local_grads(node, &g)?;
            for (input, contrib) in contributions {
                if !self.nodes[input.0].needs_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => {
                        for (a, c) in acc.data_mut().iter_mut().zip(contrib.data()) {
                            *a += c;
                        }
                    }
                    slot @ None => *slot = Some(contrib),
                }
            }
            grads[i] = Some(g);
        }
        // Only leaves keep their gradients; intermediate buffers are dropped.
        for (i, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Param) {
                grads[i] = None;
            }
        }
        let zeros_like = self
            .nodes
            .iter()
            .map(|nd| (nd.value.names().to_vec(), nd.value.shape().to_vec()))
            .collect();
        Ok(Gradients { grads, zeros_like })
    }

    fn local_grads(&self, node: &Node, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        Ok(match &node.op {
            Op::Param | Op::Constant => vec![],
            Op::Einsum { spec, inputs } => {
                let mut out = Vec::new();
                for (i, &x) in inputs.iter().enumerate() {
                    if wants(x) {
                        out.push((x, einsum_input_grad(spec, inputs, i, g, &self.nodes)?));
                    }
                }
                out
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Mul(a, b) => vec![
                (*a, g.zip_with(val(*b), |gv, bv| gv * bv)?),
                (*b, g.zip_with(val(*a), |gv, av| gv * av)?),
            ],
            Op::Scale(a, c) => vec![(*a, g.scale(*c))],
            Op::AddConst(a, _) => vec![(*a, g.clone())],
            Op::Softmax(a, axis) => vec![(*a, softmax_backward(&node.value, g, axis)?)],
            Op::LogSumExp(a, axis) => {
                let x = val(*a);
                let p = tensor::softmax(x, axis)?;
                vec![(*a, broadcast_mul_along(&p, g, axis)?)]
            }
            Op::RmsNorm { x, gain, eps } => {
                let (dx, dg) = rms_norm_backward(val(*x), val(*gain), *eps, g)?;
                vec![(*x, dx), (*gain, dg)]
            }
            Op::Rope {
                x,
                seq,
                head,
                positions,
                base,
            } => vec![(
                *x,
                tensor::rope_rotate(g, seq, head, positions, *base, -1.0)?,
            )],
            Op::Silu(a) => vec![(*a, g.zip_with(val(*a), |gv, xv| gv * tensor::silu_grad(xv))?)],
            Op::Square(a) => vec![(*a, g.zip_with(val(*a), |gv, xv| 2.0 * gv * xv)?)],
            Op::Reshape { x, .. } => {
                let src = val(*x);
                vec![(
                    *x,
                    Tensor::from_parts(
                        src.names().to_vec(),
                        src.shape().to_vec(),
                        g.data().to_vec(),
                    )?,
                )]
            }
            Op::Embed { table, ids, .. } => {
                let t = val(*table);
                let width = t.shape()[1];
                let mut dt = vec![0.0; t.len()];
                for (p, &id) in ids.iter().enumerate() {
                    let row = &mut dt[id * width..(id + 1) * width];
                    for (d, gv) in row.iter_mut().zip(&g.data()[p * width..(p + 1) * width]) {
                        *d += gv;
                    }
                }
                vec![(
                    *table,
                    Tensor::from_parts(t.names().to_vec(), t.shape().to_vec(), dt)?,
                )]
            }
            Op::CrossEntropy { logits, targets } => {
                let x = val(*logits);
                let classes = *x.shape().last().expect("rank checked in forward");
                let rows = targets.len();
                let scale = g.item()? / rows as f64;
                let axis = x.names().last().unwrap().clone();
                let mut p = tensor::softmax(x, &axis)?;
                let pd = p.data_mut();
                for (r, &t) in targets.iter().enumerate() {
                    pd[r * classes + t] -= 1.0;
                }
                pd.iter_mut().for_each(|v| *v *= scale);
                vec![(*logits, p)]
            }
            Op::Sum(a) => {
                let gv = g.item()?;
                vec![(*a, val(*a).map(|_| gv))]
            }
            Op::Mean(a) => {
                let x = val(*a);
                let gv = g.item()? / x.len() as f64;
                vec![(*a, x.map(|_| gv))]
            }
            Op::Gates { probs, plan } => vec![(*probs, plan.backward(val(*probs), g)?)],
        })
    }
}

fn compute(op: &Op, nodes: &[Node]) -> Result<Tensor> {
    let val = |v: &Var| &nodes[v.0].value;
    match op {
        Op::Param | Op::Constant => Err(Error::InvalidArgument("leaves are not computed".into())),
        Op::Einsum { spec, inputs } => {
            let ts: Vec<&Tensor> = inputs.iter().map(val).collect();
            tensor::einsum_parsed(spec, &ts)
        }
        Op::Add(a, b) => val(a).add(val(b)),
        Op::Mul(a, b) => val(a).zip_with(val(b), |x, y| x * y),
        Op::Scale(a, c) => Ok(val(a).scale(*c)),
        Op::AddConst(a, c) => val(a).add(c),
        Op::Softmax(a, axis) => tensor::softmax(val(a), axis),
        Op::LogSumExp(a, axis) => tensor::logsumexp(val(a), axis),
        Op::RmsNorm { x, gain, eps } => tensor::rms_norm(val(x), val(gain), *eps),
        Op::Rope {
            x,
            seq,
            head,
            positions,
            base,
        } => tensor::rope_apply(val(x), seq, head, positions, *base),
        Op::Silu(a) => Ok(val(a).map(tensor::silu)),
        Op::Square(a) => Ok(val(a).map(|v| v * v)),
        Op::Reshape { x, names, shape } => {
            Tensor::from_parts(names.clone(), shape.clone(), val(x).data().to_vec())
        }
        Op::Embed {
            table,
            ids,
            names,
            shape,
        } => {
            let t = val(table);
            let (vocab, width) = (t.shape()[0], t.shape()[1]);
            if ids.len() * width != shape.iter().product::<usize>() {
                return Err(Error::Shape("ids do not match embedding dims".into()));
            }
            let mut data = Vec::with_capacity(ids.len() * width);
            for &id in ids.iter() {
                if id >= vocab {
                    return Err(Error::InvalidArgument(format!(
                        "token id {id} outside vocabulary of {vocab}"
                    )));
                }
                data.extend_from_slice(&t.data()[id * width..(id + 1) * width]);
            }
            Tensor::from_parts(names.clone(), shape.clone(), data)
        }
        Op::CrossEntropy { logits, targets } => {
            let x = val(logits);
            let Some(&classes) = x.shape().last() else {
                return Err(Error::Shape("cross-entropy needs a class axis".into()));
            };
            if x.len() / classes != targets.len() {
                return Err(Error::Shape(format!(
                    "{} targets for {} rows",
                    targets.len(),
                    x.len() / classes
                )));
            }
            let mut total = 0.0;
            for (r, &t) in targets.iter().enumerate() {
                if t >= classes {
                    return Err(Error::InvalidArgument(format!(
                        "target {t} outside {classes} classes"
                    )));
                }
                let row = &x.data()[r * classes..(r + 1) * classes];
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().fold(0.0, |acc, v| acc + (v - max).exp()).ln();
                total += lse - row[t];
            }
            Ok(Tensor::scalar(total / targets.len() as f64))
        }
        Op::Sum(a) => Ok(Tensor::scalar(val(a).sum())),
        Op::Mean(a) => {
            let x = val(a);
            Ok(Tensor::scalar(x.sum() / x.len() as f64))
        }
        Op::Gates { probs, plan } => plan.forward(val(probs)),
    }
}

/// Gradient of an einsum operand: contract the upstream gradient with every
/// other operand, then broadcast over subscripts that were summed only
/// inside this operand.
fn einsum_input_grad(
    spec: &EinsumSpec,
    inputs: &[Var],
    which: usize,
    g: &Tensor,
    nodes: &[Node],
) -> Result<Tensor> {
    let target = &spec.inputs[which];
    let present = |c: &char| {
        spec.output.contains(c)
            || spec
                .inputs
                .iter()
                .enumerate()
                .any(|(j, t)| j != which && t.contains(c))
    };
    let reduced: Vec<char> = target.iter().copied().filter(present).collect();
    let mut terms = vec![spec.output.clone()];
    let mut operands = vec![g];
    for (j, t) in spec.inputs.iter().enumerate() {
        if j != which {
            terms.push(t.clone());
            operands.push(&nodes[inputs[j].0].value);
        }
    }
    let gspec = EinsumSpec {
        inputs: terms,
        output: reduced.clone(),
    };
    let partial = tensor::einsum_parsed(&gspec, &operands)?;
    let src = &nodes[inputs[which].0].value;
    let data = if reduced.len() == target.len() {
        partial.into_data()
    } else {
        // Broadcast along the missing subscripts.
        let mut out = Vec::with_capacity(src.len());
        let shape = src.shape();
        let pstrides = tensor::strides_of(partial.shape());
        let map: Vec<Option<usize>> = target
            .iter()
            .map(|c| reduced.iter().position(|r| r == c))
            .collect();
        let mut idx = vec![0usize; shape.len()];
        for _ in 0..src.len() {
            let off: usize = idx
                .iter()
                .zip(&map)
                .filter_map(|(i, m)| m.map(|p| i * pstrides[p]))
                .sum();
            out.push(partial.data()[off]);
            tensor::increment(&mut idx, shape);
        }
        out
    };
    Tensor::from_parts(src.names().to_vec(), src.shape().to_vec(), data)
}

fn softmax_backward(y: &Tensor, g: &Tensor, axis: &str) -> Result<Tensor> {
    let ax = y.axis(axis)?;
    let shape = y.shape();
    let outer: usize = shape[..ax].iter().product();
    let n = shape[ax];
    let inner: usize = shape[ax + 1..].iter().product();
    let (yd, gd) = (y.data(), g.data());
    let mut out = vec![0.0; yd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * n + k) * inner + i;
            let dot = (0..n).fold(0.0, |acc, k| acc + yd[at(k)] * gd[at(k)]);
            for k in 0..n {
                out[at(k)] = yd[at(k)] * (gd[at(k)] - dot);
            }
        }
    }
    Tensor::from_parts(y.names().to_vec(), y.shape().to_vec(), out)
}

/// `p * g` where `g` lacks `axis` and is broadcast along it.
fn broadcast_mul_along(p: &Tensor, g: &Tensor, axis: &str) -> Result<Tensor> {
    let ax = p.axis(axis)?;
    let shape = p.shape();
    let outer: usize = shape[..ax].iter().product();
    let n = shape[ax];
    let inner: usize = shape[ax + 1..].iter().product();
    let mut out = p.data().to_vec();
    for o in 0..outer {
        for i in 0..inner {
            let gv = g.data()[o * inner + i];
            for k in 0..n {
                out[(o * n + k) * inner + i] *= gv;
            }
        }
    }
    Tensor::from_parts(p.names().to_vec(), p.shape().to_vec(), out)
}

fn rms_norm_backward(x: &Tensor, gain: &Tensor, eps: f64, g: &Tensor) -> Result<(Tensor, Tensor)> {
    let ax = x.axis(&gain.names()[0])?;
    let shape = x.shape();
    let outer: usize = shape[..ax].iter().product();
    let n = shape[ax];
    let inner: usize = shape[ax + 1..].iter().product();
    let (xd, gd, wd) = (x.data(), g.data(), gain.data());
    let mut dx = vec![0.0; xd.len()];
    let mut dw = vec![0.0; n];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * n + k) * inner + i;
            let ms = (0..n).fold(0.0, |acc, k| acc + xd[at(k)] * xd[at(k)]) / n as f64;
            let r = 1.0 / (ms + eps).sqrt();
            let dot = (0..n).fold(0.0, |acc, k| acc + gd[at(k)] * wd[k] * xd[at(k)]);
            for k in 0..n {
                dx[at(k)] = r * wd[k] * gd[at(k)] - xd[at(k)] * r * r * r * dot / n as f64;
                dw[k] += gd[at(k)] * xd[at(k)] * r;
            }
        }
    }
    Ok((
        Tensor::from_parts(x.names().to_vec(), x.shape().to_vec(), dx)?,
        Tensor::from_parts(gain.names().to_vec(), gain.shape().to_vec(), dw)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grad_of_sum_is_ones() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector("a", vec![1.0, -2.0, 5.0]).unwrap());
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn grad_of_sum_of_softmax_vanishes() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector("a", vec![0.3, -1.2, 2.0, 0.0]).unwrap());
        let p = g.softmax(x, "a").unwrap();
        let s = g.sum(p).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(grads.get(x).data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn non_scalar_loss_rejected_and_unreachable_leaf_is_zero() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector("a", vec![1.0, 2.0]).unwrap());
        let unused = g.param(Tensor::vector("b", vec![3.0]).unwrap());
        let y = g.square(x).unwrap();
        assert!(matches!(g.backward(y), Err(Error::Shape(_))));
        let s = g.sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(unused).data(), &[0.0]);
        assert!(grads.try_get(unused).is_none());
    }

    #[test]
    fn constants_block_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector("a", vec![1.0, 2.0]).unwrap());
        let c = g.constant(Tensor::vector("a", vec![3.0, 4.0]).unwrap());
        let y = g.mul(x, c).unwrap();
        let s = g.sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).data(), &[3.0, 4.0]);
        assert!(grads.try_get(c).is_none());
    }

    #[test]
    fn einsum_grad_broadcasts_one_sided_sums() {
        let mut g = Graph::new();
        let a = g.param(Tensor::new(&[("a", 2), ("b", 2)], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let v = g.param(Tensor::vector("c", vec![1.0, 1.0, 1.0]).unwrap());
        let y = g.einsum("ab,c->a", &[a, v]).unwrap();
        let s = g.sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(a).data(), &[3.0; 4]);
        assert_eq!(grads.get(v).data(), &[10.0; 3]);
    }

    #[test]
    fn replay_reproduces_values() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_fn(&[("t", 3), ("d", 4)], |i| (i[0] + i[1]) as f64 * 0.1).unwrap());
        let w = g.param(Tensor::ones(&[("d", 4)]).unwrap());
        let n = g.rms_norm(x, w, 1e-6).unwrap();
        let r = g.rope(n, "t", "d", vec![0, 1, 2], 10000.0).unwrap();
        let l = g.logsumexp(r, "d").unwrap();
        let s = g.mean(l).unwrap();
        assert!(g.replay().is_ok());
        assert!(g.backward(s).is_ok());
    }
}
