//! Token-at-a-time reference for the sparse FFN, written with plain loops.

use rand::Rng;

use super::MoeWeights;
use crate::error::{Error, Result};
use crate::routing::{expert_capacity, RouterConfig, SecondChoicePolicy};
use crate::tensor::Tensor;

fn silu(v: f64) -> f64 {
    v / (1.0 + (-v).exp())
}

/// Computes the MoE output one token at a time: router softmax, top-k
/// selection, rank-major capacity within each group, then a gated sum of
/// the surviving experts' two-layer MLPs. Consumes `rng` in the same order
/// as the einsum path, so both agree under either second-choice policy.
pub fn moe_ffn_oracle<R: Rng + ?Sized>(
    x: &Tensor,
    w: &MoeWeights,
    cfg: &RouterConfig,
    rng: &mut R,
) -> Result<Tensor> {
    cfg.validate()?;
    if x.rank() != 4 {
        return Err(Error::Shape(format!("expected (o, g, s, m), got {:?}", x.dims())));
    }
    let (s, m) = (x.shape()[2], x.shape()[3]);
    let e = cfg.num_experts;
    let h = w.w_in.extent("h")?;
    let tokens = x.len() / m;
    let xs = x.data();

    let mut routes: Vec<Vec<(usize, f64)>> = Vec::with_capacity(tokens);
    for t in 0..tokens {
        let row = &xs[t * m..(t + 1) * m];
        let logits: Vec<f64> = (0..e)
            .map(|j| {
                let mut acc = 0.0;
                for (i, xv) in row.iter().enumerate() {
                    acc += xv * w.router.get(&[i, j]);
                }
                acc
            })
            .collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = exps.iter().fold(0.0, |a, v| a + v);
        let p: Vec<f64> = exps.iter().map(|v| v / z).collect();

        let mut chosen: Vec<usize> = Vec::with_capacity(cfg.top_k);
        for rank in 0..cfg.top_k {
            let free = (0..e).filter(|j| !chosen.contains(j));
            let pick = if rank > 0 && cfg.second_choice_policy == SecondChoicePolicy::RandomProportional {
                let free: Vec<usize> = free.collect();
                let mass: f64 = free.iter().fold(0.0, |a, &j| a + p[j]);
                let mut u = rng.random::<f64>() * mass;
                let mut pick = free[free.len() - 1];
                for &j in &free {
                    if u < p[j] {
                        pick = j;
                        break;
                    }
                    u -= p[j];
                }
                pick
            } else {
                // Highest probability, lowest index on ties.
                free.fold(None, |best: Option<usize>, j| match best {
                    Some(b) if p[b] >= p[j] => Some(b),
                    _ => Some(j),
                })
                .expect("top_k <= experts")
            };
            chosen.push(pick);
        }
        let denom: f64 = chosen.iter().fold(0.0, |a, &j| a + p[j]);
        routes.push(
            chosen
                .iter()
                .map(|&j| (j, if cfg.normalize_gates { p[j] / denom } else { p[j] }))
                .collect(),
        );
    }

    let capacity = expert_capacity(s, cfg);
    let mut kept = vec![vec![false; cfg.top_k]; tokens];
    for group_start in (0..tokens).step_by(s) {
        let mut used = vec![0usize; e];
        for rank in 0..cfg.top_k {
            for t in group_start..group_start + s {
                let j = routes[t][rank].0;
                if used[j] < capacity {
                    used[j] += 1;
                    kept[t][rank] = true;
                }
            }
        }
    }

    let mut out = vec![0.0; x.len()];
    for t in 0..tokens {
        let row = &xs[t * m..(t + 1) * m];
        for (rank, &(j, gate)) in routes[t].iter().enumerate() {
            if !kept[t][rank] {
                continue;
            }
            let hidden: Vec<f64> = (0..h)
                .map(|k| {
                    let mut acc = 0.0;
                    for (i, xv) in row.iter().enumerate() {
                        acc += xv * w.w_in.get(&[j, i, k]);
                    }
                    silu(acc)
                })
                .collect();
            for i in 0..m {
                let mut acc = 0.0;
                for (k, hv) in hidden.iter().enumerate() {
                    acc += hv * w.w_out.get(&[j, k, i]);
                }
                out[t * m + i] += gate * acc;
            }
        }
    }
    Tensor::from_parts(x.names().to_vec(), x.shape().to_vec(), out)
}
