use std::sync::Arc;

use rand::Rng;

use super::{FfnParams, LayerParams, ModelConfig, ModelParams, Params};
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::routing::{route, GatePlan, RouterConfig, RoutingOutcome};
use crate::tensor::Tensor;

/// Additive mask for attention to future positions.
const MASK: f64 = -1e9;

/// Concrete weights of one MoE block.
#[derive(Clone, Debug, PartialEq)]
pub struct MoeWeights {
    /// `(m, e)`
    pub router: Tensor,
    /// `(e, m, h)`
    pub w_in: Tensor,
    /// `(e, h, m)`
    pub w_out: Tensor,
}

/// Per-layer routing side outputs.
#[derive(Clone, Debug)]
pub struct MoeAux {
    /// Scalar load-balancing loss.
    pub balance: Var,
    /// Scalar router z-loss.
    pub z: Var,
    pub outcome: RoutingOutcome,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `(b, t, v)`
    pub logits: Var,
    /// One entry per MoE layer, bottom to top.
    pub aux: Vec<MoeAux>,
}

#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    pub cross_entropy: Var,
    /// Summed over MoE layers.
    pub balance: Option<Var>,
    /// Summed over MoE layers.
    pub z: Option<Var>,
}

/// Puts every weight on the tape, as parameters or as constants.
pub fn register(g: &mut Graph, params: &ModelParams, trainable: bool) -> Params<Var> {
    params.map(|_, t| {
        if trainable {
            g.param(t.clone())
        } else {
            g.constant(t.clone())
        }
    })
}

/// Causal multi-head self-attention with RoPE on `(b, t, m)` input.
pub fn attention(g: &mut Graph, x: Var, layer: &LayerParams<Var>, cfg: &ModelConfig) -> Result<Var> {
    let shape = g.value(x).shape().to_vec();
    let (b, t) = (shape[0], shape[1]);
    let (n, d) = (cfg.heads, cfg.head_dim());
    let xn = g.rms_norm(x, layer.attn_norm, cfg.norm_eps)?;
    let q = g.einsum("btm,mnd->btnd", &[xn, layer.wq])?;
    let k = g.einsum("btm,mnd->btnd", &[xn, layer.wk])?;
    let v = g.einsum("btm,mnd->btnd", &[xn, layer.wv])?;
    let positions: Vec<usize> = (0..t).collect();
    let q = g.rope(q, "t", "d", positions.clone(), cfg.rope_base)?;
    let k = g.rope(k, "t", "d", positions, cfg.rope_base)?;
    let k = g.reshape(k, &[("b", b), ("u", t), ("n", n), ("d", d)])?;
    let v = g.reshape(v, &[("b", b), ("u", t), ("n", n), ("d", d)])?;
    let scores = g.einsum("btnd,bund->bntu", &[q, k])?;
    let scores = g.scale(scores, 1.0 / (d as f64).sqrt())?;
    let mask = Tensor::from_fn(&[("b", b), ("n", n), ("t", t), ("u", t)], |i| {
        if i[3] > i[2] {
            MASK
        } else {
            0.0
        }
    })?;
    let scores = g.add_const(scores, mask)?;
    let attn = g.softmax(scores, "u")?;
    let ctx = g.einsum("bntu,bund->btnd", &[attn, v])?;
    g.einsum("btnd,ndm->btm", &[ctx, layer.wo])
}

/// Sparse FFN on `(o, g, s, m)` tokens. Routing is decided on the current
/// probabilities and frozen; gradients reach the router through the gate
/// values and the auxiliary losses.
pub fn moe_ffn_forward<R: Rng + ?Sized>(
    g: &mut Graph,
    x: Var,
    router: Var,
    w_in: Var,
    w_out: Var,
    cfg: &RouterConfig,
    rng: &mut R,
) -> Result<(Var, MoeAux)> {
    let logits = g.einsum("ogsm,me->ogse", &[x, router])?;
    let probs = g.softmax(logits, "e")?;
    let outcome = route(g.value(probs), cfg, rng)?;
    let dispatch = g.constant(outcome.dispatch.clone());
    let expert_in = g.einsum("ogsec,ogsm->oegcm", &[dispatch, x])?;
    let hidden = g.einsum("oegcm,emh->oegch", &[expert_in, w_in])?;
    let hidden = g.silu(hidden)?;
    let expert_out = g.einsum("oegch,ehm->oegcm", &[hidden, w_out])?;
    let combine = g.gates(probs, Arc::new(GatePlan::new(&outcome, cfg.normalize_gates)))?;
    let y = g.einsum("ogsec,oegcm->ogsm", &[combine, expert_out])?;

    let f = g.constant(Tensor::vector("e", outcome.stats.dispatch_fraction.clone())?);
    let pbar = g.einsum("ogse->e", &[probs])?;
    let pbar = g.scale(pbar, 1.0 / outcome.dims.tokens() as f64)?;
    let dot = g.einsum("e,e->", &[f, pbar])?;
    let balance = g.scale(dot, cfg.num_experts as f64)?;
    let lse = g.logsumexp(logits, "e")?;
    let lse2 = g.square(lse)?;
    let z = g.mean(lse2)?;
    Ok((y, MoeAux { balance, z, outcome }))
}

/// [`moe_ffn_forward`] on concrete tensors, without gradients.
pub fn moe_ffn<R: Rng + ?Sized>(
    x: &Tensor,
    w: &MoeWeights,
    cfg: &RouterConfig,
    rng: &mut R,
) -> Result<(Tensor, RoutingOutcome)> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let r = g.constant(w.router.clone());
    let wi = g.constant(w.w_in.clone());
    let wo = g.constant(w.w_out.clone());
    let (y, aux) = moe_ffn_forward(&mut g, xv, r, wi, wo, cfg, rng)?;
    Ok((g.value(y).clone(), aux.outcome))
}

/// One pre-norm block: attention then FFN, each added to the residual.
pub fn block_forward<R: Rng + ?Sized>(
    g: &mut Graph,
    x: Var,
    layer: &LayerParams<Var>,
    cfg: &ModelConfig,
    rng: &mut R,
) -> Result<(Var, Option<MoeAux>)> {
    let a = attention(g, x, layer, cfg)?;
    let h = g.add(x, a)?;
    let hn = g.rms_norm(h, layer.ffn_norm, cfg.norm_eps)?;
    let (out, aux) = match &layer.ffn {
        FfnParams::SwiGlu { w_gate, w_up, w_down } => {
            let gate = g.einsum("btm,mh->bth", &[hn, *w_gate])?;
            let gate = g.silu(gate)?;
            let up = g.einsum("btm,mh->bth", &[hn, *w_up])?;
            let prod = g.mul(gate, up)?;
            (g.einsum("bth,hm->btm", &[prod, *w_down])?, None)
        }
        FfnParams::Mlp { w_in, w_out } => {
            let hid = g.einsum("btm,mh->bth", &[hn, *w_in])?;
            let hid = g.silu(hid)?;
            (g.einsum("bth,hm->btm", &[hid, *w_out])?, None)
        }
        FfnParams::Moe { router, w_in, w_out } => {
            let shape = g.value(hn).shape().to_vec();
            let (b, t, m) = (shape[0], shape[1], shape[2]);
            let (o, gr) = (cfg.outer_batches, cfg.groups);
            cfg.validate_batch(b)?;
            let s = b * t / (o * gr);
            let grouped = g.reshape(hn, &[("o", o), ("g", gr), ("s", s), ("m", m)])?;
            let (y, aux) = moe_ffn_forward(g, grouped, *router, *w_in, *w_out, &cfg.router, rng)?;
            (g.reshape(y, &[("b", b), ("t", t), ("m", m)])?, Some(aux))
        }
    };
    Ok((g.add(h, out)?, aux))
}

/// Logits for `sequences` rows of `seq_len` token ids.
pub fn forward<R: Rng + ?Sized>(
    g: &mut Graph,
    params: &Params<Var>,
    cfg: &ModelConfig,
    tokens: &[usize],
    sequences: usize,
    rng: &mut R,
) -> Result<ForwardOutput> {
    if tokens.len() != sequences * cfg.seq_len {
        return Err(Error::Shape(format!(
            "{} tokens for {sequences} sequences of {}",
            tokens.len(),
            cfg.seq_len
        )));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t >= cfg.vocab) {
        return Err(Error::InvalidArgument(format!("token {bad} outside vocab {}", cfg.vocab)));
    }
    let mut x = g.embed(params.embed, tokens.to_vec(), &[("b", sequences), ("t", cfg.seq_len)])?;
    let mut aux = Vec::new();
    for layer in &params.layers {
        let (next, a) = block_forward(g, x, layer, cfg, rng)?;
        x = next;
        aux.extend(a);
    }
    let xn = g.rms_norm(x, params.final_norm, cfg.norm_eps)?;
    let logits = g.einsum("btm,mv->btv", &[xn, params.unembed])?;
    Ok(ForwardOutput { logits, aux })
}

/// Token cross-entropy plus weighted auxiliary losses:
/// `ce + balance_coef · Σ balance + z_coef · Σ z`.
pub fn lm_loss(
    g: &mut Graph,
    out: &ForwardOutput,
    targets: &[usize],
    router: &RouterConfig,
) -> Result<LossParts> {
    let ce = g.cross_entropy(out.logits, targets.to_vec())?;
    let mut balance: Option<Var> = None;
    let mut z: Option<Var> = None;
    for a in &out.aux {
        balance = Some(match balance {
            Some(acc) => g.add(acc, a.balance)?,
            None => a.balance,
        });
        z = Some(match z {
            Some(acc) => g.add(acc, a.z)?,
            None => a.z,
        });
    }
    let mut total = ce;
    if let Some(b) = balance {
        let w = g.scale(b, router.balance_coef)?;
        total = g.add(total, w)?;
    }
    if let Some(zl) = z {
        let w = g.scale(zl, router.z_coef)?;
        total = g.add(total, w)?;
    }
    Ok(LossParts {
        total,
        cross_entropy: ce,
        balance,
        z,
    })
}
