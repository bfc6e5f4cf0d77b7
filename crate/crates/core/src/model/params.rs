use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Init standard deviation before residual scaling.
const INIT_STD: f64 = 0.02;

/// Weights of one FFN block.
#[derive(Clone, Debug, PartialEq)]
pub enum FfnParams<T> {
    /// Gated dense FFN: `(silu(x·w_gate) ⊙ x·w_up)·w_down`.
    SwiGlu { w_gate: T, w_up: T, w_down: T },
    /// Router `(m, e)` plus per-expert `(e, m, h)` and `(e, h, m)` weights.
    Moe { router: T, w_in: T, w_out: T },
    /// Ungated two-matrix FFN, the shape of a single expert.
    Mlp { w_in: T, w_out: T },
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T> {
    pub attn_norm: T,
    pub wq: T,
    pub wk: T,
    pub wv: T,
    pub wo: T,
    pub ffn_norm: T,
    pub ffn: FfnParams<T>,
}

/// Model weights, generic over storage so one layout serves both concrete
/// tensors and graph variables.
#[derive(Clone, Debug, PartialEq)]
pub struct Params<T> {
    pub embed: T,
    pub layers: Vec<LayerParams<T>>,
    pub final_norm: T,
    pub unembed: T,
}

pub type ModelParams = Params<Tensor>;

impl<T> FfnParams<T> {
    fn named(&self) -> Vec<(&'static str, &T)> {
        match self {
            Self::SwiGlu { w_gate, w_up, w_down } => {
                vec![("w_gate", w_gate), ("w_up", w_up), ("w_down", w_down)]
            }
            Self::Moe { router, w_in, w_out } => {
                vec![("router", router), ("w_in", w_in), ("w_out", w_out)]
            }
            Self::Mlp { w_in, w_out } => vec![("w_in", w_in), ("w_out", w_out)],
        }
    }

    fn named_mut(&mut self) -> Vec<(&'static str, &mut T)> {
        match self {
            Self::SwiGlu { w_gate, w_up, w_down } => {
                vec![("w_gate", w_gate), ("w_up", w_up), ("w_down", w_down)]
            }
            Self::Moe { router, w_in, w_out } => {
                vec![("router", router), ("w_in", w_in), ("w_out", w_out)]
            }
            Self::Mlp { w_in, w_out } => vec![("w_in", w_in), ("w_out", w_out)],
        }
    }

    fn map<U>(&self, name: &str, f: &mut impl FnMut(&str, &T) -> U) -> FfnParams<U> {
        let mut g = |field: &str, v: &T| f(&format!("{name}.{field}"), v);
        match self {
            Self::SwiGlu { w_gate, w_up, w_down } => FfnParams::SwiGlu {
                w_gate: g("w_gate", w_gate),
                w_up: g("w_up", w_up),
                w_down: g("w_down", w_down),
            },
            Self::Moe { router, w_in, w_out } => FfnParams::Moe {
                router: g("router", router),
                w_in: g("w_in", w_in),
                w_out: g("w_out", w_out),
            },
            Self::Mlp { w_in, w_out } => FfnParams::Mlp {
                w_in: g("w_in", w_in),
                w_out: g("w_out", w_out),
            },
        }
    }
}

impl<T> Params<T> {
    /// Every weight with its dotted name, in a fixed canonical order.
    pub fn entries(&self) -> Vec<(String, &T)> {
        let mut out = vec![("embed".to_string(), &self.embed)];
        for (i, l) in self.layers.iter().enumerate() {
            let p = format!("layers.{i}");
            out.push((format!("{p}.attn_norm"), &l.attn_norm));
            out.push((format!("{p}.wq"), &l.wq));
            out.push((format!("{p}.wk"), &l.wk));
            out.push((format!("{p}.wv"), &l.wv));
            out.push((format!("{p}.wo"), &l.wo));
            out.push((format!("{p}.ffn_norm"), &l.ffn_norm));
            for (n, v) in l.ffn.named() {
                out.push((format!("{p}.ffn.{n}"), v));
            }
        }
        out.push(("final_norm".to_string(), &self.final_norm));
        out.push(("unembed".to_string(), &self.unembed));
        out
    }

    pub fn entries_mut(&mut self) -> Vec<(String, &mut T)> {
        let mut out = vec![("embed".to_string(), &mut self.embed)];
        for (i, l) in self.layers.iter_mut().enumerate() {
            let p = format!("layers.{i}");
            out.push((format!("{p}.attn_norm"), &mut l.attn_norm));
            out.push((format!("{p}.wq"), &mut l.wq));
            out.push((format!("{p}.wk"), &mut l.wk));
            out.push((format!("{p}.wv"), &mut l.wv));
            out.push((format!("{p}.wo"), &mut l.wo));
            out.push((format!("{p}.ffn_norm"), &mut l.ffn_norm));
            for (n, v) in l.ffn.named_mut() {
                out.push((format!("{p}.ffn.{n}"), v));
            }
        }
        out.push(("final_norm".to_string(), &mut self.final_norm));
        out.push(("unembed".to_string(), &mut self.unembed));
        out
    }

    /// Applies `f` to every weight in canonical order.
    pub fn map<U>(&self, mut f: impl FnMut(&str, &T) -> U) -> Params<U> {
        let embed = f("embed", &self.embed);
        let layers = self
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let p = format!("layers.{i}");
                LayerParams {
                    attn_norm: f(&format!("{p}.attn_norm"), &l.attn_norm),
                    wq: f(&format!("{p}.wq"), &l.wq),
                    wk: f(&format!("{p}.wk"), &l.wk),
                    wv: f(&format!("{p}.wv"), &l.wv),
                    wo: f(&format!("{p}.wo"), &l.wo),
                    ffn_norm: f(&format!("{p}.ffn_norm"), &l.ffn_norm),
                    ffn: l.ffn.map(&format!("{p}.ffn"), &mut f),
                }
            })
            .collect();
        Params {
            embed,
            layers,
            final_norm: f("final_norm", &self.final_norm),
            unembed: f("unembed", &self.unembed),
        }
    }
}

impl Params<Tensor> {
    pub fn num_values(&self) -> usize {
        self.entries().iter().map(|(_, t)| t.len()).sum()
    }

    /// All weights concatenated in canonical order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_values());
        for (_, t) in self.entries() {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Inverse of [`flatten`](Self::flatten), keeping this model's layout.
    pub fn with_flat(&self, flat: &[f64]) -> Result<Self> {
        if flat.len() != self.num_values() {
            return Err(Error::Shape(format!(
                "{} values for a model of {}",
                flat.len(),
                self.num_values()
            )));
        }
        let mut at = 0;
        Ok(self.map(|_, t| {
            let mut out = t.clone();
            out.data_mut().copy_from_slice(&flat[at..at + t.len()]);
            at += t.len();
            out
        }))
    }

    /// Replaces every single-expert MoE block by the equivalent dense MLP.
    pub fn densify_single_expert(&self) -> Result<Self> {
        let mut out = self.clone();
        for l in &mut out.layers {
            if let FfnParams::Moe { w_in, w_out, .. } = &l.ffn {
                if w_in.extent("e")? != 1 {
                    return Err(Error::InvalidArgument(format!(
                        "MoE block has {} experts",
                        w_in.extent("e")?
                    )));
                }
                let (m, h) = (w_in.extent("m")?, w_in.extent("h")?);
                l.ffn = FfnParams::Mlp {
                    w_in: w_in.reshape(&[("m", m), ("h", h)])?,
                    w_out: w_out.reshape(&[("h", h), ("m", m)])?,
                };
            }
        }
        Ok(out)
    }
}

/// Normal draw rejected outside two standard deviations.
fn truncated_normal<R: Rng + ?Sized>(rng: &mut R, std: f64) -> f64 {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

fn init<R: Rng + ?Sized>(rng: &mut R, dims: &[(&str, usize)], std: f64) -> Result<Tensor> {
    let n = dims.iter().map(|(_, e)| e).product();
    Tensor::new(dims, (0..n).map(|_| truncated_normal(rng, std)).collect())
}

/// Freshly initialised weights, deterministic in `seed`. Norm gains start at
/// one; projections writing into the residual stream are scaled down by
/// `1/sqrt(2L)`.
pub fn build_model(cfg: &ModelConfig, seed: u64) -> Result<ModelParams> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (m, n, d, h, v) = (cfg.d_model, cfg.heads, cfg.head_dim(), cfg.ffn_hidden, cfg.vocab);
    let resid = INIT_STD / (2.0 * cfg.layers as f64).sqrt();
    let gain = || Tensor::ones(&[("m", m)]);
    let embed = init(&mut rng, &[("v", v), ("m", m)], INIT_STD)?;
    let mut layers = Vec::with_capacity(cfg.layers);
    for is_moe in cfg.moe_layers() {
        let attn_norm = gain()?;
        let wq = init(&mut rng, &[("m", m), ("n", n), ("d", d)], INIT_STD)?;
        let wk = init(&mut rng, &[("m", m), ("n", n), ("d", d)], INIT_STD)?;
        let wv = init(&mut rng, &[("m", m), ("n", n), ("d", d)], INIT_STD)?;
        let wo = init(&mut rng, &[("n", n), ("d", d), ("m", m)], resid)?;
        let ffn_norm = gain()?;
        let ffn = if is_moe {
            let e = cfg.router.num_experts;
            FfnParams::Moe {
                router: init(&mut rng, &[("m", m), ("e", e)], INIT_STD)?,
                w_in: init(&mut rng, &[("e", e), ("m", m), ("h", h)], INIT_STD)?,
                w_out: init(&mut rng, &[("e", e), ("h", h), ("m", m)], resid)?,
            }
        } else {
            FfnParams::SwiGlu {
                w_gate: init(&mut rng, &[("m", m), ("h", h)], INIT_STD)?,
                w_up: init(&mut rng, &[("m", m), ("h", h)], INIT_STD)?,
                w_down: init(&mut rng, &[("h", h), ("m", m)], resid)?,
            }
        };
        layers.push(LayerParams {
            attn_norm,
            wq,
            wk,
            wv,
            wo,
            ffn_norm,
            ffn,
        });
    }
    Ok(Params {
        embed,
        layers,
        final_norm: gain()?,
        unembed: init(&mut rng, &[("m", m), ("v", v)], INIT_STD)?,
    })
}
