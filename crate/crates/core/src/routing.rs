//! Top-K gating with per-group expert capacity.
//!
//! The pipeline is `select_experts` → `assign_capacity` →
//! `build_combine_dispatch`. Tokens are laid out `(o, g, s)` row-major and
//! each `(o, g)` pair is one routing group with its own capacity buffers.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SecondChoicePolicy {
    /// Always take the next-best expert.
    #[default]
    NaiveSecondBest,
    /// Sample lower ranks in proportion to the remaining probability mass.
    RandomProportional,
}

fn default_balance_coef() -> f64 {
    0.01
}

fn default_z_coef() -> f64 {
    0.001
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouterConfig {
    pub num_experts: usize,
    pub top_k: usize,
    pub capacity_factor: f64,
    #[serde(default)]
    pub second_choice_policy: SecondChoicePolicy,
    #[serde(default = "default_balance_coef")]
    pub balance_coef: f64,
    #[serde(default = "default_z_coef")]
    pub z_coef: f64,
    #[serde(default = "default_true")]
    pub normalize_gates: bool,
    /// Overrides the capacity formula; `Some(0)` drops every choice.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixed_capacity: Option<usize>,
}

impl RouterConfig {
    /// Top-2, capacity factor 2, default loss coefficients.
    pub fn new(num_experts: usize, top_k: usize, capacity_factor: f64) -> Self {
        Self {
            num_experts,
            top_k,
            capacity_factor,
            second_choice_policy: SecondChoicePolicy::default(),
            balance_coef: default_balance_coef(),
            z_coef: default_z_coef(),
            normalize_gates: true,
            fixed_capacity: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_experts == 0 {
            return Err(Error::Config("num_experts must be >= 1".into()));
        }
        if self.top_k == 0 || self.top_k > self.num_experts {
            return Err(Error::Config(format!(
                "top_k={} must lie in 1..={}",
                self.top_k, self.num_experts
            )));
        }
        if !(self.capacity_factor > 0.0) {
            return Err(Error::Config(format!(
                "capacity_factor must be > 0, got {}",
                self.capacity_factor
            )));
        }
        if !(self.balance_coef >= 0.0) || !(self.z_coef >= 0.0) {
            return Err(Error::Config("loss coefficients must be >= 0".into()));
        }
        Ok(())
    }
}

/// Per-expert buffer size for a group of `tokens_per_group` tokens:
/// `ceil(C · K · S / E)`.
pub fn expert_capacity(tokens_per_group: usize, cfg: &RouterConfig) -> usize {
    if let Some(c) = cfg.fixed_capacity {
        return c;
    }
    let raw = cfg.capacity_factor * (cfg.top_k * tokens_per_group) as f64 / cfg.num_experts as f64;
    // Absorb representation error such as 1.1 * 10 = 11.000000000000002.
    let nearest = raw.round();
    if (raw - nearest).abs() < 1e-9 {
        nearest as usize
    } else {
        raw.ceil() as usize
    }
}

/// One of a token's `K` expert choices.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Choice {
    /// 0 for the primary choice.
    pub rank: usize,
    pub expert: usize,
    pub gate: f64,
    /// Slot within the expert's buffer; `None` once dropped (or before
    /// capacity has been assigned).
    pub position: Option<usize>,
}

impl Choice {
    pub fn dropped(&self) -> bool {
        self.position.is_none()
    }
}

/// Extents of the `(O, G, S, E, C)` routing tensors.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct RoutingDims {
    pub outer: usize,
    pub groups: usize,
    pub group_size: usize,
    pub experts: usize,
    pub capacity: usize,
}

impl RoutingDims {
    pub fn tokens(&self) -> usize {
        self.outer * self.groups * self.group_size
    }

    /// Extent of the `c` axis. A zero capacity still needs one (empty) slot
    /// to form a valid tensor.
    pub fn slots(&self) -> usize {
        self.capacity.max(1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RoutingStats {
    /// Fraction of tokens whose rank-0 choice is each expert.
    pub dispatch_fraction: Vec<f64>,
    /// Mean router probability per expert.
    pub mean_prob: Vec<f64>,
    pub dropped_fraction: f64,
    /// Occupied slots per expert, summed over groups.
    pub expert_load: Vec<usize>,
    pub surviving_choices: usize,
    pub dropped_choices: usize,
}

#[derive(Clone, Debug)]
pub struct RoutingOutcome {
    pub dims: RoutingDims,
    /// Router probabilities `(o, g, s, e)`.
    pub probs: Tensor,
    /// Per token (row-major over `o, g, s`), ordered by rank.
    pub choices: Vec<Vec<Choice>>,
    /// `(o, g, s, e, c)` gate weights of surviving choices.
    pub combine: Tensor,
    /// `(o, g, s, e, c)` 0/1 mask, exactly the support of `combine`.
    pub dispatch: Tensor,
    pub stats: RoutingStats,
}

fn experts_of(probs: &Tensor) -> Result<usize> {
    probs
        .shape()
        .last()
        .copied()
        .ok_or_else(|| Error::Shape("router probabilities need an expert axis".into()))
}

/// Gate of `expert` given the probability row and the token's selection.
fn gate_weight(row: &[f64], selected: &[usize], expert: usize, normalize: bool) -> f64 {
    if normalize {
        let denom = selected.iter().fold(0.0, |acc, &e| acc + row[e]);
        row[expert] / denom
    } else {
        row[expert]
    }
}

/// Ranked expert choices for every token. `probs` has the expert axis last.
pub fn select_experts<R: Rng + ?Sized>(
    probs: &Tensor,
    cfg: &RouterConfig,
    rng: &mut R,
) -> Result<Vec<Vec<Choice>>> {
    let e = experts_of(probs)?;
    if e != cfg.num_experts {
        return Err(Error::Shape(format!(
            "probabilities have {e} experts, config has {}",
            cfg.num_experts
        )));
    }
    if cfg.top_k == 0 || cfg.top_k > e {
        return Err(Error::InvalidArgument(format!("top_k={} with {e} experts", cfg.top_k)));
    }
    let mut out = Vec::with_capacity(probs.len() / e);
    let mut order: Vec<usize> = Vec::with_capacity(e);
    for row in probs.data().chunks(e) {
        order.clear();
        order.extend(0..e);
        order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        let mut selected = vec![order[0]];
        match cfg.second_choice_policy {
            SecondChoicePolicy::NaiveSecondBest => selected.extend(&order[1..cfg.top_k]),
            SecondChoicePolicy::RandomProportional => {
                for _ in 1..cfg.top_k {
                    let remaining: Vec<usize> =
                        (0..e).filter(|x| !selected.contains(x)).collect();
                    let mass = remaining.iter().fold(0.0, |acc, &x| acc + row[x]);
                    let mut draw = rng.random::<f64>() * mass;
                    let mut pick = *remaining.last().expect("top_k <= experts");
                    for &x in &remaining {
                        if draw < row[x] {
                            pick = x;
                            break;
                        }
                        draw -= row[x];
                    }
                    selected.push(pick);
                }
            }
        }
        out.push(
            selected
                .iter()
                .enumerate()
                .map(|(rank, &expert)| Choice {
                    rank,
                    expert,
                    gate: gate_weight(row, &selected, expert, cfg.normalize_gates),
                    position: None,
                })
                .collect(),
        );
    }
    Ok(out)
}

/// Grants buffer slots rank-major within each group of `group_size`
/// consecutive tokens: every rank-0 choice in token order, then rank 1, and
/// so on. Choices arriving at a full buffer are dropped.
pub fn assign_capacity(
    choices: &[Vec<Choice>],
    group_size: usize,
    num_experts: usize,
    capacity: usize,
) -> Result<Vec<Vec<Choice>>> {
    if group_size == 0 || choices.len() % group_size != 0 {
        return Err(Error::Shape(format!(
            "{} tokens do not split into groups of {group_size}",
            choices.len()
        )));
    }
    let mut out = choices.to_vec();
    let max_rank = choices.iter().map(Vec::len).max().unwrap_or(0);
    for group in out.chunks_mut(group_size) {
        let mut load = vec![0usize; num_experts];
        for rank in 0..max_rank {
            for token in group.iter_mut() {
                if let Some(c) = token.get_mut(rank) {
                    if c.expert >= num_experts {
                        return Err(Error::InvalidArgument(format!(
                            "expert {} outside {num_experts}",
                            c.expert
                        )));
                    }
                    if load[c.expert] < capacity {
                        c.position = Some(load[c.expert]);
                        load[c.expert] += 1;
                    } else {
                        c.position = None;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Scatters surviving gate weights into `(o, g, s, e, c)` combine weights;
/// dispatch is their support.
pub fn build_combine_dispatch(choices: &[Vec<Choice>], dims: RoutingDims) -> Result<(Tensor, Tensor)> {
    if choices.len() != dims.tokens() {
        return Err(Error::Shape(format!(
            "{} tokens cannot fill O={} x G={} x S={}",
            choices.len(),
            dims.outer,
            dims.groups,
            dims.group_size
        )));
    }
    let slots = dims.slots();
    let mut combine = vec![0.0; dims.tokens() * dims.experts * slots];
    for (t, token) in choices.iter().enumerate() {
        for c in token {
            if let Some(pos) = c.position {
                if pos >= dims.capacity || c.expert >= dims.experts {
                    return Err(Error::InvalidArgument(format!(
                        "slot ({}, {pos}) outside buffers of {} x {}",
                        c.expert, dims.experts, dims.capacity
                    )));
                }
                combine[(t * dims.experts + c.expert) * slots + pos] = c.gate;
            }
        }
    }
    let dispatch: Vec<f64> = combine
        .iter()
        .map(|&w| if w > 0.0 { 1.0 } else { 0.0 })
        .collect();
    let d = [
        ("o", dims.outer),
        ("g", dims.groups),
        ("s", dims.group_size),
        ("e", dims.experts),
        ("c", slots),
    ];
    Ok((Tensor::new(&d, combine)?, Tensor::new(&d, dispatch)?))
}

pub fn routing_stats(probs: &Tensor, choices: &[Vec<Choice>]) -> Result<RoutingStats> {
    let e = experts_of(probs)?;
    let n = choices.len();
    if probs.len() != n * e {
        return Err(Error::Shape(format!(
            "{} probability rows for {n} tokens",
            probs.len() / e
        )));
    }
    let mut primary = vec![0usize; e];
    let mut load = vec![0usize; e];
    let (mut surviving, mut dropped) = (0, 0);
    for token in choices {
        if let Some(first) = token.first() {
            primary[first.expert] += 1;
        }
        for c in token {
            if c.dropped() {
                dropped += 1;
            } else {
                surviving += 1;
                load[c.expert] += 1;
            }
        }
    }
    let mut mean_prob = vec![0.0; e];
    for row in probs.data().chunks(e) {
        for (m, p) in mean_prob.iter_mut().zip(row) {
            *m += p;
        }
    }
    mean_prob.iter_mut().for_each(|m| *m /= n as f64);
    let total = surviving + dropped;
    Ok(RoutingStats {
        dispatch_fraction: primary.iter().map(|&c| c as f64 / n as f64).collect(),
        mean_prob,
        dropped_fraction: if total == 0 { 0.0 } else { dropped as f64 / total as f64 },
        expert_load: load,
        surviving_choices: surviving,
        dropped_choices: dropped,
    })
}

/// `E · Σ_e f_e · p̄_e`, with `f_e` the rank-0 dispatch fraction and `p̄_e`
/// the mean router probability. Perfect balance gives 1, collapse onto one
/// expert gives `E`.
pub fn load_balance_loss(probs: &Tensor, choices: &[Vec<Choice>]) -> Result<f64> {
    let stats = routing_stats(probs, choices)?;
    let e = stats.mean_prob.len();
    let dot = stats
        .dispatch_fraction
        .iter()
        .zip(&stats.mean_prob)
        .fold(0.0, |acc, (f, p)| acc + f * p);
    Ok(e as f64 * dot)
}

/// Mean over tokens of `logsumexp(logits)²`, experts on the last axis.
pub fn router_z_loss(logits: &Tensor) -> Result<f64> {
    let e = experts_of(logits)?;
    let rows = logits.len() / e;
    let mut total = 0.0;
    for row in logits.data().chunks(e) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().fold(0.0, |acc, v| acc + (v - max).exp()).ln();
        total += lse * lse;
    }
    Ok(total / rows as f64)
}

/// Runs the whole routing pipeline on `(o, g, s, e)` probabilities.
pub fn route<R: Rng + ?Sized>(probs: &Tensor, cfg: &RouterConfig, rng: &mut R) -> Result<RoutingOutcome> {
    cfg.validate()?;
    if probs.rank() != 4 {
        return Err(Error::Shape(format!(
            "router probabilities must be (o, g, s, e), got {:?}",
            probs.dims()
        )));
    }
    let s = probs.shape();
    let capacity = expert_capacity(s[2], cfg);
    let dims = RoutingDims {
        outer: s[0],
        groups: s[1],
        group_size: s[2],
        experts: s[3],
        capacity,
    };
    let selected = select_experts(probs, cfg, rng)?;
    let choices = assign_capacity(&selected, dims.group_size, dims.experts, capacity)?;
    let (combine, dispatch) = build_combine_dispatch(&choices, dims)?;
    let stats = routing_stats(probs, &choices)?;
    Ok(RoutingOutcome {
        dims,
        probs: probs.clone(),
        choices,
        combine,
        dispatch,
        stats,
    })
}

/// A frozen routing decision, used to rebuild combine weights from (possibly
/// perturbed) probabilities and to differentiate them. Expert selections and
/// slots are constants; only the gate values depend on `probs`.
#[derive(Clone, Debug)]
pub struct GatePlan {
    dims: RoutingDims,
    normalize: bool,
    /// Per token: selected experts in rank order and their slots.
    routes: Vec<(Vec<usize>, Vec<Option<usize>>)>,
}

impl GatePlan {
    pub fn new(outcome: &RoutingOutcome, normalize: bool) -> Self {
        Self {
            dims: outcome.dims,
            normalize,
            routes: outcome
                .choices
                .iter()
                .map(|t| (t.iter().map(|c| c.expert).collect(), t.iter().map(|c| c.position).collect()))
                .collect(),
        }
    }

    fn expect_probs(&self, probs: &Tensor) -> Result<()> {
        if probs.len() != self.dims.tokens() * self.dims.experts {
            return Err(Error::Shape(format!(
                "gate plan for {} x {} probabilities, got {:?}",
                self.dims.tokens(),
                self.dims.experts,
                probs.shape()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, probs: &Tensor) -> Result<Tensor> {
        self.expect_probs(probs)?;
        let (e, slots) = (self.dims.experts, self.dims.slots());
        let mut combine = vec![0.0; self.dims.tokens() * e * slots];
        for (t, (row, (sel, pos))) in probs.data().chunks(e).zip(&self.routes).enumerate() {
            for (&x, p) in sel.iter().zip(pos) {
                if let Some(c) = p {
                    combine[(t * e + x) * slots + c] = gate_weight(row, sel, x, self.normalize);
                }
            }
        }
        let d = self.dims;
        Tensor::new(
            &[("o", d.outer), ("g", d.groups), ("s", d.group_size), ("e", e), ("c", slots)],
            combine,
        )
    }

    /// Gradient with respect to `probs` given the gradient of the combine tensor.
    pub fn backward(&self, probs: &Tensor, grad: &Tensor) -> Result<Tensor> {
        self.expect_probs(probs)?;
        let (e, slots) = (self.dims.experts, self.dims.slots());
        let g = grad.data();
        let mut out = vec![0.0; probs.len()];
        for (t, (row, (sel, pos))) in probs.data().chunks(e).zip(&self.routes).enumerate() {
            let dst = &mut out[t * e..(t + 1) * e];
            let upstream: Vec<Option<f64>> = sel
                .iter()
                .zip(pos)
                .map(|(&x, p)| p.map(|c| g[(t * e + x) * slots + c]))
                .collect();
            if self.normalize {
                let denom = sel.iter().fold(0.0, |acc, &x| acc + row[x]);
                // d(p_k / Σ)/dp_j = δ_kj / Σ - p_k / Σ² for j in the selection.
                let weighted = sel
                    .iter()
                    .zip(&upstream)
                    .filter_map(|(&x, u)| u.map(|gv| gv * row[x]))
                    .fold(0.0, |acc, v| acc + v);
                for (&x, u) in sel.iter().zip(&upstream) {
                    let direct = u.map_or(0.0, |gv| gv / denom);
                    dst[x] += direct - weighted / (denom * denom);
                }
            } else {
                for (&x, u) in sel.iter().zip(&upstream) {
                    if let Some(gv) = u {
                        dst[x] += gv;
                    }
                }
            }
        }
        Tensor::from_parts(probs.names().to_vec(), probs.shape().to_vec(), out)
    }
}
