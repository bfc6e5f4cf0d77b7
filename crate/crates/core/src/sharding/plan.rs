use serde::{Deserialize, Serialize};

use super::{default_specs, shard_shape, Axis, MeshSpec, ShardingSpec, Strategy, TensorRole};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::routing::{expert_capacity, RoutingOutcome};

/// A model plus the global batch it is trained with.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Workload {
    pub model: ModelConfig,
    pub batch_tokens: usize,
}

impl Workload {
    pub fn sequences(&self) -> Result<usize> {
        if self.batch_tokens == 0 || self.batch_tokens % self.model.seq_len != 0 {
            return Err(Error::Sharding(format!(
                "batch of {} tokens is not a whole number of {}-token sequences",
                self.batch_tokens, self.model.seq_len
            )));
        }
        Ok(self.batch_tokens / self.model.seq_len)
    }
}

/// Routing-buffer geometry of one MoE layer under a layout. The outer batch
/// follows the Data axis and groups follow the expert-carrying axis, one
/// routing group per batch shard.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct MoeLayout {
    pub outer: usize,
    pub groups: usize,
    pub group_size: usize,
    pub experts: usize,
    /// Experts after padding; equals `experts` unless the strategy pads.
    pub padded_experts: usize,
    /// Per-expert slots per group, sized from the real expert count.
    pub capacity: usize,
}

impl MoeLayout {
    pub fn slots(&self) -> usize {
        self.capacity.max(1)
    }
}

pub fn moe_layout(w: &Workload, mesh: &MeshSpec, strategy: Strategy) -> Result<MoeLayout> {
    let (outer, groups) = match strategy {
        Strategy::ThreeD => (mesh.data, mesh.expert),
        Strategy::Naive2d | Strategy::Padded2d => (1, mesh.data),
    };
    if w.batch_tokens % (outer * groups) != 0 {
        return Err(Error::Sharding(format!(
            "batch of {} tokens does not split into O={outer} x G={groups} groups",
            w.batch_tokens
        )));
    }
    let group_size = w.batch_tokens / (outer * groups);
    let experts = w.model.router.num_experts;
    Ok(MoeLayout {
        outer,
        groups,
        group_size,
        experts,
        padded_experts: strategy.padded_experts(experts, mesh),
        capacity: expert_capacity(group_size, &w.model.router),
    })
}

/// One tensor class of the model with its global and per-device shape.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TensorShard {
    pub name: String,
    pub role: TensorRole,
    pub dims: Vec<(String, usize)>,
    pub spec: ShardingSpec,
    pub shard_shape: Vec<usize>,
    /// How many tensors of this shape the model holds.
    pub count: usize,
}

impl TensorShard {
    pub fn global_values(&self) -> usize {
        self.dims.iter().map(|(_, e)| e).product()
    }

    pub fn shard_values(&self) -> usize {
        self.shard_shape.iter().product()
    }
}

/// Every weight class and the per-layer activations, sharded per `strategy`.
pub fn tensor_inventory(w: &Workload, mesh: &MeshSpec, strategy: Strategy) -> Result<Vec<TensorShard>> {
    let cfg = &w.model;
    let specs = default_specs(strategy);
    let (m, h, v) = (cfg.d_model, cfg.ffn_hidden, cfg.vocab);
    let nd = cfg.heads * cfg.head_dim();
    let moe_layers = cfg.num_moe_layers();
    let dense_layers = cfg.layers - moe_layers;
    let mut out = Vec::new();
    let mut add = |name: &str, role: TensorRole, dims: &[(&str, usize)], count: usize| -> Result<()> {
        if count == 0 {
            return Ok(());
        }
        let spec = specs[&role].clone();
        let shard = shard_shape(dims, &spec, mesh)
            .map_err(|e| Error::Sharding(format!("{name}: {e}")))?;
        out.push(TensorShard {
            name: name.to_string(),
            role,
            dims: dims.iter().map(|(n, e)| (n.to_string(), *e)).collect(),
            spec,
            shard_shape: shard,
            count,
        });
        Ok(())
    };
    use TensorRole::*;
    add("embedding", Embedding, &[("v", v), ("m", m)], 1)?;
    add("unembedding", Unembedding, &[("m", m), ("v", v)], 1)?;
    add("norms", Norm, &[("m", m)], 2 * cfg.layers + 1)?;
    add("attention", AttentionWeights, &[("m", m), ("nd", nd)], 4 * cfg.layers)?;
    add("ffn1", Ffn1Weights, &[("m", m), ("h", h)], 2 * dense_layers)?;
    add("ffn2", Ffn2Weights, &[("h", h), ("m", m)], dense_layers)?;
    let b = w.sequences()?;
    let t = cfg.seq_len;
    add("ffn1_activation", Ffn1Activation, &[("b", b), ("t", t), ("h", h)], 1)?;
    add("ffn2_activation", Ffn2Activation, &[("b", b), ("t", t), ("m", m)], 1)?;
    if moe_layers > 0 {
        let l = moe_layout(w, mesh, strategy)?;
        let (o, g, s, e, c) = (l.outer, l.groups, l.group_size, l.padded_experts, l.slots());
        add("router", Router, &[("m", m), ("e", e)], moe_layers)?;
        add("expert_ffn1", ExpertFfn1, &[("e", e), ("m", m), ("h", h)], moe_layers)?;
        add("expert_ffn2", ExpertFfn2, &[("e", e), ("h", h), ("m", m)], moe_layers)?;
        add("ogsm", Ogsm, &[("o", o), ("g", g), ("s", s), ("m", m)], 1)?;
        add("ogsec", Ogsec, &[("o", o), ("g", g), ("s", s), ("e", e), ("c", c)], 1)?;
        add("oegcm", Oegcm, &[("o", o), ("e", e), ("g", g), ("c", c), ("m", m)], 1)?;
        add("ogecm", Ogecm, &[("o", o), ("g", g), ("e", e), ("c", c), ("m", m)], 1)?;
        add("oegch", Oegch, &[("o", o), ("e", e), ("g", g), ("c", c), ("h", h)], 1)?;
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CommKind {
    All2all,
    Allreduce,
    Allgather,
    ReduceScatter,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Forward,
    Backward,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CommEvent {
    pub kind: CommKind,
    /// The collective runs over the devices spanned by these axes.
    pub axes: Vec<Axis>,
    /// Size of the full collective buffer on one device: the gathered
    /// tensor for allgather and reduce-scatter, the local buffer otherwise.
    pub bytes_per_device: u64,
    pub phase: Phase,
    pub tensor: String,
    pub layer: Option<usize>,
}

impl CommEvent {
    pub fn group_size(&self, mesh: &MeshSpec) -> usize {
        mesh.product(&self.axes)
    }

    /// `bytes · (P-1) / P`: what leaves the device in one pass.
    pub fn transfer_bytes(&self, mesh: &MeshSpec) -> u64 {
        let p = self.group_size(mesh) as u64;
        self.bytes_per_device * (p - 1) / p
    }
}

fn find<'a>(inv: &'a [TensorShard], name: &str) -> Option<&'a TensorShard> {
    inv.iter().find(|t| t.name == name)
}

/// Collectives of one forward and backward pass, in issue order.
pub fn plan_step(w: &Workload, mesh: &MeshSpec, strategy: Strategy, bytes_per_value: u64) -> Result<Vec<CommEvent>> {
    let cfg = &w.model;
    let inv = tensor_inventory(w, mesh, strategy)?;
    let batch_axes = strategy.batch_axes();
    let tokens_local = (w.batch_tokens / mesh.product(&batch_axes)) as u64;
    let m = cfg.d_model as u64;
    let bpv = bytes_per_value;
    let mut events = Vec::new();
    let mut emit = |kind, axes: Vec<Axis>, bytes: u64, phase, tensor: &str, layer| {
        if mesh.product(&axes) > 1 && bytes > 0 {
            events.push(CommEvent {
                kind,
                axes,
                bytes_per_device: bytes,
                phase,
                tensor: tensor.to_string(),
                layer,
            });
        }
    };

    // Dense weights: gathered over their non-Model axes (FSDP) around each
    // use, gradients reduce-scattered back, then averaged over batch axes
    // holding replicas. `per_use` is how many such tensors one use touches.
    let dense_weight = |emit: &mut dyn FnMut(CommKind, Vec<Axis>, u64, Phase, &str, Option<usize>),
                            t: &TensorShard,
                            per_use: usize,
                            layer: Option<usize>| {
        let shard = (t.shard_values() * per_use) as u64 * bpv;
        let fsdp: Vec<Axis> = t.spec.axes().into_iter().filter(|&a| a != Axis::Model).collect();
        let full = shard * mesh.product(&fsdp) as u64;
        emit(CommKind::Allgather, fsdp.clone(), full, Phase::Forward, &t.name, layer);
        emit(CommKind::Allgather, fsdp.clone(), full, Phase::Backward, &t.name, layer);
        emit(CommKind::ReduceScatter, fsdp, full, Phase::Backward, &t.name, layer);
        let replicas: Vec<Axis> = batch_axes.iter().copied().filter(|&a| !t.spec.uses(a)).collect();
        emit(CommKind::Allreduce, replicas, shard, Phase::Backward, &t.name, layer);
    };
    let replica_grads = |t: &TensorShard, per_use: usize| -> (Vec<Axis>, u64) {
        let axes = batch_axes.iter().copied().filter(|&a| !t.spec.uses(a)).collect();
        (axes, (t.shard_values() * per_use) as u64 * bpv)
    };

    let embedding = find(&inv, "embedding").expect("always present");
    dense_weight(&mut emit, embedding, 1, None);
    let moe_flags = cfg.moe_layers();
    for (layer, &is_moe) in moe_flags.iter().enumerate() {
        let l = Some(layer);
        dense_weight(&mut emit, find(&inv, "attention").expect("always present"), 4, l);
        let act = tokens_local * m * bpv;
        emit(CommKind::Allreduce, vec![Axis::Model], act, Phase::Forward, "attention_out", l);
        emit(CommKind::Allreduce, vec![Axis::Model], act, Phase::Backward, "attention_in", l);
        if is_moe {
            let layout = moe_layout(w, mesh, strategy)?;
            let ogecm = find(&inv, "ogecm").expect("moe layer");
            let buf = ogecm.shard_values() as u64 * bpv;
            let ax = vec![strategy.expert_axis()];
            emit(CommKind::All2all, ax.clone(), buf, Phase::Forward, "dispatch", l);
            let local_slots = (layout.outer * layout.groups * layout.padded_experts * layout.slots()) as u64
                / mesh.product(&batch_axes) as u64;
            let expert_act = local_slots * m * bpv;
            emit(CommKind::Allreduce, vec![Axis::Model], expert_act, Phase::Forward, "expert_out", l);
            emit(CommKind::All2all, ax.clone(), buf, Phase::Forward, "combine", l);
            emit(CommKind::All2all, ax.clone(), buf, Phase::Backward, "combine", l);
            emit(CommKind::Allreduce, vec![Axis::Model], expert_act, Phase::Backward, "expert_in", l);
            emit(CommKind::All2all, ax, buf, Phase::Backward, "dispatch", l);
            for name in ["router", "expert_ffn1", "expert_ffn2"] {
                let (axes, bytes) = replica_grads(find(&inv, name).expect("moe layer"), 1);
                emit(CommKind::Allreduce, axes, bytes, Phase::Backward, name, l);
            }
        } else {
            dense_weight(&mut emit, find(&inv, "ffn1").expect("dense layer"), 2, l);
            dense_weight(&mut emit, find(&inv, "ffn2").expect("dense layer"), 1, l);
            emit(CommKind::Allreduce, vec![Axis::Model], act, Phase::Forward, "ffn_out", l);
            emit(CommKind::Allreduce, vec![Axis::Model], act, Phase::Backward, "ffn_in", l);
        }
    }
    dense_weight(&mut emit, find(&inv, "unembedding").expect("always present"), 1, None);
    let norms = find(&inv, "norms").expect("always present");
    let (axes, bytes) = replica_grads(norms, norms.count);
    emit(CommKind::Allreduce, axes, bytes, Phase::Backward, "norms", None);
    Ok(events)
}

/// Per-device bytes of one all2all, counted by enumeration.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct BruteForceComm {
    /// Full capacity buffers: every slot bound for another device, used or not.
    pub slot_bytes: Vec<u64>,
    /// Only slots holding a surviving token.
    pub token_bytes: Vec<u64>,
}

/// Which shard along a tensor dimension a device holds, from its mesh
/// coordinates on the axes assigned to that dimension (row-major).
fn shard_index(axes: &[Axis], coord: &[usize; 3], mesh: &MeshSpec) -> usize {
    axes.iter().fold(0, |acc, &a| acc * mesh.size(a) + coord[a as usize])
}

/// Walks every device, every token group it holds and every expert slot,
/// and counts values whose expert lives on another device. Device
/// placement comes straight from the OGSM and expert-weight specs.
pub fn brute_force_comm(
    w: &Workload,
    mesh: &MeshSpec,
    strategy: Strategy,
    outcome: &RoutingOutcome,
    bytes_per_value: u64,
) -> Result<BruteForceComm> {
    let specs = default_specs(strategy);
    let layout = moe_layout(w, mesh, strategy)?;
    let d = outcome.dims;
    if (d.outer, d.groups, d.group_size, d.experts, d.capacity)
        != (layout.outer, layout.groups, layout.group_size, layout.experts, layout.capacity)
    {
        return Err(Error::Sharding(format!(
            "routing outcome {d:?} does not match layout {layout:?}"
        )));
    }
    let ogsm = &specs[&TensorRole::Ogsm].0;
    let expert_axes = &specs[&TensorRole::ExpertFfn1].0[0];
    let values_per_slot = w.model.d_model / mesh.product(&ogsm[3]);
    let o_per = layout.outer / mesh.product(&ogsm[0]);
    let g_per = layout.groups / mesh.product(&ogsm[1]);
    let e_per = layout.padded_experts / mesh.product(expert_axes);
    let bpv = bytes_per_value;

    let mut coords = Vec::with_capacity(mesh.devices());
    for a in 0..mesh.data {
        for b in 0..mesh.expert {
            for c in 0..mesh.model {
                coords.push([a, b, c]);
            }
        }
    }
    let dest_of = |coord: &[usize; 3], expert: usize| -> [usize; 3] {
        // Expert weights are split over a single axis in every strategy.
        let mut dest = *coord;
        let shard = expert / e_per;
        dest[expert_axes[0] as usize] = shard;
        dest
    };
    let mut slot_bytes = vec![0u64; coords.len()];
    let mut token_bytes = vec![0u64; coords.len()];
    for (dev, coord) in coords.iter().enumerate() {
        let o_shard = shard_index(&ogsm[0], coord, mesh);
        let g_shard = shard_index(&ogsm[1], coord, mesh);
        for o in o_shard * o_per..(o_shard + 1) * o_per {
            for g in g_shard * g_per..(g_shard + 1) * g_per {
                for e in 0..layout.padded_experts {
                    if dest_of(coord, e) != *coord {
                        slot_bytes[dev] += (layout.slots() * values_per_slot) as u64 * bpv;
                    }
                }
                for s in 0..layout.group_size {
                    let token = (o * layout.groups + g) * layout.group_size + s;
                    for choice in &outcome.choices[token] {
                        if !choice.dropped() && dest_of(coord, choice.expert) != *coord {
                            token_bytes[dev] += values_per_slot as u64 * bpv;
                        }
                    }
                }
            }
        }
    }
    Ok(BruteForceComm {
        slot_bytes,
        token_bytes,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MemoryReport {
    /// Weight shards held by one device.
    pub weight_bytes: u64,
    pub optimizer_bytes: u64,
    /// Largest single activation shard of one layer.
    pub activation_bytes: u64,
    pub total_bytes: u64,
    /// Expert weights held by one device.
    pub expert_weight_bytes: u64,
    /// Expert weights of the whole model, counted once (padding included).
    pub expert_weight_bytes_logical: u64,
}

/// Weights times `(1 + optimizer_multiplier)` plus the peak activation shard.
pub fn memory_per_device(
    w: &Workload,
    mesh: &MeshSpec,
    strategy: Strategy,
    bytes_per_value: u64,
    optimizer_multiplier: f64,
) -> Result<MemoryReport> {
    let inv = tensor_inventory(w, mesh, strategy)?;
    let bpv = bytes_per_value;
    let mut weights = 0u64;
    let mut activation = 0u64;
    let mut expert = 0u64;
    let mut expert_logical = 0u64;
    for t in &inv {
        let shard = (t.shard_values() * t.count) as u64 * bpv;
        if t.role.is_weight() {
            weights += shard;
            if matches!(t.role, TensorRole::ExpertFfn1 | TensorRole::ExpertFfn2) {
                expert += shard;
                expert_logical += (t.global_values() * t.count) as u64 * bpv;
            }
        } else {
            activation = activation.max(t.shard_values() as u64 * bpv);
        }
    }
    let optimizer = (weights as f64 * optimizer_multiplier).round() as u64;
    Ok(MemoryReport {
        weight_bytes: weights,
        optimizer_bytes: optimizer,
        activation_bytes: activation,
        total_bytes: weights + optimizer + activation,
        expert_weight_bytes: expert,
        expert_weight_bytes_logical: expert_logical,
    })
}
