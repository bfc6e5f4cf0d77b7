//! Analytical simulator for sharding an MoE transformer over a
//! `(Data, Expert, Model)` device mesh: per-device shapes, memory, the
//! collectives of one training step, and an α-β step-time estimate.

mod cost;
mod plan;
mod presets;

pub use cost::{
    compare_strategies, estimate_step_time, sharding_report, DeviceProfile, ShardingReport,
    StepTimeEstimate, StrategyComparison, StrategyReport, TimedEvent,
};
pub use plan::{
    brute_force_comm, memory_per_device, moe_layout, plan_step, tensor_inventory, BruteForceComm,
    CommEvent, CommKind, MemoryReport, MoeLayout, Phase, TensorShard, Workload,
};
pub use presets::{preset, preset_names};

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Data,
    Expert,
    Model,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::Data, Axis::Expert, Axis::Model];
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Axis::Data => "Data",
            Axis::Expert => "Expert",
            Axis::Model => "Model",
        })
    }
}

/// Device grid extents, ordered `(Data, Expert, Model)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MeshSpec {
    pub data: usize,
    pub expert: usize,
    pub model: usize,
}

impl MeshSpec {
    pub fn new(data: usize, expert: usize, model: usize) -> Result<Self> {
        if data == 0 || expert == 0 || model == 0 {
            return Err(Error::Sharding(format!(
                "mesh ({data}, {expert}, {model}) has an empty axis"
            )));
        }
        Ok(Self { data, expert, model })
    }

    pub fn devices(&self) -> usize {
        self.data * self.expert * self.model
    }

    pub fn size(&self, axis: Axis) -> usize {
        match axis {
            Axis::Data => self.data,
            Axis::Expert => self.expert,
            Axis::Model => self.model,
        }
    }

    pub fn product(&self, axes: &[Axis]) -> usize {
        axes.iter().map(|&a| self.size(a)).product()
    }
}

impl fmt::Display for MeshSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.data, self.expert, self.model)
    }
}

impl FromStr for MeshSpec {
    type Err = Error;

    /// Parses `D,E,M`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<usize> = s
            .split(',')
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Sharding(format!("bad mesh '{s}': {e}")))?;
        match parts[..] {
            [d, e, m] => Self::new(d, e, m),
            _ => Err(Error::Sharding(format!("mesh '{s}' needs three sizes D,E,M"))),
        }
    }
}

/// Mesh axes assigned to each tensor dimension; an empty list leaves the
/// dimension unsharded, several axes split it jointly (row-major).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ShardingSpec(pub Vec<Vec<Axis>>);

impl ShardingSpec {
    pub fn new(dims: Vec<Vec<Axis>>) -> Result<Self> {
        let spec = Self(dims);
        spec.validate()?;
        Ok(spec)
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = Vec::new();
        for a in self.0.iter().flatten() {
            if seen.contains(a) {
                return Err(Error::Sharding(format!("axis {a} used twice in {self}")));
            }
            seen.push(*a);
        }
        Ok(())
    }

    /// Every mesh axis used by some dimension.
    pub fn axes(&self) -> Vec<Axis> {
        let mut out: Vec<Axis> = self.0.iter().flatten().copied().collect();
        out.sort();
        out
    }

    pub fn uses(&self, axis: Axis) -> bool {
        self.0.iter().any(|d| d.contains(&axis))
    }
}

impl fmt::Display for ShardingSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .0
            .iter()
            .map(|d| match d.len() {
                0 => "None".to_string(),
                1 => d[0].to_string(),
                _ => format!(
                    "({})",
                    d.iter().map(Axis::to_string).collect::<Vec<_>>().join(", ")
                ),
            })
            .collect();
        write!(f, "({})", parts.join(", "))
    }
}

/// Per-device extents of a `(name, extent)` tensor under `spec`.
pub fn shard_shape(dims: &[(&str, usize)], spec: &ShardingSpec, mesh: &MeshSpec) -> Result<Vec<usize>> {
    if dims.len() != spec.rank() {
        return Err(Error::Sharding(format!(
            "spec {spec} has rank {}, tensor has {}",
            spec.rank(),
            dims.len()
        )));
    }
    spec.validate()?;
    dims.iter()
        .zip(&spec.0)
        .map(|(&(name, extent), axes)| {
            let parts = mesh.product(axes);
            if extent % parts != 0 {
                Err(Error::Sharding(format!(
                    "dimension '{name}' of extent {extent} does not split over {parts} devices"
                )))
            } else {
                Ok(extent / parts)
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Strategy {
    #[serde(rename = "3d")]
    ThreeD,
    #[serde(rename = "naive-2d")]
    Naive2d,
    #[serde(rename = "padded-2d")]
    Padded2d,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Naive2d, Strategy::Padded2d, Strategy::ThreeD];

    /// Mesh axis carrying the expert dimension and the all2all.
    pub fn expert_axis(self) -> Axis {
        match self {
            Strategy::ThreeD => Axis::Expert,
            Strategy::Naive2d | Strategy::Padded2d => Axis::Data,
        }
    }

    /// Axes the batch is split over.
    pub fn batch_axes(self) -> Vec<Axis> {
        match self {
            Strategy::ThreeD => vec![Axis::Data, Axis::Expert],
            Strategy::Naive2d | Strategy::Padded2d => vec![Axis::Data],
        }
    }

    /// The mesh this strategy uses on `devices` devices for `experts`
    /// experts. With more experts than devices each device holds several.
    pub fn mesh(self, devices: usize, experts: usize) -> Result<MeshSpec> {
        if devices == 0 || experts == 0 {
            return Err(Error::Sharding("devices and experts must be >= 1".into()));
        }
        let spread = experts.min(devices);
        if devices % spread != 0 || experts % spread != 0 {
            return Err(Error::Sharding(format!(
                "{self}: {devices} devices and {experts} experts do not tile evenly"
            )));
        }
        match self {
            Strategy::ThreeD => MeshSpec::new(devices / spread, spread, 1),
            Strategy::Naive2d => MeshSpec::new(spread, 1, devices / spread),
            Strategy::Padded2d => MeshSpec::new(devices, 1, 1),
        }
    }

    /// Expert count after padding.
    pub fn padded_experts(self, experts: usize, mesh: &MeshSpec) -> usize {
        match self {
            Strategy::Padded2d => experts.max(mesh.size(Axis::Data)).next_multiple_of(mesh.size(Axis::Data)),
            _ => experts,
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::ThreeD => "3d",
            Strategy::Naive2d => "naive-2d",
            Strategy::Padded2d => "padded-2d",
        })
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "3d" => Ok(Strategy::ThreeD),
            "naive-2d" => Ok(Strategy::Naive2d),
            "padded-2d" => Ok(Strategy::Padded2d),
            _ => Err(Error::Sharding(format!(
                "unknown strategy '{s}' (expected 3d, naive-2d or padded-2d)"
            ))),
        }
    }
}

/// Tensor classes that get a sharding specification.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TensorRole {
    /// `(M, N·D)`, all four projections.
    AttentionWeights,
    /// `(M, H)`
    Ffn1Weights,
    /// `(H, M)`
    Ffn2Weights,
    /// `(B, T, H)`
    Ffn1Activation,
    /// `(B, T, M)`
    Ffn2Activation,
    /// `(M, E)`
    Router,
    /// `(E, M, H)`
    ExpertFfn1,
    /// `(E, H, M)`
    ExpertFfn2,
    Ogsm,
    Ogsec,
    Oegcm,
    Ogecm,
    Oegch,
    /// `(V, M)`
    Embedding,
    /// `(M, V)`
    Unembedding,
    /// `(M)` norm gains.
    Norm,
}

impl TensorRole {
    pub fn is_weight(self) -> bool {
        !matches!(
            self,
            TensorRole::Ffn1Activation
                | TensorRole::Ffn2Activation
                | TensorRole::Ogsm
                | TensorRole::Ogsec
                | TensorRole::Oegcm
                | TensorRole::Ogecm
                | TensorRole::Oegch
        )
    }
}

/// The sharding specification of every tensor role under `strategy`.
///
/// The 2D strategies have no Expert axis: weights are sharded over Data where
/// the 3D layout uses Expert, and activations are split over Data by group.
pub fn default_specs(strategy: Strategy) -> BTreeMap<TensorRole, ShardingSpec> {
    use Axis::*;
    use TensorRole::*;
    let n: Vec<Axis> = Vec::new();
    let s = |dims: Vec<Vec<Axis>>| ShardingSpec(dims);
    let mut m = BTreeMap::new();
    match strategy {
        Strategy::ThreeD => {
            m.insert(AttentionWeights, s(vec![vec![Expert], vec![Model]]));
            m.insert(Ffn1Weights, s(vec![vec![Expert], vec![Model]]));
            m.insert(Ffn2Weights, s(vec![vec![Model], vec![Expert]]));
            m.insert(Ffn1Activation, s(vec![vec![Data, Expert], n.clone(), vec![Model]]));
            m.insert(Ffn2Activation, s(vec![vec![Data, Expert], n.clone(), vec![Model]]));
            m.insert(Router, s(vec![n.clone(), n.clone()]));
            m.insert(ExpertFfn1, s(vec![vec![Expert], n.clone(), vec![Model]]));
            m.insert(ExpertFfn2, s(vec![vec![Expert], vec![Model], n.clone()]));
            m.insert(Ogsm, s(vec![vec![Data], vec![Expert], n.clone(), vec![Model]]));
            m.insert(Ogsec, s(vec![vec![Data], vec![Expert], n.clone(), n.clone(), n.clone()]));
            for row in [Oegcm, Ogecm, Oegch] {
                m.insert(row, s(vec![vec![Data], vec![Expert], n.clone(), n.clone(), vec![Model]]));
            }
            m.insert(Embedding, s(vec![vec![Model], vec![Expert]]));
            m.insert(Unembedding, s(vec![vec![Expert], vec![Model]]));
        }
        Strategy::Naive2d | Strategy::Padded2d => {
            m.insert(AttentionWeights, s(vec![vec![Data], vec![Model]]));
            m.insert(Ffn1Weights, s(vec![vec![Data], vec![Model]]));
            m.insert(Ffn2Weights, s(vec![vec![Model], vec![Data]]));
            m.insert(Ffn1Activation, s(vec![vec![Data], n.clone(), vec![Model]]));
            m.insert(Ffn2Activation, s(vec![vec![Data], n.clone(), vec![Model]]));
            m.insert(Router, s(vec![n.clone(), n.clone()]));
            m.insert(ExpertFfn1, s(vec![vec![Data], n.clone(), vec![Model]]));
            m.insert(ExpertFfn2, s(vec![vec![Data], vec![Model], n.clone()]));
            m.insert(Ogsm, s(vec![n.clone(), vec![Data], n.clone(), vec![Model]]));
            m.insert(Ogsec, s(vec![n.clone(), vec![Data], n.clone(), n.clone(), n.clone()]));
            m.insert(Ogecm, s(vec![n.clone(), vec![Data], n.clone(), n.clone(), vec![Model]]));
            for row in [Oegcm, Oegch] {
                m.insert(row, s(vec![n.clone(), vec![Data], n.clone(), n.clone(), vec![Model]]));
            }
            m.insert(Embedding, s(vec![vec![Model], vec![Data]]));
            m.insert(Unembedding, s(vec![vec![Data], vec![Model]]));
        }
    }
    m.insert(Norm, s(vec![n]));
    m
}

/// Checks a mesh against a model before any layout is built.
pub fn validate_mesh(cfg: &ModelConfig, mesh: &MeshSpec, devices: usize) -> Result<()> {
    if mesh.devices() != devices {
        return Err(Error::Sharding(format!(
            "mesh {mesh} has {} devices, {devices} available",
            mesh.devices()
        )));
    }
    if cfg.num_moe_layers() > 0 {
        let e = cfg.router.num_experts;
        if mesh.expert > e {
            return Err(Error::Sharding(format!(
                "expert axis exceeds expert count: {} > {e}",
                mesh.expert
            )));
        }
        if e % mesh.expert != 0 {
            return Err(Error::Sharding(format!(
                "{e} experts do not split over an expert axis of {}",
                mesh.expert
            )));
        }
    }
    if cfg.heads % mesh.model != 0 {
        return Err(Error::Sharding(format!(
            "{} heads do not split over a model axis of {}",
            cfg.heads, mesh.model
        )));
    }
    if cfg.ffn_hidden % mesh.model != 0 {
        return Err(Error::Sharding(format!(
            "ffn_hidden {} does not split over a model axis of {}",
            cfg.ffn_hidden, mesh.model
        )));
    }
    Ok(())
}
