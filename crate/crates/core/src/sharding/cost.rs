use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::plan::{memory_per_device, plan_step, tensor_inventory, CommEvent, CommKind, MemoryReport, TensorShard, Workload};
use super::{validate_mesh, Axis, MeshSpec, Strategy};
use crate::error::{Error, Result};
use crate::model::count_params;

/// Adam keeps two moments per weight.
pub const ADAM_STATE_MULTIPLIER: f64 = 2.0;

/// Hardware constants for the α-β cost model. Only ratios between
/// estimates are meaningful.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviceProfile {
    /// flop/s per device.
    pub peak_flops: f64,
    /// Fraction of peak reached by the matmuls.
    pub mfu: f64,
    /// Bytes/s per device on the in-slice interconnect.
    pub ici_bandwidth: f64,
    /// Bytes/s per device between slices.
    pub dcn_bandwidth: f64,
    /// Seconds added to every collective.
    pub link_latency: f64,
    pub mem_capacity: f64,
    pub bytes_per_value: u64,
    /// Devices per slice. Data-axis collectives cross slices (and use the
    /// DCN bandwidth) only when the mesh is larger than one slice.
    #[serde(default = "default_slice_devices")]
    pub slice_devices: usize,
}

fn default_slice_devices() -> usize {
    256
}

impl Default for DeviceProfile {
    fn default() -> Self {
        Self {
            peak_flops: 275e12,
            mfu: 0.5,
            ici_bandwidth: 45e9,
            dcn_bandwidth: 6.25e9,
            link_latency: 1e-5,
            mem_capacity: 32e9,
            bytes_per_value: 2,
            slice_devices: default_slice_devices(),
        }
    }
}

impl DeviceProfile {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.peak_flops,
            self.ici_bandwidth,
            self.dcn_bandwidth,
            self.link_latency,
            self.mem_capacity,
        ];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0))
            || !(self.mfu > 0.0 && self.mfu <= 1.0)
            || self.bytes_per_value == 0
            || self.slice_devices == 0
        {
            return Err(Error::InvalidArgument(format!("invalid device profile {self:?}")));
        }
        Ok(())
    }

    fn uses_dcn(&self, event: &CommEvent, mesh: &MeshSpec) -> bool {
        event.axes.contains(&Axis::Data) && mesh.data > 1 && mesh.devices() > self.slice_devices
    }

    /// α-β cost of one collective.
    pub fn event_seconds(&self, event: &CommEvent, mesh: &MeshSpec) -> f64 {
        let p = event.group_size(mesh) as f64;
        let bw = if self.uses_dcn(event, mesh) {
            self.dcn_bandwidth
        } else {
            self.ici_bandwidth
        };
        let passes = match event.kind {
            CommKind::Allreduce => 2.0,
            CommKind::All2all | CommKind::Allgather | CommKind::ReduceScatter => 1.0,
        };
        self.link_latency + passes * event.bytes_per_device as f64 * (p - 1.0) / (p * bw)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TimedEvent {
    #[serde(flatten)]
    pub event: CommEvent,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepTimeEstimate {
    pub compute_seconds: f64,
    pub comm_ici_seconds: f64,
    pub comm_dcn_seconds: f64,
    /// Communication seconds per collective kind.
    pub comm_by_kind: BTreeMap<String, f64>,
    /// Compute plus all communication, nothing overlapped.
    pub total_seconds: f64,
    pub memory: MemoryReport,
    pub events: Vec<TimedEvent>,
}

impl StepTimeEstimate {
    pub fn comm_seconds(&self) -> f64 {
        self.comm_ici_seconds + self.comm_dcn_seconds
    }
}

/// Sequential compute plus collectives for one training step.
pub fn estimate_step_time(w: &Workload, mesh: &MeshSpec, strategy: Strategy, profile: &DeviceProfile) -> Result<StepTimeEstimate> {
    profile.validate()?;
    validate_mesh(&w.model, mesh, mesh.devices())?;
    let mut padded = w.model.clone();
    padded.router.num_experts = strategy.padded_experts(w.model.router.num_experts, mesh);
    let activated = count_params(&padded).activated as f64;
    let compute = 6.0 * activated * w.batch_tokens as f64
        / (mesh.devices() as f64 * profile.peak_flops * profile.mfu);
    let bpv = profile.bytes_per_value;
    let events = plan_step(w, mesh, strategy, bpv)?;
    let memory = memory_per_device(w, mesh, strategy, bpv, ADAM_STATE_MULTIPLIER)?;
    let (mut ici, mut dcn) = (0.0, 0.0);
    let mut by_kind = BTreeMap::new();
    let timed: Vec<TimedEvent> = events
        .into_iter()
        .map(|event| {
            let seconds = profile.event_seconds(&event, mesh);
            if profile.uses_dcn(&event, mesh) {
                dcn += seconds;
            } else {
                ici += seconds;
            }
            let kind = serde_json::to_value(event.kind).expect("enum").as_str().expect("string").to_string();
            *by_kind.entry(kind).or_insert(0.0) += seconds;
            TimedEvent { event, seconds }
        })
        .collect();
    Ok(StepTimeEstimate {
        compute_seconds: compute,
        comm_ici_seconds: ici,
        comm_dcn_seconds: dcn,
        comm_by_kind: by_kind,
        total_seconds: compute + ici + dcn,
        memory,
        events: timed,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StrategyReport {
    pub strategy: Strategy,
    pub mesh: MeshSpec,
    pub padded_experts: usize,
    /// Parameters including padding experts.
    pub params_total: usize,
    pub params_activated: usize,
    pub total_seconds: f64,
    pub compute_seconds: f64,
    pub comm_seconds: f64,
    pub memory: MemoryReport,
    pub fits_in_memory: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StrategyComparison {
    pub devices: usize,
    pub experts: usize,
    /// Naive-2d, padded-2d, 3d.
    pub strategies: Vec<StrategyReport>,
    /// Fastest first.
    pub ordering: Vec<Strategy>,
}

impl StrategyComparison {
    pub fn get(&self, strategy: Strategy) -> &StrategyReport {
        self.strategies.iter().find(|r| r.strategy == strategy).expect("all strategies present")
    }
}

/// Runs every strategy on its default mesh for `devices` devices.
pub fn compare_strategies(w: &Workload, devices: usize, profile: &DeviceProfile) -> Result<StrategyComparison> {
    let experts = w.model.router.num_experts;
    let mut strategies = Vec::new();
    for strategy in Strategy::ALL {
        let mesh = strategy.mesh(devices, experts)?;
        let est = estimate_step_time(w, &mesh, strategy, profile)?;
        let padded_experts = strategy.padded_experts(experts, &mesh);
        let mut padded = w.model.clone();
        padded.router.num_experts = padded_experts;
        let params = count_params(&padded);
        strategies.push(StrategyReport {
            strategy,
            mesh,
            padded_experts,
            params_total: params.total,
            params_activated: params.activated,
            total_seconds: est.total_seconds,
            compute_seconds: est.compute_seconds,
            comm_seconds: est.comm_seconds(),
            fits_in_memory: est.memory.total_bytes as f64 <= profile.mem_capacity,
            memory: est.memory,
        });
    }
    let mut ordering: Vec<(f64, Strategy)> = strategies.iter().map(|r| (r.total_seconds, r.strategy)).collect();
    ordering.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(StrategyComparison {
        devices,
        experts,
        strategies,
        ordering: ordering.into_iter().map(|(_, s)| s).collect(),
    })
}

/// Everything the simulator knows about one layout, as written to JSON.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ShardingReport {
    pub strategy: Strategy,
    pub mesh: MeshSpec,
    pub devices: usize,
    pub batch_tokens: usize,
    pub profile: DeviceProfile,
    pub tensors: Vec<TensorShard>,
    pub estimate: StepTimeEstimate,
}

pub fn sharding_report(w: &Workload, mesh: &MeshSpec, strategy: Strategy, profile: &DeviceProfile) -> Result<ShardingReport> {
    let estimate = estimate_step_time(w, mesh, strategy, profile)?;
    Ok(ShardingReport {
        strategy,
        mesh: *mesh,
        devices: mesh.devices(),
        batch_tokens: w.batch_tokens,
        profile: profile.clone(),
        tensors: tensor_inventory(w, mesh, strategy)?,
        estimate,
    })
}
