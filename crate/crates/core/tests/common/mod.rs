//! Independent reference implementations shared by the integration tests
//! and the acceptance harness.
#![allow(dead_code)]

use moescope::autograd::{GradCheckReport, Graph};
use moescope::model::{
    build_model, check_model_gradients, forward, lm_loss, moe_ffn, moe_ffn_oracle, register, FfnParams, ModelConfig,
    ModelParams, MoePlacement, MoeWeights,
};
use moescope::routing::{RouterConfig, SecondChoicePolicy};
use moescope::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `max |a - b| / max |b|`, zero when both are zero.
pub fn rel_err(a: &Tensor, b: &Tensor) -> f64 {
    let diff = a.max_abs_diff(b).expect("same dims");
    let scale = b.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if diff == 0.0 {
        0.0
    } else {
        diff / scale.max(f64::MIN_POSITIVE)
    }
}

fn normal_tensor(rng: &mut ChaCha8Rng, dims: &[(&str, usize)], std: f64) -> Tensor {
    Tensor::from_fn(dims, |_| (rng.random::<f64>() * 2.0 - 1.0) * std).unwrap()
}

/// One randomized sparse-FFN instance.
pub struct MoeCase {
    pub x: Tensor,
    pub weights: MoeWeights,
    pub cfg: RouterConfig,
}

pub fn moe_case(seed: u64) -> MoeCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let e = [2, 4, 8][rng.random_range(0..3)];
    let k = rng.random_range(1..=2);
    let c = [1.0, 1.25, 2.0][rng.random_range(0..3)];
    let (o, g) = (rng.random_range(1..=2), rng.random_range(1..=2));
    let s = rng.random_range(1..=64);
    let (m, h) = (rng.random_range(2..=8), rng.random_range(2..=8));
    let mut cfg = RouterConfig::new(e, k, c);
    cfg.normalize_gates = rng.random::<bool>();
    if rng.random::<bool>() {
        cfg.second_choice_policy = SecondChoicePolicy::RandomProportional;
    }
    MoeCase {
        x: normal_tensor(&mut rng, &[("o", o), ("g", g), ("s", s), ("m", m)], 1.0),
        weights: MoeWeights {
            router: normal_tensor(&mut rng, &[("m", m), ("e", e)], 1.0),
            w_in: normal_tensor(&mut rng, &[("e", e), ("m", m), ("h", h)], 0.5),
            w_out: normal_tensor(&mut rng, &[("e", e), ("h", h), ("m", m)], 0.5),
        },
        cfg,
    }
}

/// Worst relative error between the einsum path and the per-token oracle
/// over `n` seeded cases, and how many cases agreed within `tol`.
pub fn oracle_fuzz(n: u64, tol: f64) -> (usize, f64) {
    let mut agree = 0;
    let mut worst = 0.0f64;
    for seed in 0..n {
        let case = moe_case(seed);
        let (y, _) = moe_ffn(&case.x, &case.weights, &case.cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let oracle = moe_ffn_oracle(&case.x, &case.weights, &case.cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let err = rel_err(&y, &oracle);
        worst = worst.max(err);
        if err <= tol {
            agree += 1;
        }
    }
    (agree, worst)
}

/// `silu(x · w_in) · w_out` per token of an `(o, g, s, m)` input.
pub fn plain_ffn(x: &Tensor, w_in: &[f64], w_out: &[f64], h: usize) -> Tensor {
    let m = *x.shape().last().unwrap();
    let mut out = vec![0.0; x.len()];
    for (t, row) in x.data().chunks(m).enumerate() {
        for k in 0..h {
            let mut a = 0.0;
            for i in 0..m {
                a += row[i] * w_in[i * h + k];
            }
            let a = a / (1.0 + (-a).exp());
            for i in 0..m {
                out[t * m + i] += a * w_out[k * m + i];
            }
        }
    }
    Tensor::from_parts(x.names().to_vec(), x.shape().to_vec(), out).unwrap()
}

/// The standard gradient-check model: L=2, M=16, E=4, one MoE layer.
pub fn grad_check_config() -> ModelConfig {
    let mut cfg = ModelConfig::dense(2, 16, 2, 16, 12, 4);
    cfg.moe_placement = MoePlacement::EveryK { k: 2 };
    cfg.router = RouterConfig::new(4, 2, 2.0);
    cfg
}

/// Total training loss (cross-entropy plus both aux losses) at `params`.
pub fn total_loss(cfg: &ModelConfig, params: &ModelParams, tokens: &[usize], targets: &[usize], seqs: usize) -> f64 {
    let mut g = Graph::new();
    let v = register(&mut g, params, false);
    let out = forward(&mut g, &v, cfg, tokens, seqs, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let loss = lm_loss(&mut g, &out, targets, &cfg.router).unwrap();
    g.value(loss.total).item().unwrap()
}

/// Finite-difference check of every weight of the gradient-check model.
pub fn model_grad_check(seed: u64) -> GradCheckReport {
    let cfg = grad_check_config();
    // Larger weights than the default init so every path carries signal.
    let params = build_model(&cfg, seed).unwrap().map(|_, t| t.map(|v| v * 5.0));
    check_model_gradients(&cfg, &params, 2, seed + 100, 1e-5).unwrap()
}

/// Straight-line forward pass of a dense model, written without the tensor
/// library: nested loops over plain slices.
pub fn dense_reference_logits(cfg: &ModelConfig, p: &ModelParams, tokens: &[usize], seqs: usize) -> Vec<f64> {
    let (t_len, m, nh, d, v) = (cfg.seq_len, cfg.d_model, cfg.heads, cfg.head_dim(), cfg.vocab);
    let eps = cfg.norm_eps;
    let rms = |x: &[f64], gain: &[f64]| -> Vec<f64> {
        let ms = x.iter().map(|a| a * a).sum::<f64>() / x.len() as f64;
        let r = 1.0 / (ms + eps).sqrt();
        x.iter().zip(gain).map(|(a, g)| a * r * g).collect()
    };
    let rope = |vec: &mut [f64], pos: usize| {
        for i in 0..d / 2 {
            let theta = pos as f64 * cfg.rope_base.powf(-2.0 * i as f64 / d as f64);
            let (s, c) = theta.sin_cos();
            let (a, b) = (vec[2 * i], vec[2 * i + 1]);
            vec[2 * i] = a * c - b * s;
            vec[2 * i + 1] = a * s + b * c;
        }
    };
    let silu = |a: f64| a / (1.0 + (-a).exp());
    let emb = p.embed.data();
    let mut logits = Vec::with_capacity(seqs * t_len * v);
    for b in 0..seqs {
        let mut xs: Vec<Vec<f64>> = (0..t_len)
            .map(|t| emb[tokens[b * t_len + t] * m..][..m].to_vec())
            .collect();
        for layer in &p.layers {
            let normed: Vec<Vec<f64>> = xs.iter().map(|x| rms(x, layer.attn_norm.data())).collect();
            let proj = |w: &Tensor, x: &[f64], head: usize| -> Vec<f64> {
                (0..d)
                    .map(|j| (0..m).map(|i| x[i] * w.data()[(i * nh + head) * d + j]).sum())
                    .collect()
            };
            let mut attn_out = vec![vec![0.0; m]; t_len];
            for head in 0..nh {
                let q: Vec<Vec<f64>> = (0..t_len)
                    .map(|t| {
                        let mut q = proj(&layer.wq, &normed[t], head);
                        rope(&mut q, t);
                        q
                    })
                    .collect();
                let k: Vec<Vec<f64>> = (0..t_len)
                    .map(|t| {
                        let mut k = proj(&layer.wk, &normed[t], head);
                        rope(&mut k, t);
                        k
                    })
                    .collect();
                let vals: Vec<Vec<f64>> = (0..t_len).map(|t| proj(&layer.wv, &normed[t], head)).collect();
                for t in 0..t_len {
                    let scores: Vec<f64> = (0..=t)
                        .map(|u| (0..d).map(|j| q[t][j] * k[u][j]).sum::<f64>() / (d as f64).sqrt())
                        .collect();
                    let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let w: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
                    let z: f64 = w.iter().sum();
                    let ctx: Vec<f64> = (0..d)
                        .map(|j| (0..=t).map(|u| w[u] / z * vals[u][j]).sum())
                        .collect();
                    for i in 0..m {
                        attn_out[t][i] += (0..d).map(|j| ctx[j] * layer.wo.data()[(head * d + j) * m + i]).sum::<f64>();
                    }
                }
            }
            for t in 0..t_len {
                for i in 0..m {
                    xs[t][i] += attn_out[t][i];
                }
            }
            let FfnParams::SwiGlu { w_gate, w_up, w_down } = &layer.ffn else {
                panic!("dense reference only handles dense layers");
            };
            let h = cfg.ffn_hidden;
            for x in xs.iter_mut() {
                let n = rms(x, layer.ffn_norm.data());
                let hid: Vec<f64> = (0..h)
                    .map(|k| {
                        let a: f64 = (0..m).map(|i| n[i] * w_gate.data()[i * h + k]).sum();
                        let u: f64 = (0..m).map(|i| n[i] * w_up.data()[i * h + k]).sum();
                        silu(a) * u
                    })
                    .collect();
                for i in 0..m {
                    x[i] += (0..h).map(|k| hid[k] * w_down.data()[k * m + i]).sum::<f64>();
                }
            }
        }
        for x in &xs {
            let n = rms(x, p.final_norm.data());
            for j in 0..v {
                logits.push((0..m).map(|i| n[i] * p.unembed.data()[i * v + j]).sum());
            }
        }
    }
    logits
}

/// Checks one fuzzed routing instance: buffers never overflow, ample
/// capacity drops nothing, both losses ignore expert order, and dispatch is
/// exactly the support of combine.
pub fn capacity_invariants(seed: u64) -> Result<(), String> {
    use moescope::routing::{load_balance_loss, route, router_z_loss, RoutingOutcome};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let e = rng.random_range(1..=8);
    let k = rng.random_range(1..=e.min(3));
    let (o, g, s) = (rng.random_range(1..=2), rng.random_range(1..=3), rng.random_range(1..=24));
    let mut cfg = RouterConfig::new(e, k, [0.5, 1.0, 1.25, 2.0, 4.0][rng.random_range(0..5)]);
    if rng.random::<bool>() {
        cfg.fixed_capacity = Some(if rng.random::<bool>() { k * s } else { rng.random_range(0..=s) });
    }
    let dims = [("o", o), ("g", g), ("s", s), ("e", e)];
    let logits = normal_tensor(&mut rng, &dims, 3.0);
    let probs = moescope::tensor::softmax(&logits, "e").unwrap();
    let outcome: RoutingOutcome = route(&probs, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).map_err(|e| e.to_string())?;
    let cap = outcome.dims.capacity;

    for (gi, group) in outcome.choices.chunks(s).enumerate() {
        let mut load = vec![0usize; e];
        for c in group.iter().flatten().filter(|c| !c.dropped()) {
            load[c.expert] += 1;
            if c.position.unwrap() >= cap {
                return Err(format!("seed {seed}: slot {:?} beyond capacity {cap}", c.position));
            }
        }
        if let Some(l) = load.iter().find(|&&l| l > cap) {
            return Err(format!("seed {seed}: group {gi} expert load {l} > capacity {cap}"));
        }
    }
    if cap >= k * s && outcome.stats.dropped_choices != 0 {
        return Err(format!("seed {seed}: {} drops with capacity {cap} >= K·S", outcome.stats.dropped_choices));
    }
    for (d, c) in outcome.dispatch.data().iter().zip(outcome.combine.data()) {
        if *d != if *c != 0.0 { 1.0 } else { 0.0 } {
            return Err(format!("seed {seed}: dispatch {d} where combine is {c}"));
        }
    }

    // Reverse-rotate the expert axis; the losses must not notice.
    let shift = rng.random_range(0..e);
    let perm = |t: &Tensor| Tensor::from_fn(&t.dims(), |i| t.get(&[i[0], i[1], i[2], (i[3] + shift) % e])).unwrap();
    let z = router_z_loss(&logits).unwrap();
    let z_perm = router_z_loss(&perm(&logits)).unwrap();
    if (z - z_perm).abs() > 1e-12 * z.abs().max(1.0) {
        return Err(format!("seed {seed}: z-loss {z} vs {z_perm} after permutation"));
    }
    let mut det = cfg.clone();
    det.second_choice_policy = Default::default();
    let mut r = ChaCha8Rng::seed_from_u64(0);
    let a = route(&probs, &det, &mut r).unwrap();
    let b = route(&perm(&probs), &det, &mut r).unwrap();
    let la = load_balance_loss(&probs, &a.choices).unwrap();
    let lb = load_balance_loss(&perm(&probs), &b.choices).unwrap();
    if (la - lb).abs() > 1e-12 * la.abs().max(1.0) {
        return Err(format!("seed {seed}: balance loss {la} vs {lb} after permutation"));
    }
    Ok(())
}

// Sharding fixtures.

use moescope::routing::{route, RoutingOutcome};
use moescope::sharding::{brute_force_comm, default_specs, moe_layout, plan_step, tensor_inventory, CommKind, MeshSpec, MoeLayout, Strategy, Workload};

pub fn toy_workload(experts: usize, top_k: usize, capacity_factor: f64, batch_tokens: usize) -> Workload {
    let mut model = ModelConfig::dense(4, 16, 4, 32, 64, 8);
    model.moe_placement = MoePlacement::EveryK { k: 2 };
    model.router = RouterConfig::new(experts, top_k, capacity_factor);
    Workload { model, batch_tokens }
}

pub fn random_outcome(layout: &MoeLayout, cfg: &RouterConfig, seed: u64) -> RoutingOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = [("o", layout.outer), ("g", layout.groups), ("s", layout.group_size), ("e", layout.experts)];
    let logits = Tensor::from_fn(&dims, |_| 3.0 * rng.random::<f64>()).unwrap();
    let probs = moescope::tensor::softmax(&logits, "e").unwrap();
    route(&probs, cfg, &mut rng).unwrap()
}

/// A small mesh for `strategy` with at most 16 devices.
pub fn small_mesh(strategy: Strategy, rng: &mut ChaCha8Rng, experts: usize) -> MeshSpec {
    let pick = |rng: &mut ChaCha8Rng, opts: &[usize]| opts[rng.random_range(0..opts.len())];
    match strategy {
        Strategy::ThreeD => {
            let e = pick(rng, &[1, 2, 4]).min(experts);
            let d = pick(rng, &[1, 2]);
            let m = pick(rng, &[1, 2, 4]).min(16 / (d * e));
            MeshSpec::new(d, e, m).unwrap()
        }
        Strategy::Naive2d => MeshSpec::new(pick(rng, &[1, 2, 4]).min(experts), 1, pick(rng, &[1, 2, 4])).unwrap(),
        Strategy::Padded2d => MeshSpec::new(pick(rng, &[2, 4, 8, 16]), 1, 1).unwrap(),
    }
}

/// Every inventory shard times its axis product gives back the global
/// extent, for random small meshes under every strategy.
pub fn reassembly_fuzz(cases: usize) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..cases {
        let strategy = Strategy::ALL[rng.random_range(0..3)];
        let w = toy_workload(4, 2, 2.0, 256);
        let mesh = small_mesh(strategy, &mut rng, 4);
        let inv = tensor_inventory(&w, &mesh, strategy).map_err(|e| e.to_string())?;
        let roles: std::collections::BTreeSet<_> = inv.iter().map(|t| t.role).collect();
        if roles.len() != default_specs(strategy).len() {
            return Err(format!("{strategy} on {mesh}: only {} spec rows exercised", roles.len()));
        }
        for t in &inv {
            for ((_, global), (local, axes)) in t.dims.iter().zip(t.shard_shape.iter().zip(&t.spec.0)) {
                if local * mesh.product(axes) != *global {
                    return Err(format!("{} on {mesh}: {local} x {} != {global}", t.name, mesh.product(axes)));
                }
            }
        }
    }
    Ok(())
}

/// Compares every planned all2all against the per-device enumeration on
/// random instances of at most 16 devices. Returns how many instances had a
/// non-trivial expert axis.
pub fn brute_force_fuzz(cases: usize) -> Result<usize, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut checked = 0;
    for case in 0..cases {
        let strategy = Strategy::ALL[case % 3];
        let experts = [2, 4, 8][rng.random_range(0..3)];
        let top_k = rng.random_range(1..=2);
        let cf = [1.0, 1.25, 2.0][rng.random_range(0..3)];
        let w = toy_workload(experts, top_k, cf, 256);
        let mesh = small_mesh(strategy, &mut rng, experts);
        if mesh.devices() > 16 {
            return Err(format!("mesh {mesh} too large"));
        }
        let layout = moe_layout(&w, &mesh, strategy).map_err(|e| e.to_string())?;
        let outcome = random_outcome(&layout, &w.model.router, case as u64);
        let bpv = rng.random_range(1..=4);
        let brute = brute_force_comm(&w, &mesh, strategy, &outcome, bpv).map_err(|e| e.to_string())?;
        let all2all: Vec<_> = plan_step(&w, &mesh, strategy, bpv)
            .map_err(|e| e.to_string())?
            .into_iter()
            .filter(|e| e.kind == CommKind::All2all)
            .collect();
        if mesh.size(strategy.expert_axis()) == 1 {
            if !all2all.is_empty() || brute.slot_bytes.iter().any(|&b| b != 0) {
                return Err(format!("{strategy} {mesh}: traffic on a trivial expert axis"));
            }
            continue;
        }
        if all2all.len() != 4 * w.model.num_moe_layers() {
            return Err(format!("{strategy} {mesh}: {} all2alls", all2all.len()));
        }
        for ev in &all2all {
            for (dev, &bytes) in brute.slot_bytes.iter().enumerate() {
                if ev.transfer_bytes(&mesh) != bytes {
                    return Err(format!(
                        "{strategy} {mesh} device {dev}: planned {} vs enumerated {bytes}",
                        ev.transfer_bytes(&mesh)
                    ));
                }
            }
        }
        if brute.token_bytes.iter().zip(&brute.slot_bytes).any(|(t, s)| t > s) {
            return Err(format!("{strategy} {mesh}: occupied bytes exceed buffer bytes"));
        }
        checked += 1;
    }
    Ok(checked)
}
