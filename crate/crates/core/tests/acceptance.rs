//! Runs the ten acceptance criteria and prints one PASS/FAIL line each.
//! Exits nonzero when any criterion fails.

mod common;

use std::fs;
use std::time::Instant;

use moescope::budget::{chinchilla_tokens, dense_budget, moe_token_allocation};
use moescope::model::{moe_ffn, MoeWeights};
use moescope::routing::{load_balance_loss, route, router_z_loss, RouterConfig};
use moescope::sharding::{compare_strategies, estimate_step_time, memory_per_device, preset, DeviceProfile, Strategy};
use moescope::train::{train, RunConfig, RunSummary, Schedule, METRICS_FILE};
use moescope::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(cond: bool, ok: String, bad: String) -> Outcome {
    if cond {
        Ok(ok)
    } else {
        Err(bad)
    }
}

fn budget() -> Outcome {
    for (params, tokens) in [(6_400_000_000u64, 128_000_000_000u64), (12_600_000_000, 252_000_000_000), (29_600_000_000, 592_000_000_000)] {
        if chinchilla_tokens(params) != tokens {
            return Err(format!("chinchilla_tokens({params}) = {}", chinchilla_tokens(params)));
        }
    }
    let rows: [(u64, u64, f64, f64, f64); 5] = [
        (6_400_000_000, 1_000_000, 1.69, 0.82, 264e9),
        (6_400_000_000, 1_000_000, 1.69, 1.41, 153e9),
        (12_600_000_000, 2_000_000, 2.94, 1.50, 494e9),
        (12_600_000_000, 2_000_000, 2.94, 2.60, 285e9),
        (29_600_000_000, 2_000_000, 6.56, 1.85, 2128e9),
    ];
    let mut worst = 0.0f64;
    for (params, batch, dense_t, moe_t, published) in rows {
        let b = dense_budget(params, batch, dense_t).map_err(|e| e.to_string())?;
        let plan = moe_token_allocation(&b, moe_t).map_err(|e| e.to_string())?;
        worst = worst.max((plan.moe_tokens as f64 - published).abs() / published);
    }
    check(worst <= 0.02, format!("chinchilla exact; worst MoE row off by {:.2}%", 100.0 * worst), format!("worst row off by {:.2}%", 100.0 * worst))
}

fn routing_losses() -> Outcome {
    let zeros = Tensor::zeros(&[("o", 1), ("g", 1), ("s", 5), ("e", 4)]).unwrap();
    let z = router_z_loss(&zeros).unwrap();
    let z_err = (z - 4f64.ln().powi(2)).abs();

    let e = 4;
    let uniform = Tensor::full(&[("o", 1), ("g", 1), ("s", 8), ("e", e)], 1.0 / e as f64).unwrap();
    let cfg = RouterConfig::new(e, 1, 2.0);
    let mut balanced = route(&uniform, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    for (t, c) in balanced.choices.iter_mut().enumerate() {
        c[0].expert = t % e;
    }
    let perfect = load_balance_loss(&uniform, &balanced.choices).unwrap();
    let onehot = Tensor::from_fn(&[("o", 1), ("g", 1), ("s", 8), ("e", e)], |i| if i[3] == 2 { 1.0 } else { 0.0 }).unwrap();
    let collapsed = route(&onehot, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let collapse = load_balance_loss(&onehot, &collapsed.choices).unwrap();
    check(
        z_err <= 1e-10 && perfect == 1.0 && collapse == e as f64,
        format!("z(0) - (ln 4)^2 = {z_err:.1e}; balance {perfect} balanced, {collapse} collapsed"),
        format!("z err {z_err:e}, balance {perfect} / {collapse}"),
    )
}

fn oracle_equivalence() -> Outcome {
    let (agree, worst) = common::oracle_fuzz(100, 1e-10);
    if agree != 100 {
        return Err(format!("{agree}/100 configs agree, worst {worst:e}"));
    }
    // E = 1, K = 1 against a plain FFN, bit for bit.
    for seed in 0..20 {
        let case = common::moe_case(seed);
        let m = case.x.shape()[3];
        let h = case.weights.w_in.extent("h").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w_in: Vec<f64> = (0..m * h).map(|_| rng.random::<f64>() - 0.5).collect();
        let w_out: Vec<f64> = (0..m * h).map(|_| rng.random::<f64>() - 0.5).collect();
        let w = MoeWeights {
            router: Tensor::ones(&[("m", m), ("e", 1)]).unwrap(),
            w_in: Tensor::new(&[("e", 1), ("m", m), ("h", h)], w_in.clone()).unwrap(),
            w_out: Tensor::new(&[("e", 1), ("h", h), ("m", m)], w_out.clone()).unwrap(),
        };
        let (y, _) = moe_ffn(&case.x, &w, &RouterConfig::new(1, 1, 1.0), &mut rng).unwrap();
        if y != common::plain_ffn(&case.x, &w_in, &w_out, h) {
            return Err(format!("E=1 seed {seed} differs from the plain FFN"));
        }
    }
    Ok(format!("100/100 fuzz configs within 1e-10 (worst {worst:.1e}); E=1 exact on 20 seeds"))
}

fn gradients() -> Outcome {
    let mut worst = 0.0f64;
    let mut checked = 0;
    for seed in 0..3 {
        let r = common::model_grad_check(seed);
        worst = worst.max(r.max_rel_error);
        checked += r.checked;
    }
    check(worst < 1e-4, format!("max relative error {worst:.2e} over {checked} coordinates"), format!("max relative error {worst:e}"))
}

fn capacity() -> Outcome {
    for seed in 0..1000 {
        common::capacity_invariants(seed)?;
    }
    Ok("1000 fuzzed instances".into())
}

fn sharding() -> Outcome {
    common::reassembly_fuzz(200)?;
    let checked = common::brute_force_fuzz(300)?;
    Ok(format!("reassembly on 200 meshes; all2all bytes equal enumeration on {checked} instances"))
}

fn strategies() -> Outcome {
    let w = preset("1.6b/64e").map_err(|e| e.to_string())?;
    let c = compare_strategies(&w, 256, &DeviceProfile::default()).map_err(|e| e.to_string())?;
    let (n, p, t) = (c.get(Strategy::Naive2d), c.get(Strategy::Padded2d), c.get(Strategy::ThreeD));
    let mem = |s: Strategy| memory_per_device(&w, &s.mesh(256, 64).unwrap(), s, 2, 2.0).unwrap().expert_weight_bytes_logical;
    let expert_ratio = mem(Strategy::Padded2d) as f64 / mem(Strategy::ThreeD) as f64;
    let line = format!(
        "naive {:.3}s > padded {:.3}s >= 3d {:.3}s; params {:.2}B vs {:.2}B, expert weights x{expert_ratio}",
        n.total_seconds,
        p.total_seconds,
        t.total_seconds,
        p.params_total as f64 / 1e9,
        t.params_total as f64 / 1e9
    );
    check(
        n.total_seconds > p.total_seconds && p.total_seconds >= t.total_seconds && p.params_total > t.params_total && expert_ratio == 256.0 / 64.0,
        line.clone(),
        line,
    )
}

fn overhead() -> Outcome {
    let p = DeviceProfile::default();
    let mut parts = Vec::new();
    let mut worst = 0.0f64;
    for e in [16, 64, 256] {
        let w = preset(&format!("1.6b/{e}e")).map_err(|e| e.to_string())?;
        let mut dense = w.clone();
        dense.model.moe_placement = moescope::model::MoePlacement::None;
        let mesh = Strategy::ThreeD.mesh(256, e).map_err(|e| e.to_string())?;
        let moe_t = estimate_step_time(&w, &mesh, Strategy::ThreeD, &p).map_err(|e| e.to_string())?.total_seconds;
        let dense_t = estimate_step_time(&dense, &mesh, Strategy::ThreeD, &p).map_err(|e| e.to_string())?.total_seconds;
        let o = moe_t / dense_t - 1.0;
        worst = worst.max(o);
        parts.push(format!("E={e} {mesh} +{:.1}%", 100.0 * o));
    }
    check(worst < 0.2, parts.join(", "), parts.join(", "))
}

fn toy_training() -> Outcome {
    let root = tempfile::tempdir().map_err(|e| e.to_string())?;
    let dense = RunConfig::toy_dense(root.path().join("dense"));
    let moe = RunConfig::toy_moe(root.path().join("moe"));
    let mut moe_off = RunConfig::toy_moe(root.path().join("moe-no-balance"));
    moe_off.model.router.balance_coef = 0.0;
    let runs = [dense.clone(), moe, moe_off];
    let results: Vec<moescope::Result<RunSummary>> = std::thread::scope(|s| {
        let handles: Vec<_> = runs.iter().map(|r| s.spawn(move || train(r))).collect();
        handles.into_iter().map(|h| h.join().expect("training thread")).collect()
    });
    let mut summaries = Vec::new();
    for r in results {
        summaries.push(r.map_err(|e| e.to_string())?);
    }
    let ln_v = (dense.model.vocab as f64).ln();
    let (d, m, off) = (&summaries[0], &summaries[1], &summaries[2]);
    let line = format!(
        "dense eval {:.3} (ln V - 1 = {:.3}, floor {:.3}); MoE eval {:.3}; dropped {:.3} with balance loss vs {:.3} without",
        d.final_eval_loss,
        ln_v - 1.0,
        d.entropy_floor,
        m.final_eval_loss,
        m.tail_dropped_fraction,
        off.tail_dropped_fraction
    );
    check(
        d.final_eval_loss <= ln_v - 1.0 && m.final_eval_loss.is_finite() && m.tail_dropped_fraction < off.tail_dropped_fraction,
        line.clone(),
        line,
    )
}

fn determinism() -> Outcome {
    let root = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = |name: &str| {
        let mut r = RunConfig::toy_moe(root.path().join(name));
        r.schedule = Schedule::new(3e-3, 100);
        r.eval_every = 25;
        r.record_timing = false;
        r
    };
    let (a, b) = (config("a"), config("b"));
    train(&a).map_err(|e| e.to_string())?;
    train(&b).map_err(|e| e.to_string())?;
    for f in [METRICS_FILE, "checkpoint.bin", "checkpoint.json"] {
        let (x, y) = (fs::read(a.out_dir.join(f)).unwrap(), fs::read(b.out_dir.join(f)).unwrap());
        if x != y {
            return Err(format!("{f} differs between runs"));
        }
    }
    Ok("metrics.csv, checkpoint.bin and checkpoint.json identical across two 100-step runs".into())
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("budget arithmetic", budget),
        ("routing losses", routing_losses),
        ("oracle equivalence", oracle_equivalence),
        ("gradient checks", gradients),
        ("capacity invariants", capacity),
        ("sharding correctness", sharding),
        ("strategy comparison", strategies),
        ("overhead envelope", overhead),
        ("toy training", toy_training),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let started = Instant::now();
        let outcome = run();
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name}: {detail} [{secs:.1}s]", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {detail} [{secs:.1}s]", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
