mod common;

use common::*;
use moescope::autograd::Graph;
use moescope::model::{
    block_forward, build_model, count_params, forward, lm_loss, moe_ffn, moe_ffn_oracle, register,
    FfnParams, ModelConfig, ModelParams, MoePlacement, MoeWeights,
};
use moescope::routing::RouterConfig;
use moescope::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn logits(cfg: &ModelConfig, p: &ModelParams, tokens: &[usize], seqs: usize) -> Tensor {
    let mut g = Graph::new();
    let v = register(&mut g, p, false);
    let out = forward(&mut g, &v, cfg, tokens, seqs, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    g.value(out.logits).clone()
}

fn random_tokens(n: usize, vocab: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(0..vocab)).collect()
}

#[test]
fn dense_logits_match_straight_line_reference() {
    let cfg = ModelConfig::dense(2, 8, 2, 12, 10, 5);
    // Scaled-up init so attention is far from uniform.
    let p = build_model(&cfg, 11).unwrap().map(|_, t| t.map(|v| v * 20.0));
    let tokens = random_tokens(15, 10, 1);
    let ours = logits(&cfg, &p, &tokens, 3);
    let reference = Tensor::new(&[("b", 3), ("t", 5), ("v", 10)], dense_reference_logits(&cfg, &p, &tokens, 3)).unwrap();
    assert!(rel_err(&ours, &reference) <= 1e-10, "{}", rel_err(&ours, &reference));
}

#[test]
fn einsum_path_matches_per_token_oracle() {
    let (agree, worst) = oracle_fuzz(100, 1e-10);
    assert_eq!(agree, 100, "worst relative error {worst:e}");
}

#[test]
fn oracle_single_token_single_expert() {
    let x = Tensor::new(&[("o", 1), ("g", 1), ("s", 1), ("m", 2)], vec![0.5, -1.0]).unwrap();
    let w = MoeWeights {
        router: Tensor::new(&[("m", 2), ("e", 1)], vec![0.3, 0.1]).unwrap(),
        w_in: Tensor::new(&[("e", 1), ("m", 2), ("h", 1)], vec![1.0, 2.0]).unwrap(),
        w_out: Tensor::new(&[("e", 1), ("h", 1), ("m", 2)], vec![3.0, -1.0]).unwrap(),
    };
    let y = moe_ffn_oracle(&x, &w, &RouterConfig::new(1, 1, 1.0), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let a: f64 = 0.5 - 2.0;
    let s = a / (1.0 + (-a).exp());
    assert_eq!(y.data(), &[3.0 * s, -s]);
}

#[test]
fn single_expert_layer_is_a_plain_ffn() {
    let case = moe_case(7);
    let x = case.x;
    let (m, h) = (x.shape()[3], case.weights.w_in.extent("h").unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let w_in: Vec<f64> = (0..m * h).map(|_| rng.random::<f64>() - 0.5).collect();
    let w_out: Vec<f64> = (0..m * h).map(|_| rng.random::<f64>() - 0.5).collect();
    let w = MoeWeights {
        router: Tensor::ones(&[("m", m), ("e", 1)]).unwrap(),
        w_in: Tensor::new(&[("e", 1), ("m", m), ("h", h)], w_in.clone()).unwrap(),
        w_out: Tensor::new(&[("e", 1), ("h", h), ("m", m)], w_out.clone()).unwrap(),
    };
    let (y, outcome) = moe_ffn(&x, &w, &RouterConfig::new(1, 1, 1.0), &mut rng).unwrap();
    assert_eq!(outcome.stats.dropped_choices, 0);
    assert_eq!(y, plain_ffn(&x, &w_in, &w_out, h));
}

#[test]
fn zero_capacity_drops_everything() {
    let case = moe_case(3);
    let mut cfg = case.cfg.clone();
    cfg.fixed_capacity = Some(0);
    let (y, outcome) = moe_ffn(&case.x, &case.weights, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert!(y.data().iter().all(|&v| v == 0.0));
    assert_eq!(outcome.stats.surviving_choices, 0);
}

#[test]
fn choices_are_conserved() {
    for seed in 0..30 {
        let case = moe_case(seed);
        let (_, o) = moe_ffn(&case.x, &case.weights, &case.cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let tokens = case.x.len() / case.x.shape()[3];
        assert_eq!(o.stats.surviving_choices + o.stats.dropped_choices, case.cfg.top_k * tokens);
    }
}

fn single_expert_model() -> ModelConfig {
    let mut cfg = ModelConfig::dense(2, 8, 2, 12, 16, 4);
    cfg.moe_placement = MoePlacement::LastK { k: 1 };
    cfg.router = RouterConfig::new(1, 1, 1.0);
    cfg.groups = 2;
    cfg
}

#[test]
fn single_expert_model_equals_densified_model() {
    let cfg = single_expert_model();
    let mut dense_cfg = cfg.clone();
    dense_cfg.moe_placement = MoePlacement::None;
    for seed in 0..5 {
        let p = build_model(&cfg, seed).unwrap();
        let dense = p.densify_single_expert().unwrap();
        let tokens = random_tokens(16, 16, seed);
        let a = logits(&cfg, &p, &tokens, 4);
        let b = logits(&dense_cfg, &dense, &tokens, 4);
        assert!(rel_err(&a, &b) <= 1e-10);
    }
}

#[test]
fn permuting_experts_leaves_logits_unchanged() {
    let mut cfg = ModelConfig::dense(2, 8, 2, 12, 16, 4);
    cfg.moe_placement = MoePlacement::EveryK { k: 1 };
    cfg.router = RouterConfig::new(4, 2, 1.0);
    let p = build_model(&cfg, 4).unwrap().map(|_, t| t.map(|v| v * 10.0));
    let perm = [2usize, 0, 3, 1];
    let permuted = p.map(|name, t| {
        if name.ends_with("ffn.router") {
            Tensor::from_fn(&t.dims(), |i| t.get(&[i[0], perm[i[1]]])).unwrap()
        } else if name.ends_with("ffn.w_in") || name.ends_with("ffn.w_out") {
            Tensor::from_fn(&t.dims(), |i| t.get(&[perm[i[0]], i[1], i[2]])).unwrap()
        } else {
            t.clone()
        }
    });
    let tokens = random_tokens(8, 16, 9);
    let a = logits(&cfg, &p, &tokens, 2);
    let b = logits(&cfg, &permuted, &tokens, 2);
    assert!(rel_err(&b, &a) <= 1e-10);
}

#[test]
fn zero_weights_give_residual_identity() {
    let cfg = ModelConfig::dense(1, 8, 2, 12, 16, 4);
    let p = build_model(&cfg, 0).unwrap();
    let zeroed = p.map(|name, t| if name.contains("norm") { t.clone() } else { t.map(|_| 0.0) });
    let mut g = Graph::new();
    let v = register(&mut g, &zeroed, false);
    let x = g.constant(Tensor::from_fn(&[("b", 2), ("t", 4), ("m", 8)], |i| (i[0] + i[1] * i[2]) as f64).unwrap());
    let (y, aux) = block_forward(&mut g, x, &v.layers[0], &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert!(aux.is_none());
    assert_eq!(g.value(y), g.value(x));
}

#[test]
fn lm_loss_matches_direct_formula() {
    let mut cfg = grad_check_config();
    cfg.router.balance_coef = 0.3;
    cfg.router.z_coef = 0.07;
    let p = build_model(&cfg, 2).unwrap();
    let tokens = random_tokens(8, cfg.vocab, 5);
    let targets = random_tokens(8, cfg.vocab, 6);
    let mut g = Graph::new();
    let v = register(&mut g, &p, false);
    let out = forward(&mut g, &v, &cfg, &tokens, 2, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let parts = lm_loss(&mut g, &out, &targets, &cfg.router).unwrap();
    let l = g.value(out.logits).data();
    let vsz = cfg.vocab;
    let mut ce = 0.0;
    for (t, &y) in targets.iter().enumerate() {
        let row = &l[t * vsz..(t + 1) * vsz];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        ce += lse - row[y];
    }
    ce /= targets.len() as f64;
    let bal = g.value(parts.balance.unwrap()).item().unwrap();
    let z = g.value(parts.z.unwrap()).item().unwrap();
    let expected = ce + 0.3 * bal + 0.07 * z;
    let got = g.value(parts.total).item().unwrap();
    assert!((got - expected).abs() <= 1e-10 * expected.abs());
}

#[test]
fn uniform_logits_give_log_vocab() {
    let cfg = ModelConfig::dense(1, 8, 2, 12, 16, 4);
    let p = build_model(&cfg, 0).unwrap();
    let zeroed = p.map(|name, t| if name == "unembed" { t.map(|_| 0.0) } else { t.clone() });
    let mut g = Graph::new();
    let v = register(&mut g, &zeroed, false);
    let out = forward(&mut g, &v, &cfg, &[1, 2, 3, 4], 1, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let parts = lm_loss(&mut g, &out, &[2, 3, 4, 5], &cfg.router).unwrap();
    assert!((g.value(parts.total).item().unwrap() - 16f64.ln()).abs() < 1e-12);
}

#[test]
fn analytic_gradients_match_finite_differences() {
    for seed in 0..3 {
        let report = model_grad_check(seed);
        eprintln!("seed {seed}: {:e}", report.max_rel_error);
        assert!(report.passes(1e-4), "{report:?}");
        assert!(report.checked > 4000);
    }
}

#[test]
fn census_matches_built_weights() {
    let mut cfg = ModelConfig::dense(4, 8, 2, 16, 32, 4);
    cfg.router = RouterConfig::new(4, 2, 2.0);
    for placement in [MoePlacement::None, MoePlacement::EveryK { k: 2 }, MoePlacement::LastK { k: 3 }] {
        cfg.moe_placement = placement;
        let count = count_params(&cfg);
        let p = build_model(&cfg, 0).unwrap();
        assert_eq!(count.total, p.num_values());
        let activated: usize = p
            .layers
            .iter()
            .map(|l| match &l.ffn {
                FfnParams::Moe { router, w_in, w_out } => router.len() + 2 * (w_in.len() + w_out.len()) / 4,
                FfnParams::SwiGlu { w_gate, w_up, w_down } => w_gate.len() + w_up.len() + w_down.len(),
                FfnParams::Mlp { .. } => unreachable!(),
            })
            .sum::<usize>()
            + p.entries().iter().filter(|(n, _)| !n.contains(".ffn.")).map(|(_, t)| t.len()).sum::<usize>();
        assert_eq!(count.activated, activated);
    }
}
