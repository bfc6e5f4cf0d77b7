use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{forward, lm_loss, register, ModelConfig, ModelParams};
use crate::autograd::{grad_check, GradCheckReport, Graph};
use crate::error::Result;

/// Central-difference check of the full training loss (cross-entropy plus
/// both aux losses) against backprop, over every weight, on `sequences`
/// random sequences. Routing noise is replayed with the same seed on every
/// evaluation so the loss is a deterministic function of the weights.
pub fn check_model_gradients(
    cfg: &ModelConfig,
    params: &ModelParams,
    sequences: usize,
    seed: u64,
    eps: f64,
) -> Result<GradCheckReport> {
    cfg.validate_batch(sequences)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = sequences * cfg.seq_len;
    let tokens: Vec<usize> = (0..n).map(|_| rng.random_range(0..cfg.vocab)).collect();
    let targets: Vec<usize> = (0..n).map(|_| rng.random_range(0..cfg.vocab)).collect();
    let loss_at = |p: &ModelParams| -> Result<f64> {
        let mut g = Graph::new();
        let v = register(&mut g, p, false);
        let out = forward(&mut g, &v, cfg, &tokens, sequences, &mut ChaCha8Rng::seed_from_u64(0))?;
        let loss = lm_loss(&mut g, &out, &targets, &cfg.router)?;
        g.value(loss.total).item()
    };

    let mut g = Graph::new();
    let vars = register(&mut g, params, true);
    let out = forward(&mut g, &vars, cfg, &tokens, sequences, &mut ChaCha8Rng::seed_from_u64(0))?;
    let loss = lm_loss(&mut g, &out, &targets, &cfg.router)?;
    let grads = g.backward(loss.total)?;
    let mut analytic = Vec::with_capacity(params.num_values());
    for (_, v) in vars.entries() {
        analytic.extend_from_slice(grads.get(*v).data());
    }
    let flat = params.flatten();
    let mut failure = None;
    let report = grad_check(
        |x| match params.with_flat(x).and_then(|p| loss_at(&p)) {
            Ok(v) => v,
            Err(e) => {
                failure.get_or_insert(e);
                f64::NAN
            }
        },
        &flat,
        &analytic,
        eps,
        0.0,
    );
    match failure {
        Some(e) => Err(e),
        None => Ok(report),
    }
}
