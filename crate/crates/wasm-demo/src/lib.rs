//! WebAssembly bindings for the static page in `www/`. Every export returns
//! a JSON string; errors surface as thrown strings.

use moescope::budget::{dense_budget, moe_token_allocation};
use moescope::routing::{route, RouterConfig};
use moescope::sharding::{compare_strategies, preset, preset_names, DeviceProfile};
use moescope::tensor::softmax;
use moescope::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde_json::json;
use wasm_bindgen::prelude::*;

type Json = Result<String, String>;

fn err(e: impl ToString) -> String {
    e.to_string()
}

/// Routes `tokens` random tokens in one group. A larger `logit_scale` makes
/// the router more confident and the load more uneven.
pub fn explore_routing(experts: usize, tokens: usize, top_k: usize, capacity_factor: f64, logit_scale: f64, seed: u64) -> Json {
    let cfg = RouterConfig::new(experts, top_k, capacity_factor);
    cfg.validate().map_err(err)?;
    if tokens == 0 {
        return Err("tokens must be >= 1".into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let logits = Tensor::from_fn(&[("o", 1), ("g", 1), ("s", tokens), ("e", experts)], |_| {
        logit_scale * rng.sample::<f64, _>(StandardNormal)
    })
    .map_err(err)?;
    let probs = softmax(&logits, "e").map_err(err)?;
    let outcome = route(&probs, &cfg, &mut rng).map_err(err)?;
    Ok(json!({ "capacity": outcome.dims.capacity, "stats": outcome.stats }).to_string())
}

pub fn plan(params: f64, batch_tokens: f64, step_time: f64, moe_step_time: f64) -> Json {
    if !(params >= 1.0 && batch_tokens >= 1.0) {
        return Err("params and batch must be >= 1".into());
    }
    let budget = dense_budget(params.round() as u64, batch_tokens.round() as u64, step_time).map_err(err)?;
    let moe = moe_token_allocation(&budget, moe_step_time).map_err(err)?;
    Ok(json!({ "dense": budget, "moe": moe }).to_string())
}

pub fn compare(preset_name: &str, devices: usize) -> Json {
    let w = preset(preset_name).map_err(err)?;
    let c = compare_strategies(&w, devices, &DeviceProfile::default()).map_err(err)?;
    serde_json::to_string(&c).map_err(err)
}

#[wasm_bindgen(js_name = exploreRouting)]
pub fn explore_routing_js(experts: usize, tokens: usize, top_k: usize, capacity_factor: f64, logit_scale: f64, seed: u32) -> Result<String, JsError> {
    explore_routing(experts, tokens, top_k, capacity_factor, logit_scale, seed.into()).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = planBudget)]
pub fn plan_js(params: f64, batch_tokens: f64, step_time: f64, moe_step_time: f64) -> Result<String, JsError> {
    plan(params, batch_tokens, step_time, moe_step_time).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = compareSharding)]
pub fn compare_js(preset_name: &str, devices: usize) -> Result<String, JsError> {
    compare(preset_name, devices).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = presetNames)]
pub fn preset_names_js() -> String {
    serde_json::to_string(&preset_names()).expect("strings serialize")
}
