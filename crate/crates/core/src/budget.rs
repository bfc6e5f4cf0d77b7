//! Compute-budget arithmetic: a dense model trained at 20 tokens per
//! parameter fixes a wall-clock budget, which an MoE spends at its own step
//! time with the same batch size.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Training tokens per dense parameter.
pub const TOKENS_PER_PARAM: u64 = 20;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainBudget {
    pub dense_params: u64,
    pub dense_tokens: u64,
    pub batch_tokens: u64,
    /// `dense_tokens / batch_tokens`, rounded down.
    pub dense_steps: u64,
    /// Seconds.
    pub dense_step_time: f64,
    /// `dense_steps · dense_step_time`, seconds.
    pub budget_seconds: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MoEPlan {
    pub moe_step_time: f64,
    /// Whole steps that fit in the budget.
    pub moe_steps: u64,
    pub moe_tokens: u64,
}

pub fn chinchilla_tokens(params: u64) -> u64 {
    TOKENS_PER_PARAM * params
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("{name} must be positive, got {v}")))
    }
}

pub fn dense_budget(params: u64, batch_tokens: u64, step_time: f64) -> Result<TrainBudget> {
    if params == 0 || batch_tokens == 0 {
        return Err(Error::InvalidArgument(
            "params and batch_tokens must be positive".into(),
        ));
    }
    positive("step_time", step_time)?;
    let dense_tokens = chinchilla_tokens(params);
    let dense_steps = dense_tokens / batch_tokens;
    Ok(TrainBudget {
        dense_params: params,
        dense_tokens,
        batch_tokens,
        dense_steps,
        dense_step_time: step_time,
        budget_seconds: dense_steps as f64 * step_time,
    })
}

/// Steps and tokens an MoE with `moe_step_time` gets from `budget`.
pub fn moe_token_allocation(budget: &TrainBudget, moe_step_time: f64) -> Result<MoEPlan> {
    positive("moe_step_time", moe_step_time)?;
    let mut steps = (budget.budget_seconds / moe_step_time).floor() as u64;
    // The quotient can land one ulp either side of an integer; settle it
    // with the same products the conservation check uses.
    while steps > 0 && steps as f64 * moe_step_time > budget.budget_seconds {
        steps -= 1;
    }
    while (steps + 1) as f64 * moe_step_time <= budget.budget_seconds {
        steps += 1;
    }
    Ok(MoEPlan {
        moe_step_time,
        moe_steps: steps,
        moe_tokens: steps * budget.batch_tokens,
    })
}
