//! `moescope` command-line tool.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use moescope::budget::{dense_budget, moe_token_allocation};
use moescope::model::{build_model, check_model_gradients};
use moescope::routing::{route, RouterConfig};
use moescope::sharding::{compare_strategies, preset, sharding_report, validate_mesh, DeviceProfile, MeshSpec, Strategy, Workload};
use moescope::tensor::softmax;
use moescope::train::{tradeoff, train, write_tradeoff_csv, RunConfig};
use moescope::Tensor;
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(name = "moescope", version, about = "Mixture-of-Experts training, sharding and budget tools")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a run config and print its summary.
    Train { config: PathBuf },
    /// Dense compute budget and the MoE tokens it buys.
    PlanBudget {
        /// Dense parameter count (accepts 6.4e9).
        #[arg(long)]
        params: f64,
        /// Tokens per step.
        #[arg(long)]
        batch: f64,
        /// Dense seconds per step.
        #[arg(long)]
        step_time: f64,
        /// MoE seconds per step.
        #[arg(long)]
        moe_step_time: Option<f64>,
        #[arg(long)]
        json: bool,
    },
    /// Shard one workload on one mesh and write the report JSON.
    SimulateSharding {
        /// Run config, workload JSON or preset name.
        workload: String,
        /// Mesh as DATA,EXPERT,MODEL.
        #[arg(long)]
        mesh: MeshSpec,
        #[arg(long, default_value = "3d")]
        strategy: Strategy,
        /// Devices available; defaults to the mesh product.
        #[arg(long)]
        devices: Option<usize>,
        /// Device profile JSON.
        #[arg(long)]
        profile: Option<PathBuf>,
        /// Write the report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare naive-2d, padded-2d and 3d sharding on the same devices.
    CompareSharding {
        /// Run config, workload JSON or preset name.
        workload: String,
        #[arg(long)]
        devices: usize,
        #[arg(long)]
        profile: Option<PathBuf>,
    },
    /// Finite-difference check of the model gradients.
    GradCheck {
        /// Run config or workload JSON.
        config: PathBuf,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Multiplies the initial weights so small paths carry signal.
        #[arg(long, default_value_t = 5.0)]
        scale: f64,
    },
    /// Route random logits and report drops, load and timing.
    RouteBench {
        #[arg(long)]
        experts: usize,
        #[arg(long)]
        tokens: usize,
        #[arg(long, default_value_t = 2)]
        top_k: usize,
        #[arg(long, default_value_t = 2.0)]
        capacity_factor: f64,
        /// Tokens per group; defaults to all tokens in one group.
        #[arg(long)]
        group_size: Option<usize>,
        /// Standard deviation of the router logits.
        #[arg(long, default_value_t = 1.0)]
        logit_scale: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// CSV of step time and final eval loss for every run under a directory.
    Tradeoff { runs_dir: PathBuf },
}

type CliResult = Result<(), Box<dyn std::error::Error>>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn print_json(value: &impl serde::Serialize) -> CliResult {
    let mut out = io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

/// A preset name, or a JSON file holding at least `model` and `batch_tokens`.
fn load_workload(arg: &str) -> Result<Workload, Box<dyn std::error::Error>> {
    if !Path::new(arg).exists() {
        if let Ok(w) = preset(arg) {
            return Ok(w);
        }
    }
    let text = fs::read_to_string(arg).map_err(|e| format!("{arg}: {e}"))?;
    Ok(serde_json::from_str(&text).map_err(|e| format!("{arg}: {e}"))?)
}

fn load_profile(path: Option<&Path>) -> Result<DeviceProfile, Box<dyn std::error::Error>> {
    match path {
        Some(p) => Ok(serde_json::from_str(&fs::read_to_string(p)?)?),
        None => Ok(DeviceProfile::default()),
    }
}

fn whole(name: &str, v: f64) -> Result<u64, String> {
    if v >= 1.0 && v.fract() == 0.0 && v < u64::MAX as f64 {
        Ok(v as u64)
    } else {
        Err(format!("--{name} must be a positive whole number, got {v}"))
    }
}

fn run(command: Command) -> CliResult {
    match command {
        Command::Train { config } => {
            let text = fs::read_to_string(&config).map_err(|e| format!("{}: {e}", config.display()))?;
            let cfg: RunConfig = serde_json::from_str(&text)?;
            print_json(&train(&cfg)?)
        }
        Command::PlanBudget {
            params,
            batch,
            step_time,
            moe_step_time,
            json,
        } => {
            let budget = dense_budget(whole("params", params)?, whole("batch", batch)?, step_time)?;
            let plan = moe_step_time.map(|t| moe_token_allocation(&budget, t)).transpose()?;
            if json {
                return print_json(&serde_json::json!({ "dense": budget, "moe": plan }));
            }
            println!("dense tokens:   {} ({:.1}B)", budget.dense_tokens, budget.dense_tokens as f64 / 1e9);
            println!("dense steps:    {}", budget.dense_steps);
            println!("budget seconds: {:.1}", budget.budget_seconds);
            if let Some(p) = plan {
                println!("moe steps:      {}", p.moe_steps);
                println!("moe tokens:     {} ({:.1}B)", p.moe_tokens, p.moe_tokens as f64 / 1e9);
            }
            Ok(())
        }
        Command::SimulateSharding {
            workload,
            mesh,
            strategy,
            devices,
            profile,
            out,
        } => {
            let w = load_workload(&workload)?;
            validate_mesh(&w.model, &mesh, devices.unwrap_or(mesh.devices()))?;
            let report = sharding_report(&w, &mesh, strategy, &load_profile(profile.as_deref())?)?;
            match out {
                Some(path) => {
                    fs::write(&path, serde_json::to_string_pretty(&report)?)?;
                    println!(
                        "{strategy} on {mesh}: {:.4} s/step ({:.4} compute, {:.4} comm); report in {}",
                        report.estimate.total_seconds,
                        report.estimate.compute_seconds,
                        report.estimate.comm_seconds(),
                        path.display()
                    );
                    Ok(())
                }
                None => print_json(&report),
            }
        }
        Command::CompareSharding { workload, devices, profile } => {
            let w = load_workload(&workload)?;
            print_json(&compare_strategies(&w, devices, &load_profile(profile.as_deref())?)?)
        }
        Command::GradCheck { config, tol, seed, scale } => {
            let w = load_workload(&config.to_string_lossy())?;
            let cfg = w.model;
            let params = build_model(&cfg, seed)?.map(|_, t| t.map(|v| v * scale));
            let report = check_model_gradients(&cfg, &params, cfg.outer_batches * cfg.groups, seed + 1, 1e-5)?;
            print_json(&report)?;
            if report.passes(tol) {
                Ok(())
            } else {
                Err(format!("max relative error {:e} exceeds {tol:e}", report.max_rel_error).into())
            }
        }
        Command::RouteBench {
            experts,
            tokens,
            top_k,
            capacity_factor,
            group_size,
            logit_scale,
            seed,
        } => {
            let s = group_size.unwrap_or(tokens);
            if s == 0 || tokens % s != 0 {
                return Err(format!("--tokens {tokens} is not a multiple of --group-size {s}").into());
            }
            let cfg = RouterConfig::new(experts, top_k, capacity_factor);
            cfg.validate()?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let dims = [("o", 1), ("g", tokens / s), ("s", s), ("e", experts)];
            let logits = Tensor::from_fn(&dims, |_| logit_scale * rng.sample::<f64, _>(StandardNormal))?;
            let probs = softmax(&logits, "e")?;
            let started = Instant::now();
            let outcome = route(&probs, &cfg, &mut rng)?;
            let seconds = started.elapsed().as_secs_f64();
            print_json(&serde_json::json!({
                "dims": outcome.dims,
                "route_seconds": seconds,
                "stats": outcome.stats,
            }))
        }
        Command::Tradeoff { runs_dir } => {
            let rows = tradeoff(&runs_dir)?;
            write_tradeoff_csv(&rows, io::stdout().lock())?;
            Ok(())
        }
    }
}
