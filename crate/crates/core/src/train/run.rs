use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::corpus::{MarkovChain, DEFAULT_CONCENTRATION};
use super::optim::{adamw_step, lr_at, AdamState, AdamWConfig, Schedule};
use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::model::{build_model, count_params, forward, lm_loss, register, save_checkpoint, ModelConfig, ModelParams, MoePlacement, ParamCount};
use crate::routing::RouterConfig;

pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CONFIG_FILE: &str = "config.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub seed: u64,
    pub vocab: usize,
    pub markov_order: usize,
    /// Total corpus length; the last tenth is held out for evaluation.
    pub corpus_tokens: usize,
    /// Dirichlet concentration of the transition rows; smaller is more
    /// predictable.
    #[serde(default = "default_concentration")]
    pub concentration: f64,
}

fn default_concentration() -> f64 {
    DEFAULT_CONCENTRATION
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub optimizer: AdamWConfig,
    pub schedule: Schedule,
    pub data: DataConfig,
    pub batch_tokens: usize,
    pub eval_every: usize,
    pub out_dir: PathBuf,
    /// Seeds initialization, batch sampling and routing noise.
    #[serde(default)]
    pub seed: u64,
    /// Held-out sequences per evaluation; defaults to one batch.
    #[serde(default)]
    pub eval_sequences: Option<usize>,
    /// Capacity factor used when evaluating; defaults to the training one.
    #[serde(default)]
    pub eval_capacity_factor: Option<f64>,
    /// When false the wall-clock column is written as 0 so that the CSV
    /// depends only on the config.
    #[serde(default = "default_true")]
    pub record_timing: bool,
}

fn default_true() -> bool {
    true
}

/// One line of `metrics.csv`. Losses and the dropped fraction are means
/// over the steps since the previous row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub train_loss: f64,
    pub eval_loss: f64,
    pub balance_loss: f64,
    pub z_loss: f64,
    pub dropped_fraction: f64,
    pub tokens_seen: usize,
    pub wall_seconds_per_step: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub steps: usize,
    pub final_train_loss: f64,
    pub final_eval_loss: f64,
    /// Mean dropped fraction over the last 10% of steps.
    pub tail_dropped_fraction: f64,
    /// Measured, whatever `record_timing` says.
    pub mean_step_seconds: f64,
    pub params_total: usize,
    pub params_activated: usize,
    /// Entropy rate of the generating chain: the best achievable loss.
    pub entropy_floor: f64,
}

impl RunConfig {
    pub fn sequences(&self) -> usize {
        self.batch_tokens / self.model.seq_len
    }

    pub fn eval_sequences(&self) -> usize {
        self.eval_sequences.unwrap_or_else(|| self.sequences())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.schedule.validate()?;
        let fail = |m: String| Err(Error::Config(m));
        if self.batch_tokens == 0 || self.batch_tokens % self.model.seq_len != 0 {
            return fail(format!(
                "batch_tokens {} is not a multiple of seq_len {}",
                self.batch_tokens, self.model.seq_len
            ));
        }
        self.model.validate_batch(self.sequences())?;
        self.model.validate_batch(self.eval_sequences())?;
        if self.data.vocab != self.model.vocab {
            return fail(format!(
                "data vocab {} differs from model vocab {}",
                self.data.vocab, self.model.vocab
            ));
        }
        if self.eval_every == 0 {
            return fail("eval_every must be >= 1".into());
        }
        let window = self.model.seq_len + 1;
        let (train, eval) = split(self.data.corpus_tokens);
        if train < window || eval < self.eval_sequences() * window {
            return fail(format!(
                "corpus of {} tokens is too short for {}-token windows and {} eval sequences",
                self.data.corpus_tokens,
                window,
                self.eval_sequences()
            ));
        }
        Ok(())
    }

    /// The reference dense toy run: 2 layers, V = 64, first-order data.
    pub fn toy_dense(out_dir: impl Into<PathBuf>) -> Self {
        let model = ModelConfig::dense(2, 32, 2, 64, 64, 16);
        Self {
            model,
            optimizer: AdamWConfig::default(),
            schedule: Schedule::new(3e-3, 2000),
            data: DataConfig {
                seed: 7,
                vocab: 64,
                markov_order: 1,
                corpus_tokens: 200_000,
                concentration: DEFAULT_CONCENTRATION,
            },
            batch_tokens: 256,
            eval_every: 200,
            out_dir: out_dir.into(),
            seed: 0,
            eval_sequences: Some(64),
            eval_capacity_factor: None,
            record_timing: true,
        }
    }

    /// The paired MoE run: the second FFN becomes 4 top-2 experts whose
    /// hidden width keeps activated FFN weights equal to the dense run's
    /// (2 experts × 2 matrices × 48 = 3 matrices × 64). Training capacity
    /// is tight enough that routing balance shows up as dropped tokens.
    pub fn toy_moe(out_dir: impl Into<PathBuf>) -> Self {
        let mut run = Self::toy_dense(out_dir);
        run.model.moe_placement = MoePlacement::EveryK { k: 2 };
        run.model.router = RouterConfig::new(4, 2, 1.0);
        run.model.ffn_hidden = 48;
        run.eval_capacity_factor = Some(2.0);
        run
    }
}

fn split(corpus: usize) -> (usize, usize) {
    let eval = corpus / 10;
    (corpus - eval, eval)
}

/// Inputs and next-token targets for windows starting at `starts`.
fn windows(corpus: &[usize], starts: &[usize], seq_len: usize) -> (Vec<usize>, Vec<usize>) {
    let mut tokens = Vec::with_capacity(starts.len() * seq_len);
    let mut targets = Vec::with_capacity(starts.len() * seq_len);
    for &s in starts {
        tokens.extend_from_slice(&corpus[s..s + seq_len]);
        targets.extend_from_slice(&corpus[s + 1..s + seq_len + 1]);
    }
    (tokens, targets)
}

/// Mean cross-entropy over the held-out windows, no aux terms.
fn evaluate(cfg: &ModelConfig, params: &ModelParams, corpus: &[usize], starts: &[usize], batch: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for chunk in starts.chunks(batch) {
        let (tokens, targets) = windows(corpus, chunk, cfg.seq_len);
        let mut g = Graph::new();
        let vars = register(&mut g, params, false);
        let out = forward(&mut g, &vars, cfg, &tokens, chunk.len(), &mut rng)?;
        let loss = lm_loss(&mut g, &out, &targets, &cfg.router)?;
        total += g.value(loss.cross_entropy).item()? * chunk.len() as f64;
    }
    Ok(total / starts.len() as f64)
}

#[derive(Default)]
struct Window {
    steps: usize,
    train: f64,
    balance: f64,
    z: f64,
    dropped: f64,
    seconds: f64,
}

/// Trains `run`, writing `metrics.csv`, a checkpoint, `config.json` and
/// `summary.json` into `run.out_dir`. A non-finite loss aborts the run
/// after flushing the rows written so far.
pub fn train(run: &RunConfig) -> Result<RunSummary> {
    run.validate()?;
    let out = &run.out_dir;
    fs::create_dir_all(out)?;
    fs::write(out.join(CONFIG_FILE), serde_json::to_string_pretty(run)?)?;

    let d = &run.data;
    let chain = MarkovChain::new(d.seed, d.vocab, d.markov_order, d.concentration)?;
    let corpus = chain.sample(d.corpus_tokens, &mut ChaCha8Rng::seed_from_u64(d.seed.wrapping_add(1)));
    let (train_len, _) = split(corpus.len());
    let cfg = &run.model;
    let window = cfg.seq_len + 1;
    let eval_starts: Vec<usize> = (0..run.eval_sequences()).map(|i| train_len + i * window).collect();
    let mut eval_cfg = cfg.clone();
    if let Some(cf) = run.eval_capacity_factor {
        eval_cfg.router.capacity_factor = cf;
    }

    let mut params = build_model(cfg, run.seed)?;
    let mut state = AdamState::default();
    let mut batch_rng = ChaCha8Rng::seed_from_u64(run.seed.wrapping_add(0x5eed));
    let mut route_rng = ChaCha8Rng::seed_from_u64(run.seed.wrapping_add(0x0a7e));
    let sequences = run.sequences();
    let total = run.schedule.total_steps;
    let tail_from = total - (total / 10).max(1);

    let mut writer = csv::Writer::from_path(out.join(METRICS_FILE)).map_err(csv_err)?;
    let mut win = Window::default();
    let mut tail_dropped = Vec::new();
    let mut all_seconds = 0.0;
    let mut last = None;
    for step in 1..=total {
        let started = Instant::now();
        let starts: Vec<usize> = (0..sequences).map(|_| batch_rng.random_range(0..=train_len - window)).collect();
        let (tokens, targets) = windows(&corpus, &starts, cfg.seq_len);
        let mut g = Graph::new();
        let vars = register(&mut g, &params, true);
        let fwd = forward(&mut g, &vars, cfg, &tokens, sequences, &mut route_rng)?;
        let parts = lm_loss(&mut g, &fwd, &targets, &cfg.router)?;
        let loss = g.value(parts.total).item()?;
        if !loss.is_finite() {
            writer.flush()?;
            return Err(Error::Numerical(format!("loss diverged to {loss} at step {step}")));
        }
        let grads = g.backward(parts.total)?;
        let grads: Vec<_> = vars.entries().iter().map(|(_, v)| grads.get(**v)).collect();
        let mut entries = params.entries_mut();
        adamw_step(&mut entries, &grads, &mut state, lr_at(step, &run.schedule), &run.optimizer)?;
        drop(entries);

        let dropped = if fwd.aux.is_empty() {
            0.0
        } else {
            fwd.aux.iter().map(|a| a.outcome.stats.dropped_fraction).sum::<f64>() / fwd.aux.len() as f64
        };
        let scalar = |v: Option<crate::autograd::Var>| v.map_or(Ok(0.0), |v| g.value(v).item());
        win.steps += 1;
        win.train += g.value(parts.cross_entropy).item()?;
        win.balance += scalar(parts.balance)?;
        win.z += scalar(parts.z)?;
        win.dropped += dropped;
        if step > tail_from {
            tail_dropped.push(dropped);
        }
        let seconds = started.elapsed().as_secs_f64();
        win.seconds += seconds;
        all_seconds += seconds;

        if step % run.eval_every == 0 || step == total {
            let eval_loss = evaluate(&eval_cfg, &params, &corpus, &eval_starts, sequences, run.seed)?;
            let n = win.steps as f64;
            let row = MetricsRow {
                step,
                train_loss: win.train / n,
                eval_loss,
                balance_loss: win.balance / n,
                z_loss: win.z / n,
                dropped_fraction: win.dropped / n,
                tokens_seen: step * run.batch_tokens,
                wall_seconds_per_step: if run.record_timing { win.seconds / n } else { 0.0 },
            };
            writer.serialize(&row).map_err(csv_err)?;
            writer.flush()?;
            last = Some(row);
            win = Window::default();
        }
    }
    save_checkpoint(out, cfg, &params)?;
    let last = last.expect("total_steps >= 1 writes a row");
    let count: ParamCount = count_params(cfg);
    let summary = RunSummary {
        steps: total,
        final_train_loss: last.train_loss,
        final_eval_loss: last.eval_loss,
        tail_dropped_fraction: tail_dropped.iter().sum::<f64>() / tail_dropped.len() as f64,
        mean_step_seconds: all_seconds / total as f64,
        params_total: count.total,
        params_activated: count.activated,
        entropy_floor: chain.entropy_rate(),
    };
    fs::write(out.join(SUMMARY_FILE), serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(e.to_string())
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut reader = csv::Reader::from_path(path).map_err(csv_err)?;
    reader.deserialize().map(|r| r.map_err(csv_err)).collect()
}
