//! Training loop, evaluation and the on-disk run directory.

pub mod checkpoint;
pub mod config;
pub mod log;

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, read_manifest, save_checkpoint, Checkpoint, Manifest};
pub use config::{DataConfig, InitMode, RunConfig};
pub use log::{EvalRow, StepRow, TrainLog};

use crate::data::{disjoint_starts, synth, tokenize_bytes, Batcher, Corpus};
use crate::diagnostics::{LogHeader, RoutingLog};
use crate::model::{build_model, count_params, forward_lm, lm_loss, ForwardOptions, ModelConfig, ParamCount};
use crate::moe::{upcycle, RouteOptions, RoutingRecord, UpcycleMode};
use crate::numeric::{adamw_step, clip_grad_norm, cosine_lr, grad_norm, AdamW, OptimizerState, ParamStore, Rng, Tape};
use crate::{Error, Result};

/// Fixed layout of a run directory.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> RunDir {
        RunDir { root: root.into() }
    }
    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }
    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }
    pub fn checkpoint(&self, step: usize) -> PathBuf {
        self.checkpoints().join(format!("step_{step:06}"))
    }
    pub fn logs(&self) -> PathBuf {
        self.root.join("logs")
    }
    pub fn train_csv(&self) -> PathBuf {
        self.logs().join("train.csv")
    }
    pub fn eval_csv(&self) -> PathBuf {
        self.logs().join("eval.csv")
    }
    pub fn routing_dir(&self) -> PathBuf {
        self.logs().join("routing")
    }
    pub fn routing_log(&self, step: usize) -> PathBuf {
        self.routing_dir().join(format!("step_{step:06}.jsonl.gz"))
    }
    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }
    pub fn plots(&self) -> PathBuf {
        self.root.join("plots")
    }

    const ENTRIES: [&'static str; 5] = ["config.toml", "checkpoints", "logs", "reports", "plots"];

    /// Create the layout, refusing to reuse a populated directory unless `force`.
    pub fn prepare(&self, force: bool) -> Result<()> {
        let populated = Self::ENTRIES.iter().any(|e| self.root.join(e).exists());
        if populated {
            if !force {
                return Err(Error::Config(format!(
                    "{} already holds a run; pass --force to overwrite",
                    self.root.display()
                )));
            }
            for e in Self::ENTRIES {
                let p = self.root.join(e);
                let res = if p.is_dir() { std::fs::remove_dir_all(&p) } else { std::fs::remove_file(&p) };
                match res {
                    Err(err) if err.kind() != std::io::ErrorKind::NotFound => return Err(Error::io(&p, err)),
                    _ => {}
                }
            }
        }
        for d in [self.checkpoints(), self.routing_dir(), self.reports(), self.plots()] {
            std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        Ok(())
    }

    /// Checkpoint steps present on disk, ascending.
    pub fn checkpoint_steps(&self) -> Result<Vec<usize>> {
        step_entries(&self.checkpoints(), "")
    }

    /// Steps that have a routing log, ascending.
    pub fn routing_steps(&self) -> Result<Vec<usize>> {
        step_entries(&self.routing_dir(), ".jsonl.gz")
    }

    pub fn load_log(&self) -> Result<TrainLog> {
        TrainLog::read(&self.train_csv(), &self.eval_csv())
    }
}

fn step_entries(dir: &Path, suffix: &str) -> Result<Vec<usize>> {
    let mut steps = Vec::new();
    for e in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let e = e.map_err(|err| Error::io(dir, err))?;
        let name = e.file_name().to_string_lossy().into_owned();
        if let Some(n) = name.strip_prefix("step_").and_then(|s| s.strip_suffix(suffix)) {
            if let Ok(s) = n.parse() {
                steps.push(s);
            }
        }
    }
    steps.sort_unstable();
    Ok(steps)
}

/// The corpus described by `data`, with validation windows of `seq_len`.
pub fn load_corpus(data: &DataConfig, seq_len: usize) -> Result<Corpus> {
    if data.files.is_empty() {
        let bytes = synth::generate(data.synth_bytes, data.synth_seed);
        Corpus::split(tokenize_bytes(&bytes), data.val_ratio, seq_len + 1)
    } else {
        Corpus::from_files(&data.files, data.val_ratio, seq_len + 1)
    }
}

/// Evaluation-time settings.
#[derive(Clone, Copy, Debug)]
pub struct EvalOptions {
    pub route: RouteOptions,
    /// Cap on windows (0 = every window).
    pub max_windows: usize,
    pub batch_size: usize,
    pub capture: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { route: RouteOptions::default(), max_windows: 0, batch_size: 16, capture: false }
    }
}

#[derive(Clone, Debug)]
pub struct EvalResult {
    pub ppl: f64,
    pub mean_ce: f64,
    pub n_tokens: usize,
    /// Token positions index the concatenated evaluation windows.
    pub records: Vec<RoutingRecord>,
}

/// Perplexity over disjoint windows of `tokens`.
pub fn evaluate(params: &ParamStore, model: &ModelConfig, tokens: &[usize], opts: &EvalOptions) -> Result<EvalResult> {
    if let Some(p) = opts.route.perturbation {
        if model.moe.is_dense() {
            return Err(Error::Config("perturbation needs a sparse model".into()));
        }
        p.check(model.moe.top_k, model.moe.n_routable())?;
    }
    if let Some(t) = opts.route.temperature {
        if !(t > 0.0) {
            return Err(Error::Config(format!("temperature must be positive, got {t}")));
        }
    }
    let t = model.seq_len;
    let mut starts = disjoint_starts(tokens.len(), t)?;
    if opts.max_windows > 0 {
        starts.truncate(opts.max_windows);
    }
    let mut total = 0.0f64;
    let mut count = 0usize;
    let mut records = Vec::new();
    for (chunk_idx, chunk) in starts.chunks(opts.batch_size.max(1)).enumerate() {
        let inputs: Vec<usize> = chunk.iter().flat_map(|&s| tokens[s..s + t].iter().copied()).collect();
        let targets: Vec<usize> = chunk.iter().flat_map(|&s| tokens[s + 1..s + t + 1].iter().copied()).collect();
        let out = forward_lm(params, model, &inputs, chunk.len(), &opts.route)?;
        let ce = crate::numeric::cross_entropy(&out.logits, &targets)?;
        total += ce as f64 * targets.len() as f64;
        count += targets.len();
        if opts.capture {
            let offset = chunk_idx * opts.batch_size.max(1) * t;
            records.extend(out.records.into_iter().map(|mut r| {
                r.token_position += offset;
                r
            }));
        }
    }
    let mean_ce = total / count as f64;
    if !mean_ce.is_finite() {
        return Err(Error::NonFinite("validation loss is non-finite".into()));
    }
    records.sort_by_key(|r| (r.layer, r.token_position));
    Ok(EvalResult { ppl: mean_ce.exp(), mean_ce, n_tokens: count, records })
}

/// Which corpus split an evaluation runs on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

/// Evaluate a checkpoint directory on a split of its run's corpus.
pub fn evaluate_checkpoint(dir: &Path, split: Split, opts: &EvalOptions) -> Result<(Checkpoint, EvalResult)> {
    let ckpt = load_checkpoint(dir)?;
    let run = &ckpt.manifest.run_config;
    let corpus = load_corpus(&run.data, run.model.seq_len)?;
    let tokens = match split {
        Split::Train => &corpus.train_tokens,
        Split::Val => &corpus.val_tokens,
    };
    let res = evaluate(&ckpt.params, &run.model, tokens, opts)?;
    Ok((ckpt, res))
}

pub fn routing_log(run: &RunConfig, step: usize, records: Vec<RoutingRecord>) -> Result<RoutingLog> {
    let header = LogHeader {
        run_id: run.hash(),
        checkpoint_step: step,
        n_layers: run.model.moe_layers().len(),
        n_experts: run.model.moe.n_routable(),
        top_k: run.model.moe.top_k,
        variant: run.model.moe.variant,
    };
    RoutingLog::new(header, records)
}

#[derive(Clone, Copy, Debug, Default)]
pub struct TrainOptions {
    pub force: bool,
    pub quiet: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainSummary {
    pub config_hash: String,
    pub steps: usize,
    pub final_val_ppl: f64,
    pub checkpoints: Vec<usize>,
    pub params: ParamCount,
    pub elapsed_secs: f64,
}

/// Initial parameters per `run.init_mode`.
pub fn initial_params(run: &RunConfig) -> Result<ParamStore> {
    let mut rng = Rng::new(run.seed).fork(1);
    let mode = match run.init_mode {
        InitMode::Scratch => return build_model(&run.model, &mut rng),
        InitMode::UpcycleFull => UpcycleMode::Full,
        InitMode::UpcycleSharedOnly => UpcycleMode::SharedOnly,
    };
    let path = run.dense_checkpoint_path.as_ref().expect("validated");
    let dense = load_checkpoint(path)?;
    if !dense.manifest.run_config.model.moe.is_dense() {
        return Err(Error::Config(format!("{} is not a dense checkpoint", path.display())));
    }
    upcycle(&dense.params, &run.model, mode, &mut rng)
}

/// Train `run` into the run directory `out`.
pub fn train(run: &RunConfig, out: &Path, opts: &TrainOptions) -> Result<TrainSummary> {
    run.validate()?;
    let started = Instant::now();
    let dir = RunDir::new(out);
    dir.prepare(opts.force)?;
    std::fs::write(dir.config(), run.to_toml()).map_err(|e| Error::io(dir.config(), e))?;

    let corpus = load_corpus(&run.data, run.model.seq_len)?;
    let mut params = initial_params(run)?;
    let mut state = OptimizerState::new(&params);
    let adamw = AdamW { weight_decay: run.weight_decay, ..AdamW::default() };
    let mut batches = Batcher::new(
        &corpus.train_tokens,
        run.model.seq_len,
        run.batch_size,
        Rng::new(run.seed).fork(2).seed(),
        run.data.batch_mode,
    )?;
    let eval_opts = EvalOptions {
        max_windows: run.data.max_val_windows,
        batch_size: run.batch_size,
        capture: run.log_routing_on_eval && !run.model.moe.is_dense(),
        ..EvalOptions::default()
    };
    let mut log = TrainLog::default();
    let mut checkpoints = Vec::new();
    let say = |m: String| {
        if !opts.quiet {
            eprintln!("{m}");
        }
    };

    let mut checkpoint_and_eval = |step: usize, params: &ParamStore, log: &mut TrainLog| -> Result<()> {
        if step % run.checkpoint_every == 0 {
            save_checkpoint(params, step, run, &dir.checkpoint(step))?;
            checkpoints.push(step);
        }
        if step % run.eval_every == 0 || step == run.total_steps {
            let res = evaluate(params, &run.model, &corpus.val_tokens, &eval_opts)?;
            if eval_opts.capture {
                routing_log(run, step, res.records)?.write(&dir.routing_log(step))?;
            }
            log.evals.push(EvalRow { step, val_ppl: res.ppl });
            say(format!("step {step:>6}  val_ppl {:.4}", res.ppl));
        }
        Ok(())
    };
    checkpoint_and_eval(0, &params, &mut log)?;

    let fwd = ForwardOptions::default();
    for step in 1..=run.total_steps {
        let lr = cosine_lr(step - 1, run.total_steps, run.warmup_steps, run.lr, run.min_lr_mult);
        let batch = batches.next_batch();
        let outcome = (|| -> Result<StepRow> {
            let mut tape = Tape::new();
            let l = lm_loss(&mut tape, &params, &run.model, &batch.inputs, &batch.targets, batch.batch, &fwd)?;
            let total = tape.scalar_value(l.loss);
            if !total.is_finite() {
                return Err(Error::NonFinite(format!("loss is {total} at step {step}")));
            }
            tape.backward(l.loss)?;
            tape.write_grads(&mut params)?;
            let gn = if run.grad_clip > 0.0 { clip_grad_norm(&mut params, run.grad_clip) } else { grad_norm(&params) };
            adamw_step(&mut params, &mut state, lr, &adamw)?;
            Ok(StepRow { step, lr, ce_loss: l.ce, balance_loss: l.balance, z_loss: l.z, grad_norm: gn })
        })();
        match outcome {
            Ok(row) => log.steps.push(row),
            Err(e @ Error::NonFinite(_)) => {
                let diag = dir.checkpoints().join(format!("diagnostic_step_{step:06}"));
                save_checkpoint(&params, step, run, &diag)?;
                log.write(&dir.train_csv(), &dir.eval_csv())?;
                let report = serde_json::json!({
                    "kind": e.kind(),
                    "message": e.to_string(),
                    "step": step,
                    "diagnostic_checkpoint": diag,
                });
                let p = dir.reports().join("error.json");
                std::fs::write(&p, serde_json::to_string_pretty(&report)?).map_err(|err| Error::io(&p, err))?;
                return Err(e);
            }
            Err(e) => return Err(e),
        }
        checkpoint_and_eval(step, &params, &mut log)?;
    }
    log.write(&dir.train_csv(), &dir.eval_csv())?;
    let summary = TrainSummary {
        config_hash: run.hash(),
        steps: run.total_steps,
        final_val_ppl: log.evals.last().map_or(f64::NAN, |e| e.val_ppl),
        checkpoints,
        params: count_params(&params, &run.model),
        elapsed_secs: started.elapsed().as_secs_f64(),
    };
    let p = dir.reports().join("summary.json");
    std::fs::write(&p, serde_json::to_string_pretty(&summary)?).map_err(|e| Error::io(&p, e))?;
    Ok(summary)
}
