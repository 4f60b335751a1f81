//! Parameter sweeps: one training run per axis value (and seed), executed
//! as child processes or in-process, then merged.

use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};

use serde::{Deserialize, Serialize};

use crate::moe::{Perturbation, RouteOptions, Variant};
use crate::trainer::{evaluate_checkpoint, train, EvalOptions, RunConfig, RunDir, Split, TrainOptions};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    InitStd,
    Temperature,
    Variant,
    Perturbation,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::InitStd => "init_std",
            Axis::Temperature => "temperature",
            Axis::Variant => "variant",
            Axis::Perturbation => "perturbation",
        }
    }

    /// Axes that change training rather than evaluation.
    pub fn trains(self) -> bool {
        matches!(self, Axis::InitStd | Axis::Variant)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub axis: Axis,
    pub values: Vec<toml::Value>,
    pub out: PathBuf,
    /// Seeds per value; empty uses the base seed.
    #[serde(default)]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub base: RunConfig,
}

/// How training runs are executed.
#[derive(Clone, Debug)]
pub enum Launcher {
    InProcess,
    /// Spawn `exe train --config … --out …`, at most `jobs` at a time.
    Processes { exe: PathBuf, jobs: usize },
}

pub fn value_label(v: &toml::Value) -> String {
    match v {
        toml::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

impl SweepSpec {
    pub fn load(path: &Path) -> Result<SweepSpec> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("invalid sweep spec: {e}")))
    }

    pub fn seeds(&self) -> Vec<u64> {
        if self.seeds.is_empty() {
            vec![self.base.seed]
        } else {
            self.seeds.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() {
            return Err(Error::Config("sweep needs at least one value".into()));
        }
        for v in &self.values {
            self.check_value(v)?;
        }
        self.base.validate()
    }

    fn check_value(&self, v: &toml::Value) -> Result<()> {
        let moe = &self.base.model.moe;
        let num = || {
            v.as_float()
                .or_else(|| v.as_integer().map(|i| i as f64))
                .filter(|x| *x > 0.0)
                .ok_or_else(|| Error::Config(format!("{} values must be positive numbers, got {v}", self.axis.name())))
        };
        match self.axis {
            Axis::InitStd | Axis::Temperature => {
                num()?;
                if self.axis == Axis::Temperature && moe.is_dense() {
                    return Err(Error::Config("temperature sweep needs a sparse base model".into()));
                }
            }
            Axis::Variant => {
                Variant::parse(v.as_str().unwrap_or_default())?;
            }
            Axis::Perturbation => {
                let s = v.as_str().unwrap_or_default();
                if s != "none" {
                    Perturbation::parse(s)?.check(moe.top_k, moe.n_routable())?;
                }
            }
        }
        Ok(())
    }

    /// `(series name, seed, config)` of every training run.
    pub fn runs(&self) -> Result<Vec<(String, u64, RunConfig)>> {
        let mut out = Vec::new();
        let values: Vec<Option<&toml::Value>> =
            if self.axis.trains() { self.values.iter().map(Some).collect() } else { vec![None] };
        for v in values {
            for seed in self.seeds() {
                let mut cfg = RunConfig { seed, ..self.base.clone() };
                let series = match v {
                    Some(v) => {
                        match self.axis {
                            Axis::InitStd => {
                                cfg.model.moe.router_init_std =
                                    v.as_float().unwrap_or_else(|| v.as_integer().unwrap_or(0) as f64) as f32
                            }
                            Axis::Variant => {
                                cfg.model = cfg.model.with_variant(Variant::parse(v.as_str().unwrap_or_default())?)
                            }
                            _ => unreachable!("evaluation axis"),
                        }
                        format!("{}_{}", self.axis.name(), value_label(v))
                    }
                    None => "base".to_string(),
                };
                cfg.validate()?;
                out.push((series, seed, cfg));
            }
        }
        Ok(out)
    }
}

pub fn run_dir_name(series: &str, seed: u64) -> String {
    format!("{series}_seed{seed}")
}

fn wait(mut child: Child, name: &str) -> Result<()> {
    let status = child.wait().map_err(|e| Error::io(name, e))?;
    if status.success() {
        Ok(())
    } else {
        Err(Error::Config(format!("sweep run `{name}` failed with {status}")))
    }
}

/// Run every configuration; returns the run directories in spec order.
pub fn execute_runs(runs: &[(String, u64, RunConfig)], out: &Path, launcher: &Launcher, force: bool) -> Result<Vec<PathBuf>> {
    let conf_dir = out.join("configs");
    std::fs::create_dir_all(&conf_dir).map_err(|e| Error::io(&conf_dir, e))?;
    let mut dirs = Vec::new();
    let mut pending: Vec<(String, Child)> = Vec::new();
    for (series, seed, cfg) in runs {
        let name = run_dir_name(series, *seed);
        let dir = out.join("runs").join(&name);
        dirs.push(dir.clone());
        match launcher {
            Launcher::InProcess => {
                train(cfg, &dir, &TrainOptions { force, quiet: true })?;
            }
            Launcher::Processes { exe, jobs } => {
                let cpath = conf_dir.join(format!("{name}.toml"));
                std::fs::write(&cpath, cfg.to_toml()).map_err(|e| Error::io(&cpath, e))?;
                let mut cmd = Command::new(exe);
                cmd.arg("train").arg("--config").arg(&cpath).arg("--out").arg(&dir).arg("--quiet");
                // the driver prints its own summary; child errors still reach stderr
                cmd.stdout(Stdio::null());
                if force {
                    cmd.arg("--force");
                }
                let child = cmd.spawn().map_err(|e| Error::io(exe, e))?;
                pending.push((name, child));
                if pending.len() >= (*jobs).max(1) {
                    let (n, c) = pending.remove(0);
                    wait(c, &n)?;
                }
            }
        }
    }
    for (n, c) in pending {
        wait(c, &n)?;
    }
    Ok(dirs)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub series: String,
    pub value: String,
    pub seed: u64,
    pub val_ppl: f64,
    pub mean_balance: f64,
    pub config_hash: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepOutcome {
    pub rows: Vec<SweepRow>,
    pub run_dirs: Vec<PathBuf>,
}

/// Window of steps whose balance loss is averaged in sweep summaries.
pub const BALANCE_WINDOW: (usize, usize) = (100, 1000);

/// Execute the sweep and write `summary.csv` plus, for training axes,
/// `merged_balance_loss.csv`.
pub fn run_sweep(spec: &SweepSpec, launcher: &Launcher, force: bool) -> Result<SweepOutcome> {
    spec.validate()?;
    let summary = spec.out.join("summary.csv");
    if summary.exists() && !force {
        return Err(Error::Config(format!("{} already holds a sweep; pass --force to overwrite", spec.out.display())));
    }
    std::fs::create_dir_all(&spec.out).map_err(|e| Error::io(&spec.out, e))?;
    let runs = spec.runs()?;
    let dirs = execute_runs(&runs, &spec.out, launcher, force)?;
    let mut rows = Vec::new();
    let mut merged = String::from("series,seed,step,balance_loss,config_hash\n");
    for ((series, seed, cfg), dir) in runs.iter().zip(&dirs) {
        let run = RunDir::new(dir);
        let log = run.load_log()?;
        let hash = cfg.hash();
        for r in &log.steps {
            merged.push_str(&format!("{series},{seed},{},{},{hash}\n", r.step, r.balance_loss));
        }
        let final_ckpt = run.checkpoint(cfg.total_steps);
        if spec.axis.trains() {
            let (lo, hi) = BALANCE_WINDOW;
            rows.push(SweepRow {
                series: series.clone(),
                value: series.trim_start_matches(&format!("{}_", spec.axis.name())).to_string(),
                seed: *seed,
                val_ppl: log.evals.last().map_or(f64::NAN, |e| e.val_ppl),
                mean_balance: log.mean_over(lo, hi, |r| r.balance_loss).unwrap_or(f64::NAN),
                config_hash: hash,
            });
        } else {
            for v in &spec.values {
                let route = eval_route(spec.axis, v)?;
                let opts = EvalOptions { route, max_windows: cfg.data.max_val_windows, ..EvalOptions::default() };
                let (_, res) = evaluate_checkpoint(&final_ckpt, Split::Val, &opts)?;
                rows.push(SweepRow {
                    series: format!("{}_{}", spec.axis.name(), value_label(v)),
                    value: value_label(v),
                    seed: *seed,
                    val_ppl: res.ppl,
                    mean_balance: f64::NAN,
                    config_hash: hash.clone(),
                });
            }
        }
    }
    let mut csv = String::from("series,value,seed,val_ppl,mean_balance_100_1000,config_hash\n");
    for r in &rows {
        csv.push_str(&format!("{},{},{},{},{},{}\n", r.series, r.value, r.seed, r.val_ppl, r.mean_balance, r.config_hash));
    }
    std::fs::write(&summary, csv).map_err(|e| Error::io(&summary, e))?;
    if spec.axis.trains() {
        let p = spec.out.join("merged_balance_loss.csv");
        std::fs::write(&p, merged).map_err(|e| Error::io(&p, e))?;
    }
    Ok(SweepOutcome { rows, run_dirs: dirs })
}

fn eval_route(axis: Axis, v: &toml::Value) -> Result<RouteOptions> {
    Ok(match axis {
        Axis::Temperature => RouteOptions {
            temperature: Some(v.as_float().unwrap_or_else(|| v.as_integer().unwrap_or(1) as f64) as f32),
            perturbation: None,
        },
        Axis::Perturbation => match v.as_str().unwrap_or_default() {
            "none" => RouteOptions::default(),
            s => RouteOptions { temperature: None, perturbation: Some(Perturbation::parse(s)?) },
        },
        _ => RouteOptions::default(),
    })
}
