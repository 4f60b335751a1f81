//! `moelab` command-line interface.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use super::analysis::{ecr_curve, log_metric_curve, saturation_curve, Curve};
use super::plot::{emit_plot, Plot, Series};
use super::recipes::{run_recipe, RecipeContext};
use super::sweep::{run_sweep, Launcher, SweepSpec};
use crate::data::synth;
use crate::diagnostics::{
    eae_log, eca, expert_change_rate, expert_similarity, ewa_log, router_margin, router_saturation, MetricReport,
    RoutingLog,
};
use crate::moe::{Perturbation, RouteOptions, Variant};
use crate::trainer::{evaluate_checkpoint, load_checkpoint, routing_log, train, EvalOptions, RunConfig, RunDir, Split, TrainOptions};
use crate::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "moelab", version, about = "Train sparse mixture-of-experts models and analyse their routing")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Metric {
    Eae,
    Ewa,
    Ecr,
    Saturation,
    Margin,
    Eca,
    Similarity,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum PerturbArg {
    None,
    #[value(name = "drop_top1", alias = "drop-top1")]
    DropTop1,
    #[value(name = "drop_top1_2", alias = "drop-top1-2")]
    DropTop12,
}

impl PerturbArg {
    fn mode(self) -> Option<Perturbation> {
        match self {
            PerturbArg::None => None,
            PerturbArg::DropTop1 => Some(Perturbation::DropTop1),
            PerturbArg::DropTop12 => Some(Perturbation::DropTop1And2),
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SplitArg {
    Val,
    Train,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train one run into a fresh run directory.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// `dotted.key=value` override, repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long)]
        force: bool,
        #[arg(long)]
        quiet: bool,
    },
    /// Evaluate a checkpoint, optionally with routing overrides.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        temperature: Option<f32>,
        #[arg(long, value_enum, default_value = "none")]
        perturb: PerturbArg,
        #[arg(long, value_enum, default_value = "val")]
        split: SplitArg,
        #[arg(long, default_value_t = 0)]
        max_windows: usize,
        /// Write the evaluation's routing log here.
        #[arg(long)]
        log_routing: Option<PathBuf>,
    },
    /// Compute a routing metric from logs (or a checkpoint for `similarity`).
    Diagnose {
        #[arg(long, value_enum)]
        metric: Metric,
        #[arg(long, num_args = 1..)]
        logs: Vec<PathBuf>,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        layer: Option<usize>,
        /// Fractional instead of binary expert change rate.
        #[arg(long)]
        fractional: bool,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Run a sweep described by a TOML spec.
    Sweep {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long)]
        force: bool,
    },
    /// Compare a checkpoint under each drop-top perturbation.
    Perturb {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 0)]
        max_windows: usize,
    },
    /// Bundle a run's logs into CSV tables and SVG plots.
    Report {
        #[arg(long)]
        run: PathBuf,
    },
    /// Run a named experiment recipe.
    Recipe {
        name: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Comma-separated variants (default: every sparse variant).
        #[arg(long, value_delimiter = ',')]
        variants: Vec<String>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long)]
        force: bool,
        #[arg(long)]
        quiet: bool,
    },
    /// Write the generated multi-domain corpus to a file.
    Corpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2_000_000)]
        bytes: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

fn base_config(config: &Option<PathBuf>, set: &[String]) -> Result<RunConfig> {
    let base = match config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    base.with_overrides(set)
}

fn print_json(v: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("json value"));
}

fn read_logs(paths: &[PathBuf], need: usize, metric: &str) -> Result<Vec<RoutingLog>> {
    if paths.len() != need {
        return Err(Error::Config(format!("{metric} needs exactly {need} --logs path(s), got {}", paths.len())));
    }
    paths.iter().map(|p| RoutingLog::read(p)).collect()
}

fn diagnose(metric: Metric, logs: &[PathBuf], ckpt: &Option<PathBuf>, k: Option<usize>, layer: Option<usize>, fractional: bool) -> Result<MetricReport> {
    let steps = |ls: &[RoutingLog]| ls.iter().map(|l| l.header.checkpoint_step).collect::<Vec<_>>();
    Ok(match metric {
        Metric::Eae | Metric::Ewa | Metric::Margin => {
            let ls = read_logs(logs, 1, "this metric")?;
            let (name, v) = match metric {
                Metric::Eae => ("eae", eae_log(&ls[0])?),
                Metric::Ewa => ("ewa", ewa_log(&ls[0])?),
                _ => ("margin", router_margin(&ls[0])?),
            };
            let mut r = MetricReport::layered(name, &v, steps(&ls));
            if matches!(metric, Metric::Margin) {
                r = r.with_param("scores", ls[0].score_kind());
            }
            r
        }
        Metric::Ecr => {
            let ls = read_logs(logs, 2, "ecr")?;
            let v = expert_change_rate(&ls[0], &ls[1], fractional)?;
            MetricReport::layered("ecr", &v, steps(&ls)).with_param("fractional", fractional)
        }
        Metric::Saturation => {
            let ls = read_logs(logs, 2, "saturation")?;
            let k = k.unwrap_or(ls[0].header.top_k.min(ls[1].header.top_k));
            let v = router_saturation(&ls[0], &ls[1], k)?;
            MetricReport::layered("saturation", &v, steps(&ls)).with_param("k", k)
        }
        Metric::Eca => {
            let ls = read_logs(logs, 1, "eca")?;
            MetricReport::eca(&eca(&ls[0], layer), steps(&ls)).with_param("layer", layer)
        }
        Metric::Similarity => {
            let dir = ckpt.as_ref().ok_or_else(|| Error::Config("similarity needs --ckpt".into()))?;
            let ck = load_checkpoint(dir)?;
            let model = &ck.manifest.run_config.model;
            let layer = match layer {
                Some(l) => l,
                None => *model.moe_layers().first().ok_or_else(|| Error::Config("checkpoint has no sparse layers".into()))?,
            };
            MetricReport::similarity(&expert_similarity(&ck.params, model, layer)?, vec![ck.manifest.step])
        }
    })
}

fn report(run_path: &Path) -> Result<serde_json::Value> {
    let run = RunDir::new(run_path);
    let cfg = RunConfig::load(&run.config())?;
    let hash = cfg.hash();
    let log = run.load_log()?;
    std::fs::create_dir_all(run.reports()).map_err(|e| Error::io(run.reports(), e))?;
    std::fs::create_dir_all(run.plots()).map_err(|e| Error::io(run.plots(), e))?;
    let mut written = Vec::new();
    let write = |name: &str, text: String, written: &mut Vec<String>| -> Result<()> {
        let p = run.reports().join(name);
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        written.push(p.display().to_string());
        Ok(())
    };
    let mut train_csv = log.train_csv().replacen('\n', ",config_hash\n", 1);
    train_csv = train_csv
        .lines()
        .enumerate()
        .map(|(i, l)| if i == 0 { format!("{l}\n") } else { format!("{l},{hash}\n") })
        .collect();
    write("train.csv", train_csv, &mut written)?;
    let pts = |f: fn(&crate::trainer::StepRow) -> f64| log.steps.iter().map(|r| (r.step as f64, f(r))).collect::<Vec<_>>();
    let plots: [(&str, &str, Vec<Series>); 3] = [
        ("loss", "Training cross-entropy", vec![Series::new("ce_loss", pts(|r| r.ce_loss))]),
        ("balance", "Balance loss", vec![Series::new("balance_loss", pts(|r| r.balance_loss))]),
        (
            "val_ppl",
            "Validation perplexity",
            vec![Series::new("val_ppl", log.evals.iter().map(|e| (e.step as f64, e.val_ppl)).collect())],
        ),
    ];
    for (name, title, series) in &plots {
        let p = run.plots().join(format!("{name}.svg"));
        emit_plot(title, Plot::Line { series, x_label: "step", y_label: name }, &p)?;
        written.push(p.display().to_string());
    }
    if !cfg.model.moe.is_dense() && run.routing_steps()?.len() >= 2 {
        let k = cfg.model.moe.top_k;
        let curves: Vec<(&str, Curve)> = vec![
            ("ecr", ecr_curve(&run, false)?),
            ("saturation", saturation_curve(&run, k)?),
            ("eae", log_metric_curve(&run, "eae")?),
            ("margin", log_metric_curve(&run, "margin")?),
        ];
        for (name, c) in curves {
            write(&format!("{name}.csv"), c.to_csv(&hash), &mut written)?;
            let series: Vec<Series> = c
                .layers()
                .iter()
                .enumerate()
                .map(|(i, l)| Series::new(format!("layer {l}"), c.layer(i)))
                .chain([Series::new("aggregate", c.aggregate())])
                .collect();
            let p = run.plots().join(format!("{name}.svg"));
            emit_plot(name, Plot::Line { series: &series, x_label: "step", y_label: name }, &p)?;
            written.push(p.display().to_string());
        }
    }
    Ok(json!({ "run": run_path, "config_hash": hash, "written": written }))
}

/// Execute a parsed command line.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, out, set, force, quiet } => {
            let cfg = base_config(&config, &set)?;
            let s = train(&cfg, &out, &TrainOptions { force, quiet })?;
            print_json(&serde_json::to_value(s)?);
        }
        Command::Eval { ckpt, temperature, perturb, split, max_windows, log_routing } => {
            let route = RouteOptions { temperature, perturbation: perturb.mode() };
            let split = match split {
                SplitArg::Val => Split::Val,
                SplitArg::Train => Split::Train,
            };
            let opts = EvalOptions { route, max_windows, capture: log_routing.is_some(), ..EvalOptions::default() };
            let (ck, res) = evaluate_checkpoint(&ckpt, split, &opts)?;
            if let Some(p) = &log_routing {
                routing_log(&ck.manifest.run_config, ck.manifest.step, res.records.clone())?.write(p)?;
            }
            print_json(&json!({
                "step": ck.manifest.step,
                "ppl": res.ppl,
                "mean_ce": res.mean_ce,
                "n_tokens": res.n_tokens,
                "temperature": temperature,
                "perturbation": perturb.mode().map(|p| p.name()),
                "config_hash": ck.manifest.config_hash,
            }));
        }
        Command::Diagnose { metric, logs, ckpt, k, layer, fractional, out, csv } => {
            let r = diagnose(metric, &logs, &ckpt, k, layer, fractional)?;
            if let Some(p) = &out {
                r.write_json(p)?;
            }
            if let Some(p) = &csv {
                r.write_csv(p)?;
            }
            print_json(&serde_json::to_value(&r)?);
        }
        Command::Sweep { spec, jobs, force } => {
            let spec = SweepSpec::load(&spec)?;
            let exe = std::env::current_exe().map_err(|e| Error::io("current executable", e))?;
            let outcome = run_sweep(&spec, &Launcher::Processes { exe, jobs }, force)?;
            print_json(&json!({
                "out": spec.out,
                "runs": outcome.run_dirs,
                "rows": outcome.rows,
            }));
        }
        Command::Perturb { ckpt, max_windows } => {
            let mut rows = Vec::new();
            let mut base = f64::NAN;
            for mode in [None, Some(Perturbation::DropTop1), Some(Perturbation::DropTop1And2)] {
                let opts = EvalOptions {
                    route: RouteOptions { temperature: None, perturbation: mode },
                    max_windows,
                    ..EvalOptions::default()
                };
                let res = match evaluate_checkpoint(&ckpt, Split::Val, &opts) {
                    Ok((_, r)) => r,
                    Err(Error::Config(m)) if mode.is_some() => {
                        rows.push(json!({ "mode": mode.map(|p| p.name()), "skipped": m }));
                        continue;
                    }
                    Err(e) => return Err(e),
                };
                if mode.is_none() {
                    base = res.ppl;
                }
                rows.push(json!({
                    "mode": mode.map_or("none", |p| p.name()),
                    "ppl": res.ppl,
                    "delta_pct": 100.0 * (res.ppl - base) / base,
                }));
            }
            print_json(&json!({ "ckpt": ckpt, "rows": rows }));
        }
        Command::Report { run: path } => print_json(&report(&path)?),
        Command::Recipe { name, out, config, set, variants, jobs, force, quiet } => {
            let base = base_config(&config, &set)?;
            let variants = if variants.is_empty() {
                Variant::SPARSE.to_vec()
            } else {
                variants.iter().map(|v| Variant::parse(v)).collect::<Result<_>>()?
            };
            let exe = std::env::current_exe().map_err(|e| Error::io("current executable", e))?;
            let ctx = RecipeContext { base, out: out.clone(), variants, force, launcher: Launcher::Processes { exe, jobs }, quiet };
            run_recipe(&name, &ctx)?;
            print_json(&json!({ "recipe": name, "out": out }));
        }
        Command::Corpus { out, bytes, seed } => {
            if out.exists() {
                return Err(Error::Config(format!("{} exists", out.display())));
            }
            std::fs::write(&out, synth::generate(bytes, seed)).map_err(|e| Error::io(&out, e))?;
            print_json(&json!({ "out": out, "bytes": bytes, "seed": seed }));
        }
    }
    Ok(())
}

/// Render an error as the JSON record printed on stderr.
pub fn error_record(e: &Error) -> String {
    json!({ "error": e.kind(), "message": e.to_string() }).to_string()
}
