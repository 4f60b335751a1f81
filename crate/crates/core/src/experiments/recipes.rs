//! Named experiment recipes: train what is needed, compute the metric,
//! write CSV tables under `reports/` and SVG plots under `plots/`.

use std::path::{Path, PathBuf};

use super::analysis::{ecr_curve, final_eca, log_metric_curve, saturation_curve, similarity_curve, Curve};
use super::plot::{emit_plot, Heatmap, Plot, Series};
use super::sweep::{run_sweep, Axis, Launcher, SweepSpec, BALANCE_WINDOW};
use crate::moe::{Perturbation, RouteOptions, Variant};
use crate::trainer::{
    evaluate_checkpoint, train, EvalOptions, InitMode, RunConfig, RunDir, Split, TrainOptions, TrainSummary,
};
use crate::{Error, Result};

pub const RECIPES: [&str; 11] = [
    "ecr-curve",
    "drop-top",
    "eae",
    "ewa",
    "margin",
    "similarity",
    "init-std",
    "eca",
    "saturation",
    "temperature",
    "aux-loss",
];

pub const TEMPERATURES: [f32; 3] = [0.1, 1.0, 10.0];
pub const INIT_STDS: [f64; 3] = [0.02, 0.04, 0.06];

pub struct RecipeContext {
    pub base: RunConfig,
    pub out: PathBuf,
    pub variants: Vec<Variant>,
    pub force: bool,
    pub launcher: Launcher,
    pub quiet: bool,
}

impl RecipeContext {
    fn reports(&self) -> PathBuf {
        self.out.join("reports")
    }

    fn plots(&self) -> PathBuf {
        self.out.join("plots")
    }

    fn say(&self, m: &str) {
        if !self.quiet {
            eprintln!("{m}");
        }
    }

    fn write_report(&self, name: &str, text: &str) -> Result<PathBuf> {
        let dir = self.reports();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let p = dir.join(name);
        if p.exists() && !self.force {
            return Err(Error::Config(format!("{} exists; pass --force to overwrite", p.display())));
        }
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        Ok(p)
    }

    fn variant_config(&self, v: Variant) -> RunConfig {
        RunConfig { model: self.base.model.with_variant(v), ..self.base.clone() }
    }
}

/// Train `cfg` into `dir` unless a finished run with the same config is there.
pub fn ensure_run(cfg: &RunConfig, dir: &Path, force: bool, quiet: bool) -> Result<RunDir> {
    let run = RunDir::new(dir);
    let summary = run.reports().join("summary.json");
    if summary.exists() {
        let existing = RunConfig::load(&run.config())?;
        if existing.hash() == cfg.hash() {
            return Ok(run);
        }
        if !force {
            return Err(Error::Config(format!(
                "{} holds a run with a different config; pass --force to retrain",
                dir.display()
            )));
        }
    }
    let _: TrainSummary = train(cfg, dir, &TrainOptions { force: true, quiet })?;
    Ok(run)
}

fn variant_runs(ctx: &RecipeContext) -> Result<Vec<(Variant, RunConfig, RunDir)>> {
    ctx.variants
        .iter()
        .map(|&v| {
            let cfg = ctx.variant_config(v);
            ctx.say(&format!("run {v}"));
            let run = ensure_run(&cfg, &ctx.out.join("runs").join(v.name()), ctx.force, ctx.quiet)?;
            Ok((v, cfg, run))
        })
        .collect()
}

fn curve_report(ctx: &RecipeContext, metric: &str, title: &str, curves: &[(String, String, Curve)]) -> Result<()> {
    let mut csv = String::from("series,step,layer,value,config_hash\n");
    let mut series = Vec::new();
    for (name, hash, c) in curves {
        for line in c.to_csv(hash).lines().skip(1) {
            csv.push_str(&format!("{name},{line}\n"));
        }
        series.push(Series::new(name.clone(), c.aggregate()));
    }
    ctx.write_report(&format!("{metric}.csv"), &csv)?;
    emit_plot(title, Plot::Line { series: &series, x_label: "step", y_label: metric }, &ctx.plots().join(format!("{metric}.svg")))
}

/// Dense model whose FFN width equals the expert width, as upcycling requires.
pub fn upcycle_source(model: &crate::model::ModelConfig) -> crate::model::ModelConfig {
    let moe = crate::moe::MoEConfig { variant: Variant::Dense, n_shared: 0, ..model.moe.clone() };
    crate::model::ModelConfig { moe, moe_layer_indices: None, ..model.clone() }
}

/// Run one recipe by name.
pub fn run_recipe(name: &str, ctx: &RecipeContext) -> Result<()> {
    match name {
        "ecr-curve" => {
            let curves = variant_runs(ctx)?
                .into_iter()
                .map(|(v, cfg, run)| Ok((v.name().to_string(), cfg.hash(), ecr_curve(&run, false)?)))
                .collect::<Result<Vec<_>>>()?;
            curve_report(ctx, "ecr", "Expert change rate between consecutive checkpoints", &curves)
        }
        "saturation" => {
            let mut curves = Vec::new();
            for (v, cfg, run) in variant_runs(ctx)? {
                for k in [1, cfg.model.moe.top_k] {
                    curves.push((format!("{}_top{k}", v.name()), cfg.hash(), saturation_curve(&run, k)?));
                }
            }
            curve_report(ctx, "saturation", "Router saturation against the final checkpoint", &curves)
        }
        "eae" | "ewa" | "margin" => {
            let curves = variant_runs(ctx)?
                .into_iter()
                .map(|(v, cfg, run)| Ok((v.name().to_string(), cfg.hash(), log_metric_curve(&run, name)?)))
                .collect::<Result<Vec<_>>>()?;
            let title = match name {
                "eae" => "Expert allocation entropy",
                "ewa" => "Expert weight allocation entropy",
                _ => "Router margin (top-1 minus top-2 score)",
            };
            curve_report(ctx, name, title, &curves)
        }
        "eca" => {
            let mut csv = String::from("variant,layer,row,col,value,config_hash\n");
            for (v, cfg, run) in variant_runs(ctx)? {
                for l in cfg.model.moe_layers() {
                    let (step, m) = final_eca(&run, Some(l))?;
                    let labels: Vec<String> = (0..m.values.len()).map(|i| format!("e{i}")).collect();
                    for (i, row) in m.values.iter().enumerate() {
                        for (j, x) in row.iter().enumerate() {
                            csv.push_str(&format!("{},{l},{i},{j},{x},{}\n", v.name(), cfg.hash()));
                        }
                    }
                    let h = Heatmap { values: m.values.clone(), row_labels: labels.clone(), col_labels: labels };
                    let title = format!("Expert co-activation, {} layer {l}, step {step}", v.name());
                    emit_plot(&title, Plot::Heatmap(&h), &ctx.plots().join(format!("eca_{}_layer{l}.svg", v.name())))?;
                }
            }
            ctx.write_report("eca.csv", &csv).map(|_| ())
        }
        "drop-top" => {
            let mut csv = String::from("variant,mode,val_ppl,delta_pct,config_hash\n");
            for (v, cfg, run) in variant_runs(ctx)? {
                let ck = run.checkpoint(cfg.total_steps);
                let mut base = f64::NAN;
                for mode in [None, Some(Perturbation::DropTop1), Some(Perturbation::DropTop1And2)] {
                    if let Some(p) = mode {
                        if p.check(cfg.model.moe.top_k, cfg.model.moe.n_routable()).is_err() {
                            continue;
                        }
                    }
                    let route = RouteOptions { temperature: None, perturbation: mode };
                    let opts = EvalOptions { route, max_windows: cfg.data.max_val_windows, ..EvalOptions::default() };
                    let (_, res) = evaluate_checkpoint(&ck, Split::Val, &opts)?;
                    if mode.is_none() {
                        base = res.ppl;
                    }
                    let label = mode.map_or("none", |p| p.name());
                    let delta = 100.0 * (res.ppl - base) / base;
                    csv.push_str(&format!("{},{label},{},{delta},{}\n", v.name(), res.ppl, cfg.hash()));
                }
            }
            ctx.write_report("drop_top.csv", &csv).map(|_| ())
        }
        "temperature" => {
            let mut csv = String::from("variant,temperature,val_ppl,delta,config_hash\n");
            for (v, cfg, run) in variant_runs(ctx)? {
                let ck = run.checkpoint(cfg.total_steps);
                let mut ppl = Vec::new();
                for tau in TEMPERATURES {
                    let route = RouteOptions { temperature: Some(tau), perturbation: None };
                    let opts = EvalOptions { route, max_windows: cfg.data.max_val_windows, ..EvalOptions::default() };
                    ppl.push(evaluate_checkpoint(&ck, Split::Val, &opts)?.1.ppl);
                }
                for (tau, p) in TEMPERATURES.iter().zip(&ppl) {
                    csv.push_str(&format!("{},{tau},{p},{},{}\n", v.name(), p - ppl[1], cfg.hash()));
                }
            }
            ctx.write_report("temperature.csv", &csv).map(|_| ())
        }
        "similarity" => {
            let dense_cfg = RunConfig { model: upcycle_source(&ctx.base.model), ..ctx.base.clone() };
            ctx.say("run dense source");
            let dense = ensure_run(&dense_cfg, &ctx.out.join("runs").join("dense_source"), ctx.force, ctx.quiet)?;
            let mut curves = Vec::new();
            for &v in &ctx.variants {
                let mut cfg = ctx.variant_config(v);
                cfg.init_mode = InitMode::UpcycleFull;
                cfg.dense_checkpoint_path = Some(dense.checkpoint(dense_cfg.total_steps));
                ctx.say(&format!("run upcycled {v}"));
                let run = ensure_run(&cfg, &ctx.out.join("runs").join(format!("upcycled_{}", v.name())), ctx.force, ctx.quiet)?;
                curves.push((v.name().to_string(), cfg.hash(), similarity_curve(&run)?));
            }
            curve_report(ctx, "similarity", "Mean pairwise expert output-weight similarity", &curves)
        }
        "init-std" => {
            let spec = SweepSpec {
                axis: Axis::InitStd,
                values: INIT_STDS.iter().map(|&s| toml::Value::Float(s)).collect(),
                out: ctx.out.join("init_std"),
                seeds: Vec::new(),
                base: RunConfig {
                    total_steps: 1000,
                    checkpoint_every: 1000,
                    eval_every: 1000,
                    log_routing_on_eval: false,
                    model: ctx.base.model.with_variant(Variant::Smoe),
                    ..ctx.base.clone()
                },
            };
            let outcome = run_sweep(&spec, &ctx.launcher, ctx.force)?;
            let mut csv = String::from("init_std,seed,mean_balance_100_1000,config_hash\n");
            let mut series = Vec::new();
            for (row, dir) in outcome.rows.iter().zip(&outcome.run_dirs) {
                csv.push_str(&format!("{},{},{},{}\n", row.value, row.seed, row.mean_balance, row.config_hash));
                let log = RunDir::new(dir).load_log()?;
                let pts = log.steps.iter().map(|r| (r.step as f64, r.balance_loss)).collect();
                series.push(Series::new(format!("std {}", row.value), pts));
            }
            ctx.write_report("init_std.csv", &csv)?;
            let (lo, hi) = BALANCE_WINDOW;
            ctx.say(&format!("mean balance loss over steps {lo}-{hi} written to reports/init_std.csv"));
            emit_plot(
                "Balance loss by router init std",
                Plot::Line { series: &series, x_label: "step", y_label: "balance loss" },
                &ctx.plots().join("init_std.svg"),
            )
        }
        "aux-loss" => {
            let mut csv = String::from("balance_coef,z_coef,val_ppl,mean_balance_100_1000,config_hash\n");
            for (alpha, z) in [(0.0f32, 0.0f32), (0.01, 0.0), (0.01, 0.001)] {
                let mut cfg = ctx.variant_config(Variant::Smoe);
                cfg.model.moe.balance_coef = alpha;
                cfg.model.moe.z_coef = z;
                let dir = ctx.out.join("runs").join(format!("aux_a{alpha}_z{z}"));
                ctx.say(&format!("run balance {alpha} z {z}"));
                let run = ensure_run(&cfg, &dir, ctx.force, ctx.quiet)?;
                let log = run.load_log()?;
                let (lo, hi) = BALANCE_WINDOW;
                let mb = log.mean_over(lo, hi, |r| r.balance_loss).unwrap_or(f64::NAN);
                let ppl = log.evals.last().map_or(f64::NAN, |e| e.val_ppl);
                csv.push_str(&format!("{alpha},{z},{ppl},{mb},{}\n", cfg.hash()));
            }
            ctx.write_report("aux_loss.csv", &csv).map(|_| ())
        }
        other => Err(Error::Config(format!("unknown recipe `{other}`; expected one of {}", RECIPES.join(", ")))),
    }
}
