//! Metric curves over the checkpoints of a run directory.

use crate::diagnostics::{
    eae_log, eca, expert_change_rate, expert_similarity, ewa_log, router_margin, router_saturation, EcaMatrix,
    LayerValues, RoutingLog,
};
use crate::trainer::{load_checkpoint, RunDir};
use crate::{Error, Result};

/// One metric evaluated at a sequence of checkpoint steps.
#[derive(Clone, Debug, PartialEq)]
pub struct Curve {
    pub steps: Vec<usize>,
    pub values: Vec<LayerValues>,
}

impl Curve {
    pub fn aggregate(&self) -> Vec<(f64, f64)> {
        self.steps.iter().zip(&self.values).map(|(&s, v)| (s as f64, v.aggregate)).collect()
    }

    /// Points of one layer (by position in `LayerValues::layers`).
    pub fn layer(&self, idx: usize) -> Vec<(f64, f64)> {
        self.steps.iter().zip(&self.values).map(|(&s, v)| (s as f64, v.per_layer[idx])).collect()
    }

    pub fn layers(&self) -> Vec<usize> {
        self.values.first().map(|v| v.layers.clone()).unwrap_or_default()
    }

    /// CSV with columns `step,layer,value` (`layer` = `aggregate` for the pooled value).
    pub fn to_csv(&self, hash: &str) -> String {
        let mut s = String::from("step,layer,value,config_hash\n");
        for (step, v) in self.steps.iter().zip(&self.values) {
            for (l, x) in v.layers.iter().zip(&v.per_layer) {
                s.push_str(&format!("{step},{l},{x},{hash}\n"));
            }
            s.push_str(&format!("{step},aggregate,{},{hash}\n", v.aggregate));
        }
        s
    }
}

fn logs(run: &RunDir) -> Result<Vec<(usize, RoutingLog)>> {
    let steps = run.routing_steps()?;
    if steps.is_empty() {
        return Err(Error::Data(format!("{} has no routing logs", run.root.display())));
    }
    steps.into_iter().map(|s| Ok((s, RoutingLog::read(&run.routing_log(s))?))).collect()
}

/// ECR between consecutive logged checkpoints, keyed by the later step.
pub fn ecr_curve(run: &RunDir, fractional: bool) -> Result<Curve> {
    let logs = logs(run)?;
    if logs.len() < 2 {
        return Err(Error::Data("expert change rate needs at least two routing logs".into()));
    }
    let mut c = Curve { steps: Vec::new(), values: Vec::new() };
    for w in logs.windows(2) {
        c.steps.push(w[1].0);
        c.values.push(expert_change_rate(&w[0].1, &w[1].1, fractional)?);
    }
    Ok(c)
}

/// Top-`k` saturation of every logged checkpoint against the last one.
pub fn saturation_curve(run: &RunDir, k: usize) -> Result<Curve> {
    let logs = logs(run)?;
    let last = &logs.last().expect("non-empty").1;
    let mut c = Curve { steps: Vec::new(), values: Vec::new() };
    for (s, l) in &logs {
        c.steps.push(*s);
        c.values.push(router_saturation(l, last, k)?);
    }
    Ok(c)
}

/// A single-log metric at every logged checkpoint.
pub fn log_metric_curve(run: &RunDir, metric: &str) -> Result<Curve> {
    let f: fn(&RoutingLog) -> Result<LayerValues> = match metric {
        "eae" => eae_log,
        "ewa" => ewa_log,
        "margin" => router_margin,
        other => return Err(Error::Config(format!("`{other}` is not a per-log metric"))),
    };
    let mut c = Curve { steps: Vec::new(), values: Vec::new() };
    for (s, l) in logs(run)? {
        c.steps.push(s);
        c.values.push(f(&l)?);
    }
    Ok(c)
}

/// Mean pairwise expert similarity per sparse layer at every checkpoint.
pub fn similarity_curve(run: &RunDir) -> Result<Curve> {
    let mut c = Curve { steps: Vec::new(), values: Vec::new() };
    for s in run.checkpoint_steps()? {
        let ck = load_checkpoint(&run.checkpoint(s))?;
        let model = &ck.manifest.run_config.model;
        let layers = model.moe_layers();
        let per_layer = layers
            .iter()
            .map(|&l| expert_similarity(&ck.params, model, l).map(|x| x.mean))
            .collect::<Result<Vec<_>>>()?;
        if per_layer.is_empty() {
            return Err(Error::Config("run has no sparse layers".into()));
        }
        let aggregate = per_layer.iter().sum::<f64>() / per_layer.len() as f64;
        c.steps.push(s);
        c.values.push(LayerValues { layers, per_layer, aggregate });
    }
    Ok(c)
}

/// Co-activation matrix of `layer` in the last routing log.
pub fn final_eca(run: &RunDir, layer: Option<usize>) -> Result<(usize, EcaMatrix)> {
    let logs = logs(run)?;
    let (s, l) = logs.last().expect("non-empty");
    Ok((*s, eca(l, layer)))
}
