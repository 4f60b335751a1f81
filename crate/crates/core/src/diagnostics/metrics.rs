//! Routing metrics over logs and checkpoints.

use std::collections::{BTreeMap, BTreeSet};

use super::log::RoutingLog;
use crate::model::{moe_prefix, ModelConfig};
use crate::moe::layer::{expert_prefix, ffn_names};
use crate::moe::RoutingRecord;
use crate::numeric::tape::{sigmoid_scalar, softmax_in_place};
use crate::numeric::{ParamStore, ScoreKind};
use crate::{Error, Result};

/// Per-layer values with their token-weighted aggregate.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerValues {
    pub layers: Vec<usize>,
    pub per_layer: Vec<f64>,
    pub aggregate: f64,
}

fn plogp_sum(p: &[f64]) -> f64 {
    p.iter().filter(|&&v| v > 0.0).map(|&v| -v * v.log2()).sum()
}

/// Normalised base-2 entropy of selection counts.
pub fn eae(counts: &[f64]) -> Result<f64> {
    if counts.len() < 2 {
        return Err(Error::Config(format!("expert allocation entropy needs N >= 2, got {}", counts.len())));
    }
    let total: f64 = counts.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Data("selection counts are all zero".into()));
    }
    let p: Vec<f64> = counts.iter().map(|c| c / total).collect();
    Ok(plogp_sum(&p) / (counts.len() as f64).log2())
}

/// How often each routable expert is selected at `layer`.
pub fn selection_counts(log: &RoutingLog, layer: usize) -> Vec<f64> {
    let mut c = vec![0.0; log.header.n_experts];
    for r in log.layer_rows(layer) {
        for &e in &r.selected_ids {
            c[e] += 1.0;
        }
    }
    c
}

/// EAE per layer; the aggregate pools counts over all layers.
pub fn eae_log(log: &RoutingLog) -> Result<LayerValues> {
    let layers = log.layers();
    let mut pooled = vec![0.0; log.header.n_experts];
    let mut per_layer = Vec::with_capacity(layers.len());
    for &l in &layers {
        let c = selection_counts(log, l);
        pooled.iter_mut().zip(&c).for_each(|(a, b)| *a += b);
        per_layer.push(eae(&c)?);
    }
    let aggregate = eae(&pooled)?;
    Ok(LayerValues { layers, per_layer, aggregate })
}

/// Normalised entropy of one token's selected gate weights.
pub fn ewa(weights: &[f64]) -> Result<f64> {
    if weights.len() < 2 {
        return Err(Error::Config(format!("weight allocation entropy needs K >= 2, got {}", weights.len())));
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Data("gate weights sum to zero".into()));
    }
    let p: Vec<f64> = weights.iter().map(|w| w / total).collect();
    Ok(plogp_sum(&p) / (weights.len() as f64).log2())
}

fn gates64(r: &RoutingRecord) -> Vec<f64> {
    r.gate_weights.iter().map(|&g| g as f64).collect()
}

/// Mean EWA per layer and over all rows.
pub fn ewa_log(log: &RoutingLog) -> Result<LayerValues> {
    per_layer_mean(log, |r| ewa(&gates64(r)))
}

fn per_layer_mean(log: &RoutingLog, f: impl Fn(&RoutingRecord) -> Result<f64>) -> Result<LayerValues> {
    let mut sums: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for r in &log.rows {
        let e = sums.entry(r.layer).or_insert((0.0, 0));
        e.0 += f(r)?;
        e.1 += 1;
    }
    if sums.is_empty() {
        return Err(Error::Data("routing log has no rows".into()));
    }
    let total: f64 = sums.values().map(|v| v.0).sum();
    let n: usize = sums.values().map(|v| v.1).sum();
    Ok(LayerValues {
        layers: sums.keys().copied().collect(),
        per_layer: sums.values().map(|(s, c)| s / *c as f64).collect(),
        aggregate: total / n as f64,
    })
}

fn paired<'a>(a: &'a RoutingLog, b: &'a RoutingLog) -> Result<Vec<(&'a RoutingRecord, &'a RoutingRecord)>> {
    a.check_aligned(b)?;
    let index: BTreeMap<(usize, usize), &RoutingRecord> =
        b.rows.iter().map(|r| ((r.layer, r.token_position), r)).collect();
    Ok(a.rows.iter().map(|r| (r, index[&(r.layer, r.token_position)])).collect())
}

fn pairwise_mean(
    a: &RoutingLog,
    b: &RoutingLog,
    f: impl Fn(&RoutingRecord, &RoutingRecord) -> f64,
) -> Result<LayerValues> {
    let pairs = paired(a, b)?;
    let mut sums: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for (x, y) in pairs {
        let e = sums.entry(x.layer).or_insert((0.0, 0));
        e.0 += f(x, y);
        e.1 += 1;
    }
    if sums.is_empty() {
        return Err(Error::Data("routing logs have no rows".into()));
    }
    let total: f64 = sums.values().map(|v| v.0).sum();
    let n: usize = sums.values().map(|v| v.1).sum();
    Ok(LayerValues {
        layers: sums.keys().copied().collect(),
        per_layer: sums.values().map(|(s, c)| s / *c as f64).collect(),
        aggregate: total / n as f64,
    })
}

/// Mean top-`k` overlap of `log_t` with the final log `log_final`, divided by `k`.
pub fn router_saturation(log_t: &RoutingLog, log_final: &RoutingLog, k: usize) -> Result<LayerValues> {
    let kmax = log_t.header.top_k.min(log_final.header.top_k);
    if k == 0 || k > kmax {
        return Err(Error::Config(format!("saturation k={k} must lie in 1..={kmax}")));
    }
    pairwise_mean(log_t, log_final, |x, y| {
        let a: BTreeSet<_> = x.selected_ids[..k].iter().collect();
        let b: BTreeSet<_> = y.selected_ids[..k].iter().collect();
        a.intersection(&b).count() as f64 / k as f64
    })
}

/// Share of `(layer, token)` rows whose selected set differs. With
/// `fractional`, each row instead contributes `1 − overlap/K`.
pub fn expert_change_rate(a: &RoutingLog, b: &RoutingLog, fractional: bool) -> Result<LayerValues> {
    pairwise_mean(a, b, |x, y| {
        let sa: BTreeSet<_> = x.selected_ids.iter().collect();
        let sb: BTreeSet<_> = y.selected_ids.iter().collect();
        if fractional {
            1.0 - sa.intersection(&sb).count() as f64 / sa.len().max(sb.len()) as f64
        } else if sa == sb {
            0.0
        } else {
            1.0
        }
    })
}

/// Full-pool gating scores of one row: softmax over all logits, or raw sigmoids.
pub fn full_scores(logits: &[f32], kind: ScoreKind) -> Vec<f64> {
    let mut s: Vec<f64> = logits.iter().map(|&v| v as f64).collect();
    match kind {
        ScoreKind::Softmax => softmax_in_place(&mut s),
        ScoreKind::Sigmoid => s.iter_mut().for_each(|v| *v = sigmoid_scalar(*v)),
    }
    s
}

/// Top-1 minus top-2 of a score vector.
pub fn margin(scores: &[f64]) -> Result<f64> {
    if scores.len() < 2 {
        return Err(Error::Config("router margin needs at least two experts".into()));
    }
    let (mut a, mut b) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &s in scores {
        if s > a {
            b = a;
            a = s;
        } else if s > b {
            b = s;
        }
    }
    Ok(a - b)
}

pub fn router_margin(log: &RoutingLog) -> Result<LayerValues> {
    let kind = log.score_kind();
    per_layer_mean(log, |r| margin(&full_scores(&r.full_logits, kind)))
}

/// Conditional co-activation `N_ij / N_i`.
#[derive(Clone, Debug, PartialEq)]
pub struct EcaMatrix {
    pub values: Vec<Vec<f64>>,
    /// `N_i`, selections of each expert.
    pub activations: Vec<usize>,
    /// Experts never selected; their rows are all zero.
    pub empty_rows: Vec<usize>,
}

/// Co-activation over the rows of `layer`, or of every layer when `None`.
pub fn eca(log: &RoutingLog, layer: Option<usize>) -> EcaMatrix {
    let n = log.header.n_experts;
    let mut joint = vec![vec![0usize; n]; n];
    let mut act = vec![0usize; n];
    for r in log.rows.iter().filter(|r| layer.is_none_or(|l| r.layer == l)) {
        for &i in &r.selected_ids {
            act[i] += 1;
            for &j in &r.selected_ids {
                if i != j {
                    joint[i][j] += 1;
                }
            }
        }
    }
    let values = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| match (act[i], i == j) {
                    (0, _) => 0.0,
                    (_, true) => 1.0,
                    (ni, false) => joint[i][j] as f64 / ni as f64,
                })
                .collect()
        })
        .collect();
    let empty_rows = (0..n).filter(|&i| act[i] == 0).collect();
    EcaMatrix { values, activations: act, empty_rows }
}

pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    dot / (na.sqrt() * nb.sqrt()).max(1e-300)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Similarity {
    pub layer: usize,
    /// Mean over unordered pairs `i < j`.
    pub mean: f64,
    pub matrix: Vec<Vec<f64>>,
}

/// Cosine similarity between the flattened output projections of the
/// parameterised routed experts at `layer`.
pub fn expert_similarity(params: &ParamStore, cfg: &ModelConfig, layer: usize) -> Result<Similarity> {
    if !cfg.is_moe_layer(layer) {
        return Err(Error::Config(format!("layer {layer} is not a sparse layer")));
    }
    let n = cfg.moe.n_experts;
    if n < 2 {
        return Err(Error::Config(format!("similarity needs at least two parameterised experts, layer {layer} has {n}")));
    }
    let prefix = moe_prefix(layer);
    let weights: Vec<&[f32]> = (0..n)
        .map(|i| {
            let (_, w_out) = ffn_names(&expert_prefix(&prefix, i));
            params
                .get(&w_out)
                .map(|t| t.data())
                .ok_or_else(|| Error::Config(format!("missing parameter `{w_out}`")))
        })
        .collect::<Result<_>>()?;
    let matrix: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| cosine(weights[i], weights[j])).collect()).collect();
    let mut s = 0.0;
    let mut c = 0;
    for i in 0..n {
        for j in i + 1..n {
            s += matrix[i][j];
            c += 1;
        }
    }
    Ok(Similarity { layer, mean: s / c as f64, matrix })
}
