//! Router scoring: logits, `TopK_{-inf}` masking, then the scoring function.

use serde::{Deserialize, Serialize};

use super::config::{MoEConfig, Variant};
use crate::numeric::ops::rank_desc;
use crate::numeric::tape::{sigmoid_scalar, softmax_in_place};
use crate::numeric::{Float, ScoreKind, Tape, Var};
use crate::{Error, Result};

/// Evaluation-time replacement of the strongest selections.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Perturbation {
    /// Rank-1 expert replaced by rank K+1.
    DropTop1,
    /// Ranks 1 and 2 replaced by ranks K+1 and K+2.
    DropTop1And2,
}

impl Perturbation {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "drop_top1" | "drop-top1" => Ok(Perturbation::DropTop1),
            "drop_top1_2" | "drop-top1-2" | "drop_top12" => Ok(Perturbation::DropTop1And2),
            other => Err(Error::Config(format!("unknown perturbation `{other}`"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Perturbation::DropTop1 => "drop_top1",
            Perturbation::DropTop1And2 => "drop_top1_2",
        }
    }

    fn shift(self) -> usize {
        match self {
            Perturbation::DropTop1 => 1,
            Perturbation::DropTop1And2 => 2,
        }
    }

    /// Check the pool is large enough for this perturbation at `k`.
    pub fn check(self, k: usize, n_routable: usize) -> Result<()> {
        if self == Perturbation::DropTop1And2 && k < 2 {
            return Err(Error::Config("drop_top1_2 needs top_k >= 2".into()));
        }
        if n_routable < k + self.shift() {
            return Err(Error::Config(format!(
                "{} needs at least {} routable experts, have {n_routable}",
                self.name(),
                k + self.shift()
            )));
        }
        Ok(())
    }
}

/// Evaluation-time overrides applied at routing time only.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RouteOptions {
    pub temperature: Option<f32>,
    pub perturbation: Option<Perturbation>,
}

/// One token's routing decision at one layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingRecord {
    pub layer: usize,
    #[serde(rename = "token")]
    pub token_position: usize,
    #[serde(rename = "ids")]
    pub selected_ids: Vec<usize>,
    #[serde(rename = "gates")]
    pub gate_weights: Vec<f32>,
    #[serde(rename = "logits")]
    pub full_logits: Vec<f32>,
}

/// Selected experts for one row of logits, by descending logit.
pub fn select_experts<F: Float>(logits: &[F], k: usize, perturbation: Option<Perturbation>) -> Result<Vec<usize>> {
    if k == 0 || k > logits.len() {
        return Err(Error::Config(format!("top_k={k} over {} routable experts", logits.len())));
    }
    let ranked = rank_desc(logits);
    let shift = match perturbation {
        None => 0,
        Some(p) => {
            p.check(k, logits.len())?;
            p.shift()
        }
    };
    Ok(ranked[shift..shift + k].to_vec())
}

/// Gate weights of `ids` under `kind`: softmax over the kept logits, or raw
/// sigmoids renormalised to sum to one.
pub fn gates_for<F: Float>(logits: &[F], ids: &[usize], kind: ScoreKind) -> Vec<F> {
    let mut kept: Vec<F> = ids.iter().map(|&i| logits[i]).collect();
    match kind {
        ScoreKind::Softmax => softmax_in_place(&mut kept),
        ScoreKind::Sigmoid => {
            kept.iter_mut().for_each(|v| *v = sigmoid_scalar(*v));
            let s: F = kept.iter().copied().sum();
            kept.iter_mut().for_each(|v| *v /= s);
        }
    }
    kept
}

/// Re-select a logged decision under a perturbation and recompute its gates.
pub fn perturb_selection(
    record: &RoutingRecord,
    mode: Perturbation,
    kind: ScoreKind,
) -> Result<(Vec<usize>, Vec<f32>)> {
    let k = record.selected_ids.len();
    let ids = select_experts(&record.full_logits, k, Some(mode))?;
    let gates = gates_for(&record.full_logits, &ids, kind);
    Ok((ids, gates))
}

/// Router output for a block of tokens.
pub struct Routing<F: Float> {
    /// Pre-mask logits after temperature, `[T×N]`.
    pub logits: Var,
    /// Gate matrix, zero outside the selection, `[T×N]`.
    pub gates_full: Var,
    pub ids: Vec<Vec<usize>>,
    pub gates: Vec<Vec<F>>,
}

/// Linear router: `logits = x·W_r`.
pub fn route<F: Float>(
    tape: &mut Tape<F>,
    x: Var,
    router: Var,
    cfg: &MoEConfig,
    opts: &RouteOptions,
) -> Result<Routing<F>> {
    let n = cfg.n_routable();
    if tape.value(router).shape() != [tape.value(x).shape()[1], n] {
        return Err(Error::Dimension(format!(
            "router {:?} does not map width {} to {n} experts",
            tape.value(router).shape(),
            tape.value(x).shape()[1]
        )));
    }
    let logits = tape.matmul(x, router)?;
    finish(tape, logits, cfg, opts)
}

/// Cosine router: `logits_i = cos(x·W_down, e_i) · exp(t)`.
pub fn route_xmoe<F: Float>(
    tape: &mut Tape<F>,
    x: Var,
    down_proj: Var,
    expert_embeddings: Var,
    learned_temp: Var,
    cfg: &MoEConfig,
    opts: &RouteOptions,
) -> Result<Routing<F>> {
    let logits = xmoe_logits(tape, x, down_proj, expert_embeddings, learned_temp)?;
    finish(tape, logits, cfg, opts)
}

pub(crate) const COSINE_EPS: f64 = 1e-8;

pub(crate) fn xmoe_logits<F: Float>(
    tape: &mut Tape<F>,
    x: Var,
    down_proj: Var,
    expert_embeddings: Var,
    learned_temp: Var,
) -> Result<Var> {
    let eps = F::of(COSINE_EPS);
    let projected = tape.matmul(x, down_proj)?;
    let xn = tape.l2_normalize_rows(projected, eps)?;
    let emb_t = tape.transpose(expert_embeddings)?;
    let en = tape.l2_normalize_rows(emb_t, eps)?;
    let en_cols = tape.transpose(en)?;
    let cos = tape.matmul(xn, en_cols)?;
    tape.mul_exp(cos, learned_temp)
}

fn finish<F: Float>(tape: &mut Tape<F>, raw: Var, cfg: &MoEConfig, opts: &RouteOptions) -> Result<Routing<F>> {
    if cfg.variant == Variant::Dense {
        return Err(Error::Config("dense blocks have no router".into()));
    }
    let tau = opts.temperature.unwrap_or(cfg.temperature);
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    let logits = if tau == 1.0 { raw } else { tape.scale(raw, F::of(1.0 / tau as f64)) };
    let (t, n) = tape.value(logits).dims2()?;
    let vals = tape.value(logits).data();
    if let Some(pos) = vals.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("router logit at token {} is non-finite", pos / n)));
    }
    let mut ids = Vec::with_capacity(t);
    let mut keep = vec![false; t * n];
    for r in 0..t {
        let sel = select_experts(&vals[r * n..(r + 1) * n], cfg.top_k, opts.perturbation)?;
        for &e in &sel {
            keep[r * n + e] = true;
        }
        ids.push(sel);
    }
    let masked = tape.mask_keep(logits, keep)?;
    let gates_full = match cfg.score_kind() {
        ScoreKind::Softmax => tape.softmax_rows(masked)?,
        ScoreKind::Sigmoid => {
            let s = tape.sigmoid(masked);
            tape.row_normalize(s)?
        }
    };
    let g = tape.value(gates_full).data();
    let gates = ids.iter().enumerate().map(|(r, sel)| sel.iter().map(|&e| g[r * n + e]).collect()).collect();
    Ok(Routing { logits, gates_full, ids, gates })
}
