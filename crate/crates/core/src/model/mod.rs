//! Decoder-only transformer whose FFN sublayers are dense or sparse.

mod config;

pub use config::ModelConfig;

use serde::{Deserialize, Serialize};

use crate::moe::layer::{dense_layer, init_ffn, init_moe, moe_layer, normal_tensor, LayerCall};
use crate::moe::{AuxLossReport, RouteOptions, RoutingRecord};
use crate::numeric::{Float, ParamStore, Rng, Tape, Tensor, Var};
use crate::{Error, Result};

const NORM_EPS: f64 = 1e-6;

pub fn layer_prefix(l: usize) -> String {
    format!("layers.{l}")
}

pub fn moe_prefix(l: usize) -> String {
    format!("layers.{l}.moe")
}

pub fn dense_ffn_prefix(l: usize) -> String {
    format!("layers.{l}.ffn")
}

/// Fresh parameters for `cfg`.
pub fn build_model(cfg: &ModelConfig, rng: &mut Rng) -> Result<ParamStore> {
    cfg.validate()?;
    let d = cfg.d_model;
    let mut store = ParamStore::new();
    store.insert("tok_emb".into(), normal_tensor(rng, &[cfg.vocab_size, d], 0.02));
    store.insert("pos_emb".into(), normal_tensor(rng, &[cfg.seq_len, d], 0.02));
    for l in 0..cfg.n_layers {
        let p = layer_prefix(l);
        store.insert(format!("{p}.attn_norm"), ones(d));
        for w in ["wq", "wk", "wv", "wo"] {
            store.insert(format!("{p}.attn.{w}"), normal_tensor(rng, &[d, d], 0.02));
        }
        store.insert(format!("{p}.ffn_norm"), ones(d));
        if cfg.is_moe_layer(l) {
            init_moe(&mut store, &moe_prefix(l), d, &cfg.moe, rng);
        } else {
            init_ffn(&mut store, &dense_ffn_prefix(l), d, cfg.dense_hidden(), rng);
        }
    }
    store.insert("final_norm".into(), ones(d));
    store.insert("head".into(), normal_tensor(rng, &[d, cfg.vocab_size], 0.02));
    Ok(store)
}

fn ones(n: usize) -> Tensor {
    Tensor::new(vec![n], vec![1.0; n]).expect("positive width")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub total: usize,
    pub active: usize,
}

/// Total parameters and those touched by one token.
pub fn count_params<F: Float>(params: &ParamStore<F>, cfg: &ModelConfig) -> ParamCount {
    let total: usize = params.values().map(|t| t.numel()).sum();
    let mut inactive = 0;
    for l in cfg.moe_layers() {
        let prefix = moe_prefix(l);
        let per_expert: Vec<usize> = (0..cfg.moe.n_experts)
            .map(|i| {
                let (a, b) = crate::moe::layer::ffn_names(&crate::moe::layer::expert_prefix(&prefix, i));
                params.get(&a).map_or(0, |t| t.numel()) + params.get(&b).map_or(0, |t| t.numel())
            })
            .collect();
        let idle = cfg.moe.n_experts.saturating_sub(cfg.moe.top_k);
        inactive += per_expert.iter().take(idle).sum::<usize>();
    }
    ParamCount { total, active: total - inactive }
}

/// Per-call switches for [`forward`].
#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions {
    pub route: RouteOptions,
    pub capture: bool,
}

pub struct ForwardOutput {
    /// `[B·T × V]` next-token logits.
    pub logits: Var,
    pub records: Vec<RoutingRecord>,
    /// One report per sparse block, in block order.
    pub aux: Vec<AuxLossReport>,
    /// Σ balance + Σ z-loss nodes, if any coefficient is positive.
    pub aux_loss: Option<Var>,
    pub expert_evals: usize,
}

/// Record the forward pass of `tokens` (`batch` rows of equal length) on `tape`.
pub fn forward<F: Float>(
    tape: &mut Tape<F>,
    store: &ParamStore<F>,
    cfg: &ModelConfig,
    tokens: &[usize],
    batch: usize,
    opts: &ForwardOptions,
) -> Result<ForwardOutput> {
    if batch == 0 || tokens.is_empty() || tokens.len() % batch != 0 {
        return Err(Error::Dimension(format!("{} tokens do not split into {batch} rows", tokens.len())));
    }
    let t = tokens.len() / batch;
    if t > cfg.seq_len {
        return Err(Error::Dimension(format!("sequence length {t} exceeds seq_len {}", cfg.seq_len)));
    }
    if let Some((pos, &id)) = tokens.iter().enumerate().find(|(_, &id)| id >= cfg.vocab_size) {
        return Err(Error::Data(format!(
            "token id {id} at row {} position {} is outside vocabulary of {}",
            pos / t,
            pos % t,
            cfg.vocab_size
        )));
    }
    let eps = F::of(NORM_EPS);
    let tok_emb = tape.param(store, "tok_emb")?;
    let pos_emb = tape.param(store, "pos_emb")?;
    let positions: Vec<usize> = (0..tokens.len()).map(|i| i % t).collect();
    let te = tape.gather_rows(tok_emb, tokens)?;
    let pe = tape.gather_rows(pos_emb, &positions)?;
    let mut h = tape.add(te, pe)?;

    let mut records = Vec::new();
    let mut aux = Vec::new();
    let mut aux_loss: Option<Var> = None;
    let mut expert_evals = 0;
    for l in 0..cfg.n_layers {
        let p = layer_prefix(l);
        let g = tape.param(store, &format!("{p}.attn_norm"))?;
        let a = tape.rms_norm(h, g, eps)?;
        let wq = tape.param(store, &format!("{p}.attn.wq"))?;
        let wk = tape.param(store, &format!("{p}.attn.wk"))?;
        let wv = tape.param(store, &format!("{p}.attn.wv"))?;
        let wo = tape.param(store, &format!("{p}.attn.wo"))?;
        let q = tape.matmul(a, wq)?;
        let k = tape.matmul(a, wk)?;
        let v = tape.matmul(a, wv)?;
        let att = tape.causal_attention(q, k, v, batch, cfg.n_heads)?;
        let o = tape.matmul(att, wo)?;
        h = tape.add(h, o)?;

        let g = tape.param(store, &format!("{p}.ffn_norm"))?;
        let f_in = tape.rms_norm(h, g, eps)?;
        let f_out = if cfg.is_moe_layer(l) {
            let call = LayerCall { layer: l, route: opts.route, capture: opts.capture };
            let out = moe_layer(tape, f_in, store, &moe_prefix(l), &cfg.moe, &call)?;
            records.extend(out.records);
            aux.push(out.aux);
            expert_evals += out.expert_evals;
            for term in [out.balance, out.z].into_iter().flatten() {
                aux_loss = Some(match aux_loss {
                    None => term,
                    Some(acc) => tape.add(acc, term)?,
                });
            }
            out.y
        } else {
            dense_layer(tape, f_in, store, &dense_ffn_prefix(l))?
        };
        h = tape.add(h, f_out)?;
    }
    let g = tape.param(store, "final_norm")?;
    let hn = tape.rms_norm(h, g, eps)?;
    let head = tape.param(store, "head")?;
    let logits = tape.matmul(hn, head)?;
    Ok(ForwardOutput { logits, records, aux, aux_loss, expert_evals })
}

/// Result of [`forward_lm`].
pub struct LmOutput<F: Float> {
    /// `[B·T × V]`, row `b·T + t`.
    pub logits: Tensor<F>,
    pub records: Vec<RoutingRecord>,
    pub aux: Vec<AuxLossReport>,
    pub expert_evals: usize,
}

/// Gradient-free forward pass with routing capture.
pub fn forward_lm<F: Float>(
    params: &ParamStore<F>,
    cfg: &ModelConfig,
    tokens: &[usize],
    batch: usize,
    route: &RouteOptions,
) -> Result<LmOutput<F>> {
    let mut tape = Tape::inference();
    let opts = ForwardOptions { route: *route, capture: true };
    let out = forward(&mut tape, params, cfg, tokens, batch, &opts)?;
    Ok(LmOutput {
        logits: tape.value(out.logits).clone(),
        records: out.records,
        aux: out.aux,
        expert_evals: out.expert_evals,
    })
}

/// Losses of one training batch, with the total on the tape.
pub struct LmLoss {
    pub loss: Var,
    pub ce: f64,
    pub balance: f64,
    pub z: f64,
    pub expert_evals: usize,
}

/// `CE + Σ balance + Σ z` for `inputs → targets`.
pub fn lm_loss<F: Float>(
    tape: &mut Tape<F>,
    store: &ParamStore<F>,
    cfg: &ModelConfig,
    inputs: &[usize],
    targets: &[usize],
    batch: usize,
    opts: &ForwardOptions,
) -> Result<LmLoss> {
    let out = forward(tape, store, cfg, inputs, batch, opts)?;
    let ce = tape.cross_entropy(out.logits, targets)?;
    let ce_val = tape.scalar_value(ce).as_f64();
    let loss = match out.aux_loss {
        Some(a) => tape.add(ce, a)?,
        None => ce,
    };
    let balance: f64 = out.aux.iter().map(|a| a.balance_loss).sum();
    let z: f64 = out.aux.iter().map(|a| a.z_loss).sum();
    Ok(LmLoss { loss, ce: ce_val, balance, z, expert_evals: out.expert_evals })
}
