//! The mixture-of-experts feed-forward sublayer.

use super::aux::{expert_load, mean_probs, AuxLossReport};
use super::config::{ExpertKind, MoEConfig, Variant};
use super::route::{route, route_xmoe, RouteOptions, Routing, RoutingRecord};
use crate::numeric::{Float, ParamStore, Rng, Tape, Tensor, Var};
use crate::{Error, Result};

/// Tensor names of one FFN (`d → hidden → d`).
pub fn ffn_names(prefix: &str) -> (String, String) {
    (format!("{prefix}.w_in"), format!("{prefix}.w_out"))
}

pub fn expert_prefix(layer_prefix: &str, i: usize) -> String {
    format!("{layer_prefix}.experts.{i}")
}

pub fn shared_prefix(layer_prefix: &str, s: usize) -> String {
    format!("{layer_prefix}.shared.{s}")
}

pub(crate) fn normal_tensor(rng: &mut Rng, shape: &[usize], std: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), rng.normal_vec(n, std)).expect("non-empty shape")
}

/// Add a freshly initialised FFN under `prefix`.
pub fn init_ffn(store: &mut ParamStore, prefix: &str, d_model: usize, hidden: usize, rng: &mut Rng) {
    let (a, b) = ffn_names(prefix);
    store.insert(a, normal_tensor(rng, &[d_model, hidden], 0.02));
    store.insert(b, normal_tensor(rng, &[hidden, d_model], 0.02));
}

/// Add the router parameters of a sparse layer.
pub fn init_router(store: &mut ParamStore, layer_prefix: &str, d_model: usize, cfg: &MoEConfig, rng: &mut Rng) {
    let n = cfg.n_routable();
    let std = cfg.router_init_std;
    if cfg.variant == Variant::Xmoe {
        let r = cfg.xmoe_routing_dim;
        store.insert(format!("{layer_prefix}.router.down"), normal_tensor(rng, &[d_model, r], std));
        store.insert(format!("{layer_prefix}.router.emb"), normal_tensor(rng, &[r, n], std));
        store.insert(format!("{layer_prefix}.router.temp"), Tensor::scalar(cfg.xmoe_init_scale.ln()));
    } else {
        store.insert(format!("{layer_prefix}.router"), normal_tensor(rng, &[d_model, n], std));
    }
}

/// Router, routed experts and shared experts of one sparse layer.
pub fn init_moe(store: &mut ParamStore, layer_prefix: &str, d_model: usize, cfg: &MoEConfig, rng: &mut Rng) {
    init_router(store, layer_prefix, d_model, cfg, rng);
    for i in 0..cfg.n_experts {
        init_ffn(store, &expert_prefix(layer_prefix, i), d_model, cfg.expert_dim, rng);
    }
    for s in 0..cfg.n_shared {
        init_ffn(store, &shared_prefix(layer_prefix, s), d_model, cfg.expert_dim, rng);
    }
}

/// `gelu(x·W_in)·W_out`.
pub fn ffn<F: Float>(tape: &mut Tape<F>, x: Var, store: &ParamStore<F>, prefix: &str) -> Result<Var> {
    let (a, b) = ffn_names(prefix);
    let w_in = tape.param(store, &a)?;
    let w_out = tape.param(store, &b)?;
    let h = tape.matmul(x, w_in)?;
    let h = tape.gelu(h);
    tape.matmul(h, w_out)
}

/// Everything a sparse layer hands back to the model.
pub struct MoeOutput<F: Float> {
    pub y: Var,
    pub records: Vec<RoutingRecord>,
    pub aux: AuxLossReport,
    /// Balance-loss node, when its coefficient is positive.
    pub balance: Option<Var>,
    /// Z-loss node, when its coefficient is positive.
    pub z: Option<Var>,
    /// Routed (token, slot) pairs that ran an FFN.
    pub expert_evals: usize,
    pub routing: Routing<F>,
}

/// Per-call switches for a sparse layer.
#[derive(Clone, Copy, Debug, Default)]
pub struct LayerCall {
    pub layer: usize,
    pub route: RouteOptions,
    /// Emit one [`RoutingRecord`] per token.
    pub capture: bool,
}

fn check_finite<F: Float>(tape: &Tape<F>, v: Var, layer: usize, what: &str) -> Result<()> {
    if tape.value(v).is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("layer {layer}: {what} produced a non-finite output")))
    }
}

/// Sparse FFN over the rows of `x` (`[T×d]`).
pub fn moe_layer<F: Float>(
    tape: &mut Tape<F>,
    x: Var,
    store: &ParamStore<F>,
    prefix: &str,
    cfg: &MoEConfig,
    call: &LayerCall,
) -> Result<MoeOutput<F>> {
    let (t, d) = tape.value(x).dims2()?;
    let routing = if cfg.variant == Variant::Xmoe {
        let down = tape.param(store, &format!("{prefix}.router.down"))?;
        let emb = tape.param(store, &format!("{prefix}.router.emb"))?;
        let temp = tape.param(store, &format!("{prefix}.router.temp"))?;
        route_xmoe(tape, x, down, emb, temp, cfg, &call.route)?
    } else {
        let w = tape.param(store, &format!("{prefix}.router"))?;
        route(tape, x, w, cfg, &call.route)?
    };
    let pool = cfg.expert_pool();
    let n = pool.len();

    // token rows per routable slot
    let mut rows: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (tok, sel) in routing.ids.iter().enumerate() {
        for &e in sel {
            rows[e].push(tok);
        }
    }

    let mut parts = Vec::new();
    let mut expert_evals = 0;
    for (slot, kind) in pool.iter().enumerate() {
        let toks = &rows[slot];
        if toks.is_empty() {
            continue;
        }
        let (out, sign) = match *kind {
            ExpertKind::Zero => continue,
            ExpertKind::Copy => (tape.gather_rows(x, toks)?, F::one()),
            ExpertKind::Ffn(i) | ExpertKind::Negated(i) => {
                let xs = tape.gather_rows(x, toks)?;
                let out = ffn(tape, xs, store, &expert_prefix(prefix, i))?;
                check_finite(tape, out, call.layer, &format!("expert {slot}"))?;
                expert_evals += toks.len();
                let sign = if matches!(kind, ExpertKind::Negated(_)) { -F::one() } else { F::one() };
                (out, sign)
            }
        };
        let pairs: Vec<(usize, usize)> = toks.iter().map(|&tok| (tok, slot)).collect();
        let coef = vec![sign; pairs.len()];
        let g = tape.gather_elems(routing.gates_full, pairs, coef)?;
        let weighted = tape.scale_rows(out, g)?;
        parts.push((weighted, toks.clone()));
    }
    let mut y = if parts.is_empty() {
        tape.constant(Tensor::zeros(&[t, d]))
    } else {
        tape.scatter_sum(t, d, parts)?
    };
    for s in 0..cfg.n_shared {
        let out = ffn(tape, x, store, &shared_prefix(prefix, s))?;
        check_finite(tape, out, call.layer, &format!("shared expert {s}"))?;
        y = tape.add(y, out)?;
    }

    let logits_val = tape.value(routing.logits);
    let f = expert_load(&routing.ids, n)?;
    let p = mean_probs(logits_val)?;
    let alpha = cfg.balance_coef as f64;
    let balance_val = alpha * n as f64 * f.iter().zip(&p).map(|(a, b)| a * b).sum::<f64>();
    let mut aux = AuxLossReport { balance_loss: balance_val, z_loss: 0.0, per_expert_load: f, per_expert_mean_prob: p };

    let balance = if cfg.balance_coef > 0.0 {
        let probs = tape.softmax_rows(routing.logits)?;
        let mut w = vec![F::zero(); t * n];
        for r in 0..t {
            for (i, fi) in aux.per_expert_load.iter().enumerate() {
                w[r * n + i] = F::of(alpha * n as f64 * fi / t as f64);
            }
        }
        Some(tape.dot_const(probs, w)?)
    } else {
        None
    };
    let z = if cfg.z_coef > 0.0 {
        let z = tape.z_loss(routing.logits, F::of(cfg.z_coef as f64))?;
        aux.z_loss = tape.scalar_value(z).as_f64();
        Some(z)
    } else {
        None
    };

    let records = if call.capture {
        let lv = tape.value(routing.logits);
        routing
            .ids
            .iter()
            .zip(&routing.gates)
            .enumerate()
            .map(|(tok, (ids, gates))| RoutingRecord {
                layer: call.layer,
                token_position: tok,
                selected_ids: ids.clone(),
                gate_weights: gates.iter().map(|g| g.as_f32()).collect(),
                full_logits: lv.row(tok).iter().map(|v| v.as_f32()).collect(),
            })
            .collect()
    } else {
        Vec::new()
    };

    Ok(MoeOutput { y, records, aux, balance, z, expert_evals, routing })
}

/// Dense FFN sublayer under `prefix`.
pub fn dense_layer<F: Float>(tape: &mut Tape<F>, x: Var, store: &ParamStore<F>, prefix: &str) -> Result<Var> {
    ffn(tape, x, store, prefix)
}

/// Result of a stand-alone [`moe_forward`].
pub struct MoeForward<F: Float> {
    pub y: Tensor<F>,
    pub records: Vec<RoutingRecord>,
    pub aux: AuxLossReport,
    pub expert_evals: usize,
}

/// Evaluate one sparse layer outside of a model, without gradients.
pub fn moe_forward<F: Float>(
    x: &Tensor<F>,
    cfg: &MoEConfig,
    params: &ParamStore<F>,
    prefix: &str,
    opts: &RouteOptions,
) -> Result<MoeForward<F>> {
    if !x.is_finite() {
        return Err(Error::NonFinite("moe input is non-finite".into()));
    }
    let mut tape = Tape::inference();
    let xv = tape.constant(x.clone());
    let call = LayerCall { layer: 0, route: *opts, capture: true };
    let out = moe_layer(&mut tape, xv, params, prefix, cfg, &call)?;
    Ok(MoeForward {
        y: tape.value(out.y).clone(),
        records: out.records,
        aux: out.aux,
        expert_evals: out.expert_evals,
    })
}
