//! Initialise a sparse model from a trained dense one.

use serde::{Deserialize, Serialize};

use super::layer::{expert_prefix, ffn_names, shared_prefix};
use crate::model::{build_model, dense_ffn_prefix, moe_prefix, ModelConfig};
use crate::numeric::{ParamStore, Rng};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpcycleMode {
    /// Every routed and shared expert copies the dense FFN.
    Full,
    /// Only shared experts copy the dense FFN; routed experts stay fresh.
    SharedOnly,
}

impl UpcycleMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(UpcycleMode::Full),
            "shared_only" | "shared-only" => Ok(UpcycleMode::SharedOnly),
            other => Err(Error::Config(format!("unknown upcycle mode `{other}`"))),
        }
    }
}

/// Sparse parameters for `cfg` seeded from `dense`.
///
/// Attention, norms, embeddings and head are copied. Routers are always
/// freshly drawn from `rng`.
pub fn upcycle(dense: &ParamStore, cfg: &ModelConfig, mode: UpcycleMode, rng: &mut Rng) -> Result<ParamStore> {
    if mode == UpcycleMode::SharedOnly && cfg.moe.n_shared == 0 {
        return Err(Error::Config("shared_only upcycling needs at least one shared expert".into()));
    }
    let mut out = build_model(cfg, rng)?;
    let mut mismatched = Vec::new();
    let mut copy = |out: &mut ParamStore, dst: &str, src: &str| match (out.get_mut(dst), dense.get(src)) {
        (Some(d), Some(s)) if d.shape() == s.shape() => d.data_mut().copy_from_slice(s.data()),
        (Some(d), Some(s)) => mismatched.push(format!("{src} {:?} -> {dst} {:?}", s.shape(), d.shape())),
        (_, None) => mismatched.push(format!("{src} missing from dense checkpoint")),
        (None, _) => mismatched.push(format!("{dst} missing from target")),
    };
    let names: Vec<String> = out.keys().filter(|k| !k.contains(".moe.")).cloned().collect();
    for name in &names {
        copy(&mut out, name, name);
    }
    for l in cfg.moe_layers() {
        let (src_in, src_out) = ffn_names(&dense_ffn_prefix(l));
        let mp = moe_prefix(l);
        let mut targets = Vec::new();
        if mode == UpcycleMode::Full {
            targets.extend((0..cfg.moe.n_experts).map(|i| expert_prefix(&mp, i)));
        }
        targets.extend((0..cfg.moe.n_shared).map(|s| shared_prefix(&mp, s)));
        for t in targets {
            let (dst_in, dst_out) = ffn_names(&t);
            copy(&mut out, &dst_in, &src_in);
            copy(&mut out, &dst_out, &src_out);
        }
    }
    if !mismatched.is_empty() {
        return Err(Error::Manifest(format!("dense checkpoint does not fit: {}", mismatched.join("; "))));
    }
    Ok(out)
}
