use serde::{Deserialize, Serialize};

use crate::numeric::ScoreKind;
use crate::{Error, Result};

/// Routing algorithm of a mixture-of-experts layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Vanilla top-k softmax router.
    #[default]
    Smoe,
    /// Sigmoid-scored router.
    SigmaMoe,
    /// Low-dimensional cosine router with a learned temperature.
    Xmoe,
    /// Softmax router plus always-on shared experts.
    SharedV2,
    /// Sigmoid router plus always-on shared experts.
    SharedV3,
    /// Routed pool extended with zero-experts and a copy-expert.
    Moepp,
    /// Ternary pool: each expert, its negation, and zero-experts.
    Tcmoe,
    /// Plain feed-forward block, no routing.
    Dense,
}

impl Variant {
    pub const SPARSE: [Variant; 7] = [
        Variant::Smoe,
        Variant::SigmaMoe,
        Variant::Xmoe,
        Variant::SharedV2,
        Variant::SharedV3,
        Variant::Moepp,
        Variant::Tcmoe,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Smoe => "smoe",
            Variant::SigmaMoe => "sigma_moe",
            Variant::Xmoe => "xmoe",
            Variant::SharedV2 => "shared_v2",
            Variant::SharedV3 => "shared_v3",
            Variant::Moepp => "moepp",
            Variant::Tcmoe => "tcmoe",
            Variant::Dense => "dense",
        }
    }

    pub fn parse(s: &str) -> Result<Variant> {
        let all = Variant::SPARSE.iter().copied().chain([Variant::Dense]);
        all.clone()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }

    pub fn score_kind(self) -> ScoreKind {
        match self {
            Variant::SigmaMoe | Variant::SharedV3 => ScoreKind::Sigmoid,
            _ => ScoreKind::Softmax,
        }
    }

    pub fn is_shared(self) -> bool {
        matches!(self, Variant::SharedV2 | Variant::SharedV3)
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// What a slot of the routable pool computes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExpertKind {
    /// Parameterised FFN expert with the given parameter index.
    Ffn(usize),
    /// Outputs the zero vector.
    Zero,
    /// Outputs its input unchanged.
    Copy,
    /// Outputs the negation of FFN expert `base`.
    Negated(usize),
}

impl ExpertKind {
    pub fn has_params(self) -> bool {
        matches!(self, ExpertKind::Ffn(_))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MoEConfig {
    pub variant: Variant,
    /// Parameterised routed experts (shared experts are counted separately).
    pub n_experts: usize,
    /// Routed experts selected per token.
    pub top_k: usize,
    pub n_shared: usize,
    /// Hidden width of each expert FFN; for `dense` the FFN hidden width.
    pub expert_dim: usize,
    pub xmoe_routing_dim: usize,
    /// Initial `exp(temperature)` of the cosine router.
    pub xmoe_init_scale: f32,
    pub n_zero_experts: usize,
    pub router_init_std: f32,
    pub balance_coef: f32,
    pub z_coef: f32,
    pub temperature: f32,
}

impl Default for MoEConfig {
    fn default() -> Self {
        MoEConfig {
            variant: Variant::Smoe,
            n_experts: 8,
            top_k: 2,
            n_shared: 0,
            expert_dim: 32,
            xmoe_routing_dim: 16,
            xmoe_init_scale: 10.0,
            n_zero_experts: 1,
            router_init_std: 0.02,
            balance_coef: 0.01,
            z_coef: 0.0,
            temperature: 1.0,
        }
    }
}

impl MoEConfig {
    /// Defaults for `variant`: shared variants get one shared expert.
    pub fn for_variant(variant: Variant) -> Self {
        let n_shared = if variant.is_shared() { 1 } else { 0 };
        MoEConfig { variant, n_shared, ..MoEConfig::default() }
    }

    /// Dense block whose FFN width matches this layer's active expert width.
    pub fn dense_matched(&self) -> Self {
        let active = if self.variant == Variant::Dense {
            self.expert_dim
        } else {
            (self.top_k + self.n_shared) * self.expert_dim
        };
        MoEConfig { variant: Variant::Dense, n_shared: 0, expert_dim: active, ..self.clone() }
    }

    pub fn is_dense(&self) -> bool {
        self.variant == Variant::Dense
    }

    pub fn score_kind(&self) -> ScoreKind {
        self.variant.score_kind()
    }

    /// The routable pool in router-output order.
    pub fn expert_pool(&self) -> Vec<ExpertKind> {
        let ffn = (0..self.n_experts).map(ExpertKind::Ffn);
        match self.variant {
            Variant::Dense => Vec::new(),
            Variant::Moepp => ffn
                .chain(std::iter::repeat_n(ExpertKind::Zero, self.n_zero_experts))
                .chain([ExpertKind::Copy])
                .collect(),
            Variant::Tcmoe => ffn
                .chain((0..self.n_experts).map(ExpertKind::Negated))
                .chain(std::iter::repeat_n(ExpertKind::Zero, self.n_zero_experts))
                .collect(),
            _ => ffn.collect(),
        }
    }

    pub fn n_routable(&self) -> usize {
        match self.variant {
            Variant::Dense => 0,
            Variant::Moepp => self.n_experts + self.n_zero_experts + 1,
            Variant::Tcmoe => 2 * self.n_experts + self.n_zero_experts,
            _ => self.n_experts,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.expert_dim == 0 {
            return bad("expert_dim must be positive".into());
        }
        if self.is_dense() {
            return Ok(());
        }
        if self.n_experts == 0 || self.top_k == 0 {
            return bad("n_experts and top_k must be positive".into());
        }
        if self.top_k > self.n_routable() {
            return bad(format!(
                "top_k={} exceeds the {} routable experts of `{}`",
                self.top_k,
                self.n_routable(),
                self.variant
            ));
        }
        if self.variant.is_shared() && self.n_shared == 0 {
            return bad(format!("`{}` needs n_shared >= 1", self.variant));
        }
        if !self.variant.is_shared() && self.n_shared > 0 {
            return bad(format!("`{}` does not use shared experts (n_shared={})", self.variant, self.n_shared));
        }
        if !(self.router_init_std > 0.0) || !(self.temperature > 0.0) {
            return bad("router_init_std and temperature must be positive".into());
        }
        if self.balance_coef < 0.0 || self.z_coef < 0.0 {
            return bad("loss coefficients must be non-negative".into());
        }
        if self.variant == Variant::Xmoe && (self.xmoe_routing_dim == 0 || !(self.xmoe_init_scale > 0.0)) {
            return bad("xmoe needs a positive routing dim and initial scale".into());
        }
        Ok(())
    }
}
