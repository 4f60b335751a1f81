//! Sparse mixture-of-experts layers, routers and auxiliary losses.

pub mod aux;
pub mod config;
pub mod layer;
pub mod route;
pub mod upcycle;

pub use aux::{balance_loss, z_loss, AuxLossReport};
pub use config::{ExpertKind, MoEConfig, Variant};
pub use layer::{moe_forward, moe_layer, LayerCall, MoeForward, MoeOutput};
pub use route::{
    gates_for, perturb_selection, route, route_xmoe, select_experts, Perturbation, RouteOptions, Routing,
    RoutingRecord,
};
pub use upcycle::{upcycle, UpcycleMode};
