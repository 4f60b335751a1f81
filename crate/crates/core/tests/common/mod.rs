#![allow(dead_code)]

pub mod gradcheck;
pub mod logs;
pub mod mixture;

use moelab::model::ModelConfig;
use moelab::moe::{MoEConfig, Variant};
use moelab::numeric::{Rng, Tensor};
use moelab::trainer::{DataConfig, RunConfig};

pub fn rand_tensor(rng: &mut Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| (rng.uniform() * 2.0 - 1.0) * scale).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn tiny_model(variant: Variant) -> ModelConfig {
    let mut moe = MoEConfig::for_variant(variant);
    moe.n_experts = 4;
    moe.top_k = 2;
    moe.expert_dim = 8;
    moe.xmoe_routing_dim = 4;
    ModelConfig { d_model: 16, n_heads: 2, d_head: 8, n_layers: 2, vocab_size: 256, seq_len: 16, moe, moe_layer_indices: None }
}

pub fn tiny_run(variant: Variant, steps: usize) -> RunConfig {
    RunConfig {
        lr: 1e-3,
        total_steps: steps,
        batch_size: 4,
        checkpoint_every: steps,
        eval_every: steps,
        model: tiny_model(variant),
        data: DataConfig { synth_bytes: 60_000, val_ratio: 0.02, ..DataConfig::default() },
        ..RunConfig::default()
    }
}
