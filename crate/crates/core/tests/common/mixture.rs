//! Straight-line reference computations for the sparse layer.

use super::rand_tensor;
use moelab::moe::layer::{expert_prefix, ffn_names, init_moe};
use moelab::moe::{moe_forward, MoEConfig, RouteOptions, Variant};
use moelab::numeric::{cast_store, ParamStore, Rng, Tensor};

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

pub fn mat(t: &Tensor<f64>) -> (usize, usize, &[f64]) {
    (t.shape()[0], t.shape()[1], t.data())
}

pub fn vecmat(x: &[f64], w: &Tensor<f64>) -> Vec<f64> {
    let (r, c, d) = mat(w);
    (0..c).map(|j| (0..r).map(|i| x[i] * d[i * c + j]).sum()).collect()
}

/// Straight-line FFN `gelu(x W_in) W_out` for one row.
pub fn ffn_row(x: &[f64], store: &ParamStore<f64>, prefix: &str) -> Vec<f64> {
    let (a, b) = ffn_names(prefix);
    let h: Vec<f64> = vecmat(x, &store[&a]).into_iter().map(gelu).collect();
    vecmat(&h, &store[&b])
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

pub fn store_for(cfg: &MoEConfig, d: usize, seed: u64, scale: f64) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    init_moe(&mut s, "m", d, cfg, &mut Rng::new(seed));
    let mut s: ParamStore<f64> = cast_store(&s);
    for t in s.values_mut() {
        t.data_mut().iter_mut().for_each(|v| *v *= scale);
    }
    s
}

pub fn cfg(variant: Variant, n: usize, k: usize) -> MoEConfig {
    MoEConfig { n_experts: n, top_k: k, expert_dim: 8, xmoe_routing_dim: 3, ..MoEConfig::for_variant(variant) }
}


/// Worst absolute difference between a layer with `K = N` and the
/// softmax-weighted dense mixture of all experts, over `trials` random layers.
pub fn full_selection_worst(trials: u64) -> f64 {
    let d = 6;
    let c = cfg(Variant::Smoe, 4, 4);
    let mut rng = Rng::new(3);
    let mut worst = 0.0f64;
    for trial in 0..trials {
        let store = store_for(&c, d, trial, 25.0);
        let x = rand_tensor(&mut rng, &[3, d], 1.0);
        let got = moe_forward(&x, &c, &store, "m", &RouteOptions::default()).unwrap();
        for r in 0..3 {
            let xr = x.row(r);
            let p = softmax(&vecmat(xr, &store["m.router"]));
            let mut y = vec![0.0; d];
            for (i, pi) in p.iter().enumerate() {
                for (yj, ej) in y.iter_mut().zip(ffn_row(xr, &store, &expert_prefix("m", i))) {
                    *yj += pi * ej;
                }
            }
            for j in 0..d {
                worst = worst.max((got.y.row(r)[j] - y[j]).abs());
            }
        }
    }
    worst
}

