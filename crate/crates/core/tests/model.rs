mod common;

use common::tiny_model;
use moelab::model::{build_model, count_params, forward_lm, ModelConfig};
use moelab::moe::{upcycle, RouteOptions, UpcycleMode, Variant};
use moelab::numeric::{cast_store, ParamStore, Rng, Tensor};
use moelab::Error;

fn all_variants() -> impl Iterator<Item = Variant> {
    Variant::SPARSE.into_iter().chain([Variant::Dense])
}

fn logits(params: &ParamStore, cfg: &ModelConfig, tokens: &[usize], batch: usize) -> Tensor {
    forward_lm(params, cfg, tokens, batch, &RouteOptions::default()).unwrap().logits
}

#[test]
fn perturbing_a_token_leaves_earlier_logits_unchanged() {
    for v in all_variants() {
        let cfg = tiny_model(v);
        let params = build_model(&cfg, &mut Rng::new(3)).unwrap();
        let mut rng = Rng::new(11);
        let tokens: Vec<usize> = (0..2 * 12).map(|_| rng.below(256)).collect();
        let base = logits(&params, &cfg, &tokens, 2);
        for t in [0, 5, 11] {
            let mut changed = tokens.clone();
            changed[t] = (changed[t] + 97) % 256;
            changed[12 + t] = (changed[12 + t] + 31) % 256;
            let after = logits(&params, &cfg, &changed, 2);
            for row in 0..2 {
                for p in 0..t {
                    let r = row * 12 + p;
                    let diff = base.row(r).iter().zip(after.row(r)).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
                    assert!(diff < 1e-6, "{v}: position {p} moved by {diff} after editing {t}");
                }
            }
        }
    }
}

// Plain-loop re-implementation of the forward pass for a single sequence.
mod oracle {
    use moelab::model::ModelConfig;
    use moelab::numeric::ParamStore;

    type M = Vec<Vec<f64>>;

    fn get(p: &ParamStore<f64>, name: &str) -> (Vec<usize>, Vec<f64>) {
        let t = &p[name];
        (t.shape().to_vec(), t.data().to_vec())
    }

    fn mat(p: &ParamStore<f64>, name: &str) -> M {
        let (s, d) = get(p, name);
        d.chunks(s[1]).map(|r| r.to_vec()).collect()
    }

    fn vec1(p: &ParamStore<f64>, name: &str) -> Vec<f64> {
        get(p, name).1
    }

    fn matmul(a: &M, b: &M) -> M {
        a.iter()
            .map(|row| (0..b[0].len()).map(|j| (0..b.len()).map(|k| row[k] * b[k][j]).sum()).collect())
            .collect()
    }

    fn rms(x: &M, g: &[f64]) -> M {
        x.iter()
            .map(|row| {
                let ms = row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64;
                let s = 1.0 / (ms + 1e-6).sqrt();
                row.iter().zip(g).map(|(v, g)| v * s * g).collect()
            })
            .collect()
    }

    fn gelu(x: f64) -> f64 {
        0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
    }

    fn ffn(x: &M, p: &ParamStore<f64>, prefix: &str) -> M {
        let h: M = matmul(x, &mat(p, &format!("{prefix}.w_in")))
            .into_iter()
            .map(|r| r.into_iter().map(gelu).collect())
            .collect();
        matmul(&h, &mat(p, &format!("{prefix}.w_out")))
    }

    fn add(a: &M, b: &M) -> M {
        a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(u, v)| u + v).collect()).collect()
    }

    /// Softmax top-k routing over parameterised experts only.
    fn moe(x: &M, p: &ParamStore<f64>, prefix: &str, cfg: &ModelConfig) -> M {
        let logits = matmul(x, &mat(p, &format!("{prefix}.router")));
        let outs: Vec<M> = (0..cfg.moe.n_experts).map(|i| ffn(x, p, &format!("{prefix}.experts.{i}"))).collect();
        let mut y = vec![vec![0.0; x[0].len()]; x.len()];
        for (t, row) in logits.iter().enumerate() {
            let mut order: Vec<usize> = (0..row.len()).collect();
            order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap());
            let chosen = &order[..cfg.moe.top_k];
            let z: f64 = chosen.iter().map(|&e| (row[e] - row[chosen[0]]).exp()).sum();
            for &e in chosen {
                let g = (row[e] - row[chosen[0]]).exp() / z;
                for (j, v) in y[t].iter_mut().enumerate() {
                    *v += g * outs[e][t][j];
                }
            }
        }
        y
    }

    fn attention(x: &M, p: &ParamStore<f64>, prefix: &str, heads: usize) -> M {
        let q = matmul(x, &mat(p, &format!("{prefix}.attn.wq")));
        let k = matmul(x, &mat(p, &format!("{prefix}.attn.wk")));
        let v = matmul(x, &mat(p, &format!("{prefix}.attn.wv")));
        let d = q[0].len();
        let dh = d / heads;
        let mut out = vec![vec![0.0; d]; x.len()];
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            for i in 0..x.len() {
                let scores: Vec<f64> = (0..=i)
                    .map(|j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let mx = scores.iter().cloned().fold(f64::MIN, f64::max);
                let z: f64 = scores.iter().map(|s| (s - mx).exp()).sum();
                for (j, s) in scores.iter().enumerate() {
                    let w = (s - mx).exp() / z;
                    for c in cols.clone() {
                        out[i][c] += w * v[j][c];
                    }
                }
            }
        }
        matmul(&out, &mat(p, &format!("{prefix}.attn.wo")))
    }

    pub fn forward(p: &ParamStore<f64>, cfg: &ModelConfig, tokens: &[usize]) -> Vec<Vec<f64>> {
        let tok = mat(p, "tok_emb");
        let pos = mat(p, "pos_emb");
        let mut h: M = tokens.iter().enumerate().map(|(t, &id)| tok[id].iter().zip(&pos[t]).map(|(a, b)| a + b).collect()).collect();
        for l in 0..cfg.n_layers {
            let pre = format!("layers.{l}");
            let a = rms(&h, &vec1(p, &format!("{pre}.attn_norm")));
            h = add(&h, &attention(&a, p, &pre, cfg.n_heads));
            let f = rms(&h, &vec1(p, &format!("{pre}.ffn_norm")));
            let out = if cfg.is_moe_layer(l) { moe(&f, p, &format!("{pre}.moe"), cfg) } else { ffn(&f, p, &format!("{pre}.ffn")) };
            h = add(&h, &out);
        }
        let hn = rms(&h, &vec1(p, "final_norm"));
        matmul(&hn, &mat(p, "head"))
    }
}

#[test]
fn forward_matches_straight_line_oracle() {
    for v in [Variant::Smoe, Variant::Dense] {
        let mut cfg = tiny_model(v);
        // one sparse and one dense block
        cfg.moe_layer_indices = Some(vec![1]);
        let mut params = build_model(&cfg, &mut Rng::new(21)).unwrap();
        // larger weights so routing and attention are not near-uniform
        for t in params.values_mut() {
            if t.shape().len() == 2 {
                t.data_mut().iter_mut().for_each(|x| *x *= 10.0);
            }
        }
        let p64: ParamStore<f64> = cast_store(&params);
        let tokens = [72, 105];
        let got = forward_lm(&p64, &cfg, &tokens, 1, &RouteOptions::default()).unwrap().logits;
        let want = oracle::forward(&p64, &cfg, &tokens);
        for (r, row) in want.iter().enumerate() {
            for (j, w) in row.iter().enumerate() {
                let g = got.row(r)[j];
                assert!((g - w).abs() < 1e-5, "{v}: logit ({r},{j}) {g} vs {w}");
            }
        }
    }
}

#[test]
fn one_record_per_token_per_sparse_layer() {
    for v in Variant::SPARSE {
        let mut cfg = tiny_model(v);
        cfg.n_layers = 3;
        cfg.moe_layer_indices = Some(vec![0, 2]);
        let params = build_model(&cfg, &mut Rng::new(1)).unwrap();
        let tokens: Vec<usize> = (0..3 * 7).map(|i| (i * 13) % 256).collect();
        let out = forward_lm(&params, &cfg, &tokens, 3, &RouteOptions::default()).unwrap();
        for layer in [0, 2] {
            let n = out.records.iter().filter(|r| r.layer == layer).count();
            assert_eq!(n, 21, "{v} layer {layer}");
        }
        assert!(out.records.iter().all(|r| r.layer != 1));
        assert_eq!(out.aux.len(), 2);
    }
}

#[test]
fn out_of_vocabulary_token_is_a_data_error() {
    let cfg = tiny_model(Variant::Smoe);
    let params = build_model(&cfg, &mut Rng::new(1)).unwrap();
    let err = forward_lm(&params, &cfg, &[1, 2, 300, 4], 2, &RouteOptions::default()).err().unwrap();
    assert!(matches!(err, Error::Data(_)));
    assert!(err.to_string().contains("row 1 position 0"), "{err}");
}

#[test]
fn invalid_dimensions_are_config_errors() {
    let mut cfg = tiny_model(Variant::Smoe);
    cfg.d_head = 5;
    assert!(matches!(build_model(&cfg, &mut Rng::new(0)), Err(Error::Config(_))));
    let mut cfg = tiny_model(Variant::Smoe);
    cfg.seq_len = 1;
    assert!(matches!(build_model(&cfg, &mut Rng::new(0)), Err(Error::Config(_))));
    let mut cfg = tiny_model(Variant::Smoe);
    cfg.moe_layer_indices = Some(vec![2]);
    assert!(matches!(build_model(&cfg, &mut Rng::new(0)), Err(Error::Config(_))));
}

fn closed_form_total(cfg: &ModelConfig) -> usize {
    let d = cfg.d_model;
    let e = cfg.moe.expert_dim;
    let mut total = cfg.vocab_size * d + cfg.seq_len * d + d + d * cfg.vocab_size;
    for l in 0..cfg.n_layers {
        total += 2 * d + 4 * d * d;
        if cfg.is_moe_layer(l) {
            let experts = cfg.moe.n_experts + cfg.moe.n_shared;
            let router = match cfg.moe.variant {
                Variant::Xmoe => d * cfg.moe.xmoe_routing_dim + cfg.moe.xmoe_routing_dim * cfg.moe.n_routable() + 1,
                _ => d * cfg.moe.n_routable(),
            };
            total += experts * 2 * d * e + router;
        } else {
            total += 2 * d * cfg.dense_hidden();
        }
    }
    total
}

#[test]
fn parameter_counts_follow_closed_form() {
    for v in all_variants() {
        let cfg = tiny_model(v);
        let params = build_model(&cfg, &mut Rng::new(0)).unwrap();
        let c = count_params(&params, &cfg);
        assert_eq!(c.total, closed_form_total(&cfg), "{v}");
        let idle = if v == Variant::Dense { 0 } else { cfg.moe.n_experts - cfg.moe.top_k };
        let idle_params = cfg.n_layers * idle * 2 * cfg.d_model * cfg.moe.expert_dim;
        assert_eq!(c.active, c.total - idle_params, "{v}");
        assert!(c.active <= c.total);
    }
}

#[test]
fn routed_expert_counts_at_default_width() {
    let mut cfg = ModelConfig::default();
    cfg.n_layers = 1;
    let params = build_model(&cfg, &mut Rng::new(0)).unwrap();
    let c = count_params(&params, &cfg);
    let routed: usize = params.iter().filter(|(k, _)| k.contains(".experts.")).map(|(_, t)| t.numel()).sum();
    assert_eq!(routed, 8 * (2 * 128 * 32));
    assert_eq!(c.total - c.active, 6 * (2 * 128 * 32));

    let dense = cfg.dense_matched();
    let dp = build_model(&dense, &mut Rng::new(0)).unwrap();
    let dc = count_params(&dp, &dense);
    assert_eq!(dc.active, dc.total);
    assert_eq!(dc.total, c.active - 128 * 8);
}

#[test]
fn zero_and_copy_experts_carry_no_parameters() {
    let base = build_model(&tiny_model(Variant::Smoe), &mut Rng::new(0)).unwrap();
    for v in [Variant::Moepp, Variant::Tcmoe] {
        let cfg = tiny_model(v);
        let params = build_model(&cfg, &mut Rng::new(0)).unwrap();
        let experts = |p: &ParamStore| -> usize {
            p.iter().filter(|(k, _)| k.contains(".experts.")).map(|(_, t)| t.numel()).sum()
        };
        assert_eq!(experts(&params), experts(&base), "{v}");
    }
}

#[test]
fn build_is_deterministic_per_seed() {
    for v in all_variants() {
        let cfg = tiny_model(v);
        let a = build_model(&cfg, &mut Rng::new(9)).unwrap();
        let b = build_model(&cfg, &mut Rng::new(9)).unwrap();
        let c = build_model(&cfg, &mut Rng::new(10)).unwrap();
        assert_eq!(a.keys().collect::<Vec<_>>(), b.keys().collect::<Vec<_>>());
        for (k, t) in &a {
            let bits = |t: &Tensor| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(t), bits(&b[k]), "{v} {k}");
        }
        assert!(a["head"].data() != c["head"].data());
    }
}

#[test]
fn upcycled_model_reproduces_dense_logits() {
    for v in [Variant::Smoe, Variant::Xmoe] {
        let cfg = tiny_model(v);
        let dense_cfg = ModelConfig { moe: moelab::moe::MoEConfig { variant: Variant::Dense, n_shared: 0, ..cfg.moe.clone() }, ..cfg.clone() };
        let dense = build_model(&dense_cfg, &mut Rng::new(4)).unwrap();
        let sparse = upcycle(&dense, &cfg, UpcycleMode::Full, &mut Rng::new(5)).unwrap();
        let tokens: Vec<usize> = (0..32).map(|i| (i * 37 + 5) % 256).collect();
        let a = logits(&dense, &dense_cfg, &tokens, 2);
        let b = logits(&sparse, &cfg, &tokens, 2);
        let diff = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max);
        assert!(diff < 1e-4, "{v}: {diff}");
    }
}
