//! Finite-difference checks of every tape operation and of whole models.
//! Each group returns `(check name, worst relative error)`.

use super::{rand_tensor, tiny_model};
use moelab::model::{build_model, lm_loss, ForwardOptions};
use moelab::moe::{moe_layer, LayerCall, MoEConfig, Variant};
use moelab::numeric::{cast_store, ParamStore, Rng, Tape, Tensor, Var};

pub const OP_TOL: f64 = 1e-4;
pub const MODEL_TOL: f64 = 1e-3;

const H: f64 = 1e-5;

type Checks = Vec<(String, f64)>;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-4)
}

/// Analytic vs central-difference gradients of `Σ w ⊙ f(inputs)`. A missing
/// input gradient counts as an infinite error.
fn check_op(name: &str, inputs: Vec<Tensor<f64>>, f: impl Fn(&mut Tape<f64>, &[Var]) -> Var) -> (String, f64) {
    let mut rng = Rng::new(99);
    let eval = |xs: &[Tensor<f64>], w: Option<&Vec<f64>>| -> (f64, Vec<Option<Vec<f64>>>, Vec<f64>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone().with_requires_grad(true))).collect();
        let out = f(&mut tape, &vars);
        let weights = w.cloned().unwrap_or_else(|| {
            let n = tape.value(out).numel();
            (0..n).map(|i| 0.5 + ((i * 7919) % 13) as f64 / 13.0).collect()
        });
        let loss = tape.dot_const(out, weights.clone()).unwrap();
        let val = tape.scalar_value(loss);
        tape.backward(loss).unwrap();
        let grads = vars.iter().map(|&v| tape.grad(v).map(|g| g.to_vec())).collect();
        (val, grads, weights)
    };
    let (_, grads, w) = eval(&inputs, None);
    let mut worst = 0.0f64;
    for (i, x) in inputs.iter().enumerate() {
        let Some(g) = grads[i].as_ref() else {
            return (name.to_string(), f64::INFINITY);
        };
        let picks: Vec<usize> =
            if x.numel() <= 40 { (0..x.numel()).collect() } else { (0..40).map(|_| rng.below(x.numel())).collect() };
        for j in picks {
            let mut plus = inputs.clone();
            plus[i].data_mut()[j] += H;
            let mut minus = inputs.clone();
            minus[i].data_mut()[j] -= H;
            let num = (eval(&plus, Some(&w)).0 - eval(&minus, Some(&w)).0) / (2.0 * H);
            worst = worst.max(rel_err(g[j], num));
        }
    }
    (name.to_string(), worst)
}

pub fn elementwise_and_linear_ops() -> Checks {
    let mut r = Rng::new(1);
    let a = rand_tensor(&mut r, &[3, 4], 1.0);
    let b = rand_tensor(&mut r, &[4, 5], 1.0);
    let c = rand_tensor(&mut r, &[3, 4], 1.0);
    vec![
        check_op("matmul", vec![a.clone(), b.clone()], |t, v| t.matmul(v[0], v[1]).unwrap()),
        check_op("add", vec![a.clone(), c.clone()], |t, v| t.add(v[0], v[1]).unwrap()),
        check_op("mul", vec![a.clone(), c.clone()], |t, v| t.mul(v[0], v[1]).unwrap()),
        check_op("scale", vec![a.clone()], |t, v| t.scale(v[0], -1.7)),
        check_op("sum", vec![a.clone()], |t, v| t.sum(v[0])),
        check_op("transpose", vec![b.clone()], |t, v| t.transpose(v[0]).unwrap()),
        check_op("gelu", vec![rand_tensor(&mut r, &[4, 6], 3.0)], |t, v| t.gelu(v[0])),
        check_op("sigmoid", vec![rand_tensor(&mut r, &[4, 6], 3.0)], |t, v| t.sigmoid(v[0])),
        check_op("dot_const", vec![a], |t, v| t.dot_const(v[0], (0..12).map(|i| i as f64 - 5.0).collect()).unwrap()),
    ]
}

pub fn indexing_ops() -> Checks {
    let mut r = Rng::new(2);
    let table = rand_tensor(&mut r, &[5, 3], 1.0);
    let p1 = rand_tensor(&mut r, &[2, 3], 1.0);
    let p2 = rand_tensor(&mut r, &[3, 3], 1.0);
    let x = rand_tensor(&mut r, &[3, 4], 1.0);
    let s = rand_tensor(&mut r, &[3], 1.0);
    vec![
        check_op("gather_rows", vec![table], |t, v| t.gather_rows(v[0], &[4, 0, 4, 2]).unwrap()),
        check_op("scatter_sum", vec![p1, p2], |t, v| {
            t.scatter_sum(4, 3, vec![(v[0], vec![1, 3]), (v[1], vec![0, 1, 3])]).unwrap()
        }),
        check_op("gather_elems", vec![x.clone()], |t, v| {
            t.gather_elems(v[0], vec![(0, 1), (2, 3), (1, 1)], vec![1.0, -1.0, 1.0]).unwrap()
        }),
        check_op("scale_rows", vec![x, s], |t, v| t.scale_rows(v[0], v[1]).unwrap()),
    ]
}

pub fn normalisation_ops() -> Checks {
    let mut r = Rng::new(3);
    let x = rand_tensor(&mut r, &[4, 6], 2.0);
    let g = rand_tensor(&mut r, &[6], 1.0);
    let mut pos = rand_tensor(&mut r, &[3, 4], 1.0);
    pos.data_mut().iter_mut().for_each(|v| *v = v.abs() + 0.1);
    let keep = vec![true, false, true, true, false, false, true, false, true, true, true, false];
    let masked = rand_tensor(&mut r, &[3, 4], 2.0);
    let temp = Tensor::new(vec![1], vec![0.7]).unwrap();
    vec![
        check_op("rms_norm", vec![x.clone(), g], |t, v| t.rms_norm(v[0], v[1], 1e-6).unwrap()),
        check_op("softmax_rows", vec![x.clone()], |t, v| t.softmax_rows(v[0]).unwrap()),
        check_op("l2_normalize_rows", vec![x.clone()], |t, v| t.l2_normalize_rows(v[0], 1e-8).unwrap()),
        check_op("row_normalize", vec![pos], |t, v| t.row_normalize(v[0]).unwrap()),
        check_op("mask_keep+softmax", vec![masked], move |t, v| {
            let m = t.mask_keep(v[0], keep.clone()).unwrap();
            t.softmax_rows(m).unwrap()
        }),
        check_op("mul_exp", vec![x, temp], |t, v| t.mul_exp(v[0], v[1]).unwrap()),
    ]
}

pub fn loss_ops() -> Checks {
    let mut r = Rng::new(4);
    let logits = rand_tensor(&mut r, &[5, 7], 2.0);
    vec![
        check_op("cross_entropy", vec![logits.clone()], |t, v| t.cross_entropy(v[0], &[0, 6, 3, 3, 1]).unwrap()),
        check_op("z_loss", vec![logits], |t, v| t.z_loss(v[0], 0.3).unwrap()),
    ]
}

pub fn attention_op() -> Checks {
    let mut r = Rng::new(5);
    let q = rand_tensor(&mut r, &[6, 4], 1.0);
    let k = rand_tensor(&mut r, &[6, 4], 1.0);
    let v = rand_tensor(&mut r, &[6, 4], 1.0);
    vec![check_op("causal_attention", vec![q, k, v], |t, x| t.causal_attention(x[0], x[1], x[2], 2, 2).unwrap())]
}

pub fn all_ops() -> Checks {
    [elementwise_and_linear_ops(), indexing_ops(), normalisation_ops(), loss_ops(), attention_op()].concat()
}

fn layer_store(cfg: &MoEConfig, d: usize, seed: u64) -> ParamStore<f64> {
    let mut store = ParamStore::new();
    let mut rng = Rng::new(seed);
    moelab::moe::layer::init_moe(&mut store, "l", d, cfg, &mut rng);
    // larger router weights so selections are well separated
    let mut s = cast_store::<f32, f64>(&store);
    for (name, t) in s.iter_mut() {
        if name.contains("router") && !name.ends_with("temp") {
            t.data_mut().iter_mut().for_each(|v| *v *= 30.0);
        }
        if name.contains("experts") || name.contains("shared") {
            t.data_mut().iter_mut().for_each(|v| *v *= 20.0);
        }
    }
    s
}

/// Worst central-difference error of `loss` over `samples` random scalars
/// of `store`. Parameters that receive no gradient count as zero.
fn check_store(store: &ParamStore<f64>, samples: usize, seed: u64, loss: impl Fn(&mut Tape<f64>, &ParamStore<f64>) -> Var) -> f64 {
    let value = |s: &ParamStore<f64>| {
        let mut tape = Tape::new();
        let l = loss(&mut tape, s);
        tape.scalar_value(l)
    };
    let mut tape = Tape::new();
    let l = loss(&mut tape, store);
    tape.backward(l).unwrap();
    let mut g = store.clone();
    tape.write_grads(&mut g).unwrap();
    let names: Vec<String> = store.keys().cloned().collect();
    let mut rng = Rng::new(seed);
    let mut worst = 0.0f64;
    for _ in 0..samples {
        let n = &names[rng.below(names.len())];
        let j = rng.below(store[n].numel());
        let analytic = g[n].grad().map_or(0.0, |g| g[j]);
        let mut p = store.clone();
        p.get_mut(n).unwrap().data_mut()[j] += H;
        let mut m = store.clone();
        m.get_mut(n).unwrap().data_mut()[j] -= H;
        let num = (value(&p) - value(&m)) / (2.0 * H);
        worst = worst.max(rel_err(analytic, num));
    }
    worst
}

/// Output, balance and z-loss gradients of one sparse layer per variant.
pub fn moe_layer_every_variant() -> Checks {
    let d = 6;
    Variant::SPARSE
        .into_iter()
        .map(|v| {
            let mut cfg = MoEConfig::for_variant(v);
            cfg.n_experts = 4;
            cfg.top_k = 2;
            cfg.expert_dim = 5;
            cfg.xmoe_routing_dim = 3;
            cfg.z_coef = 0.01;
            cfg.balance_coef = 0.1;
            let mut store = layer_store(&cfg, d, 7);
            let mut r = Rng::new(8);
            store.insert("x".into(), rand_tensor(&mut r, &[5, d], 1.0));
            let w: Vec<f64> = (0..5 * d).map(|i| ((i * 31) % 11) as f64 / 11.0 - 0.4).collect();
            let worst = check_store(&store, 60, 17, |t, s| {
                let x = t.param(s, "x").unwrap();
                let out = moe_layer(t, x, s, "l", &cfg, &LayerCall::default()).unwrap();
                let mut total = t.dot_const(out.y, w.clone()).unwrap();
                for term in [out.balance, out.z].into_iter().flatten() {
                    total = t.add(total, term).unwrap();
                }
                total
            });
            (format!("moe[{v}]"), worst)
        })
        .collect()
}

/// Full language-model loss of a 2-layer `d_model = 16` model, 20 random
/// parameters per variant.
pub fn end_to_end_models() -> Checks {
    [Variant::Smoe, Variant::Xmoe, Variant::SharedV3, Variant::Tcmoe, Variant::Dense]
        .into_iter()
        .map(|variant| {
            let cfg = tiny_model(variant);
            let store32 = build_model(&cfg, &mut Rng::new(11)).unwrap();
            let mut store: ParamStore<f64> = cast_store(&store32);
            for (name, t) in store.iter_mut() {
                if name.contains("router") && !name.ends_with("temp") {
                    t.data_mut().iter_mut().for_each(|v| *v *= 25.0);
                }
            }
            let inputs: Vec<usize> = (0..24).map(|i| (i * 37 + 5) % 256).collect();
            let targets: Vec<usize> = (0..24).map(|i| (i * 53 + 11) % 256).collect();
            let worst = check_store(&store, 20, 12, |t, s| {
                lm_loss(t, s, &cfg, &inputs, &targets, 2, &ForwardOptions::default()).unwrap().loss
            });
            (format!("model[{variant}]"), worst)
        })
        .collect()
}
