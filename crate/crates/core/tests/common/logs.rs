//! Random routing logs and loop-based reference metrics.

use moelab::diagnostics::{LogHeader, RoutingLog};
use moelab::moe::{RoutingRecord, Variant};
use moelab::numeric::Rng;

pub fn header(n_layers: usize, n: usize, k: usize, variant: Variant) -> LogHeader {
    LogHeader { run_id: "test".into(), checkpoint_step: 0, n_layers, n_experts: n, top_k: k, variant }
}

pub fn record(layer: usize, token: usize, ids: &[usize], gates: &[f32], logits: &[f32]) -> RoutingRecord {
    RoutingRecord {
        layer,
        token_position: token,
        selected_ids: ids.to_vec(),
        gate_weights: gates.to_vec(),
        full_logits: logits.to_vec(),
    }
}

fn random_row(rng: &mut Rng, layer: usize, token: usize, n: usize, k: usize) -> RoutingRecord {
    let logits: Vec<f32> = (0..n).map(|_| (rng.uniform() * 6.0 - 3.0) as f32).collect();
    let mut ids: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut ids);
    ids.truncate(k);
    let raw: Vec<f32> = (0..k).map(|_| (rng.uniform() + 0.01) as f32).collect();
    let z: f32 = raw.iter().sum();
    let gates: Vec<f32> = raw.iter().map(|g| g / z).collect();
    record(layer, token, &ids, &gates, &logits)
}

/// A log with `tokens` rows per layer and random shape.
pub fn random_log(rng: &mut Rng, tokens: usize) -> RoutingLog {
    let layers = 1 + rng.below(3);
    let n = 3 + rng.below(6);
    let k = 2 + rng.below(n.min(4) - 1);
    let variant = if rng.uniform() < 0.5 { Variant::Smoe } else { Variant::SigmaMoe };
    let rows = (0..layers).flat_map(|l| (0..tokens).map(move |t| (l, t))).collect::<Vec<_>>();
    let rows = rows.into_iter().map(|(l, t)| random_row(rng, l, t, n, k)).collect();
    RoutingLog::new(header(layers, n, k, variant), rows).unwrap()
}

/// A log over the same keys where each row is resampled with probability `p`.
pub fn resample(rng: &mut Rng, log: &RoutingLog, p: f64) -> RoutingLog {
    let (n, k) = (log.header.n_experts, log.header.top_k);
    let mut rows: Vec<RoutingRecord> = log
        .rows
        .iter()
        .map(|r| if rng.uniform() < p { random_row(rng, r.layer, r.token_position, n, k) } else { r.clone() })
        .collect();
    rng.shuffle(&mut rows);
    RoutingLog::new(log.header.clone(), rows).unwrap()
}

fn entropy_ratio(p: &[f64]) -> f64 {
    let z: f64 = p.iter().sum();
    let h: f64 = p.iter().map(|&x| x / z).filter(|&x| x > 0.0).map(|x| -x * x.ln()).sum();
    h / (p.len() as f64).ln()
}

fn layers_of(log: &RoutingLog) -> Vec<usize> {
    let mut v: Vec<usize> = log.rows.iter().map(|r| r.layer).collect();
    v.sort();
    v.dedup();
    v
}

pub fn eae(log: &RoutingLog) -> (Vec<f64>, f64) {
    let n = log.header.n_experts;
    let mut all = vec![0.0; n];
    let per = layers_of(log)
        .into_iter()
        .map(|l| {
            let mut c = vec![0.0; n];
            for r in &log.rows {
                if r.layer == l {
                    for &e in &r.selected_ids {
                        c[e] += 1.0;
                        all[e] += 1.0;
                    }
                }
            }
            entropy_ratio(&c)
        })
        .collect();
    (per, entropy_ratio(&all))
}

fn layer_means(log: &RoutingLog, f: impl Fn(&RoutingRecord) -> f64) -> (Vec<f64>, f64) {
    let per = layers_of(log)
        .into_iter()
        .map(|l| {
            let v: Vec<f64> = log.rows.iter().filter(|r| r.layer == l).map(&f).collect();
            v.iter().sum::<f64>() / v.len() as f64
        })
        .collect();
    let all: f64 = log.rows.iter().map(&f).sum::<f64>() / log.rows.len() as f64;
    (per, all)
}

pub fn ewa(log: &RoutingLog) -> (Vec<f64>, f64) {
    layer_means(log, |r| entropy_ratio(&r.gate_weights.iter().map(|&g| g as f64).collect::<Vec<_>>()))
}

pub fn margin(log: &RoutingLog) -> (Vec<f64>, f64) {
    let sigmoid = log.header.variant == Variant::SigmaMoe || log.header.variant == Variant::SharedV3;
    layer_means(log, |r| {
        let x: Vec<f64> = r.full_logits.iter().map(|&v| v as f64).collect();
        let mut s: Vec<f64> = if sigmoid {
            x.iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect()
        } else {
            let z: f64 = x.iter().map(|v| v.exp()).sum();
            x.iter().map(|v| v.exp() / z).collect()
        };
        s.sort_by(|a, b| b.partial_cmp(a).unwrap());
        s[0] - s[1]
    })
}

fn partner<'a>(other: &'a RoutingLog, r: &RoutingRecord) -> &'a RoutingRecord {
    other.rows.iter().find(|o| o.layer == r.layer && o.token_position == r.token_position).unwrap()
}

pub fn saturation(a: &RoutingLog, b: &RoutingLog, k: usize) -> (Vec<f64>, f64) {
    layer_means(a, |r| {
        let o = partner(b, r);
        let hits = r.selected_ids[..k].iter().filter(|e| o.selected_ids[..k].contains(e)).count();
        hits as f64 / k as f64
    })
}

pub fn ecr(a: &RoutingLog, b: &RoutingLog) -> (Vec<f64>, f64) {
    layer_means(a, |r| {
        let o = partner(b, r);
        let same = r.selected_ids.iter().all(|e| o.selected_ids.contains(e)) && r.selected_ids.len() == o.selected_ids.len();
        if same { 0.0 } else { 1.0 }
    })
}

pub fn eca(log: &RoutingLog) -> Vec<Vec<f64>> {
    let n = log.header.n_experts;
    let mut m = vec![vec![0.0; n]; n];
    for i in 0..n {
        let with_i: Vec<&RoutingRecord> = log.rows.iter().filter(|r| r.selected_ids.contains(&i)).collect();
        if with_i.is_empty() {
            continue;
        }
        for j in 0..n {
            m[i][j] = if i == j {
                1.0
            } else {
                with_i.iter().filter(|r| r.selected_ids.contains(&j)).count() as f64 / with_i.len() as f64
            };
        }
    }
    m
}

/// Worst difference per metric between the library and the loops above over
/// `trials` random log pairs. A shape mismatch counts as infinite.
pub fn worst_metric_diffs(trials: usize) -> Vec<(String, f64)> {
    use moelab::diagnostics::{eae_log, eca as eca_lib, expert_change_rate, ewa_log, router_margin, router_saturation, LayerValues};

    fn diff(got: LayerValues, want: (Vec<f64>, f64)) -> f64 {
        if got.per_layer.len() != want.0.len() {
            return f64::INFINITY;
        }
        got.per_layer.iter().zip(&want.0).map(|(g, w)| (g - w).abs()).fold((got.aggregate - want.1).abs(), f64::max)
    }

    let mut rng = Rng::new(2024);
    let mut worst = [0.0f64; 6];
    for _ in 0..trials {
        let a = random_log(&mut rng, 50);
        let b = resample(&mut rng, &a, 0.4);
        let found = [
            diff(eae_log(&a).unwrap(), eae(&a)),
            diff(ewa_log(&a).unwrap(), ewa(&a)),
            diff(router_margin(&a).unwrap(), margin(&a)),
            diff(expert_change_rate(&a, &b, false).unwrap(), ecr(&a, &b)),
            (1..=a.header.top_k)
                .map(|k| diff(router_saturation(&a, &b, k).unwrap(), saturation(&a, &b, k)))
                .fold(0.0, f64::max),
            {
                let got = eca_lib(&a, None).values;
                let want = eca(&a);
                got.iter().flatten().zip(want.iter().flatten()).map(|(g, w)| (g - w).abs()).fold(0.0, f64::max)
            },
        ];
        for (w, f) in worst.iter_mut().zip(found) {
            *w = w.max(f);
        }
    }
    ["eae", "ewa", "margin", "ecr", "saturation", "eca"].iter().map(|s| s.to_string()).zip(worst).collect()
}
