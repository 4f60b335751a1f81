use indexmap::IndexMap;

use super::tensor::ParamStore;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// First/second moment buffers per parameter plus the update counter.
#[derive(Clone, Debug, Default)]
pub struct OptimizerState {
    first: IndexMap<String, Vec<f32>>,
    second: IndexMap<String, Vec<f32>>,
    step: u64,
}

impl OptimizerState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros = |p: &ParamStore| p.iter().map(|(k, t)| (k.clone(), vec![0.0; t.numel()])).collect();
        OptimizerState { first: zeros(params), second: zeros(params), step: 0 }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One decoupled-weight-decay Adam update over every parameter with a gradient.
/// Nothing is modified if any gradient is non-finite.
pub fn adamw_step(params: &mut ParamStore, state: &mut OptimizerState, lr: f64, cfg: &AdamW) -> Result<()> {
    for (name, p) in params.iter() {
        if let Some(g) = p.grad() {
            if let Some(pos) = g.iter().position(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of `{name}` is non-finite at element {pos}")));
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (name, p) in params.iter_mut() {
        let Some(g) = p.grad().map(<[f32]>::to_vec) else { continue };
        let m = state.first.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
        let v = state.second.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
        for (i, w) in p.data_mut().iter_mut().enumerate() {
            let gi = g[i] as f64;
            let mi = cfg.beta1 * m[i] as f64 + (1.0 - cfg.beta1) * gi;
            let vi = cfg.beta2 * v[i] as f64 + (1.0 - cfg.beta2) * gi * gi;
            m[i] = mi as f32;
            v[i] = vi as f32;
            let update = (mi / bc1) / ((vi / bc2).sqrt() + cfg.eps) + cfg.weight_decay * *w as f64;
            *w = (*w as f64 - lr * update) as f32;
        }
    }
    Ok(())
}

/// Global L2 norm of all gradients (absent gradients count as zero).
pub fn grad_norm(params: &ParamStore) -> f64 {
    params
        .values()
        .filter_map(|p| p.grad())
        .flat_map(|g| g.iter())
        .map(|&x| (x as f64) * (x as f64))
        .sum::<f64>()
        .sqrt()
}

/// Scale all gradients by `max_norm / norm` when the global norm exceeds
/// `max_norm`; returns the pre-clip norm.
pub fn clip_grad_norm(params: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = grad_norm(params);
    if norm > max_norm && norm > 0.0 {
        let s = (max_norm / norm) as f32;
        for p in params.values_mut() {
            if let Some(g) = p.grad_mut() {
                g.iter_mut().for_each(|x| *x *= s);
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::Tensor;

    fn store(vals: &[(&str, Vec<f32>, Vec<f32>)]) -> ParamStore {
        vals.iter()
            .map(|(n, v, g)| {
                let mut t = Tensor::new(vec![v.len()], v.clone()).unwrap();
                t.set_grad(g.clone()).unwrap();
                (n.to_string(), t)
            })
            .collect()
    }

    #[test]
    fn zero_grad_zero_decay_is_identity() {
        let mut p = store(&[("w", vec![0.3, -1.2], vec![0.0, 0.0])]);
        let mut st = OptimizerState::new(&p);
        let cfg = AdamW { weight_decay: 0.0, ..AdamW::default() };
        adamw_step(&mut p, &mut st, 1e-2, &cfg).unwrap();
        assert_eq!(p["w"].data(), &[0.3, -1.2]);
        assert_eq!(st.step(), 1);
    }

    #[test]
    fn single_step_closed_form() {
        // First bias-corrected step: m̂ = g, v̂ = g², so the update is
        // lr · (g/(|g|+eps) + wd·p0).
        let (p0, lr, wd) = (0.5f64, 1e-3f64, 0.01f64);
        let mut p = store(&[("w", vec![p0 as f32], vec![1.0])]);
        let mut st = OptimizerState::new(&p);
        adamw_step(&mut p, &mut st, lr, &AdamW::default()).unwrap();
        let expected = p0 - lr * (1.0 / (1.0 + 1e-8) + wd * p0);
        assert!((p["w"].data()[0] as f64 - expected).abs() < 1e-7);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = store(&[("ok", vec![1.0], vec![0.1]), ("bad", vec![1.0], vec![f32::NAN])]);
        let mut st = OptimizerState::new(&p);
        let err = adamw_step(&mut p, &mut st, 1e-3, &AdamW::default()).unwrap_err();
        assert!(err.to_string().contains("`bad`"));
        assert_eq!(p["ok"].data(), &[1.0]);
        assert_eq!(st.step(), 0);
    }

    #[test]
    fn identical_sets_stay_identical() {
        let mk = || store(&[("a", vec![0.1, 0.2, 0.3], vec![0.5, -0.25, 1.0])]);
        let (mut p, mut q) = (mk(), mk());
        let (mut sp, mut sq) = (OptimizerState::new(&p), OptimizerState::new(&q));
        for _ in 0..3 {
            adamw_step(&mut p, &mut sp, 1e-2, &AdamW::default()).unwrap();
            adamw_step(&mut q, &mut sq, 1e-2, &AdamW::default()).unwrap();
        }
        assert_eq!(p["a"].data(), q["a"].data());
    }

    #[test]
    fn clipping_examples() {
        let mut small = store(&[("w", vec![0.0, 0.0], vec![0.03, 0.04])]);
        let n = clip_grad_norm(&mut small, 0.1);
        assert!((n - 0.05).abs() < 1e-7);
        assert_eq!(small["w"].grad().unwrap(), &[0.03, 0.04]);
        let mut big = store(&[("w", vec![0.0, 0.0], vec![3.0, 4.0])]);
        assert!((clip_grad_norm(&mut big, 1.0) - 5.0).abs() < 1e-9);
        let g = big["w"].grad().unwrap();
        assert!((g[0] - 0.6).abs() < 1e-6 && (g[1] - 0.8).abs() < 1e-6);
    }
}
