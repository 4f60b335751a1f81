//! Auxiliary router losses: switch-style load balancing and z-loss.

use serde::{Deserialize, Serialize};

use crate::numeric::tape::{logsumexp, softmax_in_place};
use crate::numeric::{Float, Tensor};
use crate::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AuxLossReport {
    pub balance_loss: f64,
    pub z_loss: f64,
    /// Fraction of token-slots routed to each expert.
    pub per_expert_load: Vec<f64>,
    /// Mean full-softmax router probability of each expert.
    pub per_expert_mean_prob: Vec<f64>,
}

/// Load fractions `f_i` over `n` experts from per-token selections.
pub fn expert_load(ids: &[Vec<usize>], n: usize) -> Result<Vec<f64>> {
    let mut f = vec![0.0f64; n];
    let mut slots = 0usize;
    for (t, sel) in ids.iter().enumerate() {
        for &e in sel {
            if e >= n {
                return Err(Error::Data(format!("token {t} selects expert {e} of {n}")));
            }
            f[e] += 1.0;
            slots += 1;
        }
    }
    if slots == 0 {
        return Err(Error::Data("no routed token-slots".into()));
    }
    f.iter_mut().for_each(|v| *v /= slots as f64);
    Ok(f)
}

/// Mean full-softmax probability per expert, `[T×N]` logits.
pub fn mean_probs<F: Float>(logits: &Tensor<F>) -> Result<Vec<f64>> {
    let (t, n) = logits.dims2()?;
    let mut p = vec![0.0f64; n];
    let mut row = vec![F::zero(); n];
    for r in 0..t {
        row.copy_from_slice(logits.row(r));
        softmax_in_place(&mut row);
        for (acc, v) in p.iter_mut().zip(&row) {
            *acc += v.as_f64();
        }
    }
    p.iter_mut().for_each(|v| *v /= t as f64);
    Ok(p)
}

/// `α·N·Σ f_i·P_i` with its components.
pub fn balance_loss<F: Float>(logits: &Tensor<F>, ids: &[Vec<usize>], alpha: f64) -> Result<AuxLossReport> {
    let (t, n) = logits.dims2()?;
    if ids.len() != t {
        return Err(Error::Dimension(format!("{} selections for {t} tokens", ids.len())));
    }
    let f = expert_load(ids, n)?;
    let p = mean_probs(logits)?;
    let dot: f64 = f.iter().zip(&p).map(|(a, b)| a * b).sum();
    Ok(AuxLossReport {
        balance_loss: alpha * n as f64 * dot,
        z_loss: 0.0,
        per_expert_load: f,
        per_expert_mean_prob: p,
    })
}

/// `coef · mean_t logsumexp(logits_t)²`.
pub fn z_loss<F: Float>(logits: &Tensor<F>, coef: f64) -> Result<f64> {
    let (t, _) = logits.dims2()?;
    let s: f64 = (0..t).map(|r| logsumexp(logits.row(r)).as_f64().powi(2)).sum();
    Ok(coef * s / t as f64)
}
