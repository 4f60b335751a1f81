//! Tape-free tensor functions shared by routers, losses and diagnostics.

use serde::{Deserialize, Serialize};

use super::float::{gemm, Float, View};
use super::tape::{logsumexp, sigmoid_scalar, softmax_in_place};
use super::tensor::Tensor;
use crate::{Error, Result};

pub fn matmul<F: Float>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::Dimension(format!(
            "matmul: inner dimensions disagree, lhs {:?} rhs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![F::zero(); m * n];
    gemm(m, k, n, View::row_major(a.data(), k), View::row_major(b.data(), n), F::zero(), &mut out, n, 1);
    Tensor::new(vec![m, n], out)
}

/// Router scoring function.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    Softmax,
    Sigmoid,
}

/// Apply the scoring function along `axis`. `-inf` entries score 0 under both.
pub fn score_activation<F: Float>(x: &Tensor<F>, kind: ScoreKind, axis: usize) -> Result<Tensor<F>> {
    let shape = x.shape().to_vec();
    if axis >= shape.len() {
        return Err(Error::Dimension(format!("axis {axis} invalid for shape {shape:?}")));
    }
    let mut out = x.data().to_vec();
    match kind {
        ScoreKind::Sigmoid => out.iter_mut().for_each(|v| *v = sigmoid_scalar(*v)),
        ScoreKind::Softmax => {
            let len = shape[axis];
            let inner: usize = shape[axis + 1..].iter().product();
            let outer: usize = shape[..axis].iter().product();
            let mut lane = vec![F::zero(); len];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| o * len * inner + j * inner + i;
                    for (j, l) in lane.iter_mut().enumerate() {
                        *l = out[at(j)];
                    }
                    softmax_in_place(&mut lane);
                    for (j, l) in lane.iter().enumerate() {
                        out[at(j)] = *l;
                    }
                }
            }
        }
    }
    Tensor::new(shape, out)
}

/// Logits with everything outside the top-k set to `-inf`.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedLogits<F: Float = f32> {
    pub masked: Vec<F>,
    /// Kept positions, by descending logit then ascending index.
    pub indices: Vec<usize>,
}

/// Descending-logit ranking of all positions; ties go to the lower index.
pub fn rank_desc<F: Float>(logits: &[F]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..logits.len()).collect();
    idx.sort_by(|&a, &b| {
        logits[b]
            .partial_cmp(&logits[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx
}

pub fn topk_mask<F: Float>(logits: &[F], k: usize) -> Result<MaskedLogits<F>> {
    if k == 0 || k > logits.len() {
        return Err(Error::Config(format!("top-k with k={k} over {} entries", logits.len())));
    }
    let mut indices = rank_desc(logits);
    indices.truncate(k);
    let mut masked = vec![F::neg_infinity(); logits.len()];
    for &i in &indices {
        masked[i] = logits[i];
    }
    Ok(MaskedLogits { masked, indices })
}

/// Mean of `-log softmax(row)[target]` over rows.
pub fn cross_entropy<F: Float>(logits: &Tensor<F>, targets: &[usize]) -> Result<F> {
    let (n, v) = logits.dims2()?;
    if targets.len() != n {
        return Err(Error::Dimension(format!("{n} rows but {} targets", targets.len())));
    }
    let mut total = F::zero();
    for (i, &t) in targets.iter().enumerate() {
        if t >= v {
            return Err(Error::Data(format!("target {t} at position {i} outside vocabulary of {v}")));
        }
        let row = logits.row(i);
        total += logsumexp(row) - row[t];
    }
    Ok(total / F::of(n as f64))
}
