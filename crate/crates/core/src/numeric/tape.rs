//! Dynamic reverse-mode tape.
//!
//! Every forward pass records its operations on a fresh [`Tape`]; a single
//! call to [`Tape::backward`] then walks the records in reverse. The tape is
//! consumed by that call and rejects a second one.

use super::float::{gemm, Float, View};
use super::tensor::{ParamStore, Tensor};
use crate::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<F> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    Sum(Var),
    Transpose(Var),
    GatherRows { table: Var, ids: Vec<usize> },
    ScatterSum { parts: Vec<(Var, Vec<usize>)> },
    RmsNorm { x: Var, gain: Var, inv_rms: Vec<F> },
    Gelu(Var),
    Attention { q: Var, k: Var, v: Var, batch: usize, heads: usize, probs: Vec<F> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<F> },
    MaskKeep { x: Var, keep: Vec<bool> },
    Softmax(Var),
    Sigmoid(Var),
    RowNormalize { x: Var, sums: Vec<F> },
    GatherElems { x: Var, pairs: Vec<(usize, usize)>, coef: Vec<F> },
    ScaleRows { x: Var, s: Var },
    L2NormalizeRows { x: Var, eps: F, norms: Vec<F> },
    MulExp { x: Var, t: Var },
    DotConst { x: Var, w: Vec<F> },
    ZLoss { x: Var, coef: F, lse: Vec<F> },
}

struct Node<F: Float> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

pub struct Tape<F: Float = f32> {
    nodes: Vec<Node<F>>,
    grads: Vec<Option<Vec<F>>>,
    params: Vec<(String, Var)>,
    grad_enabled: bool,
    consumed: bool,
}

impl<F: Float> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub fn gelu_scalar<F: Float>(x: F) -> F {
    let c = F::of(GELU_C);
    let a = F::of(GELU_A);
    let half = F::of(0.5);
    half * x * (F::one() + (c * (x + a * x * x * x)).tanh())
}

impl<F: Float> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new(), params: Vec::new(), grad_enabled: true, consumed: false }
    }

    /// Tape that records values only; nothing on it requires a gradient.
    pub fn inference() -> Self {
        Tape { grad_enabled: false, ..Self::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, inputs: &[Var]) -> Var {
        let requires_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Record a tensor; it requires a gradient iff the tensor says so.
    pub fn leaf(&mut self, t: Tensor<F>) -> Var {
        let requires_grad = self.grad_enabled && t.requires_grad();
        let value = t.with_requires_grad(false);
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    /// Record a named parameter; its gradient is later written back by
    /// [`Tape::write_grads`].
    pub fn param(&mut self, store: &ParamStore<F>, name: &str) -> Result<Var> {
        let t = store
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))?;
        let mut value = Tensor::new(t.shape().to_vec(), t.data().to_vec())?;
        value = value.with_requires_grad(true);
        let v = self.leaf(value);
        self.params.push((name.to_string(), v));
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn scalar_value(&self, v: Var) -> F {
        self.nodes[v.0].value.data()[0]
    }

    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn dims2(&self, v: Var) -> Result<(usize, usize)> {
        self.nodes[v.0].value.dims2()
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::Dimension(format!("{what}: shapes {sa:?} and {sb:?} differ")));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a)?;
        let (k2, n) = self.dims2(b)?;
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul: inner dimensions disagree, lhs {:?} rhs {:?}",
                [m, k],
                [k2, n]
            )));
        }
        let mut out = vec![F::zero(); m * n];
        gemm(
            m,
            k,
            n,
            View::row_major(self.value(a).data(), k),
            View::row_major(self.value(b).data(), n),
            F::zero(),
            &mut out,
            n,
            1,
        );
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(t, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x + y).collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        let src = self.value(a);
        let t = Tensor::new(src.shape().to_vec(), src.data().iter().map(|&x| x * c).collect())
            .expect("shape preserved");
        self.push(t, Op::Scale(a, c), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: F = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2(a)?;
        let src = self.value(a).data();
        let mut out = vec![F::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let t = Tensor::new(vec![c, r], out)?;
        Ok(self.push(t, Op::Transpose(a), &[a]))
    }

    /// Rows `table[ids[i]]`, stacked.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (r, c) = self.dims2(table)?;
        if ids.is_empty() {
            return Err(Error::Dimension("gather_rows: empty index list".into()));
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * c);
        for (pos, &id) in ids.iter().enumerate() {
            if id >= r {
                return Err(Error::Data(format!("gather_rows: index {id} at position {pos} >= {r} rows")));
            }
            out.extend_from_slice(&src[id * c..(id + 1) * c]);
        }
        let t = Tensor::new(vec![ids.len(), c], out)?;
        Ok(self.push(t, Op::GatherRows { table, ids: ids.to_vec() }, &[table]))
    }

    /// `out[idx[r]] += part[r]` for every part, into a zero `rows × cols` matrix.
    pub fn scatter_sum(&mut self, rows: usize, cols: usize, parts: Vec<(Var, Vec<usize>)>) -> Result<Var> {
        let mut out = vec![F::zero(); rows * cols];
        for (p, idx) in &parts {
            let (pr, pc) = self.dims2(*p)?;
            if pc != cols || pr != idx.len() {
                return Err(Error::Dimension(format!(
                    "scatter_sum: part {:?} does not fit {} indices of width {cols}",
                    [pr, pc],
                    idx.len()
                )));
            }
            let src = self.value(*p).data();
            for (r, &dst) in idx.iter().enumerate() {
                if dst >= rows {
                    return Err(Error::Data(format!("scatter_sum: target row {dst} >= {rows}")));
                }
                let o = &mut out[dst * cols..(dst + 1) * cols];
                for (x, &y) in o.iter_mut().zip(&src[r * cols..(r + 1) * cols]) {
                    *x += y;
                }
            }
        }
        let inputs: Vec<Var> = parts.iter().map(|(v, _)| *v).collect();
        let t = Tensor::new(vec![rows, cols], out)?;
        Ok(self.push(t, Op::ScatterSum { parts }, &inputs))
    }

    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: F) -> Result<Var> {
        let (r, c) = self.dims2(x)?;
        if self.value(gain).numel() != c {
            return Err(Error::Dimension(format!(
                "rms_norm: gain {:?} does not match width {c}",
                self.value(gain).shape()
            )));
        }
        let xs = self.value(x).data();
        let g = self.value(gain).data();
        let mut out = vec![F::zero(); r * c];
        let mut inv_rms = Vec::with_capacity(r);
        let cf = F::of(c as f64);
        for i in 0..r {
            let row = &xs[i * c..(i + 1) * c];
            let ms = row.iter().map(|&v| v * v).sum::<F>() / cf;
            let inv = F::one() / (ms + eps).sqrt();
            inv_rms.push(inv);
            for j in 0..c {
                out[i * c + j] = row[j] * inv * g[j];
            }
        }
        let t = Tensor::new(vec![r, c], out)?;
        Ok(self.push(t, Op::RmsNorm { x, gain, inv_rms }, &[x, gain]))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let t = Tensor::new(src.shape().to_vec(), src.data().iter().map(|&v| gelu_scalar(v)).collect())
            .expect("shape preserved");
        self.push(t, Op::Gelu(x), &[x])
    }

    /// Multi-head causal self-attention over `[batch·seq × heads·d_head]`
    /// query/key/value matrices. Position `t` attends to positions `≤ t`.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, batch: usize, heads: usize) -> Result<Var> {
        self.same_shape(q, k, "attention q/k")?;
        self.same_shape(q, v, "attention q/v")?;
        let (rows, d) = self.dims2(q)?;
        if batch == 0 || rows % batch != 0 || heads == 0 || d % heads != 0 {
            return Err(Error::Dimension(format!(
                "attention: {rows}×{d} cannot split into batch {batch} and {heads} heads"
            )));
        }
        let t = rows / batch;
        let dh = d / heads;
        let scale = F::one() / F::of(dh as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![F::zero(); batch * heads * t * t];
        let mut out = vec![F::zero(); rows * d];
        for b in 0..batch {
            for h in 0..heads {
                let off = b * t * d + h * dh;
                let p = &mut probs[(b * heads + h) * t * t..(b * heads + h + 1) * t * t];
                gemm(
                    t,
                    dh,
                    t,
                    View { data: &qd[off..], rs: d, cs: 1 },
                    View { data: &kd[off..], rs: 1, cs: d },
                    F::zero(),
                    p,
                    t,
                    1,
                );
                for i in 0..t {
                    let row = &mut p[i * t..(i + 1) * t];
                    let mut mx = F::neg_infinity();
                    for s in row[..=i].iter_mut() {
                        *s *= scale;
                        mx = mx.max(*s);
                    }
                    let mut z = F::zero();
                    for s in row[..=i].iter_mut() {
                        *s = (*s - mx).exp();
                        z += *s;
                    }
                    for s in row[..=i].iter_mut() {
                        *s /= z;
                    }
                    for s in row[i + 1..].iter_mut() {
                        *s = F::zero();
                    }
                }
                gemm(
                    t,
                    t,
                    dh,
                    View::row_major(p, t),
                    View { data: &vd[off..], rs: d, cs: 1 },
                    F::zero(),
                    &mut out[off..],
                    d,
                    1,
                );
            }
        }
        let val = Tensor::new(vec![rows, d], out)?;
        Ok(self.push(val, Op::Attention { q, k, v, batch, heads, probs }, &[q, k, v]))
    }

    /// Mean token cross-entropy of `logits [B×V]` against integer targets.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, vocab) = self.dims2(logits)?;
        if targets.len() != n {
            return Err(Error::Dimension(format!("cross_entropy: {n} rows but {} targets", targets.len())));
        }
        let src = self.value(logits).data();
        let mut probs = vec![F::zero(); n * vocab];
        let mut total = F::zero();
        for (i, &tgt) in targets.iter().enumerate() {
            if tgt >= vocab {
                return Err(Error::Data(format!("cross_entropy: target {tgt} at position {i} >= vocab {vocab}")));
            }
            let row = &src[i * vocab..(i + 1) * vocab];
            let lse = logsumexp(row);
            total += lse - row[tgt];
            for j in 0..vocab {
                probs[i * vocab + j] = (row[j] - lse).exp();
            }
        }
        let loss = total / F::of(n as f64);
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, targets: targets.to_vec(), probs }, &[logits]))
    }

    /// Entries outside `keep` become `-inf`.
    pub fn mask_keep(&mut self, x: Var, keep: Vec<bool>) -> Result<Var> {
        let src = self.value(x);
        if keep.len() != src.numel() {
            return Err(Error::Dimension(format!(
                "mask_keep: mask of {} for {:?}",
                keep.len(),
                src.shape()
            )));
        }
        let data = src
            .data()
            .iter()
            .zip(&keep)
            .map(|(&v, &k)| if k { v } else { F::neg_infinity() })
            .collect();
        let t = Tensor::new(src.shape().to_vec(), data)?;
        Ok(self.push(t, Op::MaskKeep { x, keep }, &[x]))
    }

    /// Row softmax; `-inf` entries get probability exactly 0.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims2(x)?;
        let mut out = self.value(x).data().to_vec();
        for i in 0..r {
            softmax_in_place(&mut out[i * c..(i + 1) * c]);
        }
        let t = Tensor::new(vec![r, c], out)?;
        Ok(self.push(t, Op::Softmax(x), &[x]))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let t = Tensor::new(src.shape().to_vec(), src.data().iter().map(|&v| sigmoid_scalar(v)).collect())
            .expect("shape preserved");
        self.push(t, Op::Sigmoid(x), &[x])
    }

    /// Divide each row by its sum.
    pub fn row_normalize(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims2(x)?;
        let src = self.value(x).data();
        let mut out = vec![F::zero(); r * c];
        let mut sums = Vec::with_capacity(r);
        for i in 0..r {
            let s: F = src[i * c..(i + 1) * c].iter().copied().sum();
            if !(s > F::zero()) {
                return Err(Error::NonFinite(format!("row_normalize: row {i} sums to {s}")));
            }
            sums.push(s);
            for j in 0..c {
                out[i * c + j] = src[i * c + j] / s;
            }
        }
        let t = Tensor::new(vec![r, c], out)?;
        Ok(self.push(t, Op::RowNormalize { x, sums }, &[x]))
    }

    /// Column vector of `coef[p] · x[r_p, c_p]`.
    pub fn gather_elems(&mut self, x: Var, pairs: Vec<(usize, usize)>, coef: Vec<F>) -> Result<Var> {
        let (r, c) = self.dims2(x)?;
        if pairs.len() != coef.len() || pairs.is_empty() {
            return Err(Error::Dimension("gather_elems: pairs and coefficients disagree".into()));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(pairs.len());
        for (&(i, j), &w) in pairs.iter().zip(&coef) {
            if i >= r || j >= c {
                return Err(Error::Data(format!("gather_elems: ({i},{j}) outside {r}×{c}")));
            }
            out.push(w * src[i * c + j]);
        }
        let t = Tensor::new(vec![pairs.len()], out)?;
        Ok(self.push(t, Op::GatherElems { x, pairs, coef }, &[x]))
    }

    /// Row `p` of `x` scaled by `s[p]`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (r, c) = self.dims2(x)?;
        if self.value(s).numel() != r {
            return Err(Error::Dimension(format!("scale_rows: {} scales for {r} rows", self.value(s).numel())));
        }
        let xs = self.value(x).data();
        let ss = self.value(s).data();
        let mut out = vec![F::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] = xs[i * c + j] * ss[i];
            }
        }
        let t = Tensor::new(vec![r, c], out)?;
        Ok(self.push(t, Op::ScaleRows { x, s }, &[x, s]))
    }

    /// `x_row / (‖x_row‖ + eps)`.
    pub fn l2_normalize_rows(&mut self, x: Var, eps: F) -> Result<Var> {
        let (r, c) = self.dims2(x)?;
        let src = self.value(x).data();
        let mut out = vec![F::zero(); r * c];
        let mut norms = Vec::with_capacity(r);
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let n = row.iter().map(|&v| v * v).sum::<F>().sqrt();
            norms.push(n);
            for j in 0..c {
                out[i * c + j] = row[j] / (n + eps);
            }
        }
        let t = Tensor::new(vec![r, c], out)?;
        Ok(self.push(t, Op::L2NormalizeRows { x, eps, norms }, &[x]))
    }

    /// `x · exp(t)` for a scalar `t`.
    pub fn mul_exp(&mut self, x: Var, t: Var) -> Result<Var> {
        if self.value(t).numel() != 1 {
            return Err(Error::Dimension("mul_exp: exponent must be a scalar".into()));
        }
        let e = self.value(t).data()[0].exp();
        let src = self.value(x);
        let val = Tensor::new(src.shape().to_vec(), src.data().iter().map(|&v| v * e).collect())?;
        Ok(self.push(val, Op::MulExp { x, t }, &[x, t]))
    }

    /// `Σ x ⊙ w` against a constant weight buffer.
    pub fn dot_const(&mut self, x: Var, w: Vec<F>) -> Result<Var> {
        if w.len() != self.value(x).numel() {
            return Err(Error::Dimension("dot_const: weight length mismatch".into()));
        }
        let s = self.value(x).data().iter().zip(&w).map(|(&a, &b)| a * b).sum();
        Ok(self.push(Tensor::scalar(s), Op::DotConst { x, w }, &[x]))
    }

    /// `coef · mean_rows(logsumexp(row)²)`.
    pub fn z_loss(&mut self, x: Var, coef: F) -> Result<Var> {
        let (r, c) = self.dims2(x)?;
        let src = self.value(x).data();
        let lse: Vec<F> = (0..r).map(|i| logsumexp(&src[i * c..(i + 1) * c])).collect();
        let val = coef * lse.iter().map(|&l| l * l).sum::<F>() / F::of(r as f64);
        Ok(self.push(Tensor::scalar(val), Op::ZLoss { x, coef, lse }, &[x]))
    }

    /// Reverse pass from a scalar. Consumes the tape's recording.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::Tape("backward already ran on this tape; run a new forward pass".into()));
        }
        if loss.0 >= self.nodes.len() {
            return Err(Error::Tape(format!("variable {} is not on this tape", loss.0)));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Tape(format!("loss must be scalar, got shape {:?}", self.value(loss).shape())));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![F::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let (lower, upper) = grads.split_at_mut(i);
            let Some(g) = upper[0].as_deref() else { continue };
            backprop(&self.nodes, i, g, lower);
        }
        self.grads = grads;
        Ok(())
    }

    /// Copy parameter gradients into the store (zeros where none flowed).
    /// A parameter bound more than once receives the sum of its gradients.
    pub fn write_grads(&self, store: &mut ParamStore<F>) -> Result<()> {
        for (name, _) in &self.params {
            let t = store
                .get_mut(name)
                .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))?;
            let n = t.numel();
            t.set_grad(vec![F::zero(); n])?;
        }
        for (name, v) in &self.params {
            if let Some(g) = self.grad(*v) {
                let acc = store[name.as_str()].grad_mut().expect("initialised above");
                for (a, &b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
        }
        Ok(())
    }
}

pub fn logsumexp<F: Float>(row: &[F]) -> F {
    let mx = row.iter().copied().fold(F::neg_infinity(), F::max);
    if mx == F::neg_infinity() {
        return mx;
    }
    mx + row.iter().map(|&v| (v - mx).exp()).sum::<F>().ln()
}

pub fn softmax_in_place<F: Float>(row: &mut [F]) {
    let mx = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut z = F::zero();
    for v in row.iter_mut() {
        *v = if *v == F::neg_infinity() { F::zero() } else { (*v - mx).exp() };
        z += *v;
    }
    for v in row.iter_mut() {
        *v /= z;
    }
}

pub fn sigmoid_scalar<F: Float>(v: F) -> F {
    if v == F::neg_infinity() {
        F::zero()
    } else if v >= F::zero() {
        F::one() / (F::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (F::one() + e)
    }
}

fn slot<'a, F: Float>(grads: &'a mut [Option<Vec<F>>], nodes: &[Node<F>], v: Var) -> Option<&'a mut Vec<F>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![F::zero(); n]))
}

fn accumulate<F: Float>(grads: &mut [Option<Vec<F>>], nodes: &[Node<F>], v: Var, delta: &[F]) {
    if let Some(gv) = slot(grads, nodes, v) {
        for (a, &b) in gv.iter_mut().zip(delta) {
            *a += b;
        }
    }
}

fn backprop<F: Float>(nodes: &[Node<F>], i: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
    let node = &nodes[i];
    let val = |v: Var| nodes[v.0].value.data();
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = nodes[a.0].value.dims2().expect("2-D");
            let n = nodes[b.0].value.shape()[1];
            if let Some(ga) = slot(grads, nodes, *a) {
                gemm(m, n, k, View::row_major(g, n), View::transposed(val(*b), n), F::one(), ga, k, 1);
            }
            if let Some(gb) = slot(grads, nodes, *b) {
                gemm(k, m, n, View::transposed(val(*a), k), View::row_major(g, n), F::one(), gb, n, 1);
            }
        }
        Op::Add(a, b) => {
            accumulate(grads, nodes, *a, g);
            accumulate(grads, nodes, *b, g);
        }
        Op::Mul(a, b) => {
            let da: Vec<F> = g.iter().zip(val(*b)).map(|(&x, &y)| x * y).collect();
            let db: Vec<F> = g.iter().zip(val(*a)).map(|(&x, &y)| x * y).collect();
            accumulate(grads, nodes, *a, &da);
            accumulate(grads, nodes, *b, &db);
        }
        Op::Scale(a, c) => {
            if let Some(ga) = slot(grads, nodes, *a) {
                for (x, &y) in ga.iter_mut().zip(g) {
                    *x += *c * y;
                }
            }
        }
        Op::Sum(a) => {
            if let Some(ga) = slot(grads, nodes, *a) {
                for x in ga.iter_mut() {
                    *x += g[0];
                }
            }
        }
        Op::Transpose(a) => {
            let (r, c) = nodes[a.0].value.dims2().expect("2-D");
            if let Some(ga) = slot(grads, nodes, *a) {
                for ii in 0..r {
                    for j in 0..c {
                        ga[ii * c + j] += g[j * r + ii];
                    }
                }
            }
        }
        Op::GatherRows { table, ids } => {
            let c = nodes[table.0].value.shape()[1];
            if let Some(gt) = slot(grads, nodes, *table) {
                for (r, &id) in ids.iter().enumerate() {
                    for (x, &y) in gt[id * c..(id + 1) * c].iter_mut().zip(&g[r * c..(r + 1) * c]) {
                        *x += y;
                    }
                }
            }
        }
        Op::ScatterSum { parts } => {
            let c = node.value.shape()[1];
            for (p, idx) in parts {
                if let Some(gp) = slot(grads, nodes, *p) {
                    for (r, &dst) in idx.iter().enumerate() {
                        for (x, &y) in gp[r * c..(r + 1) * c].iter_mut().zip(&g[dst * c..(dst + 1) * c]) {
                            *x += y;
                        }
                    }
                }
            }
        }
        Op::RmsNorm { x, gain, inv_rms } => {
            let (r, c) = nodes[x.0].value.dims2().expect("2-D");
            let xs = val(*x);
            let gn = val(*gain);
            let cf = F::of(c as f64);
            if nodes[x.0].requires_grad {
                let mut dx = vec![F::zero(); r * c];
                for ii in 0..r {
                    let inv = inv_rms[ii];
                    let row = &xs[ii * c..(ii + 1) * c];
                    let gr = &g[ii * c..(ii + 1) * c];
                    let s: F = (0..c).map(|j| gr[j] * gn[j] * row[j]).sum();
                    let k = inv * inv * inv * s / cf;
                    for j in 0..c {
                        dx[ii * c + j] = inv * gr[j] * gn[j] - row[j] * k;
                    }
                }
                accumulate(grads, nodes, *x, &dx);
            }
            if let Some(gg) = slot(grads, nodes, *gain) {
                for ii in 0..r {
                    for j in 0..c {
                        gg[j] += g[ii * c + j] * xs[ii * c + j] * inv_rms[ii];
                    }
                }
            }
        }
        Op::Gelu(x) => {
            let c = F::of(GELU_C);
            let a = F::of(GELU_A);
            let half = F::of(0.5);
            let three = F::of(3.0);
            if let Some(gx) = slot(grads, nodes, *x) {
                for ((d, &v), &gy) in gx.iter_mut().zip(val(*x)).zip(g) {
                    let t = (c * (v + a * v * v * v)).tanh();
                    let dt = (F::one() - t * t) * c * (F::one() + three * a * v * v);
                    *d += gy * (half * (F::one() + t) + half * v * dt);
                }
            }
        }
        Op::Attention { q, k, v, batch, heads, probs } => {
            let (rows, d) = nodes[q.0].value.dims2().expect("2-D");
            let t = rows / batch;
            let dh = d / heads;
            let scale = F::one() / F::of(dh as f64).sqrt();
            let (qd, kd, vd) = (val(*q), val(*k), val(*v));
            let mut dq = vec![F::zero(); rows * d];
            let mut dk = vec![F::zero(); rows * d];
            let mut dv = vec![F::zero(); rows * d];
            let mut dp = vec![F::zero(); t * t];
            for b in 0..*batch {
                for h in 0..*heads {
                    let off = b * t * d + h * dh;
                    let p = &probs[(b * heads + h) * t * t..(b * heads + h + 1) * t * t];
                    let go = View { data: &g[off..], rs: d, cs: 1 };
                    gemm(t, dh, t, go, View { data: &vd[off..], rs: 1, cs: d }, F::zero(), &mut dp, t, 1);
                    gemm(t, t, dh, View::transposed(p, t), go, F::one(), &mut dv[off..], d, 1);
                    for ii in 0..t {
                        let pr = &p[ii * t..(ii + 1) * t];
                        let dr = &mut dp[ii * t..(ii + 1) * t];
                        let dot: F = (0..=ii).map(|j| pr[j] * dr[j]).sum();
                        for j in 0..t {
                            dr[j] = if j <= ii { pr[j] * (dr[j] - dot) * scale } else { F::zero() };
                        }
                    }
                    gemm(t, t, dh, View::row_major(&dp, t), View { data: &kd[off..], rs: d, cs: 1 }, F::one(), &mut dq[off..], d, 1);
                    gemm(t, t, dh, View::transposed(&dp, t), View { data: &qd[off..], rs: d, cs: 1 }, F::one(), &mut dk[off..], d, 1);
                }
            }
            accumulate(grads, nodes, *q, &dq);
            accumulate(grads, nodes, *k, &dk);
            accumulate(grads, nodes, *v, &dv);
        }
        Op::CrossEntropy { logits, targets, probs } => {
            let n = targets.len();
            let vocab = probs.len() / n;
            let s = g[0] / F::of(n as f64);
            if let Some(gl) = slot(grads, nodes, *logits) {
                for (r, &tgt) in targets.iter().enumerate() {
                    for j in 0..vocab {
                        gl[r * vocab + j] += s * probs[r * vocab + j];
                    }
                    gl[r * vocab + tgt] -= s;
                }
            }
        }
        Op::MaskKeep { x, keep } => {
            if let Some(gx) = slot(grads, nodes, *x) {
                for ((d, &gy), &k) in gx.iter_mut().zip(g).zip(keep) {
                    if k {
                        *d += gy;
                    }
                }
            }
        }
        Op::Softmax(x) => {
            let (r, c) = node.value.dims2().expect("2-D");
            let y = node.value.data();
            if let Some(gx) = slot(grads, nodes, *x) {
                for ii in 0..r {
                    let yr = &y[ii * c..(ii + 1) * c];
                    let gr = &g[ii * c..(ii + 1) * c];
                    let dot: F = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..c {
                        gx[ii * c + j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
        }
        Op::Sigmoid(x) => {
            let y = node.value.data();
            if let Some(gx) = slot(grads, nodes, *x) {
                for ((d, &gy), &s) in gx.iter_mut().zip(g).zip(y) {
                    *d += gy * s * (F::one() - s);
                }
            }
        }
        Op::RowNormalize { x, sums } => {
            let (r, c) = node.value.dims2().expect("2-D");
            let y = node.value.data();
            if let Some(gx) = slot(grads, nodes, *x) {
                for ii in 0..r {
                    let yr = &y[ii * c..(ii + 1) * c];
                    let gr = &g[ii * c..(ii + 1) * c];
                    let dot: F = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..c {
                        gx[ii * c + j] += (gr[j] - dot) / sums[ii];
                    }
                }
            }
        }
        Op::GatherElems { x, pairs, coef } => {
            let c = nodes[x.0].value.shape()[1];
            if let Some(gx) = slot(grads, nodes, *x) {
                for ((&(r, j), &w), &gy) in pairs.iter().zip(coef).zip(g) {
                    gx[r * c + j] += w * gy;
                }
            }
        }
        Op::ScaleRows { x, s } => {
            let (r, c) = nodes[x.0].value.dims2().expect("2-D");
            let xs = val(*x);
            let ss = val(*s);
            if let Some(gx) = slot(grads, nodes, *x) {
                for ii in 0..r {
                    for j in 0..c {
                        gx[ii * c + j] += g[ii * c + j] * ss[ii];
                    }
                }
            }
            if let Some(gs) = slot(grads, nodes, *s) {
                for ii in 0..r {
                    gs[ii] += (0..c).map(|j| g[ii * c + j] * xs[ii * c + j]).sum::<F>();
                }
            }
        }
        Op::L2NormalizeRows { x, eps, norms } => {
            let (r, c) = nodes[x.0].value.dims2().expect("2-D");
            let xs = val(*x);
            if let Some(gx) = slot(grads, nodes, *x) {
                for ii in 0..r {
                    let n = norms[ii];
                    let s = n + *eps;
                    let row = &xs[ii * c..(ii + 1) * c];
                    let gr = &g[ii * c..(ii + 1) * c];
                    let proj = if n > F::zero() {
                        row.iter().zip(gr).map(|(&a, &b)| a * b).sum::<F>() / (s * s * n)
                    } else {
                        F::zero()
                    };
                    for j in 0..c {
                        gx[ii * c + j] += gr[j] / s - row[j] * proj;
                    }
                }
            }
        }
        Op::MulExp { x, t } => {
            let e = val(*t)[0].exp();
            if let Some(gx) = slot(grads, nodes, *x) {
                for (d, &gy) in gx.iter_mut().zip(g) {
                    *d += gy * e;
                }
            }
            let y = node.value.data();
            if let Some(gt) = slot(grads, nodes, *t) {
                gt[0] += g.iter().zip(y).map(|(&a, &b)| a * b).sum::<F>();
            }
        }
        Op::DotConst { x, w } => {
            if let Some(gx) = slot(grads, nodes, *x) {
                for (d, &wi) in gx.iter_mut().zip(w) {
                    *d += g[0] * wi;
                }
            }
        }
        Op::ZLoss { x, coef, lse } => {
            let (r, c) = nodes[x.0].value.dims2().expect("2-D");
            let xs = val(*x);
            let two = F::of(2.0);
            let rf = F::of(r as f64);
            if let Some(gx) = slot(grads, nodes, *x) {
                for ii in 0..r {
                    let k = g[0] * *coef * two * lse[ii] / rf;
                    for j in 0..c {
                        gx[ii * c + j] += k * (xs[ii * c + j] - lse[ii]).exp();
                    }
                }
            }
        }
    }
}
