//! Matmul, masked softmax, scaled dot-product attention and linear layers,
//! each with a hand-written backward.

use super::{DeterministicRng, Tensor};
use crate::error::{Error, Result};

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.ndim() != 2 || b.ndim() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = ad[i * k + p];
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// `a · bᵀ` without materializing the transpose.
fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.ndim() != 2 || b.ndim() != 2 || a.shape()[1] != b.shape()[1] {
        return Err(Error::shape("matmul_nt", a.shape(), b.shape()));
    }
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[0]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let ar = &a.data()[i * k..(i + 1) * k];
        for j in 0..n {
            let br = &b.data()[j * k..(j + 1) * k];
            out[i * n + j] = ar.iter().zip(br).map(|(x, y)| x * y).sum();
        }
    }
    Tensor::new(vec![m, n], out)
}

/// `aᵀ · b`.
fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.ndim() != 2 || b.ndim() != 2 || a.shape()[0] != b.shape()[0] {
        return Err(Error::shape("matmul_tn", a.shape(), b.shape()));
    }
    let (k, m, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let ar = &a.data()[p * m..(p + 1) * m];
        let br = &b.data()[p * n..(p + 1) * n];
        for (i, &av) in ar.iter().enumerate() {
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(br) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// Result of a masked softmax over the last dimension.
#[derive(Debug, Clone)]
pub struct Softmax {
    pub weights: Tensor,
    /// One flag per last-dim row; set when every entry of the row was masked.
    /// Such rows carry uniform weights.
    pub fully_masked: Vec<bool>,
}

/// Softmax over the last dimension with max subtraction. `mask` entries that
/// are `false` receive weight exactly 0.
pub fn softmax_lastdim(x: &Tensor, mask: Option<&[bool]>) -> Result<Softmax> {
    if let Some(m) = mask {
        if m.len() != x.len() {
            return Err(Error::shape("softmax_lastdim", x.shape(), &[m.len()]));
        }
    }
    let c = x.last_dim();
    let rows = x.rows();
    let mut out = vec![0.0; x.len()];
    let mut fully_masked = vec![false; rows];
    for r in 0..rows {
        let xs = &x.data()[r * c..(r + 1) * c];
        let ms = mask.map(|m| &m[r * c..(r + 1) * c]);
        let keep = |j: usize| ms.is_none_or(|m| m[j]);
        let mut max = f64::NEG_INFINITY;
        for (j, &v) in xs.iter().enumerate() {
            if keep(j) && v > max {
                max = v;
            }
        }
        let o = &mut out[r * c..(r + 1) * c];
        if max == f64::NEG_INFINITY {
            fully_masked[r] = true;
            o.fill(1.0 / c as f64);
            continue;
        }
        let mut total = 0.0;
        for (j, &v) in xs.iter().enumerate() {
            if keep(j) {
                o[j] = (v - max).exp();
                total += o[j];
            }
        }
        for w in o.iter_mut() {
            *w /= total;
        }
    }
    Ok(Softmax {
        weights: Tensor::new(x.shape().to_vec(), out)?,
        fully_masked,
    })
}

/// VJP of the softmax: `dx = w ⊙ (dw − ⟨dw, w⟩)` per row. Fully-masked rows
/// are constant in `x` and get zero gradient.
pub fn softmax_backward(sm: &Softmax, grad_weights: &Tensor) -> Result<Tensor> {
    let w = &sm.weights;
    if w.shape() != grad_weights.shape() {
        return Err(Error::shape("softmax_backward", w.shape(), grad_weights.shape()));
    }
    let c = w.last_dim();
    let mut out = vec![0.0; w.len()];
    for r in 0..w.rows() {
        if sm.fully_masked[r] {
            continue;
        }
        let ws = &w.data()[r * c..(r + 1) * c];
        let gs = &grad_weights.data()[r * c..(r + 1) * c];
        let inner: f64 = ws.iter().zip(gs).map(|(a, b)| a * b).sum();
        for j in 0..c {
            out[r * c + j] = ws[j] * (gs[j] - inner);
        }
    }
    Tensor::new(w.shape().to_vec(), out)
}

#[derive(Debug, Clone)]
pub struct AttentionOutput {
    pub out: Tensor,
    pub softmax: Softmax,
}

impl AttentionOutput {
    pub fn weights(&self) -> &Tensor {
        &self.softmax.weights
    }
}

/// `softmax(q kᵀ / √d, mask) · v` for `q: [Lq, d]`, `k: [Lk, d]`, `v: [Lk, dv]`.
pub fn scaled_dot_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    mask: Option<&[bool]>,
) -> Result<AttentionOutput> {
    if q.ndim() != 2 || k.ndim() != 2 || v.ndim() != 2 {
        return Err(Error::shape("scaled_dot_attention", q.shape(), k.shape()));
    }
    if q.shape()[1] != k.shape()[1] || q.shape()[1] == 0 {
        return Err(Error::shape("scaled_dot_attention", q.shape(), k.shape()));
    }
    if k.shape()[0] != v.shape()[0] {
        return Err(Error::shape("scaled_dot_attention", k.shape(), v.shape()));
    }
    let scale = 1.0 / (q.shape()[1] as f64).sqrt();
    let logits = matmul_nt(q, k)?.scale(scale);
    let softmax = softmax_lastdim(&logits, mask)?;
    let out = matmul(&softmax.weights, v)?;
    Ok(AttentionOutput { out, softmax })
}

/// Gradients of [`scaled_dot_attention`] with respect to `(q, k, v)`.
pub fn attention_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    softmax: &Softmax,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let w = &softmax.weights;
    let grad_v = matmul_tn(w, grad_out)?;
    let grad_w = matmul_nt(grad_out, v)?;
    let scale = 1.0 / (q.shape()[1] as f64).sqrt();
    let grad_logits = softmax_backward(softmax, &grad_w)?.scale(scale);
    let grad_q = matmul(&grad_logits, k)?;
    let grad_k = matmul_tn(&grad_logits, q)?;
    Ok((grad_q, grad_k, grad_v))
}

/// Affine layer `y = x Wᵀ + b` with `weight: [out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LinearParams {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[out_dim, in_dim]),
            bias: Tensor::zeros(&[out_dim]),
        }
    }

    /// Glorot-uniform weight in `±sqrt(6 / (fan_in + fan_out))`, zero bias.
    pub fn glorot(in_dim: usize, out_dim: usize, rng: &mut DeterministicRng) -> Self {
        let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
        Self {
            weight: Tensor::uniform(&[out_dim, in_dim], bound, rng),
            bias: Tensor::zeros(&[out_dim]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.in_dim(), self.out_dim())
    }

    /// Applies the layer to every row of `x` (`[..., in]` → `[..., out]`).
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if x.last_dim() != self.in_dim() || x.ndim() == 0 {
            return Err(Error::shape("linear", x.shape(), self.weight.shape()));
        }
        let (i_dim, o_dim) = (self.in_dim(), self.out_dim());
        let w = self.weight.data();
        let b = self.bias.data();
        let rows = x.rows();
        let mut out = vec![0.0; rows * o_dim];
        for r in 0..rows {
            let xr = &x.data()[r * i_dim..(r + 1) * i_dim];
            for o in 0..o_dim {
                let wr = &w[o * i_dim..(o + 1) * i_dim];
                out[r * o_dim + o] = b[o] + xr.iter().zip(wr).map(|(a, c)| a * c).sum::<f64>();
            }
        }
        let mut shape = x.shape().to_vec();
        *shape.last_mut().expect("non-scalar") = o_dim;
        Tensor::new(shape, out)
    }

    /// Accumulates parameter gradients into `grads` and returns `dL/dx`.
    pub fn backward(&self, x: &Tensor, grad_out: &Tensor, grads: &mut LinearParams) -> Result<Tensor> {
        let (i_dim, o_dim) = (self.in_dim(), self.out_dim());
        if grad_out.last_dim() != o_dim || x.rows() != grad_out.rows() || x.last_dim() != i_dim {
            return Err(Error::shape("linear_backward", x.shape(), grad_out.shape()));
        }
        let rows = x.rows();
        let w = self.weight.data();
        let mut grad_x = vec![0.0; rows * i_dim];
        let gw = grads.weight.data_mut();
        for r in 0..rows {
            let xr = &x.data()[r * i_dim..(r + 1) * i_dim];
            let gr = &grad_out.data()[r * o_dim..(r + 1) * o_dim];
            let gx = &mut grad_x[r * i_dim..(r + 1) * i_dim];
            for (o, &g) in gr.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                let wr = &w[o * i_dim..(o + 1) * i_dim];
                let gwr = &mut gw[o * i_dim..(o + 1) * i_dim];
                for i in 0..i_dim {
                    gx[i] += g * wr[i];
                    gwr[i] += g * xr[i];
                }
            }
        }
        let gb = grads.bias.data_mut();
        for r in 0..rows {
            for (o, b) in gb.iter_mut().enumerate() {
                *b += grad_out.data()[r * o_dim + o];
            }
        }
        Tensor::new(x.shape().to_vec(), grad_x)
    }

    /// Input half of [`backward`](Self::backward), for frozen layers.
    pub fn backward_input(&self, grad_out: &Tensor) -> Result<Tensor> {
        let (i_dim, o_dim) = (self.in_dim(), self.out_dim());
        if grad_out.last_dim() != o_dim || grad_out.ndim() == 0 {
            return Err(Error::shape("linear_backward", grad_out.shape(), self.weight.shape()));
        }
        let w = self.weight.data();
        let rows = grad_out.rows();
        let mut grad_x = vec![0.0; rows * i_dim];
        for r in 0..rows {
            let gx = &mut grad_x[r * i_dim..(r + 1) * i_dim];
            for (o, &g) in grad_out.row(r).iter().enumerate() {
                for (x, &wv) in gx.iter_mut().zip(&w[o * i_dim..(o + 1) * i_dim]) {
                    *x += g * wv;
                }
            }
        }
        let mut shape = grad_out.shape().to_vec();
        *shape.last_mut().expect("non-scalar") = i_dim;
        Tensor::new(shape, grad_x)
    }

    /// Parameter half of [`backward`](Self::backward), for inputs that need
    /// no gradient.
    pub fn backward_params(&self, x: &Tensor, grad_out: &Tensor, grads: &mut LinearParams) -> Result<()> {
        let (i_dim, o_dim) = (self.in_dim(), self.out_dim());
        if grad_out.last_dim() != o_dim || x.rows() != grad_out.rows() || x.last_dim() != i_dim {
            return Err(Error::shape("linear_backward", x.shape(), grad_out.shape()));
        }
        let gw = grads.weight.data_mut();
        for r in 0..x.rows() {
            let xr = &x.data()[r * i_dim..(r + 1) * i_dim];
            let gr = &grad_out.data()[r * o_dim..(r + 1) * o_dim];
            for (o, &g) in gr.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                for (w, &xv) in gw[o * i_dim..(o + 1) * i_dim].iter_mut().zip(xr) {
                    *w += g * xv;
                }
            }
        }
        let gb = grads.bias.data_mut();
        for r in 0..x.rows() {
            for (o, b) in gb.iter_mut().enumerate() {
                *b += grad_out.data()[r * o_dim + o];
            }
        }
        Ok(())
    }

    pub fn is_zero(&self) -> bool {
        self.weight.data().iter().all(|&w| w == 0.0) && self.bias.data().iter().all(|&b| b == 0.0)
    }
}

/// Single-head attention with query/key/value/output projections.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub q: LinearParams,
    pub k: LinearParams,
    pub v: LinearParams,
    pub out: LinearParams,
}

pub type AttentionGrads = AttentionParams;

/// Saved forward state of [`AttentionParams::forward`].
#[derive(Debug, Clone)]
pub struct AttentionContext {
    query_tokens: Tensor,
    kv_tokens: Tensor,
    q: Tensor,
    k: Tensor,
    v: Tensor,
    softmax: Softmax,
    mixed: Tensor,
}

impl AttentionContext {
    pub fn weights(&self) -> &Tensor {
        &self.softmax.weights
    }

    pub fn fully_masked(&self) -> &[bool] {
        &self.softmax.fully_masked
    }
}

impl AttentionParams {
    pub fn glorot(dim: usize, rng: &mut DeterministicRng) -> Self {
        Self {
            q: LinearParams::glorot(dim, dim, rng),
            k: LinearParams::glorot(dim, dim, rng),
            v: LinearParams::glorot(dim, dim, rng),
            out: LinearParams::glorot(dim, dim, rng),
        }
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            q: LinearParams::zeros(dim, dim),
            k: LinearParams::zeros(dim, dim),
            v: LinearParams::zeros(dim, dim),
            out: LinearParams::zeros(dim, dim),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            q: self.q.zeros_like(),
            k: self.k.zeros_like(),
            v: self.v.zeros_like(),
            out: self.out.zeros_like(),
        }
    }

    /// `out(attend(q(query), k(kv), v(kv)))`. A query row whose keys are all
    /// masked attends to its own value projection `v(query)` instead.
    /// No residual is added here.
    pub fn forward(
        &self,
        query_tokens: &Tensor,
        kv_tokens: &Tensor,
        mask: Option<&[bool]>,
    ) -> Result<(Tensor, AttentionContext)> {
        let q = self.q.forward(query_tokens)?;
        let k = self.k.forward(kv_tokens)?;
        let v = self.v.forward(kv_tokens)?;
        let att = scaled_dot_attention(&q, &k, &v, mask)?;
        let mut mixed = att.out;
        if att.softmax.fully_masked.iter().any(|&f| f) {
            let own = self.v.forward(query_tokens)?;
            for (r, &f) in att.softmax.fully_masked.iter().enumerate() {
                if f {
                    mixed.row_mut(r).copy_from_slice(own.row(r));
                }
            }
        }
        let out = self.out.forward(&mixed)?;
        Ok((
            out,
            AttentionContext {
                query_tokens: query_tokens.clone(),
                kv_tokens: kv_tokens.clone(),
                q,
                k,
                v,
                softmax: att.softmax,
                mixed,
            },
        ))
    }

    /// Returns `(dL/dquery_tokens, dL/dkv_tokens)` and accumulates parameter
    /// gradients into `grads`.
    pub fn backward(
        &self,
        ctx: &AttentionContext,
        grad_out: &Tensor,
        grads: &mut AttentionGrads,
    ) -> Result<(Tensor, Tensor)> {
        let grad_mixed = self.out.backward(&ctx.mixed, grad_out, &mut grads.out)?;
        let flags = &ctx.softmax.fully_masked;
        let mut grad_attn = grad_mixed.clone();
        let mut grad_own = Tensor::zeros(grad_mixed.shape());
        let any_masked = flags.iter().any(|&f| f);
        for (r, &f) in flags.iter().enumerate() {
            if f {
                grad_own.row_mut(r).copy_from_slice(grad_mixed.row(r));
                grad_attn.row_mut(r).fill(0.0);
            }
        }
        let (gq, gk, gv) = attention_backward(&ctx.q, &ctx.k, &ctx.v, &ctx.softmax, &grad_attn)?;
        let mut grad_query = self.q.backward(&ctx.query_tokens, &gq, &mut grads.q)?;
        if any_masked {
            let g = self.v.backward(&ctx.query_tokens, &grad_own, &mut grads.v)?;
            grad_query.add_assign(&g)?;
        }
        let mut grad_kv = self.k.backward(&ctx.kv_tokens, &gk, &mut grads.k)?;
        let g = self.v.backward(&ctx.kv_tokens, &gv, &mut grads.v)?;
        grad_kv.add_assign(&g)?;
        Ok((grad_query, grad_kv))
    }

    pub fn linears(&self) -> [&LinearParams; 4] {
        [&self.q, &self.k, &self.v, &self.out]
    }

    pub fn linears_mut(&mut self) -> [&mut LinearParams; 4] {
        [&mut self.q, &mut self.k, &mut self.v, &mut self.out]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_diff_check;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let mut rng = DeterministicRng::new(1);
        let a = Tensor::randn(&[3, 3], &mut rng);
        assert!(matmul(&Tensor::identity(3), &a).unwrap().bit_eq(&a));
        let r = matmul(&t(&[&[1.0, 2.0], &[3.0, 4.0]]), &t(&[&[1.0], &[1.0]])).unwrap();
        assert_eq!(r.data(), &[3.0, 7.0]);
        let z = matmul(&Tensor::zeros(&[2, 3]), &Tensor::randn(&[3, 4], &mut rng)).unwrap();
        assert_eq!(z.shape(), &[2, 4]);
        assert!(z.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn matmul_error_names_both_shapes() {
        let err = matmul(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("matmul"), "{msg}");
    }

    #[test]
    fn softmax_examples() {
        let s = softmax_lastdim(&Tensor::zeros(&[4]), None).unwrap();
        assert!(s.weights.data().iter().all(|&w| w == 0.25));

        let s = softmax_lastdim(&Tensor::new(vec![2], vec![1000.0, 0.0]).unwrap(), None).unwrap();
        assert_eq!(s.weights.data()[0], 1.0);
        assert!(s.weights.data()[1] < 1e-300 && s.weights.is_finite());

        let x = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let s = softmax_lastdim(&x, Some(&[true, false, true])).unwrap();
        let e1 = 1f64.exp();
        let e3 = 3f64.exp();
        let w = s.weights.data();
        assert!((w[0] - e1 / (e1 + e3)).abs() < 1e-15);
        assert_eq!(w[1], 0.0);
        assert!((w[2] - e3 / (e1 + e3)).abs() < 1e-15);
    }

    #[test]
    fn softmax_fully_masked_row_is_uniform_and_flagged() {
        let x = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let s = softmax_lastdim(&x, Some(&[false, false, true, false])).unwrap();
        assert_eq!(s.fully_masked, vec![true, false]);
        assert_eq!(&s.weights.data()[..2], &[0.5, 0.5]);
        assert_eq!(&s.weights.data()[2..], &[1.0, 0.0]);
    }

    #[test]
    fn attention_single_key_returns_value() {
        let q = t(&[&[0.3, -1.0]]);
        let k = t(&[&[2.0, 0.5]]);
        let v = t(&[&[7.0, -3.0, 1.5]]);
        let a = scaled_dot_attention(&q, &k, &v, None).unwrap();
        assert_eq!(a.weights().data(), &[1.0]);
        assert_eq!(a.out.data(), v.data());

        let g = t(&[&[0.1, 0.2, 0.3]]);
        let (gq, gk, gv) = attention_backward(&q, &k, &v, &a.softmax, &g).unwrap();
        assert_eq!(gv.data(), g.data());
        assert!(gq.data().iter().chain(gk.data()).all(|&x| x == 0.0));
    }

    #[test]
    fn attention_orthogonal_query_averages_values() {
        let q = t(&[&[1.0, 0.0]]);
        let k = t(&[&[0.0, 1.0], &[0.0, -2.0], &[0.0, 5.0]]);
        let v = t(&[&[1.0], &[2.0], &[6.0]]);
        let a = scaled_dot_attention(&q, &k, &v, None).unwrap();
        assert!((a.out.data()[0] - 3.0).abs() < 1e-15);
    }

    #[test]
    fn attention_zero_grad_out_gives_zero_grads() {
        let mut rng = DeterministicRng::new(5);
        let q = Tensor::randn(&[2, 3], &mut rng);
        let k = Tensor::randn(&[4, 3], &mut rng);
        let v = Tensor::randn(&[4, 2], &mut rng);
        let a = scaled_dot_attention(&q, &k, &v, None).unwrap();
        let (gq, gk, gv) = attention_backward(&q, &k, &v, &a.softmax, &Tensor::zeros(&[2, 2])).unwrap();
        assert!(gq.max_abs() == 0.0 && gk.max_abs() == 0.0 && gv.max_abs() == 0.0);
    }

    #[test]
    fn attention_backward_matches_finite_differences() {
        let mut rng = DeterministicRng::new(11);
        let q = Tensor::randn(&[2, 3], &mut rng);
        let k = Tensor::randn(&[3, 3], &mut rng);
        let v = Tensor::randn(&[3, 3], &mut rng);
        let mask = [true, false, true, true, true, false];
        let probe = Tensor::randn(&[2, 3], &mut rng);
        let loss = |q: &Tensor, k: &Tensor, v: &Tensor| {
            scaled_dot_attention(q, k, v, Some(&mask)).unwrap().out.dot(&probe).unwrap()
        };
        let a = scaled_dot_attention(&q, &k, &v, Some(&mask)).unwrap();
        let (gq, gk, gv) = attention_backward(&q, &k, &v, &a.softmax, &probe).unwrap();
        let h = 1e-5;
        assert!(finite_diff_check(|x| loss(x, &k, &v), &q, &gq, h).unwrap() < 1e-4);
        assert!(finite_diff_check(|x| loss(&q, x, &v), &k, &gk, h).unwrap() < 1e-4);
        assert!(finite_diff_check(|x| loss(&q, &k, x), &v, &gv, h).unwrap() < 1e-4);
    }

    #[test]
    fn attention_layer_backward_matches_finite_differences() {
        let mut rng = DeterministicRng::new(12);
        let params = AttentionParams::glorot(3, &mut rng);
        let query = Tensor::randn(&[2, 3], &mut rng);
        let kv = Tensor::randn(&[4, 3], &mut rng);
        // Row 1 fully masked exercises the own-value fallback.
        let mask = [true, false, true, true, false, false, false, false];
        let probe = Tensor::randn(&[2, 3], &mut rng);
        let loss = |p: &AttentionParams, qt: &Tensor, kt: &Tensor| {
            p.forward(qt, kt, Some(&mask)).unwrap().0.dot(&probe).unwrap()
        };
        let (_, ctx) = params.forward(&query, &kv, Some(&mask)).unwrap();
        assert_eq!(ctx.fully_masked(), &[false, true]);
        let mut grads = params.zeros_like();
        let (gq, gkv) = params.backward(&ctx, &probe, &mut grads).unwrap();
        let h = 1e-5;
        assert!(finite_diff_check(|x| loss(&params, x, &kv), &query, &gq, h).unwrap() < 1e-4);
        assert!(finite_diff_check(|x| loss(&params, &query, x), &kv, &gkv, h).unwrap() < 1e-4);
        for idx in 0..4 {
            let analytic = grads.linears()[idx].weight.clone();
            let err = finite_diff_check(
                |w| {
                    let mut p = params.clone();
                    p.linears_mut()[idx].weight = w.clone();
                    loss(&p, &query, &kv)
                },
                &params.linears()[idx].weight,
                &analytic,
                h,
            )
            .unwrap();
            assert!(err < 1e-4, "linear {idx}: {err}");
        }
    }

    #[test]
    fn linear_backward_matches_finite_differences() {
        let mut rng = DeterministicRng::new(2);
        let lin = LinearParams::glorot(4, 3, &mut rng);
        let x = Tensor::randn(&[5, 4], &mut rng);
        let probe = Tensor::randn(&[5, 3], &mut rng);
        let mut grads = lin.zeros_like();
        let gx = lin.backward(&x, &probe, &mut grads).unwrap();
        let f = |x: &Tensor| lin.forward(x).unwrap().dot(&probe).unwrap();
        assert!(finite_diff_check(f, &x, &gx, 1e-5).unwrap() < 1e-6);
        let fb = |b: &Tensor| {
            let mut l = lin.clone();
            l.bias = b.clone();
            l.forward(&x).unwrap().dot(&probe).unwrap()
        };
        assert!(finite_diff_check(fb, &lin.bias, &grads.bias, 1e-5).unwrap() < 1e-6);
        assert!(lin.backward_input(&probe).unwrap().bit_eq(&gx));
        let mut only = lin.zeros_like();
        lin.backward_params(&x, &probe, &mut only).unwrap();
        assert!(only.weight.bit_eq(&grads.weight) && only.bias.bit_eq(&grads.bias));
    }
}
