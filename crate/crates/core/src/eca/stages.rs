//! The three attention stages, each with its hand-written backward.

use crate::error::{Error, Result};
use crate::tensor::{softmax_backward, softmax_lastdim, AttentionContext, AttentionParams, LinearParams, Softmax, Tensor};

fn volume_dims(volume: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match *volume.shape() {
        [k, p, s, c] if k > 0 && s > 0 && c > 0 => Ok((k, p, s, c)),
        _ => Err(Error::shape("volume", volume.shape(), &[0, 0, 0, 0])),
    }
}

fn ray_dims(x: &Tensor) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [p, s, c] if s > 0 && c > 0 => Ok((p, s, c)),
        _ => Err(Error::shape("ray features", x.shape(), &[0, 0, 0])),
    }
}

fn block(data: &[f64], index: usize, rows: usize, c: usize) -> Tensor {
    Tensor::new(vec![rows, c], data[index * rows * c..(index + 1) * rows * c].to_vec()).expect("block")
}

#[derive(Debug, Clone)]
pub struct CrossAttentionContext {
    dims: (usize, usize, usize, usize),
    /// One per pixel; empty when K = 1.
    per_pixel: Vec<AttentionContext>,
}

impl CrossAttentionContext {
    /// `[S, (K−1)·S]` attention weights of pixel `p`.
    pub fn weights(&self, p: usize) -> Option<&Tensor> {
        self.per_pixel.get(p).map(AttentionContext::weights)
    }

    pub fn fully_masked(&self, p: usize) -> Option<&[bool]> {
        self.per_pixel.get(p).map(AttentionContext::fully_masked)
    }
}

/// Every target sample `(p, s)` queries the `(K−1)·S` reference samples of
/// the same pixel `p`; invalid references are masked. The attention output is
/// added to the target slice. `volume: [K, H·W, S, C]`, `valid: [K, H·W, S]`.
pub fn near_views_cross_attention(
    volume: &Tensor,
    valid: &[bool],
    params: &AttentionParams,
) -> Result<(Tensor, CrossAttentionContext)> {
    let dims @ (k, pixels, s, c) = volume_dims(volume)?;
    if valid.len() != k * pixels * s {
        return Err(Error::shape("cross_attention mask", volume.shape(), &[valid.len()]));
    }
    if params.q.in_dim() != c {
        return Err(Error::shape("cross_attention", volume.shape(), params.q.weight.shape()));
    }
    let target = &volume.data()[..pixels * s * c];
    let mut out = target.to_vec();
    let mut per_pixel = Vec::new();
    if k > 1 {
        let m = (k - 1) * s;
        per_pixel.reserve(pixels);
        for p in 0..pixels {
            let query = block(target, p, s, c);
            let mut keys = Vec::with_capacity(m * c);
            let mut key_valid = Vec::with_capacity(m);
            for kk in 1..k {
                let start = (kk * pixels + p) * s;
                keys.extend_from_slice(&volume.data()[start * c..(start + s) * c]);
                key_valid.extend_from_slice(&valid[start..start + s]);
            }
            let keys = Tensor::new(vec![m, c], keys)?;
            let mask: Vec<bool> = (0..s).flat_map(|_| key_valid.iter().copied()).collect();
            let (att, ctx) = params.forward(&query, &keys, Some(&mask))?;
            for (o, a) in out[p * s * c..(p + 1) * s * c].iter_mut().zip(att.data()) {
                *o += a;
            }
            per_pixel.push(ctx);
        }
    }
    Ok((Tensor::new(vec![pixels, s, c], out)?, CrossAttentionContext { dims, per_pixel }))
}

/// Returns the gradient with respect to the whole `[K, H·W, S, C]` volume.
pub fn near_views_cross_attention_backward(
    params: &AttentionParams,
    ctx: &CrossAttentionContext,
    grad_out: &Tensor,
    grads: &mut AttentionParams,
) -> Result<Tensor> {
    let (k, pixels, s, c) = ctx.dims;
    if grad_out.shape() != [pixels, s, c] {
        return Err(Error::shape("cross_attention_backward", grad_out.shape(), &[pixels, s, c]));
    }
    let mut grad = vec![0.0; k * pixels * s * c];
    grad[..pixels * s * c].copy_from_slice(grad_out.data());
    for (p, pctx) in ctx.per_pixel.iter().enumerate() {
        let g = block(grad_out.data(), p, s, c);
        let (gq, gkv) = params.backward(pctx, &g, grads)?;
        for (o, v) in grad[p * s * c..(p + 1) * s * c].iter_mut().zip(gq.data()) {
            *o += v;
        }
        for kk in 1..k {
            let start = (kk * pixels + p) * s * c;
            let src = &gkv.data()[(kk - 1) * s * c..kk * s * c];
            for (o, v) in grad[start..start + s * c].iter_mut().zip(src) {
                *o += v;
            }
        }
    }
    Tensor::new(vec![k, pixels, s, c], grad)
}

#[derive(Debug, Clone)]
pub struct RaySelfAttentionContext {
    dims: (usize, usize, usize),
    per_pixel: Vec<AttentionContext>,
}

impl RaySelfAttentionContext {
    pub fn weights(&self, p: usize) -> Option<&Tensor> {
        self.per_pixel.get(p).map(AttentionContext::weights)
    }
}

/// Self-attention across the `S` samples of each pixel's ray, added
/// residually. `x: [H·W, S, C]`.
pub fn ray_self_attention(x: &Tensor, params: &AttentionParams) -> Result<(Tensor, RaySelfAttentionContext)> {
    let dims @ (pixels, s, c) = ray_dims(x)?;
    if params.q.in_dim() != c {
        return Err(Error::shape("ray_self_attention", x.shape(), params.q.weight.shape()));
    }
    let mut out = x.data().to_vec();
    let mut per_pixel = Vec::with_capacity(pixels);
    for p in 0..pixels {
        let tokens = block(x.data(), p, s, c);
        let (att, ctx) = params.forward(&tokens, &tokens, None)?;
        for (o, a) in out[p * s * c..(p + 1) * s * c].iter_mut().zip(att.data()) {
            *o += a;
        }
        per_pixel.push(ctx);
    }
    Ok((Tensor::new(vec![pixels, s, c], out)?, RaySelfAttentionContext { dims, per_pixel }))
}

pub fn ray_self_attention_backward(
    params: &AttentionParams,
    ctx: &RaySelfAttentionContext,
    grad_out: &Tensor,
    grads: &mut AttentionParams,
) -> Result<Tensor> {
    let (pixels, s, c) = ctx.dims;
    if grad_out.shape() != [pixels, s, c] {
        return Err(Error::shape("ray_self_attention_backward", grad_out.shape(), &[pixels, s, c]));
    }
    let mut grad = grad_out.data().to_vec();
    for (p, pctx) in ctx.per_pixel.iter().enumerate() {
        let g = block(grad_out.data(), p, s, c);
        let (gq, gkv) = params.backward(pctx, &g, grads)?;
        for ((o, a), b) in grad[p * s * c..(p + 1) * s * c]
            .iter_mut()
            .zip(gq.data())
            .zip(gkv.data())
        {
            *o += a + b;
        }
    }
    Tensor::new(vec![pixels, s, c], grad)
}

#[derive(Debug, Clone)]
pub struct FusionContext {
    input: Tensor,
    softmax: Softmax,
}

impl FusionContext {
    /// `[H·W, S]` fusion weights.
    pub fn weights(&self) -> &Tensor {
        &self.softmax.weights
    }
}

/// Softmax over `S` of a scalar head, then the weighted sum of the samples.
/// `x: [H·W, S, C]` → `[H·W, C]`.
pub fn fuse_ray_to_pixel(x: &Tensor, head: &LinearParams) -> Result<(Tensor, FusionContext)> {
    let (pixels, s, c) = ray_dims(x)?;
    if head.in_dim() != c || head.out_dim() != 1 {
        return Err(Error::shape("fuse_ray_to_pixel", x.shape(), head.weight.shape()));
    }
    let logits = head.forward(x)?.reshape(&[pixels, s])?;
    let softmax = softmax_lastdim(&logits, None)?;
    let w = softmax.weights.data();
    let mut out = vec![0.0; pixels * c];
    for p in 0..pixels {
        let o = &mut out[p * c..(p + 1) * c];
        for j in 0..s {
            let a = w[p * s + j];
            for (ov, xv) in o.iter_mut().zip(&x.data()[(p * s + j) * c..(p * s + j + 1) * c]) {
                *ov += a * xv;
            }
        }
    }
    Ok((
        Tensor::new(vec![pixels, c], out)?,
        FusionContext {
            input: x.clone(),
            softmax,
        },
    ))
}

pub fn fuse_ray_to_pixel_backward(
    head: &LinearParams,
    ctx: &FusionContext,
    grad_out: &Tensor,
    grads: &mut LinearParams,
) -> Result<Tensor> {
    let (pixels, s, c) = ray_dims(&ctx.input)?;
    if grad_out.shape() != [pixels, c] {
        return Err(Error::shape("fuse_backward", grad_out.shape(), &[pixels, c]));
    }
    let x = ctx.input.data();
    let w = ctx.softmax.weights.data();
    let g = grad_out.data();
    let mut grad_w = vec![0.0; pixels * s];
    let mut grad_x = vec![0.0; pixels * s * c];
    for p in 0..pixels {
        let gp = &g[p * c..(p + 1) * c];
        for j in 0..s {
            let e = p * s + j;
            let xs = &x[e * c..(e + 1) * c];
            grad_w[e] = xs.iter().zip(gp).map(|(a, b)| a * b).sum();
            for (o, gv) in grad_x[e * c..(e + 1) * c].iter_mut().zip(gp) {
                *o = w[e] * gv;
            }
        }
    }
    let grad_logits = softmax_backward(&ctx.softmax, &Tensor::new(vec![pixels, s], grad_w)?)?
        .reshape(&[pixels, s, 1])?;
    let via_head = head.backward(&ctx.input, &grad_logits, grads)?;
    for (o, v) in grad_x.iter_mut().zip(via_head.data()) {
        *o += v;
    }
    Tensor::new(vec![pixels, s, c], grad_x)
}
