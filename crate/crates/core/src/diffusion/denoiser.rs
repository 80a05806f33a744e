//! A two-level per-view denoiser with attention blocks at the mid and up
//! stages.
//!
//! Per view `i`:
//! `e = silu(W_in z + temb[t] + W_c c_i)`, `m = silu(W_mid pool(e))`,
//! `m' = ECA_mid(m)`, `h = silu(W_up (upsample(m') + e))`, `h' = ECA_up(h)`,
//! `ε̂ = W_out h'`. Only the two attention blocks are trainable.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{relative_transform, ViewLayout};
use crate::eca::{eca_backward, eca_forward_with, init_params, EcaBlockParams, EcaConfig, EcaContext, EcaGeometry};
use crate::encoding::{harmonic_encode, HarmonicConfig};
use crate::error::{Error, Result};
use crate::tensor::{DeterministicRng, LinearParams, Tensor};

/// Frequencies used for the relative-pose part of the condition.
pub const POSE_HARMONIC: HarmonicConfig = HarmonicConfig {
    num_frequencies: 2,
    base: 1.0,
};
const POSE_VALUES: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub latent_channels: usize,
    pub channels: usize,
    pub timesteps: usize,
    /// Shared by both attention blocks; `eca.channels == channels`.
    pub eca: EcaConfig,
}

impl DenoiserConfig {
    pub fn new(latent_channels: usize, channels: usize, timesteps: usize, k: usize, s: usize) -> Self {
        Self {
            latent_channels,
            channels,
            timesteps,
            eca: EcaConfig::new(k, s, channels),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_channels == 0 || self.channels == 0 || self.timesteps == 0 {
            return Err(Error::InvalidArgument("denoiser dimensions must be positive".into()));
        }
        if self.eca.channels != self.channels {
            return Err(Error::InvalidArgument(format!(
                "attention width {} differs from denoiser width {}",
                self.eca.channels, self.channels
            )));
        }
        self.eca.validate()
    }

    pub fn cond_dim(&self) -> usize {
        ConditionEmbedding::dim(self.latent_channels)
    }
}

/// One raw condition vector per view: the harmonic code of the pose of that
/// view relative to the input view (`R` row-major, then `T`), followed by the
/// spatial mean of the input view's latent.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionEmbedding {
    /// `[N, D]`.
    pub vectors: Tensor,
}

impl ConditionEmbedding {
    pub fn dim(latent_channels: usize) -> usize {
        POSE_HARMONIC.output_dim(POSE_VALUES) + latent_channels
    }

    pub fn new(layout: &ViewLayout, input_view: usize, input_latent: &Tensor) -> Result<Self> {
        if input_view >= layout.len() {
            return Err(Error::range("input view", format!("{input_view} >= {}", layout.len())));
        }
        let c = match *input_latent.shape() {
            [_, _, c] => c,
            _ => return Err(Error::shape("condition latent", input_latent.shape(), &[0, 0, 0])),
        };
        let mut pooled = vec![0.0; c];
        for r in 0..input_latent.rows() {
            for (p, v) in pooled.iter_mut().zip(input_latent.row(r)) {
                *p += v;
            }
        }
        pooled.iter_mut().for_each(|p| *p /= input_latent.rows() as f64);
        let source = &layout.cameras[input_view].pose;
        let mut data = Vec::with_capacity(layout.len() * Self::dim(c));
        for cam in &layout.cameras {
            let rel = relative_transform(source, &cam.pose);
            let mut values = Vec::with_capacity(POSE_VALUES);
            for i in 0..3 {
                for j in 0..3 {
                    values.push(rel.rotation[(i, j)]);
                }
            }
            values.extend(rel.translation.iter());
            data.extend(harmonic_encode(&values, &POSE_HARMONIC));
            data.extend_from_slice(&pooled);
        }
        Ok(Self {
            vectors: Tensor::new(vec![layout.len(), Self::dim(c)], data)?,
        })
    }

    pub fn views(&self) -> usize {
        self.vectors.shape()[0]
    }

    /// Same vectors, reordered so that entry `i` is old entry `order[i]`.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        let rows: Vec<Vec<f64>> = order.iter().map(|&i| self.vectors.row(i).to_vec()).collect();
        Ok(Self {
            vectors: Tensor::from_rows(&rows)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyDenoiser {
    pub cfg: DenoiserConfig,
    pub input: LinearParams,
    pub cond: LinearParams,
    /// `[T + 1, C]` sinusoidal table, row `t`.
    pub time_table: Tensor,
    pub mid: LinearParams,
    pub up: LinearParams,
    pub head: LinearParams,
    pub eca_mid: EcaBlockParams,
    pub eca_up: EcaBlockParams,
}

#[derive(Debug)]
pub struct NamedParam<'a> {
    pub name: String,
    pub tensor: &'a Tensor,
    pub trainable: bool,
}

/// Gradients of the trainable tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserGrads {
    pub eca_mid: EcaBlockParams,
    pub eca_up: EcaBlockParams,
}

impl DenoiserGrads {
    pub fn zeros_like(d: &ToyDenoiser) -> Self {
        Self {
            eca_mid: d.eca_mid.zeros_like(),
            eca_up: d.eca_up.zeros_like(),
        }
    }

    pub fn axpy(&mut self, alpha: f64, other: &Self) -> Result<()> {
        self.eca_mid.axpy(alpha, &other.eca_mid)?;
        self.eca_up.axpy(alpha, &other.eca_up)
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        prefixed("eca_mid", &self.eca_mid)
            .into_iter()
            .chain(prefixed("eca_up", &self.eca_up))
            .collect()
    }
}

fn prefixed<'a>(prefix: &str, p: &'a EcaBlockParams) -> Vec<(String, &'a Tensor)> {
    p.named_tensors()
        .into_iter()
        .map(|(n, t)| (format!("{prefix}.{n}"), t))
        .collect()
}

fn time_table(timesteps: usize, channels: usize) -> Tensor {
    let half = channels / 2;
    let mut data = vec![0.0; (timesteps + 1) * channels];
    for t in 0..=timesteps {
        for j in 0..half {
            let freq = 1.0 / (timesteps as f64).powf(j as f64 / half.max(1) as f64);
            data[t * channels + j] = (t as f64 * freq).sin();
            data[t * channels + half + j] = (t as f64 * freq).cos();
        }
    }
    Tensor::new(vec![timesteps + 1, channels], data).expect("time table")
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn silu(x: &Tensor) -> Tensor {
    x.map(|v| v * sigmoid(v))
}

/// `grad ⊙ silu'(pre)`.
fn silu_backward(pre: &Tensor, grad: &Tensor) -> Result<Tensor> {
    let s: Vec<f64> = pre
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&x, &g)| {
            let sg = sigmoid(x);
            g * sg * (1.0 + x * (1.0 - sg))
        })
        .collect();
    Tensor::new(pre.shape().to_vec(), s)
}

fn hwc(x: &Tensor) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [h, w, c] => Ok((h, w, c)),
        _ => Err(Error::shape("latent", x.shape(), &[0, 0, 0])),
    }
}

fn avg_pool2(x: &Tensor) -> Result<Tensor> {
    let (h, w, c) = hwc(x)?;
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![0.0; ho * wo * c];
    for i in 0..ho {
        for j in 0..wo {
            let o = &mut out[(i * wo + j) * c..(i * wo + j + 1) * c];
            for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                let src = x.row((2 * i + di) * w + 2 * j + dj);
                for (ov, sv) in o.iter_mut().zip(src) {
                    *ov += 0.25 * sv;
                }
            }
        }
    }
    Tensor::new(vec![ho, wo, c], out)
}

fn upsample2(x: &Tensor) -> Result<Tensor> {
    let (h, w, c) = hwc(x)?;
    let mut out = vec![0.0; 4 * h * w * c];
    for i in 0..2 * h {
        for j in 0..2 * w {
            out[(i * 2 * w + j) * c..(i * 2 * w + j + 1) * c].copy_from_slice(x.row((i / 2) * w + j / 2));
        }
    }
    Tensor::new(vec![2 * h, 2 * w, c], out)
}

/// Adjoint of [`upsample2`].
fn upsample2_backward(grad: &Tensor) -> Result<Tensor> {
    let (h2, w2, c) = hwc(grad)?;
    let (h, w) = (h2 / 2, w2 / 2);
    let mut out = vec![0.0; h * w * c];
    for i in 0..h2 {
        for j in 0..w2 {
            let o = &mut out[((i / 2) * w + j / 2) * c..((i / 2) * w + j / 2 + 1) * c];
            for (ov, gv) in o.iter_mut().zip(grad.row(i * w2 + j)) {
                *ov += gv;
            }
        }
    }
    Tensor::new(vec![h, w, c], out)
}

/// Per-target sampling geometry at both attention resolutions.
#[derive(Debug, Clone)]
pub struct DenoiserGeometry {
    pub height: usize,
    pub width: usize,
    pub mid: Vec<Arc<EcaGeometry>>,
    pub up: Vec<Arc<EcaGeometry>>,
}

impl DenoiserGeometry {
    pub fn views(&self) -> usize {
        self.up.len()
    }
}

#[derive(Debug, Clone)]
pub struct DenoiserContext {
    pre_up: Vec<Tensor>,
    mid: Vec<EcaContext>,
    up: Vec<EcaContext>,
}

fn eca_all(geometry: &[Arc<EcaGeometry>], maps: &[Tensor], params: &EcaBlockParams) -> Result<(Vec<Tensor>, Vec<EcaContext>)> {
    let results: Vec<(Tensor, EcaContext)> = geometry
        .par_iter()
        .map(|g| eca_forward_with(g, maps, params))
        .collect::<Result<_>>()?;
    Ok(results.into_iter().unzip())
}

/// Backward through one attention level for all targets; parameter and map
/// gradients are summed sequentially in target order.
fn eca_all_backward(ctxs: &[EcaContext], params: &EcaBlockParams, grads_out: &[Tensor], into: &mut EcaBlockParams) -> Result<Vec<Tensor>> {
    let per_target: Vec<_> = ctxs
        .par_iter()
        .zip(grads_out)
        .map(|(ctx, g)| eca_backward(ctx, params, g))
        .collect::<Result<_>>()?;
    let mut maps: Vec<Tensor> = grads_out.iter().map(|g| Tensor::zeros(g.shape())).collect();
    for g in per_target {
        into.add_assign(&g.params)?;
        for (m, gm) in maps.iter_mut().zip(&g.maps) {
            m.add_assign(gm)?;
        }
    }
    Ok(maps)
}

impl ToyDenoiser {
    /// Glorot-initialized frozen base and freshly initialized attention blocks.
    pub fn new(cfg: DenoiserConfig, rng: &mut DeterministicRng) -> Result<Self> {
        cfg.validate()?;
        let (cl, c) = (cfg.latent_channels, cfg.channels);
        let mut base = rng.fork(1);
        let mut attn = rng.fork(2);
        Ok(Self {
            input: LinearParams::glorot(cl, c, &mut base),
            cond: LinearParams::glorot(cfg.cond_dim(), c, &mut base),
            time_table: time_table(cfg.timesteps, c),
            mid: LinearParams::glorot(c, c, &mut base),
            up: LinearParams::glorot(c, c, &mut base),
            head: LinearParams::glorot(c, cl, &mut base),
            eca_mid: init_params(&mut attn, &cfg.eca)?,
            eca_up: init_params(&mut attn, &cfg.eca)?,
            cfg,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    pub fn named_params(&self) -> Vec<NamedParam<'_>> {
        let frozen = |name: &str, t| NamedParam {
            name: name.into(),
            tensor: t,
            trainable: false,
        };
        let mut out = vec![
            frozen("input.weight", &self.input.weight),
            frozen("input.bias", &self.input.bias),
            frozen("cond.weight", &self.cond.weight),
            frozen("cond.bias", &self.cond.bias),
            frozen("time_table", &self.time_table),
            frozen("mid.weight", &self.mid.weight),
            frozen("mid.bias", &self.mid.bias),
            frozen("up.weight", &self.up.weight),
            frozen("up.bias", &self.up.bias),
            frozen("head.weight", &self.head.weight),
            frozen("head.bias", &self.head.bias),
        ];
        for (name, tensor) in prefixed("eca_mid", &self.eca_mid).into_iter().chain(prefixed("eca_up", &self.eca_up)) {
            out.push(NamedParam {
                name,
                tensor,
                trainable: true,
            });
        }
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("input.weight".into(), &mut self.input.weight),
            ("input.bias".into(), &mut self.input.bias),
            ("cond.weight".into(), &mut self.cond.weight),
            ("cond.bias".into(), &mut self.cond.bias),
            ("time_table".into(), &mut self.time_table),
            ("mid.weight".into(), &mut self.mid.weight),
            ("mid.bias".into(), &mut self.mid.bias),
            ("up.weight".into(), &mut self.up.weight),
            ("up.bias".into(), &mut self.up.bias),
            ("head.weight".into(), &mut self.head.weight),
            ("head.bias".into(), &mut self.head.bias),
        ];
        for (n, t) in self.eca_mid.named_tensors_mut() {
            out.push((format!("eca_mid.{n}"), t));
        }
        for (n, t) in self.eca_up.named_tensors_mut() {
            out.push((format!("eca_up.{n}"), t));
        }
        out
    }

    /// Exact bit patterns of every frozen tensor, in a fixed order.
    pub fn frozen_bytes(&self) -> Vec<u8> {
        self.named_params()
            .iter()
            .filter(|p| !p.trainable)
            .flat_map(|p| p.tensor.data().iter().flat_map(|v| v.to_le_bytes()))
            .collect()
    }

    /// Sampling geometry for `layout` at latent resolution `height × width`
    /// (both even).
    pub fn bind(&self, layout: &ViewLayout, height: usize, width: usize) -> Result<DenoiserGeometry> {
        if height < 2 || width < 2 || height % 2 != 0 || width % 2 != 0 {
            return Err(Error::InvalidArgument(format!("latent size {height}x{width} must be even")));
        }
        let mut cfg = self.cfg.eca;
        cfg.k = cfg.k.min(layout.len());
        let build = |h, w| -> Result<Vec<Arc<EcaGeometry>>> {
            (0..layout.len())
                .into_par_iter()
                .map(|t| EcaGeometry::new(layout, t, h, w, &cfg).map(Arc::new))
                .collect()
        };
        Ok(DenoiserGeometry {
            height,
            width,
            mid: build(height / 2, width / 2)?,
            up: build(height, width)?,
        })
    }

    pub fn forward(
        &self,
        geometry: &DenoiserGeometry,
        z_t: &[Tensor],
        t: usize,
        cond: &ConditionEmbedding,
    ) -> Result<(Vec<Tensor>, DenoiserContext)> {
        let n = geometry.views();
        if z_t.len() != n || cond.views() != n {
            return Err(Error::InvalidArgument(format!(
                "{} latents and {} conditions for {n} views",
                z_t.len(),
                cond.views()
            )));
        }
        if t > self.cfg.timesteps {
            return Err(Error::range("timestep", format!("{t} > {}", self.cfg.timesteps)));
        }
        let shape = [geometry.height, geometry.width, self.cfg.latent_channels];
        if let Some(bad) = z_t.iter().find(|z| z.shape() != shape) {
            return Err(Error::shape("denoiser input", bad.shape(), &shape));
        }
        let cond_proj = self.cond.forward(&cond.vectors)?;
        let temb = self.time_table.row(t);
        let encoded: Vec<(Tensor, Tensor)> = z_t
            .par_iter()
            .enumerate()
            .map(|(i, z)| -> Result<(Tensor, Tensor)> {
                let mut pre = self.input.forward(z)?;
                let c = pre.last_dim();
                for r in 0..pre.rows() {
                    for ((v, a), b) in pre.row_mut(r).iter_mut().zip(temb).zip(cond_proj.row(i)) {
                        *v += a + b;
                    }
                }
                debug_assert_eq!(c, self.cfg.channels);
                let e = silu(&pre);
                let m = silu(&self.mid.forward(&avg_pool2(&e)?)?);
                Ok((e, m))
            })
            .collect::<Result<_>>()?;
        let (skips, mids): (Vec<Tensor>, Vec<Tensor>) = encoded.into_iter().unzip();
        let (mids, mid_ctx) = eca_all(&geometry.mid, &mids, &self.eca_mid)?;
        let decoded: Vec<(Tensor, Tensor)> = mids
            .par_iter()
            .zip(&skips)
            .map(|(m, e)| -> Result<(Tensor, Tensor)> {
                let pre = self.up.forward(&upsample2(m)?.add(e)?)?;
                let h = silu(&pre);
                Ok((pre, h))
            })
            .collect::<Result<_>>()?;
        let (pre_up, ups): (Vec<Tensor>, Vec<Tensor>) = decoded.into_iter().unzip();
        let (ups, up_ctx) = eca_all(&geometry.up, &ups, &self.eca_up)?;
        let out = ups.par_iter().map(|h| self.head.forward(h)).collect::<Result<Vec<_>>>()?;
        Ok((
            out,
            DenoiserContext {
                pre_up,
                mid: mid_ctx,
                up: up_ctx,
            },
        ))
    }

    /// Gradients of the trainable tensors given `dL/dε̂` per view.
    pub fn backward(&self, ctx: &DenoiserContext, grad_out: &[Tensor]) -> Result<DenoiserGrads> {
        if grad_out.len() != ctx.up.len() {
            return Err(Error::InvalidArgument("one output gradient per view required".into()));
        }
        let mut grads = DenoiserGrads::zeros_like(self);
        let grad_h = grad_out.par_iter().map(|g| self.head.backward_input(g)).collect::<Result<Vec<_>>>()?;
        let grad_h = eca_all_backward(&ctx.up, &self.eca_up, &grad_h, &mut grads.eca_up)?;
        let grad_mid = grad_h
            .par_iter()
            .zip(&ctx.pre_up)
            .map(|(g, pre)| upsample2_backward(&self.up.backward_input(&silu_backward(pre, g)?)?))
            .collect::<Result<Vec<_>>>()?;
        eca_all_backward(&ctx.mid, &self.eca_mid, &grad_mid, &mut grads.eca_mid)?;
        Ok(grads)
    }

    pub fn apply_update(&mut self, alpha: f64, step: &DenoiserGrads) -> Result<()> {
        self.eca_mid.axpy(alpha, &step.eca_mid)?;
        self.eca_up.axpy(alpha, &step.eca_up)
    }
}
