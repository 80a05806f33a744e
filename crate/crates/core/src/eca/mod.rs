//! The epipolar-constrained attention block.
//!
//! For one target view the block gathers a `[K, H·W, S, C]` volume along
//! every target ray, injects ray encodings, lets each target sample attend to
//! the reference samples of the same ray, runs self-attention along the ray,
//! fuses the ray back to one feature per pixel and adds a zero-initialized
//! projection of that feature to the target map.

mod block;
pub mod checkpoint;
pub mod reference;
mod stages;

use serde::{Deserialize, Serialize};

pub use block::{
    eca_backward, eca_backward_into, eca_forward, eca_forward_with, EcaContext, EcaGeometry,
    EcaGradients,
};
pub use stages::{
    fuse_ray_to_pixel, fuse_ray_to_pixel_backward, near_views_cross_attention,
    near_views_cross_attention_backward, ray_self_attention, ray_self_attention_backward,
    CrossAttentionContext, FusionContext, RaySelfAttentionContext,
};

use crate::encoding::{HarmonicConfig, PLUCKER_DIM};
use crate::error::{Error, Result};
use crate::tensor::{AttentionParams, DeterministicRng, LinearParams, Tensor};

/// Defaults match the unit-sphere scenes viewed from radius 1.8.
pub const DEFAULT_NEAR: f64 = 0.8;
pub const DEFAULT_FAR: f64 = 2.8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EcaConfig {
    /// Views per volume, target included.
    pub k: usize,
    /// Samples per ray.
    pub s: usize,
    pub channels: usize,
    pub near: f64,
    pub far: f64,
    pub harmonic: HarmonicConfig,
    /// Adds a projected harmonic code of the normalized sample depth to the
    /// target slice of the volume, so target samples along one ray differ.
    pub depth_encoding: bool,
}

impl EcaConfig {
    pub fn new(k: usize, s: usize, channels: usize) -> Self {
        Self {
            k,
            s,
            channels,
            near: DEFAULT_NEAR,
            far: DEFAULT_FAR,
            harmonic: HarmonicConfig::default(),
            depth_encoding: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.s == 0 || self.channels == 0 {
            return Err(Error::InvalidArgument(format!(
                "K, S and C must be at least 1 (got K={}, S={}, C={})",
                self.k, self.s, self.channels
            )));
        }
        if !(self.near > 0.0 && self.far > self.near && self.far.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "need 0 < near < far (got {}, {})",
                self.near, self.far
            )));
        }
        if self.harmonic.num_frequencies == 0 {
            return Err(Error::InvalidArgument("harmonic encoding needs at least one frequency".into()));
        }
        Ok(())
    }

    pub fn ray_encoding_dim(&self) -> usize {
        self.harmonic.output_dim(PLUCKER_DIM)
    }

    pub fn depth_encoding_dim(&self) -> usize {
        self.harmonic.output_dim(1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EcaBlockParams {
    pub cross: AttentionParams,
    pub ray: AttentionParams,
    /// Harmonic Plücker code → C.
    pub ray_proj: LinearParams,
    /// Harmonic depth code → C.
    pub depth_proj: LinearParams,
    /// C → 1 fusion logit.
    pub fusion: LinearParams,
    /// Zero at initialization.
    pub output: LinearParams,
}

pub type EcaParamGrads = EcaBlockParams;

pub fn init_params(rng: &mut DeterministicRng, cfg: &EcaConfig) -> Result<EcaBlockParams> {
    cfg.validate()?;
    let c = cfg.channels;
    Ok(EcaBlockParams {
        cross: AttentionParams::glorot(c, rng),
        ray: AttentionParams::glorot(c, rng),
        ray_proj: LinearParams::glorot(cfg.ray_encoding_dim(), c, rng),
        depth_proj: LinearParams::glorot(cfg.depth_encoding_dim(), c, rng),
        fusion: LinearParams::glorot(c, 1, rng),
        output: LinearParams::zeros(c, c),
    })
}

impl EcaBlockParams {
    pub fn zeros(cfg: &EcaConfig) -> Self {
        let c = cfg.channels;
        Self {
            cross: AttentionParams::zeros(c),
            ray: AttentionParams::zeros(c),
            ray_proj: LinearParams::zeros(cfg.ray_encoding_dim(), c),
            depth_proj: LinearParams::zeros(cfg.depth_encoding_dim(), c),
            fusion: LinearParams::zeros(c, 1),
            output: LinearParams::zeros(c, c),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            cross: self.cross.zeros_like(),
            ray: self.ray.zeros_like(),
            ray_proj: self.ray_proj.zeros_like(),
            depth_proj: self.depth_proj.zeros_like(),
            fusion: self.fusion.zeros_like(),
            output: self.output.zeros_like(),
        }
    }

    pub fn channels(&self) -> usize {
        self.output.in_dim()
    }

    fn linears(&self) -> Vec<(&'static str, &LinearParams)> {
        let [cq, ck, cv, co] = self.cross.linears();
        let [rq, rk, rv, ro] = self.ray.linears();
        vec![
            ("cross.q", cq),
            ("cross.k", ck),
            ("cross.v", cv),
            ("cross.out", co),
            ("ray.q", rq),
            ("ray.k", rk),
            ("ray.v", rv),
            ("ray.out", ro),
            ("ray_proj", &self.ray_proj),
            ("depth_proj", &self.depth_proj),
            ("fusion", &self.fusion),
            ("output", &self.output),
        ]
    }

    fn linears_mut(&mut self) -> Vec<(&'static str, &mut LinearParams)> {
        let [cq, ck, cv, co] = self.cross.linears_mut();
        let [rq, rk, rv, ro] = self.ray.linears_mut();
        vec![
            ("cross.q", cq),
            ("cross.k", ck),
            ("cross.v", cv),
            ("cross.out", co),
            ("ray.q", rq),
            ("ray.k", rk),
            ("ray.v", rv),
            ("ray.out", ro),
            ("ray_proj", &mut self.ray_proj),
            ("depth_proj", &mut self.depth_proj),
            ("fusion", &mut self.fusion),
            ("output", &mut self.output),
        ]
    }

    /// Every parameter tensor with a stable dotted name, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        self.linears()
            .into_iter()
            .flat_map(|(n, l)| [(format!("{n}.weight"), &l.weight), (format!("{n}.bias"), &l.bias)])
            .collect()
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        self.linears_mut()
            .into_iter()
            .flat_map(|(n, l)| {
                let LinearParams { weight, bias } = l;
                [(format!("{n}.weight"), weight), (format!("{n}.bias"), bias)]
            })
            .collect()
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &Self) -> Result<()> {
        for ((_, a), (_, b)) in self.named_tensors_mut().into_iter().zip(other.named_tensors()) {
            a.axpy(alpha, b)?;
        }
        Ok(())
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        for ((_, a), (_, b)) in self.named_tensors_mut().into_iter().zip(other.named_tensors()) {
            a.add_assign(b)?;
        }
        Ok(())
    }

    pub fn num_values(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.named_tensors().iter().map(|(_, t)| t.max_abs()).fold(0.0, f64::max)
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.named_tensors()
            .iter()
            .zip(other.named_tensors())
            .all(|((_, a), (_, b))| a.bit_eq(b))
    }
}
