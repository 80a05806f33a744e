//! Plücker ray coordinates, ray-relative canonical frames and the harmonic
//! features injected into the sampled volume.
//!
//! Harmonic layout for an input of `n` values and `L` octaves: all sines
//! first, ordered by frequency then component, followed by all cosines in
//! the same order:
//! `[sin(f₀x₀) … sin(f₀xₙ₋₁), sin(f₁x₀) …, cos(f₀x₀) …]` with `f_l = base·2^l`.
//!
//! Volume encodings canonicalize first: for target pixel `p` the frame of
//! its ray maps that ray to the +z axis through the origin, the ray from
//! view `k`'s camera center through sample point `X(p, s)` is expressed in
//! that frame, and the Plücker coordinates of the result are encoded.

use serde::{Deserialize, Serialize};

use crate::camera::{CameraPose, Mat3, Vec3, ViewLayout};
use crate::error::{Error, Result};
use crate::sampling::{Ray, SamplePlan};
use crate::tensor::{LinearParams, Tensor};

pub const PLUCKER_DIM: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PluckerRay {
    /// `o × d`.
    pub moment: Vec3,
    pub direction: Vec3,
}

impl PluckerRay {
    pub fn to_array(&self) -> [f64; 6] {
        [
            self.moment.x,
            self.moment.y,
            self.moment.z,
            self.direction.x,
            self.direction.y,
            self.direction.z,
        ]
    }
}

/// Plücker coordinates of `ray`. The flag is set when the direction was not
/// unit length and had to be renormalized.
pub fn plucker_coordinates(ray: &Ray) -> (PluckerRay, bool) {
    let n = ray.direction.norm();
    let renormalized = (n - 1.0).abs() > 1e-12;
    let d = if renormalized { ray.direction / n } else { ray.direction };
    (
        PluckerRay {
            moment: ray.origin.cross(&d),
            direction: d,
        },
        renormalized,
    )
}

/// Ray-relative frame: columns of `rotation` are `(y' × v', y', v')`, the
/// transform is `X ↦ Rcᵀ (X − origin)` with `origin` the camera center.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CanonicalFrame {
    pub rotation: Mat3,
    pub origin: Vec3,
    /// Set when the camera Y axis was parallel to the ray and the X axis was
    /// used to build the frame instead.
    pub used_fallback: bool,
}

impl CanonicalFrame {
    /// The 3×4 matrix `[Rcᵀ | −Rcᵀ·origin]`, row-major.
    pub fn transform(&self) -> [[f64; 4]; 3] {
        let rt = self.rotation.transpose();
        let t = -(rt * self.origin);
        let mut m = [[0.0; 4]; 3];
        for (r, row) in m.iter_mut().enumerate() {
            for c in 0..3 {
                row[c] = rt[(r, c)];
            }
            row[3] = t[r];
        }
        m
    }

    pub fn apply_point(&self, x: &Vec3) -> Vec3 {
        self.rotation.transpose() * (x - self.origin)
    }

    pub fn apply_direction(&self, d: &Vec3) -> Vec3 {
        (self.rotation.transpose() * d).normalize()
    }

    pub fn apply_ray(&self, ray: &Ray) -> Ray {
        Ray {
            origin: self.apply_point(&ray.origin),
            direction: self.apply_direction(&ray.direction),
        }
    }

    pub fn invert_ray(&self, ray: &Ray) -> Ray {
        Ray {
            origin: self.rotation * ray.origin + self.origin,
            direction: (self.rotation * ray.direction).normalize(),
        }
    }
}

/// Frame whose z axis is the ray direction `v` and whose y axis is the
/// camera's Y axis (second row of `R`) orthogonalized against `v`.
pub fn canonical_transform(pose: &CameraPose, v: &Vec3) -> Result<CanonicalFrame> {
    let n = v.norm();
    if !(n > 1e-12) {
        return Err(Error::Degenerate("zero ray direction".into()));
    }
    let vp = v / n;
    let orthogonalize = |axis: Vec3| axis - vp * axis.dot(&vp);
    let mut y = orthogonalize(pose.rotation.row(1).transpose());
    let mut used_fallback = false;
    if y.norm() < 1e-9 {
        y = orthogonalize(pose.rotation.row(0).transpose());
        used_fallback = true;
    }
    let y = y.normalize();
    let x = y.cross(&vp);
    Ok(CanonicalFrame {
        rotation: Mat3::from_columns(&[x, y, vp]),
        origin: pose.center(),
        used_fallback,
    })
}

pub fn canonicalize_neighbor_rays(frame: &CanonicalFrame, rays: &[Ray]) -> Vec<Ray> {
    rays.iter().map(|r| frame.apply_ray(r)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HarmonicConfig {
    pub num_frequencies: usize,
    pub base: f64,
}

impl Default for HarmonicConfig {
    fn default() -> Self {
        Self {
            num_frequencies: 4,
            base: std::f64::consts::PI,
        }
    }
}

impl HarmonicConfig {
    pub fn output_dim(&self, input_dim: usize) -> usize {
        2 * self.num_frequencies * input_dim
    }
}

pub fn harmonic_encode(x: &[f64], cfg: &HarmonicConfig) -> Vec<f64> {
    let n = x.len();
    let l = cfg.num_frequencies;
    let mut out = vec![0.0; 2 * l * n];
    let (sin_half, cos_half) = out.split_at_mut(l * n);
    for f in 0..l {
        let freq = cfg.base * 2f64.powi(f as i32);
        for (i, &xi) in x.iter().enumerate() {
            let (s, c) = (freq * xi).sin_cos();
            sin_half[f * n + i] = s;
            cos_half[f * n + i] = c;
        }
    }
    out
}

/// Applies [`harmonic_encode`] to every row of a `[..., n]` tensor.
pub fn harmonic_encode_rows(x: &Tensor, cfg: &HarmonicConfig) -> Tensor {
    let n = x.last_dim();
    let mut data = Vec::with_capacity(x.rows() * cfg.output_dim(n));
    for r in 0..x.rows() {
        data.extend(harmonic_encode(x.row(r), cfg));
    }
    let mut shape = x.shape().to_vec();
    if let Some(last) = shape.last_mut() {
        *last = cfg.output_dim(n);
    }
    Tensor::new(shape, data).expect("harmonic rows")
}

/// `features + proj(encoded)` row by row; `encoded` rows are the already
/// harmonic-encoded per-entry vectors.
pub fn inject_encoded(features: &Tensor, encoded: &Tensor, proj: &LinearParams) -> Result<Tensor> {
    if features.rows() != encoded.rows() || proj.out_dim() != features.last_dim() {
        return Err(Error::shape("inject", features.shape(), encoded.shape()));
    }
    let delta = proj.forward(encoded)?;
    let mut out = features.clone();
    for (o, d) in out.data_mut().iter_mut().zip(delta.data()) {
        *o += d;
    }
    Ok(out)
}

/// `features + proj(harmonic(plucker))` for `features: [..., C]` and one
/// 6-vector per feature row.
pub fn inject_ray_encoding(
    features: &Tensor,
    plucker: &Tensor,
    cfg: &HarmonicConfig,
    proj: &LinearParams,
) -> Result<Tensor> {
    if plucker.last_dim() != PLUCKER_DIM {
        return Err(Error::shape("inject_ray_encoding", plucker.shape(), &[PLUCKER_DIM]));
    }
    if proj.in_dim() != cfg.output_dim(PLUCKER_DIM) {
        return Err(Error::shape(
            "inject_ray_encoding",
            proj.weight.shape(),
            &[features.last_dim(), cfg.output_dim(PLUCKER_DIM)],
        ));
    }
    inject_encoded(features, &harmonic_encode_rows(plucker, cfg), proj)
}

/// Parameter gradient of the injection; the feature gradient passes through
/// unchanged.
pub fn inject_backward(
    proj: &LinearParams,
    encoded: &Tensor,
    grad_out: &Tensor,
    grads: &mut LinearParams,
) -> Result<()> {
    proj.backward_params(encoded, grad_out, grads)
}

/// Canonicalized Plücker coordinates for every `[K, H·W, S]` entry of `plan`.
pub fn volume_plucker(layout: &ViewLayout, plan: &SamplePlan) -> Result<Tensor> {
    let target = &layout.cameras[plan.target_index].pose;
    let (k_count, pixels, s_count) = (plan.k(), plan.pixels(), plan.s());
    let mut data = vec![0.0; k_count * pixels * s_count * PLUCKER_DIM];
    for p in 0..pixels {
        let frame = canonical_transform(target, &plan.rays[p].direction)?;
        for (k, &view) in plan.view_indices.iter().enumerate() {
            let center = layout.cameras[view].pose.center();
            for s in 0..s_count {
                let point = plan.point(p, s);
                let ray = if k == 0 {
                    plan.rays[p]
                } else {
                    Ray::new(center, point - center)
                };
                let (pl, _) = plucker_coordinates(&frame.apply_ray(&ray));
                let e = plan.entry(k, p, s);
                data[e * PLUCKER_DIM..(e + 1) * PLUCKER_DIM].copy_from_slice(&pl.to_array());
            }
        }
    }
    Tensor::new(vec![k_count, pixels, s_count, PLUCKER_DIM], data)
}
