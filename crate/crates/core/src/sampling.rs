//! Target-view rays, depth samples, epipolar reprojection and the bilinear
//! gather that builds the sampled feature volume.
//!
//! Samples are placed uniformly in distance along each target ray between
//! the near and far planes, then projected into every selected view. The
//! projections of one ray trace out its epipolar line in each reference
//! view; they are uniform in depth, not in image-space arc length.

use crate::camera::{project_point, select_nearest_views, Camera, CameraIntrinsics, Vec3, ViewLayout};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
}

impl Ray {
    /// Normalizes `direction`.
    pub fn new(origin: Vec3, direction: Vec3) -> Self {
        Self {
            origin,
            direction: direction.normalize(),
        }
    }

    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.direction * t
    }
}

/// Image-pixel center of feature patch `(i, j)` on a `feat_h × feat_w` grid.
pub fn patch_center(intr: &CameraIntrinsics, feat_h: usize, feat_w: usize, i: usize, j: usize) -> (f64, f64) {
    (
        (j as f64 + 0.5) * intr.width as f64 / feat_w as f64,
        (i as f64 + 0.5) * intr.height as f64 / feat_h as f64,
    )
}

/// Unit ray from the camera center through image pixel `(u, v)`.
pub fn pixel_ray(cam: &Camera, u: f64, v: f64) -> Ray {
    let intr = &cam.intrinsics;
    let f = intr.focal();
    let dir_cam = Vec3::new((u - intr.cx) / f, (v - intr.cy) / f, 1.0);
    Ray::new(cam.pose.center(), cam.pose.rotation.transpose() * dir_cam)
}

/// One ray per feature patch, row-major.
pub fn rays_from_feature_map(cam: &Camera, feat_h: usize, feat_w: usize) -> Vec<Ray> {
    let mut rays = Vec::with_capacity(feat_h * feat_w);
    for i in 0..feat_h {
        for j in 0..feat_w {
            let (u, v) = patch_center(&cam.intrinsics, feat_h, feat_w, i, j);
            rays.push(pixel_ray(cam, u, v));
        }
    }
    rays
}

/// Bin centers `near + (s + 0.5)·(far − near)/S`.
pub fn sample_depths(near: f64, far: f64, samples: usize) -> Result<Vec<f64>> {
    if !(near > 0.0 && far > near) || samples == 0 {
        return Err(Error::InvalidArgument(format!(
            "need 0 < near < far and S >= 1, got near={near} far={far} S={samples}"
        )));
    }
    let step = (far - near) / samples as f64;
    Ok((0..samples).map(|s| near + (s as f64 + 0.5) * step).collect())
}

/// Near/far planes `‖C‖ ∓ 1` for a scene inside the unit sphere.
pub fn default_near_far(cam: &Camera) -> Result<(f64, f64)> {
    let r = cam.pose.center().norm();
    if r <= 1.0 {
        return Err(Error::InvalidArgument(format!("camera radius {r} must exceed 1")));
    }
    Ok((r - 1.0, r + 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Reprojection {
    pub u: f64,
    pub v: f64,
    pub valid: bool,
}

/// Projects `ray.at(depth)` for each depth into `reference`. Invalid when
/// behind the camera or outside `[0, W) × [0, H)`.
pub fn reproject_samples(ray: &Ray, depths: &[f64], reference: &Camera) -> Vec<Reprojection> {
    depths
        .iter()
        .map(|&t| {
            let p = project_point(&reference.intrinsics, &reference.pose, &ray.at(t));
            Reprojection {
                u: p.u,
                v: p.v,
                valid: p.valid && reference.intrinsics.contains(p.u, p.v),
            }
        })
        .collect()
}

/// The four pixel-center taps of a bilinear lookup, as flat `y·W + x`
/// indices with their weights. Out-of-grid neighbours clamp to the edge.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BilinearTaps {
    pub index: [usize; 4],
    pub weight: [f64; 4],
}

pub fn bilinear_taps(height: usize, width: usize, u: f64, v: f64) -> Result<BilinearTaps> {
    if !(u >= 0.0 && u < width as f64 && v >= 0.0 && v < height as f64) {
        return Err(Error::range(
            "bilinear sample",
            format!("({u}, {v}) outside [0,{width})x[0,{height})"),
        ));
    }
    let x = u - 0.5;
    let y = v - 0.5;
    let x0 = x.floor();
    let y0 = y.floor();
    let (fx, fy) = (x - x0, y - y0);
    let clamp_x = |c: f64| c.clamp(0.0, (width - 1) as f64) as usize;
    let clamp_y = |c: f64| c.clamp(0.0, (height - 1) as f64) as usize;
    let (xa, xb) = (clamp_x(x0), clamp_x(x0 + 1.0));
    let (ya, yb) = (clamp_y(y0), clamp_y(y0 + 1.0));
    Ok(BilinearTaps {
        index: [ya * width + xa, ya * width + xb, yb * width + xa, yb * width + xb],
        weight: [(1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy],
    })
}

fn map_dims(map: &Tensor) -> Result<(usize, usize, usize)> {
    match map.shape() {
        &[h, w, c] => Ok((h, w, c)),
        s => Err(Error::shape("feature map [H,W,C]", s, &[3])),
    }
}

/// Bilinear lookup in a `[H, W, C]` map at map-pixel coordinates `(u, v)`.
pub fn bilinear_sample(map: &Tensor, u: f64, v: f64) -> Result<Tensor> {
    let (h, w, c) = map_dims(map)?;
    let taps = bilinear_taps(h, w, u, v)?;
    let mut out = vec![0.0; c];
    accumulate_taps(map.data(), c, &taps, &mut out);
    Tensor::new(vec![c], out)
}

fn accumulate_taps(map: &[f64], c: usize, taps: &BilinearTaps, out: &mut [f64]) {
    for (&idx, &wgt) in taps.index.iter().zip(&taps.weight) {
        let px = &map[idx * c..(idx + 1) * c];
        for (o, &p) in out.iter_mut().zip(px) {
            *o += wgt * p;
        }
    }
}

/// Geometry of one target view's epipolar sampling, independent of the
/// feature values: which views, where every sample lands, and which samples
/// are valid. Entry order is `[K, H·W, S]`.
#[derive(Debug, Clone)]
pub struct SamplePlan {
    pub target_index: usize,
    pub view_indices: Vec<usize>,
    pub feat_h: usize,
    pub feat_w: usize,
    pub depths: Vec<f64>,
    pub near: f64,
    pub far: f64,
    pub rays: Vec<Ray>,
    pub taps: Vec<Option<BilinearTaps>>,
}

impl SamplePlan {
    pub fn k(&self) -> usize {
        self.view_indices.len()
    }

    pub fn s(&self) -> usize {
        self.depths.len()
    }

    pub fn pixels(&self) -> usize {
        self.feat_h * self.feat_w
    }

    pub fn entry(&self, k: usize, p: usize, s: usize) -> usize {
        (k * self.pixels() + p) * self.s() + s
    }

    pub fn valid(&self) -> Vec<bool> {
        self.taps.iter().map(Option::is_some).collect()
    }

    /// World-space sample point of pixel `p` at depth index `s`.
    pub fn point(&self, p: usize, s: usize) -> Vec3 {
        self.rays[p].at(self.depths[s])
    }

    /// Gathers `[K, H·W, S, C]` from per-view `[H, W, C]` maps; invalid
    /// entries are zero.
    pub fn gather(&self, maps: &[Tensor]) -> Result<Tensor> {
        let c = self.check_maps(maps)?;
        let mut out = vec![0.0; self.taps.len() * c];
        for k in 0..self.k() {
            let map = maps[self.view_indices[k]].data();
            for p in 0..self.pixels() {
                for s in 0..self.s() {
                    let e = self.entry(k, p, s);
                    if let Some(t) = &self.taps[e] {
                        accumulate_taps(map, c, t, &mut out[e * c..(e + 1) * c]);
                    }
                }
            }
        }
        Tensor::new(vec![self.k(), self.pixels(), self.s(), c], out)
    }

    /// Adjoint of [`gather`](Self::gather): scatters `grad` back onto the
    /// per-view map gradients with the same bilinear weights.
    pub fn scatter(&self, grad: &Tensor, map_grads: &mut [Tensor]) -> Result<()> {
        let c = grad.last_dim();
        if grad.len() != self.taps.len() * c {
            return Err(Error::shape("scatter", grad.shape(), &[self.taps.len(), c]));
        }
        for k in 0..self.k() {
            let view = self.view_indices[k];
            let target = map_grads
                .get_mut(view)
                .ok_or_else(|| Error::range("view index", format!("{view}")))?;
            if target.len() != self.pixels() * c {
                return Err(Error::shape("scatter", target.shape(), &[self.feat_h, self.feat_w, c]));
            }
            let tg = target.data_mut();
            for p in 0..self.pixels() {
                for s in 0..self.s() {
                    let e = self.entry(k, p, s);
                    if let Some(t) = &self.taps[e] {
                        let g = &grad.data()[e * c..(e + 1) * c];
                        for (&idx, &wgt) in t.index.iter().zip(&t.weight) {
                            for (o, &gv) in tg[idx * c..(idx + 1) * c].iter_mut().zip(g) {
                                *o += wgt * gv;
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn check_maps(&self, maps: &[Tensor]) -> Result<usize> {
        let first = maps
            .first()
            .ok_or_else(|| Error::InvalidArgument("no feature maps".into()))?;
        let (h, w, c) = map_dims(first)?;
        if (h, w) != (self.feat_h, self.feat_w) {
            return Err(Error::shape("gather", first.shape(), &[self.feat_h, self.feat_w]));
        }
        for m in maps {
            if m.shape() != first.shape() {
                return Err(Error::shape("gather", first.shape(), m.shape()));
            }
        }
        if let Some(&bad) = self.view_indices.iter().find(|&&v| v >= maps.len()) {
            return Err(Error::range("view index", format!("{bad} >= {}", maps.len())));
        }
        Ok(c)
    }
}

/// Selects the `k` nearest views (target first), casts one ray per feature
/// patch of the target, and reprojects `s` depth samples into every view.
#[allow(clippy::too_many_arguments)]
pub fn plan_samples(
    layout: &ViewLayout,
    target_index: usize,
    feat_h: usize,
    feat_w: usize,
    k: usize,
    s: usize,
    near: f64,
    far: f64,
) -> Result<SamplePlan> {
    if feat_h == 0 || feat_w == 0 {
        return Err(Error::InvalidArgument("feature map must be at least 1x1".into()));
    }
    let view_indices = select_nearest_views(layout, target_index, k)?;
    let depths = sample_depths(near, far, s)?;
    let rays = rays_from_feature_map(&layout.cameras[target_index], feat_h, feat_w);
    let mut taps = Vec::with_capacity(k * rays.len() * s);
    for &view in &view_indices {
        let cam = &layout.cameras[view];
        let sx = feat_w as f64 / cam.intrinsics.width as f64;
        let sy = feat_h as f64 / cam.intrinsics.height as f64;
        for ray in &rays {
            for r in reproject_samples(ray, &depths, cam) {
                taps.push(if r.valid {
                    Some(bilinear_taps(feat_h, feat_w, r.u * sx, r.v * sy)?)
                } else {
                    None
                });
            }
        }
    }
    Ok(SamplePlan {
        target_index,
        view_indices,
        feat_h,
        feat_w,
        depths,
        near,
        far,
        rays,
        taps,
    })
}

/// The sampled feature volume of one target view.
#[derive(Debug, Clone, PartialEq)]
pub struct EpipolarSampleMap {
    /// `[K, H·W, S, C]`, zero where invalid.
    pub features: Tensor,
    /// `[K, H·W, S]`, row-major.
    pub valid: Vec<bool>,
    /// `[H·W, S]` ray distances.
    pub depths: Tensor,
    /// `view_indices[0]` is the target.
    pub view_indices: Vec<usize>,
}

impl EpipolarSampleMap {
    pub fn from_plan(plan: &SamplePlan, maps: &[Tensor]) -> Result<Self> {
        let features = plan.gather(maps)?;
        let mut depths = Vec::with_capacity(plan.pixels() * plan.s());
        for _ in 0..plan.pixels() {
            depths.extend_from_slice(&plan.depths);
        }
        Ok(Self {
            features,
            valid: plan.valid(),
            depths: Tensor::new(vec![plan.pixels(), plan.s()], depths)?,
            view_indices: plan.view_indices.clone(),
        })
    }

    pub fn valid_tensor(&self) -> Tensor {
        let shape = &self.features.shape()[..3];
        Tensor::new(
            shape.to_vec(),
            self.valid.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect(),
        )
        .expect("valid mask matches feature volume")
    }

    pub fn view_indices_tensor(&self) -> Tensor {
        Tensor::new(
            vec![self.view_indices.len()],
            self.view_indices.iter().map(|&v| v as f64).collect(),
        )
        .expect("1-D")
    }
}

#[allow(clippy::too_many_arguments)]
pub fn build_sample_volume(
    target_index: usize,
    layout: &ViewLayout,
    feature_maps: &[Tensor],
    k: usize,
    s: usize,
    near: f64,
    far: f64,
) -> Result<EpipolarSampleMap> {
    if feature_maps.len() != layout.len() {
        return Err(Error::shape("build_sample_volume", &[feature_maps.len()], &[layout.len()]));
    }
    let (h, w, _) = map_dims(
        feature_maps
            .first()
            .ok_or_else(|| Error::InvalidArgument("no feature maps".into()))?,
    )?;
    let plan = plan_samples(layout, target_index, h, w, k, s, near, far)?;
    EpipolarSampleMap::from_plan(&plan, feature_maps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::{fundamental_matrix, make_lookat_pose, CameraIntrinsics, ViewLayout};
    use crate::tensor::{finite_diff_check, DeterministicRng};

    fn ring() -> ViewLayout {
        ViewLayout::eval_ring(CameraIntrinsics::square(64).unwrap()).unwrap()
    }

    /// Independent scalar bilinear formula with edge clamping.
    fn bilinear_oracle(map: &Tensor, u: f64, v: f64) -> Vec<f64> {
        let (h, w, c) = (map.shape()[0], map.shape()[1], map.shape()[2]);
        let at = |y: i64, x: i64, ch: usize| {
            let y = y.clamp(0, h as i64 - 1) as usize;
            let x = x.clamp(0, w as i64 - 1) as usize;
            map.data()[(y * w + x) * c + ch]
        };
        let (x, y) = (u - 0.5, v - 0.5);
        let (x0, y0) = (x.floor() as i64, y.floor() as i64);
        let (a, b) = (x - x0 as f64, y - y0 as f64);
        (0..c)
            .map(|ch| {
                at(y0, x0, ch) * (1.0 - a) * (1.0 - b)
                    + at(y0, x0 + 1, ch) * a * (1.0 - b)
                    + at(y0 + 1, x0, ch) * (1.0 - a) * b
                    + at(y0 + 1, x0 + 1, ch) * a * b
            })
            .collect()
    }

    #[test]
    fn single_patch_ray_is_principal_axis() {
        let cam = ring().cameras[3];
        let rays = rays_from_feature_map(&cam, 1, 1);
        assert_eq!(rays.len(), 1);
        assert!((rays[0].direction - cam.pose.forward()).norm() < 1e-12);
        // Passes through the look-at target (origin).
        assert!(rays[0].origin.cross(&rays[0].direction).norm() < 1e-9);
    }

    #[test]
    fn ray_points_reproject_to_patch_centers() {
        let cam = ring().cameras[0];
        let rays = rays_from_feature_map(&cam, 4, 4);
        let r = cam.pose.center().norm();
        for (idx, ray) in rays.iter().enumerate() {
            assert!((ray.direction.norm() - 1.0).abs() < 1e-12);
            let p = project_point(&cam.intrinsics, &cam.pose, &ray.at(r));
            let (u, v) = patch_center(&cam.intrinsics, 4, 4, idx / 4, idx % 4);
            assert!((p.u - u).abs() < 1e-9 && (p.v - v).abs() < 1e-9);
        }
    }

    #[test]
    fn depth_bins() {
        let d = sample_depths(1.0, 3.0, 1).unwrap();
        assert_eq!(d, vec![2.0]);
        let d = sample_depths(0.8, 2.8, 16).unwrap();
        assert_eq!(d.len(), 16);
        assert!((d[0] - 0.8625).abs() < 1e-12);
        assert!((d[15] - 2.7375).abs() < 1e-12);
        assert!(d.windows(2).all(|w| (w[1] - w[0] - 0.125).abs() < 1e-12));
        assert!(sample_depths(2.0, 1.0, 4).is_err());
        assert!(sample_depths(0.0, 1.0, 4).is_err());
        assert!(sample_depths(0.5, 1.0, 0).is_err());
    }

    #[test]
    fn self_reprojection_hits_patch_center() {
        let cam = ring().cameras[2];
        let rays = rays_from_feature_map(&cam, 8, 8);
        let depths = sample_depths(0.8, 2.8, 16).unwrap();
        for (idx, ray) in rays.iter().enumerate() {
            let (u, v) = patch_center(&cam.intrinsics, 8, 8, idx / 8, idx % 8);
            for r in reproject_samples(ray, &depths, &cam) {
                assert!(r.valid);
                assert!((r.u - u).abs() < 1e-9 && (r.v - v).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn reprojections_lie_on_epipolar_line() {
        let layout = ring();
        let (c1, c2) = (layout.cameras[0], layout.cameras[2]);
        let f = fundamental_matrix(&c1, &c2).unwrap();
        let depths = sample_depths(0.8, 2.8, 16).unwrap();
        for ray in rays_from_feature_map(&c1, 4, 4) {
            let p1 = project_point(&c1.intrinsics, &c1.pose, &ray.at(1.0));
            let reps = reproject_samples(&ray, &depths, &c2);
            for r in &reps {
                assert!(f.residual((p1.u, p1.v), (r.u, r.v)).abs() < 1e-9);
            }
            // Collinearity: signed area of every triple relative to extent.
            let (a, b) = (reps[0], reps[reps.len() - 1]);
            let len = ((b.u - a.u).powi(2) + (b.v - a.v).powi(2)).sqrt();
            for r in &reps {
                let cross = (b.u - a.u) * (r.v - a.v) - (b.v - a.v) * (r.u - a.u);
                assert!((cross / len).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn sample_behind_reference_is_invalid() {
        let intr = CameraIntrinsics::square(32).unwrap();
        let cam = Camera {
            intrinsics: intr,
            pose: make_lookat_pose(Vec3::new(2.0, 0.0, 0.0), Vec3::zeros(), Vec3::z()).unwrap(),
        };
        // Ray leaving the reference camera backwards.
        let ray = Ray::new(Vec3::new(2.5, 0.0, 0.0), Vec3::new(1.0, 0.0, 0.0));
        let r = reproject_samples(&ray, &[1.0], &cam);
        assert!(!r[0].valid);
    }

    #[test]
    fn bilinear_cases() {
        let mut rng = DeterministicRng::new(3);
        let map = Tensor::randn(&[5, 5, 2], &mut rng);
        let px = bilinear_sample(&map, 2.5, 1.5).unwrap();
        assert_eq!(px.data(), &map.data()[(5 + 2) * 2..(5 + 2) * 2 + 2]);
        let mid = bilinear_sample(&map, 2.0, 2.0).unwrap();
        for ch in 0..2 {
            let at = |y: usize, x: usize| map.data()[(y * 5 + x) * 2 + ch];
            let mean = (at(1, 1) + at(1, 2) + at(2, 1) + at(2, 2)) / 4.0;
            assert!((mid.data()[ch] - mean).abs() < 1e-15);
        }
        for _ in 0..200 {
            let (u, v) = (rng.uniform_range(0.0, 5.0), rng.uniform_range(0.0, 5.0));
            let got = bilinear_sample(&map, u, v).unwrap();
            let want = bilinear_oracle(&map, u, v);
            for (g, w) in got.data().iter().zip(&want) {
                assert!((g - w).abs() < 1e-12);
            }
        }
        assert!(bilinear_sample(&map, 5.0, 1.0).is_err());
        assert!(bilinear_sample(&map, -0.1, 1.0).is_err());
    }

    #[test]
    fn volume_shapes_and_invariants() {
        let layout = ring();
        let mut rng = DeterministicRng::new(1);
        let maps: Vec<Tensor> = (0..16).map(|_| Tensor::randn(&[32, 32, 3], &mut rng)).collect();
        let vol = build_sample_volume(0, &layout, &maps, 4, 16, 0.8, 2.8).unwrap();
        assert_eq!(vol.features.shape(), &[4, 1024, 16, 3]);
        assert_eq!(vol.view_indices, vec![0, 1, 15, 2]);
        for (e, &ok) in vol.valid.iter().enumerate() {
            if !ok {
                assert!(vol.features.row(e).iter().all(|&x| x == 0.0));
            }
        }
        let d = vol.depths.row(7);
        assert!(d.windows(2).all(|w| w[1] > w[0]));
        let again = build_sample_volume(0, &layout, &maps, 4, 16, 0.8, 2.8).unwrap();
        assert!(again.features.bit_eq(&vol.features));
    }

    #[test]
    fn self_volume_reproduces_target_features() {
        let layout = ring();
        let mut rng = DeterministicRng::new(2);
        let maps: Vec<Tensor> = (0..16).map(|_| Tensor::randn(&[6, 6, 2], &mut rng)).collect();
        let vol = build_sample_volume(4, &layout, &maps, 1, 5, 0.8, 2.8).unwrap();
        assert!(vol.valid.iter().all(|&v| v));
        for p in 0..36 {
            for s in 0..5 {
                let got = vol.features.row(p * 5 + s);
                let want = maps[4].row(p);
                for (g, w) in got.iter().zip(want) {
                    assert!((g - w).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn scatter_is_adjoint_of_gather() {
        let layout = ring();
        let mut rng = DeterministicRng::new(8);
        let maps: Vec<Tensor> = (0..16).map(|_| Tensor::randn(&[4, 4, 2], &mut rng)).collect();
        let plan = plan_samples(&layout, 0, 4, 4, 3, 4, 0.8, 2.8).unwrap();
        let probe = Tensor::randn(&[3, 16, 4, 2], &mut rng);
        let mut grads: Vec<Tensor> = maps.iter().map(|m| Tensor::zeros(m.shape())).collect();
        plan.scatter(&probe, &mut grads).unwrap();
        for view in [0, 1, 15, 5] {
            let f = |m: &Tensor| {
                let mut ms = maps.clone();
                ms[view] = m.clone();
                plan.gather(&ms).unwrap().dot(&probe).unwrap()
            };
            assert!(finite_diff_check(f, &maps[view], &grads[view], 1e-5).unwrap() < 1e-8);
        }
    }
}
