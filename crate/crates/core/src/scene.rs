//! Raycast ground truth: albedo-only renders with exact depth of a textured
//! sphere and an axis-aligned voxel grid, plus the epipolar correspondence
//! oracle built on them.
//!
//! Depth is the distance along the unit-length pixel ray (0 on a miss);
//! background is white.

use std::fs;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{project_point, Camera, Vec3, ViewLayout, ViewMeta};
use crate::error::{Error, Result};
use crate::sampling::{pixel_ray, plan_samples, Ray};
use crate::tensor::{tensor_write, Tensor};

pub const BACKGROUND: [f64; 3] = [1.0, 1.0, 1.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SceneKind {
    Sphere,
    Voxel,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SyntheticScene {
    /// Albedo is a low-frequency trigonometric function of azimuth `θ` and
    /// elevation `φ` around the center.
    TexturedSphere { center: Vec3, radius: f64 },
    /// `dims³` cells of edge `cell` starting at `min`, x fastest.
    VoxelGrid {
        min: Vec3,
        cell: f64,
        dims: usize,
        occupancy: Vec<bool>,
        colors: Vec<[f64; 3]>,
    },
}

fn sphere_albedo(n: &Vec3) -> [f64; 3] {
    let theta = n.y.atan2(n.x);
    let phi = n.z.clamp(-1.0, 1.0).asin();
    let (cp, sp) = (phi.cos(), phi.sin());
    [
        0.5 + 0.4 * cp * (theta + 0.3).sin(),
        0.5 + 0.4 * (2.2 * sp + 0.5).sin(),
        0.5 + 0.3 * cp * cp * (2.0 * theta).cos() + 0.1 * sp,
    ]
}

impl SyntheticScene {
    /// Unit sphere at the origin.
    pub fn textured_sphere() -> Self {
        Self::TexturedSphere {
            center: Vec3::zeros(),
            radius: 1.0,
        }
    }

    /// 5³ cells inside `[−0.4, 0.4]³`: a 3-D checkerboard plus a central
    /// column, each cell with its own flat color.
    pub fn voxel_grid() -> Self {
        let dims = 5;
        let mut occupancy = Vec::with_capacity(dims * dims * dims);
        let mut colors = Vec::with_capacity(dims * dims * dims);
        for k in 0..dims {
            for j in 0..dims {
                for i in 0..dims {
                    occupancy.push((i + j + k) % 2 == 0 || (i == 2 && j == 2));
                    colors.push([0.15 + 0.15 * i as f64, 0.15 + 0.15 * j as f64, 0.15 + 0.15 * k as f64]);
                }
            }
        }
        Self::VoxelGrid {
            min: Vec3::repeat(-0.4),
            cell: 0.16,
            dims,
            occupancy,
            colors,
        }
    }

    pub fn from_kind(kind: SceneKind) -> Self {
        match kind {
            SceneKind::Sphere => Self::textured_sphere(),
            SceneKind::Voxel => Self::voxel_grid(),
        }
    }

    /// First hit along a unit-direction ray: `(distance, albedo)`.
    pub fn intersect(&self, ray: &Ray) -> Option<(f64, [f64; 3])> {
        match self {
            Self::TexturedSphere { center, radius } => {
                let oc = ray.origin - center;
                let b = oc.dot(&ray.direction);
                let c = oc.norm_squared() - radius * radius;
                let disc = b * b - c;
                if disc < 0.0 {
                    return None;
                }
                let root = disc.sqrt();
                let t = if -b - root > 0.0 { -b - root } else { -b + root };
                if t <= 0.0 {
                    return None;
                }
                let n = (ray.at(t) - center) / *radius;
                Some((t, sphere_albedo(&n)))
            }
            Self::VoxelGrid {
                min,
                cell,
                dims,
                occupancy,
                colors,
            } => voxel_hit(ray, min, *cell, *dims, occupancy, colors),
        }
    }
}

/// Slab test then a 3-D DDA walk over the grid cells.
fn voxel_hit(ray: &Ray, min: &Vec3, cell: f64, dims: usize, occupancy: &[bool], colors: &[[f64; 3]]) -> Option<(f64, [f64; 3])> {
    let size = cell * dims as f64;
    let (mut t0, mut t1) = (0.0f64, f64::INFINITY);
    for a in 0..3 {
        let d = ray.direction[a];
        let (lo, hi) = (min[a], min[a] + size);
        if d.abs() < 1e-300 {
            if ray.origin[a] < lo || ray.origin[a] > hi {
                return None;
            }
            continue;
        }
        let (ta, tb) = ((lo - ray.origin[a]) / d, (hi - ray.origin[a]) / d);
        t0 = t0.max(ta.min(tb));
        t1 = t1.min(ta.max(tb));
    }
    if t0 > t1 {
        return None;
    }
    let entry = ray.at(t0);
    let last = dims as i64 - 1;
    let mut idx = [0i64; 3];
    let mut step = [0i64; 3];
    let mut t_max = [f64::INFINITY; 3];
    let mut t_delta = [f64::INFINITY; 3];
    for a in 0..3 {
        idx[a] = (((entry[a] - min[a]) / cell).floor() as i64).clamp(0, last);
        let d = ray.direction[a];
        if d > 0.0 {
            step[a] = 1;
            t_max[a] = (min[a] + (idx[a] + 1) as f64 * cell - ray.origin[a]) / d;
            t_delta[a] = cell / d;
        } else if d < 0.0 {
            step[a] = -1;
            t_max[a] = (min[a] + idx[a] as f64 * cell - ray.origin[a]) / d;
            t_delta[a] = -cell / d;
        }
    }
    let mut t = t0;
    loop {
        let flat = ((idx[2] * dims as i64 + idx[1]) * dims as i64 + idx[0]) as usize;
        if occupancy[flat] {
            return Some((t, colors[flat]));
        }
        let a = if t_max[0] <= t_max[1] && t_max[0] <= t_max[2] {
            0
        } else if t_max[1] <= t_max[2] {
            1
        } else {
            2
        };
        if t_max[a] > t1 {
            return None;
        }
        t = t_max[a];
        idx[a] += step[a];
        if idx[a] < 0 || idx[a] > last {
            return None;
        }
        t_max[a] += t_delta[a];
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedView {
    /// `[H, W, 3]` in `[0, 1]`.
    pub rgb: Tensor,
    /// `[H, W]`, 0 on a miss.
    pub depth: Tensor,
    pub camera: Camera,
}

/// Renders at the camera's own resolution.
pub fn raycast_render(scene: &SyntheticScene, camera: &Camera) -> RenderedView {
    let (h, w) = (camera.intrinsics.height, camera.intrinsics.width);
    let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..h)
        .into_par_iter()
        .map(|i| {
            let mut rgb = Vec::with_capacity(3 * w);
            let mut depth = Vec::with_capacity(w);
            for j in 0..w {
                let ray = pixel_ray(camera, j as f64 + 0.5, i as f64 + 0.5);
                match scene.intersect(&ray) {
                    Some((t, c)) => {
                        rgb.extend_from_slice(&c);
                        depth.push(t);
                    }
                    None => {
                        rgb.extend_from_slice(&BACKGROUND);
                        depth.push(0.0);
                    }
                }
            }
            (rgb, depth)
        })
        .collect();
    let (rgb, depth): (Vec<Vec<f64>>, Vec<Vec<f64>>) = rows.into_iter().unzip();
    RenderedView {
        rgb: Tensor::new(vec![h, w, 3], rgb.concat()).expect("rgb"),
        depth: Tensor::new(vec![h, w], depth.concat()).expect("depth"),
        camera: *camera,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiviewRenderSet {
    pub views: Vec<RenderedView>,
    /// Ring angles of the source layout, one per view.
    pub meta: Vec<ViewMeta>,
}

impl MultiviewRenderSet {
    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }

    pub fn rgb_maps(&self) -> Vec<Tensor> {
        self.views.iter().map(|v| v.rgb.clone()).collect()
    }

    pub fn layout(&self) -> ViewLayout {
        ViewLayout {
            cameras: self.views.iter().map(|v| v.camera).collect(),
            meta: self.meta.clone(),
        }
    }

    /// `rgb_XXX.etz` and `depth_XXX.etz` per view, optional `rgb_XXX.ppm`.
    pub fn write(&self, dir: impl AsRef<Path>, ppm: bool) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        for (i, v) in self.views.iter().enumerate() {
            tensor_write(&v.rgb, dir.join(format!("rgb_{i:03}.etz")))?;
            tensor_write(&v.depth, dir.join(format!("depth_{i:03}.etz")))?;
            if ppm {
                write_ppm(&v.rgb, dir.join(format!("rgb_{i:03}.ppm")))?;
            }
        }
        Ok(())
    }
}

/// One render per layout view at `height × width`, keeping each camera's
/// field of view.
pub fn make_dataset(scene: &SyntheticScene, layout: &ViewLayout, height: usize, width: usize) -> Result<MultiviewRenderSet> {
    let mut views = Vec::with_capacity(layout.len());
    for cam in &layout.cameras {
        let intrinsics = crate::camera::CameraIntrinsics::new(width, height, cam.intrinsics.fov_y)?;
        views.push(raycast_render(scene, &Camera { intrinsics, pose: cam.pose }));
    }
    Ok(MultiviewRenderSet { views, meta: layout.meta.clone() })
}

/// Binary 8-bit PPM of a `[H, W, 3]` image in `[0, 1]`.
pub fn write_ppm(rgb: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let (h, w) = match *rgb.shape() {
        [h, w, 3] => (h, w),
        _ => return Err(Error::shape("ppm", rgb.shape(), &[0, 0, 3])),
    };
    let mut out = Vec::with_capacity(20 + 3 * h * w);
    write!(out, "P6\n{w} {h}\n255\n")?;
    out.extend(rgb.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    fs::write(path, out)?;
    Ok(())
}

/// Box-filter downsampling of `[H, W, C]` by an integer factor.
pub fn downsample(image: &Tensor, factor: usize) -> Result<Tensor> {
    let (h, w, c) = match *image.shape() {
        [h, w, c] => (h, w, c),
        _ => return Err(Error::shape("downsample", image.shape(), &[0, 0, 0])),
    };
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::InvalidArgument(format!("{h}x{w} is not divisible by {factor}")));
    }
    let (ho, wo) = (h / factor, w / factor);
    let scale = 1.0 / (factor * factor) as f64;
    let mut out = vec![0.0; ho * wo * c];
    for i in 0..h {
        for j in 0..w {
            let o = ((i / factor) * wo + j / factor) * c;
            for (ov, v) in out[o..o + c].iter_mut().zip(image.row(i * w + j)) {
                *ov += scale * v;
            }
        }
    }
    Tensor::new(vec![ho, wo, c], out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrespondenceReport {
    pub target: usize,
    pub k: usize,
    pub s: usize,
    pub foreground_pixels: usize,
    /// Reference lookups that entered the statistics.
    pub compared: usize,
    pub occluded: usize,
    pub out_of_frame: usize,
    /// Lookups whose bilinear footprint touches background.
    pub boundary: usize,
    pub hit_rate: f64,
    pub mean_color_err: f64,
    pub max_color_err: f64,
    /// No foreground pixel or nothing left to compare.
    pub empty: bool,
}

/// For every foreground target pixel, takes the depth bin closest to the
/// true depth, looks the color up at that sample in each reference view
/// (the target itself when `k = 1`) and compares with the target pixel.
/// Color error is the largest per-channel absolute difference.
pub fn oracle_correspondence_check(
    renders: &MultiviewRenderSet,
    target: usize,
    k: usize,
    s: usize,
    near: f64,
    far: f64,
) -> Result<CorrespondenceReport> {
    if target >= renders.len() {
        return Err(Error::range("target index", format!("{target} >= {}", renders.len())));
    }
    let layout = renders.layout();
    let tv = &renders.views[target];
    let (h, w) = (tv.camera.intrinsics.height, tv.camera.intrinsics.width);
    let plan = plan_samples(&layout, target, h, w, k, s, near, far)?;
    let maps = renders.rgb_maps();
    let gathered = plan.gather(&maps)?;
    let bin = (far - near) / s as f64;
    let tol = 0.5 * bin + 0.05;
    let refs: Vec<usize> = if k == 1 { vec![0] } else { (1..k).collect() };
    let mut report = CorrespondenceReport {
        target,
        k,
        s,
        foreground_pixels: 0,
        compared: 0,
        occluded: 0,
        out_of_frame: 0,
        boundary: 0,
        hit_rate: 0.0,
        mean_color_err: 0.0,
        max_color_err: 0.0,
        empty: true,
    };
    let mut total = 0.0;
    for p in 0..h * w {
        let d = tv.depth.data()[p];
        if d <= 0.0 {
            continue;
        }
        report.foreground_pixels += 1;
        let best = plan
            .depths
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - d).abs().total_cmp(&(b.1 - d).abs()))
            .map(|(i, _)| i)
            .expect("at least one sample");
        let point = plan.point(p, best);
        let want = tv.rgb.row(p);
        for &kk in &refs {
            let e = plan.entry(kk, p, best);
            let Some(taps) = &plan.taps[e] else {
                report.out_of_frame += 1;
                continue;
            };
            let view = &renders.views[plan.view_indices[kk]];
            let ref_depth = view.depth.data();
            if taps.index.iter().any(|&i| ref_depth[i] <= 0.0) {
                report.boundary += 1;
                continue;
            }
            let proj = project_point(&view.camera.intrinsics, &view.camera.pose, &point);
            let (ui, vi) = (proj.u.floor() as usize, proj.v.floor() as usize);
            let surface = ref_depth[vi.min(h - 1) * w + ui.min(w - 1)];
            let dist = (point - view.camera.pose.center()).norm();
            if surface < dist - tol {
                report.occluded += 1;
                continue;
            }
            let got = &gathered.data()[e * 3..(e + 1) * 3];
            let err = got.iter().zip(want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            total += err;
            report.max_color_err = report.max_color_err.max(err);
            report.compared += 1;
        }
    }
    if report.compared > 0 {
        report.empty = false;
        report.mean_color_err = total / report.compared as f64;
        report.hit_rate = report.compared as f64 / (report.foreground_pixels * refs.len()) as f64;
    }
    Ok(report)
}
