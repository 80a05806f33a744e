//! Pinhole cameras, the ring-of-rings view layout, relative poses,
//! projection, fundamental matrices and nearest-view selection.
//!
//! Conventions: poses are world-to-camera (`x_cam = R·X + T`), the camera
//! looks down its +z axis with +x right and +y down, and pixel `(i, j)` has
//! its center at `(j + 0.5, i + 0.5)`. The world up axis is +z.

use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

pub const DEFAULT_RADIUS: f64 = 1.8;
pub const DEFAULT_FOV_Y_DEG: f64 = 40.0;
pub const DEFAULT_RESOLUTION: usize = 256;
/// Elevation rings of the training layout, in degrees.
pub const TRAIN_ELEVATIONS_DEG: [f64; 6] = [-10.0, 0.0, 10.0, 20.0, 30.0, 40.0];
pub const AZIMUTHS_PER_RING: usize = 16;
pub const EVAL_ELEVATION_DEG: f64 = 30.0;

const POSE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub width: usize,
    pub height: usize,
    pub fov_y: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    /// Principal point at the image center.
    pub fn new(width: usize, height: usize, fov_y: f64) -> Result<Self> {
        Self::with_principal_point(width, height, fov_y, width as f64 / 2.0, height as f64 / 2.0)
    }

    pub fn with_principal_point(width: usize, height: usize, fov_y: f64, cx: f64, cy: f64) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument(format!("image size {width}x{height}")));
        }
        if !(fov_y > 0.0 && fov_y < std::f64::consts::PI) {
            return Err(Error::InvalidArgument(format!("fov_y {fov_y} not in (0, pi)")));
        }
        Ok(Self { width, height, fov_y, cx, cy })
    }

    pub fn square(resolution: usize) -> Result<Self> {
        Self::new(resolution, resolution, DEFAULT_FOV_Y_DEG.to_radians())
    }

    /// Focal length in pixels, shared by both axes.
    pub fn focal(&self) -> f64 {
        (self.height as f64 / 2.0) / (self.fov_y / 2.0).tan()
    }

    pub fn matrix(&self) -> Mat3 {
        let f = self.focal();
        Mat3::new(f, 0.0, self.cx, 0.0, f, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn inverse_matrix(&self) -> Mat3 {
        let f = self.focal();
        Mat3::new(1.0 / f, 0.0, -self.cx / f, 0.0, 1.0 / f, -self.cy / f, 0.0, 0.0, 1.0)
    }

    pub fn contains(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && u < self.width as f64 && v >= 0.0 && v < self.height as f64
    }
}

/// World-to-camera rigid transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl CameraPose {
    pub fn identity() -> Self {
        Self {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    /// Validates `RᵀR = I` and `det R = 1` within 1e-9.
    pub fn new(rotation: Mat3, translation: Vec3) -> Result<Self> {
        let pose = Self { rotation, translation };
        if pose.orthonormality_error() > POSE_TOL {
            return Err(Error::InvalidArgument(format!(
                "rotation is not orthonormal (error {:e})",
                pose.orthonormality_error()
            )));
        }
        Ok(pose)
    }

    /// `max(‖RᵀR − I‖_max, |det R − 1|)`.
    pub fn orthonormality_error(&self) -> f64 {
        let r = &self.rotation;
        let gram = (r.transpose() * r - Mat3::identity()).abs().max();
        gram.max((r.determinant() - 1.0).abs())
    }

    /// Camera center in world coordinates, `−Rᵀ T`.
    pub fn center(&self) -> Vec3 {
        -(self.rotation.transpose() * self.translation)
    }

    /// Principal axis (+z of the camera) in world coordinates.
    pub fn forward(&self) -> Vec3 {
        self.rotation.row(2).transpose()
    }

    pub fn to_camera(&self, world: &Vec3) -> Vec3 {
        self.rotation * world + self.translation
    }

    pub fn to_world(&self, cam: &Vec3) -> Vec3 {
        self.rotation.transpose() * (cam - self.translation)
    }

    /// `other ∘ self`: first apply `self`, then `other`.
    pub fn then(&self, other: &CameraPose) -> CameraPose {
        CameraPose {
            rotation: other.rotation * self.rotation,
            translation: other.rotation * self.translation + other.translation,
        }
    }

    pub fn inverse(&self) -> CameraPose {
        let rt = self.rotation.transpose();
        CameraPose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Distance from `point` to the principal axis line.
    pub fn axis_distance_to(&self, point: &Vec3) -> f64 {
        let c = self.center();
        (point - c).cross(&self.forward()).norm()
    }
}

/// Pose of a camera at `position` whose principal axis points at `target`.
///
/// If `up_hint` is parallel to the view direction the hint falls back to
/// +x, then +y.
pub fn make_lookat_pose(position: Vec3, target: Vec3, up_hint: Vec3) -> Result<CameraPose> {
    let dir = target - position;
    if dir.norm() < 1e-12 {
        return Err(Error::Degenerate("look-at position equals target".into()));
    }
    let forward = dir.normalize();
    let hints = [up_hint, Vec3::x(), Vec3::y()];
    let right = hints
        .iter()
        .map(|h| forward.cross(h))
        .find(|r| r.norm() > 1e-9)
        .ok_or_else(|| Error::Degenerate("no usable up hint".into()))?
        .normalize();
    let down = forward.cross(&right);
    let rotation = Mat3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
    Ok(CameraPose {
        rotation,
        translation: -(rotation * position),
    })
}

/// Maps coordinates of camera `a` to coordinates of camera `b`.
pub fn relative_transform(a: &CameraPose, b: &CameraPose) -> CameraPose {
    a.inverse().then(b)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    pub intrinsics: CameraIntrinsics,
    pub pose: CameraPose,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViewMeta {
    pub elevation_deg: f64,
    pub azimuth_deg: f64,
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewLayout {
    pub cameras: Vec<Camera>,
    pub meta: Vec<ViewMeta>,
}

/// Position on the sphere of radius `radius` at the given angles (z up).
pub fn spherical_position(elevation_deg: f64, azimuth_deg: f64, radius: f64) -> Vec3 {
    let (e, a) = (elevation_deg.to_radians(), azimuth_deg.to_radians());
    Vec3::new(radius * e.cos() * a.cos(), radius * e.cos() * a.sin(), radius * e.sin())
}

/// One ring per elevation with `azimuth_count` cameras at `360°·j / count`,
/// all looking at the origin.
pub fn generate_layout(
    elevations_deg: &[f64],
    azimuth_count: usize,
    radius: f64,
    intrinsics: CameraIntrinsics,
) -> Result<ViewLayout> {
    if elevations_deg.is_empty() {
        return Err(Error::InvalidArgument("no elevations given".into()));
    }
    if azimuth_count == 0 {
        return Err(Error::InvalidArgument("azimuth count must be >= 1".into()));
    }
    if !(radius > 0.0) {
        return Err(Error::InvalidArgument(format!("radius {radius} must be > 0")));
    }
    let mut cameras = Vec::new();
    let mut meta = Vec::new();
    for &elevation_deg in elevations_deg {
        for j in 0..azimuth_count {
            let azimuth_deg = 360.0 * j as f64 / azimuth_count as f64;
            let position = spherical_position(elevation_deg, azimuth_deg, radius);
            let pose = make_lookat_pose(position, Vec3::zeros(), Vec3::z())?;
            cameras.push(Camera { intrinsics, pose });
            meta.push(ViewMeta { elevation_deg, azimuth_deg, radius });
        }
    }
    let layout = ViewLayout { cameras, meta };
    layout.validate()?;
    Ok(layout)
}

impl ViewLayout {
    /// 96 views: six elevation rings of 16 azimuths at the default radius.
    pub fn training_default(intrinsics: CameraIntrinsics) -> Result<Self> {
        generate_layout(&TRAIN_ELEVATIONS_DEG, AZIMUTHS_PER_RING, DEFAULT_RADIUS, intrinsics)
    }

    /// 16 views on the fixed 30° elevation ring.
    pub fn eval_ring(intrinsics: CameraIntrinsics) -> Result<Self> {
        generate_layout(&[EVAL_ELEVATION_DEG], AZIMUTHS_PER_RING, DEFAULT_RADIUS, intrinsics)
    }

    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }

    /// Subset of views, in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<ViewLayout> {
        let mut out = ViewLayout { cameras: Vec::new(), meta: Vec::new() };
        for &i in indices {
            if i >= self.len() {
                return Err(Error::range("view index", format!("{i} >= {}", self.len())));
            }
            out.cameras.push(self.cameras[i]);
            out.meta.push(self.meta[i]);
        }
        Ok(out)
    }

    /// Checks pose orthonormality, origin-directed principal axes and unique
    /// (elevation, azimuth) pairs.
    pub fn validate(&self) -> Result<()> {
        if self.meta.len() != self.cameras.len() {
            return Err(Error::InvalidArgument("camera/metadata count mismatch".into()));
        }
        for (i, cam) in self.cameras.iter().enumerate() {
            let e = cam.pose.orthonormality_error();
            if e > POSE_TOL {
                return Err(Error::InvalidArgument(format!("view {i}: rotation error {e:e}")));
            }
            let d = cam.pose.axis_distance_to(&Vec3::zeros());
            if d > POSE_TOL {
                return Err(Error::InvalidArgument(format!("view {i}: axis misses origin by {d:e}")));
            }
        }
        for i in 0..self.meta.len() {
            for j in 0..i {
                let (a, b) = (&self.meta[i], &self.meta[j]);
                if a.elevation_deg == b.elevation_deg && a.azimuth_deg == b.azimuth_deg {
                    return Err(Error::InvalidArgument(format!("views {j} and {i} share angles")));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        if self.meta.len() != self.cameras.len() {
            return Err(Error::InvalidArgument("camera/metadata count mismatch".into()));
        }
        let views = self
            .cameras
            .iter()
            .zip(&self.meta)
            .enumerate()
            .map(|(index, (cam, m))| ViewRecord {
                index,
                elevation_deg: m.elevation_deg,
                azimuth_deg: m.azimuth_deg,
                radius: m.radius,
                rotation: cam.pose.rotation.transpose().as_slice().try_into().expect("3x3"),
                translation: [cam.pose.translation.x, cam.pose.translation.y, cam.pose.translation.z],
                width: cam.intrinsics.width,
                height: cam.intrinsics.height,
                fov_y_deg: cam.intrinsics.fov_y.to_degrees(),
            })
            .collect();
        Ok(serde_json::to_string_pretty(&LayoutFile { views })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: LayoutFile = serde_json::from_str(text)?;
        let mut views = file.views;
        views.sort_by_key(|v| v.index);
        let mut out = ViewLayout { cameras: Vec::new(), meta: Vec::new() };
        for (pos, v) in views.iter().enumerate() {
            if v.index != pos {
                return Err(Error::InvalidArgument(format!("view indices not contiguous at {pos}")));
            }
            let intrinsics = CameraIntrinsics::new(v.width, v.height, v.fov_y_deg.to_radians())?;
            let rotation = Mat3::from_row_slice(&v.rotation);
            let pose = CameraPose::new(rotation, Vec3::from_row_slice(&v.translation))?;
            out.cameras.push(Camera { intrinsics, pose });
            out.meta.push(ViewMeta {
                elevation_deg: v.elevation_deg,
                azimuth_deg: v.azimuth_deg,
                radius: v.radius,
            });
        }
        Ok(out)
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn read_json(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// On-disk camera record; `rotation` is world-to-camera, row-major.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ViewRecord {
    pub index: usize,
    pub elevation_deg: f64,
    pub azimuth_deg: f64,
    pub radius: f64,
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
    pub width: usize,
    pub height: usize,
    pub fov_y_deg: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayoutFile {
    pub views: Vec<ViewRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    /// Camera-space z.
    pub depth: f64,
    /// False when the point is not strictly in front of the camera.
    pub valid: bool,
}

pub fn project_point(intr: &CameraIntrinsics, pose: &CameraPose, point: &Vec3) -> Projection {
    let x = pose.to_camera(point);
    let depth = x.z;
    if depth <= 1e-9 {
        return Projection { u: f64::NAN, v: f64::NAN, depth, valid: false };
    }
    let f = intr.focal();
    Projection {
        u: f * x.x / depth + intr.cx,
        v: f * x.y / depth + intr.cy,
        depth,
        valid: true,
    }
}

/// World point at camera-space depth `depth` behind pixel `(u, v)`.
pub fn unproject(intr: &CameraIntrinsics, pose: &CameraPose, u: f64, v: f64, depth: f64) -> Vec3 {
    let f = intr.focal();
    let cam = Vec3::new((u - intr.cx) / f * depth, (v - intr.cy) / f * depth, depth);
    pose.to_world(&cam)
}

/// Rank-2 fundamental matrix with unit Frobenius norm, mapping pixels of the
/// first camera to epipolar lines of the second: `p₂ᵀ F p₁ = 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FundamentalMatrix(pub Mat3);

impl FundamentalMatrix {
    pub fn matrix(&self) -> &Mat3 {
        &self.0
    }

    /// `p₂ᵀ F p₁` for pixel coordinates lifted to `(u, v, 1)`.
    pub fn residual(&self, p1: (f64, f64), p2: (f64, f64)) -> f64 {
        let a = Vec3::new(p1.0, p1.1, 1.0);
        let b = Vec3::new(p2.0, p2.1, 1.0);
        b.dot(&(self.0 * a))
    }

    /// Epipolar line `(a, b, c)` in the second image for pixel `p1`.
    pub fn line_in_second(&self, p1: (f64, f64)) -> Vec3 {
        self.0 * Vec3::new(p1.0, p1.1, 1.0)
    }
}

pub fn skew(t: &Vec3) -> Mat3 {
    Mat3::new(0.0, -t.z, t.y, t.z, 0.0, -t.x, -t.y, t.x, 0.0)
}

/// `F = K₂⁻ᵀ [t]× R K₁⁻¹` where `(R, t)` maps camera-1 to camera-2 coordinates.
pub fn fundamental_matrix(cam1: &Camera, cam2: &Camera) -> Result<FundamentalMatrix> {
    let baseline = (cam1.pose.center() - cam2.pose.center()).norm();
    if baseline <= 1e-9 {
        return Err(Error::Degenerate(format!("camera baseline {baseline:e}")));
    }
    let rel = relative_transform(&cam1.pose, &cam2.pose);
    let essential = skew(&rel.translation) * rel.rotation;
    let f = cam2.intrinsics.inverse_matrix().transpose() * essential * cam1.intrinsics.inverse_matrix();
    Ok(FundamentalMatrix(f / f.norm()))
}

/// Great-circle angle between the camera centers' directions from the origin.
pub fn view_angle(a: &CameraPose, b: &CameraPose) -> f64 {
    let (ca, cb) = (a.center(), b.center());
    ca.cross(&cb).norm().atan2(ca.dot(&cb))
}

/// Angles closer than this are ties and fall back to index order.
pub const VIEW_TIE_TOL: f64 = 1e-9;

/// The target followed by its `k − 1` nearest views by angular distance,
/// ties broken by ascending index.
pub fn select_nearest_views(layout: &ViewLayout, target_index: usize, k: usize) -> Result<Vec<usize>> {
    let n = layout.len();
    if target_index >= n {
        return Err(Error::range("target index", format!("{target_index} >= {n}")));
    }
    if k == 0 || k > n {
        return Err(Error::range("K", format!("{k} not in 1..={n}")));
    }
    let target = &layout.cameras[target_index].pose;
    let mut others: Vec<(i64, usize)> = (0..n)
        .filter(|&i| i != target_index)
        .map(|i| {
            let angle = view_angle(target, &layout.cameras[i].pose);
            ((angle / VIEW_TIE_TOL).round() as i64, i)
        })
        .collect();
    others.sort_unstable();
    let mut out = vec![target_index];
    out.extend(others.into_iter().take(k - 1).map(|(_, i)| i));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::DeterministicRng;

    fn intr() -> CameraIntrinsics {
        CameraIntrinsics::square(64).unwrap()
    }

    fn random_pose(rng: &mut DeterministicRng) -> CameraPose {
        let u = rng.unit_vector();
        let pos = Vec3::new(u[0], u[1], u[2]) * rng.uniform_range(1.5, 3.0);
        let jitter = Vec3::new(rng.normal(), rng.normal(), rng.normal()) * 0.1;
        make_lookat_pose(pos, jitter, Vec3::z()).unwrap()
    }

    #[test]
    fn lookat_axis_aligned_cases() {
        let i = intr();
        for pos in [Vec3::new(0.0, 0.0, 2.0), Vec3::new(2.0, 0.0, 0.0)] {
            let pose = make_lookat_pose(pos, Vec3::zeros(), Vec3::y()).unwrap();
            assert!(pose.orthonormality_error() < 1e-12);
            assert!((pose.center() - pos).norm() < 1e-12);
            let p = project_point(&i, &pose, &Vec3::zeros());
            assert!(p.valid);
            assert!((p.u - i.cx).abs() < 1e-9 && (p.v - i.cy).abs() < 1e-9);
            assert!((p.depth - 2.0).abs() < 1e-12);
        }
        let pose = make_lookat_pose(Vec3::new(0.0, 0.0, 2.0), Vec3::zeros(), Vec3::y()).unwrap();
        assert!((pose.forward() - Vec3::new(0.0, 0.0, -1.0)).norm() < 1e-12);
    }

    #[test]
    fn lookat_parallel_hint_falls_back() {
        let pose = make_lookat_pose(Vec3::new(0.0, 0.0, 2.0), Vec3::zeros(), Vec3::z()).unwrap();
        assert!(pose.orthonormality_error() < 1e-12);
        assert!(pose.axis_distance_to(&Vec3::zeros()) < 1e-12);
        // +x hint gives right = forward × x.
        let expected_right = Vec3::new(0.0, 0.0, -1.0).cross(&Vec3::x());
        assert!((pose.rotation.row(0).transpose() - expected_right).norm() < 1e-12);
    }

    #[test]
    fn lookat_rejects_coincident_target() {
        assert!(make_lookat_pose(Vec3::x(), Vec3::x(), Vec3::z()).is_err());
    }

    #[test]
    fn layout_sizes() {
        assert_eq!(ViewLayout::training_default(intr()).unwrap().len(), 96);
        let ring = ViewLayout::eval_ring(intr()).unwrap();
        assert_eq!(ring.len(), 16);
        assert!(ring.meta.iter().all(|m| m.elevation_deg == 30.0));
        let single = generate_layout(&[0.0], 1, 2.0, intr()).unwrap();
        assert!((single.cameras[0].pose.center() - Vec3::new(2.0, 0.0, 0.0)).norm() < 1e-12);
        assert!(generate_layout(&[], 4, 2.0, intr()).is_err());
        assert!(generate_layout(&[0.0], 0, 2.0, intr()).is_err());
    }

    #[test]
    fn relative_transform_cases() {
        let mut rng = DeterministicRng::new(4);
        let a = random_pose(&mut rng);
        let id = relative_transform(&a, &a);
        assert!((id.rotation - Mat3::identity()).abs().max() < 1e-12);
        assert!(id.translation.norm() < 1e-12);

        let rz = Mat3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        let b = CameraPose::new(rz, Vec3::zeros()).unwrap();
        let rel = relative_transform(&CameraPose::identity(), &b);
        assert!((rel.rotation - rz).abs().max() < 1e-15);
        assert!(rel.translation.norm() < 1e-15);

        let (b, c) = (random_pose(&mut rng), random_pose(&mut rng));
        let direct = relative_transform(&a, &c);
        let chained = relative_transform(&a, &b).then(&relative_transform(&b, &c));
        assert!((direct.rotation - chained.rotation).abs().max() < 1e-12);
        assert!((direct.translation - chained.translation).abs().max() < 1e-12);
    }

    #[test]
    fn projection_round_trip_and_behind_camera() {
        let mut rng = DeterministicRng::new(5);
        let i = intr();
        for _ in 0..200 {
            let pose = random_pose(&mut rng);
            let x = Vec3::new(rng.normal(), rng.normal(), rng.normal()) * 0.5;
            let p = project_point(&i, &pose, &x);
            assert!(p.valid);
            let back = unproject(&i, &pose, p.u, p.v, p.depth);
            assert!((back - x).norm() < 1e-9);
        }
        let pose = make_lookat_pose(Vec3::new(2.0, 0.0, 0.0), Vec3::zeros(), Vec3::z()).unwrap();
        assert!(!project_point(&i, &pose, &Vec3::new(3.0, 0.0, 0.0)).valid);
    }

    #[test]
    fn fundamental_matrix_constraint_and_epipole() {
        let mut rng = DeterministicRng::new(6);
        let i = intr();
        let c1 = Camera { intrinsics: i, pose: random_pose(&mut rng) };
        let c2 = Camera { intrinsics: i, pose: random_pose(&mut rng) };
        let f = fundamental_matrix(&c1, &c2).unwrap();
        assert!((f.0.norm() - 1.0).abs() < 1e-12);
        let sv = f.0.singular_values();
        assert!(sv.min() / sv.max() < 1e-9);
        let mut used = 0;
        while used < 100 {
            let x = Vec3::new(rng.normal(), rng.normal(), rng.normal()) * 0.5;
            let (p1, p2) = (project_point(&i, &c1.pose, &x), project_point(&i, &c2.pose, &x));
            if !(p1.valid && p2.valid) {
                continue;
            }
            used += 1;
            assert!(f.residual((p1.u, p1.v), (p2.u, p2.v)).abs() < 1e-9);
        }
        let e1 = project_point(&i, &c1.pose, &c2.pose.center());
        let e = Vec3::new(e1.u, e1.v, 1.0);
        assert!((f.0 * e).norm() / e.norm() < 1e-12);
    }

    #[test]
    fn fundamental_matrix_rejects_zero_baseline() {
        let pose = make_lookat_pose(Vec3::new(2.0, 0.0, 0.0), Vec3::zeros(), Vec3::z()).unwrap();
        let other = make_lookat_pose(Vec3::new(2.0, 0.0, 0.0), Vec3::new(0.0, 1.0, 0.0), Vec3::z()).unwrap();
        let c1 = Camera { intrinsics: intr(), pose };
        let c2 = Camera { intrinsics: intr(), pose: other };
        assert!(matches!(fundamental_matrix(&c1, &c2), Err(Error::Degenerate(_))));
    }

    #[test]
    fn nearest_views_on_ring() {
        let ring = ViewLayout::eval_ring(intr()).unwrap();
        assert_eq!(select_nearest_views(&ring, 0, 1).unwrap(), vec![0]);
        assert_eq!(select_nearest_views(&ring, 0, 4).unwrap(), vec![0, 1, 15, 2]);
        let mut all = select_nearest_views(&ring, 5, 16).unwrap();
        assert_eq!(all[0], 5);
        all.sort_unstable();
        assert_eq!(all, (0..16).collect::<Vec<_>>());
        assert!(select_nearest_views(&ring, 0, 0).is_err());
        assert!(select_nearest_views(&ring, 0, 17).is_err());
    }

    #[test]
    fn json_round_trip() {
        let layout = ViewLayout::training_default(intr()).unwrap();
        let back = ViewLayout::from_json(&layout.to_json().unwrap()).unwrap();
        assert_eq!(back.len(), 96);
        for (a, b) in layout.cameras.iter().zip(&back.cameras) {
            assert!((a.pose.rotation - b.pose.rotation).abs().max() < 1e-15);
            assert!((a.intrinsics.fov_y - b.intrinsics.fov_y).abs() < 1e-12);
        }
        back.validate().unwrap();
    }
}
