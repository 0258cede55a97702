//! Point clouds, similarity poses restricted to yaw, and the pinhole camera.
//!
//! Frames are right-handed with +Y as the vertical axis. A yaw of `θ` maps the
//! unit x axis to `(cos θ, 0, -sin θ)`. Camera frames look down +Z and pixel
//! centers sit at integer `(u, v)` coordinates.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point3 = [f64; 3];
pub type Pixel = [f64; 2];

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    points: Vec<Point3>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>) -> Result<Self> {
        if let Some(i) = points
            .iter()
            .position(|p| !p.iter().all(|c| c.is_finite()))
        {
            return Err(Error::invalid(format!("point {i} has a non-finite coordinate")));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn into_points(self) -> Vec<Point3> {
        self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub(crate) fn require_nonempty(&self, what: &str) -> Result<()> {
        if self.points.is_empty() {
            Err(Error::invalid(format!("{what} point cloud is empty")))
        } else {
            Ok(())
        }
    }

    pub fn centroid(&self) -> Option<Point3> {
        if self.points.is_empty() {
            return None;
        }
        let mut c = [0.0; 3];
        for p in &self.points {
            for k in 0..3 {
                c[k] += p[k];
            }
        }
        let n = self.points.len() as f64;
        Some([c[0] / n, c[1] / n, c[2] / n])
    }

    /// Axis-aligned bounding box as `(min, max)`.
    pub fn bounds(&self) -> Option<(Point3, Point3)> {
        let first = *self.points.first()?;
        let mut lo = first;
        let mut hi = first;
        for p in &self.points[1..] {
            for k in 0..3 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        Some((lo, hi))
    }

    pub fn bbox_diagonal(&self) -> f64 {
        match self.bounds() {
            Some((lo, hi)) => norm3(sub3(hi, lo)),
            None => 0.0,
        }
    }

    /// Every `stride`-th point, keeping order. Used to bound optimizer cost.
    pub fn subsample(&self, max_points: usize) -> PointCloud {
        if max_points == 0 || self.points.len() <= max_points {
            return self.clone();
        }
        let stride = self.points.len().div_ceil(max_points);
        PointCloud {
            points: self.points.iter().step_by(stride).copied().collect(),
        }
    }

    pub fn scaled(&self, factor: f64) -> PointCloud {
        PointCloud {
            points: self
                .points
                .iter()
                .map(|p| [p[0] * factor, p[1] * factor, p[2] * factor])
                .collect(),
        }
    }

    pub fn concat<'a>(clouds: impl IntoIterator<Item = &'a PointCloud>) -> PointCloud {
        PointCloud {
            points: clouds
                .into_iter()
                .flat_map(|c| c.points.iter().copied())
                .collect(),
        }
    }
}

impl From<PointCloud> for Vec<Point3> {
    fn from(c: PointCloud) -> Self {
        c.points
    }
}

/// Similarity transform with yaw-only rotation: `p' = s·R_y(yaw)·p + t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub translation: Point3,
    pub yaw: f64,
    pub scale: f64,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn new(translation: Point3, yaw: f64, scale: f64) -> Result<Self> {
        let pose = Pose {
            translation,
            yaw: wrap_angle(yaw),
            scale,
        };
        pose.validate()?;
        Ok(pose)
    }

    pub fn identity() -> Self {
        Pose {
            translation: [0.0; 3],
            yaw: 0.0,
            scale: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = self.translation.iter().all(|c| c.is_finite())
            && self.yaw.is_finite()
            && self.scale.is_finite();
        if !finite {
            return Err(Error::invalid("pose has non-finite parameters"));
        }
        if self.scale <= 0.0 {
            return Err(Error::invalid(format!("pose scale must be positive, got {}", self.scale)));
        }
        Ok(())
    }

    pub fn as_array(&self) -> [f64; 5] {
        let t = self.translation;
        [t[0], t[1], t[2], self.yaw, self.scale]
    }

    /// Inverse of the parameter packing in [`Pose::as_array`]; yaw is wrapped.
    pub fn from_array(p: [f64; 5]) -> Self {
        Pose {
            translation: [p[0], p[1], p[2]],
            yaw: wrap_angle(p[3]),
            scale: p[4],
        }
    }

    pub fn rotation(&self) -> [[f64; 3]; 3] {
        yaw_matrix(self.yaw)
    }

    pub fn transform_point(&self, p: Point3) -> Point3 {
        let r = rotate_yaw(self.yaw, p);
        let s = self.scale;
        let t = self.translation;
        [s * r[0] + t[0], s * r[1] + t[1], s * r[2] + t[2]]
    }

    /// Exact inverse: `t' = -(1/s)·R(-θ)·t`, `θ' = -θ`, `s' = 1/s`.
    pub fn inverse(&self) -> Pose {
        let inv_s = 1.0 / self.scale;
        let rt = rotate_yaw(-self.yaw, self.translation);
        Pose {
            translation: [-inv_s * rt[0], -inv_s * rt[1], -inv_s * rt[2]],
            yaw: wrap_angle(-self.yaw),
            scale: inv_s,
        }
    }

    /// `self ∘ inner`: apply `inner` first, then `self`.
    pub fn compose(&self, inner: &Pose) -> Pose {
        let t = self.transform_point(inner.translation);
        Pose {
            translation: t,
            yaw: wrap_angle(self.yaw + inner.yaw),
            scale: self.scale * inner.scale,
        }
    }
}

/// Wraps an angle into `[-π, π)`.
pub fn wrap_angle(theta: f64) -> f64 {
    if !theta.is_finite() {
        return theta;
    }
    let two_pi = 2.0 * PI;
    let mut w = (theta + PI).rem_euclid(two_pi) - PI;
    if w >= PI {
        w -= two_pi;
    }
    w
}

pub fn yaw_matrix(theta: f64) -> [[f64; 3]; 3] {
    let (s, c) = theta.sin_cos();
    [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]]
}

pub(crate) fn rotate_yaw(theta: f64, p: Point3) -> Point3 {
    let (s, c) = theta.sin_cos();
    [c * p[0] + s * p[2], p[1], -s * p[0] + c * p[2]]
}

/// Derivative of `R_y(θ)·p` with respect to `θ`.
pub(crate) fn rotate_yaw_derivative(theta: f64, p: Point3) -> Point3 {
    let (s, c) = theta.sin_cos();
    [-s * p[0] + c * p[2], 0.0, -c * p[0] - s * p[2]]
}

pub(crate) fn sub3(a: Point3, b: Point3) -> Point3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn norm3(a: Point3) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

pub fn apply_pose(pose: &Pose, cloud: &PointCloud) -> Result<PointCloud> {
    pose.validate()?;
    cloud.require_nonempty("input")?;
    Ok(PointCloud {
        points: cloud.points.iter().map(|&p| pose.transform_point(p)).collect(),
    })
}

/// Unit normals from the principal axes of each point's `k` nearest
/// neighbors, oriented away from the cloud centroid.
pub fn estimate_normals(cloud: &PointCloud, k: usize) -> Result<Vec<Point3>> {
    cloud.require_nonempty("input")?;
    if k < 3 {
        return Err(Error::invalid("normal estimation needs at least 3 neighbors"));
    }
    let center = cloud.centroid().expect("non-empty");
    let tree = crate::spatial::KdTree::build(&cloud.points);
    Ok(cloud
        .points
        .iter()
        .map(|p| {
            let nb = tree.k_nearest(p, k);
            let mut mean = [0.0; 3];
            for &(i, _) in &nb {
                for a in 0..3 {
                    mean[a] += cloud.points[i][a] / nb.len() as f64;
                }
            }
            let mut cov = [[0.0; 3]; 3];
            for &(i, _) in &nb {
                let d = sub3(cloud.points[i], mean);
                for a in 0..3 {
                    for b in 0..3 {
                        cov[a][b] += d[a] * d[b];
                    }
                }
            }
            let mut n = smallest_eigenvector(cov);
            let out = sub3(*p, center);
            if n[0] * out[0] + n[1] * out[1] + n[2] * out[2] < 0.0 {
                n = [-n[0], -n[1], -n[2]];
            }
            n
        })
        .collect())
}

/// Eigenvector of the smallest eigenvalue of a symmetric 3×3 matrix (cyclic Jacobi).
fn smallest_eigenvector(mut a: [[f64; 3]; 3]) -> Point3 {
    let mut v = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    for _ in 0..50 {
        let off = a[0][1].abs() + a[0][2].abs() + a[1][2].abs();
        let scale = a[0][0].abs() + a[1][1].abs() + a[2][2].abs();
        if off <= 1e-15 * scale || off == 0.0 {
            break;
        }
        for (p, q) in [(0, 1), (0, 2), (1, 2)] {
            if a[p][q] == 0.0 {
                continue;
            }
            let theta = 0.5 * (a[q][q] - a[p][p]) / a[p][q];
            let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
            let t = if theta == 0.0 { 1.0 } else { t };
            let c = 1.0 / (t * t + 1.0).sqrt();
            let s = t * c;
            for r in 0..3 {
                let (arp, arq) = (a[r][p], a[r][q]);
                a[r][p] = c * arp - s * arq;
                a[r][q] = s * arp + c * arq;
            }
            for r in 0..3 {
                let (apr, aqr) = (a[p][r], a[q][r]);
                a[p][r] = c * apr - s * aqr;
                a[q][r] = s * apr + c * aqr;
            }
            for r in 0..3 {
                let (vrp, vrq) = (v[r][p], v[r][q]);
                v[r][p] = c * vrp - s * vrq;
                v[r][q] = s * vrp + c * vrq;
            }
        }
    }
    let k = (0..3).min_by(|&i, &j| a[i][i].total_cmp(&a[j][j])).expect("three entries");
    let n = [v[0][k], v[1][k], v[2][k]];
    let len = norm3(n);
    [n[0] / len, n[1] / len, n[2] / len]
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self> {
        let k = CameraIntrinsics {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    /// Square-pixel camera with the principal point at the image center.
    pub fn from_fov(width: u32, height: u32, horizontal_fov: f64) -> Result<Self> {
        let f = 0.5 * width as f64 / (0.5 * horizontal_fov).tan();
        Self::new(f, f, 0.5 * (width as f64 - 1.0), 0.5 * (height as f64 - 1.0), width, height)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.fx.is_finite()
            && self.fy.is_finite()
            && self.fx > 0.0
            && self.fy > 0.0
            && self.cx >= 0.0
            && self.cy >= 0.0
            && self.cx < self.width as f64
            && self.cy < self.height as f64;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid camera intrinsics {self:?}")))
        }
    }

    #[inline]
    pub fn project_point(&self, p: Point3) -> Pixel {
        [self.fx * p[0] / p[2] + self.cx, self.fy * p[1] / p[2] + self.cy]
    }

    /// Pixel that owns a continuous image coordinate, if inside the image.
    pub fn pixel_index(&self, uv: Pixel) -> Option<(u32, u32)> {
        let u = (uv[0] + 0.5).floor();
        let v = (uv[1] + 0.5).floor();
        if u < 0.0 || v < 0.0 || u >= self.width as f64 || v >= self.height as f64 {
            None
        } else {
            Some((u as u32, v as u32))
        }
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }
}

pub fn project(intrinsics: &CameraIntrinsics, cloud: &PointCloud) -> Result<Vec<Pixel>> {
    cloud
        .points
        .iter()
        .enumerate()
        .map(|(index, &p)| {
            if p[2] <= 0.0 {
                Err(Error::BehindCamera { index, z: p[2] })
            } else {
                Ok(intrinsics.project_point(p))
            }
        })
        .collect()
}

/// Per-pixel z-depth in meters, row-major. Non-positive or non-finite entries
/// are invalid.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    width: u32,
    height: u32,
    values: Vec<f64>,
}

impl DepthMap {
    pub fn new(width: u32, height: u32, values: Vec<f64>) -> Result<Self> {
        if values.len() != width as usize * height as usize {
            return Err(Error::invalid(format!(
                "depth map has {} values, expected {}x{}",
                values.len(),
                width,
                height
            )));
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    pub fn empty(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            values: vec![0.0; width as usize * height as usize],
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn get(&self, u: u32, v: u32) -> Option<f64> {
        let d = self.values[v as usize * self.width as usize + u as usize];
        (d > 0.0 && d.is_finite()).then_some(d)
    }

    pub fn is_valid(&self, u: u32, v: u32) -> bool {
        self.get(u, v).is_some()
    }

    pub(crate) fn set(&mut self, u: u32, v: u32, d: f64) {
        self.values[v as usize * self.width as usize + u as usize] = d;
    }

    pub fn valid_count(&self) -> usize {
        self.values.iter().filter(|d| **d > 0.0 && d.is_finite()).count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InstanceMask {
    pub object_id: u32,
    width: u32,
    height: u32,
    pixels: Vec<bool>,
}

impl InstanceMask {
    pub fn new(object_id: u32, width: u32, height: u32, pixels: Vec<bool>) -> Result<Self> {
        if pixels.len() != width as usize * height as usize {
            return Err(Error::invalid(format!(
                "mask has {} pixels, expected {}x{}",
                pixels.len(),
                width,
                height
            )));
        }
        Ok(Self {
            object_id,
            width,
            height,
            pixels,
        })
    }

    pub fn empty(object_id: u32, width: u32, height: u32) -> Self {
        Self {
            object_id,
            width,
            height,
            pixels: vec![false; width as usize * height as usize],
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixels(&self) -> &[bool] {
        &self.pixels
    }

    #[inline]
    pub fn contains(&self, u: u32, v: u32) -> bool {
        self.pixels[v as usize * self.width as usize + u as usize]
    }

    pub(crate) fn set(&mut self, u: u32, v: u32, on: bool) {
        self.pixels[v as usize * self.width as usize + u as usize] = on;
    }

    pub fn count(&self) -> usize {
        self.pixels.iter().filter(|p| **p).count()
    }
}

/// Back-projects valid (and masked, when a mask is given) pixels in row-major
/// order: `((u - cx)·d/fx, (v - cy)·d/fy, d)`.
pub fn unproject(
    intrinsics: &CameraIntrinsics,
    depth: &DepthMap,
    mask: Option<&InstanceMask>,
) -> Result<PointCloud> {
    if depth.width != intrinsics.width || depth.height != intrinsics.height {
        return Err(Error::invalid(format!(
            "depth map is {}x{} but intrinsics describe {}x{}",
            depth.width, depth.height, intrinsics.width, intrinsics.height
        )));
    }
    if let Some(m) = mask {
        if m.width != depth.width || m.height != depth.height {
            return Err(Error::invalid(format!(
                "mask is {}x{} but depth map is {}x{}",
                m.width, m.height, depth.width, depth.height
            )));
        }
    }
    let mut points = Vec::new();
    for v in 0..depth.height {
        for u in 0..depth.width {
            if mask.is_some_and(|m| !m.contains(u, v)) {
                continue;
            }
            if let Some(d) = depth.get(u, v) {
                points.push([
                    (u as f64 - intrinsics.cx) * d / intrinsics.fx,
                    (v as f64 - intrinsics.cy) * d / intrinsics.fy,
                    d,
                ]);
            }
        }
    }
    if points.is_empty() {
        return Err(Error::EmptySegment);
    }
    Ok(PointCloud { points })
}
