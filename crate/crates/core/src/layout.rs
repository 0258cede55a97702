//! Per-object pose recovery against observed surface points.
//!
//! The objective is `λ1·CD3(posed, surface) + λ2·CD2(proj(posed), proj(surface))`
//! over the pose parameters `(tx, ty, tz, yaw, scale)`. Gradients hold the
//! nearest-neighbor correspondences fixed; correspondences are refreshed at
//! every evaluation, ICP style.
//!
//! When the observed depth map is available the object-to-surface terms
//! become a free-space penalty. The surface-to-object terms already ask every
//! observed point to lie on the object; an object point is additionally
//! charged only when the camera would have seen it in front of whatever the
//! depth map recorded there. A point is exempt when it lies outside the image,
//! faces away from the camera, falls inside the object's own segment, or sits
//! behind the observed depth by more than `occlusion_margin`. The penalty is
//! normalized by the number of observable object points, so it vanishes when
//! the object stays inside its silhouette.

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    estimate_normals, rotate_yaw, rotate_yaw_derivative, CameraIntrinsics, DepthMap, Point3, PointCloud, Pose,
};
use crate::spatial::KdTree;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Descent {
    /// Plain gradient steps of `step_size`.
    Gradient,
    /// Gradient preconditioned by the Gauss-Newton matrix of the fixed-correspondence residuals.
    GaussNewton,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayoutConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub step_size: f64,
    pub max_iters: usize,
    pub tol: f64,
    pub yaw_starts: usize,
    pub descent: Descent,
    /// Both clouds are stride-subsampled to at most this many points (0 keeps all).
    pub max_points: usize,
    /// Depth slack in meters before an object point counts as hidden.
    pub occlusion_margin: f64,
}

impl Default for LayoutConfig {
    fn default() -> Self {
        crate::defaults::defaults().layout.clone()
    }
}

impl LayoutConfig {
    pub fn validate(&self) -> Result<()> {
        let fin = |x: f64| x.is_finite();
        if !(fin(self.lambda1) && fin(self.lambda2) && self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(Error::invalid("lambda1 and lambda2 must be finite and non-negative"));
        }
        if self.lambda1 == 0.0 && self.lambda2 == 0.0 {
            return Err(Error::invalid("lambda1 and lambda2 cannot both be zero"));
        }
        if !(self.step_size > 0.0 && fin(self.step_size)) {
            return Err(Error::invalid("step_size must be positive"));
        }
        if self.max_iters < 1 {
            return Err(Error::invalid("max_iters must be at least 1"));
        }
        if self.yaw_starts < 1 {
            return Err(Error::invalid("yaw_starts must be at least 1"));
        }
        if !(self.tol >= 0.0 && fin(self.tol)) {
            return Err(Error::invalid("tol must be non-negative"));
        }
        if !(self.occlusion_margin >= 0.0 && fin(self.occlusion_margin)) {
            return Err(Error::invalid("occlusion_margin must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayoutResult {
    pub pose: Pose,
    pub final_loss: f64,
    pub iterations: usize,
    pub start_index: usize,
}

/// Partial derivatives in parameter order `(tx, ty, tz, yaw, scale)`.
pub type PoseGradient = [f64; 5];

type Mat5 = [[f64; 5]; 5];

struct Visibility<'a> {
    depth: &'a DepthMap,
    margin: f64,
    /// Pixels covered by the object's own observed surface.
    own: Vec<bool>,
    /// Canonical-frame outward normals of the object points.
    normals: Vec<Point3>,
}

struct Evaluation {
    loss: f64,
    grad: PoseGradient,
    gauss_newton: Mat5,
}

/// Residual bookkeeping: accumulates `w·‖r‖²`, its gradient `2w·Jᵀr` and the
/// Gauss-Newton matrix `2w·JᵀJ`.
struct Accumulator {
    loss: f64,
    grad: [f64; 5],
    h: Mat5,
}

impl Accumulator {
    fn new() -> Self {
        Self {
            loss: 0.0,
            grad: [0.0; 5],
            h: [[0.0; 5]; 5],
        }
    }

    fn add<const R: usize>(&mut self, w: f64, r: [f64; R], jac: &[[f64; 5]; R]) {
        for i in 0..R {
            self.loss += w * r[i] * r[i];
            for a in 0..5 {
                self.grad[a] += 2.0 * w * jac[i][a] * r[i];
                for b in 0..5 {
                    self.h[a][b] += 2.0 * w * jac[i][a] * jac[i][b];
                }
            }
        }
    }
}

struct Objective<'a> {
    object: &'a [Point3],
    surface: &'a [Point3],
    surface_tree: KdTree<3>,
    surface_pixels: Vec<[f64; 2]>,
    surface_pixel_tree: Option<KdTree<2>>,
    intrinsics: CameraIntrinsics,
    lambda1: f64,
    lambda2: f64,
    visibility: Option<Visibility<'a>>,
}

impl<'a> Objective<'a> {
    fn new(
        object: &'a PointCloud,
        surface: &'a PointCloud,
        intrinsics: &CameraIntrinsics,
        lambda1: f64,
        lambda2: f64,
        visibility: Option<Visibility<'a>>,
    ) -> Result<Self> {
        object.require_nonempty("object")?;
        surface.require_nonempty("surface")?;
        intrinsics.validate()?;
        let (surface_pixels, surface_pixel_tree) = if lambda2 > 0.0 {
            let px = crate::geometry::project(intrinsics, surface)?;
            let tree = KdTree::build(&px);
            (px, Some(tree))
        } else {
            (Vec::new(), None)
        };
        Ok(Self {
            object: object.points(),
            surface: surface.points(),
            surface_tree: KdTree::build(surface.points()),
            surface_pixels,
            surface_pixel_tree,
            intrinsics: *intrinsics,
            lambda1,
            lambda2,
            visibility,
        })
    }

    /// Pixel slot of posed object point `k` when the camera could see it.
    fn observed_pixel(&self, vis: &Visibility, k: usize, a: Point3, yaw: f64) -> Option<usize> {
        if a[2] <= 0.0 {
            return None;
        }
        let n = rotate_yaw(yaw, vis.normals[k]);
        if n[0] * a[0] + n[1] * a[1] + n[2] * a[2] >= 0.0 {
            return None;
        }
        let (u, v) = self.intrinsics.pixel_index(self.intrinsics.project_point(a))?;
        let slot = v as usize * self.intrinsics.width as usize + u as usize;
        if !vis.own[slot] && vis.depth.get(u, v).is_some_and(|d| a[2] > d + vis.margin) {
            return None;
        }
        Some(slot)
    }

    /// Object points charged by the object-to-surface terms, with the count
    /// that normalizes them. Without visibility every point is charged.
    fn charged_points(&self, posed: &[Point3], yaw: f64) -> (Vec<usize>, usize) {
        let Some(vis) = &self.visibility else {
            return ((0..posed.len()).collect(), posed.len());
        };
        let mut charged = Vec::new();
        let mut observable = 0;
        for (k, &a) in posed.iter().enumerate() {
            if let Some(slot) = self.observed_pixel(vis, k, a, yaw) {
                observable += 1;
                if !vis.own[slot] {
                    charged.push(k);
                }
            }
        }
        (charged, observable.max(1))
    }

    fn evaluate(&self, pose: &Pose) -> Result<Evaluation> {
        pose.validate()?;
        let (s, theta) = (pose.scale, pose.yaw);
        let posed: Vec<Point3> = self.object.iter().map(|&p| pose.transform_point(p)).collect();
        let jac3 = |k: usize| -> [[f64; 5]; 3] {
            let p = self.object[k];
            let dr = rotate_yaw_derivative(theta, p);
            let rp = rotate_yaw(theta, p);
            let mut j = [[0.0; 5]; 3];
            for i in 0..3 {
                j[i][i] = 1.0;
                j[i][3] = s * dr[i];
                j[i][4] = rp[i];
            }
            j
        };

        let (charged, norm) = self.charged_points(&posed, theta);
        let mut acc = Accumulator::new();

        if self.lambda1 > 0.0 {
            if !charged.is_empty() {
                let w = self.lambda1 / norm as f64;
                for &k in &charged {
                    let (m, _) = self.surface_tree.nearest(&posed[k]).expect("non-empty");
                    let q = self.surface[m];
                    let r = [posed[k][0] - q[0], posed[k][1] - q[1], posed[k][2] - q[2]];
                    acc.add(w, r, &jac3(k));
                }
            }
            let object_tree = KdTree::build(&posed);
            let w = self.lambda1 / self.surface.len() as f64;
            for q in self.surface {
                let (k, _) = object_tree.nearest(q).expect("non-empty");
                let r = [posed[k][0] - q[0], posed[k][1] - q[1], posed[k][2] - q[2]];
                acc.add(w, r, &jac3(k));
            }
        }

        if self.lambda2 > 0.0 {
            let k_int = &self.intrinsics;
            if let Some(index) = posed.iter().position(|a| a[2] <= 0.0) {
                return Err(Error::BehindCamera {
                    index,
                    z: posed[index][2],
                });
            }
            let pixels: Vec<[f64; 2]> = posed.iter().map(|&a| k_int.project_point(a)).collect();
            let jac2 = |k: usize| -> [[f64; 5]; 2] {
                let a = posed[k];
                let iz = 1.0 / a[2];
                let du = [k_int.fx * iz, 0.0, -k_int.fx * a[0] * iz * iz];
                let dv = [0.0, k_int.fy * iz, -k_int.fy * a[1] * iz * iz];
                let j3 = jac3(k);
                let mut j = [[0.0; 5]; 2];
                for c in 0..5 {
                    j[0][c] = (0..3).map(|i| du[i] * j3[i][c]).sum();
                    j[1][c] = (0..3).map(|i| dv[i] * j3[i][c]).sum();
                }
                j
            };
            let surface_tree = self.surface_pixel_tree.as_ref().expect("built when lambda2 > 0");
            if !charged.is_empty() {
                let w = self.lambda2 / norm as f64;
                for &k in &charged {
                    let (m, _) = surface_tree.nearest(&pixels[k]).expect("non-empty");
                    let q = self.surface_pixels[m];
                    acc.add(w, [pixels[k][0] - q[0], pixels[k][1] - q[1]], &jac2(k));
                }
            }
            let object_tree = KdTree::build(&pixels);
            let w = self.lambda2 / self.surface_pixels.len() as f64;
            for q in &self.surface_pixels {
                let (k, _) = object_tree.nearest(q).expect("non-empty");
                acc.add(w, [pixels[k][0] - q[0], pixels[k][1] - q[1]], &jac2(k));
            }
        }

        Ok(Evaluation {
            loss: acc.loss,
            grad: acc.grad,
            gauss_newton: acc.h,
        })
    }
}

/// `λ1·CD3(apply_pose(pose, object), surface) + λ2·CD2(project(posed), project(surface))`.
pub fn layout_loss(
    object_cloud: &PointCloud,
    surface_cloud: &PointCloud,
    pose: &Pose,
    intrinsics: &CameraIntrinsics,
    lambda1: f64,
    lambda2: f64,
) -> Result<f64> {
    let obj = Objective::new(object_cloud, surface_cloud, intrinsics, lambda1, lambda2, None)?;
    Ok(obj.evaluate(pose)?.loss)
}

/// Gradient of [`layout_loss`] with nearest-neighbor assignments held fixed.
pub fn layout_loss_gradient(
    object_cloud: &PointCloud,
    surface_cloud: &PointCloud,
    pose: &Pose,
    intrinsics: &CameraIntrinsics,
    lambda1: f64,
    lambda2: f64,
) -> Result<PoseGradient> {
    let obj = Objective::new(object_cloud, surface_cloud, intrinsics, lambda1, lambda2, None)?;
    Ok(obj.evaluate(pose)?.grad)
}

/// Nearest-neighbor assignments behind [`layout_loss`] at `pose`, in both
/// directions and for both terms that carry weight. Two poses with equal
/// signatures lie on the same smooth piece of the loss.
pub fn correspondence_signature(
    object_cloud: &PointCloud,
    surface_cloud: &PointCloud,
    pose: &Pose,
    intrinsics: &CameraIntrinsics,
    lambda1: f64,
    lambda2: f64,
) -> Result<Vec<usize>> {
    let obj = Objective::new(object_cloud, surface_cloud, intrinsics, lambda1, lambda2, None)?;
    pose.validate()?;
    let posed: Vec<Point3> = obj.object.iter().map(|&p| pose.transform_point(p)).collect();
    let mut sig = Vec::new();
    if lambda1 > 0.0 {
        sig.extend(posed.iter().map(|a| obj.surface_tree.nearest(a).expect("non-empty").0));
        let tree = KdTree::build(&posed);
        sig.extend(obj.surface.iter().map(|q| tree.nearest(q).expect("non-empty").0));
    }
    if let Some(surface_tree) = &obj.surface_pixel_tree {
        if let Some(index) = posed.iter().position(|a| a[2] <= 0.0) {
            return Err(Error::BehindCamera { index, z: posed[index][2] });
        }
        let pixels: Vec<[f64; 2]> = posed.iter().map(|&a| intrinsics.project_point(a)).collect();
        sig.extend(pixels.iter().map(|px| surface_tree.nearest(px).expect("non-empty").0));
        let tree = KdTree::build(&pixels);
        sig.extend(obj.surface_pixels.iter().map(|q| tree.nearest(q).expect("non-empty").0));
    }
    Ok(sig)
}

/// Solves `(H + μ·diag)·x = b` for the 5×5 Gauss-Newton system.
fn solve_damped(h: &Mat5, b: &[f64; 5]) -> Option<[f64; 5]> {
    let trace: f64 = (0..5).map(|i| h[i][i].abs()).sum();
    let mu = 1e-9 * trace / 5.0 + 1e-12;
    let mut a = [[0.0; 6]; 5];
    for i in 0..5 {
        for j in 0..5 {
            a[i][j] = h[i][j];
        }
        a[i][i] += mu * h[i][i].abs().max(1e-12);
        a[i][5] = b[i];
    }
    for col in 0..5 {
        let piv = (col..5).max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs()))?;
        if a[piv][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, piv);
        for row in 0..5 {
            if row != col {
                let f = a[row][col] / a[col][col];
                for k in col..6 {
                    a[row][k] -= f * a[col][k];
                }
            }
        }
    }
    let x = [
        a[0][5] / a[0][0],
        a[1][5] / a[1][1],
        a[2][5] / a[2][2],
        a[3][5] / a[3][3],
        a[4][5] / a[4][4],
    ];
    x.iter().all(|v| v.is_finite()).then_some(x)
}

const MAX_HALVINGS: usize = 60;
const NORMAL_NEIGHBORS: usize = 10;

fn descend(objective: &Objective, init: Pose, config: &LayoutConfig) -> Result<(Pose, f64, usize)> {
    let mut pose = init;
    let mut current = objective.evaluate(&pose)?;
    let mut iterations = 0;
    if current.loss <= f64::MIN_POSITIVE {
        return Ok((pose, current.loss, 0));
    }
    while iterations < config.max_iters {
        let direction = match config.descent {
            Descent::Gradient => current.grad.map(|g| -g),
            Descent::GaussNewton => {
                let neg = current.grad.map(|g| -g);
                solve_damped(&current.gauss_newton, &neg).unwrap_or(neg)
            }
        };
        let mut alpha = match config.descent {
            Descent::Gradient => config.step_size,
            Descent::GaussNewton => 1.0,
        };
        let base = pose.as_array();
        let mut accepted = None;
        for _ in 0..MAX_HALVINGS {
            let mut cand = base;
            for i in 0..5 {
                cand[i] += alpha * direction[i];
            }
            let cand = Pose::from_array(cand);
            if cand.scale > 0.0 {
                if let Ok(e) = objective.evaluate(&cand) {
                    if e.loss < current.loss {
                        accepted = Some((cand, e));
                        break;
                    }
                }
            }
            alpha *= 0.5;
        }
        let Some((next_pose, next)) = accepted else {
            break;
        };
        let rel = (current.loss - next.loss) / current.loss.max(f64::MIN_POSITIVE);
        pose = next_pose;
        current = next;
        iterations += 1;
        if rel < config.tol || current.loss <= f64::MIN_POSITIVE {
            break;
        }
    }
    Ok((pose, current.loss, iterations))
}

/// Evenly spaced yaw grid starting at zero.
pub fn yaw_grid(starts: usize) -> Vec<f64> {
    (0..starts)
        .map(|j| crate::geometry::wrap_angle(2.0 * PI * j as f64 / starts as f64))
        .collect()
}

/// Start pose for a yaw: scale from the bounding-box diagonal ratio, translation
/// aligning the centroids.
pub fn initial_pose(object: &PointCloud, surface: &PointCloud, yaw: f64) -> Result<Pose> {
    let (Some(co), Some(cs)) = (object.centroid(), surface.centroid()) else {
        return Err(Error::invalid("empty point cloud"));
    };
    let (d_obj, d_surf) = (object.bbox_diagonal(), surface.bbox_diagonal());
    let scale = if d_obj > 0.0 && d_surf > 0.0 { d_surf / d_obj } else { 1.0 };
    let r = rotate_yaw(yaw, co);
    Pose::new(
        [cs[0] - scale * r[0], cs[1] - scale * r[1], cs[2] - scale * r[2]],
        yaw,
        scale,
    )
}

fn build_visibility<'a>(
    surface: &PointCloud,
    object: &PointCloud,
    intrinsics: &CameraIntrinsics,
    depth: &'a DepthMap,
    margin: f64,
) -> Result<Visibility<'a>> {
    check_depth(intrinsics, depth)?;
    let mut own = vec![false; intrinsics.pixel_count()];
    for &p in surface.points() {
        if p[2] > 0.0 {
            if let Some((u, v)) = intrinsics.pixel_index(intrinsics.project_point(p)) {
                own[v as usize * intrinsics.width as usize + u as usize] = true;
            }
        }
    }
    Ok(Visibility {
        depth,
        margin,
        own,
        normals: estimate_normals(object, NORMAL_NEIGHBORS.min(object.len()).max(3))?,
    })
}

/// The depth-aware objective minimized by [`optimize_pose_observed`].
pub fn layout_loss_observed(
    object_cloud: &PointCloud,
    surface_cloud: &PointCloud,
    pose: &Pose,
    intrinsics: &CameraIntrinsics,
    depth: &DepthMap,
    config: &LayoutConfig,
) -> Result<f64> {
    let vis = build_visibility(surface_cloud, object_cloud, intrinsics, depth, config.occlusion_margin)?;
    let obj = Objective::new(
        object_cloud,
        surface_cloud,
        intrinsics,
        config.lambda1,
        config.lambda2,
        Some(vis),
    )?;
    Ok(obj.evaluate(pose)?.loss)
}

fn optimize(
    object: &PointCloud,
    surface: &PointCloud,
    intrinsics: &CameraIntrinsics,
    depth: Option<&DepthMap>,
    config: &LayoutConfig,
    init: Option<Pose>,
) -> Result<LayoutResult> {
    config.validate()?;
    let full_surface = surface;
    let object = object.subsample(config.max_points);
    let surface = surface.subsample(config.max_points);
    let visibility = depth
        .map(|d| build_visibility(full_surface, &object, intrinsics, d, config.occlusion_margin))
        .transpose()?;
    let objective = Objective::new(
        &object,
        &surface,
        intrinsics,
        config.lambda1,
        config.lambda2,
        visibility,
    )?;
    let starts: Vec<Pose> = match init {
        Some(p) => {
            p.validate()?;
            vec![p]
        }
        None => yaw_grid(config.yaw_starts)
            .into_iter()
            .map(|yaw| initial_pose(&object, &surface, yaw))
            .collect::<Result<_>>()?,
    };
    let mut best: Option<LayoutResult> = None;
    let mut last_err = None;
    for (start_index, start) in starts.into_iter().enumerate() {
        match descend(&objective, start, config) {
            Ok((pose, final_loss, iterations)) => {
                if best.is_none_or(|b| final_loss < b.final_loss) {
                    best = Some(LayoutResult {
                        pose,
                        final_loss,
                        iterations,
                        start_index,
                    });
                }
            }
            // a start that lands behind the camera is skipped
            Err(e @ Error::BehindCamera { .. }) => last_err = Some(e),
            Err(e) => return Err(e),
        }
    }
    best.ok_or_else(|| last_err.unwrap_or_else(|| Error::Numerical("no start converged".into())))
}

/// Multi-start pose descent. With `init` given it is the only start.
pub fn optimize_pose(
    object_cloud: &PointCloud,
    surface_cloud: &PointCloud,
    intrinsics: &CameraIntrinsics,
    config: &LayoutConfig,
    init: Option<Pose>,
) -> Result<LayoutResult> {
    optimize(object_cloud, surface_cloud, intrinsics, None, config, init)
}

/// As [`optimize_pose`], dropping object points the camera could not have
/// seen given the observed `depth` and the surface's own pixels.
pub fn optimize_pose_observed(
    object_cloud: &PointCloud,
    surface_cloud: &PointCloud,
    intrinsics: &CameraIntrinsics,
    depth: &DepthMap,
    config: &LayoutConfig,
    init: Option<Pose>,
) -> Result<LayoutResult> {
    optimize(object_cloud, surface_cloud, intrinsics, Some(depth), config, init)
}

fn check_depth(intrinsics: &CameraIntrinsics, depth: &DepthMap) -> Result<()> {
    if depth.width() != intrinsics.width || depth.height() != intrinsics.height {
        return Err(Error::invalid("depth map size does not match intrinsics"));
    }
    Ok(())
}

fn check_lengths(objects: &[PointCloud], surfaces: &[PointCloud]) -> Result<()> {
    if objects.len() != surfaces.len() {
        return Err(Error::invalid(format!(
            "{} object clouds but {} surface clouds",
            objects.len(),
            surfaces.len()
        )));
    }
    Ok(())
}

/// Independent [`optimize_pose`] per object, in input order.
pub fn assemble_scene(
    objects: &[PointCloud],
    surfaces: &[PointCloud],
    intrinsics: &CameraIntrinsics,
    config: &LayoutConfig,
) -> Result<Vec<LayoutResult>> {
    check_lengths(objects, surfaces)?;
    objects
        .par_iter()
        .zip(surfaces.par_iter())
        .map(|(o, s)| optimize_pose(o, s, intrinsics, config, None))
        .collect()
}

/// Independent [`optimize_pose_observed`] per object, in input order.
pub fn assemble_scene_observed(
    objects: &[PointCloud],
    surfaces: &[PointCloud],
    intrinsics: &CameraIntrinsics,
    depth: &DepthMap,
    config: &LayoutConfig,
) -> Result<Vec<LayoutResult>> {
    check_lengths(objects, surfaces)?;
    check_depth(intrinsics, depth)?;
    objects
        .par_iter()
        .zip(surfaces.par_iter())
        .map(|(o, s)| optimize_pose_observed(o, s, intrinsics, depth, config, None))
        .collect()
}
