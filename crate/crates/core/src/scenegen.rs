//! Synthetic scenes with repeated instances, rendered by a point z-buffer.
//!
//! World frame: +Y up, floor at `y = 0`, room spanning `x ∈ [-E/2, E/2]`,
//! `z ∈ [0, E]`. Cameras are level (no pitch or roll) so camera frames differ
//! from the world by a translation and a yaw, which keeps object poses within
//! the translation + yaw + scale family in both frames. Image rows grow with +Y.

use std::f64::consts::PI;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    rotate_yaw, wrap_angle, CameraIntrinsics, DepthMap, InstanceMask, Point3, PointCloud, Pose,
};
use crate::metrics::SCHEMA_VERSION;

/// Mixes a seed with a stream tag (splitmix64 finalizer).
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Box,
    Cylinder,
    LShape,
}

/// Yaw ambiguity of a shape, used when scoring recovered poses.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum YawSymmetry {
    /// Any yaw gives the same surface.
    Continuous,
    /// Surface repeats every `period` radians.
    Period(f64),
}

impl YawSymmetry {
    /// Smallest yaw difference modulo the symmetry.
    pub fn error(&self, a: f64, b: f64) -> f64 {
        match *self {
            YawSymmetry::Continuous => 0.0,
            YawSymmetry::Period(p) => {
                let d = (a - b).rem_euclid(p);
                d.min(p - d)
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Cuboid {
    lo: Point3,
    hi: Point3,
}

impl Cuboid {
    fn contains_strict(&self, p: Point3) -> bool {
        (0..3).all(|k| p[k] > self.lo[k] && p[k] < self.hi[k])
    }

    /// Faces as (area, axis, side, cuboid) with side 0 = low, 1 = high.
    fn faces(&self) -> impl Iterator<Item = (f64, usize, usize)> + '_ {
        (0..3).flat_map(move |axis| {
            let (a, b) = ((axis + 1) % 3, (axis + 2) % 3);
            let area = (self.hi[a] - self.lo[a]) * (self.hi[b] - self.lo[b]);
            [(area, axis, 0), (area, axis, 1)]
        })
    }

    fn sample_face(&self, axis: usize, side: usize, rng: &mut ChaCha8Rng) -> (Point3, Point3) {
        let mut p = [0.0; 3];
        for k in 0..3 {
            p[k] = rng.random_range(self.lo[k]..self.hi[k]);
        }
        let mut n = [0.0; 3];
        if side == 0 {
            p[axis] = self.lo[axis];
            n[axis] = -1.0;
        } else {
            p[axis] = self.hi[axis];
            n[axis] = 1.0;
        }
        (p, n)
    }
}

/// Parametric primitive whose proportions are a pure function of its id.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Shape {
    pub id: u32,
    pub kind: ShapeKind,
    /// Bounding-box extents; the largest is 1.
    pub extents: Point3,
    /// Seat height fraction and backrest depth fraction for L-shapes.
    pub l_params: [f64; 2],
}

impl Shape {
    pub fn from_id(id: u32) -> Shape {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(0x5348_4150_45, id as u64));
        let kind = match id % 3 {
            0 => ShapeKind::Box,
            1 => ShapeKind::Cylinder,
            _ => ShapeKind::LShape,
        };
        let (extents, l_params) = match kind {
            ShapeKind::Box => {
                // footprint aspect >= 1.4 keeps the yaw period at π
                let x = 1.0;
                let z = rng.random_range(0.35..0.7);
                let y = rng.random_range(0.35..0.9);
                ([x, y, z], [0.0; 2])
            }
            ShapeKind::Cylinder => {
                let d: f64 = rng.random_range(0.5..1.0);
                let h: f64 = rng.random_range(0.5..1.0);
                let m = d.max(h);
                ([d / m, h / m, d / m], [0.0; 2])
            }
            ShapeKind::LShape => {
                let w: f64 = rng.random_range(0.6..0.9);
                let dep: f64 = rng.random_range(0.6..0.9);
                let seat = rng.random_range(0.35..0.55);
                let back = rng.random_range(0.18..0.3);
                ([w, 1.0, dep], [seat, back])
            }
        };
        Shape {
            id,
            kind,
            extents,
            l_params,
        }
    }

    pub fn yaw_symmetry(&self) -> YawSymmetry {
        match self.kind {
            ShapeKind::Box => YawSymmetry::Period(PI),
            ShapeKind::Cylinder => YawSymmetry::Continuous,
            ShapeKind::LShape => YawSymmetry::Period(2.0 * PI),
        }
    }

    pub fn half_extents(&self) -> Point3 {
        self.extents.map(|e| 0.5 * e)
    }

    fn cuboids(&self) -> Vec<Cuboid> {
        let h = self.half_extents();
        match self.kind {
            ShapeKind::Box => vec![Cuboid {
                lo: [-h[0], -h[1], -h[2]],
                hi: h,
            }],
            ShapeKind::Cylinder => Vec::new(),
            ShapeKind::LShape => {
                let seat_top = -h[1] + self.l_params[0] * self.extents[1];
                let back_front = -h[2] + self.l_params[1] * self.extents[2];
                vec![
                    Cuboid {
                        lo: [-h[0], -h[1], -h[2]],
                        hi: [h[0], seat_top, h[2]],
                    },
                    Cuboid {
                        lo: [-h[0], seat_top, -h[2]],
                        hi: [h[0], h[1], back_front],
                    },
                ]
            }
        }
    }

    /// `n` surface points, uniform by area, deterministic in `seed`.
    pub fn sample_surface(&self, n: usize, seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pts = Vec::with_capacity(n);
        if self.kind == ShapeKind::Cylinder {
            let r = 0.5 * self.extents[0];
            let hh = 0.5 * self.extents[1];
            let side = 2.0 * PI * r * 2.0 * hh;
            let cap = PI * r * r;
            let total = side + 2.0 * cap;
            while pts.len() < n {
                let pick = rng.random_range(0.0..total);
                if pick < side {
                    let a = rng.random_range(-PI..PI);
                    let y = rng.random_range(-hh..hh);
                    pts.push([r * a.cos(), y, r * a.sin()]);
                } else {
                    let a = rng.random_range(-PI..PI);
                    let rr = r * rng.random_range(0.0f64..1.0).sqrt();
                    let y = if pick < side + cap { -hh } else { hh };
                    pts.push([rr * a.cos(), y, rr * a.sin()]);
                }
            }
        } else {
            let cuboids = self.cuboids();
            let faces: Vec<(f64, usize, usize, usize)> = cuboids
                .iter()
                .enumerate()
                .flat_map(|(ci, c)| c.faces().map(move |(a, ax, sd)| (a, ax, sd, ci)).collect::<Vec<_>>())
                .collect();
            let total: f64 = faces.iter().map(|f| f.0).sum();
            while pts.len() < n {
                let mut pick = rng.random_range(0.0..total);
                let mut chosen = faces[faces.len() - 1];
                for f in &faces {
                    if pick < f.0 {
                        chosen = *f;
                        break;
                    }
                    pick -= f.0;
                }
                let (_, axis, side, ci) = chosen;
                let (p, nrm) = cuboids[ci].sample_face(axis, side, &mut rng);
                // keep only faces that are exterior to the union
                let probe = [p[0] + 1e-9 * nrm[0], p[1] + 1e-9 * nrm[1], p[2] + 1e-9 * nrm[2]];
                if cuboids.iter().any(|c| c.contains_strict(probe)) {
                    continue;
                }
                pts.push(p);
            }
        }
        PointCloud::new(pts).expect("finite samples")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub intrinsics: CameraIntrinsics,
    /// Camera center in world coordinates.
    pub position: Point3,
    /// Heading about world +Y; the optical axis is `R_y(yaw)·(0, 0, 1)`.
    pub yaw: f64,
}

impl Camera {
    pub fn camera_from_world(&self) -> Pose {
        // p_cam = R(-ψ)(p - c)
        let rc = rotate_yaw(-self.yaw, self.position);
        Pose {
            translation: [-rc[0], -rc[1], -rc[2]],
            yaw: wrap_angle(-self.yaw),
            scale: 1.0,
        }
    }

    pub fn world_from_camera(&self) -> Pose {
        Pose {
            translation: self.position,
            yaw: wrap_angle(self.yaw),
            scale: 1.0,
        }
    }

    pub fn to_camera(&self, world: &Pose) -> Pose {
        self.camera_from_world().compose(world)
    }

    pub fn to_world(&self, camera: &Pose) -> Pose {
        self.world_from_camera().compose(camera)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape_id: u32,
    /// World-frame pose of the canonical shape.
    pub pose: Pose,
    pub set_id: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub furnset_schema: u32,
    pub objects: Vec<SceneObject>,
    pub camera: Camera,
    pub room_extent: f64,
    pub seed: u64,
    /// Size of the canonical clouds used as object geometry and ground truth.
    pub object_samples: usize,
    pub occlusion_level: f64,
    /// Per-object fraction of self-visible pixels hidden by other objects.
    pub occlusion: Vec<f64>,
}

impl SceneSpec {
    pub fn shape(&self, index: usize) -> Shape {
        Shape::from_id(self.objects[index].shape_id)
    }

    /// Canonical cloud for an object; identical shapes share identical clouds.
    pub fn canonical_cloud(&self, index: usize) -> PointCloud {
        let id = self.objects[index].shape_id;
        Shape::from_id(id).sample_surface(self.object_samples, derive_seed(self.seed, 0x1000 + id as u64))
    }

    pub fn world_clouds(&self) -> Result<Vec<PointCloud>> {
        (0..self.objects.len())
            .map(|i| crate::geometry::apply_pose(&self.objects[i].pose, &self.canonical_cloud(i)))
            .collect()
    }

    pub fn camera_pose(&self, index: usize) -> Pose {
        self.camera.to_camera(&self.objects[index].pose)
    }

    pub fn set_ids(&self) -> Vec<usize> {
        self.objects.iter().map(|o| o.set_id).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.objects.is_empty() {
            return Err(Error::invalid("scene has no objects"));
        }
        self.camera.intrinsics.validate()?;
        for (i, a) in self.objects.iter().enumerate() {
            a.pose.validate()?;
            for b in &self.objects[i + 1..] {
                if (a.set_id == b.set_id) != (a.shape_id == b.shape_id) {
                    return Err(Error::invalid("set ids and shape ids disagree"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneParams {
    pub num_objects: usize,
    pub num_sets: usize,
    pub seed: u64,
    pub occlusion_level: f64,
    pub room_extent: f64,
    pub intrinsics: CameraIntrinsics,
    pub object_samples: usize,
}

impl SceneParams {
    pub fn new(num_objects: usize, num_sets: usize, seed: u64, occlusion_level: f64) -> Self {
        let d = &crate::defaults::defaults().scene;
        SceneParams {
            num_objects,
            num_sets,
            seed,
            occlusion_level,
            room_extent: d.room_extent,
            intrinsics: CameraIntrinsics::from_fov(d.width, d.height, d.fov_degrees.to_radians())
                .expect("default intrinsics are valid"),
            object_samples: d.object_samples,
        }
    }
}

/// Camera stand-off and height pairs, from high and far to low and near.
const DOLLY: [(f64, f64); 8] = [
    (2.0, 3.6),
    (1.8, 3.4),
    (1.6, 3.2),
    (1.4, 3.0),
    (1.2, 2.9),
    (1.0, 2.8),
    (0.8, 2.7),
    (0.6, 2.6),
];
const PLACEMENT_ATTEMPTS: usize = 40;
const POSITION_RETRIES: usize = 200;
const PLACEMENT_SHRINK: f64 = 0.92;
const CALIBRATION_SAMPLES: usize = 3000;
const CALIBRATION_DOWNSCALE: f64 = 4.0;
const MAX_OBJECT_OCCLUSION: f64 = 0.75;

pub fn generate_scene(
    num_objects: usize,
    num_sets: usize,
    seed: u64,
    occlusion_level: f64,
) -> Result<SceneSpec> {
    generate_scene_with(&SceneParams::new(num_objects, num_sets, seed, occlusion_level))
}

pub fn generate_scene_with(params: &SceneParams) -> Result<SceneSpec> {
    let SceneParams {
        num_objects: n,
        num_sets,
        seed,
        occlusion_level,
        room_extent,
        ..
    } = *params;
    if n == 0 || num_sets == 0 || num_sets > n {
        return Err(Error::invalid(format!(
            "need 1 <= num_sets <= num_objects, got {num_sets} sets for {n} objects"
        )));
    }
    if !(0.0..=1.0).contains(&occlusion_level) {
        return Err(Error::invalid("occlusion level must be in [0, 1]"));
    }
    if !(room_extent > 0.0 && room_extent.is_finite()) {
        return Err(Error::invalid("room extent must be positive"));
    }
    params.intrinsics.validate()?;

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1));

    // distinct shape ids and one scale per set
    let mut set_shapes: Vec<u32> = Vec::with_capacity(num_sets);
    while set_shapes.len() < num_sets {
        let id = rng.random_range(0..3000u32);
        if !set_shapes.contains(&id) {
            set_shapes.push(id);
        }
    }
    let mut set_scales: Vec<f64> = (0..num_sets).map(|_| rng.random_range(0.5..1.0)).collect();
    let mut assignment: Vec<usize> = (0..n).map(|i| if i < num_sets { i } else { rng.random_range(0..num_sets) }).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        assignment.swap(i, j);
    }

    for _attempt in 0..PLACEMENT_ATTEMPTS {
        let Some(objects) = place_objects(&assignment, &set_shapes, &set_scales, room_extent, &mut rng)
        else {
            // crowded room: shrink every set and retry
            set_scales.iter_mut().for_each(|s| *s *= PLACEMENT_SHRINK);
            continue;
        };
        let mut best: Option<(f64, SceneSpec)> = None;
        for &(height, standoff) in &DOLLY {
            let camera = Camera {
                intrinsics: params.intrinsics,
                position: [0.0, height, -standoff],
                yaw: 0.0,
            };
            let mut spec = SceneSpec {
                furnset_schema: SCHEMA_VERSION,
                objects: objects.clone(),
                camera,
                room_extent,
                seed,
                object_samples: params.object_samples,
                occlusion_level,
                occlusion: Vec::new(),
            };
            if !all_in_frame(&spec) {
                continue;
            }
            let Some(occ) = measure_occlusion(&spec) else {
                continue;
            };
            if occ.iter().any(|&o| o > MAX_OBJECT_OCCLUSION) {
                continue;
            }
            let mean = occ.iter().sum::<f64>() / occ.len() as f64;
            spec.occlusion = occ;
            let gap = (mean - occlusion_level).abs();
            if best.as_ref().is_none_or(|(g, _)| gap < *g) {
                best = Some((gap, spec));
            }
        }
        if let Some((_, spec)) = best {
            return Ok(spec);
        }
    }
    Err(Error::Generation(format!(
        "no feasible placement for {n} objects after {PLACEMENT_ATTEMPTS} attempts"
    )))
}

fn place_objects(
    assignment: &[usize],
    set_shapes: &[u32],
    set_scales: &[f64],
    room: f64,
    rng: &mut ChaCha8Rng,
) -> Option<Vec<SceneObject>> {
    let mut placed: Vec<(SceneObject, f64)> = Vec::new();
    for &set in assignment {
        let shape = Shape::from_id(set_shapes[set]);
        let s = set_scales[set];
        let h = shape.half_extents();
        let radius = s * (h[0] * h[0] + h[2] * h[2]).sqrt();
        if 2.0 * radius >= room {
            return None;
        }
        let mut done = false;
        for _ in 0..POSITION_RETRIES {
            let x = rng.random_range(-0.5 * room + radius..0.5 * room - radius);
            let z = rng.random_range(radius..room - radius);
            let clear = placed.iter().all(|(o, r)| {
                let t = o.pose.translation;
                let d2 = (t[0] - x).powi(2) + (t[2] - z).powi(2);
                d2 >= (r + radius).powi(2)
            });
            if clear {
                let yaw = rng.random_range(-PI..PI);
                let pose = Pose::new([x, s * h[1], z], yaw, s).ok()?;
                placed.push((
                    SceneObject {
                        shape_id: shape.id,
                        pose,
                        set_id: set,
                    },
                    radius,
                ));
                done = true;
                break;
            }
        }
        if !done {
            return None;
        }
    }
    Some(placed.into_iter().map(|(o, _)| o).collect())
}

fn all_in_frame(spec: &SceneSpec) -> bool {
    let k = &spec.camera.intrinsics;
    let margin = 2.0;
    spec.objects.iter().enumerate().all(|(i, o)| {
        let pose = spec.camera.to_camera(&o.pose);
        let h = spec.shape(i).half_extents();
        (0..8).all(|c| {
            let corner = [
                if c & 1 == 0 { -h[0] } else { h[0] },
                if c & 2 == 0 { -h[1] } else { h[1] },
                if c & 4 == 0 { -h[2] } else { h[2] },
            ];
            let p = pose.transform_point(corner);
            if p[2] <= 0.1 {
                return false;
            }
            let uv = k.project_point(p);
            uv[0] >= margin
                && uv[1] >= margin
                && uv[0] <= k.width as f64 - 1.0 - margin
                && uv[1] <= k.height as f64 - 1.0 - margin
        })
    })
}

/// Per-object share of self-visible pixels covered by other objects, measured
/// on a coarse render. `None` if some object is invisible even alone.
fn measure_occlusion(spec: &SceneSpec) -> Option<Vec<f64>> {
    let k = spec.camera.intrinsics;
    let w = ((k.width as f64 / CALIBRATION_DOWNSCALE).round() as u32).max(8);
    let h = ((k.height as f64 / CALIBRATION_DOWNSCALE).round() as u32).max(8);
    let sx = w as f64 / k.width as f64;
    let sy = h as f64 / k.height as f64;
    let coarse = CameraIntrinsics::new(
        k.fx * sx,
        k.fy * sy,
        ((k.cx + 0.5) * sx - 0.5).clamp(0.0, w as f64 - 1.0),
        ((k.cy + 0.5) * sy - 0.5).clamp(0.0, h as f64 - 1.0),
        w,
        h,
    )
    .ok()?;
    let render = render_with(spec, &coarse, CALIBRATION_SAMPLES).ok()?;
    let mut occ = Vec::with_capacity(spec.objects.len());
    for i in 0..spec.objects.len() {
        let alone = render_single(spec, &coarse, CALIBRATION_SAMPLES, i);
        if alone < 4 {
            return None;
        }
        let full = render.masks[i].count();
        occ.push(1.0 - full as f64 / alone as f64);
    }
    Some(occ)
}

/// Render output with per-pixel provenance.
#[derive(Clone, Debug)]
pub struct Render {
    pub depth: DepthMap,
    pub masks: Vec<InstanceMask>,
    /// Winning `(object, sample)` per pixel, row-major.
    pub owner: Vec<Option<(usize, usize)>>,
    /// Camera-frame samples of each object in sampling order.
    pub samples: Vec<PointCloud>,
}

fn object_samples_camera(spec: &SceneSpec, index: usize, samples: usize) -> PointCloud {
    let obj = &spec.objects[index];
    let canon = Shape::from_id(obj.shape_id).sample_surface(samples, derive_seed(spec.seed, 0x2000 + index as u64));
    let pose = spec.camera.to_camera(&obj.pose);
    PointCloud::new(canon.points().iter().map(|&p| pose.transform_point(p)).collect())
        .expect("finite")
}

fn render_single(spec: &SceneSpec, k: &CameraIntrinsics, samples: usize, index: usize) -> usize {
    let pts = object_samples_camera(spec, index, samples);
    let mut hit = vec![false; k.pixel_count()];
    for &p in pts.points() {
        if p[2] > 0.0 {
            if let Some((u, v)) = k.pixel_index(k.project_point(p)) {
                hit[v as usize * k.width as usize + u as usize] = true;
            }
        }
    }
    hit.iter().filter(|h| **h).count()
}

fn render_with(spec: &SceneSpec, k: &CameraIntrinsics, samples: usize) -> Result<Render> {
    let npx = k.pixel_count();
    let mut zbuf = vec![f64::INFINITY; npx];
    let mut owner: Vec<Option<(usize, usize)>> = vec![None; npx];
    let clouds: Vec<PointCloud> = (0..spec.objects.len())
        .map(|i| object_samples_camera(spec, i, samples))
        .collect();
    for (i, cloud) in clouds.iter().enumerate() {
        for (j, &p) in cloud.points().iter().enumerate() {
            if p[2] <= 0.0 {
                continue;
            }
            if let Some((u, v)) = k.pixel_index(k.project_point(p)) {
                let idx = v as usize * k.width as usize + u as usize;
                if p[2] < zbuf[idx] {
                    zbuf[idx] = p[2];
                    owner[idx] = Some((i, j));
                }
            }
        }
    }
    if owner.iter().all(|o| o.is_none()) {
        return Err(Error::Generation("no object sample lands in the image".into()));
    }
    let mut depth = DepthMap::empty(k.width, k.height);
    let mut masks: Vec<InstanceMask> = (0..spec.objects.len())
        .map(|i| InstanceMask::empty(i as u32, k.width, k.height))
        .collect();
    for v in 0..k.height {
        for u in 0..k.width {
            let idx = v as usize * k.width as usize + u as usize;
            if let Some((i, _)) = owner[idx] {
                depth.set(u, v, zbuf[idx]);
                masks[i].set(u, v, true);
            }
        }
    }
    Ok(Render {
        depth,
        masks,
        owner,
        samples: clouds,
    })
}

/// Full render with provenance, at the scene camera's resolution.
pub fn render_scene(spec: &SceneSpec, samples_per_object: usize) -> Result<Render> {
    spec.validate()?;
    if samples_per_object == 0 {
        return Err(Error::invalid("samples_per_object must be positive"));
    }
    render_with(spec, &spec.camera.intrinsics, samples_per_object)
}

/// Z-buffered depth and disjoint per-object masks (mask `i` has `object_id = i`).
pub fn render_depth(spec: &SceneSpec, samples_per_object: usize) -> Result<(DepthMap, Vec<InstanceMask>)> {
    let r = render_scene(spec, samples_per_object)?;
    Ok((r.depth, r.masks))
}

/// `y[i][j] = 1` iff objects `i != j` share a set.
pub fn ground_truth_labels(spec: &SceneSpec) -> Array2<f64> {
    let n = spec.objects.len();
    Array2::from_shape_fn((n, n), |(i, j)| {
        if i != j && spec.objects[i].set_id == spec.objects[j].set_id {
            1.0
        } else {
            0.0
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{apply_pose, unproject};

    #[test]
    fn shapes_fit_unit_cube() {
        for id in 0..60 {
            let shape = Shape::from_id(id);
            let cloud = shape.sample_surface(500, 3);
            let (lo, hi) = cloud.bounds().unwrap();
            for k in 0..3 {
                assert!(lo[k] >= -0.5 - 1e-12 && hi[k] <= 0.5 + 1e-12, "{shape:?}");
            }
            assert!(shape.extents.iter().cloned().fold(0.0, f64::max) == 1.0);
            assert_eq!(cloud, shape.sample_surface(500, 3));
        }
    }

    #[test]
    fn l_shape_has_no_interior_samples() {
        let shape = (0..30).map(Shape::from_id).find(|s| s.kind == ShapeKind::LShape).unwrap();
        let c = shape.cuboids();
        for p in shape.sample_surface(3000, 1).points() {
            assert!(!c.iter().any(|b| b.contains_strict(*p)));
            // nothing on the hidden seat/back interface
            let seat_top = c[0].hi[1];
            let on_interface = (p[1] - seat_top).abs() < 1e-12 && p[2] < c[1].hi[2];
            assert!(!on_interface);
        }
    }

    #[test]
    fn yaw_symmetry_error() {
        assert_eq!(YawSymmetry::Continuous.error(0.0, 2.0), 0.0);
        assert!((YawSymmetry::Period(PI).error(0.1, 0.1 + PI) - 0.0).abs() < 1e-12);
        assert!((YawSymmetry::Period(2.0 * PI).error(3.1, -3.1) - (2.0 * PI - 6.2)).abs() < 1e-12);
    }

    #[test]
    fn camera_round_trip() {
        let cam = Camera {
            intrinsics: CameraIntrinsics::from_fov(64, 64, 1.2).unwrap(),
            position: [0.3, 1.4, -2.0],
            yaw: 0.4,
        };
        let world = Pose::new([1.0, 0.5, 2.0], -2.0, 0.8).unwrap();
        let back = cam.to_world(&cam.to_camera(&world));
        for (a, b) in world.as_array().iter().zip(back.as_array()) {
            assert!((a - b).abs() < 1e-12);
        }
        let p = [0.2, -0.1, 0.3];
        let direct = cam.camera_from_world().transform_point(world.transform_point(p));
        let composed = cam.to_camera(&world).transform_point(p);
        for k in 0..3 {
            assert!((direct[k] - composed[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn single_object_scene() {
        let s = generate_scene(1, 1, 11, 0.0).unwrap();
        assert_eq!(s.objects.len(), 1);
        assert_eq!(ground_truth_labels(&s), Array2::<f64>::zeros((1, 1)));
    }

    #[test]
    fn deterministic_under_seed() {
        assert_eq!(generate_scene(5, 3, 7, 0.2).unwrap(), generate_scene(5, 3, 7, 0.2).unwrap());
        assert_ne!(generate_scene(5, 3, 7, 0.2).unwrap(), generate_scene(5, 3, 8, 0.2).unwrap());
    }

    #[test]
    fn labels_follow_set_assignment() {
        let s = generate_scene(5, 3, 21, 0.1).unwrap();
        s.validate().unwrap();
        let y = ground_truth_labels(&s);
        let mut counts = std::collections::HashMap::new();
        for o in &s.objects {
            *counts.entry(o.set_id).or_insert(0usize) += 1;
        }
        assert_eq!(counts.len(), 3);
        let expected_pairs: usize = counts.values().map(|c| c * (c - 1)).sum();
        assert_eq!(y.sum() as usize, expected_pairs);
        assert!(expected_pairs >= 2);
        for i in 0..5 {
            assert_eq!(y[[i, i]], 0.0);
            for j in 0..5 {
                assert_eq!(y[[i, j]], y[[j, i]]);
                let same = s.objects[i].set_id == s.objects[j].set_id;
                assert_eq!(y[[i, j]] == 1.0, same && i != j);
                assert_eq!(same, s.objects[i].shape_id == s.objects[j].shape_id);
            }
        }
    }

    #[test]
    fn invalid_generation_params() {
        assert!(generate_scene(0, 0, 1, 0.0).is_err());
        assert!(generate_scene(2, 3, 1, 0.0).is_err());
        assert!(generate_scene(2, 1, 1, 1.5).is_err());
    }

    fn manual_scene(objects: Vec<SceneObject>, width: u32) -> SceneSpec {
        SceneSpec {
            furnset_schema: 1,
            objects,
            camera: Camera {
                intrinsics: CameraIntrinsics::from_fov(width, width, 1.2).unwrap(),
                position: [0.0; 3],
                yaw: 0.0,
            },
            room_extent: 4.0,
            seed: 5,
            object_samples: 500,
            occlusion_level: 0.0,
            occlusion: vec![],
        }
    }

    #[test]
    fn rear_object_fully_hidden() {
        let front = SceneObject {
            shape_id: 0,
            pose: Pose::new([0.0, 0.0, 2.0], 0.0, 2.0).unwrap(),
            set_id: 0,
        };
        let rear = SceneObject {
            shape_id: 3,
            pose: Pose::new([0.0, 0.0, 6.0], 0.0, 0.3).unwrap(),
            set_id: 1,
        };
        let spec = manual_scene(vec![front, rear], 64);
        let (depth, masks) = render_depth(&spec, 20000).unwrap();
        assert_eq!(masks[1].count(), 0);
        assert!(masks[0].count() > 0);
        assert_eq!(masks[0].count(), depth.valid_count());
    }

    #[test]
    fn filling_object_mask_matches_valid_depth() {
        let big = SceneObject {
            shape_id: 0,
            pose: Pose::new([0.0, 0.0, 0.9], 0.0, 3.0).unwrap(),
            set_id: 0,
        };
        let spec = manual_scene(vec![big], 32);
        let (depth, masks) = render_depth(&spec, 50000).unwrap();
        for v in 0..32 {
            for u in 0..32 {
                assert_eq!(masks[0].contains(u, v), depth.is_valid(u, v));
            }
        }
        assert!(masks[0].count() > 32 * 32 * 9 / 10);
    }

    #[test]
    fn zbuffer_keeps_minimum_depth_and_masks_disjoint() {
        let spec = generate_scene(6, 3, 4, 0.4).unwrap();
        let r = render_scene(&spec, 4000).unwrap();
        let k = spec.camera.intrinsics;
        let mut min_z = vec![f64::INFINITY; k.pixel_count()];
        for cloud in &r.samples {
            for &p in cloud.points() {
                if let Some((u, v)) = k.pixel_index(k.project_point(p)) {
                    let idx = v as usize * k.width as usize + u as usize;
                    min_z[idx] = min_z[idx].min(p[2]);
                }
            }
        }
        for v in 0..k.height {
            for u in 0..k.width {
                let idx = v as usize * k.width as usize + u as usize;
                match r.depth.get(u, v) {
                    Some(d) => assert_eq!(d, min_z[idx]),
                    None => assert!(min_z[idx].is_infinite()),
                }
                let owners = r.masks.iter().filter(|m| m.contains(u, v)).count();
                assert!(owners <= 1);
            }
        }
    }

    #[test]
    fn unprojected_masks_match_winning_samples() {
        let spec = generate_scene(4, 2, 9, 0.2).unwrap();
        let r = render_scene(&spec, 8000).unwrap();
        let k = spec.camera.intrinsics;
        for (i, mask) in r.masks.iter().enumerate() {
            if mask.count() == 0 {
                continue;
            }
            let cloud = unproject(&k, &r.depth, Some(mask)).unwrap();
            let mut n = 0;
            for v in 0..k.height {
                for u in 0..k.width {
                    if !mask.contains(u, v) {
                        continue;
                    }
                    let (obj, sample) = r.owner[v as usize * k.width as usize + u as usize].unwrap();
                    assert_eq!(obj, i);
                    let s = r.samples[obj].points()[sample];
                    let p = cloud.points()[n];
                    assert!((p[2] - s[2]).abs() < 1e-6);
                    // lateral offset bounded by the half-pixel footprint at that depth
                    assert!((p[0] - s[0]).abs() <= 0.5 * s[2] / k.fx + 1e-9);
                    assert!((p[1] - s[1]).abs() <= 0.5 * s[2] / k.fy + 1e-9);
                    n += 1;
                }
            }
            assert_eq!(n, cloud.len());
        }
    }

    #[test]
    fn deeper_occluder_never_grows_rear_mask() {
        let rear = SceneObject {
            shape_id: 0,
            pose: Pose::new([0.0, 0.0, 5.0], 0.0, 1.0).unwrap(),
            set_id: 0,
        };
        let mut last = 0usize;
        for z in [4.5, 4.0, 3.5, 3.0, 2.5] {
            let occluder = SceneObject {
                shape_id: 3,
                pose: Pose::new([0.15, 0.0, z], 0.0, 0.6).unwrap(),
                set_id: 1,
            };
            let spec = manual_scene(vec![rear, occluder], 64);
            let (_, masks) = render_depth(&spec, 20000).unwrap();
            let rear_px = masks[0].count();
            if z < 4.5 {
                assert!(rear_px <= last, "rear grew from {last} to {rear_px} at z = {z}");
            }
            last = rear_px;
        }
    }

    #[test]
    fn world_clouds_match_poses() {
        let s = generate_scene(3, 2, 2, 0.0).unwrap();
        let w = s.world_clouds().unwrap();
        for i in 0..3 {
            assert_eq!(w[i], apply_pose(&s.objects[i].pose, &s.canonical_cloud(i)).unwrap());
        }
    }
}
