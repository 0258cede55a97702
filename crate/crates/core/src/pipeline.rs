//! Scene directories on disk and the end-to-end layout pipeline: unproject
//! each instance segment, place the canonical shapes against the rendered
//! depth, and score the assembled scene against its ground truth.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{apply_pose, unproject, CameraIntrinsics, DepthMap, InstanceMask, PointCloud, Pose};
use crate::io;
use crate::layout::{assemble_scene_observed, LayoutConfig};
use crate::metrics::{evaluate_scene, MetricReport, SCHEMA_VERSION};
use crate::scenegen::{render_scene, SceneSpec};

pub const SCENE_FILE: &str = "scene.json";
pub const INTRINSICS_FILE: &str = "intrinsics.json";
pub const DEPTH_FILE: &str = "depth.fsdm";
pub const REPORT_FILE: &str = "report.json";
pub const LAYOUT_FILE: &str = "layout.json";

pub fn mask_file(index: usize) -> String {
    format!("mask_{index}.fsmk")
}

pub fn object_file(index: usize) -> String {
    format!("object_{index}.fspc")
}

pub fn posed_file(index: usize) -> String {
    format!("posed_{index}.fspc")
}

/// Everything the pipeline reads from a generated scene directory.
#[derive(Clone, Debug)]
pub struct SceneInputs {
    pub spec: SceneSpec,
    pub depth: DepthMap,
    pub masks: Vec<InstanceMask>,
    /// Canonical object clouds standing in for generated geometry.
    pub objects: Vec<PointCloud>,
}

/// Renders `spec` and writes the scene directory. Returns the written paths.
pub fn write_scene_dir(dir: &Path, spec: &SceneSpec, samples_per_object: usize) -> Result<Vec<PathBuf>> {
    let render = render_scene(spec, samples_per_object)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let mut put = |name: String| {
        let p = dir.join(name);
        written.push(p.clone());
        p
    };
    io::write_json(&put(SCENE_FILE.into()), spec)?;
    io::write_json(&put(INTRINSICS_FILE.into()), &spec.camera.intrinsics)?;
    io::write_depth_map(&put(DEPTH_FILE.into()), &render.depth)?;
    for (i, mask) in render.masks.iter().enumerate() {
        io::write_mask(&put(mask_file(i)), mask)?;
    }
    for i in 0..spec.objects.len() {
        io::write_point_cloud(&put(object_file(i)), &spec.canonical_cloud(i))?;
    }
    Ok(written)
}

pub fn read_scene_dir(dir: &Path) -> Result<SceneInputs> {
    let spec: SceneSpec = io::read_json(&dir.join(SCENE_FILE))?;
    spec.validate()?;
    let depth = io::read_depth_map(&dir.join(DEPTH_FILE))?;
    let k = spec.camera.intrinsics;
    if (depth.width(), depth.height()) != (k.width, k.height) {
        return Err(Error::invalid(format!(
            "depth map is {}x{} but the camera is {}x{}",
            depth.width(),
            depth.height(),
            k.width,
            k.height
        )));
    }
    let n = spec.objects.len();
    let masks = (0..n)
        .map(|i| io::read_mask(&dir.join(mask_file(i)), i as u32))
        .collect::<Result<Vec<_>>>()?;
    let objects = (0..n)
        .map(|i| io::read_point_cloud(&dir.join(object_file(i))))
        .collect::<Result<Vec<_>>>()?;
    Ok(SceneInputs {
        spec,
        depth,
        masks,
        objects,
    })
}

/// Layout configuration used against rendered depth.
pub fn pipeline_config() -> LayoutConfig {
    let d = crate::defaults::defaults();
    LayoutConfig {
        lambda1: d.pipeline.lambda1,
        lambda2: d.pipeline.lambda2,
        ..d.layout.clone()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlacedObject {
    pub index: usize,
    pub camera_pose: Pose,
    pub world_pose: Pose,
    pub final_loss: f64,
    pub iterations: usize,
    pub start_index: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayoutReport {
    pub furnset_schema: u32,
    pub objects: Vec<PlacedObject>,
}

#[derive(Clone, Debug)]
pub struct PipelineOutput {
    pub report: MetricReport,
    pub layout: LayoutReport,
    /// World-frame posed object clouds.
    pub posed: Vec<PointCloud>,
}

pub fn run_pipeline(inputs: &SceneInputs, config: &LayoutConfig, tau: f64) -> Result<PipelineOutput> {
    let spec = &inputs.spec;
    let n = spec.objects.len();
    if inputs.masks.len() != n || inputs.objects.len() != n {
        return Err(Error::invalid(format!(
            "scene has {n} objects but {} masks and {} clouds",
            inputs.masks.len(),
            inputs.objects.len()
        )));
    }
    let k: CameraIntrinsics = spec.camera.intrinsics;
    let surfaces = inputs
        .masks
        .iter()
        .map(|m| unproject(&k, &inputs.depth, Some(m)))
        .collect::<Result<Vec<_>>>()?;
    let results = assemble_scene_observed(&inputs.objects, &surfaces, &k, &inputs.depth, config)?;
    let placed: Vec<PlacedObject> = results
        .iter()
        .enumerate()
        .map(|(index, r)| PlacedObject {
            index,
            camera_pose: r.pose,
            world_pose: spec.camera.to_world(&r.pose),
            final_loss: r.final_loss,
            iterations: r.iterations,
            start_index: r.start_index,
        })
        .collect();
    let predicted: Vec<(PointCloud, Pose)> = inputs
        .objects
        .iter()
        .zip(&placed)
        .map(|(c, p)| (c.clone(), p.world_pose))
        .collect();
    let report = evaluate_scene(&predicted, spec, tau)?;
    let posed = predicted
        .iter()
        .map(|(c, p)| apply_pose(p, c))
        .collect::<Result<Vec<_>>>()?;
    Ok(PipelineOutput {
        report,
        layout: LayoutReport {
            furnset_schema: SCHEMA_VERSION,
            objects: placed,
        },
        posed,
    })
}

/// Writes the report, the placements and the posed clouds. Returns the written paths.
pub fn write_pipeline_outputs(dir: &Path, out: &PipelineOutput) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = vec![dir.join(REPORT_FILE), dir.join(LAYOUT_FILE)];
    io::write_json(&written[0], &out.report)?;
    io::write_json(&written[1], &out.layout)?;
    for (i, cloud) in out.posed.iter().enumerate() {
        let p = dir.join(posed_file(i));
        io::write_point_cloud(&p, cloud)?;
        written.push(p);
    }
    Ok(written)
}
