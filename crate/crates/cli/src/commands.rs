use std::path::{Path, PathBuf};

use furnset_core::checks::{attention_suite, gradcheck, AttentionOptions, GradcheckOptions};
use furnset_core::flow::{flow_demo, GaussianTarget, SamplerConfig};
use furnset_core::layout::assemble_scene;
use furnset_core::metrics::evaluate_clouds;
use furnset_core::pipeline::{
    self, mask_file, object_file, posed_file, read_scene_dir, run_pipeline, write_pipeline_outputs,
    write_scene_dir, SCENE_FILE,
};
use furnset_core::scenegen::{generate_scene_with, SceneParams};
use furnset_core::setattn::discover_sets;
use furnset_core::{defaults, io, CameraIntrinsics, Error, LayoutConfig, PointCloud, Result, SceneSpec};
use ndarray::{Array2, Ix2};

use crate::manifest::Recorder;
use crate::{
    AttnCheckArgs, Command, DiscoverArgs, EvalArgs, FlowDemoArgs, GenArgs, GradcheckArgs, LayoutArgs,
    PipelineArgs,
};

/// Exit code for a self-check that ran but did not pass.
const CHECK_FAILED: i32 = 3;

pub fn run(command: &Command, rec: &mut Recorder) -> Result<i32> {
    match command {
        Command::Gen(a) => gen(a, rec),
        Command::Layout(a) => layout(a, rec),
        Command::Eval(a) => eval(a, rec),
        Command::Pipeline(a) => run_pipeline_cmd(a, rec),
        Command::Discover(a) => discover(a, rec),
        Command::AttnCheck(a) => attn_check(a, rec),
        Command::Gradcheck(a) => grad_check(a, rec),
        Command::FlowDemo(a) => flow(a, rec),
    }
}

fn gen(a: &GenArgs, rec: &mut Recorder) -> Result<i32> {
    rec.seed(a.seed);
    let params = SceneParams {
        object_samples: a.object_samples,
        ..SceneParams::new(a.objects, a.sets, a.seed, a.occlusion)
    };
    let spec = generate_scene_with(&params)?;
    let written = write_scene_dir(&a.out, &spec, a.samples_per_object)?;
    println!(
        "wrote {} objects in {} sets to {}",
        spec.objects.len(),
        a.sets,
        a.out.display()
    );
    rec.outputs(written);
    Ok(0)
}

/// Cloud files in `dir`, ordered by name with numeric runs compared as numbers.
fn cloud_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("fspc" | "xyz")))
        .collect();
    let key = |p: &PathBuf| {
        let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        let digits: String = stem.chars().rev().take_while(char::is_ascii_digit).collect();
        let number: u64 = digits.chars().rev().collect::<String>().parse().unwrap_or(0);
        (stem[..stem.len() - digits.len()].to_string(), number, stem)
    };
    files.sort_by_key(key);
    if files.is_empty() {
        return Err(Error::InvalidInput(format!("no .fspc or .xyz clouds in {}", dir.display())));
    }
    Ok(files)
}

fn read_clouds(paths: &[PathBuf], rec: &mut Recorder) -> Result<Vec<PointCloud>> {
    paths
        .iter()
        .map(|p| {
            rec.input(p);
            io::read_cloud_any(p)
        })
        .collect()
}

fn layout(a: &LayoutArgs, rec: &mut Recorder) -> Result<i32> {
    let config = LayoutConfig {
        lambda1: a.lambda1,
        lambda2: a.lambda2,
        yaw_starts: a.yaw_starts,
        max_iters: a.max_iters,
        ..defaults().layout.clone()
    };
    config.validate()?;
    rec.input(&a.intrinsics);
    let intrinsics: CameraIntrinsics = io::read_json(&a.intrinsics)?;
    intrinsics.validate()?;
    let objects = read_clouds(&cloud_files(&a.objects)?, rec)?;
    let surfaces = read_clouds(&cloud_files(&a.surfaces)?, rec)?;
    let results = assemble_scene(&objects, &surfaces, &intrinsics, &config)?;
    if let Some(out) = &a.out {
        std::fs::create_dir_all(out).map_err(|e| Error::Io {
            path: out.clone(),
            source: e,
        })?;
    }
    for (i, r) in results.iter().enumerate() {
        println!("{}", serde_json::to_string(r).expect("layout result serializes"));
        if let Some(out) = &a.out {
            let path = out.join(format!("layout_{i}.json"));
            io::write_json(&path, r)?;
            rec.outputs([path]);
        }
    }
    Ok(0)
}

fn read_spec(scene: &Path, rec: &mut Recorder) -> Result<SceneSpec> {
    let path = if scene.is_dir() { scene.join(SCENE_FILE) } else { scene.to_path_buf() };
    rec.input(&path);
    let spec: SceneSpec = io::read_json(&path)?;
    spec.validate()?;
    rec.seed(spec.seed);
    Ok(spec)
}

fn eval(a: &EvalArgs, rec: &mut Recorder) -> Result<i32> {
    let spec = read_spec(&a.scene, rec)?;
    let paths: Vec<PathBuf> = (0..spec.objects.len()).map(|i| a.predicted.join(posed_file(i))).collect();
    let predicted = read_clouds(&paths, rec)?;
    let report = evaluate_clouds(&predicted, &spec.world_clouds()?, &spec.set_ids(), a.tau)?;
    print!("{}", report.table());
    if let Some(out) = &a.out {
        io::write_json(out, &report)?;
        rec.outputs([out.clone()]);
    }
    Ok(0)
}

fn run_pipeline_cmd(a: &PipelineArgs, rec: &mut Recorder) -> Result<i32> {
    let inputs = read_scene_dir(&a.scene)?;
    rec.seed(inputs.spec.seed);
    rec.input(a.scene.join(SCENE_FILE));
    rec.input(a.scene.join(pipeline::DEPTH_FILE));
    for i in 0..inputs.spec.objects.len() {
        rec.input(a.scene.join(mask_file(i)));
        rec.input(a.scene.join(object_file(i)));
    }
    let config = LayoutConfig {
        lambda1: a.lambda1,
        lambda2: a.lambda2,
        yaw_starts: a.yaw_starts,
        max_iters: a.max_iters,
        ..pipeline::pipeline_config()
    };
    config.validate()?;
    let out = run_pipeline(&inputs, &config, a.tau)?;
    rec.outputs(write_pipeline_outputs(&a.out, &out)?);
    print!("{}", out.report.table());
    Ok(0)
}

fn read_similarity(path: &Path) -> Result<Array2<f64>> {
    let format_error = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    if path.extension().and_then(|e| e.to_str()) == Some("json") {
        let rows: Vec<Vec<f64>> = io::read_json(path)?;
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(format_error("similarity rows must form a square matrix".into()));
        }
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        return Array2::from_shape_vec((n, n), flat).map_err(|e| format_error(e.to_string()));
    }
    io::read_tensor(path)?
        .into_dimensionality::<Ix2>()
        .map_err(|_| format_error("similarity tensor must be two-dimensional".into()))
}

fn discover(a: &DiscoverArgs, rec: &mut Recorder) -> Result<i32> {
    rec.input(&a.similarity);
    let sim = read_similarity(&a.similarity)?;
    let sets = discover_sets(&sim, a.threshold)?;
    println!("{}", serde_json::to_string(&sets).expect("sets serialize"));
    Ok(0)
}

fn save_report(path: &Option<PathBuf>, report: &impl serde::Serialize, rec: &mut Recorder) -> Result<()> {
    if let Some(p) = path {
        io::write_json(p, report)?;
        rec.outputs([p.clone()]);
    }
    Ok(())
}

fn verdict(passed: bool) -> &'static str {
    if passed {
        "pass"
    } else {
        "FAIL"
    }
}

fn attn_check(a: &AttnCheckArgs, rec: &mut Recorder) -> Result<i32> {
    let opts = AttentionOptions {
        seeds: a.seeds.clone(),
        scene_sizes: a.sizes.clone(),
        flip_bias_sign: a.flip_bias_sign,
        ..AttentionOptions::default()
    };
    let report = attention_suite(&opts)?;
    for r in &report.invariants {
        println!(
            "{:<30} {:>4} cases  worst {:>10.3e}  tol {:.0e}  {}",
            r.invariant,
            r.cases,
            r.worst,
            r.tolerance,
            verdict(r.passed)
        );
    }
    save_report(&a.report, &report, rec)?;
    Ok(if report.passed { 0 } else { CHECK_FAILED })
}

fn grad_check(a: &GradcheckArgs, rec: &mut Recorder) -> Result<i32> {
    rec.seed(a.seed);
    let opts = GradcheckOptions {
        seed: a.seed,
        trials: a.trials as usize,
        step: a.step,
        tolerance: a.tolerance,
        corrupt: a.corrupt_gradient,
    };
    let report = gradcheck(&opts)?;
    for g in &report.groups {
        println!(
            "{:<20} {:>4} trials  max rel err {:>10.3e}  {}",
            g.group,
            g.trials,
            g.max_relative_error,
            verdict(g.passed)
        );
    }
    println!("layout instances excluded for correspondence flips: {}", report.layout_excluded);
    save_report(&a.report, &report, rec)?;
    Ok(if report.passed { 0 } else { CHECK_FAILED })
}

fn flow(a: &FlowDemoArgs, rec: &mut Recorder) -> Result<i32> {
    rec.seed(a.seed);
    let target = GaussianTarget { mean: a.mean, std: a.std };
    let config = SamplerConfig {
        steps: a.steps,
        cfg_scale: a.cfg,
        seed: a.seed,
    };
    config.validate()?;
    let report = flow_demo(&target, &config, a.samples)?;
    println!("{:<10} {:>12} {:>12}", "", "mean", "std");
    println!("{:<10} {:>12.5} {:>12.5}", "target", report.target_mean, report.target_std);
    println!("{:<10} {:>12.5} {:>12.5}", "flow", report.flow_mean, report.flow_std);
    println!("{:<10} {:>12.5} {:>12.5}", "sampled", report.empirical_mean, report.empirical_std);
    save_report(&a.report, &report, rec)?;
    Ok(0)
}
