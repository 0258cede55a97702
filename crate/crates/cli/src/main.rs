mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use furnset_core::defaults;
use serde::Serialize;

use manifest::{write_manifest, Recorder};

/// Repeated-instance scene layout: synthetic scenes, pose recovery, metrics and self-checks.
///
/// Every command emits a run manifest (parameters, seed, input and output
/// hashes, wall time). It goes to --manifest when given, otherwise to
/// `manifest.json` in the command's output directory, otherwise to stderr.
#[derive(Parser, Debug)]
#[command(name = "furnset", version)]
struct Cli {
    /// Write the run manifest to this path.
    #[arg(long, global = true, value_name = "PATH")]
    manifest: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Serialize)]
#[serde(untagged)]
enum Command {
    /// Generate a synthetic scene and render its depth map and instance masks.
    Gen(GenArgs),
    /// Fit poses of object clouds to observed surface clouds.
    Layout(LayoutArgs),
    /// Score world-frame posed clouds against a generated scene.
    Eval(EvalArgs),
    /// Unproject, lay out and score a generated scene end to end.
    Pipeline(PipelineArgs),
    /// Group objects into repeated-instance sets from a similarity matrix.
    Discover(DiscoverArgs),
    /// Check the set-aware attention invariants on seeded random scenes.
    AttnCheck(AttnCheckArgs),
    /// Compare analytic gradients with central finite differences.
    Gradcheck(GradcheckArgs),
    /// Transport noise to a Gaussian with the guided Euler sampler.
    FlowDemo(FlowDemoArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Gen(_) => "gen",
            Command::Layout(_) => "layout",
            Command::Eval(_) => "eval",
            Command::Pipeline(_) => "pipeline",
            Command::Discover(_) => "discover",
            Command::AttnCheck(_) => "attn-check",
            Command::Gradcheck(_) => "gradcheck",
            Command::FlowDemo(_) => "flow-demo",
        }
    }

    /// Directory that receives `manifest.json` when --manifest is absent.
    fn output_dir(&self) -> Option<PathBuf> {
        match self {
            Command::Gen(a) => Some(a.out.clone()),
            Command::Pipeline(a) => Some(a.out.clone()),
            Command::Layout(a) => a.out.clone(),
            _ => None,
        }
    }
}

#[derive(Args, Debug, Serialize)]
struct GenArgs {
    /// Output scene directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = defaults().scene.objects)]
    objects: usize,
    /// Number of repeated-instance sets.
    #[arg(long, default_value_t = defaults().scene.sets)]
    sets: usize,
    #[arg(long, default_value_t = defaults().scene.seed)]
    seed: u64,
    /// Target mean fraction of each object hidden by others, in [0, 0.9].
    #[arg(long, default_value_t = defaults().scene.occlusion)]
    occlusion: f64,
    /// Surface samples per object used by the z-buffer renderer.
    #[arg(long, default_value_t = defaults().scene.samples_per_object)]
    samples_per_object: usize,
    /// Points in each canonical object cloud.
    #[arg(long, default_value_t = defaults().scene.object_samples)]
    object_samples: usize,
}

#[derive(Args, Debug, Serialize)]
struct LayoutArgs {
    /// Directory of canonical object clouds (.fspc or .xyz), paired with surfaces by sorted name.
    #[arg(long)]
    objects: PathBuf,
    /// Directory of camera-frame surface clouds.
    #[arg(long)]
    surfaces: PathBuf,
    /// Camera intrinsics JSON.
    #[arg(long)]
    intrinsics: PathBuf,
    #[arg(long, default_value_t = defaults().layout.lambda1)]
    lambda1: f64,
    #[arg(long, default_value_t = defaults().layout.lambda2)]
    lambda2: f64,
    #[arg(long, default_value_t = defaults().layout.yaw_starts)]
    yaw_starts: usize,
    #[arg(long, default_value_t = defaults().layout.max_iters)]
    max_iters: usize,
    /// Also write `layout_<i>.json` files here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct EvalArgs {
    /// Scene directory written by `gen`.
    #[arg(long)]
    scene: PathBuf,
    /// Directory holding `posed_<i>.fspc` world-frame clouds.
    #[arg(long)]
    predicted: PathBuf,
    /// F-Score distance threshold in normalized units.
    #[arg(long, default_value_t = defaults().metrics.tau)]
    tau: f64,
    /// Write the metric report JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct PipelineArgs {
    /// Scene directory written by `gen`.
    #[arg(long)]
    scene: PathBuf,
    /// Output directory for report.json, layout.json and posed clouds.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = defaults().pipeline.tau)]
    tau: f64,
    #[arg(long, default_value_t = defaults().pipeline.lambda1)]
    lambda1: f64,
    #[arg(long, default_value_t = defaults().pipeline.lambda2)]
    lambda2: f64,
    #[arg(long, default_value_t = defaults().layout.yaw_starts)]
    yaw_starts: usize,
    #[arg(long, default_value_t = defaults().layout.max_iters)]
    max_iters: usize,
}

#[derive(Args, Debug, Serialize)]
struct DiscoverArgs {
    /// Square similarity matrix: a tensor file or a JSON array of rows.
    #[arg(long)]
    similarity: PathBuf,
    #[arg(long, default_value_t = defaults().attention.threshold)]
    threshold: f64,
}

#[derive(Args, Debug, Serialize)]
struct AttnCheckArgs {
    #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2])]
    seeds: Vec<u64>,
    /// Objects per scene.
    #[arg(long, value_delimiter = ',', default_values_t = [1usize, 2, 3, 5, 8])]
    sizes: Vec<usize>,
    /// Negate the similarity bias (negative control).
    #[arg(long)]
    flip_bias_sign: bool,
    /// Write the JSON report here.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct GradcheckArgs {
    #[arg(long, default_value_t = defaults().gradcheck.seed)]
    seed: u64,
    /// Trials per suite; at least 1.
    #[arg(long, default_value_t = defaults().gradcheck.trials as u64,
          value_parser = clap::value_parser!(u64).range(1..))]
    trials: u64,
    /// Finite-difference step.
    #[arg(long, default_value_t = defaults().gradcheck.step)]
    step: f64,
    /// Largest accepted relative error.
    #[arg(long, default_value_t = defaults().gradcheck.tolerance)]
    tolerance: f64,
    /// Perturb the analytic gradients (negative control).
    #[arg(long)]
    corrupt_gradient: bool,
    /// Write the JSON report here.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct FlowDemoArgs {
    #[arg(long, default_value_t = defaults().flow.steps)]
    steps: usize,
    /// Classifier-free guidance scale.
    #[arg(long, default_value_t = defaults().flow.cfg_scale)]
    cfg: f64,
    #[arg(long, default_value_t = defaults().flow.samples)]
    samples: usize,
    #[arg(long, default_value_t = defaults().flow.seed)]
    seed: u64,
    /// Mean of the conditional target.
    #[arg(long, default_value_t = defaults().flow.target_mean)]
    mean: f64,
    /// Standard deviation of the conditional target.
    #[arg(long, default_value_t = defaults().flow.target_std)]
    std: f64,
    /// Write the JSON report here.
    #[arg(long)]
    report: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut rec = Recorder::new(cli.command.name(), &cli.command);
    let code = match commands::run(&cli.command, &mut rec) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    };
    let target = cli
        .manifest
        .clone()
        .or_else(|| cli.command.output_dir().map(|d| d.join("manifest.json")));
    let emitted = rec.finish(code).and_then(|m| match &target {
        Some(path) => write_manifest(path, &m),
        None => {
            eprintln!("{}", serde_json::to_string(&m).expect("manifest serializes"));
            Ok(())
        }
    });
    match emitted {
        Ok(()) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if code == 0 { e.exit_code() as u8 } else { code as u8 })
        }
    }
}
