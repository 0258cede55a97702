//! Frozen end-to-end fixture: a three-object scene without occlusion whose
//! two chairs form a repeated set.

use std::path::{Path, PathBuf};

use furnset_core::pipeline::{pipeline_config, read_scene_dir, run_pipeline, write_scene_dir, LayoutReport};
use furnset_core::{defaults, io, MetricReport, SceneSpec};

const TAU: f64 = 0.05;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/v1").join(name)
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1e-6)
}

#[test]
fn scene_file_is_stable() {
    let text = std::fs::read_to_string(fixture("scene.json")).unwrap();
    let spec: SceneSpec = serde_json::from_str(&text).unwrap();
    spec.validate().unwrap();
    assert_eq!(serde_json::to_string_pretty(&spec).unwrap(), text.trim_end());
}

#[test]
fn pipeline_reproduces_frozen_report() {
    let spec: SceneSpec = io::read_json(&fixture("scene.json")).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_scene_dir(dir.path(), &spec, defaults().scene.samples_per_object).unwrap();
    let out = run_pipeline(&read_scene_dir(dir.path()).unwrap(), &pipeline_config(), TAU).unwrap();

    let r = &out.report;
    assert!(r.fscore_s >= 99.0, "F-Score-S {}", r.fscore_s);
    assert!(r.cd_o_repeated.is_some() && r.fscore_o_repeated.is_some());

    let expected: MetricReport = io::read_json(&fixture("report.json")).unwrap();
    assert!(close(r.cd_s, expected.cd_s), "{} vs {}", r.cd_s, expected.cd_s);
    assert!(close(r.cd_o, expected.cd_o));
    assert!(close(r.fscore_s, expected.fscore_s));
    assert!(close(r.fscore_o, expected.fscore_o));
    assert!(close(r.cd_o_repeated.unwrap(), expected.cd_o_repeated.unwrap()));

    let layout: LayoutReport = io::read_json(&fixture("layout.json")).unwrap();
    for (got, want) in out.layout.objects.iter().zip(&layout.objects) {
        let (g, w) = (got.world_pose.as_array(), want.world_pose.as_array());
        assert!((0..5).all(|k| close(g[k], w[k])), "{g:?} vs {w:?}");
        assert_eq!(got.start_index, want.start_index);
    }
}
