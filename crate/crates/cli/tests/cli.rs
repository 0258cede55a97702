use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn furnset(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_furnset"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn json(path: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

fn gen_scene(root: &Path, name: &str) {
    let o = furnset(
        &["gen", "--out", name, "--objects", "3", "--sets", "2", "--seed", "41", "--occlusion", "0"],
        root,
    );
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn pipeline_is_reproducible_and_recorded() {
    let root = tempfile::tempdir().unwrap();
    let root = root.path();
    gen_scene(root, "scene");
    for out in ["a", "b"] {
        let o = furnset(&["pipeline", "--scene", "scene", "--out", out], root);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        assert!(stdout(&o).contains("F-Score-S"));
    }
    for file in ["report.json", "layout.json", "posed_0.fspc", "posed_1.fspc", "posed_2.fspc"] {
        let a = std::fs::read(root.join("a").join(file)).unwrap();
        let b = std::fs::read(root.join("b").join(file)).unwrap();
        assert_eq!(a, b, "{file}");
    }

    let report = json(&root.join("a/report.json"));
    assert_eq!(report["furnset_schema"], 1);
    assert!(report["fscore_s"].as_f64().unwrap() >= 99.0);
    assert!(report["fscore_o_repeated"].is_number());

    let (ma, mb) = (json(&root.join("a/manifest.json")), json(&root.join("b/manifest.json")));
    assert_eq!(ma["command"], "pipeline");
    assert_eq!(ma["seed"], 41);
    assert_eq!(ma["inputs"], mb["inputs"]);
    let hashes = |m: &Value| -> Vec<Value> {
        m["outputs"].as_array().unwrap().iter().map(|d| d["sha256"].clone()).collect()
    };
    assert_eq!(hashes(&ma), hashes(&mb));
    assert_eq!(ma["outputs"].as_array().unwrap().len(), 5);
}

#[test]
fn gen_is_deterministic() {
    let root = tempfile::tempdir().unwrap();
    gen_scene(root.path(), "x");
    gen_scene(root.path(), "y");
    let m = |d: &str| json(&root.path().join(d).join("manifest.json"));
    let hashes = |m: &Value| -> Vec<Value> {
        m["outputs"].as_array().unwrap().iter().map(|d| d["sha256"].clone()).collect()
    };
    assert_eq!(hashes(&m("x")), hashes(&m("y")));
    assert_eq!(m("x")["parameters"]["objects"], 3);
}

#[test]
fn eval_scores_pipeline_output() {
    let root = tempfile::tempdir().unwrap();
    let root = root.path();
    gen_scene(root, "scene");
    furnset(&["pipeline", "--scene", "scene", "--out", "out"], root);
    let o = furnset(
        &["eval", "--scene", "scene", "--predicted", "out", "--tau", "0.05", "--out", "eval.json", "--manifest", "m.json"],
        root,
    );
    assert_eq!(o.status.code(), Some(0));
    // posed clouds are stored as f32, so scores agree to single precision
    let (got, want) = (json(&root.join("eval.json")), json(&root.join("out/report.json")));
    for key in ["cd_s", "cd_o", "fscore_s", "fscore_o", "cd_o_repeated", "fscore_o_repeated"] {
        let (g, w) = (got[key].as_f64().unwrap(), want[key].as_f64().unwrap());
        assert!((g - w).abs() <= 1e-5 * w.abs().max(1e-9), "{key}: {g} vs {w}");
    }
    assert_eq!(json(&root.join("m.json"))["command"], "eval");
}

#[test]
fn missing_scene_is_an_io_error_naming_the_path() {
    let root = tempfile::tempdir().unwrap();
    let o = furnset(&["pipeline", "--scene", "absent", "--out", "out"], root.path());
    assert_eq!(o.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&o.stderr).contains("absent/scene.json"));
}

#[test]
fn layout_emits_one_result_per_object() {
    use furnset_core::geometry::apply_pose;
    use furnset_core::{io, CameraIntrinsics, PointCloud, Pose};

    let root = tempfile::tempdir().unwrap();
    let root = root.path();
    std::fs::create_dir_all(root.join("objects")).unwrap();
    std::fs::create_dir_all(root.join("surfaces")).unwrap();
    let k = CameraIntrinsics::from_fov(256, 256, 70f64.to_radians()).unwrap();
    io::write_json(&root.join("k.json"), &k).unwrap();
    // an L-shaped cloud has no yaw symmetry
    let mut pts = Vec::new();
    for i in 0..20 {
        for j in 0..6 {
            let (a, b) = (i as f64 / 19.0, j as f64 / 5.0);
            pts.push([a - 0.5, 0.4 * b, -0.2]);
            pts.push([-0.5, 0.4 * b, 0.6 * a - 0.2]);
        }
    }
    let object = PointCloud::new(pts).unwrap();
    let truths = [
        Pose::new([0.3, -0.2, 4.0], 0.4, 1.1).unwrap(),
        Pose::new([-0.5, 0.1, 5.0], -1.2, 0.9).unwrap(),
    ];
    for (i, t) in truths.iter().enumerate() {
        io::write_point_cloud(&root.join(format!("objects/object_{i}.fspc")), &object).unwrap();
        io::write_point_cloud(&root.join(format!("surfaces/surface_{i}.fspc")), &apply_pose(t, &object).unwrap())
            .unwrap();
    }
    let o = furnset(
        &["layout", "--objects", "objects", "--surfaces", "surfaces", "--intrinsics", "k.json", "--lambda2", "0"],
        root,
    );
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let lines: Vec<Value> = stdout(&o).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    for (line, t) in lines.iter().zip(&truths) {
        let pose: Pose = serde_json::from_value(line["pose"].clone()).unwrap();
        assert!((pose.scale - t.scale).abs() < 1e-3, "{pose:?} vs {t:?}");
        assert!((pose.yaw - t.yaw).abs() < 1e-3);
    }
}

#[test]
fn invalid_layout_config_is_a_validation_error() {
    let root = tempfile::tempdir().unwrap();
    let o = furnset(
        &["layout", "--objects", ".", "--surfaces", ".", "--intrinsics", "k.json", "--lambda1", "0", "--lambda2", "0"],
        root.path(),
    );
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn gradcheck_passes_and_rejects_corruption() {
    let root = tempfile::tempdir().unwrap();
    let ok = furnset(&["gradcheck", "--trials", "10", "--report", "g.json"], root.path());
    assert_eq!(ok.status.code(), Some(0));
    assert_eq!(stdout(&ok).matches("pass").count(), 7);
    assert_eq!(json(&root.path().join("g.json"))["passed"], true);

    let bad = furnset(&["gradcheck", "--trials", "5", "--corrupt-gradient"], root.path());
    assert_eq!(bad.status.code(), Some(3));
    assert!(stdout(&bad).contains("FAIL"));

    let zero = furnset(&["gradcheck", "--trials", "0"], root.path());
    assert_eq!(zero.status.code(), Some(2));
}

#[test]
fn attention_suite_and_its_negative_control() {
    let root = tempfile::tempdir().unwrap();
    let ok = furnset(&["attn-check"], root.path());
    assert_eq!(ok.status.code(), Some(0));
    let single = furnset(&["attn-check", "--sizes", "1"], root.path());
    assert_eq!(single.status.code(), Some(0));
    let flipped = furnset(&["attn-check", "--flip-bias-sign"], root.path());
    assert_eq!(flipped.status.code(), Some(3));
    let text = stdout(&flipped);
    let failing: Vec<&str> = text.lines().filter(|l| l.ends_with("FAIL")).collect();
    assert_eq!(failing.len(), 1);
    assert!(failing[0].starts_with("bias_monotonicity"));
}

#[test]
fn discover_groups_json_matrix() {
    let root = tempfile::tempdir().unwrap();
    std::fs::write(
        root.path().join("s.json"),
        "[[1,0.9,0.1,0.2],[0.9,1,0.1,0.3],[0.1,0.1,1,0.7],[0.2,0.3,0.7,1]]",
    )
    .unwrap();
    let o = furnset(&["discover", "--similarity", "s.json"], root.path());
    assert_eq!(o.status.code(), Some(0));
    let sets: Vec<Vec<usize>> = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(sets, vec![vec![0, 1], vec![2, 3]]);
}

#[test]
fn flow_demo_reports_moments() {
    let root = tempfile::tempdir().unwrap();
    let o = furnset(&["flow-demo", "--cfg", "1", "--samples", "2000", "--report", "f.json"], root.path());
    assert_eq!(o.status.code(), Some(0));
    let r = json(&root.path().join("f.json"));
    assert!((r["empirical_mean"].as_f64().unwrap() - 2.0).abs() < 0.05);
}

#[test]
fn help_shows_defaults() {
    let root = tempfile::tempdir().unwrap();
    let o = furnset(&["layout", "--help"], root.path());
    let text = stdout(&o);
    assert!(text.contains("[default: 0.5]"), "{text}");
    assert!(text.contains("[default: 8]"));
    let o = furnset(&["gradcheck", "--help"], root.path());
    assert!(stdout(&o).contains("[default: 100]"));
}
