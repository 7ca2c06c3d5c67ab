use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
epochs = 2
batch_size = 4
learning_rate = 0.01
train_scenes = 12
val_scenes = 4
checkpoint_every = 1

[model]
feature_dim = 8
hidden = 6
edge_dim = 4
layers = 1

[car]
iterations = 3

[data]
feature_dim = 8
min_people = 2
max_people = 4
"#;

fn hiu(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hiu"))
        .args(args)
        .env_remove("HIU_OUT")
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("tiny.toml");
    fs::write(&path, TINY).unwrap();
    path
}

fn assert_status(out: &Output, code: i32) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn gen_is_deterministic_and_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = hiu(&["gen", "--config", s(&cfg), "--seed", "5", "--count", "1", "--out", s(out)]);
        assert_status(&o, 0);
    }
    let scene_a = fs::read(a.join("scene_00000.json")).unwrap();
    assert_eq!(scene_a, fs::read(b.join("scene_00000.json")).unwrap());
    assert_eq!(
        fs::read(a.join("manifest.json")).unwrap(),
        fs::read(b.join("manifest.json")).unwrap()
    );
    let text = String::from_utf8(scene_a).unwrap();
    let sample = hiu_core::data::SceneSample::from_json(&text).unwrap();
    assert_eq!(sample.to_json().unwrap(), text);
    assert_eq!(sample.features[0].len(), 8);
}

#[test]
fn manifest_hash_tracks_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let other = dir.path().join("noisy.toml");
    fs::write(&other, TINY.replace("max_people = 4", "max_people = 4\nnoise = 0.25")).unwrap();
    let hash_of = |config: &Path, out: &str| {
        let out_dir = dir.path().join(out);
        assert_status(&hiu(&["gen", "--config", s(config), "--count", "1", "--out", s(&out_dir)]), 0);
        let m: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(out_dir.join("manifest.json")).unwrap()).unwrap();
        assert_eq!(m["count"], 1);
        m["config_hash"].as_str().unwrap().to_string()
    };
    let (h1, h2, h3) = (hash_of(&cfg, "x"), hash_of(&cfg, "y"), hash_of(&other, "z"));
    assert_eq!(h1, h2);
    assert_ne!(h1, h3);
    assert_eq!(h1.len(), 64);
}

#[test]
fn truth_scores_perfectly_against_itself() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let scenes = dir.path().join("scenes");
    // enough scenes for every action class to occur, since absent classes score zero
    assert_status(&hiu(&["gen", "--config", s(&cfg), "--count", "60", "--out", s(&scenes)]), 0);
    let out = dir.path().join("eval");
    let o = hiu(&[
        "eval", "--config", s(&cfg), "--pred", s(&scenes), "--truth", s(&scenes), "--out", s(&out),
    ]);
    assert_status(&o, 0);
    let r: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    for key in ["f1", "accuracy", "mean_iou", "consistency_rate"] {
        assert_eq!(r[key].as_f64(), Some(1.0), "{key}");
    }
    assert_eq!(r["scenes"], 60);
}

#[test]
fn broken_transitivity_fails_the_check() {
    let dir = tempfile::tempdir().unwrap();
    // 0-1 and 1-2 interact but 0-2 do not
    let path = dir.path().join("pattern.json");
    fs::write(
        &path,
        r#"{"n": 3, "y": [1, 1, 1], "z": [[0, 1, 1], [0, 2, 0], [1, 2, 1]]}"#,
    )
    .unwrap();
    let out = dir.path().join("check");
    let o = hiu(&["check", s(&path), "--out", s(&out)]);
    assert_status(&o, 5);
    let r: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("check.json")).unwrap()).unwrap();
    assert_eq!(r[0]["trans_violations"].as_array().unwrap().len(), 1);
    assert_eq!(r[0]["compat_violations"].as_array().unwrap().len(), 0);

    let fixed = dir.path().join("fixed.json");
    fs::write(
        &fixed,
        r#"{"n": 3, "y": [1, 1, 1], "z": [[0, 1, 1], [0, 2, 1], [1, 2, 1]]}"#,
    )
    .unwrap();
    assert_status(&hiu(&["check", s(&fixed), "--out", s(&out)]), 0);
}

#[test]
fn train_infer_check_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let run = dir.path().join("run");
    // strong penalties keep the decoded labelings consistent
    let o = hiu(&[
        "train", "--config", s(&cfg), "--seed", "2", "--lambda-c-init", "10", "--lambda-t-init",
        "10", "--out", s(&run),
    ]);
    assert_status(&o, 0);
    let history = fs::read_to_string(run.join("history.jsonl")).unwrap();
    assert_eq!(history.lines().count(), 3);
    for e in 0..=2 {
        assert!(run.join(format!("checkpoints/epoch_{e:04}.json")).is_file());
    }
    let first: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.join("checkpoints/epoch_0000.json")).unwrap())
            .unwrap();
    assert!((first["penalties"]["trans"].as_f64().unwrap() - 10.0).abs() < 1e-9);

    let scenes = dir.path().join("scenes");
    let o = hiu(&["gen", "--config", s(&cfg), "--split", "validation", "--count", "5", "--out", s(&scenes)]);
    assert_status(&o, 0);
    let preds = dir.path().join("preds");
    let model = run.join("model.json");
    let o = hiu(&[
        "infer", "--checkpoint", s(&model), "--trace-mf", "--dump-graph", "--iterations", "4",
        "--out", s(&preds), s(&scenes),
    ]);
    assert_status(&o, 0);
    let trace: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(preds.join("scene_00000.trace.json")).unwrap())
            .unwrap();
    assert_eq!(trace.as_array().unwrap().len(), 5);
    assert!(preds.join("scene_00000.graph.json").is_file());

    let labels: Vec<PathBuf> = (0..5)
        .map(|k| preds.join(format!("scene_{k:05}.labels.json")))
        .collect();
    let mut args = vec!["check", "--config", s(&cfg), "--out", s(&preds)];
    args.extend(labels.iter().map(|p| s(p)));
    assert_status(&hiu(&args), 0);

    let mut args = vec!["eval", "--config", s(&cfg), "--out", s(&preds), "--truth", s(&scenes), "--pred"];
    args.extend(labels.iter().map(|p| s(p)));
    assert_status(&hiu(&args), 0);
}

#[test]
fn bad_inputs_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("out");

    let bad_cfg = dir.path().join("bad.toml");
    fs::write(&bad_cfg, "[model]\ndropout = 1.5\n").unwrap();
    assert_status(&hiu(&["gen", "--config", s(&bad_cfg), "--out", s(&out)]), 2);
    let missing = dir.path().join("missing.toml");
    assert_status(&hiu(&["gen", "--config", s(&missing), "--out", s(&out)]), 2);

    let scenes = dir.path().join("scenes");
    assert_status(&hiu(&["gen", "--config", s(&cfg), "--count", "1", "--out", s(&scenes)]), 0);
    let corrupt = dir.path().join("corrupt.json");
    fs::write(&corrupt, r#"{"format": "hiu-checkpoint", "version": 99}"#).unwrap();
    let o = hiu(&["infer", "--checkpoint", s(&corrupt), "--out", s(&out), s(&scenes)]);
    assert_status(&o, 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("version"));

    // a default-sized checkpoint cannot read 8-dimensional scenes
    let model = dir.path().join("model.json");
    let m = hiu_core::Model::new(
        hiu_core::togn::ModelConfig { layers: 1, ..Default::default() },
        Default::default(),
        0,
    )
    .unwrap();
    m.save(&model).unwrap();
    assert_status(&hiu(&["infer", "--checkpoint", s(&model), "--out", s(&out), s(&scenes)]), 3);

    // action class outside the configured label set
    let labels = dir.path().join("labels.json");
    fs::write(&labels, r#"{"n": 2, "y": [0, 12], "z": [[0, 1, 0]]}"#).unwrap();
    assert_status(&hiu(&["check", s(&labels), "--out", s(&out)]), 3);
}
