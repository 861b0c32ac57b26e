use std::path::Path;
use std::process::{Command, Output};

fn rtcan(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rtcan"))
        .args(args)
        .current_dir(cwd)
        .env_remove("RTCAN_SEED")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn synth_decompose_train_smoke() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(
        d.join("spec.json"),
        r#"{"n_subjects": 10, "traces_per_subject": 2, "music_dim": 3}"#,
    )
    .unwrap();

    let o = rtcan(&["synth", "--spec", "spec.json", "--out", "data"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["eda.csv", "annotations.csv", "stimuli.csv", "manifest.json", "truth/spikes.csv"] {
        assert!(d.join("data").join(f).exists(), "missing {f}");
    }

    let o = rtcan(&["decompose", "--in", "data/eda.csv", "--out", "dec"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    let header = std::fs::read_to_string(d.join("dec/S000_M000.csv")).unwrap();
    assert!(header.starts_with("t_s,origin,phasic,tonic,driver,residual"));

    let o = rtcan(
        &[
            "train",
            "--eda",
            "data/eda.csv",
            "--annotations",
            "data/annotations.csv",
            "--music",
            "data/stimuli.csv",
            "--desk",
            "--epochs",
            "1",
            "--seed",
            "3",
            "--out",
            "run",
        ],
        d,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("accuracy="));
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("run/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 3);
    assert_eq!(manifest["folds"].as_array().unwrap().len(), 10);
    assert_eq!(manifest["inputs"]["eda"].as_str().unwrap().len(), 64);
    assert!(d.join("run/fold_09.ckpt").exists());

    let o = rtcan(
        &[
            "explain",
            "--checkpoint",
            "run/fold_00.ckpt",
            "--eda",
            "data/eda.csv",
            "--music",
            "data/stimuli.csv",
            "--subject",
            "S000",
            "--stimulus",
            "M001",
            "--layer",
            "sca_out",
            "--class",
            "1",
            "--out",
            "cam",
        ],
        d,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(d.join("cam/S000_M001_arousal_sca_out.svg").exists());
}

#[test]
fn unknown_flag_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = rtcan(&["train", "--no-such-flag"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    let first = stderr(&o).lines().next().unwrap_or_default().to_string();
    assert!(first.contains("kind=usage"), "{first}");
}

#[test]
fn missing_file_is_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = rtcan(&["correlate", "--annotations", "absent.csv"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unconverged_decomposition_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let samples: Vec<String> = (0..240)
        .map(|i| format!("{:.4}", 2.0 + if i % 40 == 5 { 0.5 } else { 0.0 }))
        .collect();
    std::fs::write(d.join("eda.csv"), format!("S1,M1,4,{}\n", samples.join(","))).unwrap();
    std::fs::write(d.join("prep.json"), r#"{"cvxeda": {"max_iter": 2}}"#).unwrap();
    let o = rtcan(
        &["decompose", "--in", "eda.csv", "--out", "out", "--prep-config", "prep.json"],
        d,
    );
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    let o = rtcan(
        &["decompose", "--in", "eda.csv", "--out", "out", "--prep-config", "prep.json", "--lenient"],
        d,
    );
    assert!(o.status.success());
}

#[test]
fn correlate_reports_perfect_agreement() {
    let dir = tempfile::tempdir().unwrap();
    let rows: String = (1..=9).map(|i| format!("S1,M{i},{i},{i}\n")).collect();
    std::fs::write(dir.path().join("ann.csv"), rows).unwrap();
    let o = rtcan(&["correlate", "--annotations", "ann.csv"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("r=1.000 "), "{}", stdout(&o));
}
