use std::path::Path;
use std::process::{Command, Output};

fn ama(args: &[&str], data_root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ama"))
        .args(args)
        .env("AMA_DATA_ROOT", data_root)
        .env("RUST_LOG", "error")
        .output()
        .expect("run ama")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn config_typos_exit_with_code_two_and_a_suggestion() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"lamda_inter": 0.5}"#).unwrap();
    let out = ama(&["train", "--config", cfg.to_str().unwrap(), "--out", "unused"], dir.path());
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    assert!(stderr(&out).contains("did you mean `lambda_inter`"), "{}", stderr(&out));
}

#[test]
fn invalid_values_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let out = ama(&["train", "--set", "lambda_neg=-1", "--out", "unused"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("lambda_neg"), "{}", stderr(&out));
}

#[test]
fn missing_datasets_exit_with_code_three() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let out = ama(
        &["reproduce", "--preset", "fmnist_vs_mnist", "--profile", "desk", "--out", run.to_str().unwrap()],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
    assert!(stderr(&out).contains("fetch_data.sh"), "{}", stderr(&out));
}

#[test]
fn unknown_presets_are_rejected_by_the_parser() {
    let dir = tempfile::tempdir().unwrap();
    let out = ama(&["reproduce", "--preset", "mnist_one_class_12", "--out", "x"], dir.path());
    assert!(!out.status.success());
    assert!(stderr(&out).contains("mnist_one_class_12"), "{}", stderr(&out));
}

#[test]
fn eval_reports_auroc_and_writes_densities() {
    let dir = tempfile::tempdir().unwrap();
    let scores = dir.path().join("scores.csv");
    std::fs::write(
        &scores,
        "sample_id,label,r_score,a_score,anomaly_score\n0,0,1.0,,1.0\n1,0,2.0,,2.0\n2,1,3.0,,3.0\n3,1,0.5,,0.5\n",
    )
    .unwrap();
    let density = dir.path().join("density.csv");
    let out = ama(
        &["eval", "--scores", scores.to_str().unwrap(), "--plot-density", density.to_str().unwrap(), "--bins", "4"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(String::from_utf8_lossy(&out.stdout).contains("AUROC 0.5000"));
    let csv = std::fs::read_to_string(&density).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 4);
    assert!(csv.starts_with("tag,bin_lo,bin_hi,mass"));
}

#[test]
fn score_needs_a_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    let out = ama(&["score", "--run", dir.path().join("nope").to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
}
