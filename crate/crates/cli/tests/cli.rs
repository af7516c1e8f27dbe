use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use mtrl::trainer::load_checkpoint;

fn mtrl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mtrl")).args(args).output().unwrap()
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

fn small_data(dir: &Path) -> String {
    let d = s(&dir.join("data"));
    let out = mtrl(&["gen-data", "--out", &d, "--speakers", "3", "--utts", "4", "--frames", "14", "--feat-dim", "4"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    d
}

#[test]
fn gradcheck_reports_every_configuration() {
    let out = mtrl(&["gradcheck"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().count(), 13);
    assert!(text.lines().all(|l| l.ends_with(" ok")));
}

#[test]
fn gradcheck_rejects_delay_past_sequence() {
    let out = mtrl(&["gradcheck", "--frames", "3", "--delay", "3"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error: "));
}

#[test]
fn zero_epoch_train_then_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_data(tmp.path());
    let ck = tmp.path().join("m.ckpt");
    let out = mtrl(&["train", "--data", &data, "--out", &s(&ck), "--epochs", "0", "--feedback", "r+p:i+f+o+g"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let state = load_checkpoint(&ck).unwrap();
    assert_eq!(state.epoch, 0);
    assert!(state.history.is_empty());
    assert!(state.velocity.tensors().iter().all(|t| t.iter().all(|&v| v == 0.0)));
    assert!(state.model.params.cross.iter().all(|(_, m)| m.as_slice().iter().all(|&v| v == 0.0)));
    assert!(state.provenance.is_some());
    assert!(tmp.path().join("m.ckpt.run.toml").exists());
    let history = fs::read_to_string(tmp.path().join("m.ckpt.history.csv")).unwrap();
    assert_eq!(history.lines().count(), 1);

    let csv = tmp.path().join("eval.csv");
    let out = mtrl(&["eval", "--data", &data, "--ckpt", &s(&ck), "--out", &s(&csv)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(&csv).unwrap();
    let row = text.lines().nth(1).unwrap();
    assert!(row.starts_with("r+p,i+f+o+g,"));
    assert!(row.ends_with(",7.23,0.62"), "{row}");
    assert!(tmp.path().join("eval.csv.run.toml").exists());
}

#[test]
fn flags_override_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.toml");
    fs::write(&cfg, "seed = 4\n[data]\nn_speakers = 2\nutts_per_speaker = 3\nframes_per_utt = 10\n").unwrap();
    let d = tmp.path().join("d");
    let out = mtrl(&["gen-data", "--out", &s(&d), "--config", &s(&cfg), "--speakers", "3", "--feat-dim", "3"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let manifest = fs::read_to_string(d.join("manifest.json")).unwrap();
    assert!(manifest.contains("\"n_speakers\": 3") || manifest.contains("\"n_speakers\":3"));
    let resolved = fs::read_to_string(d.join("run.toml")).unwrap();
    assert!(resolved.contains("seed = 4"));
}

#[test]
fn bad_inputs_fail_cleanly() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(!mtrl(&["frobnicate"]).status.success());

    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "seed = \"x\"\n").unwrap();
    let out = mtrl(&["gen-data", "--out", &s(&tmp.path().join("d")), "--config", &s(&cfg)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error: "));

    let data = small_data(tmp.path());
    let out = mtrl(&["train", "--data", &data, "--out", &s(&tmp.path().join("m")), "--feedback", "q:g"]);
    assert!(!out.status.success());

    let out = mtrl(&["eval", "--data", &data, "--ckpt", &s(&tmp.path().join("missing")), "--out", "x.csv"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing"));
}
