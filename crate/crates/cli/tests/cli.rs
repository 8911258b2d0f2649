use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_spinbnn"))
}

fn repo() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn run(args: &[&str], cwd: &Path) -> Output {
    bin().args(args).current_dir(cwd).output().expect("spawn spinbnn")
}

fn lines(out: &Output) -> Vec<serde_json::Value> {
    String::from_utf8_lossy(&out.stdout)
        .lines()
        .map(|l| serde_json::from_str(l).expect("JSON line"))
        .collect()
}

fn quick_config(dir: &Path) -> PathBuf {
    let p = dir.join("quick.ini");
    std::fs::write(&p, "[model]\nlayers = 2, 16, 2\n[train]\nepochs = 20\nn_train = 128\nn_test = 128\n").unwrap();
    p
}

#[test]
fn train_then_eval_and_ood() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick_config(dir.path());
    let cfg = cfg.to_str().unwrap();
    let out_dir = dir.path().to_str().unwrap();
    let out = run(&["--config", cfg, "--out", out_dir, "train"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let logs = lines(&out);
    assert_eq!(logs.len(), 21);
    assert_eq!(logs[20]["diverged"], false);

    let ck = dir.path().join("model.nspn");
    let ck = ck.to_str().unwrap();
    let out = run(&["--config", cfg, "--out", out_dir, "eval", "--checkpoint", ck, "--records"], dir.path());
    assert!(out.status.success());
    let rep = &lines(&out)[0];
    assert!(rep["accuracy"].as_f64().unwrap() > 0.8);
    assert_eq!(rep["samples"], 128);
    let records = std::fs::read_to_string(dir.path().join("records.jsonl")).unwrap();
    assert_eq!(records.lines().count(), 128);

    let out = run(&["--config", cfg, "eval", "--checkpoint", ck, "--mode", "device", "--passes", "3"], dir.path());
    assert!(out.status.success());
    assert_eq!(lines(&out)[0]["passes"], 3);

    let out = run(&["--config", cfg, "ood", "--checkpoint", ck], dir.path());
    assert!(out.status.success());
    let rate = lines(&out)[0]["detection_rate"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&rate));
}

#[test]
fn energy_reference_matches_targets() {
    let out = run(&["energy", "--reference"], &repo());
    assert!(out.status.success());
    let rows = lines(&out);
    assert_eq!(rows.len(), 6);
    let ratios = &rows[5]["comparison"]["ratios"];
    assert!((ratios[0][1].as_f64().unwrap() - 2.94).abs() <= 0.05);
    for r in &rows[..5] {
        let (e, t) = (r["energy_uj"].as_f64().unwrap(), r["target_uj"].as_f64().unwrap());
        assert!((e / t - 1.0).abs() < 0.05, "{r}");
    }
}

#[test]
fn map_and_energy_from_config() {
    let cfg = "configs/reference_cnn_spindrop.ini";
    let out = run(&["--config", cfg, "map"], &repo());
    assert!(out.status.success());
    let rows = lines(&out);
    assert_eq!(rows.last().unwrap()["dropout_modules"], 11456);
    let out = run(&["--config", cfg, "energy"], &repo());
    assert!(out.status.success());
    assert_eq!(lines(&out)[0]["counts"]["dropout_modules"], 11456);
}

#[test]
fn device_cal_and_gen_data() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["device-cal", "--p", "0.2,0.7"], dir.path());
    assert!(out.status.success());
    for r in lines(&out) {
        assert!((r["p"].as_f64().unwrap() - r["realized_p"].as_f64().unwrap()).abs() < 1e-12);
    }
    let a = run(&["--seed", "3", "gen-data", "--kind", "blobs", "--n", "10"], dir.path());
    let b = run(&["--seed", "3", "gen-data", "--kind", "blobs", "--n", "10"], dir.path());
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
    assert_eq!(lines(&a).len(), 10);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.ini");
    std::fs::write(&bad, "[train]\nepoch = 3\n").unwrap();
    let out = run(&["--config", bad.to_str().unwrap(), "train"], dir.path());
    assert_eq!(out.status.code(), Some(2));

    let out = run(&["--config", "missing.ini", "train"], dir.path());
    assert_eq!(out.status.code(), Some(3));

    let junk = dir.path().join("junk.nspn");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    let out = run(&["eval", "--checkpoint", junk.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(3));

    let out = run(&["gen-data", "--kind", "spirals"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn divergence_saves_checkpoint_and_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("div.ini");
    std::fs::write(&cfg, "[model]\nlayers = 2, 8, 2\n[train]\nepochs = 5\nn_train = 64\nlr = 1e300\n").unwrap();
    let out = run(&["--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap(), "train"], dir.path());
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("model.nspn").exists());
}
