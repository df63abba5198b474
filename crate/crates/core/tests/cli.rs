//! End-to-end runs of the command-line binary.

use std::path::Path;
use std::process::{Command, Output};

use motion_manifold::data::load_motion;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_motion-manifold"))
}

fn run_ok(args: &[&str]) -> Output {
    let out = bin().args(args).output().expect("spawn");
    assert!(
        out.status.success(),
        "command {args:?} failed:\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn exit_code(args: &[&str]) -> i32 {
    bin().args(args).output().expect("spawn").status.code().unwrap()
}

/// Generates a tiny dataset and trains a tiny model, returning their dirs.
fn gen_and_train(root: &Path) -> (String, String) {
    let data = root.join("data").to_str().unwrap().to_string();
    let run = root.join("run").to_str().unwrap().to_string();
    run_ok(&[
        "gen-data", "--out", &data, "--clips", "6", "--frames", "30", "--joints", "3",
        "--seed", "1",
    ]);
    let manifest = format!("{data}/manifest.tsv");
    run_ok(&[
        "train", "--data", &manifest, "--out", &run, "--variant", "D", "--epochs", "2",
        "--batch-size", "4", "--hidden-dim", "8", "--latent-dim", "3", "--seq-len", "6",
        "--seed", "5",
    ]);
    (data, run)
}

#[test]
fn dataset_training_and_evaluation_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (data, run) = gen_and_train(dir.path());
    let manifest = format!("{data}/manifest.tsv");
    let ckpt = format!("{run}/checkpoint.json");

    let csv = std::fs::read_to_string(format!("{run}/loss.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "epoch,L_R,L_ang,L_pos,L_M,L_W,L_G,L_D");
    assert_eq!(lines.len(), 4); // header + epochs 0..=2

    let out = run_ok(&[
        "eval", "--checkpoint", &ckpt, "--data", &manifest, "--windows", "4", "--seed", "2",
    ]);
    let report = String::from_utf8_lossy(&out.stdout);
    let rows: Vec<&str> = report.lines().collect();
    assert_eq!(rows[0], "metric,decoder,interval_end_s,value");
    // 2 metrics x 2 decoders x 5 intervals + latent row
    assert_eq!(rows.len(), 1 + 20 + 1);
    assert!(rows.last().unwrap().starts_with("E_z,,,"));
}

#[test]
fn manifold_operations_write_valid_clips() {
    let dir = tempfile::tempdir().unwrap();
    let (data, run) = gen_and_train(dir.path());
    let ckpt = format!("{run}/checkpoint.json");
    let clip0 = format!("{data}/clip_0000.json");
    let clip1 = format!("{data}/clip_0001.json");
    let clip2 = format!("{data}/clip_0002.json");

    let rec = dir.path().join("rec.json");
    run_ok(&[
        "reconstruct", "--checkpoint", &ckpt, "--input", &clip0, "--output",
        rec.to_str().unwrap(), "--start", "3",
    ]);
    let rec_file = load_motion(&rec).unwrap();
    assert_eq!(rec_file.frames.len(), 6); // seq_len
    assert_eq!(rec_file.skeleton.n_joints(), 3);

    let samples = dir.path().join("samples");
    run_ok(&[
        "sample", "--checkpoint", &ckpt, "--like", &clip0, "--count", "2", "--out",
        samples.to_str().unwrap(),
    ]);
    assert!(samples.join("sample_00.json").exists());
    assert!(samples.join("sample_01.json").exists());

    let interp = dir.path().join("interp");
    run_ok(&[
        "interpolate", "--checkpoint", &ckpt, "--from", &clip0, "--to", &clip1, "--steps",
        "3", "--out", interp.to_str().unwrap(),
    ]);
    for i in 0..4 {
        assert!(interp.join(format!("step_{i:02}.json")).exists());
    }

    let den = dir.path().join("den.json");
    let noisy = dir.path().join("noisy.json");
    run_ok(&[
        "denoise", "--checkpoint", &ckpt, "--input", &clip0, "--output",
        den.to_str().unwrap(), "--corrupt", "0.5", "--save-corrupted", noisy.to_str().unwrap(),
    ]);
    let noisy_file = load_motion(&noisy).unwrap();
    let zeroed = noisy_file
        .frames
        .iter()
        .flatten()
        .filter(|j| j.iter().all(|&v| v == 0.0))
        .count();
    assert!(zeroed > 0, "corruption must zero some joints");
    assert!(load_motion(&den).unwrap().frames.len() == 6);

    let ana = dir.path().join("ana.json");
    run_ok(&[
        "analogy", "--checkpoint", &ckpt, "--a", &clip0, "--b", &clip1, "--c", &clip2,
        "--output", ana.to_str().unwrap(),
    ]);
    assert!(ana.exists());
}

#[test]
fn training_resumes_from_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let (data, run) = gen_and_train(dir.path());
    let manifest = format!("{data}/manifest.tsv");
    let ckpt = format!("{run}/checkpoint.json");
    run_ok(&[
        "train", "--data", &manifest, "--out", &run, "--variant", "D", "--epochs", "4",
        "--batch-size", "4", "--hidden-dim", "8", "--latent-dim", "3", "--seq-len", "6",
        "--seed", "5", "--resume", &ckpt,
    ]);
    let csv = std::fs::read_to_string(format!("{run}/loss.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 6); // header + epochs 0..=4 appended in place
    assert!(lines[5].starts_with("4,"));
}

#[test]
fn a_config_file_drives_training_and_flags_override_it() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data").to_str().unwrap().to_string();
    run_ok(&[
        "gen-data", "--out", &data, "--clips", "4", "--frames", "30", "--joints", "3",
    ]);
    let manifest = format!("{data}/manifest.tsv");
    let config = dir.path().join("train.toml");
    std::fs::write(
        &config,
        r#"
variant = "D"
epochs = 9
batch_size = 4
[hyper]
n_joints = 3
hidden_dim = 8
latent_dim = 3
seq_len = 6
dropout = 0.1
prior_var = 1.0
"#,
    )
    .unwrap();
    let run = dir.path().join("run").to_str().unwrap().to_string();
    // --epochs wins over the file's 9
    let out = run_ok(&[
        "train", "--data", &manifest, "--out", &run, "--config", config.to_str().unwrap(),
        "--epochs", "1",
    ]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("trained 1 epochs"));
    let csv = std::fs::read_to_string(format!("{run}/loss.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3); // header + epochs 0..=1
}

#[test]
fn exit_codes_distinguish_usage_from_runtime_failures() {
    // bad usage / configuration: 2
    assert_eq!(exit_code(&["gradcheck", "--precision", "single"]), 2);
    assert_eq!(exit_code(&["no-such-command"]), 2);
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x").to_str().unwrap().to_string();
    // runtime failure (missing file): 1
    assert_eq!(exit_code(&["train", "--data", "/no/such/manifest.tsv", "--out", &out]), 1);
}

#[test]
fn gradcheck_passes_clean_and_detects_injected_faults() {
    let out = run_ok(&["gradcheck", "--samples-per-block", "1"]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("gradient check passed (52 blocks)"));

    let bad = bin()
        .args(["gradcheck", "--samples-per-block", "1", "--inject-fault", "gru_cell"])
        .output()
        .unwrap();
    assert_eq!(bad.status.code().unwrap(), 1);
    assert!(String::from_utf8_lossy(&bad.stdout).contains("FAIL"));
}
