use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const SMALL_CONFIG: &str = "encoders = [\"face_a\"]\n\n[dataset]\ncount = 12\ntest_count = 2\n\n\
[attack]\nmax_iters = 5\n\n[train.face_a]\nencoder_id = \"face_a\"\nsteps = 3\nbatch = 4\n";

fn shieldkit(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_shieldkit"))
        .args(args)
        .arg("--out")
        .arg(dir.join("out"))
        .arg("--config")
        .arg(dir.join("config.toml"))
        .output()
        .expect("binary runs")
}

fn workspace() -> TempDir {
    let dir = tempfile::tempdir().expect("temp dir");
    std::fs::write(dir.path().join("config.toml"), SMALL_CONFIG).expect("config written");
    dir
}

fn trained() -> TempDir {
    let dir = workspace();
    let out = shieldkit(dir.path(), &["train"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    dir
}

#[test]
fn help_lists_exit_codes() {
    let out = Command::new(env!("CARGO_BIN_EXE_shieldkit")).arg("--help").output().expect("binary runs");
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success());
    for needle in ["Exit codes", "missing checkpoint", "password dimension", "gradcheck", "ablate-mt"] {
        assert!(text.contains(needle), "help lacks {needle:?}");
    }
}

#[test]
fn protect_without_checkpoint_exits_3() {
    let dir = workspace();
    let out = shieldkit(dir.path(), &["protect", "--limit", "1"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train"));
}

#[test]
fn malformed_config_exits_2() {
    let dir = workspace();
    std::fs::write(dir.path().join("config.toml"), "[dataset]\ncount = \"many\"\n").unwrap();
    assert_eq!(shieldkit(dir.path(), &["gen-data"]).status.code(), Some(2));
}

#[test]
fn unknown_encoder_is_a_usage_error() {
    let dir = workspace();
    assert_eq!(shieldkit(dir.path(), &["train", "--encoder", "resnet"]).status.code(), Some(2));
}

#[test]
fn out_of_range_epsilon_exits_2() {
    let dir = trained();
    assert_eq!(shieldkit(dir.path(), &["protect", "--epsilon", "2"]).status.code(), Some(2));
}

#[test]
fn reveal_rejects_wrong_password_dim() {
    let dir = trained();
    let pw = dir.path().join("pw.toml");
    std::fs::write(&pw, format!("seed = 1\ndim = 3\nvector = \"{}\"\n", "000000000000e03f".repeat(3))).unwrap();
    let gen = shieldkit(dir.path(), &["gen-data"]);
    assert_eq!(gen.status.code(), Some(0));
    let img = dir.path().join("out/data/test/0000.png");
    let out = shieldkit(
        dir.path(),
        &["reveal", "--encoder", "face_a", "--image", img.to_str().unwrap(), "--password", pw.to_str().unwrap()],
    );
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn reveal_rejects_unreadable_image() {
    let dir = trained();
    let bogus = dir.path().join("bogus.png");
    std::fs::write(&bogus, b"not a png").unwrap();
    let out = shieldkit(
        dir.path(),
        &["reveal", "--encoder", "face_a", "--image", bogus.to_str().unwrap(), "--password-seed", "1"],
    );
    assert_eq!(out.status.code(), Some(5));
}

#[test]
fn corrupt_checkpoint_exits_5() {
    let dir = trained();
    let ckpt = dir.path().join("out/checkpoints/face_a.ckpt");
    let bytes = std::fs::read(&ckpt).unwrap();
    std::fs::write(&ckpt, &bytes[..bytes.len() / 2]).unwrap();
    assert_eq!(shieldkit(dir.path(), &["protect", "--limit", "1"]).status.code(), Some(5));
}

#[test]
fn protect_then_reveal_round_trip() {
    let dir = trained();
    let out = shieldkit(dir.path(), &["protect", "--limit", "1"]);
    assert!(matches!(out.status.code(), Some(0 | 1)), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("out/protected/0000.png").exists());
    assert!(dir.path().join("out/passwords/face_a.toml").exists());
    let gen = shieldkit(dir.path(), &["gen-data"]);
    assert_eq!(gen.status.code(), Some(0));
    let protected = dir.path().join("out/protected/0000.png");
    let original = dir.path().join("out/data/test/0000.png");
    let out = shieldkit(
        dir.path(),
        &[
            "reveal",
            "--encoder",
            "face_a",
            "--image",
            protected.to_str().unwrap(),
            "--original",
            original.to_str().unwrap(),
        ],
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).expect("json line");
    for key in ["revealed_similarity", "protected_similarity"] {
        let x = v[key].as_f64().expect("number");
        assert!((-1.0..=1.0).contains(&x), "{key} = {x}");
    }
}
