use std::path::Path;
use std::process::{Command, Output};

fn uvae(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_uvae"))
        .args(args)
        .current_dir(cwd)
        .env_remove("UVAE_DATA_ROOT")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

const CONFIG: &str = r#"
seed = 4
checkpoint_every = 2
eval_every = 2

[model]
num_layers = 2
input_channels = 3
base_channels = 4
channel_growth = 1
latent_channels_per_layer = [2, 2]

[objective]
warmup = 4

[data]
clean = "toy/clean"
corrupted = "toy/noisy"
crop = 8
batch = 2

[optimizer]
halve_at = [2]
total_iters = 4
"#;

fn setup(dir: &Path) {
    let out = uvae(&["toy-data", "--out", "toy", "--train", "4", "--val", "3", "--size", "16"], dir);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    std::fs::write(dir.join("run.toml"), CONFIG).unwrap();
}

#[test]
fn train_synthesize_evaluate_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    setup(dir);
    let out = uvae(&["train", "--config", "run.toml", "--out", "run", "--strict-determinism", "--log-every", "1"], dir);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(String::from_utf8_lossy(&out.stdout).lines().filter(|l| l.starts_with("iter")).count(), 4);
    assert!(dir.join("run/checkpoints/final.ckpt").is_file());
    assert!(dir.join("run/config.toml").is_file());

    let synth = |name: &str| {
        uvae(
            &[
                "synthesize",
                "--checkpoint",
                "run/checkpoints/final.ckpt",
                "--input",
                "toy/val/clean",
                "--out",
                name,
                "--seed",
                "3",
                "--strict-determinism",
            ],
            dir,
        )
    };
    assert_eq!(code(&synth("s1")), 0);
    assert_eq!(code(&synth("s2")), 0);
    for f in ["manifest.jsonl", "degraded/0000.png", "clean/0000.png"] {
        assert_eq!(
            std::fs::read(dir.join("s1").join(f)).unwrap(),
            std::fs::read(dir.join("s2").join(f)).unwrap(),
            "{f}"
        );
    }
    // The default level is the training pre-process level of the clean domain.
    let manifest = std::fs::read_to_string(dir.join("s1/manifest.jsonl")).unwrap();
    assert!(manifest.lines().all(|l| l.contains("\"sigma_x\":15")), "{manifest}");

    let out = uvae(&["evaluate", "--pairs", "toy/val", "--synthetic", "s1", "--out", "eval"], dir);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(std::fs::read_to_string(dir.join("eval/per_image.csv")).unwrap().lines().count(), 4);
    let out = uvae(&["evaluate", "--pairs", "toy/val", "--checkpoint", "run/checkpoints/final.ckpt"], dir);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("akld"));
}

#[test]
fn dry_runs_validate_without_writing() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    setup(dir);
    let out = uvae(&["train", "--config", "run.toml", "--out", "run", "--dry-run"], dir);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("4 clean and 4 corrupted"));
    assert!(!dir.join("run").exists());
    let out = uvae(&["toy-data", "--out", "other", "--dry-run"], dir);
    assert_eq!(code(&out), 0);
    assert!(!dir.join("other").exists());
}

#[test]
fn configuration_errors_exit_with_code_two() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    setup(dir);
    std::fs::write(dir.join("bad.toml"), CONFIG.replace("seed = 4", "seed = 4\ncolour = 1")).unwrap();
    assert_eq!(code(&uvae(&["train", "--config", "bad.toml", "--dry-run"], dir)), 2);
    std::fs::write(dir.join("bad.toml"), CONFIG.replace("crop = 8", "crop = 7")).unwrap();
    assert_eq!(code(&uvae(&["train", "--config", "bad.toml", "--dry-run"], dir)), 2);
    assert_eq!(code(&uvae(&["toy-data", "--out", "x", "--noise", "laplace:3"], dir)), 2);
    assert_eq!(code(&uvae(&["evaluate", "--pairs", "toy/val"], dir)), 2);
    assert_eq!(code(&uvae(&["train", "--config", "run.toml", "--out", "run"], dir)), 0);
    let wide = CONFIG.replace("base_channels = 4", "base_channels = 8");
    std::fs::write(dir.join("wide.toml"), wide).unwrap();
    let out = uvae(&["train", "--config", "wide.toml", "--resume", "run/checkpoints/final.ckpt", "--dry-run"], dir);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
    let out = uvae(
        &[
            "synthesize",
            "--checkpoint",
            "run/checkpoints/final.ckpt",
            "--input",
            "toy/clean",
            "--out",
            "s",
            "--config",
            "wide.toml",
        ],
        dir,
    );
    assert_eq!(code(&out), 2);
}

#[test]
fn runtime_failures_exit_with_code_three() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(dir.join("junk.ckpt"), b"not a checkpoint").unwrap();
    let out = uvae(&["synthesize", "--checkpoint", "junk.ckpt", "--input", ".", "--out", "s"], dir);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn diagnose_battery_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = uvae(&["diagnose", "--out", "d"], tmp.path());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stdout));
    assert!(!String::from_utf8_lossy(&out.stdout).contains("FAIL"));
    assert!(tmp.path().join("d/diagnose.json").is_file());
}
