//! End-to-end CLI checks over the compiled binary.

use std::path::Path;
use std::process::{Command, Output};

fn hoigen(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hoigen"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn stdout(output: &Output) -> String {
    String::from_utf8_lossy(&output.stdout).to_string()
}

const FAST: &[&str] = &["--set", "t1=3", "--set", "t2=6", "--set", "candidates=2"];

#[test]
fn generate_is_deterministic_across_invocations() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["generate", "a man is carrying a bicycle", "--seed", "3", "--out", "runs"];
    args.extend_from_slice(FAST);
    let first = hoigen(&args, dir.path());
    assert!(first.status.success(), "{first:?}");
    let second = hoigen(&args, dir.path());
    assert!(second.status.success());
    let hash = |out: &Output| {
        stdout(out)
            .lines()
            .find(|l| l.starts_with("manifest-hash "))
            .unwrap()
            .to_string()
    };
    assert_eq!(hash(&first), hash(&second));
    assert!(stdout(&first).contains("correction bypassed (no changes)"));
}

#[test]
fn module_flag_switches_ablation_shapes() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec![
        "generate",
        "boy|lie on|bench",
        "--modules",
        "g",
        "--out",
        "runs",
    ];
    args.extend_from_slice(FAST);
    let out = hoigen(&args, dir.path());
    assert!(out.status.success(), "{out:?}");
    let run_line = stdout(&out);
    let id = run_line
        .lines()
        .find(|l| l.starts_with("run "))
        .unwrap()
        .trim_start_matches("run ")
        .to_string();
    let run_dir = dir.path().join("runs").join(&id);
    assert!(run_dir.join("candidates/0.png").exists());
    assert!(!run_dir.join("final.png").exists());

    let bad = hoigen(&["generate", "x|y|z", "--modules", "r,c"], dir.path());
    assert!(!bad.status.success());
}

#[test]
fn batch_evaluate_and_inspect_work_together() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("prompts.txt"),
        "boy|lie on|bench\nnot a prompt\nman|carry|bicycle\n",
    )
    .unwrap();
    let mut args = vec![
        "batch",
        "prompts.txt",
        "--out",
        "runs",
        "--set",
        "embedder=hash",
    ];
    args.extend_from_slice(FAST);
    let out = hoigen(&args, dir.path());
    assert!(out.status.success(), "{out:?}");
    let text = stdout(&out);
    assert!(text.contains("runs 2 ok, 1 failed"), "{text}");
    assert!(text.contains("scores n=2"), "{text}");

    let eval = hoigen(
        &["evaluate", "--out", "runs", "--set", "embedder=hash"],
        dir.path(),
    );
    assert!(eval.status.success(), "{eval:?}");
    assert!(stdout(&eval).contains("mean over 2"));

    // inspect the first finished run
    let runs_root = dir.path().join("runs");
    let run_id = std::fs::read_dir(&runs_root)
        .unwrap()
        .flatten()
        .map(|e| e.file_name().to_string_lossy().to_string())
        .find(|name| !name.starts_with("batch-") && runs_root.join(name).join("final.png").exists())
        .unwrap();
    let inspect = hoigen(
        &["inspect-attention", &run_id, "--step", "2", "--out", "runs"],
        dir.path(),
    );
    assert!(inspect.status.success(), "{inspect:?}");
    assert!(stdout(&inspect).lines().count() >= 2);
    assert!(runs_root.join("dumps").join(&run_id).exists());
}

#[test]
fn config_file_values_load_and_cli_flags_override() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("run.conf"),
        "# speed settings\nt1 = 3\nt2 = 6\ncandidates = 2\nseed = 11\nmodules = g\nout = runs\n",
    )
    .unwrap();
    let out = hoigen(
        &["generate", "man|carry|bicycle", "--config", "run.conf", "--seed", "12"],
        dir.path(),
    );
    assert!(out.status.success(), "{out:?}");
    let id = stdout(&out)
        .lines()
        .find(|l| l.starts_with("run "))
        .unwrap()
        .trim_start_matches("run ")
        .to_string();
    let manifest =
        std::fs::read_to_string(dir.path().join("runs").join(&id).join("manifest.json")).unwrap();
    // flag wins over the file value
    assert!(manifest.contains("\"base_seed\": 12"), "{manifest}");
    assert!(manifest.contains("\"module_set\": \"g\""));

    let bad = hoigen(
        &["generate", "man|carry|bicycle", "--config", "missing.conf"],
        dir.path(),
    );
    assert!(!bad.status.success());
}

#[test]
fn unknown_run_id_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let out = hoigen(
        &["inspect-attention", "deadbeef", "--step", "1", "--out", "runs"],
        dir.path(),
    );
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("run not found"));
}
