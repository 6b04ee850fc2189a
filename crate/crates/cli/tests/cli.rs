use std::path::Path;
use std::process::{Command, Output};

fn chainex(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_chainex"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env_remove("CHAINEX_OUT")
        .output()
        .expect("binary runs")
}

fn ok(o: &Output) {
    assert!(
        o.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        o.status.code(),
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
}

fn first_line(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap().lines().next().unwrap_or_default().to_string()
}

#[test]
fn toy_pipeline_runs_stage_by_stage() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    ok(&chainex(out, &["sample", "--config", "toy"]));
    for stage in ["episodes", "train", "generate", "eval"] {
        ok(&chainex(out, &[stage]));
    }
    for f in ["task.json", "inputs.jsonl", "chains.jsonl", "episodes.jsonl", "checkpoint.json", "rollouts.jsonl", "metrics.csv", "metrics.txt", "config.toml"] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    for f in ["chains.jsonl", "episodes.jsonl", "rollouts.jsonl"] {
        let h = first_line(&out.join(f));
        assert!(h.contains("\"config_hash\""), "{f}: {h}");
        assert!(out.join(format!("{f}.provenance.json")).is_file());
    }
    let metrics = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("label,seed,n,invalid"));
}

#[test]
fn missing_upstream_artifact_exits_3_and_names_the_producer() {
    let dir = tempfile::tempdir().unwrap();
    let o = chainex(dir.path(), &["train", "--config", "toy"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("chainex sample"));
}

#[test]
fn invalid_config_exits_2_listing_every_violation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    let o = chainex(dir.path(), &["config", "--config", "toy"]);
    ok(&o);
    let text = String::from_utf8(o.stdout).unwrap();
    let text = text.replace("steps = 10000", "steps = 0").replace("count = 1\n", "count = 0\n");
    std::fs::write(&cfg, text).unwrap();
    let o = chainex(dir.path(), &["sample", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("steps") && err.contains("count"), "{err}");

    std::fs::write(&cfg, "seed = 1\nbogus = true\n").unwrap();
    let o = chainex(dir.path(), &["sample", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn config_mismatch_needs_force() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    ok(&chainex(out, &["sample", "--config", "toy"]));
    let o = chainex(out, &["episodes", "--config", "toy", "--seed", "7"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("--force"));
    ok(&chainex(out, &["episodes", "--config", "toy", "--seed", "7", "--force"]));
}

#[test]
fn eval_refuses_mixed_rollouts_unless_forced() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for (dir, seed) in [(a.path(), "0"), (b.path(), "1")] {
        ok(&chainex(dir, &["sample", "--config", "toy", "--seed", seed]));
        for stage in ["episodes", "train", "generate"] {
            ok(&chainex(dir, &[stage]));
        }
    }
    let other = b.path().join("rollouts.jsonl");
    let o = chainex(a.path(), &["eval", "--rollouts", other.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    ok(&chainex(a.path(), &["eval", "--rollouts", other.to_str().unwrap(), "--force"]));
}

#[test]
fn unknown_preset_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = chainex(dir.path(), &["sample", "--config", "nonexistent"]);
    assert_eq!(o.status.code(), Some(2));
}
