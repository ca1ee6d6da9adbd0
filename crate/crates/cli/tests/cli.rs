use std::path::Path;
use std::process::{Command, Output};

const TINY: [&str; 6] = [
    "--set=suite.size=30",
    "--set=eval_suite.size=8",
    "--set=train.hidden=8",
    "--set=train.bc.steps=10",
    "--set=train.cpr.steps=2",
    "--set=train.rl.steps=5",
];

fn supernet(args: &[&str], extra: &[&Path]) -> Output {
    let mut c = Command::new(env!("CARGO_BIN_EXE_supernet"));
    c.env("RUST_LOG", "error").args(args);
    for p in extra {
        c.arg(p);
    }
    c.output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn train_tiny(dir: &Path) -> std::path::PathBuf {
    let mut args = vec!["train", "--seed", "1"];
    args.extend(TINY);
    args.push("--out");
    let o = supernet(&args, &[dir]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    dir.join("seed_1").join("model.bin")
}

#[test]
fn config_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&supernet(&["train", "--set", "train.nope=1"], &[])), 2);
    assert_eq!(code(&supernet(&["train", "--set", "seeds=[]"], &[])), 2);
    assert_eq!(code(&supernet(&["gen-suite", "--set", "eval_suite.plan_len=[3,1]"], &[])), 2);
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{ not json").unwrap();
    assert_eq!(code(&supernet(&["train", "--config"], &[&bad])), 2);
    let missing = dir.path().join("graph.json");
    std::fs::write(&bad, format!("{{\"graph\": {:?}}}", missing)).unwrap();
    assert_eq!(code(&supernet(&["train", "--config"], &[&bad])), 2);
}

#[test]
fn divergence_exits_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["train", "--seed", "0", "--set=train.bc.lr=1e300"];
    args.extend(TINY);
    args.push("--out");
    let o = supernet(&args, &[dir.path()]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn train_infer_and_verify_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let ck = train_tiny(dir.path());
    for f in ["checkpoint_bc.bin", "checkpoint_cpr.bin", "checkpoint_rl.bin", "model.bin", "phase_report.csv"] {
        assert!(dir.path().join("seed_1").join(f).exists(), "{f}");
    }
    let report = std::fs::read_to_string(dir.path().join("seed_1/phase_report.csv")).unwrap();
    assert!(report.starts_with("# config {") && report.contains("\"hidden\":8"));

    let trace = dir.path().join("t.jsonl");
    let mut args = vec!["infer", "--seed", "3"];
    args.extend(TINY);
    args.push("--checkpoint");
    let o = supernet(&args, &[&ck, Path::new("--trace"), &trace]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(String::from_utf8_lossy(&o.stdout).lines().count(), 8);

    let mut verify = vec!["trace-verify"];
    verify.extend(TINY);
    verify.push("--checkpoint");
    let o = supernet(&verify, &[&ck, Path::new("--trace"), &trace]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("verified 8 traces, 0 failed"));

    // a perturbed probability must be caught
    let text = std::fs::read_to_string(&trace).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let i = lines.iter().position(|l| l.contains("\"probs\"")).unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&lines[i]).unwrap();
    let p = v.pointer_mut("/probs/0").unwrap();
    *p = serde_json::json!(p.as_f64().unwrap() + 1e-6);
    lines[i] = v.to_string();
    std::fs::write(&trace, lines.join("\n") + "\n").unwrap();
    let o = supernet(&verify, &[&ck, Path::new("--trace"), &trace]);
    assert_eq!(code(&o), 1);

    let mut eval = vec!["eval"];
    eval.extend(TINY);
    eval.push("--checkpoint");
    let o = supernet(&eval, &[&ck]);
    assert_eq!(code(&o), 0);
    let m: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(m["episodes"], 32);
}

#[test]
fn resume_finishes_a_partial_run() {
    let dir = tempfile::tempdir().unwrap();
    train_tiny(dir.path());
    let mut args = vec!["train", "--seed", "1"];
    args.extend(TINY);
    let out = dir.path().join("resumed");
    let o = supernet(
        &args,
        &[Path::new("--resume"), &dir.path().join("seed_1/checkpoint_bc.bin"), Path::new("--out"), &out],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let a = std::fs::read(dir.path().join("seed_1/model.bin")).unwrap();
    let b = std::fs::read(out.join("seed_1/model.bin")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn gen_suite_is_deterministic_jsonl() {
    let a = supernet(&["gen-suite", "--size", "5", "--seed", "4"], &[]);
    let b = supernet(&["gen-suite", "--size", "5", "--seed", "4"], &[]);
    assert_eq!(code(&a), 0);
    assert_eq!(a.stdout, b.stdout);
    let suite = supernet_core::environment::read_suite(&a.stdout[..]).unwrap();
    assert_eq!(suite.len(), 5);
}
