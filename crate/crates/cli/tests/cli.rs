//! End-to-end runs of the `pcil` binary.

use std::path::Path;
use std::process::{Command, Output};

fn pcil(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pcil"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = pcil(args);
    assert!(
        out.status.success(),
        "pcil {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn tiny(out_dir: &Path, method: &str) -> Vec<String> {
    [
        format!("out_dir={}", out_dir.display()),
        format!("method={method}"),
        "total_steps=1200".into(),
        "eval_interval=400".into(),
        "learning_starts=300".into(),
        "eval_episodes=1".into(),
        "demo_episodes=2".into(),
        "hidden=16".into(),
        "embedding_dim=8".into(),
        "batch_size=32".into(),
        "contrastive_batch=32".into(),
        "disc_batch=32".into(),
        "bc_epochs=5".into(),
        "seeds=3".into(),
    ]
    .into_iter()
    .flat_map(|kv| ["--set".to_string(), kv])
    .collect()
}

fn args<'a>(head: &[&'a str], rest: &'a [String]) -> Vec<&'a str> {
    head.iter().copied().chain(rest.iter().map(String::as_str)).collect()
}

#[test]
fn theory_check_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    for p in [&a, &b] {
        ok(&["theory-check", "--pairs", "50", "--restarts", "8", "--seed", "5", "--out", p.to_str().unwrap()]);
    }
    let ta = std::fs::read(&a).unwrap();
    assert_eq!(ta, std::fs::read(&b).unwrap());
    let text = String::from_utf8(ta).unwrap();
    assert!(text.starts_with("n,tv,d_cont_est,lower_ok,upper_ok"));
    assert_eq!(text.lines().count(), 51);
    let stdout = ok(&["theory-check", "--pairs", "50", "--restarts", "8", "--seed", "5"]).stdout;
    assert_eq!(stdout, text.as_bytes());
}

#[test]
fn train_twice_gives_identical_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let mut csvs = Vec::new();
    for run in ["r1", "r2"] {
        let out = dir.path().join(run);
        let rest = tiny(&out, "pcil");
        ok(&args(&["train"], &rest));
        let csv = out.join("point_mass_pcil_pcl_sim").join("seed_3.csv");
        csvs.push(std::fs::read(&csv).unwrap_or_else(|e| panic!("{}: {e}", csv.display())));
    }
    assert_eq!(csvs[0], csvs[1]);
    let text = String::from_utf8(csvs.remove(0)).unwrap();
    assert!(text.contains("step,eval_return_mean,eval_return_std,learned_reward_spearman"));
    assert!(text.trim_end().ends_with("# completed"));
}

#[test]
fn demos_train_evaluate_plot_and_dump() {
    let dir = tempfile::tempdir().unwrap();
    let demos = dir.path().join("demos.jsonl");
    let d = demos.to_str().unwrap();
    let out = ok(&["collect-demos", "--out", d, "--episodes", "2", "--seed", "0"]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("transitions"));

    let runs = dir.path().join("runs");
    let mut rest = tiny(&runs, "pcil");
    rest.extend(["--set".into(), format!("demos={d}")]);
    ok(&args(&["train"], &rest));
    let run_dir = runs.join("point_mass_pcil_pcl_sim");
    let ckpt = run_dir.join("seed_3.ckpt");
    assert!(ckpt.exists());

    let ev = ok(&args(&["evaluate", "--checkpoint", ckpt.to_str().unwrap(), "--episodes", "2"], &rest));
    let ev = String::from_utf8(ev.stdout).unwrap();
    let mut lines = ev.lines();
    assert_eq!(lines.next(), Some("mean,std"));
    let vals: Vec<f64> = lines.next().unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    assert!(vals.iter().all(|v| v.is_finite()));

    let emb = dir.path().join("emb.csv");
    ok(&args(
        &["dump-embeddings", "--checkpoint", ckpt.to_str().unwrap(), "--seed", "3", "--out", emb.to_str().unwrap()],
        &rest,
    ));
    let emb = std::fs::read_to_string(&emb).unwrap();
    assert!(emb.starts_with("src,true_reward,learned_reward,e_0"));
    assert!(emb.lines().count() > 1);

    let svg = dir.path().join("curve.svg");
    let csv = run_dir.join("seed_3.csv");
    ok(&["plot", csv.to_str().unwrap(), "--out", svg.to_str().unwrap()]);
    let first = std::fs::read(&svg).unwrap();
    ok(&["plot", csv.to_str().unwrap(), "--out", svg.to_str().unwrap()]);
    assert_eq!(first, std::fs::read(&svg).unwrap());
    assert!(String::from_utf8(first).unwrap().starts_with("<svg"));
}

#[test]
fn ablate_writes_all_four_cells() {
    let dir = tempfile::tempdir().unwrap();
    let rest = tiny(dir.path(), "pcil");
    let out = ok(&args(&["ablate"], &rest));
    let table = String::from_utf8(out.stdout).unwrap();
    for cell in ["pcl", "tcn", "sim", "gail"] {
        assert!(table.contains(cell), "{table}");
    }
    assert!(dir.path().join("ablation_point_mass.csv").exists());
}

#[test]
fn bad_inputs_fail_with_nonzero_exit() {
    let out = pcil(&["train", "--set", "no_such_key=1"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_key"));
    let out = pcil(&["train", "--set", "method=nope"]);
    assert!(!out.status.success());
    let out = pcil(&["evaluate", "--checkpoint", "/nonexistent/ckpt"]);
    assert!(!out.status.success());
}
