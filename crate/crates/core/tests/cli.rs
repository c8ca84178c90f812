use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const SMALL: &str = "samples = 240\nhidden = [8]\nsearch_space = \"s2\"\nepochs = 2\nfinetune_epochs = 2\nprobe_epochs = 2\n";

fn smpq(args: &[&str], cfg: Option<&Path>, out: &Path) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_smpq"));
    cmd.args(args).arg("--out").arg(out);
    if let Some(c) = cfg {
        cmd.arg("--config").arg(c);
    }
    cmd.output().unwrap()
}

fn write_cfg(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("run.toml");
    std::fs::write(&p, text).unwrap();
    p
}

fn stdout_json(o: &Output) -> Value {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    serde_json::from_slice(&o.stdout).unwrap()
}

fn stderr_json(o: &Output) -> Value {
    serde_json::from_slice(&o.stderr).unwrap_or_else(|_| panic!("stderr: {}", String::from_utf8_lossy(&o.stderr)))
}

#[test]
fn unknown_key_is_a_config_error_naming_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), "epochs = 2\nlearnig_rate = 0.1\n");
    let o = smpq(&["search"], Some(&cfg), dir.path());
    assert_eq!(o.status.code(), Some(2));
    let e = stderr_json(&o);
    assert_eq!(e["error"], "config");
    assert!(e["message"].as_str().unwrap().contains("learnig_rate"));
}

#[test]
fn bad_flag_exits_with_usage_code() {
    let dir = tempfile::tempdir().unwrap();
    let o = smpq(&["search", "--no-such-flag"], None, dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_data_file_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(
        dir.path(),
        "dataset = \"idx\"\nidx_images = \"/nonexistent/images\"\nidx_labels = \"/nonexistent/labels\"\n",
    );
    let o = smpq(&["search"], Some(&cfg), dir.path());
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn diverging_training_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), &format!("{SMALL}learning_rate = 1e250\noptimizer = \"sgd\"\n"));
    let o = smpq(&["search"], Some(&cfg), dir.path());
    assert_eq!(o.status.code(), Some(4), "stderr: {}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn corrupted_checkpoint_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), SMALL);
    stdout_json(&smpq(&["search"], Some(&cfg), dir.path()));
    let ck = dir.path().join("supernet.bshp");
    let mut bytes = std::fs::read(&ck).unwrap();
    bytes[0] ^= 0xff;
    std::fs::write(&ck, bytes).unwrap();
    let o = smpq(&["eval"], Some(&cfg), dir.path());
    assert_eq!(o.status.code(), Some(3));
    assert_eq!(stderr_json(&o)["error"], "checkpoint");
}

#[test]
fn search_writes_artifacts_with_provenance() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), &format!("{SMALL}seed = 9\n"));
    let s = stdout_json(&smpq(&["search"], Some(&cfg), dir.path()));
    assert_eq!(s["method"], "smpq");
    for f in ["policy.json", "trajectory.csv", "timings.csv", "supernet.bshp", "shapley/round_000.csv"] {
        assert!(dir.path().join(f).exists(), "{f} missing");
    }
    let traj = std::fs::read_to_string(dir.path().join("trajectory.csv")).unwrap();
    assert!(traj.starts_with("# seed: 9\n# config: {"));
    let policy: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("policy.json")).unwrap()).unwrap();
    assert_eq!(policy["seed"], 9);
    assert_eq!(policy["config"]["epochs"], 2);
}

#[test]
fn eval_round_trips_the_finetuned_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(
        dir.path(),
        "samples = 240\nhidden = [8]\nweight_bits = [4, 32]\nact_bits = [4, 32]\nepochs = 2\nfinetune_epochs = 3\n",
    );
    stdout_json(&smpq(&["search"], Some(&cfg), dir.path()));
    // force every edge to 32 bits
    let path = dir.path().join("policy.json");
    let mut policy: Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    for l in policy["layers"].as_array_mut().unwrap() {
        l["weight_bits"] = 32.into();
        l["act_bits"] = 32.into();
    }
    std::fs::write(&path, serde_json::to_string(&policy).unwrap()).unwrap();
    let ft = stdout_json(&smpq(&["finetune"], Some(&cfg), dir.path()));
    let ck = dir.path().join("finetuned.bshp");
    let ev = stdout_json(&smpq(&["eval", "--checkpoint", ck.to_str().unwrap()], Some(&cfg), dir.path()));
    assert_eq!(ev["val_accuracy"], ft["metrics"]["val_accuracy"]);
    assert_eq!(ev["train_accuracy"], ft["metrics"]["train_accuracy"]);
    assert_eq!(ev["compression_ratio"], 1.0);
}

#[test]
fn uniform_four_bit_policy_compresses_64x() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), SMALL);
    stdout_json(&smpq(&["search"], Some(&cfg), dir.path()));
    let path = dir.path().join("policy.json");
    let mut policy: Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    for l in policy["layers"].as_array_mut().unwrap() {
        l["weight_bits"] = 4.into();
        l["act_bits"] = 4.into();
    }
    std::fs::write(&path, serde_json::to_string(&policy).unwrap()).unwrap();
    let ev = stdout_json(&smpq(&["eval"], Some(&cfg), dir.path()));
    assert_eq!(ev["compression_ratio"], 64.0);
    assert_eq!(ev["policy"], "4/4,4/4");
}

#[test]
fn policy_outside_the_space_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), SMALL);
    stdout_json(&smpq(&["search"], Some(&cfg), dir.path()));
    let path = dir.path().join("policy.json");
    let mut policy: Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    policy["layers"][0]["weight_bits"] = 7.into();
    std::fs::write(&path, serde_json::to_string(&policy).unwrap()).unwrap();
    let o = smpq(&["eval"], Some(&cfg), dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn seed_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), &format!("{SMALL}seed = 1\n"));
    stdout_json(&smpq(&["search", "--seed", "5"], Some(&cfg), dir.path()));
    let policy: Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("policy.json")).unwrap()).unwrap();
    assert_eq!(policy["seed"], 5);
}

#[test]
fn dmpq_flag_runs_the_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), SMALL);
    let s = stdout_json(&smpq(&["search", "--method", "dmpq"], Some(&cfg), dir.path()));
    assert_eq!(s["method"], "dmpq");
    assert_eq!(s["rounds"], 0);
}

#[test]
fn shapley_exact_on_fourteen_players() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), SMALL);
    let s = stdout_json(&smpq(&["shapley-exact"], Some(&cfg), dir.path()));
    assert_eq!(s["players"], 14);
    assert!(s["efficiency_gap"].as_f64().unwrap().abs() < 1e-9);
    let table = std::fs::read_to_string(dir.path().join("shapley_exact.csv")).unwrap();
    assert_eq!(table.lines().filter(|l| !l.starts_with('#')).count(), 15);
}

#[test]
fn shapley_exact_refuses_twenty_one_players() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), "samples = 120\nhidden = [4, 4]\nsearch_space = \"s2\"\n");
    let o = smpq(&["shapley-exact"], Some(&cfg), dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(stderr_json(&o)["error"], "too_many_players");
}

#[test]
fn pitfall_reports_one_row_per_candidate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), &format!("{SMALL}pitfall_edge = \"0:weight\"\n"));
    stdout_json(&smpq(&["search", "--method", "dmpq"], Some(&cfg), dir.path()));
    let s = stdout_json(&smpq(&["analyze", "pitfall"], Some(&cfg), dir.path()));
    assert_eq!(s["report"]["rows"].as_array().unwrap().len(), 4);
    let csv = std::fs::read_to_string(dir.path().join("analysis/pitfall.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
}

#[test]
fn interaction_with_no_op_edits_has_zero_deltas() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), SMALL);
    stdout_json(&smpq(&["search"], Some(&cfg), dir.path()));
    let policy: Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("policy.json")).unwrap()).unwrap();
    let w0 = policy["layers"][0]["weight_bits"].as_u64().unwrap();
    let a1 = policy["layers"][1]["act_bits"].as_u64().unwrap();
    let cfg = write_cfg(
        dir.path(),
        &format!("{SMALL}interaction_edits = [\"0:weight:{w0}\", \"1:activation:{a1}\"]\n"),
    );
    let s = stdout_json(&smpq(&["analyze", "interaction"], Some(&cfg), dir.path()));
    for k in ["delta_b1", "delta_b2", "delta_b3", "gap"] {
        assert_eq!(s["report"][k].as_f64().unwrap(), 0.0, "{k}");
    }
}

#[test]
fn correlation_emits_reference_metadata() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), &format!("{SMALL}correlation_seeds = [0]\ncorrelation_k = 5\n"));
    let s = stdout_json(&smpq(&["analyze", "correlation"], Some(&cfg), dir.path()));
    assert_eq!(s["reference_tau"], 0.494);
    assert_eq!(s["seeds"], serde_json::json!([0]));
    let j: Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("analysis/correlation.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(j["tau_smpq"].as_array().unwrap().len(), 1);
    assert!(j["predictor"].as_str().is_some());
}

#[test]
fn env_overrides_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), &format!("{SMALL}seed = 1\n"));
    let o = Command::new(env!("CARGO_BIN_EXE_smpq"))
        .args(["search", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path())
        .env("SMPQ_SEED", "3")
        .output()
        .unwrap();
    stdout_json(&o);
    let policy: Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("policy.json")).unwrap()).unwrap();
    assert_eq!(policy["seed"], 3);
}
