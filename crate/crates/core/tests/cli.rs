use std::path::Path;
use std::process::{Command, Output};

use jointdp::data::Federation;
use jointdp::harness::output::CSV_COLUMNS;

const CONFIG: &str = r#"
repetitions = 1
eval_samples = 300
seed = 3
[task]
kind = "shared_mean"
[problem]
n = 3
m = 8
[domain]
k = 2
ell = 2
[optimizer]
epsilon = 2.0
[sweep]
m = [4, 8]
"#;

fn jointdp(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_jointdp"))
        .args(args)
        .current_dir(dir)
        .env_remove("JOINTDP_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("exp.toml"), CONFIG).unwrap();
    dir
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn calibrate_prints_sigma() {
    let dir = tempfile::tempdir().unwrap();
    let delta = (-1.0f64).exp().to_string();
    let o = jointdp(
        dir.path(),
        &["calibrate", "--lipschitz", "1", "-T", "4", "--delta", &delta, "--epsilon", "1", "--m", "1", "--n", "2"],
    );
    assert!(o.status.success());
    assert!(stdout(&o).lines().any(|l| l == "sigma=1"), "{}", stdout(&o));
}

#[test]
fn calibrate_reads_config() {
    let dir = setup();
    let o = jointdp(dir.path(), &["calibrate", "--config", "exp.toml"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("level=record") && text.contains("T=576"), "{text}");
}

#[test]
fn compare_writes_one_row_per_paradigm_and_is_reproducible() {
    let dir = setup();
    let o = jointdp(dir.path(), &["compare", "--config", "exp.toml", "--out", "a"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for p in ["per_silo", "collab_no_dp", "joint_dp", "full_dp"] {
        assert!(stdout(&o).contains(p));
    }
    let csv = std::fs::read_to_string(dir.path().join("a/results.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), CSV_COLUMNS.join(","));
    assert_eq!(lines.count(), 4);
    let log = std::fs::read_to_string(dir.path().join("a/runs.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 4);

    let o = jointdp(dir.path(), &["compare", "--config", "exp.toml", "--out", "b"]);
    assert!(o.status.success());
    assert_eq!(csv, std::fs::read_to_string(dir.path().join("b/results.csv")).unwrap());

    let o = jointdp(dir.path(), &["replay", "--config", "exp.toml", "--csv", "a/results.csv"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("all rows reproduced"));
}

#[test]
fn replay_detects_edited_rows() {
    let dir = setup();
    assert!(jointdp(dir.path(), &["compare", "--config", "exp.toml"]).status.success());
    let path = dir.path().join("results.csv");
    let csv = std::fs::read_to_string(&path).unwrap();
    let mut rows: Vec<Vec<String>> = csv.lines().map(|l| l.split(',').map(str::to_string).collect()).collect();
    rows[2][10] = "0.5".into();
    let edited: String = rows.iter().map(|r| r.join(",") + "\n").collect();
    std::fs::write(&path, edited).unwrap();
    let o = jointdp(dir.path(), &["replay", "--config", "exp.toml", "--csv", "results.csv"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("rows [2] differ"));
}

#[test]
fn timing_fills_wall_time_only_on_request() {
    let dir = setup();
    assert!(jointdp(dir.path(), &["compare", "--config", "exp.toml", "--timing"]).status.success());
    let csv = std::fs::read_to_string(dir.path().join("results.csv")).unwrap();
    assert!(csv.lines().skip(1).all(|l| !l.ends_with(',')));
    assert!(jointdp(dir.path(), &["compare", "--config", "exp.toml"]).status.success());
    let csv = std::fs::read_to_string(dir.path().join("results.csv")).unwrap();
    assert!(csv.lines().skip(1).all(|l| l.ends_with(',')));
}

#[test]
fn output_directory_comes_from_environment() {
    let dir = setup();
    let o = Command::new(env!("CARGO_BIN_EXE_jointdp"))
        .args(["sweep", "--config", "exp.toml"])
        .current_dir(dir.path())
        .env("JOINTDP_OUT_DIR", "from_env")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("slope vs m"));
    assert!(dir.path().join("from_env/results.csv").exists());
}

#[test]
fn serial_and_parallel_sweeps_agree() {
    let dir = setup();
    assert!(jointdp(dir.path(), &["sweep", "--config", "exp.toml", "--repetitions", "3", "--out", "s"]).status.success());
    assert!(jointdp(dir.path(), &["sweep", "--config", "exp.toml", "--repetitions", "3", "--out", "p", "--parallel"])
        .status
        .success());
    let read = |d: &str| std::fs::read_to_string(dir.path().join(d).join("results.csv")).unwrap();
    assert_eq!(read("s"), read("p"));
}

#[test]
fn gen_writes_a_loadable_federation() {
    let dir = setup();
    let o = jointdp(dir.path(), &["gen", "--config", "exp.toml", "--file", "fed/data.txt"]);
    assert!(o.status.success());
    let text = std::fs::read_to_string(dir.path().join("fed/data.txt")).unwrap();
    let fed = Federation::read_text(text.as_bytes()).unwrap();
    assert_eq!((fed.n(), fed.m, fed.r), (3, 8, 8));
}

#[test]
fn stability_and_user_sweep_run() {
    let dir = setup();
    let o = jointdp(dir.path(), &["stability", "--config", "exp.toml", "--pairs", "5"]);
    assert!(o.status.success());
    let rep: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("stability.json")).unwrap()).unwrap();
    assert_eq!(rep["pairs"], 5);
    assert!(rep["mean_output_distance"].as_f64().unwrap() <= rep["max_output_distance"].as_f64().unwrap());

    let o = jointdp(dir.path(), &["user-sweep", "--config", "exp.toml", "--r", "2,4,8"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout(&o).lines().filter(|l| l.starts_with("r = ")).count(), 3);
}

#[test]
fn bad_invocations_fail() {
    let dir = setup();
    assert_eq!(jointdp(dir.path(), &["compare", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(jointdp(dir.path(), &["compare"]).status.code(), Some(1));
    assert_eq!(jointdp(dir.path(), &["user-sweep", "--config", "exp.toml", "--r", "3"]).status.code(), Some(1));
    std::fs::write(dir.path().join("bad.toml"), CONFIG.replace("[task]", "[task]\ncolour = 1")).unwrap();
    let o = jointdp(dir.path(), &["compare", "--config", "bad.toml"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("colour"));
}

#[test]
fn help_documents_flags() {
    let dir = tempfile::tempdir().unwrap();
    let o = jointdp(dir.path(), &["--help"]);
    assert!(o.status.success());
    let text = stdout(&o);
    for flag in ["--config", "--seed", "--out", "--repetitions", "--eval-samples", "--timing", "--parallel"] {
        assert!(text.contains(flag), "{flag} missing from help");
    }
}
