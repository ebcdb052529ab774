//! End-to-end tests of the command-line interface.

use std::path::PathBuf;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_qbalance"))
}

fn tmp_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("qbalance-cli-{tag}-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("spawn qbalance");
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

#[test]
fn list_scenarios_names_the_corpus() {
    let out = run_ok(bin().arg("list-scenarios"));
    let text = String::from_utf8_lossy(&out.stdout);
    for id in [
        "mm1",
        "md1",
        "dd1-ties",
        "polling2-exhaustive",
        "polling2-gated",
        "polling2-exhaustive-lcfs",
        "batch-arrival2",
        "batch-service-k2",
        "priority2",
        "longer-queue-sym",
        "longer-queue-asym",
        "roving3",
        "shorter-queue-routing",
    ] {
        assert!(text.contains(id), "missing {id} in listing");
    }
}

#[test]
fn run_writes_a_schema_tagged_report_and_plot_data() {
    let dir = tmp_dir("run");
    let out = run_ok(
        bin()
            .args(["run", "md1", "--horizon", "8000", "--replications", "1"])
            .args(["--threads", "1", "--plot-data", "--out"])
            .arg(&dir),
    );
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("overall: PASS"), "{text}");
    let report_path = dir.join("md1.report.json");
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    assert_eq!(report["schema"], "qbalance-report/1");
    assert_eq!(report["scenario"], "md1");
    assert!(report["checks"].as_array().unwrap().len() >= 4);
    // One CSV per identity plus one per exported estimate.
    let csvs: Vec<_> = std::fs::read_dir(&dir)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.path().extension().is_some_and(|x| x == "csv"))
        .collect();
    let expected = report["checks"].as_array().unwrap().len()
        + report["estimates"].as_array().unwrap().len();
    assert_eq!(csvs.len(), expected);
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn same_seed_means_byte_identical_reports() {
    let a = tmp_dir("det-a");
    let b = tmp_dir("det-b");
    for dir in [&a, &b] {
        run_ok(
            bin()
                .args(["run", "mm1", "--horizon", "10000", "--replications", "2"])
                .args(["--seed", "7", "--threads", "2", "--out"])
                .arg(dir),
        );
    }
    let ra = std::fs::read(a.join("mm1.report.json")).unwrap();
    let rb = std::fs::read(b.join("mm1.report.json")).unwrap();
    assert_eq!(ra, rb, "reports differ for identical (config, seed)");
    std::fs::remove_dir_all(&a).ok();
    std::fs::remove_dir_all(&b).ok();
}

#[test]
fn malformed_config_errors_and_names_the_key() {
    let dir = tmp_dir("bad");
    let path = dir.join("bad.toml");
    std::fs::write(
        &path,
        r#"
            id = "bad"
            [model]
            kind = "facility"
            services = [{ exponential = { rate = 1.0 } }]
            arrivals = { kind = "poisson", rates = [0.5] }
            [run]
            horizon = 1000.0
            seed = 1
            not_a_real_key = true
        "#,
    )
    .unwrap();
    let out = bin().arg("verify").arg(&path).output().unwrap();
    assert_eq!(out.status.code(), Some(2), "config errors exit with 2");
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("not_a_real_key"), "stderr: {err}");
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn unknown_scenario_is_a_hard_error() {
    let out = bin().args(["verify", "no-such-scenario"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn failing_check_gates_the_exit_code() {
    // A wrong analytic reference must fail verification: mm1 runs at
    // rho = 0.5 but the scenario claims 0.8.
    let dir = tmp_dir("gate");
    let path = dir.join("wrong.toml");
    std::fs::write(
        &path,
        r#"
            id = "wrong-reference"
            [model]
            kind = "facility"
            services = [{ exponential = { rate = 1.0 } }]
            arrivals = { kind = "poisson", rates = [0.5] }
            [run]
            horizon = 30000.0
            seed = 5
            replications = 2
            [checks]
            birth_death_rho = 0.8
        "#,
    )
    .unwrap();
    let out = bin().arg("verify").arg(&path).output().unwrap();
    assert_eq!(out.status.code(), Some(1), "failing checks exit with 1");
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("FAIL birth_death_reference"), "{text}");
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn replay_reverifies_a_dumped_jump_log() {
    let dir = tmp_dir("replay");
    run_ok(
        bin()
            .args(["run", "dd1-ties", "--horizon", "5000", "--dump-log"])
            .args(["--threads", "1", "--out"])
            .arg(&dir),
    );
    let log = dir.join("dd1-ties.jumplog");
    assert!(log.exists());
    let out = run_ok(bin().arg("replay").arg(&log));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("replayed"), "{text}");
    assert_eq!(
        text.matches("PASS").count(),
        12,
        "12 library functions graded: {text}"
    );
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn events_flag_caps_the_run() {
    let out = run_ok(bin().args([
        "verify",
        "mm1",
        "--events",
        "2000",
        "--horizon",
        "inf",
        "--replications",
        "1",
        "--checks",
        "telescoping,conservation",
    ]));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("pathwise_telescoping"), "{text}");
    assert!(text.contains("overall: PASS"), "{text}");
}
