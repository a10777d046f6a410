use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn turnpike(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_turnpike"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn run(cmd: &str, config: &str, out: &Path, extra: &[&str]) -> Output {
    let cfg = configs().join(config);
    let mut args = vec![cmd, cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    turnpike(&args)
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn simulate_writes_series_with_documented_header() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(
        "simulate",
        "test4_absolute.toml",
        dir.path(),
        &["--override", "model.n_agents=20"],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("series.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("step,time,L_N,g,u_norm_N,mean_0"));
    assert_eq!(lines.count(), 501);
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(report["summary"]["n_agents"], 20);
    assert_eq!(report["config"]["model"]["kernel"], "absolute");
    assert!(!dir.path().join("agents.csv").exists());
}

#[test]
fn identical_seed_gives_identical_bytes() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        let o = run(
            "simulate",
            "test1_uncontrolled.toml",
            d.path(),
            &["--seed", "7", "--override", "run.per_agent=true"],
        );
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    for f in ["series.csv", "agents.csv"] {
        assert_eq!(
            fs::read(a.path().join(f)).unwrap(),
            fs::read(b.path().join(f)).unwrap(),
            "{f}"
        );
    }
    let c = tempfile::tempdir().unwrap();
    run(
        "simulate",
        "test1_uncontrolled.toml",
        c.path(),
        &["--seed", "8"],
    );
    assert_ne!(
        fs::read(a.path().join("series.csv")).unwrap(),
        fs::read(c.path().join("series.csv")).unwrap()
    );
}

#[test]
fn validation_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(
        "simulate",
        "test1_beta_sweep.toml",
        dir.path(),
        &["--override", "run.beta=100"],
    );
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("run.beta"), "{}", stderr(&o));

    let o = run(
        "simulate",
        "desk.toml",
        dir.path(),
        &["--override", "nonsense"],
    );
    assert_eq!(code(&o), 1);

    let o = run(
        "simulate",
        "desk.toml",
        dir.path(),
        &["--override", "grid.h=0.03"],
    );
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("grid.h"), "{}", stderr(&o));

    let o = turnpike(&["simulate", "/nonexistent/config.toml"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn solve_and_verify_certify_the_desk_instance() {
    let dir = tempfile::tempdir().unwrap();
    let o = run("solve", "desk.toml", dir.path(), &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let cert: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("certificate.json")).unwrap())
            .unwrap();
    assert_eq!(cert["certificate"]["passed"], true);
    assert_eq!(cert["cheap_control"]["passed"], true);
    assert_eq!(cert["certificate"]["r1"], 50);

    let warm = dir.path().join("controls.csv");
    let again = tempfile::tempdir().unwrap();
    let o = run(
        "solve",
        "desk.toml",
        again.path(),
        &[
            "--override",
            &format!("run.warm_start={:?}", warm.display().to_string()),
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(again.path().join("report.json")).unwrap())
            .unwrap();
    assert!(report["summary"]["solver"]["iterations"].as_u64().unwrap() <= 2);

    let v = tempfile::tempdir().unwrap();
    let o = run("verify", "desk.toml", v.path(), &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("constant uniformity in h: true"));
}

#[test]
fn unconverged_solve_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(
        "solve",
        "desk.toml",
        dir.path(),
        &["--override", "solver.max_iterations=2"],
    );
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn failed_certificate_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    // the dissipation estimate needs gamma <= 1
    let o = run(
        "verify",
        "desk.toml",
        dir.path(),
        &["--override", "model.gamma=4.0"],
    );
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stdout));
    let cert: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("certificate.json")).unwrap())
            .unwrap();
    assert!(
        cert["certificate"]["dissipativity_violations"]
            .as_u64()
            .unwrap()
            > 0
    );
}

#[test]
fn adjoint_mode_refuses_the_absolute_kernel() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(
        "solve",
        "desk.toml",
        dir.path(),
        &["--override", "model.kernel=\"absolute\""],
    );
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("finite-difference"), "{}", stderr(&o));

    let o = run(
        "solve",
        "desk.toml",
        dir.path(),
        &[
            "--override",
            "model.kernel=\"absolute\"",
            "--override",
            "solver.gradient_mode={ kind = \"finite-difference\", step = 1e-6 }",
            "--override",
            "solver.gradient_tolerance=1e-6",
            "--override",
            "model.n_agents=4",
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn sweep_writes_one_directory_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(
        "sweep",
        "test2_h_sweep.toml",
        dir.path(),
        &["--workers", "2", "--override", "model.n_agents=10"],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let table = fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    let rows: Vec<&str> = table.lines().collect();
    assert_eq!(rows.len(), 4);
    assert!(rows[1..].iter().all(|r| r.contains(",ok,")));
    for i in 0..3 {
        assert!(dir
            .path()
            .join(format!("h_{i}"))
            .join("series.csv")
            .exists());
    }
    let ratio: f64 = rows[3].split(',').nth(6).unwrap().parse().unwrap();
    assert!((ratio - 0.994009).abs() < 1e-10);
}

#[test]
fn sweep_without_values_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(
        "sweep",
        "test2_h_sweep.toml",
        dir.path(),
        &["--override", "sweep.values=[]"],
    );
    assert_eq!(code(&o), 1);
    let o = run("sweep", "desk.toml", dir.path(), &[]);
    assert_eq!(code(&o), 1);
}
