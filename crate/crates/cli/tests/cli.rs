use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn mckv() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_mckv"));
    cmd.env_remove("MCKV_OUT_DIR");
    cmd
}

fn run(args: &[&str]) -> Output {
    mckv().args(args).output().expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn data_rows(csv: &str) -> Vec<&str> {
    csv.lines().filter(|l| !l.starts_with('#')).skip(1).collect()
}

fn temp_dir(name: &str) -> std::path::PathBuf {
    let dir = std::env::temp_dir().join(format!("mckv-cli-{name}-{}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

#[test]
fn csv_is_identical_across_worker_counts() {
    for method in ["classical", "picard-mc", "picard-mlmc"] {
        let outputs: Vec<Vec<u8>> = ["1", "2", "8"]
            .iter()
            .map(|w| {
                let out = run(&[
                    "run", "--model", "burgers", "--method", method, "--epsilon", "0.1", "--replications", "2",
                    "--no-timing", "--workers", w,
                ]);
                assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
                out.stdout
            })
            .collect();
        assert_eq!(outputs[0], outputs[1], "{method}");
        assert_eq!(outputs[0], outputs[2], "{method}");
    }
}

#[test]
fn run_writes_header_and_rows() {
    let out = run(&["run", "--model", "ou", "--epsilon", "0.2,0.1", "--replications", "3", "--seed", "4"]);
    assert!(out.status.success());
    let text = stdout(&out);
    let comments: Vec<&str> = text.lines().take_while(|l| l.starts_with('#')).collect();
    assert_eq!(comments.len(), 3);
    assert!(comments[1].starts_with("# config_sha256: "));
    assert_eq!(comments[1].len(), "# config_sha256: ".len() + 64);
    assert!(text.contains(
        "epsilon,method,seed,estimate,reference,sq_error,predicted_cost,measured_cost,wall_seconds"
    ));
    let rows = data_rows(&text);
    assert_eq!(rows.len(), 6);
    for row in rows {
        let cols: Vec<&str> = row.split(',').collect();
        assert_eq!(cols.len(), 9);
        assert_eq!(cols[1], "picard-mlmc");
        let estimate: f64 = cols[3].parse().unwrap();
        let reference: f64 = cols[4].parse().unwrap();
        let sq: f64 = cols[5].parse().unwrap();
        assert!((reference - (-1.0f64).exp()).abs() < 1e-15);
        assert!((sq - (estimate - reference).powi(2)).abs() <= 1e-15);
    }
}

#[test]
fn flags_override_file_and_file_overrides_defaults() {
    let dir = temp_dir("precedence");
    let path = dir.join("config.json");
    fs::write(&path, r#"{"model":"burgers","seed":5,"replications":7,"epsilons":[0.2]}"#).unwrap();
    let out = run(&["plan", "--config", path.to_str().unwrap()]);
    assert!(out.status.success());
    assert!(stdout(&out).contains("\"epsilon\": 0.2"));

    let out = run(&["run", "--config", path.to_str().unwrap(), "--seed", "9", "--replications", "5"]);
    assert!(out.status.success());
    let text = stdout(&out);
    let embedded = text.lines().nth(2).unwrap();
    assert!(embedded.contains("\"seed\":9"));
    assert!(embedded.contains("\"replications\":5"));
    assert!(embedded.contains("\"model\":\"burgers\""));
    assert!(embedded.contains("\"c\":1.0"));
    assert_eq!(data_rows(&text).len(), 5);
}

#[test]
fn output_directory_from_environment_and_flag() {
    let env_dir = temp_dir("env");
    let flag_dir = temp_dir("flag");
    let out = mckv()
        .args(["run", "--model", "burgers", "--replications", "2", "--no-timing"])
        .env("MCKV_OUT_DIR", &env_dir)
        .output()
        .unwrap();
    assert!(out.status.success());
    let written = fs::read(env_dir.join("results.csv")).unwrap();
    assert_eq!(written, out.stdout);
    assert!(env_dir.join("config.json").exists());

    let out = mckv()
        .args(["run", "--model", "burgers", "--replications", "2", "--no-timing", "--out"])
        .arg(&flag_dir)
        .env("MCKV_OUT_DIR", &env_dir)
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(fs::read(flag_dir.join("results.csv")).unwrap(), out.stdout);
}

#[test]
fn parameter_errors_exit_with_two() {
    for args in [
        vec!["plan", "--epsilon", "0.5"],
        vec!["run", "--model", "nope"],
        vec!["run", "--method", "bogus"],
        vec!["plan", "--c", "-1"],
        vec!["run", "--replications", "0"],
        vec!["plan", "--config", "/nonexistent/config.json"],
        vec!["reference", "--model", "burgers", "--t", "0"],
    ] {
        let out = run(&args);
        assert_eq!(out.status.code(), Some(2), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_failure_keeps_partial_csv() {
    let dir = temp_dir("partial");
    let config = dir.join("config.json");
    fs::write(
        &config,
        r#"{"model":"polynomial","method":"picard-mc","initial_law":{"kind":"point_mass","at":[30]},
            "epsilons":[0.3,0.01],"replications":1,"reference":{"value":0}}"#,
    )
    .unwrap();
    let out_dir = dir.join("out");
    let out = mckv()
        .args(["run", "--config", config.to_str().unwrap(), "--out"])
        .arg(&out_dir)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("non-finite"));
    let kept = fs::read_to_string(out_dir.join("results.csv")).unwrap();
    let rows = data_rows(&kept);
    assert_eq!(rows.len(), 1);
    assert!(rows[0].starts_with("0.3,picard-mc,"));
}

#[test]
fn reference_values() {
    let out = run(&["reference", "--model", "burgers", "--t", "1", "--x", "0.5"]);
    assert!(out.status.success());
    let text = stdout(&out);
    let row: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[3].parse::<f64>().unwrap(), 0.5);
    assert_eq!(row[5], "closed_form");

    let out = run(&["reference", "--model", "polynomial", "--t", "1"]);
    let text = stdout(&out);
    let values: Vec<f64> = text.lines().skip(1).map(|l| l.split(',').nth(3).unwrap().parse().unwrap()).collect();
    assert!((values[0] - 1.38498).abs() < 1e-4);
    assert!((values[1] - 3.13067).abs() < 1e-4);

    let out = run(&["reference", "--model", "polynomial", "--T", "0.5", "--payoff", "x"]);
    let text = stdout(&out);
    assert_eq!(text.lines().count(), 2);
}

#[test]
fn diagnose_prints_variance_table() {
    let dir = temp_dir("diagnose");
    let config = dir.join("config.json");
    fs::write(&config, r#"{"model":"ou","diagnose":{"picard_steps":2,"levels":3,"samples":200}}"#).unwrap();
    let out = run(&["diagnose", "--config", config.to_str().unwrap()]);
    assert!(out.status.success());
    let text = stdout(&out);
    assert!(text.contains("picard_step,level,var_fine,var_diff"));
    assert_eq!(data_rows(&text).len(), 8);
}

#[test]
fn clouds_are_dumped() {
    let dir = temp_dir("clouds");
    let out = run(&[
        "run", "--model", "ou", "--epsilon", "0.3", "--replications", "1", "--dump-clouds", "--out",
        dir.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let clouds = dir.join("clouds");
    let fine = fs::read_to_string(clouds.join("eps0_rep0_level0_fine.csv")).unwrap();
    assert!(fine.starts_with("particle,time_index,x0\n1,0,"));
    assert!(Path::new(&clouds.join("eps0_rep0_level1_coarse.csv")).exists());
    assert!(!clouds.join("eps0_rep0_level0_coarse.csv").exists());
}
