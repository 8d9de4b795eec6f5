use std::fs;
use std::process::{Command, Output};

fn nvdnp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nvdnp"))
        .args(args)
        .env("NV_DNP_WORKERS", "2")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn anticross_reports_both_manifolds() {
    let g = nvdnp(&["anticross", "--manifold", "ground"]);
    assert_eq!(g.status.code(), Some(0));
    let field: f64 = stdout(&g).trim().parse().unwrap();
    assert!((field - 1024.0).abs() <= 3.0, "{field}");

    let e = nvdnp(&["anticross", "--manifold", "excited"]);
    let field: f64 = stdout(&e).trim().parse().unwrap();
    assert!((field - 512.0).abs() <= 8.0, "{field}");
}

#[test]
fn anticross_without_minimum_is_a_numerical_failure() {
    let o = nvdnp(&[
        "anticross",
        "--manifold",
        "ground",
        "--start",
        "0",
        "--stop",
        "100",
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(nvdnp(&["bogus"]).status.code(), Some(1));
    assert_eq!(nvdnp(&["lines"]).status.code(), Some(1));
    assert_eq!(
        nvdnp(&["anticross", "--manifold", "sideways"])
            .status
            .code(),
        Some(1)
    );
    let o = nvdnp(&["lines", "--b", "10", "--theta", "-0.1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("theta"));
    assert_eq!(
        nvdnp(&["sweep", "/nonexistent/config.toml"]).status.code(),
        Some(1)
    );
    assert_eq!(nvdnp(&["fit", "/nonexistent/dir"]).status.code(), Some(1));
}

#[test]
fn lines_prints_table_and_json() {
    let o = nvdnp(&["lines", "--b", "20", "--theta", "0"]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o).lines().count(), 1 + 3);

    let o = nvdnp(&["lines", "--b", "1024", "--theta", "0.3", "--json"]);
    let lines: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert!(lines.as_array().unwrap().len() > 3);
}

#[test]
fn sweep_then_fit_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let config = dir.path().join("c.toml");
    fs::write(
        &config,
        format!(
            "axis = \"b\"\nvalues = [500.0, 900.0]\noutputs = [\"p_th\", \"odmr_spectrum\"]\noutput_path = {:?}\n[params]\ntheta = 0.2\n",
            out.to_str().unwrap()
        ),
    )
    .unwrap();
    let o = nvdnp(&["sweep", config.to_str().unwrap()]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    assert!(stdout(&o).starts_with("2 points, 0 failed"));
    assert!(out.join("sweep.csv").exists());
    assert!(out.join("resolved_config.toml").exists());

    let spectra = out.join("spectra");
    let o = nvdnp(&["fit", spectra.to_str().unwrap()]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    assert!(stdout(&o).contains("point_00001.csv"));
    assert!(spectra.join("fit_summary.csv").exists());
}

#[test]
fn bad_config_key_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("c.toml");
    fs::write(
        &config,
        "axis = \"b\"\nvalues = [1.0]\n[params]\nthetta = 0.1\n",
    )
    .unwrap();
    let o = nvdnp(&["sweep", config.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("thetta"));
}

#[test]
fn fit_on_empty_directory_succeeds_with_warning() {
    let dir = tempfile::tempdir().unwrap();
    let o = nvdnp(&["fit", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&o.stderr).contains("no spectra"));
}
