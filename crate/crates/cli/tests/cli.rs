use std::path::Path;
use std::process::{Command, Output};

fn massgrid(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_massgrid"))
        .args(args)
        .env("MASSGRID_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, body: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, body).unwrap();
    path.to_string_lossy().into_owned()
}

const SMALL: &str = "[manifold]\ndim = 3\nresolutions = [32]\nflat_radius = 0.25\n\
    [potential]\nf = \"ramp(p, 0.25, 0.4, 10)\"\n[kernel]\ndelta = 0.125\n\
    [experiment]\nkind = \"mass\"\n";

#[test]
fn mass_writes_json_and_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "small.toml", SMALL);
    let out = dir.path().join("out");
    let o = massgrid(&["mass", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("small_mass.json")).unwrap())
            .unwrap();
    let row = &json["rows"][0];
    let (d, v) = (
        row["direct"]["mass"].as_f64().unwrap(),
        row["variational"].as_f64().unwrap(),
    );
    assert!((d - v).abs() <= 1e-8 * d.abs().max(1.0));
    let csv = std::fs::read_to_string(out.join("small_mass.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(
        lines[0],
        "experiment,dim,resolution,side,delta,method,mass,residual"
    );
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("small,3,32,1,0.125,direct,"));
}

#[test]
fn reruns_are_bitwise_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "small.toml", SMALL);
    let run = |sub: &str| {
        let out = dir.path().join(sub);
        let o = massgrid(&["eigen", "--config", &cfg, "--out", out.to_str().unwrap()]);
        assert!(o.status.success());
        std::fs::read(out.join("small_eigen.json")).unwrap()
    };
    assert_eq!(run("a"), run("b"));
}

#[test]
fn family_writes_the_documented_csv() {
    let dir = tempfile::tempdir().unwrap();
    let body = SMALL.replace(
        "kind = \"mass\"",
        "kind = \"family\"\ncoupling = \"ramp(p, 0.25, 0.45, 1)\"\na_values = [0, 1, 2]",
    );
    let cfg = write_config(dir.path(), "fam.toml", &body);
    let out = dir.path().join("out");
    let o = massgrid(&["family", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(out.join("fam_family.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "a,lambda_min,mass,mass_prime,mass_second,fd_prime,fd_second,status"
    );
    let masses: Vec<f64> = lines
        .map(|l| l.split(',').nth(2).unwrap().parse().unwrap())
        .collect();
    assert_eq!(masses.len(), 3);
    // a nonnegative coupling lowers the mass
    assert!(masses.windows(2).all(|w| w[1] < w[0]));
}

#[test]
fn validation_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write_config(dir.path(), "bad.toml", &SMALL.replace("dim = 3", "dim = 7"));
    assert_eq!(massgrid(&["mass", "--config", &bad]).status.code(), Some(2));
    let typo = write_config(dir.path(), "typo.toml", &format!("{SMALL}bogus = 1\n"));
    assert_eq!(
        massgrid(&["mass", "--config", &typo]).status.code(),
        Some(2)
    );
    // the potential must vanish near p
    let support = write_config(
        dir.path(),
        "support.toml",
        &SMALL.replace("ramp(p, 0.25, 0.4, 10)", "const(1)"),
    );
    let o = massgrid(&["mass", "--config", &support]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!o.stderr.is_empty());
}

#[test]
fn a_nonpositive_operator_exits_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "zero.toml",
        &SMALL.replace("ramp(p, 0.25, 0.4, 10)", "const(0)"),
    );
    assert_eq!(massgrid(&["mass", "--config", &cfg]).status.code(), Some(3));
}

#[test]
fn family_needs_a_coupling() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "small.toml", SMALL);
    assert_eq!(
        massgrid(&["family", "--config", &cfg]).status.code(),
        Some(2)
    );
}

#[test]
fn verify_reports_and_fails_on_a_corrupted_operator() {
    let ok = massgrid(&[
        "verify",
        "--only",
        "summation-by-parts,homothety",
        "--seed",
        "3",
    ]);
    assert!(
        ok.status.success(),
        "{}",
        String::from_utf8_lossy(&ok.stderr)
    );
    let report: serde_json::Value = serde_json::from_slice(&ok.stdout).unwrap();
    assert_eq!(report["checks"].as_array().unwrap().len(), 2);

    let bad = massgrid(&[
        "verify",
        "--only",
        "summation-by-parts",
        "--corrupt-symmetry",
    ]);
    assert_eq!(bad.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("summation-by-parts"));

    assert_eq!(
        massgrid(&["verify", "--only", "no-such-check"])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn bad_thread_count_is_rejected() {
    let o = Command::new(env!("CARGO_BIN_EXE_massgrid"))
        .args(["verify", "--only", "homothety"])
        .env("MASSGRID_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}
