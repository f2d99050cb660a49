use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn gta(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gta"))
        .args(args)
        .current_dir(cwd)
        .output()
        .unwrap()
}

const SMALL: &str =
    "problem = quadratic\nnodes = 4\ndim = 2\nkappa = 5\ngraph = cycle\nmethods = GTA1, GTA3\nnc = 1, 2\nbudget.iterations = 60\n";

#[test]
fn run_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("small.cfg"), SMALL).unwrap();
    let out = gta(&["run", "small.cfg", "--out", "res"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in [
        "GTA1_nc1_ng1.csv",
        "GTA1_nc2_ng1.csv",
        "GTA3_nc1_ng1.csv",
        "GTA3_nc2_ng1.csv",
        "summary.csv",
        "theory.csv",
        "manifest.json",
    ] {
        assert!(dir.path().join("res").join(f).is_file(), "{f}");
    }
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("GTA3_nc2_ng1: alpha = "));
}

#[test]
fn tune_prints_every_candidate() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("small.cfg"), SMALL).unwrap();
    let out = gta(&["tune", "small.cfg", "--method", "GTA2", "--nc", "3"], dir.path());
    assert!(out.status.success());
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert_eq!(
        stdout
            .lines()
            .filter(|l| l.chars().next().is_some_and(|c| c.is_ascii_digit()))
            .count(),
        21
    );
    assert!(stdout.lines().last().unwrap().starts_with("best alpha = "));
}

#[test]
fn theory_prints_rows_and_ordering() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("small.cfg"), SMALL.replace("GTA1, GTA3", "GTA1, GTA2, GTA3")).unwrap();
    let out = gta(&["theory", "small.cfg"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.starts_with("method,n_c,n_g,beta,"));
    assert!(stdout.contains("ordering nc=1 ng=1"));
    assert!(!stdout.contains("VIOLATED"));
    assert!(dir.path().join("out/theory.csv").is_file());
}

#[test]
fn beta_of_four_cycle() {
    let out = gta(&["beta", "--graph", "cycle", "--nodes", "4", "--nc", "2"], Path::new("."));
    assert!(out.status.success());
    let stdout = String::from_utf8(out.stdout).unwrap();
    let values: Vec<f64> = stdout.lines().map(|l| l.split(" = ").nth(1).unwrap().parse().unwrap()).collect();
    assert!(
        (values[0] - 1.0 / 3.0).abs() < 1e-14 && (values[1] - 1.0 / 9.0).abs() < 1e-14,
        "{stdout}"
    );
    let out = gta(
        &["beta", "--graph", "edge_list", "--nodes", "3", "--edges", "0-1,1-2"],
        Path::new("."),
    );
    assert!(out.status.success());
}

#[test]
fn exit_codes_by_category() {
    let dir = tempfile::tempdir().unwrap();
    let write = |name: &str, text: &str| fs::write(dir.path().join(name), text).unwrap();
    write("parse.cfg", "problem = quadratic\nnodes = many\n");
    write("config.cfg", "problem = quadratic\nnodes = 4\n");
    write("diverge.cfg", "problem = quadratic\nnodes = 4\ndim = 3\nkappa = 10000\ngraph = cycle\nmethods = GTA1\ntune_max_exp = 0\nbudget.iterations = 200\n");
    let code = |args: &[&str]| gta(args, dir.path()).status.code().unwrap();
    assert_eq!(code(&["run", "parse.cfg"]), 3);
    assert_eq!(code(&["run", "config.cfg"]), 2);
    assert_eq!(code(&["run", "diverge.cfg"]), 4);
    assert_eq!(code(&["run", "missing.cfg"]), 1);
    assert_eq!(code(&["beta", "--graph", "cycle", "--nodes", "2"]), 2);
    let err = String::from_utf8(gta(&["run", "parse.cfg"], dir.path()).stderr).unwrap();
    assert!(err.contains("line 2"), "{err}");
}
