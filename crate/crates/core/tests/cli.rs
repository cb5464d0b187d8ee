use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn run(dir: &Path, args: &[&str], config: &str) -> Output {
    let path = dir.join("run.toml");
    fs::write(&path, config).unwrap();
    Command::new(env!("CARGO_BIN_EXE_nldecay"))
        .args(args)
        .arg("--config")
        .arg(&path)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMALL_WAVE: &str = r#"
[model]
kind = "wave1d"
n = 16
support = [[0.2, 0.5]]

[scheme]
dt_factor = 0.5

[experiment]
t_final = 0.5
t_obs = 0.5
probe = "smooth"

[output]
dir = "out"
"#;

#[test]
fn missing_feedback_name_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["simulate"], SMALL_WAVE);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("feedback.name"), "{}", stderr(&o));
}

#[test]
fn unknown_key_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = format!("{SMALL_WAVE}\n[feedback]\nname = \"power\"\nexponent = 3.0\n");
    let o = run(dir.path(), &["simulate"], &cfg);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("feedback.exponent"), "{}", stderr(&o));
}

#[test]
fn simulate_writes_tagged_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = format!("{SMALL_WAVE}\n[feedback]\nname = \"power\"\np = 3.0\n");
    let o = run(dir.path(), &["simulate"], &cfg);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("monotone = true"));
    let csv = fs::read_to_string(dir.path().join("out/trajectory.csv")).unwrap();
    assert!(csv.starts_with("# manifest "));
}

#[test]
fn audit_without_snapshots_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = format!("{SMALL_WAVE}\n[feedback]\nname = \"power\"\np = 3.0\n\n[record]\nsnapshots = \"none\"\n");
    let o = run(dir.path(), &["audit"], &cfg);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("record.snapshots"), "{}", stderr(&o));
}

#[test]
fn audit_with_snapshots_holds() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = format!("{SMALL_WAVE}\n[feedback]\nname = \"power\"\np = 3.0\n\n[record]\nsnapshots = \"all\"\n");
    let o = run(dir.path(), &["audit"], &cfg);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = fs::read_to_string(dir.path().join("out/audit.txt")).unwrap();
    assert_eq!(text.matches("holds").count(), 4, "{text}");
}

#[test]
fn scalar_gramian_constant() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("zero.coo"), "1 0\n").unwrap();
    fs::write(dir.path().join("one.coo"), "1 1\n0 0 1.0\n").unwrap();
    let cfg = r#"
[model]
kind = "custom"
n = 1
a = "zero.coo"
b = "one.coo"
viscosity = "none"

[feedback]
name = "linear"

[scheme]
dt = 0.25
time_viscosity = "none"
space_viscosity = false

[experiment]
t_obs = 2.0

[output]
dir = "out"
"#;
    let o = run(dir.path(), &["gramian"], cfg);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("= 4.000000000000e0"), "{}", stdout(&o));
}

#[test]
fn undamped_run_reports_conservation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = r#"
[model]
kind = "wave1d"
n = 32
support = []
viscosity = "none"

[feedback]
name = "linear"

[scheme]
time_viscosity = "none"
space_viscosity = false

[experiment]
t_final = 2.0
probe = "smooth"

[output]
dir = "out"
"#;
    let o = run(dir.path(), &["simulate"], cfg);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("conservation:"), "{}", stdout(&o));
}

#[test]
fn missed_threshold_exits_with_four() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = r#"
[model]
kind = "wave1d"
support = [[0.0, 1.0]]

[feedback]
name = "linear"

[experiment]
t_final = 1.0
probe = "smooth"
meshes = [8, 12, 16]
cells = [{ label = "plain", dt_factor = 0.5, uniformity_max = 1.0000001, uniformity_min = 1.0 }]
fit_r2_min = 1.5

[output]
dir = "out"
"#;
    let o = run(dir.path(), &["sweep", "--assert"], cfg);
    assert_eq!(o.status.code(), Some(4), "{}{}", stdout(&o), stderr(&o));
    assert!(stderr(&o).contains("threshold"), "{}", stderr(&o));
    let o = run(dir.path(), &["sweep"], cfg);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
}
