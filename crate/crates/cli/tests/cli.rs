use std::path::Path;
use std::process::Command as Proc;

use intcontrol_cli::config::parse_file;
use intcontrol_cli::{run, Overrides, RunConfig, Status};

fn config(text: &str, out: &Path) -> RunConfig {
    let over = Overrides { out: Some(out.to_path_buf()), ..Overrides::default() };
    RunConfig::resolve(parse_file(text).unwrap(), over).unwrap()
}

fn column(csv: &str, col: usize) -> Vec<f64> {
    csv.lines().skip(1).map(|l| l.split(',').nth(col).unwrap().parse().unwrap()).collect()
}

#[test]
fn solve_on_zero_kernels_reproduces_the_forcing() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("command = \"solve\"\n[problem]\npreset = \"fredholm-zero\"\n[grid]\nn = 8\n", dir.path());
    let out = run(&cfg);
    assert_eq!(out.status, Status::Success, "{}", out.report);
    let csv = std::fs::read_to_string(dir.path().join("state.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "node,t,phi_1");
    let (x, phi) = (column(&csv, 1), column(&csv, 2));
    assert_eq!(x.len(), 9);
    for (x, p) in x.iter().zip(&phi) {
        assert_eq!(*p, 1.0 + x);
    }
    for f in ["costate.csv", "control.csv", "report.txt"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
}

#[test]
fn grad_check_passes_and_lists_every_direction() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(
        "command = \"grad-check\"\nseed = 3\n[problem]\npreset = \"volterra-nonlinear\"\n[grid]\nn = 16\n",
        dir.path(),
    );
    let out = run(&cfg);
    assert_eq!(out.status, Status::Success, "{}", out.report);
    assert_eq!(out.report.lines().filter(|l| l.starts_with("direction ")).count(), 5);
}

#[test]
fn grad_check_with_an_impossible_tolerance_fails() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(
        "command = \"grad-check\"\n[problem]\npreset = \"fredholm-lq\"\n[grid]\nn = 8\n[tolerances]\ngrad_check = 1e-30\n",
        dir.path(),
    );
    assert_eq!(run(&cfg).status, Status::CheckFailed);
}

#[test]
fn sufficiency_on_identity_r1_is_positive_definite() {
    for preset in ["fredholm-energy", "volterra-energy"] {
        let dir = tempfile::tempdir().unwrap();
        let text = format!("command = \"sufficiency-check\"\n[problem]\npreset = \"{preset}\"\n[grid]\nn = 12\n");
        let out = run(&config(&text, dir.path()));
        assert_eq!(out.status, Status::Success, "{}", out.report);
        assert!(out.report.contains("verdict: positive-definite"), "{}", out.report);
    }
}

#[test]
fn solver_commands_reach_stationarity() {
    for (command, preset) in [("lqc-solve", "fredholm-coupled"), ("bilinear-solve", "bilinear-second")] {
        let dir = tempfile::tempdir().unwrap();
        let text = format!("command = \"{command}\"\n[problem]\npreset = \"{preset}\"\n[grid]\nn = 8\n");
        let out = run(&config(&text, dir.path()));
        assert_eq!(out.status, Status::Success, "{}", out.report);
    }
}

#[test]
fn wrong_solver_for_the_preset_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("command = \"lqc-solve\"\n[problem]\npreset = \"volterra-exp\"\n", dir.path());
    let out = run(&cfg);
    assert_eq!(out.status, Status::ConfigError);
    assert!(out.report.contains("problem.preset"));
}

#[test]
fn unknown_preset_parameter_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(
        "command = \"solve\"\n[problem]\npreset = \"fredholm-constant\"\n[problem.params]\nlambd = 0.5\n",
        dir.path(),
    );
    let out = run(&cfg);
    assert_eq!(out.status, Status::ConfigError);
    assert!(out.report.contains("lambd"), "{}", out.report);
}

#[test]
fn identical_runs_give_identical_tables() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let text = "command = \"optimize\"\n[problem]\npreset = \"volterra-lq\"\n[grid]\nn = 8\n";
    assert_eq!(run(&config(text, a.path())).status, Status::Success);
    assert_eq!(run(&config(text, b.path())).status, Status::Success);
    for f in ["state.csv", "costate.csv", "control.csv", "report.txt"] {
        let x = std::fs::read(a.path().join(f)).unwrap();
        let y = std::fs::read(b.path().join(f)).unwrap();
        assert_eq!(x, y, "{f}");
    }
}

#[test]
fn csv_values_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("command = \"solve\"\n[problem]\npreset = \"volterra-exp\"\n[grid]\nn = 7\n", dir.path());
    assert_eq!(run(&cfg).status, Status::Success);
    let p = intcontrol::presets::build_preset("volterra-exp", &Default::default()).unwrap().problem().unwrap();
    let g = intcontrol::build_grid(1.0, 7).unwrap();
    let y = intcontrol::volterra::solve_state(&p, &intcontrol::Field::zeros(g.len(), 1), &g).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("state.csv")).unwrap();
    assert_eq!(column(&csv, 2), y.as_slice());
}

fn binary() -> Proc {
    Proc::new(env!("CARGO_BIN_EXE_intcontrol"))
}

#[test]
fn binary_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let ok = binary()
        .args(["--preset", "volterra-zero", "--command", "solve", "--grid-n", "4", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(ok.status.code(), Some(0));

    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "command = \"solve\"\n[grid]\nsteps = 3\n").unwrap();
    let out = binary().arg("--config").arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("steps"));

    let bad_n = binary().args(["--preset", "volterra-zero", "--command", "solve", "--grid-n", "1"]).output().unwrap();
    assert_eq!(bad_n.status.code(), Some(3));
}

#[test]
fn binary_reports_solver_failure() {
    // lambda = 1 makes the constant-kernel Fredholm operator singular
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(
        &cfg,
        "command = \"solve\"\n[problem]\npreset = \"fredholm-constant\"\n[problem.params]\nlambda = 1.0\n[grid]\nn = 4\n",
    )
    .unwrap();
    let out = binary().arg("--config").arg(&cfg).arg("--out").arg(dir.path().join("o")).output().unwrap();
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stdout));
    assert!(dir.path().join("o/report.txt").exists());
}
