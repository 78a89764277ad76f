use std::path::Path;
use std::process::{Command, Output};

fn kym(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kym")).args(args).current_dir(dir).output().expect("run kym")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn config(dir: &Path, name: &str, body: &str) -> String {
    std::fs::write(dir.join(name), body).unwrap();
    name.to_string()
}

const SQUARE: &str = r#"
[polytope]
model = "square(1,1)"
[bundle]
degrees = [1, 2]
[coupling]
alpha0 = 1.0
alpha1 = 0.1
[solver]
grid = 12
[perturbation]
phi_amplitude = 0.01
m_amplitude = 0.05
"#;

#[test]
fn solve_converges_and_writes_its_artifacts() {
    let d = tempfile::tempdir().unwrap();
    let c = config(d.path(), "sq.toml", SQUARE);
    let o = kym(&["solve", "--config", &c, "--out", "run", "--seed", "5"], d.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let run = d.path().join("run");
    let r = json(&run.join("report.json"));
    assert_eq!(r["converged"], true);
    assert_eq!(r["seed"], 5);
    assert_eq!(r["class"]["labels"], serde_json::json!([0, 0, 1, 2]));
    let hist = std::fs::read_to_string(run.join("history.csv")).unwrap();
    assert!(hist.starts_with("leg,iteration,residual_linf"));
    assert!(hist.lines().count() >= 3);
    let phi = std::fs::read_to_string(run.join("fields/phi.txt")).unwrap();
    assert_eq!(phi.lines().next().unwrap(), "# 13 13 0.08333333333333333 0.08333333333333333 0 0 1 1");
    assert_eq!(phi.lines().count(), 14);

    // the state file reads back exactly and is accepted by check
    let text = std::fs::read_to_string(run.join("state.kym")).unwrap();
    let st = kym::state_io::read_state_str(&text).unwrap();
    assert_eq!(kym::state_io::state_to_string(&st), text);
    let o = kym(&["check", "run/state.kym", "--alpha0", "1", "--alpha1", "0.1"], d.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
}

#[test]
fn identical_runs_differ_only_in_the_timestamp() {
    let d = tempfile::tempdir().unwrap();
    let c = config(d.path(), "sq.toml", SQUARE);
    for out in ["a", "b"] {
        assert_eq!(code(&kym(&["solve", "--config", &c, "--out", out, "--seed", "9"], d.path())), 0);
    }
    let strip = |p: &str| {
        let mut v = json(&d.path().join(p).join("report.json"));
        v.as_object_mut().unwrap().remove("timestamp");
        serde_json::to_string(&v).unwrap()
    };
    assert_eq!(strip("a"), strip("b"));
    for f in ["state.kym", "history.csv", "fields/m.txt"] {
        let r = |o: &str| std::fs::read(d.path().join(o).join(f)).unwrap();
        assert_eq!(r("a"), r("b"), "{f}");
    }
}

#[test]
fn bad_input_exits_with_two() {
    let d = tempfile::tempdir().unwrap();
    let nd = config(
        d.path(),
        "nd.toml",
        r#"
[polytope]
facets = [{ normal = [1, 0], offset = 0.0 }, { normal = [0, 1], offset = 0.0 }, { normal = [-1, -2], offset = 2.0 }]
[bundle]
labels = [0, 0, 0]
[coupling]
alpha0 = 1.0
alpha1 = 0.1
"#,
    );
    let o = kym(&["solve", "--config", &nd, "--out", "nd"], d.path());
    assert_eq!(code(&o), 2);
    let err: serde_json::Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(err["error"]["kind"], "NonDelzant");
    assert_eq!(json(&d.path().join("nd/error.json"))["error"]["kind"], "NonDelzant");

    let miss = config(d.path(), "miss.toml", &SQUARE.replace("alpha1 = 0.1", ""));
    let o = kym(&["solve", "--config", &miss], d.path());
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("alpha1"));

    let unknown = config(d.path(), "unk.toml", &SQUARE.replace("grid = 12", "grid = 12\nsteps = 3"));
    let o = kym(&["solve", "--config", &unknown], d.path());
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("steps"));

    assert_eq!(code(&kym(&["solve"], d.path())), 2);
    assert_eq!(code(&kym(&["check", "missing.kym"], d.path())), 2);
}

#[test]
fn check_flags_a_hand_corrupted_field() {
    let d = tempfile::tempdir().unwrap();
    let c = config(d.path(), "sq.toml", &SQUARE.replace("[perturbation]\nphi_amplitude = 0.01\nm_amplitude = 0.05\n", ""));
    assert_eq!(code(&kym(&["solve", "--config", &c, "--out", "run"], d.path())), 0);
    let text = std::fs::read_to_string(d.path().join("run/state.kym")).unwrap();
    // a spike in phi at an interior node breaks convexity
    let bad: Vec<String> = text
        .lines()
        .map(|l| match l.split(' ').collect::<Vec<_>>().as_slice() {
            ["6", "6", _, m] => format!("6 6 0.5 {m}"),
            _ => l.to_string(),
        })
        .collect();
    std::fs::write(d.path().join("bad.kym"), bad.join("\n") + "\n").unwrap();
    let o = kym(&["check", "bad.kym", "--alpha1", "0.1"], d.path());
    assert_eq!(code(&o), 1);
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(out.lines().any(|l| l.starts_with("identity") && l.contains("FAIL")), "{out}");

    std::fs::write(d.path().join("cut.kym"), &text[..text.len() / 2]).unwrap();
    assert_eq!(code(&kym(&["check", "cut.kym"], d.path())), 2);
}

#[test]
fn trivial_bundle_checks_are_vacuous() {
    let d = tempfile::tempdir().unwrap();
    let c = config(d.path(), "t.toml", &SQUARE.replace("degrees = [1, 2]", "degrees = []"));
    assert_eq!(code(&kym(&["solve", "--config", &c, "--out", "run", "--tol", "1e-7"], d.path())), 0);
    let o = kym(&["check", "run/state.kym", "--config", &c, "--out", "chk"], d.path());
    assert_eq!(code(&o), 0);
    let rows = json(&d.path().join("chk/check.json"));
    let vac: Vec<&str> =
        rows["rows"].as_array().unwrap().iter().filter(|r| r["vacuous"] == true).map(|r| r["name"].as_str().unwrap()).collect();
    assert_eq!(vac, ["identity", "residual_hym"]);
}

#[test]
fn invariants_of_a_product_state() {
    let d = tempfile::tempdir().unwrap();
    let c = config(d.path(), "sq.toml", &SQUARE.replace("degrees = [1, 2]", "degrees = [2, 3]"));
    let o = kym(&["invariants", "--config", &c, "--out", "inv"], d.path());
    assert_eq!(code(&o), 0);
    let v = json(&d.path().join("inv/invariants.json"));
    assert!((v["z"].as_f64().unwrap() - 5.0).abs() < 1e-10);
    assert!((v["s_hat"].as_f64().unwrap() - 4.0).abs() < 1e-10);
    let stdout: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(stdout["z"], v["z"]);
}

#[test]
fn one_leg_continuation_at_the_seed_target() {
    let d = tempfile::tempdir().unwrap();
    let body = SQUARE.replace("alpha1 = 0.1\n", "alpha1 = 0.1\npath = [{ alpha1 = 0.1 }]\n").replace("[perturbation]\nphi_amplitude = 0.01\nm_amplitude = 0.05\n", "");
    let c = config(d.path(), "c.toml", &body);
    let o = kym(&["continue", "--config", &c, "--out", "cont"], d.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r = json(&d.path().join("cont/report.json"));
    assert_eq!(r["legs"].as_array().unwrap().len(), 1);
    assert_eq!(r["legs"][0]["iterations"], 0);
    assert_eq!(json(&d.path().join("cont/leg_000.json"))["converged"], true);
}

#[test]
fn geodesic_with_identical_endpoints_is_flat() {
    let d = tempfile::tempdir().unwrap();
    let c = config(d.path(), "sq.toml", SQUARE);
    assert_eq!(code(&kym(&["solve", "--config", &c, "--out", "run"], d.path())), 0);
    let o = kym(&["geodesic", "run/state.kym", "run/state.kym", "--samples", "9", "--out", "geo"], d.path());
    assert_eq!(code(&o), 0);
    let r = json(&d.path().join("geo/report.json"));
    assert_eq!(r["verdict"], "PASS");
    assert!(r["min_second_difference"].as_f64().unwrap().abs() < 1e-12);
    let csv = std::fs::read_to_string(d.path().join("geo/geodesic.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "t,energy,slope,second");
    assert_eq!(csv.lines().count(), 10);
}

#[test]
fn obstructed_trapezoid_reports_the_character() {
    let d = tempfile::tempdir().unwrap();
    let c = config(
        d.path(),
        "tz.toml",
        r#"
[polytope]
model = "trapezoid(1,2)"
[bundle]
degrees = []
[coupling]
alpha0 = 1.0
alpha1 = 0.0
[solver]
grid = 8
max_iterations = 8
"#,
    );
    let o = kym(&["solve", "--config", &c, "--out", "tz"], d.path());
    assert_eq!(code(&o), 1);
    let r = json(&d.path().join("tz/report.json"));
    assert_eq!(r["converged"], false);
    assert!(r["diagnostic"].as_str().unwrap().contains("obstructed"));
    assert!(r["futaki"][0].as_f64().unwrap().abs() > 0.1);
    assert!(d.path().join("tz/last_state.kym").exists());
}

#[test]
fn flow_lowers_the_functional() {
    let d = tempfile::tempdir().unwrap();
    let body = SQUARE.replace("alpha0 = 1.0\nalpha1 = 0.1", "alpha0 = 20.0\nalpha1 = 0.1").replace("grid = 12", "grid = 8")
        + "[flow]\nsteps = 20\n";
    let c = config(d.path(), "f.toml", &body);
    let o = kym(&["flow", "--config", &c, "--out", "fl"], d.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r = json(&d.path().join("fl/report.json"));
    assert_eq!(r["monotone"], true);
    assert!(r["final_value"].as_f64().unwrap() < r["initial_value"].as_f64().unwrap());
}
