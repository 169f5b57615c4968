use std::path::{Path, PathBuf};
use std::process::Command;

use hopper_cli::runner::{MPC_HEADER, TRACE_HEADER};
use hopper_cli::{load_scenario, parse_scenario, run_scenario, RunOptions};

fn scenarios_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

fn hopper() -> Command {
    Command::new(env!("CARGO_BIN_EXE_hopper"))
}

fn scenario_json(name: &str) -> serde_json::Value {
    let text = std::fs::read_to_string(scenarios_dir().join(format!("{name}.json"))).unwrap();
    serde_json::from_str(&text).unwrap()
}

#[test]
fn shipped_scenarios_load() {
    for entry in std::fs::read_dir(scenarios_dir()).unwrap() {
        let path = entry.unwrap().path();
        let s = load_scenario(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert_eq!(Some(s.name.as_str()), path.file_stem().and_then(|n| n.to_str()));
    }
}

#[test]
fn missing_model_field_exits_2_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = scenario_json("hop_in_place");
    v["model"].as_object_mut().unwrap().remove("m_body");
    let path = dir.path().join("broken.json");
    std::fs::write(&path, v.to_string()).unwrap();
    let out = hopper()
        .args(["run", path.to_str().unwrap(), "--out-dir"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("model") && err.contains("m_body"), "{err}");
}

#[test]
fn config_errors_carry_the_field_path() {
    let mut v = scenario_json("setpoint");
    v["mpc"]["weights"]["quatt"] = serde_json::json!(1.0);
    let err = parse_scenario(&v.to_string()).unwrap_err().to_string();
    assert!(err.contains("mpc.weights") && err.contains("quatt"), "{err}");

    let mut v = scenario_json("setpoint");
    v["gains"]["kp"] = serde_json::json!([[1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, 1.0]]);
    let err = parse_scenario(&v.to_string()).unwrap_err().to_string();
    assert!(err.contains("gains"), "{err}");

    let mut v = scenario_json("setpoint");
    v["duration"] = serde_json::json!(-1.0);
    let err = parse_scenario(&v.to_string()).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(err.to_string().contains("duration"));
}

#[test]
fn falling_through_the_floor_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = scenario_json("hop_in_place");
    // Foot starts below ground, so touchdown is never detected.
    v["x0"]["p"] = serde_json::json!([0.0, 0.0, 0.1]);
    let path = dir.path().join("sinking.json");
    std::fs::write(&path, v.to_string()).unwrap();
    let out = hopper()
        .args(["run", path.to_str().unwrap(), "--duration-override", "1.0", "--out-dir"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn deterministic_runs_reproduce_their_logs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let path = scenarios_dir().join("hop_in_place.json");
    for dir in [&a, &b] {
        let out = hopper()
            .args(["run", path.to_str().unwrap(), "--deterministic", "--duration-override", "1.0"])
            .arg("--out-dir")
            .arg(dir.path())
            .output()
            .unwrap();
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let trace = "hop_in_place_trace.csv";
    let x = std::fs::read(a.path().join(trace)).unwrap();
    let y = std::fs::read(b.path().join(trace)).unwrap();
    assert!(!x.is_empty());
    assert!(x == y, "{trace} differs between runs");

    // The MPC log also records wall-clock solve time; everything else must match.
    let without_timing = |dir: &Path| -> Vec<Vec<String>> {
        let mut rdr = csv::Reader::from_path(dir.join("hop_in_place_mpc.csv")).unwrap();
        rdr.records()
            .map(|r| {
                let r = r.unwrap();
                r.iter().enumerate().filter(|(i, _)| *i != 1).map(|(_, f)| f.to_string()).collect()
            })
            .collect()
    };
    let (x, y) = (without_timing(a.path()), without_timing(b.path()));
    assert!(!x.is_empty());
    assert_eq!(x, y);
}

#[test]
fn realtime_conflicts_with_deterministic() {
    let path = scenarios_dir().join("hop_in_place.json");
    let out = hopper()
        .args(["run", path.to_str().unwrap(), "--deterministic", "--realtime-sim"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn traces_have_the_documented_columns_and_order() {
    let dir = tempfile::tempdir().unwrap();
    let s = load_scenario(&scenarios_dir().join("hop_in_place.json")).unwrap();
    let opts = RunOptions {
        out_dir: dir.path().to_path_buf(),
        duration_override: Some(1.5),
        log_every: 5,
        ..Default::default()
    };
    let out = run_scenario(&s, &opts).unwrap();
    let mut rdr = csv::Reader::from_path(&out.trace_path).unwrap();
    let header: Vec<String> = rdr.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(header, TRACE_HEADER);
    let mut last = f64::NEG_INFINITY;
    let mut events = Vec::new();
    for row in rdr.records() {
        let row = row.unwrap();
        assert_eq!(row.len(), TRACE_HEADER.len());
        let t: f64 = row[0].parse().unwrap();
        assert!(t > last, "rows out of order at t = {t}");
        last = t;
        if !row[27].is_empty() {
            events.push(row[27].to_string());
        }
    }
    assert!(!events.is_empty());
    let recorded: Vec<String> = out.summary.events.iter().map(|e| e.edge.to_string()).collect();
    assert_eq!(events, recorded);

    let mut rdr = csv::Reader::from_path(&out.mpc_path).unwrap();
    let header: Vec<String> = rdr.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(header, MPC_HEADER);
    assert_eq!(rdr.records().count(), 150);

    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&out.summary_path).unwrap()).unwrap();
    for key in ["hop_count", "apex_heights", "final_position_error", "mean_solve_time", "max_solve_time", "events"] {
        assert!(summary.get(key).is_some(), "summary lacks {key}");
    }
}

#[test]
fn disturbance_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let s = load_scenario(&scenarios_dir().join("disturbance.json")).unwrap();
    let opts = RunOptions {
        out_dir: dir.path().to_path_buf(),
        log_every: 50,
        ..Default::default()
    };
    let out = run_scenario(&s, &opts).unwrap().summary;
    // The push moves the robot, and it hops back close to the set-point.
    assert!(out.max_xy_excursion > 0.01);
    assert!(out.final_position_error < 0.15, "{}", out.final_position_error);
    assert_eq!(out.stale_solves, 0);
}
