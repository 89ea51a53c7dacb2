//! The `iotra` command surface, driven in-process against a temporary
//! state directory.

use std::path::{Path, PathBuf};

use iotra_harness::cli;
use serde_json::Value;

struct Run {
    code: i32,
    out: String,
    err: String,
}

fn iotra(state: &Path, args: &[&str]) -> Run {
    let mut argv = vec!["iotra".to_string(), "--state".into(), state.display().to_string()];
    argv.extend(args.iter().map(|a| a.to_string()));
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = cli::run(argv, &mut out, &mut err);
    Run {
        code,
        out: String::from_utf8(out).unwrap(),
        err: String::from_utf8(err).unwrap(),
    }
}

fn json(state: &Path, args: &[&str]) -> Value {
    let mut all = vec!["--json"];
    all.extend_from_slice(args);
    let r = iotra(state, &all);
    assert_eq!(r.code, 0, "{args:?}: {}", r.err);
    serde_json::from_str(&r.out).unwrap()
}

fn scenario(dir: &Path) -> PathBuf {
    let path = dir.join("small.json");
    let spec = iotra_harness::uniform_fleet("small", 17, 2, &["temp"], 5, 10_000);
    spec.save(&path).unwrap();
    path
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let r = iotra(dir.path(), &["frobnicate"]);
    assert_eq!(r.code, 2);
    assert!(r.err.contains("frobnicate"));
    assert_eq!(iotra(dir.path(), &["set-desired", "n-000001"]).code, 2);
    assert_eq!(iotra(dir.path(), &["query", "a/b", "0"]).code, 2);
    let help = iotra(dir.path(), &["--help"]);
    assert_eq!(help.code, 0);
    assert!(help.out.contains("remediate"));
}

#[test]
fn lifecycle_commands() {
    let dir = tempfile::tempdir().unwrap();
    let st = dir.path();
    // commissioning needs the node classes a scenario run stores
    let path = scenario(st);
    let r = iotra(st, &["run", path.to_str().unwrap(), "--ephemeral"]);
    assert_eq!(r.code, 0, "{}", r.err);
    assert!(!st.join("registry.jsonl").exists());
    assert_eq!(iotra(st, &["commission", "boiler"]).code, 1);
    assert_eq!(iotra(st, &["run", path.to_str().unwrap()]).code, 0);

    let e = json(st, &["commission", "boiler"]);
    assert_eq!(e["lifecycle"], "commissioned");
    let id = e["node_id"].as_str().unwrap().to_string();
    assert!(e["credential"].as_str().is_some_and(|c| c.len() == 64));

    assert_eq!(json(st, &["activate", &id])["lifecycle"], "active");
    let nodes = json(st, &["list-nodes"]);
    assert_eq!(nodes.as_array().unwrap().len(), 3);
    assert_eq!(nodes[2]["name"], "boiler");

    // activating twice is not a legal transition
    let again = iotra(st, &["activate", &id]);
    assert_eq!(again.code, 1);
    assert!(again.err.contains("illegal transition"));

    assert_eq!(json(st, &["decommission", &id])["lifecycle"], "decommissioned");
    assert!(json(st, &["list-nodes"])[2]["credential"].is_null());

    assert_eq!(iotra(st, &["commission", "x", "--class", "no_such_class"]).code, 1);
}

#[test]
fn run_then_query() {
    let dir = tempfile::tempdir().unwrap();
    let st = dir.path();
    let path = scenario(st);
    let report_path = st.join("report.json");
    let r = iotra(st, &["run", path.to_str().unwrap(), "--report", report_path.to_str().unwrap()]);
    assert_eq!(r.code, 0, "{}", r.err);
    assert!(r.out.contains("100 readings generated, 100 stored"), "{}", r.out);
    let report: Value = serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    assert_eq!(report["passed"], true);

    let id = json(st, &["list-nodes"])[0]["node_id"].as_str().unwrap().to_string();
    let channel = format!("{id}/temp");
    let rows = json(st, &["query", &channel, "0", "2s"]);
    assert_eq!(rows.as_array().unwrap().len(), 10);
    let rows = json(st, &["query", &channel, "1970-01-01T00:00:00Z", "1970-01-01T00:00:10Z"]);
    assert_eq!(rows.as_array().unwrap().len(), 50);
    assert_eq!(rows[0]["seq"], 1);

    let buckets = json(st, &["query", &channel, "0", "10000", "--downsample", "5s", "count"]);
    let counts: Vec<f64> = buckets.as_array().unwrap().iter().map(|b| b["value"].as_f64().unwrap()).collect();
    assert_eq!(counts, vec![25.0, 25.0]);

    let tail = json(st, &["tail", "*/temp", "-n", "3"]);
    let tail = tail.as_array().unwrap();
    assert_eq!(tail.len(), 3);
    let ts: Vec<&str> = tail.iter().map(|r| r["ts"].as_str().unwrap()).collect();
    assert_eq!(ts, ["1970-01-01T00:00:09.600Z", "1970-01-01T00:00:09.800Z", "1970-01-01T00:00:09.800Z"]);

    assert_eq!(iotra(st, &["query", &channel, "10s", "0"]).code, 1);
    assert_eq!(iotra(st, &["query", &channel, "0", "10s", "--downsample", "5s", "median"]).code, 1);
}

#[test]
fn desired_state_is_kept_for_the_device() {
    let dir = tempfile::tempdir().unwrap();
    let st = dir.path();
    let path = scenario(st);
    assert_eq!(iotra(st, &["run", path.to_str().unwrap()]).code, 0);
    let id = json(st, &["list-nodes"])[0]["node_id"].as_str().unwrap().to_string();

    let v = json(st, &["set-desired", &id, "temp_period_ms=500"]);
    assert_eq!(v["desired_version"], 1);
    let twin = json(st, &["get-twin", &id]);
    assert_eq!(twin["desired"]["temp_period_ms"], "n:500");
    assert_eq!(twin["ack_version"], 0);

    let retained = std::fs::read_to_string(st.join("retained.jsonl")).unwrap();
    assert!(retained.contains(&format!("twin/{id}/desired")));

    // wrong type and unknown property are refused by the model
    assert_eq!(iotra(st, &["set-desired", &id, "temp_period_ms=fast"]).code, 1);
    assert_eq!(iotra(st, &["set-desired", &id, "colour=red"]).code, 1);
    assert_eq!(iotra(st, &["get-twin", "n-999999"]).code, 1);
}

#[test]
fn inject_then_remediate() {
    let dir = tempfile::tempdir().unwrap();
    let st = dir.path();
    let path = scenario(st);
    let p = path.to_str().unwrap();
    let added = json(st, &["inject", "flood", "--scenario", p, "--node", "node-2", "--start", "3s", "--end", "6s"]);
    assert_eq!(added["kind"], "flood");
    assert_eq!(added["factor"], 100);
    assert_eq!(iotra(st, &["inject", "flood", "--scenario", p, "--node", "node-7", "--start", "0", "--end", "1s"]).code, 1);

    let r = iotra(st, &["run", p]);
    assert_eq!(r.code, 0, "{}", r.out);
    assert!(r.out.contains("1 incidents"));

    let incidents = json(st, &["incidents"]);
    let inc = &incidents[0];
    assert_eq!(inc["kind"], "traffic_flood");
    let id = inc["incident_id"].as_str().unwrap().to_string();
    let node = inc["node_id"].as_str().unwrap().to_string();
    let nodes = json(st, &["list-nodes"]);
    let entry = nodes.as_array().unwrap().iter().find(|n| n["node_id"] == node.as_str()).unwrap();
    assert_eq!(entry["lifecycle"], "quarantined");

    assert_eq!(json(st, &["remediate", &id])["state"], "closed");
    let nodes = json(st, &["list-nodes"]);
    let entry = nodes.as_array().unwrap().iter().find(|n| n["node_id"] == node.as_str()).unwrap();
    assert_eq!(entry["lifecycle"], "active");
    let again = iotra(st, &["remediate", &id]);
    assert_eq!(again.code, 1);
    assert!(again.err.contains("already closed"));
}

#[test]
fn failing_assertions_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let st = dir.path();
    let mut spec = iotra_harness::uniform_fleet("lossy", 1, 1, &["temp"], 10, 20_000);
    spec.nodes[0].queue_capacity = Some(5);
    spec.faults.push(iotra_harness::FaultSpec::new(iotra_harness::FaultKind::UplinkOutage, &["node"], 1_000, 10_000));
    spec.assertions = vec!["lossless".into()];
    let path = st.join("lossy.json");
    spec.save(&path).unwrap();
    let r = iotra(st, &["run", path.to_str().unwrap(), "--ephemeral"]);
    assert_eq!(r.code, 1);
    assert!(r.out.contains("FAIL lossless"), "{}", r.out);
}

#[test]
fn duration_and_value_parsing() {
    assert_eq!(cli::parse_duration_ms("250").unwrap(), 250);
    assert_eq!(cli::parse_duration_ms("250ms").unwrap(), 250);
    assert_eq!(cli::parse_duration_ms("10s").unwrap(), 10_000);
    assert_eq!(cli::parse_duration_ms("2m").unwrap(), 120_000);
    assert_eq!(cli::parse_duration_ms("1h").unwrap(), 3_600_000);
    assert!(cli::parse_duration_ms("1d").is_err());
    assert!(cli::parse_duration_ms("s").is_err());
    assert_eq!(cli::parse_time("1500").unwrap().0, 1500);
    assert_eq!(cli::parse_time("2m").unwrap().0, 120_000);
    assert_eq!(cli::parse_time("2020-07-15T14:50:07Z").unwrap().0, 1_594_824_607_000);
    use iotra_core::TypedScalar;
    assert_eq!(cli::parse_value("72"), TypedScalar::Number(72.0));
    assert_eq!(cli::parse_value("true"), TypedScalar::Bool(true));
    assert_eq!(cli::parse_value("s:72"), TypedScalar::Str("72".into()));
    assert_eq!(cli::parse_value("eco"), TypedScalar::Str("eco".into()));
}
