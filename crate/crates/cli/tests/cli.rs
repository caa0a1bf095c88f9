use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn formation(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_formation"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = formation(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn json(path: &Path) -> Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Synthetic tracking file in `dir/syn`, returned with its path.
fn synth(dir: &Path, extra: &[&str]) -> PathBuf {
    let out = dir.join("syn");
    let mut args = vec!["synth", "--out", s(&out), "--frames", "600"];
    args.extend_from_slice(extra);
    ok(&args);
    out
}

#[test]
fn discover_writes_formation_trace_and_manifest() {
    let tmp = TempDir::new().unwrap();
    let syn = synth(tmp.path(), &["--seed", "4"]);
    let input = syn.join("tracking.csv");
    let out = tmp.path().join("run");
    ok(&["discover", "--input", s(&input), "--out", s(&out)]);

    let f = json(&out.join("formation.json"));
    assert_eq!(f["components"].as_array().unwrap().len(), 10);
    let trace = fs::read_to_string(out.join("trace.csv")).unwrap();
    assert!(trace.starts_with("iteration,loglik,update_kind,max_eig_ratio\n"));
    assert!(out.join("roles.csv").exists());

    let m = json(&out.join("manifest.json"));
    assert_eq!(m["command"], "discover");
    assert_eq!(m["config"]["discovery"]["k"], 10);
    let bytes = fs::read(&input).unwrap();
    assert_eq!(m["inputs"][0]["bytes"], bytes.len());
    assert_eq!(m["inputs"][0]["sha256"].as_str().unwrap().len(), 64);
    assert!(m["outputs"].as_array().unwrap().iter().any(|o| o == "formation.json"));
}

#[test]
fn missing_input_exits_2_and_names_the_path() {
    let tmp = TempDir::new().unwrap();
    let missing = tmp.path().join("no_such_file.csv");
    let out = formation(&["discover", "--input", s(&missing), "--out", s(&tmp.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_file.csv"));
}

#[test]
fn parse_error_exits_2_with_line_number() {
    let tmp = TempDir::new().unwrap();
    let bad = tmp.path().join("bad.csv");
    fs::write(
        &bad,
        "frame_id,agent_id,x,y,is_event,attack_direction,team,game,period\n0,a,1.0,2.0,0,left_to_right,t,g,1\n0,b,oops,2.0,0,left_to_right,t,g,1\n",
    )
    .unwrap();
    let out = formation(&["discover", "--input", s(&bad), "--out", s(&tmp.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 3"));
}

#[test]
fn usage_errors_exit_2() {
    let tmp = TempDir::new().unwrap();
    let syn = synth(tmp.path(), &[]);
    let input = syn.join("tracking.csv");
    let o = tmp.path().join("o");
    for extra in [
        vec!["--learner", "nope"],
        vec!["--align-cost", "nope"],
        vec!["--init", "nope"],
        vec!["--eig-ratio", "0.5"],
        vec!["--filter", "colour=red"],
    ] {
        let mut args = vec!["discover", "--input", s(&input), "--out", s(&o)];
        args.extend(extra.iter().copied());
        assert_eq!(formation(&args).status.code(), Some(2), "{extra:?}");
    }
    let empty = formation(&["discover", "--input", s(&input), "--out", s(&o), "--filter", "team=away"]);
    assert_eq!(empty.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&empty.stderr).contains("team=away"));
    assert_eq!(formation(&["discover", "--bogus"]).status.code(), Some(2));
}

#[test]
fn key_frames_only_trains_on_about_a_tenth_of_the_rows() {
    let tmp = TempDir::new().unwrap();
    let syn = tmp.path().join("syn");
    ok(&["synth", "--out", s(&syn), "--frames", "3000", "--event-rate", "0.1", "--seed", "2"]);
    let input = syn.join("tracking.csv");
    let (all, key) = (tmp.path().join("all"), tmp.path().join("key"));
    ok(&["discover", "--input", s(&input), "--out", s(&all)]);
    ok(&["discover", "--input", s(&input), "--out", s(&key), "--key-frames-only"]);
    let n_all = json(&all.join("manifest.json"))["stats"]["training_frames"].as_f64().unwrap();
    let n_key = json(&key.join("manifest.json"))["stats"]["training_frames"].as_f64().unwrap();
    let factor = n_all / n_key;
    assert!((7.5..13.5).contains(&factor), "reduction factor {factor}");
}

#[test]
fn reruns_are_byte_identical_across_thread_counts() {
    let tmp = TempDir::new().unwrap();
    let syn = synth(tmp.path(), &["--seed", "9", "--swap-rate", "0.2"]);
    let input = syn.join("tracking.csv");
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&["--threads", "1", "discover", "--input", s(&input), "--out", s(&a)]);
    ok(&["--threads", "3", "discover", "--input", s(&input), "--out", s(&b)]);
    for f in ["formation.json", "trace.csv", "kmeans.csv", "roles.csv", "assignments.jsonl"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    // The manifest's config is enough to reproduce the run.
    let c = tmp.path().join("c");
    ok(&["discover", "--input", s(&input), "--out", s(&c), "--config", s(&a.join("manifest.json"))]);
    assert_eq!(fs::read(a.join("formation.json")).unwrap(), fs::read(c.join("formation.json")).unwrap());
}

#[test]
fn jsonl_input_gives_the_same_formation_as_csv() {
    let tmp = TempDir::new().unwrap();
    let csv_dir = synth(tmp.path(), &["--seed", "5"]);
    let jl_dir = tmp.path().join("jl");
    ok(&["synth", "--out", s(&jl_dir), "--frames", "600", "--seed", "5", "--format", "jsonl"]);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&["discover", "--input", s(&csv_dir.join("tracking.csv")), "--out", s(&a)]);
    ok(&["discover", "--input", s(&jl_dir.join("tracking.jsonl")), "--out", s(&b)]);
    assert_eq!(fs::read(a.join("formation.json")).unwrap(), fs::read(b.join("formation.json")).unwrap());
}

#[test]
fn outputs_stay_inside_the_out_directory() {
    let tmp = TempDir::new().unwrap();
    let syn = synth(tmp.path(), &[]);
    let out = tmp.path().join("nested").join("out");
    ok(&["discover", "--input", s(&syn.join("tracking.csv")), "--out", s(&out)]);
    let mut top: Vec<String> = fs::read_dir(tmp.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    top.sort();
    assert_eq!(top, ["nested", "syn"]);
    let m = json(&out.join("manifest.json"));
    for f in m["outputs"].as_array().unwrap() {
        assert!(out.join(f.as_str().unwrap()).exists());
    }
}

#[test]
fn compare_report_validates_against_the_schema() {
    let tmp = TempDir::new().unwrap();
    let syn = synth(tmp.path(), &["--seed", "1", "--separation", "2.0"]);
    let out = tmp.path().join("cmp");
    ok(&[
        "compare",
        "--input",
        s(&syn.join("tracking.csv")),
        "--out",
        s(&out),
        "--sweep-k-max",
        "6",
        "--overlap-samples",
        "20000",
    ]);
    let report = json(&out.join("compare_report.json"));
    let schema: Value = serde_json::from_str(include_str!("../schemas/compare_report.schema.json")).unwrap();
    let validator = jsonschema::validator_for(&schema).unwrap();
    let errors: Vec<String> = validator.iter_errors(&report).map(|e| e.to_string()).collect();
    assert!(errors.is_empty(), "{errors:?}");
    assert!(report["delta_log_likelihood"].as_f64().unwrap() >= -1e-9);
    assert_eq!(report["wce_sweep"].as_array().unwrap().len(), 5);
    for f in ["roles.csv", "wce_sweep.csv", "pca.csv"] {
        assert!(out.join(f).exists());
    }
}

#[test]
fn well_separated_roles_give_the_same_optimum_for_both_methods() {
    let tmp = TempDir::new().unwrap();
    let syn = synth(tmp.path(), &["--seed", "6", "--separation", "6.0"]);
    let out = tmp.path().join("cmp");
    ok(&[
        "compare",
        "--input",
        s(&syn.join("tracking.csv")),
        "--out",
        s(&out),
        "--sweep-k-max",
        "3",
        "--overlap-samples",
        "1000",
    ]);
    let report = json(&out.join("compare_report.json"));
    for r in report["roles"].as_array().unwrap() {
        assert!(r["kl"].as_f64().unwrap() < 1e-3, "{r}");
    }
}

#[test]
fn bench_with_one_rep_has_one_row_per_n() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("bench");
    ok(&[
        "bench",
        "--out",
        s(&out),
        "--n-values",
        "3,4,5",
        "--frames",
        "40",
        "--reps",
        "1",
        "--iterations",
        "1",
    ]);
    let csv = fs::read_to_string(out.join("bench.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[0].starts_with("3,0,"));
    assert!(json(&out.join("bench_summary.json"))["hard_slope"].is_number());
}

fn template_distance(a: &Value, b: &Value) -> f64 {
    use formation_core::alignment::{align_template_with, BhattacharyyaCost, Template};
    use formation_core::geometry::bhattacharyya_distance;
    let a: Template = serde_json::from_value(a.clone()).unwrap();
    let b: Template = serde_json::from_value(b.clone()).unwrap();
    let al = align_template_with(&a.to_formation(), &b, &BhattacharyyaCost).unwrap();
    al.template
        .roles()
        .iter()
        .zip(b.roles())
        .map(|(x, y)| bhattacharyya_distance(x, y).unwrap())
        .fold(0.0, f64::max)
}

#[test]
fn contexts_recover_their_generators_in_the_shared_order() {
    let tmp = TempDir::new().unwrap();
    let syn = tmp.path().join("syn");
    ok(&["synth", "--out", s(&syn), "--frames", "1500", "--contexts", "2", "--seed", "11"]);
    let truths = json(&syn.join("truth_templates.json"));
    let parent = tmp.path().join("parent.json");
    fs::write(&parent, serde_json::to_vec(&truths[0]).unwrap()).unwrap();
    let out = tmp.path().join("ctx");
    ok(&[
        "context",
        "--input",
        s(&syn.join("tracking.csv")),
        "--out",
        s(&out),
        "--group-by",
        "team",
        "--parent-template",
        s(&parent),
    ]);
    let summary = json(&out.join("contexts.json"));
    assert_eq!(summary.as_array().unwrap().len(), 2);
    assert_eq!(summary[0]["label"], "team=team0");
    for (c, truth) in truths.as_array().unwrap().iter().enumerate() {
        let t = json(&out.join(format!("contexts/{c:02}/template.json")));
        let d = template_distance(&t, truth);
        assert!(d <= 0.1, "context {c}: worst role distance {d}");
    }
    // Aligned to the shared template, context 0 lists its roles in the parent's order.
    let t0 = json(&out.join("contexts/00/template.json"));
    for (r, p) in t0["roles"].as_array().unwrap().iter().zip(truths[0]["roles"].as_array().unwrap()) {
        let (m, q) = (&r["mean"], &p["mean"]);
        let gap = (m[0].as_f64().unwrap() - q[0].as_f64().unwrap()).hypot(m[1].as_f64().unwrap() - q[1].as_f64().unwrap());
        assert!(gap < 0.3, "role mean off by {gap}");
    }
}

#[test]
fn context_matching_everything_equals_discover() {
    let tmp = TempDir::new().unwrap();
    let syn = synth(tmp.path(), &["--seed", "8"]);
    let input = syn.join("tracking.csv");
    let (d, c) = (tmp.path().join("d"), tmp.path().join("c"));
    ok(&["discover", "--input", s(&input), "--out", s(&d)]);
    ok(&["context", "--input", s(&input), "--out", s(&c), "--filter", "*"]);
    assert_eq!(
        fs::read(d.join("formation.json")).unwrap(),
        fs::read(c.join("contexts/00/formation.json")).unwrap()
    );
    let bad = formation(&["context", "--input", s(&input), "--out", s(&c)]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn tree_on_one_formation_is_a_single_node() {
    let tmp = TempDir::new().unwrap();
    let syn = synth(tmp.path(), &["--seed", "12"]);
    let out = tmp.path().join("tree");
    ok(&["tree", "--input", s(&syn.join("tracking.csv")), "--out", s(&out)]);
    let tree = json(&out.join("tree.json"));
    assert!(tree["root"]["children"].as_array().unwrap().is_empty());
    assert_eq!(tree["root"]["rows"].as_array().unwrap().len(), 600);
    assert_eq!(json(&out.join("manifest.json"))["stats"]["depth"], 1);
}
