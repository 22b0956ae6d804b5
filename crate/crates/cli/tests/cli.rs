use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn dstc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dstc"))
        .args(args)
        .output()
        .expect("spawn dstc")
}

fn dstc_env(args: &[&str], key: &str, val: &str) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dstc"))
        .args(args)
        .env(key, val)
        .output()
        .expect("spawn dstc")
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

fn manifest_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

fn cfg(name: &str) -> String {
    manifest_dir().join("configs").join(name).to_string_lossy().into_owned()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

fn schema(name: &str) -> Value {
    read_json(&manifest_dir().join("schemas").join(name))
}

/// Asserts `instance` validates against the named shipped schema, with the
/// task schema available for references.
fn assert_valid(schema_name: &str, instance: &Value) {
    let task = jsonschema::Resource::from_contents(schema("task.schema.json")).unwrap();
    let v = jsonschema::options()
        .with_draft(jsonschema::Draft::Draft7)
        .with_resource("json-schema:///task.schema.json", task)
        .build(&schema(schema_name))
        .unwrap();
    let errors: Vec<String> = v
        .iter_errors(instance)
        .map(|e| format!("{} at {}", e, e.instance_path))
        .collect();
    assert!(errors.is_empty(), "{schema_name}: {errors:?}");
}

fn out_dir(tmp: &tempfile::TempDir, name: &str) -> String {
    tmp.path().join(name).to_string_lossy().into_owned()
}

#[test]
fn shipped_configs_match_the_config_schema() {
    for e in std::fs::read_dir(manifest_dir().join("configs")).unwrap() {
        let p = e.unwrap().path();
        if p.extension().is_some_and(|x| x == "json") {
            assert_valid("config.schema.json", &read_json(&p));
        }
    }
    for e in std::fs::read_dir(manifest_dir().join("configs/tasks")).unwrap() {
        assert_valid("task.schema.json", &read_json(&e.unwrap().path()));
    }
}

#[test]
fn schemas_reject_malformed_documents() {
    let task = jsonschema::Resource::from_contents(schema("task.schema.json")).unwrap();
    let v = jsonschema::options()
        .with_draft(jsonschema::Draft::Draft7)
        .with_resource("json-schema:///task.schema.json", task)
        .build(&schema("config.schema.json"))
        .unwrap();
    let bad =
        serde_json::json!({"dimension": 4, "in_channels": 1, "out_channels": 1, "kernel_size": 3, "variant": "tc"});
    assert!(!v.is_valid(&bad));
    let bad = serde_json::json!({"dimension": 2, "in_channels": 1, "out_channels": 1, "kernel_size": 3, "variant": "tc", "typo": 1});
    assert!(!v.is_valid(&bad));
}

#[test]
fn gradcheck_passes_on_default_tc_config() {
    let tmp = tempfile::tempdir().unwrap();
    let out = out_dir(&tmp, "g");
    let o = dstc(&["gradcheck", &cfg("tc.json"), "--seed", "1", "--out", &out]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report = read_json(&Path::new(&out).join("gradcheck.json"));
    assert_eq!(report["pass"], true);
    assert_eq!(report["seed"], 1);
    assert_valid("gradcheck_report.schema.json", &report);
    let stdout: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(stdout, report);
    let m = read_json(&Path::new(&out).join("manifest.json"));
    assert_valid("manifest.schema.json", &m);
    assert_valid("config.schema.json", &m["config"]);
    assert_eq!(m["outputs"], serde_json::json!(["gradcheck.json"]));
}

#[test]
fn gradcheck_reports_corrupted_gradients() {
    for group in ["x", "w", "bias", "offset_head", "score_head"] {
        let o = dstc(&["gradcheck", &cfg("dstc_gaussian_dense.json"), "--corrupt", group]);
        assert_eq!(code(&o), 1, "{group}");
        let report: Value = serde_json::from_slice(&o.stdout).unwrap();
        let failed: Vec<&str> = report["groups"]
            .as_array()
            .unwrap()
            .iter()
            .filter(|g| g["pass"] == false)
            .map(|g| g["name"].as_str().unwrap())
            .collect();
        assert_eq!(failed, vec![group]);
    }
}

#[test]
fn gradcheck_usage_errors_exit_2() {
    assert_eq!(code(&dstc(&["gradcheck", "/nonexistent/config.json"])), 2);
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.json");
    std::fs::write(
        &bad,
        r#"{"dimension":2,"in_channels":1,"out_channels":1,"kernel_size":3,"variant":"tc","offset_mode":"dense"}"#,
    )
    .unwrap();
    let o = dstc(&["gradcheck", bad.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("config error"));
    std::fs::write(&bad, "{not json").unwrap();
    assert_eq!(code(&dstc(&["gradcheck", bad.to_str().unwrap()])), 2);
    assert_eq!(code(&dstc(&["gradcheck", &cfg("tc.json"), "--tol", "-1"])), 2);
    assert_eq!(code(&dstc(&["gradcheck", &cfg("tc.json"), "--corrupt", "nope"])), 2);
    assert_eq!(code(&dstc(&["frobnicate"])), 2);
}

#[test]
fn tight_tolerance_fails_the_check() {
    assert_eq!(
        code(&dstc(&[
            "gradcheck",
            &cfg("dstc_gaussian_dense.json"),
            "--tol",
            "1e-15"
        ])),
        1
    );
}

#[test]
fn params_prints_table_rows_and_matches_census() {
    let tmp = tempfile::tempdir().unwrap();
    let out = out_dir(&tmp, "p");
    let o = dstc(&["params", &cfg("table1.json"), "--out", &out]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8_lossy(&o.stdout);
    for (name, total) in [
        ("tc", "36928"),
        ("dstc_bilinear", "47296"),
        ("dstc_gaussian_dense", "68032"),
        ("dstc_parametrized", "40960"),
    ] {
        let line = text
            .lines()
            .find(|l| l.split_whitespace().next() == Some(name))
            .unwrap();
        let cols: Vec<&str> = line.split_whitespace().collect();
        assert_eq!(cols[5], total, "{line}");
        assert_eq!(cols[6], total, "{line}");
    }
    let report = read_json(&Path::new(&out).join("params.json"));
    assert_valid("params_report.schema.json", &report);
    let rows = report["rows"].as_array().unwrap();
    assert_eq!(rows[3]["offsets"], 1728);
    assert_eq!(rows[3]["scores"], 2304);
    assert_eq!(rows[2]["scores_with_dim_factor"], 41472);
}

#[test]
fn params_reports_plumbing_separately() {
    let tmp = tempfile::tempdir().unwrap();
    let c = tmp.path().join("c.json");
    std::fs::write(
        &c,
        r#"{"dimension":2,"in_channels":8,"out_channels":8,"kernel_size":3,"variant":"dstc_parametrized","module_channels":4}"#,
    )
    .unwrap();
    let out = out_dir(&tmp, "p");
    assert_eq!(code(&dstc(&["params", c.to_str().unwrap(), "--out", &out])), 0);
    let report = read_json(&Path::new(&out).join("params.json"));
    for row in report["rows"].as_array().unwrap() {
        // compress 8->4 and expand 4->8, no biases
        assert_eq!(row["plumbing"], 64);
        assert_eq!(row["census"], row["total"]);
    }
    assert_eq!(code(&dstc(&["params", "/nonexistent.json"])), 2);
}

#[test]
fn train_writes_histories_and_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let out = out_dir(&tmp, "t");
    let o = dstc(&[
        "train",
        &cfg("dstc_parametrized.json"),
        "--task",
        &cfg("tasks/dilation_recovery.json"),
        "--steps",
        "12",
        "--seed",
        "3",
        "--out",
        &out,
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let dir = Path::new(&out);
    let summary = read_json(&dir.join("summary.json"));
    assert_valid("train_summary.schema.json", &summary);
    assert_eq!(summary["task"]["seed"], 3);
    assert_eq!(summary["init_seed"], 3);
    let runs = summary["runs"].as_array().unwrap();
    assert_eq!(runs.len(), 2);
    let ratio = runs[1]["final_eval_loss"].as_f64().unwrap() / runs[0]["final_eval_loss"].as_f64().unwrap();
    assert_eq!(summary["eval_loss_ratio"].as_f64().unwrap(), ratio);
    for f in ["history_tc.csv", "history_dstc_parametrized.csv"] {
        let csv = std::fs::read_to_string(dir.join(f)).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "step,loss,wall_ms");
        assert_eq!(lines.len(), 1 + 13);
        assert!(lines[1..].iter().all(|l| l.ends_with(",0")));
    }
    let m = read_json(&dir.join("manifest.json"));
    assert_valid("manifest.schema.json", &m);
    assert_eq!(m["seeds"]["task_seed"], 3);
    assert_eq!(m["config"]["train"]["steps"], 12);
    let mut outputs: Vec<&str> = m["outputs"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_str().unwrap())
        .collect();
    outputs.sort();
    assert_eq!(
        outputs,
        ["history_dstc_parametrized.csv", "history_tc.csv", "summary.json"]
    );
}

#[test]
fn train_with_zero_steps_logs_only_the_initial_loss() {
    let tmp = tempfile::tempdir().unwrap();
    let out = out_dir(&tmp, "t0");
    let o = dstc(&[
        "train",
        &cfg("tc.json"),
        "--task",
        &cfg("tasks/dilation_recovery.json"),
        "--steps",
        "0",
        "--out",
        &out,
    ]);
    assert_eq!(code(&o), 0);
    let csv = std::fs::read_to_string(Path::new(&out).join("history_tc.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[1].starts_with("0,"));
    assert!(!Path::new(&out).join("history_dstc_parametrized.csv").exists());
}

#[test]
fn train_reruns_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out = out_dir(&tmp, name);
        let o = dstc(&[
            "train",
            &cfg("dstc_gaussian_dense.json"),
            "--task",
            &cfg("tasks/dilation_recovery.json"),
            "--steps",
            "4",
            "--out",
            &out,
        ]);
        assert_eq!(code(&o), 0);
        out
    };
    let (a, b) = (run("a"), run("b"));
    for f in ["history_tc.csv", "history_dstc_gaussian_dense.csv", "summary.json"] {
        assert_eq!(
            std::fs::read(Path::new(&a).join(f)).unwrap(),
            std::fs::read(Path::new(&b).join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn train_rejects_incompatible_shapes() {
    let o = dstc(&[
        "train",
        &cfg("tc.json"),
        "--task",
        &cfg("tasks/ellipse_superres.json"),
        "--steps",
        "1",
    ]);
    assert_eq!(code(&o), 2);
    assert_eq!(code(&dstc(&["train", &cfg("tc.json"), "--steps", "1"])), 2);
}

#[test]
fn sweep_emits_one_row_per_setting() {
    let tmp = tempfile::tempdir().unwrap();
    let out = out_dir(&tmp, "s");
    let o = dstc(&[
        "sweep",
        &cfg("sweep_ellipse.json"),
        "--axis",
        "variances",
        "--values",
        "{0.25}",
        "16",
        "0.25,1,4,16",
        "--steps",
        "2",
        "--out",
        &out,
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(Path::new(&out).join("sweep.csv")).unwrap();
    let settings: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(settings, ["0.25", "16", "0.25;1;4;16"]);
    assert_eq!(csv.lines().next().unwrap(), "setting,final_train_loss,final_eval_loss");
    let m = read_json(&Path::new(&out).join("manifest.json"));
    assert_valid("manifest.schema.json", &m);
    assert_eq!(m["config"]["axis"], "variances");
}

#[test]
fn sweep_rejects_bad_values() {
    let c = cfg("sweep_ellipse.json");
    for args in [
        vec!["--axis", "K_sigma", "--values"],
        vec!["--axis", "K_sigma", "--values", ""],
        vec!["--axis", "K_sigma", "--values", "x"],
        vec!["--axis", "K_sigma", "--values", "0"],
        vec!["--axis", "variances", "--values", "1,-1"],
        vec!["--axis", "sigma", "--values", "1"],
    ] {
        let mut a = vec!["sweep", c.as_str()];
        a.extend(args.iter().copied());
        assert_eq!(code(&dstc(&a)), 2, "{args:?}");
    }
    assert_eq!(
        code(&dstc(&["sweep", &cfg("tc.json"), "--axis", "K_sigma", "--values", "3"])),
        2
    );
}

#[test]
fn oracle_compare_passes_and_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let out = out_dir(&tmp, "o");
    let o = dstc(&["oracle-compare", "--cases", "16", "--seed", "9", "--out", &out]);
    assert_eq!(code(&o), 0);
    let report = read_json(&Path::new(&out).join("oracle.json"));
    assert_valid("oracle_report.schema.json", &report);
    assert_eq!(report["results"].as_array().unwrap().len(), 16);
    assert!(report["max_abs_diff"].as_f64().unwrap() < 1e-12);
    assert_valid(
        "manifest.schema.json",
        &read_json(&Path::new(&out).join("manifest.json")),
    );
    assert_eq!(code(&dstc(&["oracle-compare", "--cases", "4", "--tol", "0"])), 1);
    assert_eq!(code(&dstc(&["oracle-compare", "--cases", "0"])), 2);
}

#[test]
fn thread_count_comes_from_the_environment() {
    let a = dstc_env(&["oracle-compare", "--cases", "4"], "DSTC_THREADS", "1");
    assert_eq!(code(&a), 0);
    let b = dstc_env(&["oracle-compare", "--cases", "4"], "DSTC_THREADS", "many");
    assert_eq!(code(&b), 2);
    assert!(String::from_utf8_lossy(&b.stderr).contains("DSTC_THREADS"));
}

#[test]
fn gradcheck_is_independent_of_thread_count() {
    let run = |n: &str| {
        dstc_env(
            &["gradcheck", &cfg("dstc_parametrized.json"), "--seed", "2"],
            "DSTC_THREADS",
            n,
        )
        .stdout
    };
    assert_eq!(run("1"), run("3"));
}
