mod common;

use std::fs;

use common::*;
use serde_json::Value;
use tempfile::tempdir;

fn stderr_json(out: &std::process::Output) -> Value {
    let text = String::from_utf8(out.stderr.clone()).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 1, "stderr should be one line: {text:?}");
    serde_json::from_str(lines[0]).unwrap()
}

#[test]
fn pipeline_outputs_match_schemas() {
    let dir = tempdir().unwrap();
    let trace = dir.path().join("t.qkt");
    let stats = dir.path().join("s.json");
    let rec = dir.path().join("r.json");
    let csv = dir.path().join("r.csv");
    let decode = dir.path().join("d.json");
    let score = dir.path().join("sc.json");
    let batch = dir.path().join("b.json");
    let answers = dir.path().join("a.json");
    let table = dir.path().join("tab.json");

    run_ok(&[
        "synth",
        "--output",
        p(&trace),
        "--tokens",
        "400",
        "--head-dim",
        "16",
        "--q-heads",
        "4",
        "--k-heads",
        "2",
        "--seed",
        "9",
    ]);
    run_ok(&["calibrate", "--trace", p(&trace), "--output", p(&stats)]);
    run_ok(&[
        "reconstruct",
        "--trace",
        p(&trace),
        "--stats",
        p(&stats),
        "--max-queries",
        "16",
        "--output",
        p(&rec),
        "--csv",
        p(&csv),
    ]);
    run_ok(&[
        "simulate",
        "--trace",
        p(&trace),
        "--stats",
        p(&stats),
        "--budget",
        "50",
        "--window",
        "40",
        "--output",
        p(&decode),
    ]);
    run_ok(&[
        "score",
        "--trace",
        p(&trace),
        "--stats",
        p(&stats),
        "--position",
        "200",
        "--output",
        p(&score),
    ]);
    run_ok(&["dfs", "--per-step", "3", "--output", p(&batch)]);

    let mut sidecar_path = trace.clone().into_os_string();
    sidecar_path.push(".json");
    assert_schema("synth_sidecar", &read_json(sidecar_path.as_ref()));
    assert_schema("stats", &read_json(&stats));
    assert_schema("reconstruct", &read_json(&rec));
    assert_schema("decode_report", &read_json(&decode));
    assert_schema("score", &read_json(&score));
    let b = read_json(&batch);
    assert_schema("dfs_batch", &b);

    let first = &b["items"][0];
    let truth = &first["truth"];
    let ids = |v: &Value| {
        v.as_array()
            .unwrap()
            .iter()
            .map(|x| x.to_string())
            .collect::<Vec<_>>()
            .join(",")
    };
    let answer = format!(
        "current: {}; stack: {}; visited: {}",
        truth["current"],
        ids(&truth["stack"]),
        ids(&truth["visited"])
    );
    let map = serde_json::json!({ first["id"].as_str().unwrap(): answer });
    fs::write(&answers, map.to_string()).unwrap();
    run_ok(&[
        "dfs-score",
        "--batch",
        p(&batch),
        "--answers",
        p(&answers),
        "--output",
        p(&table),
    ]);
    let t = read_json(&table);
    assert_schema("dfs_score", &t);
    assert_eq!(t["rows"][0]["stack_exact"].as_f64().unwrap(), 1.0 / 3.0);
    assert_eq!(t["parse_failures"], 15 * 3 - 1);

    let csv_text = fs::read_to_string(&csv).unwrap();
    assert!(csv_text.starts_with("head,mean_r\n"));
    assert_eq!(csv_text.lines().count(), 5);

    let s = read_json(&score);
    assert_eq!(s["current_position"], 200);
    assert_eq!(s["heads"][0]["positions"].as_array().unwrap().len(), 201);
    assert_eq!(s["offsets"].as_array().unwrap().len(), 17);
}

#[test]
fn stdout_is_default_sink() {
    let dir = tempdir().unwrap();
    let trace = dir.path().join("t.qkt");
    run_ok(&["synth", "--output", p(&trace), "--tokens", "64"]);
    let out = run_ok(&["calibrate", "--trace", p(&trace)]);
    let doc: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_schema("stats", &doc);
    assert_eq!(doc["invocation"]["subcommand"], "calibrate");
    assert_eq!(doc["invocation"]["theta"], 10000.0);
}

#[test]
fn synth_and_dfs_are_deterministic() {
    let dir = tempdir().unwrap();
    let a = dir.path().join("a.qkt");
    let b = dir.path().join("b.qkt");
    let c = dir.path().join("c.qkt");
    for (path, seed) in [(&a, "5"), (&b, "5"), (&c, "6")] {
        run_ok(&[
            "synth",
            "--output",
            p(path),
            "--tokens",
            "128",
            "--head-dim",
            "8",
            "--seed",
            seed,
        ]);
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_ne!(fs::read(&a).unwrap(), fs::read(&c).unwrap());

    let x = run_ok(&["dfs", "--per-step", "4", "--seed", "11"]).stdout;
    let y = run_ok(&["dfs", "--per-step", "4", "--seed", "11"]).stdout;
    let z = run_ok(&["dfs", "--per-step", "4", "--seed", "12"]).stdout;
    assert_eq!(x, y);
    assert_ne!(x, z);
}

#[test]
fn usage_errors_exit_1() {
    for args in [
        vec![],
        vec!["frobnicate"],
        vec!["simulate", "--trace", "x.qkt"],
        vec![
            "score",
            "--trace",
            "t",
            "--stats",
            "s",
            "--offsets",
            "cubic:1:2",
        ],
        vec![
            "simulate",
            "--trace",
            "t",
            "--stats",
            "s",
            "--no-trig",
            "--no-mrl-weight",
        ],
        vec!["synth", "--output", "o", "--tokens", "many"],
    ] {
        let out = run(&args);
        assert_eq!(out.status.code(), Some(1), "{args:?}");
        if !args.is_empty() {
            let err = stderr_json(&out);
            assert_eq!(err["error"], "usage");
            assert_eq!(err["exit_code"], 1);
        }
    }
    assert_eq!(run(&["--help"]).status.code(), Some(0));
    assert_eq!(run(&["--version"]).status.code(), Some(0));
}

#[test]
fn data_errors_exit_2() {
    let dir = tempdir().unwrap();
    let trace = dir.path().join("t.qkt");
    let stats = dir.path().join("s.json");
    run_ok(&[
        "synth",
        "--output",
        p(&trace),
        "--tokens",
        "64",
        "--head-dim",
        "8",
    ]);
    run_ok(&["calibrate", "--trace", p(&trace), "--output", p(&stats)]);
    let bytes = fs::read(&trace).unwrap();

    let bad_magic = dir.path().join("magic.qkt");
    let mut m = bytes.clone();
    m[0] = b'X';
    fs::write(&bad_magic, &m).unwrap();
    let truncated = dir.path().join("short.qkt");
    fs::write(&truncated, &bytes[..bytes.len() - 3]).unwrap();
    let padded = dir.path().join("long.qkt");
    let mut l = bytes.clone();
    l.extend_from_slice(&[0; 4]);
    fs::write(&padded, &l).unwrap();

    let cases = [
        (p(&bad_magic).to_string(), "format"),
        (p(&truncated).to_string(), "length"),
        (p(&padded).to_string(), "length"),
        (
            dir.path().join("missing.qkt").to_str().unwrap().to_string(),
            "io",
        ),
    ];
    for (path, kind) in cases {
        let out = run(&["calibrate", "--trace", &path]);
        assert_eq!(out.status.code(), Some(2), "{path}");
        assert_eq!(stderr_json(&out)["error"], kind, "{path}");
    }

    // stats computed for a different geometry
    let other = dir.path().join("o.qkt");
    run_ok(&[
        "synth",
        "--output",
        p(&other),
        "--tokens",
        "64",
        "--head-dim",
        "16",
    ]);
    let out = run(&["simulate", "--trace", p(&other), "--stats", p(&stats)]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_json(&out)["error"], "configuration");

    let garbage = dir.path().join("g.json");
    fs::write(&garbage, "{ not json").unwrap();
    let out = run(&["simulate", "--trace", p(&trace), "--stats", p(&garbage)]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_json(&out)["error"], "json");

    let out = run(&[
        "score",
        "--trace",
        p(&trace),
        "--stats",
        p(&stats),
        "--offsets",
        "geometric:0:8",
    ]);
    assert_eq!(out.status.code(), Some(1));
}

fn retained(doc: &Value) -> Value {
    doc["final_positions"].clone()
}

#[test]
fn ablation_flags_change_retention() {
    let dir = tempdir().unwrap();
    let trace = dir.path().join("t.qkt");
    let stats = dir.path().join("s.json");
    run_ok(&[
        "synth",
        "--output",
        p(&trace),
        "--tokens",
        "512",
        "--head-dim",
        "32",
        "--q-heads",
        "2",
        "--k-heads",
        "1",
        "--kappa",
        "2",
        "--norm-jitter",
        "0.5",
        "--seed",
        "4",
    ]);
    run_ok(&["calibrate", "--trace", p(&trace), "--output", p(&stats)]);
    let sim = |extra: &[&str]| {
        let mut args = vec![
            "simulate",
            "--trace",
            p(&trace),
            "--stats",
            p(&stats),
            "--budget",
            "64",
            "--window",
            "32",
        ];
        args.extend_from_slice(extra);
        serde_json::from_slice::<Value>(&run_ok(&args).stdout).unwrap()
    };
    let full = sim(&[]);
    let no_trig = sim(&["--no-trig"]);
    let no_mrl = sim(&["--no-mrl-weight"]);
    let protected = sim(&["--protect-recent"]);
    let linear = sim(&["--offsets", "linear:1:65536:17"]);
    assert_eq!(full["config"]["variant"], "full");
    assert_eq!(no_trig["config"]["variant"], "no-trig");
    assert_eq!(no_mrl["config"]["variant"], "no-mrl-weight");
    assert_ne!(retained(&full), retained(&no_trig));
    assert_ne!(retained(&full), retained(&no_mrl));
    assert_ne!(retained(&full), retained(&linear));

    let last: Vec<u64> = protected["final_positions"][0]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_u64().unwrap())
        .collect();
    assert_eq!(last.len(), 64);
    for pos in 480..512 {
        assert!(last.contains(&pos), "recent position {pos} evicted");
    }
    assert_eq!(sim(&[]), full);
}

#[test]
fn dfs_score_csv() {
    let dir = tempdir().unwrap();
    let batch = dir.path().join("b.json");
    let answers = dir.path().join("a.json");
    run_ok(&[
        "dfs",
        "--per-step",
        "2",
        "--steps-min",
        "6",
        "--steps-max",
        "7",
        "--output",
        p(&batch),
    ]);
    fs::write(&answers, "{}").unwrap();
    let out = run_ok(&[
        "dfs-score",
        "--batch",
        p(&batch),
        "--answers",
        p(&answers),
        "--format",
        "csv",
    ]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(
        text,
        "steps,n,stack_exact,current_exact,visited_exact\n6,2,0,0,0\n7,2,0,0,0\nall,4,0,0,0\n"
    );
}
