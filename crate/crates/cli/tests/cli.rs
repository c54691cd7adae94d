use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_strokediff"));
    c.env_remove("STROKEDIFF_OUT_DIR").env_remove("STROKEDIFF_THREADS");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn strokediff")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn schedule_info_endpoints() {
    let o = run(&["schedule-info", "--T", "60", "--base", "0.02", "--lo", "1e-5", "--hi", "0.4"]);
    assert!(o.status.success());
    let out = stdout(&o);
    let rows: Vec<Vec<&str>> = out.lines().skip(1).map(|l| l.split('\t').collect()).collect();
    assert_eq!(rows.len(), 60);
    assert_eq!(rows[0][1], "0.02001");
    assert_eq!(rows[59][1], "0.42");
}

#[test]
fn unknown_subcommand_and_flag_are_usage_errors() {
    let o = run(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("Usage"));
    let o = run(&["schedule-info", "--bogus", "1"]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["sample", "--help"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("[default: modified]"));
}

#[test]
fn error_categories_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.jsonl");
    let o = run(&["prepare", "--in", p(&missing), "--out", p(&dir.path().join("o.jsonl"))]);
    assert_eq!(o.status.code(), Some(5));
    assert!(stderr(&o).starts_with("error: io: "));
    assert_eq!(stderr(&o).lines().count(), 1);

    let bad = dir.path().join("bad.jsonl");
    std::fs::write(&bad, "{\"text\":\"a\",\"points\":[[1,0,0.5]]}\n").unwrap();
    let o = run(&["prepare", "--in", p(&bad), "--out", p(&dir.path().join("o.jsonl"))]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).starts_with("error: data: "));

    let cfg = dir.path().join("c.txt");
    std::fs::write(&cfg, "no_such_key = 3\n").unwrap();
    let o = run(&["params-count", "--config", p(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("error: usage: "));

    let o = bin().args(["schedule-info"]).env("STROKEDIFF_THREADS", "zero").output().unwrap();
    assert_eq!(o.status.code(), Some(2));
}

const FIXTURE: &str = r#"{"id":"r0","text":"ab","writer":"w1","points":[[2,0,0],[2,0,0],[0,2,1],[-2,0,0],[-2,0,1]]}
{"id":"r1","text":"c","writer":"w1","points":[[0,0,0],[0,0,1]]}
{"id":"r2","text":"d","writer":"w2","points":[[3,4,0],[3,4,0],[3,4,1]]}
"#;

#[test]
fn prepare_three_record_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in.jsonl");
    std::fs::write(&input, FIXTURE).unwrap();
    let out = dir.path().join("prep.jsonl");
    let o = run(&["prepare", "--in", p(&input), "--out", p(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("records in: 3"));
    assert!(text.contains("records out: 2"));
    assert!(text.contains("degenerate: 1"));
    assert!(text.contains("points: 8 -> 4"));
    assert!(text.contains("dropped: 0"));
    assert!(text.contains("scale: 0.95\n"));

    // r0: pooled std 1.4, the two (2,0) moves merge. r2: std 0.5, one stroke.
    let lines: Vec<serde_json::Value> = std::fs::read_to_string(&out)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let expect: [(&str, Vec<[f64; 3]>); 2] = [
        ("r0", vec![[4.0 / 1.4, 0.0, 0.0], [0.0, 2.0 / 1.4, 1.0], [-4.0 / 1.4, 0.0, 1.0]]),
        ("r2", vec![[18.0, 24.0, 1.0]]),
    ];
    assert_eq!(lines.len(), 2);
    for (line, (id, pts)) in lines.iter().zip(expect.iter()) {
        assert_eq!(line["id"], *id);
        let got = line["points"].as_array().unwrap();
        assert_eq!(got.len(), pts.len());
        for (g, w) in got.iter().zip(pts) {
            for k in 0..3 {
                assert!((g[k].as_f64().unwrap() - w[k]).abs() < 1e-12, "{id}: {g} vs {w:?}");
            }
        }
    }
    let drops = std::fs::read_to_string(dir.path().join("prep.jsonl.drops.txt")).unwrap();
    assert!(drops.contains("rejected: degenerate record: record r1"));
    let run_manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("prep.jsonl.run.json")).unwrap()).unwrap();
    assert_eq!(run_manifest["command"], "prepare");
    assert_eq!(run_manifest["results"]["records_out"], 2);
}

#[test]
fn output_dir_override() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in.jsonl");
    std::fs::write(&input, FIXTURE).unwrap();
    let redirected = dir.path().join("elsewhere");
    let o = bin()
        .args(["prepare", "--in", p(&input), "--out", "/nonexistent/prep.jsonl"])
        .env("STROKEDIFF_OUT_DIR", &redirected)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(redirected.join("prep.jsonl").exists());
}

fn synthetic_records(path: &Path) {
    let mut text = String::new();
    for (i, word) in ["ab", "ba", "abba"].iter().enumerate() {
        let mut pts = Vec::new();
        for (j, c) in word.chars().enumerate() {
            let (dx, dy) = if c == 'a' { (1.0, 0.5) } else { (-0.3, 1.0) };
            pts.push(format!("[{dx},{dy},0]"));
            pts.push(format!("[{},{},0]", dy + 0.1 * i as f64, -dx));
            pts.push(format!("[1.5,{},1]", 0.2 * j as f64));
        }
        text.push_str(&format!(
            "{{\"id\":\"s{i}\",\"text\":\"{word}\",\"writer\":\"w\",\"points\":[{}]}}\n",
            pts.join(",")
        ));
    }
    std::fs::write(path, text).unwrap();
}

#[test]
fn end_to_end_tiny_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = d.join("data.jsonl");
    synthetic_records(&data);
    let cfg = d.join("train.txt");
    std::fs::write(&cfg, "preset = tiny\nbatch_size = 2\nlog_every = 1\ncheckpoint_every = 2\n").unwrap();
    let ckpt = d.join("ckpt");

    let o = run(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&ckpt), "--steps", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let metrics = std::fs::read_to_string(ckpt.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().next().unwrap(), "step,loss_stroke,loss_pen,level,grad_norm,lr,loss");
    assert_eq!(metrics.lines().count(), 4);
    assert!(ckpt.join("params.bin").exists());

    let o = run(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&ckpt), "--steps", "5", "--resume"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let metrics = std::fs::read_to_string(ckpt.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 6);
    assert!(metrics.lines().last().unwrap().starts_with("5,"));

    let renders = d.join("renders");
    let o = run(&["render", "--in", p(&data), "--out-dir", p(&renders), "--format", "pgm", "--height", "8", "--width", "16"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let style = renders.join("s0.pgm");
    assert!(style.exists());
    let o = run(&["render", "--in", p(&data), "--out-dir", p(&renders), "--format", "svg"]);
    assert!(o.status.success());
    assert!(renders.join("s2.svg").exists());

    let sample_dir = d.join("sample");
    let args = ["sample", "--ckpt", p(&ckpt), "--text", "ab", "--style", p(&style), "--seed", "4", "--out-dir", p(&sample_dir)];
    let o = run(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let first = std::fs::read(sample_dir.join("sample.jsonl")).unwrap();
    assert!(sample_dir.join("sample.svg").exists());
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(sample_dir.join("run.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 4);
    assert!(run(&args).status.success());
    assert_eq!(std::fs::read(sample_dir.join("sample.jsonl")).unwrap(), first);

    let o = run(&["sample", "--ckpt", p(&ckpt), "--text", "zzzz", "--style", p(&style), "--out-dir", p(&sample_dir)]);
    assert_eq!(o.status.code(), Some(3));

    let interp = d.join("interp");
    let o = run(&[
        "interpolate", "--ckpt", p(&ckpt), "--text", "ba", "--style0", p(&style), "--style1",
        p(&renders.join("s1.pgm")), "--lambdas", "1,0.5,0", "--out-dir", p(&interp),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(std::fs::read_to_string(interp.join("interpolation.jsonl")).unwrap().lines().count(), 3);
    let o = run(&[
        "interpolate", "--ckpt", p(&ckpt), "--text", "ba", "--style0", p(&style), "--style1", p(&style),
        "--lambdas", "1.5", "--out-dir", p(&interp),
    ]);
    assert_eq!(o.status.code(), Some(2));

    let diag = d.join("diag");
    let o = run(&["diagnose-attention", "--ckpt", p(&ckpt), "--record", p(&data), "--index", "2", "--t", "3", "--out-dir", p(&diag)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(diag.join("attention.csv")).unwrap();
    let first_row = csv.lines().next().unwrap();
    assert_eq!(first_row.split(',').count(), 4);
    let sum: f64 = first_row.split(',').map(|v| v.parse::<f64>().unwrap()).sum();
    assert!((sum - 1.0).abs() < 1e-9);
    assert!(stdout(&o).contains("monotonicity"));

    let o = run(&["params-count", "--preset", "tiny", "--vocab-size", "5"]);
    assert!(o.status.success());
    assert!(stdout(&o).lines().last().unwrap().starts_with("total\t"));
}
