use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn tasc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tasc")).args(args).output().expect("binary runs")
}

fn fixture(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name).to_string_lossy().into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Data lines of a CSV artifact: provenance comments dropped, header kept
/// as the first entry.
fn csv_lines(path: &Path) -> Vec<Vec<String>> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

fn assert_ok(out: &Output) {
    assert!(out.status.success(), "exit {:?}: {}", out.status.code(), String::from_utf8_lossy(&out.stderr));
}

#[test]
fn tasc_on_toy_panel_writes_one_row_per_post_period_with_bands() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("cf.csv");
    assert_ok(&tasc(&["infer", "-i", &fixture("toy.csv"), "--sidecar", &fixture("toy.meta.json"), "--method", "tasc", "-o", s(&out)]));
    let lines = csv_lines(&out);
    assert_eq!(lines[0], ["time", "y_hat", "ci_lower", "ci_upper", "observed", "effect"]);
    assert_eq!(lines.len() - 1, 30 - 20);
    for row in &lines[1..] {
        let v: Vec<f64> = row[1..].iter().map(|c| c.parse().unwrap()).collect();
        assert!(v[1] <= v[0] && v[0] <= v[2], "band must contain the point estimate: {row:?}");
        assert!((v[3] - v[0] - v[4]).abs() < 1e-12, "effect = observed - y_hat");
    }
    let theta: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("cf.theta.json")).unwrap()).unwrap();
    assert_eq!(theta["state_dim"], 2);
    assert_eq!(theta["provenance"]["seed"], 0);
}

#[test]
fn sc_puts_all_weight_on_an_identical_donor() {
    let dir = tempfile::tempdir().unwrap();
    let panel = dir.path().join("p.csv");
    std::fs::write(
        &panel,
        "unit,a,b,c,d,e,f\ntreated,1.0,2.5,0.5,3.0,,\nclone,1.0,2.5,0.5,3.0,2.0,1.0\nother,0.2,-1.0,2.0,0.1,0.3,0.4\nthird,3.0,1.0,-2.0,0.5,0.0,1.0\n",
    )
    .unwrap();
    let out = dir.path().join("sc.csv");
    assert_ok(&tasc(&["infer", "-i", s(&panel), "--t0", "4", "--method", "sc", "-o", s(&out)]));
    let weights = csv_lines(&dir.path().join("sc.weights.csv"));
    assert_eq!(weights[1][0], "clone");
    assert!(weights[1][1].parse::<f64>().unwrap() >= 0.999);
    // no observed post values, so no effect column
    assert_eq!(csv_lines(&out)[0], ["time", "y_hat"]);
}

#[test]
fn missing_input_exits_one_without_output() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("never.csv");
    let res = tasc(&["infer", "-i", s(&dir.path().join("absent.csv")), "--t0", "3", "-o", s(&out)]);
    assert_eq!(res.status.code(), Some(1));
    assert!(!out.exists());
    assert!(!String::from_utf8_lossy(&res.stderr).is_empty());
}

#[test]
fn bad_flags_and_unknown_config_fields_exit_one() {
    assert_eq!(tasc(&["infer", "--no-such-flag"]).status.code(), Some(1));
    assert_eq!(tasc(&["infer", "--method", "ols"]).status.code(), Some(1));
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"replicate": 3}"#).unwrap();
    let out = dir.path().join("b.csv");
    assert_eq!(tasc(&["bench", "-c", s(&cfg), "-o", s(&out)]).status.code(), Some(1));
    assert!(!out.exists());
}

#[test]
fn numerical_failure_exits_two_without_output() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r.csv");
    // rank-1 denoising leaves the unregularised ridge system singular
    let res = tasc(&["infer", "-i", &fixture("toy.csv"), "--t0", "20", "--method", "rsc", "--d", "1", "--lambda", "0", "-o", s(&out)]);
    assert_eq!(res.status.code(), Some(2), "{}", String::from_utf8_lossy(&res.stderr));
    assert!(!out.exists());
}

fn run_twice(args: &[&str], out: &Path) -> (Vec<u8>, Vec<u8>) {
    let read = |p: &Path| -> Vec<u8> {
        if p.is_dir() {
            let mut names: Vec<PathBuf> = std::fs::read_dir(p).unwrap().map(|e| e.unwrap().path()).collect();
            names.sort();
            names.iter().flat_map(|n| std::fs::read(n).unwrap()).collect()
        } else {
            std::fs::read(p).unwrap()
        }
    };
    assert_ok(&tasc(args));
    let first = read(out);
    if out.is_dir() {
        std::fs::remove_dir_all(out).unwrap();
    } else {
        std::fs::remove_file(out).unwrap();
    }
    assert_ok(&tasc(args));
    (first, read(out))
}

#[test]
fn fixed_seed_gives_byte_identical_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let toy = fixture("toy.csv");
    let bench_cfg = dir.path().join("bench.json");
    std::fs::write(
        &bench_cfg,
        r#"{"regimes":[{"name":"tiny","config":{"d_true":2,"n_units":5,"t_total":40,"t0":30}}],
            "methods":[{"method":"tasc","em":{"d":2,"n_iters":30}},{"method":"rsc","rsc":{"d":2}}],
            "replicates":2}"#,
    )
    .unwrap();
    let cases: Vec<(Vec<String>, PathBuf)> = vec![
        (vec!["infer".into(), "-i".into(), toy.clone(), "--t0".into(), "20".into(), "--n1".into(), "40".into()], dir.path().join("infer.json")),
        (vec!["simulate".into()], dir.path().join("sim")),
        (vec!["permute".into(), "-i".into(), toy.clone(), "--t0".into(), "20".into(), "--method".into(), "tasc".into(), "--n1".into(), "20".into(), "--shuffles".into(), "3".into()], dir.path().join("perm.csv")),
        (vec!["placebo".into(), "-i".into(), toy.clone(), "--t0".into(), "20".into(), "--n1".into(), "20".into()], dir.path().join("placebo.csv")),
        (vec!["bench".into(), "-c".into(), s(&bench_cfg).into()], dir.path().join("bench.csv")),
    ];
    for (mut args, out) in cases {
        args.extend(["--seed".into(), "11".into(), "-o".into(), s(&out).into()]);
        if out.extension().is_some_and(|e| e == "json") {
            args.extend(["--format".into(), "json".into()]);
        }
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        let (a, b) = run_twice(&refs, &out);
        assert!(!a.is_empty());
        assert_eq!(a, b, "{} output differs between runs", args[0]);
    }
}

#[test]
fn outputs_record_version_command_and_seed() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o.json");
    assert_ok(&tasc(&["infer", "-i", &fixture("toy.csv"), "--t0", "20", "--method", "sc", "--seed", "5", "--format", "json", "-o", s(&out)]));
    let doc: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(doc["provenance"]["version"], env!("CARGO_PKG_VERSION"));
    assert_eq!(doc["provenance"]["seed"], 5);
    assert!(doc["provenance"]["command"].as_str().unwrap().starts_with("tasc infer "));
    assert_eq!(doc["weights"].as_array().unwrap().len(), 5);

    let csv = dir.path().join("o.csv");
    assert_ok(&tasc(&["infer", "-i", &fixture("toy.csv"), "--t0", "20", "--method", "sc", "--seed", "5", "-o", s(&csv)]));
    let text = std::fs::read_to_string(&csv).unwrap();
    let head: Vec<&str> = text.lines().take(3).collect();
    assert_eq!(head[0], format!("# tasc {}", env!("CARGO_PKG_VERSION")));
    assert!(head[1].starts_with("# command: tasc infer"));
    assert_eq!(head[2], "# seed: 5");
}

#[test]
fn bench_one_by_one_by_one_is_a_single_row() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("b.json");
    std::fs::write(&cfg, r#"{"regimes":[{"name":"r","config":{"d_true":2,"n_units":5,"t_total":40,"t0":30}}],"replicates":1}"#).unwrap();
    let out = dir.path().join("bench.csv");
    assert_ok(&tasc(&["bench", "-c", s(&cfg), "--method", "sc", "-o", s(&out)]));
    let lines = csv_lines(&out);
    assert_eq!(lines.len(), 2, "header plus one row");
    assert_eq!(lines[1][..3], ["r", "sc", "0"]);
    assert!(lines[1][4].parse::<f64>().unwrap() > 0.0);
}

#[test]
fn identity_shuffles_report_unit_ratio() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("perm.csv");
    assert_ok(&tasc(&["permute", "-i", &fixture("toy.csv"), "--t0", "20", "--method", "tasc", "--identity", "--shuffles", "3", "-o", s(&out)]));
    let lines = csv_lines(&out);
    let ratio = lines.iter().find(|l| l[0] == "ratio").unwrap();
    assert_eq!(ratio[1].parse::<f64>().unwrap(), 1.0);
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, format!(r#"{{"input":"{}","panel":{{"t0":20}},"method":{{"method":"rsc"}}}}"#, fixture("toy.csv"))).unwrap();
    let out = dir.path().join("o.json");
    assert_ok(&tasc(&["infer", "-c", s(&cfg), "--method", "sc", "--format", "json", "-o", s(&out)]));
    let doc: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(doc["method"], "sc");
}

#[test]
fn simulate_then_infer_round_trip_through_the_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let sim = dir.path().join("sim");
    assert_ok(&tasc(&["simulate", "--seed", "3", "-o", s(&sim)]));
    let out = dir.path().join("cf.csv");
    assert_ok(&tasc(&["infer", "-i", s(&sim.join("values.csv")), "--sidecar", s(&sim.join("meta.json")), "--method", "rsc", "-o", s(&out)]));
    assert_eq!(csv_lines(&out).len() - 1, 50);
}
