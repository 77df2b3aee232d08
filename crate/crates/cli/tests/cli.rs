//! End-to-end runs of the `lrcert` binary on the shipped fixtures.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use serde_json::Value;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(name)
}

fn lrcert(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lrcert")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

/// Writes a fixture with extra TOML appended and text substitutions applied.
fn variant(dir: &Path, name: &str, replace: &[(&str, &str)], append: &str) -> PathBuf {
    let mut text = fs::read_to_string(fixture(name)).expect("fixture");
    for (from, to) in replace {
        assert!(text.contains(from), "{name} lacks `{from}`");
        text = text.replace(from, to);
    }
    text.push_str(append);
    let path = dir.join(name);
    fs::write(&path, text).expect("write config");
    path
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).expect("json file")).expect("valid json")
}

/// A toy certificate synthesized once and shared by the tests below.
fn toy_certificate() -> &'static Path {
    static DIR: OnceLock<PathBuf> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = tempfile::tempdir().expect("tempdir").keep();
        let out = lrcert(&["synthesize", "--config", s(&fixture("toy.toml")), "--out-dir", s(&dir)]);
        assert_eq!(code(&out), 0, "synthesize failed: {}", stderr(&out));
        dir
    })
}

#[test]
fn missing_env_table_is_a_config_error_naming_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    fs::write(&path, "[constants]\na1 = 1.0\n").unwrap();
    let out = lrcert(&["verify", "--config", s(&path), "--certificate", "none.json"]);
    assert_eq!(code(&out), 3);
    assert!(stderr(&out).contains("`env`"), "{}", stderr(&out));
}

#[test]
fn unknown_key_and_bad_arguments_exit_with_format_code() {
    let dir = tempfile::tempdir().unwrap();
    let path = variant(dir.path(), "toy.toml", &[], "\n[reach]\nsampels = 3\n");
    let out = lrcert(&["--dry-run", "reduce", "--config", s(&path)]);
    assert_eq!(code(&out), 3);
    assert!(stderr(&out).contains("sampels"), "{}", stderr(&out));
    assert_eq!(code(&lrcert(&["reduce", "--no-such-flag"])), 3);
}

#[test]
fn dry_run_output_parses_to_the_same_configuration() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["toy.toml", "star.toml", "chain3.toml"] {
        let out = lrcert(&["--dry-run", "reduce", "--config", s(&fixture(name))]);
        assert_eq!(code(&out), 0, "{name}: {}", stderr(&out));
        let resolved = dir.path().join(name);
        fs::write(&resolved, &out.stdout).unwrap();
        let again = lrcert(&["--dry-run", "reduce", "--config", s(&resolved)]);
        assert_eq!(code(&again), 0);
        assert_eq!(out.stdout, again.stdout, "{name} changes on a second pass");
    }
}

#[test]
fn dry_run_fills_benchmark_parameters() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("platoon.toml");
    fs::write(&path, "[env]\nkind = \"platoon\"\n").unwrap();
    let out = lrcert(&["--dry-run", "simulate", "--config", s(&path)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("[env.platoon]"), "{text}");
    assert!(text.contains("tau_max"), "{text}");
}

#[test]
fn synthesized_toy_certificate_verifies() {
    let dir = toy_certificate();
    let report = read_json(&dir.join("report.json"));
    assert_eq!(report["verdict"], "verified");
    let out_dir = tempfile::tempdir().unwrap();
    let out = lrcert(&[
        "verify",
        "--config",
        s(&fixture("toy.toml")),
        "--certificate",
        s(&dir.join("certificate.json")),
        "--out-dir",
        s(out_dir.path()),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(read_json(&out_dir.path().join("report.json"))["verdict"], "verified");
    assert!(out_dir.path().join("reach.csv").exists());
}

#[test]
fn corrupted_certificate_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(toy_certificate().join("certificate.json")).unwrap();
    let cases = [
        ("truncated", text[..text.len() / 2].to_string()),
        ("not json", "certificate".to_string()),
    ];
    for (what, body) in cases {
        let path = dir.path().join(format!("{what}.json"));
        fs::write(&path, body).unwrap();
        let out = lrcert(&["verify", "--config", s(&fixture("toy.toml")), "--certificate", s(&path), "--out-dir", s(dir.path())]);
        assert_eq!(code(&out), 3, "{what}: {}", stderr(&out));
    }
    // A certificate for another system is rejected before any check runs.
    let out = lrcert(&[
        "verify",
        "--config",
        s(&fixture("ring.toml")),
        "--certificate",
        s(&toy_certificate().join("certificate.json")),
        "--out-dir",
        s(dir.path()),
    ]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
}

#[test]
fn tampered_weights_are_detected() {
    let dir = tempfile::tempdir().unwrap();
    let mut cert = read_json(&toy_certificate().join("certificate.json"));
    let text = serde_json::to_string(&cert).unwrap();
    // Flip one character of the first base64 weight blob.
    let blob = find_string_longer_than(&mut cert, 40).expect("weight blob");
    let mut chars: Vec<char> = blob.chars().collect();
    chars[10] = if chars[10] == 'A' { 'B' } else { 'A' };
    *blob = chars.into_iter().collect();
    let tampered = serde_json::to_string(&cert).unwrap();
    assert_ne!(text, tampered);
    let path = dir.path().join("tampered.json");
    fs::write(&path, tampered).unwrap();
    let out = lrcert(&["verify", "--config", s(&fixture("toy.toml")), "--certificate", s(&path), "--out-dir", s(dir.path())]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
}

fn find_string_longer_than(v: &mut Value, len: usize) -> Option<&mut String> {
    match v {
        Value::String(s) if s.len() > len => Some(s),
        Value::Array(items) => items.iter_mut().find_map(|x| find_string_longer_than(x, len)),
        Value::Object(map) => map.values_mut().find_map(|x| find_string_longer_than(x, len)),
        _ => None,
    }
}

#[test]
fn star_reduces_to_hub_and_leaves() {
    let dir = tempfile::tempdir().unwrap();
    let out = lrcert(&["reduce", "--config", s(&fixture("star.toml")), "--out-dir", s(dir.path())]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let classes = read_json(&dir.path().join("classes.json"));
    assert_eq!(classes["class_count"], 2);
    assert_eq!(classes["classes"][0]["members"], serde_json::json!([0]));
    assert_eq!(classes["classes"][1]["members"].as_array().unwrap().len(), 9);
}

#[test]
fn simulation_at_equilibrium_stays_put() {
    let dir = tempfile::tempdir().unwrap();
    let platoon = dir.path().join("platoon.toml");
    fs::write(&platoon, "[env]\nkind = \"platoon\"\nagents = 4\n").unwrap();
    for config in [fixture("toy.toml"), platoon] {
        let out_dir = dir.path().join(config.file_stem().unwrap());
        let out = lrcert(&["simulate", "--config", s(&config), "--steps", "30", "--out-dir", s(&out_dir)]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        let mut reader = csv::Reader::from_path(out_dir.join("trajectory.csv")).unwrap();
        let mut first: std::collections::HashMap<(String, String, String), f64> = Default::default();
        let mut rows = 0;
        for rec in reader.records() {
            let rec = rec.unwrap();
            let key = (rec[1].to_string(), rec[2].to_string(), rec[4].to_string());
            let value: f64 = rec[3].parse().unwrap();
            let start = *first.entry(key).or_insert(value);
            assert_eq!(value, start, "{} moves at step {}", config.display(), &rec[0]);
            rows += 1;
        }
        assert!(rows > 30);
    }
}

#[test]
fn chain_certificate_transfers_to_a_longer_chain() {
    let dir = tempfile::tempdir().unwrap();
    let fast = "\n[reach]\nsamples = 256\ncorners = false\n";
    let source = variant(dir.path(), "chain3.toml", &[], fast);
    let target = variant(dir.path(), "chain10.toml", &[], fast);
    let src_out = dir.path().join("src");
    let out = lrcert(&["synthesize", "--config", s(&source), "--out-dir", s(&src_out)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let dst_out = dir.path().join("dst");
    let out = lrcert(&[
        "transfer",
        "--config",
        s(&target),
        "--certificate",
        s(&src_out.join("certificate.json")),
        "--source-config",
        s(&source),
        "--out-dir",
        s(&dst_out),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let out = lrcert(&[
        "verify",
        "--config",
        s(&target),
        "--certificate",
        s(&dst_out.join("certificate.json")),
        "--out-dir",
        s(&dst_out),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let report = read_json(&dst_out.join("report.json"));
    // The head reads nobody; every later agent reads its predecessor.
    let groups = report["groups"].as_array().unwrap();
    assert_eq!(groups.len(), 2);
    let covered: usize = groups.iter().map(|g| g.as_array().unwrap().len()).sum();
    assert_eq!(covered, 10);
}

#[test]
fn same_seed_gives_identical_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let config = variant(dir.path(), "toy.toml", &[], "\n[reach]\nsamples = 256\n");
    let run = |name: &str| {
        let out_dir = dir.path().join(name);
        let out = lrcert(&["synthesize", "--config", s(&config), "--seed", "11", "--out-dir", s(&out_dir)]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        out_dir
    };
    let (a, b) = (run("a"), run("b"));
    for file in ["certificate.json", "report.json", "cegis_log.jsonl"] {
        assert_eq!(fs::read(a.join(file)).unwrap(), fs::read(b.join(file)).unwrap(), "{file} differs");
    }
}

#[test]
fn coarser_grid_is_never_silently_verified() {
    let dir = tempfile::tempdir().unwrap();
    let cert = toy_certificate().join("certificate.json");
    let base = read_json(&toy_certificate().join("report.json"));
    let coarse = variant(dir.path(), "toy.toml", &[("delta_out = 0.01", "delta_out = 0.02")], "");
    let out = lrcert(&["verify", "--config", s(&coarse), "--certificate", s(&cert), "--out-dir", s(dir.path())]);
    let report = read_json(&dir.path().join("report.json"));
    let verdict = report["verdict"].as_str().unwrap();
    let expected = match verdict {
        "verified" => 0,
        "refuted" => 1,
        _ => 2,
    };
    assert_eq!(code(&out), expected, "exit code disagrees with verdict {verdict}");
    // Whatever the verdict, it was reached with margins for the coarser grid.
    assert_eq!(report["grids"]["delta_out"], 0.02);
    let margin = |r: &Value| r["margins"][0]["delta_out"][0].as_f64().unwrap();
    assert!(margin(&report) > 1.5 * margin(&base), "{} vs {}", margin(&report), margin(&base));
    if verdict == "refuted" {
        assert!(report["counterexamples"].as_array().is_some_and(|c| !c.is_empty()));
    }
}
