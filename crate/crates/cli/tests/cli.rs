use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hstar_core::io::{load_checkpoint, save_checkpoint};
use serde_json::Value;

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs")
}

fn hstar(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hstar"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

/// Model annulus config with the given exponent and resolution.
fn model_config(dir: &Path, name: &str, p: f64, n: usize, extra: &str) -> PathBuf {
    let text = format!(
        r#"{{
  "problem": {{ "p": {p},
    "inner": {{ "kind": "gauge_ball", "center": [0, 0, 0], "radius": 0.4 }},
    "outer": {{ "kind": "gauge_ball", "center": [0, 0, 0], "radius": 1.0 }} }},
  "resolution": {n}{extra}
}}"#
    );
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn bundled_model_solves_and_certifies() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let cfg = configs().join("model_p2.json");
    let o = hstar(&["solve", "--config", s(&cfg)], &out);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let rep = json(&out.join("solve_report.json"));
    assert!(rep["report"]["final_residual"].as_f64().unwrap() <= 1e-8);
    let hash = rep["config_hash"].as_str().unwrap().to_string();
    assert_eq!(json(&out.join("field.json"))["config_hash"], hash.as_str());
    assert_eq!(fs::metadata(out.join("field.bin")).unwrap().len(), 8 * 65 * 65 * 65);

    let o = hstar(&["verify", "--config", s(&cfg)], &out);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v = json(&out.join("verify_report.json"));
    assert_eq!(v["pass"], true);
    assert_eq!(v["checkpoint_config_hash"], hash.as_str());
    assert_eq!(v["sign_certificate"]["pass"], true);
    for t in ["0.2", "0.5", "0.8"] {
        let ply = fs::read_to_string(out.join(format!("level_{t}.ply"))).unwrap();
        assert!(ply.contains(&format!("comment config_hash {hash}")));
    }
    let first = fs::read(out.join("verify_report.json")).unwrap();
    assert_eq!(code(&hstar(&["verify", "--config", s(&cfg)], &out)), 0);
    assert_eq!(fs::read(out.join("verify_report.json")).unwrap(), first);

    // reversed data: the certificates must fail but reports are still written
    let bin = out.join("field.bin");
    let (field, meta) = load_checkpoint(&bin).unwrap();
    let flipped = field.map(|v| 1.0 - v);
    let rev = tmp.path().join("reversed.bin");
    save_checkpoint(&rev, &flipped, &meta).unwrap();
    let out_rev = tmp.path().join("rev");
    let o = hstar(&["verify", "--config", s(&cfg), "--checkpoint", s(&rev)], &out_rev);
    assert_eq!(code(&o), 3);
    let v = json(&out_rev.join("verify_report.json"));
    assert_eq!(v["pass"], false);
    assert_eq!(v["sign_certificate"]["pass"], false);

    // a config for another grid is refused
    let small = model_config(tmp.path(), "small.json", 2.0, 33, "");
    let o = hstar(&["verify", "--config", s(&small), "--checkpoint", s(&bin)], &out_rev);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("does not match"));
}

#[test]
fn input_errors_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.json");
    fs::write(&bad, "{ \"problem\": ").unwrap();
    let o = hstar(&["solve", "--config", s(&bad)], tmp.path());
    assert_eq!(code(&o), 1);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("invalid config") && err.contains("line"), "{err}");

    let translated = tmp.path().join("translated.json");
    fs::write(
        &translated,
        r#"{"problem": {"p": 2,
            "inner": {"kind": "gauge_ball", "center": [0.9, 0, 0], "radius": 0.3},
            "outer": {"kind": "gauge_ball", "center": [0, 0, 0], "radius": 2.0}},
          "resolution": 33}"#,
    )
    .unwrap();
    let o = hstar(&["check-domain", "--config", s(&translated)], tmp.path());
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("origin"));

    let o = hstar(&["solve"], tmp.path());
    assert_eq!(code(&o), 1);
    let o = hstar(&["verify", "--config", s(&configs().join("model_p2.json"))], &tmp.path().join("empty"));
    assert_eq!(code(&o), 1);
}

#[test]
fn iteration_cap_exits_two_with_partial_report() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = model_config(tmp.path(), "capped.json", 3.0, 21, r#", "solver": {"max_iterations": 1}"#);
    let out = tmp.path().join("out");
    let o = hstar(&["solve", "--config", s(&cfg)], &out);
    assert_eq!(code(&o), 2);
    let rep = json(&out.join("solve_report.json"));
    assert_eq!(rep["converged"], false);
    assert_eq!(rep["report"]["iterations"], 1);
    assert!(out.join("field.bin").exists());
}

#[test]
fn oracle_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = model_config(tmp.path(), "p2.json", 2.0, 33, r#", "oracle": {"resolutions": [33, 65]}"#);
    let out = tmp.path().join("p2");
    assert_eq!(code(&hstar(&["oracle", "--config", s(&cfg)], &out)), 0);
    let csv = fs::read_to_string(out.join("oracle.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert!(lines[0].starts_with("# config_hash "));
    assert_eq!(lines[1], "resolution,h,sup_error,l2_error,empirical_M,runtime_s");
    assert_eq!(lines.len(), 4);
    let row = |i: usize| -> Vec<f64> { lines[i].split(',').map(|x| x.parse().unwrap()).collect() };
    let (a, b) = (row(2), row(3));
    assert_eq!((a[0], b[0]), (33.0, 65.0));
    assert!(b[2] < a[2] && b[3] < a[3]);
    assert!(b[4] > 0.0);

    let cfg4 = model_config(tmp.path(), "p4.json", 4.0, 21, r#", "oracle": {"resolutions": [21]}"#);
    let out4 = tmp.path().join("p4");
    assert_eq!(code(&hstar(&["oracle", "--config", s(&cfg4)], &out4)), 0);
    let rep = json(&out4.join("oracle_report.json"));
    assert_eq!(rep["critical"], true);
    assert!(rep["rows"][0]["sup_error"].as_f64().unwrap() < 0.05);

    let o = hstar(&["oracle", "--config", s(&configs().join("anisotropic_a4.json"))], &tmp.path().join("a"));
    assert_eq!(code(&o), 1);
}

#[test]
fn domain_checks() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("balls");
    let cfg = configs().join("model_p2.json");
    assert_eq!(code(&hstar(&["check-domain", "--config", s(&cfg)], &out)), 0);
    let first = fs::read(out.join("domain_report.json")).unwrap();
    let rep: Value = serde_json::from_slice(&first).unwrap();
    for d in ["inner", "outer"] {
        assert!(rep[d]["starshapedness"]["min_pairing"].as_f64().unwrap() > 0.0);
        assert_eq!(rep[d]["probes"][0]["side"], "interior");
        assert_eq!(rep[d]["probes"][0]["pass"], true);
    }
    assert_eq!(code(&hstar(&["check-domain", "--config", s(&cfg)], &out)), 0);
    assert_eq!(fs::read(out.join("domain_report.json")).unwrap(), first);
    let o = hstar(&["check-domain", "--config", s(&cfg), "--seed", "9"], &out);
    assert_eq!(code(&o), 0);
    assert_ne!(fs::read(out.join("domain_report.json")).unwrap(), first);

    let out = tmp.path().join("aniso");
    let cfg = configs().join("anisotropic_a4.json");
    assert_eq!(code(&hstar(&["check-domain", "--config", s(&cfg)], &out)), 0);
    let rep = json(&out.join("domain_report.json"));
    assert_eq!(rep["outer"]["starshapedness"]["min_pairing"].as_f64().map(|v| v > 0.0), Some(true));
    assert_eq!(rep["outer"]["probes"].as_array().unwrap().len(), 2);
}

#[test]
fn sweep_over_exponents() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = model_config(
        tmp.path(),
        "sweep.json",
        2.0,
        33,
        r#", "sweep": {"p_values": [2.0, 3.0]}, "verify": {"levels": [0.3, 0.5]}"#,
    );
    let out = tmp.path().join("sweep");
    let o = hstar(&["sweep-p", "--config", s(&cfg), "--threads", "2"], &out);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join("sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[1], "p,resolution,h,sup_error,l2_error,empirical_M,runtime_s,converged,certified");
    assert_eq!(lines.len(), 4);
    assert!(lines[2].starts_with("2,33,") && lines[3].starts_with("3,33,"));
    assert!(lines[2].ends_with(",true,true"));
    let rep = json(&out.join("sweep_report.json"));
    assert_eq!(rep["runs"].as_array().unwrap().len(), 2);
}
