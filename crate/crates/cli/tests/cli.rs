use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_bpre-lab"));
    cmd.env_remove("BPRE_LAB_OUT");
    cmd
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn two_atom() -> String {
    concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/two_atom.json").to_string()
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn calibrate_unit_variance() {
    let o = run(&["calibrate", "--sigma2", "1"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(
        text.contains("classification: intermediately_subcritical"),
        "{text}"
    );
    assert!(text.contains("gamma: 0.606531"), "{text}");
}

#[test]
fn e5_reruns_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let mut results = Vec::new();
    for (name, workers) in [("a", "1"), ("b", "1"), ("c", "4")] {
        let dir = tmp.path().join(name);
        let o = run(&[
            "experiment",
            "e5",
            "--n",
            "50",
            "--samples",
            "1000000",
            "--seed",
            "7",
            "--workers",
            workers,
            "--out",
            path_str(&dir),
        ]);
        assert_eq!(
            o.status.code(),
            Some(0),
            "{}",
            String::from_utf8_lossy(&o.stderr)
        );
        assert!(dir.join("manifest.json").exists());
        assert!(!dir.join("partial").exists());
        results.push(fs::read(dir.join("e5/result.json")).unwrap());
    }
    assert_eq!(results[0], results[1]);
    assert_eq!(results[0], results[2]);
}

#[test]
fn oracle_prints_exact_table() {
    let o = run(&["oracle", "--spec", &two_atom(), "--n", "3"]);
    assert!(o.status.success());
    let law: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(law["atoms"]["2"], 1.0);
    assert_eq!(law["event"], "Z_3 > 0");
    let o = run(&[
        "oracle",
        "--spec",
        &two_atom(),
        "--n",
        "3",
        "--generation",
        "2",
    ]);
    let law: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let total = law["atoms"]["2"].as_f64().unwrap() + law["atoms"]["4"].as_f64().unwrap();
    assert!((total - 1.0).abs() < 1e-12);
}

#[test]
fn errors_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(&["experiment", "e5", "--samples", "10"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("seed"));

    let o = run(&[
        "experiment",
        "e9",
        "--seed",
        "1",
        "--out",
        path_str(&tmp.path().join("x")),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown experiment"));

    let cfg = tmp.path().join("cfg.json");
    fs::write(&cfg, "{\n  \"seed\": 1,\n  \"sampels\": 5\n}\n").unwrap();
    let o = run(&["experiment", "e5", "--config", path_str(&cfg)]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("line 3") && err.contains("sampels"), "{err}");

    let o = run(&["no-such-command"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn existing_output_is_not_overwritten() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("run");
    fs::create_dir(&dir).unwrap();
    let o = run(&[
        "simulate",
        "--seed",
        "1",
        "--n",
        "8",
        "--samples",
        "10",
        "--out",
        path_str(&dir),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("refusing to overwrite"));
    assert!(fs::read_dir(&dir).unwrap().next().is_none());
}

#[test]
fn failed_and_inconclusive_verdicts_have_own_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let th = tmp.path().join("th.json");
    fs::write(&th, r#"{"e5_arcsine_ks": 0.0}"#).unwrap();
    let o = run(&[
        "experiment",
        "e5",
        "--n",
        "20",
        "--samples",
        "1000",
        "--seed",
        "3",
        "--threshold-file",
        path_str(&th),
        "--out",
        path_str(&tmp.path().join("fail")),
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", stdout(&o));

    let spec = tmp.path().join("point.json");
    fs::write(
        &spec,
        r#"{"family": "discrete_mixture", "parameters": {"atoms": [{"law": {"kind": "point_mass", "k": 1}, "probability": 1.0}]}}"#,
    )
    .unwrap();
    let o = run(&[
        "experiment",
        "e1",
        "--spec",
        path_str(&spec),
        "--n",
        "4,8",
        "--samples",
        "200",
        "--seed",
        "3",
        "--out",
        path_str(&tmp.path().join("inconclusive")),
    ]);
    assert_eq!(
        o.status.code(),
        Some(3),
        "{}{}",
        stdout(&o),
        String::from_utf8_lossy(&o.stderr)
    );
}

#[test]
fn simulate_and_renewal_write_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("sim");
    let o = run(&[
        "simulate",
        "--seed",
        "2",
        "--n",
        "16",
        "--samples",
        "100",
        "--out",
        path_str(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join("samples.csv")).unwrap();
    assert_eq!(csv.lines().count(), 101);
    assert!(csv.starts_with("weight"));

    let out = tmp.path().join("spine");
    let o = run(&[
        "simulate",
        "--kind",
        "spine",
        "--seed",
        "2",
        "--n",
        "5",
        "--samples",
        "3",
        "--out",
        path_str(&out),
    ]);
    assert!(o.status.success());
    assert_eq!(
        fs::read_to_string(out.join("spine.csv"))
            .unwrap()
            .lines()
            .count(),
        1 + 3 * 6
    );

    let out = tmp.path().join("ren");
    let o = run(&[
        "renewal",
        "--seed",
        "2",
        "--samples",
        "2000",
        "--r",
        "50",
        "--out",
        path_str(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("u_table.csv").exists() && out.join("v_table.csv").exists());
}

#[test]
fn default_root_comes_from_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let o = bin()
        .args(["simulate", "--seed", "9", "--n", "8", "--samples", "10"])
        .env("BPRE_LAB_OUT", tmp.path())
        .output()
        .unwrap();
    assert!(o.status.success());
    let manifest = tmp.path().join("simulate-seed9/manifest.json");
    let m: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(manifest).unwrap()).unwrap();
    assert_eq!(m["config"]["seed"], 9);
    assert_eq!(m["schema_version"], 1);
}
