use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};
use sha2::{Digest, Sha256};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_curvedflat")
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn write_config(dir: &Path, name: &str, cfg: &Value) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    p
}

fn curvedflat(args: &[&str], config: &Path, out: &Path) -> Output {
    Command::new(bin())
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .env_remove("CURVEDFLAT_OUT")
        .output()
        .unwrap()
}

fn report(out: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap()
}

fn check<'a>(report: &'a Value, name: &str) -> &'a Value {
    report["checks"].as_array().unwrap().iter().find(|c| c["name"] == name).unwrap_or_else(|| panic!("no check {name}"))
}

fn four_pole(points: usize, half: f64) -> Value {
    json!({
        "pair": { "name": "sun_son", "n": 3 },
        "grid": { "extents": [[-half, half], [-half, half]], "points": [points, points] },
        "loop": { "poles": [[1.0, 1.0]], "seed": 7, "rank": 1, "mirror": true },
        "seed": 7
    })
}

#[test]
fn pair_check_builtins_pass() {
    let dir = tempfile::tempdir().unwrap();
    for n in [2, 3] {
        let cfg = write_config(dir.path(), "p.json", &json!({ "pair": { "name": "sun_son", "n": n } }));
        let out = dir.path().join(format!("out{n}"));
        let o = curvedflat(&["pair-check"], &cfg, &out);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
        let r = report(&out);
        assert_eq!(r["passed"], true);
        assert_eq!(check(&r, "algebra.form_ad_invariance")["passed"], true);
    }
}

#[test]
fn pair_check_names_the_broken_invariant() {
    let dir = tempfile::tempdir().unwrap();
    let m = |rows: [[f64; 4]; 2]| -> Value {
        json!(rows.iter().map(|r| vec![[r[0], r[1]], [r[2], r[3]]]).collect::<Vec<_>>())
    };
    // σ conjugates by a non-unitary J with J² = I, which does not commute with τ
    let cfg = json!({ "pair": { "name": "skewed", "custom": {
        "tau": { "conjugates": true, "transposes": true, "j": m([[1., 0., 0., 0.], [0., 0., 1., 0.]]), "sign": -1.0 },
        "sigma": { "conjugates": false, "transposes": false, "j": m([[1., 0., 1., 0.], [0., 0., -1., 0.]]), "sign": 1.0 },
        "basis_u0": [m([[0., 0., 0., 1.], [0., 1., 0., 0.]])],
        "basis_u1": [m([[0., 1., 0., 0.], [0., 0., 0., -1.]]), m([[0., 0., 1., 0.], [-1., 0., 0., 0.]])],
        "basis_a": [m([[0., 1., 0., 0.], [0., 0., 0., -1.]])]
    } } });
    let path = write_config(dir.path(), "custom.json", &cfg);
    let out = dir.path().join("out");
    let o = curvedflat(&["pair-check"], &path, &out);
    assert_eq!(o.status.code(), Some(1));
    let r = report(&out);
    assert_eq!(check(&r, "algebra.tau_sigma_commute")["passed"], false);
    assert!(String::from_utf8_lossy(&o.stdout).contains("FAIL algebra.tau_sigma_commute"));
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let even = four_pole(16, 1.0);
    let o = curvedflat(&["dress"], &write_config(dir.path(), "even.json", &even), &out);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("`grid`"));

    let mut even_j = four_pole(17, 1.0);
    even_j["flow"] = json!({ "b_index": 0, "j": 2, "t_range": [-0.1, 0.1], "samples": 5 });
    let o = curvedflat(&["flows"], &write_config(dir.path(), "j.json", &even_j), &out);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("flow.j"));

    let broken = dir.path().join("broken.json");
    fs::write(&broken, "{\n  \"pair\": {\n    \"name\": \"sun_son\" \"n\": 3\n  }\n}\n").unwrap();
    let o = curvedflat(&["pair-check"], &broken, &out);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 3"));

    let o = Command::new(bin()).args(["verify"]).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn dress_vacuum_writes_fields_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = curvedflat(&["dress"], &configs().join("vacuum_su3.json"), &out);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
    let r = report(&out);
    for name in ["vacuum.frame_closed_form", "vacuum.psi_closed_form", "vacuum.y_closed_form", "solution.vacuum_zero"] {
        assert_eq!(check(&r, name)["passed"], true, "{name}");
    }
    let manifest: Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    let files: Vec<&str> = manifest.as_array().unwrap().iter().map(|e| e["file"].as_str().unwrap()).collect();
    for f in ["f.csv", "factorization.json", "psi.csv", "report.json", "timings.json", "v.csv", "y.csv"] {
        assert!(files.contains(&f), "{f} missing from manifest");
    }
    for e in manifest.as_array().unwrap() {
        let bytes = fs::read(out.join(e["file"].as_str().unwrap())).unwrap();
        assert_eq!(e["sha256"].as_str().unwrap(), hex::encode(Sha256::digest(&bytes)));
        assert_eq!(e["bytes"].as_u64().unwrap(), bytes.len() as u64);
    }
    let v = fs::read_to_string(out.join("v.csv")).unwrap();
    let mut lines = v.lines();
    let header = lines.next().unwrap();
    assert!(header.starts_with("x1,x2,re_0_0,im_0_0,re_0_1"));
    assert_eq!(header.split(',').count(), 2 + 18);
    assert_eq!(lines.count(), 33 * 33);
}

#[test]
fn dress_four_pole_loop_gives_nonzero_solution() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg = write_config(dir.path(), "c.json", &four_pole(17, 0.8));
    let o = curvedflat(&["dress"], &cfg, &out);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
    let r = report(&out);
    assert!(check(&r, "solution.nonzero")["value"].as_f64().unwrap() > 1.0);
    assert!(check(&r, "factorization.product_identity")["value"].as_f64().unwrap() < 1e-9);
}

#[test]
fn strict_policy_exits_three_on_singular_nodes() {
    let dir = tempfile::tempdir().unwrap();
    let strict = configs().join("strict_singular.json");
    let out = dir.path().join("strict");
    let o = curvedflat(&["dress"], &strict, &out);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    let fact: Value = serde_json::from_str(&fs::read_to_string(out.join("factorization.json")).unwrap()).unwrap();
    assert!(!fact["holes"].as_array().unwrap().is_empty());
    assert!(out.join("manifest.json").exists());

    // the same grid under the lenient policy is a failed criterion, not a hard stop
    let mut cfg: Value = serde_json::from_str(&fs::read_to_string(&strict).unwrap()).unwrap();
    cfg["policy"] = json!("lenient");
    let lenient = write_config(dir.path(), "lenient.json", &cfg);
    let out = dir.path().join("lenient");
    let o = curvedflat(&["dress"], &lenient, &out);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(check(&report(&out), "factorization.complete")["passed"], false);
    // --strict upgrades the lenient config
    let o = curvedflat(&["dress", "--strict"], &lenient, &dir.path().join("flag"));
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn tampered_solution_fails_at_the_perturbed_node() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = four_pole(33, 0.8);
    cfg["verification"] = json!({ "convergence": false, "depth": 2 });
    let clean_path = write_config(dir.path(), "clean.json", &cfg);
    let clean = dir.path().join("clean");
    curvedflat(&["verify"], &clean_path, &clean);
    assert_eq!(check(&report(&clean), "q.recursion.level_0")["passed"], true);

    cfg["verification"]["tamper"] = json!({ "point": [0.31, -0.19], "amount": 1e-3 });
    let path = write_config(dir.path(), "tamper.json", &cfg);
    let out = dir.path().join("tampered");
    let o = curvedflat(&["verify"], &path, &out);
    assert_eq!(o.status.code(), Some(1));
    let r = report(&out);
    let c = check(&r, "q.recursion.level_0");
    assert_eq!(c["passed"], false);
    let loc: Vec<f64> = c["location"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
    assert!((loc[0] - 0.3).abs() < 1e-12 && (loc[1] + 0.2).abs() < 1e-12, "{loc:?}");
}

#[test]
fn verify_vacuum_config_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = curvedflat(&["verify"], &configs().join("vacuum_su3.json"), &out);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
    let r = report(&out);
    let names: Vec<&str> = r["checks"].as_array().unwrap().iter().map(|c| c["name"].as_str().unwrap()).collect();
    let mut unique = names.clone();
    unique.sort();
    unique.dedup();
    assert_eq!(unique.len(), names.len());
    assert!(names.contains(&"eds.involutive"));
}

#[test]
fn eds_report_characters() {
    let dir = tempfile::tempdir().unwrap();
    for (n, s) in [(2, vec![1, 1]), (3, vec![3, 3, 0]), (4, vec![6, 6, 0, 0])] {
        let out = dir.path().join(format!("eds{n}"));
        let o = curvedflat(&["eds-report"], &configs().join(format!("eds_su{n}.json")), &out);
        assert_eq!(o.status.code(), Some(0));
        let eds: Value = serde_json::from_str(&fs::read_to_string(out.join("eds.json")).unwrap()).unwrap();
        let got: Vec<i64> = eds["characters"].as_array().unwrap().iter().map(|x| x.as_i64().unwrap()).collect();
        assert_eq!(got, s);
        assert_eq!(eds["involutive"], true);
    }
}

#[test]
fn flows_and_export_write_time_resolved_csv() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = four_pole(17, 0.8);
    cfg["flow"] = json!({ "b_index": 0, "j": 3, "t_range": [-0.04, 0.04], "samples": 5 });
    cfg["verification"] = json!({ "convergence": false, "depth": 2 });
    let path = write_config(dir.path(), "flows.json", &cfg);

    let out = dir.path().join("flows");
    let o = curvedflat(&["flows"], &path, &out);
    assert!(matches!(o.status.code(), Some(0 | 1)));
    let r = report(&out);
    assert_eq!(check(&r, "flows.commuting")["passed"], true);
    let csv = fs::read_to_string(out.join("flow_v.csv")).unwrap();
    assert!(csv.starts_with("x1,x2,t,re_0_0,im_0_0"));
    assert_eq!(csv.lines().count(), 1 + 5 * 17 * 17);
    assert!(fs::read_to_string(out.join("conserved.csv")).unwrap().starts_with("t,integral"));

    let out = dir.path().join("export");
    let o = curvedflat(&["export", "--threads", "1"], &path, &out);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
    for f in ["v.csv", "psi.csv", "f.csv", "g.csv", "y.csv", "q_a1_0.csv", "q_a1_2.csv", "flow_v.csv"] {
        assert!(out.join(f).exists(), "{f}");
    }
}

#[test]
fn output_directory_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_dir = dir.path().join("from_config");
    let env_dir = dir.path().join("from_env");
    let flag_dir = dir.path().join("from_flag");
    let cfg = json!({ "pair": { "name": "sun_son", "n": 2 }, "output_dir": cfg_dir });
    let path = write_config(dir.path(), "c.json", &cfg);
    let run = |env: Option<&Path>, flag: Option<&Path>| {
        let mut c = Command::new(bin());
        c.args(["pair-check", "--config"]).arg(&path).env_remove("CURVEDFLAT_OUT");
        if let Some(e) = env {
            c.env("CURVEDFLAT_OUT", e);
        }
        if let Some(f) = flag {
            c.arg("--out").arg(f);
        }
        assert_eq!(c.output().unwrap().status.code(), Some(0));
    };
    run(None, None);
    assert!(cfg_dir.join("report.json").exists());
    run(Some(&env_dir), None);
    assert!(env_dir.join("report.json").exists());
    run(Some(&env_dir), Some(&flag_dir));
    assert!(flag_dir.join("report.json").exists());
}
