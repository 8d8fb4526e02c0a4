use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const FAST_CODER: &str = r#"coder={"kind":"swomp","k_max":4}"#;

fn mmdl(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mmdl"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "status {:?}\nstdout: {}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn small_dataset(dir: &Path) {
    ok(&mmdl(
        dir,
        &[
            "generate",
            "--out",
            "data",
            "--seed",
            "3",
            "--override",
            "n_locations=4",
        ],
    ));
}

fn trace(path: &Path) -> Vec<f64> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records().map(|rec| rec.unwrap()[1].parse().unwrap()).collect()
}

#[test]
fn generate_defaults_and_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&mmdl(dir.path(), &["generate", "--out", "a", "--override", "n_locations=2"]));
    assert!(out.contains("wrote 2 locations"), "{out}");
    let m = json(&dir.path().join("a/manifest.json"));
    assert_eq!(m["config"]["training"]["frames"], 60);
    assert_eq!(m["measurements_per_location"], 120);
    assert!(dir.path().join("a/channels/loc_001").is_dir());

    ok(&mmdl(dir.path(), &["generate", "--out", "b", "--override", "n_locations=2", "--override", "training.N_rep=10"]));
    let m = json(&dir.path().join("b/manifest.json"));
    assert_eq!(m["config"]["training"]["n_rep"], 10);
    assert!((m["effective_snr_db"].as_f64().unwrap() - 10.0).abs() < 1e-12);
}

#[test]
fn generate_is_reproducible_for_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["x", "y"] {
        ok(&mmdl(dir.path(), &["generate", "--out", name, "--seed", "9", "--override", "n_locations=2"]));
    }
    let a = std::fs::read(dir.path().join("x/manifest.json")).unwrap();
    let b = std::fs::read(dir.path().join("y/manifest.json")).unwrap();
    assert_eq!(a, b);
    let entries = |d: &str| {
        let mut v: Vec<_> = std::fs::read_dir(dir.path().join(d))
            .unwrap()
            .map(|e| e.unwrap().path())
            .filter(|p| p.is_file())
            .collect();
        v.sort();
        v
    };
    for (p, q) in entries("x").iter().zip(entries("y")) {
        assert_eq!(std::fs::read(p).unwrap(), std::fs::read(q).unwrap(), "{}", p.display());
    }
}

#[test]
fn malformed_config_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.json"), r#"{"training": {"frames": "many"}}"#).unwrap();
    let out = mmdl(dir.path(), &["generate", "--config", "bad.json"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("training.frames"), "{err}");

    std::fs::write(dir.path().join("broken.json"), "{not json").unwrap();
    assert_eq!(mmdl(dir.path(), &["generate", "--config", "broken.json"]).status.code(), Some(2));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(mmdl(dir.path(), &["frobnicate"]).status.code(), Some(1));
    assert_eq!(mmdl(dir.path(), &["generate", "--override", "nope=1"]).status.code(), Some(1));
    assert_eq!(mmdl(dir.path(), &["generate", "--override", "novalue"]).status.code(), Some(1));
    assert_eq!(mmdl(dir.path(), &["learn", "--data", "missing", "--method", "codl"]).status.code(), Some(2));
    assert_eq!(mmdl(dir.path(), &["estimate", "--data", "missing", "--dict", "iarm"]).status.code(), Some(2));
    assert_eq!(mmdl(dir.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn learn_resume_and_estimate() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_dataset(d);

    let out = ok(&mmdl(d, &["learn", "--data", "data", "--method", "sedl", "--out", "sedl", "--override", FAST_CODER, "--override", "max_iter=4", "--override", "rel_tol=0"]));
    assert!(out.contains("sedl dictionary"), "{out}");
    for f in ["dr.csv", "dt.csv", "state.json", "trace.csv", "manifest.json"] {
        assert!(d.join("sedl").join(f).is_file(), "{f}");
    }
    let t = trace(&d.join("sedl/trace.csv"));
    assert_eq!(t.len(), 5);
    assert!(t.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12)), "{t:?}");
    let m = json(&d.join("sedl/manifest.json"));
    assert_eq!(m["iterations"], 4);
    assert_eq!(m["warning"], !m["converged"].as_bool().unwrap());

    ok(&mmdl(d, &["learn", "--data", "data", "--method", "sedl", "--out", "sedl", "--override", FAST_CODER, "--override", "max_iter=2", "--override", "rel_tol=0", "--resume"]));
    let resumed = trace(&d.join("sedl/trace.csv"));
    assert_eq!(resumed.len(), t.len() + 2);
    assert_eq!(json(&d.join("sedl/manifest.json"))["iterations"], 6);
    assert_eq!(&resumed[..t.len()], &t[..]);
    assert!(resumed.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12)));

    let wrong = mmdl(d, &["learn", "--data", "data", "--method", "codl", "--out", "sedl", "--resume"]);
    assert_eq!(wrong.status.code(), Some(2));

    ok(&mmdl(d, &["learn", "--data", "data", "--method", "codl", "--out", "codl", "--override", FAST_CODER, "--override", "max_iter=3"]));
    assert!(d.join("codl/trace.csv").is_file());

    for (dict, out) in [("iarm", "e_iarm"), ("sedl", "e_sedl"), ("codl", "e_codl")] {
        let text = ok(&mmdl(d, &["estimate", "--data", "data", "--dict", dict, "--out", out]));
        assert!(text.contains("mean NMSE"), "{text}");
        let r = json(&d.join(out).join("estimate.json"));
        assert_eq!(r["n_locations"], 4);
        let nmse = r["mean_nmse"].as_f64().unwrap();
        assert!(nmse.is_finite() && nmse > 0.0 && nmse < 1.0, "{dict}: {nmse}");
        assert!(d.join(out).join("estimates.csv").is_file());
    }
}

#[test]
fn crlb_reports_bound_and_conditioning() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_dataset(d);
    let text = ok(&mmdl(d, &["crlb", "--data", "data", "--location", "2", "--out", "bound"]));
    assert!(text.starts_with("crlb "), "{text}");
    assert!(text.contains("condition_number"));
    let r = json(&d.join("bound/crlb.json"));
    assert!(r["crlb"].as_f64().unwrap() > 0.0);
    assert!(!r["blocks"].as_array().unwrap().is_empty());
    assert_eq!(mmdl(d, &["crlb", "--data", "data", "--location", "4"]).status.code(), Some(2));
}

#[test]
fn experiment_writes_tables() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(
        d.join("exp.json"),
        r#"{"n_train": 6, "frames": [20], "realizations": 1, "trials": 2,
            "cases": [{"solver": "swomp", "dictionary": "iarm"}, {"solver": "swomp", "dictionary": "sedl"}],
            "learn": {"max_iter": 2}}"#,
    )
    .unwrap();
    let text = ok(&mmdl(d, &["experiment", "--config", "exp.json", "--threads", "2", "--out", "res"]));
    assert!(text.contains("swomp+sedl"), "{text}");
    let mut r = csv::Reader::from_path(d.join("res/results.csv")).unwrap();
    assert_eq!(r.records().count(), 4);
    for f in ["summary.json", "learning.json", "config.json"] {
        assert!(d.join("res").join(f).is_file(), "{f}");
    }
}
