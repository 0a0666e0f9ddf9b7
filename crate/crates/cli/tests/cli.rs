use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const FAST: &str = "[optim]\ninit_epochs = 60\nrefine_epochs = 60\n[lemma]\nepochs = 40\n";

fn restage(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_restage"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = restage(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn fast_config(dir: &Path) -> String {
    let p = dir.join("fast.toml");
    fs::write(&p, FAST).unwrap();
    s(&p).to_string()
}

fn synth(dir: &Path, config: &str, seed: &str) -> std::path::PathBuf {
    let out = dir.join(format!("synth-{seed}"));
    ok(&["synth", "--config", config, "--seed", seed, "--out", s(&out)]);
    out
}

#[test]
fn restage_is_deterministic_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let config = fast_config(dir.path());
    let data = synth(dir.path(), &config, "3");
    let run = |name: &str, threads: &str| {
        let out = dir.path().join(name);
        ok(&[
            "restage",
            "--config",
            &config,
            "--seed",
            "3",
            "--threads",
            threads,
            "--out",
            s(&out),
            "--base",
            s(&data.join("base")),
            "--driving",
            s(&data.join("driving")),
            "--truth",
            s(&data.join("truth.json")),
        ]);
        out
    };
    let a = run("a", "1");
    let b = run("b", "2");
    for f in ["model.json", "restage-report.json", "metrics.json", "resolved-config.toml"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn synth_is_byte_identical_and_resolved_config_reproduces() {
    let dir = tempfile::tempdir().unwrap();
    let config = fast_config(dir.path());
    let a = synth(dir.path(), &config, "5");
    let b = dir.path().join("again");
    ok(&["synth", "--config", s(&a.join("resolved-config.toml")), "--out", s(&b)]);
    for f in [
        "truth.json",
        "resolved-config.toml",
        "base/manifest.json",
        "base/tracks.f32",
        "driving/tracks.f32",
        "driving/visibility.u8",
        "driving/labels.u8",
    ] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn fit_reaches_a_small_track_loss() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("fit.toml");
    fs::write(&config, "[optim]\ninit_epochs = 200\nrefine_epochs = 200\n").unwrap();
    let data = synth(dir.path(), s(&config), "1");
    let out = dir.path().join("fit");
    ok(&[
        "fit",
        "--config",
        s(&config),
        "--out",
        s(&out),
        "--bundle",
        s(&data.join("base")),
        "--pgm",
    ]);
    let report: serde_json::Value = serde_json::from_slice(&fs::read(out.join("fit-report.json")).unwrap()).unwrap();
    let stages = report["stages"].as_array().unwrap();
    let track = stages.last().unwrap()["final"]["track"].as_f64().unwrap();
    assert!(track < 0.02, "final track loss {track}");
    let pgm = fs::read_to_string(out.join("depth-canonical.pgm")).unwrap();
    let mut lines = pgm.lines();
    assert_eq!(lines.next(), Some("P2"));
    assert_eq!(lines.next(), Some("96 96"));
    assert_eq!(lines.next(), Some("65535"));
    assert_eq!(lines.count(), 96);
}

#[test]
fn unknown_config_key_exits_2_naming_it() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[optim]\nstep_sise = 0.1\n").unwrap();
    let out = restage(&["gradcheck", "--config", s(&bad), "--out", s(&dir.path().join("g"))]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.contains("step_sise"), "{err}");
}

#[test]
fn runtime_errors_exit_1_on_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let out = restage(&[
        "fit",
        "--out",
        s(&dir.path().join("f")),
        "--bundle",
        s(&dir.path().join("missing")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error[io]:"), "{err}");
}

#[test]
fn gradcheck_and_lemma_write_reports() {
    let dir = tempfile::tempdir().unwrap();
    let config = fast_config(dir.path());
    let g = dir.path().join("g");
    let line = ok(&["gradcheck", "--seed", "4", "--out", s(&g)]);
    let worst: f64 = line.trim().rsplit(' ').next().unwrap().parse().unwrap();
    assert!(worst <= 1e-4, "{line}");
    assert!(g.join("gradcheck.json").exists());

    let data = synth(dir.path(), &config, "2");
    let l = dir.path().join("l");
    ok(&[
        "lemma",
        "--config",
        &config,
        "--seed",
        "2",
        "--out",
        s(&l),
        "--base",
        s(&data.join("base")),
        "--driving",
        s(&data.join("driving")),
    ]);
    let report: serde_json::Value = serde_json::from_slice(&fs::read(l.join("lemma.json")).unwrap()).unwrap();
    assert_eq!(report["pair_count"].as_u64(), Some(30));
    assert!(report["sigma2"].as_f64().unwrap() >= 0.0);
}
