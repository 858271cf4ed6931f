mod common;

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use common::TINY_TOML;

struct Workspace {
    dir: tempfile::TempDir,
    config: PathBuf,
}

impl Workspace {
    fn new(mode: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let config = dir.path().join("tiny.toml");
        let text = TINY_TOML.replace("mode = \"baseline\"", &format!("mode = \"{mode}\""));
        std::fs::write(&config, text).unwrap();
        Self { dir, config }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn ldct(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_ldct"))
            .arg("--config")
            .arg(&self.config)
            .args(args)
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> Output {
        let out = self.ldct(args);
        assert!(out.status.success(), "ldct {args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
        out
    }
}

fn exists(p: &Path) -> bool {
    p.exists() || {
        eprintln!("missing {}", p.display());
        false
    }
}

#[test]
fn baseline_workflow_writes_artifacts_and_reports() {
    let ws = Workspace::new("baseline");
    ws.ok(&["simulate"]);
    for f in ["sim/low.json", "sim/low.f32", "sim/clean.json", "sim/config.json", "sim/inserts.json"] {
        assert!(exists(&ws.path(&format!("ldct-out/{f}"))));
    }
    ws.ok(&["run", "--keep-intermediates"]);
    for f in ["refined", "noisy", "reference"] {
        assert!(exists(&ws.path(&format!("ldct-out/run/{f}.json"))));
    }
    assert!(std::fs::read_dir(ws.path("ldct-out/run/intermediates")).unwrap().count() >= 8);
    let report = std::fs::read_to_string(ws.path("ldct-out/run/report.csv")).unwrap();
    assert!(report.starts_with("metric,label,x,value,std"));
    assert!(report.contains("mse,raw_hu"));
    assert!(report.contains("meta,mode,,baseline"));

    let m = ws.path("m.csv");
    ws.ok(&[
        "metrics",
        ws.path("ldct-out/run/refined").to_str().unwrap(),
        "--reference",
        ws.path("ldct-out/run/reference").to_str().unwrap(),
        "-o",
        m.to_str().unwrap(),
    ]);
    let metrics = std::fs::read_to_string(&m).unwrap();
    // the persisted f32 volume gives the same numbers up to rounding
    let mse = |t: &str| -> f64 { t.lines().find(|l| l.starts_with("mse,raw_hu")).unwrap().split(',').nth(3).unwrap().parse().unwrap() };
    assert!((mse(&metrics) / mse(&report) - 1.0).abs() < 1e-6);

    let half_cfg = ["--set", "dose.fraction=0.5", "--set", "output.dir=\"half\""];
    ws.ok(&[&half_cfg[..], &["simulate"]].concat());
    ws.ok(&[&half_cfg[..], &["run"]].concat());
    let half = ws.path("half/run/report.csv");
    let rep_dir = ws.path("rep");
    ws.ok(&[
        "report",
        ws.path("ldct-out/run/report.csv").to_str().unwrap(),
        ws.path("ldct-out/run/report_noisy.csv").to_str().unwrap(),
        half.to_str().unwrap(),
        "-o",
        rep_dir.to_str().unwrap(),
    ]);
    let summary = std::fs::read_to_string(rep_dir.join("summary.csv")).unwrap();
    assert!(summary.starts_with("input,dose_fraction,metric,label,value,std"));
    assert!(summary.contains("baseline refined @ 0.25"));
    assert!(summary.contains("baseline refined @ 0.5"));
    assert!(exists(&rep_dir.join("dose_mse.svg")));
    assert!(std::fs::read_to_string(rep_dir.join("dose_mse.svg")).unwrap().starts_with("<svg"));
}

#[test]
fn two_stage_training_resume_and_run() {
    let ws = Workspace::new("mpd+mir");
    let out = ws.ldct(&["train", "--stage", "mir"]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("MPD checkpoint"));

    ws.ok(&["train", "--stage", "mpd"]);
    assert!(exists(&ws.path("models/mpd.json")));
    ws.ok(&["train", "--stage", "mir"]);
    ws.ok(&["--set", "train.mir.steps=9", "train", "--stage", "mir", "--resume"]);
    let csv = std::fs::read_to_string(ws.path("ldct-out/train/mir_loss.csv")).unwrap();
    let steps: Vec<usize> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(steps, (1..=9).collect::<Vec<_>>());
    assert!(exists(&ws.path("ldct-out/train/mir_loss.svg")));

    ws.ok(&["simulate"]);
    ws.ok(&["run"]);
    let report = std::fs::read_to_string(ws.path("ldct-out/run/report.csv")).unwrap();
    assert!(report.contains("meta,mode,,mpd+mir"));
    assert!(report.contains("meta,mir_mode,,decoupled"));
}

#[test]
fn error_exit_codes() {
    let ws = Workspace::new("baseline");
    // run before simulate: the simulation artifacts are missing
    let out = ws.ldct(&["run"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error: "));

    let out = ws.ldct(&["--set", "dose.fraction=2", "simulate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("dose.fraction"));

    std::fs::write(&ws.config, "[geometry]\ndetector_rows = -3\n").unwrap();
    assert_eq!(ws.ldct(&["simulate"]).status.code(), Some(2));

    let ws = Workspace::new("mpd+mir");
    ws.ok(&["simulate"]);
    let out = ws.ldct(&["run"]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}
