mod common;

use std::path::Path;

use common::{toy_config_path, TINY_TOML};
use ldct_core::config::{DenoiseMode, PipelineConfig};
use ldct_core::Error;

fn tiny(overrides: &[&str]) -> Result<PipelineConfig, Error> {
    let o: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    PipelineConfig::from_toml(TINY_TOML, "tiny.toml", Path::new("/work"), &o)
}

#[test]
fn shipped_toy_config_is_valid() {
    let c = PipelineConfig::load(&toy_config_path(), &[]).unwrap();
    assert_eq!(c.denoiser.mode, DenoiseMode::MpdMir);
    assert_eq!(c.recon.f, 1);
    assert!((c.dose.fraction - 0.25).abs() < 1e-12);
    assert!(c.denoiser.mpd_checkpoint.is_absolute());
}

#[test]
fn relative_paths_resolve_against_the_config_directory() {
    let c = tiny(&[]).unwrap();
    assert_eq!(c.output.dir, Path::new("/work/ldct-out"));
    assert_eq!(c.denoiser.mir_checkpoint, Path::new("/work/models/mir.json"));
}

#[test]
fn overrides_change_values_and_the_hash() {
    let a = tiny(&[]).unwrap();
    let b = tiny(&["dose.fraction=0.5", "denoiser.mode=\"mpd+mir\""]).unwrap();
    assert_eq!(b.dose.fraction, 0.5);
    assert_eq!(b.denoiser.mode, DenoiseMode::MpdMir);
    assert_ne!(a.hash(), b.hash());
    let c = tiny(&["output.dir=\"/elsewhere\""]).unwrap();
    assert_eq!(a.hash(), c.hash());
    assert_eq!(a.hash().len(), 64);
    assert_eq!(a.hash(), tiny(&[]).unwrap().hash());
}

#[test]
fn invalid_values_name_the_key_and_line() {
    let text = TINY_TOML.replace("fraction = 0.25", "fraction = 1.5");
    let e = PipelineConfig::from_toml(&text, "tiny.toml", Path::new("/w"), &[]).unwrap_err();
    let msg = e.to_string();
    let line = text.lines().position(|l| l.starts_with("fraction = 1.5")).unwrap() + 1;
    assert!(msg.contains(&format!("tiny.toml:{line}: dose.fraction")), "{msg}");
    assert_eq!(e.exit_code(), 2);

    let e = tiny(&["recon.targets=0"]).unwrap_err().to_string();
    assert!(e.contains("--set: recon.targets"), "{e}");
}

#[test]
fn unknown_keys_and_bad_syntax_are_config_errors() {
    for text in [
        format!("{TINY_TOML}\n[extra]\nx = 1\n"),
        TINY_TOML.replace("[recon]", "[recon]\nbogus = 3"),
        "seed = ".to_string(),
    ] {
        let e = PipelineConfig::from_toml(&text, "t.toml", Path::new("/w"), &[]).unwrap_err();
        assert!(matches!(e, Error::Config(_)), "{e}");
    }
    assert!(tiny(&["no_equals_sign"]).is_err());
    assert!(tiny(&["geometry.detector_rows=0"]).is_err());
    assert!(tiny(&["geometry.table_feed_mm=0"]).is_err());
}

#[test]
fn target_positions_are_centered_on_the_acquisition() {
    let c = tiny(&["recon.targets=3"]).unwrap();
    let z = c.target_z();
    let (a, b) = c.source_z_range();
    assert_eq!(z.len(), 3);
    assert!((z[1] - 0.5 * (a + b)).abs() < 1e-9);
    assert!((z[2] - z[1] - c.recon.slice_spacing_mm).abs() < 1e-12);
}

#[test]
fn missing_checkpoints_are_reported() {
    let c = tiny(&[]).unwrap();
    let e = c.require_checkpoints(true, false).unwrap_err().to_string();
    assert!(e.contains("denoiser.mpd_checkpoint"), "{e}");
    assert!(c.require_checkpoints(false, false).is_ok());
}
