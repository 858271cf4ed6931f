use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use ldct_ffi::*;

const TINY: &str = r#"
seed = 3
[geometry]
detector_rows = 4
detector_cols = 64
channel_angle_step_rad = 0.0077
row_spacing_iso_mm = 4.0
views_per_rotation = 120
table_feed_mm = 16.0
slice_thickness_mm = 4.0
[acquisition]
views = 360
[phantom]
kind = "inserts"
[recon]
image_size = 32
pixel_mm = 6.0
slice_spacing_mm = 4.0
f = 1
targets = 2
[denoiser]
mode = "baseline"
"#;

fn tiny_config(dir: &Path) -> PathBuf {
    let p = dir.join("tiny.toml");
    std::fs::write(&p, TINY).unwrap();
    p
}

fn last_error() -> String {
    let p = ldct_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn load(path: &Path, sets: &[&str]) -> (LdctStatus, *mut LdctConfig) {
    let c_path = CString::new(path.to_str().unwrap()).unwrap();
    let owned: Vec<CString> = sets.iter().map(|s| CString::new(*s).unwrap()).collect();
    let ptrs: Vec<*const std::ffi::c_char> = owned.iter().map(|s| s.as_ptr()).collect();
    let mut cfg = ptr::null_mut();
    let st = unsafe { ldct_config_load(c_path.as_ptr(), ptrs.as_ptr(), ptrs.len(), &mut cfg) };
    (st, cfg)
}

#[test]
fn version_and_null_handling() {
    let v = unsafe { CStr::from_ptr(ldct_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
    assert_eq!(unsafe { ldct_config_default(ptr::null_mut()) }, LdctStatus::InvalidArgument);
    assert!(last_error().contains("null"));
    assert_eq!(unsafe { ldct_simulation_views(ptr::null()) }, 0);
    unsafe {
        ldct_config_free(ptr::null_mut());
        ldct_run_free(ptr::null_mut());
    }
}

#[test]
fn config_errors_map_to_status() {
    let dir = tempfile::tempdir().unwrap();
    let path = tiny_config(dir.path());
    let (st, cfg) = load(&path, &["dose.fraction=1.5"]);
    assert_eq!(st, LdctStatus::Config);
    assert!(cfg.is_null());
    assert!(last_error().contains("dose.fraction"), "{}", last_error());

    let (st, cfg) = load(&path, &[]);
    assert_eq!(st, LdctStatus::Ok);
    let mut small = [0 as std::ffi::c_char; 10];
    assert_eq!(unsafe { ldct_config_hash(cfg, small.as_mut_ptr(), small.len()) }, LdctStatus::InvalidArgument);
    let mut buf = [0 as std::ffi::c_char; 65];
    assert_eq!(unsafe { ldct_config_hash(cfg, buf.as_mut_ptr(), buf.len()) }, LdctStatus::Ok);
    let hash = unsafe { CStr::from_ptr(buf.as_ptr()) }.to_str().unwrap().to_string();
    assert_eq!(hash.len(), 64);
    assert!(ldct_last_error().is_null());
    unsafe { ldct_config_free(cfg) };
}

#[test]
fn learned_mode_without_checkpoint_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = tiny_config(dir.path());
    let (st, cfg) = load(&path, &["denoiser.mode=\"mpd\""]);
    assert_eq!(st, LdctStatus::Ok);
    let mut sim = ptr::null_mut();
    assert_eq!(unsafe { ldct_simulate(cfg, &mut sim) }, LdctStatus::Ok);
    let mut run = ptr::null_mut();
    assert_eq!(unsafe { ldct_run(cfg, sim, &mut run) }, LdctStatus::Config);
    assert!(last_error().contains("mpd"), "{}", last_error());
    unsafe {
        ldct_simulation_free(sim);
        ldct_config_free(cfg);
    }
}

#[test]
fn baseline_run_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = tiny_config(dir.path());
    let (st, cfg) = load(&path, &[]);
    assert_eq!(st, LdctStatus::Ok);
    let mut sim = ptr::null_mut();
    assert_eq!(unsafe { ldct_simulate(cfg, &mut sim) }, LdctStatus::Ok);
    assert_eq!(unsafe { ldct_simulation_views(sim) }, 360);
    let mut run = ptr::null_mut();
    assert_eq!(unsafe { ldct_run(cfg, sim, &mut run) }, LdctStatus::Ok, "{}", last_error());
    let (k, n) = unsafe { (ldct_run_slices(run), ldct_run_image_size(run)) };
    assert_eq!((k, n), (2, 32));
    let mut refined = vec![0f32; k * n * n];
    let mut reference = vec![0f32; k * n * n];
    unsafe {
        assert_eq!(ldct_run_copy_volume(run, LdctVolume::Refined, refined.as_mut_ptr(), refined.len()), LdctStatus::Ok);
        assert_eq!(ldct_run_copy_volume(run, LdctVolume::Reference, reference.as_mut_ptr(), reference.len()), LdctStatus::Ok);
        assert_eq!(ldct_run_copy_volume(run, LdctVolume::Noisy, refined.as_mut_ptr(), 3), LdctStatus::InvalidArgument);
    }
    // center of the water body, and air in the corner
    let center = reference[n * n / 2 + n / 2];
    assert!(center.abs() < 60.0, "water reads {center}");
    assert!(reference[0] < -900.0, "corner reads {}", reference[0]);
    unsafe {
        ldct_run_free(run);
        ldct_simulation_free(sim);
        ldct_config_free(cfg);
    }
}

#[test]
fn kernel_and_noise_prior() {
    let mut taps = vec![0.0; 7];
    assert_eq!(unsafe { ldct_shepp_logan_kernel(7, 1.0, taps.as_mut_ptr()) }, LdctStatus::Ok);
    // h(0) = 2/(π² d²)
    assert!((taps[3] - 2.0 / std::f64::consts::PI.powi(2)).abs() < 1e-12);
    assert_eq!(unsafe { ldct_shepp_logan_kernel(6, 1.0, taps.as_mut_ptr()) }, LdctStatus::InvalidArgument);

    let p = [0.0, 1.0, 2.5];
    let nl = [2.5e4; 3];
    let nf = [1e5; 3];
    let mut phi = [0.0; 3];
    assert_eq!(unsafe { ldct_noise_prior(p.as_ptr(), nl.as_ptr(), nf.as_ptr(), 3, phi.as_mut_ptr()) }, LdctStatus::Ok);
    for k in 0..3 {
        let expect = ((1.0 / nl[k] - 1.0 / nf[k]) * p[k].exp()).sqrt();
        assert!((phi[k] - expect).abs() <= 1e-12 * expect);
    }
}

/// Compiles `tests/c/smoke.c` against the generated header and static library.
#[test]
fn c_program_links_and_runs() {
    let Some(cc) = ["cc", "gcc", "clang"].into_iter().find(|c| Command::new(c).arg("--version").output().is_ok()) else {
        eprintln!("no C compiler found; skipping");
        return;
    };
    let manifest = Path::new(env!("CARGO_MANIFEST_DIR"));
    // target/<profile>/deps/<test binary>
    let exe = std::env::current_exe().unwrap();
    let profile_dir = exe.parent().unwrap().parent().unwrap();
    let lib = profile_dir.join("libldct_ffi.a");
    assert!(lib.exists(), "static library missing at {}", lib.display());
    let dir = tempfile::tempdir().unwrap();
    let bin = dir.path().join("smoke");
    let out = Command::new(cc)
        .arg(manifest.join("tests/c/smoke.c"))
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let cfg = tiny_config(dir.path());
    let run = Command::new(&bin).arg(&cfg).output().unwrap();
    assert!(run.status.success(), "exit {:?}: {}", run.status.code(), String::from_utf8_lossy(&run.stderr));
    let text = String::from_utf8_lossy(&run.stdout);
    let fields: Vec<&str> = text.split_whitespace().collect();
    assert_eq!(fields[0], env!("CARGO_PKG_VERSION"));
    assert_eq!(fields[1], "2048");
    assert_eq!(fields[2].len(), 64);
}
