//! Photon-noise model in the line-integral domain.
//!
//! Measurements follow `p = −ln(N/N0)`; quantum noise is injected with the
//! Gaussian approximation `p_n = p_c + x/√(N0·e^{−p_c})`. Lower doses are
//! synthesized from full-dose data by adding the variance difference
//! `(1/N_l0 − 1/N_f0)·e^{p_f}`, and the deterministic amplitude of that
//! difference (evaluated at the low-dose data) is the noise prior fed to the
//! projection denoiser.

use ndarray::{Array1, Array2, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::ScannerGeometry;
use crate::projection::{ProjectionFrame, ProjectionStream};

/// Default photon-starvation floor, in counts.
pub const STARVATION_FLOOR: f64 = 1.0;

/// Salts separating the independent noise realizations of one run.
pub const FULL_DOSE_STREAM: u64 = 0x0f11_d05e;
pub const LOW_DOSE_STREAM: u64 = 0x10d0_5e00;

/// Converts received counts to a line integral. Counts at or below zero are
/// clamped to `floor`; the flag reports the clamp.
pub fn counts_to_line_integral(n: f64, n0: f64, floor: f64) -> (f64, bool) {
    let clamped = !(n > 0.0);
    let n = if clamped { floor } else { n };
    (-(n / n0).ln(), clamped)
}

/// Per-frame generator derived from `(seed, salt, view)` so frames can be
/// generated in any order.
pub fn frame_rng(seed: u64, salt: u64, view: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ salt.rotate_left(17));
    rng.set_stream(view as u64);
    rng
}

fn check_same(a: &Array2<f64>, b: &Array2<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::shape(&[a.dim().0, a.dim().1], &[b.dim().0, b.dim().1]));
    }
    Ok(())
}

fn check_dose_pair(n_l0: &Array2<f64>, n_f0: &Array2<f64>) -> Result<()> {
    check_same(n_l0, n_f0)?;
    for (&l, &f) in n_l0.iter().zip(n_f0.iter()) {
        if !(l > 0.0) {
            return Err(Error::InvalidArgument(format!("low-dose N0 must be > 0, got {l}")));
        }
        if l > f {
            return Err(Error::InvalidArgument(format!(
                "low-dose N0 {l} exceeds full-dose N0 {f}; dose increases are not simulated"
            )));
        }
    }
    Ok(())
}

/// `p_c + x/√(n0·e^{−p_c})` with i.i.d. unit normals from `rng`.
pub fn inject_noise<R: Rng>(p_c: &Array2<f64>, n0: &Array2<f64>, rng: &mut R) -> Result<Array2<f64>> {
    check_same(p_c, n0)?;
    if n0.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::InvalidArgument("n0 must be > 0".into()));
    }
    let mut out = Array2::zeros(p_c.dim());
    Zip::from(&mut out).and(p_c).and(n0).for_each(|o, &p, &n| {
        let x: f64 = rng.sample(StandardNormal);
        *o = p + x / (n * (-p).exp()).sqrt();
    });
    Ok(out)
}

/// Synthesizes a low-dose frame from a full-dose one.
pub fn simulate_low_dose<R: Rng>(
    p_f: &Array2<f64>,
    n_f0: &Array2<f64>,
    n_l0: &Array2<f64>,
    rng: &mut R,
) -> Result<Array2<f64>> {
    check_same(p_f, n_f0)?;
    check_dose_pair(n_l0, n_f0)?;
    let mut out = Array2::zeros(p_f.dim());
    Zip::from(&mut out)
        .and(p_f)
        .and(n_f0)
        .and(n_l0)
        .for_each(|o, &p, &nf, &nl| {
            let x: f64 = rng.sample(StandardNormal);
            let var = (1.0 / nl - 1.0 / nf) * p.exp();
            *o = p + var.sqrt() * x;
        });
    Ok(out)
}

/// Deterministic noise amplitude Φ of one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct NoisePriorMap {
    pub phi: Array2<f64>,
    pub n_l0: Array2<f64>,
    pub n_f0: Array2<f64>,
}

pub fn noise_prior(p_l: &Array2<f64>, n_l0: &Array2<f64>, n_f0: &Array2<f64>) -> Result<NoisePriorMap> {
    check_same(p_l, n_l0)?;
    check_dose_pair(n_l0, n_f0)?;
    let mut phi = Array2::zeros(p_l.dim());
    Zip::from(&mut phi)
        .and(p_l)
        .and(n_l0)
        .and(n_f0)
        .for_each(|o, &p, &nl, &nf| *o = ((1.0 / nl - 1.0 / nf) * p.exp()).sqrt());
    Ok(NoisePriorMap {
        phi,
        n_l0: n_l0.clone(),
        n_f0: n_f0.clone(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DoseKind {
    Uniform,
    /// `cos(γ)^exponent` across columns.
    Bowtie { exponent: f64 },
    /// Per-view scale swinging between `min` and `max` with table position.
    AecSine { min: f64, max: f64, period_mm: f64 },
}

/// Incident-count field `n0(view, r, c) = base_n0 · per_view[view] · per_channel[r, c]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DoseProfile {
    pub per_view_scale: Array1<f64>,
    pub per_channel_scale: Array2<f64>,
    pub base_n0: f64,
    pub first_view: usize,
}

impl DoseProfile {
    pub fn n0_frame(&self, view: usize) -> Array2<f64> {
        let s = self.base_n0 * self.per_view_scale[view - self.first_view];
        self.per_channel_scale.mapv(|c| s * c)
    }

    /// Elementwise product of two profiles over the same views.
    pub fn combine(&self, other: &DoseProfile) -> Result<DoseProfile> {
        if self.per_view_scale.len() != other.per_view_scale.len()
            || self.per_channel_scale.dim() != other.per_channel_scale.dim()
            || self.first_view != other.first_view
        {
            return Err(Error::InvalidArgument("dose profiles cover different views".into()));
        }
        Ok(DoseProfile {
            per_view_scale: &self.per_view_scale * &other.per_view_scale,
            per_channel_scale: &self.per_channel_scale * &other.per_channel_scale,
            base_n0: self.base_n0 * other.base_n0,
            first_view: self.first_view,
        })
    }
}

pub fn make_dose_profile(
    geom: &ScannerGeometry,
    kind: &DoseKind,
    base_n0: f64,
    first_view: usize,
    views: usize,
) -> Result<DoseProfile> {
    if !(base_n0 > 0.0) {
        return Err(Error::InvalidArgument("base_n0 must be > 0".into()));
    }
    let shape = (geom.detector_rows, geom.detector_cols);
    let mut per_view = Array1::ones(views);
    let mut per_channel = Array2::ones(shape);
    match *kind {
        DoseKind::Uniform => {}
        DoseKind::Bowtie { exponent } => {
            if !(exponent >= 0.0) {
                return Err(Error::InvalidArgument("bowtie exponent must be >= 0".into()));
            }
            per_channel = Array2::from_shape_fn(shape, |(_, c)| geom.fan_angle(c as f64).cos().powf(exponent));
        }
        DoseKind::AecSine { min, max, period_mm } => {
            if !(min > 0.0) {
                return Err(Error::InvalidArgument(format!("AEC min scale must be > 0, got {min}")));
            }
            if !(max >= min && period_mm > 0.0) {
                return Err(Error::InvalidArgument("AEC requires max >= min and period_mm > 0".into()));
            }
            per_view = Array1::from_shape_fn(views, |k| {
                let z = geom.source_z((first_view + k) as f64);
                let phase = 2.0 * std::f64::consts::PI * z / period_mm;
                min + (max - min) * 0.5 * (1.0 + phase.sin())
            });
        }
    }
    Ok(DoseProfile {
        per_view_scale: per_view,
        per_channel_scale: per_channel,
        base_n0,
        first_view,
    })
}

/// Adds full-dose noise to a clean stream and records `n0` on every frame.
pub fn inject_noise_stream(clean: &ProjectionStream, dose: &DoseProfile, seed: u64) -> Result<ProjectionStream> {
    let frames = clean
        .frames
        .par_iter()
        .map(|f| {
            let n0 = dose.n0_frame(f.view);
            let mut rng = frame_rng(seed, FULL_DOSE_STREAM, f.view);
            let data = inject_noise(&f.data, &n0, &mut rng)?;
            Ok(ProjectionFrame {
                data,
                n0: Some(n0),
                ..f.clone()
            })
        })
        .collect::<Result<Vec<_>>>()?;
    ProjectionStream::new(frames, clean.geometry.clone())
}

/// Low-dose version of a full-dose stream at `fraction` of its incident counts.
///
/// The unit-normal realization depends only on `(seed, view)`, so sweeps over
/// dose fractions share one realization scaled by the dose-dependent amplitude.
pub fn simulate_low_dose_stream(full: &ProjectionStream, fraction: f64, seed: u64) -> Result<ProjectionStream> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!("dose fraction must be in (0, 1], got {fraction}")));
    }
    let frames = full
        .frames
        .par_iter()
        .map(|f| {
            let n_f0 = f
                .n0
                .as_ref()
                .ok_or_else(|| Error::stage("simulate", format!("view {} has no N0 map", f.view)))?;
            let n_l0 = n_f0.mapv(|v| v * fraction);
            let mut rng = frame_rng(seed, LOW_DOSE_STREAM, f.view);
            let data = simulate_low_dose(&f.data, n_f0, &n_l0, &mut rng)?;
            Ok(ProjectionFrame {
                data,
                n0: Some(n_l0),
                ..f.clone()
            })
        })
        .collect::<Result<Vec<_>>>()?;
    ProjectionStream::new(frames, full.geometry.clone())
}

/// Φ for every frame of a low-dose stream against its full-dose counterpart.
pub fn prior_stream(low: &ProjectionStream, full: &ProjectionStream) -> Result<Vec<Array2<f64>>> {
    if low.len() != full.len() {
        return Err(Error::shape(&[full.len()], &[low.len()]));
    }
    low.frames
        .par_iter()
        .zip(full.frames.par_iter())
        .map(|(l, f)| {
            let missing = || Error::stage("noise_prior", format!("view {} lacks N0", l.view));
            let n_l0 = l.n0.as_ref().ok_or_else(missing)?;
            let n_f0 = f.n0.as_ref().ok_or_else(missing)?;
            Ok(noise_prior(&l.data, n_l0, n_f0)?.phi)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn filled(v: f64, n: usize) -> Array2<f64> {
        Array2::from_elem((n, n), v)
    }

    #[test]
    fn counts_examples() {
        assert_eq!(counts_to_line_integral(1e5, 1e5, 1.0), (0.0, false));
        let (p, _) = counts_to_line_integral(1e5 * (-1f64).exp(), 1e5, 1.0);
        assert!((p - 1.0).abs() < 1e-14);
        let (p, _) = counts_to_line_integral(5e4, 1e5, 1.0);
        assert!((p - 0.693147).abs() < 1e-6);
    }

    #[test]
    fn starvation_is_clamped_and_flagged() {
        let (p, flag) = counts_to_line_integral(0.0, 1e4, STARVATION_FLOOR);
        assert!(flag);
        assert!((p - 1e4f64.ln()).abs() < 1e-12);
        let (_, flag) = counts_to_line_integral(-3.0, 1e4, 2.0);
        assert!(flag);
    }

    #[test]
    fn vanishing_noise_limit() {
        let p = Array2::from_shape_fn((16, 16), |(i, j)| 0.01 * (i + j) as f64);
        let mut rng = frame_rng(1, 2, 3);
        let out = inject_noise(&p, &filled(1e12, 16), &mut rng).unwrap();
        let max = (&out - &p).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(max < 1e-5);
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let p = filled(0.5, 8);
        let a = inject_noise(&p, &filled(1e3, 8), &mut frame_rng(9, 1, 4)).unwrap();
        let b = inject_noise(&p, &filled(1e3, 8), &mut frame_rng(9, 1, 4)).unwrap();
        assert_eq!(a, b);
        let c = inject_noise(&p, &filled(1e3, 8), &mut frame_rng(9, 1, 5)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn equal_dose_adds_nothing() {
        let p = Array2::from_shape_fn((8, 8), |(i, j)| (i * j) as f64 * 0.1);
        let n = filled(1e4, 8);
        let out = simulate_low_dose(&p, &n, &n, &mut frame_rng(0, 0, 0)).unwrap();
        assert_eq!(out, p);
        let prior = noise_prior(&p, &n, &n).unwrap();
        assert!(prior.phi.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dose_increase_rejected() {
        let p = filled(0.0, 4);
        let r = simulate_low_dose(&p, &filled(1e4, 4), &filled(2e4, 4), &mut frame_rng(0, 0, 0));
        assert!(matches!(r, Err(Error::InvalidArgument(_))));
        assert!(noise_prior(&p, &filled(2e4, 4), &filled(1e4, 4)).is_err());
    }

    #[test]
    fn prior_value_and_monotonicity() {
        let n_f = filled(1e5, 3);
        let n_l = filled(2.5e4, 3);
        let prior = noise_prior(&filled(0.0, 3), &n_l, &n_f).unwrap();
        assert!((prior.phi[[1, 1]] - 3e-5f64.sqrt()).abs() < 1e-15);
        assert!((prior.phi[[0, 0]] - 5.477e-3).abs() < 1e-6);
        let mut last = 0.0;
        for k in 0..20 {
            let p = filled(0.5 * k as f64, 1);
            let phi = noise_prior(&p, &filled(2.5e4, 1), &filled(1e5, 1)).unwrap().phi[[0, 0]];
            assert!(phi > last);
            last = phi;
        }
    }

    #[test]
    fn dose_profiles() {
        let g = ScannerGeometry::default();
        let u = make_dose_profile(&g, &DoseKind::Uniform, 3e5, 0, 10).unwrap();
        assert!(u.n0_frame(4).iter().all(|&v| v == 3e5));

        let b = make_dose_profile(&g, &DoseKind::Bowtie { exponent: 2.0 }, 1.0, 0, 2).unwrap();
        let s = &b.per_channel_scale;
        let mid = g.detector_cols / 2;
        // even column count: center straddles two columns at ±Δγ/2
        assert!((s[[0, mid]] - (0.5 * g.channel_angle_step_rad).cos().powi(2)).abs() < 1e-15);
        let edge = g.max_fan_angle().cos().powi(2);
        assert!((s[[0, 0]] - edge).abs() < 1e-15);
        assert!((s[[3, g.detector_cols - 1]] - edge).abs() < 1e-15);

        let kind = DoseKind::AecSine {
            min: 0.5,
            max: 1.0,
            period_mm: 40.0,
        };
        let a = make_dose_profile(&g, &kind, 1.0, 0, 4000).unwrap();
        assert!(a.per_view_scale.iter().all(|&v| (0.5..=1.0).contains(&v)));
        let lo = a.per_view_scale.iter().cloned().fold(f64::MAX, f64::min);
        let hi = a.per_view_scale.iter().cloned().fold(f64::MIN, f64::max);
        assert!(lo < 0.5001 && hi > 0.9999);
        // one period of table travel = 40 mm = 1800 views at 16 mm/720 views
        assert!((a.per_view_scale[100] - a.per_view_scale[1900]).abs() < 1e-12);

        let bad = DoseKind::AecSine {
            min: 0.0,
            max: 1.0,
            period_mm: 10.0,
        };
        assert!(make_dose_profile(&g, &bad, 1.0, 0, 3).is_err());
    }

    #[test]
    fn bowtie_peaks_at_center_for_odd_columns() {
        let g = ScannerGeometry {
            detector_cols: 33,
            ..ScannerGeometry::default()
        };
        let b = make_dose_profile(&g, &DoseKind::Bowtie { exponent: 2.0 }, 1.0, 0, 1).unwrap();
        assert_eq!(b.per_channel_scale[[0, 16]], 1.0);
        let gmax = 16.0 * g.channel_angle_step_rad;
        assert!((b.per_channel_scale[[0, 0]] - gmax.cos().powi(2)).abs() < 1e-15);
    }
}
