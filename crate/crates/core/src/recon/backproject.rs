use std::f64::consts::PI;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::filter::FilteredSinogram;
use super::{Provenance, SliceImage, VolumeSequence};
use crate::error::{Error, Result};

/// HU written to pixels no projection covered.
pub const GAP_SENTINEL_HU: f64 = -1024.0;

const COVERAGE_EPS: f64 = 1e-6;

/// Detector-row apodization `w(r)` of the z-weighting.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RowWeight {
    #[default]
    Uniform,
    /// Flat over the inner `flat_fraction` of the detector half-height,
    /// cosine-squared roll-off to zero at the outer edge.
    Cosine { flat_fraction: f64 },
}

impl RowWeight {
    pub fn weight(&self, row: usize, rows: usize) -> f64 {
        match *self {
            RowWeight::Uniform => 1.0,
            RowWeight::Cosine { flat_fraction } => {
                let half = rows as f64 / 2.0;
                let x = ((row as f64 + 0.5) - half).abs() / half;
                let q = flat_fraction.clamp(0.0, 1.0);
                if x <= q || q >= 1.0 {
                    1.0
                } else {
                    (0.5 * PI * (x - q) / (1.0 - q)).cos().powi(2)
                }
            }
        }
    }
}

/// Triangular z-weight `max(0, 1 − |Δz|/D)·w(r)`.
pub fn z_weight(dz_mm: f64, thickness_mm: f64, row_weight: f64) -> f64 {
    (1.0 - dz_mm.abs() / thickness_mm).max(0.0) * row_weight
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageSpec {
    pub size: usize,
    pub pixel_mm: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HuConvention {
    /// `1000·(μ − μ_w)/μ_w`: attenuation 0 is −1000 HU.
    #[default]
    Absolute,
    /// `1000·μ/μ_w`: for residual sinograms, where 0 stays 0.
    Difference,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReconOptions {
    pub mu_water_per_mm: f64,
    pub row_weight: RowWeight,
    /// Overrides the geometry's slice thickness when set.
    pub slice_thickness_mm: Option<f64>,
    pub hu: HuConvention,
}

impl Default for ReconOptions {
    fn default() -> Self {
        Self {
            mu_water_per_mm: crate::phantom::DEFAULT_MU_WATER,
            row_weight: RowWeight::Uniform,
            slice_thickness_mm: None,
            hu: HuConvention::Absolute,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SliceRecon {
    pub image: SliceImage,
    /// Pixels set to [`GAP_SENTINEL_HU`] because some angle had no weight.
    pub gap_pixels: usize,
}

impl SliceRecon {
    pub fn partial_coverage(&self) -> bool {
        self.gap_pixels > 0
    }
}

/// Precomputed per-frame quantities for one slice.
struct FrameInfo {
    index: usize,
    cos: f64,
    sin: f64,
}

/// Reconstructs one slice at `z_mm`.
///
/// Every parallel angle of a half-turn collects its conjugates `θ + kπ` and all
/// detector rows whose ray passes the pixel within the slice thickness; their
/// filtered values are averaged with the triangular z-weights, and the
/// per-angle views are summed with the `π/L` quadrature factor.
pub fn reconstruct_slice(
    filtered: &FilteredSinogram,
    z_mm: f64,
    spec: &ImageSpec,
    opts: &ReconOptions,
    provenance: Provenance,
) -> Result<SliceRecon> {
    let (mu, gaps) = backproject_mu(filtered, z_mm, spec, opts)?;
    let mu_w = opts.mu_water_per_mm;
    let data = Array2::from_shape_fn(mu.dim(), |(r, c)| {
        let m = mu[[r, c]];
        if m.is_nan() {
            GAP_SENTINEL_HU
        } else {
            match opts.hu {
                HuConvention::Absolute => 1000.0 * (m - mu_w) / mu_w,
                HuConvention::Difference => 1000.0 * m / mu_w,
            }
        }
    });
    Ok(SliceRecon {
        image: SliceImage::new(data, z_mm, spec.pixel_mm, provenance)?,
        gap_pixels: gaps,
    })
}

/// Back-projected attenuation; NaN marks coverage gaps.
fn backproject_mu(filtered: &FilteredSinogram, z: f64, spec: &ImageSpec, opts: &ReconOptions) -> Result<(Array2<f64>, usize)> {
    let sino = &filtered.0;
    let geom = &sino.geometry;
    if spec.size == 0 || !(spec.pixel_mm > 0.0) {
        return Err(Error::InvalidArgument("image size and pixel size must be positive".into()));
    }
    if !(opts.mu_water_per_mm > 0.0) {
        return Err(Error::InvalidArgument("mu_water_per_mm must be > 0".into()));
    }
    let thickness = opts.slice_thickness_mm.unwrap_or(geom.slice_thickness_mm);
    if !(thickness > 0.0) {
        return Err(Error::InvalidArgument("slice thickness must be > 0".into()));
    }
    let half_turn = sino.grid.angles_per_half_turn;
    let nd = sino.grid.num_distances;
    let rows = geom.detector_rows;
    let r_focal = geom.focal_length_mm;
    let row_w: Vec<f64> = (0..rows).map(|r| opts.row_weight.weight(r, rows)).collect();
    let row_off: Vec<f64> = (0..rows).map(|r| geom.row_offset(r as f64)).collect();
    let half_rows = (rows as f64 - 1.0) / 2.0;

    let half_img = (spec.size as f64 - 1.0) / 2.0;
    let fov_radius = half_img * spec.pixel_mm * std::f64::consts::SQRT_2;
    let max_scale = 1.0 + fov_radius / (r_focal * geom.max_fan_angle().cos()).max(1e-9);
    let z_reach = thickness + max_scale * row_off.iter().fold(0.0f64, |m, v| m.max(v.abs()));

    // usable frames grouped by residue modulo the half-turn
    let mut groups: Vec<Vec<FrameInfo>> = (0..half_turn).map(|_| Vec::new()).collect();
    for j in 0..sino.num_angles() {
        if !sino.frame_complete(j) {
            continue;
        }
        let zs = sino.z_center.row(j);
        let (lo, hi) = zs.iter().zip(&sino.in_fan).filter(|(_, &f)| f).fold((f64::MAX, f64::MIN), |(lo, hi), (&v, _)| (lo.min(v), hi.max(v)));
        if lo > z + z_reach || hi < z - z_reach {
            continue;
        }
        let theta = sino.angle(j);
        groups[(sino.first_view + j) % half_turn].push(FrameInfo {
            index: j,
            cos: theta.cos(),
            sin: theta.sin(),
        });
    }

    let quad = PI / half_turn as f64;
    let rows_out: Vec<(Vec<f64>, usize)> = (0..spec.size)
        .into_par_iter()
        .map(|iy| {
            let y = (iy as f64 - half_img) * spec.pixel_mm;
            let mut line = vec![0.0; spec.size];
            let mut gaps = 0;
            for (ix, out) in line.iter_mut().enumerate() {
                let x = (ix as f64 - half_img) * spec.pixel_mm;
                let mut sum = 0.0;
                let mut gap = false;
                for group in &groups {
                    let mut acc = 0.0;
                    let mut h_sum = 0.0;
                    for f in group {
                        let d = x * f.cos + y * f.sin;
                        let fi = sino.grid.distance_index(d);
                        if !(fi >= 0.0) || fi > (nd - 1) as f64 {
                            continue;
                        }
                        let mut i0 = fi.floor() as usize;
                        if i0 == nd - 1 {
                            i0 -= 1;
                        }
                        let w = fi - i0 as f64;
                        if !(sino.in_fan[i0] && sino.in_fan[i0 + 1]) {
                            continue;
                        }
                        let zc = sino.z_center[[f.index, i0]] * (1.0 - w) + sino.z_center[[f.index, i0 + 1]] * w;
                        // distance along the ray past its foot point, for the cone divergence
                        let t = x * f.sin - y * f.cos;
                        let scale = 1.0 + t / (r_focal * r_focal - d * d).max(1e-12).sqrt();
                        let step = scale * geom.row_spacing_iso_mm;
                        let r_lo = ((z - thickness - zc) / step + half_rows).floor().max(0.0) as usize;
                        let r_hi = ((z + thickness - zc) / step + half_rows).ceil().min(rows as f64 - 1.0);
                        if r_hi < 0.0 {
                            continue;
                        }
                        let frame = &filtered.frames[f.index];
                        for r in r_lo..=(r_hi as usize) {
                            let zr = zc + scale * row_off[r];
                            let h = z_weight(zr - z, thickness, row_w[r]);
                            if h > 0.0 {
                                let v = frame[[r, i0]] * (1.0 - w) + frame[[r, i0 + 1]] * w;
                                acc += h * v;
                                h_sum += h;
                            }
                        }
                    }
                    if h_sum > COVERAGE_EPS {
                        sum += acc / h_sum;
                    } else {
                        gap = true;
                        break;
                    }
                }
                if gap {
                    *out = f64::NAN;
                    gaps += 1;
                } else {
                    *out = quad * sum;
                }
            }
            (line, gaps)
        })
        .collect();
    let mut mu = Array2::zeros((spec.size, spec.size));
    let mut gaps = 0;
    for (iy, (line, g)) in rows_out.into_iter().enumerate() {
        gaps += g;
        for (ix, v) in line.into_iter().enumerate() {
            mu[[iy, ix]] = v;
        }
    }
    Ok((mu, gaps))
}

/// Slices from `z_first` covering `targets` output positions `spacing_mm`
/// apart, with `f` intermediate overlapped slices between neighbors.
pub fn reconstruct_sequence(
    filtered: &FilteredSinogram,
    z_first_mm: f64,
    targets: usize,
    spacing_mm: f64,
    f: usize,
    spec: &ImageSpec,
    opts: &ReconOptions,
    provenance: Provenance,
) -> Result<(VolumeSequence, usize)> {
    if targets == 0 || !(spacing_mm > 0.0) {
        return Err(Error::InvalidArgument("need at least one target slice and spacing > 0".into()));
    }
    let sub = spacing_mm / (f + 1) as f64;
    let count = (targets - 1) * (f + 1) + 1;
    let mut slices = Vec::with_capacity(count);
    let mut gaps = 0;
    for q in 0..count {
        let rec = reconstruct_slice(filtered, z_first_mm + q as f64 * sub, spec, opts, provenance)?;
        gaps += rec.gap_pixels;
        slices.push(rec.image);
    }
    Ok((VolumeSequence::new(slices, sub, f)?, gaps))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn z_weight_examples() {
        assert_eq!(z_weight(0.0, 2.0, 1.0), 1.0);
        assert_eq!(z_weight(2.0, 2.0, 1.0), 0.0);
        assert_eq!(z_weight(-1.0, 2.0, 1.0), 0.5);
        assert_eq!(z_weight(3.0, 2.0, 1.0), 0.0);
        assert_eq!(z_weight(0.5, 2.0, 0.5), 0.375);
    }

    #[test]
    fn cosine_row_weight_is_symmetric_and_bounded() {
        let w = RowWeight::Cosine { flat_fraction: 0.5 };
        for r in 0..16 {
            let a = w.weight(r, 16);
            assert!((0.0..=1.0).contains(&a));
            assert!((a - w.weight(15 - r, 16)).abs() < 1e-15);
        }
        assert_eq!(w.weight(8, 16), 1.0);
        assert!(w.weight(0, 16) < 0.2);
        assert_eq!(RowWeight::Uniform.weight(0, 16), 1.0);
    }
}
