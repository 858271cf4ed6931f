//! Fan-to-parallel rebinning, split into a gather half and an arithmetic half.
//!
//! A parallel ray `(θ, d)` is the fan ray with `γ = asin(d/R)` from the view at
//! `β = θ − γ`. Target angles are spaced exactly like source views, so for a
//! fixed distance column the fractional source view is `j + o_i` with a
//! column-only offset `o_i = −γ_i/Δβ`. Consequently:
//!
//! * [`integer_slice`] builds two candidate streams (left/right channel) whose
//!   frame `j` is an untouched copy of source view `j + ⌊o_i⌋` for each column,
//!   so consecutive candidate frames are consecutive source views;
//! * [`weighted_sum`] blends candidate frames `j` and `j+1` bilinearly.
//!
//! Anything placed between the two halves (the projection denoiser) sees raw,
//! element-wise independent measurements.

use ndarray::{Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::ScannerGeometry;
use crate::projection::ProjectionStream;

/// Parallel-beam target grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RebinGrid {
    pub angles_per_half_turn: usize,
    pub num_distances: usize,
    pub distance_spacing_mm: f64,
}

impl RebinGrid {
    /// Native sampling: one parallel angle per source view and one distance
    /// per detector column at the central channel spacing.
    pub fn native(geom: &ScannerGeometry) -> Self {
        Self {
            angles_per_half_turn: geom.half_turn_views(),
            num_distances: geom.detector_cols,
            distance_spacing_mm: geom.focal_length_mm * geom.channel_angle_step_rad.sin(),
        }
    }

    pub fn distance(&self, i: usize) -> f64 {
        (i as f64 - (self.num_distances as f64 - 1.0) / 2.0) * self.distance_spacing_mm
    }

    /// Fractional distance index for a signed distance.
    pub fn distance_index(&self, d: f64) -> f64 {
        d / self.distance_spacing_mm + (self.num_distances as f64 - 1.0) / 2.0
    }

    pub fn validate(&self, geom: &ScannerGeometry) -> Result<()> {
        if self.num_distances == 0 || !(self.distance_spacing_mm > 0.0) {
            return Err(Error::InvalidArgument("rebin grid needs distances and spacing > 0".into()));
        }
        if 2 * self.angles_per_half_turn != geom.views_per_rotation {
            return Err(Error::InvalidArgument(format!(
                "parallel angle step must equal the view step: {} angles per half-turn for {} views per rotation",
                self.angles_per_half_turn, geom.views_per_rotation
            )));
        }
        Ok(())
    }
}

/// Gather indices and bilinear weights of one target distance column.
#[derive(Clone, Debug, PartialEq)]
pub struct ColumnPlan {
    pub distance_mm: f64,
    pub gamma: f64,
    /// False when `|d|` falls outside the fan; such targets carry no data.
    pub in_fan: bool,
    pub left: usize,
    pub right: usize,
    /// Source view of candidate frame `j` is `j + view_shift`.
    pub view_shift: isize,
    /// `[ω00, ω01, ω10, ω11]` for (t,l), (t,r), (t+1,l), (t+1,r).
    pub weights: [f64; 4],
}

#[derive(Clone, Debug, PartialEq)]
pub struct RebinPlan {
    pub grid: RebinGrid,
    pub geometry: ScannerGeometry,
    pub first_view: usize,
    pub source_views: usize,
    pub columns: Vec<ColumnPlan>,
}

fn bilinear(fv: f64, fc: f64) -> [f64; 4] {
    [(1.0 - fv) * (1.0 - fc), (1.0 - fv) * fc, fv * (1.0 - fc), fv * fc]
}

/// Splits a fractional coordinate into a lower neighbor and a fraction,
/// keeping `lower + 1 < len` when the coordinate sits exactly on the last sample.
fn split_coordinate(x: f64, len: usize) -> Option<(usize, f64)> {
    if !(x >= 0.0) || x > (len - 1) as f64 || len < 2 {
        return None;
    }
    let mut lo = x.floor() as usize;
    let mut frac = x - lo as f64;
    if lo == len - 1 {
        lo -= 1;
        frac = 1.0;
    }
    Some((lo, frac))
}

pub fn build_rebin_plan(geom: &ScannerGeometry, grid: &RebinGrid, first_view: usize, source_views: usize) -> Result<RebinPlan> {
    geom.validate()?;
    grid.validate(geom)?;
    let r = geom.focal_length_mm;
    let dbeta = geom.view_angle_step();
    let columns = (0..grid.num_distances)
        .map(|i| {
            let d = grid.distance(i);
            let gamma = (d / r).clamp(-1.0, 1.0).asin();
            let offset = -gamma / dbeta;
            let shift = offset.floor();
            let fv = offset - shift;
            match split_coordinate(geom.column_of(gamma), geom.detector_cols) {
                Some((left, fc)) => ColumnPlan {
                    distance_mm: d,
                    gamma,
                    in_fan: true,
                    left,
                    right: left + 1,
                    view_shift: shift as isize,
                    weights: bilinear(fv, fc),
                },
                None => ColumnPlan {
                    distance_mm: d,
                    gamma,
                    in_fan: false,
                    left: 0,
                    right: 0,
                    view_shift: shift as isize,
                    weights: [0.0; 4],
                },
            }
        })
        .collect();
    Ok(RebinPlan {
        grid: grid.clone(),
        geometry: geom.clone(),
        first_view,
        source_views,
        columns,
    })
}

impl RebinPlan {
    pub fn for_stream(stream: &ProjectionStream, grid: &RebinGrid) -> Result<Self> {
        build_rebin_plan(&stream.geometry, grid, stream.first_view(), stream.len())
    }

    /// Number of target angles (one per source view).
    pub fn num_angles(&self) -> usize {
        self.source_views
    }

    /// Stream-relative source view gathered into candidate frame `j`, column `i`.
    pub fn source_view(&self, j: usize, i: usize) -> Option<usize> {
        let c = &self.columns[i];
        if !c.in_fan {
            return None;
        }
        let t = j as isize + c.view_shift;
        (t >= 0 && (t as usize) < self.source_views).then_some(t as usize)
    }

    /// Target `(j, i)` has both view neighbors inside the stream.
    pub fn in_support(&self, j: usize, i: usize) -> bool {
        j + 1 < self.num_angles() && self.source_view(j, i).is_some() && self.source_view(j + 1, i).is_some()
    }

    pub fn support_mask(&self) -> Array2<bool> {
        Array2::from_shape_fn((self.num_angles(), self.grid.num_distances), |(j, i)| self.in_support(j, i))
    }

    pub fn in_fan(&self) -> Vec<bool> {
        self.columns.iter().map(|c| c.in_fan).collect()
    }

    /// Parallel angle of target frame `j` (unwrapped).
    pub fn angle(&self, j: usize) -> f64 {
        (self.first_view + j) as f64 * self.geometry.view_angle_step()
    }

    /// Source z at the (fractional) view sampled by target `(j, i)`.
    pub fn z_center(&self, j: usize, i: usize) -> f64 {
        let c = &self.columns[i];
        let view = (self.first_view + j) as f64 - c.gamma / self.geometry.view_angle_step();
        self.geometry.source_z(view)
    }

    fn check_stream(&self, stream: &ProjectionStream) -> Result<()> {
        if stream.len() != self.source_views || stream.first_view() != self.first_view {
            return Err(Error::stage(
                "rebin",
                format!(
                    "plan covers views {}..{}, stream covers {}..{}",
                    self.first_view,
                    self.first_view + self.source_views,
                    stream.first_view(),
                    stream.first_view() + stream.len()
                ),
            ));
        }
        if stream.geometry != self.geometry {
            return Err(Error::stage("rebin", "plan was built for a different geometry"));
        }
        Ok(())
    }
}

/// Gathered (untouched) samples for one channel side, indexed like the target grid.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidateStream {
    /// `num_angles` frames of `rows × num_distances`.
    pub frames: Vec<Array2<f64>>,
    /// `num_angles × num_distances`; false where nothing was gathered.
    pub valid: Array2<bool>,
}

impl CandidateStream {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn with_frames(&self, frames: Vec<Array2<f64>>, valid: Array2<bool>) -> Self {
        Self { frames, valid }
    }
}

/// Gathers per-view maps (data, Φ, N0...) into left/right candidate streams.
pub fn integer_slice_maps(maps: &[&Array2<f64>], plan: &RebinPlan) -> Result<(CandidateStream, CandidateStream)> {
    if maps.len() != plan.source_views {
        return Err(Error::shape(&[plan.source_views], &[maps.len()]));
    }
    let rows = plan.geometry.detector_rows;
    let nd = plan.grid.num_distances;
    let valid = Array2::from_shape_fn((plan.num_angles(), nd), |(j, i)| plan.source_view(j, i).is_some());
    let gather = |right: bool| -> Vec<Array2<f64>> {
        (0..plan.num_angles())
            .into_par_iter()
            .map(|j| {
                let mut out = Array2::zeros((rows, nd));
                for (i, c) in plan.columns.iter().enumerate() {
                    if let Some(t) = plan.source_view(j, i) {
                        let ch = if right { c.right } else { c.left };
                        let src = maps[t];
                        for r in 0..rows {
                            out[[r, i]] = src[[r, ch]];
                        }
                    }
                }
                out
            })
            .collect()
    };
    let left = CandidateStream {
        frames: gather(false),
        valid: valid.clone(),
    };
    let right = CandidateStream {
        frames: gather(true),
        valid,
    };
    Ok((left, right))
}

/// Gather half of rebinning: copies, no arithmetic.
pub fn integer_slice(stream: &ProjectionStream, plan: &RebinPlan) -> Result<(CandidateStream, CandidateStream)> {
    plan.check_stream(stream)?;
    let maps: Vec<&Array2<f64>> = stream.frames.iter().map(|f| &f.data).collect();
    integer_slice_maps(&maps, plan)
}

/// Pseudo-parallel projections on the target grid.
#[derive(Clone, Debug, PartialEq)]
pub struct RebinnedSinogram {
    /// One `rows × num_distances` frame per parallel angle.
    pub frames: Vec<Array2<f64>>,
    /// `num_angles × num_distances`.
    pub support: Array2<bool>,
    /// Per distance column: inside the detector fan.
    pub in_fan: Vec<bool>,
    /// Source z (before row offsets) of every target ray, `num_angles × num_distances`.
    pub z_center: Array2<f64>,
    pub grid: RebinGrid,
    pub geometry: ScannerGeometry,
    pub first_view: usize,
}

impl RebinnedSinogram {
    pub fn num_angles(&self) -> usize {
        self.frames.len()
    }

    pub fn angle(&self, j: usize) -> f64 {
        (self.first_view + j) as f64 * self.geometry.view_angle_step()
    }

    /// Every in-fan column of frame `j` carries data.
    pub fn frame_complete(&self, j: usize) -> bool {
        self.support.row(j).iter().zip(&self.in_fan).all(|(&s, &f)| s || !f)
    }

    pub fn with_frames(&self, frames: Vec<Array2<f64>>) -> Self {
        Self {
            frames,
            support: self.support.clone(),
            in_fan: self.in_fan.clone(),
            z_center: self.z_center.clone(),
            grid: self.grid.clone(),
            geometry: self.geometry.clone(),
            first_view: self.first_view,
        }
    }

    /// Elementwise `a·self + b·other` on matching grids; support is intersected.
    pub fn axpby(&self, a: f64, other: &RebinnedSinogram, b: f64) -> Result<Self> {
        if self.frames.len() != other.frames.len() || self.grid != other.grid || self.first_view != other.first_view {
            return Err(Error::stage("rebin", "sinograms are on different grids"));
        }
        let frames = self
            .frames
            .iter()
            .zip(&other.frames)
            .map(|(x, y)| x * a + y * b)
            .collect();
        let mut out = self.with_frames(frames);
        ndarray::Zip::from(&mut out.support)
            .and(&other.support)
            .for_each(|s, &o| *s = *s && o);
        Ok(out)
    }

    fn empty_like(plan: &RebinPlan, frames: Vec<Array2<f64>>, support: Array2<bool>) -> Self {
        let z_center = Array2::from_shape_fn((plan.num_angles(), plan.grid.num_distances), |(j, i)| plan.z_center(j, i));
        Self {
            frames,
            support,
            in_fan: plan.in_fan(),
            z_center,
            grid: plan.grid.clone(),
            geometry: plan.geometry.clone(),
            first_view: plan.first_view,
        }
    }
}

/// Arithmetic half of rebinning (bilinear blend of candidates `j` and `j+1`).
pub fn weighted_sum(left: &CandidateStream, right: &CandidateStream, plan: &RebinPlan) -> Result<RebinnedSinogram> {
    let n = plan.num_angles();
    let nd = plan.grid.num_distances;
    let rows = plan.geometry.detector_rows;
    for s in [left, right] {
        if s.frames.len() != n || s.valid.dim() != (n, nd) {
            return Err(Error::stage("weighted_sum", "candidate stream does not match the plan"));
        }
    }
    let mut support = Array2::from_elem((n, nd), false);
    for j in 0..n {
        for i in 0..nd {
            support[[j, i]] = j + 1 < n
                && left.valid[[j, i]]
                && left.valid[[j + 1, i]]
                && right.valid[[j, i]]
                && right.valid[[j + 1, i]];
        }
    }
    let frames = (0..n)
        .into_par_iter()
        .map(|j| {
            let mut out = Array2::zeros((rows, nd));
            if j + 1 >= n {
                return out;
            }
            let (l0, r0, l1, r1) = (&left.frames[j], &right.frames[j], &left.frames[j + 1], &right.frames[j + 1]);
            for (i, c) in plan.columns.iter().enumerate() {
                if !support[[j, i]] {
                    continue;
                }
                let [w00, w01, w10, w11] = c.weights;
                for r in 0..rows {
                    out[[r, i]] = w00 * l0[[r, i]] + w01 * r0[[r, i]] + w10 * l1[[r, i]] + w11 * r1[[r, i]];
                }
            }
            out
        })
        .collect();
    Ok(RebinnedSinogram::empty_like(plan, frames, support))
}

/// Single-pass bilinear rebinning computed straight from the geometry; the
/// reference the two-step path must reproduce.
pub fn direct_rebin(stream: &ProjectionStream, plan: &RebinPlan) -> Result<RebinnedSinogram> {
    plan.check_stream(stream)?;
    let geom = &stream.geometry;
    let n = plan.num_angles();
    let nd = plan.grid.num_distances;
    let rows = geom.detector_rows;
    let k = stream.len();
    let dbeta = geom.view_angle_step();
    let r_f = geom.focal_length_mm;
    let results: Vec<(Array2<f64>, Vec<bool>)> = (0..n)
        .into_par_iter()
        .map(|j| {
            let mut out = Array2::zeros((rows, nd));
            let mut sup = vec![false; nd];
            if j + 1 >= n {
                return (out, sup);
            }
            for (i, s) in sup.iter_mut().enumerate() {
                let d = plan.grid.distance(i);
                if d.abs() > r_f {
                    continue;
                }
                let gamma = (d / r_f).asin();
                let view = j as f64 - gamma / dbeta;
                let Some((lc, fc)) = split_coordinate(geom.column_of(gamma), geom.detector_cols) else {
                    continue;
                };
                let t = view.floor();
                if t < 0.0 || t + 1.0 > (k - 1) as f64 {
                    continue;
                }
                let fv = view - t;
                let t = t as usize;
                let [w00, w01, w10, w11] = bilinear(fv, fc);
                let (a, b) = (&stream.frames[t].data, &stream.frames[t + 1].data);
                for r in 0..rows {
                    out[[r, i]] = w00 * a[[r, lc]] + w01 * a[[r, lc + 1]] + w10 * b[[r, lc]] + w11 * b[[r, lc + 1]];
                }
                *s = true;
            }
            (out, sup)
        })
        .collect();
    let mut support = Array2::from_elem((n, nd), false);
    let mut frames = Vec::with_capacity(n);
    for (j, (f, s)) in results.into_iter().enumerate() {
        for (i, v) in s.into_iter().enumerate() {
            support[[j, i]] = v;
        }
        frames.push(f);
    }
    Ok(RebinnedSinogram::empty_like(plan, frames, support))
}

/// Convenience: both halves back to back.
pub fn rebin(stream: &ProjectionStream, plan: &RebinPlan) -> Result<RebinnedSinogram> {
    let (l, r) = integer_slice(stream, plan)?;
    weighted_sum(&l, &r, plan)
}

/// Row `r` of every frame as an `angles × distances` sinogram (for inspection).
pub fn row_sinogram(sino: &RebinnedSinogram, row: usize) -> Array2<f64> {
    let views: Vec<_> = sino.frames.iter().map(|f| f.index_axis(Axis(0), row)).collect();
    ndarray::stack(Axis(0), &views).expect("frames share shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::projection::ProjectionFrame;

    pub(crate) fn geom() -> ScannerGeometry {
        ScannerGeometry {
            focal_length_mm: 300.0,
            detector_rows: 2,
            detector_cols: 21,
            channel_angle_step_rad: 0.02,
            row_spacing_iso_mm: 1.0,
            views_per_rotation: 60,
            table_feed_mm: 2.0,
            slice_thickness_mm: 1.0,
            z_start_mm: 0.0,
        }
    }

    fn stream_from(g: &ScannerGeometry, k: usize, f: impl Fn(usize, usize, usize) -> f64) -> ProjectionStream {
        let frames = (0..k)
            .map(|v| ProjectionFrame {
                data: Array2::from_shape_fn((g.detector_rows, g.detector_cols), |(r, c)| f(v, r, c)),
                view: v,
                gantry_angle_rad: 0.0,
                z_mm: 0.0,
                n0: None,
            })
            .collect();
        ProjectionStream::new(frames, g.clone()).unwrap()
    }

    #[test]
    fn on_grid_target_has_unit_weight() {
        let g = geom();
        // distances exactly at fan samples: d = R sin(kΔγ) is on-grid only for k = 0
        let plan = build_rebin_plan(&g, &RebinGrid::native(&g), 0, 10).unwrap();
        let c = &plan.columns[10];
        assert_eq!(c.weights, [1.0, 0.0, 0.0, 0.0]);
        assert_eq!(c.left, 10);
        assert_eq!(c.view_shift, 0);
    }

    #[test]
    fn midpoint_target_has_quarter_weights() {
        // channel step equal to the view step, target at γ = Δγ/2: half a
        // column and half a view away from the nearest samples
        let g = ScannerGeometry {
            channel_angle_step_rad: geom().view_angle_step(),
            ..geom()
        };
        let gamma = 0.5 * g.channel_angle_step_rad;
        let grid = RebinGrid {
            angles_per_half_turn: 30,
            num_distances: 2,
            distance_spacing_mm: 2.0 * g.focal_length_mm * gamma.sin(),
        };
        let plan = build_rebin_plan(&g, &grid, 0, 5).unwrap();
        let w = plan.columns[1].weights;
        for v in w {
            assert!((v - 0.25).abs() < 1e-12, "{w:?}");
        }
        assert_eq!(plan.columns[1].left, 10);
        assert_eq!(plan.columns[1].view_shift, -1);
    }

    #[test]
    fn candidate_entries_are_exact_copies() {
        let g = geom();
        let s = stream_from(&g, 12, |v, r, c| (v * 1000 + r * 100 + c) as f64 + 0.123);
        let plan = RebinPlan::for_stream(&s, &RebinGrid::native(&g)).unwrap();
        let (l, r) = integer_slice(&s, &plan).unwrap();
        for j in 0..12 {
            for (i, c) in plan.columns.iter().enumerate() {
                if let Some(t) = plan.source_view(j, i) {
                    for row in 0..2 {
                        assert_eq!(l.frames[j][[row, i]].to_bits(), s.frames[t].data[[row, c.left]].to_bits());
                        assert_eq!(r.frames[j][[row, i]].to_bits(), s.frames[t].data[[row, c.right]].to_bits());
                    }
                }
            }
        }
    }

    #[test]
    fn constant_stream_rebins_to_constant() {
        let g = geom();
        let s = stream_from(&g, 15, |_, _, _| 2.5);
        let plan = RebinPlan::for_stream(&s, &RebinGrid::native(&g)).unwrap();
        let sino = rebin(&s, &plan).unwrap();
        let mut seen = 0;
        for j in 0..15 {
            for i in 0..21 {
                if sino.support[[j, i]] {
                    seen += 1;
                    for r in 0..2 {
                        assert!((sino.frames[j][[r, i]] - 2.5).abs() < 1e-14);
                    }
                }
            }
        }
        assert!(seen > 100);
    }

    #[test]
    fn linear_in_channel_is_reproduced() {
        let g = geom();
        let s = stream_from(&g, 10, |_, r, c| 0.5 * c as f64 + r as f64);
        let plan = RebinPlan::for_stream(&s, &RebinGrid::native(&g)).unwrap();
        let d = direct_rebin(&s, &plan).unwrap();
        for j in 0..10 {
            for (i, c) in plan.columns.iter().enumerate() {
                if d.support[[j, i]] {
                    let col = g.column_of(c.gamma);
                    assert!((d.frames[j][[1, i]] - (0.5 * col + 1.0)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn mismatched_angle_step_rejected() {
        let g = geom();
        let grid = RebinGrid {
            angles_per_half_turn: 45,
            ..RebinGrid::native(&g)
        };
        assert!(build_rebin_plan(&g, &grid, 0, 4).is_err());
    }

    #[test]
    fn out_of_fan_targets_are_flagged() {
        let g = geom();
        let grid = RebinGrid {
            distance_spacing_mm: 10.0,
            ..RebinGrid::native(&g)
        };
        let plan = build_rebin_plan(&g, &grid, 0, 6).unwrap();
        assert!(!plan.columns[0].in_fan);
        assert!(plan.columns[10].in_fan);
        assert!(!plan.in_support(2, 0));
    }

    #[test]
    fn support_excludes_stream_edges() {
        let g = geom();
        let plan = build_rebin_plan(&g, &RebinGrid::native(&g), 0, 8).unwrap();
        // the last target has no j+1 neighbor
        for i in 0..21 {
            assert!(!plan.in_support(7, i));
        }
    }
}
