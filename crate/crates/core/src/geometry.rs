//! Third-generation helical fan-beam scanner geometry.
//!
//! Conventions used throughout the crate:
//!
//! * The source sits at `R·(-sin β, cos β)` for gantry angle `β`, so that a ray
//!   with fan angle `γ` is the parallel-beam line `x·cos θ + y·sin θ = d` with
//!   `θ = β + γ` and `d = R·sin γ`.
//! * The detector is curved (equiangular): column `c` has fan angle
//!   `γ = (c − (cols−1)/2)·Δγ`.
//! * Row offsets are measured at the isocenter plane; the ray from a source at
//!   height `z_s` through row `r` crosses the foot point (closest approach to
//!   the rotation axis) at `z_s + (r − (rows−1)/2)·Δr`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];

#[inline]
pub fn dot(a: &Vec3, b: &Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn norm(a: &Vec3) -> f64 {
    dot(a, a).sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScannerGeometry {
    pub focal_length_mm: f64,
    pub detector_rows: usize,
    pub detector_cols: usize,
    pub channel_angle_step_rad: f64,
    pub row_spacing_iso_mm: f64,
    pub views_per_rotation: usize,
    pub table_feed_mm: f64,
    pub slice_thickness_mm: f64,
    #[serde(default)]
    pub z_start_mm: f64,
}

impl Default for ScannerGeometry {
    fn default() -> Self {
        Self {
            focal_length_mm: 570.0,
            detector_rows: 16,
            detector_cols: 256,
            channel_angle_step_rad: (1.1f64 / 570.0).asin(),
            row_spacing_iso_mm: 1.0,
            views_per_rotation: 720,
            table_feed_mm: 16.0,
            slice_thickness_mm: 2.0,
            z_start_mm: 0.0,
        }
    }
}

/// A ray with a unit direction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin_mm: Vec3,
    pub direction: Vec3,
}

impl Ray {
    /// Normalizes `direction`; fails on a zero or non-finite direction.
    pub fn new(origin_mm: Vec3, direction: Vec3) -> Result<Self> {
        let n = norm(&direction);
        if !(n.is_finite() && n > 0.0) {
            return Err(Error::InvalidArgument("ray direction must be non-zero".into()));
        }
        Ok(Self {
            origin_mm,
            direction: [direction[0] / n, direction[1] / n, direction[2] / n],
        })
    }

    pub fn at(&self, t: f64) -> Vec3 {
        [
            self.origin_mm[0] + t * self.direction[0],
            self.origin_mm[1] + t * self.direction[1],
            self.origin_mm[2] + t * self.direction[2],
        ]
    }

    /// Distance of closest approach to the z (rotation) axis.
    pub fn axis_distance(&self) -> f64 {
        let [ox, oy, _] = self.origin_mm;
        let [dx, dy, _] = self.direction;
        let dxy2 = dx * dx + dy * dy;
        if dxy2 == 0.0 {
            return ox.hypot(oy);
        }
        (ox * dy - oy * dx).abs() / dxy2.sqrt()
    }
}

impl ScannerGeometry {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("detector_rows", self.detector_rows),
            ("detector_cols", self.detector_cols),
            ("views_per_rotation", self.views_per_rotation),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Geometry(format!("{name} must be >= 1")));
            }
        }
        let lengths = [
            ("focal_length_mm", self.focal_length_mm),
            ("channel_angle_step_rad", self.channel_angle_step_rad),
            ("row_spacing_iso_mm", self.row_spacing_iso_mm),
            ("table_feed_mm", self.table_feed_mm),
            ("slice_thickness_mm", self.slice_thickness_mm),
        ];
        for (name, v) in lengths {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Geometry(format!("{name} must be finite and > 0, got {v}")));
            }
        }
        if !self.z_start_mm.is_finite() {
            return Err(Error::Geometry("z_start_mm must be finite".into()));
        }
        if self.full_fan_angle() >= PI {
            return Err(Error::Geometry(format!(
                "full fan angle {} rad must be < pi",
                self.full_fan_angle()
            )));
        }
        if !self.pitch().is_finite() {
            return Err(Error::Geometry("helical pitch is not finite".into()));
        }
        Ok(())
    }

    pub fn full_fan_angle(&self) -> f64 {
        self.detector_cols as f64 * self.channel_angle_step_rad
    }

    /// Largest |γ| among detector column centers.
    pub fn max_fan_angle(&self) -> f64 {
        (self.detector_cols as f64 - 1.0) / 2.0 * self.channel_angle_step_rad
    }

    pub fn pitch(&self) -> f64 {
        self.table_feed_mm / (self.detector_rows as f64 * self.row_spacing_iso_mm)
    }

    pub fn view_angle_step(&self) -> f64 {
        2.0 * PI / self.views_per_rotation as f64
    }

    /// Parallel projections per half-turn after rebinning.
    pub fn half_turn_views(&self) -> usize {
        self.views_per_rotation / 2
    }

    pub fn fan_angle(&self, col: f64) -> f64 {
        (col - (self.detector_cols as f64 - 1.0) / 2.0) * self.channel_angle_step_rad
    }

    /// Fractional column for a fan angle (inverse of [`Self::fan_angle`]).
    pub fn column_of(&self, gamma: f64) -> f64 {
        gamma / self.channel_angle_step_rad + (self.detector_cols as f64 - 1.0) / 2.0
    }

    pub fn row_offset(&self, row: f64) -> f64 {
        (row - (self.detector_rows as f64 - 1.0) / 2.0) * self.row_spacing_iso_mm
    }

    /// Gantry angle (unwrapped) and source z for a possibly fractional view.
    pub fn source_at(&self, view: f64) -> (f64, f64) {
        let turns = view / self.views_per_rotation as f64;
        (2.0 * PI * turns, self.z_start_mm + self.table_feed_mm * turns)
    }

    pub fn source_position(&self, view: usize) -> (f64, f64) {
        self.source_at(view as f64)
    }

    /// Source z for a fractional view, without the angle.
    pub fn source_z(&self, view: f64) -> f64 {
        self.z_start_mm + self.table_feed_mm * view / self.views_per_rotation as f64
    }

    /// Fractional view whose source sits at table position `z`.
    pub fn view_at_z(&self, z_mm: f64) -> f64 {
        (z_mm - self.z_start_mm) / self.table_feed_mm * self.views_per_rotation as f64
    }

    pub fn source_point(&self, view: f64) -> Vec3 {
        let (beta, z) = self.source_at(view);
        let r = self.focal_length_mm;
        [-r * beta.sin(), r * beta.cos(), z]
    }

    pub fn ray_for_channel(&self, view: usize, row: usize, col: usize) -> Result<Ray> {
        if row >= self.detector_rows {
            return Err(Error::IndexOutOfRange {
                what: "row",
                index: row,
                limit: self.detector_rows,
            });
        }
        if col >= self.detector_cols {
            return Err(Error::IndexOutOfRange {
                what: "col",
                index: col,
                limit: self.detector_cols,
            });
        }
        Ok(self.ray_unchecked(view as f64, row as f64, col as f64))
    }

    /// Ray for fractional detector coordinates; no bounds checks.
    pub fn ray_unchecked(&self, view: f64, row: f64, col: f64) -> Ray {
        let (beta, z_src) = self.source_at(view);
        let gamma = self.fan_angle(col);
        let r = self.focal_length_mm;
        let theta = beta + gamma;
        let origin = [-r * beta.sin(), r * beta.cos(), z_src];
        // in-plane direction is -e(θ) with e(θ) = (-sin θ, cos θ)
        let run = r * gamma.cos();
        let dir = [run * theta.sin(), -run * theta.cos(), self.row_offset(row)];
        let n = norm(&dir);
        Ray {
            origin_mm: origin,
            direction: [dir[0] / n, dir[1] / n, dir[2] / n],
        }
    }
}
