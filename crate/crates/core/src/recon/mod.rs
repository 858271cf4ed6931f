//! Weighted filtered back-projection for helical multi-row data.

mod backproject;
mod filter;

pub use backproject::{
    reconstruct_sequence, reconstruct_slice, z_weight, HuConvention, ImageSpec, ReconOptions, RowWeight,
    SliceRecon, GAP_SENTINEL_HU,
};
pub use filter::{filter_projection, shepp_logan_kernel, ConvolutionPath, FilterKernel, FilteredSinogram};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Raw,
    DenoisedProjection,
    Refined,
    /// Reconstruction of a projection-domain residual (HU differences).
    Residual,
    /// Refined with the coupled (summed) image-domain input.
    RefinedCoupled,
    GroundTruth,
    FullDose,
}

impl Provenance {
    pub fn as_str(&self) -> &'static str {
        match self {
            Provenance::Raw => "raw",
            Provenance::DenoisedProjection => "denoised-projection",
            Provenance::Refined => "refined",
            Provenance::Residual => "residual",
            Provenance::RefinedCoupled => "refined-coupled",
            Provenance::GroundTruth => "ground-truth",
            Provenance::FullDose => "full-dose",
        }
    }

    pub fn parse(tag: &str) -> Option<Self> {
        [
            Provenance::Raw,
            Provenance::DenoisedProjection,
            Provenance::Refined,
            Provenance::Residual,
            Provenance::RefinedCoupled,
            Provenance::GroundTruth,
            Provenance::FullDose,
        ]
        .into_iter()
        .find(|p| p.as_str() == tag)
    }
}

/// One reconstructed slice in HU.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceImage {
    pub data: Array2<f64>,
    pub z_mm: f64,
    pub pixel_mm: f64,
    pub provenance: Provenance,
}

impl SliceImage {
    pub fn new(data: Array2<f64>, z_mm: f64, pixel_mm: f64, provenance: Provenance) -> Result<Self> {
        if !(pixel_mm > 0.0) {
            return Err(Error::InvalidArgument("pixel_mm must be > 0".into()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite pixel in slice at z = {z_mm}")));
        }
        Ok(Self {
            data,
            z_mm,
            pixel_mm,
            provenance,
        })
    }

    pub fn size(&self) -> usize {
        self.data.nrows()
    }

    /// Physical position `(x, y)` of pixel `(row, col)` center.
    pub fn pixel_center(&self, row: usize, col: usize) -> (f64, f64) {
        let half = (self.data.ncols() as f64 - 1.0) / 2.0;
        let half_r = (self.data.nrows() as f64 - 1.0) / 2.0;
        ((col as f64 - half) * self.pixel_mm, (row as f64 - half_r) * self.pixel_mm)
    }
}

/// Slices on a uniform z grid; with `f > 0` every `(f+1)`-th slice is an
/// output target and the ones between are intermediate overlapped slices.
#[derive(Clone, Debug, PartialEq)]
pub struct VolumeSequence {
    pub slices: Vec<SliceImage>,
    pub spacing_mm: f64,
    pub f: usize,
}

impl VolumeSequence {
    pub fn new(slices: Vec<SliceImage>, spacing_mm: f64, f: usize) -> Result<Self> {
        let v = Self { slices, spacing_mm, f };
        v.validate()?;
        Ok(v)
    }

    pub fn validate(&self) -> Result<()> {
        if self.slices.is_empty() {
            return Err(Error::InvalidArgument("empty volume".into()));
        }
        if (self.slices.len() - 1) % (self.f + 1) != 0 {
            return Err(Error::stage(
                "volume",
                format!("{} slices do not fit a stride of F+1 = {}", self.slices.len(), self.f + 1),
            ));
        }
        for w in self.slices.windows(2) {
            let dz = w[1].z_mm - w[0].z_mm;
            if !(dz > 0.0) || (dz - self.spacing_mm).abs() > 1e-6 * self.spacing_mm.max(1.0) {
                return Err(Error::stage("volume", format!("non-uniform z spacing {dz} (expected {})", self.spacing_mm)));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.slices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slices.is_empty()
    }

    /// Zero-based index `q` is a refinement target when `q ≡ 0 (mod F+1)`,
    /// i.e. the 1-based `q ≡ 1` rule.
    pub fn is_target(&self, q: usize) -> bool {
        q % (self.f + 1) == 0
    }

    pub fn target_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&q| self.is_target(q)).collect()
    }

    pub fn z_grid(&self) -> Vec<f64> {
        self.slices.iter().map(|s| s.z_mm).collect()
    }
}
