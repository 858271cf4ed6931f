//! Detector frames, view streams and analytic forward projection.

use ndarray::Array2;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::ScannerGeometry;
use crate::phantom::Phantom;

/// One view of line-integral data, `detector_rows × detector_cols`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionFrame {
    pub data: Array2<f64>,
    pub view: usize,
    pub gantry_angle_rad: f64,
    pub z_mm: f64,
    /// Incident photon counts per element, once a dose has been assigned.
    pub n0: Option<Array2<f64>>,
}

impl ProjectionFrame {
    pub fn shape(&self) -> (usize, usize) {
        self.data.dim()
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("view {}: non-finite projection value", self.view)));
        }
        if let Some(n0) = &self.n0 {
            if n0.dim() != self.data.dim() {
                let (a, b) = self.data.dim();
                let (c, d) = n0.dim();
                return Err(Error::shape(&[a, b], &[c, d]));
            }
            if n0.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
                return Err(Error::InvalidArgument(format!("view {}: n0 must be > 0", self.view)));
            }
        }
        Ok(())
    }
}

/// Consecutive views of one helical acquisition.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionStream {
    pub frames: Vec<ProjectionFrame>,
    pub geometry: ScannerGeometry,
}

impl ProjectionStream {
    pub fn new(frames: Vec<ProjectionFrame>, geometry: ScannerGeometry) -> Result<Self> {
        let s = Self { frames, geometry };
        s.validate()?;
        Ok(s)
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn first_view(&self) -> usize {
        self.frames.first().map_or(0, |f| f.view)
    }

    pub fn validate(&self) -> Result<()> {
        let shape = (self.geometry.detector_rows, self.geometry.detector_cols);
        for (k, f) in self.frames.iter().enumerate() {
            if f.shape() != shape {
                return Err(Error::shape(&[shape.0, shape.1], &[f.shape().0, f.shape().1]));
            }
            if k > 0 && f.view != self.frames[k - 1].view + 1 {
                return Err(Error::InvalidArgument(format!(
                    "frame views must increase by 1 (got {} after {})",
                    f.view,
                    self.frames[k - 1].view
                )));
            }
            f.validate()?;
        }
        Ok(())
    }

    /// Same stream with new data per frame (metadata copied, n0 kept).
    pub fn with_data(&self, data: Vec<Array2<f64>>) -> Self {
        assert_eq!(data.len(), self.frames.len());
        let frames = self
            .frames
            .iter()
            .zip(data)
            .map(|(f, d)| ProjectionFrame { data: d, ..f.clone() })
            .collect();
        Self {
            frames,
            geometry: self.geometry.clone(),
        }
    }

    pub fn n0_maps(&self) -> Option<Vec<&Array2<f64>>> {
        self.frames.iter().map(|f| f.n0.as_ref()).collect()
    }
}

/// Projects `views` consecutive views starting at view 0.
pub fn forward_project(phantom: &Phantom, geom: &ScannerGeometry, views: usize) -> Result<ProjectionStream> {
    forward_project_range(phantom, geom, 0, views)
}

pub fn forward_project_range(
    phantom: &Phantom,
    geom: &ScannerGeometry,
    first_view: usize,
    views: usize,
) -> Result<ProjectionStream> {
    if views == 0 {
        return Err(Error::InvalidArgument("views must be >= 1".into()));
    }
    geom.validate()?;
    phantom.validate()?;
    let (rows, cols) = (geom.detector_rows, geom.detector_cols);
    let frames = (first_view..first_view + views)
        .into_par_iter()
        .map(|view| {
            let data = Array2::from_shape_fn((rows, cols), |(r, c)| {
                phantom.line_integral(&geom.ray_unchecked(view as f64, r as f64, c as f64))
            });
            let (angle, z) = geom.source_position(view);
            ProjectionFrame {
                data,
                view,
                gantry_angle_rad: angle,
                z_mm: z,
                n0: None,
            }
        })
        .collect();
    ProjectionStream::new(frames, geom.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::Ellipsoid;

    fn small_geom() -> ScannerGeometry {
        ScannerGeometry {
            focal_length_mm: 400.0,
            detector_rows: 3,
            detector_cols: 41,
            channel_angle_step_rad: 0.01,
            row_spacing_iso_mm: 1.0,
            views_per_rotation: 64,
            table_feed_mm: 3.0,
            slice_thickness_mm: 2.0,
            z_start_mm: 0.0,
        }
    }

    #[test]
    fn empty_phantom_gives_zero_stream() {
        let s = forward_project(&Phantom::default(), &small_geom(), 5).unwrap();
        assert_eq!(s.len(), 5);
        assert!(s.frames.iter().all(|f| f.data.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn centered_cylinder_is_rotation_invariant() {
        let p = Phantom {
            ellipsoids: vec![Ellipsoid::cylinder([0.0, 0.0], 50.0, 0.02)],
            ..Phantom::default()
        };
        let s = forward_project(&p, &small_geom(), 40).unwrap();
        let ref_row = s.frames[0].data.row(1).to_owned();
        for f in &s.frames {
            for (a, b) in f.data.row(1).iter().zip(ref_row.iter()) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn zero_views_rejected() {
        assert!(forward_project(&Phantom::default(), &small_geom(), 0).is_err());
    }
}
