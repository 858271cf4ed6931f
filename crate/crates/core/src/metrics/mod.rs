//! Image-quality metrics: windowed MSE and SSIM, noise power spectrum,
//! task-based transfer function and CT-number ROI statistics.

mod nps;
mod report;
mod ttf;

pub use nps::{detrend_quadratic, nps, NpsResult, RadialCurve};
pub use report::{svg_line_plot, MetricsReport, ReportRow, CSV_HEADER};
pub use ttf::{estimate_center, frequency_at, ttf, TtfCurve};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::recon::SliceImage;

/// Display window (level/width in HU) mapping to 8-bit display units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DisplayWindow {
    pub name: String,
    pub level_hu: f64,
    pub width_hu: f64,
}

impl DisplayWindow {
    pub fn new(name: &str, level_hu: f64, width_hu: f64) -> Result<Self> {
        if !(width_hu > 0.0 && width_hu.is_finite() && level_hu.is_finite()) {
            return Err(Error::InvalidArgument(format!("display window width must be > 0, got {width_hu}")));
        }
        Ok(Self {
            name: name.into(),
            level_hu,
            width_hu,
        })
    }

    /// WL 40 / WW 300.
    pub fn soft_tissue() -> Self {
        Self::new("soft_tissue", 40.0, 300.0).unwrap()
    }

    /// [−1024, 3071] HU.
    pub fn full_range() -> Self {
        Self::new("full_range", 1023.5, 4095.0).unwrap()
    }

    /// `255·clamp((HU − (WL − WW/2))/WW, 0, 1)`.
    pub fn to_display(&self, hu: f64) -> f64 {
        let lo = self.level_hu - 0.5 * self.width_hu;
        ((hu - lo) / self.width_hu).clamp(0.0, 1.0) * 255.0
    }

    pub fn apply(&self, img: &Array2<f64>) -> Array2<f64> {
        img.mapv(|v| self.to_display(v))
    }
}

/// Circular region in image coordinates (mm, image centered on the axis).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Circle {
    pub center_mm: [f64; 2],
    pub radius_mm: f64,
}

fn check_same(a: &Array2<f64>, b: &Array2<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::shape(&[a.nrows(), a.ncols()], &[b.nrows(), b.ncols()]));
    }
    Ok(())
}

/// Mean squared difference, in display units when a window is given and in
/// raw HU otherwise.
pub fn mse(a: &Array2<f64>, b: &Array2<f64>, window: Option<&DisplayWindow>) -> Result<f64> {
    check_same(a, b)?;
    if a.is_empty() {
        return Err(Error::InvalidArgument("empty image".into()));
    }
    let map = |v: f64| window.map_or(v, |w| w.to_display(v));
    let s: f64 = a.iter().zip(b.iter()).map(|(&x, &y)| (map(x) - map(y)).powi(2)).sum();
    Ok(s / a.len() as f64)
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let mut t = [0.0; SSIM_WINDOW];
    let h = (SSIM_WINDOW / 2) as f64;
    for (k, v) in t.iter_mut().enumerate() {
        let d = k as f64 - h;
        *v = (-0.5 * d * d / (SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = t.iter().sum();
    t.map(|v| v / s)
}

/// Separable valid-mode Gaussian filter.
fn filter_valid(x: &Array2<f64>, taps: &[f64; SSIM_WINDOW]) -> Array2<f64> {
    let (h, w) = x.dim();
    let (oh, ow) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut tmp = Array2::<f64>::zeros((h, ow));
    for r in 0..h {
        for c in 0..ow {
            tmp[[r, c]] = taps.iter().enumerate().map(|(k, t)| t * x[[r, c + k]]).sum::<f64>();
        }
    }
    Array2::from_shape_fn((oh, ow), |(r, c)| taps.iter().enumerate().map(|(k, t)| t * tmp[[r + k, c]]).sum())
}

/// Mean structural similarity of two images already in display units with
/// dynamic range `data_range` (11×11 Gaussian window, σ = 1.5, K1 = 0.01,
/// K2 = 0.03, population covariances, border pixels within the window
/// radius excluded).
pub fn ssim_units(a: &Array2<f64>, b: &Array2<f64>, data_range: f64) -> Result<f64> {
    check_same(a, b)?;
    let (h, w) = a.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!(
            "image {h}×{w} is smaller than the {SSIM_WINDOW}×{SSIM_WINDOW} SSIM window"
        )));
    }
    let taps = gaussian_taps();
    let c1 = (0.01 * data_range).powi(2);
    let c2 = (0.03 * data_range).powi(2);
    let ux = filter_valid(a, &taps);
    let uy = filter_valid(b, &taps);
    let uxx = filter_valid(&(a * a), &taps);
    let uyy = filter_valid(&(b * b), &taps);
    let uxy = filter_valid(&(a * b), &taps);
    let mut total = 0.0;
    for i in 0..ux.len() {
        let (mx, my) = (ux.as_slice().unwrap()[i], uy.as_slice().unwrap()[i]);
        let vx = uxx.as_slice().unwrap()[i] - mx * mx;
        let vy = uyy.as_slice().unwrap()[i] - my * my;
        let vxy = uxy.as_slice().unwrap()[i] - mx * my;
        let num = (2.0 * mx * my + c1) * (2.0 * vxy + c2);
        let den = (mx * mx + my * my + c1) * (vx + vy + c2);
        total += num / den;
    }
    Ok(total / ux.len() as f64)
}

/// SSIM through a display window (range 255), or on raw HU with the
/// full-range width as dynamic range.
pub fn ssim(a: &Array2<f64>, b: &Array2<f64>, window: Option<&DisplayWindow>) -> Result<f64> {
    match window {
        Some(w) => ssim_units(&w.apply(a), &w.apply(b), 255.0),
        None => ssim_units(a, b, DisplayWindow::full_range().width_hu),
    }
}

/// Pixels whose centers fall inside `roi`.
pub fn roi_values(image: &SliceImage, roi: &Circle) -> Vec<f64> {
    let n = image.size();
    let mut out = Vec::new();
    for r in 0..n {
        for c in 0..n {
            let (x, y) = image.pixel_center(r, c);
            if (x - roi.center_mm[0]).hypot(y - roi.center_mm[1]) <= roi.radius_mm {
                out.push(image.data[[r, c]]);
            }
        }
    }
    out
}

/// Mean and population standard deviation inside a circular ROI.
pub fn ct_number(image: &SliceImage, roi: &Circle) -> Result<(f64, f64)> {
    ct_number_pooled(std::slice::from_ref(image), roi)
}

/// [`ct_number`] over the ROI pixels of several slices together.
pub fn ct_number_pooled(images: &[SliceImage], roi: &Circle) -> Result<(f64, f64)> {
    let v: Vec<f64> = images.iter().flat_map(|img| roi_values(img, roi)).collect();
    if v.is_empty() {
        return Err(Error::InvalidArgument(format!("ROI {roi:?} contains no pixel centers")));
    }
    Ok(mean_std(&v))
}

/// Mean and population standard deviation.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::recon::Provenance;

    #[test]
    fn display_mapping() {
        let w = DisplayWindow::soft_tissue();
        assert_eq!(w.to_display(-110.0), 0.0);
        assert_eq!(w.to_display(190.0), 255.0);
        assert_eq!(w.to_display(40.0), 127.5);
        assert!(DisplayWindow::new("x", 0.0, 0.0).is_err());
        let f = DisplayWindow::full_range();
        assert_eq!(f.to_display(-1024.0), 0.0);
        assert_eq!(f.to_display(3071.0), 255.0);
    }

    #[test]
    fn mse_examples() {
        let a = Array2::from_shape_fn((5, 5), |(r, c)| (r * 5 + c) as f64);
        assert_eq!(mse(&a, &a, None).unwrap(), 0.0);
        let w = DisplayWindow::soft_tissue();
        // one display unit is 300/255 HU
        let b = a.mapv(|v| v + 300.0 / 255.0);
        assert!((mse(&a, &b, Some(&w)).unwrap() - 1.0).abs() < 1e-12);
        assert!(mse(&a, &Array2::zeros((4, 5)), None).is_err());
    }

    #[test]
    fn ssim_identity_and_anticorrelation() {
        let x = Array2::from_shape_fn((32, 32), |(r, c)| if (r / 4 + c / 4) % 2 == 0 { 30.0 } else { 220.0 });
        assert_eq!(ssim_units(&x, &x, 255.0).unwrap(), 1.0);
        let y = x.mapv(|v| 255.0 - v);
        assert!(ssim_units(&x, &y, 255.0).unwrap() < 0.0);
        assert!(ssim_units(&Array2::zeros((10, 20)), &Array2::zeros((10, 20)), 255.0).is_err());
    }

    #[test]
    fn ct_number_constant_region() {
        let img = SliceImage::new(Array2::from_elem((16, 16), 120.0), 0.0, 1.0, Provenance::Raw).unwrap();
        let (m, s) = ct_number(
            &img,
            &Circle {
                center_mm: [0.0, 0.0],
                radius_mm: 4.0,
            },
        )
        .unwrap();
        assert_eq!((m, s), (120.0, 0.0));
        assert!(ct_number(
            &img,
            &Circle {
                center_mm: [100.0, 0.0],
                radius_mm: 1.0
            }
        )
        .is_err());
    }
}
