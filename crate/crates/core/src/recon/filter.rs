use std::f64::consts::PI;

use ndarray::Array2;
use rayon::prelude::*;
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rebin::RebinnedSinogram;

/// Symmetric odd-length convolution kernel.
#[derive(Clone, Debug, PartialEq)]
pub struct FilterKernel {
    pub taps: Vec<f64>,
    pub sample_spacing_mm: f64,
}

impl FilterKernel {
    pub fn half_len(&self) -> usize {
        self.taps.len() / 2
    }

    /// Tap at signed lag `n`, zero beyond the kernel support.
    pub fn tap(&self, n: isize) -> f64 {
        let h = self.half_len() as isize;
        if n.abs() > h {
            0.0
        } else {
            self.taps[(n + h) as usize]
        }
    }
}

/// Shepp–Logan ramp kernel, `taps[n] = −2/(π²·Δ²·(4n²−1))`.
pub fn shepp_logan_kernel(length: usize, spacing_mm: f64) -> Result<FilterKernel> {
    if length < 3 || length % 2 == 0 {
        return Err(Error::InvalidArgument(format!("kernel length must be odd and >= 3, got {length}")));
    }
    if !(spacing_mm > 0.0) {
        return Err(Error::InvalidArgument("kernel spacing must be > 0".into()));
    }
    let h = (length / 2) as isize;
    let taps = (-h..=h)
        .map(|n| {
            let n = n as f64;
            -2.0 / (PI * PI * spacing_mm * spacing_mm * (4.0 * n * n - 1.0))
        })
        .collect();
    Ok(FilterKernel {
        taps,
        sample_spacing_mm: spacing_mm,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvolutionPath {
    #[default]
    Direct,
    Fft,
}

/// Ramp-filtered sinogram, ready for back-projection.
#[derive(Clone, Debug, PartialEq)]
pub struct FilteredSinogram(pub RebinnedSinogram);

impl std::ops::Deref for FilteredSinogram {
    type Target = RebinnedSinogram;

    fn deref(&self) -> &RebinnedSinogram {
        &self.0
    }
}

fn convolve_direct(row: &[f64], kernel: &FilterKernel, out: &mut [f64]) {
    let n = row.len() as isize;
    let h = kernel.half_len() as isize;
    let dx = kernel.sample_spacing_mm;
    for (i, o) in out.iter_mut().enumerate() {
        let i = i as isize;
        let lo = (i - h).max(0);
        let hi = (i + h).min(n - 1);
        let mut acc = 0.0;
        for k in lo..=hi {
            acc += kernel.taps[(i - k + h) as usize] * row[k as usize];
        }
        *o = acc * dx;
    }
}

struct FftConvolver {
    size: usize,
    spectrum: Vec<Complex<f64>>,
    forward: std::sync::Arc<dyn rustfft::Fft<f64>>,
    inverse: std::sync::Arc<dyn rustfft::Fft<f64>>,
}

impl FftConvolver {
    fn new(kernel: &FilterKernel, len: usize) -> Self {
        let reach = kernel.half_len().min(len.saturating_sub(1));
        let size = (len + 2 * reach + 1).next_power_of_two();
        let mut planner = FftPlanner::new();
        let forward = planner.plan_fft_forward(size);
        let inverse = planner.plan_fft_inverse(size);
        let mut spectrum = vec![Complex::new(0.0, 0.0); size];
        for n in -(reach as isize)..=(reach as isize) {
            let idx = n.rem_euclid(size as isize) as usize;
            spectrum[idx] = Complex::new(kernel.tap(n) * kernel.sample_spacing_mm, 0.0);
        }
        forward.process(&mut spectrum);
        Self {
            size,
            spectrum,
            forward,
            inverse,
        }
    }

    fn convolve(&self, row: &[f64], out: &mut [f64]) {
        let mut buf = vec![Complex::new(0.0, 0.0); self.size];
        for (b, &v) in buf.iter_mut().zip(row) {
            b.re = v;
        }
        self.forward.process(&mut buf);
        for (b, k) in buf.iter_mut().zip(&self.spectrum) {
            *b *= k;
        }
        self.inverse.process(&mut buf);
        let scale = 1.0 / self.size as f64;
        for (o, b) in out.iter_mut().zip(&buf) {
            *o = b.re * scale;
        }
    }
}

/// Convolves every (angle, row) line along the distance axis. Samples outside
/// the support are treated as zero and zeroed again afterwards.
pub fn filter_projection(sino: &RebinnedSinogram, kernel: &FilterKernel, path: ConvolutionPath) -> Result<FilteredSinogram> {
    let spacing = sino.grid.distance_spacing_mm;
    if (kernel.sample_spacing_mm - spacing).abs() > 1e-9 * spacing {
        return Err(Error::InvalidArgument(format!(
            "kernel spacing {} does not match sinogram spacing {spacing}",
            kernel.sample_spacing_mm
        )));
    }
    let nd = sino.grid.num_distances;
    let fft = matches!(path, ConvolutionPath::Fft).then(|| FftConvolver::new(kernel, nd));
    let frames = sino
        .frames
        .par_iter()
        .enumerate()
        .map(|(j, frame)| {
            let support = sino.support.row(j);
            let mut out = Array2::zeros(frame.dim());
            let mut line = vec![0.0; nd];
            let mut filtered = vec![0.0; nd];
            for r in 0..frame.nrows() {
                for i in 0..nd {
                    line[i] = if support[i] { frame[[r, i]] } else { 0.0 };
                }
                match &fft {
                    Some(c) => c.convolve(&line, &mut filtered),
                    None => convolve_direct(&line, kernel, &mut filtered),
                }
                for i in 0..nd {
                    out[[r, i]] = if support[i] { filtered[i] } else { 0.0 };
                }
            }
            out
        })
        .collect();
    Ok(FilteredSinogram(sino.with_frames(frames)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn center_tap_and_symmetry() {
        let k = shepp_logan_kernel(11, 0.5).unwrap();
        assert!((k.taps[5] - 2.0 / (PI * PI * 0.25)).abs() < 1e-14);
        for n in 0..11 {
            assert_eq!(k.taps[n], k.taps[10 - n]);
        }
    }

    #[test]
    fn tap_sum_vanishes_at_default_length() {
        let k = shepp_logan_kernel(1025, 1.0).unwrap();
        let s: f64 = k.taps.iter().sum();
        assert!(s.abs() <= 1e-3, "{s}");
        // partial sums telescope to (2/π²)/(2N+1)
        assert!((s - 2.0 / (PI * PI) / 1025.0).abs() < 1e-12);
    }

    #[test]
    fn even_or_short_length_rejected() {
        assert!(shepp_logan_kernel(10, 1.0).is_err());
        assert!(shepp_logan_kernel(1, 1.0).is_err());
    }

    #[test]
    fn impulse_returns_kernel() {
        let k = shepp_logan_kernel(7, 1.0).unwrap();
        let mut row = vec![0.0; 15];
        row[7] = 1.0;
        let mut out = vec![0.0; 15];
        convolve_direct(&row, &k, &mut out);
        for n in -3isize..=3 {
            assert_eq!(out[(7 + n) as usize], k.tap(n));
        }
        assert_eq!(out[3], 0.0);
    }

    #[test]
    fn constant_row_center_is_near_zero() {
        let k = shepp_logan_kernel(1025, 1.0).unwrap();
        let row = vec![3.0; 1025];
        let mut out = vec![0.0; 1025];
        convolve_direct(&row, &k, &mut out);
        assert!(out[512].abs() <= 1e-3 * 3.0);
    }

    #[test]
    fn fft_matches_direct() {
        let k = shepp_logan_kernel(201, 0.7).unwrap();
        let row: Vec<f64> = (0..83).map(|i| ((i * 37 % 11) as f64).sin() + 0.1 * i as f64).collect();
        let mut a = vec![0.0; 83];
        let mut b = vec![0.0; 83];
        convolve_direct(&row, &k, &mut a);
        FftConvolver::new(&k, 83).convolve(&row, &mut b);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-10, "{x} {y}");
        }
    }
}
