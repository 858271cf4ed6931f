use ndarray::Array2;
use rayon::prelude::*;
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Radially averaged spectrum: `freq_per_mm[k] = k·Δf`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RadialCurve {
    pub freq_per_mm: Vec<f64>,
    pub value: Vec<f64>,
    /// Number of 2-D samples averaged into each bin.
    pub counts: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NpsResult {
    /// Ensemble-averaged 2-D NPS (HU²·mm²), unshifted DFT order.
    pub nps2d: Array2<f64>,
    pub radial: RadialCurve,
    pub df_x: f64,
    pub df_y: f64,
    /// Mean variance of the detrended ROIs (HU²).
    pub detrended_variance: f64,
}

/// Solves a small dense system with partial pivoting.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            for c in col..n {
                a[r][c] -= f * a[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|c| a[r][c] * x[c]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    Some(x)
}

/// Subtracts the least-squares second-order polynomial in (x, y).
/// Returns the residual and the variance of the fitted surface.
pub fn detrend_quadratic(roi: &Array2<f64>) -> (Array2<f64>, f64) {
    let (h, w) = roi.dim();
    let coord = |i: usize, n: usize| if n > 1 { 2.0 * i as f64 / (n - 1) as f64 - 1.0 } else { 0.0 };
    let basis = |r: usize, c: usize| {
        let (x, y) = (coord(c, w), coord(r, h));
        [1.0, x, y, x * x, x * y, y * y]
    };
    let mut ata = vec![vec![0.0; 6]; 6];
    let mut atb = vec![0.0; 6];
    for ((r, c), &v) in roi.indexed_iter() {
        let phi = basis(r, c);
        for i in 0..6 {
            atb[i] += phi[i] * v;
            for j in 0..6 {
                ata[i][j] += phi[i] * phi[j];
            }
        }
    }
    let coef = solve(ata, atb).unwrap_or_else(|| {
        let m = roi.iter().sum::<f64>() / roi.len() as f64;
        vec![m, 0.0, 0.0, 0.0, 0.0, 0.0]
    });
    let fit = Array2::from_shape_fn((h, w), |(r, c)| basis(r, c).iter().zip(&coef).map(|(p, k)| p * k).sum::<f64>());
    let fm = fit.iter().sum::<f64>() / fit.len() as f64;
    let fit_var = fit.iter().map(|v| (v - fm).powi(2)).sum::<f64>() / fit.len() as f64;
    (roi - &fit, fit_var)
}

fn fft2_power(x: &Array2<f64>, planner: &mut FftPlanner<f64>) -> Array2<f64> {
    let (h, w) = x.dim();
    let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
    let row_fft = planner.plan_fft_forward(w);
    for row in buf.chunks_mut(w) {
        row_fft.process(row);
    }
    let col_fft = planner.plan_fft_forward(h);
    let mut col = vec![Complex::new(0.0, 0.0); h];
    for c in 0..w {
        for r in 0..h {
            col[r] = buf[r * w + c];
        }
        col_fft.process(&mut col);
        for r in 0..h {
            buf[r * w + c] = col[r];
        }
    }
    Array2::from_shape_vec((h, w), buf.iter().map(|z| z.norm_sqr()).collect()).unwrap()
}

/// Signed DFT frequency index of bin `k` out of `n`.
fn signed(k: usize, n: usize) -> f64 {
    if k <= n / 2 {
        k as f64
    } else {
        k as f64 - n as f64
    }
}

/// Noise power spectrum of uniform-region ROIs: quadratic detrending,
/// `NPS = Δx·Δy/(Nx·Ny)·|DFT|²`, ensemble average, then radial average in
/// bins of the fundamental frequency up to Nyquist.
///
/// An ROI whose detrended variance exceeds ten times the ensemble median
/// (or whose polynomial fit dominates its variance) is taken to straddle an
/// edge and rejected.
pub fn nps(rois: &[Array2<f64>], pixel_mm: f64) -> Result<NpsResult> {
    if rois.len() < 2 {
        return Err(Error::InvalidArgument(format!("NPS needs at least 2 ROIs, got {}", rois.len())));
    }
    let dim = rois[0].dim();
    if dim.0 != dim.1 || dim.0 < 4 {
        return Err(Error::InvalidArgument(format!("NPS ROIs must be square and at least 4×4, got {dim:?}")));
    }
    if let Some(bad) = rois.iter().position(|r| r.dim() != dim) {
        return Err(Error::InvalidArgument(format!("ROI {bad} differs in size from ROI 0")));
    }
    if !(pixel_mm > 0.0) {
        return Err(Error::InvalidArgument("pixel size must be > 0".into()));
    }
    let detrended: Vec<(Array2<f64>, f64)> = rois.par_iter().map(detrend_quadratic).collect();
    let vars: Vec<f64> = detrended.iter().map(|(d, _)| d.iter().map(|v| v * v).sum::<f64>() / d.len() as f64).collect();
    let mut sorted = vars.clone();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[sorted.len() / 2];
    for (k, ((_, fit_var), &v)) in detrended.iter().zip(&vars).enumerate() {
        let outlier = v > 10.0 * median + 1e-12;
        let trend_dominated = *fit_var > 25.0 * median.max(v) + 1e-12 && *fit_var > 1.0;
        if outlier || trend_dominated {
            return Err(Error::InvalidArgument(format!(
                "ROI {k} does not look uniform (detrended variance {v:.3e}, fit variance {fit_var:.3e}, ensemble median {median:.3e}); it may touch an edge"
            )));
        }
    }

    let (h, w) = dim;
    let norm = pixel_mm * pixel_mm / (h * w) as f64;
    let mut acc = Array2::<f64>::zeros(dim);
    let mut planner = FftPlanner::new();
    for (d, _) in &detrended {
        acc += &fft2_power(d, &mut planner);
    }
    let nps2d = acc * (norm / rois.len() as f64);

    let df_x = 1.0 / (w as f64 * pixel_mm);
    let df_y = 1.0 / (h as f64 * pixel_mm);
    let nbins = h / 2 + 1;
    let mut sum = vec![0.0; nbins];
    let mut cnt = vec![0usize; nbins];
    for ((r, c), &v) in nps2d.indexed_iter() {
        let fx = signed(c, w) * df_x;
        let fy = signed(r, h) * df_y;
        let k = ((fx * fx + fy * fy).sqrt() / df_x).round() as usize;
        if k < nbins {
            sum[k] += v;
            cnt[k] += 1;
        }
    }
    let radial = RadialCurve {
        freq_per_mm: (0..nbins).map(|k| k as f64 * df_x).collect(),
        value: sum.iter().zip(&cnt).map(|(s, &n)| if n > 0 { s / n as f64 } else { 0.0 }).collect(),
        counts: cnt,
    };
    Ok(NpsResult {
        nps2d,
        radial,
        df_x,
        df_y,
        detrended_variance: vars.iter().sum::<f64>() / vars.len() as f64,
    })
}
