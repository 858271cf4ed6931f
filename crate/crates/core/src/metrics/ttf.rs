use serde::{Deserialize, Serialize};

use super::Circle;
use crate::error::{Error, Result};
use crate::recon::SliceImage;

/// Oversampling of the radial edge-spread function, in pixels per bin.
const ESF_BIN_PX: f64 = 0.1;
/// Frequency sampling of the reported curve, in cycles per pixel.
const TTF_STEP_PX: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TtfCurve {
    pub freq_per_mm: Vec<f64>,
    /// Modulation, 1 at zero frequency.
    pub ttf: Vec<f64>,
    pub center_mm: [f64; 2],
    pub contrast_hu: f64,
}

/// First frequency where the curve falls to `level`, linearly interpolated.
pub fn frequency_at(curve: &TtfCurve, level: f64) -> Option<f64> {
    let (f, t) = (&curve.freq_per_mm, &curve.ttf);
    for k in 1..t.len() {
        if t[k] <= level && t[k - 1] > level {
            let a = (t[k - 1] - level) / (t[k - 1] - t[k]);
            return Some(f[k - 1] + a * (f[k] - f[k - 1]));
        }
    }
    None
}

fn mean_image(images: &[&SliceImage]) -> Result<Vec<f64>> {
    let first = images.first().ok_or_else(|| Error::InvalidArgument("no images".into()))?;
    let n = first.size();
    let mut acc = vec![0.0; n * n];
    for img in images {
        if img.size() != n || img.pixel_mm != first.pixel_mm {
            return Err(Error::InvalidArgument("TTF images differ in size or pixel spacing".into()));
        }
        for (a, v) in acc.iter_mut().zip(img.data.iter()) {
            *a += v;
        }
    }
    let k = images.len() as f64;
    Ok(acc.into_iter().map(|v| v / k).collect())
}

/// Insert center from the centroid of the half-contrast mask, refined once by
/// a contrast-weighted centroid around the first estimate.
pub fn estimate_center(images: &[&SliceImage], insert: &Circle, contrast_hu: f64) -> Result<[f64; 2]> {
    let mean = mean_image(images)?;
    let img = images[0];
    let n = img.size();
    let rr = insert.radius_mm;
    let around = |c: [f64; 2], lo: f64, hi: f64| {
        let mut v = Vec::new();
        for r in 0..n {
            for col in 0..n {
                let (x, y) = img.pixel_center(r, col);
                let d = (x - c[0]).hypot(y - c[1]);
                if d >= lo && d < hi {
                    v.push((x, y, mean[r * n + col]));
                }
            }
        }
        v
    };
    let ring = around(insert.center_mm, 1.3 * rr, 1.8 * rr);
    if ring.is_empty() {
        return Err(Error::InvalidArgument("insert background ring is outside the image".into()));
    }
    let mut bgv: Vec<f64> = ring.iter().map(|p| p.2).collect();
    bgv.sort_by(f64::total_cmp);
    let bg = bgv[bgv.len() / 2];
    let sign = contrast_hu.signum();
    let thr = bg + 0.5 * contrast_hu;

    let centroid = |pts: &[(f64, f64, f64)], weight: &dyn Fn(f64) -> f64| -> Option<[f64; 2]> {
        let (mut sx, mut sy, mut sw) = (0.0, 0.0, 0.0);
        for &(x, y, v) in pts {
            let w = weight(v);
            sx += w * x;
            sy += w * y;
            sw += w;
        }
        (sw > 0.0).then(|| [sx / sw, sy / sw])
    };
    let disk = around(insert.center_mm, 0.0, 1.5 * rr);
    let c0 = centroid(&disk, &|v| if sign * (v - thr) > 0.0 { 1.0 } else { 0.0 })
        .ok_or_else(|| Error::InvalidArgument("insert not found: empty threshold mask".into()))?;
    let disk = around(c0, 0.0, 1.5 * rr);
    let c1 = centroid(&disk, &|v| (sign * (v - bg) / contrast_hu.abs()).clamp(0.0, 1.0))
        .ok_or_else(|| Error::InvalidArgument("insert not found: empty weighted mask".into()))?;
    let shift = (c1[0] - insert.center_mm[0]).hypot(c1[1] - insert.center_mm[1]);
    if !c1.iter().all(|v| v.is_finite()) || shift > 0.5 * rr {
        return Err(Error::InvalidArgument(format!(
            "insert not found: center estimate moved {shift:.2} mm from the nominal center"
        )));
    }
    Ok(c1)
}

/// Task transfer function of a circular insert: radial edge-spread function
/// in 0.1-pixel bins around the estimated center (pooled over `images`),
/// differentiated to a line-spread function, tapered away from the edge,
/// Fourier magnitude normalized at zero frequency.
pub fn ttf(images: &[&SliceImage], insert: &Circle, contrast_hu: f64) -> Result<TtfCurve> {
    if contrast_hu.abs() < 20.0 {
        return Err(Error::InvalidArgument(format!("TTF needs |contrast| >= 20 HU, got {contrast_hu}")));
    }
    let img = *images.first().ok_or_else(|| Error::InvalidArgument("no images".into()))?;
    let px = img.pixel_mm;
    let n = img.size();
    let half = 0.5 * n as f64 * px;
    let rr = insert.radius_mm;
    if insert.center_mm.iter().any(|c| c.abs() + rr > half) || rr <= 2.0 * px {
        return Err(Error::InvalidArgument("insert must lie inside the image and span more than 2 pixels".into()));
    }
    let center = estimate_center(images, insert, contrast_hu)?;
    let bw = ESF_BIN_PX * px;
    let rmax = 2.0 * rr;
    let nb = (rmax / bw).ceil() as usize;
    let mut sum = vec![0.0; nb];
    let mut cnt = vec![0usize; nb];
    for im in images {
        for r in 0..n {
            for c in 0..n {
                let (x, y) = im.pixel_center(r, c);
                let d = (x - center[0]).hypot(y - center[1]);
                let k = (d / bw) as usize;
                if k < nb {
                    sum[k] += im.data[[r, c]];
                    cnt[k] += 1;
                }
            }
        }
    }
    let filled: Vec<usize> = (0..nb).filter(|&k| cnt[k] > 0).collect();
    if filled.len() < 4 {
        return Err(Error::InvalidArgument("too few pixels to form an edge-spread function".into()));
    }
    let mut esf = vec![0.0; nb];
    let mut next = 0;
    for k in 0..nb {
        while next + 1 < filled.len() && filled[next] < k {
            next += 1;
        }
        let hi = filled[next];
        esf[k] = if cnt[k] > 0 {
            sum[k] / cnt[k] as f64
        } else if hi < k || next == 0 {
            sum[hi] / cnt[hi] as f64
        } else {
            let lo = filled[next - 1];
            let (a, b) = (sum[lo] / cnt[lo] as f64, sum[hi] / cnt[hi] as f64);
            a + (b - a) * (k - lo) as f64 / (hi - lo) as f64
        };
    }

    let radius = |k: usize| (k as f64 + 0.5) * bw;
    let taper = |r: f64| {
        let d = (r - rr).abs() / rr;
        if d <= 0.5 {
            1.0
        } else if d >= 0.9 {
            0.0
        } else {
            0.5 * (1.0 + (std::f64::consts::PI * (d - 0.5) / 0.4).cos())
        }
    };
    let lsf: Vec<(f64, f64)> = (1..nb - 1)
        .map(|k| {
            let r = radius(k);
            (r, taper(r) * (esf[k + 1] - esf[k - 1]) / (2.0 * bw))
        })
        .collect();
    let dft = |f: f64| -> f64 {
        let (mut re, mut im) = (0.0, 0.0);
        for &(r, v) in &lsf {
            let (s, c) = (2.0 * std::f64::consts::PI * f * r).sin_cos();
            re += v * c;
            im -= v * s;
        }
        re.hypot(im)
    };
    let dc = dft(0.0);
    if !(dc > 0.0) {
        return Err(Error::Numeric("edge-spread function has no net step".into()));
    }
    let steps = (1.0 / TTF_STEP_PX).round() as usize;
    let freq_per_mm: Vec<f64> = (0..=steps).map(|k| k as f64 * TTF_STEP_PX / px).collect();
    let ttf = freq_per_mm.iter().map(|&f| if f == 0.0 { 1.0 } else { dft(f) / dc }).collect();
    Ok(TtfCurve {
        freq_per_mm,
        ttf,
        center_mm: center,
        contrast_hu,
    })
}
