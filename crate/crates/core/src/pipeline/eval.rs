use std::collections::BTreeMap;

use ndarray::{s, Array2};

use crate::config::{MetricsConfig, NpsSpec};
use crate::error::{Error, Result};
use crate::metrics::{ct_number_pooled, mean_std, mse, nps, ssim, ttf, Circle, MetricsReport};
use crate::phantom::MaterialInsert;
use crate::recon::SliceImage;

/// What the metrics need besides the images.
#[derive(Clone, Debug, Default)]
pub struct EvalContext<'a> {
    pub reference: Option<&'a [SliceImage]>,
    pub inserts: &'a [MaterialInsert],
    pub meta: BTreeMap<String, String>,
}

/// Square ROIs of `spec` fully inside its circle, from every slice.
pub fn nps_rois(images: &[SliceImage], spec: &NpsSpec) -> Vec<Array2<f64>> {
    let mut out = Vec::new();
    for img in images {
        let n = img.size();
        let m = spec.roi_px;
        if m > n {
            continue;
        }
        let mut r0 = 0;
        while r0 + m <= n {
            let mut c0 = 0;
            while c0 + m <= n {
                let corners = [(r0, c0), (r0, c0 + m - 1), (r0 + m - 1, c0), (r0 + m - 1, c0 + m - 1)];
                let inside = corners.iter().all(|&(r, c)| {
                    let (x, y) = img.pixel_center(r, c);
                    (x - spec.center_mm[0]).hypot(y - spec.center_mm[1]) <= spec.radius_mm
                });
                if inside {
                    out.push(img.data.slice(s![r0..r0 + m, c0..c0 + m]).to_owned());
                }
                c0 += spec.stride_px;
            }
            r0 += spec.stride_px;
        }
    }
    out
}

/// MSE/SSIM against the reference, radial NPS, TTF per insert and CT numbers.
pub fn evaluate(images: &[SliceImage], cfg: &MetricsConfig, ctx: &EvalContext) -> Result<MetricsReport> {
    if images.is_empty() {
        return Err(Error::InvalidArgument("no slices to evaluate".into()));
    }
    let mut rep = MetricsReport {
        meta: ctx.meta.clone(),
        ..MetricsReport::default()
    };
    rep.meta.insert("slices".into(), images.len().to_string());
    rep.meta.insert("image".into(), images[0].provenance.as_str().into());

    if let Some(reference) = ctx.reference {
        if reference.len() != images.len() {
            return Err(Error::shape(&[reference.len()], &[images.len()]));
        }
        let mut windows: Vec<(String, Option<&crate::metrics::DisplayWindow>)> =
            cfg.windows.iter().map(|w| (w.name.clone(), Some(w))).collect();
        if cfg.raw_hu {
            windows.push(("raw_hu".into(), None));
        }
        for (name, w) in windows {
            let mut e = Vec::new();
            let mut q = Vec::new();
            for (a, b) in images.iter().zip(reference) {
                e.push(mse(&a.data, &b.data, w)?);
                q.push(ssim(&a.data, &b.data, w)?);
            }
            rep.mse.push((name.clone(), mean_std(&e).0));
            let (m, sd) = mean_std(&q);
            rep.ssim.push((name, m, sd));
        }
    }

    if let Some(spec) = &cfg.nps {
        let rois = nps_rois(images, spec);
        let r = nps(&rois, images[0].pixel_mm)?;
        rep.meta.insert("nps_rois".into(), rois.len().to_string());
        rep.nps = r.radial.freq_per_mm.iter().copied().zip(r.radial.value.iter().copied()).collect();
    }

    let refs: Vec<&SliceImage> = images.iter().collect();
    for ins in ctx.inserts {
        let circle = Circle {
            center_mm: ins.center_mm,
            radius_mm: ins.radius_mm,
        };
        if cfg.ttf && ins.nominal_hu.abs() >= 20.0 {
            match ttf(&refs, &circle, ins.nominal_hu) {
                Ok(c) => rep.ttf.push((ins.name.clone(), c.freq_per_mm.into_iter().zip(c.ttf).collect())),
                Err(e) => log::warn!("TTF of insert {} skipped: {e}", ins.name),
            }
        }
        let roi = Circle {
            center_mm: ins.center_mm,
            radius_mm: cfg.roi_fraction * ins.radius_mm,
        };
        let (m, sd) = ct_number_pooled(images, &roi)?;
        rep.ct_number.push((ins.name.clone(), m, sd));
    }
    Ok(rep)
}
