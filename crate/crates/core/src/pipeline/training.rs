use ndarray::Array2;

use super::sim::{simulate_phantom, Simulation};
use super::{projection_stage, recon_options, reconstruct};
use crate::config::{DenoiseMode, PipelineConfig};
use crate::denoise::{
    train, Dataset, Example, MirConfig, MirMode, MirModel, MirNorm, MpdConfig, MpdModel, MpdNorm, TrainOutcome, TrainState,
};
use crate::error::{Error, Result};
use crate::phantom::random_phantom;
use crate::rebin::{integer_slice, integer_slice_maps, rebin, CandidateStream, RebinPlan};
use crate::recon::{HuConvention, Provenance, VolumeSequence};

const MPD_INIT: u64 = 0x6d70_6469;
const MIR_INIT: u64 = 0x6d69_7269;
const MPD_BATCHES: u64 = 0x6d70_6462;
const MIR_BATCHES: u64 = 0x6d69_7262;

fn noise_seed(cfg: &PipelineConfig, phantom_seed: u64) -> u64 {
    cfg.seed ^ phantom_seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

fn phantom_seeds(cfg: &PipelineConfig, validation: bool) -> Vec<u64> {
    let t = &cfg.train;
    let base = t.phantom_seed;
    if validation {
        (0..t.val_phantoms as u64).map(|k| base + t.phantoms as u64 + k).collect()
    } else {
        (0..t.phantoms as u64).map(|k| base + k).collect()
    }
}

/// Simulations of one random phantom at every training dose fraction.
fn simulations(cfg: &PipelineConfig, seed: u64) -> Result<Vec<Simulation>> {
    let (a, b) = cfg.source_z_range();
    let phantom = random_phantom(&cfg.train.bounds, 0.5 * (a + b), seed);
    let fr = &cfg.train.dose_fractions;
    let first = simulate_phantom(cfg, phantom, Vec::new(), fr[0], noise_seed(cfg, seed))?;
    let mut out = Vec::with_capacity(fr.len());
    for &f in &fr[1..] {
        out.push(first.at_fraction(f)?);
    }
    out.insert(0, first);
    Ok(out)
}

/// First slice and slice count covering the z range reconstructable from a
/// training acquisition: one table feed of margin at each end.
pub fn training_z_grid(cfg: &PipelineConfig) -> Result<(f64, usize)> {
    let (a, b) = cfg.source_z_range();
    let margin = cfg.geometry.table_feed_mm;
    let span = (b - a) - 2.0 * margin;
    let spacing = cfg.recon.slice_spacing_mm;
    if span < 2.0 * spacing {
        return Err(Error::Config(format!(
            "acquisition.views covers {:.1} mm of table travel; training needs at least {:.1} mm",
            b - a,
            2.0 * margin + 2.0 * spacing
        )));
    }
    let targets = (span / spacing).floor() as usize + 1;
    let first = 0.5 * (a + b) - 0.5 * (targets - 1) as f64 * spacing;
    Ok((first, targets))
}

fn to_plane(m: &Array2<f64>, scale: f64) -> Array2<f32> {
    m.mapv(|v| (v / scale) as f32)
}

/// Candidate frames whose in-fan columns are all gathered.
fn complete_frames(s: &CandidateStream, in_fan: &[bool]) -> Vec<bool> {
    (0..s.len())
        .map(|j| in_fan.iter().enumerate().all(|(i, &f)| !f || s.valid[[j, i]]))
        .collect()
}

struct MpdSides {
    low: [CandidateStream; 2],
    prior: [CandidateStream; 2],
    full: [CandidateStream; 2],
    in_fan: Vec<bool>,
}

fn mpd_sides(cfg: &PipelineConfig, sim: &Simulation) -> Result<MpdSides> {
    let plan = RebinPlan::for_stream(&sim.low, &cfg.rebin_grid())?;
    let (ll, lr) = integer_slice(&sim.low, &plan)?;
    let (fl, fr) = integer_slice(&sim.full, &plan)?;
    let (pl, pr) = integer_slice_maps(&sim.prior.iter().collect::<Vec<_>>(), &plan)?;
    Ok(MpdSides {
        low: [ll, lr],
        prior: [pl, pr],
        full: [fl, fr],
        in_fan: plan.in_fan(),
    })
}

/// Windows of candidate frames (interleaved low-dose frame and Φ) with the
/// full-minus-low residual of the middle frame as target, from both channel
/// sides of every phantom and dose. The normalization is estimated from the
/// first phantom unless given.
pub fn build_mpd_dataset(cfg: &PipelineConfig, seeds: &[u64], norm: Option<MpdNorm>) -> Result<(Dataset, MpdNorm)> {
    let f = cfg.recon.f;
    let mut data = Dataset::default();
    let mut norm = norm;
    for &seed in seeds {
        let sims = simulations(cfg, seed)?;
        for sim in &sims {
            let sides = mpd_sides(cfg, sim)?;
            let nm = *norm.get_or_insert_with(|| {
                let pick = |s: &[CandidateStream; 2]| s.iter().flat_map(|c| c.frames.iter().cloned()).collect::<Vec<_>>();
                MpdNorm::estimate(&pick(&sides.low), &pick(&sides.prior), &pick(&sides.full))
            });
            for side in 0..2 {
                let low = &sides.low[side];
                let complete = complete_frames(low, &sides.in_fan);
                let k = low.len();
                let mut planes: Vec<Option<(usize, usize)>> = vec![None; k];
                for j in f..k.saturating_sub(f) {
                    if !(j - f..=j + f).all(|t| complete[t]) {
                        continue;
                    }
                    let mut inputs = Vec::with_capacity(2 * (2 * f + 1));
                    for t in j - f..=j + f {
                        let (a, b) = *planes[t].get_or_insert_with(|| {
                            (
                                data.push_plane(to_plane(&low.frames[t], nm.frame_scale)),
                                data.push_plane(to_plane(&sides.prior[side].frames[t], nm.prior_scale)),
                            )
                        });
                        inputs.push(a);
                        inputs.push(b);
                    }
                    let target = &sides.full[side].frames[j] - &low.frames[j];
                    let target = data.push_plane(to_plane(&target, nm.residual_scale));
                    data.examples.push(Example { inputs, target });
                }
            }
        }
    }
    let norm = norm.ok_or_else(|| Error::Config("train.phantoms must be >= 1".into()))?;
    Ok((data, norm))
}

struct MirVolumes {
    images: VolumeSequence,
    residuals: Option<VolumeSequence>,
    full: VolumeSequence,
}

fn mir_volumes(cfg: &PipelineConfig, sim: &Simulation, mpd: &MpdModel, mode: MirMode) -> Result<MirVolumes> {
    let mut c = cfg.clone();
    c.denoiser.mode = DenoiseMode::MpdMir;
    let f = cfg.recon.f;
    let plan = RebinPlan::for_stream(&sim.low, &cfg.rebin_grid())?;
    let proj = projection_stage(&c, sim, &plan, Some(mpd))?;
    let (z0, count) = training_z_grid(cfg)?;
    let mu = sim.phantom.mu_water_per_mm;
    let abs = recon_options(cfg, mu, HuConvention::Absolute);
    let full = reconstruct(cfg, &rebin(&sim.full, &plan)?, z0, count, f, &abs, Provenance::FullDose)?;
    Ok(match mode {
        MirMode::Decoupled => MirVolumes {
            images: reconstruct(cfg, &proj.noisy, z0, count, f, &abs, Provenance::Raw)?,
            residuals: Some(reconstruct(
                cfg,
                &proj.residual,
                z0,
                count,
                f,
                &recon_options(cfg, mu, HuConvention::Difference),
                Provenance::Residual,
            )?),
            full,
        },
        MirMode::Coupled => MirVolumes {
            images: reconstruct(cfg, &proj.denoised, z0, count, f, &abs, Provenance::DenoisedProjection)?,
            residuals: None,
            full,
        },
    })
}

fn mean_abs(maps: impl Iterator<Item = Array2<f64>>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for m in maps {
        s += m.iter().map(|v| v.abs()).sum::<f64>();
        n += m.len();
    }
    let v = if n > 0 { s / n as f64 } else { 0.0 };
    if v > 1e-9 && v.is_finite() {
        v
    } else {
        1.0
    }
}

/// Slice windows of the MPD-processed reconstructions with the full-dose
/// reconstruction minus the input image as target. Every slice with a full
/// window is used, targets and intermediates alike.
pub fn build_mir_dataset(cfg: &PipelineConfig, mpd: &MpdModel, seeds: &[u64], mode: MirMode, norm: Option<MirNorm>) -> Result<(Dataset, MirNorm)> {
    let f = cfg.recon.f;
    let mut data = Dataset::default();
    let mut norm = norm;
    for &seed in seeds {
        for sim in &simulations(cfg, seed)? {
            let v = mir_volumes(cfg, sim, mpd, mode)?;
            let nm = *norm.get_or_insert_with(|| MirNorm {
                image_scale: 1000.0,
                residual_in_scale: v
                    .residuals
                    .as_ref()
                    .map_or(1.0, |r| mean_abs(r.slices.iter().map(|s| s.data.clone()))),
                residual_out_scale: mean_abs(v.full.slices.iter().zip(&v.images.slices).map(|(a, b)| &a.data - &b.data)),
            });
            let q = v.images.len();
            let mut ids = Vec::with_capacity(q);
            for k in 0..q {
                let img = data.push_plane(to_plane(&v.images.slices[k].data, nm.image_scale));
                let res = v
                    .residuals
                    .as_ref()
                    .map(|r| data.push_plane(to_plane(&r.slices[k].data, nm.residual_in_scale)));
                ids.push((img, res));
            }
            for c in f..q.saturating_sub(f) {
                let mut inputs = Vec::new();
                for &(img, res) in &ids[c - f..=c + f] {
                    inputs.push(img);
                    inputs.extend(res);
                }
                let t = &v.full.slices[c].data - &v.images.slices[c].data;
                let target = data.push_plane(to_plane(&t, nm.residual_out_scale));
                data.examples.push(Example { inputs, target });
            }
        }
    }
    let norm = norm.ok_or_else(|| Error::Config("train.phantoms must be >= 1".into()))?;
    Ok((data, norm))
}

/// Trains (or resumes) the projection-domain cascade on random phantoms.
pub fn train_mpd(cfg: &PipelineConfig, resume: Option<(MpdModel, TrainState)>) -> Result<(MpdModel, TrainOutcome)> {
    let prior_norm = resume.as_ref().map(|(m, _)| m.norm);
    log::info!("building MPD training set ({} phantoms)", cfg.train.phantoms);
    let (data, norm) = build_mpd_dataset(cfg, &phantom_seeds(cfg, false), prior_norm)?;
    let (val, _) = build_mpd_dataset(cfg, &phantom_seeds(cfg, true), Some(norm))?;
    let (mut model, state) = match resume {
        Some((m, s)) => (m, Some(s)),
        None => (
            MpdModel::new(
                MpdConfig {
                    f: cfg.recon.f,
                    widths: cfg.denoiser.mpd_widths,
                    priors_to_step2: cfg.denoiser.priors_to_step2,
                },
                norm,
                cfg.seed ^ MPD_INIT,
            )?,
            None,
        ),
    };
    let mut tc = cfg.train.mpd.clone();
    tc.seed ^= cfg.seed ^ MPD_BATCHES;
    log::info!("training MPD on {} windows ({} validation)", data.len(), val.len());
    let outcome = train(&mut model, &data, Some(&val), &tc, state)?;
    Ok((model, outcome))
}

/// Trains (or resumes) the image-domain refiner on reconstructions produced
/// with the given MPD model.
pub fn train_mir(cfg: &PipelineConfig, mpd: &MpdModel, resume: Option<(MirModel, TrainState)>) -> Result<(MirModel, TrainOutcome)> {
    if mpd.config.f != cfg.recon.f {
        return Err(Error::stage("mir", format!("MPD checkpoint window F = {} but recon.f = {}", mpd.config.f, cfg.recon.f)));
    }
    let mode = cfg.denoiser.mir_mode;
    let prior_norm = resume.as_ref().map(|(m, _)| m.norm);
    log::info!("building MIR training set ({} phantoms)", cfg.train.phantoms);
    let (data, norm) = build_mir_dataset(cfg, mpd, &phantom_seeds(cfg, false), mode, prior_norm)?;
    let (val, _) = build_mir_dataset(cfg, mpd, &phantom_seeds(cfg, true), mode, Some(norm))?;
    let (mut model, state) = match resume {
        Some((m, s)) => (m, Some(s)),
        None => (
            MirModel::new(
                MirConfig {
                    f: cfg.recon.f,
                    widths: cfg.denoiser.mir_widths,
                    mode,
                },
                norm,
                cfg.seed ^ MIR_INIT,
            )?,
            None,
        ),
    };
    let mut tc = cfg.train.mir.clone();
    tc.seed ^= cfg.seed ^ MIR_BATCHES;
    log::info!("training MIR on {} windows ({} validation)", data.len(), val.len());
    let outcome = train(&mut model, &data, Some(&val), &tc, state)?;
    Ok((model, outcome))
}
