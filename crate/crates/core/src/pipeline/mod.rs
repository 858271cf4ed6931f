//! End-to-end orchestration shared by the CLI, the C ABI and the tests.
//!
//! Projection domain: integer slicing, per-side denoising of the candidate
//! streams, weighted summation. Image domain: wFBP of the noisy, residual and
//! denoised sinograms on a grid with `F` intermediate slices between targets,
//! then refinement of every target from its `2F+1` slice window.

mod eval;
mod sim;
mod training;

pub use eval::{evaluate, nps_rois, EvalContext};
pub use sim::{load_simulation, save_simulation, simulate, simulate_phantom, Simulation};
pub use training::{build_mir_dataset, build_mpd_dataset, train_mir, train_mpd, training_z_grid};

use ndarray::Array2;
use rayon::prelude::*;

use crate::config::{DenoiseMode, PipelineConfig};
use crate::denoise::{baseline_denoise, gaussian_weights, load_checkpoint, mir_forward, window_centers, Checkpoint, MirMode, MirModel, MpdModel};
use crate::error::{Error, Result};
use crate::io::ArtifactHeader;
use crate::rebin::{integer_slice, integer_slice_maps, weighted_sum, CandidateStream, RebinPlan, RebinnedSinogram};
use crate::recon::{
    filter_projection, reconstruct_sequence, shepp_logan_kernel, FilteredSinogram, HuConvention, ImageSpec, Provenance, ReconOptions,
    SliceImage, VolumeSequence,
};

/// Trained networks a run may use.
#[derive(Clone, Debug, Default)]
pub struct Models {
    pub mpd: Option<MpdModel>,
    pub mir: Option<MirModel>,
}

impl Models {
    /// Loads the checkpoints the configured mode needs and checks that their
    /// window width matches `recon.f`.
    pub fn load(cfg: &PipelineConfig) -> Result<Self> {
        let mode = cfg.denoiser.mode;
        cfg.require_checkpoints(mode.uses_mpd(), mode == DenoiseMode::MpdMir)?;
        let mut out = Models::default();
        if mode.uses_mpd() {
            match load_checkpoint(&cfg.denoiser.mpd_checkpoint)?.0 {
                Checkpoint::Mpd(m) => out.mpd = Some(m),
                Checkpoint::Mir(_) => return Err(Error::Config("denoiser.mpd_checkpoint holds an MIR model".into())),
            }
        }
        if mode == DenoiseMode::MpdMir {
            match load_checkpoint(&cfg.denoiser.mir_checkpoint)?.0 {
                Checkpoint::Mir(m) => out.mir = Some(m),
                Checkpoint::Mpd(_) => return Err(Error::Config("denoiser.mir_checkpoint holds an MPD model".into())),
            }
        }
        out.check(cfg)?;
        Ok(out)
    }

    fn check(&self, cfg: &PipelineConfig) -> Result<()> {
        let f = cfg.recon.f;
        if let Some(m) = &self.mpd {
            if m.config.f != f {
                return Err(Error::stage("mpd", format!("checkpoint window F = {} but recon.f = {f}", m.config.f)));
            }
        }
        if let Some(m) = &self.mir {
            if m.config.f != f {
                return Err(Error::stage("mir", format!("checkpoint window F = {} but recon.f = {f}", m.config.f)));
            }
            if m.config.mode != cfg.denoiser.mir_mode {
                return Err(Error::stage(
                    "mir",
                    format!("checkpoint was trained for {:?} input but denoiser.mir_mode is {:?}", m.config.mode, cfg.denoiser.mir_mode),
                ));
            }
        }
        Ok(())
    }
}

/// Projection-domain products of one run.
#[derive(Clone, Debug)]
pub struct ProjectionProducts {
    pub left: CandidateStream,
    pub right: CandidateStream,
    pub residual_left: CandidateStream,
    pub residual_right: CandidateStream,
    pub noisy: RebinnedSinogram,
    pub residual: RebinnedSinogram,
    pub denoised: RebinnedSinogram,
}

/// Columns where every frame of the window around `j` holds gathered data.
fn window_valid(valid: &Array2<bool>, j: usize, f: usize) -> Vec<bool> {
    (0..valid.ncols()).map(|i| (j - f..=j + f).all(|t| valid[[t, i]])).collect()
}

/// Residual candidate frames for one channel side. Frames without a full
/// window (the first and last `F`) and columns with gaps keep a zero residual.
fn side_residual(
    frames: &CandidateStream,
    priors: &CandidateStream,
    f: usize,
    mode: DenoiseMode,
    mpd: Option<&MpdModel>,
    sigma: f64,
) -> Result<Vec<Array2<f64>>> {
    let k = frames.len();
    let dim = frames.frames[0].dim();
    let mut out = vec![Array2::zeros(dim); k];
    if mode == DenoiseMode::None || k <= 2 * f {
        return Ok(out);
    }
    let weights = gaussian_weights(f, sigma);
    let centers = window_centers(k, f)?;
    let start = centers.start;
    let computed: Vec<Array2<f64>> = centers
        .into_par_iter()
        .map(|j| {
            let win: Vec<&Array2<f64>> = frames.frames[j - f..=j + f].iter().collect();
            let mut r = match mode {
                DenoiseMode::Baseline => baseline_denoise(&win, &weights)? - &frames.frames[j],
                DenoiseMode::Mpd | DenoiseMode::MpdMir => {
                    let model = mpd.ok_or_else(|| Error::stage("mpd", "no MPD model loaded"))?;
                    let pri: Vec<&Array2<f64>> = priors.frames[j - f..=j + f].iter().collect();
                    crate::denoise::mpd_forward(model, &win, &pri)?
                }
                DenoiseMode::None => unreachable!(),
            };
            let ok = window_valid(&frames.valid, j, f);
            for (i, good) in ok.into_iter().enumerate() {
                if !good {
                    r.column_mut(i).fill(0.0);
                }
            }
            if r.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("non-finite projection residual at candidate frame {j}")));
            }
            Ok(r)
        })
        .collect::<Result<_>>()?;
    for (n, r) in computed.into_iter().enumerate() {
        out[start + n] = r;
    }
    Ok(out)
}

fn add_frames(a: &CandidateStream, r: &[Array2<f64>]) -> CandidateStream {
    a.with_frames(a.frames.iter().zip(r).map(|(x, y)| x + y).collect(), a.valid.clone())
}

/// Integer slicing, per-side denoising and weighted summation.
pub fn projection_stage(cfg: &PipelineConfig, sim: &Simulation, plan: &RebinPlan, mpd: Option<&MpdModel>) -> Result<ProjectionProducts> {
    let f = cfg.recon.f;
    let mode = cfg.denoiser.mode;
    let (left, right) = integer_slice(&sim.low, plan)?;
    let prior_refs: Vec<&Array2<f64>> = sim.prior.iter().collect();
    let (pl, pr) = integer_slice_maps(&prior_refs, plan)?;
    let sigma = cfg.denoiser.baseline_sigma;
    let rl = side_residual(&left, &pl, f, mode, mpd, sigma)?;
    let rr = side_residual(&right, &pr, f, mode, mpd, sigma)?;
    let residual_left = left.with_frames(rl, left.valid.clone());
    let residual_right = right.with_frames(rr, right.valid.clone());
    let noisy = weighted_sum(&left, &right, plan)?;
    let residual = weighted_sum(&residual_left, &residual_right, plan)?;
    let denoised = weighted_sum(&add_frames(&left, &residual_left.frames), &add_frames(&right, &residual_right.frames), plan)?;
    Ok(ProjectionProducts {
        left,
        right,
        residual_left,
        residual_right,
        noisy,
        residual,
        denoised,
    })
}

pub fn filter(cfg: &PipelineConfig, sino: &RebinnedSinogram) -> Result<FilteredSinogram> {
    let kernel = shepp_logan_kernel(cfg.kernel_length(), sino.grid.distance_spacing_mm)?;
    filter_projection(sino, &kernel, cfg.recon.convolution)
}

pub fn recon_options(cfg: &PipelineConfig, mu_water: f64, hu: HuConvention) -> ReconOptions {
    ReconOptions {
        mu_water_per_mm: mu_water,
        row_weight: cfg.recon.row_weight,
        slice_thickness_mm: cfg.recon.slice_thickness_mm,
        hu,
    }
}

pub fn image_spec(cfg: &PipelineConfig) -> ImageSpec {
    ImageSpec {
        size: cfg.recon.image_size,
        pixel_mm: cfg.recon.pixel_mm,
    }
}

/// Reconstructs `targets` slices from `z_first` with `f` intermediates between neighbors.
pub fn reconstruct(
    cfg: &PipelineConfig,
    sino: &RebinnedSinogram,
    z_first: f64,
    targets: usize,
    f: usize,
    opts: &ReconOptions,
    provenance: Provenance,
) -> Result<VolumeSequence> {
    let filtered = filter(cfg, sino)?;
    let (vol, gaps) = reconstruct_sequence(&filtered, z_first, targets, cfg.recon.slice_spacing_mm, f, &image_spec(cfg), opts, provenance)?;
    if gaps > 0 {
        log::warn!("{gaps} pixels without projection coverage were set to the gap value");
    }
    Ok(vol)
}

/// Named array kept with `--keep-intermediates`.
#[derive(Clone, Debug)]
pub struct Intermediate {
    pub name: String,
    pub header: ArtifactHeader,
    pub data: Vec<f32>,
}

fn stack_f32(maps: &[&Array2<f64>]) -> Vec<f32> {
    maps.iter().flat_map(|m| m.iter().map(|&v| v as f32)).collect()
}

fn frames_intermediate(name: &str, frames: &[Array2<f64>]) -> Intermediate {
    let (r, c) = frames[0].dim();
    Intermediate {
        name: name.into(),
        header: ArtifactHeader::new(vec![frames.len(), r, c], &["angle", "row", "distance"], Vec::new()),
        data: stack_f32(&frames.iter().collect::<Vec<_>>()),
    }
}

/// `[slices, rows, cols]` header with z positions, pixel size and provenance tag.
pub fn volume_header(slices: &[SliceImage]) -> ArtifactHeader {
    let n = slices.first().map_or(0, |s| s.size());
    ArtifactHeader::new(vec![slices.len(), n, n], &["z", "y", "x"], Vec::new())
        .with_meta("z_mm", slices.iter().map(|s| s.z_mm).collect::<Vec<_>>())
        .with_meta("pixel_mm", slices.first().map_or(0.0, |s| s.pixel_mm))
        .with_meta("image", slices.first().map_or("empty", |s| s.provenance.as_str()))
}

pub fn volume_data(slices: &[SliceImage]) -> Vec<f32> {
    stack_f32(&slices.iter().map(|s| &s.data).collect::<Vec<_>>())
}

/// Rebuilds slices from a volume artifact written with [`volume_header`].
pub fn volume_from_artifact(h: &ArtifactHeader, data: &[f32], provenance: Provenance) -> Result<Vec<SliceImage>> {
    if h.shape.len() != 3 || h.shape[1] != h.shape[2] {
        return Err(Error::InvalidArgument(format!("expected a z×n×n volume, got {:?}", h.shape)));
    }
    let n = h.shape[1];
    let z: Vec<f64> = h.meta_as("z_mm").unwrap_or_else(|| vec![0.0; h.shape[0]]);
    let pixel: f64 = h.meta_as("pixel_mm").unwrap_or(1.0);
    if z.len() != h.shape[0] {
        return Err(Error::InvalidArgument("z_mm metadata does not match the slice count".into()));
    }
    data.chunks_exact(n * n)
        .zip(z)
        .map(|(c, z)| SliceImage::new(Array2::from_shape_fn((n, n), |(r, k)| c[r * n + k] as f64), z, pixel, provenance))
        .collect()
}

#[derive(Clone, Debug)]
pub struct RunResult {
    /// Raw reconstruction at the targets.
    pub noisy: Vec<SliceImage>,
    pub refined: Vec<SliceImage>,
    /// Noise-free reconstruction through the same chain.
    pub reference: Vec<SliceImage>,
    pub intermediates: Vec<Intermediate>,
}

fn targets_of(vol: &VolumeSequence, pad: usize, count: usize) -> Vec<SliceImage> {
    let step = vol.f + 1;
    (0..count).map(|k| vol.slices[(k + pad) * step].clone()).collect()
}

/// Runs every stage on an in-memory simulation.
pub fn run_pipeline(cfg: &PipelineConfig, sim: &Simulation, models: &Models, keep: bool) -> Result<RunResult> {
    let mode = cfg.denoiser.mode;
    models.check(cfg)?;
    if mode.uses_mpd() && models.mpd.is_none() {
        return Err(Error::stage("mpd", "mode needs an MPD model"));
    }
    if mode == DenoiseMode::MpdMir && models.mir.is_none() {
        return Err(Error::stage("mir", "mode needs an MIR model"));
    }
    let f = cfg.recon.f;
    let plan = RebinPlan::for_stream(&sim.low, &cfg.rebin_grid())?;
    log::info!("projection stage ({}, F = {f})", mode.as_str());
    let proj = projection_stage(cfg, sim, &plan, models.mpd.as_ref())?;

    let zs = cfg.target_z();
    let t = zs.len();
    let spacing = cfg.recon.slice_spacing_mm;
    let mu_w = sim.phantom.mu_water_per_mm;
    let abs = recon_options(cfg, mu_w, HuConvention::Absolute);
    let diff = recon_options(cfg, mu_w, HuConvention::Difference);
    let image_stage = matches!(mode, DenoiseMode::Baseline | DenoiseMode::MpdMir) && f > 0;
    let pad = usize::from(image_stage);
    let z_first = zs[0] - pad as f64 * spacing;
    let count = t + 2 * pad;
    let vf = if image_stage { f } else { 0 };

    log::info!("reconstruction ({} targets, {} intermediate slices per gap)", t, vf);
    let reference = reconstruct(cfg, &crate::rebin::rebin(&sim.clean, &plan)?, zs[0], t, 0, &abs, Provenance::GroundTruth)?;
    let noisy_vol = reconstruct(cfg, &proj.noisy, z_first, count, vf, &abs, Provenance::Raw)?;
    let noisy = targets_of(&noisy_vol, pad, t);
    let mut volumes: Vec<(&str, VolumeSequence)> = Vec::new();

    let refined = match mode {
        DenoiseMode::None => noisy.clone(),
        DenoiseMode::Mpd => {
            let d = reconstruct(cfg, &proj.denoised, zs[0], t, 0, &abs, Provenance::DenoisedProjection)?;
            targets_of(&d, 0, t)
        }
        DenoiseMode::Baseline => {
            let d = reconstruct(cfg, &proj.denoised, z_first, count, vf, &abs, Provenance::DenoisedProjection)?;
            let out = if image_stage {
                let w = gaussian_weights(f, cfg.denoiser.baseline_sigma);
                (0..t)
                    .map(|k| {
                        let q = (k + pad) * (f + 1);
                        let win: Vec<&Array2<f64>> = d.slices[q - f..=q + f].iter().map(|s| &s.data).collect();
                        let s = &d.slices[q];
                        SliceImage::new(baseline_denoise(&win, &w)?, s.z_mm, s.pixel_mm, Provenance::Refined)
                    })
                    .collect::<Result<Vec<_>>>()?
            } else {
                targets_of(&d, 0, t)
            };
            volumes.push(("volume_denoised", d));
            out
        }
        DenoiseMode::MpdMir => {
            let mir = models.mir.as_ref().expect("checked above");
            let step = f + 1;
            let refine = |images: &VolumeSequence, residuals: Option<&VolumeSequence>| -> Result<Vec<SliceImage>> {
                (0..t)
                    .into_par_iter()
                    .map(|k| mir_forward(mir, images, residuals, (k + pad) * step))
                    .collect()
            };
            match cfg.denoiser.mir_mode {
                MirMode::Decoupled => {
                    let r = reconstruct(cfg, &proj.residual, z_first, count, vf, &diff, Provenance::Residual)?;
                    let out = refine(&noisy_vol, Some(&r))?;
                    volumes.push(("volume_residual", r));
                    out
                }
                MirMode::Coupled => {
                    let d = reconstruct(cfg, &proj.denoised, z_first, count, vf, &abs, Provenance::DenoisedProjection)?;
                    let out = refine(&d, None)?;
                    volumes.push(("volume_denoised", d));
                    out
                }
            }
        }
    };

    let mut intermediates = Vec::new();
    if keep {
        intermediates.push(frames_intermediate("candidates_left", &proj.left.frames));
        intermediates.push(frames_intermediate("candidates_right", &proj.right.frames));
        intermediates.push(frames_intermediate("residual_left", &proj.residual_left.frames));
        intermediates.push(frames_intermediate("residual_right", &proj.residual_right.frames));
        intermediates.push(frames_intermediate("sinogram_noisy", &proj.noisy.frames));
        intermediates.push(frames_intermediate("sinogram_residual", &proj.residual.frames));
        intermediates.push(frames_intermediate("sinogram_denoised", &proj.denoised.frames));
        volumes.push(("volume_noisy", noisy_vol));
        for (name, v) in &volumes {
            intermediates.push(Intermediate {
                name: (*name).into(),
                header: volume_header(&v.slices).with_meta("intermediate_slices", v.f),
                data: volume_data(&v.slices),
            });
        }
    }
    Ok(RunResult {
        noisy,
        refined,
        reference: reference.slices,
        intermediates,
    })
}
