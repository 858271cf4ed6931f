use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::train::TrainableModel;
use super::{stack_channels, tensor_to_map};
use crate::error::{Error, Result};
use crate::nn::{ParamStore, ResUNet, ResUNetSpec, Scalar, Tape, Tensor, Var};
use crate::recon::{Provenance, SliceImage, VolumeSequence};

/// How the projection-domain result reaches the image refiner.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MirMode {
    /// Pairs of (noisy reconstruction, reconstructed MPD residual).
    #[default]
    Decoupled,
    /// The summed, projection-denoised reconstruction only.
    Coupled,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MirConfig {
    pub f: usize,
    pub widths: [usize; 2],
    pub mode: MirMode,
}

impl Default for MirConfig {
    fn default() -> Self {
        Self {
            f: 1,
            widths: [16, 32],
            mode: MirMode::Decoupled,
        }
    }
}

/// Scales (HU) applied to images, input residuals and the predicted residual.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MirNorm {
    pub image_scale: f64,
    pub residual_in_scale: f64,
    pub residual_out_scale: f64,
}

impl Default for MirNorm {
    fn default() -> Self {
        Self {
            image_scale: 1000.0,
            residual_in_scale: 1.0,
            residual_out_scale: 1.0,
        }
    }
}

impl MirNorm {
    fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("image_scale", self.image_scale),
            ("residual_in_scale", self.residual_in_scale),
            ("residual_out_scale", self.residual_out_scale),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("MIR {name} must be finite and > 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Single ResUNet refining the target slice of a `2F+1` slice window.
#[derive(Clone, Debug)]
pub struct MirModel {
    pub config: MirConfig,
    pub norm: MirNorm,
    pub params: ParamStore<f32>,
    net: ResUNet,
}

impl MirModel {
    pub fn new(config: MirConfig, norm: MirNorm, seed: u64) -> Result<Self> {
        if config.widths.contains(&0) {
            return Err(Error::InvalidArgument("network widths must be > 0".into()));
        }
        norm.validate()?;
        let n = 2 * config.f + 1;
        let in_channels = match config.mode {
            MirMode::Decoupled => 2 * n,
            MirMode::Coupled => n,
        };
        let mut params = ParamStore::new();
        let net = ResUNet::new(
            ResUNetSpec {
                in_channels,
                out_channels: 1,
                widths: config.widths,
            },
            &mut params,
            "mir",
            &mut ChaCha8Rng::seed_from_u64(seed),
        );
        Ok(Self {
            config,
            norm,
            params,
            net,
        })
    }

    pub fn window_len(&self) -> usize {
        2 * self.config.f + 1
    }

    /// Decoupled: interleaved `(I_n, R_recon)` channels; coupled: `I_d` only.
    pub fn input_tensor(&self, images: &[&Array2<f64>], residuals: Option<&[&Array2<f64>]>) -> Result<Tensor<f32>> {
        let n = self.window_len();
        if images.len() != n {
            return Err(Error::InvalidArgument(format!("MIR window needs {n} slices, got {}", images.len())));
        }
        let dim = images[0].dim();
        if images.iter().any(|m| m.dim() != dim) {
            return Err(Error::InvalidArgument("MIR window slices differ in size".into()));
        }
        match (self.config.mode, residuals) {
            (MirMode::Decoupled, Some(res)) => {
                if res.len() != n || res.iter().any(|m| m.dim() != dim) {
                    return Err(Error::InvalidArgument("MIR residual window does not match the image window".into()));
                }
                let mut maps = Vec::with_capacity(2 * n);
                let mut scales = Vec::with_capacity(2 * n);
                for (i, r) in images.iter().zip(res) {
                    maps.push(*i);
                    maps.push(*r);
                    scales.push(self.norm.image_scale);
                    scales.push(self.norm.residual_in_scale);
                }
                Ok(stack_channels(&maps, &scales))
            }
            (MirMode::Coupled, None) => Ok(stack_channels(images, &vec![self.norm.image_scale; n])),
            (MirMode::Decoupled, None) => Err(Error::InvalidArgument("decoupled MIR needs reconstructed residuals".into())),
            (MirMode::Coupled, Some(_)) => Err(Error::InvalidArgument("coupled MIR takes summed images only".into())),
        }
    }

    pub fn graph<T: Scalar>(&self, tape: &mut Tape<T>, params: &ParamStore<T>, x: Var) -> Var {
        self.net.forward(tape, params, x)
    }

    /// Predicted residual of the middle slice, in HU.
    pub fn residual(&self, images: &[&Array2<f64>], residuals: Option<&[&Array2<f64>]>) -> Result<Array2<f64>> {
        let x = self.input_tensor(images, residuals)?;
        let mut tape = Tape::new();
        let v = tape.input(x);
        let out = self.graph(&mut tape, &self.params, v);
        Ok(tensor_to_map(tape.value(out), self.norm.residual_out_scale))
    }
}

impl TrainableModel for MirModel {
    fn params(&self) -> &ParamStore<f32> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore<f32> {
        &mut self.params
    }

    fn loss<T: Scalar>(&self, params: &ParamStore<T>, input: Tensor<T>, target: Tensor<T>) -> (Tape<T>, Var) {
        let mut tape = Tape::new();
        let x = tape.input(input);
        let t = tape.input(target);
        let out = self.graph(&mut tape, params, x);
        let l = tape.l1(out, t);
        (tape, l)
    }
}

fn same_grid(a: &VolumeSequence, b: &VolumeSequence) -> bool {
    a.len() == b.len()
        && a.slices
            .iter()
            .zip(&b.slices)
            .all(|(x, y)| (x.z_mm - y.z_mm).abs() < 1e-9 && x.size() == y.size() && x.pixel_mm == y.pixel_mm)
}

/// Refines target slice `q` of `images` from its centered `2F+1` window.
///
/// Decoupled mode takes the raw reconstruction and the reconstructed
/// projection residual (`I_r = I_n + R_r`); coupled mode takes the summed
/// projection-denoised reconstruction (`I_r = I_d + R_r`).
pub fn mir_forward(model: &MirModel, images: &VolumeSequence, residuals: Option<&VolumeSequence>, q: usize) -> Result<SliceImage> {
    let f = model.config.f;
    if images.f != f {
        return Err(Error::stage(
            "mir",
            format!("volume has F = {} intermediate slices but the model window uses F = {f}", images.f),
        ));
    }
    if !images.is_target(q) {
        return Err(Error::stage("mir", format!("slice {q} is not a target under the stride F+1 = {}", f + 1)));
    }
    if q < f || q + f >= images.len() {
        return Err(Error::stage("mir", format!("window around slice {q} leaves the volume of {} slices", images.len())));
    }
    let (want_images, out_prov) = match model.config.mode {
        MirMode::Decoupled => (Provenance::Raw, Provenance::Refined),
        MirMode::Coupled => (Provenance::DenoisedProjection, Provenance::RefinedCoupled),
    };
    let window = &images.slices[q - f..=q + f];
    if let Some(bad) = window.iter().find(|s| s.provenance != want_images) {
        return Err(Error::stage(
            "mir",
            format!("expected {} input slices, got {}", want_images.as_str(), bad.provenance.as_str()),
        ));
    }
    let imaps: Vec<&Array2<f64>> = window.iter().map(|s| &s.data).collect();
    let rmaps: Option<Vec<&Array2<f64>>> = match residuals {
        Some(r) => {
            if !same_grid(images, r) {
                return Err(Error::stage("mir", "image and residual sequences are on different z grids"));
            }
            let rw = &r.slices[q - f..=q + f];
            if let Some(bad) = rw.iter().find(|s| s.provenance != Provenance::Residual) {
                return Err(Error::stage("mir", format!("expected residual slices, got {}", bad.provenance.as_str())));
            }
            Some(rw.iter().map(|s| &s.data).collect())
        }
        None => None,
    };
    let res = model.residual(&imaps, rmaps.as_deref()).map_err(|e| Error::stage("mir", e.to_string()))?;
    let target = &images.slices[q];
    SliceImage::new(&target.data + &res, target.z_mm, target.pixel_mm, out_prov)
}
