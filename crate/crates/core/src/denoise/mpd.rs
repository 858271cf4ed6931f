use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::train::TrainableModel;
use super::{stack_channels, tensor_to_map};
use crate::error::{Error, Result};
use crate::nn::{ParamStore, ResUNet, ResUNetSpec, Scalar, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MpdConfig {
    /// Window half-width; windows hold `2F+1` candidate frames.
    pub f: usize,
    pub widths: [usize; 2],
    /// Also feed the Φ priors to the second network.
    pub priors_to_step2: bool,
}

impl Default for MpdConfig {
    fn default() -> Self {
        Self {
            f: 1,
            widths: [16, 32],
            priors_to_step2: false,
        }
    }
}

/// Fixed scales mapping line integrals, priors and residuals to unit range.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MpdNorm {
    pub frame_scale: f64,
    pub prior_scale: f64,
    pub residual_scale: f64,
}

impl Default for MpdNorm {
    fn default() -> Self {
        Self {
            frame_scale: 1.0,
            prior_scale: 1.0,
            residual_scale: 1.0,
        }
    }
}

fn mean_abs<'a>(maps: impl Iterator<Item = &'a Array2<f64>>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for m in maps {
        s += m.iter().map(|v| v.abs()).sum::<f64>();
        n += m.len();
    }
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

fn positive_or_one(v: f64) -> f64 {
    if v > 1e-12 && v.is_finite() {
        v
    } else {
        1.0
    }
}

impl MpdNorm {
    /// Mean absolute values of the low-dose frames, priors and
    /// full-minus-low residuals.
    pub fn estimate(low: &[Array2<f64>], prior: &[Array2<f64>], full: &[Array2<f64>]) -> Self {
        let resid: Vec<Array2<f64>> = full.iter().zip(low).map(|(f, l)| f - l).collect();
        Self {
            frame_scale: positive_or_one(mean_abs(low.iter())),
            prior_scale: positive_or_one(mean_abs(prior.iter())),
            residual_scale: positive_or_one(mean_abs(resid.iter())),
        }
    }

    fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("frame_scale", self.frame_scale),
            ("prior_scale", self.prior_scale),
            ("residual_scale", self.residual_scale),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("MPD {name} must be finite and > 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Two cascaded ResUNets: step 1 sees `(frame, Φ)` pairs for the whole
/// window, step 2 sees the untouched frames plus the step-1 residual.
#[derive(Clone, Debug)]
pub struct MpdModel {
    pub config: MpdConfig,
    pub norm: MpdNorm,
    pub params: ParamStore<f32>,
    step1: ResUNet,
    step2: ResUNet,
}

impl MpdModel {
    pub fn new(config: MpdConfig, norm: MpdNorm, seed: u64) -> Result<Self> {
        if config.widths.contains(&0) {
            return Err(Error::InvalidArgument("network widths must be > 0".into()));
        }
        norm.validate()?;
        let n = 2 * config.f + 1;
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let step1 = ResUNet::new(
            ResUNetSpec {
                in_channels: 2 * n,
                out_channels: 1,
                widths: config.widths,
            },
            &mut params,
            "step1",
            &mut rng,
        );
        let step2 = ResUNet::new(
            ResUNetSpec {
                in_channels: n + 1 + if config.priors_to_step2 { n } else { 0 },
                out_channels: 1,
                widths: config.widths,
            },
            &mut params,
            "step2",
            &mut rng,
        );
        Ok(Self {
            config,
            norm,
            params,
            step1,
            step2,
        })
    }

    pub fn window_len(&self) -> usize {
        2 * self.config.f + 1
    }

    /// Interleaved, normalized `(frame_k, Φ_k)` channels.
    pub fn input_tensor(&self, frames: &[&Array2<f64>], priors: &[&Array2<f64>]) -> Result<Tensor<f32>> {
        let n = self.window_len();
        if frames.len() != n || priors.len() != n {
            return Err(Error::InvalidArgument(format!(
                "MPD window needs {n} frames and priors, got {} and {}",
                frames.len(),
                priors.len()
            )));
        }
        let dim = frames[0].dim();
        let mut maps = Vec::with_capacity(2 * n);
        let mut scales = Vec::with_capacity(2 * n);
        for (f, p) in frames.iter().zip(priors) {
            if f.dim() != dim || p.dim() != dim {
                return Err(Error::shape(&[dim.0, dim.1], &[f.nrows().max(p.nrows()), f.ncols().max(p.ncols())]));
            }
            maps.push(*f);
            maps.push(*p);
            scales.push(self.norm.frame_scale);
            scales.push(self.norm.prior_scale);
        }
        Ok(stack_channels(&maps, &scales))
    }

    /// Normalized residual for an input built by [`input_tensor`](Self::input_tensor).
    pub fn graph<T: Scalar>(&self, tape: &mut Tape<T>, params: &ParamStore<T>, x: Var) -> Var {
        let n = self.window_len();
        let r1 = self.step1.forward(tape, params, x);
        let frames = tape.channels(x, &(0..n).map(|k| 2 * k).collect::<Vec<_>>());
        let step2_in = if self.config.priors_to_step2 {
            let priors = tape.channels(x, &(0..n).map(|k| 2 * k + 1).collect::<Vec<_>>());
            tape.concat(&[frames, r1, priors])
        } else {
            tape.concat(&[frames, r1])
        };
        self.step2.forward(tape, params, step2_in)
    }

    /// Residual `R` for the middle frame, in line-integral units.
    pub fn residual(&self, frames: &[&Array2<f64>], priors: &[&Array2<f64>]) -> Result<Array2<f64>> {
        let x = self.input_tensor(frames, priors)?;
        let mut tape = Tape::new();
        let v = tape.input(x);
        let out = self.graph(&mut tape, &self.params, v);
        Ok(tensor_to_map(tape.value(out), self.norm.residual_scale))
    }
}

impl TrainableModel for MpdModel {
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

/// Residual for the middle frame of a `2F+1` window of candidate frames and
/// their noise priors. The denoised frame is `P + R`.
pub fn mpd_forward(model: &MpdModel, window: &[&Array2<f64>], priors: &[&Array2<f64>]) -> Result<Array2<f64>> {
    model.residual(window, priors)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn untrained_model_returns_zero_residual() {
        let m = MpdModel::new(
            MpdConfig {
                f: 1,
                widths: [4, 8],
                priors_to_step2: false,
            },
            MpdNorm::default(),
            3,
        )
        .unwrap();
        let a = Array2::from_shape_fn((8, 13), |(r, c)| (r + c) as f64 * 0.1);
        let p = Array2::from_elem((8, 13), 0.01);
        let r = mpd_forward(&m, &[&a, &a, &a], &[&p, &p, &p]).unwrap();
        assert_eq!(r.dim(), (8, 13));
        assert!(r.iter().all(|&v| v == 0.0));
        assert!(mpd_forward(&m, &[&a, &a], &[&p, &p]).is_err());
    }
}
