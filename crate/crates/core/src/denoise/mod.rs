//! Multi-frame residual denoisers for the projection (MPD) and image (MIR)
//! domains, their sliding-window application, training and a non-learned
//! temporal-average baseline.

mod checkpoint;
mod mir;
mod mpd;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointManifest, ModelKind};
pub use mir::{mir_forward, MirConfig, MirMode, MirModel, MirNorm};
pub use mpd::{mpd_forward, MpdConfig, MpdModel, MpdNorm};
pub use train::{loss_curve_csv, train, Dataset, Example, LossPoint, TrainConfig, TrainOutcome, TrainState, TrainableModel};

use ndarray::Array2;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::nn::Tensor;

/// `σ(θ)·up + (1 − σ(θ))·skip`.
pub fn adaptive_mixup(skip: &Array2<f64>, up: &Array2<f64>, theta: f64) -> Result<Array2<f64>> {
    if skip.dim() != up.dim() {
        let (a, b) = (skip.dim(), up.dim());
        return Err(Error::shape(&[a.0, a.1], &[b.0, b.1]));
    }
    let s = 1.0 / (1.0 + (-theta).exp());
    Ok(up * s + skip * (1.0 - s))
}

/// Zero-based window centers `F..K−F` of a length-`K` stream.
pub fn window_centers(k: usize, f: usize) -> Result<std::ops::Range<usize>> {
    if k <= 2 * f {
        return Err(Error::InvalidArgument(format!("stream of {k} frames is too short for windows of 2F+1 = {}", 2 * f + 1)));
    }
    Ok(f..k - f)
}

/// Applies `stage` to every full window (by zero-based center index) of a
/// length-`K` stream. Edges are not padded, so there are `K − 2F` outputs.
pub fn sliding_window_apply<O, S>(k: usize, f: usize, stage: S) -> Result<Vec<O>>
where
    O: Send,
    S: Fn(usize) -> Result<O> + Sync + Send,
{
    window_centers(k, f)?.into_par_iter().map(stage).collect()
}

/// Normalized Gaussian weights over offsets `−F..=F`; `sigma = ∞` gives a
/// uniform average.
pub fn gaussian_weights(f: usize, sigma: f64) -> Vec<f64> {
    let w: Vec<f64> = (0..=2 * f)
        .map(|k| {
            let d = k as f64 - f as f64;
            if sigma.is_infinite() {
                1.0
            } else {
                (-0.5 * d * d / (sigma * sigma)).exp()
            }
        })
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Weighted temporal average of a window; the weights are renormalized to 1.
pub fn baseline_denoise(window: &[&Array2<f64>], weights: &[f64]) -> Result<Array2<f64>> {
    let Some(first) = window.first() else {
        return Err(Error::InvalidArgument("empty window".into()));
    };
    if weights.len() != window.len() {
        return Err(Error::shape(&[window.len()], &[weights.len()]));
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(Error::InvalidArgument("window weights must sum to a positive value".into()));
    }
    if weights.len() == 1 {
        return Ok((*first).clone());
    }
    let mut out = Array2::zeros(first.dim());
    for (frame, &w) in window.iter().zip(weights) {
        if frame.dim() != first.dim() {
            return Err(Error::shape(&[first.nrows(), first.ncols()], &[frame.nrows(), frame.ncols()]));
        }
        out.scaled_add(w / total, *frame);
    }
    Ok(out)
}

/// Stacks 2-D maps into one `1×C×H×W` tensor, dividing channel `c` by `scales[c]`.
pub(crate) fn stack_channels(maps: &[&Array2<f64>], scales: &[f64]) -> Tensor<f32> {
    let (h, w) = maps[0].dim();
    let mut data = Vec::with_capacity(maps.len() * h * w);
    for (m, &s) in maps.iter().zip(scales) {
        data.extend(m.iter().map(|&v| (v / s) as f32));
    }
    Tensor::new(vec![1, maps.len(), h, w], data).expect("stacked shape")
}

pub(crate) fn tensor_to_map(t: &Tensor<f32>, scale: f64) -> Array2<f64> {
    let (_, _, h, w) = t.dims4();
    Array2::from_shape_fn((h, w), |(r, c)| t.data[r * w + c] as f64 * scale)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_centers_examples() {
        let c = window_centers(20, 5).unwrap();
        assert_eq!(c.len(), 10);
        // 1-based 6..15
        assert_eq!((c.start + 1, c.end), (6, 15));
        assert_eq!(window_centers(7, 0).unwrap().len(), 7);
        assert!(window_centers(10, 5).is_err());
    }

    #[test]
    fn mixup_limits() {
        let a = Array2::from_elem((2, 2), 1.0);
        let b = Array2::from_elem((2, 2), 3.0);
        assert_eq!(adaptive_mixup(&a, &b, 0.0).unwrap()[[0, 0]], 2.0);
        assert!((adaptive_mixup(&a, &b, 50.0).unwrap()[[1, 1]] - 3.0).abs() < 1e-12);
        assert!(adaptive_mixup(&a, &Array2::zeros((2, 3)), 0.0).is_err());
    }

    #[test]
    fn baseline_partition_of_unity() {
        let x = Array2::from_shape_fn((3, 4), |(r, c)| (r * 4 + c) as f64 * 0.37);
        let w = gaussian_weights(2, 1.3);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        let out = baseline_denoise(&[&x, &x, &x, &x, &x], &w).unwrap();
        for (a, b) in out.iter().zip(x.iter()) {
            assert!((a - b).abs() < 1e-14);
        }
        assert_eq!(baseline_denoise(&[&x], &[1.0]).unwrap(), x);
        assert!(baseline_denoise(&[], &[]).is_err());
    }
}
