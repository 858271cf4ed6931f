//! Independent oracles and fixtures shared by the integration tests and the
//! acceptance suite.
#![allow(dead_code)]

use ldct_core::denoise::TrainableModel;
use ldct_core::geometry::Ray;
use ldct_core::nn::{ParamStore, Tensor};
use ldct_core::phantom::{Ellipsoid, Phantom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use ndarray::Array2;

/// Chord length of a ray through an ellipsoid, solved in world coordinates:
/// `(x − c)ᵀ M (x − c) = 1` with `M = Rᵀ diag(a⁻²) R` along `x = o + t·d`.
pub fn chord_oracle(e: &Ellipsoid, ray: &Ray) -> f64 {
    let (s, c) = e.z_rotation_rad.sin_cos();
    // rows of R map world offsets into the ellipsoid frame
    let r = [[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]];
    let inv2: Vec<f64> = e.semi_axes_mm.iter().map(|a| if a.is_infinite() { 0.0 } else { 1.0 / (a * a) }).collect();
    let mut m = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            m[i][j] = (0..3).map(|k| r[k][i] * inv2[k] * r[k][j]).sum();
        }
    }
    let quad = |u: &[f64; 3], v: &[f64; 3]| -> f64 { (0..3).map(|i| (0..3).map(|j| u[i] * m[i][j] * v[j]).sum::<f64>()).sum() };
    let w = [
        ray.origin_mm[0] - e.center_mm[0],
        ray.origin_mm[1] - e.center_mm[1],
        ray.origin_mm[2] - e.center_mm[2],
    ];
    let d = ray.direction;
    let a = quad(&d, &d);
    let b = 2.0 * quad(&w, &d);
    let cc = quad(&w, &w) - 1.0;
    let disc = b * b - 4.0 * a * cc;
    if a <= 0.0 || disc <= 0.0 {
        return 0.0;
    }
    // |t2 − t1| for a unit direction
    disc.sqrt() / a
}

pub fn line_integral_oracle(p: &Phantom, ray: &Ray) -> f64 {
    p.ellipsoids.iter().map(|e| e.delta_mu_per_mm * chord_oracle(e, ray)).sum()
}

/// Perturbs every parameter so no layer is inert, then compares the tape
/// gradient of the loss with central differences on `picks` random scalars.
/// Returns the worst relative error.
pub fn gradient_check<M: TrainableModel>(model: &M, input: &Tensor<f64>, target: &Tensor<f64>, picks: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params: ParamStore<f64> = model.params().cast();
    let flat: Vec<f64> = params.flatten().iter().map(|v| v + rng.random_range(-0.2..0.2)).collect();
    assert!(params.load_flat(&flat));
    let loss_at = |p: &ParamStore<f64>| -> f64 {
        let (tape, l) = model.loss(p, input.clone(), target.clone());
        tape.value(l).data[0]
    };
    params.zero_grad();
    let (tape, l) = model.loss(&params, input.clone(), target.clone());
    tape.backward(l, &mut params);
    drop(tape);
    let grads = params.flatten_grads();
    let h = 1e-6;
    let central = |k: usize, h: f64| -> f64 {
        let mut p = params.clone();
        let mut v = flat.clone();
        v[k] += h;
        p.load_flat(&v);
        let lp = loss_at(&p);
        v[k] -= 2.0 * h;
        p.load_flat(&v);
        (lp - loss_at(&p)) / (2.0 * h)
    };
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    while checked < picks {
        let k = rng.random_range(0..flat.len());
        let g = grads[k];
        let fd = central(k, h);
        let scale = g.abs().max(fd.abs());
        if scale < 1e-7 {
            // parameter without influence on this batch; pick another
            continue;
        }
        // a ReLU or L1 kink inside the stencil makes the difference quotient
        // depend on the step; such points have no derivative to compare
        let fine = central(k, 0.1 * h);
        if (fd - fine).abs() > 1e-3 * scale {
            continue;
        }
        worst = worst.max((g - fd).abs() / scale);
        checked += 1;
    }
    worst
}

pub fn random_tensor(shape: Vec<usize>, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Small, fast configuration: 4 detector rows, 64 channels, 32² images.
pub const TINY_TOML: &str = r#"
seed = 3

[geometry]
detector_rows = 4
detector_cols = 64
channel_angle_step_rad = 0.0077
row_spacing_iso_mm = 4.0
views_per_rotation = 120
table_feed_mm = 16.0
slice_thickness_mm = 4.0

[acquisition]
views = 480

[phantom]
kind = "inserts"

[dose]
base_n0 = 5e4
fraction = 0.25

[recon]
image_size = 32
pixel_mm = 6.0
slice_spacing_mm = 4.0
f = 1
targets = 2

[denoiser]
mode = "baseline"
mpd_widths = [2, 4]
mir_widths = [2, 4]

[train]
phantoms = 1
val_phantoms = 1
dose_fractions = [0.25]

[train.mpd]
steps = 6
batch_size = 2
crop = [4, 32]
validate_every = 3

[train.mir]
steps = 6
batch_size = 2
crop = [16, 16]
validate_every = 3
"#;

pub fn toy_config_path() -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy.toml")
}

/// Independent white Gaussian noise ROIs.
pub fn white_rois(count: usize, size: usize, sigma: f64, seed: u64) -> Vec<Array2<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = Normal::new(0.0, sigma).unwrap();
    (0..count).map(|_| Array2::from_shape_fn((size, size), |_| n.sample(&mut rng))).collect()
}

/// Expected radial white-noise NPS relative to σ²·Δx² once a quadratic
/// surface is fitted and removed: each Fourier mode keeps the fraction of its
/// energy orthogonal to span{1, x, y, x², xy, y²}.
pub fn detrended_white_level(n: usize) -> Vec<f64> {
    let coords: Vec<(f64, f64)> = (0..n * n).map(|i| ((i % n) as f64, (i / n) as f64)).collect();
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for f in [|_: f64, _: f64| 1.0, |x, _| x, |_, y| y, |x, _| x * x, |x, y| x * y, |_, y| y * y] {
        let mut v: Vec<f64> = coords.iter().map(|&(x, y)| f(x, y)).collect();
        for _ in 0..2 {
            for b in &basis {
                let d: f64 = v.iter().zip(b).map(|(p, q)| p * q).sum();
                v.iter_mut().zip(b).for_each(|(p, q)| *p -= d * q);
            }
        }
        let norm = v.iter().map(|p| p * p).sum::<f64>().sqrt();
        basis.push(v.into_iter().map(|p| p / norm).collect());
    }
    let nb = n / 2 + 1;
    let (mut sum, mut cnt) = (vec![0.0; nb], vec![0usize; nb]);
    for u in 0..n {
        for w in 0..n {
            let su = if u <= n / 2 { u as f64 } else { u as f64 - n as f64 };
            let sw = if w <= n / 2 { w as f64 } else { w as f64 - n as f64 };
            let k = su.hypot(sw).round() as usize;
            if k >= nb {
                continue;
            }
            let mut removed = 0.0;
            for b in &basis {
                let (mut re, mut im) = (0.0, 0.0);
                for (&(x, y), q) in coords.iter().zip(b) {
                    let ph = 2.0 * std::f64::consts::PI * (su * x + sw * y) / n as f64;
                    re += q * ph.cos();
                    im += q * ph.sin();
                }
                removed += re * re + im * im;
            }
            sum[k] += 1.0 - removed / (n * n) as f64;
            cnt[k] += 1;
        }
    }
    sum.iter().zip(&cnt).map(|(s, &c)| s / c as f64).collect()
}
