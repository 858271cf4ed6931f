mod common;

use common::{gradient_check, random_tensor};
use ldct_core::denoise::*;
use ldct_core::nn::Tensor;
use ndarray::Array2;

fn mpd(seed: u64) -> MpdModel {
    MpdModel::new(
        MpdConfig {
            f: 1,
            widths: [3, 4],
            priors_to_step2: true,
        },
        MpdNorm {
            frame_scale: 1.0,
            prior_scale: 0.01,
            residual_scale: 0.01,
        },
        seed,
    )
    .unwrap()
}

fn mir(mode: MirMode, seed: u64) -> MirModel {
    MirModel::new(
        MirConfig {
            f: 1,
            widths: [3, 4],
            mode,
        },
        MirNorm::default(),
        seed,
    )
    .unwrap()
}

#[test]
fn mpd_gradients_match_finite_differences() {
    let m = mpd(1);
    let x = random_tensor(vec![2, 6, 8, 8], 10);
    let t = random_tensor(vec![2, 1, 8, 8], 11);
    let worst = gradient_check(&m, &x, &t, 10, 12);
    assert!(worst < 1e-4, "worst relative error {worst:e}");
}

#[test]
fn mir_gradients_match_finite_differences() {
    for (mode, c) in [(MirMode::Decoupled, 6), (MirMode::Coupled, 3)] {
        let m = mir(mode, 2);
        let x = random_tensor(vec![2, c, 8, 8], 20);
        let t = random_tensor(vec![2, 1, 8, 8], 21);
        let worst = gradient_check(&m, &x, &t, 10, 22);
        assert!(worst < 1e-4, "{mode:?}: worst relative error {worst:e}");
    }
}

fn ramp_dataset(n: usize, channels: usize) -> Dataset {
    // the target is a fixed linear mix of the inputs, which the network can learn
    let mut d = Dataset::default();
    for e in 0..n {
        let inputs: Vec<usize> = (0..channels)
            .map(|c| {
                d.push_plane(Array2::from_shape_fn((16, 16), |(r, k)| {
                    (((r * 7 + k * 3 + c * 5 + e * 11) % 17) as f32 / 17.0) - 0.5
                }))
            })
            .collect();
        let target = d.push_plane(&d.planes[inputs[0]] * 0.5 - &d.planes[inputs[2]] * 0.25);
        d.examples.push(Example { inputs, target });
    }
    d
}

fn small_train(steps: usize) -> TrainConfig {
    TrainConfig {
        steps,
        batch_size: 4,
        crop: [16, 16],
        lr: 3e-3,
        lr_min: 3e-4,
        patience: 3,
        validate_every: 20,
        val_examples: 8,
        seed: 5,
    }
}

#[test]
fn training_reduces_the_loss() {
    let data = ramp_dataset(12, 6);
    let val = ramp_dataset(4, 6);
    let mut m = mir(MirMode::Decoupled, 3);
    let out = train(&mut m, &data, Some(&val), &small_train(200), None).unwrap();
    let first: f64 = out.curve[..20].iter().map(|p| p.train_loss).sum::<f64>() / 20.0;
    let last: f64 = out.curve[180..].iter().map(|p| p.train_loss).sum::<f64>() / 20.0;
    assert!(last < 0.5 * first, "loss {first} -> {last}");
    assert_eq!(out.state.step, 200);
    assert!(out.curve.iter().filter(|p| p.val_loss.is_some()).count() >= 10);
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let data = ramp_dataset(6, 6);
    let mut a = mir(MirMode::Decoupled, 4);
    let full = train(&mut a, &data, None, &small_train(30), None).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mir.json");
    let mut b = mir(MirMode::Decoupled, 4);
    let half = train(&mut b, &data, None, &small_train(12), None).unwrap();
    save_checkpoint(&path, &Checkpoint::Mir(b), 4, Some(&small_train(12)), Some(&half.state)).unwrap();
    let (ck, state, manifest) = load_checkpoint(&path).unwrap();
    assert_eq!(manifest.optimizer.unwrap().step, 12);
    let Checkpoint::Mir(mut b) = ck else { panic!("wrong kind") };
    let rest = train(&mut b, &data, None, &small_train(30), state).unwrap();
    assert_eq!(rest.curve.first().unwrap().step, 13);
    assert_eq!(rest.state.step, 30);
    assert_eq!(a.params.flatten(), b.params.flatten());
    assert_eq!(full.curve[29].train_loss, rest.curve.last().unwrap().train_loss);
}

#[test]
fn checkpoints_round_trip_and_reject_damage() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mpd.json");
    let m = mpd(9);
    save_checkpoint(&path, &Checkpoint::Mpd(m.clone()), 9, None, None).unwrap();
    let (back, state, manifest) = load_checkpoint(&path).unwrap();
    assert!(state.is_none());
    assert_eq!(manifest.param_count, m.params.num_scalars());
    let Checkpoint::Mpd(b) = back else { panic!("wrong kind") };
    assert_eq!(b.params.flatten(), m.params.flatten());
    assert_eq!(b.config, m.config);

    let mut bin = path.as_os_str().to_owned();
    bin.push(".bin");
    let bytes = std::fs::read(&bin).unwrap();
    std::fs::write(&bin, &bytes[..bytes.len() - 4]).unwrap();
    assert!(load_checkpoint(&path).is_err());
}

#[test]
fn untrained_refinement_is_identity() {
    let m = mir(MirMode::Decoupled, 0);
    let img = Array2::from_shape_fn((12, 12), |(r, c)| (r * c) as f64);
    let res = Array2::zeros((12, 12));
    let out = m.residual(&[&img, &img, &img], Some(&[&res, &res, &res])).unwrap();
    assert!(out.iter().all(|&v| v == 0.0));
    assert_eq!(out.dim(), (12, 12));
    assert!(m.residual(&[&img, &img], Some(&[&res, &res])).is_err());
    let t: Tensor<f32> = m.input_tensor(&[&img, &img, &img], Some(&[&res, &res, &res])).unwrap();
    assert_eq!(t.shape, vec![1, 6, 12, 12]);
}

#[test]
fn baseline_weights() {
    let w = gaussian_weights(2, 1.0);
    assert_eq!(w.len(), 5);
    assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert!(w[2] > w[1] && w[1] > w[0]);
    let u = gaussian_weights(1, f64::INFINITY);
    assert!(u.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-12));
    let a = Array2::from_elem((2, 2), 1.0);
    let b = Array2::from_elem((2, 2), 4.0);
    let out = baseline_denoise(&[&a, &b, &a], &u).unwrap();
    assert!(out.iter().all(|&v| (v - 2.0).abs() < 1e-12));
}
