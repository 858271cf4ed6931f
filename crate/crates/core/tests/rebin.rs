use ldct_core::geometry::ScannerGeometry;
use ldct_core::phantom::Phantom;
use ldct_core::projection::{forward_project, ProjectionStream};
use ldct_core::rebin::*;
use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_geometry(views_per_rotation: usize) -> ScannerGeometry {
    ScannerGeometry {
        detector_rows: 3,
        detector_cols: 24,
        channel_angle_step_rad: 0.01,
        views_per_rotation,
        ..ScannerGeometry::default()
    }
}

fn random_stream(g: &ScannerGeometry, views: usize, seed: u64) -> ProjectionStream {
    let base = forward_project(&Phantom::default(), g, views).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..views)
        .map(|_| Array2::from_shape_fn((g.detector_rows, g.detector_cols), |_| rng.random_range(-2.0..5.0)))
        .collect();
    base.with_data(data)
}

fn assert_close(a: &RebinnedSinogram, b: &RebinnedSinogram, rel: f64) {
    assert_eq!(a.frames.len(), b.frames.len());
    assert_eq!(a.support, b.support);
    for (fa, fb) in a.frames.iter().zip(&b.frames) {
        for (x, y) in fa.iter().zip(fb.iter()) {
            assert!((x - y).abs() <= rel * x.abs().max(y.abs()).max(1.0), "{x} vs {y}");
        }
    }
}

#[test]
fn grid_must_match_view_step() {
    let g = small_geometry(60);
    let mut grid = RebinGrid::native(&g);
    assert!(build_rebin_plan(&g, &grid, 0, 200).is_ok());
    grid.angles_per_half_turn = 31;
    assert!(build_rebin_plan(&g, &grid, 0, 200).is_err());
}

#[test]
fn plan_weights_partition_unity() {
    let g = small_geometry(60);
    let plan = build_rebin_plan(&g, &RebinGrid::native(&g), 0, 240).unwrap();
    for c in plan.columns.iter().filter(|c| c.in_fan) {
        let s: f64 = c.weights.iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
        assert!(c.weights.iter().all(|&w| w >= 0.0));
        assert_eq!(c.right, c.left + 1);
        assert!((c.distance_mm - g.focal_length_mm * c.gamma.sin()).abs() < 1e-9);
    }
    // parallel angle step equals the view step
    assert!((plan.angle(1) - plan.angle(0) - g.view_angle_step()).abs() < 1e-12);
}

#[test]
fn constant_stream_rebins_to_constant() {
    let g = small_geometry(60);
    let s = random_stream(&g, 240, 0);
    let s = s.with_data(vec![Array2::from_elem((3, 24), 1.25); 240]);
    let plan = RebinPlan::for_stream(&s, &RebinGrid::native(&g)).unwrap();
    let r = rebin(&s, &plan).unwrap();
    for (j, f) in r.frames.iter().enumerate() {
        for i in 0..plan.grid.num_distances {
            if r.support[[j, i]] {
                for row in 0..3 {
                    assert!((f[[row, i]] - 1.25).abs() < 1e-12);
                }
            }
        }
    }
    assert!(r.support.iter().any(|&v| v));
    assert!(r.support.iter().any(|&v| !v));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn gather_then_weight_equals_direct(seed in 0u64..10_000, first in 0usize..100, vpr in prop::sample::select(vec![40usize, 60, 90])) {
        let mut g = small_geometry(vpr);
        g.z_start_mm = -(first as f64);
        let views = 3 * vpr + 7;
        let s = random_stream(&g, views, seed);
        let plan = RebinPlan::for_stream(&s, &RebinGrid::native(&g)).unwrap();
        let (l, r) = integer_slice(&s, &plan).unwrap();
        let two_step = weighted_sum(&l, &r, &plan).unwrap();
        let direct = direct_rebin(&s, &plan).unwrap();
        assert_close(&two_step, &direct, 1e-12);
    }

    #[test]
    fn rebinning_is_linear(seed in 0u64..10_000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let g = small_geometry(60);
        let s1 = random_stream(&g, 200, seed);
        let s2 = random_stream(&g, 200, seed + 1);
        let mixed = s1.with_data(s1.frames.iter().zip(&s2.frames).map(|(x, y)| &x.data * a + &y.data * b).collect());
        let plan = RebinPlan::for_stream(&s1, &RebinGrid::native(&g)).unwrap();
        let lhs = rebin(&mixed, &plan).unwrap();
        let rhs = rebin(&s1, &plan).unwrap().axpby(a, &rebin(&s2, &plan).unwrap(), b).unwrap();
        assert_close(&lhs, &rhs, 1e-11);
    }
}

#[test]
fn candidate_maps_follow_the_same_gather() {
    let g = small_geometry(60);
    let s = random_stream(&g, 200, 4);
    let plan = RebinPlan::for_stream(&s, &RebinGrid::native(&g)).unwrap();
    let (l, r) = integer_slice(&s, &plan).unwrap();
    let maps: Vec<&Array2<f64>> = s.frames.iter().map(|f| &f.data).collect();
    let (l2, r2) = integer_slice_maps(&maps, &plan).unwrap();
    assert_eq!((l.clone(), r), (l2, r2));
    for j in 0..l.len() {
        for (i, c) in plan.columns.iter().enumerate() {
            match plan.source_view(j, i) {
                Some(t) => {
                    assert!(l.valid[[j, i]]);
                    assert_eq!(l.frames[j][[1, i]], s.frames[t].data[[1, c.left]]);
                }
                None => assert!(!l.valid[[j, i]]),
            }
        }
    }
    assert!(integer_slice_maps(&maps[..10], &plan).is_err());
}
