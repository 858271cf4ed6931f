mod common;

use common::{chord_oracle, line_integral_oracle};
use ldct_core::geometry::{Ray, ScannerGeometry};
use ldct_core::phantom::{insert_phantom, random_phantom, Ellipsoid, Phantom, RandomPhantomConfig};
use ldct_core::projection::forward_project;
use proptest::prelude::*;

fn phantom(ellipsoids: Vec<Ellipsoid>) -> Phantom {
    Phantom {
        ellipsoids,
        ..Phantom::default()
    }
}

#[test]
fn sphere_chords() {
    let mu = 0.02;
    let p = phantom(vec![Ellipsoid::sphere([0.0, 0.0, 0.0], 10.0, mu)]);
    let central = Ray::new([-100.0, 0.0, 0.0], [1.0, 0.0, 0.0]).unwrap();
    assert!((p.line_integral(&central) - 20.0 * mu).abs() < 1e-12);
    let offset = Ray::new([-100.0, 5.0, 0.0], [1.0, 0.0, 0.0]).unwrap();
    assert!((p.line_integral(&offset) - 10.0 * 3f64.sqrt() * mu).abs() < 1e-12);
    let miss = Ray::new([-100.0, 10.5, 0.0], [1.0, 0.0, 0.0]).unwrap();
    assert_eq!(p.line_integral(&miss), 0.0);
    assert_eq!(Phantom::default().line_integral(&central), 0.0);
}

#[test]
fn rotated_ellipsoid_matches_world_frame_oracle() {
    let e = Ellipsoid::new([3.0, -4.0, 1.0], [30.0, 12.0, 8.0], 0.7, 0.01);
    for k in 0..50 {
        let a = k as f64 * 0.13;
        let ray = Ray::new([-200.0 * a.cos(), -200.0 * a.sin(), -2.0], [a.cos(), a.sin(), 0.01 * k as f64]).unwrap();
        let got = e.chord_length(&ray);
        let want = chord_oracle(&e, &ray);
        assert!((got - want).abs() <= 1e-10 * want.max(1.0), "k={k}: {got} vs {want}");
    }
}

#[test]
fn infinite_cylinder_chord_ignores_z() {
    let e = Ellipsoid::cylinder([0.0, 0.0], 20.0, 1.0);
    let flat = Ray::new([-100.0, 0.0, 0.0], [1.0, 0.0, 0.0]).unwrap();
    assert!((e.chord_length(&flat) - 40.0).abs() < 1e-12);
    // tilted by 45° in z: chord grows by √2
    let tilted = Ray::new([-100.0, 0.0, 0.0], [1.0, 0.0, 1.0]).unwrap();
    assert!((e.chord_length(&tilted) - 40.0 * 2f64.sqrt()).abs() < 1e-10);
}

#[test]
fn background_support_is_finite() {
    let p = Phantom {
        background_mu_per_mm: 0.001,
        support_diameter_mm: 100.0,
        ..Phantom::default()
    };
    let through = Ray::new([-300.0, 0.0, 0.0], [1.0, 0.0, 0.0]).unwrap();
    assert!((p.line_integral(&through) - 0.1).abs() < 1e-12);
    let outside = Ray::new([-300.0, 60.0, 0.0], [1.0, 0.0, 0.0]).unwrap();
    assert_eq!(p.line_integral(&outside), 0.0);
}

#[test]
fn ray_geometry() {
    let g = ScannerGeometry::default();
    for view in [0, 17, 719, 1000] {
        for col in [0, 100, 255] {
            let ray = g.ray_for_channel(view, 0, col).unwrap();
            let (beta, z) = g.source_position(view);
            let r = g.focal_length_mm;
            assert!((ray.origin_mm[0] + r * beta.sin()).abs() < 1e-9);
            assert!((ray.origin_mm[1] - r * beta.cos()).abs() < 1e-9);
            assert_eq!(ray.origin_mm[2], z);
            // in-plane distance to the axis is R·|sin γ|
            let gamma = g.fan_angle(col as f64);
            assert!((ray.axis_distance() - r * gamma.sin().abs()).abs() < 1e-9);
        }
    }
    assert!(g.ray_for_channel(0, 16, 0).is_err());
    assert!(g.ray_for_channel(0, 0, 256).is_err());
}

#[test]
fn centered_cylinder_profile_is_view_invariant() {
    let g = ScannerGeometry {
        detector_rows: 2,
        detector_cols: 64,
        channel_angle_step_rad: 0.004,
        views_per_rotation: 90,
        ..ScannerGeometry::default()
    };
    // z-invariant object, so the helical table motion does not matter
    let p = phantom(vec![Ellipsoid::cylinder([0.0, 0.0], 40.0, 0.02)]);
    let s = forward_project(&p, &g, 90).unwrap();
    let first = &s.frames[0].data;
    for f in &s.frames {
        for (a, b) in f.data.iter().zip(first.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
    }
}

#[test]
fn off_center_cylinder_traces_a_sinusoid() {
    let g = ScannerGeometry {
        detector_rows: 1,
        detector_cols: 255,
        channel_angle_step_rad: 0.0015,
        views_per_rotation: 72,
        row_spacing_iso_mm: 1.0,
        ..ScannerGeometry::default()
    };
    let (x0, y0, a) = (40.0, 10.0, 6.0);
    let p = phantom(vec![Ellipsoid::cylinder([x0, y0], a, 0.02)]);
    let s = forward_project(&p, &g, 72).unwrap();
    let r = g.focal_length_mm;
    for f in &s.frames {
        let row = f.data.row(0);
        let (mut best, mut col) = (f64::MIN, 0);
        for (c, &v) in row.iter().enumerate() {
            if v > best {
                best = v;
                col = c;
            }
        }
        // the ray through the sphere center has γ = atan2 of the center
        // seen from the source, measured from the central ray
        let beta = f.gantry_angle_rad;
        let src = [-r * beta.sin(), r * beta.cos()];
        let to_c = [x0 - src[0], y0 - src[1]];
        let to_iso = [-src[0], -src[1]];
        let cross = to_iso[0] * to_c[1] - to_iso[1] * to_c[0];
        let dot = to_iso[0] * to_c[0] + to_iso[1] * to_c[1];
        let gamma = cross.atan2(dot);
        let predicted = g.column_of(gamma);
        assert!((col as f64 - predicted).abs() <= 1.0, "view {}: max at {col}, predicted {predicted:.2}", f.view);
    }
}

#[test]
fn insert_phantom_rasterizes_nominal_values() {
    let (p, inserts) = insert_phantom(85.0, 0.02);
    let img = p.rasterize_slice(0.0, 128, 1.5).unwrap();
    assert_eq!(img.data[[0, 0]], -1000.0);
    assert!(img.data[[64, 64]].abs() < 1e-9);
    for ins in &inserts {
        let (x, y) = (ins.center_mm[0], ins.center_mm[1]);
        let hu = p.mu_to_hu(p.mu_at(&[x, y, 0.0]));
        assert!((hu - ins.nominal_hu).abs() < 1e-9, "{}: {hu}", ins.name);
    }
    let names: Vec<&str> = inserts.iter().map(|i| i.name.as_str()).collect();
    assert_eq!(names, ["air", "polyethylene", "acrylic", "bone"]);
}

#[test]
fn phantom_toml_round_trip() {
    let p = random_phantom(&RandomPhantomConfig::default(), 10.0, 42);
    let back = Phantom::from_toml_str(&p.to_toml_string()).unwrap();
    assert_eq!(p, back);
    assert_eq!(random_phantom(&RandomPhantomConfig::default(), 10.0, 42), p);
    assert_ne!(random_phantom(&RandomPhantomConfig::default(), 10.0, 43), p);
    assert!(Phantom::from_toml_str("[[ellipsoids]]\ncenter_mm = [0,0,0]\nsemi_axes_mm = [1,0,1]\ndelta_mu_per_mm = 1").is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn additive_over_ellipsoids(seed in 0u64..1000, a in -3.0f64..3.0, off in -40.0f64..40.0) {
        let p = random_phantom(&RandomPhantomConfig::default(), 0.0, seed);
        let ray = Ray::new([-300.0 * a.cos(), -300.0 * a.sin(), off * 0.2], [a.cos(), a.sin() + off * 1e-3, 0.02]).unwrap();
        let whole = p.line_integral(&ray);
        let parts: f64 = p.ellipsoids.iter().map(|e| phantom(vec![e.clone()]).line_integral(&ray)).sum();
        prop_assert!((whole - parts).abs() <= 1e-12 * whole.abs().max(1.0));
        let oracle = line_integral_oracle(&p, &ray);
        prop_assert!((whole - oracle).abs() <= 1e-10 * oracle.abs().max(1e-3));
    }

    #[test]
    fn rotation_invariance(seed in 0u64..1000, phi in 0.0f64..6.28, a in 0.0f64..6.28, off in -50.0f64..50.0) {
        let p = random_phantom(&RandomPhantomConfig::default(), 0.0, seed);
        let rot = |v: [f64; 3]| [phi.cos() * v[0] - phi.sin() * v[1], phi.sin() * v[0] + phi.cos() * v[1], v[2]];
        let mut q = p.clone();
        for e in &mut q.ellipsoids {
            e.center_mm = rot(e.center_mm);
            e.z_rotation_rad += phi;
        }
        let o = [-300.0 * a.cos() - off * a.sin(), -300.0 * a.sin() + off * a.cos(), 1.0];
        let d = [a.cos(), a.sin(), 0.003];
        let r1 = Ray::new(o, d).unwrap();
        let r2 = Ray::new(rot(o), rot(d)).unwrap();
        let (x, y) = (p.line_integral(&r1), q.line_integral(&r2));
        prop_assert!((x - y).abs() <= 1e-10 * x.abs().max(1e-3));
    }

    #[test]
    fn attenuation_scaling_is_exact(seed in 0u64..200, s in 0.1f64..4.0) {
        let g = ScannerGeometry { detector_rows: 2, detector_cols: 16, views_per_rotation: 36, ..ScannerGeometry::default() };
        let p = random_phantom(&RandomPhantomConfig::default(), 0.0, seed);
        let a = forward_project(&p, &g, 4).unwrap();
        let b = forward_project(&p.scaled(s), &g, 4).unwrap();
        for (fa, fb) in a.frames.iter().zip(&b.frames) {
            for (x, y) in fa.data.iter().zip(fb.data.iter()) {
                prop_assert!((x * s - y).abs() <= 1e-12 * y.abs().max(1.0));
            }
        }
    }
}
