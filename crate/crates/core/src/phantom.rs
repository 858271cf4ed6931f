//! Analytic ellipsoid phantoms: exact line integrals, HU rasterization and a
//! seeded random-phantom generator for training data.

use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Ray, Vec3};
use crate::recon::{Provenance, SliceImage};

pub const DEFAULT_MU_WATER: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ellipsoid {
    pub center_mm: Vec3,
    pub semi_axes_mm: Vec3,
    #[serde(default)]
    pub z_rotation_rad: f64,
    pub delta_mu_per_mm: f64,
}

impl Ellipsoid {
    pub fn new(center_mm: Vec3, semi_axes_mm: Vec3, z_rotation_rad: f64, delta_mu_per_mm: f64) -> Self {
        Self {
            center_mm,
            semi_axes_mm,
            z_rotation_rad,
            delta_mu_per_mm,
        }
    }

    pub fn sphere(center_mm: Vec3, radius_mm: f64, delta_mu_per_mm: f64) -> Self {
        Self::new(center_mm, [radius_mm; 3], 0.0, delta_mu_per_mm)
    }

    /// Infinite cylinder along z (an ellipsoid with an infinite z semi-axis).
    pub fn cylinder(center_xy: [f64; 2], radius_mm: f64, delta_mu_per_mm: f64) -> Self {
        Self::new([center_xy[0], center_xy[1], 0.0], [radius_mm, radius_mm, f64::INFINITY], 0.0, delta_mu_per_mm)
    }

    fn validate(&self) -> Result<()> {
        if self.semi_axes_mm.iter().any(|&a| !(a > 0.0)) || !(self.semi_axes_mm[0].is_finite() && self.semi_axes_mm[1].is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "ellipsoid semi-axes must be > 0, got {:?}",
                self.semi_axes_mm
            )));
        }
        Ok(())
    }

    /// Maps a world point into the ellipsoid's unit-sphere frame.
    #[inline]
    fn to_local(&self, p: &Vec3, translate: bool) -> Vec3 {
        let (s, c) = self.z_rotation_rad.sin_cos();
        let (x, y, z) = if translate {
            (p[0] - self.center_mm[0], p[1] - self.center_mm[1], p[2] - self.center_mm[2])
        } else {
            (p[0], p[1], p[2])
        };
        [
            (c * x + s * y) / self.semi_axes_mm[0],
            (-s * x + c * y) / self.semi_axes_mm[1],
            z / self.semi_axes_mm[2],
        ]
    }

    /// Length of the ray segment inside the ellipsoid.
    pub fn chord_length(&self, ray: &Ray) -> f64 {
        let o = self.to_local(&ray.origin_mm, true);
        let d = self.to_local(&ray.direction, false);
        chord_unit_sphere(&o, &d)
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        let q = self.to_local(p, true);
        q[0] * q[0] + q[1] * q[1] + q[2] * q[2] <= 1.0
    }
}

/// Parameter-length of `o + t·d` inside the unit sphere.
#[inline]
fn chord_unit_sphere(o: &Vec3, d: &Vec3) -> f64 {
    // b² − ac written as a·(1 − |o⊥|²) with o⊥ the foot point, which avoids
    // cancellation for origins far from the sphere.
    let a = d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
    if a == 0.0 {
        return 0.0;
    }
    let t = (o[0] * d[0] + o[1] * d[1] + o[2] * d[2]) / a;
    let p = [o[0] - t * d[0], o[1] - t * d[1], o[2] - t * d[2]];
    let q = 1.0 - (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]);
    if q <= 0.0 {
        return 0.0;
    }
    2.0 * (q / a).sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Phantom {
    #[serde(default)]
    pub ellipsoids: Vec<Ellipsoid>,
    #[serde(default)]
    pub background_mu_per_mm: f64,
    /// Diameter of the z-aligned cylinder holding the background medium.
    #[serde(default = "default_support")]
    pub support_diameter_mm: f64,
    #[serde(default = "default_mu_water")]
    pub mu_water_per_mm: f64,
}

fn default_support() -> f64 {
    500.0
}

fn default_mu_water() -> f64 {
    DEFAULT_MU_WATER
}

impl Default for Phantom {
    fn default() -> Self {
        Self {
            ellipsoids: Vec::new(),
            background_mu_per_mm: 0.0,
            support_diameter_mm: default_support(),
            mu_water_per_mm: DEFAULT_MU_WATER,
        }
    }
}

impl Phantom {
    pub fn validate(&self) -> Result<()> {
        if !(self.mu_water_per_mm.is_finite() && self.mu_water_per_mm > 0.0) {
            return Err(Error::InvalidArgument("mu_water_per_mm must be > 0".into()));
        }
        if !(self.support_diameter_mm > 0.0) {
            return Err(Error::InvalidArgument("support_diameter_mm must be > 0".into()));
        }
        self.ellipsoids.iter().try_for_each(Ellipsoid::validate)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let p: Phantom = toml::from_str(text).map_err(|e| Error::Config(format!("phantom: {e}")))?;
        p.validate()?;
        Ok(p)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("phantom serializes to TOML")
    }

    /// Multiplies every attenuation (background and inserts) by `s`.
    pub fn scaled(&self, s: f64) -> Self {
        let mut p = self.clone();
        p.background_mu_per_mm *= s;
        for e in &mut p.ellipsoids {
            e.delta_mu_per_mm *= s;
        }
        p
    }

    pub fn hu_to_mu(&self, hu: f64) -> f64 {
        self.mu_water_per_mm * (1.0 + hu / 1000.0)
    }

    pub fn mu_to_hu(&self, mu: f64) -> f64 {
        1000.0 * (mu - self.mu_water_per_mm) / self.mu_water_per_mm
    }

    fn background_chord(&self, ray: &Ray) -> f64 {
        let rho = 0.5 * self.support_diameter_mm;
        let o = [ray.origin_mm[0] / rho, ray.origin_mm[1] / rho, 0.0];
        let d = [ray.direction[0] / rho, ray.direction[1] / rho, 0.0];
        chord_unit_sphere(&o, &d)
    }

    /// Exact attenuation line integral along `ray`.
    pub fn line_integral(&self, ray: &Ray) -> f64 {
        let mut sum = 0.0;
        if self.background_mu_per_mm != 0.0 {
            sum += self.background_mu_per_mm * self.background_chord(ray);
        }
        for e in &self.ellipsoids {
            sum += e.delta_mu_per_mm * e.chord_length(ray);
        }
        sum
    }

    /// Attenuation at a point.
    pub fn mu_at(&self, p: &Vec3) -> f64 {
        let rho = 0.5 * self.support_diameter_mm;
        let mut mu = if p[0] * p[0] + p[1] * p[1] <= rho * rho {
            self.background_mu_per_mm
        } else {
            0.0
        };
        for e in &self.ellipsoids {
            if e.contains(p) {
                mu += e.delta_mu_per_mm;
            }
        }
        mu
    }

    /// Samples HU at pixel centers of a `size × size` slice at height `z_mm`.
    pub fn rasterize_slice(&self, z_mm: f64, image_size: usize, pixel_mm: f64) -> Result<SliceImage> {
        if image_size == 0 {
            return Err(Error::InvalidArgument("image_size must be >= 1".into()));
        }
        let half = (image_size as f64 - 1.0) / 2.0;
        let data = Array2::from_shape_fn((image_size, image_size), |(iy, ix)| {
            let p = [(ix as f64 - half) * pixel_mm, (iy as f64 - half) * pixel_mm, z_mm];
            self.mu_to_hu(self.mu_at(&p))
        });
        SliceImage::new(data, z_mm, pixel_mm, Provenance::GroundTruth)
    }
}

/// Bounds for randomly generated training phantoms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RandomPhantomConfig {
    pub body_radius_mm: [f64; 2],
    pub min_inserts: usize,
    pub max_inserts: usize,
    pub insert_radius_mm: [f64; 2],
    pub insert_half_length_mm: [f64; 2],
    pub insert_hu: [f64; 2],
    pub mu_water_per_mm: f64,
}

impl Default for RandomPhantomConfig {
    fn default() -> Self {
        Self {
            body_radius_mm: [60.0, 85.0],
            min_inserts: 4,
            max_inserts: 10,
            insert_radius_mm: [4.0, 25.0],
            insert_half_length_mm: [4.0, 40.0],
            insert_hu: [-400.0, 800.0],
            mu_water_per_mm: DEFAULT_MU_WATER,
        }
    }
}

/// Water-equivalent elliptical body with random ellipsoidal inserts, spread
/// around `z_center_mm`. Deterministic for a given seed.
pub fn random_phantom(cfg: &RandomPhantomConfig, z_center_mm: f64, seed: u64) -> Phantom {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mu_w = cfg.mu_water_per_mm;
    let mut uni = |r: [f64; 2]| if r[1] > r[0] { rng.random_range(r[0]..r[1]) } else { r[0] };
    let bx = uni(cfg.body_radius_mm);
    let by = uni([0.75 * bx, bx]);
    let body_rot = uni([0.0, std::f64::consts::PI]);
    let mut ellipsoids = vec![Ellipsoid::new([0.0, 0.0, 0.0], [bx, by, f64::INFINITY], body_rot, mu_w)];
    let n = if cfg.max_inserts > cfg.min_inserts {
        cfg.min_inserts + (uni([0.0, (cfg.max_inserts - cfg.min_inserts + 1) as f64]) as usize)
    } else {
        cfg.min_inserts
    };
    let (rs, rc) = body_rot.sin_cos();
    for _ in 0..n {
        let a = uni(cfg.insert_radius_mm);
        let b = uni([0.4 * a, a]);
        let reach = (bx.min(by) - a).max(0.0);
        let rad = reach * uni([0.0, 1.0]).sqrt();
        let phi = uni([0.0, 2.0 * std::f64::consts::PI]);
        let (lx, ly) = (rad * phi.cos() * bx / bx.max(by), rad * phi.sin() * by / bx.max(by));
        let cx = rc * lx - rs * ly;
        let cy = rs * lx + rc * ly;
        let cz = z_center_mm + uni([-20.0, 20.0]);
        let hz = uni(cfg.insert_half_length_mm);
        let rot = uni([0.0, std::f64::consts::PI]);
        let hu = uni(cfg.insert_hu);
        ellipsoids.push(Ellipsoid::new([cx, cy, cz], [a, b, hz], rot, mu_w * hu / 1000.0));
    }
    Phantom {
        ellipsoids,
        background_mu_per_mm: 0.0,
        support_diameter_mm: default_support(),
        mu_water_per_mm: mu_w,
    }
}

/// Water cylinder with the four standard CT-number inserts
/// (air −1000, polyethylene −95, acrylic 120, bone 955 HU).
pub fn insert_phantom(body_radius_mm: f64, mu_water: f64) -> (Phantom, Vec<MaterialInsert>) {
    let r_ins = 0.16 * body_radius_mm;
    let ring = 0.55 * body_radius_mm;
    let materials = [("air", -1000.0), ("polyethylene", -95.0), ("acrylic", 120.0), ("bone", 955.0)];
    let mut ellipsoids = vec![Ellipsoid::cylinder([0.0, 0.0], body_radius_mm, mu_water)];
    let mut inserts = Vec::new();
    for (k, (name, hu)) in materials.iter().enumerate() {
        let ang = std::f64::consts::FRAC_PI_4 + k as f64 * std::f64::consts::FRAC_PI_2;
        let c = [ring * ang.cos(), ring * ang.sin()];
        ellipsoids.push(Ellipsoid::cylinder(c, r_ins, mu_water * hu / 1000.0));
        inserts.push(MaterialInsert {
            name: (*name).to_string(),
            nominal_hu: *hu,
            center_mm: c,
            radius_mm: r_ins,
        });
    }
    let phantom = Phantom {
        ellipsoids,
        mu_water_per_mm: mu_water,
        ..Phantom::default()
    };
    (phantom, inserts)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaterialInsert {
    pub name: String,
    pub nominal_hu: f64,
    pub center_mm: [f64; 2],
    pub radius_mm: f64,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ray(o: Vec3, d: Vec3) -> Ray {
        Ray::new(o, d).unwrap()
    }

    #[test]
    fn empty_phantom_integrates_to_zero() {
        let p = Phantom::default();
        assert_eq!(p.line_integral(&ray([-300.0, 0.0, 0.0], [1.0, 0.0, 0.0])), 0.0);
    }

    #[test]
    fn diameter_chord() {
        let p = Phantom {
            ellipsoids: vec![Ellipsoid::sphere([0.0; 3], 10.0, 0.03)],
            ..Phantom::default()
        };
        let v = p.line_integral(&ray([-300.0, 0.0, 0.0], [1.0, 0.0, 0.0]));
        assert!((v - 2.0 * 10.0 * 0.03).abs() < 1e-14);
    }

    #[test]
    fn offset_chord_is_a_sqrt3() {
        let p = Phantom {
            ellipsoids: vec![Ellipsoid::sphere([5.0, -2.0, 1.0], 8.0, 0.02)],
            ..Phantom::default()
        };
        let v = p.line_integral(&ray([-300.0, 2.0, 1.0], [1.0, 0.0, 0.0]));
        let expect = 8.0 * 3f64.sqrt() * 0.02;
        assert!((v - expect).abs() < 1e-13, "{v} vs {expect}");
    }

    #[test]
    fn background_support_is_finite() {
        let p = Phantom {
            background_mu_per_mm: 0.01,
            support_diameter_mm: 100.0,
            ..Phantom::default()
        };
        let v = p.line_integral(&ray([-1000.0, 0.0, 3.0], [1.0, 0.0, 0.0]));
        assert!((v - 1.0).abs() < 1e-12);
        assert_eq!(p.line_integral(&ray([-1000.0, 60.0, 0.0], [1.0, 0.0, 0.0])), 0.0);
    }

    #[test]
    fn rasterize_calibration_points() {
        let mu = 0.02;
        let air = Phantom::default().rasterize_slice(0.0, 8, 1.0).unwrap();
        assert!(air.data.iter().all(|&v| v == -1000.0));

        let p = Phantom {
            ellipsoids: vec![
                Ellipsoid::cylinder([0.0, 0.0], 100.0, mu),
                Ellipsoid::cylinder([0.0, 0.0], 2.0, 0.12 * mu),
            ],
            ..Phantom::default()
        };
        let img = p.rasterize_slice(0.0, 9, 5.0).unwrap();
        assert!((img.data[[4, 4]] - 120.0).abs() < 1e-9);
        assert!(img.data[[0, 4]].abs() < 1e-9);
    }

    #[test]
    fn rasterize_rejects_empty_image() {
        assert!(Phantom::default().rasterize_slice(0.0, 0, 1.0).is_err());
    }

    #[test]
    fn toml_roundtrip() {
        let (p, _) = insert_phantom(100.0, 0.019);
        let text = p.to_toml_string();
        let back = Phantom::from_toml_str(&text).unwrap();
        assert_eq!(p, back);
    }

    #[test]
    fn toml_rejects_non_positive_axes() {
        let text = r#"
[[ellipsoids]]
center_mm = [0.0, 0.0, 0.0]
semi_axes_mm = [1.0, 0.0, 1.0]
delta_mu_per_mm = 0.01
"#;
        assert!(Phantom::from_toml_str(text).is_err());
    }

    #[test]
    fn random_phantom_is_seeded() {
        let cfg = RandomPhantomConfig::default();
        assert_eq!(random_phantom(&cfg, 0.0, 7), random_phantom(&cfg, 0.0, 7));
        assert_ne!(random_phantom(&cfg, 0.0, 7), random_phantom(&cfg, 0.0, 8));
        let p = random_phantom(&cfg, 0.0, 7);
        assert!(p.validate().is_ok());
        assert!(p.ellipsoids.len() > cfg.min_inserts);
    }
}
