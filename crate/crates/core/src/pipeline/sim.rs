use std::path::Path;

use ndarray::Array2;

use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::geometry::ScannerGeometry;
use crate::io::{read_artifact, read_text, write_artifact, write_text, ArtifactHeader, ProvenanceStep};
use crate::noise::{inject_noise_stream, make_dose_profile, prior_stream, simulate_low_dose_stream};
use crate::phantom::{MaterialInsert, Phantom};
use crate::projection::{forward_project, ProjectionFrame, ProjectionStream};

/// One simulated acquisition of a phantom at one dose fraction.
#[derive(Clone, Debug)]
pub struct Simulation {
    pub phantom: Phantom,
    pub inserts: Vec<MaterialInsert>,
    pub clean: ProjectionStream,
    /// Full-dose noisy stream (frames carry their N0 maps).
    pub full: ProjectionStream,
    pub low: ProjectionStream,
    /// Φ per view.
    pub prior: Vec<Array2<f64>>,
    pub fraction: f64,
    pub noise_seed: u64,
}

impl Simulation {
    /// Same phantom and full-dose data at another dose fraction. The low-dose
    /// realization depends only on `noise_seed`, so sweeps share it.
    pub fn at_fraction(&self, fraction: f64) -> Result<Simulation> {
        let low = simulate_low_dose_stream(&self.full, fraction, self.noise_seed)?;
        let prior = prior_stream(&low, &self.full)?;
        Ok(Simulation {
            low,
            prior,
            fraction,
            ..self.clone()
        })
    }
}

/// Projects `phantom`, adds full-dose noise and derives the low-dose stream.
pub fn simulate_phantom(
    cfg: &PipelineConfig,
    phantom: Phantom,
    inserts: Vec<MaterialInsert>,
    fraction: f64,
    noise_seed: u64,
) -> Result<Simulation> {
    let views = cfg.acquisition.views;
    let clean = forward_project(&phantom, &cfg.geometry, views)?;
    let dose = make_dose_profile(&cfg.geometry, &cfg.dose.profile, cfg.dose.base_n0, 0, views)?;
    let full = inject_noise_stream(&clean, &dose, noise_seed)?;
    let low = simulate_low_dose_stream(&full, fraction, noise_seed)?;
    let prior = prior_stream(&low, &full)?;
    Ok(Simulation {
        phantom,
        inserts,
        clean,
        full,
        low,
        prior,
        fraction,
        noise_seed,
    })
}

/// The configured phantom at the configured dose.
pub fn simulate(cfg: &PipelineConfig) -> Result<Simulation> {
    let (a, b) = cfg.source_z_range();
    let (phantom, inserts) = cfg.phantom.build(0.5 * (a + b), cfg.seed)?;
    simulate_phantom(cfg, phantom, inserts, cfg.dose.fraction, cfg.seed)
}

fn stack(maps: &[&Array2<f64>]) -> Vec<f32> {
    maps.iter().flat_map(|m| m.iter().map(|&v| v as f32)).collect()
}

fn stream_header(stream: &ProjectionStream, prov: &[ProvenanceStep], what: &str) -> ArtifactHeader {
    let g = &stream.geometry;
    ArtifactHeader::new(vec![stream.len(), g.detector_rows, g.detector_cols], &["view", "row", "channel"], prov.to_vec())
        .with_meta("content", what)
        .with_meta("geometry", g)
        .with_meta("first_view", stream.first_view())
}

const SIM_FILES: [&str; 6] = ["clean", "full", "full_n0", "low", "low_n0", "prior"];

/// Writes the streams, N0 sidecars, priors, phantom and inserts under `dir`.
pub fn save_simulation(sim: &Simulation, dir: &Path, prov: &[ProvenanceStep]) -> Result<()> {
    fn n0(s: &ProjectionStream) -> Result<Vec<&Array2<f64>>> {
        s.n0_maps().ok_or_else(|| Error::stage("simulate", "stream lacks N0 maps"))
    }
    fn data(s: &ProjectionStream) -> Vec<&Array2<f64>> {
        s.frames.iter().map(|f| &f.data).collect()
    }
    let payloads: [(&str, &ProjectionStream, Vec<&Array2<f64>>); 6] = [
        ("clean", &sim.clean, data(&sim.clean)),
        ("full", &sim.full, data(&sim.full)),
        ("full_n0", &sim.full, n0(&sim.full)?),
        ("low", &sim.low, data(&sim.low)),
        ("low_n0", &sim.low, n0(&sim.low)?),
        ("prior", &sim.low, sim.prior.iter().collect()),
    ];
    for (name, stream, maps) in payloads {
        let header = stream_header(stream, prov, name)
            .with_meta("dose_fraction", sim.fraction)
            .with_meta("noise_seed", sim.noise_seed);
        write_artifact(&dir.join(name), &header, &stack(&maps))?;
    }
    write_text(&dir.join("phantom.toml"), &sim.phantom.to_toml_string())?;
    write_text(&dir.join("inserts.json"), &(serde_json::to_string_pretty(&sim.inserts)? + "\n"))?;
    Ok(())
}

fn to_maps(h: &ArtifactHeader, data: &[f32]) -> Vec<Array2<f64>> {
    let (rows, cols) = (h.shape[1], h.shape[2]);
    data.chunks_exact(rows * cols)
        .map(|c| Array2::from_shape_fn((rows, cols), |(r, k)| c[r * cols + k] as f64))
        .collect()
}

/// Reads a directory written by [`save_simulation`]; returns the provenance
/// chain stored with it.
pub fn load_simulation(dir: &Path) -> Result<(Simulation, Vec<ProvenanceStep>)> {
    let mut parts = Vec::new();
    for name in SIM_FILES {
        let stem = dir.join(name);
        let (h, d) = read_artifact(&stem).map_err(|e| match e {
            Error::Io { path, .. } => Error::stage(
                "run",
                format!("simulation artifact {} is missing; run `ldct simulate` first", path.display()),
            ),
            other => other,
        })?;
        if h.shape.len() != 3 {
            return Err(Error::Format {
                path: stem,
                message: format!("expected a view×row×channel array, got shape {:?}", h.shape),
            });
        }
        parts.push((h, d));
    }
    let (h0, _) = &parts[0];
    let geometry: ScannerGeometry = h0.meta_as("geometry").ok_or_else(|| Error::Format {
        path: dir.join("clean.json"),
        message: "missing geometry metadata".into(),
    })?;
    let first_view: usize = h0.meta_as("first_view").unwrap_or(0);
    let fraction: f64 = parts[3].0.meta_as("dose_fraction").unwrap_or(1.0);
    let noise_seed: u64 = parts[3].0.meta_as("noise_seed").unwrap_or(0);
    let maps: Vec<Vec<Array2<f64>>> = parts.iter().map(|(h, d)| to_maps(h, d)).collect();
    let build = |data: &[Array2<f64>], n0: Option<&[Array2<f64>]>| -> Result<ProjectionStream> {
        let frames = data
            .iter()
            .enumerate()
            .map(|(k, d)| {
                let view = first_view + k;
                let (angle, z) = geometry.source_position(view);
                ProjectionFrame {
                    data: d.clone(),
                    view,
                    gantry_angle_rad: angle,
                    z_mm: z,
                    n0: n0.map(|n| n[k].clone()),
                }
            })
            .collect();
        ProjectionStream::new(frames, geometry.clone())
    };
    let clean = build(&maps[0], None)?;
    let full = build(&maps[1], Some(&maps[2]))?;
    let low = build(&maps[3], Some(&maps[4]))?;
    let phantom = Phantom::from_toml_str(&read_text(&dir.join("phantom.toml"))?)?;
    let inserts: Vec<MaterialInsert> = serde_json::from_str(&read_text(&dir.join("inserts.json"))?)?;
    let prov = parts[3].0.provenance.clone();
    let mut it = maps.into_iter();
    let prior = it.nth(5).expect("prior maps");
    Ok((
        Simulation {
            phantom,
            inserts,
            clean,
            full,
            low,
            prior,
            fraction,
            noise_seed,
        },
        prov,
    ))
}
