//! Pipeline configuration: a TOML file plus `--set key=value` overrides.
//!
//! Relative paths are resolved against the directory holding the config file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::denoise::{MirMode, TrainConfig};
use crate::error::{Error, Result};
use crate::geometry::ScannerGeometry;
use crate::io::sha256_hex;
use crate::metrics::DisplayWindow;
use crate::noise::DoseKind;
use crate::phantom::{insert_phantom, random_phantom, Ellipsoid, MaterialInsert, Phantom, RandomPhantomConfig, DEFAULT_MU_WATER};
use crate::rebin::RebinGrid;
use crate::recon::{ConvolutionPath, RowWeight};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Root of every random stream (noise, phantoms, initialization, batches).
    pub seed: u64,
    pub geometry: ScannerGeometry,
    pub acquisition: AcquisitionConfig,
    pub phantom: PhantomSpec,
    pub dose: DoseConfig,
    /// Parallel grid; native sampling when absent.
    pub rebin: Option<RebinGrid>,
    pub recon: ReconConfig,
    pub denoiser: DenoiserConfig,
    pub train: TrainBlock,
    pub metrics: MetricsConfig,
    pub output: OutputConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            geometry: ScannerGeometry::default(),
            acquisition: AcquisitionConfig::default(),
            phantom: PhantomSpec::default(),
            dose: DoseConfig::default(),
            rebin: None,
            recon: ReconConfig::default(),
            denoiser: DenoiserConfig::default(),
            train: TrainBlock::default(),
            metrics: MetricsConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AcquisitionConfig {
    pub views: usize,
}

impl Default for AcquisitionConfig {
    fn default() -> Self {
        Self { views: 2160 }
    }
}

fn default_body_radius() -> f64 {
    85.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PhantomSpec {
    /// Water cylinder with air, polyethylene, acrylic and bone inserts.
    Inserts {
        #[serde(default = "default_body_radius")]
        body_radius_mm: f64,
    },
    /// Uniform water cylinder.
    Water {
        #[serde(default = "default_body_radius")]
        radius_mm: f64,
    },
    /// Random ellipsoids in a water body, centered on the acquisition.
    Random {
        #[serde(default)]
        seed: u64,
        #[serde(default)]
        bounds: RandomPhantomConfig,
    },
    /// A phantom TOML file.
    File { path: PathBuf },
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec::Inserts {
            body_radius_mm: default_body_radius(),
        }
    }
}

impl PhantomSpec {
    /// Phantom and its labeled material inserts. `seed` is mixed into random phantoms.
    pub fn build(&self, z_center_mm: f64, seed: u64) -> Result<(Phantom, Vec<MaterialInsert>)> {
        match self {
            PhantomSpec::Inserts { body_radius_mm } => Ok(insert_phantom(*body_radius_mm, DEFAULT_MU_WATER)),
            PhantomSpec::Water { radius_mm } => Ok((
                Phantom {
                    ellipsoids: vec![Ellipsoid::cylinder([0.0, 0.0], *radius_mm, DEFAULT_MU_WATER)],
                    ..Phantom::default()
                },
                Vec::new(),
            )),
            PhantomSpec::Random { seed: s, bounds } => Ok((random_phantom(bounds, z_center_mm, seed ^ s), Vec::new())),
            PhantomSpec::File { path } => Ok((Phantom::load(path)?, Vec::new())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DoseConfig {
    /// Full-dose incident photons per detector element.
    pub base_n0: f64,
    /// Low-dose fraction of the full dose, in (0, 1].
    pub fraction: f64,
    pub profile: DoseKind,
}

impl Default for DoseConfig {
    fn default() -> Self {
        Self {
            base_n0: 1e6,
            fraction: 0.25,
            profile: DoseKind::Uniform,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReconConfig {
    /// Odd number of ramp-filter taps; 0 picks `2·distances − 1`.
    pub kernel_length: usize,
    pub convolution: ConvolutionPath,
    pub image_size: usize,
    pub pixel_mm: f64,
    /// Distance between output (target) slices.
    pub slice_spacing_mm: f64,
    /// Window half-width of every denoiser; also the number of intermediate
    /// slices between targets.
    pub f: usize,
    pub targets: usize,
    /// First target; centered in the fully covered z range when absent.
    pub z_first_mm: Option<f64>,
    pub row_weight: RowWeight,
    pub slice_thickness_mm: Option<f64>,
}

impl Default for ReconConfig {
    fn default() -> Self {
        Self {
            kernel_length: 0,
            convolution: ConvolutionPath::Fft,
            image_size: 128,
            pixel_mm: 1.8,
            slice_spacing_mm: 2.0,
            f: 1,
            targets: 8,
            z_first_mm: None,
            row_weight: RowWeight::Uniform,
            slice_thickness_mm: None,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum DenoiseMode {
    /// Plain rebinning and reconstruction.
    #[serde(rename = "none")]
    None,
    /// Gaussian temporal averages in both domains.
    #[default]
    #[serde(rename = "baseline")]
    Baseline,
    #[serde(rename = "mpd")]
    Mpd,
    #[serde(rename = "mpd+mir")]
    MpdMir,
}

impl DenoiseMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            DenoiseMode::None => "none",
            DenoiseMode::Baseline => "baseline",
            DenoiseMode::Mpd => "mpd",
            DenoiseMode::MpdMir => "mpd+mir",
        }
    }

    pub fn uses_mpd(&self) -> bool {
        matches!(self, DenoiseMode::Mpd | DenoiseMode::MpdMir)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserConfig {
    pub mode: DenoiseMode,
    pub mir_mode: MirMode,
    pub mpd_widths: [usize; 2],
    pub mir_widths: [usize; 2],
    pub priors_to_step2: bool,
    pub mpd_checkpoint: PathBuf,
    pub mir_checkpoint: PathBuf,
    /// Gaussian σ (in frames) of the baseline average; `inf` is uniform.
    pub baseline_sigma: f64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            mode: DenoiseMode::Baseline,
            mir_mode: MirMode::Decoupled,
            mpd_widths: [16, 32],
            mir_widths: [16, 32],
            priors_to_step2: false,
            mpd_checkpoint: PathBuf::from("models/mpd.json"),
            mir_checkpoint: PathBuf::from("models/mir.json"),
            baseline_sigma: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainBlock {
    /// Random training phantoms; their seeds start at `phantom_seed`.
    pub phantoms: usize,
    pub val_phantoms: usize,
    pub phantom_seed: u64,
    pub bounds: RandomPhantomConfig,
    /// Every phantom is simulated at each of these dose fractions.
    pub dose_fractions: Vec<f64>,
    pub mpd: TrainConfig,
    pub mir: TrainConfig,
}

impl Default for TrainBlock {
    fn default() -> Self {
        Self {
            phantoms: 4,
            val_phantoms: 1,
            phantom_seed: 1000,
            bounds: RandomPhantomConfig::default(),
            dose_fractions: vec![0.25],
            mpd: TrainConfig::default(),
            mir: TrainConfig::default(),
        }
    }
}

/// Square ROIs tiled with a fixed stride inside a circle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NpsSpec {
    pub roi_px: usize,
    pub stride_px: usize,
    pub center_mm: [f64; 2],
    pub radius_mm: f64,
}

impl Default for NpsSpec {
    fn default() -> Self {
        Self {
            roi_px: 64,
            stride_px: 32,
            center_mm: [0.0, 0.0],
            radius_mm: 70.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    pub windows: Vec<DisplayWindow>,
    /// Also report MSE/SSIM on raw HU (dynamic range: full-range width).
    pub raw_hu: bool,
    pub nps: Option<NpsSpec>,
    /// CT-number ROI radius relative to the insert radius.
    pub roi_fraction: f64,
    pub ttf: bool,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            windows: vec![DisplayWindow::soft_tissue(), DisplayWindow::full_range()],
            raw_hu: true,
            nps: None,
            roi_fraction: 0.6,
            ttf: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("ldct-out"),
        }
    }
}

/// A validation failure tied to a dotted key.
struct Issue {
    key: &'static str,
    message: String,
}

fn issue(key: &'static str, message: impl Into<String>) -> Issue {
    Issue {
        key,
        message: message.into(),
    }
}

/// 1-based line of `key` (dotted path) in a TOML text, if written there.
fn locate(text: &str, key: &str) -> Option<usize> {
    let (section, leaf) = match key.rsplit_once('.') {
        Some((s, l)) => (s, l),
        None => ("", key),
    };
    let mut current = String::new();
    let mut section_line = None;
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if let Some(h) = line.strip_prefix('[') {
            current = h.trim_start_matches('[').trim_end_matches(']').trim().to_string();
            if current == section {
                section_line = Some(n + 1);
            }
            continue;
        }
        if let Some((k, _)) = line.split_once('=') {
            let k = k.trim();
            let full = if current.is_empty() { k.to_string() } else { format!("{current}.{k}") };
            if full == key || (current == section && k == leaf) {
                return Some(n + 1);
            }
        }
    }
    section_line
}

fn parse_override(raw: &str) -> Result<(Vec<String>, toml::Value)> {
    let (key, value) = raw
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("--set {raw}: expected key=value")))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::Config(format!("--set {raw}: malformed key")));
    }
    let value = value.trim();
    let parsed = toml::from_str::<toml::Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()));
    Ok((key.split('.').map(String::from).collect(), parsed))
}

fn apply_override(table: &mut toml::Table, path: &[String], value: toml::Value, raw: &str) -> Result<()> {
    let (last, parents) = path.split_last().expect("non-empty key");
    let mut t = table;
    for p in parents {
        let entry = t.entry(p.clone()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        t = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("--set {raw}: `{p}` is not a table")))?;
    }
    t.insert(last.clone(), value);
    Ok(())
}

impl PipelineConfig {
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, &path.display().to_string(), base, overrides)
    }

    /// Parses, applies overrides, resolves relative paths against `base_dir`
    /// and validates. Errors carry `source:line` where the key was written.
    pub fn from_toml(text: &str, source: &str, base_dir: &Path, overrides: &[String]) -> Result<Self> {
        let mut cfg: PipelineConfig = toml::from_str(text).map_err(|e| Error::Config(format!("{source}: {e}")))?;
        let mut overridden = Vec::new();
        if !overrides.is_empty() {
            let mut table: toml::Table = text.parse().map_err(|e| Error::Config(format!("{source}: {e}")))?;
            for raw in overrides {
                let (path, value) = parse_override(raw)?;
                apply_override(&mut table, &path, value, raw)?;
                overridden.push(path.join("."));
            }
            cfg = PipelineConfig::deserialize(table).map_err(|e| Error::Config(format!("--set overrides: {e}")))?;
        }
        cfg.resolve_paths(base_dir);
        if let Err(issues) = cfg.check() {
            let msgs: Vec<String> = issues
                .iter()
                .map(|i| {
                    let place = if overridden.iter().any(|k| k == i.key) {
                        "--set".to_string()
                    } else {
                        match locate(text, i.key) {
                            Some(line) => format!("{source}:{line}"),
                            None => format!("{source} (default)"),
                        }
                    };
                    format!("{place}: {}: {}", i.key, i.message)
                })
                .collect();
            return Err(Error::Config(msgs.join("\n")));
        }
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output.dir);
        fix(&mut self.denoiser.mpd_checkpoint);
        fix(&mut self.denoiser.mir_checkpoint);
        if let PhantomSpec::File { path } = &mut self.phantom {
            fix(path);
        }
    }

    fn check(&self) -> std::result::Result<(), Vec<Issue>> {
        let mut out = Vec::new();
        if let Err(e) = self.geometry.validate() {
            out.push(issue("geometry", e.to_string()));
        }
        if self.acquisition.views < self.geometry.views_per_rotation {
            out.push(issue("acquisition.views", "must cover at least one rotation"));
        }
        if let Err(e) = self.rebin_grid().validate(&self.geometry) {
            out.push(issue("rebin", e.to_string()));
        }
        match &self.phantom {
            PhantomSpec::Inserts { body_radius_mm } | PhantomSpec::Water { radius_mm: body_radius_mm } => {
                if !(*body_radius_mm > 0.0) {
                    out.push(issue("phantom", "radius must be > 0"));
                }
            }
            PhantomSpec::File { path } => {
                if !path.is_file() {
                    out.push(issue("phantom.path", format!("file {} does not exist", path.display())));
                }
            }
            PhantomSpec::Random { .. } => {}
        }
        if !(self.dose.base_n0 > 0.0 && self.dose.base_n0.is_finite()) {
            out.push(issue("dose.base_n0", "must be finite and > 0"));
        }
        if !(self.dose.fraction > 0.0 && self.dose.fraction <= 1.0) {
            out.push(issue("dose.fraction", format!("must be in (0, 1], got {}", self.dose.fraction)));
        }
        let r = &self.recon;
        if r.kernel_length != 0 && (r.kernel_length < 3 || r.kernel_length % 2 == 0) {
            out.push(issue("recon.kernel_length", "must be 0 (automatic) or odd and >= 3"));
        }
        if r.image_size < 4 || !(r.pixel_mm > 0.0) {
            out.push(issue("recon.image_size", "image needs at least 4 pixels of positive size"));
        }
        if !(r.slice_spacing_mm > 0.0) {
            out.push(issue("recon.slice_spacing_mm", "must be > 0"));
        }
        if r.targets == 0 {
            out.push(issue("recon.targets", "must be >= 1"));
        }
        if let Some(t) = r.slice_thickness_mm {
            if !(t > 0.0) {
                out.push(issue("recon.slice_thickness_mm", "must be > 0"));
            }
        }
        let d = &self.denoiser;
        if d.mpd_widths.contains(&0) || d.mir_widths.contains(&0) {
            out.push(issue("denoiser", "network widths must be > 0"));
        }
        if !(d.baseline_sigma > 0.0) {
            out.push(issue("denoiser.baseline_sigma", "must be > 0"));
        }
        let t = &self.train;
        if t.dose_fractions.is_empty() || t.dose_fractions.iter().any(|&f| !(f > 0.0 && f <= 1.0)) {
            out.push(issue("train.dose_fractions", "needs at least one fraction, each in (0, 1]"));
        }
        for (key, tc) in [("train.mpd", &t.mpd), ("train.mir", &t.mir)] {
            if let Err(e) = tc.validate() {
                out.push(issue(key, e.to_string()));
            }
        }
        if self.metrics.windows.iter().any(|w| !(w.width_hu > 0.0)) {
            out.push(issue("metrics.windows", "window widths must be > 0"));
        }
        if !(self.metrics.roi_fraction > 0.0 && self.metrics.roi_fraction <= 1.0) {
            out.push(issue("metrics.roi_fraction", "must be in (0, 1]"));
        }
        if let Some(n) = &self.metrics.nps {
            if n.roi_px < 4 || n.stride_px == 0 || !(n.radius_mm > 0.0) {
                out.push(issue("metrics.nps", "roi_px >= 4, stride_px >= 1 and radius_mm > 0 required"));
            }
        }
        if out.is_empty() {
            Ok(())
        } else {
            Err(out)
        }
    }

    /// Files a command needs beyond the config itself.
    pub fn require_checkpoints(&self, mpd: bool, mir: bool) -> Result<()> {
        for (need, key, path) in [
            (mpd, "denoiser.mpd_checkpoint", &self.denoiser.mpd_checkpoint),
            (mir, "denoiser.mir_checkpoint", &self.denoiser.mir_checkpoint),
        ] {
            if need && !path.is_file() {
                return Err(Error::Config(format!("{key}: checkpoint {} does not exist", path.display())));
            }
        }
        Ok(())
    }

    pub fn rebin_grid(&self) -> RebinGrid {
        self.rebin.clone().unwrap_or_else(|| RebinGrid::native(&self.geometry))
    }

    pub fn kernel_length(&self) -> usize {
        match self.recon.kernel_length {
            0 => 2 * self.rebin_grid().num_distances - 1,
            n => n,
        }
    }

    /// Source z range of the acquisition.
    pub fn source_z_range(&self) -> (f64, f64) {
        let g = &self.geometry;
        (g.source_z(0.0), g.source_z((self.acquisition.views - 1) as f64))
    }

    /// Target z positions: the configured first target, or the targets
    /// centered between the acquisition ends.
    pub fn target_z(&self) -> Vec<f64> {
        let r = &self.recon;
        let span = (r.targets - 1) as f64 * r.slice_spacing_mm;
        let first = r.z_first_mm.unwrap_or_else(|| {
            let (a, b) = self.source_z_range();
            0.5 * (a + b) - 0.5 * span
        });
        (0..r.targets).map(|k| first + k as f64 * r.slice_spacing_mm).collect()
    }

    /// Canonical JSON of the resolved configuration.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    /// Digest of everything that affects results; the output location is
    /// left out so identical runs into different directories agree.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output = OutputConfig::default();
        sha256_hex(c.canonical_json().as_bytes())
    }
}
