use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use ldct_core::config::{DenoiseMode, PipelineConfig};
use ldct_core::denoise::{load_checkpoint, loss_curve_csv, save_checkpoint, Checkpoint, LossPoint, TrainOutcome};
use ldct_core::io::{read_artifact, read_text, write_artifact, write_text, ProvenanceStep};
use ldct_core::metrics::{frequency_at, svg_line_plot, MetricsReport, TtfCurve};
use ldct_core::phantom::MaterialInsert;
use ldct_core::pipeline::{
    evaluate, load_simulation, run_pipeline, save_simulation, simulate, train_mir, train_mpd, volume_data, volume_from_artifact,
    volume_header, EvalContext, Models,
};
use ldct_core::recon::{Provenance, SliceImage};
use ldct_core::{Error, Result};

/// Two-stage low-dose helical CT denoising on simulated data.
#[derive(Parser, Debug)]
#[command(name = "ldct", version)]
struct Cli {
    /// Pipeline configuration (TOML). Defaults apply when omitted.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set dose.fraction=0.17`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Single worker thread and ordered reductions; reruns are byte-identical.
    #[arg(long, global = true)]
    deterministic: bool,
    /// More log output (repeat for debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Project the configured phantom and write clean, full- and low-dose streams.
    Simulate,
    /// Train one denoising stage on random phantoms.
    Train {
        #[arg(long, value_enum)]
        stage: Stage,
        /// Continue from the stage's checkpoint, including optimizer state.
        #[arg(long)]
        resume: bool,
    },
    /// Rebin, denoise, reconstruct and evaluate the simulated acquisition.
    Run {
        /// Also write candidate streams, sinograms and slice sequences.
        #[arg(long)]
        keep_intermediates: bool,
    },
    /// Evaluate a persisted volume.
    Metrics {
        /// Volume artifact stem (path without `.json`/`.f32`).
        input: PathBuf,
        /// Reference volume for MSE/SSIM.
        #[arg(long)]
        reference: Option<PathBuf>,
        /// Inserts (JSON) for TTF and CT numbers; the simulation's when omitted.
        #[arg(long)]
        inserts: Option<PathBuf>,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Summary table and overlay plots from metric reports.
    Report {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(short, long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Stage {
    Mpd,
    Mir,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    match &cli.config {
        Some(p) => PipelineConfig::load(p, &cli.set),
        None => PipelineConfig::from_toml("", "<defaults>", &std::env::current_dir().unwrap_or_default(), &cli.set),
    }
}

fn execute(cli: &Cli) -> Result<()> {
    if cli.deterministic {
        rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build_global()
            .map_err(|e| Error::Config(format!("cannot configure the thread pool: {e}")))?;
    }
    if let Command::Report { inputs, out } = &cli.command {
        return cmd_report(inputs, out);
    }
    let cfg = load_config(cli)?;
    let step = |command: String| ProvenanceStep {
        command,
        config_sha256: cfg.hash(),
        seed: cfg.seed,
    };
    match &cli.command {
        Command::Simulate => cmd_simulate(&cfg, step("simulate".into())),
        Command::Train { stage, resume } => cmd_train(&cfg, *stage, *resume),
        Command::Run { keep_intermediates } => {
            let cmd = if *keep_intermediates { "run --keep-intermediates" } else { "run" };
            cmd_run(&cfg, *keep_intermediates, step(cmd.into()))
        }
        Command::Metrics {
            input,
            reference,
            inserts,
            out,
        } => cmd_metrics(&cfg, input, reference.as_deref(), inserts.as_deref(), out),
        Command::Report { .. } => unreachable!(),
    }
}

fn sim_dir(cfg: &PipelineConfig) -> PathBuf {
    cfg.output.dir.join("sim")
}

fn cmd_simulate(cfg: &PipelineConfig, step: ProvenanceStep) -> Result<()> {
    let sim = simulate(cfg)?;
    let dir = sim_dir(cfg);
    save_simulation(&sim, &dir, &[step])?;
    write_text(&dir.join("config.json"), &(cfg.canonical_json() + "\n"))?;
    log::info!("wrote {} views at dose fraction {} to {}", sim.low.len(), sim.fraction, dir.display());
    Ok(())
}

fn write_loss_curve(dir: &Path, stage: &str, outcome: &TrainOutcome, resumed: bool) -> Result<()> {
    let csv_path = dir.join(format!("{stage}_loss.csv"));
    let mut curve: Vec<LossPoint> = Vec::new();
    if resumed {
        if let Ok(text) = std::fs::read_to_string(&csv_path) {
            let first = outcome.curve.first().map_or(usize::MAX, |p| p.step);
            curve = parse_loss_csv(&text).into_iter().filter(|p| p.step < first).collect();
        }
    }
    curve.extend(outcome.curve.iter().copied());
    write_text(&csv_path, &loss_curve_csv(&curve))?;
    let train: Vec<(f64, f64)> = curve.iter().map(|p| (p.step as f64, p.train_loss)).collect();
    let val: Vec<(f64, f64)> = curve.iter().filter_map(|p| p.val_loss.map(|v| (p.step as f64, v))).collect();
    let svg = svg_line_plot(
        &format!("{} training loss", stage.to_uppercase()),
        "step",
        "L1 loss",
        &[("train".into(), smooth(&train, 50)), ("validation".into(), val)],
    );
    write_text(&dir.join(format!("{stage}_loss.svg")), &svg)
}

fn parse_loss_csv(text: &str) -> Vec<LossPoint> {
    let mut rd = csv::Reader::from_reader(text.as_bytes());
    rd.records()
        .filter_map(|r| r.ok())
        .filter_map(|r| {
            Some(LossPoint {
                step: r.get(0)?.parse().ok()?,
                train_loss: r.get(1)?.parse().ok()?,
                val_loss: r.get(2).and_then(|v| v.parse().ok()),
                lr: r.get(3)?.parse().ok()?,
            })
        })
        .collect()
}

/// Trailing moving average.
fn smooth(points: &[(f64, f64)], width: usize) -> Vec<(f64, f64)> {
    let mut acc = 0.0;
    points
        .iter()
        .enumerate()
        .map(|(i, &(x, y))| {
            acc += y;
            if i >= width {
                acc -= points[i - width].1;
            }
            (x, acc / (i + 1).min(width) as f64)
        })
        .collect()
}

fn cmd_train(cfg: &PipelineConfig, stage: Stage, resume: bool) -> Result<()> {
    let d = &cfg.denoiser;
    let dir = cfg.output.dir.join("train");
    match stage {
        Stage::Mpd => {
            let prev = if resume {
                match load_checkpoint(&d.mpd_checkpoint)? {
                    (Checkpoint::Mpd(m), Some(s), _) => Some((m, s)),
                    (Checkpoint::Mpd(_), None, _) => return Err(Error::Config("MPD checkpoint has no optimizer state to resume from".into())),
                    _ => return Err(Error::Config("denoiser.mpd_checkpoint holds an MIR model".into())),
                }
            } else {
                None
            };
            let (model, outcome) = train_mpd(cfg, prev)?;
            save_checkpoint(&d.mpd_checkpoint, &Checkpoint::Mpd(model), cfg.seed, Some(&cfg.train.mpd), Some(&outcome.state))?;
            write_loss_curve(&dir, "mpd", &outcome, resume)?;
            log::info!("MPD checkpoint at step {} written to {}", outcome.state.step, d.mpd_checkpoint.display());
        }
        Stage::Mir => {
            if !d.mpd_checkpoint.exists() {
                return Err(Error::Config(format!(
                    "MIR training needs the MPD checkpoint {}; run `ldct train --stage mpd` first",
                    d.mpd_checkpoint.display()
                )));
            }
            let mpd = match load_checkpoint(&d.mpd_checkpoint)?.0 {
                Checkpoint::Mpd(m) => m,
                Checkpoint::Mir(_) => return Err(Error::Config("denoiser.mpd_checkpoint holds an MIR model".into())),
            };
            let prev = if resume {
                match load_checkpoint(&d.mir_checkpoint)? {
                    (Checkpoint::Mir(m), Some(s), _) => Some((m, s)),
                    (Checkpoint::Mir(_), None, _) => return Err(Error::Config("MIR checkpoint has no optimizer state to resume from".into())),
                    _ => return Err(Error::Config("denoiser.mir_checkpoint holds an MPD model".into())),
                }
            } else {
                None
            };
            let (model, outcome) = train_mir(cfg, &mpd, prev)?;
            save_checkpoint(&d.mir_checkpoint, &Checkpoint::Mir(model), cfg.seed, Some(&cfg.train.mir), Some(&outcome.state))?;
            write_loss_curve(&dir, "mir", &outcome, resume)?;
            log::info!("MIR checkpoint at step {} written to {}", outcome.state.step, d.mir_checkpoint.display());
        }
    }
    Ok(())
}

fn run_meta(cfg: &PipelineConfig, fraction: f64, image: &str) -> BTreeMap<String, String> {
    let mut m = BTreeMap::new();
    m.insert("config_sha256".into(), cfg.hash());
    m.insert("seed".into(), cfg.seed.to_string());
    m.insert("mode".into(), cfg.denoiser.mode.as_str().into());
    if cfg.denoiser.mode == DenoiseMode::MpdMir {
        m.insert("mir_mode".into(), format!("{:?}", cfg.denoiser.mir_mode).to_lowercase());
    }
    m.insert("dose_fraction".into(), fraction.to_string());
    m.insert("output".into(), image.into());
    m
}

fn cmd_run(cfg: &PipelineConfig, keep: bool, step: ProvenanceStep) -> Result<()> {
    let (sim, mut prov) = load_simulation(&sim_dir(cfg))?;
    if (sim.fraction - cfg.dose.fraction).abs() > 1e-12 {
        log::warn!("simulation was made at dose fraction {} but dose.fraction is {}", sim.fraction, cfg.dose.fraction);
    }
    let models = Models::load(cfg)?;
    prov.push(step);
    let result = run_pipeline(cfg, &sim, &models, keep)?;
    let dir = cfg.output.dir.join("run");
    let save = |name: &str, slices: &[SliceImage]| write_artifact(&dir.join(name), &volume_header(slices).with_provenance(&prov), &volume_data(slices));
    save("refined", &result.refined)?;
    save("noisy", &result.noisy)?;
    save("reference", &result.reference)?;
    for im in &result.intermediates {
        let h = im.header.clone().with_provenance(&prov);
        write_artifact(&dir.join("intermediates").join(&im.name), &h, &im.data)?;
    }
    for (file, slices, label) in [("report.csv", &result.refined, "refined"), ("report_noisy.csv", &result.noisy, "noisy")] {
        let ctx = EvalContext {
            reference: Some(&result.reference),
            inserts: &sim.inserts,
            meta: run_meta(cfg, sim.fraction, label),
        };
        let rep = evaluate(slices, &cfg.metrics, &ctx)?;
        write_text(&dir.join(file), &rep.to_csv())?;
    }
    log::info!("mode {} finished; results in {}", cfg.denoiser.mode.as_str(), dir.display());
    Ok(())
}

fn load_volume(stem: &Path) -> Result<Vec<SliceImage>> {
    let (h, d) = read_artifact(stem)?;
    let tag: String = h.meta_as("image").unwrap_or_default();
    let prov = Provenance::parse(&tag).unwrap_or(Provenance::Raw);
    volume_from_artifact(&h, &d, prov)
}

fn cmd_metrics(cfg: &PipelineConfig, input: &Path, reference: Option<&Path>, inserts: Option<&Path>, out: &Path) -> Result<()> {
    let images = load_volume(input)?;
    let reference = reference.map(load_volume).transpose()?;
    let inserts_path = inserts.map(Path::to_path_buf).unwrap_or_else(|| sim_dir(cfg).join("inserts.json"));
    let inserts: Vec<MaterialInsert> = if inserts_path.exists() {
        serde_json::from_str(&read_text(&inserts_path)?)?
    } else {
        Vec::new()
    };
    let (h, _) = read_artifact(input)?;
    let fraction = load_simulation_fraction(cfg).unwrap_or(cfg.dose.fraction);
    let mut meta = run_meta(cfg, fraction, &input.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default());
    meta.insert("provenance".into(), h.provenance.iter().map(|p| p.command.as_str()).collect::<Vec<_>>().join(" | "));
    let ctx = EvalContext {
        reference: reference.as_deref(),
        inserts: &inserts,
        meta,
    };
    let rep = evaluate(&images, &cfg.metrics, &ctx)?;
    write_text(out, &rep.to_csv())
}

fn load_simulation_fraction(cfg: &PipelineConfig) -> Option<f64> {
    let (h, _) = read_artifact(&sim_dir(cfg).join("low")).ok()?;
    h.meta_as("dose_fraction")
}

fn label_of(rep: &MetricsReport, path: &Path) -> String {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    match (rep.meta.get("mode"), rep.meta.get("dose_fraction"), rep.meta.get("output")) {
        (Some(m), Some(d), Some(o)) => format!("{m} {o} @ {d}"),
        _ => stem,
    }
}

fn cmd_report(inputs: &[PathBuf], out: &Path) -> Result<()> {
    let mut reports = Vec::new();
    for p in inputs {
        let rep = MetricsReport::from_csv(&read_text(p)?, &p.display().to_string())?;
        let label = label_of(&rep, p);
        reports.push((label, rep));
    }

    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Format {
        path: out.join("summary.csv"),
        message: e.to_string(),
    };
    w.write_record(["input", "dose_fraction", "metric", "label", "value", "std"]).map_err(csv_err)?;
    for (label, rep) in &reports {
        let dose = rep.meta.get("dose_fraction").cloned().unwrap_or_default();
        let mut row = |metric: &str, name: &str, value: f64, std: Option<f64>| {
            w.write_record([
                label.as_str(),
                dose.as_str(),
                metric,
                name,
                &format!("{value:.6}"),
                &std.map(|s| format!("{s:.6}")).unwrap_or_default(),
            ])
        };
        for (n, v) in &rep.mse {
            row("mse", n, *v, None).map_err(csv_err)?;
        }
        for (n, v, s) in &rep.ssim {
            row("ssim", n, *v, Some(*s)).map_err(csv_err)?;
        }
        for (n, m, s) in &rep.ct_number {
            row("ct_number", n, *m, Some(*s)).map_err(csv_err)?;
        }
        for (n, c) in &rep.ttf {
            if let Some(f50) = crossing(c, 0.5) {
                row("ttf50", n, f50, None).map_err(csv_err)?;
            }
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Format {
        path: out.join("summary.csv"),
        message: e.to_string(),
    })?;
    write_text(&out.join("summary.csv"), &String::from_utf8_lossy(&bytes))?;

    let nps: Vec<(String, Vec<(f64, f64)>)> = reports
        .iter()
        .filter(|(_, r)| !r.nps.is_empty())
        .map(|(l, r)| (l.clone(), r.nps.clone()))
        .collect();
    if !nps.is_empty() {
        write_text(&out.join("nps.svg"), &svg_line_plot("Noise power spectrum", "frequency (1/mm)", "NPS (HU² mm²)", &nps))?;
    }
    let mut inserts: Vec<&str> = reports.iter().flat_map(|(_, r)| r.ttf.iter().map(|(n, _)| n.as_str())).collect();
    inserts.sort_unstable();
    inserts.dedup();
    for ins in inserts {
        let series: Vec<(String, Vec<(f64, f64)>)> = reports
            .iter()
            .filter_map(|(l, r)| r.ttf.iter().find(|(n, _)| n == ins).map(|(_, c)| (l.clone(), c.clone())))
            .collect();
        write_text(
            &out.join(format!("ttf_{ins}.svg")),
            &svg_line_plot(&format!("TTF, {ins} insert"), "frequency (1/mm)", "TTF", &series),
        )?;
    }

    // dose sweeps: one series per mode/output, x = dose fraction
    let dosed: Vec<(f64, &String, &MetricsReport)> = reports
        .iter()
        .filter_map(|(l, r)| r.meta.get("dose_fraction").and_then(|d| d.parse().ok()).map(|d| (d, l, r)))
        .collect();
    let distinct: std::collections::BTreeSet<u64> = dosed.iter().map(|(d, _, _)| d.to_bits()).collect();
    if distinct.len() > 1 {
        let key = |r: &MetricsReport| format!("{} {}", r.meta.get("mode").map_or("", |s| s), r.meta.get("output").map_or("", |s| s));
        let mut groups: BTreeMap<String, Vec<(f64, &MetricsReport)>> = BTreeMap::new();
        for (d, _, r) in &dosed {
            groups.entry(key(r)).or_default().push((*d, r));
        }
        for g in groups.values_mut() {
            g.sort_by(|a, b| a.0.total_cmp(&b.0));
        }
        let mut ct_series = Vec::new();
        let mut mse_series = Vec::new();
        for (k, g) in &groups {
            let names: std::collections::BTreeSet<&String> = g.iter().flat_map(|(_, r)| r.ct_number.iter().map(|c| &c.0)).collect();
            for n in names {
                let pts = g
                    .iter()
                    .filter_map(|(d, r)| r.ct_number.iter().find(|c| &c.0 == n).map(|c| (100.0 * d, c.1)))
                    .collect();
                ct_series.push((format!("{k}: {n}"), pts));
            }
            let pts: Vec<(f64, f64)> = g
                .iter()
                .filter_map(|(d, r)| r.mse.iter().find(|m| m.0 == "raw_hu").map(|m| (100.0 * d, m.1)))
                .collect();
            if !pts.is_empty() {
                mse_series.push((k.clone(), pts));
            }
        }
        if !ct_series.is_empty() {
            write_text(&out.join("dose_ct_number.svg"), &svg_line_plot("CT number across dose", "dose (%)", "mean (HU)", &ct_series))?;
        }
        if !mse_series.is_empty() {
            write_text(&out.join("dose_mse.svg"), &svg_line_plot("MSE across dose", "dose (%)", "MSE (HU²)", &mse_series))?;
        }
    }
    log::info!("report for {} input(s) written to {}", reports.len(), out.display());
    Ok(())
}

fn crossing(curve: &[(f64, f64)], level: f64) -> Option<f64> {
    let c = TtfCurve {
        freq_per_mm: curve.iter().map(|p| p.0).collect(),
        ttf: curve.iter().map(|p| p.1).collect(),
        center_mm: [0.0, 0.0],
        contrast_hu: 0.0,
    };
    frequency_at(&c, level)
}
