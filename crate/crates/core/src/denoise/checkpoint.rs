use std::path::Path;

use serde::{Deserialize, Serialize};

use super::train::{TrainConfig, TrainState};
use super::{MirConfig, MirModel, MirNorm, MpdConfig, MpdModel, MpdNorm};
use crate::error::{Error, Result};
use crate::io::{read_f32, read_text, write_f32, write_text};
use crate::nn::{AdamState, ParamStore};

pub const CHECKPOINT_FORMAT: &str = "ldct-checkpoint";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelKind {
    Mpd { config: MpdConfig, norm: MpdNorm },
    Mir { config: MirConfig, norm: MirNorm },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerEntry {
    pub step: usize,
    pub adam_step: u64,
    pub lr: f64,
    pub best_val: Option<f64>,
    pub stale_rounds: usize,
}

/// JSON manifest next to the flat `f32` payload. The payload holds the
/// parameters in layer order, followed by the Adam moments when `optimizer`
/// is present.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format: String,
    pub version: u32,
    pub model: ModelKind,
    pub layers: Vec<LayerEntry>,
    pub param_count: usize,
    pub init_seed: u64,
    pub train: Option<TrainConfig>,
    pub optimizer: Option<OptimizerEntry>,
}

#[derive(Clone, Debug)]
pub enum Checkpoint {
    Mpd(MpdModel),
    Mir(MirModel),
}

impl Checkpoint {
    pub fn params(&self) -> &ParamStore<f32> {
        match self {
            Checkpoint::Mpd(m) => &m.params,
            Checkpoint::Mir(m) => &m.params,
        }
    }

    fn kind(&self) -> ModelKind {
        match self {
            Checkpoint::Mpd(m) => ModelKind::Mpd {
                config: m.config,
                norm: m.norm,
            },
            Checkpoint::Mir(m) => ModelKind::Mir {
                config: m.config,
                norm: m.norm,
            },
        }
    }
}

/// Writes `<path>` (manifest) and `<path>.bin` (payload).
pub fn save_checkpoint(
    path: &Path,
    model: &Checkpoint,
    init_seed: u64,
    train: Option<&TrainConfig>,
    state: Option<&TrainState>,
) -> Result<()> {
    let params = model.params();
    let layers = params
        .names
        .iter()
        .zip(&params.values)
        .map(|(n, t)| LayerEntry {
            name: n.clone(),
            shape: t.shape.clone(),
        })
        .collect();
    let mut payload = params.flatten();
    let optimizer = state.map(|s| {
        let (m, v) = s.adam.flatten();
        payload.extend(m);
        payload.extend(v);
        OptimizerEntry {
            step: s.step,
            adam_step: s.adam.step,
            lr: s.lr,
            best_val: s.best_val.is_finite().then_some(s.best_val),
            stale_rounds: s.stale_rounds,
        }
    });
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.into(),
        version: 1,
        model: model.kind(),
        layers,
        param_count: params.num_scalars(),
        init_seed,
        train: train.cloned(),
        optimizer,
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    write_text(path, &text)?;
    write_f32(&payload_path(path), &payload)
}

fn payload_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".bin");
    s.into()
}

/// Rebuilds the model (and the optimizer state when it was saved).
pub fn load_checkpoint(path: &Path) -> Result<(Checkpoint, Option<TrainState>, CheckpointManifest)> {
    let bad = |message: String| Error::Format {
        path: path.into(),
        message,
    };
    let manifest: CheckpointManifest = serde_json::from_str(&read_text(path)?).map_err(|e| bad(e.to_string()))?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(bad(format!("not a checkpoint manifest (format {:?})", manifest.format)));
    }
    let mut model = match &manifest.model {
        ModelKind::Mpd { config, norm } => Checkpoint::Mpd(MpdModel::new(*config, *norm, manifest.init_seed)?),
        ModelKind::Mir { config, norm } => Checkpoint::Mir(MirModel::new(*config, *norm, manifest.init_seed)?),
    };
    let params = match &mut model {
        Checkpoint::Mpd(m) => &mut m.params,
        Checkpoint::Mir(m) => &mut m.params,
    };
    let shapes_match = params.values.len() == manifest.layers.len()
        && params
            .names
            .iter()
            .zip(&params.values)
            .zip(&manifest.layers)
            .all(|((n, t), l)| *n == l.name && t.shape == l.shape);
    if !shapes_match {
        return Err(bad("layer list does not match the model configuration".into()));
    }
    let payload = read_f32(&payload_path(path))?;
    let n = params.num_scalars();
    let expected = if manifest.optimizer.is_some() { 3 * n } else { n };
    if payload.len() != expected {
        return Err(bad(format!("payload holds {} values, expected {expected}", payload.len())));
    }
    params.load_flat(&payload[..n]);
    let state = match &manifest.optimizer {
        Some(o) => {
            let adam = AdamState::from_flat(params, &payload[n..2 * n], &payload[2 * n..], o.adam_step)
                .ok_or_else(|| bad("optimizer state size mismatch".into()))?;
            Some(TrainState {
                step: o.step,
                lr: o.lr,
                best_val: o.best_val.unwrap_or(f64::INFINITY),
                stale_rounds: o.stale_rounds,
                adam,
            })
        }
        None => None,
    };
    Ok((model, state, manifest))
}
