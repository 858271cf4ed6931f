use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Adam, AdamState, ParamStore, Scalar, Tape, Tensor, Var};

/// A network that can be supervised with an L1 loss on residual targets.
pub trait TrainableModel {
    fn params(&self) -> &ParamStore<f32>;

    fn params_mut(&mut self) -> &mut ParamStore<f32>;

    /// Records the batch loss on `params` (which may be a cast copy).
    fn loss<T: Scalar>(&self, params: &ParamStore<T>, input: Tensor<T>, target: Tensor<T>) -> (Tape<T>, Var);
}

/// Indices into [`Dataset::planes`]: the stacked input channels and the
/// normalized target residual.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub inputs: Vec<usize>,
    pub target: usize,
}

/// Shared normalized planes (windows overlap, so frames are stored once).
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub planes: Vec<Array2<f32>>,
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn push_plane(&mut self, plane: Array2<f32>) -> usize {
        self.planes.push(plane);
        self.planes.len() - 1
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn append(&mut self, mut other: Dataset) {
        let off = self.planes.len();
        self.planes.append(&mut other.planes);
        self.examples.extend(other.examples.into_iter().map(|e| Example {
            inputs: e.inputs.iter().map(|i| i + off).collect(),
            target: e.target + off,
        }));
    }

    fn min_dims(&self) -> (usize, usize) {
        self.examples
            .iter()
            .map(|e| self.planes[e.target].dim())
            .fold((usize::MAX, usize::MAX), |(h, w), (a, b)| (h.min(a), w.min(b)))
    }

    /// `N×C×h×w` inputs and `N×1×h×w` targets for `(example, top, left)` crops.
    pub fn batch(&self, picks: &[(usize, usize, usize)], h: usize, w: usize) -> (Tensor<f32>, Tensor<f32>) {
        let c = self.examples[picks[0].0].inputs.len();
        let mut x = Vec::with_capacity(picks.len() * c * h * w);
        let mut t = Vec::with_capacity(picks.len() * h * w);
        let crop = |plane: &Array2<f32>, y0: usize, x0: usize, out: &mut Vec<f32>| {
            for y in y0..y0 + h {
                out.extend(plane.row(y).iter().skip(x0).take(w));
            }
        };
        for &(e, y0, x0) in picks {
            let ex = &self.examples[e];
            for &p in &ex.inputs {
                crop(&self.planes[p], y0, x0, &mut x);
            }
            crop(&self.planes[ex.target], y0, x0, &mut t);
        }
        (
            Tensor::new(vec![picks.len(), c, h, w], x).expect("batch shape"),
            Tensor::new(vec![picks.len(), 1, h, w], t).expect("target shape"),
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Patch height and width (clipped to the plane size).
    pub crop: [usize; 2],
    pub lr: f64,
    pub lr_min: f64,
    /// Validation rounds without improvement before dropping to `lr_min`.
    pub patience: usize,
    pub validate_every: usize,
    /// Number of fixed validation crops.
    pub val_examples: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 8,
            crop: [64, 64],
            lr: 1e-4,
            lr_min: 1e-5,
            patience: 5,
            validate_every: 50,
            val_examples: 32,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.crop.contains(&0) {
            return Err(Error::Config("train.batch_size and train.crop must be > 0".into()));
        }
        if !(self.lr > 0.0 && self.lr_min > 0.0 && self.lr_min <= self.lr) {
            return Err(Error::Config("train.lr and train.lr_min must satisfy 0 < lr_min <= lr".into()));
        }
        if self.validate_every == 0 {
            return Err(Error::Config("train.validate_every must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub lr: f64,
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub step: usize,
    pub lr: f64,
    pub best_val: f64,
    pub stale_rounds: usize,
    pub adam: AdamState<f32>,
}

impl TrainState {
    pub fn fresh(params: &ParamStore<f32>, cfg: &TrainConfig) -> Self {
        Self {
            step: 0,
            lr: cfg.lr,
            best_val: f64::INFINITY,
            stale_rounds: 0,
            adam: AdamState::for_store(params),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub curve: Vec<LossPoint>,
    pub state: TrainState,
}

const VAL_STREAM: u64 = 0x7661_6c00;

fn random_picks(data: &Dataset, n: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Vec<(usize, usize, usize)> {
    (0..n)
        .map(|_| {
            let e = rng.random_range(0..data.len());
            let (ph, pw) = data.planes[data.examples[e].target].dim();
            let y0 = rng.random_range(0..=ph - h);
            let x0 = rng.random_range(0..=pw - w);
            (e, y0, x0)
        })
        .collect()
}

fn eval_loss<M: TrainableModel>(model: &M, data: &Dataset, picks: &[(usize, usize, usize)], h: usize, w: usize, batch: usize) -> f64 {
    let mut total = 0.0;
    for chunk in picks.chunks(batch) {
        let (x, t) = data.batch(chunk, h, w);
        let (tape, l) = model.loss(model.params(), x, t);
        total += tape.value(l).data[0] as f64 * chunk.len() as f64;
    }
    total / picks.len() as f64
}

/// Adam on the mean absolute error of random crops, with a one-time learning
/// rate drop after `patience` validation rounds without improvement.
///
/// Batches are drawn from a generator keyed by `(seed, step)`, so a resumed run
/// replays the same batches as an uninterrupted one.
pub fn train<M: TrainableModel>(
    model: &mut M,
    data: &Dataset,
    val: Option<&Dataset>,
    cfg: &TrainConfig,
    state: Option<TrainState>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("training dataset is empty".into()));
    }
    let (mh, mw) = data.min_dims();
    let (mut h, mut w) = (cfg.crop[0].min(mh), cfg.crop[1].min(mw));
    let val = val.filter(|v| !v.is_empty());
    if let Some(v) = val {
        let (vh, vw) = v.min_dims();
        h = h.min(vh);
        w = w.min(vw);
    }
    let val_picks = val.map(|v| {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ VAL_STREAM);
        random_picks(v, cfg.val_examples.max(1), h, w, &mut rng)
    });

    let mut state = state.unwrap_or_else(|| TrainState::fresh(model.params(), cfg));
    let mut curve = Vec::with_capacity(cfg.steps.saturating_sub(state.step));
    let mut last_finite = f64::NAN;
    while state.step < cfg.steps {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(state.step as u64);
        let picks = random_picks(data, cfg.batch_size, h, w, &mut rng);
        let (x, t) = data.batch(&picks, h, w);
        let (tape, l) = model.loss(model.params(), x, t);
        let loss = tape.value(l).data[0] as f64;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!(
                "training loss became {loss} at step {} (last finite loss {last_finite:.6e}, lr {:.1e})",
                state.step, state.lr
            )));
        }
        last_finite = loss;
        let params = model.params_mut();
        params.zero_grad();
        tape.backward(l, params);
        drop(tape);
        if let Some(bad) = params.grads.iter().position(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(Error::Numeric(format!(
                "non-finite gradient in `{}` at step {}",
                params.names[bad], state.step
            )));
        }
        Adam {
            lr: state.lr,
            ..Adam::default()
        }
        .step(params, &mut state.adam);
        state.step += 1;

        let mut val_loss = None;
        if let (Some(v), Some(vp)) = (val, val_picks.as_ref()) {
            if state.step % cfg.validate_every == 0 || state.step == cfg.steps {
                let vl = eval_loss(model, v, vp, h, w, cfg.batch_size);
                val_loss = Some(vl);
                if vl < state.best_val * (1.0 - 1e-4) {
                    state.best_val = vl;
                    state.stale_rounds = 0;
                } else {
                    state.stale_rounds += 1;
                    if state.stale_rounds >= cfg.patience && state.lr > cfg.lr_min {
                        log::info!("validation plateau at step {}: lr {} -> {}", state.step, state.lr, cfg.lr_min);
                        state.lr = cfg.lr_min;
                        state.stale_rounds = 0;
                    }
                }
            }
        }
        curve.push(LossPoint {
            step: state.step,
            train_loss: loss,
            val_loss,
            lr: state.lr,
        });
    }
    Ok(TrainOutcome { curve, state })
}

/// `step,train_loss,val_loss,lr` rows.
pub fn loss_curve_csv(curve: &[LossPoint]) -> String {
    let mut s = String::from("step,train_loss,val_loss,lr\n");
    for p in curve {
        let v = p.val_loss.map(|v| format!("{v:.9e}")).unwrap_or_default();
        s.push_str(&format!("{},{:.9e},{},{:e}\n", p.step, p.train_loss, v, p.lr));
    }
    s
}
