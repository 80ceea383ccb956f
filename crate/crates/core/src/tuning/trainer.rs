//! The optimizer loop: placeholder inversion followed by joint training of
//! the placeholder and the adapters.
//!
//! All randomness is a pure function of `(seed, step)`: sample order comes
//! from a per-epoch shuffle and each step draws its timesteps, noise and
//! prompt choices from its own ChaCha stream. Resuming from a checkpoint
//! therefore replays exactly the steps an uninterrupted run would take.

use super::checkpoint::{config_hash, Checkpoint, CheckpointSink, CHECKPOINT_VERSION};
use super::step::{training_step, NoiseDraw, StepContext, TrainSample, TrainableState};
use super::{Adam, LoraSet, PlaceholderToken, TrainDataset, TuningError};
use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Inversion,
    Joint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: u64,
    pub lr: f64,
    pub rank: usize,
    pub lora_scale: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Save a checkpoint after every this many steps; 0 disables.
    pub checkpoint_every: u64,
    /// Placeholder inversion before joint training; 0 steps skips it.
    pub inversion_steps: u64,
    pub inversion_lr: f64,
    pub inversion_subset: usize,
    /// Window of the trailing mean reported in telemetry.
    pub smoothing_window: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            lr: 1e-4,
            rank: 4,
            lora_scale: 1.0,
            batch_size: 1,
            seed: 0,
            checkpoint_every: 100,
            inversion_steps: 1000,
            inversion_lr: 5e-3,
            inversion_subset: 256,
            smoothing_window: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TuningError> {
        let bad = |m: &str| Err(TuningError::InvalidConfig(m.to_string()));
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.inversion_lr > 0.0 && self.inversion_lr.is_finite()) {
            return bad("learning rates must be positive");
        }
        if self.rank == 0 {
            return bad("rank must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1");
        }
        if self.smoothing_window == 0 {
            return bad("smoothing window must be at least 1");
        }
        Ok(())
    }

    /// Hash of the fields that shape the optimization trajectory. The step
    /// budget and checkpoint cadence are excluded so a run can be extended.
    pub fn trajectory_hash(&self) -> String {
        let mut c = self.clone();
        c.steps = 0;
        c.checkpoint_every = 0;
        config_hash(&c)
    }
}

/// One telemetry line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub phase: Phase,
    pub step: u64,
    pub loss: f64,
    /// Mean of the last `smoothing_window` losses of this phase.
    pub smoothed: f64,
}

pub trait TelemetrySink {
    fn record(&mut self, record: &StepRecord);
}

/// Collects telemetry in memory.
#[derive(Clone, Debug, Default)]
pub struct MemorySink {
    pub records: Vec<StepRecord>,
}

impl TelemetrySink for MemorySink {
    fn record(&mut self, record: &StepRecord) {
        self.records.push(record.clone());
    }
}

/// Logs every `every`-th record through `log::info!`.
#[derive(Clone, Debug)]
pub struct LogSink {
    pub every: u64,
}

impl TelemetrySink for LogSink {
    fn record(&mut self, r: &StepRecord) {
        if self.every > 0 && r.step.is_multiple_of(self.every) {
            log::info!("{:?} step {} loss {:.6} smoothed {:.6}", r.phase, r.step, r.loss, r.smoothed);
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub state: TrainableState,
    pub optimizer: Adam,
    pub step: u64,
    /// Joint-phase losses of the steps run by this call.
    pub losses: Vec<f64>,
}

impl TrainOutcome {
    pub fn checkpoint(&self, cfg: &TrainConfig) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            step: self.step,
            placeholder: self.state.token.clone(),
            adapters: self.state.lora.clone(),
            optimizer: self.optimizer.clone(),
            config_hash: cfg.trajectory_hash(),
        }
    }
}

const STREAM_SHUFFLE: u64 = 1 << 62;
const STREAM_INVERSION: u64 = 1 << 61;
const STREAM_LORA_INIT: u64 = 1 << 60;

/// Position `pos` of the seeded, epoch-by-epoch shuffled sample order.
fn sample_index(seed: u64, pos: u64, n: usize) -> usize {
    let epoch = pos / n as u64;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(STREAM_SHUFFLE + epoch);
    order.shuffle(&mut rng);
    order[(pos % n as u64) as usize]
}

/// Timestep, noise and prompt draw for each batch element, from the ChaCha
/// stream keyed by `(seed, stream)`.
pub fn draw_for_step(
    seed: u64,
    stream: u64,
    batch: usize,
    shape: (usize, usize, usize),
    train_timesteps: usize,
) -> Vec<(NoiseDraw, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    (0..batch)
        .map(|_| {
            let t = rng.random_range(1..=train_timesteps);
            let eps = Array3::from_shape_simple_fn(shape, || rng.sample::<f64, _>(StandardNormal));
            let u: f64 = rng.random();
            (NoiseDraw { t, eps }, u)
        })
        .collect()
}

/// Means of consecutive non-overlapping windows; the last one may be short.
pub fn block_means(losses: &[f64], window: usize) -> Vec<f64> {
    losses.chunks(window.max(1)).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect()
}

fn trailing_mean(history: &[f64], window: usize) -> f64 {
    let tail = &history[history.len().saturating_sub(window)..];
    tail.iter().sum::<f64>() / tail.len() as f64
}

fn run_step(
    ctx: &StepContext<'_>,
    state: &TrainableState,
    samples: &[TrainSample],
    draws: Vec<(NoiseDraw, f64)>,
    simple_only: bool,
    step: u64,
) -> Result<super::StepOutput, TuningError> {
    let (draws, us): (Vec<NoiseDraw>, Vec<f64>) = draws.into_iter().unzip();
    let prompts: Vec<&str> = samples
        .iter()
        .zip(&us)
        .map(|(s, &u)| if simple_only { s.simple_prompt.as_str() } else { s.prompt(u) })
        .collect();
    let refs: Vec<&TrainSample> = samples.iter().collect();
    match training_step(ctx, state, &refs, &prompts, &draws) {
        Err(TuningError::NonFiniteLoss(loss)) => Err(TuningError::DivergedLoss { step, loss }),
        other => other,
    }
}

/// Learn the placeholder embedding alone with the adapters held at zero.
/// Only simple prompts are used since captions do not contain the token.
pub fn invert_placeholder(
    ctx: &StepContext<'_>,
    token: PlaceholderToken,
    subset: &[TrainSample],
    steps: u64,
    lr: f64,
    seed: u64,
    telemetry: &mut dyn TelemetrySink,
) -> Result<PlaceholderToken, TuningError> {
    if subset.is_empty() {
        return Err(TuningError::CorruptDataset("inversion subset is empty".into()));
    }
    let mut state = TrainableState { token: PlaceholderToken { trainable: true, ..token }, lora: LoraSet::empty() };
    let mut opt = Adam::new(lr, state.token.embedding.len());
    let mut history = Vec::new();
    let timesteps = ctx.schedule.len();
    for step in 1..=steps {
        let sample = &subset[sample_index(seed ^ STREAM_INVERSION, step - 1, subset.len())];
        let draws = draw_for_step(seed, STREAM_INVERSION + step, 1, sample.original_latent.dim(), timesteps);
        let out = run_step(ctx, &state, std::slice::from_ref(sample), draws, true, step)?;
        history.push(out.loss);
        telemetry.record(&StepRecord {
            phase: Phase::Inversion,
            step,
            loss: out.loss,
            smoothed: trailing_mean(&history, 50),
        });
        let grads = out.grads.flatten_trainable(&state);
        let mut params = state.token.embedding.to_vec();
        opt.update(&mut params, &grads);
        state.token.embedding = params.into();
        if !state.token.embedding.iter().all(|v| v.is_finite()) {
            return Err(TuningError::DivergedLoss { step, loss: out.loss });
        }
    }
    Ok(state.token)
}

/// Inputs of [`train`] besides the step context.
pub struct TrainRun<'a> {
    pub config: &'a TrainConfig,
    pub dataset: &'a dyn TrainDataset,
    pub checkpoints: &'a mut dyn CheckpointSink,
    pub telemetry: &'a mut dyn TelemetrySink,
    pub resume: Option<&'a Checkpoint>,
}

/// Placeholder inversion (unless resuming) and then `config.steps` joint
/// steps in total, counting those already in the resumed checkpoint.
pub fn train(ctx: &StepContext<'_>, run: TrainRun<'_>) -> Result<TrainOutcome, TuningError> {
    let cfg = run.config;
    cfg.validate()?;
    let n = run.dataset.len();
    if n == 0 {
        return Err(TuningError::CorruptDataset("dataset has no samples".into()));
    }
    let first = run.dataset.get(0)?;
    first.validate()?;
    let shape = first.original_latent.dim();
    let width = ctx.model.channels();

    let (mut state, mut opt, start) = match run.resume {
        Some(ck) => {
            if ck.config_hash != cfg.trajectory_hash() {
                return Err(TuningError::IncompatibleCheckpoint("training config differs from the checkpoint".into()));
            }
            let state = TrainableState { token: ck.placeholder.clone(), lora: ck.adapters.clone() };
            if ck.optimizer.m.len() != state.parameter_count() {
                return Err(TuningError::IncompatibleCheckpoint("optimizer size differs from parameters".into()));
            }
            (state, ck.optimizer.clone(), ck.step)
        }
        None => {
            let slot = ctx.encoder.tokenize(super::PLACEHOLDER)[0];
            let mut token = PlaceholderToken::seeded(ctx.encoder, slot);
            if cfg.inversion_steps > 0 {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                let mut idx: Vec<usize> = (0..n).collect();
                idx.shuffle(&mut rng);
                idx.truncate(cfg.inversion_subset.max(1));
                let subset = idx.iter().map(|&i| run.dataset.get(i)).collect::<Result<Vec<_>, _>>()?;
                token = invert_placeholder(
                    ctx,
                    token,
                    &subset,
                    cfg.inversion_steps,
                    cfg.inversion_lr,
                    cfg.seed,
                    &mut *run.telemetry,
                )?;
            }
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(STREAM_LORA_INIT);
            let lora = LoraSet::for_attention(width, cfg.rank, cfg.lora_scale, &mut rng);
            let state = TrainableState { token, lora };
            let opt = Adam::new(cfg.lr, state.parameter_count());
            (state, opt, 0)
        }
    };

    let mut losses = Vec::new();
    for step in (start + 1)..=cfg.steps {
        let batch: Vec<TrainSample> = (0..cfg.batch_size)
            .map(|b| {
                let pos = (step - 1) * cfg.batch_size as u64 + b as u64;
                let s = run.dataset.get(sample_index(cfg.seed, pos, n))?;
                s.validate()?;
                if s.original_latent.dim() != shape {
                    return Err(TuningError::CorruptDataset(format!(
                        "latent shape {:?} differs from {:?}",
                        s.original_latent.dim(),
                        shape
                    )));
                }
                Ok(s)
            })
            .collect::<Result<_, _>>()?;
        let draws = draw_for_step(cfg.seed, step, cfg.batch_size, shape, ctx.schedule.len());
        let out = run_step(ctx, &state, &batch, draws, false, step)?;
        losses.push(out.loss);
        run.telemetry.record(&StepRecord {
            phase: Phase::Joint,
            step,
            loss: out.loss,
            smoothed: trailing_mean(&losses, cfg.smoothing_window),
        });
        let grads = out.grads.flatten_trainable(&state);
        let mut params = state.flatten();
        opt.update(&mut params, &grads);
        state.unflatten_from(&params);

        if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
            let outcome = TrainOutcome { state: state.clone(), optimizer: opt.clone(), step, losses: Vec::new() };
            run.checkpoints.save(&outcome.checkpoint(cfg))?;
        }
    }
    Ok(TrainOutcome { state, optimizer: opt, step: cfg.steps.max(start), losses })
}
