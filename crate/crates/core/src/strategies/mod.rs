//! Training strategies behind one episode-level interface.

mod mas;
mod nispa;
mod remind;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{AutogradError, Tape, Var};
use crate::data::{iterate_batches, Batch, DataError, Sample, Scenario, Split};
use crate::metrics::EpochLoss;
use crate::model::{Mode, Model, ModelError};
use crate::optim::{OptimError, Sgd, SgdConfig};
use crate::replay::{
    LogitSnapshot, Payload, PqCodebook, PqTrainReport, ReplayError, ReplayItem, ReservoirBuffer,
    Selection,
};
use crate::rng::{stream, stream_rng, StreamRng};

pub use mas::{mas_importance, mean_abs_grad, penalty_terms};
pub use nispa::{unit_activations, NispaState};

#[derive(Debug, Error)]
pub enum StrategyError {
    #[error("strategy config: {0}")]
    Config(String),
    #[error("{0}")]
    StateMismatch(String),
    #[error("importance for {param} has {omega} entries but the parameter has {param_len}")]
    ShapeDrift {
        param: String,
        omega: usize,
        param_len: usize,
    },
    #[error("rewire: {0}")]
    Rewire(String),
    #[error("no training samples to compute statistics over")]
    EmptyStream,
    #[error("training loss became non-finite in episode {episode}, epoch {epoch}")]
    Diverged { episode: usize, epoch: usize },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autograd(#[from] AutogradError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Replay(#[from] ReplayError),
}

type Result<T> = std::result::Result<T, StrategyError>;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    NaiveSequential,
    NaiveIndependent,
    Joint,
    Mas,
    MasR,
    Der,
    DerPp,
    Remind,
    Nispa,
}

impl Variant {
    pub const ALL: [Variant; 9] = [
        Variant::NaiveSequential,
        Variant::NaiveIndependent,
        Variant::Joint,
        Variant::Mas,
        Variant::MasR,
        Variant::Der,
        Variant::DerPp,
        Variant::Remind,
        Variant::Nispa,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::NaiveSequential => "naive_sequential",
            Variant::NaiveIndependent => "naive_independent",
            Variant::Joint => "joint",
            Variant::Mas => "mas",
            Variant::MasR => "mas_r",
            Variant::Der => "der",
            Variant::DerPp => "der_pp",
            Variant::Remind => "remind",
            Variant::Nispa => "nispa",
        }
    }

    pub fn parse(s: &str) -> Option<Variant> {
        Variant::ALL.into_iter().find(|v| v.name() == s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RemindConfig {
    /// Stage after which features are tapped; stages up to it are frozen.
    pub split: usize,
    pub m: usize,
    pub k: usize,
    pub iterations: usize,
    /// Cap on the episode-1 feature vectors used to fit the codebook.
    pub max_codebook_samples: usize,
}

impl Default for RemindConfig {
    fn default() -> Self {
        RemindConfig {
            split: 3,
            m: 32,
            k: 256,
            iterations: 25,
            max_codebook_samples: 10_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NispaConfig {
    /// Fraction of conv connections kept inactive.
    pub sparsity: f32,
    /// Fraction of unfrozen active connections swapped at each episode end.
    pub rewire_fraction: f32,
    /// Units whose mean activation exceeds this quantile are frozen.
    pub stable_quantile: f32,
    /// Std of regrown connection weights.
    pub regrow_scale: f32,
}

impl Default for NispaConfig {
    fn default() -> Self {
        NispaConfig {
            sparsity: 0.5,
            rewire_fraction: 0.1,
            stable_quantile: 0.8,
            regrow_scale: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StrategyConfig {
    pub variant: Variant,
    pub buffer_capacity: usize,
    pub selection: Selection,
    pub der_alpha: f32,
    pub der_beta: f32,
    pub mas_lambda: f32,
    /// Rehearsal samples per current sample in each step.
    pub replay_ratio: f32,
    pub remind: RemindConfig,
    pub nispa: NispaConfig,
}

impl Default for StrategyConfig {
    fn default() -> Self {
        StrategyConfig {
            variant: Variant::NaiveSequential,
            buffer_capacity: 200,
            selection: Selection::Reservoir,
            der_alpha: 0.5,
            der_beta: 0.5,
            mas_lambda: 0.1,
            replay_ratio: 1.0,
            remind: RemindConfig::default(),
            nispa: NispaConfig::default(),
        }
    }
}

impl StrategyConfig {
    pub fn for_variant(variant: Variant) -> Self {
        StrategyConfig {
            variant,
            ..StrategyConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            ("der_alpha", self.der_alpha),
            ("der_beta", self.der_beta),
            ("mas_lambda", self.mas_lambda),
            ("replay_ratio", self.replay_ratio),
        ];
        for (name, v) in nonneg {
            if !(v.is_finite() && v >= 0.0) {
                return Err(StrategyError::Config(format!(
                    "{name} must be >= 0, got {v}"
                )));
            }
        }
        let r = &self.remind;
        if !(1..=4).contains(&r.split) {
            return Err(StrategyError::Config(format!(
                "remind.split must be in 1..=4, got {}",
                r.split
            )));
        }
        if r.m == 0 || r.k == 0 || r.k > 256 {
            return Err(StrategyError::Config(format!(
                "remind needs m >= 1 and 1 <= k <= 256, got m = {}, k = {}",
                r.m, r.k
            )));
        }
        let n = &self.nispa;
        let unit = [
            ("nispa.rewire_fraction", n.rewire_fraction),
            ("nispa.stable_quantile", n.stable_quantile),
        ];
        for (name, v) in unit {
            if !(0.0..=1.0).contains(&v) {
                return Err(StrategyError::Config(format!(
                    "{name} must be in [0, 1], got {v}"
                )));
            }
        }
        if !(0.0..1.0).contains(&n.sparsity) {
            return Err(StrategyError::Config(format!(
                "nispa.sparsity must be in [0, 1), got {}",
                n.sparsity
            )));
        }
        if !(n.regrow_scale.is_finite() && n.regrow_scale >= 0.0) {
            return Err(StrategyError::Config(
                "nispa.regrow_scale must be >= 0".into(),
            ));
        }
        Ok(())
    }

    /// DER keeps only the logit term.
    fn beta(&self) -> f32 {
        match self.variant {
            Variant::Der => 0.0,
            _ => self.der_beta,
        }
    }
}

/// Everything a strategy carries between episodes.
#[derive(Clone, Debug)]
pub struct TrainState {
    /// Per-parameter importance, summed over episodes (MAS).
    pub omega: Vec<Vec<f32>>,
    /// Parameter snapshot at the end of the latest episode (MAS).
    pub anchor: Vec<Vec<f32>>,
    pub buffer: ReservoirBuffer,
    pub codebook: Option<PqCodebook>,
    pub codebook_report: Option<PqTrainReport>,
    pub nispa: Option<NispaState>,
    pub episodes_completed: usize,
    reservoir_rng: StreamRng,
    replay_rng: StreamRng,
    nispa_rng: StreamRng,
}

impl TrainState {
    pub fn new(cfg: &StrategyConfig, seed: u64) -> Self {
        TrainState {
            omega: Vec::new(),
            anchor: Vec::new(),
            buffer: ReservoirBuffer::new(cfg.buffer_capacity, cfg.selection),
            codebook: None,
            codebook_report: None,
            nispa: None,
            episodes_completed: 0,
            reservoir_rng: stream_rng(seed, stream::RESERVOIR, 0),
            replay_rng: stream_rng(seed, stream::REPLAY, 0),
            nispa_rng: stream_rng(seed, stream::NISPA, 0),
        }
    }
}

/// Shuffle stream of one epoch of one episode.
pub fn epoch_rng(seed: u64, episode: usize, epoch: usize) -> StreamRng {
    stream_rng(
        seed,
        stream::SHUFFLE,
        ((episode as u64) << 32) | epoch as u64,
    )
}

/// Adds head rows for the episode's classes the model has not seen yet.
pub fn register_classes(model: &mut Model, classes: &[u32]) -> Result<()> {
    let fresh: Vec<u32> = classes
        .iter()
        .copied()
        .filter(|&c| model.row_of(c).is_none())
        .collect();
    if !fresh.is_empty() {
        model.expand_head_with(&fresh)?;
    }
    Ok(())
}

fn rows_of(model: &Model, labels: &[usize]) -> Result<Vec<usize>> {
    labels
        .iter()
        .map(|&l| {
            model
                .row_of(l as u32)
                .ok_or_else(|| StrategyError::StateMismatch(format!("class {l} has no head row")))
        })
        .collect()
}

fn entropy(logits: &[f32]) -> f32 {
    let m = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let z: f64 = logits.iter().map(|&v| ((v - m) as f64).exp()).sum();
    let h: f64 = logits
        .iter()
        .map(|&v| {
            let p = ((v - m) as f64).exp() / z;
            if p > 0.0 {
                -p * p.ln()
            } else {
                0.0
            }
        })
        .sum();
    h as f32
}

/// Rehearsal terms used by one step.
#[derive(Clone, Copy, Debug, PartialEq)]
struct StepTerms {
    /// Weight of the logit-matching MSE on replayed items.
    alpha: f32,
    /// Weight of the cross-entropy on replayed items.
    beta: f32,
    /// Weight of the importance penalty.
    lambda: f32,
    /// Whether current samples are offered to the buffer, and with logits.
    store: Option<bool>,
}

impl StepTerms {
    fn for_config(cfg: &StrategyConfig) -> Self {
        let none = StepTerms {
            alpha: 0.0,
            beta: 0.0,
            lambda: 0.0,
            store: None,
        };
        match cfg.variant {
            Variant::Der | Variant::DerPp => StepTerms {
                alpha: cfg.der_alpha,
                beta: cfg.beta(),
                store: Some(true),
                ..none
            },
            Variant::Mas => StepTerms {
                lambda: cfg.mas_lambda,
                ..none
            },
            Variant::MasR => StepTerms {
                beta: 1.0,
                lambda: cfg.mas_lambda,
                store: Some(false),
                ..none
            },
            _ => none,
        }
    }

    fn replays(&self) -> bool {
        self.alpha > 0.0 || self.beta > 0.0
    }
}

fn replay_count(cfg: &StrategyConfig, batch: usize) -> usize {
    (cfg.replay_ratio * batch as f32).round() as usize
}

/// One optimizer step on a batch of raw images. Returns the loss value.
#[allow(clippy::too_many_arguments)]
fn raw_step(
    cfg: &StrategyConfig,
    terms: StepTerms,
    model: &mut Model,
    state: &mut TrainState,
    opt: &mut Sgd,
    scenario: &Scenario,
    batch: Batch,
    episode: usize,
) -> Result<f64> {
    let rows = rows_of(model, &batch.labels)?;
    let classes = model.class_count();
    let all = vec![true; classes];
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let x = tape.constant(batch.images);
    let logits = model.forward_from(&mut tape, &bound, x, 0, Mode::Train)?;
    let mut loss = tape.masked_cross_entropy(logits, &rows, &all)?;
    let current_logits = terms
        .store
        .is_some()
        .then(|| tape.value(logits).data().to_vec());

    let count = replay_count(cfg, rows.len());
    if terms.replays() && count > 0 && !state.buffer.is_empty() {
        let items = state.buffer.sample(count, &mut state.replay_rng)?;
        let images = crate::data::images_to_tensor(items.iter().map(|it| it.payload.bytes()));
        let labels: Vec<usize> = items.iter().map(|it| it.label as usize).collect();
        let (target, mask) = snapshot_targets(model, &items);
        let rx = tape.constant(images);
        let replay_logits = model.forward_from(&mut tape, &bound, rx, 0, Mode::Train)?;
        if terms.alpha > 0.0 {
            let mse = tape.masked_mse(replay_logits, &target, &mask)?;
            let mse = tape.scale(mse, terms.alpha)?;
            loss = tape.add(loss, mse)?;
        }
        if terms.beta > 0.0 {
            let replay_rows = rows_of(model, &labels)?;
            let ce = tape.masked_cross_entropy(replay_logits, &replay_rows, &all)?;
            let ce = if terms.beta == 1.0 {
                ce
            } else {
                tape.scale(ce, terms.beta)?
            };
            loss = tape.add(loss, ce)?;
        }
    }
    if terms.lambda > 0.0 {
        if let Some(pen) = mas::penalty(&mut tape, model, &bound, state)? {
            let pen = tape.scale(pen, terms.lambda)?;
            loss = tape.add(loss, pen)?;
        }
    }
    let value = tape.value(loss).item() as f64;
    let grads = tape.backward(loss)?;
    model.absorb(&bound, &grads);
    opt.step(model.params_mut())?;

    if let (Some(with_logits), Some(values)) = (terms.store, current_logits) {
        let head = model.head_classes()[..classes].to_vec();
        for (j, s) in batch.samples.iter().enumerate() {
            let row = &values[j * classes..(j + 1) * classes];
            let item = ReplayItem {
                payload: Payload::Raw(scenario.image(s).to_vec()),
                label: s.label,
                logits: with_logits.then(|| LogitSnapshot {
                    classes: head.clone(),
                    values: row.to_vec(),
                }),
                episode: episode as u32,
                source: s.index,
            };
            state
                .buffer
                .offer(item, entropy(row), &mut state.reservoir_rng);
        }
    }
    Ok(value)
}

/// Logit targets aligned to the current head; entries for classes the
/// snapshot did not cover are masked out.
fn snapshot_targets(model: &Model, items: &[&ReplayItem]) -> (Vec<f32>, Vec<bool>) {
    let c = model.class_count();
    let mut target = vec![0.0f32; items.len() * c];
    let mut mask = vec![false; items.len() * c];
    for (j, it) in items.iter().enumerate() {
        if let Some(snap) = &it.logits {
            for (&class, &v) in snap.classes.iter().zip(&snap.values) {
                if let Some(r) = model.row_of(class) {
                    target[j * c + r] = v;
                    mask[j * c + r] = true;
                }
            }
        }
    }
    (target, mask)
}

/// Trains one episode of a sequential strategy (every variant except
/// `joint`; `naive_independent` trains each of its models with this too).
/// Returns the mean loss of every epoch.
pub fn train_episode(
    cfg: &StrategyConfig,
    opt_cfg: &SgdConfig,
    model: &mut Model,
    state: &mut TrainState,
    scenario: &Scenario,
    episode: usize,
    seed: u64,
) -> Result<Vec<EpochLoss>> {
    if cfg.variant == Variant::Joint {
        return Err(StrategyError::StateMismatch(
            "joint trains on the union of all episodes; use joint_train".into(),
        ));
    }
    let ep = &scenario.episodes[episode];
    register_classes(model, &ep.global_ids)?;
    if cfg.variant == Variant::Remind {
        let losses = remind::train_episode(cfg, opt_cfg, model, state, scenario, episode, seed)?;
        state.episodes_completed += 1;
        return Ok(losses);
    }
    if matches!(cfg.variant, Variant::Mas | Variant::MasR) {
        mas::align(model, state)?;
    }
    if cfg.variant == Variant::Nispa && state.nispa.is_none() {
        state.nispa = Some(NispaState::init(model, &cfg.nispa, &mut state.nispa_rng));
    }
    let terms = StepTerms::for_config(cfg);
    let samples = scenario.samples(episode, Split::Train);
    let mut opt = Sgd::new(opt_cfg.clone());
    let losses = run_epochs(
        seed,
        episode,
        opt_cfg.batch_size,
        ep.epochs,
        &samples,
        |chunk| {
            let batch = scenario.batch(chunk);
            raw_step(cfg, terms, model, state, &mut opt, scenario, batch, episode)
        },
    )?;
    match cfg.variant {
        Variant::Mas | Variant::MasR => mas::end_episode(model, state, scenario, episode)?,
        Variant::Nispa => {
            let nispa = state.nispa.as_mut().expect("initialised above");
            nispa.end_episode(model, scenario, episode, &cfg.nispa, &mut state.nispa_rng)?;
        }
        _ => {}
    }
    state.episodes_completed += 1;
    Ok(losses)
}

/// Trains one model on the shuffled union of every episode, with the full
/// class registry. Epoch count is the largest of the episodes'.
pub fn joint_train(
    cfg: &StrategyConfig,
    opt_cfg: &SgdConfig,
    model: &mut Model,
    scenario: &Scenario,
    seed: u64,
) -> Result<Vec<EpochLoss>> {
    let all: Vec<u32> = scenario
        .episodes
        .iter()
        .flat_map(|e| e.global_ids.clone())
        .collect();
    register_classes(model, &all)?;
    let samples: Vec<_> = (0..scenario.episodes.len())
        .flat_map(|e| scenario.samples(e, Split::Train))
        .collect();
    let epochs = scenario
        .episodes
        .iter()
        .map(|e| e.epochs)
        .max()
        .unwrap_or(0);
    let mut state = TrainState::new(cfg, seed);
    let terms = StepTerms::for_config(&StrategyConfig::default());
    let mut opt = Sgd::new(opt_cfg.clone());
    run_epochs(seed, 0, opt_cfg.batch_size, epochs, &samples, |chunk| {
        let batch = scenario.batch(chunk);
        raw_step(cfg, terms, model, &mut state, &mut opt, scenario, batch, 0)
    })
}

/// Runs `epochs` shuffled passes over `samples`, logging the mean step loss.
fn run_epochs<F>(
    seed: u64,
    episode: usize,
    batch_size: usize,
    epochs: usize,
    samples: &[Sample],
    mut step: F,
) -> Result<Vec<EpochLoss>>
where
    F: FnMut(&[Sample]) -> Result<f64>,
{
    let mut losses = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let mut rng = epoch_rng(seed, episode, epoch);
        let batches = iterate_batches(samples, batch_size, episode, Some(&mut rng))?;
        let mut total = 0.0;
        for chunk in &batches {
            let loss = step(chunk)?;
            if !loss.is_finite() {
                return Err(StrategyError::Diverged {
                    episode: episode + 1,
                    epoch: epoch + 1,
                });
            }
            total += loss;
        }
        losses.push(EpochLoss {
            episode: episode + 1,
            epoch: epoch + 1,
            loss: total / batches.len() as f64,
        });
    }
    Ok(losses)
}

fn param_vars(model: &Model, bound: &crate::model::Bound) -> Vec<Var> {
    (0..model.params().len())
        .map(|i| model.var(bound, i))
        .collect()
}

#[cfg(test)]
mod tests;
