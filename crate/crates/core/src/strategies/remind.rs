use crate::autograd::Tape;
use crate::data::{Sample, Scenario, Split};
use crate::metrics::{EpochLoss, EVAL_BATCH};
use crate::model::{Mode, Model};
use crate::optim::{Sgd, SgdConfig};
use crate::replay::{pq_decode, pq_encode, pq_train, Payload, PqCodebook, ReplayItem};
use crate::rng::{derive_u64, stream};
use crate::tensor::Tensor;

use super::{
    entropy, raw_step, replay_count, rows_of, run_epochs, Result, StepTerms, StrategyConfig,
    StrategyError, TrainState,
};

pub(super) fn train_episode(
    cfg: &StrategyConfig,
    opt_cfg: &SgdConfig,
    model: &mut Model,
    state: &mut TrainState,
    scenario: &Scenario,
    episode: usize,
    seed: u64,
) -> Result<Vec<EpochLoss>> {
    let samples = scenario.samples(episode, Split::Train);
    let epochs = scenario.episodes[episode].epochs;
    let mut opt = Sgd::new(opt_cfg.clone());
    if state.codebook.is_none() {
        if state.episodes_completed > 0 {
            return Err(StrategyError::StateMismatch(format!(
                "remind has no codebook at episode {}",
                episode + 1
            )));
        }
        let terms = StepTerms::for_config(&StrategyConfig::default());
        let losses = run_epochs(
            seed,
            episode,
            opt_cfg.batch_size,
            epochs,
            &samples,
            |chunk| {
                let batch = scenario.batch(chunk);
                raw_step(cfg, terms, model, state, &mut opt, scenario, batch, episode)
            },
        )?;
        model.freeze_prefix(cfg.remind.split)?;
        let (book, report) = train_codebook(cfg, model, scenario, &samples, seed)?;
        state.codebook = Some(book);
        state.codebook_report = Some(report);
        store(model, state, scenario, &samples, episode, cfg.remind.split)?;
        return Ok(losses);
    }
    let split = cfg.remind.split;
    if model.frozen_prefix() != Some(split) {
        return Err(StrategyError::StateMismatch(format!(
            "remind expects the prefix frozen through stage {split}"
        )));
    }
    let losses = run_epochs(
        seed,
        episode,
        opt_cfg.batch_size,
        epochs,
        &samples,
        |chunk| latent_step(cfg, model, state, &mut opt, scenario, chunk),
    )?;
    store(model, state, scenario, &samples, episode, split)?;
    Ok(losses)
}

fn features(model: &Model, scenario: &Scenario, chunk: &[Sample], split: usize) -> Result<Tensor> {
    let batch = scenario.batch(chunk);
    Ok(model.extract_features(&batch.images, split)?)
}

fn train_codebook(
    cfg: &StrategyConfig,
    model: &Model,
    scenario: &Scenario,
    samples: &[Sample],
    seed: u64,
) -> Result<(PqCodebook, crate::replay::PqTrainReport)> {
    let r = &cfg.remind;
    let stride = samples.len().div_ceil(r.max_codebook_samples.max(1)).max(1);
    let subset: Vec<Sample> = samples.iter().step_by(stride).copied().collect();
    let dim = model.config().feature_width(r.split);
    let mut data = Vec::with_capacity(subset.len() * dim);
    for chunk in subset.chunks(EVAL_BATCH) {
        data.extend_from_slice(features(model, scenario, chunk, r.split)?.data());
    }
    let book_seed = derive_u64(seed, stream::CODEBOOK, 0);
    Ok(pq_train(&data, dim, r.m, r.k, r.iterations, book_seed)?)
}

/// Encodes every sample once and offers it to the buffer.
fn store(
    model: &Model,
    state: &mut TrainState,
    scenario: &Scenario,
    samples: &[Sample],
    episode: usize,
    split: usize,
) -> Result<()> {
    let book = state.codebook.as_ref().expect("codebook trained");
    let dim = book.dim();
    for chunk in samples.chunks(EVAL_BATCH) {
        let feats = features(model, scenario, chunk, split)?;
        let logits = model.logits_from(&feats, split, Mode::Eval)?;
        let c = model.class_count();
        for (j, s) in chunk.iter().enumerate() {
            let codes = pq_encode(book, &feats.data()[j * dim..(j + 1) * dim])?;
            let item = ReplayItem {
                payload: Payload::Latent(codes),
                label: s.label,
                logits: None,
                episode: episode as u32,
                source: s.index,
            };
            let score = entropy(&logits.data()[j * c..(j + 1) * c]);
            state.buffer.offer(item, score, &mut state.reservoir_rng);
        }
    }
    Ok(())
}

fn latent_step(
    cfg: &StrategyConfig,
    model: &mut Model,
    state: &mut TrainState,
    opt: &mut Sgd,
    scenario: &Scenario,
    chunk: &[Sample],
) -> Result<f64> {
    let split = cfg.remind.split;
    let fresh = features(model, scenario, chunk, split)?;
    let dim = fresh.shape()[1];
    let mut data = fresh.into_data();
    let mut labels: Vec<usize> = chunk.iter().map(|s| s.label as usize).collect();
    let count = replay_count(cfg, chunk.len());
    if count > 0 && !state.buffer.is_empty() {
        let book = state.codebook.as_ref().expect("checked by caller");
        for it in state.buffer.sample(count, &mut state.replay_rng)? {
            data.extend(pq_decode(book, it.payload.bytes())?);
            labels.push(it.label as usize);
        }
    }
    let n = labels.len();
    let x = Tensor::new(vec![n, dim], data).expect("feature rows");
    let rows = rows_of(model, &labels)?;
    let all = vec![true; model.class_count()];
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let xv = tape.constant(x);
    let logits = model.forward_from(&mut tape, &bound, xv, split, Mode::Train)?;
    let loss = tape.masked_cross_entropy(logits, &rows, &all)?;
    let value = tape.value(loss).item() as f64;
    let grads = tape.backward(loss)?;
    model.absorb(&bound, &grads);
    opt.step(model.params_mut())?;
    Ok(value)
}
