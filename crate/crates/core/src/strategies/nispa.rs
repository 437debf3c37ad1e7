use rand::seq::index;
use rand::Rng;

use crate::autograd::Tape;
use crate::data::{Scenario, Split};
use crate::metrics::EVAL_BATCH;
use crate::model::{bias_index, weight_index, Model, STAGES};

use super::{NispaConfig, Result, StrategyError};

/// Connection masks over conv weights and the set of frozen units, per stage.
#[derive(Clone, Debug, PartialEq)]
pub struct NispaState {
    masks: Vec<Vec<bool>>,
    frozen: Vec<Vec<bool>>,
}

fn fan_in(model: &Model, stage: usize) -> usize {
    let shape = model.params()[weight_index(stage)].tensor.shape();
    shape[1] * shape[2] * shape[3]
}

impl NispaState {
    /// Deactivates a random `sparsity` share of every conv weight tensor.
    pub fn init<R: Rng>(model: &mut Model, cfg: &NispaConfig, rng: &mut R) -> Self {
        let mut masks = Vec::with_capacity(STAGES);
        let mut frozen = Vec::with_capacity(STAGES);
        for s in 1..=STAGES {
            let n = model.params()[weight_index(s)].tensor.numel();
            let off = (cfg.sparsity as f64 * n as f64).round() as usize;
            let mut mask = vec![true; n];
            for j in index::sample(rng, n, off) {
                mask[j] = false;
            }
            masks.push(mask);
            frozen.push(vec![false; model.config().channels[s - 1]]);
        }
        let state = NispaState { masks, frozen };
        state.apply(model);
        state
    }

    pub fn mask(&self, stage: usize) -> &[bool] {
        &self.masks[stage - 1]
    }

    pub fn frozen_units(&self, stage: usize) -> &[bool] {
        &self.frozen[stage - 1]
    }

    pub fn active_connections(&self) -> usize {
        self.masks
            .iter()
            .map(|m| m.iter().filter(|&&a| a).count())
            .sum()
    }

    /// Zeroes inactive weights and locks inactive connections and every
    /// parameter of frozen units.
    pub fn apply(&self, model: &mut Model) {
        for s in 1..=STAGES {
            let per_unit = fan_in(model, s);
            let mask = &self.masks[s - 1];
            let frozen = &self.frozen[s - 1];
            let w = &mut model.params_mut()[weight_index(s)];
            for (v, &on) in w.tensor.data_mut().iter_mut().zip(mask) {
                if !on {
                    *v = 0.0;
                }
            }
            w.update_mask = Some(
                mask.iter()
                    .enumerate()
                    .map(|(j, &on)| on && !frozen[j / per_unit])
                    .collect(),
            );
            let b = &mut model.params_mut()[bias_index(s)];
            b.update_mask = Some(frozen.iter().map(|&f| !f).collect());
        }
    }

    /// Freezes stable units and swaps the weakest unfrozen connections for
    /// random inactive ones; the active count is preserved.
    pub fn end_episode<R: Rng>(
        &mut self,
        model: &mut Model,
        scenario: &Scenario,
        episode: usize,
        cfg: &NispaConfig,
        rng: &mut R,
    ) -> Result<()> {
        let act = unit_activations(model, scenario, episode)?;
        self.freeze_stable(&act, cfg.stable_quantile);
        self.rewire(model, cfg.rewire_fraction, cfg.regrow_scale, rng)?;
        self.apply(model);
        Ok(())
    }

    pub fn freeze_stable(&mut self, activations: &[Vec<f64>], quantile: f32) {
        for (frozen, act) in self.frozen.iter_mut().zip(activations) {
            let mut sorted = act.clone();
            sorted.sort_by(f64::total_cmp);
            let at = (quantile as f64 * (sorted.len() - 1) as f64).floor() as usize;
            let threshold = sorted[at];
            for (f, &a) in frozen.iter_mut().zip(act) {
                if a > threshold {
                    *f = true;
                }
            }
        }
    }

    pub fn rewire<R: Rng>(
        &mut self,
        model: &mut Model,
        fraction: f32,
        scale: f32,
        rng: &mut R,
    ) -> Result<()> {
        for s in 1..=STAGES {
            let per_unit = fan_in(model, s);
            let frozen = &self.frozen[s - 1];
            let mask = &mut self.masks[s - 1];
            let w = model.params_mut()[weight_index(s)].tensor.data_mut();
            let mut active: Vec<usize> = (0..mask.len())
                .filter(|&j| mask[j] && !frozen[j / per_unit])
                .collect();
            let drop = (fraction as f64 * active.len() as f64).floor() as usize;
            if drop == 0 {
                continue;
            }
            let free: Vec<usize> = (0..mask.len())
                .filter(|&j| !mask[j] && !frozen[j / per_unit])
                .collect();
            if drop > free.len() {
                return Err(StrategyError::Rewire(format!(
                    "stage {s}: {drop} connections to regrow but only {} free slots",
                    free.len()
                )));
            }
            active.sort_by(|&a, &b| w[a].abs().total_cmp(&w[b].abs()).then(a.cmp(&b)));
            for &j in &active[..drop] {
                mask[j] = false;
                w[j] = 0.0;
            }
            for i in index::sample(rng, free.len(), drop) {
                let j = free[i];
                mask[j] = true;
                w[j] = Model::small_init(rng, scale);
            }
        }
        Ok(())
    }
}

/// Mean post-activation output of every unit over an episode's training
/// split, per stage.
pub fn unit_activations(
    model: &Model,
    scenario: &Scenario,
    episode: usize,
) -> Result<Vec<Vec<f64>>> {
    let samples = scenario.samples(episode, Split::Train);
    if samples.is_empty() {
        return Err(StrategyError::EmptyStream);
    }
    let channels = &model.config().channels;
    let mut sums: Vec<Vec<f64>> = channels.iter().map(|&c| vec![0.0; c]).collect();
    let mut per_unit = vec![1usize; STAGES];
    for chunk in samples.chunks(EVAL_BATCH) {
        let batch = scenario.batch(chunk);
        let mut tape = Tape::no_grad();
        let bound = model.bind(&mut tape);
        let mut h = tape.constant(batch.images);
        for s in 1..=STAGES {
            h = model.run_stages(&mut tape, &bound, h, s - 1, s)?;
            let out = tape.value(h);
            let width = out.shape()[1];
            let c = channels[s - 1];
            let hw = width / c;
            per_unit[s - 1] = hw;
            for row in out.data().chunks_exact(width) {
                for (u, sum) in sums[s - 1].iter_mut().enumerate() {
                    *sum += row[u * hw..(u + 1) * hw]
                        .iter()
                        .map(|&v| v as f64)
                        .sum::<f64>();
                }
            }
        }
    }
    let n = samples.len() as f64;
    Ok(sums
        .into_iter()
        .zip(per_unit)
        .map(|(s, hw)| s.into_iter().map(|v| v / (n * hw as f64)).collect())
        .collect())
}
