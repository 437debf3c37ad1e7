use crate::autograd::{Tape, Var};
use crate::data::Scenario;
use crate::data::Split;
use crate::model::{Bound, Mode, Model};

use super::{param_vars, Result, StrategyError, TrainState};

/// Mean over `n` samples of `|d out_s / d leaf|` for every leaf. `sample`
/// records sample `s` on a fresh tape and returns the leaves and the scalar.
/// Leaves without a gradient contribute zeros.
pub fn mean_abs_grad<F>(n: usize, mut sample: F) -> Result<Vec<Vec<f32>>>
where
    F: FnMut(usize, &mut Tape) -> Result<(Vec<Var>, Var)>,
{
    if n == 0 {
        return Err(StrategyError::EmptyStream);
    }
    let mut acc: Vec<Vec<f64>> = Vec::new();
    for s in 0..n {
        let mut tape = Tape::new();
        let (leaves, out) = sample(s, &mut tape)?;
        if acc.is_empty() {
            acc = leaves
                .iter()
                .map(|&v| vec![0.0; tape.value(v).numel()])
                .collect();
        }
        let grads = tape.backward(out)?;
        for (a, &v) in acc.iter_mut().zip(&leaves) {
            if let Some(g) = grads.get(v) {
                for (x, &gi) in a.iter_mut().zip(g) {
                    *x += gi.abs() as f64;
                }
            }
        }
    }
    Ok(acc
        .into_iter()
        .map(|a| a.into_iter().map(|x| (x / n as f64) as f32).collect())
        .collect())
}

/// Importance of every model parameter over an episode's training split:
/// the mean absolute gradient of the squared L2 norm of the logits.
pub fn mas_importance(model: &Model, scenario: &Scenario, episode: usize) -> Result<Vec<Vec<f32>>> {
    let samples = scenario.samples(episode, Split::Train);
    mean_abs_grad(samples.len(), |s, tape| {
        let batch = scenario.batch(&samples[s..s + 1]);
        let bound = model.bind(tape);
        let x = tape.constant(batch.images);
        let logits = model.forward_from(tape, &bound, x, 0, Mode::Train)?;
        let out = tape.sum_squares(logits)?;
        Ok((param_vars(model, &bound), out))
    })
}

/// `sum_p sum_i omega_p[i] * (theta_p[i] - anchor_p[i])^2` over `vars`, or
/// `None` when every weight is zero.
pub fn penalty_terms(
    tape: &mut Tape,
    vars: &[Var],
    omega: &[Vec<f32>],
    anchor: &[Vec<f32>],
) -> Result<Option<Var>> {
    let mut total: Option<Var> = None;
    for ((&v, w), a) in vars.iter().zip(omega).zip(anchor) {
        if w.iter().all(|&x| x == 0.0) {
            continue;
        }
        let term = tape.weighted_sq_dev(v, a, w)?;
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    Ok(total)
}

pub(super) fn penalty(
    tape: &mut Tape,
    model: &Model,
    bound: &Bound,
    state: &TrainState,
) -> Result<Option<Var>> {
    if state.omega.is_empty() {
        return Ok(None);
    }
    let vars = param_vars(model, bound);
    penalty_terms(tape, &vars, &state.omega, &state.anchor)
}

/// Pads importance with zeros (and the anchor with current values) for
/// parameters that grew since the last snapshot.
pub(super) fn align(model: &Model, state: &mut TrainState) -> Result<()> {
    if state.omega.is_empty() {
        return Ok(());
    }
    if state.omega.len() != model.params().len() {
        return Err(StrategyError::StateMismatch(format!(
            "importance covers {} parameters, model has {}",
            state.omega.len(),
            model.params().len()
        )));
    }
    for ((p, w), a) in model
        .params()
        .iter()
        .zip(&mut state.omega)
        .zip(&mut state.anchor)
    {
        let n = p.tensor.numel();
        if w.len() > n || a.len() != w.len() {
            return Err(StrategyError::ShapeDrift {
                param: p.name.clone(),
                omega: w.len(),
                param_len: n,
            });
        }
        let start = w.len();
        w.resize(n, 0.0);
        a.extend_from_slice(&p.tensor.data()[start..]);
    }
    Ok(())
}

/// Adds this episode's importance and snapshots the parameters.
pub(super) fn end_episode(
    model: &Model,
    state: &mut TrainState,
    scenario: &Scenario,
    episode: usize,
) -> Result<()> {
    let fresh = mas_importance(model, scenario, episode)?;
    align(model, state)?;
    if state.omega.is_empty() {
        state.omega = fresh;
    } else {
        for (w, f) in state.omega.iter_mut().zip(fresh) {
            for (x, y) in w.iter_mut().zip(f) {
                *x += y;
            }
        }
    }
    state.anchor = model
        .params()
        .iter()
        .map(|p| p.tensor.data().to_vec())
        .collect();
    Ok(())
}
