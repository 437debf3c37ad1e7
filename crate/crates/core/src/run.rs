//! Scenario configuration files and end-to-end strategy runs.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{build_scenario, DataError, EpisodeConfig, Scenario};
use crate::metrics::{
    evaluate, evaluate_episode, AccuracyMatrix, BufferStats, Cell, CodebookStats, MetricsError,
    RunReport,
};
use crate::model::{BackboneConfig, Model, ModelError};
use crate::optim::{OptimError, SgdConfig};
use crate::rng::derive_u64;
use crate::strategies::{
    joint_train, train_episode, StrategyConfig, StrategyError, TrainState, Variant,
};

#[derive(Debug, Error)]
pub enum RunError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {detail}")]
    Parse { path: PathBuf, detail: String },
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Strategy(#[from] StrategyError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

type Result<T> = std::result::Result<T, RunError>;

/// A scenario config document. Every optional section falls back to its
/// defaults; [`ScenarioConfig::echo`] serializes the fully resolved form.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub episodes: Vec<EpisodeConfig>,
    #[serde(default)]
    pub shared_classes: Vec<Vec<String>>,
    #[serde(default)]
    pub strategy: StrategyConfig,
    #[serde(default)]
    pub optimizer: SgdConfig,
    #[serde(default)]
    pub backbone: BackboneConfig,
}

impl ScenarioConfig {
    pub fn from_json(text: &str, path: &Path) -> Result<Self> {
        let cfg: ScenarioConfig = serde_json::from_str(text).map_err(|e| RunError::Parse {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| RunError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text, path)
    }

    pub fn validate(&self) -> Result<()> {
        if self.episodes.is_empty() {
            return Err(RunError::Config("at least one episode is required".into()));
        }
        if let Some(i) = self.episodes.iter().position(|e| e.epochs == 0) {
            return Err(RunError::Config(format!(
                "episode {} has zero epochs",
                i + 1
            )));
        }
        self.strategy
            .validate()
            .map_err(|e| RunError::Config(e.to_string()))?;
        self.optimizer
            .validate()
            .map_err(|e: OptimError| RunError::Config(e.to_string()))?;
        self.backbone
            .validate()
            .map_err(|e| RunError::Config(e.to_string()))?;
        Ok(())
    }

    /// Loads the referenced datasets, resolving stems against `base_dir`.
    pub fn build(&self, base_dir: &Path) -> Result<Scenario> {
        Ok(build_scenario(
            &self.name,
            self.seed,
            &self.episodes,
            &self.shared_classes,
            base_dir,
        )?)
    }

    /// The resolved config with `seed` set to the run's seed.
    pub fn echo(&self, seed: u64) -> serde_json::Value {
        let mut cfg = self.clone();
        cfg.seed = seed;
        serde_json::to_value(cfg).expect("config serializes")
    }
}

/// Seed of model `i` of the independent baseline; model 0 uses the master.
pub fn independent_model_seed(seed: u64, episode: usize) -> u64 {
    if episode == 0 {
        seed
    } else {
        derive_u64(seed, "model", episode as u64)
    }
}

pub struct RunOutcome {
    pub report: RunReport,
    /// One model, or one per episode for `naive_independent`.
    pub models: Vec<Model>,
    pub state: Option<TrainState>,
}

fn prefix_rows(cells: &[Cell]) -> AccuracyMatrix {
    let rows = (1..=cells.len()).map(|t| cells[..t].to_vec()).collect();
    AccuracyMatrix::from_rows(rows).expect("triangular")
}

/// Trains `cfg.strategy` through every episode of `scenario` and scores it.
pub fn run_scenario(cfg: &ScenarioConfig, scenario: &Scenario, seed: u64) -> Result<RunOutcome> {
    let start = Instant::now();
    let strat = &cfg.strategy;
    let opt = &cfg.optimizer;
    let t = scenario.episodes.len();
    let mut losses = Vec::new();
    let mut matrix = AccuracyMatrix::new();
    let (models, state) = match strat.variant {
        Variant::Joint => {
            let mut model = Model::build(cfg.backbone.clone(), seed)?;
            losses = joint_train(strat, opt, &mut model, scenario, seed)?;
            matrix = prefix_rows(&evaluate(&model, scenario, t)?);
            (vec![model], None)
        }
        Variant::NaiveIndependent => {
            let mut models = Vec::with_capacity(t);
            let mut cells = Vec::with_capacity(t);
            for e in 0..t {
                let mut model =
                    Model::build(cfg.backbone.clone(), independent_model_seed(seed, e))?;
                let mut state = TrainState::new(strat, seed);
                losses.extend(train_episode(
                    strat, opt, &mut model, &mut state, scenario, e, seed,
                )?);
                cells.push(evaluate_episode(&model, scenario, e + 1)?);
                models.push(model);
            }
            matrix = prefix_rows(&cells);
            (models, None)
        }
        _ => {
            let mut model = Model::build(cfg.backbone.clone(), seed)?;
            let mut state = TrainState::new(strat, seed);
            for e in 0..t {
                losses.extend(train_episode(
                    strat, opt, &mut model, &mut state, scenario, e, seed,
                )?);
                matrix.push_row(evaluate(&model, scenario, e + 1)?);
            }
            (vec![model], Some(state))
        }
    };
    let mut report = RunReport::new(
        strat.variant.name(),
        seed,
        strat.variant == Variant::NaiveIndependent,
        cfg.echo(seed),
        scenario.registry.clone(),
        matrix,
        start.elapsed().as_secs_f64(),
        losses,
    );
    if let Some(st) = &state {
        if matches!(
            strat.variant,
            Variant::Der | Variant::DerPp | Variant::MasR | Variant::Remind
        ) {
            report.buffer = Some(BufferStats {
                capacity: st.buffer.capacity(),
                size: st.buffer.len(),
                seen: st.buffer.seen(),
                stored_bytes: st.buffer.stored_bytes(),
            });
        }
        if let (Some(book), Some(r)) = (&st.codebook, &st.codebook_report) {
            report.codebook = Some(CodebookStats {
                split: strat.remind.split,
                m: book.m(),
                k: book.k(),
                dim: book.dim(),
                sse: r.sse.clone(),
                final_sse: r.final_sse,
            });
        }
    }
    report.notes = notes(strat.variant);
    Ok(RunOutcome {
        report,
        models,
        state,
    })
}

fn notes(variant: Variant) -> Vec<String> {
    let note = match variant {
        Variant::NaiveIndependent => {
            "one model per episode; episode i is scored with model i, so task identity is given at test time"
        }
        Variant::Joint => {
            "a single model trained on the union of all episodes; every row reports that final model"
        }
        Variant::Nispa => {
            "simplified scheme: stable units (mean activation above the configured quantile) are frozen at each episode end and a fraction of the weakest unfrozen connections is swapped for random inactive ones"
        }
        Variant::Remind => {
            "stages up to the split are frozen after episode 1; rehearsal uses product-quantized features"
        }
        _ => return Vec::new(),
    };
    vec![note.to_string()]
}
