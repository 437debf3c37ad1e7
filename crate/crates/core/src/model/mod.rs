//! Five-stage convolutional backbone with a single expandable linear head.
//!
//! Stage `s` (1-based) is `conv 3x3 -> relu -> [unit mask] -> [max-pool]`;
//! stage 5 ends with a global average pool. The head maps the final
//! channels to one logit per registered class. Head row `r` scores global
//! class `head_classes[r]`.

mod checkpoint;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autograd::{AutogradError, Gradients, Tape, Var};
use crate::optim::Param;
use crate::rng::{stream, stream_rng};
use crate::tensor::Tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC};

pub const STAGES: usize = 5;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid backbone config: {0}")]
    Config(String),
    #[error("stage index {0} outside 1..=5")]
    InvalidStage(usize),
    #[error("expected input of shape N x {expected:?}, got {got:?}")]
    InputShape {
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("classifier head has no classes; expand it before the forward pass")]
    EmptyHead,
    #[error("unit mask for stage {stage} has {got} entries, stage has {expected} units")]
    MaskLength {
        stage: usize,
        expected: usize,
        got: usize,
    },
    #[error("head expansion needs at least one new class")]
    EmptyExpansion,
    #[error("class {0} already has a head row")]
    DuplicateClass(u32),
    #[error(transparent)]
    Autograd(#[from] AutogradError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

type Result<T> = std::result::Result<T, ModelError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub input_channels: usize,
    pub input_size: usize,
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// 1-based stages followed by a 2x2 / stride-2 max-pool.
    pub pool_after: Vec<usize>,
    /// Standard deviation of freshly added head rows.
    pub head_init_scale: f32,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            input_channels: 3,
            input_size: 32,
            channels: vec![32, 32, 64, 64, 128],
            kernel: 3,
            stride: 1,
            padding: 1,
            pool_after: vec![1, 3],
            head_init_scale: 0.01,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.len() != STAGES {
            return Err(ModelError::Config(format!(
                "exactly {STAGES} conv stages required, got {}",
                self.channels.len()
            )));
        }
        if self.channels.contains(&0) || self.input_channels == 0 || self.kernel == 0 {
            return Err(ModelError::Config(
                "channel counts and kernel must be positive".into(),
            ));
        }
        if self.stride == 0 {
            return Err(ModelError::Config("stride must be positive".into()));
        }
        if self.pool_after.iter().any(|&s| s == 0 || s > STAGES) {
            return Err(ModelError::Config(format!(
                "pool_after entries must be in 1..={STAGES}"
            )));
        }
        let mut side = self.input_size;
        for s in 1..=STAGES {
            if side + 2 * self.padding < self.kernel {
                return Err(ModelError::Config(format!("stage {s} input too small")));
            }
            side = (side + 2 * self.padding - self.kernel) / self.stride + 1;
            if self.pool_after.contains(&s) {
                if side < 2 {
                    return Err(ModelError::Config(format!("stage {s} too small to pool")));
                }
                side /= 2;
            }
        }
        Ok(())
    }

    /// Output shape of stage `s` (`C x H x W`; `[C]` after stage 5).
    pub fn stage_shape(&self, s: usize) -> Vec<usize> {
        if s == 0 {
            return vec![self.input_channels, self.input_size, self.input_size];
        }
        if s == STAGES {
            return vec![self.channels[STAGES - 1]];
        }
        let mut side = self.input_size;
        for stage in 1..=s {
            side = (side + 2 * self.padding - self.kernel) / self.stride + 1;
            if self.pool_after.contains(&stage) {
                side /= 2;
            }
        }
        vec![self.channels[s - 1], side, side]
    }

    pub fn feature_width(&self, s: usize) -> usize {
        self.stage_shape(s).iter().product()
    }

    pub fn head_inputs(&self) -> usize {
        self.channels[STAGES - 1]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Train,
    Eval,
}

/// Tape handles for every model parameter, in [`Model::params`] order.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: BackboneConfig,
    seed: u64,
    params: Vec<Param>,
    head_classes: Vec<u32>,
    unit_masks: Vec<Option<Vec<bool>>>,
    frozen_prefix: Option<usize>,
}

pub fn weight_index(stage: usize) -> usize {
    2 * (stage - 1)
}

pub fn bias_index(stage: usize) -> usize {
    2 * (stage - 1) + 1
}

pub const HEAD_WEIGHT: usize = 2 * STAGES;
pub const HEAD_BIAS: usize = 2 * STAGES + 1;

impl Model {
    /// He-normal conv weights (std `sqrt(2 / fan_in)`), zero biases, empty head.
    pub fn build(config: BackboneConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let mut params = Vec::with_capacity(2 * STAGES + 2);
        let k = config.kernel;
        for s in 1..=STAGES {
            let cin = if s == 1 {
                config.input_channels
            } else {
                config.channels[s - 2]
            };
            let cout = config.channels[s - 1];
            let fan_in = (cin * k * k) as f32;
            let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("finite std");
            let mut rng = stream_rng(seed, stream::INIT, s as u64);
            let w: Vec<f32> = (0..cout * cin * k * k)
                .map(|_| normal.sample(&mut rng))
                .collect();
            params.push(Param::new(
                format!("stage{s}.weight"),
                Tensor::new(vec![cout, cin, k, k], w).expect("weight length"),
            ));
            params.push(Param::new(
                format!("stage{s}.bias"),
                Tensor::zeros(vec![cout]),
            ));
        }
        let f = config.head_inputs();
        params.push(Param::new("head.weight", Tensor::zeros(vec![0, f])));
        params.push(Param::new("head.bias", Tensor::zeros(vec![0])));
        Ok(Model {
            config,
            seed,
            params,
            head_classes: Vec::new(),
            unit_masks: vec![None; STAGES],
            frozen_prefix: None,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn class_count(&self) -> usize {
        self.head_classes.len()
    }

    pub fn head_classes(&self) -> &[u32] {
        &self.head_classes
    }

    pub fn row_of(&self, class: u32) -> Option<usize> {
        self.head_classes.iter().position(|&c| c == class)
    }

    pub fn frozen_prefix(&self) -> Option<usize> {
        self.frozen_prefix
    }

    pub fn unit_mask(&self, stage: usize) -> Option<&[bool]> {
        self.unit_masks.get(stage.wrapping_sub(1))?.as_deref()
    }

    /// Grows the head by `k` classes with ids following the current largest.
    pub fn expand_head(&mut self, k: usize) -> Result<()> {
        if k == 0 {
            return Err(ModelError::EmptyExpansion);
        }
        let start = self.head_classes.iter().max().map_or(0, |&m| m + 1);
        let ids: Vec<u32> = (start..start + k as u32).collect();
        self.expand_head_with(&ids)
    }

    /// Appends one head row per id. Old rows and biases are untouched; new
    /// rows are drawn from a per-class stream, new biases are zero.
    pub fn expand_head_with(&mut self, classes: &[u32]) -> Result<()> {
        if classes.is_empty() {
            return Err(ModelError::EmptyExpansion);
        }
        for (i, &c) in classes.iter().enumerate() {
            if self.head_classes.contains(&c) || classes[..i].contains(&c) {
                return Err(ModelError::DuplicateClass(c));
            }
        }
        let f = self.config.head_inputs();
        let normal = Normal::new(0.0, self.config.head_init_scale)
            .map_err(|e| ModelError::Config(format!("head_init_scale: {e}")))?;
        let mut rows = Vec::with_capacity(classes.len() * f);
        for &c in classes {
            let mut rng = stream_rng(self.seed, stream::HEAD, c as u64);
            rows.extend((0..f).map(|_| normal.sample(&mut rng) as f32));
        }
        let to_err = |e: crate::tensor::TensorError| ModelError::Config(e.to_string());
        self.params[HEAD_WEIGHT]
            .tensor
            .append_rows(&rows)
            .map_err(to_err)?;
        let zeros = vec![0.0; classes.len()];
        let bias = &mut self.params[HEAD_BIAS].tensor;
        let mut grown = bias.data().to_vec();
        grown.extend_from_slice(&zeros);
        let had_grad = bias.grad().map(|g| {
            let mut g = g.to_vec();
            g.extend_from_slice(&zeros);
            g
        });
        let mut t = Tensor::new(vec![grown.len()], grown).expect("bias length");
        if let Some(g) = had_grad {
            t.accumulate_grad(&g).expect("grad length");
        }
        *bias = t;
        for p in [HEAD_WEIGHT, HEAD_BIAS] {
            let n = self.params[p].tensor.numel();
            if let Some(mask) = &mut self.params[p].update_mask {
                mask.resize(n, true);
            }
        }
        self.head_classes.extend_from_slice(classes);
        Ok(())
    }

    /// Excludes every parameter of stages `1..=split` from optimizer updates.
    pub fn freeze_prefix(&mut self, split: usize) -> Result<()> {
        if !(1..=STAGES).contains(&split) {
            return Err(ModelError::InvalidStage(split));
        }
        for s in 1..=split {
            self.params[weight_index(s)].frozen = true;
            self.params[bias_index(s)].frozen = true;
        }
        self.frozen_prefix = Some(split);
        Ok(())
    }

    /// Forces units (output channels) of `stage` off where the mask is false.
    pub fn set_unit_mask(&mut self, stage: usize, mask: Option<Vec<bool>>) -> Result<()> {
        if !(1..=STAGES).contains(&stage) {
            return Err(ModelError::InvalidStage(stage));
        }
        if let Some(m) = &mask {
            let expected = self.config.channels[stage - 1];
            if m.len() != expected {
                return Err(ModelError::MaskLength {
                    stage,
                    expected,
                    got: m.len(),
                });
            }
        }
        self.unit_masks[stage - 1] = mask;
        Ok(())
    }

    /// Puts every parameter on `tape` as a leaf; frozen ones need no gradient.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| {
                let t = p.tensor.clone().with_requires_grad(!p.frozen);
                tape.leaf(t)
            })
            .collect();
        Bound { vars }
    }

    pub fn var(&self, bound: &Bound, index: usize) -> Var {
        bound.vars[index]
    }

    /// Adds tape gradients into the parameters' gradient buffers.
    pub fn absorb(&mut self, bound: &Bound, grads: &Gradients) {
        for (p, v) in self.params.iter_mut().zip(&bound.vars) {
            if let Some(g) = grads.get(*v) {
                p.tensor
                    .accumulate_grad(g)
                    .expect("gradient matches parameter");
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.tensor.clear_grad();
        }
    }

    fn check_input(&self, shape: &[usize], from_stage: usize) -> Result<()> {
        let expected = if from_stage == 0 {
            self.config.stage_shape(0)
        } else {
            vec![self.config.feature_width(from_stage)]
        };
        let ok = shape.len() == expected.len() + 1 && shape[1..] == expected[..];
        if !ok {
            return Err(ModelError::InputShape {
                expected,
                got: shape.to_vec(),
            });
        }
        Ok(())
    }

    /// Runs stages `from_stage+1 ..= to_stage` on `x`, which must hold the
    /// output of `from_stage` (raw images for 0, flattened features otherwise).
    /// Returns the flattened `N x F` activations of `to_stage`.
    pub fn run_stages(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        x: Var,
        from_stage: usize,
        to_stage: usize,
    ) -> Result<Var> {
        if from_stage > STAGES {
            return Err(ModelError::InvalidStage(from_stage));
        }
        if to_stage > STAGES || to_stage < from_stage {
            return Err(ModelError::InvalidStage(to_stage));
        }
        self.check_input(tape.value(x).shape(), from_stage)?;
        let n = tape.value(x).shape()[0];
        let mut h = x;
        if from_stage > 0 && from_stage < STAGES {
            let mut shape = vec![n];
            shape.extend(self.config.stage_shape(from_stage));
            h = tape.reshape(h, shape)?;
        }
        for s in from_stage + 1..=to_stage {
            h = tape.conv2d(
                h,
                bound.vars[weight_index(s)],
                bound.vars[bias_index(s)],
                self.config.stride,
                self.config.padding,
            )?;
            h = tape.relu(h)?;
            if let Some(mask) = &self.unit_masks[s - 1] {
                h = tape.channel_mask(h, mask)?;
            }
            if self.config.pool_after.contains(&s) {
                h = tape.max_pool2d(h, 2, 2)?;
            }
            if s == STAGES {
                h = tape.global_avg_pool(h)?;
            }
        }
        if to_stage > 0 && to_stage < STAGES {
            let f = self.config.feature_width(to_stage);
            h = tape.reshape(h, vec![n, f])?;
        }
        Ok(h)
    }

    /// Logits over every head row, starting from the output of `from_stage`.
    pub fn forward_from(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        x: Var,
        from_stage: usize,
        _mode: Mode,
    ) -> Result<Var> {
        if self.head_classes.is_empty() {
            return Err(ModelError::EmptyHead);
        }
        let feats = self.run_stages(tape, bound, x, from_stage, STAGES)?;
        Ok(tape.linear(feats, bound.vars[HEAD_WEIGHT], bound.vars[HEAD_BIAS])?)
    }

    /// Inference-only logits for a `N x 3 x 32 x 32` batch.
    pub fn forward(&self, batch: &Tensor, mode: Mode) -> Result<Tensor> {
        self.logits_from(batch, 0, mode)
    }

    /// Inference-only logits from stage-`from_stage` features.
    pub fn logits_from(&self, x: &Tensor, from_stage: usize, mode: Mode) -> Result<Tensor> {
        let mut tape = Tape::no_grad();
        let bound = self.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let out = self.forward_from(&mut tape, &bound, xv, from_stage, mode)?;
        Ok(tape.value(out).clone())
    }

    /// Flattened activations after stage `split`, computed without recording.
    pub fn extract_features(&self, batch: &Tensor, split: usize) -> Result<Tensor> {
        if !(1..=STAGES).contains(&split) {
            return Err(ModelError::InvalidStage(split));
        }
        let mut tape = Tape::no_grad();
        let bound = self.bind(&mut tape);
        let xv = tape.constant(batch.clone());
        let out = self.run_stages(&mut tape, &bound, xv, 0, split)?;
        Ok(tape.value(out).clone())
    }

    /// SHA-256 over all parameter bytes, for purity and determinism checks.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            for v in p.tensor.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Reseeds a single weight element, used when connections are regrown.
    pub(crate) fn small_init<R: Rng>(rng: &mut R, scale: f32) -> f32 {
        let normal = Normal::new(0.0f32, scale).expect("finite scale");
        normal.sample(rng)
    }
}
