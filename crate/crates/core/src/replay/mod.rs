//! Fixed-capacity rehearsal memory and the product-quantization codec used
//! for compressed latent replay.

mod pq;

use std::io::Write;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use pq::{pq_decode, pq_encode, pq_train, PqCodebook, PqTrainReport};

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("cannot sample from an empty buffer")]
    EmptyBuffer,
    #[error("need at least k = {k} training vectors, got {n}")]
    TooFewSamples { n: usize, k: usize },
    #[error("feature dim {dim} is not divisible by {m} subspaces")]
    DimNotDivisible { dim: usize, m: usize },
    #[error("centroids per subspace must be in 1..=256, got {0}")]
    InvalidK(usize),
    #[error("subspace count must be positive")]
    InvalidM,
    #[error("expected {expected} values, got {actual}")]
    DimMismatch { expected: usize, actual: usize },
    #[error("code {code} in subspace {subspace} is out of range for k = {k}")]
    CodeOutOfRange { subspace: usize, code: u8, k: usize },
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        source: std::io::Error,
    },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Payload {
    /// `3 x 32 x 32` image bytes.
    Raw(Vec<u8>),
    /// One product-quantization code per subspace.
    Latent(Vec<u8>),
}

impl Payload {
    pub fn bytes(&self) -> &[u8] {
        match self {
            Payload::Raw(b) | Payload::Latent(b) => b,
        }
    }
}

/// Pre-softmax outputs recorded at insertion time, tagged with the global
/// class id of every entry.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitSnapshot {
    pub classes: Vec<u32>,
    pub values: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReplayItem {
    pub payload: Payload,
    pub label: u32,
    pub logits: Option<LogitSnapshot>,
    /// Zero-based episode the item was drawn from.
    pub episode: u32,
    /// Index of the item within its episode's training split.
    pub source: u32,
}

/// Bytes of bookkeeping stored with every item besides payload and logits:
/// label, episode and source index.
pub const ITEM_OVERHEAD_BYTES: usize = 12;

impl ReplayItem {
    /// Storage cost under a packed layout: payload, fixed overhead, and
    /// `(u32 class, f32 value)` per logit entry.
    pub fn stored_bytes(&self) -> usize {
        let logits = self.logits.as_ref().map_or(0, |l| 8 * l.values.len());
        self.payload.bytes().len() + ITEM_OVERHEAD_BYTES + logits
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// Uniform reservoir sampling over the stream.
    #[default]
    Reservoir,
    /// On overflow, keep the items with the highest predictive entropy.
    MaxEntropy,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReservoirBuffer {
    capacity: usize,
    selection: Selection,
    items: Vec<ReplayItem>,
    scores: Vec<f32>,
    seen: u64,
}

impl ReservoirBuffer {
    pub fn new(capacity: usize, selection: Selection) -> Self {
        ReservoirBuffer {
            capacity,
            selection,
            items: Vec::new(),
            scores: Vec::new(),
            seen: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Total number of items ever offered.
    pub fn seen(&self) -> u64 {
        self.seen
    }

    pub fn items(&self) -> &[ReplayItem] {
        &self.items
    }

    /// Offers one item. `score` is the item's predictive entropy and is only
    /// read under [`Selection::MaxEntropy`]. The rng is consulted only once
    /// the buffer is full.
    pub fn offer(&mut self, item: ReplayItem, score: f32, rng: &mut impl Rng) {
        self.seen += 1;
        if self.items.len() < self.capacity {
            self.items.push(item);
            self.scores.push(score);
            return;
        }
        if self.capacity == 0 {
            return;
        }
        let slot = match self.selection {
            Selection::Reservoir => {
                let j = rng.random_range(0..self.seen);
                (j < self.capacity as u64).then_some(j as usize)
            }
            Selection::MaxEntropy => {
                let (min_i, &min_s) =
                    self.scores
                        .iter()
                        .enumerate()
                        .fold(
                            (0, &f32::INFINITY),
                            |acc, (i, s)| if s < acc.1 { (i, s) } else { acc },
                        );
                (score > min_s).then_some(min_i)
            }
        };
        if let Some(j) = slot {
            self.items[j] = item;
            self.scores[j] = score;
        }
    }

    /// `count` items drawn uniformly with replacement.
    pub fn sample(
        &self,
        count: usize,
        rng: &mut impl Rng,
    ) -> Result<Vec<&ReplayItem>, ReplayError> {
        if count == 0 {
            return Ok(Vec::new());
        }
        if self.items.is_empty() {
            return Err(ReplayError::EmptyBuffer);
        }
        Ok((0..count)
            .map(|_| &self.items[rng.random_range(0..self.items.len())])
            .collect())
    }

    pub fn stored_bytes(&self) -> usize {
        self.items.iter().map(ReplayItem::stored_bytes).sum()
    }

    /// One JSON object per line, payload base64-encoded.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for item in &self.items {
            let (kind, bytes) = match &item.payload {
                Payload::Raw(b) => ("raw", b),
                Payload::Latent(b) => ("latent", b),
            };
            let mut obj = serde_json::json!({
                "kind": kind,
                "payload": BASE64.encode(bytes),
                "label": item.label,
                "episode": item.episode,
                "source": item.source,
            });
            if let Some(l) = &item.logits {
                obj["logit_classes"] = serde_json::json!(l.classes);
                obj["logits"] = serde_json::json!(l.values);
            }
            out.push_str(&obj.to_string());
            out.push('\n');
        }
        out
    }

    pub fn dump(&self, path: &Path) -> Result<(), ReplayError> {
        let io = |source| ReplayError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut f = std::fs::File::create(path).map_err(io)?;
        f.write_all(self.to_jsonl().as_bytes()).map_err(io)
    }
}
