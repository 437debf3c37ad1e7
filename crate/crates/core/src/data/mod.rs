//! Dataset containers, synthetic data, and class-incremental scenarios.
//!
//! A `CLDS1` file holds one split of one dataset (all integers little-endian):
//!
//! ```text
//! magic        b"CLDS1"
//! u8           split tag, 0 = train, 1 = test
//! u32          image count n
//! u16          class count, then per class: u16 byte length + UTF-8 name
//! n x 3072     image bytes, each 3 x 32 x 32 channel-major
//! n x u16      local class labels
//! ```

mod scenario;
mod synth;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

pub use scenario::{
    build_scenario, iterate_batches, Batch, ClassRef, Episode, EpisodeConfig, Sample, Scenario,
    SourceDataset,
};
pub use synth::{parse_difficulty, synth_generate, SynthSpec, DEFAULT_DIFFICULTY};

pub const DATASET_MAGIC: &[u8; 5] = b"CLDS1";
pub const CHANNELS: usize = 3;
pub const SIDE: usize = 32;
pub const IMAGE_BYTES: usize = CHANNELS * SIDE * SIDE;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("bad magic: not a CLDS1 file")]
    BadMagic,
    #[error("truncated payload: header declares {needed} bytes, file has {actual}")]
    Truncated { needed: usize, actual: usize },
    #[error("label {label} of image {index} is out of range for {classes} classes")]
    LabelOutOfRange {
        index: usize,
        label: u16,
        classes: usize,
    },
    #[error("{0} trailing bytes after the declared payload")]
    TrailingBytes(usize),
    #[error("unknown split tag {0}")]
    BadSplit(u8),
    #[error("class name {0} is not valid UTF-8")]
    BadClassName(usize),
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("invalid synthetic spec: {0}")]
    Synth(String),
    #[error("scenario config: {0}")]
    Config(String),
    #[error("unknown dataset {stem}: {path} not found")]
    UnknownDataset { stem: String, path: PathBuf },
    #[error("class {class} of dataset {dataset} is used by episodes {first} and {second}")]
    OverlappingClasses {
        dataset: String,
        class: String,
        first: usize,
        second: usize,
    },
    #[error("episode {0} has no samples")]
    EmptyEpisode(usize),
    #[error("batch size must be at least 1")]
    ZeroBatch,
}

type Result<T> = std::result::Result<T, DataError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn tag(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Test => 1,
        }
    }

    pub fn suffix(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// One split of a dataset: `n` images of `3 x 32 x 32` bytes with local labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetFile {
    split: Split,
    class_names: Vec<String>,
    images: Vec<u8>,
    labels: Vec<u16>,
}

impl DatasetFile {
    pub fn new(
        split: Split,
        class_names: Vec<String>,
        images: Vec<u8>,
        labels: Vec<u16>,
    ) -> Result<Self> {
        if class_names.len() > u16::MAX as usize {
            return Err(DataError::Invalid(format!("{} classes", class_names.len())));
        }
        if images.len() != labels.len() * IMAGE_BYTES {
            return Err(DataError::Invalid(format!(
                "{} image bytes for {} labels",
                images.len(),
                labels.len()
            )));
        }
        if let Some((index, &label)) = labels
            .iter()
            .enumerate()
            .find(|(_, &l)| l as usize >= class_names.len())
        {
            return Err(DataError::LabelOutOfRange {
                index,
                label,
                classes: class_names.len(),
            });
        }
        Ok(DatasetFile {
            split,
            class_names,
            images,
            labels,
        })
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn image(&self, i: usize) -> &[u8] {
        &self.images[i * IMAGE_BYTES..(i + 1) * IMAGE_BYTES]
    }

    /// Image count per local class.
    pub fn histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.class_names.len()];
        for &l in &self.labels {
            h[l as usize] += 1;
        }
        h
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.images.len() + 2 * self.labels.len());
        out.extend_from_slice(DATASET_MAGIC);
        out.push(self.split.tag());
        out.extend_from_slice(&(self.labels.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.class_names.len() as u16).to_le_bytes());
        for name in &self.class_names {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
        }
        out.extend_from_slice(&self.images);
        for l in &self.labels {
            out.extend_from_slice(&l.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < DATASET_MAGIC.len() || &bytes[..DATASET_MAGIC.len()] != DATASET_MAGIC {
            return Err(DataError::BadMagic);
        }
        let mut pos = DATASET_MAGIC.len();
        let mut take = |n: usize, needed: usize| -> Result<&[u8]> {
            if bytes.len() < pos + n {
                return Err(DataError::Truncated {
                    needed: needed.max(pos + n),
                    actual: bytes.len(),
                });
            }
            let s = &bytes[pos..pos + n];
            pos += n;
            Ok(s)
        };
        let split = match take(1, 0)?[0] {
            0 => Split::Train,
            1 => Split::Test,
            t => return Err(DataError::BadSplit(t)),
        };
        let n = u32::from_le_bytes(take(4, 0)?.try_into().expect("4 bytes")) as usize;
        let k = u16::from_le_bytes(take(2, 0)?.try_into().expect("2 bytes")) as usize;
        let mut class_names = Vec::with_capacity(k);
        for c in 0..k {
            let len = u16::from_le_bytes(take(2, 0)?.try_into().expect("2 bytes")) as usize;
            let raw = take(len, 0)?;
            let name = std::str::from_utf8(raw).map_err(|_| DataError::BadClassName(c))?;
            class_names.push(name.to_string());
        }
        let needed = header_len(&class_names) + n * (IMAGE_BYTES + 2);
        let images = take(n * IMAGE_BYTES, needed)?.to_vec();
        let labels: Vec<u16> = take(n * 2, needed)?
            .chunks_exact(2)
            .map(|b| u16::from_le_bytes([b[0], b[1]]))
            .collect();
        if bytes.len() > needed {
            return Err(DataError::TrailingBytes(bytes.len() - needed));
        }
        DatasetFile::new(split, class_names, images, labels)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

fn header_len(class_names: &[String]) -> usize {
    DATASET_MAGIC.len() + 1 + 4 + 2 + class_names.iter().map(|n| 2 + n.len()).sum::<usize>()
}

pub fn load_dataset(path: &Path) -> Result<DatasetFile> {
    let bytes = std::fs::read(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    DatasetFile::decode(&bytes)
}

/// `{stem}_{train|test}.clds`.
pub fn split_path(stem: &Path, split: Split) -> PathBuf {
    let mut name = stem.file_name().unwrap_or_default().to_os_string();
    name.push(format!("_{}.clds", split.suffix()));
    stem.with_file_name(name)
}

/// Maps a pixel byte to `(v / 255 - 0.5) / 0.5`.
pub fn normalize_pixel(v: u8) -> f32 {
    (v as f32 / 255.0 - 0.5) / 0.5
}

/// Stacks raw images into a normalized `N x 3 x 32 x 32` tensor.
pub fn images_to_tensor<'a>(images: impl ExactSizeIterator<Item = &'a [u8]>) -> Tensor {
    let n = images.len();
    let mut data = Vec::with_capacity(n * IMAGE_BYTES);
    for img in images {
        data.extend(img.iter().map(|&v| normalize_pixel(v)));
    }
    Tensor::new(vec![n, CHANNELS, SIDE, SIDE], data).expect("image tensor length")
}
