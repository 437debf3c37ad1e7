use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{images_to_tensor, load_dataset, split_path, DataError, DatasetFile, Split};
use crate::tensor::Tensor;

type Result<T> = std::result::Result<T, DataError>;

pub const DEFAULT_EPOCHS: usize = 10;

fn default_epochs() -> usize {
    DEFAULT_EPOCHS
}

/// A class selected by local index or by name.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ClassRef {
    Index(u16),
    Name(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeConfig {
    /// Path stem, resolved against the config directory; the splits live in
    /// `{stem}_train.clds` and `{stem}_test.clds`.
    pub dataset: String,
    /// `None` selects every class of the dataset.
    #[serde(default)]
    pub classes: Option<Vec<ClassRef>>,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
}

#[derive(Clone, Debug)]
pub struct SourceDataset {
    pub stem: String,
    pub train: DatasetFile,
    pub test: DatasetFile,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Episode {
    /// Zero-based position in the stream.
    pub index: usize,
    pub dataset: usize,
    pub local_classes: Vec<u16>,
    /// Global id of each entry of `local_classes`.
    pub global_ids: Vec<u32>,
    /// Global ids first introduced by this episode.
    pub new_classes: Vec<u32>,
    pub epochs: usize,
}

impl Episode {
    pub fn global_of(&self, local: u16) -> Option<u32> {
        self.local_classes
            .iter()
            .position(|&l| l == local)
            .map(|p| self.global_ids[p])
    }
}

/// Reference to one image of a scenario dataset, with its global label.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Sample {
    pub dataset: u32,
    pub split: Split,
    pub index: u32,
    pub label: u32,
}

#[derive(Debug)]
pub struct Batch {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub samples: Vec<Sample>,
}

#[derive(Clone, Debug)]
pub struct Scenario {
    pub name: String,
    pub seed: u64,
    pub datasets: Vec<SourceDataset>,
    pub episodes: Vec<Episode>,
    /// Display name of each global class id.
    pub registry: Vec<String>,
}

fn resolve_class(ds: &SourceDataset, r: &ClassRef) -> Result<u16> {
    let names = ds.train.class_names();
    match r {
        ClassRef::Index(i) if (*i as usize) < names.len() => Ok(*i),
        ClassRef::Index(i) => Err(DataError::Config(format!(
            "class index {i} out of range for {} ({} classes)",
            ds.stem,
            names.len()
        ))),
        ClassRef::Name(n) => names
            .iter()
            .position(|c| c == n)
            .map(|p| p as u16)
            .ok_or_else(|| DataError::Config(format!("dataset {} has no class {n:?}", ds.stem))),
    }
}

impl Scenario {
    /// Builds the episode stream over already-loaded datasets. Each episode's
    /// `dataset` must name the stem of one of `datasets`.
    pub fn from_datasets(
        name: &str,
        seed: u64,
        datasets: Vec<SourceDataset>,
        episodes: &[EpisodeConfig],
        shared_classes: &[Vec<String>],
    ) -> Result<Scenario> {
        if episodes.is_empty() {
            return Err(DataError::Config("scenario has no episodes".into()));
        }
        for ds in &datasets {
            if ds.train.class_names() != ds.test.class_names() {
                return Err(DataError::Invalid(format!(
                    "{}: train and test class tables differ",
                    ds.stem
                )));
            }
        }
        let by_stem: HashMap<&str, usize> = datasets
            .iter()
            .enumerate()
            .map(|(i, d)| (d.stem.as_str(), i))
            .collect();

        let mut group_of: HashMap<(usize, u16), usize> = HashMap::new();
        for (g, group) in shared_classes.iter().enumerate() {
            for r in group {
                let (stem, class) = r.rsplit_once('#').ok_or_else(|| {
                    DataError::Config(format!("shared class {r:?} is not of the form stem#class"))
                })?;
                let &d = by_stem.get(stem).ok_or_else(|| {
                    DataError::Config(format!("shared class {r:?} names an unused dataset"))
                })?;
                let local = resolve_class(&datasets[d], &ClassRef::Name(class.to_string()))?;
                if group_of.insert((d, local), g).is_some() {
                    return Err(DataError::Config(format!(
                        "{r:?} appears in two sharing groups"
                    )));
                }
            }
        }

        let mut registry = Vec::new();
        let mut group_id: HashMap<usize, u32> = HashMap::new();
        let mut owner: BTreeMap<(usize, u16), usize> = BTreeMap::new();
        let mut out = Vec::with_capacity(episodes.len());
        for (e, cfg) in episodes.iter().enumerate() {
            let &d = by_stem
                .get(cfg.dataset.as_str())
                .ok_or_else(|| DataError::Config(format!("dataset {} not loaded", cfg.dataset)))?;
            let ds = &datasets[d];
            let local_classes: Vec<u16> = match &cfg.classes {
                None => (0..ds.train.class_names().len() as u16).collect(),
                Some(list) => list
                    .iter()
                    .map(|r| resolve_class(ds, r))
                    .collect::<Result<_>>()?,
            };
            if local_classes.is_empty() {
                return Err(DataError::Config(format!(
                    "episode {} selects no classes",
                    e + 1
                )));
            }
            let mut global_ids = Vec::with_capacity(local_classes.len());
            let mut new_classes = Vec::new();
            for &local in &local_classes {
                let class_name = &ds.train.class_names()[local as usize];
                if let Some(&first) = owner.get(&(d, local)) {
                    return Err(DataError::OverlappingClasses {
                        dataset: ds.stem.clone(),
                        class: class_name.clone(),
                        first: first + 1,
                        second: e + 1,
                    });
                }
                owner.insert((d, local), e);
                let group = group_of.get(&(d, local)).copied();
                let id = match group.and_then(|g| group_id.get(&g).copied()) {
                    Some(id) => id,
                    None => {
                        let id = registry.len() as u32;
                        registry.push(format!("{}#{}", ds.stem, class_name));
                        new_classes.push(id);
                        if let Some(g) = group {
                            group_id.insert(g, id);
                        }
                        id
                    }
                };
                if global_ids.contains(&id) {
                    return Err(DataError::Config(format!(
                        "episode {} maps two classes to the shared id of {}",
                        e + 1,
                        registry[id as usize]
                    )));
                }
                global_ids.push(id);
            }
            out.push(Episode {
                index: e,
                dataset: d,
                local_classes,
                global_ids,
                new_classes,
                epochs: cfg.epochs,
            });
        }
        Ok(Scenario {
            name: name.to_string(),
            seed,
            datasets,
            episodes: out,
            registry,
        })
    }

    pub fn class_count(&self) -> usize {
        self.registry.len()
    }

    fn file(&self, dataset: usize, split: Split) -> &DatasetFile {
        let ds = &self.datasets[dataset];
        match split {
            Split::Train => &ds.train,
            Split::Test => &ds.test,
        }
    }

    /// The episode's samples of one split, in file order.
    pub fn samples(&self, episode: usize, split: Split) -> Vec<Sample> {
        let ep = &self.episodes[episode];
        let file = self.file(ep.dataset, split);
        let mut lut = vec![None; file.class_names().len()];
        for (&l, &g) in ep.local_classes.iter().zip(&ep.global_ids) {
            lut[l as usize] = Some(g);
        }
        file.labels()
            .iter()
            .enumerate()
            .filter_map(|(i, &l)| {
                lut[l as usize].map(|label| Sample {
                    dataset: ep.dataset as u32,
                    split,
                    index: i as u32,
                    label,
                })
            })
            .collect()
    }

    pub fn image(&self, s: &Sample) -> &[u8] {
        self.file(s.dataset as usize, s.split)
            .image(s.index as usize)
    }

    pub fn batch(&self, samples: &[Sample]) -> Batch {
        Batch {
            images: images_to_tensor(samples.iter().map(|s| self.image(s))),
            labels: samples.iter().map(|s| s.label as usize).collect(),
            samples: samples.to_vec(),
        }
    }
}

/// Loads every dataset referenced by `episodes` (paths relative to
/// `base_dir`) and builds the scenario.
pub fn build_scenario(
    name: &str,
    seed: u64,
    episodes: &[EpisodeConfig],
    shared_classes: &[Vec<String>],
    base_dir: &Path,
) -> Result<Scenario> {
    let mut datasets: Vec<SourceDataset> = Vec::new();
    for ep in episodes {
        if datasets.iter().any(|d| d.stem == ep.dataset) {
            continue;
        }
        let stem = base_dir.join(&ep.dataset);
        let load = |split| {
            let path = split_path(&stem, split);
            if !path.is_file() {
                return Err(DataError::UnknownDataset {
                    stem: ep.dataset.clone(),
                    path,
                });
            }
            let file = load_dataset(&path)?;
            if file.split() != split {
                return Err(DataError::Invalid(format!(
                    "{} is tagged {:?}",
                    path.display(),
                    file.split()
                )));
            }
            Ok(file)
        };
        datasets.push(SourceDataset {
            stem: ep.dataset.clone(),
            train: load(Split::Train)?,
            test: load(Split::Test)?,
        });
    }
    Scenario::from_datasets(name, seed, datasets, episodes, shared_classes)
}

/// Splits `samples` into batches of `batch` (the last may be partial),
/// optionally shuffled first.
pub fn iterate_batches<R: Rng>(
    samples: &[Sample],
    batch: usize,
    episode: usize,
    shuffle: Option<&mut R>,
) -> Result<Vec<Vec<Sample>>> {
    if batch == 0 {
        return Err(DataError::ZeroBatch);
    }
    if samples.is_empty() {
        return Err(DataError::EmptyEpisode(episode + 1));
    }
    let mut order = samples.to_vec();
    if let Some(rng) = shuffle {
        order.shuffle(rng);
    }
    Ok(order.chunks(batch).map(<[Sample]>::to_vec).collect())
}
