//! Procedural stand-in data: each class has a mean color and an oriented
//! sinusoidal texture; samples add a random phase, a per-image color shift
//! and per-pixel noise.

use std::f32::consts::TAU;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{DataError, DatasetFile, Split, IMAGE_BYTES, SIDE};
use crate::rng::{stream, stream_rng};

pub const DEFAULT_DIFFICULTY: f32 = 0.5;

const COLOR_GAIN: f32 = 0.5;
const TEXTURE_GAIN: f32 = 0.35;
const SHIFT_STD: f32 = 0.15;
const PIXEL_STD: f32 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub classes: usize,
    pub per_class: usize,
    pub test_per_class: usize,
    /// Separation scale of the class signatures; larger is easier.
    pub difficulty: f32,
    pub seed: u64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.classes < 2 {
            return Err(DataError::Synth(format!(
                "need at least 2 classes, got {}",
                self.classes
            )));
        }
        if self.classes > u16::MAX as usize {
            return Err(DataError::Synth(format!("{} classes", self.classes)));
        }
        if self.per_class == 0 || self.test_per_class == 0 {
            return Err(DataError::Synth(
                "samples per class must be positive".into(),
            ));
        }
        if !(self.difficulty.is_finite() && self.difficulty > 0.0) {
            return Err(DataError::Synth(format!(
                "separation must be positive, got {}",
                self.difficulty
            )));
        }
        Ok(())
    }
}

/// `easy` = 1.0, `medium` = 0.5, `hard` = 0.25, or a positive number.
pub fn parse_difficulty(s: &str) -> Result<f32, DataError> {
    let v = match s {
        "easy" => 1.0,
        "medium" => 0.5,
        "hard" => 0.25,
        _ => s
            .parse::<f32>()
            .map_err(|_| DataError::Synth(format!("unknown difficulty {s:?}")))?,
    };
    if v.is_finite() && v > 0.0 {
        Ok(v)
    } else {
        Err(DataError::Synth(format!(
            "separation must be positive, got {s}"
        )))
    }
}

struct Signature {
    color: [f32; 3],
    tint: [f32; 3],
    freq: (f32, f32),
}

fn signature(seed: u64, class: usize) -> Signature {
    let mut rng = stream_rng(seed, stream::SYNTH, class as u64);
    let mut unit = || {
        let v: [f32; 3] = std::array::from_fn(|_| StandardNormal.sample(&mut rng));
        let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt().max(1e-6);
        v.map(|x| x / norm)
    };
    let color = unit();
    let tint = unit();
    let fx = rng.random_range(1..=4) as f32;
    let fy = rng.random_range(0..=4) as f32;
    Signature {
        color,
        tint,
        freq: (fx, fy),
    }
}

fn render(sig: &Signature, sep: f32, rng: &mut impl Rng, out: &mut [u8]) {
    let phase = rng.random_range(0.0..TAU);
    let shift: [f32; 3] = std::array::from_fn(|_| {
        let z: f32 = StandardNormal.sample(&mut *rng);
        SHIFT_STD * z
    });
    let (fx, fy) = sig.freq;
    for ch in 0..3 {
        let base = sep * COLOR_GAIN * sig.color[ch] + shift[ch];
        let amp = sep * TEXTURE_GAIN * sig.tint[ch];
        for y in 0..SIDE {
            for x in 0..SIDE {
                let wave = (TAU * (fx * x as f32 + fy * y as f32) / SIDE as f32 + phase).cos();
                let noise: f32 = StandardNormal.sample(&mut *rng);
                let v = (base + amp * wave + PIXEL_STD * noise).clamp(-1.0, 1.0);
                out[(ch * SIDE + y) * SIDE + x] = (127.5 + 127.5 * v).round() as u8;
            }
        }
    }
}

fn generate_split(spec: &SynthSpec, sigs: &[Signature], split: Split) -> DatasetFile {
    let (per_class, tag) = match split {
        Split::Train => (spec.per_class, 0u64),
        Split::Test => (spec.test_per_class, 1u64),
    };
    let n = spec.classes * per_class;
    let mut images = vec![0u8; n * IMAGE_BYTES];
    let mut labels = Vec::with_capacity(n);
    for (c, sig) in sigs.iter().enumerate() {
        let mut rng = stream_rng(spec.seed, stream::SYNTH, (1 << 32) | (c as u64) << 1 | tag);
        for j in 0..per_class {
            let i = c * per_class + j;
            render(
                sig,
                spec.difficulty,
                &mut rng,
                &mut images[i * IMAGE_BYTES..(i + 1) * IMAGE_BYTES],
            );
            labels.push(c as u16);
        }
    }
    let names = (0..spec.classes).map(|c| format!("class{c}")).collect();
    DatasetFile::new(split, names, images, labels).expect("synthetic dataset is consistent")
}

/// Generates the train and test splits; deterministic per spec.
pub fn synth_generate(spec: &SynthSpec) -> Result<(DatasetFile, DatasetFile), DataError> {
    spec.validate()?;
    let sigs: Vec<Signature> = (0..spec.classes).map(|c| signature(spec.seed, c)).collect();
    Ok((
        generate_split(spec, &sigs, Split::Train),
        generate_split(spec, &sigs, Split::Test),
    ))
}
