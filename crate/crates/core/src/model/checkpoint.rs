//! `CLCKPT1` model checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      b"CLCKPT1"
//! u32        header length, then that many bytes of JSON:
//!            {"backbone", "seed", "head_classes", "frozen_prefix", "echo"}
//! u32        registry length, then per class: u32 byte length + UTF-8 name
//! u32        parameter count, then per parameter in fixed layer order:
//!            u32 name length + name, u32 rank, rank x u32 dims,
//!            product(dims) x f32
//! ```

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BackboneConfig, Model, ModelError};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 7] = b"CLCKPT1";

#[derive(Serialize, Deserialize)]
struct Header {
    backbone: BackboneConfig,
    seed: u64,
    head_classes: Vec<u32>,
    frozen_prefix: Option<usize>,
    echo: serde_json::Value,
}

/// A loaded checkpoint: the model, the class registry names, and whatever
/// configuration echo was stored with it.
#[derive(Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub registry: Vec<String>,
    pub echo: serde_json::Value,
}

fn bad(msg: impl Into<String>) -> ModelError {
    ModelError::Checkpoint(msg.into())
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len());
    out.extend_from_slice(s.as_bytes());
}

pub fn encode_checkpoint(model: &Model, registry: &[String], echo: &serde_json::Value) -> Vec<u8> {
    let header = Header {
        backbone: model.config.clone(),
        seed: model.seed,
        head_classes: model.head_classes.clone(),
        frozen_prefix: model.frozen_prefix,
        echo: echo.clone(),
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut out, header.len());
    out.extend_from_slice(&header);
    put_u32(&mut out, registry.len());
    for name in registry {
        put_str(&mut out, name);
    }
    put_u32(&mut out, model.params.len());
    for p in &model.params {
        put_str(&mut out, &p.name);
        put_u32(&mut out, p.tensor.shape().len());
        for &d in p.tensor.shape() {
            put_u32(&mut out, d);
        }
        for v in p.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save_checkpoint(
    path: &Path,
    model: &Model,
    registry: &[String],
    echo: &serde_json::Value,
) -> Result<(), ModelError> {
    let bytes = encode_checkpoint(model, registry, echo);
    std::fs::File::create(path)?.write_all(&bytes)?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| bad("truncated file"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize, ModelError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }

    fn string(&mut self) -> Result<String, ModelError> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| bad("name is not UTF-8"))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint, ModelError> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(CHECKPOINT_MAGIC.len()).ok() != Some(&CHECKPOINT_MAGIC[..]) {
        return Err(bad("bad magic"));
    }
    let hlen = c.u32()?;
    let header: Header =
        serde_json::from_slice(c.take(hlen)?).map_err(|e| bad(format!("header: {e}")))?;
    let nreg = c.u32()?;
    let registry = (0..nreg)
        .map(|_| c.string())
        .collect::<Result<Vec<_>, _>>()?;

    let mut model = Model::build(header.backbone, header.seed)?;
    let nparams = c.u32()?;
    if nparams != model.params.len() {
        return Err(bad(format!(
            "{} parameters stored, model has {}",
            nparams,
            model.params.len()
        )));
    }
    for p in model.params.iter_mut() {
        let name = c.string()?;
        if name != p.name {
            return Err(bad(format!("expected parameter {}, found {name}", p.name)));
        }
        let rank = c.u32()?;
        let shape = (0..rank).map(|_| c.u32()).collect::<Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let raw = c.take(n.checked_mul(4).ok_or_else(|| bad("size overflow"))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        p.tensor = Tensor::new(shape, data).map_err(|e| bad(e.to_string()))?;
    }
    if c.pos != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    model.head_classes = header.head_classes;
    if let Some(split) = header.frozen_prefix {
        model.freeze_prefix(split)?;
    }
    Ok(Checkpoint {
        model,
        registry,
        echo: header.echo,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, ModelError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_checkpoint(&bytes)
}
