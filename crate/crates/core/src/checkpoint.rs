//! Versioned checkpoint container.
//!
//! Layout: the magic bytes, then length-prefixed sections (`u64` little
//! endian). The first section is a JSON manifest; every further section is one
//! raw little-endian tensor block listed in the manifest, with a CRC-32 of its
//! bytes recorded there.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::data::ClassInfo;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"UNIPANCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Exact position of a ChaCha8 stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    /// `u128` word position, decimal.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let pos: u128 = self.word_pos.parse().map_err(|_| {
            Error::CheckpointCorrupt(format!("bad rng word position `{}`", self.word_pos))
        })?;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    Param,
    Momentum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: BlockKind,
    pub crc32: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub version: u32,
    pub dtype: String,
    pub model: ModelConfig,
    pub classes: Vec<ClassInfo>,
    pub num_things: usize,
    pub num_stuff: usize,
    pub iteration: usize,
    pub rng: RngState,
    pub blocks: Vec<BlockInfo>,
}

/// Parameters plus optimiser and sampling state.
#[derive(Debug, Clone)]
pub struct Checkpoint<T: Scalar> {
    pub model: Model<T>,
    /// One buffer per parameter, in parameter order.
    pub momentum: Vec<Tensor<T>>,
    pub iteration: usize,
    pub rng: ChaCha8Rng,
}

fn push_section(out: &mut Vec<u8>, bytes: &[u8]) {
    out.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(bytes);
}

fn tensor_bytes<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(t.numel() * T::BYTES);
    for &v in t.data() {
        v.write_le(&mut out);
    }
    out
}

pub fn encode<T: Scalar>(ck: &Checkpoint<T>) -> Result<Vec<u8>> {
    let params = &ck.model.params;
    if ck.momentum.len() != params.len() {
        return Err(Error::Shape(format!(
            "{} momentum buffers for {} parameters",
            ck.momentum.len(),
            params.len()
        )));
    }
    let mut blocks = Vec::new();
    let mut payload = Vec::new();
    let mut add = |name: String, t: &Tensor<T>, kind: BlockKind| {
        let bytes = tensor_bytes(t);
        blocks.push(BlockInfo {
            name,
            shape: t.shape().to_vec(),
            kind,
            crc32: crc32fast::hash(&bytes),
        });
        payload.push(bytes);
    };
    for (name, t) in params.iter() {
        add(name.to_string(), t, BlockKind::Param);
    }
    for ((name, _), m) in params.iter().zip(&ck.momentum) {
        add(name.to_string(), m, BlockKind::Momentum);
    }
    let manifest = CheckpointManifest {
        version: CHECKPOINT_VERSION,
        dtype: T::DTYPE.to_string(),
        model: ck.model.cfg.clone(),
        classes: ck.model.classes.clone(),
        num_things: ck.model.cfg.num_things,
        num_stuff: ck.model.cfg.num_stuff,
        iteration: ck.iteration,
        rng: RngState::capture(&ck.rng),
        blocks,
    };
    let mut out = MAGIC.to_vec();
    push_section(&mut out, &serde_json::to_vec(&manifest)?);
    for p in payload {
        push_section(&mut out, &p);
    }
    Ok(out)
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CheckpointCorrupt(msg.into())
}

fn sections(bytes: &[u8]) -> Result<Vec<&[u8]>> {
    let mut rest = bytes
        .strip_prefix(MAGIC.as_slice())
        .ok_or_else(|| corrupt("missing magic bytes"))?;
    let mut out = Vec::new();
    while !rest.is_empty() {
        if rest.len() < 8 {
            return Err(corrupt("truncated section header"));
        }
        let len = u64::from_le_bytes(rest[..8].try_into().expect("8 bytes")) as usize;
        rest = &rest[8..];
        if rest.len() < len {
            return Err(corrupt(format!(
                "section {} claims {len} bytes, {} remain",
                out.len(),
                rest.len()
            )));
        }
        out.push(&rest[..len]);
        rest = &rest[len..];
    }
    Ok(out)
}

/// Reads only the manifest.
pub fn read_manifest(bytes: &[u8]) -> Result<CheckpointManifest> {
    let secs = sections(bytes)?;
    let first = secs.first().ok_or_else(|| corrupt("no manifest"))?;
    let m: CheckpointManifest =
        serde_json::from_slice(first).map_err(|e| corrupt(format!("manifest: {e}")))?;
    if m.version != CHECKPOINT_VERSION {
        return Err(corrupt(format!("unsupported version {}", m.version)));
    }
    Ok(m)
}

fn decode_block<T: Scalar>(bytes: &[u8], info: &BlockInfo, dtype: &str) -> Result<Tensor<T>> {
    if crc32fast::hash(bytes) != info.crc32 {
        return Err(corrupt(format!(
            "checksum mismatch in block `{}`",
            info.name
        )));
    }
    let n: usize = info.shape.iter().product();
    let width = match dtype {
        "f32" => 4,
        "f64" => 8,
        other => return Err(corrupt(format!("unknown dtype `{other}`"))),
    };
    if bytes.len() != n * width {
        return Err(corrupt(format!(
            "block `{}` has {} bytes, shape needs {}",
            info.name,
            bytes.len(),
            n * width
        )));
    }
    let data: Vec<T> = bytes
        .chunks_exact(width)
        .map(|c| match width {
            4 => T::lit(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64),
            _ => T::lit(f64::from_le_bytes(c.try_into().expect("8 bytes"))),
        })
        .collect();
    Tensor::new(info.shape.clone(), data)
}

/// Decodes a checkpoint, converting stored values to `T` if needed. The
/// manifest's architecture is rebuilt and every block must match it.
pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let m = read_manifest(bytes)?;
    let secs = sections(bytes)?;
    if secs.len() != m.blocks.len() + 1 {
        return Err(corrupt(format!(
            "{} blocks listed, {} present",
            m.blocks.len(),
            secs.len() - 1
        )));
    }
    let mut model = Model::<T>::new(m.model.clone(), m.classes.clone(), 0)
        .map_err(|e| corrupt(format!("manifest model: {e}")))?;
    let n = model.params.len();
    if m.blocks.len() != 2 * n {
        return Err(corrupt(format!(
            "{} blocks for a model with {n} parameters",
            m.blocks.len()
        )));
    }
    let mut momentum = Vec::with_capacity(n);
    for (k, (info, bytes)) in m.blocks.iter().zip(&secs[1..]).enumerate() {
        let t = decode_block::<T>(bytes, info, &m.dtype)?;
        let id = model.params.ids().nth(k % n).expect("index below count");
        let (want_name, want_shape) = (
            model.params.name(id).to_string(),
            model.params.get(id).shape().to_vec(),
        );
        let want_kind = if k < n {
            BlockKind::Param
        } else {
            BlockKind::Momentum
        };
        if info.name != want_name || info.kind != want_kind {
            return Err(corrupt(format!(
                "block {k} is `{}`, expected `{want_name}`",
                info.name
            )));
        }
        if t.shape() != want_shape.as_slice() {
            return Err(Error::Shape(format!(
                "block `{}` has shape {:?}, model needs {want_shape:?}",
                info.name,
                t.shape()
            )));
        }
        if k < n {
            *model.params.get_mut(id) = t;
        } else {
            momentum.push(t);
        }
    }
    Ok(Checkpoint {
        model,
        momentum,
        iteration: m.iteration,
        rng: m.rng.restore()?,
    })
}

pub fn save<T: Scalar>(path: &Path, ck: &Checkpoint<T>) -> Result<()> {
    let bytes = encode(ck)?;
    // write to a sibling and rename so a crash never leaves a torn file
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
