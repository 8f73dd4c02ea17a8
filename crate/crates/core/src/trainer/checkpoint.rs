//! `RMCK` checkpoints: magic, version, JSON header, little-endian f64
//! parameters and moments, iteration, generator state and a SHA-256 trailer.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ModelConfig, ModelParams, TrainState};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RMCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    shapes: Vec<Vec<usize>>,
    #[serde(default)]
    meta: serde_json::Value,
}

pub struct Checkpoint {
    pub state: TrainState,
    pub model: ModelConfig,
    /// Free-form metadata stored alongside, e.g. provenance.
    pub meta: serde_json::Value,
}

pub fn encode_checkpoint(
    state: &TrainState,
    model: &ModelConfig,
    meta: &serde_json::Value,
) -> Result<Vec<u8>> {
    let header = Header {
        model: model.clone(),
        shapes: state
            .params
            .leaves()
            .iter()
            .map(|t| t.shape().to_vec())
            .collect(),
        meta: meta.clone(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for group in [
        state.params.leaves(),
        state.m.iter().collect(),
        state.v.iter().collect(),
    ] {
        for t in group {
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    out.extend_from_slice(&state.iter.to_le_bytes());
    out.extend_from_slice(&state.rng.get_seed());
    out.extend_from_slice(&state.rng.get_stream().to_le_bytes());
    out.extend_from_slice(&state.rng.get_word_pos().to_le_bytes());
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.at < n {
            return Err(Error::Format("checkpoint truncated".into()));
        }
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 4 + 4 + 8 + 32 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::Format("not an RMCK checkpoint".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Format("checkpoint checksum mismatch".into()));
    }
    let mut r = Reader { buf: body, at: 4 };
    let version = u32::from_le_bytes(r.array()?);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "checkpoint version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let len = u64::from_le_bytes(r.array()?) as usize;
    let header: Header = serde_json::from_slice(r.take(len)?)?;
    header.model.validate()?;
    let read_group = |r: &mut Reader<'_>| -> Result<Vec<Tensor<f64>>> {
        header
            .shapes
            .iter()
            .map(|s| {
                let n: usize = s.iter().product();
                let raw = r.take(n * 8)?;
                let data = raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect();
                Tensor::new(s.clone(), data)
            })
            .collect()
    };
    let params = read_group(&mut r)?;
    let m = read_group(&mut r)?;
    let v = read_group(&mut r)?;
    let iter = u64::from_le_bytes(r.array()?);
    let seed: [u8; 32] = r.array()?;
    let stream = u64::from_le_bytes(r.array()?);
    let word_pos = u128::from_le_bytes(r.array()?);
    if r.at != body.len() {
        return Err(Error::Format("trailing bytes in checkpoint".into()));
    }
    let params = ModelParams::from_leaves(header.model.layers, params)?;
    params.check_shapes(&header.model)?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);
    Ok(Checkpoint {
        state: TrainState {
            params,
            m,
            v,
            iter,
            rng,
        },
        model: header.model,
        meta: header.meta,
    })
}

pub fn save_checkpoint(
    path: &Path,
    state: &TrainState,
    model: &ModelConfig,
    meta: &serde_json::Value,
) -> Result<()> {
    fs::write(path, encode_checkpoint(state, model, meta)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?)
}

/// Loads and insists the stored model configuration equals `expected`.
pub fn load_checkpoint_for(path: &Path, expected: &ModelConfig) -> Result<Checkpoint> {
    let ck = load_checkpoint(path)?;
    if &ck.model != expected {
        return Err(Error::Format(format!(
            "checkpoint model config {:?} differs from requested {:?}",
            ck.model, expected
        )));
    }
    Ok(ck)
}
