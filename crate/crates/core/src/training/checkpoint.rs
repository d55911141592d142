//! "S2AC" checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "S2AC" | u32 version | u32 n | n bytes config JSON | u32 n | n bytes state JSON
//!        | u32 tensor count | per tensor: u32 n | n bytes UTF-8 name | 4 x u32 shape | f32 data
//! ```
//!
//! Tensor names are `generator.<param>`, `critic.<param>`, and
//! `adam.{generator,critic}.{m,v}.<param>`.

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{BestRecord, TrainConfig, TrainState};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::raster::ByteReader;

pub const MAGIC: &[u8; 4] = b"S2AC";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct StateBlock {
    pretrain_epochs_done: usize,
    step: u64,
    critic_updates: u64,
    generator_updates: u64,
    adam_generator_steps: u64,
    adam_critic_steps: u64,
    rng_seed: [u8; 32],
    rng_stream: u64,
    /// Decimal, since JSON numbers cannot carry a u128.
    rng_word_pos: String,
    best: Option<BestRecord>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u32::try_from(v).expect("field fits in u32").to_le_bytes());
}

fn put_block(out: &mut Vec<u8>, bytes: &[u8]) {
    put_u32(out, bytes.len());
    out.extend_from_slice(bytes);
}

fn tensors(state: &TrainState) -> Vec<(String, &Tensor<f32>)> {
    let mut out = Vec::new();
    for (prefix, params, adam) in [
        ("generator", &state.generator.params, &state.opt_g),
        ("critic", &state.critic.params, &state.opt_d),
    ] {
        for (name, t) in params.iter() {
            out.push((format!("{prefix}.{name}"), t));
        }
        for (i, name) in params.names().iter().enumerate() {
            out.push((format!("adam.{prefix}.m.{name}"), &adam.m[i]));
            out.push((format!("adam.{prefix}.v.{name}"), &adam.v[i]));
        }
    }
    out
}

/// Serializes a training state. Refuses states holding NaN or Inf.
pub fn to_bytes(config: &TrainConfig, state: &TrainState) -> Result<Vec<u8>> {
    let table = tensors(state);
    if table.iter().any(|(_, t)| !t.is_finite()) {
        return Err(Error::NonFinite("checkpoint tensors"));
    }
    if state.best.is_some_and(|b| !b.val_sre.is_finite()) {
        return Err(Error::NonFinite("best validation record"));
    }
    let block = StateBlock {
        pretrain_epochs_done: state.pretrain_epochs_done,
        step: state.step,
        critic_updates: state.critic_updates,
        generator_updates: state.generator_updates,
        adam_generator_steps: state.opt_g.steps,
        adam_critic_steps: state.opt_d.steps,
        rng_seed: state.rng.get_seed(),
        rng_stream: state.rng.get_stream(),
        rng_word_pos: state.rng.get_word_pos().to_string(),
        best: state.best,
    };
    let mut out = MAGIC.to_vec();
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_block(&mut out, serde_json::to_string(config).expect("config serializes").as_bytes());
    put_block(&mut out, serde_json::to_string(&block).expect("state serializes").as_bytes());
    put_u32(&mut out, table.len());
    for (name, t) in table {
        put_block(&mut out, name.as_bytes());
        for d in t.shape() {
            put_u32(&mut out, d);
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn json_block<T: for<'de> Deserialize<'de>>(r: &mut ByteReader<'_>, what: &'static str) -> Result<T> {
    let len = r.u32()? as usize;
    serde_json::from_slice(r.take(len)?).map_err(|e| Error::Malformed {
        what,
        detail: e.to_string(),
    })
}

/// Parses a checkpoint; the networks are rebuilt from the embedded config.
pub fn from_bytes(bytes: &[u8]) -> Result<(TrainConfig, TrainState)> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::MagicMismatch { expected: "S2AC" });
    }
    let mut r = ByteReader::new(bytes, 4, "checkpoint");
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let config: TrainConfig = json_block(&mut r, "checkpoint config")?;
    let block: StateBlock = json_block(&mut r, "checkpoint state")?;
    let count = r.u32()? as usize;
    let mut table = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|e| Error::Malformed {
            what: "checkpoint tensor name",
            detail: e.to_string(),
        })?;
        let mut shape = [0usize; 4];
        for d in &mut shape {
            *d = r.u32()? as usize;
        }
        let n: usize = shape.iter().product();
        let data: Vec<f32> = r
            .take(n * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("checkpoint tensor"));
        }
        table.push((name, Tensor::from_vec(shape, data)?));
    }
    if !r.is_empty() {
        return Err(Error::Malformed {
            what: "checkpoint",
            detail: "trailing bytes".into(),
        });
    }

    let mut state = TrainState::new(&config)?;
    let pick = |prefix: &str| -> Vec<(&str, &Tensor<f32>)> {
        table
            .iter()
            .filter_map(|(n, t)| n.strip_prefix(prefix).map(|rest| (rest, t)))
            .collect()
    };
    state.generator.params.load(pick("generator."))?;
    state.critic.params.load(pick("critic."))?;
    for (prefix, params, adam) in [
        ("generator", &state.generator.params, &mut state.opt_g),
        ("critic", &state.critic.params, &mut state.opt_d),
    ] {
        for (i, name) in params.names().iter().enumerate() {
            for (kind, slot) in [("m", &mut adam.m[i]), ("v", &mut adam.v[i])] {
                let key = format!("adam.{prefix}.{kind}.{name}");
                let t = table
                    .iter()
                    .find(|(n, _)| *n == key)
                    .map(|(_, t)| t)
                    .ok_or_else(|| Error::VersionMismatch(format!("missing tensor {key}")))?;
                if t.shape() != slot.shape() {
                    return Err(Error::VersionMismatch(format!("tensor {key} has shape {:?}", t.shape())));
                }
                *slot = t.clone();
            }
        }
    }
    state.opt_g.steps = block.adam_generator_steps;
    state.opt_d.steps = block.adam_critic_steps;
    state.pretrain_epochs_done = block.pretrain_epochs_done;
    state.step = block.step;
    state.critic_updates = block.critic_updates;
    state.generator_updates = block.generator_updates;
    state.best = block.best;
    let word_pos = block.rng_word_pos.parse::<u128>().map_err(|e| Error::Malformed {
        what: "checkpoint rng",
        detail: e.to_string(),
    })?;
    let mut rng = <ChaCha8Rng as rand::SeedableRng>::from_seed(block.rng_seed);
    rng.set_stream(block.rng_stream);
    rng.set_word_pos(word_pos);
    state.rng = rng;
    Ok((config, state))
}

/// Writes atomically: a sibling temporary file is renamed into place.
pub fn save_checkpoint(config: &TrainConfig, state: &TrainState, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = to_bytes(config, state)?;
    let tmp = path.with_extension("s2ac.partial");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(TrainConfig, TrainState)> {
    let path = path.as_ref();
    from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Loads a checkpoint whose architecture must match `expected`.
pub fn load_checkpoint_for(path: impl AsRef<Path>, expected: &TrainConfig) -> Result<TrainState> {
    let (config, state) = load_checkpoint(path)?;
    if config.net != expected.net || config.conditioning != expected.conditioning {
        return Err(Error::VersionMismatch(format!(
            "checkpoint network {:?} / {} does not match configured {:?} / {}",
            config.net, config.conditioning, expected.net, expected.conditioning
        )));
    }
    Ok(state)
}
