//! Model files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! bytes 0..8    magic "OSETMDL1"
//! bytes 8..16   u64 header length H
//! next H bytes  UTF-8 JSON header
//! rest          f64 payload, 8 bytes per value
//! ```
//!
//! The header is the JSON form of the model with every floating-point
//! number replaced by `{"$f64": i}`, where `i` indexes the payload. Integers
//! and strings stay in the header. Floats are numbered in depth-first order
//! of the header, object keys sorted. Loading restores the exact bits.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Number, Value};

use crate::error::{Error, Result};
use crate::postproc::PostProcessorModel;
use crate::training::{BackboneModel, Regime};

pub const MAGIC: &[u8; 8] = b"OSETMDL1";
const FLOAT_KEY: &str = "$f64";

fn extract_floats(v: &mut Value, out: &mut Vec<f64>) {
    match v {
        Value::Number(n) if n.is_f64() => {
            let f = n.as_f64().expect("checked is_f64");
            let mut m = Map::new();
            m.insert(FLOAT_KEY.into(), Value::from(out.len() as u64));
            out.push(f);
            *v = Value::Object(m);
        }
        Value::Array(items) => items.iter_mut().for_each(|x| extract_floats(x, out)),
        Value::Object(map) => map.values_mut().for_each(|x| extract_floats(x, out)),
        _ => {}
    }
}

fn restore_floats(v: &mut Value, payload: &[f64]) -> Result<()> {
    match v {
        Value::Object(map) if map.len() == 1 && map.contains_key(FLOAT_KEY) => {
            let idx = map[FLOAT_KEY]
                .as_u64()
                .ok_or_else(|| Error::Format("bad float reference".into()))?
                as usize;
            let f = *payload
                .get(idx)
                .ok_or_else(|| Error::Format(format!("float reference {idx} out of range")))?;
            *v = Value::Number(
                Number::from_f64(f).ok_or_else(|| Error::Format("non-finite payload value".into()))?,
            );
        }
        Value::Array(items) => {
            for x in items {
                restore_floats(x, payload)?;
            }
        }
        Value::Object(map) => {
            for x in map.values_mut() {
                restore_floats(x, payload)?;
            }
        }
        _ => {}
    }
    Ok(())
}

/// Encodes any serializable value. All floats must be finite.
pub fn encode<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut v = serde_json::to_value(value)?;
    let mut payload = Vec::new();
    extract_floats(&mut v, &mut payload);
    let header = serde_json::to_vec(&v)?;
    let mut out = Vec::with_capacity(16 + header.len() + 8 * payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for f in payload {
        out.extend_from_slice(&f.to_le_bytes());
    }
    Ok(out)
}

pub fn decode<T: DeserializeOwned>(bytes: &[u8]) -> Result<T> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Format("not a model file".into()));
    }
    let h = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = &bytes[16..];
    if body.len() < h || !(body.len() - h).is_multiple_of(8) {
        return Err(Error::Format("truncated model file".into()));
    }
    let mut v: Value = serde_json::from_slice(&body[..h])?;
    let payload: Vec<f64> = body[h..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    restore_floats(&mut v, &payload)?;
    Ok(serde_json::from_value(v)?)
}

/// A trained network together with how it was trained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub regime: Regime,
    pub known_classes: usize,
    pub model: BackboneModel,
}

/// A fitted post-processor for a `K`-class problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PostProcessorFile {
    pub known_classes: usize,
    pub model: PostProcessorModel,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum ModelFile {
    Backbone(Checkpoint),
    PostProcessor(PostProcessorFile),
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    std::fs::write(path, encode(&ModelFile::Backbone(ckpt.clone()))?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    match decode(&std::fs::read(path)?)? {
        ModelFile::Backbone(c) => Ok(c),
        ModelFile::PostProcessor(_) => Err(Error::Format(
            "expected a network checkpoint, found a post-processor".into(),
        )),
    }
}

pub fn save_postprocessor(path: impl AsRef<Path>, file: &PostProcessorFile) -> Result<()> {
    std::fs::write(path, encode(&ModelFile::PostProcessor(file.clone()))?)?;
    Ok(())
}

pub fn load_postprocessor(path: impl AsRef<Path>) -> Result<PostProcessorFile> {
    match decode(&std::fs::read(path)?)? {
        ModelFile::PostProcessor(p) => Ok(p),
        ModelFile::Backbone(_) => Err(Error::Format(
            "expected a post-processor, found a network checkpoint".into(),
        )),
    }
}
