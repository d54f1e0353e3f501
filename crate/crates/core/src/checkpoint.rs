//! Binary checkpoint container.
//!
//! Layout: the 8-byte magic `CLFORGE1`, a little-endian `u64` index length, the JSON
//! index, then every tensor buffer as raw little-endian `f64`. The index records each
//! tensor's name (its JSON path inside the payload), shape and byte offset, a SHA-256 of
//! the data section, and a skeleton of the payload with tensors replaced by references.
//!
//! Any serializable value works as a payload; every `{shape, data}` object inside it is
//! moved to the binary section, so floats in tensors never pass through decimal text.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"CLFORGE1";
pub const FORMAT_VERSION: u32 = 1;

const TENSOR_REF: &str = "$tensor";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Index {
    version: u32,
    kind: String,
    meta: Value,
    tensors: Vec<TensorEntry>,
    sha256: String,
    payload: Value,
}

/// Tensor extraction state while walking the payload.
struct Extract {
    entries: Vec<TensorEntry>,
    data: Vec<u8>,
}

fn as_tensor(map: &Map<String, Value>) -> Option<(Vec<usize>, &Vec<Value>)> {
    if map.len() != 2 {
        return None;
    }
    let shape = map.get("shape")?.as_array()?;
    let data = map.get("data")?.as_array()?;
    let shape: Option<Vec<usize>> = shape.iter().map(|d| d.as_u64().map(|d| d as usize)).collect();
    let shape = shape?;
    if shape.iter().product::<usize>() != data.len() || !data.iter().all(Value::is_f64) {
        return None;
    }
    Some((shape, data))
}

fn extract(value: Value, path: &str, out: &mut Extract) -> Value {
    match value {
        Value::Object(map) => {
            if let Some((shape, data)) = as_tensor(&map) {
                let idx = out.entries.len();
                out.entries.push(TensorEntry {
                    name: path.to_string(),
                    shape,
                    offset: out.data.len() as u64,
                });
                for v in data {
                    // as_tensor checked every element is f64
                    out.data.extend_from_slice(&v.as_f64().unwrap_or_default().to_le_bytes());
                }
                let mut r = Map::new();
                r.insert(TENSOR_REF.into(), Value::from(idx));
                return Value::Object(r);
            }
            let mapped = map
                .into_iter()
                .map(|(k, v)| {
                    let child = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                    let v = extract(v, &child, out);
                    (k, v)
                })
                .collect();
            Value::Object(mapped)
        }
        Value::Array(items) => Value::Array(
            items
                .into_iter()
                .enumerate()
                .map(|(i, v)| extract(v, &format!("{path}[{i}]"), out))
                .collect(),
        ),
        other => other,
    }
}

fn restore(value: Value, tensors: &[TensorEntry], data: &[u8]) -> Result<Value> {
    match value {
        Value::Object(map) => {
            if map.len() == 1 {
                if let Some(idx) = map.get(TENSOR_REF) {
                    let idx = idx.as_u64().ok_or_else(|| Error::Format("tensor reference is not an integer".into()))? as usize;
                    return tensor_value(
                        tensors
                            .get(idx)
                            .ok_or_else(|| Error::Format(format!("tensor reference {idx} out of range")))?,
                        data,
                    );
                }
            }
            let mut out = Map::new();
            for (k, v) in map {
                out.insert(k, restore(v, tensors, data)?);
            }
            Ok(Value::Object(out))
        }
        Value::Array(items) => Ok(Value::Array(items.into_iter().map(|v| restore(v, tensors, data)).collect::<Result<_>>()?)),
        other => Ok(other),
    }
}

fn tensor_value(entry: &TensorEntry, data: &[u8]) -> Result<Value> {
    let n: usize = entry.shape.iter().product();
    let start = entry.offset as usize;
    let end = n
        .checked_mul(8)
        .and_then(|b| start.checked_add(b))
        .filter(|&e| e <= data.len())
        .ok_or_else(|| Error::Format(format!("tensor `{}` exceeds the data section", entry.name)))?;
    let values: Vec<Value> = data[start..end]
        .chunks_exact(8)
        .map(|c| {
            let v = f64::from_le_bytes(c.try_into().expect("chunk of 8"));
            serde_json::Number::from_f64(v)
                .map(Value::Number)
                .ok_or_else(|| Error::Format(format!("tensor `{}` holds a non-finite value", entry.name)))
        })
        .collect::<Result<_>>()?;
    let mut map = Map::new();
    map.insert("shape".into(), serde_json::to_value(&entry.shape)?);
    map.insert("data".into(), Value::Array(values));
    Ok(Value::Object(map))
}

/// Encodes `payload` into container bytes.
pub fn to_bytes<T: Serialize>(kind: &str, meta: Value, payload: &T) -> Result<Vec<u8>> {
    let mut ex = Extract {
        entries: Vec::new(),
        data: Vec::new(),
    };
    let skeleton = extract(serde_json::to_value(payload)?, "", &mut ex);
    let index = Index {
        version: FORMAT_VERSION,
        kind: kind.to_string(),
        meta,
        tensors: ex.entries,
        sha256: hex::encode(Sha256::digest(&ex.data)),
        payload: skeleton,
    };
    let index = serde_json::to_vec(&index)?;
    let mut out = Vec::with_capacity(16 + index.len() + ex.data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(index.len() as u64).to_le_bytes());
    out.extend_from_slice(&index);
    out.extend_from_slice(&ex.data);
    Ok(out)
}

fn read_index(bytes: &[u8]) -> Result<(Index, usize)> {
    if bytes.len() < 16 {
        return Err(Error::Format(format!("{} bytes is too short for a header", bytes.len())));
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let end = usize::try_from(len)
        .ok()
        .and_then(|l| l.checked_add(16))
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Format("index length exceeds file size (truncated?)".into()))?;
    let index: Index = serde_json::from_slice(&bytes[16..end]).map_err(|e| Error::Format(format!("index: {e}")))?;
    if index.version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported version {}", index.version)));
    }
    Ok((index, end))
}

/// Decodes container bytes written by [`to_bytes`]. Returns the payload and the metadata.
pub fn from_bytes<T: DeserializeOwned>(kind: &str, bytes: &[u8]) -> Result<(T, Value)> {
    let (index, end) = read_index(bytes)?;
    if index.kind != kind {
        return Err(Error::Format(format!("expected a `{kind}` checkpoint, found `{}`", index.kind)));
    }
    let data = &bytes[end..];
    let expected: usize = index.tensors.iter().map(|t| t.shape.iter().product::<usize>() * 8).sum();
    if data.len() != expected {
        return Err(Error::Format(format!("data section is {} bytes, index describes {expected}", data.len())));
    }
    if hex::encode(Sha256::digest(data)) != index.sha256 {
        return Err(Error::Format("checksum mismatch".into()));
    }
    let value = restore(index.payload, &index.tensors, data)?;
    let payload = serde_json::from_value(value).map_err(|e| Error::Format(format!("payload: {e}")))?;
    Ok((payload, index.meta))
}

/// Writes through a temporary sibling and renames, so a crash never leaves a partial file.
pub fn save<T: Serialize>(path: &Path, kind: &str, meta: Value, payload: &T) -> Result<()> {
    let bytes = to_bytes(kind, meta, payload)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("partial");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load<T: DeserializeOwned>(path: &Path, kind: &str) -> Result<(T, Value)> {
    from_bytes(kind, &fs::read(path)?)
}

/// Kind and tensor table of a container, without decoding the payload.
pub fn inspect(bytes: &[u8]) -> Result<(String, Vec<TensorEntry>)> {
    let (index, _) = read_index(bytes)?;
    Ok((index.kind, index.tensors))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{ParamStore, Tensor};

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.insert(
            "a.w".into(),
            Tensor::new(vec![2, 3], vec![0.1, -2.5, 1e-300, 3.0, f64::MIN_POSITIVE, 7.0]).unwrap(),
        );
        s.insert("b".into(), Tensor::new(vec![1], vec![std::f64::consts::PI]).unwrap());
        s
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let s = store();
        let bytes = to_bytes("store", Value::Null, &s).unwrap();
        let (back, _): (ParamStore, _) = from_bytes("store", &bytes).unwrap();
        assert_eq!(back, s);
        let (kind, tensors) = inspect(&bytes).unwrap();
        assert_eq!(kind, "store");
        let names: Vec<_> = tensors.into_iter().map(|t| t.name).collect();
        assert_eq!(names, vec!["params.a.w", "params.b"]);
    }

    #[test]
    fn every_truncation_is_rejected() {
        let bytes = to_bytes("store", Value::Null, &store()).unwrap();
        for cut in 0..bytes.len() {
            assert!(from_bytes::<ParamStore>("store", &bytes[..cut]).is_err(), "cut at {cut}");
        }
    }

    #[test]
    fn corruption_is_rejected() {
        let mut bytes = to_bytes("store", Value::Null, &store()).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 1;
        assert!(matches!(from_bytes::<ParamStore>("store", &bytes), Err(Error::Format(m)) if m.contains("checksum")));
        bytes[0] = b'X';
        assert!(matches!(from_bytes::<ParamStore>("store", &bytes), Err(Error::Format(m)) if m.contains("magic")));
    }

    #[test]
    fn kind_mismatch_is_rejected() {
        let bytes = to_bytes("store", Value::Null, &store()).unwrap();
        assert!(from_bytes::<ParamStore>("model", &bytes).is_err());
    }
}
