use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numgrad::{ParamMap, Tensor};

pub const MAGIC: &[u8; 4] = b"CLNC";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    tensors: Vec<Entry>,
    #[serde(default)]
    meta: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

/// Serialize tensors (as f32) and a JSON metadata blob.
pub fn encode_checkpoint(tensors: &ParamMap, meta: &serde_json::Value) -> Vec<u8> {
    let header = Header {
        tensors: tensors.iter().map(|(n, t)| Entry { name: n.clone(), shape: t.shape().to_vec() }).collect(),
        meta: meta.clone(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for t in tensors.values() {
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> std::result::Result<(ParamMap, serde_json::Value), String> {
    if bytes.len() < 16 {
        return Err("file too short".into());
    }
    let (body, crc) = bytes.split_at(bytes.len() - 4);
    if &body[..4] != MAGIC {
        return Err("bad magic".into());
    }
    if crc32fast::hash(body) != u32::from_le_bytes(crc.try_into().unwrap()) {
        return Err("CRC mismatch (corrupt or truncated file)".into());
    }
    let version = u32::from_le_bytes(body[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let hlen = u32::from_le_bytes(body[8..12].try_into().unwrap()) as usize;
    let json = body.get(12..12 + hlen).ok_or("header truncated")?;
    let header: Header = serde_json::from_slice(json).map_err(|e| format!("bad header: {e}"))?;
    let mut payload = &body[12 + hlen..];
    let expected: usize = header.tensors.iter().map(|e| 4 * e.shape.iter().product::<usize>()).sum();
    if payload.len() != expected {
        return Err(format!("payload holds {} bytes, header describes {expected}", payload.len()));
    }
    let mut tensors = ParamMap::new();
    for e in header.tensors {
        let n: usize = e.shape.iter().product();
        let data = payload[..4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        payload = &payload[4 * n..];
        let t = Tensor::new(e.shape, data).map_err(|err| err.to_string())?;
        if tensors.insert(e.name.clone(), t).is_some() {
            return Err(format!("duplicate tensor `{}`", e.name));
        }
    }
    Ok((tensors, header.meta))
}

pub fn save_checkpoint(path: impl AsRef<Path>, tensors: &ParamMap, meta: &serde_json::Value) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, encode_checkpoint(tensors, meta)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ParamMap, serde_json::Value)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes).map_err(|detail| Error::Checkpoint { path: path.to_path_buf(), detail })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numgrad::Rng;

    fn random_map(seed: u64) -> ParamMap {
        let mut rng = Rng::new(seed);
        let mut m = ParamMap::new();
        for (i, shape) in [vec![3, 4], vec![7], vec![2, 2, 2]].into_iter().enumerate() {
            let mut t = Tensor::randn(&shape, 1.0, &mut rng);
            t.round_to_f32();
            m.insert(format!("z{}", 9 - i), t);
        }
        m
    }

    #[test]
    fn round_trip_is_exact_and_ordered() {
        let m = random_map(1);
        let meta = serde_json::json!({"kind": "test"});
        let (back, meta2) = decode_checkpoint(&encode_checkpoint(&m, &meta)).unwrap();
        assert_eq!(back, m);
        assert_eq!(meta2, meta);
        assert_eq!(back.keys().collect::<Vec<_>>(), vec!["z9", "z8", "z7"]);
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = encode_checkpoint(&random_map(2), &serde_json::Value::Null);
        let err = decode_checkpoint(&bytes[..bytes.len() - 9]).unwrap_err();
        assert!(err.contains("CRC"), "{err}");
        let mut flipped = bytes.clone();
        flipped[30] ^= 1;
        assert!(decode_checkpoint(&flipped).is_err());
        let mut magic = bytes;
        magic[0] = b'X';
        assert!(decode_checkpoint(&magic).unwrap_err().contains("magic"));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a/b.ckpt");
        let m = random_map(3);
        save_checkpoint(&path, &m, &serde_json::Value::Null).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap().0, m);
        std::fs::write(&path, b"CLNC").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint { .. })));
    }
}
