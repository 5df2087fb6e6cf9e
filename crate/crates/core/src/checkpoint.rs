//! Versioned container for a JSON config echo plus named f64 tensors.
//!
//! Layout (little-endian): `EVCK` | u32 version | u64 iteration |
//! u32 config length | config JSON | u32 tensor count | per tensor:
//! u32 name length | name | u32 rank | u64 dims | f64 values.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::fsutil::atomic_write;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"EVCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub iteration: u64,
    pub config_json: String,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.iteration.to_le_bytes());
        out.extend_from_slice(&(self.config_json.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config_json.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(buf: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let mut take = |n: usize, what: &str| -> Result<(usize, &[u8])> {
            if buf.len() - pos < n {
                return Err(Error::format(pos as u64, format!("truncated {what}")));
            }
            let at = pos;
            pos += n;
            Ok((at, &buf[at..at + n]))
        };
        let (_, magic) = take(4, "magic")?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::format(0, format!("bad checkpoint magic {:?}", String::from_utf8_lossy(magic))));
        }
        let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().unwrap());
        let u64_at = |b: &[u8]| u64::from_le_bytes(b.try_into().unwrap());
        let (at, v) = take(4, "version")?;
        let version = u32_at(v);
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(at as u64, format!("unsupported checkpoint version {version}")));
        }
        let iteration = u64_at(take(8, "iteration")?.1);
        let len = u32_at(take(4, "config length")?.1) as usize;
        let (at, cfg) = take(len, "config")?;
        let config_json = String::from_utf8(cfg.to_vec())
            .map_err(|_| Error::format(at as u64, "config is not UTF-8"))?;
        let count = u32_at(take(4, "tensor count")?.1) as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let nlen = u32_at(take(4, "name length")?.1) as usize;
            let (at, name) = take(nlen, "tensor name")?;
            let name = String::from_utf8(name.to_vec())
                .map_err(|_| Error::format(at as u64, "tensor name is not UTF-8"))?;
            let rank = u32_at(take(4, "rank")?.1) as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u64_at(take(8, "dim")?.1) as usize);
            }
            let n: usize = shape.iter().product();
            let (_, raw) = take(n.checked_mul(8).ok_or_else(|| Error::format(at as u64, "tensor too large"))?, "tensor data")?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            tensors.insert(name, Tensor::new(&shape, data));
        }
        if pos != buf.len() {
            return Err(Error::format(pos as u64, "trailing bytes after checkpoint"));
        }
        Ok(Self {
            iteration,
            config_json,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        atomic_write(path.as_ref(), &self.encode())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&buf)
    }

    /// Tensors whose names start with `prefix`, with the prefix stripped.
    pub fn group(&self, prefix: &str) -> BTreeMap<String, Tensor> {
        self.tensors
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
            .collect()
    }
}

/// First differing leaf between two JSON values, as a dotted path.
pub fn first_difference(a: &serde_json::Value, b: &serde_json::Value) -> Option<String> {
    use serde_json::Value;
    match (a, b) {
        (Value::Object(x), Value::Object(y)) => {
            let mut keys: Vec<&String> = x.keys().chain(y.keys()).collect();
            keys.sort();
            keys.dedup();
            for k in keys {
                match (x.get(k), y.get(k)) {
                    (Some(u), Some(v)) => {
                        if let Some(rest) = first_difference(u, v) {
                            return Some(if rest.is_empty() { k.clone() } else { format!("{k}.{rest}") });
                        }
                    }
                    _ => return Some(k.clone()),
                }
            }
            None
        }
        _ if a == b => None,
        _ => Some(String::new()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn sample() -> Checkpoint {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut tensors = BTreeMap::new();
        tensors.insert("g.a".to_string(), Tensor::randn(&[2, 3], 1.0, &mut rng));
        tensors.insert("d.b".to_string(), Tensor::new(&[1], vec![f64::MIN_POSITIVE]));
        Checkpoint {
            iteration: 42,
            config_json: "{\"bins\":3}".into(),
            tensors,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        c.save(&p).unwrap();
        let back = Checkpoint::load(&p).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.group("g.").len(), 1);
    }

    #[test]
    fn corrupt_files_are_format_errors() {
        let bytes = sample().encode();
        assert!(matches!(Checkpoint::decode(&bytes[..bytes.len() - 1]), Err(Error::Format { .. })));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(Checkpoint::decode(&bad), Err(Error::Format { offset: 4, .. })));
    }

    #[test]
    fn difference_paths() {
        let a: serde_json::Value = serde_json::json!({"bins": 3, "g": {"w": 1, "x": [1, 2]}});
        let b: serde_json::Value = serde_json::json!({"bins": 3, "g": {"w": 2, "x": [1, 2]}});
        assert_eq!(first_difference(&a, &a), None);
        assert_eq!(first_difference(&a, &b).as_deref(), Some("g.w"));
    }
}
