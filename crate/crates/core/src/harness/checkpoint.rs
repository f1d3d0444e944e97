//! "CGW1" checkpoint files.
//!
//! ```text
//! magic "CGW1" | version u32 | stage u8 | entry count u32
//! per entry: name len u16 | name | rank u8 | dims u64 × rank | f32 × numel
//! metadata len u32 | metadata JSON
//! CRC32 of everything above
//! ```
//! All integers and floats are little-endian.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 4] = b"CGW1";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 13;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Mae,
    Ts,
    Fusion,
    Head,
    Concat,
}

impl Stage {
    pub const ALL: [Stage; 5] = [
        Stage::Mae,
        Stage::Ts,
        Stage::Fusion,
        Stage::Head,
        Stage::Concat,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Mae => "mae",
            Stage::Ts => "ts",
            Stage::Fusion => "fusion",
            Stage::Head => "head",
            Stage::Concat => "concat",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|st| st.name() == s)
    }

    fn tag(self) -> u8 {
        self as u8
    }

    fn from_tag(t: u8) -> Option<Self> {
        Self::ALL.get(t as usize).copied()
    }

    pub fn file_name(self) -> String {
        format!("{}.cgw", self.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub stage: Stage,
    pub tensors: BTreeMap<String, Tensor>,
    /// Configuration snapshot and anything else the stage records.
    pub config: serde_json::Value,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    config: serde_json::Value,
    seed: u64,
}

impl Checkpoint {
    pub fn new(
        stage: Stage,
        tensors: BTreeMap<String, Tensor>,
        config: serde_json::Value,
        seed: u64,
    ) -> Self {
        Self {
            stage,
            tensors,
            config,
            seed,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.stage.tag());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            let len = u16::try_from(name.len())
                .map_err(|_| Error::Input(format!("tensor name too long: {name}")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let meta = serde_json::to_vec(&Meta {
            config: self.config.clone(),
            seed: self.seed,
        })?;
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let corrupt = |reason: &str| Error::Corrupt {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        if bytes.len() < HEADER_LEN + 8 || &bytes[..4] != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Version {
                found: version,
                expected: VERSION,
            });
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        if crc32fast::hash(body) != stored {
            return Err(corrupt("CRC mismatch"));
        }
        let stage = Stage::from_tag(body[8]).ok_or_else(|| corrupt("unknown stage tag"))?;
        let mut r = Reader {
            buf: body,
            pos: HEADER_LEN,
        };
        let count = u32::from_le_bytes(body[9..13].try_into().expect("4 bytes"));
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name_len = u16::from_le_bytes(
                r.take(2)
                    .ok_or_else(|| corrupt("truncated entry"))?
                    .try_into()
                    .expect("2 bytes"),
            );
            let name = std::str::from_utf8(
                r.take(name_len as usize)
                    .ok_or_else(|| corrupt("truncated name"))?,
            )
            .map_err(|_| corrupt("tensor name is not UTF-8"))?
            .to_string();
            let rank = r.take(1).ok_or_else(|| corrupt("truncated rank"))?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let d = u64::from_le_bytes(
                    r.take(8)
                        .ok_or_else(|| corrupt("truncated dims"))?
                        .try_into()
                        .expect("8 bytes"),
                );
                shape.push(usize::try_from(d).map_err(|_| corrupt("dimension overflow"))?);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| corrupt("dimension overflow"))?;
            let payload = r
                .take(
                    numel
                        .checked_mul(4)
                        .ok_or_else(|| corrupt("dimension overflow"))?,
                )
                .ok_or_else(|| corrupt("truncated payload"))?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let t = Tensor::new(&shape, data).map_err(|_| corrupt("invalid tensor shape"))?;
            if tensors.insert(name.clone(), t).is_some() {
                return Err(corrupt(&format!("duplicate tensor {name}")));
            }
        }
        let meta_len = u32::from_le_bytes(
            r.take(4)
                .ok_or_else(|| corrupt("truncated metadata"))?
                .try_into()
                .expect("4 bytes"),
        );
        let meta: Meta = serde_json::from_slice(
            r.take(meta_len as usize)
                .ok_or_else(|| corrupt("truncated metadata"))?,
        )
        .map_err(|e| corrupt(&format!("metadata: {e}")))?;
        if r.pos != body.len() {
            return Err(corrupt("trailing bytes"));
        }
        Ok(Self {
            stage,
            tensors,
            config: meta.config,
            seed: meta.seed,
        })
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.buf.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }
}

/// Write atomically: a failed save leaves any previous file in place.
pub fn save_checkpoint(path: &Path, c: &Checkpoint) -> Result<()> {
    let bytes = c.to_bytes()?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("cgw.tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut t = BTreeMap::new();
        t.insert(
            "a.weight".into(),
            Tensor::from_fn(&[3, 4], |i| i as f32 * 0.1 - 0.55),
        );
        t.insert(
            "b".into(),
            Tensor::from_fn(&[2, 1, 3], |i| f32::from_bits(0x3f80_0000 + i as u32)),
        );
        Checkpoint::new(Stage::Fusion, t, serde_json::json!({"d_v": 32}), 17)
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn flipped_payload_byte_fails_crc() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[HEADER_LEN + 20] ^= 0x01;
        match Checkpoint::from_bytes(&bytes, Path::new("mem")) {
            Err(Error::Corrupt { reason, .. }) => assert!(reason.contains("CRC")),
            other => panic!("expected CRC error, got {other:?}"),
        }
    }

    #[test]
    fn empty_checkpoint() {
        let c = Checkpoint::new(Stage::Mae, BTreeMap::new(), serde_json::Value::Null, 0);
        let bytes = c.to_bytes().unwrap();
        assert_eq!(&bytes[..4], MAGIC);
        assert_eq!(u32::from_le_bytes(bytes[9..13].try_into().unwrap()), 0);
        let back = Checkpoint::from_bytes(&bytes, Path::new("mem")).unwrap();
        assert!(back.tensors.is_empty());
    }

    #[test]
    fn header_errors() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[0] = b'X';
        assert!(matches!(
            Checkpoint::from_bytes(&bytes, Path::new("m")),
            Err(Error::Corrupt { .. })
        ));
        let mut bytes = sample().to_bytes().unwrap();
        bytes[4] = 9;
        assert!(matches!(
            Checkpoint::from_bytes(&bytes, Path::new("m")),
            Err(Error::Version { found: 9, .. })
        ));
    }
}
