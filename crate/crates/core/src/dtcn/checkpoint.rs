//! Binary checkpoint container; the byte layout is described in
//! `docs/checkpoint-format.md`.

use std::path::Path;

use crate::dtcn::config::DtcnConfig;
use crate::dtcn::model::SeparatorModel;
use crate::error::{Error, Result};
use crate::numcore::Tensor;

pub const MAGIC: &[u8; 8] = b"DTCNCKPT";
pub const FORMAT_VERSION: u32 = 1;

/// Everything a checkpoint file holds.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: DtcnConfig,
    pub step: u64,
    /// Free-form string pairs, kept in insertion order.
    pub metadata: Vec<(String, String)>,
    /// Named tensors, kept in insertion order.
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(k, _)| k == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        put_str(&mut out, &self.config.to_kv());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(self.metadata.len() as u32).to_le_bytes());
        for (k, v) in &self.metadata {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            put_str(&mut out, name);
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let corrupt = |reason: &str| Error::Corrupt {
            path: origin.to_path_buf(),
            reason: reason.to_string(),
        };
        if bytes.len() < MAGIC.len() + 4 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(corrupt("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Version {
                expected: FORMAT_VERSION,
                found: version,
            });
        }
        if bytes.len() < 16 {
            return Err(corrupt("truncated"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        if crc32fast::hash(body) != stored {
            return Err(corrupt("checksum mismatch (truncated or damaged)"));
        }
        let mut r = Reader { buf: body, pos: 12 };
        let parse = |r: &mut Reader| -> Option<Result<Checkpoint>> {
            let cfg_text = r.string()?;
            let step = r.u64()?;
            let n_meta = r.u32()?;
            let mut metadata = Vec::new();
            for _ in 0..n_meta {
                metadata.push((r.string()?, r.string()?));
            }
            let n_tensors = r.u32()?;
            let mut tensors = Vec::new();
            for _ in 0..n_tensors {
                let name = r.string()?;
                let ndim = r.u32()? as usize;
                let mut shape = Vec::with_capacity(ndim);
                for _ in 0..ndim {
                    shape.push(usize::try_from(r.u64()?).ok()?);
                }
                let count = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d))?;
                let raw = r.take(count.checked_mul(8)?)?;
                let data = raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect();
                tensors.push((name, Tensor::from_vec(&shape, data).ok()?));
            }
            if r.pos != r.buf.len() {
                return None;
            }
            Some(DtcnConfig::from_kv(&cfg_text).map(|config| Checkpoint {
                config,
                step,
                metadata,
                tensors,
            }))
        };
        parse(&mut r).unwrap_or_else(|| Err(corrupt("malformed body")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

impl SeparatorModel {
    /// Snapshot of the configuration and every parameter tensor.
    pub fn to_checkpoint(&self, step: u64) -> Checkpoint {
        Checkpoint {
            config: self.config,
            step,
            metadata: vec![("seed".into(), self.params.seed().to_string())],
            tensors: self.params.iter().map(|(n, t)| (n.to_string(), t.clone())).collect(),
        }
    }

    /// Rebuilds a model from a checkpoint; every parameter must be present
    /// with its expected shape.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let seed = ckpt.meta("seed").and_then(|s| s.parse().ok()).unwrap_or(0);
        let mut model = SeparatorModel::build(&ckpt.config, seed)?;
        let ids: Vec<_> = model.params.ids().collect();
        for id in ids {
            let name = model.params.name(id).to_string();
            let t = ckpt
                .tensor(&name)
                .ok_or_else(|| Error::InvalidArgument(format!("checkpoint lacks parameter {name:?}")))?;
            model.params.set(id, t.clone())?;
        }
        Ok(model)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
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

    fn u32(&mut self) -> Option<u32> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?))
    }

    fn u64(&mut self) -> Option<u64> {
        Some(u64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }

    fn string(&mut self) -> Option<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).ok()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            config: DtcnConfig::toy(),
            step: 42,
            metadata: vec![("epoch".into(), "3".into())],
            tensors: vec![
                (
                    "a".into(),
                    Tensor::from_vec(&[2, 2], vec![1.0, -0.5, f64::MIN_POSITIVE, 3.25]).unwrap(),
                ),
                ("b".into(), Tensor::from_vec(&[1], vec![0.1]).unwrap()),
            ],
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.meta("epoch"), Some("3"));
    }

    #[test]
    fn truncation_and_version() {
        let bytes = sample().to_bytes();
        for cut in [5, 20, bytes.len() - 1] {
            let err = Checkpoint::from_bytes(&bytes[..cut], Path::new("t")).unwrap_err();
            assert!(matches!(err, Error::Corrupt { .. }), "{err}");
        }
        let mut v2 = bytes.clone();
        v2[8] = 2;
        assert!(matches!(
            Checkpoint::from_bytes(&v2, Path::new("v")).unwrap_err(),
            Error::Version { expected: 1, found: 2 }
        ));
    }

    #[test]
    fn model_round_trip() {
        let m = SeparatorModel::build(&DtcnConfig::toy(), 9).unwrap();
        let back = SeparatorModel::from_checkpoint(&m.to_checkpoint(7)).unwrap();
        assert_eq!(back, m);
    }
}
