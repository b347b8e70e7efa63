//! Versioned binary container of metadata and named f32 tensors.
//!
//! Layout: `STAR1`, version (u32 LE), metadata length (u32 LE) and UTF-8
//! `key = value` lines, then one record per tensor:
//! `[u32 name length][name][u8 dtype = 0][u8 rank][u32 dims…][f32 LE data]`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numeric::Tensor;

pub const MAGIC: &[u8; 5] = b"STAR1";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    /// Ordered entries; keys may repeat.
    pub metadata: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Checkpoint {
            version: VERSION,
            metadata: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.meta(key)
            .ok_or_else(|| Error::Format(format!("checkpoint metadata lacks {key:?}")))
    }

    pub fn meta_all<'a>(&'a self, key: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.metadata
            .iter()
            .filter(move |(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        let mut meta = String::new();
        for (k, v) in &self.metadata {
            if k.contains(['\n', '=']) || v.contains('\n') {
                return Err(Error::Format(format!(
                    "metadata entry {k:?} must be single-line"
                )));
            }
            meta.push_str(&format!("{k} = {v}\n"));
        }
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(0);
            out.push(t.dims().len() as u8);
            for &d in t.dims() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len()).map_err(|_| Error::BadMagic)? != MAGIC {
            return Err(Error::BadMagic);
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: VERSION,
            });
        }
        let len = r.u32()? as usize;
        let meta = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format("metadata is not UTF-8".into()))?;
        let mut metadata = Vec::new();
        for line in meta.lines() {
            let (k, v) = line
                .split_once(" = ")
                .ok_or_else(|| Error::Format(format!("bad metadata line {line:?}")))?;
            metadata.push((k.to_string(), v.to_string()));
        }
        let mut tensors = Vec::new();
        while r.pos < bytes.len() {
            let n = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(n)?)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
                .to_string();
            let dtype = r.take(1)?[0];
            if dtype != 0 {
                return Err(Error::Format(format!(
                    "tensor {name}: unknown dtype {dtype}"
                )));
            }
            let rank = r.take(1)?[0] as usize;
            let dims = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let count: usize = dims.iter().product();
            let raw = r.take(count.checked_mul(4).ok_or(Error::Truncated)?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push((
                name,
                Tensor::new(dims, data).map_err(|e| Error::Format(e.to_string()))?,
            ));
        }
        Ok(Checkpoint {
            version,
            metadata,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

impl Default for Checkpoint {
    fn default() -> Self {
        Self::new()
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated);
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn sample() -> Checkpoint {
        let mut r = rng::seeded(4);
        let mut c = Checkpoint::new();
        c.metadata.push(("step".into(), "12".into()));
        c.metadata
            .push(("stage".into(), "resolution=16 batch=2".into()));
        c.metadata
            .push(("stage".into(), "resolution=32 batch=1".into()));
        c.tensors.push((
            "a".into(),
            Tensor::matrix(2, 3, rng::normal_vec(&mut r, 6, 1.0)).unwrap(),
        ));
        c.tensors.push((
            "b.c".into(),
            Tensor::new(vec![2, 1, 2], vec![f32::MIN_POSITIVE, -0.0, 1e30, 3.5]).unwrap(),
        ));
        c
    }

    #[test]
    fn bytes_round_trip() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        assert_eq!(&bytes[..5], b"STAR1");
        assert_eq!(&bytes[5..9], &1u32.to_le_bytes());
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back.meta_all("stage").count(), 2);
        for ((na, ta), (nb, tb)) in c.tensors.iter().zip(&back.tensors) {
            assert_eq!(na, nb);
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(ta), bits(tb));
        }
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let mut bytes = sample().to_bytes().unwrap();
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 3]),
            Err(Error::Truncated)
        ));
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..3]),
            Err(Error::BadMagic)
        ));
        bytes[5] = 9;
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::VersionMismatch { .. })
        ));
        bytes[0] = b'X';
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::BadMagic)
        ));
        let mut c = sample();
        c.metadata.push(("bad".into(), "two\nlines".into()));
        assert!(c.to_bytes().is_err());
    }
}
