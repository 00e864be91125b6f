use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"MMFUSE\0\x01";
pub const CONTAINER_VERSION: u32 = 1;

/// Versioned binary record of named text fields and `f64` arrays, closed by a
/// SHA-256 checksum over all preceding bytes.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    pub kind: String,
    pub texts: BTreeMap<String, String>,
    pub arrays: BTreeMap<String, Vec<f64>>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Integrity("truncated container".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u64()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Integrity("invalid UTF-8 in container".into()))
    }
}

fn put_string(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u64).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

impl Container {
    pub fn new(kind: &str) -> Self {
        Self {
            kind: kind.to_string(),
            ..Self::default()
        }
    }

    pub fn put_text(&mut self, name: &str, value: impl Into<String>) {
        self.texts.insert(name.to_string(), value.into());
    }

    pub fn put_array(&mut self, name: &str, values: Vec<f64>) {
        self.arrays.insert(name.to_string(), values);
    }

    pub fn text(&self, name: &str) -> Result<&str> {
        self.texts
            .get(name)
            .map(String::as_str)
            .ok_or_else(|| Error::Integrity(format!("{} container lacks field '{name}'", self.kind)))
    }

    pub fn array(&self, name: &str) -> Result<&[f64]> {
        self.arrays
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Integrity(format!("{} container lacks array '{name}'", self.kind)))
    }

    /// Parse a text field with `FromStr`.
    pub fn parsed<T: std::str::FromStr>(&self, name: &str) -> Result<T> {
        self.text(name)?
            .parse()
            .map_err(|_| Error::Integrity(format!("{} container has a malformed '{name}'", self.kind)))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
        put_string(&mut out, &self.kind);
        out.extend_from_slice(&(self.texts.len() as u64).to_le_bytes());
        for (k, v) in &self.texts {
            put_string(&mut out, k);
            put_string(&mut out, v);
        }
        out.extend_from_slice(&(self.arrays.len() as u64).to_le_bytes());
        for (k, v) in &self.arrays {
            put_string(&mut out, k);
            out.extend_from_slice(&(v.len() as u64).to_le_bytes());
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 + 32 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::Integrity("not a mammofuse container".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Integrity("container checksum mismatch".into()));
        }
        let mut r = Reader {
            bytes: body,
            pos: MAGIC.len(),
        };
        let version = r.u32()?;
        if version != CONTAINER_VERSION {
            return Err(Error::Integrity(format!("unsupported container version {version}")));
        }
        let kind = r.string()?;
        let mut c = Container::new(&kind);
        for _ in 0..r.u64()? {
            let k = r.string()?;
            let v = r.string()?;
            c.texts.insert(k, v);
        }
        for _ in 0..r.u64()? {
            let k = r.string()?;
            let n = r.u64()? as usize;
            let raw = r.take(
                n.checked_mul(8)
                    .ok_or_else(|| Error::Integrity("array too large".into()))?,
            )?;
            let v = raw
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect();
            c.arrays.insert(k, v);
        }
        if r.pos != body.len() {
            return Err(Error::Integrity("trailing bytes in container".into()));
        }
        Ok(c)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    /// Read a container and check its kind.
    pub fn read(path: &Path, kind: &str) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let c = Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Integrity(m) => Error::Integrity(format!("{}: {m}", path.display())),
            other => other,
        })?;
        if c.kind != kind {
            return Err(Error::Integrity(format!(
                "{}: expected a {kind} container, found {}",
                path.display(),
                c.kind
            )));
        }
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        let mut c = Container::new("test");
        c.put_text("config", "a = 1\nb = 2\n");
        c.put_array("w", vec![1.5, -0.0, f64::MIN_POSITIVE, 1e300]);
        c.put_array("empty", vec![]);
        c
    }

    #[test]
    fn round_trip() {
        let c = sample();
        let back = Container::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.array("w").unwrap()[3], 1e300);
    }

    #[test]
    fn corruption_is_detected() {
        let mut bytes = sample().to_bytes();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        assert!(matches!(Container::from_bytes(&bytes), Err(Error::Integrity(_))));
        assert!(matches!(Container::from_bytes(&bytes[..20]), Err(Error::Integrity(_))));
    }

    #[test]
    fn kind_is_checked() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.bin");
        sample().write(&p).unwrap();
        assert!(Container::read(&p, "test").is_ok());
        assert!(matches!(Container::read(&p, "other"), Err(Error::Integrity(_))));
    }
}
