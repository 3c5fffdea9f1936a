//! Binary containers with a SHA-256 trailer: the shared reader/writer and a
//! named-tensor format used for classifier and generator checkpoints.
//!
//! Named-tensor layout, all integers little-endian:
//!
//! ```text
//! "GTNS" | version u32 | total length u64 | meta length u32 | meta JSON
//! | tensor count u32 | per tensor: name length u32, name, rank u32, dims u32..., f32 values
//! | SHA-256 of everything before the trailer
//! ```

use std::fs;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{GuapError, Result};
use crate::nn::ParamStore;

pub const DIGEST_LEN: usize = 32;
pub const TENSOR_MAGIC: &[u8; 4] = b"GTNS";
pub const TENSOR_VERSION: u32 = 1;

/// Little-endian byte sink.
#[derive(Debug, Default)]
pub(crate) struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn f32s<'a>(&mut self, vals: impl IntoIterator<Item = &'a f32>) {
        for v in vals {
            self.bytes(&v.to_le_bytes());
        }
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    /// Patch a u64 previously written at `at`.
    pub fn set_u64(&mut self, at: usize, v: u64) {
        self.buf[at..at + 8].copy_from_slice(&v.to_le_bytes());
    }

    /// Append the digest trailer and return the finished file image.
    pub fn finish(mut self) -> Vec<u8> {
        let d: [u8; DIGEST_LEN] = Sha256::digest(&self.buf).into();
        self.buf.extend_from_slice(&d);
        self.buf
    }
}

/// Cursor over a file image; running past the end is a truncation error.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
    /// Length the whole file should have, once known.
    pub expected_len: u64,
}

impl<'a> Reader<'a> {
    pub fn new(bytes: &'a [u8], path: &'a Path) -> Self {
        Self {
            bytes,
            pos: 0,
            path,
            expected_len: 0,
        }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(GuapError::Truncated {
                path: self.path.to_path_buf(),
                expected: self.expected_len.max((self.pos + n) as u64),
                found: self.bytes.len() as u64,
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| self.malformed("length overflow"))?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    pub fn malformed(&self, detail: impl Into<String>) -> GuapError {
        GuapError::Malformed {
            path: self.path.to_path_buf(),
            detail: detail.into(),
        }
    }

    /// Check magic and version, the two fields every container opens with.
    pub fn header(&mut self, magic: &[u8; 4], version: u32) -> Result<()> {
        if self.bytes.len() < 4 || &self.bytes[..4] != magic {
            return Err(GuapError::BadMagic {
                path: self.path.to_path_buf(),
                expected: String::from_utf8_lossy(magic).into_owned(),
            });
        }
        self.pos = 4;
        let found = self.u32()?;
        if found != version {
            return Err(GuapError::Version {
                path: self.path.to_path_buf(),
                found,
                expected: version,
            });
        }
        Ok(())
    }

    /// Compare the file length against `expected_len`, then verify the trailer.
    pub fn verify_length_and_digest(&self) -> Result<()> {
        let found = self.bytes.len() as u64;
        if found < self.expected_len {
            return Err(GuapError::Truncated {
                path: self.path.to_path_buf(),
                expected: self.expected_len,
                found,
            });
        }
        if found > self.expected_len {
            return Err(self.malformed(format!("expected {} bytes, found {found}", self.expected_len)));
        }
        let body = &self.bytes[..self.bytes.len() - DIGEST_LEN];
        let stored = &self.bytes[self.bytes.len() - DIGEST_LEN..];
        if Sha256::digest(body).as_slice() != stored {
            return Err(GuapError::Digest {
                path: self.path.to_path_buf(),
            });
        }
        Ok(())
    }

    /// All payload bytes consumed, leaving exactly the trailer.
    pub fn expect_trailer(&self) -> Result<()> {
        if self.pos + DIGEST_LEN != self.bytes.len() {
            return Err(self.malformed("unexpected bytes before the digest trailer"));
        }
        Ok(())
    }
}

/// Lowercase hexadecimal rendering of a digest.
pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    if !path.is_file() {
        return Err(GuapError::MissingFile(path.to_path_buf()));
    }
    fs::read(path).map_err(|e| GuapError::io(path, e))
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| GuapError::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| GuapError::io(path, e))
}

/// Serialize `meta` and `params` into the named-tensor container.
pub fn encode_tensors<M: Serialize>(meta: &M, params: &ParamStore<f32>) -> Vec<u8> {
    let json = serde_json::to_vec(meta).expect("metadata serializes");
    let mut w = Writer::default();
    w.bytes(TENSOR_MAGIC);
    w.u32(TENSOR_VERSION);
    let len_at = w.len();
    w.u64(0);
    w.u32(json.len() as u32);
    w.bytes(&json);
    w.u32(params.len() as u32);
    for (name, t) in params.iter() {
        w.u32(name.len() as u32);
        w.bytes(name.as_bytes());
        w.u32(t.ndim() as u32);
        for &d in t.shape() {
            w.u32(d as u32);
        }
        w.f32s(t.iter());
    }
    let total = (w.len() + DIGEST_LEN) as u64;
    w.set_u64(len_at, total);
    w.finish()
}

pub fn decode_tensors<M: DeserializeOwned>(bytes: &[u8], path: &Path) -> Result<(M, ParamStore<f32>)> {
    let mut r = Reader::new(bytes, path);
    r.header(TENSOR_MAGIC, TENSOR_VERSION)?;
    r.expected_len = r.u64()?;
    r.verify_length_and_digest()?;
    let meta_len = r.u32()? as usize;
    let meta = serde_json::from_slice(r.take(meta_len)?).map_err(|e| r.malformed(format!("metadata: {e}")))?;
    let count = r.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| r.malformed("tensor name is not UTF-8"))?;
        let rank = r.u32()? as usize;
        let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n = dims.iter().product();
        let vals = r.f32s(n)?;
        let t = ArrayD::from_shape_vec(IxDyn(&dims), vals).expect("value count matches dims");
        store.add(name, t);
    }
    r.expect_trailer()?;
    Ok((meta, store))
}

pub fn save_tensors<M: Serialize>(path: &Path, meta: &M, params: &ParamStore<f32>) -> Result<()> {
    write_file(path, &encode_tensors(meta, params))
}

pub fn load_tensors<M: DeserializeOwned>(path: &Path) -> Result<(M, ParamStore<f32>)> {
    decode_tensors(&read_file(path)?, path)
}
