//! Binary checkpoint container.
//!
//! Layout, all integers little-endian `u64`:
//!
//! ```text
//! "VQLCMD1\0"
//! manifest_len, manifest     UTF-8, one line per array:
//!                            name dtype d0xd1x.. offset bytes crc32
//! payload_len, payload       raw little-endian arrays, manifest order
//! step
//! rng_len, rng
//! config_len, config         UTF-8 config echo
//! ```

use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"VQLCMD1\0";

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum CheckpointError {
    #[error("not a checkpoint of this version (header {found:?})")]
    Version { found: Vec<u8> },
    #[error("checkpoint truncated while reading {context}")]
    Truncated { context: &'static str },
    #[error("malformed manifest: {0}")]
    Manifest(String),
    #[error("array {name}: checksum {found:08x} does not match manifest {expected:08x}")]
    Checksum { name: String, expected: u32, found: u32 },
    #[error("array {name}: expected {expected}, found {found}")]
    Shape { name: String, expected: String, found: String },
    #[error("array {0} missing from checkpoint")]
    Missing(String),
    #[error("{0} trailing bytes after checkpoint")]
    Trailing(usize),
}

type CResult<T> = std::result::Result<T, CheckpointError>;

#[derive(Debug, Clone, PartialEq)]
pub struct ArrayEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub bytes: Vec<u8>,
}

/// Decoded checkpoint contents, independent of model types.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RawCheckpoint {
    pub arrays: Vec<ArrayEntry>,
    pub step: u64,
    pub rng: Vec<u8>,
    pub config: String,
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_block(out: &mut Vec<u8>, b: &[u8]) {
    put_u64(out, b.len() as u64);
    out.extend_from_slice(b);
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, context: &'static str) -> CResult<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or(CheckpointError::Truncated { context })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self, context: &'static str) -> CResult<u64> {
        let b = self.take(8, context)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn block(&mut self, context: &'static str) -> CResult<&'a [u8]> {
        let n = self.u64(context)?;
        let n = usize::try_from(n).map_err(|_| CheckpointError::Truncated { context })?;
        self.take(n, context)
    }
}

fn shape_text(shape: &[usize]) -> String {
    shape.iter().map(usize::to_string).collect::<Vec<_>>().join("x")
}

impl RawCheckpoint {
    pub fn push<T: Scalar>(&mut self, name: &str, t: &Tensor<T>) {
        let mut bytes = Vec::with_capacity(t.numel() * T::BYTES);
        for &v in t.data() {
            v.write_le(&mut bytes);
        }
        self.arrays.push(ArrayEntry {
            name: name.to_string(),
            dtype: T::DTYPE.to_string(),
            shape: t.shape().to_vec(),
            bytes,
        });
    }

    /// Reads array `name`, checking dtype and (when given) shape.
    pub fn get<T: Scalar>(&self, name: &str, shape: Option<&[usize]>) -> CResult<Tensor<T>> {
        let e = self
            .arrays
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| CheckpointError::Missing(name.to_string()))?;
        if e.dtype != T::DTYPE {
            return Err(CheckpointError::Shape {
                name: name.into(),
                expected: format!("dtype {}", T::DTYPE),
                found: format!("dtype {}", e.dtype),
            });
        }
        if let Some(s) = shape {
            if s != e.shape.as_slice() {
                return Err(CheckpointError::Shape {
                    name: name.into(),
                    expected: shape_text(s),
                    found: shape_text(&e.shape),
                });
            }
        }
        let data: Vec<T> = e.bytes.chunks_exact(T::BYTES).map(T::read_le).collect();
        Tensor::new(e.shape.clone(), data).map_err(|err| CheckpointError::Manifest(err.to_string()))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut manifest = String::new();
        let mut offset = 0usize;
        for e in &self.arrays {
            manifest.push_str(&format!(
                "{} {} {} {} {} {:08x}\n",
                e.name,
                e.dtype,
                shape_text(&e.shape),
                offset,
                e.bytes.len(),
                crc32fast::hash(&e.bytes)
            ));
            offset += e.bytes.len();
        }
        let mut out = Vec::with_capacity(offset + manifest.len() + self.config.len() + 64);
        out.extend_from_slice(MAGIC);
        put_block(&mut out, manifest.as_bytes());
        put_u64(&mut out, offset as u64);
        for e in &self.arrays {
            out.extend_from_slice(&e.bytes);
        }
        put_u64(&mut out, self.step);
        put_block(&mut out, &self.rng);
        put_block(&mut out, self.config.as_bytes());
        out
    }

    pub fn decode(buf: &[u8]) -> CResult<Self> {
        let head = &buf[..buf.len().min(MAGIC.len())];
        if head != MAGIC {
            return Err(CheckpointError::Version { found: head.to_vec() });
        }
        let mut r = Reader { buf, pos: MAGIC.len() };
        let manifest = std::str::from_utf8(r.block("manifest")?)
            .map_err(|e| CheckpointError::Manifest(e.to_string()))?;
        let payload = r.block("array payload")?;
        let step = r.u64("step counter")?;
        let rng = r.block("rng state")?.to_vec();
        let config = std::str::from_utf8(r.block("config echo")?)
            .map_err(|e| CheckpointError::Manifest(e.to_string()))?
            .to_string();
        if r.pos != buf.len() {
            return Err(CheckpointError::Trailing(buf.len() - r.pos));
        }

        let mut arrays = Vec::new();
        let mut expected_offset = 0usize;
        for line in manifest.lines() {
            let bad = || CheckpointError::Manifest(format!("bad line {line:?}"));
            let f: Vec<&str> = line.split(' ').collect();
            let [name, dtype, shape, offset, len, crc] = f[..] else { return Err(bad()) };
            let shape: Vec<usize> = shape
                .split('x')
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| bad())?;
            let offset: usize = offset.parse().map_err(|_| bad())?;
            let len: usize = len.parse().map_err(|_| bad())?;
            let crc = u32::from_str_radix(crc, 16).map_err(|_| bad())?;
            let width = match dtype {
                "f32" => 4,
                "f64" => 8,
                _ => return Err(bad()),
            };
            if offset != expected_offset || shape.iter().product::<usize>() * width != len {
                return Err(CheckpointError::Shape {
                    name: name.into(),
                    expected: format!("{} bytes at offset {expected_offset}", shape.iter().product::<usize>() * width),
                    found: format!("{len} bytes at offset {offset}"),
                });
            }
            let bytes = payload
                .get(offset..offset + len)
                .ok_or(CheckpointError::Truncated { context: "array payload" })?;
            let found = crc32fast::hash(bytes);
            if found != crc {
                return Err(CheckpointError::Checksum {
                    name: name.into(),
                    expected: crc,
                    found,
                });
            }
            expected_offset += len;
            arrays.push(ArrayEntry {
                name: name.into(),
                dtype: dtype.into(),
                shape,
                bytes: bytes.to_vec(),
            });
        }
        if expected_offset != payload.len() {
            return Err(CheckpointError::Manifest(format!(
                "manifest covers {expected_offset} of {} payload bytes",
                payload.len()
            )));
        }
        Ok(RawCheckpoint {
            arrays,
            step,
            rng,
            config,
        })
    }
}
