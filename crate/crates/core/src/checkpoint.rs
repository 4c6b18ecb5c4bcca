//! Portable tensor container.
//!
//! ```text
//! "SESN" | version u32 | count u32 |
//!   per tensor: name_len u32 | name (UTF-8) | dtype u8 | rank u8 | extents u64 * rank | payload
//! | crc32 u32 (of every preceding byte)
//! ```
//!
//! All integers and payloads are little-endian. dtype codes: 1 = f32, 2 = f64,
//! 3 = i64, 4 = u8. Tensors keep their insertion order, so a load/save cycle
//! reproduces the original bytes.

use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SESN";
pub const VERSION: u32 = 1;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CheckpointError {
    #[error("bad magic {0:?}, expected \"SESN\"")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("file truncated while reading {0}")]
    Truncated(&'static str),
    #[error("crc mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    CrcMismatch { stored: u32, computed: u32 },
    #[error("unknown dtype code {0}")]
    UnknownDtype(u8),
    #[error("tensor name is not valid UTF-8")]
    BadName,
    #[error("duplicate tensor name {0:?}")]
    DuplicateName(String),
    #[error("tensor {0:?} has an invalid shape")]
    BadShape(String),
    #[error("{0} trailing bytes after the last tensor")]
    TrailingBytes(usize),
    #[error("missing tensor {0:?}")]
    Missing(String),
    #[error("tensor {name:?} has dtype {found}, expected {expected}")]
    WrongType { name: String, expected: &'static str, found: &'static str },
}

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
    I64(Vec<usize>, Vec<i64>),
    U8(Vec<usize>, Vec<u8>),
}

impl TensorData {
    pub fn dtype_code(&self) -> u8 {
        match self {
            TensorData::F32(_) => 1,
            TensorData::F64(_) => 2,
            TensorData::I64(..) => 3,
            TensorData::U8(..) => 4,
        }
    }

    pub fn dtype_name(&self) -> &'static str {
        match self {
            TensorData::F32(_) => "f32",
            TensorData::F64(_) => "f64",
            TensorData::I64(..) => "i64",
            TensorData::U8(..) => "u8",
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            TensorData::F32(t) => t.shape(),
            TensorData::F64(t) => t.shape(),
            TensorData::I64(s, _) | TensorData::U8(s, _) => s,
        }
    }

    fn element_count(&self) -> usize {
        match self {
            TensorData::F32(t) => t.len(),
            TensorData::F64(t) => t.len(),
            TensorData::I64(_, d) => d.len(),
            TensorData::U8(_, d) => d.len(),
        }
    }

    fn write_payload(&self, out: &mut Vec<u8>) {
        match self {
            TensorData::F32(t) => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            TensorData::F64(t) => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            TensorData::I64(_, d) => d.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            TensorData::U8(_, d) => out.extend_from_slice(d),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    entries: Vec<(String, TensorData)>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(CheckpointError::Truncated(what))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self, what: &'static str) -> Result<u8, CheckpointError> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, data: TensorData) -> Result<(), CheckpointError> {
        if self.get(name).is_some() {
            return Err(CheckpointError::DuplicateName(name.to_string()));
        }
        let count: Option<usize> = data.shape().iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        if data.shape().is_empty() || data.shape().len() > u8::MAX as usize || count != Some(data.element_count()) {
            return Err(CheckpointError::BadShape(name.to_string()));
        }
        self.entries.push((name.to_string(), data));
        Ok(())
    }

    pub fn insert_text(&mut self, name: &str, text: &str) -> Result<(), CheckpointError> {
        let bytes = text.as_bytes().to_vec();
        let shape = vec![bytes.len().max(1)];
        let bytes = if bytes.is_empty() { vec![b'\n'] } else { bytes };
        self.insert(name, TensorData::U8(shape, bytes))
    }

    pub fn get(&self, name: &str) -> Option<&TensorData> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, d)| d)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn require(&self, name: &str) -> Result<&TensorData, CheckpointError> {
        self.get(name).ok_or_else(|| CheckpointError::Missing(name.to_string()))
    }

    fn wrong(name: &str, expected: &'static str, found: &TensorData) -> CheckpointError {
        CheckpointError::WrongType { name: name.to_string(), expected, found: found.dtype_name() }
    }

    pub fn f32_tensor(&self, name: &str) -> Result<Tensor<f32>, CheckpointError> {
        match self.require(name)? {
            TensorData::F32(t) => Ok(t.clone()),
            other => Err(Self::wrong(name, "f32", other)),
        }
    }

    pub fn f64_tensor(&self, name: &str) -> Result<Tensor<f64>, CheckpointError> {
        match self.require(name)? {
            TensorData::F64(t) => Ok(t.clone()),
            other => Err(Self::wrong(name, "f64", other)),
        }
    }

    pub fn i64_values(&self, name: &str) -> Result<&[i64], CheckpointError> {
        match self.require(name)? {
            TensorData::I64(_, d) => Ok(d),
            other => Err(Self::wrong(name, "i64", other)),
        }
    }

    pub fn u8_values(&self, name: &str) -> Result<&[u8], CheckpointError> {
        match self.require(name)? {
            TensorData::U8(_, d) => Ok(d),
            other => Err(Self::wrong(name, "u8", other)),
        }
    }

    pub fn text(&self, name: &str) -> Result<String, CheckpointError> {
        String::from_utf8(self.u8_values(name)?.to_vec()).map_err(|_| CheckpointError::BadName)
    }

    pub fn scalar_f64(&self, name: &str) -> Result<f64, CheckpointError> {
        match self.require(name)? {
            TensorData::F64(t) if t.len() == 1 => Ok(t.item()),
            TensorData::F32(t) if t.len() == 1 => Ok(t.item() as f64),
            other => Err(Self::wrong(name, "f64 scalar", other)),
        }
    }

    pub fn scalar_i64(&self, name: &str) -> Result<i64, CheckpointError> {
        match self.i64_values(name)? {
            [v] => Ok(*v),
            _ => Err(CheckpointError::BadShape(name.to_string())),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, data) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(data.dtype_code());
            out.push(data.shape().len() as u8);
            for &d in data.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            data.write_payload(&mut out);
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 4 {
            return Err(CheckpointError::Truncated("magic"));
        }
        let magic: [u8; 4] = bytes[..4].try_into().unwrap();
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic(magic));
        }
        if bytes.len() < 16 {
            return Err(CheckpointError::Truncated("header"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(CheckpointError::CrcMismatch { stored, computed });
        }

        let mut r = Reader { bytes: body, pos: 4 };
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let count = r.u32("tensor count")?;
        let mut container = Container::new();
        for _ in 0..count {
            let name_len = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "name")?).map_err(|_| CheckpointError::BadName)?.to_string();
            let dtype = r.u8("dtype")?;
            let rank = r.u8("rank")? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(usize::try_from(r.u64("extent")?).map_err(|_| CheckpointError::BadShape(name.clone()))?);
            }
            let count = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|_| rank > 0 && shape.iter().all(|&d| d > 0))
                .ok_or_else(|| CheckpointError::BadShape(name.clone()))?;
            let width = match dtype {
                1 => 4,
                2 | 3 => 8,
                4 => 1,
                other => return Err(CheckpointError::UnknownDtype(other)),
            };
            let bytes_needed = count.checked_mul(width).ok_or_else(|| CheckpointError::BadShape(name.clone()))?;
            let payload = r.take(bytes_needed, "payload")?;
            let data = match dtype {
                1 => TensorData::F32(
                    Tensor::new(&shape, payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
                        .map_err(|_| CheckpointError::BadShape(name.clone()))?,
                ),
                2 => TensorData::F64(
                    Tensor::new(&shape, payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
                        .map_err(|_| CheckpointError::BadShape(name.clone()))?,
                ),
                3 => TensorData::I64(shape, payload.chunks_exact(8).map(|c| i64::from_le_bytes(c.try_into().unwrap())).collect()),
                _ => TensorData::U8(shape, payload.to_vec()),
            };
            container.insert(&name, data)?;
        }
        if r.pos != body.len() {
            return Err(CheckpointError::TrailingBytes(body.len() - r.pos));
        }
        Ok(container)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> crate::Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> crate::Result<Self> {
        let bytes = std::fs::read(path)?;
        Ok(Container::from_bytes(&bytes)?)
    }

    /// Human-readable listing: one line per tensor.
    pub fn summary(&self) -> String {
        let mut out = String::new();
        for (name, data) in &self.entries {
            let _ = writeln!(out, "{name} dtype={} shape={:?}", data.dtype_name(), data.shape());
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> Container {
        let mut c = Container::new();
        c.insert("a", TensorData::F32(Tensor::from_fn(&[2, 3], |i| i as f32 - 1.5))).unwrap();
        c.insert("b", TensorData::F64(Tensor::scalar(std::f64::consts::PI))).unwrap();
        c.insert("labels", TensorData::I64(vec![4], vec![1, -2, 3, i64::MAX])).unwrap();
        c.insert_text("config", "base=2\n").unwrap();
        c
    }

    #[test]
    fn byte_exact_round_trip() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Container::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.text("config").unwrap(), "base=2\n");
    }

    #[test]
    fn header_layout() {
        let bytes = sample().to_bytes();
        assert_eq!(&bytes[..4], b"SESN");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 4);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 1);
        assert_eq!(bytes[16], b'a');
        assert_eq!(bytes[17], 1); // f32
        assert_eq!(bytes[18], 2); // rank
    }

    #[test]
    fn every_single_byte_corruption_is_detected() {
        let bytes = sample().to_bytes();
        for i in 0..bytes.len() {
            let mut bad = bytes.clone();
            bad[i] ^= 0x5a;
            assert!(Container::from_bytes(&bad).is_err(), "corruption at byte {i} went unnoticed");
        }
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut c = sample();
        assert_eq!(
            c.insert("a", TensorData::U8(vec![1], vec![0])),
            Err(CheckpointError::DuplicateName("a".into()))
        );
    }

    #[test]
    fn truncation_and_type_errors() {
        let bytes = sample().to_bytes();
        assert!(matches!(Container::from_bytes(&bytes[..3]), Err(CheckpointError::Truncated(_))));
        let c = sample();
        assert!(matches!(c.f64_tensor("a"), Err(CheckpointError::WrongType { .. })));
        assert!(matches!(c.f32_tensor("zzz"), Err(CheckpointError::Missing(_))));
    }

    proptest! {
        #[test]
        fn arbitrary_f32_tensors_round_trip(values in proptest::collection::vec(-1e6f32..1e6, 1..64)) {
            let mut c = Container::new();
            let n = values.len();
            c.insert("x", TensorData::F32(Tensor::new(&[n], values).unwrap())).unwrap();
            let bytes = c.to_bytes();
            let back = Container::from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.to_bytes(), bytes);
        }
    }
}
