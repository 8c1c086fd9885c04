//! Named-tensor container file.
//!
//! Layout (little-endian): magic `SPLR`, version `u32`, record count `u32`,
//! then per record: name length `u16`, UTF-8 name, dtype tag `u8`
//! (0 = f32, 1 = f64), rank `u8`, one `u64` per extent, raw data.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::tensor::numel;
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 4] = b"SPLR";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn tag(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub dtype: DType,
    pub tensor: Tensor,
}

impl Record {
    pub fn new(name: impl Into<String>, dtype: DType, tensor: Tensor) -> Self {
        Self {
            name: name.into(),
            dtype,
            tensor,
        }
    }
}

pub fn encode(records: &[Record]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let count =
        u32::try_from(records.len()).map_err(|_| Error::Format("too many records".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for r in records {
        let name = r.name.as_bytes();
        let len = u16::try_from(name.len())
            .map_err(|_| Error::Format(format!("record name too long: {}", r.name)))?;
        let rank = u8::try_from(r.tensor.rank())
            .map_err(|_| Error::Format(format!("rank too large in {}", r.name)))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name);
        out.push(r.dtype.tag());
        out.push(rank);
        for &e in r.tensor.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        match r.dtype {
            DType::F32 => {
                for &x in r.tensor.data() {
                    out.extend_from_slice(&(x as f32).to_le_bytes());
                }
            }
            DType::F64 => {
                for &x in r.tensor.data() {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!(
                "truncated container: need {n} bytes for {what} at offset {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<Record>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format("bad magic bytes".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported container version {version}"
        )));
    }
    let count = r.u32("record count")?;
    let mut records = Vec::with_capacity(count.min(1 << 16) as usize);
    for _ in 0..count {
        let len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Format("record name is not UTF-8".into()))?
            .to_string();
        let dtype = match r.u8("dtype")? {
            0 => DType::F32,
            1 => DType::F64,
            t => return Err(Error::Format(format!("unknown dtype tag {t} in {name}"))),
        };
        let rank = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let e = r.u64("extent")?;
            shape.push(
                usize::try_from(e)
                    .map_err(|_| Error::Format(format!("extent overflow in {name}")))?,
            );
        }
        let n = numel(&shape);
        let raw = r.take(
            n.checked_mul(dtype.width())
                .ok_or_else(|| Error::Format(format!("size overflow in {name}")))?,
            &name,
        )?;
        let data = match dtype {
            DType::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            DType::F64 => raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        };
        records.push(Record {
            name,
            dtype,
            tensor: Tensor::new(shape, data)?,
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok(records)
}

pub fn write(path: impl AsRef<Path>, records: &[Record]) -> Result<()> {
    fs::write(path, encode(records)?)?;
    Ok(())
}

pub fn read(path: impl AsRef<Path>) -> Result<Vec<Record>> {
    decode(&fs::read(path)?)
}

/// Finds a record by name.
pub fn find<'a>(records: &'a [Record], name: &str) -> Result<&'a Record> {
    records
        .iter()
        .find(|r| r.name == name)
        .ok_or_else(|| Error::MissingRecord(name.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<Record> {
        vec![
            Record::new(
                "a/b",
                DType::F64,
                Tensor::from_fn([2, 3], |i| i as f64 * 0.1),
            ),
            Record::new(
                "c",
                DType::F32,
                Tensor::from_fn([4], |i| 1.0 / (i as f64 + 3.0)),
            ),
            Record::new("s", DType::F64, Tensor::scalar(-2.5)),
        ]
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let bytes = encode(&sample()).unwrap();
        let back = decode(&bytes).unwrap();
        assert_eq!(back[0], sample()[0]);
        assert_eq!(encode(&back).unwrap(), bytes);
        assert_eq!(back[1].tensor.data()[0], (1.0f64 / 3.0) as f32 as f64);
    }

    #[test]
    fn truncated_input_is_a_format_error() {
        let bytes = encode(&sample()).unwrap();
        for cut in [0, 3, 10, bytes.len() - 1] {
            assert!(
                matches!(decode(&bytes[..cut]), Err(Error::Format(_))),
                "cut {cut}"
            );
        }
    }

    #[test]
    fn missing_record_is_named() {
        let err = find(&sample(), "nope").unwrap_err();
        assert!(err.to_string().contains("nope"));
    }
}
