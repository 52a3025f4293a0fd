//! GHTF: a small little-endian tensor container.
//!
//! Each record is laid out as
//!
//! ```text
//! "GHTF" | version: u16 | dtype: u8 | ndim: u8 | dims: ndim × u32 | [name] | data
//! ```
//!
//! When the high bit of `dtype` is set, a name block (`u16` byte length
//! followed by UTF-8) sits between the dims and the data. Files may hold
//! any number of records back to back; a checkpoint is simply a sequence
//! of named records.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::diffmath::{Dtype, Real, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"GHTF";
pub const VERSION: u16 = 1;
const NAME_FLAG: u8 = 0x80;

/// Tensor payload of one record.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
    U8 { shape: Vec<usize>, data: Vec<u8> },
}

impl TensorData {
    pub fn shape(&self) -> &[usize] {
        match self {
            TensorData::F32(t) => t.shape(),
            TensorData::F64(t) => t.shape(),
            TensorData::U8 { shape, .. } => shape,
        }
    }

    pub fn dtype(&self) -> Dtype {
        match self {
            TensorData::F32(_) => Dtype::F32,
            TensorData::F64(_) => Dtype::F64,
            TensorData::U8 { .. } => Dtype::U8,
        }
    }

    /// Convert a real-valued payload to `T`; `u8` payloads are rejected.
    pub fn to_real<T: Real>(&self) -> Result<Tensor<T>> {
        match self {
            TensorData::F32(t) => Ok(t.cast()),
            TensorData::F64(t) => Ok(t.cast()),
            TensorData::U8 { .. } => Err(Error::Format("expected a real tensor, found u8".into())),
        }
    }

    /// Exact conversion: fails unless the stored dtype is `T`.
    pub fn into_exact<T: Real>(self) -> Result<Tensor<T>> {
        if self.dtype() != T::DTYPE {
            return Err(Error::Format(format!(
                "stored dtype {:?} differs from requested {:?}",
                self.dtype(),
                T::DTYPE
            )));
        }
        self.to_real()
    }
}

impl<T: Real> From<&Tensor<T>> for TensorData {
    fn from(t: &Tensor<T>) -> Self {
        match T::DTYPE {
            Dtype::F64 => TensorData::F64(t.cast()),
            _ => TensorData::F32(t.cast()),
        }
    }
}

/// A record as read back from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: Option<String>,
    pub data: TensorData,
}

pub fn encode_record(out: &mut Vec<u8>, name: Option<&str>, data: &TensorData) -> Result<()> {
    let shape = data.shape();
    if shape.len() > u8::MAX as usize {
        return Err(Error::Format(format!("{} dimensions exceed the format limit", shape.len())));
    }
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let mut code = data.dtype() as u8;
    if name.is_some() {
        code |= NAME_FLAG;
    }
    out.push(code);
    out.push(shape.len() as u8);
    for &d in shape {
        let d = u32::try_from(d).map_err(|_| Error::Format(format!("dimension {d} too large")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    if let Some(name) = name {
        let len = u16::try_from(name.len())
            .map_err(|_| Error::Format("tensor name longer than 65535 bytes".into()))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
    }
    match data {
        TensorData::F32(t) => t.data().iter().for_each(|x| x.write_le(out)),
        TensorData::F64(t) => t.data().iter().for_each(|x| x.write_le(out)),
        TensorData::U8 { data, .. } => out.extend_from_slice(data),
    }
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Format(format!(
                "truncated {what}: need {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            ))
        })?;
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }
}

/// Decode every record in `bytes`.
pub fn decode_records(bytes: &[u8]) -> Result<Vec<Record>> {
    let mut cur = Cursor { bytes, pos: 0 };
    let mut records = Vec::new();
    if bytes.is_empty() {
        return Err(Error::Format("empty file".into()));
    }
    while cur.pos < bytes.len() {
        records.push(decode_one(&mut cur)?);
    }
    Ok(records)
}

fn decode_one(cur: &mut Cursor<'_>) -> Result<Record> {
    let magic = cur.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format(format!("bad magic bytes {magic:02x?}")));
    }
    let version = u16::from_le_bytes(cur.take(2, "version")?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::Version {
            found: version,
            expected: VERSION,
        });
    }
    let code = cur.take(1, "dtype")?[0];
    let dtype = Dtype::from_code(code & !NAME_FLAG)
        .ok_or_else(|| Error::Format(format!("unknown dtype code {code}")))?;
    let ndim = cur.take(1, "ndim")?[0] as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let d = u32::from_le_bytes(cur.take(4, "dims")?.try_into().unwrap()) as usize;
        if d == 0 {
            return Err(Error::Format("zero-sized dimension".into()));
        }
        shape.push(d);
    }
    let name = if code & NAME_FLAG != 0 {
        let len = u16::from_le_bytes(cur.take(2, "name length")?.try_into().unwrap()) as usize;
        let raw = cur.take(len, "name")?;
        Some(
            String::from_utf8(raw.to_vec())
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?,
        )
    } else {
        None
    };
    let count = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format(format!("shape {shape:?} overflows")))?;
    let nbytes = count
        .checked_mul(dtype.size())
        .ok_or_else(|| Error::Format(format!("shape {shape:?} overflows")))?;
    let raw = cur.take(nbytes, "tensor data")?;
    let data = match dtype {
        Dtype::F32 => TensorData::F32(Tensor::new(shape, raw.chunks_exact(4).map(f32::read_le).collect())?),
        Dtype::F64 => TensorData::F64(Tensor::new(shape, raw.chunks_exact(8).map(f64::read_le).collect())?),
        Dtype::U8 => TensorData::U8 {
            shape,
            data: raw.to_vec(),
        },
    };
    Ok(Record { name, data })
}

/// Write bytes to `path` through a sibling temporary file and rename, so
/// readers never observe a half-written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Argument(format!("{} has no file name", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", file_name.to_string_lossy()));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn save_records<'a>(
    path: &Path,
    records: impl IntoIterator<Item = (Option<&'a str>, &'a TensorData)>,
) -> Result<()> {
    let mut out = Vec::new();
    for (name, data) in records {
        encode_record(&mut out, name, data)?;
    }
    write_atomic(path, &out)
}

pub fn load_records(path: &Path) -> Result<Vec<Record>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_records(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Save a single unnamed tensor.
pub fn save_tensor<T: Real>(path: &Path, tensor: &Tensor<T>) -> Result<()> {
    save_records(path, [(None, &TensorData::from(tensor))])
}

/// Load a file holding exactly one tensor, converting to `T`.
pub fn load_tensor<T: Real>(path: &Path) -> Result<Tensor<T>> {
    let mut records = load_records(path)?;
    if records.len() != 1 {
        return Err(Error::Format(format!(
            "{}: expected one tensor, found {}",
            path.display(),
            records.len()
        )));
    }
    records.pop().unwrap().data.to_real()
}

pub fn save_u8(path: &Path, shape: &[usize], data: &[u8]) -> Result<()> {
    let payload = TensorData::U8 {
        shape: shape.to_vec(),
        data: data.to_vec(),
    };
    if shape.iter().product::<usize>() != data.len() {
        return Err(Error::Shape(format!("{} bytes for shape {shape:?}", data.len())));
    }
    save_records(path, [(None, &payload)])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Tensor<f32> {
        Tensor::new(vec![2, 3], vec![1.0, -2.5, f32::MIN_POSITIVE, 3.25, 1e30, -0.0]).unwrap()
    }

    #[test]
    fn header_layout() {
        let mut out = Vec::new();
        encode_record(&mut out, None, &TensorData::from(&sample())).unwrap();
        assert_eq!(&out[..4], b"GHTF");
        assert_eq!(&out[4..6], &[1, 0]);
        assert_eq!(out[6], 0);
        assert_eq!(out[7], 2);
        assert_eq!(&out[8..16], &[2, 0, 0, 0, 3, 0, 0, 0]);
        assert_eq!(out.len(), 16 + 6 * 4);
        assert_eq!(&out[16..20], &1.0f32.to_le_bytes());
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.ghtf");
        save_tensor(&p, &sample()).unwrap();
        let back: Tensor<f32> = load_tensor(&p).unwrap();
        let bits = |t: &Tensor<f32>| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&sample()));
        assert_eq!(back.shape(), &[2, 3]);
    }

    #[test]
    fn named_records_and_dtypes() {
        let a = TensorData::F64(Tensor::new(vec![1], vec![std::f64::consts::PI]).unwrap());
        let b = TensorData::U8 {
            shape: vec![2, 2],
            data: vec![0, 1, 254, 255],
        };
        let mut out = Vec::new();
        encode_record(&mut out, Some("field.sigma.weight"), &a).unwrap();
        encode_record(&mut out, None, &b).unwrap();
        let recs = decode_records(&out).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].name.as_deref(), Some("field.sigma.weight"));
        assert_eq!(recs[0].data, a);
        assert_eq!(recs[1].name, None);
        assert_eq!(recs[1].data, b);
    }

    #[test]
    fn bad_magic_is_format_error() {
        let mut out = Vec::new();
        encode_record(&mut out, None, &TensorData::from(&sample())).unwrap();
        out[0] = b'X';
        assert!(matches!(decode_records(&out), Err(Error::Format(_))));
    }

    #[test]
    fn truncation_is_format_error() {
        let mut out = Vec::new();
        encode_record(&mut out, Some("w"), &TensorData::from(&sample())).unwrap();
        for cut in [3, 7, 10, out.len() - 1] {
            let err = decode_records(&out[..cut]).unwrap_err();
            assert!(matches!(err, Error::Format(_)), "cut {cut}: {err}");
        }
    }

    #[test]
    fn version_mismatch_is_explicit() {
        let mut out = Vec::new();
        encode_record(&mut out, None, &TensorData::from(&sample())).unwrap();
        out[4] = 2;
        assert!(matches!(
            decode_records(&out),
            Err(Error::Version { found: 2, expected: 1 })
        ));
    }

    #[test]
    fn exact_dtype_request() {
        let rec = TensorData::from(&sample());
        assert!(rec.clone().into_exact::<f64>().is_err());
        assert!(rec.into_exact::<f32>().is_ok());
    }
}
