//! `CVTH` tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic  b"CVTH"
//! u32    version
//! u32    entry count
//! per entry:
//!   u16  name length, then UTF-8 name
//!   u8   dtype (0 = f32)
//!   u8   ndim, then ndim × u32 dims
//!   f32  payload, row-major
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use super::Tensor;
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CVTH";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

const HEADER: &str = "<header>";

/// Named tensors in a deterministic (sorted) order.
pub type TensorMap = BTreeMap<String, Tensor<f32>>;

pub fn write_container<W: Write>(mut w: W, entries: &TensorMap) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let count = u32::try_from(entries.len()).map_err(|_| Error::format(HEADER, "too many entries"))?;
    w.write_all(&count.to_le_bytes())?;
    for (name, t) in entries {
        let len = u16::try_from(name.len()).map_err(|_| Error::format(name.clone(), "name too long"))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&[DTYPE_F32])?;
        let ndim = u8::try_from(t.rank()).map_err(|_| Error::format(name.clone(), "rank above 255"))?;
        w.write_all(&[ndim])?;
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| Error::format(name.clone(), "dimension above u32"))?;
            w.write_all(&d.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.len() * 4);
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

fn read_exact_for<R: Read>(r: &mut R, buf: &mut [u8], entry: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => Error::format(entry, "file truncated"),
        _ => Error::Io(e),
    })
}

fn read_u32<R: Read>(r: &mut R, entry: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact_for(r, &mut b, entry)?;
    Ok(u32::from_le_bytes(b))
}

/// Parse a whole container. Nothing is returned unless every entry parses.
pub fn read_container<R: Read>(mut r: R) -> Result<TensorMap> {
    let mut magic = [0u8; 4];
    read_exact_for(&mut r, &mut magic, HEADER)?;
    if &magic != MAGIC {
        return Err(Error::format(HEADER, format!("bad magic {magic:?}")));
    }
    let version = read_u32(&mut r, HEADER)?;
    if version != VERSION {
        return Err(Error::format(HEADER, format!("unsupported version {version}")));
    }
    let count = read_u32(&mut r, HEADER)?;
    let mut out = TensorMap::new();
    for i in 0..count {
        let placeholder = format!("#{i}");
        let mut b2 = [0u8; 2];
        read_exact_for(&mut r, &mut b2, &placeholder)?;
        let mut name = vec![0u8; u16::from_le_bytes(b2) as usize];
        read_exact_for(&mut r, &mut name, &placeholder)?;
        let name = String::from_utf8(name).map_err(|_| Error::format(placeholder, "name is not UTF-8"))?;
        let mut b1 = [0u8; 2];
        read_exact_for(&mut r, &mut b1, &name)?;
        let (dtype, ndim) = (b1[0], b1[1]);
        if dtype != DTYPE_F32 {
            return Err(Error::format(name, format!("unsupported dtype {dtype}")));
        }
        let mut shape = Vec::with_capacity(ndim as usize);
        for _ in 0..ndim {
            shape.push(read_u32(&mut r, &name)? as usize);
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::format(name, format!("zero-sized dimension in {shape:?}")));
        }
        let n: usize = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n <= (1 << 31))
            .ok_or_else(|| Error::format(name.clone(), format!("shape {shape:?} too large")))?;
        let mut bytes = vec![0u8; n * 4];
        read_exact_for(&mut r, &mut bytes, &name)?;
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::format(name.clone(), e))?;
        if out.insert(name.clone(), t).is_some() {
            return Err(Error::format(name, "duplicate entry"));
        }
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::format("<trailer>", "unexpected bytes after last entry"));
    }
    Ok(out)
}

pub fn save_container(path: impl AsRef<Path>, entries: &TensorMap) -> Result<()> {
    let mut buf = Vec::new();
    write_container(&mut buf, entries)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_container(path: impl AsRef<Path>) -> Result<TensorMap> {
    let bytes = fs::read(path)?;
    read_container(bytes.as_slice())
}
