//! Binary parameter files.
//!
//! Layout, all little-endian: the magic `EDM2SE01`, a `u32` tensor count,
//! then per tensor a `u16` name length, the UTF-8 name, a `u8` rank, one
//! `u32` per extent and the `f32` payload.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 8] = b"EDM2SE01";

pub fn write_params<'a, S: Scalar>(path: &Path, tensors: impl IntoIterator<Item = (&'a str, &'a Tensor<S>)>) -> Result<()> {
    let io = |e| Error::io(path, e);
    let fmt = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    let tensors: Vec<_> = tensors.into_iter().collect();
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&(tensors.len() as u32).to_le_bytes()).map_err(io)?;
    for (name, t) in tensors {
        let len = u16::try_from(name.len()).map_err(|_| fmt(format!("name too long: {name}")))?;
        let rank = u8::try_from(t.dims().len()).map_err(|_| fmt(format!("rank too large: {name}")))?;
        w.write_all(&len.to_le_bytes()).map_err(io)?;
        w.write_all(name.as_bytes()).map_err(io)?;
        w.write_all(&[rank]).map_err(io)?;
        for &d in t.dims() {
            let d = u32::try_from(d).map_err(|_| fmt(format!("extent too large: {name}")))?;
            w.write_all(&d.to_le_bytes()).map_err(io)?;
        }
        for v in t.data() {
            w.write_all(&(v.as_f64() as f32).to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

pub fn read_params(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let io = |e| Error::io(path, e);
    let fmt = |reason: &str| Error::Format {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let mut r = BufReader::new(File::open(path).map_err(io)?);
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(io)?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    if cur.take(8).ok_or_else(|| fmt("truncated header"))? != MAGIC {
        return Err(fmt("bad magic"));
    }
    let count = cur.u32().ok_or_else(|| fmt("truncated header"))?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = cur.u16().ok_or_else(|| fmt("truncated name length"))? as usize;
        let name = cur.take(len).ok_or_else(|| fmt("truncated name"))?;
        let name = String::from_utf8(name.to_vec()).map_err(|_| fmt("name is not UTF-8"))?;
        let rank = cur.take(1).ok_or_else(|| fmt("truncated rank"))?[0] as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(cur.u32().ok_or_else(|| fmt("truncated dims"))? as usize);
        }
        let n: usize = dims.iter().product();
        let payload = cur.take(4 * n).ok_or_else(|| fmt("truncated payload"))?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.push((name, Tensor::from_vec(&dims, data)?));
    }
    if cur.pos != bytes.len() {
        return Err(fmt("trailing bytes"));
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos.checked_add(n)?)?;
        self.pos += n;
        Some(s)
    }

    fn u16(&mut self) -> Option<u16> {
        self.take(2).map(|b| u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("p.bin");
        let a = Tensor::<f32>::from_vec(&[2, 3], vec![1.5, -0.0, f32::MIN_POSITIVE, 3.25, -7.0, 1e-30]).unwrap();
        let b = Tensor::<f32>::scalar(0.125);
        write_params(&p, [("enc.0.conv", &a), ("gain", &b)]).unwrap();
        let back = read_params(&p).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].0, "enc.0.conv");
        assert_eq!(back[0].1.dims(), &[2, 3]);
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back[0].1), bits(&a));
        assert_eq!(back[1], ("gain".to_string(), b));

        let raw = std::fs::read(&p).unwrap();
        assert_eq!(&raw[..8], b"EDM2SE01");
        assert_eq!(u32::from_le_bytes(raw[8..12].try_into().unwrap()), 2);
    }

    #[test]
    fn rejects_truncation_and_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("p.bin");
        write_params(&p, [("w", &Tensor::<f32>::full(&[4], 1.0))]).unwrap();
        let raw = std::fs::read(&p).unwrap();
        std::fs::write(&p, &raw[..raw.len() - 1]).unwrap();
        assert!(matches!(read_params(&p), Err(Error::Format { .. })));
        let mut bad = raw.clone();
        bad[0] = b'X';
        std::fs::write(&p, &bad).unwrap();
        assert!(matches!(read_params(&p), Err(Error::Format { .. })));
        assert!(matches!(read_params(&dir.path().join("missing")), Err(Error::Io { .. })));
    }
}
