//! Flat binary parameter container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "PCIL"  u32 version  u32 count
//! count × { u32 name_len, name (UTF-8), u32 rank, rank × u64 dim, f64 payload }
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{DiffError, Result};
use crate::nn::ParamSet;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"PCIL";
pub const VERSION: u32 = 1;

pub fn write_params<W: Write>(mut w: W, params: &ParamSet) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for (name, t) in params.iter() {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

struct Reader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Reader<R> {
    fn exact(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        self.inner.read_exact(buf).map_err(|e| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                DiffError::Format(format!("truncated while reading {what} at byte {}", self.offset))
            } else {
                DiffError::Io(e)
            }
        })?;
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.exact(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let mut b = [0u8; 8];
        self.exact(&mut b, what)?;
        Ok(u64::from_le_bytes(b))
    }
}

pub fn read_params<R: Read>(r: R) -> Result<ParamSet> {
    let mut rd = Reader { inner: r, offset: 0 };
    let mut magic = [0u8; 4];
    rd.exact(&mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(DiffError::Format(format!("bad magic {magic:?}")));
    }
    let version = rd.u32("version")?;
    if version != VERSION {
        return Err(DiffError::Format(format!("unsupported version {version}")));
    }
    let count = rd.u32("tensor count")?;
    let mut out = ParamSet::new();
    for _ in 0..count {
        let len = rd.u32("name length")? as usize;
        let mut name = vec![0u8; len];
        rd.exact(&mut name, "name")?;
        let name = String::from_utf8(name)
            .map_err(|_| DiffError::Format(format!("name before byte {} is not UTF-8", rd.offset)))?;
        let rank = rd.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(rd.u64("dimension")? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            let mut b = [0u8; 8];
            rd.exact(&mut b, "payload")?;
            data.push(f64::from_le_bytes(b));
        }
        out.push(name, Tensor::new(shape, data)?);
    }
    Ok(out)
}

pub fn save(path: impl AsRef<Path>, params: &ParamSet) -> Result<()> {
    let f = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(f);
    write_params(&mut w, params)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<ParamSet> {
    let f = std::fs::File::open(path)?;
    read_params(std::io::BufReader::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamSet {
        let mut p = ParamSet::new();
        p.push("actor.l0.w", Tensor::matrix(2, 3, vec![1.0, -2.5, 3.0, 0.0, 1e-300, -0.0]).unwrap());
        p.push("ünï", Tensor::new(vec![2, 1, 2], vec![0.1, 0.2, 0.3, 0.4]).unwrap());
        p
    }

    #[test]
    fn header_layout() {
        let mut buf = Vec::new();
        write_params(&mut buf, &sample()).unwrap();
        assert_eq!(&buf[..4], b"PCIL");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 2);
        assert_eq!(read_params(buf.as_slice()).unwrap(), sample());
    }

    #[test]
    fn truncation_names_offset() {
        let mut buf = Vec::new();
        write_params(&mut buf, &sample()).unwrap();
        buf.truncate(buf.len() - 3);
        let err = read_params(buf.as_slice()).unwrap_err().to_string();
        assert!(err.contains("truncated") && err.contains("byte"), "{err}");
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ckpt");
        save(&path, &sample()).unwrap();
        assert_eq!(load(&path).unwrap(), sample());
    }
}
