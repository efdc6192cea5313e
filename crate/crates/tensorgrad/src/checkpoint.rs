//! Flat little-endian parameter checkpoints.
//!
//! Layout: magic `JGCK`, `u32` version, `u32` parameter count, then per
//! parameter a `u32` name length, the UTF-8 name, a `u32` rank, `rank` `u32`
//! dims and the raw `f32` values.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::param::{ParamSet, Parameter};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"JGCK";
pub const VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(mut w: W, params: &ParamSet<f32>) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for p in params.iter() {
        w.write_all(&(p.name.len() as u32).to_le_bytes())?;
        w.write_all(p.name.as_bytes())?;
        w.write_all(&(p.value.rank() as u32).to_le_bytes())?;
        for &d in p.value.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in p.value.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format(format!(
                "truncated at byte {} while reading {}",
                self.pos, what
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<ParamSet<f32>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut rd = Reader { bytes: &bytes, pos: 0 };
    if rd.take(4, "magic")? != MAGIC {
        return Err(Error::Format("bad magic, expected JGCK".into()));
    }
    let version = rd.u32("version")?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {} (expected {})",
            version, VERSION
        )));
    }
    let count = rd.u32("parameter count")?;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let len = rd.u32("name length")? as usize;
        let at = rd.pos;
        let name = std::str::from_utf8(rd.take(len, "name")?)
            .map_err(|_| Error::Format(format!("non-UTF-8 parameter name at byte {}", at)))?
            .to_string();
        let rank = rd.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(rd.u32("dims")? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = rd.take(n * 4, "values")?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        params
            .push(Parameter::new(name, Tensor::new(shape, data)?))
            .map_err(|e| Error::Format(e.to_string()))?;
    }
    if rd.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - rd.pos)));
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamSet<f32> {
        let mut ps = ParamSet::new();
        ps.push(Parameter::new("a.weight", Tensor::new(vec![2, 3], vec![1.0, -2.5, 3.0, 0.0, 1e-7, f32::MAX]).unwrap()))
            .unwrap();
        ps.push(Parameter::new("a.bias", Tensor::new(vec![3], vec![0.5, 0.25, -0.125]).unwrap()))
            .unwrap();
        ps
    }

    fn encode(ps: &ParamSet<f32>) -> Vec<u8> {
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, ps).unwrap();
        buf
    }

    #[test]
    fn round_trip_is_bitwise() {
        let ps = sample();
        let back = read_checkpoint(&encode(&ps)[..]).unwrap();
        for (a, b) in ps.iter().zip(back.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn header_layout() {
        let buf = encode(&sample());
        assert_eq!(&buf[..4], b"JGCK");
        assert_eq!(&buf[4..8], &1u32.to_le_bytes());
        assert_eq!(&buf[8..12], &2u32.to_le_bytes());
        assert_eq!(&buf[12..16], &8u32.to_le_bytes());
        assert_eq!(&buf[16..24], b"a.weight");
    }

    #[test]
    fn rejects_bad_magic_version_and_truncation() {
        let mut buf = encode(&sample());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_checkpoint(&bad[..]).is_err());
        let mut bad = buf.clone();
        bad[4] = 9;
        assert!(matches!(read_checkpoint(&bad[..]), Err(Error::Format(m)) if m.contains("version")));
        buf.truncate(buf.len() - 3);
        assert!(matches!(read_checkpoint(&buf[..]), Err(Error::Format(m)) if m.contains("truncated")));
        assert!(read_checkpoint(&[][..]).is_err());
    }
}
