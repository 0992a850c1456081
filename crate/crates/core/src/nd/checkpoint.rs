//! Parameter checkpoint file.
//!
//! Layout: magic `EMBR`, format version `u16`, then records of
//! `(name length u16, name bytes, rank u8, dims u32 each, f32 payload)`.
//! All integers and floats are little-endian.

use std::path::Path;

use super::params::ParamSet;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::io::ByteReader;

const MAGIC: &[u8; 4] = b"EMBR";
const VERSION: u16 = 1;

pub fn write_checkpoint(params: &ParamSet) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(16 + params.numel() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for (name, t) in params.iter() {
        let name_len = u16::try_from(name.len())
            .map_err(|_| Error::Format(format!("parameter name too long: {name}")))?;
        let rank = u8::try_from(t.shape().len())
            .map_err(|_| Error::Format(format!("rank too large for `{name}`")))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(rank);
        for &d in t.shape() {
            let d = u32::try_from(d)
                .map_err(|_| Error::Format(format!("dimension too large for `{name}`")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Parses a whole checkpoint; nothing is returned unless every record is intact.
pub fn read_checkpoint(bytes: &[u8]) -> Result<ParamSet> {
    let mut r = ByteReader::new(bytes);
    if r.take(4)? != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let mut params = ParamSet::new();
    while !r.is_empty() {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?
            .to_owned();
        let rank = r.u8()? as usize;
        if rank == 0 {
            return Err(Error::Format(format!("parameter `{name}` has rank 0")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Format(format!("bad shape {shape:?} for `{name}`")))?;
        let data = r.f32s(numel)?;
        if params.contains(&name) {
            return Err(Error::Format(format!("duplicate parameter `{name}`")));
        }
        params.insert(name, Tensor::new(shape, data)?.with_grad());
    }
    Ok(params)
}

pub fn save_checkpoint(params: &ParamSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, write_checkpoint(params)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ParamSet> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamSet {
        let mut p = ParamSet::new();
        p.insert(
            "conv0.weight",
            Tensor::new(vec![2, 1, 3, 3], (0..18).map(|i| i as f32 * 0.1 - 0.7).collect()).unwrap(),
        );
        p.insert("conv0.bias", Tensor::vector(vec![f32::MIN_POSITIVE, -0.0]));
        p
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let p = sample();
        let back = read_checkpoint(&write_checkpoint(&p).unwrap()).unwrap();
        for ((n1, a), (n2, b)) in p.iter().zip(back.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(a.shape(), b.shape());
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
    }

    #[test]
    fn mid_record_truncation_is_rejected() {
        let bytes = write_checkpoint(&sample()).unwrap();
        for cut in [0, 3, 5, 7, 12, bytes.len() - 1] {
            assert!(
                matches!(read_checkpoint(&bytes[..cut]), Err(Error::Format(_))),
                "cut at {cut}"
            );
        }
    }

    #[test]
    fn bad_magic_and_version_are_rejected() {
        let mut bytes = write_checkpoint(&sample()).unwrap();
        bytes[0] = b'X';
        assert!(matches!(read_checkpoint(&bytes), Err(Error::Format(_))));
        let mut bytes = write_checkpoint(&sample()).unwrap();
        bytes[4] = 9;
        assert!(matches!(read_checkpoint(&bytes), Err(Error::Format(_))));
    }
}
