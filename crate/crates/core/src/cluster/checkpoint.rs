//! Binary checkpoint: magic `RDRA`, format version (u32), model
//! descriptor, serialized weights, server timestamp (u64). Integers and
//! floats are little-endian.
//!
//! Model descriptor: layer count `k` (u32), `k` layer widths (u32 each),
//! then `k - 2` hidden-layer activation codes (one byte each).

use std::path::Path;

use crate::clock::Timestamp;
use crate::error::{Error, Result};
use crate::model::{Activation, ModelSpec, Weights};

pub const MAGIC: &[u8; 4] = b"RDRA";
pub const VERSION: u32 = 1;

pub fn encode_checkpoint(w: &Weights, ts: Timestamp) -> Vec<u8> {
    let spec = w.spec();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(spec.layer_sizes().len() as u32).to_le_bytes());
    for &s in spec.layer_sizes() {
        out.extend_from_slice(&(s as u32).to_le_bytes());
    }
    for a in spec.activations() {
        out.push(a.code());
    }
    out.extend_from_slice(&w.to_bytes());
    out.extend_from_slice(&ts.0.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Validation(format!("checkpoint truncated while reading {what}"))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(Weights, Timestamp)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Validation("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Validation(format!("unsupported checkpoint version {version}")));
    }
    let k = r.u32("layer count")? as usize;
    if !(2..=1024).contains(&k) {
        return Err(Error::Validation(format!("implausible layer count {k}")));
    }
    let mut sizes = Vec::with_capacity(k);
    for _ in 0..k {
        sizes.push(r.u32("layer width")? as usize);
    }
    let acts = r
        .take(k - 2, "activations")?
        .iter()
        .map(|&c| Activation::from_code(c))
        .collect::<Result<Vec<_>>>()?;
    let spec = ModelSpec::new(sizes, acts)?;
    let header_len = 8;
    let len_bytes = r.take(header_len, "weight length")?;
    let count = u64::from_le_bytes(len_bytes.try_into().unwrap()) as usize;
    let body = r.take(count.checked_mul(8).ok_or_else(|| Error::Validation("weight length overflow".into()))?, "weights")?;
    let mut blob = Vec::with_capacity(header_len + body.len());
    blob.extend_from_slice(len_bytes);
    blob.extend_from_slice(body);
    let weights = Weights::from_bytes(&spec, &blob)?;
    let ts = u64::from_le_bytes(r.take(8, "timestamp")?.try_into().unwrap());
    if r.pos != bytes.len() {
        return Err(Error::Validation(format!(
            "{} trailing bytes after checkpoint",
            bytes.len() - r.pos
        )));
    }
    Ok((weights, Timestamp(ts)))
}

pub fn write_checkpoint(path: &Path, w: &Weights, ts: Timestamp) -> Result<()> {
    std::fs::write(path, encode_checkpoint(w, ts)).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

pub fn read_checkpoint(path: &Path) -> Result<(Weights, Timestamp)> {
    let bytes = std::fs::read(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::RngStream;

    #[test]
    fn round_trip_and_corruption() {
        let spec = ModelSpec::new(vec![3, 4, 2], vec![Activation::Relu]).unwrap();
        let w = Weights::init(&spec, &mut RngStream::new(1, 1));
        let bytes = encode_checkpoint(&w, Timestamp(42));
        assert_eq!(&bytes[..4], b"RDRA");
        let (w2, ts) = decode_checkpoint(&bytes).unwrap();
        assert_eq!(w2, w);
        assert_eq!(ts, Timestamp(42));
        assert!(decode_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_checkpoint(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(decode_checkpoint(&extra).is_err());
    }
}
