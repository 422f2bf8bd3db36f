//! Binary weight files.
//!
//! Layout, all little-endian: the magic bytes `RBLW`, a `u32` format version,
//! a `u32` count of layer sizes, each size as `u32`, then every parameter as
//! `f64` in the network's flat order.

use std::fs;
use std::path::Path;

use super::mlp::Mlp;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"RBLW";
pub const FORMAT_VERSION: u32 = 1;

pub fn encode(net: &Mlp) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * net.sizes().len() + 8 * net.params().len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(net.sizes().len() as u32).to_le_bytes());
    for &s in net.sizes() {
        out.extend_from_slice(&(s as u32).to_le_bytes());
    }
    for p in net.params() {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Weights(format!("truncated: needed {n} bytes at offset {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Mlp> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Weights("not a weight file".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Weights(format!(
            "format version {version}, expected {FORMAT_VERSION}"
        )));
    }
    let count = r.u32()? as usize;
    if !(2..=64).contains(&count) {
        return Err(Error::Weights(format!("implausible layer count {count}")));
    }
    let sizes = (0..count).map(|_| r.u32().map(|s| s as usize)).collect::<Result<Vec<_>>>()?;
    let shell = Mlp::zeros(&sizes).map_err(|e| Error::Weights(e.to_string()))?;
    let n = shell.params().len();
    let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Weights("size overflow".into()))?)?;
    let params: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    if r.pos != bytes.len() {
        return Err(Error::Weights(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    if params.iter().any(|p| !p.is_finite()) {
        return Err(Error::Weights("non-finite parameter".into()));
    }
    Mlp::from_params(&sizes, params)
}

pub fn save_weights(net: &Mlp, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(net)).map_err(|e| Error::io(path, e))
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<Mlp> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Loads and checks the layer sizes against what the caller expects.
pub fn load_weights_expecting(path: impl AsRef<Path>, sizes: &[usize]) -> Result<Mlp> {
    let net = load_weights(path)?;
    if net.sizes() != sizes {
        return Err(Error::Weights(format!(
            "layer sizes {:?}, expected {sizes:?}",
            net.sizes()
        )));
    }
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample_net() -> Mlp {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        Mlp::init(&[4, 6, 6, 4], 0.5, &mut rng).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.bin");
        let net = sample_net();
        save_weights(&net, &path).unwrap();
        let back = load_weights(&path).unwrap();
        assert_eq!(back.sizes(), net.sizes());
        let x = [0.3, -0.1, 0.9, 2.0];
        let a = net.predict_one(&x).unwrap();
        let b = back.predict_one(&x).unwrap();
        assert!(a.iter().zip(&b).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn truncation_detected() {
        let bytes = encode(&sample_net());
        for cut in [0, 3, 7, 13, bytes.len() - 1] {
            assert!(matches!(decode(&bytes[..cut]), Err(Error::Weights(_))), "cut {cut}");
        }
    }

    #[test]
    fn trailing_bytes_detected() {
        let mut bytes = encode(&sample_net());
        bytes.push(0);
        assert!(decode(&bytes).is_err());
    }

    #[test]
    fn version_mismatch_is_explicit() {
        let mut bytes = encode(&sample_net());
        bytes[4..8].copy_from_slice(&2u32.to_le_bytes());
        let err = decode(&bytes).unwrap_err().to_string();
        assert!(err.contains("version"), "{err}");
    }

    #[test]
    fn shape_mismatch_on_expected_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.bin");
        save_weights(&sample_net(), &path).unwrap();
        assert!(load_weights_expecting(&path, &[4, 6, 6, 4]).is_ok());
        assert!(load_weights_expecting(&path, &[5, 6, 6, 5]).is_err());
    }
}
