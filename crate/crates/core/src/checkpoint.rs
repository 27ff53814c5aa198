//! Single-file checkpoints.
//!
//! ```text
//! b"AUSTCKPT"  u32 version
//! u32 len      model config as TOML
//! u32 count
//! count × { u16 len, name, u32 ndim, ndim × u64 dim, f64 data... }
//! ```
//!
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{AustNet, ModelConfig};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"AUSTCKPT";
pub const VERSION: u32 = 1;

pub fn encode(model: &AustNet) -> Result<Vec<u8>> {
    let config = toml::to_string(model.config()).map_err(|e| Error::Checkpoint(format!("config: {e}")))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(config.as_bytes());
    out.extend_from_slice(&(model.params().len() as u32).to_le_bytes());
    for (name, t) in model.params().iter() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated while reading {what}")))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
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

/// Config and named tensors, without building a model.
pub fn decode_raw(bytes: &[u8]) -> Result<(ModelConfig, Vec<(String, Tensor)>)> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(8, "magic")? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = c.u32("version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let len = c.u32("config length")? as usize;
    let text = std::str::from_utf8(c.take(len, "config")?).map_err(|_| Error::Checkpoint("config is not UTF-8".into()))?;
    let config: ModelConfig = toml::from_str(text).map_err(|e| Error::Checkpoint(format!("config: {e}")))?;
    let count = c.u32("parameter count")? as usize;
    let mut params = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let nlen = c.u16("name length")? as usize;
        let name = std::str::from_utf8(c.take(nlen, "name")?)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
            .to_string();
        let ndim = c.u32("rank")? as usize;
        if ndim > 8 {
            return Err(Error::Checkpoint(format!("{name}: rank {ndim} is too large")));
        }
        let shape: Vec<usize> = (0..ndim).map(|_| c.u64("dims").map(|d| d as usize)).collect::<Result<_>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Checkpoint(format!("{name}: shape overflows")))?;
        let raw = c.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("size overflow".into()))?, &name)?;
        let data = raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
        params.push((name, Tensor::new(shape, data)?));
    }
    if c.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - c.pos)));
    }
    Ok((config, params))
}

/// Rebuild the model from its stored config and check every tensor against
/// the config-derived plan.
pub fn decode(bytes: &[u8]) -> Result<AustNet> {
    let (config, params) = decode_raw(bytes)?;
    let mut model = AustNet::new(config).map_err(|e| Error::Checkpoint(format!("stored config: {e}")))?;
    model.params_mut().load_from(&params)?;
    Ok(model)
}

pub fn save(path: &Path, model: &AustNet) -> Result<()> {
    let bytes = encode(model)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<AustNet> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> AustNet {
        AustNet::new(ModelConfig {
            height: 16,
            width: 16,
            seed: 3,
            semantic: true,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn round_trip() {
        let m = model();
        let bytes = encode(&m).unwrap();
        let back = decode(&bytes).unwrap();
        assert_eq!(back.config(), m.config());
        assert_eq!(back.params(), m.params());
        assert_eq!(encode(&back).unwrap(), bytes);
    }

    #[test]
    fn rejects_corruption() {
        let bytes = encode(&model()).unwrap();
        assert!(decode(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode(&extra).is_err());
    }

    #[test]
    fn rejects_shape_mismatch() {
        let m = model();
        let (config, mut params) = decode_raw(&encode(&m).unwrap()).unwrap();
        params[0].1 = Tensor::zeros([1, 2, 3]);
        let mut target = AustNet::new(config).unwrap();
        assert!(matches!(target.params_mut().load_from(&params), Err(Error::Checkpoint(_))));
    }
}
