//! Binary checkpoint of an [`EngineConfig`] and its [`NetworkParams`].
//!
//! Layout, all integers little-endian `u32`:
//!
//! ```text
//! "TRCR"  version:u8  0u8 0u8 0u8
//! config_len  config_json[config_len]
//! tensor_count
//! repeated: rank  dims[rank]  f32 LE values[prod(dims)]
//! ```
//!
//! Tensors appear in [`super::Network::flat`] order.

use std::path::Path;

use super::network::NetworkParams;
use super::EngineConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TRCR";
pub const CHECKPOINT_VERSION: u8 = 1;

pub fn checkpoint_bytes(cfg: &EngineConfig, params: &NetworkParams) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(cfg)?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&[CHECKPOINT_VERSION, 0, 0, 0]);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    let tensors = params.flat();
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<usize, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
}

pub fn parse_checkpoint(bytes: &[u8], path: &Path) -> Result<(EngineConfig, NetworkParams)> {
    let fail = |reason: String| Error::format(path, reason);
    let mut r = Reader { buf: bytes, pos: 0 };
    let header = r.take(8).map_err(fail)?;
    if &header[..4] != CHECKPOINT_MAGIC {
        return Err(fail("not a checkpoint (bad magic)".into()));
    }
    if header[4] != CHECKPOINT_VERSION {
        return Err(fail(format!(
            "unsupported checkpoint version {}",
            header[4]
        )));
    }
    let len = r.u32().map_err(fail)?;
    let cfg: EngineConfig = serde_json::from_slice(r.take(len).map_err(fail)?)
        .map_err(|e| fail(format!("config: {e}")))?;
    let count = r.u32().map_err(fail)?;
    let mut tensors = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let rank = r.u32().map_err(fail)?;
        if rank > 8 {
            return Err(fail(format!("implausible tensor rank {rank}")));
        }
        let shape = (0..rank)
            .map(|_| r.u32())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(fail)?;
        let n: usize = shape.iter().product();
        let raw = r
            .take(
                n.checked_mul(4)
                    .ok_or_else(|| fail("tensor too large".into()))?,
            )
            .map_err(fail)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push(Tensor::new(shape, data).map_err(|e| fail(e.to_string()))?);
    }
    if r.pos != bytes.len() {
        return Err(fail(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let params = NetworkParams::from_flat(&cfg, tensors).map_err(|e| fail(e.to_string()))?;
    Ok((cfg, params))
}

pub fn write_checkpoint(
    path: impl AsRef<Path>,
    cfg: &EngineConfig,
    params: &NetworkParams,
) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, checkpoint_bytes(cfg, params)?).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<(EngineConfig, NetworkParams)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> EngineConfig {
        EngineConfig {
            levels: 2,
            channels: vec![2, 3],
            seed: 5,
            ..Default::default()
        }
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let c = cfg();
        let p = NetworkParams::init(&c).unwrap();
        let bytes = checkpoint_bytes(&c, &p).unwrap();
        assert_eq!(&bytes[..4], b"TRCR");
        let (c2, p2) = parse_checkpoint(&bytes, Path::new("mem")).unwrap();
        assert_eq!(c2, c);
        assert_eq!(checkpoint_bytes(&c2, &p2).unwrap(), bytes);
    }

    #[test]
    fn rejects_corruption() {
        let c = cfg();
        let bytes = checkpoint_bytes(&c, &NetworkParams::init(&c).unwrap()).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(parse_checkpoint(&bad, Path::new("mem")).is_err());
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(parse_checkpoint(&bad, Path::new("mem")).is_err());
        assert!(parse_checkpoint(&bytes[..bytes.len() - 3], Path::new("mem")).is_err());
    }
}
