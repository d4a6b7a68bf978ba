//! Binary parameter checkpoints.
//!
//! Layout: the magic `AXRX1`, then for each parameter in name order a
//! little-endian `u32` name length, the UTF-8 name, a `u32` rank, `rank`
//! `u32` dimensions and the `f64` payload. The file ends after the last
//! parameter.

use std::path::Path;

use crate::error::{Error, Result};
use crate::layers::{ParamStore, Variant};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 5] = b"AXRX1";

pub fn to_bytes(params: &ParamStore) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    for (name, t) in params {
        out.extend((name.len() as u32).to_le_bytes());
        out.extend(name.as_bytes());
        out.extend((t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend((d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend(v.to_le_bytes());
        }
    }
    out
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
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

pub fn from_bytes(buf: &[u8]) -> std::result::Result<ParamStore, String> {
    if buf.len() < MAGIC.len() || &buf[..MAGIC.len()] != MAGIC {
        return Err("missing AXRX1 magic".into());
    }
    let mut r = Reader {
        buf,
        pos: MAGIC.len(),
    };
    let mut params = ParamStore::new();
    while r.pos < buf.len() {
        let len = r.u32()?;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| "parameter name is not UTF-8".to_string())?
            .to_string();
        let rank = r.u32()?;
        if rank > 8 {
            return Err(format!("{name}: implausible rank {rank}"));
        }
        let shape = (0..rank).map(|_| r.u32()).collect::<std::result::Result<Vec<_>, _>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| format!("{name}: shape overflow"))?;
        let bytes = r.take(numel.checked_mul(8).ok_or_else(|| format!("{name}: shape overflow"))?)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let t = Tensor::new(&shape, data).map_err(|e| format!("{name}: {e}"))?;
        if params.insert(name.clone(), t).is_some() {
            return Err(format!("duplicate parameter {name}"));
        }
    }
    Ok(params)
}

pub fn save(path: &Path, params: &ParamStore) -> Result<()> {
    std::fs::write(path, to_bytes(params))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ParamStore> {
    let err = |reason: String| Error::Checkpoint {
        path: path.display().to_string(),
        reason,
    };
    let buf = std::fs::read(path).map_err(|e| err(e.to_string()))?;
    from_bytes(&buf).map_err(err)
}

/// Architecture implied by the parameter names.
pub fn infer_variant(params: &ParamStore) -> Option<Variant> {
    let has = |suffix: &str| params.keys().any(|k| k.ends_with(suffix));
    if params.keys().any(|k| k.starts_with("unit")) {
        Some(Variant::CnnResnet)
    } else if has(".time.wq") {
        Some(Variant::Axial)
    } else if has(".attn.wq") || params.contains_key("pos") {
        Some(Variant::Global)
    } else {
        None
    }
}
