//! Binary checkpoint format.
//!
//! ```text
//! "TCLP" | u32 version | u32 len, JSON config | u32 count |
//!   count x (u16 len, name | u8 rank | rank x u32 dim | f32 data)
//! ```
//! All integers and floats are little-endian; tensors appear in lexicographic name order.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DualEncoder, EncoderConfig, ModelError};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 4] = b"TCLP";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Training provenance stored beside the weights.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainMeta {
    pub step: u64,
    pub pairs_seen: u64,
    pub seed: u64,
    pub objective: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigBlob {
    encoder: EncoderConfig,
    train: TrainMeta,
}

pub fn encode_checkpoint(model: &DualEncoder, meta: &TrainMeta) -> Result<Vec<u8>, ModelError> {
    let blob = serde_json::to_vec(&ConfigBlob { encoder: model.config().clone(), train: meta.clone() })?;
    let mut out = Vec::with_capacity(model.param_count() * 4 + blob.len() + 64);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(blob.len() as u32).to_le_bytes());
    out.extend_from_slice(&blob);
    out.extend_from_slice(&(model.params().len() as u32).to_le_bytes());
    for (name, t) in model.params() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Writes to a sibling temp file and renames it into place.
pub fn save_checkpoint(model: &DualEncoder, meta: &TrainMeta, path: &Path) -> Result<(), ModelError> {
    let bytes = encode_checkpoint(model, meta)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut tmp_name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], ModelError> {
        if self.buf.len() - self.pos < n {
            return Err(ModelError::Truncated(format!("while reading {what} at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u16(&mut self, what: &str) -> Result<u16, ModelError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u8(&mut self, what: &str) -> Result<u8, ModelError> {
        Ok(self.take(1, what)?[0])
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(DualEncoder, TrainMeta), ModelError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic = r.take(4, "magic").map_err(|_| ModelError::BadMagic)?;
    if magic != MAGIC {
        return Err(ModelError::BadMagic);
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::VersionSkew { found: version, supported: CHECKPOINT_VERSION });
    }
    let blob_len = r.u32("config length")? as usize;
    let blob: ConfigBlob = serde_json::from_slice(r.take(blob_len, "config")?)?;
    let count = r.u32("tensor count")?;
    let mut params = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.u16("tensor name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
            .map_err(|_| ModelError::Corrupt("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u8("tensor rank")? as usize;
        let shape = (0..rank).map(|_| r.u32("tensor dims").map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n * 4, &format!("data of '{name}'"))?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        let t = Tensor::new(&shape, data).map_err(|e| ModelError::Corrupt(format!("tensor '{name}': {e}")))?;
        if params.insert(name.clone(), t).is_some() {
            return Err(ModelError::Corrupt(format!("duplicate tensor '{name}'")));
        }
    }
    if r.pos != bytes.len() {
        return Err(ModelError::Corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok((DualEncoder::from_params(blob.encoder, params)?, blob.train))
}

pub fn load_checkpoint(path: &Path) -> Result<(DualEncoder, TrainMeta), ModelError> {
    decode_checkpoint(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DualEncoder {
        let cfg = EncoderConfig { d_model: 16, d_embed: 8, n_blocks: 1, n_heads: 2, ..Default::default() };
        DualEncoder::new(cfg, 4).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = small();
        let meta = TrainMeta { step: 3, pairs_seen: 192, seed: 4, objective: "clip".into() };
        let (back, meta2) = decode_checkpoint(&encode_checkpoint(&m, &meta).unwrap()).unwrap();
        assert_eq!(meta2, meta);
        for (name, t) in m.params() {
            let u = back.param(name).unwrap();
            let a: Vec<u32> = t.data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = u.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b, "{name}");
        }
    }

    #[test]
    fn distinct_error_kinds() {
        let m = small();
        let bytes = encode_checkpoint(&m, &TrainMeta::default()).unwrap();
        let cut = &bytes[..bytes.len() - 1];
        assert!(matches!(decode_checkpoint(cut), Err(ModelError::Truncated(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint(&bad), Err(ModelError::BadMagic)));
        let mut skew = bytes.clone();
        skew[4] = 9;
        assert!(matches!(decode_checkpoint(&skew), Err(ModelError::VersionSkew { found: 9, .. })));
    }
}
