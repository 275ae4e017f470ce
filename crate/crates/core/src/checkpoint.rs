//! Binary model checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset  size  field
//! 0       8     magic "AR1VAECK"
//! 8       4     u32 format version (currently 1)
//! 12      4     u32 metadata length M
//! 16      M     metadata, UTF-8 JSON (CheckpointMeta)
//! 16+M    4     u32 tensor count T
//! then T records:
//!         4     u32 name length L
//!         L     tensor name, UTF-8 (e.g. "encoder.0.weight")
//!         8     u64 value count K
//!         8K    K f64 values
//! ```
//!
//! Tensors appear in optimizer order: encoder layers, heads (`mu`, then
//! `log_var` or `log_s`, `rho_raw`), decoder layers; weight before bias;
//! weights row-major `outputs × inputs`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::{Vae, VaeSpec};
use crate::trainer::TrainConfig;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"AR1VAECK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub spec: VaeSpec,
    pub image_rows: usize,
    pub image_cols: usize,
    pub config: Option<TrainConfig>,
}

pub fn write_checkpoint(model: &Vae, meta: &CheckpointMeta) -> Vec<u8> {
    let json = serde_json::to_vec(meta).expect("checkpoint metadata serializes");
    let tensors = model.named_tensors();
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, values, _) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(values.len() as u64).to_le_bytes());
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Checkpoint(format!("truncated while reading {what} at byte {}", self.pos))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<(Vae, CheckpointMeta)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let meta_len = r.u32("metadata length")? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len, "metadata")?)
        .map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
    if meta.image_rows * meta.image_cols != meta.spec.input_dim {
        return Err(Error::Checkpoint(format!(
            "image shape {}x{} does not match input dimension {}",
            meta.image_rows, meta.image_cols, meta.spec.input_dim
        )));
    }

    let mut model = Vae::zeroed(meta.spec)?;
    let expected: Vec<(String, usize)> = model.named_tensors().into_iter().map(|(n, v, _)| (n, v.len())).collect();
    let count = r.u32("tensor count")? as usize;
    if count != expected.len() {
        return Err(Error::Checkpoint(format!("expected {} tensors, found {count}", expected.len())));
    }
    let mut flat = Vec::with_capacity(model.param_count());
    for (want_name, want_len) in &expected {
        let name_len = r.u32("tensor name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        if name != want_name {
            return Err(Error::Checkpoint(format!("expected tensor {want_name}, found {name}")));
        }
        let len = r.u64("tensor length")? as usize;
        if len != *want_len {
            return Err(Error::Checkpoint(format!("tensor {name}: expected {want_len} values, found {len}")));
        }
        let raw = r.take(len.saturating_mul(8), name)?;
        flat.extend(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))));
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    model.set_params_flat(&flat)?;
    Ok((model, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{Activation, PosteriorKind};

    fn meta(kind: PosteriorKind) -> CheckpointMeta {
        CheckpointMeta {
            spec: VaeSpec {
                input_dim: 6,
                hidden_dim: 4,
                latent_dim: 2,
                posterior: kind,
                output_activation: Activation::Sigmoid,
            },
            image_rows: 2,
            image_cols: 3,
            config: Some(TrainConfig::default()),
        }
    }

    #[test]
    fn roundtrip() {
        for kind in [PosteriorKind::Diag, PosteriorKind::Ar1] {
            let m = meta(kind);
            let vae = Vae::new(m.spec, 12).unwrap();
            let bytes = write_checkpoint(&vae, &m);
            assert_eq!(&bytes[..8], CHECKPOINT_MAGIC);
            let (back, meta_back) = read_checkpoint(&bytes).unwrap();
            assert_eq!(meta_back, m);
            assert_eq!(back.params_flat(), vae.params_flat());
            assert_eq!(write_checkpoint(&back, &meta_back), bytes);
        }
    }

    #[test]
    fn rejects_corruption() {
        let m = meta(PosteriorKind::Ar1);
        let bytes = write_checkpoint(&Vae::new(m.spec, 1).unwrap(), &m);
        assert!(read_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(read_checkpoint(&extra).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(read_checkpoint(&bad).is_err());
        let mut bad = bytes;
        bad[8] = 9;
        assert!(read_checkpoint(&bad).unwrap_err().to_string().contains("version"));
    }
}
