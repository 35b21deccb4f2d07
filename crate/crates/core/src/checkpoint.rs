//! Versioned binary checkpoints.
//!
//! Layout (little-endian): magic `SASCKPT1`, u32 format version, u64
//! iteration, u32 config length + JSON config snapshot, u32 tensor count,
//! then per tensor: u32 name length, name, u32 rows, u32 cols and three
//! float32 blocks (value, first Adam moment, second Adam moment). A SHA-256
//! digest of everything before it closes the file.

use std::path::Path;

use ndarray::Array2;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{Result, SasError};
use crate::model::SasModel;
use crate::params::ParamStore;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SASCKPT1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub iter: u64,
    pub config: RunConfig,
    pub params: ParamStore<f32>,
    pub adam_m: Vec<Array2<f32>>,
    pub adam_v: Vec<Array2<f32>>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend(CHECKPOINT_VERSION.to_le_bytes());
        out.extend(self.iter.to_le_bytes());
        let json = serde_json::to_vec(&self.config).expect("config serializes");
        out.extend((json.len() as u32).to_le_bytes());
        out.extend(&json);
        out.extend((self.params.len() as u32).to_le_bytes());
        for id in self.params.ids() {
            let name = self.params.name(id).as_bytes();
            let value = self.params.get(id);
            out.extend((name.len() as u32).to_le_bytes());
            out.extend(name);
            out.extend((value.nrows() as u32).to_le_bytes());
            out.extend((value.ncols() as u32).to_le_bytes());
            for block in [value, &self.adam_m[id.0], &self.adam_v[id.0]] {
                for v in block.iter() {
                    out.extend(v.to_le_bytes());
                }
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < CHECKPOINT_MAGIC.len() + 4 + 32 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(SasError::Corrupt("missing checkpoint header".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(SasError::Mismatch(format!(
                "checkpoint format version {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(SasError::Corrupt("checksum mismatch (truncated or modified file)".into()));
        }
        let mut r = Reader { bytes: body, at: 12 };
        let iter = r.u64()?;
        let json_len = r.u32()? as usize;
        let config: RunConfig = serde_json::from_slice(r.take(json_len)?)
            .map_err(|e| SasError::Corrupt(format!("config snapshot: {e}")))?;
        let n = r.u32()? as usize;
        let mut params = ParamStore::new();
        let mut adam_m = Vec::with_capacity(n);
        let mut adam_v = Vec::with_capacity(n);
        for _ in 0..n {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| SasError::Corrupt("parameter name is not UTF-8".into()))?
                .to_string();
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            params.add(name, r.matrix(rows, cols)?);
            adam_m.push(r.matrix(rows, cols)?);
            adam_v.push(r.matrix(rows, cols)?);
        }
        if r.at != body.len() {
            return Err(SasError::Corrupt("trailing bytes after parameter blocks".into()));
        }
        Ok(Self { iter, config, params, adam_m, adam_v })
    }

    /// Rebuilds the model, requiring every parameter by name and shape.
    pub fn model(&self) -> Result<SasModel<f32>> {
        let mut model = SasModel::<f32>::new(self.config.model(), self.config.trainer.seed)?;
        if model.store.len() != self.params.len() {
            return Err(SasError::Mismatch(format!(
                "checkpoint has {} tensors, model expects {}",
                self.params.len(),
                model.store.len()
            )));
        }
        for id in model.store.ids().collect::<Vec<_>>() {
            let name = model.store.name(id).to_string();
            let src = self
                .params
                .find(&name)
                .ok_or_else(|| SasError::Mismatch(format!("checkpoint lacks parameter {name}")))?;
            let value = self.params.get(src);
            if value.dim() != model.store.get(id).dim() {
                return Err(SasError::Mismatch(format!(
                    "parameter {name} has shape {:?}, model expects {:?}",
                    value.dim(),
                    model.store.get(id).dim()
                )));
            }
            *model.store.get_mut(id) = value.clone();
        }
        Ok(model)
    }

    /// Errors unless the checkpoint's network and feature stream match `cfg`.
    pub fn check_compatible(&self, cfg: &RunConfig) -> Result<()> {
        if self.config.model() != cfg.model() {
            return Err(SasError::Mismatch("network configuration differs from the checkpoint".into()));
        }
        if self.config.trainer.feature_mode != cfg.trainer.feature_mode {
            return Err(SasError::Mismatch(format!(
                "checkpoint was trained on {} features, run expects {}",
                self.config.trainer.feature_mode, cfg.trainer.feature_mode
            )));
        }
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.bytes.len() {
            return Err(SasError::Corrupt("unexpected end of checkpoint".into()));
        }
        let out = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Array2<f32>> {
        let n = rows.checked_mul(cols).ok_or_else(|| SasError::Corrupt("tensor too large".into()))?;
        let raw = self.take(n.checked_mul(4).ok_or_else(|| SasError::Corrupt("tensor too large".into()))?)?;
        let values = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        Ok(Array2::from_shape_vec((rows, cols), values).expect("sized"))
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, ckpt.to_bytes()).map_err(|e| SasError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| SasError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| SasError::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::FeatureMode;
    use crate::model::ModelConfig;

    fn micro_run() -> RunConfig {
        let m = ModelConfig::micro(6, 5);
        let mut cfg = RunConfig {
            encoder: m.encoder,
            decoder: m.decoder,
            embedder: m.embedder,
            ..Default::default()
        };
        cfg.audio.n_mels = 4;
        cfg
    }

    fn sample() -> Checkpoint {
        let cfg = micro_run();
        let model = SasModel::<f32>::new(cfg.model(), 3).unwrap();
        let moments: Vec<_> = model.store.ids().map(|id| model.store.get(id).mapv(|v| v * 0.5)).collect();
        Checkpoint {
            iter: 17,
            config: cfg,
            adam_v: moments.iter().map(|m| m.mapv(|v| v * v)).collect(),
            adam_m: moments,
            params: model.store,
        }
    }

    #[test]
    fn byte_stable_round_trip() {
        let ck = sample();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.iter, 17);
        for id in ck.params.ids() {
            assert_eq!(ck.params.get(id), back.params.get(id));
        }
        let model = back.model().unwrap();
        assert_eq!(model.store.get(model.ids.decoder.attn_v), ck.params.get(model.ids.decoder.attn_v));
    }

    #[test]
    fn truncated_and_modified_files_are_corrupt() {
        let bytes = sample().to_bytes();
        for cut in [0, 5, 40, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(SasError::Corrupt(_))));
        }
        let mut flipped = bytes.clone();
        flipped[100] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&flipped), Err(SasError::Corrupt(_))));
        let mut version = bytes;
        version[8] = 9;
        assert!(matches!(Checkpoint::from_bytes(&version), Err(SasError::Mismatch(_))));
    }

    #[test]
    fn compatibility_matrix() {
        let ck = sample();
        let same = ck.config.clone();
        assert!(ck.check_compatible(&same).is_ok());
        let mut grid = same.clone();
        grid.trainer.feature_mode = FeatureMode::BaselineGrid;
        assert!(matches!(ck.check_compatible(&grid), Err(SasError::Mismatch(_))));
        let mut wider = same.clone();
        wider.decoder.rnn_units = 9;
        assert!(matches!(ck.check_compatible(&wider), Err(SasError::Mismatch(_))));
        let mut schedule = same;
        schedule.trainer.eps_min = 100.0;
        assert!(ck.check_compatible(&schedule).is_ok());
    }
}
