//! Checkpoint files.
//!
//! Layout: the 8-byte magic `RERAWCK1`, a little-endian `u64` header length,
//! a JSON header, then `f64` little-endian weights in [`Params`] order. When
//! the header carries optimizer state, the Adam first and second moments
//! follow the weights in the same order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::SensorProfile;
use crate::model::{ReRawConfig, ReRawModel};
use crate::nn::Params;
use crate::trainer::{AdamState, TrainConfig};

const MAGIC: &[u8; 8] = b"RERAWCK1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub config: TrainConfig,
    /// Epochs completed.
    pub epoch: usize,
    pub step: usize,
    pub adam_steps: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    version: u32,
    model: ReRawConfig,
    n_weights: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sensor: Option<SensorProfile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    train: Option<TrainState>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: ReRawModel,
    pub sensor: Option<SensorProfile>,
    pub train: Option<(TrainState, AdamState)>,
}

fn push(buf: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn inference(model: ReRawModel, sensor: Option<SensorProfile>) -> Self {
        Checkpoint { model, sensor, train: None }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let weights = self.model.network().flatten();
        let header = Header {
            version: 1,
            model: self.model.config().clone(),
            n_weights: weights.len(),
            sensor: self.sensor.clone(),
            train: self.train.as_ref().map(|(s, _)| s.clone()),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::format(path, e.to_string()))?;
        let mut buf = Vec::with_capacity(16 + json.len() + weights.len() * 24);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
        buf.extend_from_slice(&json);
        push(&mut buf, &weights);
        if let Some((_, adam)) = &self.train {
            push(&mut buf, &adam.m);
            push(&mut buf, &adam.v);
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, buf).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |msg: &str| Error::Checkpoint(format!("{}: {msg}", path.display()));
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..).ok_or_else(|| bad("truncated"))?;
        if body.len() < hlen {
            return Err(bad("truncated header"));
        }
        let header: Header = serde_json::from_slice(&body[..hlen]).map_err(|e| bad(&e.to_string()))?;
        if header.version != 1 {
            return Err(bad("unsupported version"));
        }
        let values: Vec<f64> = body[hlen..]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        let n = header.n_weights;
        let expected = if header.train.is_some() { 3 * n } else { n };
        if values.len() != expected || body[hlen..].len() % 8 != 0 {
            return Err(bad(&format!("expected {expected} values, found {}", values.len())));
        }
        let model = ReRawModel::from_parts(header.model, &values[..n])?;
        let train = header.train.map(|state| {
            let adam = AdamState { m: values[n..2 * n].to_vec(), v: values[2 * n..].to_vec(), t: state.adam_steps };
            (state, adam)
        });
        Ok(Checkpoint { model, sensor: header.sensor, train })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_weights_and_state() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = ReRawModel::new(ReRawConfig::desk().with_heads(2)).unwrap();
        let n = model.network().param_count();
        let state = TrainState { config: TrainConfig::default(), epoch: 3, step: 12, adam_steps: 12 };
        let adam = AdamState { m: vec![0.5; n], v: vec![0.25; n], t: 12 };
        let ck = Checkpoint { model: model.clone(), sensor: None, train: Some((state.clone(), adam.clone())) };
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.model, model);
        assert_eq!(back.train, Some((state, adam)));
    }

    #[test]
    fn rejects_garbage_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        fs::write(&path, b"hello world, not a model").unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Checkpoint(_))));

        let model = ReRawModel::new(ReRawConfig::desk().with_heads(1)).unwrap();
        Checkpoint::inference(model, None).save(&path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 8);
        fs::write(&path, bytes).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Checkpoint(_))));
    }
}
