//! Binary checkpoints: `ERGOCKPT`, a little-endian `u32` version, a `u64`
//! header length, the JSON header, then every parameter value as a
//! little-endian `f64` in store order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::graph::SkeletonTopology;
use crate::losses::LossWeights;
use crate::model::{Model, ModelConfig};
use crate::tensor::{ParamStore, Tensor};

const MAGIC: &[u8; 8] = b"ERGOCKPT";
const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("checkpoint is truncated")]
    Truncated,
    #[error("checkpoint parameter {0} does not match the model")]
    Layout(String),
    #[error("checkpoint topology: {0}")]
    Topology(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    pub topology: String,
    pub topology_hash: String,
    pub class_names: Vec<String>,
    pub learning_rate: f64,
    pub epoch: usize,
    pub seed: u64,
    pub params: Vec<ParamEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub store: ParamStore,
}

impl Checkpoint {
    pub fn new(
        model: &Model,
        store: &ParamStore,
        class_names: Vec<String>,
        learning_rate: f64,
        epoch: usize,
        seed: u64,
    ) -> Self {
        let params = store
            .iter()
            .map(|(_, name, t)| ParamEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect();
        Self {
            header: CheckpointHeader {
                model: model.config.clone(),
                topology: model.topology.to_text(),
                topology_hash: model.topology.hash(),
                class_names,
                learning_rate,
                epoch,
                seed,
                params,
            },
            store: store.clone(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        let mut out = Vec::with_capacity(20 + header.len() + 8 * self.store.numel());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, _, t) in self.store.iter() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let take = |at: usize, n: usize| bytes.get(at..at + n).ok_or(CheckpointError::Truncated);
        if take(0, 8)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = u32::from_le_bytes(take(8, 4)?.try_into().unwrap());
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let len = u64::from_le_bytes(take(12, 8)?.try_into().unwrap()) as usize;
        let header: CheckpointHeader = serde_json::from_slice(take(20, len)?)?;
        let mut at = 20 + len;
        let mut store = ParamStore::new();
        for p in &header.params {
            let n: usize = p.shape.iter().product();
            let raw = take(at, 8 * n)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            store.add(p.name.clone(), Tensor::new(&p.shape, data));
            at += 8 * n;
        }
        if at != bytes.len() {
            return Err(CheckpointError::Layout("trailing bytes".into()));
        }
        Ok(Self { header, store })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn topology(&self) -> Result<SkeletonTopology, CheckpointError> {
        let topo = SkeletonTopology::parse(&self.header.topology).map_err(|e| CheckpointError::Topology(e.to_string()))?;
        if topo.hash() != self.header.topology_hash {
            return Err(CheckpointError::Topology("stored hash does not match stored skeleton".into()));
        }
        Ok(topo)
    }

    /// Rebuilds the model and a parameter store holding the saved values.
    pub fn instantiate(&self) -> Result<(Model, ParamStore), CheckpointError> {
        let mut store = ParamStore::new();
        let model = Model::new(self.header.model.clone(), self.topology()?, &mut store, 0);
        LossWeights::new(&mut store);
        if store.len() != self.store.len() {
            return Err(CheckpointError::Layout(format!(
                "{} parameters stored, model has {}",
                self.store.len(),
                store.len()
            )));
        }
        for ((id, name, t), (_, saved_name, saved)) in store.clone().iter().zip(self.store.iter()) {
            if name != saved_name || t.shape() != saved.shape() {
                return Err(CheckpointError::Layout(saved_name.to_string()));
            }
            *store.get_mut(id) = saved.clone();
        }
        Ok((model, store))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelVariant;

    fn tiny() -> (Model, ParamStore) {
        let mut cfg = ModelConfig::new(ModelVariant::MtlEmb, 3);
        cfg.gcn_channels = vec![4, 4];
        cfg.pooled_width = 16;
        cfg.tcn.hidden = [4, 4];
        cfg.tcn.fc_hidden = 4;
        cfg.regressor_width = 4;
        cfg.recurrent_hidden = 3;
        let mut store = ParamStore::new();
        let model = Model::new(cfg, SkeletonTopology::canonical(), &mut store, 5);
        LossWeights::new(&mut store);
        (model, store)
    }

    #[test]
    fn bytes_round_trip_bit_exact() {
        let (model, store) = tiny();
        let ck = Checkpoint::new(&model, &store, vec!["a".into(), "b".into(), "c".into()], 1e-3, 4, 7);
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);
        let (_, restored) = back.instantiate().unwrap();
        for ((_, _, a), (_, _, b)) in restored.iter().zip(store.iter()) {
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let (model, store) = tiny();
        let bytes = Checkpoint::new(&model, &store, vec![], 1e-3, 1, 0).to_bytes();
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]), Err(CheckpointError::Truncated)));
        assert!(matches!(Checkpoint::from_bytes(b"NOTACKPT"), Err(CheckpointError::BadMagic)));
    }
}
