//! Checkpoints: a [`container`](crate::container) of kind `Checkpoint`.
//! The metadata holds the method, both configs and the training progress;
//! the body is
//!
//! ```text
//! count u64
//! count x tensor   param/<name>, best/<name>, m/<name>, v/<name>
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::Model;
use super::train::{TrainProgress, Trainer};
use super::{Method, TrainConfig};
use crate::autodiff::{Adam, Tensor};
use crate::container::{write_atomically, ContainerReader, ContainerWriter, Kind};
use crate::error::Result;
use crate::sysmodel::SystemConfig;

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    method: Method,
    config: SystemConfig,
    train_config: TrainConfig,
    layers: usize,
    adam_step: u64,
    progress: TrainProgress,
}

impl Trainer {
    pub fn write_to<W: Write>(&self, out: W) -> Result<W> {
        let meta = CheckpointMeta {
            method: self.model.method,
            config: self.model.cfg.clone(),
            train_config: self.cfg.clone(),
            layers: self.model.layers,
            adam_step: self.adam.step,
            progress: self.progress.clone(),
        };
        let mut w = ContainerWriter::new(out, Kind::Checkpoint, &serde_json::to_string(&meta)?)?;
        let state = self.adam.state_tensors(&self.model.params);
        w.u64((2 * self.model.params.len() + state.len()) as u64)?;
        self.model.params.write_tensors(&mut w, "param/")?;
        self.best.write_tensors(&mut w, "best/")?;
        for (name, t) in &state {
            w.tensor(name, t.shape(), t.data())?;
        }
        w.finish()
    }

    pub fn read_from<R: Read>(input: R) -> Result<Self> {
        let mut rd = ContainerReader::new(input)?;
        rd.expect_kind(Kind::Checkpoint)?;
        let meta: CheckpointMeta = serde_json::from_str(&rd.json)?;
        let count = rd.u64()?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let (name, shape, data) = rd.tensor()?;
            tensors.insert(name, Tensor::new(shape, data)?);
        }
        rd.expect_end()?;

        let mut model = Model::new(meta.method, &meta.config, meta.layers, meta.train_config.seed)?;
        model.params.load_tensors(&tensors, "param/")?;
        let mut best = model.params.clone();
        best.load_tensors(&tensors, "best/")?;
        let mut adam = Adam::new(&model.params);
        adam.load_state(&model.params, meta.adam_step, |k| tensors.get(k).cloned())?;
        meta.train_config.validate()?;
        Ok(Self {
            model,
            best,
            adam,
            progress: meta.progress,
            cfg: meta.train_config,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomically(path, |w| self.write_to(w).map(drop))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)
            .map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))?;
        Self::read_from(std::io::BufReader::new(file))
    }
}
