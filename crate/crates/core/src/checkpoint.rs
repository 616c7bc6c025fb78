//! Binary checkpoints: a magic tag, a format version, a JSON header and the
//! parameter values as little-endian `f64`.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::losses::Stage;
use crate::model::Model;
use crate::params::Block;

const MAGIC: &[u8; 8] = b"MMFSCKPT";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamMeta {
    pub name: String,
    pub block: Block,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    /// Training stages completed, in order.
    pub stages: Vec<Stage>,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub input_dim: usize,
    pub vocabulary: Vec<String>,
    pub params: Vec<ParamMeta>,
}

/// A model with the configuration and training history it came from.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: ExperimentConfig,
    pub stages: Vec<Stage>,
    pub model: Model,
}

impl Checkpoint {
    pub fn config_hash(&self) -> String {
        self.config.hash()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = CheckpointHeader {
            stages: self.stages.clone(),
            config_hash: self.config_hash(),
            config: self.config.clone(),
            input_dim: self.model.input_dim,
            vocabulary: self.model.vocab.words().to_vec(),
            params: self
                .model
                .params
                .iter()
                .map(|(_, e)| ParamMeta {
                    name: e.name.clone(),
                    block: e.block,
                    rows: e.value.rows(),
                    cols: e.value.cols(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out =
            Vec::with_capacity(json.len() + 20 + 8 * self.model.params.count_in(crate::params::BlockSet::all()));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, e) in self.model.params.iter() {
            for v in e.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let mut word = [0u8; 4];
        read_exact(&mut r, &mut word)?;
        let version = u32::from_le_bytes(word);
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let mut len = [0u8; 8];
        read_exact(&mut r, &mut len)?;
        let len = usize::try_from(u64::from_le_bytes(len)).map_err(|_| Error::Checkpoint("header too large".into()))?;
        if len > r.len() {
            return Err(Error::Checkpoint("truncated header".into()));
        }
        let header: CheckpointHeader = serde_json::from_slice(&r[..len])?;
        r = &r[len..];
        if header.config.hash() != header.config_hash {
            return Err(Error::Checkpoint("header hash does not match its configuration".into()));
        }

        let mut model = Model::new(
            header.config.model.clone(),
            header.input_dim,
            header.vocabulary,
            None,
            0,
        )?;
        let mut seen = 0;
        for meta in &header.params {
            let id = model
                .params
                .id(&meta.name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {}", meta.name)))?;
            let value = model.params.value_mut(id);
            if (value.rows(), value.cols()) != (meta.rows, meta.cols) {
                return Err(Error::Checkpoint(format!(
                    "parameter {} is {}x{}, model expects {}x{}",
                    meta.name,
                    meta.rows,
                    meta.cols,
                    value.rows(),
                    value.cols()
                )));
            }
            for v in value.data_mut() {
                let mut b = [0u8; 8];
                read_exact(&mut r, &mut b)?;
                *v = f64::from_le_bytes(b);
            }
            seen += 1;
        }
        if seen != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {seen} parameters, model has {}",
                model.params.len()
            )));
        }
        if !r.is_empty() {
            return Err(Error::Checkpoint("trailing bytes after parameters".into()));
        }
        Ok(Self {
            config: header.config,
            stages: header.stages,
            model,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Checkpoint("truncated file".into()))
}
