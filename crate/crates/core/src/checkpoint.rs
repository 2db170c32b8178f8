//! Saving and loading whole models: parameters plus the configuration and
//! vocabularies needed to rebuild them, in the container described in
//! [`crate::params`].

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Vocabulary;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::params::ParameterStore;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub vocab: Vocabulary,
}

pub fn write_model<W: Write>(model: &Model, w: W) -> Result<()> {
    let meta = CheckpointMeta {
        model: model.config.clone(),
        vocab: model.vocab.clone(),
    };
    model.params.write_checkpoint(&serde_json::to_string(&meta)?, w)
}

pub fn read_model<R: Read>(r: R) -> Result<Model> {
    let (params, meta) = ParameterStore::read_checkpoint(r)?;
    let meta: CheckpointMeta =
        serde_json::from_str(&meta).map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
    Model::from_parts(meta.model, meta.vocab, params)
}

pub fn save_model(model: &Model, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_model(model, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<Model> {
    read_model(BufReader::new(File::open(path)?))
}
