//! Model checkpoints on top of the tensor container.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::assembly::AssemblyParams;
use crate::autodiff::Tensor;
use crate::data::container::Container;
use crate::error::{Error, Result};
use crate::head::{FlatHeadParams, HeadMode, HeadParams};
use crate::hierarchy::LabelSpace;
use crate::model::{HeadKind, HeadWeights, Model};

/// Container header of a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub kind: String,
    pub head: HeadKind,
    pub mode: HeadMode,
    pub hierarchy_sha256: String,
    pub input_dim: usize,
    pub hidden_dim: usize,
    /// Free-form provenance, e.g. the resolved training config.
    #[serde(default)]
    pub meta: serde_json::Value,
}

pub const CHECKPOINT_KIND: &str = "checkpoint";

pub fn params_to_container(model: &Model, space: &LabelSpace, meta: serde_json::Value) -> Result<Container> {
    model.validate(space)?;
    let header = CheckpointHeader {
        kind: CHECKPOINT_KIND.into(),
        head: model.kind(),
        mode: model.mode,
        hierarchy_sha256: space.digest(),
        input_dim: model.input_dim(),
        hidden_dim: model.hidden_dim(),
        meta,
    };
    let mut c = Container::new(serde_json::to_value(&header)?);
    for (name, t) in model.tensors() {
        c.push(name, t.clone());
    }
    Ok(c)
}

pub fn params_from_container(c: &Container, space: &LabelSpace) -> Result<(Model, CheckpointHeader)> {
    let header: CheckpointHeader = serde_json::from_value(c.header.clone())
        .map_err(|e| Error::Corrupt(format!("checkpoint header: {e}")))?;
    if header.kind != CHECKPOINT_KIND {
        return Err(Error::Mismatch(format!("container holds {:?}, not a checkpoint", header.kind)));
    }
    if header.hierarchy_sha256 != space.digest() {
        return Err(Error::Mismatch("checkpoint was trained against a different hierarchy".into()));
    }
    let take = |name: &str| -> Result<Tensor> {
        c.get(name)
            .cloned()
            .ok_or_else(|| Error::Mismatch(format!("checkpoint lacks tensor {name:?}")))
    };
    let projection = take("projection")?;
    let w_conn = take("w_conn")?;
    let head = match header.head {
        HeadKind::Hierarchical => HeadWeights::Hierarchical(HeadParams {
            w_conn,
            w_sup: take("w_sup")?,
            w_sub: (0..space.num_supers()).map(|s| take(&format!("w_sub.{s}"))).collect::<Result<_>>()?,
        }),
        HeadKind::Flat => HeadWeights::Flat(FlatHeadParams { w_conn, w_flat: take("w_flat")? }),
    };
    let model = Model {
        assembly: AssemblyParams { projection },
        head,
        mode: header.mode,
    };
    if model.tensors().len() != c.tensors.len() {
        return Err(Error::Mismatch("checkpoint holds unexpected tensors".into()));
    }
    model.validate(space).map_err(|e| Error::Mismatch(e.to_string()))?;
    if model.input_dim() != header.input_dim || model.hidden_dim() != header.hidden_dim {
        return Err(Error::Mismatch("tensor shapes disagree with the header".into()));
    }
    Ok((model, header))
}

pub fn save_params(model: &Model, space: &LabelSpace, path: &Path, meta: serde_json::Value) -> Result<()> {
    params_to_container(model, space, meta)?.write(path)
}

pub fn load_params(path: &Path, space: &LabelSpace) -> Result<(Model, CheckpointHeader)> {
    params_from_container(&Container::read(path)?, space)
}
