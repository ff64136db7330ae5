//! Dataset manifests: per-split image lists with ground-truth graphs.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{GtEdge, SceneGraphGt, SceneNode, Task, TripletSet};
use crate::hierarchy::{LabelSpace, ObjectCategoryId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One image: ground truth plus the per-task node sets used at evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageRecord {
    pub id: String,
    pub width: f64,
    pub height: f64,
    /// Feature grid container, relative to the manifest's directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic_seed: Option<u64>,
    pub nodes: Vec<SceneNode>,
    pub edges: Vec<GtEdge>,
    /// Set when no relationship survived parsing.
    #[serde(default)]
    pub empty: bool,
    /// Predicted labels for the GT boxes (classification task).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predicted_labels: Option<Vec<ObjectCategoryId>>,
    /// Detected boxes with labels (detection task).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detections: Option<Vec<SceneNode>>,
}

impl ImageRecord {
    pub fn gt(&self) -> SceneGraphGt {
        SceneGraphGt {
            nodes: self.nodes.clone(),
            edges: self.edges.clone(),
        }
    }

    /// Nodes a model sees for `task`.
    pub fn task_nodes(&self, task: Task) -> Result<Vec<SceneNode>> {
        match task {
            Task::PredCls => Ok(self.nodes.clone()),
            Task::SgCls => {
                let labels = self.predicted_labels.as_ref().ok_or_else(|| {
                    Error::invalid(format!("image {}: sgcls needs predicted labels", self.id))
                })?;
                Ok(self
                    .nodes
                    .iter()
                    .zip(labels)
                    .map(|(n, &label)| SceneNode { bbox: n.bbox, label })
                    .collect())
            }
            Task::SgDet => self
                .detections
                .clone()
                .ok_or_else(|| Error::invalid(format!("image {}: sgdet needs detections", self.id))),
        }
    }

    pub fn validate(&self, space: &LabelSpace) -> Result<()> {
        let ctx = |e: Error| Error::invalid(format!("image {}: {e}", self.id));
        if !(self.width > 0.0 && self.height > 0.0) {
            return Err(ctx(Error::invalid("size must be positive")));
        }
        self.gt().validate(space).map_err(ctx)?;
        if let Some(labels) = &self.predicted_labels {
            if labels.len() != self.nodes.len() {
                return Err(ctx(Error::invalid("predicted_labels length differs from nodes")));
            }
            for &l in labels {
                space.check_object(l).map_err(ctx)?;
            }
        }
        for d in self.detections.iter().flatten() {
            space.check_object(d.label).map_err(ctx)?;
            d.bbox.validate().map_err(ctx)?;
        }
        Ok(())
    }
}

/// Items removed during ingestion.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DropCounts {
    pub unknown_object: usize,
    pub degenerate_box: usize,
    pub unknown_predicate: usize,
    /// Relationships whose subject or object was itself dropped.
    pub orphaned_relationship: usize,
    pub self_relationship: usize,
    pub duplicate_relationship: usize,
}

impl DropCounts {
    pub fn total(&self) -> usize {
        self.unknown_object
            + self.degenerate_box
            + self.unknown_predicate
            + self.orphaned_relationship
            + self.self_relationship
            + self.duplicate_relationship
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub split: Split,
    /// SHA-256 of the canonical hierarchy JSON the label indices refer to.
    pub hierarchy_sha256: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hierarchy_file: Option<String>,
    pub images: Vec<ImageRecord>,
    #[serde(default)]
    pub dropped: DropCounts,
}

impl DatasetManifest {
    pub fn validate(&self, space: &LabelSpace) -> Result<()> {
        if self.hierarchy_sha256 != space.digest() {
            return Err(Error::Mismatch("manifest was built against a different hierarchy".into()));
        }
        let mut ids = BTreeSet::new();
        for img in &self.images {
            if !ids.insert(img.id.as_str()) {
                return Err(Error::invalid(format!("duplicate image id {:?}", img.id)));
            }
            img.validate(space)?;
        }
        Ok(())
    }

    pub fn image(&self, id: &str) -> Result<&ImageRecord> {
        self.images
            .iter()
            .find(|i| i.id == id)
            .ok_or_else(|| Error::invalid(format!("no image {id:?} in the {:?} split", self.split)))
    }

    pub fn edge_count(&self) -> usize {
        self.images.iter().map(|i| i.edges.len()).sum()
    }

    /// Label triplets of every GT edge.
    pub fn triplets(&self) -> TripletSet {
        self.images
            .iter()
            .flat_map(|img| {
                let gt = img.gt();
                img.edges.iter().map(move |e| gt.triplet(e)).collect::<Vec<_>>()
            })
            .collect()
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string_pretty(self)?;
        std::fs::write(path, s + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Triplet set as stored on disk: `[subject label, predicate, object label]` names.
pub fn triplets_to_json(set: &TripletSet, space: &LabelSpace) -> Result<String> {
    let rows: Vec<[&str; 3]> = set
        .iter()
        .map(|&(s, p, o)| [space.object_name(s), space.predicate_name(p), space.object_name(o)])
        .collect();
    Ok(serde_json::to_string_pretty(&rows)? + "\n")
}

pub fn triplets_from_json(s: &str, space: &LabelSpace) -> Result<TripletSet> {
    let rows: Vec<[String; 3]> = serde_json::from_str(s)?;
    let obj = |n: &str| space.object_id(n).ok_or_else(|| Error::invalid(format!("unknown object category {n:?}")));
    rows.iter()
        .map(|[s, p, o]| {
            let pred = space
                .predicate_id(p)
                .ok_or_else(|| Error::invalid(format!("unknown predicate {p:?}")))?;
            Ok((obj(s)?, pred, obj(o)?))
        })
        .collect()
}

pub fn load_triplets(path: &Path, space: &LabelSpace) -> Result<TripletSet> {
    let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    triplets_from_json(&s, space)
}
