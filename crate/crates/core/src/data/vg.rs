//! Visual-Genome-style annotation ingestion.
//!
//! Accepted subset. Objects file: a JSON array of
//! `{"image_id", "width", "height", "objects": [{"object_id", "x", "y", "w", "h", "names": [..]}]}`
//! (`"name": ".."` is accepted in place of `names`). Relationships file: a JSON array of
//! `{"image_id", "relationships": [{"predicate", "subject": {"object_id"}, "object": {"object_id"}}]}`;
//! extra keys inside the subject/object entries are ignored.
//!
//! Names are lower-cased, trimmed and whitespace-collapsed before lookup. The
//! first name of an object that resolves in the label space is used.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::Deserialize;

use crate::assembly::BoundingBox;
use crate::data::manifest::{DatasetManifest, DropCounts, ImageRecord, Split};
use crate::error::{Error, Result};
use crate::eval::{GtEdge, SceneNode};
use crate::hierarchy::LabelSpace;

#[derive(Debug, Deserialize)]
struct VgImageObjects {
    image_id: serde_json::Value,
    width: f64,
    height: f64,
    objects: Vec<VgObject>,
}

#[derive(Debug, Deserialize)]
struct VgObject {
    object_id: u64,
    x: f64,
    y: f64,
    w: f64,
    h: f64,
    #[serde(default)]
    names: Vec<String>,
    #[serde(default)]
    name: Option<String>,
}

#[derive(Debug, Deserialize)]
struct VgImageRelationships {
    image_id: serde_json::Value,
    relationships: Vec<VgRelationship>,
}

#[derive(Debug, Deserialize)]
struct VgRelationship {
    predicate: String,
    subject: VgRef,
    object: VgRef,
}

#[derive(Debug, Deserialize)]
struct VgRef {
    object_id: u64,
}

fn image_key(v: &serde_json::Value) -> Result<String> {
    match v {
        serde_json::Value::String(s) => Ok(s.clone()),
        serde_json::Value::Number(n) if n.is_u64() => Ok(n.to_string()),
        other => Err(Error::invalid(format!("image_id must be a string or non-negative integer, got {other}"))),
    }
}

pub fn normalize_name(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

/// Clips to the image and normalizes; `None` when the clipped box has no area.
fn normalize_box(o: &VgObject, width: f64, height: f64) -> Option<BoundingBox> {
    if ![o.x, o.y, o.w, o.h].iter().all(|v| v.is_finite()) {
        return None;
    }
    let x0 = o.x.clamp(0.0, width);
    let y0 = o.y.clamp(0.0, height);
    let x1 = (o.x + o.w).clamp(0.0, width);
    let y1 = (o.y + o.h).clamp(0.0, height);
    if x1 <= x0 || y1 <= y0 {
        return None;
    }
    BoundingBox::new(x0 / width, y0 / height, x1 / width, y1 / height).ok()
}

/// Parses annotation JSON text into a manifest; see the module docs for the schema.
pub fn parse_vg_str(objects_json: &str, relationships_json: &str, space: &LabelSpace, split: Split) -> Result<DatasetManifest> {
    let objects: Vec<VgImageObjects> = serde_json::from_str(objects_json)?;
    let relationships: Vec<VgImageRelationships> = serde_json::from_str(relationships_json)?;

    let mut rels_by_image: BTreeMap<String, Vec<VgRelationship>> = BTreeMap::new();
    for r in relationships {
        rels_by_image.entry(image_key(&r.image_id)?).or_default().extend(r.relationships);
    }

    let mut dropped = DropCounts::default();
    let mut images = Vec::with_capacity(objects.len());
    let mut seen_images = BTreeSet::new();
    for img in objects {
        let id = image_key(&img.image_id)?;
        if !seen_images.insert(id.clone()) {
            return Err(Error::invalid(format!("image {id} appears twice in the objects file")));
        }
        if !(img.width > 0.0 && img.height > 0.0 && img.width.is_finite() && img.height.is_finite()) {
            return Err(Error::invalid(format!("image {id}: size must be positive")));
        }
        // object_id → node index, or None when the object was dropped
        let mut index: BTreeMap<u64, Option<usize>> = BTreeMap::new();
        let mut nodes = Vec::new();
        for o in &img.objects {
            if index.contains_key(&o.object_id) {
                return Err(Error::invalid(format!("image {id}: object_id {} repeats", o.object_id)));
            }
            let label = o
                .names
                .iter()
                .chain(o.name.iter())
                .find_map(|n| space.object_id(&normalize_name(n)));
            let slot = match (label, normalize_box(o, img.width, img.height)) {
                (None, _) => {
                    dropped.unknown_object += 1;
                    None
                }
                (Some(_), None) => {
                    dropped.degenerate_box += 1;
                    None
                }
                (Some(label), Some(bbox)) => {
                    nodes.push(SceneNode { bbox, label });
                    Some(nodes.len() - 1)
                }
            };
            index.insert(o.object_id, slot);
        }

        let mut edges = Vec::new();
        let mut seen = BTreeSet::new();
        for r in rels_by_image.remove(&id).unwrap_or_default() {
            let lookup = |oid: u64| {
                index.get(&oid).copied().ok_or_else(|| {
                    Error::invalid(format!("image {id}: relationship refers to unknown object_id {oid}"))
                })
            };
            let (s, o) = (lookup(r.subject.object_id)?, lookup(r.object.object_id)?);
            let Some(p) = space.predicate_id(&normalize_name(&r.predicate)) else {
                dropped.unknown_predicate += 1;
                continue;
            };
            let (Some(s), Some(o)) = (s, o) else {
                dropped.orphaned_relationship += 1;
                continue;
            };
            if s == o {
                dropped.self_relationship += 1;
                continue;
            }
            if !seen.insert((s, o, p)) {
                dropped.duplicate_relationship += 1;
                continue;
            }
            edges.push(GtEdge { subject: s, object: o, predicate: p });
        }

        images.push(ImageRecord {
            id,
            width: img.width,
            height: img.height,
            grid: None,
            synthetic_seed: None,
            empty: edges.is_empty(),
            nodes,
            edges,
            predicted_labels: None,
            detections: None,
        });
    }
    if let Some(orphan) = rels_by_image.keys().next() {
        return Err(Error::invalid(format!("relationships refer to image {orphan} absent from the objects file")));
    }
    if dropped.total() > 0 {
        log::info!("annotation parse dropped {dropped:?}");
    }
    Ok(DatasetManifest {
        split,
        hierarchy_sha256: space.digest(),
        hierarchy_file: None,
        images,
        dropped,
    })
}

pub fn parse_vg_annotations(
    objects_file: &Path,
    relationships_file: &Path,
    space: &LabelSpace,
    split: Split,
) -> Result<DatasetManifest> {
    let read = |p: &Path| std::fs::read_to_string(p).map_err(|e| Error::io(p, e));
    parse_vg_str(&read(objects_file)?, &read(relationships_file)?, space, split)
}
