//! External per-edge predictions in JSON lines.
//!
//! One record per directed edge:
//!
//! ```json
//! {"image_id": "17", "subject": 0, "object": 2, "connectivity": 0.83,
//!  "super_probs": {"geometric": 0.6, "possessive": 0.3, "semantic": 0.1},
//!  "conditional_probs": {"on": 0.4, "near": 0.1, ...},
//!  "subject_node": {"bbox": [0.1, 0.1, 0.4, 0.5], "label": "man"}}
//! ```
//!
//! `conditional_probs` must name every predicate; each super-category's
//! conditionals and `super_probs` must each sum to one. `subject_node` and
//! `object_node` are optional; when absent the ground-truth nodes are used.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Deserialize;

use crate::assembly::BoundingBox;
use crate::error::{Error, Result};
use crate::eval::SceneNode;
use crate::head::{EdgePrediction, HeadMode};
use crate::hierarchy::{LabelSpace, SuperCategoryId};

/// Simplex sums within this distance of one are rescaled; others are rejected.
pub const SIMPLEX_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct NodeRecord {
    bbox: BoundingBox,
    label: String,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct LogitRecord {
    image_id: String,
    subject: usize,
    object: usize,
    connectivity: f64,
    super_probs: BTreeMap<String, f64>,
    conditional_probs: BTreeMap<String, f64>,
    #[serde(default)]
    subject_node: Option<NodeRecord>,
    #[serde(default)]
    object_node: Option<NodeRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExternalEdge {
    pub image_id: String,
    pub subject: usize,
    pub object: usize,
    pub subject_node: Option<SceneNode>,
    pub object_node: Option<SceneNode>,
    pub prediction: EdgePrediction,
}

/// Rescales `v` to sum to one if it is within tolerance.
pub fn renormalize(v: &mut [f64], what: &str) -> Result<()> {
    if v.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::invalid(format!("{what}: probabilities must be finite and non-negative")));
    }
    let sum: f64 = v.iter().sum();
    if (sum - 1.0).abs() > SIMPLEX_TOLERANCE {
        return Err(Error::invalid(format!("{what}: probabilities sum to {sum}")));
    }
    v.iter_mut().for_each(|p| *p /= sum);
    Ok(())
}

fn node(r: Option<NodeRecord>, space: &LabelSpace) -> Result<Option<SceneNode>> {
    r.map(|n| {
        n.bbox.validate()?;
        let label = space
            .object_id(&n.label)
            .ok_or_else(|| Error::invalid(format!("unknown object category {:?}", n.label)))?;
        Ok(SceneNode { bbox: n.bbox, label })
    })
    .transpose()
}

fn parse_record(line: &str, space: &LabelSpace) -> Result<ExternalEdge> {
    let r: LogitRecord = serde_json::from_str(line)?;
    if !(0.0..=1.0).contains(&r.connectivity) {
        return Err(Error::invalid(format!("connectivity {} outside [0, 1]", r.connectivity)));
    }
    let mut sup = vec![f64::NAN; space.num_supers()];
    for (name, p) in &r.super_probs {
        let s = space
            .super_id(name)
            .ok_or_else(|| Error::invalid(format!("unknown super-category {name:?}")))?;
        sup[s.0] = *p;
    }
    if sup.iter().any(|p| p.is_nan()) {
        return Err(Error::invalid("super_probs must name every super-category"));
    }
    renormalize(&mut sup, "super_probs")?;

    let mut conds: Vec<Vec<f64>> = space.group_sizes().iter().map(|&n| vec![f64::NAN; n]).collect();
    for (name, p) in &r.conditional_probs {
        let pid = space
            .predicate_id(name)
            .ok_or_else(|| Error::invalid(format!("unknown predicate {name:?}")))?;
        conds[space.super_of(pid)?.0][space.local_index(pid)?] = *p;
    }
    for (s, c) in conds.iter_mut().enumerate() {
        let sname = space.super_name(SuperCategoryId(s));
        if c.iter().any(|p| p.is_nan()) {
            return Err(Error::invalid(format!("conditional_probs misses predicates of {sname:?}")));
        }
        renormalize(c, &format!("conditional_probs of {sname:?}"))?;
    }
    let prediction = EdgePrediction::from_parts(r.connectivity, sup, conds, space, HeadMode::BayesConsistent)?;
    Ok(ExternalEdge {
        image_id: r.image_id,
        subject: r.subject,
        object: r.object,
        subject_node: node(r.subject_node, space)?,
        object_node: node(r.object_node, space)?,
        prediction,
    })
}

/// Parses every non-blank line; errors name the 1-based line number.
pub fn parse_external_logits(text: &str, space: &LabelSpace) -> Result<Vec<ExternalEdge>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_record(l, space).map_err(|e| Error::invalid(format!("line {}: {e}", i + 1))))
        .collect()
}

pub fn load_external_logits(path: &Path, space: &LabelSpace) -> Result<Vec<ExternalEdge>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_external_logits(&text, space)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn space() -> LabelSpace {
        LabelSpace::from_groups(
            vec!["a".into(), "b".into()],
            &[("g".into(), vec!["on".into(), "in".into()]), ("h".into(), vec!["has".into()])],
        )
        .unwrap()
    }

    fn line(g: f64) -> String {
        format!(
            r#"{{"image_id":"x","subject":0,"object":1,"connectivity":0.5,"super_probs":{{"g":{g},"h":0.25}},"conditional_probs":{{"on":0.5,"in":0.5,"has":1.0}}}}"#,
            g = g
        )
    }

    #[test]
    fn valid_file_yields_one_edge_per_record() {
        let text = format!("{}\n\n{}\n", line(0.75), line(0.75));
        let edges = parse_external_logits(&text, &space()).unwrap();
        assert_eq!(edges.len(), 2);
        assert_eq!(edges[0].prediction.joint_probs, vec![0.375, 0.375, 0.25]);
    }

    #[test]
    fn small_drift_is_renormalized() {
        let e = parse_external_logits(&line(0.75 + 1e-7), &space()).unwrap();
        let s: f64 = e[0].prediction.super_probs.iter().sum();
        assert!((s - 1.0).abs() < 1e-15);
    }

    #[test]
    fn large_drift_is_rejected() {
        assert!(parse_external_logits(&line(0.25), &space()).is_err());
    }

    #[test]
    fn unknown_predicate_is_rejected() {
        let bad = line(0.75).replace("\"has\"", "\"eats\"");
        let err = parse_external_logits(&bad, &space()).unwrap_err();
        assert!(err.to_string().contains("eats"));
    }
}
