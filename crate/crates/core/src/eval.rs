//! Candidate ranking and recall metrics for scene graphs.
//!
//! Every directed edge contributes one candidate per super-category (the best
//! predicate of that group). All candidates of an image are ranked together by
//! score and the top `k` are greedily matched against the ground truth.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::assembly::BoundingBox;
use crate::error::{Error, Result};
use crate::head::{flat_top, top_per_super, EdgePrediction, FlatPrediction};
use crate::hierarchy::{LabelSpace, ObjectCategoryId, PredicateId};
use crate::model::Prediction;

/// Default recall cut-offs.
pub const DEFAULT_KS: [usize; 3] = [20, 50, 100];

/// Boxes must overlap at least this much in detection mode.
pub const IOU_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// Boxes and labels given; only predicates predicted.
    PredCls,
    /// Boxes given; labels and predicates predicted.
    SgCls,
    /// Nothing given; boxes matched by IoU.
    SgDet,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::PredCls, Task::SgCls, Task::SgDet];

    pub fn name(self) -> &'static str {
        match self {
            Task::PredCls => "predcls",
            Task::SgCls => "sgcls",
            Task::SgDet => "sgdet",
        }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "predcls" => Ok(Task::PredCls),
            "sgcls" => Ok(Task::SgCls),
            "sgdet" => Ok(Task::SgDet),
            other => Err(Error::invalid(format!("unknown task {other:?}"))),
        }
    }
}

/// An object instance: a box with a category.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneNode {
    pub bbox: BoundingBox,
    pub label: ObjectCategoryId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GtEdge {
    pub subject: usize,
    pub object: usize,
    pub predicate: PredicateId,
}

/// Ground-truth scene graph of one image.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SceneGraphGt {
    pub nodes: Vec<SceneNode>,
    pub edges: Vec<GtEdge>,
}

impl SceneGraphGt {
    pub fn validate(&self, space: &LabelSpace) -> Result<()> {
        for n in &self.nodes {
            space.check_object(n.label)?;
            n.bbox.validate()?;
        }
        let mut seen = BTreeSet::new();
        for e in &self.edges {
            if e.subject >= self.nodes.len() || e.object >= self.nodes.len() {
                return Err(Error::invalid(format!(
                    "edge ({}, {}) refers to a missing node",
                    e.subject, e.object
                )));
            }
            space.check_predicate(e.predicate)?;
            if !seen.insert((e.subject, e.object, e.predicate)) {
                return Err(Error::invalid(format!(
                    "duplicate relationship ({}, {}, {})",
                    e.subject, e.object, e.predicate
                )));
            }
        }
        Ok(())
    }

    /// `(subject label, predicate, object label)` of an edge.
    pub fn triplet(&self, e: &GtEdge) -> Triplet {
        (self.nodes[e.subject].label, e.predicate, self.nodes[e.object].label)
    }
}

pub type Triplet = (ObjectCategoryId, PredicateId, ObjectCategoryId);

/// Label triplets seen in training, for zero-shot recall.
pub type TripletSet = BTreeSet<Triplet>;

/// How a candidate's ranking confidence is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    /// `e · p(r)`
    #[default]
    ConnectivityJoint,
    /// `p(r)`
    Joint,
    /// `e · p(super_of(r))`
    ConnectivitySuper,
}

/// How many candidates each directed edge may place in the ranking.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateRegime {
    /// One per super-category.
    #[default]
    PerSuper,
    /// Only the single best-scoring predicate of the pair.
    SinglePerPair,
}

pub fn score_candidate(
    pred: &EdgePrediction,
    p: PredicateId,
    space: &LabelSpace,
    mode: ScoreMode,
) -> Result<f64> {
    space.check_predicate(p)?;
    Ok(match mode {
        ScoreMode::ConnectivityJoint => pred.connectivity * pred.joint_probs[p.0],
        ScoreMode::Joint => pred.joint_probs[p.0],
        ScoreMode::ConnectivitySuper => pred.connectivity * pred.super_probs[space.super_of(p)?.0],
    })
}

/// Flat-head score; the super-category probability is 1.
pub fn score_flat(pred: &FlatPrediction, p: PredicateId, mode: ScoreMode) -> f64 {
    match mode {
        ScoreMode::ConnectivityJoint => pred.connectivity * pred.probs[p.0],
        ScoreMode::Joint => pred.probs[p.0],
        ScoreMode::ConnectivitySuper => pred.connectivity,
    }
}

/// `(predicate, score)` candidates of one edge, in super-category order.
pub fn edge_candidates(
    pred: &Prediction,
    space: &LabelSpace,
    mode: ScoreMode,
    regime: CandidateRegime,
) -> Result<Vec<(PredicateId, f64)>> {
    let mut out = match pred {
        Prediction::Hierarchical(p) => top_per_super(p, space)
            .into_iter()
            .map(|(id, _)| Ok((id, score_candidate(p, id, space, mode)?)))
            .collect::<Result<Vec<_>>>()?,
        Prediction::Flat(p) => {
            let (id, _) = flat_top(p);
            vec![(id, score_flat(p, id, mode))]
        }
    };
    if regime == CandidateRegime::SinglePerPair && out.len() > 1 {
        let mut best = out[0];
        for c in &out[1..] {
            if c.1 > best.1 || (c.1 == best.1 && c.0 < best.0) {
                best = *c;
            }
        }
        out = vec![best];
    }
    Ok(out)
}

/// One directed edge with its scored candidates.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredEdge {
    pub subject: usize,
    pub object: usize,
    pub subject_node: SceneNode,
    pub object_node: SceneNode,
    pub candidates: Vec<(PredicateId, f64)>,
}

/// A ranked `(subject, predicate, object)` hypothesis.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub edge_index: usize,
    pub subject: usize,
    pub object: usize,
    pub predicate: PredicateId,
    pub score: f64,
    pub subject_node: SceneNode,
    pub object_node: SceneNode,
}

/// Pools every candidate of every edge, sorts by score (descending, then
/// edge index, then predicate id) and keeps the first `k`.
pub fn rank_image(edges: &[ScoredEdge], k: usize) -> Result<Vec<Candidate>> {
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    let mut pool: Vec<Candidate> = edges
        .iter()
        .enumerate()
        .flat_map(|(i, e)| {
            e.candidates.iter().map(move |&(predicate, score)| Candidate {
                edge_index: i,
                subject: e.subject,
                object: e.object,
                predicate,
                score,
                subject_node: e.subject_node,
                object_node: e.object_node,
            })
        })
        .collect();
    if let Some(c) = pool.iter().find(|c| !c.score.is_finite()) {
        return Err(Error::NonFinite(format!("candidate score on edge {}", c.edge_index)));
    }
    pool.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.edge_index.cmp(&b.edge_index))
            .then(a.predicate.cmp(&b.predicate))
    });
    pool.truncate(k);
    Ok(pool)
}

/// Intersection over union of two boxes.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let w = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let h = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = w * h;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

fn candidate_matches(c: &Candidate, e: &GtEdge, gt: &SceneGraphGt, task: Task) -> bool {
    if c.predicate != e.predicate {
        return false;
    }
    let (gs, go) = (&gt.nodes[e.subject], &gt.nodes[e.object]);
    match task {
        Task::PredCls => c.subject == e.subject && c.object == e.object,
        Task::SgCls => {
            c.subject == e.subject
                && c.object == e.object
                && c.subject_node.label == gs.label
                && c.object_node.label == go.label
        }
        Task::SgDet => {
            c.subject_node.label == gs.label
                && c.object_node.label == go.label
                && iou(&c.subject_node.bbox, &gs.bbox) >= IOU_THRESHOLD
                && iou(&c.object_node.bbox, &go.bbox) >= IOU_THRESHOLD
        }
    }
}

fn check_task_inputs(candidates: &[Candidate], gt: &SceneGraphGt, task: Task) -> Result<()> {
    if task == Task::SgDet {
        return Ok(());
    }
    for c in candidates {
        let ends = [(c.subject, &c.subject_node), (c.object, &c.object_node)];
        for (idx, node) in ends {
            let g = gt.nodes.get(idx).ok_or_else(|| {
                Error::invalid(format!("{task}: candidate refers to node {idx} not in the ground truth"))
            })?;
            if node.bbox != g.bbox {
                return Err(Error::invalid(format!("{task}: candidate box differs from the given box")));
            }
            if task == Task::PredCls && node.label != g.label {
                return Err(Error::invalid("predcls: candidate label differs from the given label"));
            }
        }
    }
    Ok(())
}

/// Outcome of greedy matching.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchResult {
    /// For each GT edge, the rank of the candidate that claimed it.
    pub gt_match: Vec<Option<usize>>,
    /// For each candidate, the GT edge it claimed.
    pub candidate_match: Vec<Option<usize>>,
}

impl MatchResult {
    pub fn matched_count(&self) -> usize {
        self.gt_match.iter().filter(|m| m.is_some()).count()
    }
}

/// Walks `candidates` in order; each claims the lowest-index unmatched GT
/// edge it matches. A GT edge is claimed at most once.
pub fn match_candidates(candidates: &[Candidate], gt: &SceneGraphGt, task: Task) -> Result<MatchResult> {
    check_task_inputs(candidates, gt, task)?;
    let mut gt_match = vec![None; gt.edges.len()];
    let mut candidate_match = vec![None; candidates.len()];
    for (rank, c) in candidates.iter().enumerate() {
        let hit = gt
            .edges
            .iter()
            .enumerate()
            .find(|(g, e)| gt_match[*g].is_none() && candidate_matches(c, e, gt, task));
        if let Some((g, _)) = hit {
            gt_match[g] = Some(rank);
            candidate_match[rank] = Some(g);
        }
    }
    Ok(MatchResult {
        gt_match,
        candidate_match,
    })
}

/// Ranked candidates and ground truth of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageResult {
    pub image_id: String,
    /// Sorted as produced by [`rank_image`]; recall@k reads the first `k`.
    pub ranked: Vec<Candidate>,
    pub gt: SceneGraphGt,
}

/// Recall at one cut-off.
#[derive(Debug, Clone, PartialEq)]
pub struct RecallAtK {
    /// Mean over images with at least one GT edge; `None` if there are none.
    pub recall: Option<f64>,
    /// Matched GT edges per predicate, pooled over images.
    pub hits: Vec<usize>,
    /// GT edges per predicate, pooled over images.
    pub totals: Vec<usize>,
    /// Images that entered the mean.
    pub images: usize,
}

impl RecallAtK {
    pub fn per_predicate(&self) -> Vec<Option<f64>> {
        self.hits
            .iter()
            .zip(&self.totals)
            .map(|(&h, &t)| (t > 0).then(|| h as f64 / t as f64))
            .collect()
    }
}

fn recall_filtered(
    images: &[ImageResult],
    k: usize,
    task: Task,
    num_predicates: usize,
    keep: impl Fn(&SceneGraphGt, &GtEdge) -> bool,
) -> Result<RecallAtK> {
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    let mut hits = vec![0; num_predicates];
    let mut totals = vec![0; num_predicates];
    let mut sum = 0.0;
    let mut counted = 0;
    for img in images {
        let top = &img.ranked[..k.min(img.ranked.len())];
        let m = match_candidates(top, &img.gt, task)?;
        let mut n_gt = 0;
        let mut n_hit = 0;
        for (e, claimed) in img.gt.edges.iter().zip(&m.gt_match) {
            if !keep(&img.gt, e) {
                continue;
            }
            let p = e.predicate.0;
            if p >= num_predicates {
                return Err(Error::OutOfRange {
                    kind: "predicate",
                    index: p,
                    size: num_predicates,
                });
            }
            n_gt += 1;
            totals[p] += 1;
            if claimed.is_some() {
                n_hit += 1;
                hits[p] += 1;
            }
        }
        if n_gt > 0 {
            sum += n_hit as f64 / n_gt as f64;
            counted += 1;
        }
    }
    Ok(RecallAtK {
        recall: (counted > 0).then(|| sum / counted as f64),
        hits,
        totals,
        images: counted,
    })
}

/// Image-averaged recall of the top `k` candidates.
pub fn recall_at_k(images: &[ImageResult], k: usize, task: Task, num_predicates: usize) -> Result<RecallAtK> {
    recall_filtered(images, k, task, num_predicates, |_, _| true)
}

/// Mean of per-predicate recalls over predicates that occur in the ground truth.
pub fn mean_recall(r: &RecallAtK) -> Option<f64> {
    let present: Vec<f64> = r.per_predicate().into_iter().flatten().collect();
    (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
}

pub fn mean_recall_at_k(images: &[ImageResult], k: usize, task: Task, num_predicates: usize) -> Result<Option<f64>> {
    Ok(mean_recall(&recall_at_k(images, k, task, num_predicates)?))
}

/// Recall restricted to GT edges whose label triplet never occurs in `train`.
pub fn zero_shot_recall_at_k(
    images: &[ImageResult],
    k: usize,
    task: Task,
    num_predicates: usize,
    train: &TripletSet,
) -> Result<Option<f64>> {
    Ok(recall_filtered(images, k, task, num_predicates, |gt, e| !train.contains(&gt.triplet(e)))?.recall)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredicateRecall {
    pub predicate: String,
    pub gt_count: usize,
    pub recall: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsAtK {
    pub k: usize,
    pub recall: Option<f64>,
    pub mean_recall: Option<f64>,
    pub zero_shot_recall: Option<f64>,
    pub per_predicate: Vec<PredicateRecall>,
}

/// All metrics of one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: Task,
    /// Images with at least one GT relationship.
    pub image_count: usize,
    pub metrics: Vec<MetricsAtK>,
}

impl EvalReport {
    pub fn at(&self, k: usize) -> Option<&MetricsAtK> {
        self.metrics.iter().find(|m| m.k == k)
    }

    /// Largest absolute difference over every reported number; `None` if the
    /// reports differ in structure or in which values are present.
    pub fn max_abs_diff(&self, other: &EvalReport) -> Option<f64> {
        if self.task != other.task || self.image_count != other.image_count || self.metrics.len() != other.metrics.len() {
            return None;
        }
        fn d(a: Option<f64>, b: Option<f64>) -> Option<f64> {
            match (a, b) {
                (Some(x), Some(y)) => Some((x - y).abs()),
                (None, None) => Some(0.0),
                _ => None,
            }
        }
        let mut worst: f64 = 0.0;
        for (a, b) in self.metrics.iter().zip(&other.metrics) {
            if a.k != b.k || a.per_predicate.len() != b.per_predicate.len() {
                return None;
            }
            worst = worst.max(d(a.recall, b.recall)?);
            worst = worst.max(d(a.mean_recall, b.mean_recall)?);
            worst = worst.max(d(a.zero_shot_recall, b.zero_shot_recall)?);
            for (x, y) in a.per_predicate.iter().zip(&b.per_predicate) {
                worst = worst.max(d(x.recall, y.recall)?);
            }
        }
        Some(worst)
    }
}

/// Computes R@k, mR@k and (when `train` is given) zsR@k for every `k`.
pub fn evaluate(
    images: &[ImageResult],
    task: Task,
    ks: &[usize],
    space: &LabelSpace,
    train: Option<&TripletSet>,
) -> Result<EvalReport> {
    let n = space.num_predicates();
    let mut metrics = Vec::with_capacity(ks.len());
    let mut image_count = 0;
    for &k in ks {
        let r = recall_at_k(images, k, task, n)?;
        image_count = r.images;
        let zs = match train {
            Some(t) => zero_shot_recall_at_k(images, k, task, n, t)?,
            None => None,
        };
        let per_predicate = r
            .per_predicate()
            .into_iter()
            .zip(&r.totals)
            .enumerate()
            .map(|(p, (recall, &gt_count))| PredicateRecall {
                predicate: space.predicate_name(PredicateId(p)).to_string(),
                gt_count,
                recall,
            })
            .collect();
        metrics.push(MetricsAtK {
            k,
            recall: r.recall,
            mean_recall: mean_recall(&r),
            zero_shot_recall: zs,
            per_predicate,
        });
    }
    Ok(EvalReport {
        task,
        image_count,
        metrics,
    })
}

/// One line of the candidate dump (JSON lines).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub image_id: String,
    pub rank: usize,
    pub subject: usize,
    pub object: usize,
    pub subject_box: BoundingBox,
    pub object_box: BoundingBox,
    pub subject_label: String,
    pub object_label: String,
    pub predicate: String,
    pub score: f64,
}

impl CandidateRecord {
    pub fn new(image_id: &str, rank: usize, c: &Candidate, space: &LabelSpace) -> Self {
        CandidateRecord {
            image_id: image_id.to_string(),
            rank,
            subject: c.subject,
            object: c.object,
            subject_box: c.subject_node.bbox,
            object_box: c.object_node.bbox,
            subject_label: space.object_name(c.subject_node.label).to_string(),
            object_label: space.object_name(c.object_node.label).to_string(),
            predicate: space.predicate_name(c.predicate).to_string(),
            score: c.score,
        }
    }
}

/// Edge classes in the DOT export.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgeStatus {
    /// Candidate matched a GT edge. Solid pink.
    TruePositive,
    /// GT edge not recovered by the shown candidates. Dotted pink.
    FalseNegative,
    /// Candidate on an annotated pair with a predicate the annotation lacks. Solid blue.
    Unannotated,
    /// Anything else. Solid gray.
    FalsePositive,
}

impl EdgeStatus {
    fn attrs(self) -> (&'static str, &'static str, &'static str) {
        match self {
            EdgeStatus::TruePositive => ("tp", "solid", "#e75480"),
            EdgeStatus::FalseNegative => ("fn", "dotted", "#e75480"),
            EdgeStatus::Unannotated => ("unannotated", "solid", "#1f77b4"),
            EdgeStatus::FalsePositive => ("fp", "solid", "#999999"),
        }
    }
}

fn dot_escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"")
}

/// Renders the top `top_n` candidates and the ground truth as a DOT digraph.
///
/// Candidates that matched are `tp`; unmatched GT edges are `fn`. An
/// unmatched candidate whose (subject, object) pair carries a GT edge is
/// `unannotated`, any other unmatched candidate is `fp`.
pub fn export_dot(
    ranked: &[Candidate],
    gt: &SceneGraphGt,
    top_n: usize,
    task: Task,
    space: &LabelSpace,
) -> Result<String> {
    if top_n == 0 {
        return Err(Error::invalid("top_n must be at least 1"));
    }
    let top = &ranked[..top_n.min(ranked.len())];
    let m = match_candidates(top, gt, task)?;
    let node_id = |prefix: &str, i: usize| format!("{prefix}{i}");
    let cand_prefix = if task == Task::SgDet { "d" } else { "n" };

    let mut out = String::from("digraph scene_graph {\n");
    if gt.nodes.is_empty() && top.is_empty() {
        out.push_str("}\n");
        return Ok(out);
    }
    out.push_str("  node [shape=box];\n");
    for (i, n) in gt.nodes.iter().enumerate() {
        let _ = writeln!(out, "  {} [label=\"{}\"];", node_id("n", i), dot_escape(space.object_name(n.label)));
    }
    if task == Task::SgDet {
        let mut det: BTreeSet<(usize, ObjectCategoryId)> = BTreeSet::new();
        for c in top {
            det.insert((c.subject, c.subject_node.label));
            det.insert((c.object, c.object_node.label));
        }
        for (i, label) in det {
            let _ = writeln!(
                out,
                "  {} [label=\"{}\", style=dashed];",
                node_id("d", i),
                dot_escape(space.object_name(label))
            );
        }
    }
    let annotated_pairs: BTreeSet<(usize, usize)> = gt.edges.iter().map(|e| (e.subject, e.object)).collect();
    for (rank, c) in top.iter().enumerate() {
        let status = if m.candidate_match[rank].is_some() {
            EdgeStatus::TruePositive
        } else if task != Task::SgDet && annotated_pairs.contains(&(c.subject, c.object)) {
            EdgeStatus::Unannotated
        } else {
            EdgeStatus::FalsePositive
        };
        let (class, style, color) = status.attrs();
        let _ = writeln!(
            out,
            "  {} -> {} [label=\"{} ({:.3})\", style={style}, color=\"{color}\", class=\"{class}\"];",
            node_id(cand_prefix, c.subject),
            node_id(cand_prefix, c.object),
            dot_escape(space.predicate_name(c.predicate)),
            c.score
        );
    }
    for (e, claimed) in gt.edges.iter().zip(&m.gt_match) {
        if claimed.is_none() {
            let (class, style, color) = EdgeStatus::FalseNegative.attrs();
            let _ = writeln!(
                out,
                "  {} -> {} [label=\"{}\", style={style}, color=\"{color}\", class=\"{class}\"];",
                node_id("n", e.subject),
                node_id("n", e.object),
                dot_escape(space.predicate_name(e.predicate))
            );
        }
    }
    out.push_str("}\n");
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(x0: f64, y0: f64, x1: f64, y1: f64) -> BoundingBox {
        BoundingBox::new(x0, y0, x1, y1).unwrap()
    }

    fn node(i: usize) -> SceneNode {
        let x = 0.1 * i as f64;
        SceneNode { bbox: bx(x, 0.0, x + 0.1, 0.5), label: ObjectCategoryId(i % 3) }
    }

    fn edge(s: usize, o: usize, cands: &[(usize, f64)]) -> ScoredEdge {
        ScoredEdge {
            subject: s,
            object: o,
            subject_node: node(s),
            object_node: node(o),
            candidates: cands.iter().map(|&(p, sc)| (PredicateId(p), sc)).collect(),
        }
    }

    fn gt(edges: &[(usize, usize, usize)]) -> SceneGraphGt {
        SceneGraphGt {
            nodes: (0..6).map(node).collect(),
            edges: edges
                .iter()
                .map(|&(s, o, p)| GtEdge { subject: s, object: o, predicate: PredicateId(p) })
                .collect(),
        }
    }

    #[test]
    fn iou_examples() {
        let a = bx(0.0, 0.0, 0.5, 0.5);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &bx(0.6, 0.6, 0.9, 0.9)), 0.0);
        // two 0.5×0.5 squares offset by half a side: 0.125 / 0.375
        let b = bx(0.25, 0.0, 0.75, 0.5);
        assert!((iou(&a, &b) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn rank_small_pool_and_ties() {
        let one = edge(0, 1, &[(0, 0.3), (5, 0.2), (9, 0.1)]);
        assert_eq!(rank_image(std::slice::from_ref(&one), 20).unwrap().len(), 3);
        let tied = vec![edge(0, 1, &[(4, 0.5)]), edge(1, 0, &[(2, 0.5)])];
        let r = rank_image(&tied, 2).unwrap();
        assert_eq!(r[0].edge_index, 0);
        assert!(rank_image(&tied, 0).is_err());
    }

    #[test]
    fn rank_matches_brute_force_order() {
        // 10 edges × 3 candidates with repeated scores
        let edges: Vec<ScoredEdge> = (0..10)
            .map(|i| {
                edge(i % 6, (i + 1) % 6, &[(i % 4, ((i * 7) % 5) as f64 / 10.0), (4 + i % 3, 0.25), (9, ((i * 3) % 4) as f64 / 8.0)])
            })
            .collect();
        let ranked = rank_image(&edges, 20).unwrap();
        assert_eq!(ranked.len(), 20);
        // brute force: candidate x precedes y iff it wins the (score, edge, predicate) comparison
        let all: Vec<(f64, usize, usize)> = edges
            .iter()
            .enumerate()
            .flat_map(|(i, e)| e.candidates.iter().map(move |(p, s)| (*s, i, p.0)))
            .collect();
        for (pos, c) in ranked.iter().enumerate() {
            let before = all
                .iter()
                .filter(|(s, i, p)| *s > c.score || (*s == c.score && (*i, *p) < (c.edge_index, c.predicate.0)))
                .count();
            assert_eq!(before, pos);
        }
    }

    #[test]
    fn predcls_exact_triple_matches() {
        let g = gt(&[(0, 1, 3)]);
        let r = rank_image(&[edge(0, 1, &[(3, 0.9)])], 20).unwrap();
        let m = match_candidates(&r, &g, Task::PredCls).unwrap();
        assert_eq!(m.gt_match, vec![Some(0)]);
    }

    #[test]
    fn one_gt_edge_is_claimed_once() {
        // two detections both overlapping the same GT pair
        let g = gt(&[(0, 1, 3)]);
        let mut e1 = edge(0, 1, &[(3, 0.9)]);
        let mut e2 = edge(2, 3, &[(3, 0.8)]);
        e2.subject_node = e1.subject_node;
        e2.object_node = e1.object_node;
        e1.subject = 10;
        let r = rank_image(&[e1, e2], 20).unwrap();
        let m = match_candidates(&r, &g, Task::SgDet).unwrap();
        assert_eq!(m.matched_count(), 1);
        assert_eq!(m.candidate_match, vec![Some(0), None]);
    }

    #[test]
    fn sgdet_iou_threshold() {
        let mut g = gt(&[(0, 1, 3)]);
        g.nodes[0].bbox = bx(0.0, 0.0, 0.5, 0.5);
        let mut e = edge(0, 1, &[(3, 0.9)]);
        e.subject_node = SceneNode { bbox: bx(0.0, 0.0, 0.5, 0.5), label: g.nodes[0].label };
        e.object_node = g.nodes[1];
        let r = rank_image(&[e.clone()], 5).unwrap();
        assert_eq!(match_candidates(&r, &g, Task::SgDet).unwrap().matched_count(), 1);
        // shift to IoU 0.4: width w overlapping 0.5-w... use a box of area ratio 0.4
        e.subject_node.bbox = bx(0.0, 0.0, 0.5, 0.2);
        assert!((iou(&e.subject_node.bbox, &g.nodes[0].bbox) - 0.4).abs() < 1e-12);
        let r = rank_image(&[e], 5).unwrap();
        assert_eq!(match_candidates(&r, &g, Task::SgDet).unwrap().matched_count(), 0);
    }

    #[test]
    fn sgcls_requires_labels() {
        let g = gt(&[(0, 1, 3)]);
        let mut e = edge(0, 1, &[(3, 0.9)]);
        e.subject_node.label = ObjectCategoryId(2);
        let r = rank_image(&[e], 5).unwrap();
        assert_eq!(match_candidates(&r, &g, Task::SgCls).unwrap().matched_count(), 0);
        // the same wrong label is an input error for predcls
        assert!(match_candidates(&r, &g, Task::PredCls).is_err());
    }

    #[test]
    fn recall_examples() {
        let g = gt(&[(0, 1, 0), (1, 2, 1), (2, 3, 2), (3, 4, 3)]);
        let edges = vec![edge(0, 1, &[(0, 0.9)]), edge(1, 2, &[(1, 0.8)]), edge(2, 3, &[(2, 0.7)]), edge(3, 4, &[(0, 0.6)])];
        let img = ImageResult { image_id: "a".into(), ranked: rank_image(&edges, 100).unwrap(), gt: g.clone() };
        let r = recall_at_k(&[img.clone()], 20, Task::PredCls, 5).unwrap();
        assert_eq!(r.recall, Some(0.75));
        assert_eq!(r.per_predicate(), vec![Some(1.0), Some(1.0), Some(1.0), Some(0.0), None]);
        assert_eq!(mean_recall(&r), Some(0.75));
        // images without GT are skipped
        let empty = ImageResult { image_id: "b".into(), ranked: img.ranked.clone(), gt: gt(&[]) };
        assert_eq!(recall_at_k(&[img.clone(), empty.clone()], 20, Task::PredCls, 5).unwrap().recall, Some(0.75));
        assert_eq!(recall_at_k(&[empty], 20, Task::PredCls, 5).unwrap().recall, None);
        // top-1 only
        assert_eq!(recall_at_k(&[img], 1, Task::PredCls, 5).unwrap().recall, Some(0.25));
    }

    #[test]
    fn mean_recall_two_predicates() {
        let g = gt(&[(0, 1, 0), (1, 2, 1)]);
        let img = ImageResult { image_id: "a".into(), ranked: rank_image(&[edge(0, 1, &[(0, 0.5)])], 10).unwrap(), gt: g };
        assert_eq!(mean_recall_at_k(&[img], 10, Task::PredCls, 3).unwrap(), Some(0.5));
    }

    #[test]
    fn zero_shot_examples() {
        let g = gt(&[(0, 1, 0), (1, 2, 1)]);
        let img = ImageResult { image_id: "a".into(), ranked: rank_image(&[edge(0, 1, &[(0, 0.5)])], 10).unwrap(), gt: g.clone() };
        let imgs = [img];
        let empty = TripletSet::new();
        assert_eq!(
            zero_shot_recall_at_k(&imgs, 10, Task::PredCls, 3, &empty).unwrap(),
            recall_at_k(&imgs, 10, Task::PredCls, 3).unwrap().recall
        );
        let all: TripletSet = g.edges.iter().map(|e| g.triplet(e)).collect();
        assert_eq!(zero_shot_recall_at_k(&imgs, 10, Task::PredCls, 3, &all).unwrap(), None);
        let first_seen: TripletSet = std::iter::once(g.triplet(&g.edges[0])).collect();
        assert_eq!(zero_shot_recall_at_k(&imgs, 10, Task::PredCls, 3, &first_seen).unwrap(), Some(0.0));
    }

    #[test]
    fn candidate_regimes() {
        let space = LabelSpace::vg150();
        let conds = space.group_sizes().iter().map(|&n| vec![1.0 / n as f64; n]).collect();
        let pred = EdgePrediction::from_parts(0.8, vec![0.2, 0.5, 0.3], conds, &space, Default::default()).unwrap();
        let p = Prediction::Hierarchical(pred.clone());
        let three = edge_candidates(&p, &space, ScoreMode::ConnectivityJoint, CandidateRegime::PerSuper).unwrap();
        assert_eq!(three.len(), 3);
        let one = edge_candidates(&p, &space, ScoreMode::ConnectivityJoint, CandidateRegime::SinglePerPair).unwrap();
        assert_eq!(one.len(), 1);
        assert!(three.iter().all(|c| c.1 <= one[0].1));
        // e = 1 → score equals the joint; e = 0 → 0
        let mut sure = pred.clone();
        sure.connectivity = 1.0;
        let q = three[0].0;
        assert_eq!(score_candidate(&sure, q, &space, ScoreMode::ConnectivityJoint).unwrap(), sure.joint_probs[q.0]);
        sure.connectivity = 0.0;
        assert_eq!(score_candidate(&sure, q, &space, ScoreMode::ConnectivityJoint).unwrap(), 0.0);
        let fixed = score_candidate(&pred, q, &space, ScoreMode::ConnectivitySuper).unwrap();
        assert_eq!(fixed, 0.8 * 0.2);
    }

    #[test]
    fn dot_export_examples() {
        let space = LabelSpace::vg150();
        let empty = export_dot(&[], &SceneGraphGt::default(), 5, Task::PredCls, &space).unwrap();
        assert_eq!(empty, "digraph scene_graph {\n}\n");

        let g = gt(&[(0, 1, 3)]);
        let r = rank_image(&[edge(0, 1, &[(3, 0.9)])], 5).unwrap();
        let dot = export_dot(&r, &g, 5, Task::PredCls, &space).unwrap();
        let edges: Vec<&str> = dot.lines().filter(|l| l.contains("->")).collect();
        assert_eq!(edges.len(), 1);
        assert!(edges[0].contains("style=solid") && edges[0].contains("class=\"tp\""));
    }

    #[test]
    fn task_names() {
        for t in Task::ALL {
            assert_eq!(t.name().parse::<Task>().unwrap(), t);
            assert_eq!(serde_json::to_string(&t).unwrap(), format!("\"{}\"", t.name()));
        }
    }
}
