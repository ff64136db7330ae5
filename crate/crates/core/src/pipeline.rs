//! End-to-end evaluation: nodes → edge candidates → rankings → reports.
//!
//! Every ordered pair of distinct task nodes is a candidate edge. Per-image
//! work may run on a thread pool; results are collected in manifest order, so
//! reports do not depend on the worker count.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assembly::{edge_input, PooledNode};
use crate::data::{Dataset, DatasetManifest, ExternalEdge, ImageRecord, Split};
use crate::error::{Error, Result};
use crate::eval::{
    edge_candidates, evaluate, rank_image, CandidateRegime, EvalReport, ImageResult, ScoreMode, ScoredEdge,
    Task, TripletSet, DEFAULT_KS,
};
use crate::hierarchy::LabelSpace;
use crate::model::{Model, Prediction};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub tasks: Vec<Task>,
    pub ks: Vec<usize>,
    pub score_mode: ScoreMode,
    pub regime: CandidateRegime,
    /// Rayon threads for per-image work; 1 runs inline.
    pub workers: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            tasks: Task::ALL.to_vec(),
            ks: DEFAULT_KS.to_vec(),
            score_mode: ScoreMode::default(),
            regime: CandidateRegime::default(),
            workers: 1,
        }
    }
}

impl EvalOptions {
    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() || self.ks.is_empty() {
            return Err(Error::invalid("need at least one task and one k"));
        }
        if self.ks.contains(&0) {
            return Err(Error::invalid("k must be at least 1"));
        }
        if self.workers == 0 {
            return Err(Error::invalid("workers must be at least 1"));
        }
        Ok(())
    }

    fn max_k(&self) -> usize {
        self.ks.iter().copied().max().unwrap_or(1)
    }
}

fn par_map<T, R, F>(items: &[T], workers: usize, f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> Result<R> + Sync + Send,
{
    if workers <= 1 {
        return items.iter().map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
    pool.install(|| items.par_iter().map(f).collect())
}

/// Model predictions for every ordered node pair of one image.
pub fn predict_image(
    model: &Model,
    record: &ImageRecord,
    dataset: &Dataset,
    task: Task,
) -> Result<Vec<(usize, usize, Prediction)>> {
    let grid = dataset.grid(&record.id)?;
    let space = &dataset.space;
    let nodes = record.task_nodes(task)?;
    let pooled: Vec<PooledNode> = nodes
        .iter()
        .map(|n| PooledNode::from_grid(grid, &n.bbox, n.label))
        .collect();
    let mut out = Vec::with_capacity(nodes.len() * nodes.len().saturating_sub(1));
    for s in 0..nodes.len() {
        for o in 0..nodes.len() {
            if s != o {
                let input = edge_input(&pooled[s], &pooled[o], space)?;
                out.push((s, o, model.predict(&input, space)?));
            }
        }
    }
    Ok(out)
}

/// Candidate edges of one image under a model.
pub fn scored_edges(
    model: &Model,
    record: &ImageRecord,
    dataset: &Dataset,
    task: Task,
    score_mode: ScoreMode,
    regime: CandidateRegime,
) -> Result<Vec<ScoredEdge>> {
    let nodes = record.task_nodes(task)?;
    predict_image(model, record, dataset, task)?
        .into_iter()
        .map(|(s, o, pred)| {
            Ok(ScoredEdge {
                subject: s,
                object: o,
                subject_node: nodes[s],
                object_node: nodes[o],
                candidates: edge_candidates(&pred, &dataset.space, score_mode, regime)?,
            })
        })
        .collect()
}

/// The top `k` candidates of one image.
pub fn rank_with_model(
    model: &Model,
    record: &ImageRecord,
    dataset: &Dataset,
    task: Task,
    k: usize,
    opts: &EvalOptions,
) -> Result<ImageResult> {
    let edges = scored_edges(model, record, dataset, task, opts.score_mode, opts.regime)?;
    Ok(ImageResult {
        image_id: record.id.clone(),
        ranked: rank_image(&edges, k)?,
        gt: record.gt(),
    })
}

fn reports(
    per_task: Vec<(Task, Vec<ImageResult>)>,
    opts: &EvalOptions,
    space: &LabelSpace,
    zero_shot: Option<&TripletSet>,
) -> Result<Vec<EvalReport>> {
    per_task
        .into_iter()
        .map(|(task, images)| evaluate(&images, task, &opts.ks, space, zero_shot))
        .collect()
}

/// Reports for every requested task on the dataset's test split.
pub fn evaluate_checkpoint(
    model: &Model,
    dataset: &Dataset,
    opts: &EvalOptions,
    zero_shot: Option<&TripletSet>,
) -> Result<Vec<EvalReport>> {
    evaluate_split(model, dataset, dataset.split(Split::Test)?, opts, zero_shot)
}

pub fn evaluate_split(
    model: &Model,
    dataset: &Dataset,
    manifest: &DatasetManifest,
    opts: &EvalOptions,
    zero_shot: Option<&TripletSet>,
) -> Result<Vec<EvalReport>> {
    opts.validate()?;
    model.validate(&dataset.space)?;
    let mut per_task = Vec::with_capacity(opts.tasks.len());
    for &task in &opts.tasks {
        let images = par_map(&manifest.images, opts.workers, |img| {
            rank_with_model(model, img, dataset, task, opts.max_k(), opts)
        })?;
        per_task.push((task, images));
    }
    reports(per_task, opts, &dataset.space, zero_shot)
}

/// Candidate edges of one image from external predictions.
pub fn external_scored_edges(
    edges: &[&ExternalEdge],
    record: &ImageRecord,
    space: &LabelSpace,
    task: Task,
    opts: &EvalOptions,
) -> Result<Vec<ScoredEdge>> {
    let task_nodes = record.task_nodes(task).ok();
    edges
        .iter()
        .map(|e| {
            let resolve = |given: Option<crate::eval::SceneNode>, idx: usize| {
                given
                    .or_else(|| task_nodes.as_ref().and_then(|n| n.get(idx).copied()))
                    .ok_or_else(|| {
                        Error::invalid(format!("image {}: {task} input for node {idx} is missing", record.id))
                    })
            };
            if e.subject == e.object {
                return Err(Error::invalid(format!("image {}: edge from node {} to itself", record.id, e.subject)));
            }
            Ok(ScoredEdge {
                subject: e.subject,
                object: e.object,
                subject_node: resolve(e.subject_node, e.subject)?,
                object_node: resolve(e.object_node, e.object)?,
                candidates: edge_candidates(&Prediction::Hierarchical(e.prediction.clone()), space, opts.score_mode, opts.regime)?,
            })
        })
        .collect()
}

/// Reports for external per-edge predictions against `manifest`.
pub fn evaluate_external(
    edges: &[ExternalEdge],
    manifest: &DatasetManifest,
    space: &LabelSpace,
    opts: &EvalOptions,
    zero_shot: Option<&TripletSet>,
) -> Result<Vec<EvalReport>> {
    opts.validate()?;
    manifest.validate(space)?;
    let mut by_image: BTreeMap<&str, Vec<&ExternalEdge>> = BTreeMap::new();
    for e in edges {
        by_image.entry(e.image_id.as_str()).or_default().push(e);
    }
    for id in by_image.keys() {
        manifest.image(id)?;
    }
    let mut per_task = Vec::with_capacity(opts.tasks.len());
    for &task in &opts.tasks {
        let images = par_map(&manifest.images, opts.workers, |img| {
            let mine = by_image.get(img.id.as_str()).map(Vec::as_slice).unwrap_or(&[]);
            let scored = external_scored_edges(mine, img, space, task, opts)?;
            Ok(ImageResult {
                image_id: img.id.clone(),
                ranked: rank_image(&scored, opts.max_k())?,
                gt: img.gt(),
            })
        })?;
        per_task.push((task, images));
    }
    reports(per_task, opts, space, zero_shot)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};
    use crate::head::HeadMode;
    use crate::model::HeadKind;

    #[test]
    fn worker_count_does_not_change_reports() {
        let ds = generate_synthetic(&SyntheticSpec { train_images: 2, test_images: 12, ..Default::default() })
            .unwrap()
            .dataset;
        let dim = crate::assembly::input_dim(ds.grids.values().next().unwrap().channels(), &ds.space);
        let m = Model::init(HeadKind::Hierarchical, dim, 6, &ds.space, HeadMode::BayesConsistent, 1);
        let one = evaluate_checkpoint(&m, &ds, &EvalOptions::default(), ds.seen_triplets().as_ref()).unwrap();
        let four = evaluate_checkpoint(&m, &ds, &EvalOptions { workers: 4, ..Default::default() }, ds.seen_triplets().as_ref()).unwrap();
        assert_eq!(one, four);
        assert_eq!(one.len(), 3);
    }
}
