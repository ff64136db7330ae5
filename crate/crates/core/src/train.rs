//! Mini-batch SGD over the projection and head parameters.
//!
//! Feature grids are frozen inputs, so every edge input vector is computed
//! once up front. A batch holds `batch_size` positive (annotated) edges plus
//! `negative_ratio × batch_size` unannotated ordered pairs drawn from the whole
//! training split. Relation losses see positives only; the connectivity loss
//! sees both.

use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assembly::{edge_input, input_dim, PooledNode};
use crate::autodiff::{Tape, Var};
use crate::data::{Dataset, DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::head::HeadMode;
use crate::hierarchy::{LabelSpace, PredicateId};
use crate::losses::{bce_on_tape, contrastive_on_tape, nll_on_tape, weighted_sum_on_tape, LossWeights, NegativeScope};
use crate::model::{EdgeNodes, HeadKind, Model, ModelVars};

/// Keeps shuffling independent of the init stream.
const SHUFFLE_STREAM: u64 = 0x5348_5546;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Positive edges per step.
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_decay_factor: f64,
    /// 1-based epochs from which one more decay factor applies.
    pub decay_epochs: Vec<usize>,
    pub weights: LossWeights,
    pub temperature: f64,
    /// L2-normalize hidden vectors before the contrastive term.
    pub contrastive_normalize: bool,
    pub negative_scope: NegativeScope,
    /// Unannotated pairs per positive edge in a batch.
    pub negative_ratio: f64,
    pub mode: HeadMode,
    pub head: HeadKind,
    pub hidden_dim: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-5,
            batch_size: 16,
            epochs: 3,
            lr_decay_factor: 0.1,
            decay_epochs: vec![3],
            weights: LossWeights::default(),
            temperature: 0.1,
            contrastive_normalize: true,
            negative_scope: NegativeScope::default(),
            negative_ratio: 1.0,
            mode: HeadMode::default(),
            head: HeadKind::default(),
            hidden_dim: 32,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate must be finite and non-negative"));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.hidden_dim == 0 {
            return Err(Error::invalid("batch_size, epochs and hidden_dim must be at least 1"));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor.is_finite()) {
            return Err(Error::invalid("lr_decay_factor must be positive"));
        }
        if self.decay_epochs.contains(&0) {
            return Err(Error::invalid("decay_epochs are 1-based"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::invalid("temperature must be positive"));
        }
        if !(self.negative_ratio >= 0.0 && self.negative_ratio.is_finite()) {
            return Err(Error::invalid("negative_ratio must be non-negative"));
        }
        self.weights.validate()
    }

    /// Learning rate in effect during 1-based `epoch`.
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        let passed = self.decay_epochs.iter().filter(|&&m| m <= epoch).count();
        (0..passed).fold(self.learning_rate, |lr, _| lr * self.lr_decay_factor)
    }
}

/// A precomputed training pair.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainEdge {
    pub input: Vec<f64>,
    /// `None` for an unannotated pair.
    pub predicate: Option<PredicateId>,
    /// Index of the source image, for same-image contrastive negatives.
    pub image: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingSet {
    pub positives: Vec<TrainEdge>,
    pub negatives: Vec<TrainEdge>,
    pub input_dim: usize,
}

/// Edge inputs for every annotated edge and every unannotated ordered pair.
pub fn build_training_set(manifest: &DatasetManifest, dataset: &Dataset) -> Result<TrainingSet> {
    let space = &dataset.space;
    let mut set = TrainingSet::default();
    for (i, img) in manifest.images.iter().enumerate() {
        let grid = dataset.grid(&img.id)?;
        if set.input_dim == 0 {
            set.input_dim = input_dim(grid.channels(), space);
        } else if input_dim(grid.channels(), space) != set.input_dim {
            return Err(Error::shape(format!("image {} has a different channel count", img.id)));
        }
        let pooled: Vec<PooledNode> = img
            .nodes
            .iter()
            .map(|n| PooledNode::from_grid(grid, &n.bbox, n.label))
            .collect();
        for e in &img.edges {
            set.positives.push(TrainEdge {
                input: edge_input(&pooled[e.subject], &pooled[e.object], space)?,
                predicate: Some(e.predicate),
                image: i,
            });
        }
        for s in 0..pooled.len() {
            for o in 0..pooled.len() {
                if s != o && !img.edges.iter().any(|e| e.subject == s && e.object == o) {
                    set.negatives.push(TrainEdge {
                        input: edge_input(&pooled[s], &pooled[o], space)?,
                        predicate: None,
                        image: i,
                    });
                }
            }
        }
    }
    if set.positives.is_empty() {
        return Err(Error::invalid("training split has no annotated edges"));
    }
    Ok(set)
}

/// Loss nodes of one batch; absent terms had nothing to average.
#[derive(Debug, Clone, Copy)]
pub struct BatchLoss {
    pub total: Var,
    pub supercat: Option<Var>,
    pub conditional: Option<Var>,
    pub connectivity: Option<Var>,
    pub contrastive: Option<Var>,
}

fn mean(tape: &mut Tape, xs: &[Var]) -> Result<Option<Var>> {
    if xs.is_empty() {
        return Ok(None);
    }
    let stacked = tape.stack(xs)?;
    let s = tape.sum(stacked)?;
    Ok(Some(tape.scale_const(s, 1.0 / xs.len() as f64)?))
}

/// Builds the weighted batch loss on `tape`.
pub fn batch_loss(
    tape: &mut Tape,
    vars: &ModelVars,
    positives: &[&TrainEdge],
    negatives: &[&TrainEdge],
    space: &LabelSpace,
    config: &TrainConfig,
) -> Result<BatchLoss> {
    let mut sup_terms = Vec::new();
    let mut cond_terms = Vec::new();
    let mut conn_terms = Vec::new();
    let mut hidden = Vec::new();
    let mut labels = Vec::new();
    let mut groups = Vec::new();
    for e in positives {
        let p = e.predicate.ok_or_else(|| Error::invalid("positive edge without a predicate"))?;
        let (h, nodes) = vars.edge(tape, e.input.clone(), config.mode)?;
        match &nodes {
            EdgeNodes::Hierarchical(n) => {
                let s = space.super_of(p)?;
                sup_terms.push(nll_on_tape(tape, n.sup_log_probs, s.0)?);
                cond_terms.push(nll_on_tape(tape, n.cond_log_probs[s.0], space.local_index(p)?)?);
            }
            EdgeNodes::Flat(n) => cond_terms.push(nll_on_tape(tape, n.log_probs, p.0)?),
        }
        conn_terms.push(bce_on_tape(tape, nodes.conn_logit(), true)?);
        hidden.push(if config.contrastive_normalize { tape.normalize(h)? } else { h });
        labels.push(p);
        groups.push(e.image);
    }
    for e in negatives {
        let (_, nodes) = vars.edge(tape, e.input.clone(), config.mode)?;
        conn_terms.push(bce_on_tape(tape, nodes.conn_logit(), false)?);
    }
    let supercat = mean(tape, &sup_terms)?;
    let conditional = mean(tape, &cond_terms)?;
    let connectivity = mean(tape, &conn_terms)?;
    let contrastive = if config.weights.contrastive > 0.0 && hidden.len() >= 2 {
        contrastive_on_tape(tape, &hidden, &labels, &groups, config.negative_scope, config.temperature)?
    } else {
        None
    };
    let w = &config.weights;
    let total = weighted_sum_on_tape(
        tape,
        &[
            (supercat, w.supercat),
            (conditional, w.conditional),
            (connectivity, w.connectivity),
            (contrastive, w.contrastive),
        ],
    )?;
    Ok(BatchLoss {
        total,
        supercat,
        conditional,
        connectivity,
        contrastive,
    })
}

/// One row of the training curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub total: f64,
    pub supercat: Option<f64>,
    pub conditional: Option<f64>,
    pub connectivity: Option<f64>,
    pub contrastive: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub model: Model,
    pub history: Vec<StepRecord>,
}

impl TrainOutcome {
    /// Mean total loss per 1-based epoch.
    pub fn epoch_means(&self) -> Vec<f64> {
        let epochs = self.history.iter().map(|r| r.epoch).max().unwrap_or(0);
        (1..=epochs)
            .map(|e| {
                let xs: Vec<f64> = self.history.iter().filter(|r| r.epoch == e).map(|r| r.total).collect();
                xs.iter().sum::<f64>() / xs.len().max(1) as f64
            })
            .collect()
    }
}

/// One SGD step on a fixed batch. Returns the loss record without step/epoch filled.
pub fn sgd_step(
    model: &mut Model,
    positives: &[&TrainEdge],
    negatives: &[&TrainEdge],
    space: &LabelSpace,
    config: &TrainConfig,
    lr: f64,
) -> Result<StepRecord> {
    let mut tape = Tape::new();
    let vars = model.register(&mut tape);
    let loss = batch_loss(&mut tape, &vars, positives, negatives, space, config)?;
    let total = tape.item(loss.total);
    if !total.is_finite() {
        return Err(Error::NonFinite(format!("training loss is {total}")));
    }
    let grads = tape.backward(loss.total)?;
    model.sgd_update(&vars, &grads, lr);
    if !model.is_finite() {
        return Err(Error::NonFinite("parameters became non-finite after an update".into()));
    }
    let item = |v: Option<Var>| v.map(|v| tape.item(v));
    Ok(StepRecord {
        step: 0,
        epoch: 0,
        lr,
        total,
        supercat: item(loss.supercat),
        conditional: item(loss.conditional),
        connectivity: item(loss.connectivity),
        contrastive: item(loss.contrastive),
    })
}

/// Trains from `model`, or from a fresh seeded init when `None`.
pub fn train_on_set(set: &TrainingSet, space: &LabelSpace, config: &TrainConfig, model: Option<Model>) -> Result<TrainOutcome> {
    config.validate()?;
    let mut model = match model {
        Some(m) => m,
        None => Model::init(config.head, set.input_dim, config.hidden_dim, space, config.mode, config.seed),
    };
    model.validate(space)?;
    if model.input_dim() != set.input_dim {
        return Err(Error::shape(format!(
            "model expects {} input features, data has {}",
            model.input_dim(),
            set.input_dim
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ SHUFFLE_STREAM);
    let mut order: Vec<usize> = (0..set.positives.len()).collect();
    let mut history = Vec::new();
    for epoch in 1..=config.epochs {
        let lr = config.lr_at_epoch(epoch);
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let pos: Vec<&TrainEdge> = chunk.iter().map(|&i| &set.positives[i]).collect();
            let n_neg = if set.negatives.is_empty() {
                0
            } else {
                (config.negative_ratio * pos.len() as f64).round() as usize
            };
            let neg: Vec<&TrainEdge> = (0..n_neg)
                .map(|_| &set.negatives[rng.random_range(0..set.negatives.len())])
                .collect();
            let mut rec = sgd_step(&mut model, &pos, &neg, space, config, lr).map_err(|e| match e {
                Error::NonFinite(msg) => Error::NonFinite(format!("epoch {epoch}, step {}: {msg}", history.len() + 1)),
                other => other,
            })?;
            rec.step = history.len() + 1;
            rec.epoch = epoch;
            history.push(rec);
        }
        let last: Vec<f64> = history.iter().filter(|r| r.epoch == epoch).map(|r| r.total).collect();
        log::info!(
            "epoch {epoch}: lr {lr:e}, mean loss {:.6}",
            last.iter().sum::<f64>() / last.len() as f64
        );
    }
    Ok(TrainOutcome { model, history })
}

/// Trains on the dataset's train split.
pub fn train(dataset: &Dataset, config: &TrainConfig) -> Result<TrainOutcome> {
    let manifest = dataset.split(Split::Train)?;
    let set = build_training_set(manifest, dataset)?;
    train_on_set(&set, &dataset.space, config, None)
}

/// Training curve as CSV: `step,epoch,lr,total,supercat,conditional,connectivity,contrastive`.
/// Absent terms are empty fields.
pub fn write_curve_csv(history: &[StepRecord], out: &mut impl std::io::Write) -> std::io::Result<()> {
    writeln!(out, "step,epoch,lr,total,supercat,conditional,connectivity,contrastive")?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in history {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.step,
            r.epoch,
            r.lr,
            r.total,
            opt(r.supercat),
            opt(r.conditional),
            opt(r.connectivity),
            opt(r.contrastive)
        )?;
    }
    Ok(())
}

pub fn save_curve_csv(history: &[StepRecord], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    write_curve_csv(history, &mut f).map_err(|e| Error::io(path, e))?;
    f.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::data::{generate_synthetic, SyntheticSpec};

    fn tiny() -> Dataset {
        generate_synthetic(&SyntheticSpec { train_images: 12, test_images: 2, ..Default::default() })
            .unwrap()
            .dataset
    }

    #[test]
    fn schedule_is_exact() {
        let c = TrainConfig::default();
        assert_eq!(c.lr_at_epoch(1), 1e-5);
        assert_eq!(c.lr_at_epoch(2), 1e-5);
        assert_eq!(c.lr_at_epoch(3), 1e-5 * 0.1);
        let c = TrainConfig { decay_epochs: vec![2, 4], learning_rate: 1.0, lr_decay_factor: 0.5, ..c };
        assert_eq!((1..=5).map(|e| c.lr_at_epoch(e)).collect::<Vec<_>>(), vec![1.0, 0.5, 0.5, 0.25, 0.25]);
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let ds = tiny();
        let set = build_training_set(ds.train.as_ref().unwrap(), &ds).unwrap();
        let c = TrainConfig { learning_rate: 0.0, epochs: 1, ..Default::default() };
        let init = Model::init(c.head, set.input_dim, c.hidden_dim, &ds.space, c.mode, c.seed);
        let out = train_on_set(&set, &ds.space, &c, None).unwrap();
        assert_eq!(out.model, init);
        assert!(!out.history.is_empty());
    }

    #[test]
    fn one_step_update_matches_finite_differences() {
        let ds = tiny();
        let set = build_training_set(ds.train.as_ref().unwrap(), &ds).unwrap();
        let c = TrainConfig { hidden_dim: 5, ..Default::default() };
        let pos: Vec<&TrainEdge> = set.positives[..4].iter().collect();
        let neg: Vec<&TrainEdge> = set.negatives[..3].iter().collect();
        let before = Model::init(c.head, set.input_dim, 5, &ds.space, c.mode, 4);
        let mut after = before.clone();
        let lr = 0.05;
        sgd_step(&mut after, &pos, &neg, &ds.space, &c, lr).unwrap();
        // numeric gradient of the same loss, then p − lr·g
        let leaves: Vec<_> = before.tensors().into_iter().map(|(_, t)| t.clone()).collect();
        let n_sup = ds.space.num_supers();
        let eps = 1e-6;
        for (li, leaf) in leaves.iter().enumerate() {
            for j in (0..leaf.len()).step_by(7) {
                let eval = |delta: f64| {
                    let mut ls = leaves.clone();
                    ls[li].data_mut()[j] += delta;
                    let mut tape = Tape::new();
                    let handles: Vec<Var> = ls.into_iter().map(|t| tape.leaf(t)).collect();
                    let vars = ModelVars::from_handles(c.head, n_sup, &handles).unwrap();
                    let l = batch_loss(&mut tape, &vars, &pos, &neg, &ds.space, &c).unwrap();
                    tape.item(l.total)
                };
                let g = (eval(eps) - eval(-eps)) / (2.0 * eps);
                let expected = leaf.data()[j] - lr * g;
                let got = after.tensors()[li].1.data()[j];
                assert!((got - expected).abs() < 1e-8, "leaf {li}[{j}]: {got} vs {expected}");
            }
        }
    }

    #[test]
    fn batch_loss_passes_grad_check() {
        let ds = tiny();
        let set = build_training_set(ds.train.as_ref().unwrap(), &ds).unwrap();
        for (head, mode) in [
            (HeadKind::Hierarchical, HeadMode::BayesConsistent),
            (HeadKind::Hierarchical, HeadMode::ScaledLogits),
            (HeadKind::Flat, HeadMode::BayesConsistent),
        ] {
            let c = TrainConfig { head, mode, hidden_dim: 4, ..Default::default() };
            let m = Model::init(head, set.input_dim, 4, &ds.space, mode, 9);
            let leaves: Vec<_> = m.tensors().into_iter().map(|(_, t)| t.clone()).collect();
            let pos: Vec<&TrainEdge> = set.positives[..5].iter().collect();
            let neg: Vec<&TrainEdge> = set.negatives[..2].iter().collect();
            let report = grad_check(&leaves, 1e-6, |tape, vs| {
                let vars = ModelVars::from_handles(head, ds.space.num_supers(), vs)?;
                Ok(batch_loss(tape, &vars, &pos, &neg, &ds.space, &c)?.total)
            })
            .unwrap();
            assert!(report.max_rel_err < 1e-4, "{head:?} {mode:?}: {report:?}");
        }
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let ds = tiny();
        let c = TrainConfig { learning_rate: 0.05, epochs: 4, decay_epochs: vec![], ..Default::default() };
        let a = train(&ds, &c).unwrap();
        let b = train(&ds, &c).unwrap();
        assert_eq!(a, b);
        let means = a.epoch_means();
        assert!(means.last().unwrap() < &means[0], "{means:?}");
    }

    #[test]
    fn curve_csv_has_one_row_per_step() {
        let ds = tiny();
        let out = train(&ds, &TrainConfig { epochs: 1, ..Default::default() }).unwrap();
        let mut buf = Vec::new();
        write_curve_csv(&out.history, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), out.history.len() + 1);
        assert!(text.starts_with("step,epoch,lr,total,"));
    }
}
