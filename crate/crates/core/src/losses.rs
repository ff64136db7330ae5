//! Training objectives.
//!
//! Each loss exists twice: a value-only function over predictions (used by
//! evaluation code and as a reference in tests) and a tape builder used
//! during training. The two are checked against each other in the tests.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::autodiff::{kernels, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::head::EdgePrediction;
use crate::hierarchy::{LabelSpace, PredicateId, SuperCategoryId};

/// Probabilities are clamped to this floor before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

fn neg_log_clamped(p: f64, what: &str) -> f64 {
    if p < PROB_FLOOR {
        warn!("{what}: probability {p:e} clamped to {PROB_FLOOR:e}");
        -PROB_FLOOR.ln()
    } else {
        -p.ln()
    }
}

/// `−ln r_sup[gt]`.
pub fn supercat_ce(pred: &EdgePrediction, gt: SuperCategoryId) -> Result<f64> {
    let p = *pred.super_probs.get(gt.0).ok_or(Error::OutOfRange {
        kind: "super-category",
        index: gt.0,
        size: pred.super_probs.len(),
    })?;
    Ok(neg_log_clamped(p, "super-category cross-entropy"))
}

/// `−ln p(gt | super_of(gt))`.
pub fn conditional_ce(pred: &EdgePrediction, gt: PredicateId, space: &LabelSpace) -> Result<f64> {
    let p = pred.conditional_of(gt, space)?;
    Ok(neg_log_clamped(p, "conditional cross-entropy"))
}

/// Binary cross-entropy of the connectivity score.
pub fn connectivity_bce(e: f64, connected: bool) -> f64 {
    let e = e.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
    if connected {
        -e.ln()
    } else {
        -(1.0 - e).ln()
    }
}

/// Which batch members may serve as negatives for an anchor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeScope {
    /// Every other-class member of the batch.
    #[default]
    Batch,
    /// Other-class members from the anchor's own image only.
    SameImage,
}

/// Hidden states with relation labels for the contrastive objective.
#[derive(Debug, Clone)]
pub struct ContrastiveBatch {
    pub hidden: Vec<Vec<f64>>,
    pub labels: Vec<PredicateId>,
    pub temperature: f64,
    /// Image of each member; only consulted for [`NegativeScope::SameImage`].
    pub groups: Vec<usize>,
    pub scope: NegativeScope,
}

impl ContrastiveBatch {
    pub fn new(hidden: Vec<Vec<f64>>, labels: Vec<PredicateId>, temperature: f64) -> Result<Self> {
        let n = hidden.len();
        let batch = ContrastiveBatch {
            hidden,
            labels,
            temperature,
            groups: vec![0; n],
            scope: NegativeScope::Batch,
        };
        batch.validate()?;
        Ok(batch)
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden.len() < 2 {
            return Err(Error::invalid("contrastive batch needs at least 2 members"));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::invalid("temperature must be positive"));
        }
        if self.labels.len() != self.hidden.len() || self.groups.len() != self.hidden.len() {
            return Err(Error::shape("contrastive batch fields differ in length"));
        }
        Ok(())
    }
}

/// Positive and negative index sets for every anchor.
pub fn contrastive_pairs(
    labels: &[PredicateId],
    groups: &[usize],
    scope: NegativeScope,
) -> Vec<(Vec<usize>, Vec<usize>)> {
    (0..labels.len())
        .map(|b| {
            let positives = (0..labels.len())
                .filter(|&q| q != b && labels[q] == labels[b])
                .collect();
            let negatives = (0..labels.len())
                .filter(|&q| {
                    labels[q] != labels[b]
                        && (scope == NegativeScope::Batch || groups[q] == groups[b])
                })
                .collect();
            (positives, negatives)
        })
        .collect()
}

/// Result of the contrastive loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContrastiveOutcome {
    pub loss: f64,
    /// Anchors that had at least one positive and one negative.
    pub valid_anchors: usize,
}

impl ContrastiveOutcome {
    /// True when no anchor was usable and the loss was defined as zero.
    pub fn is_vacuous(&self) -> bool {
        self.valid_anchors == 0
    }
}

/// Mean over anchors `b` of
/// `−(1/|P(b)|) Σ_{p∈P(b)} [X_b·X_p/τ − ln Σ_{n∈N(b)} exp(X_b·X_n/τ)]`.
///
/// The denominator runs over negatives only. Anchors without positives or
/// without negatives are skipped.
pub fn contrastive_loss(batch: &ContrastiveBatch) -> Result<ContrastiveOutcome> {
    batch.validate()?;
    let tau = batch.temperature;
    let mut total = 0.0;
    let mut valid = 0;
    for (b, (pos, neg)) in contrastive_pairs(&batch.labels, &batch.groups, batch.scope)
        .into_iter()
        .enumerate()
    {
        if pos.is_empty() || neg.is_empty() {
            continue;
        }
        let anchor = &batch.hidden[b];
        let neg_logits: Vec<f64> = neg
            .iter()
            .map(|&n| kernels::dot(anchor, &batch.hidden[n]) / tau)
            .collect();
        let lse = kernels::logsumexp(&neg_logits);
        let mean_pos: f64 = pos
            .iter()
            .map(|&p| kernels::dot(anchor, &batch.hidden[p]) / tau - lse)
            .sum::<f64>()
            / pos.len() as f64;
        total -= mean_pos;
        valid += 1;
    }
    let loss = if valid == 0 { 0.0 } else { total / valid as f64 };
    if !loss.is_finite() {
        return Err(Error::NonFinite("contrastive loss".into()));
    }
    Ok(ContrastiveOutcome {
        loss,
        valid_anchors: valid,
    })
}

/// `−log_probs[index]` as a scalar node.
pub fn nll_on_tape(tape: &mut Tape, log_probs: Var, index: usize) -> Result<Var> {
    let lp = tape.index(log_probs, index)?;
    tape.neg(lp)
}

/// Connectivity BCE from the pre-sigmoid logit.
pub fn bce_on_tape(tape: &mut Tape, logit: Var, connected: bool) -> Result<Var> {
    let signed = if connected { logit } else { tape.neg(logit)? };
    let ls = tape.log_sigmoid(signed)?;
    tape.neg(ls)
}

/// Tape version of [`contrastive_loss`]. Returns `None` when no anchor is valid.
pub fn contrastive_on_tape(
    tape: &mut Tape,
    hidden: &[Var],
    labels: &[PredicateId],
    groups: &[usize],
    scope: NegativeScope,
    temperature: f64,
) -> Result<Option<Var>> {
    if !(temperature > 0.0) {
        return Err(Error::invalid("temperature must be positive"));
    }
    let mut terms = Vec::new();
    for (b, (pos, neg)) in contrastive_pairs(labels, groups, scope).into_iter().enumerate() {
        if pos.is_empty() || neg.is_empty() {
            continue;
        }
        let mut neg_logits = Vec::with_capacity(neg.len());
        for n in neg {
            let d = tape.dot(hidden[b], hidden[n])?;
            neg_logits.push(tape.scale_const(d, 1.0 / temperature)?);
        }
        let stacked = tape.stack(&neg_logits)?;
        let lse = tape.logsumexp(stacked)?;
        let mut pos_logits = Vec::with_capacity(pos.len());
        for p in &pos {
            let d = tape.dot(hidden[b], hidden[*p])?;
            pos_logits.push(tape.scale_const(d, 1.0 / temperature)?);
        }
        let stacked = tape.stack(&pos_logits)?;
        let pos_sum = tape.sum(stacked)?;
        let pos_mean = tape.scale_const(pos_sum, 1.0 / pos.len() as f64)?;
        let term = tape.sub(lse, pos_mean)?;
        terms.push(term);
    }
    if terms.is_empty() {
        return Ok(None);
    }
    let n = terms.len() as f64;
    let stacked = tape.stack(&terms)?;
    let total = tape.sum(stacked)?;
    Ok(Some(tape.scale_const(total, 1.0 / n)?))
}

/// Values of the four loss terms.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub supercat: f64,
    pub conditional: f64,
    pub contrastive: f64,
    pub connectivity: f64,
}

/// Non-negative multipliers of the loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub supercat: f64,
    pub conditional: f64,
    pub contrastive: f64,
    pub connectivity: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            supercat: 1.0,
            conditional: 1.0,
            contrastive: 1.0,
            connectivity: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.supercat, self.conditional, self.contrastive, self.connectivity];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::invalid("loss weights must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Weighted sum of the loss terms.
pub fn total_loss(terms: &LossTerms, weights: &LossWeights) -> f64 {
    weights.supercat * terms.supercat
        + weights.conditional * terms.conditional
        + weights.contrastive * terms.contrastive
        + weights.connectivity * terms.connectivity
}

/// Tape version of [`total_loss`]; absent terms are skipped.
pub fn weighted_sum_on_tape(tape: &mut Tape, terms: &[(Option<Var>, f64)]) -> Result<Var> {
    let mut scaled = Vec::new();
    for (term, w) in terms {
        if let Some(t) = term {
            scaled.push(tape.scale_const(*t, *w)?);
        }
    }
    if scaled.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let stacked = tape.stack(&scaled)?;
    tape.sum(stacked)
}
