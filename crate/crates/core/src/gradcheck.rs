//! Finite-difference check of the full training loss.
//!
//! Each seed builds a small random label space, model and batch, then compares
//! the tape gradient of the weighted batch loss against central differences
//! for every projection and head parameter.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{grad_check, GradCheckReport};
use crate::error::Result;
use crate::head::HeadMode;
use crate::hierarchy::{LabelSpace, ObjectCategoryId, PredicateId};
use crate::losses::{LossWeights, NegativeScope};
use crate::model::{HeadKind, Model, ModelVars};
use crate::train::{batch_loss, TrainConfig, TrainEdge};
use crate::assembly::{edge_input, PooledNode};

/// Pass threshold on the maximum relative error.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
pub const GRADCHECK_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradCheckCase {
    pub seed: u64,
    pub head: HeadKind,
    pub mode: HeadMode,
    pub max_rel_err: f64,
    pub entries_checked: usize,
}

/// The head/mode combinations covered per seed.
pub const VARIANTS: [(HeadKind, HeadMode); 3] = [
    (HeadKind::Hierarchical, HeadMode::BayesConsistent),
    (HeadKind::Hierarchical, HeadMode::ScaledLogits),
    (HeadKind::Flat, HeadMode::BayesConsistent),
];

fn check_space() -> LabelSpace {
    let objects = (0..4).map(|o| format!("o{o}")).collect();
    let groups = [
        ("g".to_string(), vec!["g0".to_string(), "g1".to_string()]),
        ("p".to_string(), vec!["p0".to_string(), "p1".to_string(), "p2".to_string()]),
        ("s".to_string(), vec!["s0".to_string(), "s1".to_string()]),
    ];
    LabelSpace::from_groups(objects, &groups).expect("fixed space is valid")
}

fn random_edge(rng: &mut ChaCha8Rng, channels: usize, space: &LabelSpace, predicate: Option<PredicateId>, image: usize) -> Result<TrainEdge> {
    let mut node = || PooledNode {
        features: (0..channels).map(|_| rng.random_range(-1.0..1.0)).collect(),
        category: ObjectCategoryId(rng.random_range(0..space.num_objects())),
    };
    let (s, o) = (node(), node());
    Ok(TrainEdge { input: edge_input(&s, &o, space)?, predicate, image })
}

/// Checks one seed and head variant with hidden size 8.
pub fn check_model_loss(seed: u64, head: HeadKind, mode: HeadMode) -> Result<GradCheckReport> {
    let space = check_space();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let channels = 3;
    // labels repeat so every anchor has a positive and a negative
    let labels = [0, 0, 2, 2, 5, 5];
    let positives = labels
        .iter()
        .enumerate()
        .map(|(i, &p)| random_edge(&mut rng, channels, &space, Some(PredicateId(p)), i % 2))
        .collect::<Result<Vec<_>>>()?;
    let negatives = (0..3)
        .map(|i| random_edge(&mut rng, channels, &space, None, i % 2))
        .collect::<Result<Vec<_>>>()?;
    let input = positives[0].input.len();
    let model = Model::init(head, input, 8, &space, mode, seed.wrapping_add(1));
    let config = TrainConfig {
        head,
        mode,
        hidden_dim: 8,
        weights: LossWeights { supercat: 1.0, conditional: 0.7, contrastive: 0.5, connectivity: 1.3 },
        negative_scope: NegativeScope::Batch,
        temperature: 0.5,
        ..TrainConfig::default()
    };
    let leaves: Vec<_> = model.tensors().into_iter().map(|(_, t)| t.clone()).collect();
    let pos: Vec<&TrainEdge> = positives.iter().collect();
    let neg: Vec<&TrainEdge> = negatives.iter().collect();
    grad_check(&leaves, GRADCHECK_EPS, |tape, vs| {
        let vars = ModelVars::from_handles(head, space.num_supers(), vs)?;
        Ok(batch_loss(tape, &vars, &pos, &neg, &space, &config)?.total)
    })
}

/// Every variant for every seed.
pub fn run_suite(seeds: impl IntoIterator<Item = u64>) -> Result<Vec<GradCheckCase>> {
    let mut out = Vec::new();
    for seed in seeds {
        for (head, mode) in VARIANTS {
            let r = check_model_loss(seed, head, mode)?;
            out.push(GradCheckCase {
                seed,
                head,
                mode,
                max_rel_err: r.max_rel_err,
                entries_checked: r.entries_checked,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_seed_passes() {
        for case in run_suite([3]).unwrap() {
            assert!(case.max_rel_err <= GRADCHECK_TOLERANCE, "{case:?}");
            assert!(case.entries_checked > 100);
        }
    }
}
