//! Projection plus head: the full set of trainable parameters.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assembly::AssemblyParams;
use crate::autodiff::{Gradients, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::head::{
    flat_forward, flat_on_tape, head_forward, head_on_tape, EdgePrediction, FlatHeadParams,
    FlatNodes, FlatPrediction, FlatVars, HeadMode, HeadNodes, HeadParams, HeadVars,
};
use crate::hierarchy::LabelSpace;

/// Which relationship head a model carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    #[default]
    Hierarchical,
    Flat,
}

#[derive(Debug, Clone, PartialEq)]
pub enum HeadWeights {
    Hierarchical(HeadParams),
    Flat(FlatHeadParams),
}

/// Output of either head.
#[derive(Debug, Clone, PartialEq)]
pub enum Prediction {
    Hierarchical(EdgePrediction),
    Flat(FlatPrediction),
}

impl Prediction {
    pub fn connectivity(&self) -> f64 {
        match self {
            Prediction::Hierarchical(p) => p.connectivity,
            Prediction::Flat(p) => p.connectivity,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub assembly: AssemblyParams,
    pub head: HeadWeights,
    pub mode: HeadMode,
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let a = 1.0 / (rows as f64).sqrt();
    Tensor::from_fn(&[rows, cols], |_| rng.random_range(-a..a))
}

impl Model {
    /// Seeded `uniform(−a, a)` init with `a = 1/√fan_in` for every matrix.
    ///
    /// Draw order is projection, connectivity, then the predicate weights
    /// (conditional heads in super order for the hierarchical head), then the
    /// super-category weights. With a single super-category the hierarchical
    /// and flat heads therefore start from identical predicate weights.
    pub fn init(
        kind: HeadKind,
        input_dim: usize,
        hidden_dim: usize,
        space: &LabelSpace,
        mode: HeadMode,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let projection = uniform(&mut rng, input_dim, hidden_dim);
        let w_conn = uniform(&mut rng, hidden_dim, 1);
        let head = match kind {
            HeadKind::Hierarchical => {
                let w_sub = space
                    .group_sizes()
                    .into_iter()
                    .map(|n| uniform(&mut rng, hidden_dim, n))
                    .collect();
                let w_sup = uniform(&mut rng, hidden_dim, space.num_supers());
                HeadWeights::Hierarchical(HeadParams { w_conn, w_sup, w_sub })
            }
            HeadKind::Flat => {
                let w_flat = uniform(&mut rng, hidden_dim, space.num_predicates());
                HeadWeights::Flat(FlatHeadParams { w_conn, w_flat })
            }
        };
        Model {
            assembly: AssemblyParams { projection },
            head,
            mode,
        }
    }

    pub fn kind(&self) -> HeadKind {
        match self.head {
            HeadWeights::Hierarchical(_) => HeadKind::Hierarchical,
            HeadWeights::Flat(_) => HeadKind::Flat,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.assembly.input_dim()
    }

    pub fn hidden_dim(&self) -> usize {
        self.assembly.hidden_dim()
    }

    pub fn validate(&self, space: &LabelSpace) -> Result<()> {
        let d = self.hidden_dim();
        let head_d = match &self.head {
            HeadWeights::Hierarchical(p) => {
                p.validate(space)?;
                p.hidden_dim()
            }
            HeadWeights::Flat(p) => {
                p.validate(space)?;
                p.hidden_dim()
            }
        };
        if head_d != d {
            return Err(Error::shape(format!(
                "projection outputs {d} dims, head expects {head_d}"
            )));
        }
        Ok(())
    }

    /// Named tensors in a fixed order, for persistence and updates.
    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("projection".to_string(), &self.assembly.projection)];
        match &self.head {
            HeadWeights::Hierarchical(p) => {
                out.push(("w_conn".into(), &p.w_conn));
                out.push(("w_sup".into(), &p.w_sup));
                for (s, w) in p.w_sub.iter().enumerate() {
                    out.push((format!("w_sub.{s}"), w));
                }
            }
            HeadWeights::Flat(p) => {
                out.push(("w_conn".into(), &p.w_conn));
                out.push(("w_flat".into(), &p.w_flat));
            }
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.assembly.projection];
        match &mut self.head {
            HeadWeights::Hierarchical(p) => {
                out.push(&mut p.w_conn);
                out.push(&mut p.w_sup);
                out.extend(p.w_sub.iter_mut());
            }
            HeadWeights::Flat(p) => {
                out.push(&mut p.w_conn);
                out.push(&mut p.w_flat);
            }
        }
        out
    }

    /// Hidden context of an edge input vector.
    pub fn hidden(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.assembly.project(input)
    }

    pub fn predict_hidden(&self, hidden: &[f64], space: &LabelSpace) -> Result<Prediction> {
        match &self.head {
            HeadWeights::Hierarchical(p) => {
                head_forward(hidden, p, space, self.mode).map(Prediction::Hierarchical)
            }
            HeadWeights::Flat(p) => flat_forward(hidden, p).map(Prediction::Flat),
        }
    }

    pub fn predict(&self, input: &[f64], space: &LabelSpace) -> Result<Prediction> {
        self.predict_hidden(&self.hidden(input)?, space)
    }

    /// Puts every parameter on `tape` as a leaf.
    pub fn register(&self, tape: &mut Tape) -> ModelVars {
        let projection = tape.leaf(self.assembly.projection.clone());
        let head = match &self.head {
            HeadWeights::Hierarchical(p) => HeadVarsKind::Hierarchical(HeadVars::register(tape, p)),
            HeadWeights::Flat(p) => HeadVarsKind::Flat(FlatVars::register(tape, p)),
        };
        ModelVars { projection, head }
    }

    /// `p ← p − lr · ∂L/∂p` for every parameter.
    pub fn sgd_update(&mut self, vars: &ModelVars, grads: &Gradients, lr: f64) {
        let handles = vars.handles();
        for (t, v) in self.tensors_mut().into_iter().zip(handles) {
            if let Some(g) = grads.get(v) {
                t.sgd_step(g, lr);
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.is_finite())
    }
}

#[derive(Debug, Clone)]
pub enum HeadVarsKind {
    Hierarchical(HeadVars),
    Flat(FlatVars),
}

/// Tape handles for a registered [`Model`].
#[derive(Debug, Clone)]
pub struct ModelVars {
    pub projection: Var,
    pub head: HeadVarsKind,
}

/// Differentiable head outputs of either kind.
#[derive(Debug, Clone)]
pub enum EdgeNodes {
    Hierarchical(HeadNodes),
    Flat(FlatNodes),
}

impl EdgeNodes {
    pub fn conn_logit(&self) -> Var {
        match self {
            EdgeNodes::Hierarchical(n) => n.conn_logit,
            EdgeNodes::Flat(n) => n.conn_logit,
        }
    }
}

impl ModelVars {
    /// Leaves in the same order as [`Model::tensors`].
    pub fn handles(&self) -> Vec<Var> {
        let mut out = vec![self.projection];
        match &self.head {
            HeadVarsKind::Hierarchical(h) => {
                out.push(h.w_conn);
                out.push(h.w_sup);
                out.extend(h.w_sub.iter().copied());
            }
            HeadVarsKind::Flat(h) => {
                out.push(h.w_conn);
                out.push(h.w_flat);
            }
        }
        out
    }

    /// Inverse of [`ModelVars::handles`] for a model of the given shape.
    pub fn from_handles(kind: HeadKind, num_supers: usize, handles: &[Var]) -> Result<Self> {
        let expected = match kind {
            HeadKind::Hierarchical => 3 + num_supers,
            HeadKind::Flat => 3,
        };
        if handles.len() != expected {
            return Err(Error::shape(format!("expected {expected} handles, got {}", handles.len())));
        }
        let head = match kind {
            HeadKind::Hierarchical => HeadVarsKind::Hierarchical(HeadVars {
                w_conn: handles[1],
                w_sup: handles[2],
                w_sub: handles[3..].to_vec(),
            }),
            HeadKind::Flat => HeadVarsKind::Flat(FlatVars {
                w_conn: handles[1],
                w_flat: handles[2],
            }),
        };
        Ok(ModelVars {
            projection: handles[0],
            head,
        })
    }

    /// Projects an edge input and runs the head on it.
    pub fn edge(&self, tape: &mut Tape, input: Vec<f64>, mode: HeadMode) -> Result<(Var, EdgeNodes)> {
        let hidden = AssemblyParams::project_on_tape(tape, self.projection, input)?;
        let nodes = match &self.head {
            HeadVarsKind::Hierarchical(h) => EdgeNodes::Hierarchical(head_on_tape(tape, hidden, h, mode)?),
            HeadVarsKind::Flat(h) => EdgeNodes::Flat(flat_on_tape(tape, hidden, h)?),
        };
        Ok((hidden, nodes))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_seeded_and_bounded() {
        let space = LabelSpace::vg150();
        let a = Model::init(HeadKind::Hierarchical, 12, 8, &space, HeadMode::BayesConsistent, 7);
        let b = Model::init(HeadKind::Hierarchical, 12, 8, &space, HeadMode::BayesConsistent, 7);
        let c = Model::init(HeadKind::Hierarchical, 12, 8, &space, HeadMode::BayesConsistent, 8);
        assert_eq!(a, b);
        assert_ne!(a, c);
        a.validate(&space).unwrap();
        let bound = 1.0 / 8f64.sqrt();
        for (name, t) in a.tensors().into_iter().skip(1) {
            assert!(t.data().iter().all(|v| v.abs() < bound), "{name}");
        }
    }

    #[test]
    fn single_group_init_matches_flat() {
        let space = LabelSpace::vg150().flattened();
        let h = Model::init(HeadKind::Hierarchical, 10, 6, &space, HeadMode::BayesConsistent, 3);
        let f = Model::init(HeadKind::Flat, 10, 6, &space, HeadMode::BayesConsistent, 3);
        assert_eq!(h.assembly, f.assembly);
        match (&h.head, &f.head) {
            (HeadWeights::Hierarchical(hp), HeadWeights::Flat(fp)) => {
                assert_eq!(hp.w_conn, fp.w_conn);
                assert_eq!(hp.w_sub[0], fp.w_flat);
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn handles_follow_tensor_order() {
        let space = LabelSpace::vg150();
        let m = Model::init(HeadKind::Hierarchical, 4, 3, &space, HeadMode::BayesConsistent, 0);
        let mut tape = Tape::new();
        let vars = m.register(&mut tape);
        for ((_, t), v) in m.tensors().into_iter().zip(vars.handles()) {
            assert_eq!(t, tape.value(v));
        }
    }
}
