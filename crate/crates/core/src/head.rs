//! Factorized relationship head and the flat baseline.
//!
//! From the edge context `X` the head predicts a connectivity score
//! `e = σ(Xᵀ W_conn)`, a distribution over super-categories
//! `r = softmax(Xᵀ W_sup)` and, for every super-category `s`, a distribution
//! over its own predicates. Two ways of forming the per-super distribution are
//! supported, see [`HeadMode`].

use serde::{Deserialize, Serialize};

use crate::autodiff::{kernels, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::hierarchy::{LabelSpace, PredicateId, SuperCategoryId};

/// How the per-super-category distributions are formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadMode {
    /// `p(r | s) = softmax(Xᵀ W_sub[s])`, joint `p(r) = p(s) · p(r | s)`.
    #[default]
    BayesConsistent,
    /// Logits are scaled by `p(s)` before the softmax:
    /// `softmax(Xᵀ W_sub[s] · p(s))`; the joint is again that times `p(s)`.
    ScaledLogits,
}

impl std::str::FromStr for HeadMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bayes_consistent" => Ok(HeadMode::BayesConsistent),
            "scaled_logits" => Ok(HeadMode::ScaledLogits),
            other => Err(Error::invalid(format!("unknown head mode {other:?}"))),
        }
    }
}

/// Weights of the factorized head.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    /// `[d, 1]`
    pub w_conn: Tensor,
    /// `[d, S]`
    pub w_sup: Tensor,
    /// `[d, n_s]` for each super-category in order.
    pub w_sub: Vec<Tensor>,
}

/// Weights of the flat baseline: one softmax over every predicate.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatHeadParams {
    /// `[d, 1]`
    pub w_conn: Tensor,
    /// `[d, P]`
    pub w_flat: Tensor,
}

fn expect_shape(name: &str, t: &Tensor, rows: usize, cols: usize) -> Result<()> {
    if t.shape() != [rows, cols] {
        return Err(Error::shape(format!(
            "{name} is {:?}, expected [{rows}, {cols}]",
            t.shape()
        )));
    }
    Ok(())
}

impl HeadParams {
    pub fn zeros(hidden: usize, space: &LabelSpace) -> Self {
        HeadParams {
            w_conn: Tensor::zeros(&[hidden, 1]),
            w_sup: Tensor::zeros(&[hidden, space.num_supers()]),
            w_sub: space
                .group_sizes()
                .into_iter()
                .map(|n| Tensor::zeros(&[hidden, n]))
                .collect(),
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_conn.rows()
    }

    pub fn validate(&self, space: &LabelSpace) -> Result<()> {
        let d = self.hidden_dim();
        expect_shape("W_conn", &self.w_conn, d, 1)?;
        expect_shape("W_sup", &self.w_sup, d, space.num_supers())?;
        let sizes = space.group_sizes();
        if self.w_sub.len() != sizes.len() {
            return Err(Error::shape(format!(
                "{} conditional heads for {} super-categories",
                self.w_sub.len(),
                sizes.len()
            )));
        }
        for (s, (w, n)) in self.w_sub.iter().zip(sizes).enumerate() {
            expect_shape(&format!("W_sub[{s}]"), w, d, n)?;
        }
        Ok(())
    }
}

impl FlatHeadParams {
    pub fn zeros(hidden: usize, space: &LabelSpace) -> Self {
        FlatHeadParams {
            w_conn: Tensor::zeros(&[hidden, 1]),
            w_flat: Tensor::zeros(&[hidden, space.num_predicates()]),
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_conn.rows()
    }

    pub fn validate(&self, space: &LabelSpace) -> Result<()> {
        let d = self.hidden_dim();
        expect_shape("W_conn", &self.w_conn, d, 1)?;
        expect_shape("W_flat", &self.w_flat, d, space.num_predicates())
    }
}

/// Output of the factorized head for one directed edge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgePrediction {
    pub connectivity: f64,
    pub super_probs: Vec<f64>,
    /// One distribution per super-category over `predicates_in(s)`.
    pub conditional_probs: Vec<Vec<f64>>,
    /// Indexed by predicate id.
    pub joint_probs: Vec<f64>,
    pub mode: HeadMode,
}

impl EdgePrediction {
    /// Assembles a prediction from its parts, filling `joint_probs`.
    pub fn from_parts(
        connectivity: f64,
        super_probs: Vec<f64>,
        conditional_probs: Vec<Vec<f64>>,
        space: &LabelSpace,
        mode: HeadMode,
    ) -> Result<Self> {
        if super_probs.len() != space.num_supers() || conditional_probs.len() != space.num_supers() {
            return Err(Error::shape("prediction does not match the super-category count"));
        }
        let mut joint_probs = vec![0.0; space.num_predicates()];
        for (s, cond) in conditional_probs.iter().enumerate() {
            let members = space.predicates_in(SuperCategoryId(s))?;
            if cond.len() != members.len() {
                return Err(Error::shape(format!(
                    "conditional {s} has {} entries for {} predicates",
                    cond.len(),
                    members.len()
                )));
            }
            for (p, c) in members.iter().zip(cond) {
                joint_probs[p.0] = super_probs[s] * c;
            }
        }
        let pred = EdgePrediction {
            connectivity,
            super_probs,
            conditional_probs,
            joint_probs,
            mode,
        };
        pred.check_finite()?;
        Ok(pred)
    }

    fn check_finite(&self) -> Result<()> {
        let all = std::iter::once(&self.connectivity)
            .chain(&self.super_probs)
            .chain(self.conditional_probs.iter().flatten())
            .chain(&self.joint_probs);
        for v in all {
            if !v.is_finite() {
                return Err(Error::NonFinite("head forward".into()));
            }
        }
        Ok(())
    }

    /// `p(r | s)` for a predicate inside its own super-category.
    pub fn conditional_of(&self, p: PredicateId, space: &LabelSpace) -> Result<f64> {
        let s = space.super_of(p)?;
        Ok(self.conditional_probs[s.0][space.local_index(p)?])
    }
}

/// Prediction of the flat baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlatPrediction {
    pub connectivity: f64,
    pub probs: Vec<f64>,
}

fn check_hidden(hidden: &[f64], d: usize) -> Result<()> {
    if hidden.len() != d {
        return Err(Error::shape(format!(
            "edge context has {} entries, head expects {d}",
            hidden.len()
        )));
    }
    if hidden.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("edge context".into()));
    }
    Ok(())
}

/// Value-only forward pass of the factorized head.
pub fn head_forward(
    hidden: &[f64],
    params: &HeadParams,
    space: &LabelSpace,
    mode: HeadMode,
) -> Result<EdgePrediction> {
    params.validate(space)?;
    check_hidden(hidden, params.hidden_dim())?;
    let conn_logit = kernels::linear(hidden, params.w_conn.data(), 1)[0];
    let sup_logits = kernels::linear(hidden, params.w_sup.data(), space.num_supers());
    let super_probs = kernels::softmax(&sup_logits);
    let conditional_probs = params
        .w_sub
        .iter()
        .enumerate()
        .map(|(s, w)| {
            let mut logits = kernels::linear(hidden, w.data(), w.cols());
            if mode == HeadMode::ScaledLogits {
                for l in &mut logits {
                    *l *= super_probs[s];
                }
            }
            kernels::softmax(&logits)
        })
        .collect();
    EdgePrediction::from_parts(
        kernels::sigmoid(conn_logit),
        super_probs,
        conditional_probs,
        space,
        mode,
    )
}

/// Value-only forward pass of the flat baseline.
pub fn flat_forward(hidden: &[f64], params: &FlatHeadParams) -> Result<FlatPrediction> {
    check_hidden(hidden, params.hidden_dim())?;
    let conn_logit = kernels::linear(hidden, params.w_conn.data(), 1)[0];
    let logits = kernels::linear(hidden, params.w_flat.data(), params.w_flat.cols());
    let pred = FlatPrediction {
        connectivity: kernels::sigmoid(conn_logit),
        probs: kernels::softmax(&logits),
    };
    if !pred.connectivity.is_finite() || pred.probs.iter().any(|p| !p.is_finite()) {
        return Err(Error::NonFinite("flat head forward".into()));
    }
    Ok(pred)
}

/// Best predicate of each super-category by joint probability.
///
/// Always returns one `(predicate, joint probability)` per super-category, in
/// super order. Ties go to the lowest predicate id.
pub fn top_per_super(pred: &EdgePrediction, space: &LabelSpace) -> Vec<(PredicateId, f64)> {
    (0..space.num_supers())
        .map(|s| {
            let members = space
                .predicates_in(SuperCategoryId(s))
                .expect("super index in range");
            let mut best = members[0];
            for &p in &members[1..] {
                if pred.joint_probs[p.0] > pred.joint_probs[best.0] {
                    best = p;
                }
            }
            (best, pred.joint_probs[best.0])
        })
        .collect()
}

/// Flat top-1: the single most probable predicate, lowest id on ties.
pub fn flat_top(pred: &FlatPrediction) -> (PredicateId, f64) {
    let i = kernels::argmax(&pred.probs);
    (PredicateId(i), pred.probs[i])
}

/// Tape leaves holding [`HeadParams`].
#[derive(Debug, Clone)]
pub struct HeadVars {
    pub w_conn: Var,
    pub w_sup: Var,
    pub w_sub: Vec<Var>,
}

impl HeadVars {
    pub fn register(tape: &mut Tape, params: &HeadParams) -> Self {
        HeadVars {
            w_conn: tape.leaf(params.w_conn.clone()),
            w_sup: tape.leaf(params.w_sup.clone()),
            w_sub: params.w_sub.iter().map(|w| tape.leaf(w.clone())).collect(),
        }
    }
}

/// Tape leaves holding [`FlatHeadParams`].
#[derive(Debug, Clone)]
pub struct FlatVars {
    pub w_conn: Var,
    pub w_flat: Var,
}

impl FlatVars {
    pub fn register(tape: &mut Tape, params: &FlatHeadParams) -> Self {
        FlatVars {
            w_conn: tape.leaf(params.w_conn.clone()),
            w_flat: tape.leaf(params.w_flat.clone()),
        }
    }
}

/// Differentiable head outputs for one edge.
#[derive(Debug, Clone)]
pub struct HeadNodes {
    /// Scalar pre-sigmoid connectivity.
    pub conn_logit: Var,
    pub sup_log_probs: Var,
    /// Per super-category, log of the conditional distribution.
    pub cond_log_probs: Vec<Var>,
}

pub fn head_on_tape(tape: &mut Tape, hidden: Var, vars: &HeadVars, mode: HeadMode) -> Result<HeadNodes> {
    let conn = tape.linear(hidden, vars.w_conn)?;
    let conn_logit = tape.index(conn, 0)?;
    let sup_logits = tape.linear(hidden, vars.w_sup)?;
    let sup_log_probs = tape.log_softmax(sup_logits)?;
    let sup_probs = match mode {
        HeadMode::ScaledLogits => Some(tape.softmax(sup_logits)?),
        HeadMode::BayesConsistent => None,
    };
    let mut cond_log_probs = Vec::with_capacity(vars.w_sub.len());
    for (s, w) in vars.w_sub.iter().enumerate() {
        let mut logits = tape.linear(hidden, *w)?;
        if let Some(probs) = sup_probs {
            let ps = tape.index(probs, s)?;
            logits = tape.scale(logits, ps)?;
        }
        cond_log_probs.push(tape.log_softmax(logits)?);
    }
    Ok(HeadNodes {
        conn_logit,
        sup_log_probs,
        cond_log_probs,
    })
}

/// Differentiable flat-head outputs for one edge.
#[derive(Debug, Clone)]
pub struct FlatNodes {
    pub conn_logit: Var,
    pub log_probs: Var,
}

pub fn flat_on_tape(tape: &mut Tape, hidden: Var, vars: &FlatVars) -> Result<FlatNodes> {
    let conn = tape.linear(hidden, vars.w_conn)?;
    let conn_logit = tape.index(conn, 0)?;
    let logits = tape.linear(hidden, vars.w_flat)?;
    Ok(FlatNodes {
        conn_logit,
        log_probs: tape.log_softmax(logits)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn names(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    fn two_by_two() -> LabelSpace {
        LabelSpace::from_groups(
            names(&["o"]),
            &[("a".into(), names(&["p0", "p1"])), ("b".into(), names(&["p2", "p3"]))],
        )
        .unwrap()
    }

    fn hand_params() -> HeadParams {
        HeadParams {
            w_conn: Tensor::matrix(2, 1, vec![0.5, 2.0]).unwrap(),
            w_sup: Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 0.0]).unwrap(),
            w_sub: vec![
                Tensor::matrix(2, 2, vec![2.0, 0.0, 1.0, 1.0]).unwrap(),
                Tensor::matrix(2, 2, vec![-1.0, 1.0, 0.0, 0.0]).unwrap(),
            ],
        }
    }

    fn close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn zero_inputs_give_uniform_outputs() {
        let space = LabelSpace::vg150();
        let params = HeadParams::zeros(16, &space);
        let pred = head_forward(&[0.0; 16], &params, &space, HeadMode::BayesConsistent).unwrap();
        assert_eq!(pred.connectivity, 0.5);
        close(&pred.super_probs, &[1.0 / 3.0; 3], 1e-15);
        for cond in &pred.conditional_probs {
            let n = cond.len() as f64;
            assert!(cond.iter().all(|c| (c - 1.0 / n).abs() < 1e-15));
        }
    }

    #[test]
    fn hand_case_bayes_consistent() {
        // reference values from 40-digit arithmetic
        let space = two_by_two();
        let pred = head_forward(&[1.0, 0.0], &hand_params(), &space, HeadMode::BayesConsistent).unwrap();
        assert!((pred.connectivity - 0.6224593312018546).abs() < 1e-15);
        close(&pred.super_probs, &[0.7310585786300049, 0.2689414213699951], 1e-15);
        close(&pred.conditional_probs[0], &[0.8807970779778824, 0.11920292202211756], 1e-15);
        close(&pred.conditional_probs[1], &[0.11920292202211756, 0.8807970779778824], 1e-15);
        close(
            &pred.joint_probs,
            &[0.6439142598879724, 0.08714431874203257, 0.03205860328008499, 0.23688281808991013],
            1e-15,
        );
    }

    #[test]
    fn hand_case_scaled_logits() {
        let space = two_by_two();
        let pred = head_forward(&[1.0, 0.0], &hand_params(), &space, HeadMode::ScaledLogits).unwrap();
        close(&pred.conditional_probs[0], &[0.8118562749129379, 0.18814372508706215], 1e-15);
        close(&pred.conditional_probs[1], &[0.3686802242979921, 0.6313197757020079], 1e-15);
        close(
            &pred.joint_probs,
            &[0.5935144943897028, 0.13754408424030204, 0.09915338355371059, 0.16978803781628451],
            1e-15,
        );
    }

    #[test]
    fn joint_sums_to_one_for_constructed_supers() {
        let space = LabelSpace::vg150();
        let conds: Vec<Vec<f64>> = space
            .group_sizes()
            .iter()
            .map(|&n| kernels::softmax(&(0..n).map(|i| (i as f64).sin()).collect::<Vec<_>>()))
            .collect();
        let pred = EdgePrediction::from_parts(0.5, vec![0.6, 0.3, 0.1], conds, &space, HeadMode::BayesConsistent).unwrap();
        assert!((pred.joint_probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn flat_head_examples() {
        let space = LabelSpace::vg150();
        let zero = flat_forward(&[0.0; 4], &FlatHeadParams::zeros(4, &space)).unwrap();
        assert!(zero.probs.iter().all(|p| (p - 0.02).abs() < 1e-15));

        let mut sat = FlatHeadParams::zeros(1, &space);
        sat.w_flat.data_mut()[0] = 1000.0;
        let p = flat_forward(&[1.0], &sat).unwrap();
        assert_eq!(p.probs[0], 1.0);
        assert!(p.probs[1..].iter().all(|v| *v < 1e-300));

        let params = FlatHeadParams {
            w_conn: Tensor::matrix(3, 1, vec![0.2, -0.1, 0.4]).unwrap(),
            w_flat: Tensor::matrix(
                3,
                4,
                vec![0.1, -0.4, 0.9, 0.0, 0.5, 0.2, -0.3, 1.1, -0.7, 0.8, 0.05, 0.3],
            )
            .unwrap(),
        };
        let p = flat_forward(&[0.3, -1.2, 0.7], &params).unwrap();
        close(
            &p.probs,
            &[0.09017805885507711, 0.3179156663765889, 0.5061262517410274, 0.08578002302730652],
            1e-15,
        );
        assert!((p.connectivity - 0.6130141761393355).abs() < 1e-15);
    }

    #[test]
    fn shape_errors() {
        let space = two_by_two();
        let mut params = hand_params();
        assert!(head_forward(&[1.0], &params, &space, HeadMode::BayesConsistent).is_err());
        params.w_sub.pop();
        assert!(matches!(
            head_forward(&[1.0, 0.0], &params, &space, HeadMode::BayesConsistent),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn top_per_super_rules() {
        let space = LabelSpace::vg150();
        let params = HeadParams::zeros(4, &space);
        let pred = head_forward(&[0.0; 4], &params, &space, HeadMode::BayesConsistent).unwrap();
        let top = top_per_super(&pred, &space);
        assert_eq!(top.len(), 3);
        for (s, (p, _)) in top.iter().enumerate() {
            assert_eq!(*p, space.predicates_in(SuperCategoryId(s)).unwrap()[0]);
        }

        // planted maximum inside the third group
        let mut planted = pred.clone();
        let target = space.predicates_in(SuperCategoryId(2)).unwrap()[7];
        planted.joint_probs[target.0] += 0.01;
        let brute = space
            .predicates_in(SuperCategoryId(2))
            .unwrap()
            .iter()
            .copied()
            .fold(None::<PredicateId>, |best, p| match best {
                Some(b) if planted.joint_probs[b.0] >= planted.joint_probs[p.0] => Some(b),
                _ => Some(p),
            })
            .unwrap();
        assert_eq!(brute, target);
        assert_eq!(top_per_super(&planted, &space)[2].0, target);
    }

    #[test]
    fn tape_and_value_paths_agree() {
        let space = LabelSpace::vg150();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d = 6;
        let mut params = HeadParams::zeros(d, &space);
        for t in std::iter::once(&mut params.w_conn)
            .chain(std::iter::once(&mut params.w_sup))
            .chain(params.w_sub.iter_mut())
        {
            for v in t.data_mut() {
                *v = rng.random_range(-1.0..1.0);
            }
        }
        let hidden: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        for mode in [HeadMode::BayesConsistent, HeadMode::ScaledLogits] {
            let pred = head_forward(&hidden, &params, &space, mode).unwrap();
            let mut tape = Tape::new();
            let vars = HeadVars::register(&mut tape, &params);
            let h = tape.leaf(Tensor::vector(hidden.clone()));
            let nodes = head_on_tape(&mut tape, h, &vars, mode).unwrap();
            assert!((kernels::sigmoid(tape.item(nodes.conn_logit)) - pred.connectivity).abs() < 1e-15);
            for (a, b) in tape.value(nodes.sup_log_probs).data().iter().zip(&pred.super_probs) {
                assert!((a.exp() - b).abs() < 1e-14);
            }
            for (s, lp) in nodes.cond_log_probs.iter().enumerate() {
                for (a, b) in tape.value(*lp).data().iter().zip(&pred.conditional_probs[s]) {
                    assert!((a.exp() - b).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn mode_parses() {
        assert_eq!("scaled_logits".parse::<HeadMode>().unwrap(), HeadMode::ScaledLogits);
        assert!("other".parse::<HeadMode>().is_err());
        assert_eq!(serde_json::to_string(&HeadMode::BayesConsistent).unwrap(), "\"bayes_consistent\"");
    }
}
