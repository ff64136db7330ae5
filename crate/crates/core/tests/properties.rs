//! Property tests over the public API.

use proptest::prelude::*;

use hiersgg::assembly::BoundingBox;
use hiersgg::autodiff::{kernels, Tensor};
use hiersgg::data::Container;
use hiersgg::eval::{
    iou, match_candidates, rank_image, recall_at_k, GtEdge, ImageResult, SceneGraphGt, SceneNode, ScoredEdge, Task,
};
use hiersgg::head::{head_forward, HeadMode, HeadParams};
use hiersgg::losses::{contrastive_loss, ContrastiveBatch};
use hiersgg::{LabelSpace, ObjectCategoryId, PredicateId};

fn bbox() -> impl Strategy<Value = BoundingBox> {
    (0.0..0.9f64, 0.0..0.9f64, 0.01..0.5f64, 0.01..0.5f64)
        .prop_map(|(x, y, w, h)| BoundingBox::new(x, y, (x + w).min(1.0), (y + h).min(1.0)).unwrap())
}

fn space() -> LabelSpace {
    LabelSpace::from_groups(
        vec!["a".into(), "b".into()],
        &[
            ("g".into(), vec!["p0".into(), "p1".into(), "p2".into()]),
            ("h".into(), vec!["p3".into()]),
            ("k".into(), vec!["p4".into(), "p5".into()]),
        ],
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn iou_is_symmetric_and_bounded(a in bbox(), b in bbox()) {
        let x = iou(&a, &b);
        prop_assert!((0.0..=1.0).contains(&x));
        prop_assert_eq!(x, iou(&b, &a));
        prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_is_a_distribution(x in prop::collection::vec(-500.0..500.0f64, 1..30)) {
        let p = kernels::softmax(&x);
        prop_assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert_eq!(kernels::argmax(&p), kernels::argmax(&x));
    }

    #[test]
    fn head_outputs_are_distributions(
        x in prop::collection::vec(-4.0..4.0f64, 3),
        w in prop::collection::vec(-2.0..2.0f64, 3 * 10),
        scaled in any::<bool>(),
    ) {
        let s = space();
        let mut it = w.chunks(3);
        let mut take = |cols: usize| {
            let mut data = Vec::new();
            for _ in 0..cols { data.extend_from_slice(it.next().unwrap()); }
            // columns were drawn as rows; transpose into [3, cols]
            Tensor::from_fn(&[3, cols], |i| data[(i % cols) * 3 + i / cols])
        };
        let params = HeadParams { w_conn: take(1), w_sup: take(3), w_sub: vec![take(3), take(1), take(2)] };
        let mode = if scaled { HeadMode::ScaledLogits } else { HeadMode::BayesConsistent };
        let p = head_forward(&x, &params, &s, mode).unwrap();
        prop_assert!((0.0..=1.0).contains(&p.connectivity));
        prop_assert!((p.joint_probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        // single-member group: conditional is exactly one
        prop_assert_eq!(p.conditional_probs[1][0], 1.0);
    }

    #[test]
    fn container_round_trips(
        shape in prop::collection::vec(1usize..4, 0..4),
        seed in any::<u64>(),
        name in "[a-z.]{0,12}",
    ) {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|i| ((seed.wrapping_add(i as u64) % 1000) as f64 - 500.0) / 7.0).collect();
        let t = Tensor::new(shape.clone(), data).unwrap();
        let mut c = Container::new(serde_json::json!({"seed": seed.to_string()}));
        c.push(name.clone(), t.clone());
        let back = Container::decode(&c.encode().unwrap()).unwrap();
        prop_assert_eq!(back, c);
    }

    #[test]
    fn contrastive_loss_is_finite(
        hidden in prop::collection::vec(prop::collection::vec(-3.0..3.0f64, 4), 2..8),
        labels in prop::collection::vec(0usize..3, 8),
        tau in 0.05..5.0f64,
    ) {
        let labels: Vec<PredicateId> = labels[..hidden.len()].iter().map(|&l| PredicateId(l)).collect();
        let b = ContrastiveBatch::new(hidden, labels, tau).unwrap();
        let out = contrastive_loss(&b).unwrap();
        prop_assert!(out.loss.is_finite());
        if out.is_vacuous() { prop_assert_eq!(out.loss, 0.0); }
    }

    #[test]
    fn ranking_and_recall_invariants(
        scores in prop::collection::vec((0usize..4, 0usize..4, 0usize..3, 0u8..5), 0..25),
        gt_edges in prop::collection::vec((0usize..4, 0usize..4, 0usize..3), 0..6),
        k in 1usize..30,
    ) {
        let nodes: Vec<SceneNode> = (0..4)
            .map(|i| SceneNode {
                bbox: BoundingBox::new(0.2 * i as f64, 0.0, 0.2 * i as f64 + 0.2, 0.2).unwrap(),
                label: ObjectCategoryId(i % 2),
            })
            .collect();
        let edges: Vec<ScoredEdge> = scores
            .iter()
            .filter(|(s, o, _, _)| s != o)
            .map(|&(s, o, p, sc)| ScoredEdge {
                subject: s,
                object: o,
                subject_node: nodes[s],
                object_node: nodes[o],
                candidates: vec![(PredicateId(p), sc as f64 / 4.0)],
            })
            .collect();
        let mut seen = std::collections::BTreeSet::new();
        let gt = SceneGraphGt {
            nodes: nodes.clone(),
            edges: gt_edges
                .iter()
                .filter(|(s, o, p)| s != o && seen.insert((*s, *o, *p)))
                .map(|&(s, o, p)| GtEdge { subject: s, object: o, predicate: PredicateId(p) })
                .collect(),
        };
        let ranked = rank_image(&edges, k).unwrap();
        prop_assert!(ranked.len() <= k);
        prop_assert!(ranked.windows(2).all(|w| w[0].score >= w[1].score));
        let m = match_candidates(&ranked, &gt, Task::PredCls).unwrap();
        // each GT edge is claimed at most once and each candidate claims at most one
        let mut claimed: Vec<usize> = m.candidate_match.iter().flatten().copied().collect();
        claimed.sort();
        claimed.dedup();
        prop_assert_eq!(claimed.len(), m.matched_count());
        let img = ImageResult { image_id: "x".into(), ranked, gt };
        let r = recall_at_k(std::slice::from_ref(&img), k, Task::PredCls, 3).unwrap();
        if let Some(v) = r.recall { prop_assert!((0.0..=1.0).contains(&v)); }
        prop_assert_eq!(r.recall.is_none(), img.gt.edges.is_empty());
    }
}
