mod common;

use std::collections::BTreeMap;
use std::sync::Arc;

use opinion_ueba::scc::{decompose, BlockAnalysis, BlockStatus, DependencyGraph, UpdateRule};
use opinion_ueba::AgentLogicAssignment;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn adjacency(c: &opinion_ueba::LogicMatrix) -> Vec<Vec<bool>> {
    let m = c.m();
    (0..m)
        .map(|p| (0..m).map(|q| p != q && c.get(p, q) != 0.0).collect())
        .collect()
}

proptest! {
    #[test]
    fn blocks_match_mutual_reachability(seed in any::<u64>(), m in 1usize..=8, density in 0.0f64..0.6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = common::random_logic(&mut rng, m, density, true, 0.1);
        let reach = common::reachability(&adjacency(&c));
        let blocks = decompose(&c);
        let mut block_of = vec![usize::MAX; m];
        for (b, topics) in blocks.iter().enumerate() {
            for &t in topics {
                prop_assert_eq!(block_of[t], usize::MAX);
                block_of[t] = b;
            }
        }
        for p in 0..m {
            for q in 0..m {
                prop_assert_eq!(block_of[p] == block_of[q], reach[p][q] && reach[q][p]);
            }
        }
    }

    #[test]
    fn evaluation_order_respects_every_dependency(seed in any::<u64>(), m in 1usize..=8, density in 0.0f64..0.6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = common::random_logic(&mut rng, m, density, true, 0.1);
        let a = BlockAnalysis::of_assignment(&AgentLogicAssignment::uniform(c.clone(), 2)).unwrap();
        prop_assert!(a.dag.is_linear_extension(&a.dag.topo_order));
        let pos: BTreeMap<usize, usize> = a.dag.topo_order.iter().enumerate().map(|(i, &b)| (b, i)).collect();
        let block_of = |t: usize| a.blocks.iter().position(|b| b.topics.contains(&t)).unwrap();
        for p in 0..m {
            for q in 0..m {
                if c.depends(p, q) && block_of(p) != block_of(q) {
                    prop_assert!(pos[&block_of(q)] < pos[&block_of(p)]);
                }
            }
        }
    }

    #[test]
    fn status_and_rule_follow_structure(seed in any::<u64>(), m in 1usize..=7, density in 0.0f64..0.5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c1 = common::random_logic(&mut rng, m, density, true, 0.1);
        let c2 = common::random_logic(&mut rng, m, density, true, 0.1);
        let asg = AgentLogicAssignment::new(vec![Arc::new(c1.clone()), Arc::new(c2.clone()), Arc::new(c1)]).unwrap();
        let a = BlockAnalysis::of_assignment(&asg).unwrap();
        for b in &a.blocks {
            prop_assert_eq!(b.status == BlockStatus::Closed, b.external_deps.is_empty());
            prop_assert!(b.external_deps.iter().all(|t| !b.topics.contains(t)));
            let rule = b.rule.unwrap();
            match (b.topics.len(), b.status) {
                (1, BlockStatus::Closed) => prop_assert_eq!(rule, UpdateRule::ClosedSingleton),
                (1, BlockStatus::Open) => prop_assert_eq!(rule, UpdateRule::OpenSingleton),
                (_, BlockStatus::Open) => prop_assert_eq!(rule, UpdateRule::OpenMultiTopic),
                (_, BlockStatus::Closed) => prop_assert_eq!(
                    rule == UpdateRule::ClosedMultiTopic,
                    asg.homogeneous_over(&b.topics)
                ),
            }
        }
    }
}

#[test]
fn union_pattern_covers_every_agent() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let c1 = common::random_logic(&mut rng, 6, 0.2, true, 0.1);
        let c2 = common::random_logic(&mut rng, 6, 0.2, true, 0.1);
        let g = DependencyGraph::from_matrices([&c1, &c2]);
        for p in 0..6 {
            for q in 0..6 {
                assert_eq!(
                    g.deps_of(p).contains(&q),
                    c1.depends(p, q) || c2.depends(p, q)
                );
            }
        }
    }
}
