//! Strongly connected decomposition of topic dependencies, open/closed
//! classification, the block DAG and update-rule assignment.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};

use thiserror::Error;

use crate::model::{AgentLogicAssignment, LogicMatrix};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SccError {
    #[error("block dependency graph contains a cycle through blocks {blocks:?}")]
    CycleDetected { blocks: Vec<usize> },
    #[error("block {block} depends on topic {} which belongs to no block", .topic + 1)]
    DanglingDependency { block: usize, topic: usize },
}

/// Tarjan's algorithm, iterative. Components come out in reverse
/// topological order of the condensation (sinks first).
pub fn tarjan(adj: &[Vec<usize>]) -> Vec<Vec<usize>> {
    const UNVISITED: usize = usize::MAX;
    let n = adj.len();
    let mut index = vec![UNVISITED; n];
    let mut low = vec![0; n];
    let mut on_stack = vec![false; n];
    let mut stack = Vec::new();
    let mut out = Vec::new();
    let mut next = 0;
    // (vertex, position in its adjacency list)
    let mut call: Vec<(usize, usize)> = Vec::new();

    for root in 0..n {
        if index[root] != UNVISITED {
            continue;
        }
        call.push((root, 0));
        while let Some(&mut (v, ref mut pos)) = call.last_mut() {
            if *pos == 0 && index[v] == UNVISITED {
                index[v] = next;
                low[v] = next;
                next += 1;
                stack.push(v);
                on_stack[v] = true;
            }
            if let Some(&w) = adj[v].get(*pos) {
                *pos += 1;
                if index[w] == UNVISITED {
                    call.push((w, 0));
                } else if on_stack[w] {
                    low[v] = low[v].min(index[w]);
                }
                continue;
            }
            call.pop();
            if let Some(&(parent, _)) = call.last() {
                low[parent] = low[parent].min(low[v]);
            }
            if low[v] == index[v] {
                let mut comp = Vec::new();
                loop {
                    let w = stack.pop().expect("tarjan stack underflow");
                    on_stack[w] = false;
                    comp.push(w);
                    if w == v {
                        break;
                    }
                }
                out.push(comp);
            }
        }
    }
    out
}

/// Directed dependency graph over topics: `p -> q` when p depends on q.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DependencyGraph {
    deps: Vec<BTreeSet<usize>>,
}

impl DependencyGraph {
    pub fn from_logic(c: &LogicMatrix) -> Self {
        Self::from_matrices(std::iter::once(c))
    }

    /// Union of the dependency patterns of several matrices over the same
    /// topics.
    pub fn from_matrices<'a>(mats: impl IntoIterator<Item = &'a LogicMatrix>) -> Self {
        let mut deps: Vec<BTreeSet<usize>> = Vec::new();
        for c in mats {
            let m = c.m();
            if deps.is_empty() {
                deps = vec![BTreeSet::new(); m];
            }
            for (p, set) in deps.iter_mut().enumerate() {
                set.extend((0..m).filter(|&q| c.depends(p, q)));
            }
        }
        DependencyGraph { deps }
    }

    pub fn from_assignment(assignment: &AgentLogicAssignment) -> Self {
        Self::from_matrices(assignment.iter())
    }

    pub fn from_edges(m: usize, edges: &[(usize, usize)]) -> Self {
        let mut deps = vec![BTreeSet::new(); m];
        for &(p, q) in edges {
            if p != q {
                deps[p].insert(q);
            }
        }
        DependencyGraph { deps }
    }

    pub fn m(&self) -> usize {
        self.deps.len()
    }

    pub fn deps_of(&self, p: usize) -> &BTreeSet<usize> {
        &self.deps[p]
    }

    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        self.deps
            .iter()
            .map(|s| s.iter().copied().collect())
            .collect()
    }
}

/// Strongly connected topic blocks, each sorted ascending, blocks ordered
/// by smallest contained topic.
pub fn decompose_graph(g: &DependencyGraph) -> Vec<Vec<usize>> {
    let mut blocks: Vec<Vec<usize>> = tarjan(&g.adjacency())
        .into_iter()
        .map(|mut b| {
            b.sort_unstable();
            b
        })
        .collect();
    blocks.sort_by_key(|b| b[0]);
    blocks
}

pub fn decompose(c: &LogicMatrix) -> Vec<Vec<usize>> {
    decompose_graph(&DependencyGraph::from_logic(c))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BlockStatus {
    Open,
    Closed,
}

impl fmt::Display for BlockStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BlockStatus::Open => "open",
            BlockStatus::Closed => "closed",
        })
    }
}

/// Update kernel applicable to a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum UpdateRule {
    /// Several coupled topics, no external inputs, shared logic.
    ClosedMultiTopic,
    /// Lone topic with no dependencies.
    ClosedSingleton,
    /// Lone topic fed by scalar consensus values of other topics.
    OpenSingleton,
    /// General per-agent kernel with external inputs.
    OpenMultiTopic,
}

impl UpdateRule {
    pub fn name(&self) -> &'static str {
        match self {
            UpdateRule::ClosedMultiTopic => "closed-multi",
            UpdateRule::ClosedSingleton => "closed-singleton",
            UpdateRule::OpenSingleton => "open-singleton",
            UpdateRule::OpenMultiTopic => "open-multi",
        }
    }
}

impl fmt::Display for UpdateRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SccBlock {
    pub id: usize,
    pub topics: Vec<usize>,
    pub status: BlockStatus,
    /// For each topic of the block, every topic it depends on.
    pub local_deps: BTreeMap<usize, BTreeSet<usize>>,
    /// Topics outside the block that the block depends on.
    pub external_deps: BTreeSet<usize>,
    pub rule: Option<UpdateRule>,
}

impl SccBlock {
    pub fn is_singleton(&self) -> bool {
        self.topics.len() == 1
    }
}

pub fn classify(blocks: &[Vec<usize>], g: &DependencyGraph) -> Vec<SccBlock> {
    blocks
        .iter()
        .enumerate()
        .map(|(id, topics)| {
            let local_deps: BTreeMap<usize, BTreeSet<usize>> =
                topics.iter().map(|&p| (p, g.deps_of(p).clone())).collect();
            let external_deps: BTreeSet<usize> = local_deps
                .values()
                .flatten()
                .copied()
                .filter(|q| !topics.contains(q))
                .collect();
            let status = if external_deps.is_empty() {
                BlockStatus::Closed
            } else {
                BlockStatus::Open
            };
            SccBlock {
                id,
                topics: topics.clone(),
                status,
                local_deps,
                external_deps,
                rule: None,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockDag {
    pub nodes: Vec<usize>,
    /// `(j, k)`: block k depends on a topic of block j.
    pub edges: BTreeSet<(usize, usize)>,
    pub topo_order: Vec<usize>,
}

impl BlockDag {
    pub fn predecessors(&self, k: usize) -> impl Iterator<Item = usize> + '_ {
        self.edges.iter().filter(move |e| e.1 == k).map(|e| e.0)
    }

    /// Whether `order` never places a block before one of its predecessors.
    pub fn is_linear_extension(&self, order: &[usize]) -> bool {
        let pos: BTreeMap<usize, usize> = order.iter().enumerate().map(|(i, &b)| (b, i)).collect();
        self.edges
            .iter()
            .all(|(j, k)| match (pos.get(j), pos.get(k)) {
                (Some(a), Some(b)) => a < b,
                _ => false,
            })
    }
}

/// Builds the block DAG and a deterministic topological order (Kahn's
/// algorithm, smallest ready id first).
pub fn build_dag(blocks: &[SccBlock]) -> Result<BlockDag, SccError> {
    let mut owner = BTreeMap::new();
    for b in blocks {
        for &t in &b.topics {
            owner.insert(t, b.id);
        }
    }
    let mut edges = BTreeSet::new();
    for b in blocks {
        for &q in &b.external_deps {
            let Some(&j) = owner.get(&q) else {
                return Err(SccError::DanglingDependency {
                    block: b.id,
                    topic: q,
                });
            };
            edges.insert((j, b.id));
        }
    }
    let nodes: Vec<usize> = blocks.iter().map(|b| b.id).collect();
    let mut indegree: BTreeMap<usize, usize> = nodes.iter().map(|&b| (b, 0)).collect();
    for &(_, k) in &edges {
        *indegree.entry(k).or_default() += 1;
    }
    let mut ready: BTreeSet<usize> = indegree
        .iter()
        .filter(|(_, &d)| d == 0)
        .map(|(&b, _)| b)
        .collect();
    let mut topo_order = Vec::with_capacity(nodes.len());
    while let Some(j) = ready.pop_first() {
        topo_order.push(j);
        for &(_, k) in edges.range((j, 0)..=(j, usize::MAX)) {
            let d = indegree.get_mut(&k).expect("edge endpoint");
            *d -= 1;
            if *d == 0 {
                ready.insert(k);
            }
        }
    }
    if topo_order.len() != indegree.len() {
        let blocks = indegree
            .into_iter()
            .filter(|(_, d)| *d > 0)
            .map(|(b, _)| b)
            .collect();
        return Err(SccError::CycleDetected { blocks });
    }
    Ok(BlockDag {
        nodes,
        edges,
        topo_order,
    })
}

pub fn assign_rule(block: &SccBlock, assignment: &AgentLogicAssignment) -> UpdateRule {
    match (block.is_singleton(), block.status) {
        (true, BlockStatus::Closed) => UpdateRule::ClosedSingleton,
        (true, BlockStatus::Open) => UpdateRule::OpenSingleton,
        (false, BlockStatus::Closed) if assignment.homogeneous_over(&block.topics) => {
            UpdateRule::ClosedMultiTopic
        }
        (false, _) => UpdateRule::OpenMultiTopic,
    }
}

/// Decomposition, classification, DAG and rules for one agent assignment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockAnalysis {
    pub blocks: Vec<SccBlock>,
    pub dag: BlockDag,
}

impl BlockAnalysis {
    pub fn of_assignment(assignment: &AgentLogicAssignment) -> Result<Self, SccError> {
        let g = DependencyGraph::from_assignment(assignment);
        let mut blocks = classify(&decompose_graph(&g), &g);
        let dag = build_dag(&blocks)?;
        for b in &mut blocks {
            b.rule = Some(assign_rule(b, assignment));
        }
        Ok(BlockAnalysis { blocks, dag })
    }

    /// Tab-separated block report, one record per block in evaluation
    /// order, followed by the DAG edges. Topics are 1-based.
    pub fn report(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "order\tblock\ttopics\tstatus\tlocal_deps\texternal_deps\trule"
        );
        for (pos, &id) in self.dag.topo_order.iter().enumerate() {
            let b = &self.blocks[id];
            let local: Vec<String> = b
                .local_deps
                .iter()
                .map(|(p, deps)| format!("{}:{}", p + 1, topic_set(deps.iter().copied())))
                .collect();
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}",
                pos + 1,
                id + 1,
                topic_set(b.topics.iter().copied()),
                b.status,
                local.join(" "),
                topic_set(b.external_deps.iter().copied()),
                b.rule.map(|r| r.name()).unwrap_or("-"),
            );
        }
        let edges: Vec<String> = self
            .dag
            .edges
            .iter()
            .map(|(j, k)| format!("{}->{}", j + 1, k + 1))
            .collect();
        let _ = writeln!(
            out,
            "dag\t{}",
            if edges.is_empty() {
                "-".to_owned()
            } else {
                edges.join(" ")
            }
        );
        out
    }
}

/// `{1,2,3}` style set with 1-based topics.
pub fn topic_set(topics: impl IntoIterator<Item = usize>) -> String {
    let items: Vec<String> = topics.into_iter().map(|t| (t + 1).to_string()).collect();
    format!("{{{}}}", items.join(","))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::validate_logic;
    use nalgebra::DMatrix;
    use std::sync::Arc;

    fn c_hat() -> LogicMatrix {
        validate_logic(DMatrix::from_row_slice(
            5,
            5,
            &[
                1.0, 0.0, 0.0, 0.0, 0.0, //
                -0.5, 0.5, 0.0, 0.0, 0.0, //
                -0.3, -0.6, 0.1, 0.0, 0.0, //
                0.0, -0.3, 0.0, 0.2, -0.5, //
                0.0, -0.5, 0.0, -0.2, 0.3,
            ],
        ))
        .unwrap()
    }

    fn c_bar() -> LogicMatrix {
        validate_logic(DMatrix::from_row_slice(
            5,
            5,
            &[
                1.0, 0.0, 0.0, 0.0, 0.0, //
                -0.8, 0.2, 0.0, 0.0, 0.0, //
                -0.3, -0.1, 0.6, 0.0, 0.0, //
                0.0, -0.3, 0.0, 0.2, -0.5, //
                0.0, -0.5, 0.0, -0.2, 0.3,
            ],
        ))
        .unwrap()
    }

    fn seven_agent_hat() -> LogicMatrix {
        let mut c = DMatrix::zeros(7, 7);
        for p in 0..3 {
            for q in 0..3 {
                c[(p, q)] = if p == q { 1.0 / 7.0 } else { 3.0 / 7.0 };
            }
        }
        c[(3, 3)] = 2.0 / 3.0;
        c[(3, 4)] = 1.0 / 3.0;
        c[(4, 3)] = 1.0 / 3.0;
        c[(4, 4)] = 2.0 / 3.0;
        c[(5, 5)] = 1.0;
        c[(6, 6)] = 1.0;
        validate_logic(c).unwrap()
    }

    #[test]
    fn tarjan_finds_cycle_and_chain() {
        let adj = vec![vec![1], vec![2], vec![0], vec![2]];
        let mut sccs = tarjan(&adj);
        sccs.iter_mut().for_each(|s| s.sort());
        assert_eq!(sccs, vec![vec![0, 1, 2], vec![3]]);
    }

    #[test]
    fn tarjan_handles_long_chains() {
        let n = 100_000;
        let adj: Vec<Vec<usize>> = (0..n)
            .map(|i| if i + 1 < n { vec![i + 1] } else { vec![] })
            .collect();
        assert_eq!(tarjan(&adj).len(), n);
    }

    #[test]
    fn six_agent_blocks() {
        assert_eq!(
            decompose(&c_hat()),
            vec![vec![0], vec![1], vec![2], vec![3, 4]]
        );
    }

    #[test]
    fn identity_gives_singletons() {
        let id = validate_logic(DMatrix::identity(4, 4)).unwrap();
        assert_eq!(decompose(&id), vec![vec![0], vec![1], vec![2], vec![3]]);
    }

    #[test]
    fn seven_agent_blocks_are_closed() {
        let c = seven_agent_hat();
        assert_eq!(
            decompose(&c),
            vec![vec![0, 1, 2], vec![3, 4], vec![5], vec![6]]
        );
        let g = DependencyGraph::from_logic(&c);
        let blocks = classify(&decompose(&c), &g);
        assert!(blocks.iter().all(|b| b.status == BlockStatus::Closed));
        assert!(build_dag(&blocks).unwrap().edges.is_empty());
    }

    #[test]
    fn six_agent_classification() {
        let c = c_hat();
        let g = DependencyGraph::from_logic(&c);
        let blocks = classify(&decompose(&c), &g);
        assert_eq!(blocks[0].status, BlockStatus::Closed);
        assert!(blocks[0].external_deps.is_empty());
        assert_eq!(blocks[1].status, BlockStatus::Open);
        assert_eq!(blocks[1].external_deps, BTreeSet::from([0]));
        assert_eq!(blocks[3].status, BlockStatus::Open);
        assert_eq!(blocks[3].external_deps, BTreeSet::from([1]));
        assert_eq!(blocks[3].local_deps[&3], BTreeSet::from([1, 4]));
    }

    #[test]
    fn six_agent_dag() {
        let c = c_hat();
        let g = DependencyGraph::from_logic(&c);
        let dag = build_dag(&classify(&decompose(&c), &g)).unwrap();
        assert_eq!(dag.edges, BTreeSet::from([(0, 1), (0, 2), (1, 2), (1, 3)]));
        assert_eq!(dag.topo_order, vec![0, 1, 2, 3]);
        assert!(dag.is_linear_extension(&dag.topo_order));
        assert!(!dag.is_linear_extension(&[1, 0, 2, 3]));
    }

    #[test]
    fn single_block_dag_is_empty() {
        let c = validate_logic(DMatrix::from_row_slice(2, 2, &[0.5, 0.5, 0.5, 0.5])).unwrap();
        let g = DependencyGraph::from_logic(&c);
        let dag = build_dag(&classify(&decompose(&c), &g)).unwrap();
        assert!(dag.edges.is_empty());
        assert_eq!(dag.topo_order, vec![0]);
    }

    #[test]
    fn corrupt_blocks_are_detected() {
        let mut blocks = vec![
            SccBlock {
                id: 0,
                topics: vec![0],
                status: BlockStatus::Open,
                local_deps: BTreeMap::new(),
                external_deps: BTreeSet::from([1]),
                rule: None,
            },
            SccBlock {
                id: 1,
                topics: vec![1],
                status: BlockStatus::Open,
                local_deps: BTreeMap::new(),
                external_deps: BTreeSet::from([0]),
                rule: None,
            },
        ];
        assert!(matches!(
            build_dag(&blocks),
            Err(SccError::CycleDetected { .. })
        ));
        blocks[1].external_deps = BTreeSet::from([9]);
        assert_eq!(
            build_dag(&blocks),
            Err(SccError::DanglingDependency { block: 1, topic: 9 })
        );
    }

    #[test]
    fn rules_for_six_agents() {
        let homo = AgentLogicAssignment::uniform(c_hat(), 6);
        let a = BlockAnalysis::of_assignment(&homo).unwrap();
        let rules: Vec<UpdateRule> = a.blocks.iter().map(|b| b.rule.unwrap()).collect();
        assert_eq!(
            rules,
            vec![
                UpdateRule::ClosedSingleton,
                UpdateRule::OpenSingleton,
                UpdateRule::OpenSingleton,
                UpdateRule::OpenMultiTopic
            ]
        );
        let hat = Arc::new(c_hat());
        let bar = Arc::new(c_bar());
        let mixed = AgentLogicAssignment::new(vec![
            hat.clone(),
            hat.clone(),
            hat,
            bar.clone(),
            bar.clone(),
            bar,
        ])
        .unwrap();
        let a = BlockAnalysis::of_assignment(&mixed).unwrap();
        assert_eq!(a.blocks[3].rule, Some(UpdateRule::OpenMultiTopic));
    }

    #[test]
    fn closed_multi_rule_needs_shared_logic() {
        let shared = AgentLogicAssignment::uniform(seven_agent_hat(), 3);
        let a = BlockAnalysis::of_assignment(&shared).unwrap();
        assert_eq!(a.blocks[0].rule, Some(UpdateRule::ClosedMultiTopic));

        let mut other = seven_agent_hat().matrix().clone();
        other[(3, 3)] = 0.5;
        other[(3, 4)] = 0.5;
        let other = Arc::new(validate_logic(other).unwrap());
        let mixed = AgentLogicAssignment::new(vec![Arc::new(seven_agent_hat()), other]).unwrap();
        let a = BlockAnalysis::of_assignment(&mixed).unwrap();
        assert_eq!(a.blocks[0].rule, Some(UpdateRule::ClosedMultiTopic));
        assert_eq!(a.blocks[1].rule, Some(UpdateRule::OpenMultiTopic));
        assert_eq!(a.blocks[1].status, BlockStatus::Closed);
    }

    #[test]
    fn report_lists_blocks_in_order() {
        let a = BlockAnalysis::of_assignment(&AgentLogicAssignment::uniform(c_hat(), 2)).unwrap();
        let report = a.report();
        let lines: Vec<&str> = report.lines().collect();
        assert_eq!(lines[1], "1\t1\t{1}\tclosed\t1:{}\t{}\tclosed-singleton");
        assert_eq!(
            lines[4],
            "4\t4\t{4,5}\topen\t4:{2,5} 5:{2,4}\t{2}\topen-multi"
        );
        assert_eq!(lines[5], "dag\t1->2 1->3 2->3 2->4");
    }
}
