//! Dependency-aware evaluation of every SCC block.
//!
//! Blocks run in sweeps: each sweep evaluates all blocks whose DAG
//! predecessors are complete, then publishes their settled topics as
//! external values for downstream blocks. A topic that reached consensus is
//! published as a scalar; any other outcome publishes the per-agent vector,
//! which forces dependents onto the per-agent open kernel.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use nalgebra::DMatrix;
use rayon::prelude::*;
use thiserror::Error;

use crate::dynamics::{
    run_to_verdict, spreads, ClosedMultiStepper, ConvergenceVerdict, DynamicsError,
    ExternalConsensus, ExternalInput, ExternalValue, GammaDiag, OpenMultiStepper,
    OpenSingletonStepper, OpinionHistory, RunConfig, SingletonStepper, Stepper, TopicVerdict,
};
use crate::model::{AgentLogicAssignment, InfluenceMatrix, OpinionState};
use crate::scc::{BlockAnalysis, BlockDag, SccBlock, UpdateRule};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SchedulerError {
    #[error("deadlock: blocks {pending:?} are pending but none is ready")]
    Deadlock { pending: Vec<usize> },
    #[error("block {block} has no update rule assigned")]
    MissingRule { block: usize },
    #[error("initial opinions are {rows}x{cols}, expected {n}x{m}")]
    InitialShape {
        rows: usize,
        cols: usize,
        n: usize,
        m: usize,
    },
    #[error("block {block}: {source}")]
    Dynamics {
        block: usize,
        #[source]
        source: DynamicsError,
    },
}

/// Default cap on scheduler sweeps.
pub const DEFAULT_MAX_ITERS: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationPlan {
    pub pending: BTreeSet<usize>,
    pub completed: BTreeSet<usize>,
    pub external_values: ExternalConsensus,
    pub iteration: usize,
    pub max_iters: usize,
}

impl EvaluationPlan {
    pub fn new(dag: &BlockDag, max_iters: usize) -> Self {
        EvaluationPlan {
            pending: dag.nodes.iter().copied().collect(),
            completed: BTreeSet::new(),
            external_values: ExternalConsensus::new(),
            iteration: 0,
            max_iters,
        }
    }

    fn complete(&mut self, result: &BlockResult) {
        for (k, &topic) in result.topics.iter().enumerate() {
            let value = match &result.verdict.topics[k] {
                TopicVerdict::Consensus(v) => ExternalValue::Scalar(*v),
                _ => {
                    ExternalValue::PerAgent(result.final_state.column(k).iter().copied().collect())
                }
            };
            self.external_values.insert(topic, value);
        }
        self.pending.remove(&result.block);
        self.completed.insert(result.block);
    }
}

/// Pending blocks whose predecessors have all completed.
pub fn ready_blocks(plan: &EvaluationPlan, dag: &BlockDag) -> BTreeSet<usize> {
    plan.pending
        .iter()
        .copied()
        .filter(|&b| dag.predecessors(b).all(|j| plan.completed.contains(&j)))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockResult {
    pub block: usize,
    pub topics: Vec<usize>,
    /// Rule from the structural analysis.
    pub assigned: UpdateRule,
    /// Kernel actually run; differs from `assigned` when an open singleton
    /// receives per-agent externals.
    pub kernel: UpdateRule,
    pub verdict: ConvergenceVerdict,
    pub final_state: DMatrix<f64>,
    pub history: OpinionHistory,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleConfig {
    pub run: RunConfig,
    pub max_iters: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            run: RunConfig::default(),
            max_iters: DEFAULT_MAX_ITERS,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleOutcome {
    pub results: BTreeMap<usize, BlockResult>,
    /// Blocks in the order they were evaluated.
    pub order: Vec<usize>,
    pub external_values: ExternalConsensus,
    pub sweeps: usize,
    /// Sweeps ran out with blocks still pending.
    pub early_termination: bool,
    n: usize,
    m: usize,
}

impl ScheduleOutcome {
    /// Final n×m opinions assembled from every completed block.
    pub fn final_state(&self) -> DMatrix<f64> {
        let mut x = DMatrix::zeros(self.n, self.m);
        for r in self.results.values() {
            for (k, &t) in r.topics.iter().enumerate() {
                x.set_column(t, &r.final_state.column(k));
            }
        }
        x
    }

    /// System-wide history. Blocks that settled early hold their last
    /// recorded state.
    pub fn combined_history(&self) -> OpinionHistory {
        let times: BTreeSet<usize> = self
            .results
            .values()
            .flat_map(|r| r.history.times.iter().copied())
            .collect();
        let mut hist = OpinionHistory::new((0..self.m).collect());
        for t in times {
            let mut x = DMatrix::zeros(self.n, self.m);
            for r in self.results.values() {
                let s = r.history.state_at(t).expect("history starts at t=0");
                for (k, &topic) in r.topics.iter().enumerate() {
                    x.set_column(topic, &s.column(k));
                }
            }
            hist.push(t, x);
        }
        hist
    }

    pub fn topic_verdict(&self, topic: usize) -> Option<&TopicVerdict> {
        self.results.values().find_map(|r| {
            r.topics
                .iter()
                .position(|&t| t == topic)
                .map(|k| &r.verdict.topics[k])
        })
    }

    /// Per-topic summary CSV: `topic,block,rule,verdict,spread,values`,
    /// with per-agent final values separated by spaces. 1-based ids.
    pub fn summary_csv(&self) -> String {
        let mut rows = Vec::new();
        for r in self.results.values() {
            let spread = spreads(&r.final_state);
            for (k, &t) in r.topics.iter().enumerate() {
                let values: Vec<String> = r
                    .final_state
                    .column(k)
                    .iter()
                    .map(|v| v.to_string())
                    .collect();
                rows.push((
                    t,
                    format!(
                        "{},{},{},{},{},{}",
                        t + 1,
                        r.block + 1,
                        r.kernel,
                        r.verdict.topics[k].kind(),
                        spread[k],
                        values.join(" ")
                    ),
                ));
            }
        }
        rows.sort_by_key(|(t, _)| *t);
        let mut out = String::from("topic,block,rule,verdict,spread,values\n");
        for (_, line) in rows {
            let _ = writeln!(out, "{line}");
        }
        out
    }
}

fn gather(
    block: &SccBlock,
    values: &ExternalConsensus,
) -> Result<ExternalConsensus, SchedulerError> {
    block
        .external_deps
        .iter()
        .map(|&q| {
            values
                .get(&q)
                .cloned()
                .map(|v| (q, v))
                .ok_or(SchedulerError::Dynamics {
                    block: block.id,
                    source: DynamicsError::MissingExternal { topic: q },
                })
        })
        .collect()
}

fn evaluate_block(
    block: &SccBlock,
    w: &InfluenceMatrix,
    assignment: &AgentLogicAssignment,
    x0: &DMatrix<f64>,
    values: &ExternalConsensus,
    cfg: &RunConfig,
) -> Result<BlockResult, SchedulerError> {
    let assigned = block
        .rule
        .ok_or(SchedulerError::MissingRule { block: block.id })?;
    let externals = gather(block, values)?;
    let topics = block.topics.clone();
    let p = topics[0];
    let all_scalar = externals.values().all(ExternalValue::is_scalar);

    let (kernel, stepper): (UpdateRule, Box<dyn Stepper + '_>) = match assigned {
        UpdateRule::ClosedSingleton if externals.is_empty() => (
            assigned,
            Box::new(SingletonStepper {
                w,
                gamma_pp: GammaDiag::from_assignment(assignment, p, p),
            }),
        ),
        UpdateRule::OpenSingleton if all_scalar => (
            assigned,
            Box::new(OpenSingletonStepper {
                w,
                gamma_pp: GammaDiag::from_assignment(assignment, p, p),
                externals: externals
                    .into_iter()
                    .map(|(q, alpha)| ExternalInput {
                        topic: q,
                        alpha,
                        gamma: GammaDiag::from_assignment(assignment, p, q),
                    })
                    .collect(),
            }),
        ),
        UpdateRule::ClosedMultiTopic if externals.is_empty() => {
            let c = assignment.agent(0);
            let c_sub = DMatrix::from_fn(topics.len(), topics.len(), |a, b| {
                c.get(topics[a], topics[b])
            });
            (assigned, Box::new(ClosedMultiStepper { w, c_sub }))
        }
        _ => (
            UpdateRule::OpenMultiTopic,
            Box::new(OpenMultiStepper {
                w,
                assignment,
                topics: topics.clone(),
                externals,
            }),
        ),
    };

    let x_block = DMatrix::from_fn(x0.nrows(), topics.len(), |i, k| x0[(i, topics[k])]);
    let initial = OpinionState { x: x_block, t: 0 };
    let (history, verdict) =
        run_to_verdict(&initial, stepper.as_ref(), &topics, cfg).map_err(|source| {
            SchedulerError::Dynamics {
                block: block.id,
                source,
            }
        })?;
    let final_state = history.last().cloned().expect("history is never empty");
    Ok(BlockResult {
        block: block.id,
        topics,
        assigned,
        kernel,
        verdict,
        final_state,
        history,
    })
}

/// Evaluates every block of `analysis` in dependency order starting from
/// the n×m opinions `x0`.
pub fn run_all(
    analysis: &BlockAnalysis,
    w: &InfluenceMatrix,
    assignment: &AgentLogicAssignment,
    x0: &DMatrix<f64>,
    cfg: &ScheduleConfig,
) -> Result<ScheduleOutcome, SchedulerError> {
    let (n, m) = (w.n(), assignment.m());
    if x0.nrows() != n || x0.ncols() != m || assignment.n() != n {
        return Err(SchedulerError::InitialShape {
            rows: x0.nrows(),
            cols: x0.ncols(),
            n,
            m,
        });
    }
    let mut plan = EvaluationPlan::new(&analysis.dag, cfg.max_iters);
    let mut results = BTreeMap::new();
    let mut order = Vec::new();
    while !plan.pending.is_empty() && plan.iteration < plan.max_iters {
        plan.iteration += 1;
        let ready = ready_blocks(&plan, &analysis.dag);
        if ready.is_empty() {
            return Err(SchedulerError::Deadlock {
                pending: plan.pending.iter().copied().collect(),
            });
        }
        let batch: Vec<BlockResult> = ready
            .par_iter()
            .map(|&b| {
                evaluate_block(
                    &analysis.blocks[b],
                    w,
                    assignment,
                    x0,
                    &plan.external_values,
                    &cfg.run,
                )
            })
            .collect::<Result<_, _>>()?;
        for result in batch {
            plan.complete(&result);
            order.push(result.block);
            results.insert(result.block, result);
        }
    }
    Ok(ScheduleOutcome {
        results,
        order,
        early_termination: !plan.pending.is_empty(),
        external_values: plan.external_values,
        sweeps: plan.iteration,
        n,
        m,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{validate_influence, validate_logic, LogicMatrix};
    use crate::scc::BlockStatus;

    fn six_agent_w() -> InfluenceMatrix {
        validate_influence(DMatrix::from_row_slice(
            6,
            6,
            &[
                0.2, 0.0, 0.0, 0.0, 0.8, 0.0, //
                0.5, 0.3, 0.0, 0.0, 0.0, 0.2, //
                0.0, 0.3, 0.1, 0.0, 0.0, 0.6, //
                0.0, 0.0, 0.85, 0.15, 0.0, 0.0, //
                0.0, 0.0, 0.0, 0.2, 0.8, 0.0, //
                0.0, 0.0, 0.0, 0.0, 0.5, 0.5,
            ],
        ))
        .unwrap()
    }

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

    fn x0() -> DMatrix<f64> {
        DMatrix::from_fn(6, 5, |i, p| ((i * 7 + p * 3) % 11) as f64 / 5.5 - 1.0)
    }

    #[test]
    fn ready_set_follows_dag() {
        let analysis =
            BlockAnalysis::of_assignment(&AgentLogicAssignment::uniform(c_hat(), 6)).unwrap();
        let mut plan = EvaluationPlan::new(&analysis.dag, DEFAULT_MAX_ITERS);
        assert_eq!(ready_blocks(&plan, &analysis.dag), BTreeSet::from([0]));
        plan.pending.remove(&0);
        plan.completed.insert(0);
        assert_eq!(ready_blocks(&plan, &analysis.dag), BTreeSet::from([1]));
        plan.pending.clear();
        assert!(ready_blocks(&plan, &analysis.dag).is_empty());
    }

    #[test]
    fn homogeneous_six_agents_reach_consensus_everywhere() {
        let asg = AgentLogicAssignment::uniform(c_hat(), 6);
        let analysis = BlockAnalysis::of_assignment(&asg).unwrap();
        let out = run_all(
            &analysis,
            &six_agent_w(),
            &asg,
            &x0(),
            &ScheduleConfig::default(),
        )
        .unwrap();
        assert_eq!(out.order, vec![0, 1, 2, 3]);
        assert!(!out.early_termination);
        assert_eq!(out.results.len(), 4);
        for t in 0..5 {
            assert!(out.topic_verdict(t).unwrap().is_consensus(), "topic {t}");
        }
        assert!(out.external_values.values().all(ExternalValue::is_scalar));
        // topic 2 settles on minus topic 1
        let (a1, a2) = match (&out.external_values[&0], &out.external_values[&1]) {
            (ExternalValue::Scalar(a), ExternalValue::Scalar(b)) => (*a, *b),
            _ => unreachable!(),
        };
        assert!((a1 + a2).abs() < 1e-8);
    }

    #[test]
    fn single_closed_block() {
        let c = validate_logic(DMatrix::from_row_slice(2, 2, &[0.5, 0.5, 0.5, 0.5])).unwrap();
        let asg = AgentLogicAssignment::uniform(c, 6);
        let analysis = BlockAnalysis::of_assignment(&asg).unwrap();
        let x = DMatrix::from_fn(6, 2, |i, p| {
            (i as f64 - 2.5) / 3.0 * if p == 0 { 1.0 } else { -0.5 }
        });
        let out = run_all(&analysis, &six_agent_w(), &asg, &x, &ScheduleConfig::default()).unwrap();
        assert_eq!(out.results.len(), 1);
        assert_eq!(out.results[&0].kernel, UpdateRule::ClosedMultiTopic);
        assert_eq!(out.external_values.len(), 2);
    }

    #[test]
    fn unmet_dependency_deadlocks() {
        let asg = AgentLogicAssignment::uniform(c_hat(), 6);
        let mut analysis = BlockAnalysis::of_assignment(&asg).unwrap();
        // block 1 now waits on a block that never runs
        analysis.dag.edges.insert((3, 1));
        let err = run_all(
            &analysis,
            &six_agent_w(),
            &asg,
            &x0(),
            &ScheduleConfig::default(),
        )
        .unwrap_err();
        assert_eq!(
            err,
            SchedulerError::Deadlock {
                pending: vec![1, 2, 3]
            }
        );
    }

    #[test]
    fn sweep_cap_reports_early_termination() {
        let asg = AgentLogicAssignment::uniform(c_hat(), 6);
        let analysis = BlockAnalysis::of_assignment(&asg).unwrap();
        let cfg = ScheduleConfig {
            max_iters: 2,
            ..ScheduleConfig::default()
        };
        let out = run_all(&analysis, &six_agent_w(), &asg, &x0(), &cfg).unwrap();
        assert!(out.early_termination);
        assert_eq!(out.order, vec![0, 1]);
    }

    #[test]
    fn missing_rule_is_a_configuration_error() {
        let asg = AgentLogicAssignment::uniform(c_hat(), 6);
        let mut analysis = BlockAnalysis::of_assignment(&asg).unwrap();
        analysis.blocks[0].rule = None;
        let err = run_all(
            &analysis,
            &six_agent_w(),
            &asg,
            &x0(),
            &ScheduleConfig::default(),
        )
        .unwrap_err();
        assert_eq!(err, SchedulerError::MissingRule { block: 0 });
    }

    #[test]
    fn vector_external_reroutes_open_singleton() {
        // two agents that never mix disagree on topic 1; topic 2 depends on it
        let w = validate_influence(DMatrix::identity(2, 2)).unwrap();
        let c = validate_logic(DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.5, 0.5])).unwrap();
        let asg = AgentLogicAssignment::uniform(c, 2);
        let analysis = BlockAnalysis::of_assignment(&asg).unwrap();
        assert_eq!(analysis.blocks[1].status, BlockStatus::Open);
        let x = DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, 1.0, 0.0]);
        let out = run_all(&analysis, &w, &asg, &x, &ScheduleConfig::default()).unwrap();
        let r = &out.results[&1];
        assert_eq!(r.assigned, UpdateRule::OpenSingleton);
        assert_eq!(r.kernel, UpdateRule::OpenMultiTopic);
        assert!(matches!(
            r.verdict.topics[0],
            TopicVerdict::PersistentDisagreement(_)
        ));
    }

    #[test]
    fn bad_initial_shape() {
        let asg = AgentLogicAssignment::uniform(c_hat(), 6);
        let analysis = BlockAnalysis::of_assignment(&asg).unwrap();
        let err = run_all(
            &analysis,
            &six_agent_w(),
            &asg,
            &DMatrix::zeros(6, 4),
            &ScheduleConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, SchedulerError::InitialShape { .. }));
    }

    #[test]
    fn combined_history_holds_settled_blocks() {
        let asg = AgentLogicAssignment::uniform(c_hat(), 6);
        let analysis = BlockAnalysis::of_assignment(&asg).unwrap();
        let out = run_all(
            &analysis,
            &six_agent_w(),
            &asg,
            &x0(),
            &ScheduleConfig::default(),
        )
        .unwrap();
        let hist = out.combined_history();
        assert_eq!(hist.last().unwrap(), &out.final_state());
        assert_eq!(hist.states[0], x0());
    }
}
