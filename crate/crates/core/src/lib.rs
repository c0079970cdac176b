//! Opinion dynamics over interdependent topics, with SCC-based scheduling
//! and Bayesian anomaly scoring for user behaviour analytics.

pub mod access;
pub mod detection;
pub mod dynamics;
pub mod format;
pub mod model;
pub mod scc;
pub mod scenario;
pub mod scheduler;

pub use access::{
    inject_cross_influence, logic_from_access, AccessCounts, AccessError, InjectionEdge,
    SyntheticAccess,
};
pub use detection::{
    bayes_update, drift_likelihood, frobenius_drift, scaled_mean_variance, AnomalyTimeline,
    DetectionError, PriorMode, ScoreConfig,
};
pub use dynamics::{
    check_necessity, run_to_verdict, ConvergenceVerdict, DynamicsError, RunConfig, TopicVerdict,
};
pub use model::{
    validate_influence, validate_logic, AgentLogicAssignment, InfluenceMatrix, LogicMatrix,
    ModelError,
};
pub use scc::{BlockAnalysis, BlockDag, BlockStatus, SccBlock, UpdateRule};
pub use scheduler::{run_all, ScheduleConfig, ScheduleOutcome, SchedulerError};
