//! TOML scenario files binding matrices, epochs, injection and detection
//! settings to the pipeline.
//!
//! ```toml
//! name = "example"
//! seed = 7
//!
//! [influence]
//! file = "w.txt"
//!
//! [logic.base]
//! file = "c.txt"            # or: access = "counts.txt"
//!                           # or: synthetic = { components = [1, 1, 2], self_rate = 4.0, peer_rate = 2.0 }
//!
//! [initial]                 # optional; defaults to seeded uniform in [-1, 1]
//! file = "x0.txt"           # n x m; omit for seeded draws
//!
//! [run]                     # optional settling parameters
//! eps_settle = 1e-9
//!
//! [[epochs]]
//! steps = 5000
//! assign = [{ logic = "base", count = 3 }]
//!
//! [injection]               # optional
//! at_epoch = 1              # epochs from this index on use injected logic
//! agents = [2]              # 1-based
//! base = "base"
//! edges = [{ target = 3, source = 1, per_wt = 1.0 }]   # 1-based topics
//! sweep = [1, 2, 5]
//! steps = 50                # length of the post-injection window
//! wt = 2                    # weight used by `simulate` and `decompose`
//!
//! [detection]               # optional
//! prior = 0.1
//! scale = 1.0
//! exponent = 1.0
//! frobenius_threshold = 0.5
//! ```
//!
//! Paths are relative to the scenario file.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Deserialize;
use thiserror::Error;

use crate::access::{
    inject_cross_influence, logic_from_access, AccessCounts, AccessError, InjectionEdge,
    SyntheticAccess,
};
use crate::detection::{frobenius_drift, AnomalyTimeline, DetectionError, PriorMode, ScoreConfig};
use crate::dynamics::{DynamicsError, OpenMultiStepper, RunConfig, Stepper};
use crate::format::{self, FormatError};
use crate::model::{
    validate_influence, validate_logic, AgentLogicAssignment, InfluenceMatrix, LogicMatrix,
    ModelError,
};
use crate::scc::{BlockAnalysis, SccError};
use crate::scheduler::{
    run_all, ScheduleConfig, ScheduleOutcome, SchedulerError, DEFAULT_MAX_ITERS,
};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error(transparent)]
    Format(FormatError),
    #[error("{path}: {message}")]
    Invalid { path: String, message: String },
    #[error("{what}: {source}")]
    Model {
        what: String,
        #[source]
        source: ModelError,
    },
    #[error("{what}: {source}")]
    Access {
        what: String,
        #[source]
        source: AccessError,
    },
    #[error("{what}: {source}")]
    Structure {
        what: String,
        #[source]
        source: SccError,
    },
    #[error("epoch {epoch}: {source}")]
    Schedule {
        epoch: usize,
        #[source]
        source: SchedulerError,
    },
    #[error(
        "epoch {epoch}: evaluation stopped after the iteration cap with blocks {pending:?} pending"
    )]
    EarlyTermination { epoch: usize, pending: Vec<usize> },
    #[error("epoch {epoch}: opinions diverged in block {block}")]
    Diverged { epoch: usize, block: usize },
    #[error("wt {wt}: {source}")]
    Dynamics {
        wt: f64,
        #[source]
        source: DynamicsError,
    },
    #[error(transparent)]
    Detection(#[from] DetectionError),
}

impl ScenarioError {
    /// 1 for invalid input, 2 for runtime failures, 3 for I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            ScenarioError::Io { .. } | ScenarioError::Format(FormatError::Io { .. }) => 3,
            ScenarioError::Parse { .. }
            | ScenarioError::Format(_)
            | ScenarioError::Invalid { .. }
            | ScenarioError::Model { .. }
            | ScenarioError::Access { .. }
            | ScenarioError::Structure { .. } => 1,
            ScenarioError::Schedule { .. }
            | ScenarioError::EarlyTermination { .. }
            | ScenarioError::Diverged { .. }
            | ScenarioError::Dynamics { .. }
            | ScenarioError::Detection(_) => 2,
        }
    }
}

impl From<FormatError> for ScenarioError {
    fn from(e: FormatError) -> Self {
        ScenarioError::Format(e)
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScenario {
    name: String,
    #[serde(default)]
    seed: u64,
    influence: RawMatrixRef,
    logic: BTreeMap<String, RawLogic>,
    #[serde(default)]
    initial: Option<RawInitial>,
    #[serde(default)]
    run: Option<RawRun>,
    epochs: Vec<RawEpoch>,
    #[serde(default)]
    injection: Option<RawInjection>,
    #[serde(default)]
    detection: Option<RawDetection>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMatrixRef {
    file: String,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLogic {
    file: Option<String>,
    access: Option<String>,
    synthetic: Option<RawSynthetic>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSynthetic {
    components: Vec<usize>,
    self_rate: f64,
    peer_rate: f64,
    #[serde(default)]
    cross_rate: f64,
    seed: Option<u64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawInitial {
    file: Option<String>,
    #[serde(default = "neg_one")]
    low: f64,
    #[serde(default = "one")]
    high: f64,
}

fn neg_one() -> f64 {
    -1.0
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRun {
    eps_settle: Option<f64>,
    eps_consensus: Option<f64>,
    settle_window: Option<usize>,
    max_iters: Option<usize>,
    stride: Option<usize>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEpoch {
    steps: usize,
    assign: Vec<RawAssign>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAssign {
    logic: String,
    count: usize,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawInjection {
    at_epoch: usize,
    agents: Vec<usize>,
    base: String,
    edges: Vec<RawEdge>,
    #[serde(default)]
    sweep: Vec<f64>,
    steps: usize,
    wt: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEdge {
    target: usize,
    source: usize,
    per_wt: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDetection {
    #[serde(default = "default_prior")]
    prior: f64,
    #[serde(default = "one")]
    scale: f64,
    #[serde(default = "one")]
    exponent: f64,
    frobenius_threshold: Option<f64>,
}

fn default_prior() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq)]
pub enum InitialOpinions {
    Explicit(DMatrix<f64>),
    Seeded { low: f64, high: f64 },
}

#[derive(Debug, Clone)]
pub struct Epoch {
    pub steps: usize,
    /// Logic name per agent.
    pub labels: Vec<String>,
    pub assignment: AgentLogicAssignment,
}

/// Cross-influence injection; indices are 0-based.
#[derive(Debug, Clone)]
pub struct Injection {
    pub at_epoch: usize,
    pub agents: Vec<usize>,
    pub base: String,
    /// `(target, source, weight per unit wt)`.
    pub edges: Vec<(usize, usize, f64)>,
    pub sweep: Vec<f64>,
    pub steps: usize,
    pub wt: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionSettings {
    pub prior: f64,
    pub scale: f64,
    pub exponent: f64,
    pub frobenius_threshold: Option<f64>,
}

impl Default for DetectionSettings {
    fn default() -> Self {
        DetectionSettings {
            prior: 0.1,
            scale: 1.0,
            exponent: 1.0,
            frobenius_threshold: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub path: PathBuf,
    pub seed: u64,
    pub influence: InfluenceMatrix,
    pub logic: BTreeMap<String, Arc<LogicMatrix>>,
    pub initial: InitialOpinions,
    pub epochs: Vec<Epoch>,
    pub schedule: ScheduleConfig,
    pub injection: Option<Injection>,
    pub detection: DetectionSettings,
}

/// Command-line overrides.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub seed: Option<u64>,
    pub max_steps: Option<usize>,
    /// Prior modes to score; empty means both.
    pub modes: Vec<PriorMode>,
}

impl RunOptions {
    fn modes(&self) -> Vec<PriorMode> {
        if self.modes.is_empty() {
            vec![PriorMode::Static, PriorMode::Online]
        } else {
            self.modes.clone()
        }
    }
}

fn display(path: &Path) -> String {
    path.display().to_string()
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

fn parse_raw(path: &Path) -> Result<(RawScenario, PathBuf), ScenarioError> {
    let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
        path: display(path),
        source,
    })?;
    let raw = toml::from_str::<RawScenario>(&text).map_err(|e| ScenarioError::Parse {
        path: display(path),
        line: e.span().map(|s| line_of(&text, s.start)).unwrap_or(1),
        message: e.message().to_owned(),
    })?;
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((raw, dir))
}

fn invalid(path: &Path, message: impl Into<String>) -> ScenarioError {
    ScenarioError::Invalid {
        path: display(path),
        message: message.into(),
    }
}

fn load_influence(dir: &Path, r: &RawMatrixRef) -> Result<InfluenceMatrix, ScenarioError> {
    let p = dir.join(&r.file);
    validate_influence(format::load_matrix(&p)?).map_err(|source| ScenarioError::Model {
        what: display(&p),
        source,
    })
}

fn load_logic(
    dir: &Path,
    path: &Path,
    name: &str,
    r: &RawLogic,
    seed: u64,
) -> Result<LogicMatrix, ScenarioError> {
    let sources = [r.file.is_some(), r.access.is_some(), r.synthetic.is_some()];
    if sources.iter().filter(|&&s| s).count() != 1 {
        return Err(invalid(
            path,
            format!("logic `{name}` needs exactly one of file, access, synthetic"),
        ));
    }
    let access_err = |what: String| move |source| ScenarioError::Access { what, source };
    if let Some(f) = &r.file {
        let p = dir.join(f);
        return validate_logic(format::load_matrix(&p)?).map_err(|source| ScenarioError::Model {
            what: display(&p),
            source,
        });
    }
    let counts = if let Some(f) = &r.access {
        let p = dir.join(f);
        let (a, comps) = format::load_access(&p)?;
        AccessCounts::new(a, comps).map_err(access_err(display(&p)))?
    } else {
        let s = r.synthetic.as_ref().expect("one source is set");
        SyntheticAccess {
            component_of: s.components.clone(),
            self_rate: s.self_rate,
            peer_rate: s.peer_rate,
            cross_rate: s.cross_rate,
            seed: s.seed.unwrap_or(seed),
        }
        .generate()
        .map_err(access_err(format!("logic `{name}`")))?
    };
    logic_from_access(&counts).map_err(access_err(format!("logic `{name}`")))
}

fn build_epoch(
    path: &Path,
    k: usize,
    raw: &RawEpoch,
    logic: &BTreeMap<String, Arc<LogicMatrix>>,
    n: usize,
) -> Result<Epoch, ScenarioError> {
    let mut labels = Vec::new();
    let mut per_agent = Vec::new();
    for a in &raw.assign {
        let c = logic.get(&a.logic).ok_or_else(|| {
            invalid(
                path,
                format!("epoch {}: unknown logic `{}`", k + 1, a.logic),
            )
        })?;
        for _ in 0..a.count {
            labels.push(a.logic.clone());
            per_agent.push(c.clone());
        }
    }
    if per_agent.len() != n {
        return Err(invalid(
            path,
            format!(
                "epoch {}: assigns {} agents but the influence matrix has {n}",
                k + 1,
                per_agent.len()
            ),
        ));
    }
    if raw.steps == 0 {
        return Err(invalid(
            path,
            format!("epoch {}: steps must be positive", k + 1),
        ));
    }
    let assignment =
        AgentLogicAssignment::new(per_agent).map_err(|source| ScenarioError::Model {
            what: format!("epoch {}", k + 1),
            source,
        })?;
    Ok(Epoch {
        steps: raw.steps,
        labels,
        assignment,
    })
}

fn build_injection(
    path: &Path,
    raw: &RawInjection,
    logic: &BTreeMap<String, Arc<LogicMatrix>>,
    n: usize,
    m: usize,
    epochs: usize,
) -> Result<Injection, ScenarioError> {
    if raw.at_epoch == 0 || raw.at_epoch > epochs {
        return Err(invalid(
            path,
            format!("injection.at_epoch must lie in 1..={epochs}"),
        ));
    }
    if !logic.contains_key(&raw.base) {
        return Err(invalid(
            path,
            format!("injection.base: unknown logic `{}`", raw.base),
        ));
    }
    if raw.agents.is_empty() || raw.agents.iter().any(|&a| a == 0 || a > n) {
        return Err(invalid(
            path,
            format!("injection.agents must be non-empty and within 1..={n}"),
        ));
    }
    if raw.steps == 0 {
        return Err(invalid(path, "injection.steps must be positive"));
    }
    let mut edges = Vec::new();
    for e in &raw.edges {
        if e.target == 0 || e.target > m || e.source == 0 || e.source > m {
            return Err(invalid(
                path,
                format!(
                    "injection edge ({}, {}) outside 1..={m}",
                    e.target, e.source
                ),
            ));
        }
        InjectionEdge::new(e.target - 1, e.source - 1, e.per_wt).map_err(|source| {
            ScenarioError::Access {
                what: display(path),
                source,
            }
        })?;
        edges.push((e.target - 1, e.source - 1, e.per_wt));
    }
    for &wt in raw.sweep.iter().chain(raw.wt.iter()) {
        if !wt.is_finite() || wt < 0.0 {
            return Err(invalid(
                path,
                format!("injection weight {wt} must be finite and nonnegative"),
            ));
        }
    }
    Ok(Injection {
        at_epoch: raw.at_epoch,
        agents: raw.agents.iter().map(|a| a - 1).collect(),
        base: raw.base.clone(),
        edges,
        sweep: raw.sweep.clone(),
        steps: raw.steps,
        wt: raw.wt,
    })
}

fn build_schedule(path: &Path, raw: Option<&RawRun>) -> Result<ScheduleConfig, ScenarioError> {
    let mut cfg = ScheduleConfig::default();
    if let Some(r) = raw {
        if let Some(v) = r.eps_settle {
            cfg.run.eps_settle = v;
        }
        if let Some(v) = r.eps_consensus {
            cfg.run.eps_consensus = v;
        }
        if let Some(v) = r.settle_window {
            cfg.run.settle_window = v;
        }
        if let Some(v) = r.stride {
            cfg.run.stride = v;
        }
        cfg.max_iters = r.max_iters.unwrap_or(DEFAULT_MAX_ITERS);
    }
    let RunConfig {
        eps_settle,
        eps_consensus,
        settle_window,
        stride,
        ..
    } = cfg.run;
    if !(eps_settle > 0.0 && eps_consensus > 0.0)
        || settle_window == 0
        || stride == 0
        || cfg.max_iters == 0
    {
        return Err(invalid(
            path,
            "run: tolerances, settle_window, stride and max_iters must be positive",
        ));
    }
    Ok(cfg)
}

fn build_detection(
    path: &Path,
    raw: Option<&RawDetection>,
) -> Result<DetectionSettings, ScenarioError> {
    let Some(r) = raw else {
        return Ok(DetectionSettings::default());
    };
    ScoreConfig::new(r.prior, r.scale, r.exponent, PriorMode::Static)
        .map_err(|e| invalid(path, format!("detection: {e}")))?;
    if let Some(d) = r.frobenius_threshold {
        if !(d >= 0.0 && d.is_finite()) {
            return Err(invalid(
                path,
                "detection.frobenius_threshold must be finite and nonnegative",
            ));
        }
    }
    Ok(DetectionSettings {
        prior: r.prior,
        scale: r.scale,
        exponent: r.exponent,
        frobenius_threshold: r.frobenius_threshold,
    })
}

fn build_initial(
    dir: &Path,
    path: &Path,
    raw: Option<&RawInitial>,
    n: usize,
    m: usize,
) -> Result<InitialOpinions, ScenarioError> {
    match raw {
        Some(RawInitial { file: Some(f), .. }) => {
            let p = dir.join(f);
            let x = format::load_matrix(&p)?;
            if x.shape() != (n, m) {
                return Err(invalid(
                    &p,
                    format!(
                        "initial opinions are {}x{}, expected {n}x{m}",
                        x.nrows(),
                        x.ncols()
                    ),
                ));
            }
            if x.iter().any(|v| !v.is_finite()) {
                return Err(invalid(&p, "initial opinions must be finite"));
            }
            Ok(InitialOpinions::Explicit(x))
        }
        Some(RawInitial { low, high, .. }) => {
            if !(low.is_finite() && high.is_finite() && low <= high) {
                return Err(invalid(path, "initial: need finite low <= high"));
            }
            Ok(InitialOpinions::Seeded {
                low: *low,
                high: *high,
            })
        }
        None => Ok(InitialOpinions::Seeded {
            low: -1.0,
            high: 1.0,
        }),
    }
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let (raw, dir) = parse_raw(path)?;
        let influence = load_influence(&dir, &raw.influence)?;
        let mut logic = BTreeMap::new();
        for (name, r) in &raw.logic {
            logic.insert(
                name.clone(),
                Arc::new(load_logic(&dir, path, name, r, raw.seed)?),
            );
        }
        Self::assemble(path, &dir, raw, influence, logic)
    }

    fn assemble(
        path: &Path,
        dir: &Path,
        raw: RawScenario,
        influence: InfluenceMatrix,
        logic: BTreeMap<String, Arc<LogicMatrix>>,
    ) -> Result<Self, ScenarioError> {
        let n = influence.n();
        if raw.epochs.is_empty() {
            return Err(invalid(path, "at least one epoch is required"));
        }
        let epochs = raw
            .epochs
            .iter()
            .enumerate()
            .map(|(k, e)| build_epoch(path, k, e, &logic, n))
            .collect::<Result<Vec<_>, _>>()?;
        let m = epochs[0].assignment.m();
        let injection = raw
            .injection
            .as_ref()
            .map(|r| build_injection(path, r, &logic, n, m, epochs.len()))
            .transpose()?;
        if let Some(inj) = &injection {
            if logic[&inj.base].m() != m {
                return Err(invalid(
                    path,
                    "injection.base has the wrong number of topics",
                ));
            }
        }
        Ok(Scenario {
            name: raw.name,
            path: path.to_path_buf(),
            seed: raw.seed,
            initial: build_initial(dir, path, raw.initial.as_ref(), n, m)?,
            schedule: build_schedule(path, raw.run.as_ref())?,
            detection: build_detection(path, raw.detection.as_ref())?,
            influence,
            logic,
            epochs,
            injection,
        })
    }

    pub fn n(&self) -> usize {
        self.influence.n()
    }

    pub fn m(&self) -> usize {
        self.epochs[0].assignment.m()
    }

    pub fn initial_state(&self, seed: u64) -> DMatrix<f64> {
        match &self.initial {
            InitialOpinions::Explicit(x) => x.clone(),
            InitialOpinions::Seeded { low, high } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let (n, m) = (self.n(), self.m());
                let mut x = DMatrix::zeros(n, m);
                for i in 0..n {
                    for p in 0..m {
                        x[(i, p)] = if low == high {
                            *low
                        } else {
                            rng.random_range(*low..=*high)
                        };
                    }
                }
                x
            }
        }
    }

    /// Injected logic for one weight.
    pub fn injected_logic(&self, wt: f64) -> Result<LogicMatrix, ScenarioError> {
        let inj = self
            .injection
            .as_ref()
            .ok_or_else(|| invalid(&self.path, "scenario has no injection"))?;
        let edges = inj
            .edges
            .iter()
            .map(|&(t, s, k)| InjectionEdge::new(t, s, k * wt))
            .collect::<Result<Vec<_>, _>>()
            .and_then(|edges| inject_cross_influence(&self.logic[&inj.base], &edges))
            .map_err(|source| ScenarioError::Access {
                what: format!("injection at wt {wt}"),
                source,
            })?;
        Ok(edges)
    }

    /// Assignment of epoch `k` (which may be one past the last epoch), with
    /// the injection applied when `wt` is given and `k >= at_epoch`.
    pub fn assignment_at(
        &self,
        k: usize,
        wt: Option<f64>,
    ) -> Result<AgentLogicAssignment, ScenarioError> {
        let base = &self.epochs[k.min(self.epochs.len() - 1)].assignment;
        match (&self.injection, wt) {
            (Some(inj), Some(wt)) if k >= inj.at_epoch => base
                .with_override(&inj.agents, Arc::new(self.injected_logic(wt)?))
                .map_err(|source| ScenarioError::Model {
                    what: "injection".into(),
                    source,
                }),
            _ => Ok(base.clone()),
        }
    }

    fn schedule_for(&self, steps: usize, opts: &RunOptions) -> ScheduleConfig {
        let mut cfg = self.schedule.clone();
        cfg.run.t_max = opts.max_steps.map_or(steps, |cap| steps.min(cap)).max(1);
        cfg
    }

    fn run_epoch(
        &self,
        k: usize,
        assignment: &AgentLogicAssignment,
        x: &DMatrix<f64>,
        cfg: &ScheduleConfig,
    ) -> Result<ScheduleOutcome, ScenarioError> {
        let analysis = analyze(assignment, format!("epoch {}", k + 1))?;
        let outcome =
            run_all(&analysis, &self.influence, assignment, x, cfg).map_err(|source| {
                ScenarioError::Schedule {
                    epoch: k + 1,
                    source,
                }
            })?;
        if outcome.early_termination {
            let done: Vec<usize> = outcome.order.clone();
            let pending = (0..analysis.blocks.len())
                .filter(|b| !done.contains(b))
                .map(|b| b + 1)
                .collect();
            return Err(ScenarioError::EarlyTermination {
                epoch: k + 1,
                pending,
            });
        }
        if let Some(r) = outcome.results.values().find(|r| r.verdict.overflow) {
            return Err(ScenarioError::Diverged {
                epoch: k + 1,
                block: r.block + 1,
            });
        }
        Ok(outcome)
    }
}

fn analyze(
    assignment: &AgentLogicAssignment,
    what: String,
) -> Result<BlockAnalysis, ScenarioError> {
    BlockAnalysis::of_assignment(assignment)
        .map_err(|source| ScenarioError::Structure { what, source })
}

/// Validation report covering every matrix; the error is the first problem
/// found.
pub fn validate(path: &Path) -> (String, Result<Scenario, ScenarioError>) {
    let mut report = String::new();
    let (raw, dir) = match parse_raw(path) {
        Ok(v) => v,
        Err(e) => {
            let _ = writeln!(report, "scenario {}: {e}", display(path));
            return (report, Err(e));
        }
    };
    let _ = writeln!(report, "scenario {}: parsed `{}`", display(path), raw.name);
    let mut first_err = None;
    let influence = match load_influence(&dir, &raw.influence) {
        Ok(w) => {
            let adv = w.aperiodicity_advisory();
            let _ = writeln!(
                report,
                "influence {}: ok ({n}x{n}, positive diagonal: {}, primitive: {})",
                raw.influence.file,
                yes_no(w.has_positive_diagonal()),
                yes_no(adv.is_primitive()),
                n = w.n(),
            );
            Some(w)
        }
        Err(e) => {
            let _ = writeln!(report, "influence {}: {e}", raw.influence.file);
            first_err.get_or_insert(e);
            None
        }
    };
    let mut logic = BTreeMap::new();
    for (name, r) in &raw.logic {
        match load_logic(&dir, path, name, r, raw.seed) {
            Ok(c) => {
                let _ = writeln!(report, "logic {name}: ok ({m}x{m})", m = c.m());
                logic.insert(name.clone(), Arc::new(c));
            }
            Err(e) => {
                let _ = writeln!(report, "logic {name}: {e}");
                first_err.get_or_insert(e);
            }
        }
    }
    if let Some(e) = first_err {
        return (report, Err(e));
    }
    let influence = influence.expect("no error recorded");
    match Scenario::assemble(path, &dir, raw, influence, logic) {
        Ok(sc) => {
            let _ = writeln!(
                report,
                "schema: ok ({} agents, {} topics, {} epochs{})",
                sc.n(),
                sc.m(),
                sc.epochs.len(),
                if sc.injection.is_some() {
                    ", injection"
                } else {
                    ""
                }
            );
            (report, Ok(sc))
        }
        Err(e) => {
            let _ = writeln!(report, "schema: {e}");
            (report, Err(e))
        }
    }
}

fn yes_no(b: bool) -> &'static str {
    if b {
        "yes"
    } else {
        "no"
    }
}

/// Block reports for every named logic matrix, every epoch, and the
/// post-injection assignment.
pub fn decompose(sc: &Scenario) -> Result<String, ScenarioError> {
    let mut out = String::new();
    for (name, c) in &sc.logic {
        let asg = AgentLogicAssignment::uniform(c.as_ref().clone(), sc.n());
        let _ = writeln!(out, "# logic {name}");
        out.push_str(&analyze(&asg, format!("logic `{name}`"))?.report());
        out.push('\n');
    }
    for (k, e) in sc.epochs.iter().enumerate() {
        let _ = writeln!(out, "# epoch {} ({})", k + 1, run_lengths(&e.labels));
        out.push_str(&analyze(&e.assignment, format!("epoch {}", k + 1))?.report());
        out.push('\n');
    }
    if let Some(inj) = &sc.injection {
        let wt = representative_wt(inj);
        let asg = sc.assignment_at(inj.at_epoch, Some(wt))?;
        let _ = writeln!(out, "# post-injection wt={wt}");
        out.push_str(&analyze(&asg, "post-injection".into())?.report());
        if let Some(delta) = sc.detection.frobenius_threshold {
            let injected = sc.injected_logic(wt)?;
            let before = &sc.assignment_at(inj.at_epoch, None)?;
            for &a in &inj.agents {
                let d = frobenius_drift(before.agent(a), &injected, delta)?;
                let _ = writeln!(
                    out,
                    "drift\tagent {}\t{}\t{}",
                    a + 1,
                    d.norm,
                    if d.flagged { "flagged" } else { "ok" }
                );
            }
        }
    }
    Ok(out)
}

fn representative_wt(inj: &Injection) -> f64 {
    inj.wt
        .or_else(|| inj.sweep.iter().copied().find(|&w| w > 0.0))
        .unwrap_or(1.0)
}

fn run_lengths(labels: &[String]) -> String {
    let mut parts: Vec<(String, usize)> = Vec::new();
    for l in labels {
        match parts.last_mut() {
            Some((name, count)) if name == l => *count += 1,
            _ => parts.push((l.clone(), 1)),
        }
    }
    parts
        .iter()
        .map(|(name, count)| format!("{name}x{count}"))
        .collect::<Vec<_>>()
        .join(" + ")
}

#[derive(Debug, Clone)]
pub struct EpochResult {
    pub epoch: usize,
    /// Time of the epoch's first state on the global clock.
    pub start: usize,
    pub outcome: ScheduleOutcome,
}

#[derive(Debug, Clone)]
pub struct SimulationOutput {
    pub epochs: Vec<EpochResult>,
    pub final_state: DMatrix<f64>,
}

impl SimulationOutput {
    /// `t,agent,topic,value` over all epochs on one clock.
    pub fn trajectory_csv(&self) -> String {
        let mut out = String::from("t,agent,topic,value\n");
        for (k, e) in self.epochs.iter().enumerate() {
            let mut hist = e.outcome.combined_history();
            if k > 0 {
                // the first state repeats the previous epoch's last one
                hist.times.remove(0);
                hist.states.remove(0);
            }
            hist.write_csv_rows(&mut out, e.start);
        }
        out
    }

    /// `epoch,topic,block,rule,verdict,spread,values`.
    pub fn summary_csv(&self) -> String {
        let mut out = String::from("epoch,topic,block,rule,verdict,spread,values\n");
        for e in &self.epochs {
            for line in e.outcome.summary_csv().lines().skip(1) {
                let _ = writeln!(out, "{},{line}", e.epoch + 1);
            }
        }
        out
    }

    pub fn last(&self) -> &ScheduleOutcome {
        &self.epochs.last().expect("at least one epoch").outcome
    }
}

/// Runs the epochs in order, each scheduled from the previous epoch's final
/// state. With an injection weight set, epochs from `at_epoch` on use the
/// injected logic; an injection at the end of the timeline appends an epoch
/// of `injection.steps`.
pub fn simulate(sc: &Scenario, opts: &RunOptions) -> Result<SimulationOutput, ScenarioError> {
    let wt = sc.injection.as_ref().and_then(|i| i.wt);
    let mut plan: Vec<usize> = sc.epochs.iter().map(|e| e.steps).collect();
    if let (Some(inj), Some(_)) = (&sc.injection, wt) {
        if inj.at_epoch == sc.epochs.len() {
            plan.push(inj.steps);
        }
    }
    run_epochs(sc, opts, &plan, wt)
}

fn run_epochs(
    sc: &Scenario,
    opts: &RunOptions,
    plan: &[usize],
    wt: Option<f64>,
) -> Result<SimulationOutput, ScenarioError> {
    let mut x = sc.initial_state(opts.seed.unwrap_or(sc.seed));
    let mut start = 0;
    let mut epochs = Vec::with_capacity(plan.len());
    for (k, &steps) in plan.iter().enumerate() {
        let assignment = sc.assignment_at(k, wt)?;
        let outcome = sc.run_epoch(k, &assignment, &x, &sc.schedule_for(steps, opts))?;
        x = outcome.final_state();
        let span = outcome.combined_history().last_time();
        epochs.push(EpochResult {
            epoch: k,
            start,
            outcome,
        });
        start += span;
    }
    Ok(SimulationOutput {
        epochs,
        final_state: x,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DriftRow {
    pub wt: f64,
    pub agent: usize,
    pub norm: f64,
    pub flagged: bool,
}

#[derive(Debug, Clone)]
pub struct SweepOutput {
    /// Settled pre-injection state.
    pub baseline: DMatrix<f64>,
    pub baseline_steps: usize,
    /// Scores per weight, in sweep order.
    pub per_wt: Vec<(f64, AnomalyTimeline)>,
    pub drift: Vec<DriftRow>,
}

impl SweepOutput {
    pub fn combined(&self) -> AnomalyTimeline {
        let mut all = AnomalyTimeline::default();
        for (_, tl) in &self.per_wt {
            all.extend(tl.clone());
        }
        all
    }

    /// `wt,agent,norm,flagged`.
    pub fn drift_csv(&self) -> String {
        let mut out = String::from("wt,agent,norm,flagged\n");
        for d in &self.drift {
            let _ = writeln!(out, "{},{},{},{}", d.wt, d.agent + 1, d.norm, d.flagged);
        }
        out
    }
}

/// Settles the pre-injection epochs to a baseline, then for each sweep
/// weight runs the joint post-injection dynamics for `injection.steps`
/// steps, scoring every step against the baseline.
pub fn sweep(sc: &Scenario, opts: &RunOptions) -> Result<SweepOutput, ScenarioError> {
    let inj = sc
        .injection
        .as_ref()
        .ok_or_else(|| invalid(&sc.path, "sweep needs an [injection] table"))?;
    if inj.sweep.is_empty() {
        return Err(invalid(&sc.path, "injection.sweep is empty"));
    }
    let plan: Vec<usize> = sc.epochs[..inj.at_epoch].iter().map(|e| e.steps).collect();
    let pre = run_epochs(sc, opts, &plan, None)?;
    let baseline = pre.final_state.clone();
    let baseline_steps = pre
        .epochs
        .iter()
        .map(|e| e.outcome.combined_history().last_time())
        .sum();
    let before = sc.assignment_at(inj.at_epoch, None)?;
    let modes = opts.modes();
    let det = sc.detection;

    let per_wt = inj
        .sweep
        .par_iter()
        .map(|&wt| {
            let assignment = sc.assignment_at(inj.at_epoch, Some(wt))?;
            let stepper = OpenMultiStepper {
                w: &sc.influence,
                assignment: &assignment,
                topics: (0..sc.m()).collect(),
                externals: BTreeMap::new(),
            };
            let mut snapshots = Vec::with_capacity(inj.steps);
            let mut x = baseline.clone();
            for _ in 0..inj.steps {
                x = stepper
                    .step(&x)
                    .map_err(|source| ScenarioError::Dynamics { wt, source })?;
                snapshots.push(x.clone());
            }
            let mut timeline = AnomalyTimeline::default();
            for &mode in &modes {
                let cfg = ScoreConfig::new(det.prior, det.scale, det.exponent, mode)?;
                timeline.extend(AnomalyTimeline::score_against_baseline(
                    &baseline, &snapshots, wt, &cfg,
                )?);
            }
            Ok((wt, timeline))
        })
        .collect::<Result<Vec<_>, ScenarioError>>()?;

    let mut drift = Vec::new();
    if let Some(delta) = det.frobenius_threshold {
        for &wt in &inj.sweep {
            let injected = sc.injected_logic(wt)?;
            for &a in &inj.agents {
                let d = frobenius_drift(before.agent(a), &injected, delta)?;
                drift.push(DriftRow {
                    wt,
                    agent: a,
                    norm: d.norm,
                    flagged: d.flagged,
                });
            }
        }
    }
    Ok(SweepOutput {
        baseline,
        baseline_steps,
        per_wt,
        drift,
    })
}
