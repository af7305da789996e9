//! Steerable screening sessions: a screening state, a live policy and an
//! append-only event log that replays to the same selection.

use std::time::{SystemTime, UNIX_EPOCH};

use acs_core::data::{Dataset, Sample, SimilarityKernel};
use acs_core::engine::{EngineError, FiltrationView, Handle, RunError, ScreeningState, Status};
use acs_core::learners::LearnerSpec;
use acs_core::policies::{DiversityMode, PolicyConfig, PolicyError, PolicyKind};
use acs_core::result::{AuditEvent, SelectionResult, TrajectoryPoint};
use acs_core::rng;
use acs_core::sim::{self, SimConfig};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::io::{self, CsvSchema, PropertySource};

#[derive(Debug, thiserror::Error)]
pub enum SessionError {
    /// The request cannot apply in the session's current state.
    #[error("{0}")]
    Conflict(String),
    /// Well-formed but semantically invalid input.
    #[error("{0}")]
    Invalid(String),
}

impl From<EngineError> for SessionError {
    fn from(e: EngineError) -> Self {
        match e {
            EngineError::Finished => SessionError::Conflict(e.to_string()),
            _ => SessionError::Invalid(e.to_string()),
        }
    }
}

impl From<PolicyError> for SessionError {
    fn from(e: PolicyError) -> Self {
        SessionError::Invalid(e.to_string())
    }
}

impl From<RunError> for SessionError {
    fn from(e: RunError) -> Self {
        match e {
            RunError::Engine(e) => e.into(),
            RunError::Policy(e) => e.into(),
        }
    }
}

/// Where a session's data comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Sim(SimConfig),
    /// CSV text with a header; rows without outcome are test units.
    Csv {
        text: String,
        #[serde(default)]
        property: Option<String>,
        #[serde(default)]
        fingerprint: Option<String>,
    },
    Samples { labeled: Vec<Sample>, test: Vec<Sample> },
}

impl DataSource {
    pub fn load(&self) -> Result<Dataset, SessionError> {
        let invalid = |e: String| SessionError::Invalid(e);
        match self {
            DataSource::Sim(cfg) => sim::generate(cfg).map_err(|e| invalid(e.to_string())),
            DataSource::Csv { text, property, fingerprint } => {
                let mut schema = CsvSchema { fingerprint: fingerprint.clone(), ..CsvSchema::default() };
                if let Some(p) = property {
                    schema.property = PropertySource::Global(p.parse().map_err(|e: acs_core::data::DataError| invalid(e.to_string()))?);
                } else if text.lines().next().is_some_and(|h| h.split(',').any(|c| c.trim() == "c_lo")) {
                    schema.property = PropertySource::Columns { lo: "c_lo".into(), hi: "c_hi".into() };
                }
                io::ingest_reader(text.as_bytes(), &schema).map(|i| i.dataset).map_err(|e| invalid(e.to_string()))
            }
            DataSource::Samples { labeled, test } => Dataset::new(labeled.clone(), test.clone()).map_err(|e| invalid(e.to_string())),
        }
    }
}

/// Everything needed to rebuild a session from scratch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSpec {
    pub data: DataSource,
    /// Training reserve size; defaults to half the labeled units.
    #[serde(default)]
    pub k: Option<usize>,
    pub alpha: f64,
    #[serde(default)]
    pub seed: u64,
    pub policy: PolicyConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventKind {
    Step { requested: usize, performed: usize },
    PolicyChange { from: PolicyConfig, to: PolicyConfig },
    LabelInjected { handle: Handle, y: f64 },
    Finalize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionEvent {
    pub seq: usize,
    /// Screening step when the event was applied.
    pub step: usize,
    #[serde(flatten)]
    pub kind: EventKind,
}

/// Changes to the live policy. `policy` replaces it outright; the other
/// fields adjust the current one.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PolicyPatch {
    #[serde(default)]
    pub policy: Option<PolicyConfig>,
    #[serde(default)]
    pub lambda: Option<f64>,
    #[serde(default)]
    pub kernel: Option<SimilarityKernel>,
    #[serde(default)]
    pub learner: Option<LearnerSpec>,
}

/// What-if request: pool orderings under diversity weights for each λ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreviewRequest {
    pub lambdas: Vec<f64>,
    #[serde(default)]
    pub kernel: Option<SimilarityKernel>,
    #[serde(default)]
    pub learner: Option<LearnerSpec>,
    #[serde(default)]
    pub mode: Option<DiversityMode>,
    /// Truncates each ordering to its first `top` entries.
    #[serde(default)]
    pub top: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedEntry {
    pub handle: Handle,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreviewOrdering {
    pub lambda: f64,
    pub policy: PolicyConfig,
    /// Screening order the policy would follow next (first = screened first).
    pub ordering: Vec<RankedEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SessionStatus {
    Running,
    Stopped,
    Exhausted,
}

impl From<Status> for SessionStatus {
    fn from(s: Status) -> Self {
        match s {
            Status::Running => SessionStatus::Running,
            Status::Stopped => SessionStatus::Stopped,
            Status::Exhausted => SessionStatus::Exhausted,
        }
    }
}

/// The state payload: the filtration view plus run bookkeeping. Contains no
/// hidden outcome or membership.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateSnapshot {
    pub id: String,
    pub status: SessionStatus,
    pub finalized: bool,
    pub policy: PolicyConfig,
    pub fdp_estimate: f64,
    pub trajectory: Vec<TrajectoryPoint>,
    pub events: usize,
    pub created_ms: u64,
    pub updated_ms: u64,
    pub view: FiltrationView,
}

fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
}

/// 128 random bits from the OS-seeded generator, hex encoded.
pub fn fresh_id() -> String {
    let v: u128 = rand::rng().random();
    format!("{v:032x}")
}

pub struct Session {
    id: String,
    spec: SessionSpec,
    state: ScreeningState,
    policy: acs_core::policies::Policy,
    policy_config: PolicyConfig,
    events: Vec<SessionEvent>,
    finalized: Option<SelectionResult>,
    created_ms: u64,
    updated_ms: u64,
}

impl Session {
    pub fn create(id: String, spec: SessionSpec) -> Result<Self, SessionError> {
        let dataset = spec.data.load()?;
        let k = spec.k.unwrap_or(dataset.n() / 2);
        let state = ScreeningState::init(&dataset, k, spec.alpha, spec.seed)?;
        let policy_config = spec.policy.clone().with_seed(rng::derive_seed(spec.seed, &[0]));
        let policy = policy_config.build()?;
        let mut s = Self {
            id,
            spec,
            state,
            policy,
            policy_config,
            events: Vec::new(),
            finalized: None,
            created_ms: now_ms(),
            updated_ms: 0,
        };
        s.updated_ms = s.created_ms;
        s.state.record(AuditEvent::Note { message: format!("policy {}", s.policy_config) });
        Ok(s)
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn spec(&self) -> &SessionSpec {
        &self.spec
    }

    pub fn events(&self) -> &[SessionEvent] {
        &self.events
    }

    pub fn policy(&self) -> &PolicyConfig {
        &self.policy_config
    }

    pub fn snapshot(&self) -> StateSnapshot {
        StateSnapshot {
            id: self.id.clone(),
            status: self.state.status().into(),
            finalized: self.finalized.is_some(),
            policy: self.policy_config.clone(),
            fdp_estimate: self.state.fdp_estimate(),
            trajectory: self.state.trajectory().to_vec(),
            events: self.events.len(),
            created_ms: self.created_ms,
            updated_ms: self.updated_ms,
            view: self.state.visible(),
        }
    }

    fn push(&mut self, step: usize, kind: EventKind) {
        self.events.push(SessionEvent { seq: self.events.len(), step, kind });
        self.updated_ms = now_ms();
    }

    fn ensure_open(&self) -> Result<(), SessionError> {
        if self.finalized.is_some() {
            return Err(SessionError::Conflict("session is finalized".into()));
        }
        Ok(())
    }

    /// Runs up to `count` driver iterations; stops early when the run ends.
    pub fn advance(&mut self, count: usize) -> Result<usize, SessionError> {
        self.ensure_open()?;
        if self.state.is_finished() {
            return Err(SessionError::Conflict("screening has finished".into()));
        }
        let step = self.state.step();
        let mut performed = 0;
        let mut failure = None;
        while performed < count {
            match self.state.advance(&mut self.policy, None) {
                Ok(true) => performed += 1,
                Ok(false) => break,
                Err(e) => {
                    failure = Some(e);
                    break;
                }
            }
        }
        self.push(step, EventKind::Step { requested: count, performed });
        match failure {
            Some(e) => Err(e.into()),
            None => Ok(performed),
        }
    }

    pub fn apply_policy(&mut self, patch: &PolicyPatch) -> Result<PolicyConfig, SessionError> {
        self.ensure_open()?;
        if self.state.is_finished() {
            return Err(SessionError::Conflict("screening has finished".into()));
        }
        let mut next = patch.policy.clone().unwrap_or_else(|| self.policy_config.clone());
        if let Some(l) = patch.learner {
            match &mut next.kind {
                PolicyKind::Static { learner }
                | PolicyKind::Refit { learner, .. }
                | PolicyKind::AugmentedRefit { learner, .. }
                | PolicyKind::Diversity { learner, .. }
                | PolicyKind::Adversarial { learner, .. } => *learner = l,
                _ => return Err(SessionError::Invalid(format!("policy {} has no single learner", next.name()))),
            }
        }
        if patch.lambda.is_some() || patch.kernel.is_some() {
            let PolicyKind::Diversity { lambda, kernel, .. } = &mut next.kind else {
                return Err(SessionError::Invalid("lambda and kernel apply to diversity policies".into()));
            };
            if let Some(l) = patch.lambda {
                *lambda = l;
            }
            if let Some(k) = patch.kernel {
                *kernel = k;
            }
        }
        let seq = self.events.len() as u64;
        let next = next.with_seed(rng::derive_seed(self.spec.seed, &[1, seq]));
        let policy = next.build()?;
        let from = std::mem::replace(&mut self.policy_config, next.clone());
        self.policy = policy;
        self.state.record(AuditEvent::PolicyChange { from: from.to_string(), to: next.to_string() });
        self.push(self.state.step(), EventKind::PolicyChange { from, to: next.clone() });
        Ok(next)
    }

    pub fn inject_label(&mut self, handle: Handle, y: f64) -> Result<(), SessionError> {
        self.ensure_open()?;
        if !y.is_finite() {
            return Err(SessionError::Invalid("label must be finite".into()));
        }
        self.state.reveal_label(handle, y)?;
        self.push(self.state.step(), EventKind::LabelInjected { handle, y });
        Ok(())
    }

    /// The selection. Legal only once the stopping rule has fired or the
    /// pool is exhausted.
    pub fn finalize(&mut self) -> Result<SelectionResult, SessionError> {
        if let Some(r) = &self.finalized {
            return Ok(r.clone());
        }
        if !self.state.is_finished() && !self.state.check_stop() {
            return Err(SessionError::Conflict(format!(
                "not stopped: FDP estimate {:.4} exceeds alpha {}",
                self.state.fdp_estimate(),
                self.state.alpha()
            )));
        }
        let result = self.state.result().expect("finished states have a result");
        self.push(self.state.step(), EventKind::Finalize);
        self.finalized = Some(result.clone());
        Ok(result)
    }

    /// Read-only what-if: how diversity-aware orderings would rank the pool.
    pub fn preview(&self, req: &PreviewRequest) -> Result<Vec<PreviewOrdering>, SessionError> {
        if req.lambdas.is_empty() {
            return Err(SessionError::Invalid("lambdas must be non-empty".into()));
        }
        let view = self.state.visible();
        if view.anonymous_pool.is_empty() {
            return Err(SessionError::Conflict("the anonymous pool is empty".into()));
        }
        let (cur_learner, cur_kernel, cur_mode) = match &self.policy_config.kind {
            PolicyKind::Diversity { learner, kernel, mode, .. } => (Some(*learner), Some(*kernel), Some(*mode)),
            _ => (self.policy_config.learner().copied(), None, None),
        };
        let learner = req.learner.or(cur_learner).unwrap_or_else(LearnerSpec::forest);
        let kernel = req.kernel.or(cur_kernel).unwrap_or(SimilarityKernel::Rbf { sigma0: 5.0 });
        let mode = req.mode.or(cur_mode).unwrap_or(DiversityMode::ClosedForm);
        req.lambdas
            .iter()
            .map(|&lambda| {
                let mut config = PolicyConfig::new(PolicyKind::Diversity { learner, lambda, kernel, mode, period: 1 });
                config.use_revealed_nonnulls = self.policy_config.use_revealed_nonnulls;
                let mut policy = config.build()?;
                let mut ranking = policy.ranking(&view)?;
                if let Some(t) = req.top {
                    ranking.truncate(t);
                }
                Ok(PreviewOrdering {
                    lambda,
                    policy: config,
                    ordering: ranking.into_iter().map(|(handle, score)| RankedEntry { handle, score }).collect(),
                })
            })
            .collect()
    }

    /// Rebuilds a session from its spec and event log. The returned
    /// session's selection matches the original bit for bit.
    pub fn replay(id: String, spec: SessionSpec, events: &[SessionEvent]) -> Result<Self, SessionError> {
        let mut s = Self::create(id, spec)?;
        for e in events {
            match &e.kind {
                EventKind::Step { requested, performed } => {
                    let got = s.advance(*requested)?;
                    if got != *performed {
                        return Err(SessionError::Conflict(format!("replay diverged at event {}: {got} != {performed} steps", e.seq)));
                    }
                }
                EventKind::PolicyChange { to, .. } => {
                    s.apply_policy(&PolicyPatch { policy: Some(to.clone()), ..PolicyPatch::default() })?;
                }
                EventKind::LabelInjected { handle, y } => s.inject_label(*handle, *y)?,
                EventKind::Finalize => {
                    s.finalize()?;
                }
            }
        }
        Ok(s)
    }

    pub fn result(&self) -> Option<&SelectionResult> {
        self.finalized.as_ref()
    }
}
