//! The screening state machine.
//!
//! All `n + m` units are shuffled into one table and `k` labeled units are
//! screened up front as a training reserve. From then on an ordering policy
//! picks one unscreened unit per step, seeing only a [`FiltrationView`]:
//!
//! * screened units, with membership and (for labeled units, or test units
//!   whose label was revealed afterwards) outcome;
//! * unscreened non-null labeled units, in full;
//! * every other unscreened unit as an anonymous `(handle, x)` pair, plus the
//!   two counts `|N-|` (null labeled) and `|P|` (test).
//!
//! Screening stops at the first step where
//! `m / (n - k + 1) * (1 + |N-|) / max(|P|, 1) <= alpha`, and the unscreened
//! test units are returned as the selection.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec::Vec;
use core::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::data::{Dataset, Fingerprint, PropertySet};
use crate::policies::PolicyError;
use crate::result::{AuditEntry, AuditEvent, SelectionResult, TrajectoryPoint};
use crate::rng;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EngineError {
    #[error("training reserve k={k} exceeds labeled count n={n}")]
    ReserveTooLarge { k: usize, n: usize },
    #[error("alpha must lie in [0, 1), got {0}")]
    BadAlpha(f64),
    #[error("unknown handle {0}")]
    UnknownHandle(Handle),
    #[error("unit {0} was already screened")]
    AlreadyScreened(Handle),
    #[error("screening has finished; the state is frozen")]
    Finished,
    #[error("unit {0} has not been screened")]
    NotScreened(Handle),
    #[error("unit {0} is not a test unit")]
    NotTest(Handle),
    #[error("label for unit {0} was already revealed")]
    AlreadyRevealed(Handle),
    #[error("oracle outcomes are unavailable for some unscreened test units")]
    NoOracle,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

/// Opaque per-run reference to a unit. Drawn at random at initialization and
/// stable for the rest of the run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Handle(u64);

impl Handle {
    pub fn from_raw(v: u64) -> Self {
        Self(v)
    }

    pub fn raw(self) -> u64 {
        self.0
    }
}

impl fmt::Display for Handle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016x}", self.0)
    }
}

impl core::str::FromStr for Handle {
    type Err = core::num::ParseIntError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        u64::from_str_radix(s, 16).map(Self)
    }
}

impl Serialize for Handle {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Handle {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Membership {
    Labeled,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Running,
    Stopped,
    Exhausted,
}

/// A screened unit as the policy sees it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScreenedRecord {
    pub handle: Handle,
    /// 1-based position in the screening order.
    pub position: usize,
    pub x: Arc<[f64]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fingerprint: Option<Fingerprint>,
    pub membership: Membership,
    pub property: PropertySet,
    /// Outcome for labeled units; revealed label (if any) for test units.
    pub y: Option<f64>,
}

impl ScreenedRecord {
    pub fn is_null(&self) -> Option<bool> {
        self.y.map(|y| self.property.contains(y))
    }
}

/// An unscreened non-null labeled unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledRecord {
    pub handle: Handle,
    pub x: Arc<[f64]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fingerprint: Option<Fingerprint>,
    pub property: PropertySet,
    pub y: f64,
}

/// An unscreened unit whose membership and outcome are hidden. The type has
/// no field that could carry either.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolEntry {
    pub handle: Handle,
    pub x: Arc<[f64]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fingerprint: Option<Fingerprint>,
}

/// The information an ordering decision may legally depend on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiltrationView {
    pub step: usize,
    pub n: usize,
    pub m: usize,
    pub k: usize,
    pub alpha: f64,
    pub count_null_labeled: usize,
    pub count_test: usize,
    pub screened: Vec<ScreenedRecord>,
    pub revealed_nonnull_labeled: Vec<LabeledRecord>,
    pub anonymous_pool: Vec<PoolEntry>,
}

impl FiltrationView {
    pub fn fdp_estimate(&self) -> f64 {
        fdp_estimate(self.n, self.m, self.k, self.count_null_labeled, self.count_test)
    }
}

/// `m / (n - k + 1) * (1 + null_labeled) / max(test, 1)`.
pub fn fdp_estimate(n: usize, m: usize, k: usize, null_labeled: usize, test: usize) -> f64 {
    (m as f64 / (n - k + 1) as f64) * (1 + null_labeled) as f64 / test.max(1) as f64
}

/// Ground truth about a unit, for benchmarking and replay checks only.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UnitTruth {
    pub handle: Handle,
    pub membership: Membership,
    /// Index into the dataset's labeled or test partition.
    pub original: usize,
    pub null: Option<bool>,
}

/// What a reveal hook learns about a freshly screened test unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScreenedUnit {
    pub handle: Handle,
    pub test_index: usize,
}

#[derive(Debug, Clone)]
struct Unit {
    handle: Handle,
    x: Arc<[f64]>,
    fingerprint: Option<Fingerprint>,
    property: PropertySet,
    membership: Membership,
    original: usize,
    /// Labeled outcome, or hidden oracle outcome for test units.
    outcome: Option<f64>,
    screened_at: Option<usize>,
    revealed: Option<f64>,
}

impl Unit {
    fn null(&self) -> Option<bool> {
        self.outcome.map(|y| self.property.contains(y))
    }
}

/// Anything that picks the next unit to screen from a view.
pub trait OrderingPolicy {
    fn choose_next(&mut self, view: &FiltrationView) -> Result<Handle, PolicyError>;

    /// Audit events produced since the last call (model updates, fallbacks).
    fn drain_audit(&mut self) -> Vec<AuditEvent> {
        Vec::new()
    }

    fn describe(&self) -> String;
}

/// Labeled indices forming the training reserve, in reserve order.
pub fn training_reserve(n: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream(seed, &[rng::STREAM_RESERVE]));
    idx.truncate(k);
    idx
}

/// Post-shuffle table: labeled units occupy ids `0..n`, test units `n..n+m`;
/// entry `p` is the id at table position `p`.
pub fn shuffled_table(n: usize, m: usize, seed: u64) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..n + m).collect();
    ids.shuffle(&mut rng::stream(seed, &[rng::STREAM_SHUFFLE]));
    ids
}

#[derive(Debug, Clone)]
pub struct ScreeningState {
    units: Vec<Unit>,
    by_handle: BTreeMap<Handle, usize>,
    order: Vec<usize>,
    n: usize,
    m: usize,
    k: usize,
    alpha: f64,
    seed: u64,
    null_labeled: usize,
    nonnull_labeled: usize,
    test_left: usize,
    status: Status,
    trajectory: Vec<TrajectoryPoint>,
    audit: Vec<AuditEntry>,
}

impl ScreeningState {
    pub fn init(dataset: &Dataset, k: usize, alpha: f64, seed: u64) -> Result<Self, EngineError> {
        let (n, m) = (dataset.n(), dataset.m());
        if k > n {
            return Err(EngineError::ReserveTooLarge { k, n });
        }
        if !(0.0..1.0).contains(&alpha) {
            return Err(EngineError::BadAlpha(alpha));
        }
        let table = shuffled_table(n, m, seed);
        let mut handle_rng = rng::stream(seed, &[rng::STREAM_HANDLES]);
        let mut by_handle = BTreeMap::new();
        let mut position_of = alloc::vec![0usize; n + m];
        let mut units = Vec::with_capacity(n + m);
        for (pos, &id) in table.iter().enumerate() {
            let (sample, membership, original) = if id < n {
                (&dataset.labeled()[id], Membership::Labeled, id)
            } else {
                (&dataset.test()[id - n], Membership::Test, id - n)
            };
            let handle = loop {
                let h = Handle(handle_rng.random());
                if !by_handle.contains_key(&h) {
                    break h;
                }
            };
            by_handle.insert(handle, pos);
            position_of[id] = pos;
            units.push(Unit {
                handle,
                x: sample.x.clone(),
                fingerprint: sample.fingerprint.clone(),
                property: sample.property,
                membership,
                original,
                outcome: sample.y,
                screened_at: None,
                revealed: None,
            });
        }
        let mut state = Self {
            units,
            by_handle,
            order: Vec::with_capacity(n + m),
            n,
            m,
            k,
            alpha,
            seed,
            null_labeled: 0,
            nonnull_labeled: 0,
            test_left: m,
            status: Status::Running,
            trajectory: Vec::new(),
            audit: Vec::new(),
        };
        state.record(AuditEvent::Init { n, m, k, alpha });
        for id in training_reserve(n, k, seed) {
            let pos = position_of[id];
            state.order.push(pos);
            state.units[pos].screened_at = Some(state.order.len());
        }
        for u in state.units.iter().filter(|u| u.screened_at.is_none() && u.membership == Membership::Labeled) {
            if u.null() == Some(true) {
                state.null_labeled += 1;
            } else {
                state.nonnull_labeled += 1;
            }
        }
        Ok(state)
    }

    pub fn step(&self) -> usize {
        self.order.len()
    }

    pub fn status(&self) -> Status {
        self.status
    }

    pub fn is_finished(&self) -> bool {
        self.status != Status::Running
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    /// `(|N-|, |N+|, |P|)` over unscreened units.
    pub fn counts(&self) -> (usize, usize, usize) {
        (self.null_labeled, self.nonnull_labeled, self.test_left)
    }

    pub fn pool_len(&self) -> usize {
        self.null_labeled + self.test_left
    }

    pub fn trajectory(&self) -> &[TrajectoryPoint] {
        &self.trajectory
    }

    pub fn audit(&self) -> &[AuditEntry] {
        &self.audit
    }

    pub fn record(&mut self, event: AuditEvent) {
        self.audit.push(AuditEntry { step: self.step(), event });
    }

    pub fn fdp_estimate(&self) -> f64 {
        fdp_estimate(self.n, self.m, self.k, self.null_labeled, self.test_left)
    }

    pub fn visible(&self) -> FiltrationView {
        let screened = self
            .order
            .iter()
            .enumerate()
            .map(|(i, &pos)| {
                let u = &self.units[pos];
                ScreenedRecord {
                    handle: u.handle,
                    position: i + 1,
                    x: u.x.clone(),
                    fingerprint: u.fingerprint.clone(),
                    membership: u.membership,
                    property: u.property,
                    y: match u.membership {
                        Membership::Labeled => u.outcome,
                        Membership::Test => u.revealed,
                    },
                }
            })
            .collect();
        let mut revealed_nonnull_labeled = Vec::with_capacity(self.nonnull_labeled);
        let mut anonymous_pool = Vec::with_capacity(self.pool_len());
        for u in self.units.iter().filter(|u| u.screened_at.is_none()) {
            match (u.membership, u.null()) {
                (Membership::Labeled, Some(false)) => revealed_nonnull_labeled.push(LabeledRecord {
                    handle: u.handle,
                    x: u.x.clone(),
                    fingerprint: u.fingerprint.clone(),
                    property: u.property,
                    y: u.outcome.unwrap_or(f64::NAN),
                }),
                _ => anonymous_pool.push(PoolEntry {
                    handle: u.handle,
                    x: u.x.clone(),
                    fingerprint: u.fingerprint.clone(),
                }),
            }
        }
        FiltrationView {
            step: self.step(),
            n: self.n,
            m: self.m,
            k: self.k,
            alpha: self.alpha,
            count_null_labeled: self.null_labeled,
            count_test: self.test_left,
            screened,
            revealed_nonnull_labeled,
            anonymous_pool,
        }
    }

    /// Screens the unit behind `handle`.
    pub fn screen_next(&mut self, handle: Handle) -> Result<Membership, EngineError> {
        if self.is_finished() {
            return Err(EngineError::Finished);
        }
        let pos = *self.by_handle.get(&handle).ok_or(EngineError::UnknownHandle(handle))?;
        let unit = &self.units[pos];
        if unit.screened_at.is_some() {
            return Err(EngineError::AlreadyScreened(handle));
        }
        let membership = unit.membership;
        match (membership, unit.null()) {
            (Membership::Test, _) => self.test_left -= 1,
            (Membership::Labeled, Some(true)) => self.null_labeled -= 1,
            (Membership::Labeled, _) => self.nonnull_labeled -= 1,
        }
        self.order.push(pos);
        self.units[pos].screened_at = Some(self.order.len());
        self.record(AuditEvent::Screened { handle, membership });
        Ok(membership)
    }

    /// Evaluates the stopping rule at the current step and freezes the state
    /// when it fires. Ties with `alpha` stop.
    pub fn check_stop(&mut self) -> bool {
        match self.status {
            Status::Stopped => return true,
            Status::Exhausted => return false,
            Status::Running => {}
        }
        let fdp = self.fdp_estimate();
        if self.trajectory.last().map(|p| p.step) != Some(self.step()) {
            self.trajectory.push(TrajectoryPoint { step: self.step(), fdp_estimate: fdp });
        }
        if fdp <= self.alpha {
            self.status = Status::Stopped;
            self.record(AuditEvent::Stopped { fdp_estimate: fdp });
            true
        } else {
            false
        }
    }

    /// Makes the label of a screened test unit visible to later views.
    pub fn reveal_label(&mut self, handle: Handle, y: f64) -> Result<(), EngineError> {
        if self.is_finished() {
            return Err(EngineError::Finished);
        }
        let pos = *self.by_handle.get(&handle).ok_or(EngineError::UnknownHandle(handle))?;
        let unit = &mut self.units[pos];
        if unit.membership != Membership::Test {
            return Err(EngineError::NotTest(handle));
        }
        if unit.screened_at.is_none() {
            return Err(EngineError::NotScreened(handle));
        }
        if unit.revealed.is_some() {
            return Err(EngineError::AlreadyRevealed(handle));
        }
        unit.revealed = Some(y);
        self.record(AuditEvent::LabelRevealed { handle, y });
        Ok(())
    }

    /// Called once the anonymous pool is empty without the rule firing: the
    /// remaining non-null labeled units are screened (they move no count)
    /// and the run ends with an empty selection at step `n + m`.
    fn exhaust(&mut self) {
        let rest: Vec<usize> = (0..self.units.len()).filter(|&p| self.units[p].screened_at.is_none()).collect();
        for pos in rest {
            let handle = self.units[pos].handle;
            self.nonnull_labeled -= 1;
            self.order.push(pos);
            self.units[pos].screened_at = Some(self.order.len());
            self.record(AuditEvent::Screened { handle, membership: Membership::Labeled });
        }
        self.status = Status::Exhausted;
        self.record(AuditEvent::Exhausted);
    }

    /// One iteration of the driver loop: stop check, policy choice,
    /// screening, and the optional label reveal for the screened unit.
    /// Returns `false` once the run is over.
    pub fn advance<'r>(
        &mut self,
        policy: &mut (impl OrderingPolicy + ?Sized),
        reveal: Option<&mut (dyn FnMut(ScreenedUnit) -> Option<f64> + 'r)>,
    ) -> Result<bool, RunError> {
        if self.is_finished() || self.check_stop() {
            return Ok(false);
        }
        if self.pool_len() == 0 {
            self.exhaust();
            return Ok(false);
        }
        let view = self.visible();
        let choice = policy.choose_next(&view);
        for e in policy.drain_audit() {
            self.record(e);
        }
        let handle = choice?;
        let membership = self.screen_next(handle)?;
        if let (Some(hook), Membership::Test) = (reveal, membership) {
            let test_index = self.units[self.by_handle[&handle]].original;
            if let Some(y) = hook(ScreenedUnit { handle, test_index }) {
                self.reveal_label(handle, y)?;
            }
        }
        Ok(true)
    }

    /// The selection, once the run has finished.
    pub fn result(&self) -> Option<SelectionResult> {
        if !self.is_finished() {
            return None;
        }
        let mut selected: Vec<usize> = self
            .units
            .iter()
            .filter(|u| u.membership == Membership::Test && u.screened_at.is_none())
            .map(|u| u.original)
            .collect();
        selected.sort_unstable();
        Some(SelectionResult {
            selected,
            stopping_step: Some(self.step()),
            exhausted: self.status == Status::Exhausted,
            alpha: self.alpha,
            seed: self.seed,
            trajectory: self.trajectory.clone(),
            audit: self.audit.clone(),
        })
    }

    /// `|P-| / (1 + |N-|)` over unscreened units, using hidden test outcomes.
    pub fn oracle_martingale(&self) -> Result<f64, EngineError> {
        let mut null_test = 0usize;
        for u in self.units.iter().filter(|u| u.screened_at.is_none() && u.membership == Membership::Test) {
            if u.null().ok_or(EngineError::NoOracle)? {
                null_test += 1;
            }
        }
        Ok(null_test as f64 / (1 + self.null_labeled) as f64)
    }

    /// Ground truth for a handle. Not part of any view.
    pub fn truth(&self, handle: Handle) -> Option<UnitTruth> {
        self.by_handle.get(&handle).map(|&p| self.truth_at(p))
    }

    /// Ground truth for the screened units, in screening order.
    pub fn screening_order(&self) -> Vec<UnitTruth> {
        self.order.iter().map(|&p| self.truth_at(p)).collect()
    }

    fn truth_at(&self, pos: usize) -> UnitTruth {
        let u = &self.units[pos];
        UnitTruth { handle: u.handle, membership: u.membership, original: u.original, null: u.null() }
    }
}

/// Runs screening to completion with `policy`. `reveal`, if given, is
/// offered every screened test unit right after it is screened and may
/// return its label.
pub fn run(
    dataset: &Dataset,
    k: usize,
    alpha: f64,
    seed: u64,
    policy: &mut (impl OrderingPolicy + ?Sized),
    mut reveal: Option<&mut dyn FnMut(ScreenedUnit) -> Option<f64>>,
) -> Result<SelectionResult, RunError> {
    let mut state = ScreeningState::init(dataset, k, alpha, seed)?;
    state.record(AuditEvent::Note { message: alloc::format!("policy {}", policy.describe()) });
    while state.advance(policy, reveal.as_deref_mut())? {}
    Ok(state.result().expect("driver loop ends only on a finished state"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Sample;
    use alloc::string::ToString;
    use alloc::vec;
    use approx::assert_relative_eq;

    /// 1-D units whose covariate equals the outcome; test outcomes are kept as oracle truth.
    fn toy(labeled: &[f64], test: &[f64]) -> Dataset {
        let mk = |&y: &f64| Sample::new(vec![y], Some(y), PropertySet::at_most(0.0));
        Dataset::new(labeled.iter().map(mk).collect(), test.iter().map(mk).collect()).unwrap()
    }

    struct FirstInPool;

    impl OrderingPolicy for FirstInPool {
        fn choose_next(&mut self, view: &FiltrationView) -> Result<Handle, PolicyError> {
            view.anonymous_pool.first().map(|p| p.handle).ok_or(PolicyError::EmptyPool)
        }

        fn describe(&self) -> String {
            "first".to_string()
        }
    }

    #[test]
    fn fdp_estimate_values() {
        // m=100, n-k+1=101
        assert_relative_eq!(fdp_estimate(100, 100, 0, 50, 80), 100.0 / 101.0 * 51.0 / 80.0);
        assert_relative_eq!(fdp_estimate(100, 100, 0, 50, 80), 0.63119, epsilon = 1e-5);
        assert_relative_eq!(fdp_estimate(100, 100, 0, 0, 0), 0.99010, epsilon = 1e-5);
        assert_relative_eq!(fdp_estimate(100, 100, 0, 0, 100), 0.009901, epsilon = 1e-6);
    }

    #[test]
    fn init_counts_and_reserve() {
        let ds = toy(&[-1.0, -2.0, 1.0, 2.0], &[1.0, -1.0]);
        let st = ScreeningState::init(&ds, 2, 0.1, 5).unwrap();
        let (nm, np, p) = st.counts();
        assert_eq!(nm + np, 2);
        assert_eq!(p, 2);
        assert_eq!(st.step(), 2);
        assert!(st.screening_order().iter().all(|u| u.membership == Membership::Labeled));

        let st0 = ScreeningState::init(&ds, 0, 0.1, 5).unwrap();
        assert_eq!(st0.step(), 0);
        assert_eq!(st0.counts(), (2, 2, 2));
        assert!(st0.visible().screened.is_empty());

        assert_eq!(ScreeningState::init(&ds, 5, 0.1, 5).unwrap_err(), EngineError::ReserveTooLarge { k: 5, n: 4 });
        assert_eq!(ScreeningState::init(&ds, 1, 1.0, 5).unwrap_err(), EngineError::BadAlpha(1.0));
    }

    #[test]
    fn init_is_deterministic() {
        let ds = toy(&[-1.0, -2.0, 1.0, 2.0, 0.5, -0.5], &[1.0, -1.0, 3.0]);
        let a = ScreeningState::init(&ds, 3, 0.1, 9).unwrap();
        let b = ScreeningState::init(&ds, 3, 0.1, 9).unwrap();
        assert_eq!(a.screening_order(), b.screening_order());
        assert_eq!(a.visible(), b.visible());
        let c = ScreeningState::init(&ds, 3, 0.1, 10).unwrap();
        assert_ne!(a.visible(), c.visible());
    }

    #[test]
    fn initial_view_shows_reserve_labels() {
        let ds = toy(&[-1.0, -2.0, 1.0, 2.0], &[1.0, -1.0]);
        let st = ScreeningState::init(&ds, 2, 0.1, 1).unwrap();
        let v = st.visible();
        assert_eq!(v.screened.len(), 2);
        assert!(v.screened.iter().all(|r| r.membership == Membership::Labeled && r.y.is_some()));
        assert_eq!(v.anonymous_pool.len(), v.count_null_labeled + v.count_test);
        assert_eq!(v.revealed_nonnull_labeled.len(), st.counts().1);
    }

    #[test]
    fn screening_bookkeeping() {
        let ds = toy(&[-1.0, -2.0, 1.0, 2.0], &[1.0, -1.0]);
        let mut st = ScreeningState::init(&ds, 0, 0.1, 3).unwrap();
        let v = st.visible();
        let null_lab = v.anonymous_pool.iter().find(|p| {
            let t = st.truth(p.handle).unwrap();
            t.membership == Membership::Labeled
        });
        let h = null_lab.unwrap().handle;
        st.screen_next(h).unwrap();
        assert_eq!(st.counts(), (1, 2, 2));
        assert_eq!(st.screen_next(h), Err(EngineError::AlreadyScreened(h)));
        assert_eq!(st.screen_next(Handle(0xdead)), Err(EngineError::UnknownHandle(Handle(0xdead))));

        // a revealed non-null labeled unit leaves both counts alone
        let nn = st.visible().revealed_nonnull_labeled[0].handle;
        st.screen_next(nn).unwrap();
        assert_eq!(st.counts(), (1, 1, 2));

        // screening a test unit discloses membership but not the outcome
        let t = st.visible().anonymous_pool.iter().map(|p| p.handle).find(|&h| st.truth(h).unwrap().membership == Membership::Test).unwrap();
        st.screen_next(t).unwrap();
        let rec = st.visible().screened.into_iter().find(|r| r.handle == t).unwrap();
        assert_eq!(rec.membership, Membership::Test);
        assert_eq!(rec.y, None);
        assert_eq!(st.counts(), (1, 1, 1));
    }

    #[test]
    fn reveal_rules() {
        let ds = toy(&[-1.0, -2.0, 1.0, 2.0], &[1.0, -1.0]);
        let mut st = ScreeningState::init(&ds, 0, 0.1, 3).unwrap();
        let pool: Vec<Handle> = st.visible().anonymous_pool.iter().map(|p| p.handle).collect();
        let t = pool.iter().copied().find(|&h| st.truth(h).unwrap().membership == Membership::Test).unwrap();
        let l = pool.iter().copied().find(|&h| st.truth(h).unwrap().membership == Membership::Labeled).unwrap();
        assert_eq!(st.reveal_label(t, 1.0), Err(EngineError::NotScreened(t)));
        st.screen_next(t).unwrap();
        st.screen_next(l).unwrap();
        assert_eq!(st.reveal_label(l, 1.0), Err(EngineError::NotTest(l)));
        let before = st.counts();
        st.reveal_label(t, 0.7).unwrap();
        assert_eq!(st.counts(), before);
        let rec = st.visible().screened.into_iter().find(|r| r.handle == t).unwrap();
        assert_eq!(rec.y, Some(0.7));
        assert_eq!(st.reveal_label(t, 0.7), Err(EngineError::AlreadyRevealed(t)));
    }

    #[test]
    fn stop_rule_boundary() {
        // n=1, k=0, m=1: estimate = 1/2 * (1 + |N-|) / max(|P|,1)
        let ds = toy(&[1.0], &[1.0]);
        let mut st = ScreeningState::init(&ds, 0, 0.5, 0).unwrap();
        assert_eq!(st.fdp_estimate(), 0.5);
        assert!(st.check_stop());
        assert_eq!(st.status(), Status::Stopped);
        let r = st.result().unwrap();
        assert_eq!(r.selected, vec![0]);
        assert_eq!(st.screen_next(Handle(1)), Err(EngineError::Finished));

        let mut st = ScreeningState::init(&ds, 0, 0.49, 0).unwrap();
        assert!(!st.check_stop());
    }

    #[test]
    fn exhaustion_gives_empty_selection_at_full_length() {
        let ds = toy(&[-1.0, 2.0, -3.0, 0.5], &[1.0, -1.0, 2.0]);
        let r = run(&ds, 1, 0.0, 4, &mut FirstInPool, None).unwrap();
        assert!(r.selected.is_empty());
        assert!(r.exhausted);
        assert_eq!(r.stopping_step, Some(7));
    }

    #[test]
    fn martingale_bookkeeping() {
        let ds = toy(&[-1.0, -2.0, 1.0], &[-1.0, -2.0, -3.0]);
        let mut st = ScreeningState::init(&ds, 0, 0.1, 2).unwrap();
        assert_relative_eq!(st.oracle_martingale().unwrap(), 3.0 / 3.0);
        let t = st.visible().anonymous_pool.iter().map(|p| p.handle).find(|&h| st.truth(h).unwrap().membership == Membership::Test).unwrap();
        st.screen_next(t).unwrap();
        assert_relative_eq!(st.oracle_martingale().unwrap(), 2.0 / 3.0);

        let ds = toy(&[-1.0], &[1.0, 2.0]);
        let st = ScreeningState::init(&ds, 0, 0.1, 2).unwrap();
        assert_eq!(st.oracle_martingale().unwrap(), 0.0);

        let hidden = Dataset::new(
            vec![Sample::new(vec![0.0], Some(1.0), PropertySet::at_most(0.0))],
            vec![Sample::new(vec![0.0], None, PropertySet::at_most(0.0))],
        )
        .unwrap();
        let st = ScreeningState::init(&hidden, 0, 0.1, 2).unwrap();
        assert_eq!(st.oracle_martingale(), Err(EngineError::NoOracle));
    }

    #[test]
    fn pool_serialization_has_no_hidden_fields() {
        let ds = toy(&[-1.0, -2.0, 1.0, 2.0], &[1.0, -1.0]);
        let st = ScreeningState::init(&ds, 1, 0.1, 3).unwrap();
        let v = st.visible();
        for p in &v.anonymous_pool {
            let json = serde_json::to_value(p).unwrap();
            let keys: Vec<&String> = json.as_object().unwrap().keys().collect();
            assert_eq!(keys, vec!["handle", "x"]);
        }
        let text = serde_json::to_string(&v.anonymous_pool).unwrap();
        assert!(!text.contains("membership") && !text.contains("\"y\""));
    }

    #[test]
    fn reveal_hook_runs_after_each_test_screen() {
        let ds = toy(&[-1.0, -2.0, -1.5, 2.0], &[1.0, -1.0, -0.5]);
        let mut seen = Vec::new();
        let mut hook = |u: ScreenedUnit| {
            seen.push(u.test_index);
            Some(-9.0)
        };
        let r = run(&ds, 1, 0.05, 11, &mut FirstInPool, Some(&mut hook)).unwrap();
        let reveals = r.audit.iter().filter(|e| matches!(e.event, AuditEvent::LabelRevealed { .. })).count();
        assert_eq!(reveals, seen.len());
        assert!(!seen.is_empty());
    }

    #[test]
    fn run_terminates_within_budget() {
        let ds = toy(&[-1.0, -2.0, 1.0, 2.0, 0.3, -0.2], &[1.0, -1.0, 0.4, -2.0]);
        for seed in 0..20 {
            let r = run(&ds, 2, 0.2, seed, &mut FirstInPool, None).unwrap();
            let t = r.stopping_step.unwrap();
            assert!(t >= 2 && t <= 10);
            let last = r.final_fdp_estimate().unwrap();
            if !r.exhausted {
                assert!(last <= 0.2);
            } else {
                assert!(r.selected.is_empty());
            }
        }
    }
}
