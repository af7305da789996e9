//! Ordering policies. Each policy scores the anonymous pool from a
//! [`FiltrationView`] and screens the lowest-scoring unit next, so the most
//! promising units stay unscreened and end up selected. Scores are refreshed
//! every `L` screenings; ties go to the earlier pool entry.
//!
//! Spec grammar:
//!
//! ```text
//! static:<learner>
//! refit:<learner>[L=10]
//! aug:<learner>[L=10]
//! select:(<learner>,<learner>,...)[L=20,K=2]
//! div:<learner>[lambda=0.3,kernel=rbf(5),mode=cf|qp,L=10]
//! adv:<learner>[L=10]
//! random
//! switch:(<policy>,<policy>,...)
//! ```
//!
//! Policy keys (`L`, `K`, `lambda`, `kernel`, `mode=cf|qp`, `nonnulls`) may
//! share a bracket group with learner keys; with two groups the second holds
//! the policy keys.

use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::sync::Arc;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::conformal::{bh, conformal_pvalues, promise, training_target, CalibrationRecord};
use crate::data::{PropertySet, SimilarityKernel};
use crate::divopt::{self, DivoptError, KernelPoint, QpOptions};
use crate::engine::{FiltrationView, Handle, Membership, OrderingPolicy};
use crate::learners::{self, split_params, split_top_level, LearnerError, LearnerSpec, Mode, Predictor, TrainingExample};
use crate::result::AuditEvent;
use crate::rng;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PolicyError {
    #[error("the anonymous pool is empty")]
    EmptyPool,
    #[error("no labeled training data in view")]
    NoTrainingData,
    #[error("{have} labeled samples cannot fill {folds} folds")]
    FewerThanFolds { have: usize, folds: usize },
    #[error(transparent)]
    Learner(#[from] LearnerError),
    #[error(transparent)]
    Divopt(#[from] DivoptError),
    #[error("invalid policy: {0}")]
    Config(String),
    #[error("cannot parse policy spec: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiversityMode {
    ClosedForm,
    Qp,
}

#[derive(Debug, Clone, PartialEq)]
pub enum PolicyKind {
    /// One fit on the training reserve; reproduces conformal selection.
    Static { learner: LearnerSpec },
    Refit { learner: LearnerSpec, period: usize },
    /// Refit that also trains on screened test units whose labels were revealed.
    AugmentedRefit { learner: LearnerSpec, period: usize },
    /// Cross-validated choice among candidates by mean conformal selection size.
    ModelSelect { candidates: Vec<LearnerSpec>, period: usize, folds: usize },
    Diversity { learner: LearnerSpec, lambda: f64, kernel: SimilarityKernel, mode: DiversityMode, period: usize },
    /// Screens the most promising units first.
    Adversarial { learner: LearnerSpec, period: usize },
    Random,
    /// Picks one of its members uniformly at random at every step.
    Switch { members: Vec<PolicyConfig> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyConfig {
    pub kind: PolicyKind,
    /// Also train on the unscreened non-null labeled units, which every view
    /// shows in full. Ignored by the static policy.
    pub use_revealed_nonnulls: bool,
    pub seed: u64,
}

impl PolicyConfig {
    pub fn new(kind: PolicyKind) -> Self {
        Self { kind, use_revealed_nonnulls: true, seed: 0 }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        if let PolicyKind::Switch { members } = &mut self.kind {
            for (i, m) in members.iter_mut().enumerate() {
                *m = m.clone().with_seed(rng::derive_seed(seed, &[i as u64]));
            }
        }
        self
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            PolicyKind::Static { .. } => "static",
            PolicyKind::Refit { .. } => "refit",
            PolicyKind::AugmentedRefit { .. } => "aug",
            PolicyKind::ModelSelect { .. } => "select",
            PolicyKind::Diversity { .. } => "div",
            PolicyKind::Adversarial { .. } => "adv",
            PolicyKind::Random => "random",
            PolicyKind::Switch { .. } => "switch",
        }
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        let bad = |m: &str| Err(PolicyError::Config(m.to_string()));
        match &self.kind {
            PolicyKind::Refit { period, .. }
            | PolicyKind::AugmentedRefit { period, .. }
            | PolicyKind::Adversarial { period, .. }
                if *period == 0 =>
            {
                bad("L must be >= 1")
            }
            PolicyKind::ModelSelect { candidates, period, folds } => {
                if *period == 0 || *folds < 2 || candidates.len() < 2 {
                    bad("model selection needs L >= 1, K >= 2 and at least two candidates")
                } else {
                    Ok(())
                }
            }
            PolicyKind::Diversity { lambda, period, .. } => {
                if *period == 0 || !(0.0..=1.0).contains(lambda) {
                    bad("diversity needs L >= 1 and lambda in [0, 1]")
                } else {
                    Ok(())
                }
            }
            PolicyKind::Switch { members } => {
                if members.is_empty() {
                    return bad("switch needs at least one member");
                }
                members.iter().try_for_each(|m| m.validate())
            }
            _ => Ok(()),
        }
    }

    /// The learner used for scoring, if the policy has exactly one.
    pub fn learner(&self) -> Option<&LearnerSpec> {
        match &self.kind {
            PolicyKind::Static { learner }
            | PolicyKind::Refit { learner, .. }
            | PolicyKind::AugmentedRefit { learner, .. }
            | PolicyKind::Diversity { learner, .. }
            | PolicyKind::Adversarial { learner, .. } => Some(learner),
            _ => None,
        }
    }

    pub fn build(&self) -> Result<Policy, PolicyError> {
        self.validate()?;
        let members = match &self.kind {
            PolicyKind::Switch { members } => members.iter().map(|m| m.build()).collect::<Result<_, _>>()?,
            _ => Vec::new(),
        };
        Ok(Policy {
            config: self.clone(),
            predictor: None,
            scores: BTreeMap::new(),
            last_update: None,
            members,
            current_member: None,
            audit: Vec::new(),
            last_training: Vec::new(),
        })
    }
}

fn write_params(f: &mut fmt::Formatter<'_>, params: &[String]) -> fmt::Result {
    if params.is_empty() {
        Ok(())
    } else {
        write!(f, "[{}]", params.join(","))
    }
}

impl fmt::Display for PolicyConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut extra = Vec::new();
        let learned = !matches!(self.kind, PolicyKind::Static { .. } | PolicyKind::Random | PolicyKind::Switch { .. });
        if learned && !self.use_revealed_nonnulls {
            extra.push("nonnulls=false".to_string());
        }
        match &self.kind {
            PolicyKind::Static { learner } => {
                write!(f, "static:{learner}")?;
                write_params(f, &extra)
            }
            PolicyKind::Refit { learner, period } | PolicyKind::AugmentedRefit { learner, period } | PolicyKind::Adversarial { learner, period } => {
                extra.insert(0, format!("L={period}"));
                write!(f, "{}:{learner}", self.name())?;
                write_params(f, &extra)
            }
            PolicyKind::ModelSelect { candidates, period, folds } => {
                let c: Vec<String> = candidates.iter().map(|c| c.to_string()).collect();
                extra.splice(0..0, [format!("L={period}"), format!("K={folds}")]);
                write!(f, "select:({})", c.join(","))?;
                write_params(f, &extra)
            }
            PolicyKind::Diversity { learner, lambda, kernel, mode, period } => {
                let mode = match mode {
                    DiversityMode::ClosedForm => "cf",
                    DiversityMode::Qp => "qp",
                };
                extra.splice(0..0, [format!("lambda={lambda}"), format!("kernel={kernel}"), format!("mode={mode}"), format!("L={period}")]);
                write!(f, "div:{learner}")?;
                write_params(f, &extra)
            }
            PolicyKind::Random => f.write_str("random"),
            PolicyKind::Switch { members } => {
                let m: Vec<String> = members.iter().map(|c| c.to_string()).collect();
                write!(f, "switch:({})", m.join(","))
            }
        }
    }
}

fn is_policy_key(k: &str, v: &str) -> bool {
    matches!(k, "L" | "K" | "lambda" | "kernel" | "nonnulls") || (k == "mode" && matches!(v, "cf" | "qp" | "closed_form"))
}

/// Splits `name[..][..]` into the learner text and the policy key/values.
fn learner_and_params(s: &str) -> Result<(String, Vec<(String, String)>), PolicyError> {
    let s = s.trim();
    let groups: Vec<&str> = {
        let mut out = Vec::new();
        let mut depth = 0i32;
        let mut start = None;
        for (i, c) in s.char_indices() {
            match c {
                '[' | '(' => {
                    if depth == 0 && c == '[' {
                        start = Some(i);
                    }
                    depth += 1;
                }
                ']' | ')' => {
                    depth -= 1;
                    if depth == 0 && c == ']' {
                        out.push(&s[start.take().unwrap_or(i)..=i]);
                    }
                }
                _ => {}
            }
        }
        if depth != 0 {
            return Err(PolicyError::Parse(format!("unbalanced brackets in {s:?}")));
        }
        out
    };
    let name = s.split('[').next().unwrap_or("").trim();
    let parse_group = |g: &str| -> Result<Vec<(String, String)>, PolicyError> {
        let text = format!("x{g}");
        let (_, kv) = split_params(&text).map_err(PolicyError::Parse)?;
        Ok(kv.into_iter().map(|(k, v)| (k.to_string(), v.to_string())).collect())
    };
    let (learner_kv, policy_kv) = match groups.len() {
        0 => (Vec::new(), Vec::new()),
        1 => parse_group(groups[0])?.into_iter().partition(|(k, v)| !is_policy_key(k, v)),
        2 => (parse_group(groups[0])?, parse_group(groups[1])?),
        _ => return Err(PolicyError::Parse(format!("too many bracket groups in {s:?}"))),
    };
    let learner = if learner_kv.is_empty() {
        name.to_string()
    } else {
        let kv: Vec<String> = learner_kv.iter().map(|(k, v)| format!("{k}={v}")).collect();
        format!("{name}[{}]", kv.join(","))
    };
    Ok((learner, policy_kv))
}

fn parse_learner(s: &str) -> Result<LearnerSpec, PolicyError> {
    s.parse().map_err(|e: LearnerError| PolicyError::Parse(e.to_string()))
}

fn num<T: FromStr>(k: &str, v: &str) -> Result<T, PolicyError> {
    v.parse().map_err(|_| PolicyError::Parse(format!("{k}={v}")))
}

/// `(a,b,..)rest` -> (`[a, b, ..]`, `rest`).
fn paren_list(s: &str) -> Result<(Vec<String>, &str), PolicyError> {
    let s = s.trim();
    let body = s.strip_prefix('(').ok_or_else(|| PolicyError::Parse(format!("expected '(' in {s:?}")))?;
    let mut depth = 1i32;
    for (i, c) in body.char_indices() {
        match c {
            '(' | '[' => depth += 1,
            ')' | ']' => {
                depth -= 1;
                if depth == 0 {
                    let items = split_top_level(&body[..i], ',').into_iter().map(|t| t.trim().to_string()).filter(|t| !t.is_empty()).collect();
                    return Ok((items, &body[i + 1..]));
                }
            }
            _ => {}
        }
    }
    Err(PolicyError::Parse(format!("unbalanced parentheses in {s:?}")))
}

impl FromStr for PolicyConfig {
    type Err = PolicyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let (head, rest) = s.split_once(':').unwrap_or((s, ""));
        let head_name = head.split('[').next().unwrap_or("").trim();
        let (kind, kv) = match head_name {
            "random" => {
                let (_, kv) = learner_and_params(&format!("x{}", &head[head_name.len()..]))?;
                (PolicyKind::Random, kv)
            }
            "select" | "switch" => {
                let (items, tail) = paren_list(rest)?;
                let (_, kv) = learner_and_params(&format!("x{tail}"))?;
                if head_name == "select" {
                    let candidates = items.iter().map(|i| parse_learner(i)).collect::<Result<_, _>>()?;
                    (PolicyKind::ModelSelect { candidates, period: 20, folds: 2 }, kv)
                } else {
                    let members = items.iter().map(|i| i.parse()).collect::<Result<_, _>>()?;
                    (PolicyKind::Switch { members }, kv)
                }
            }
            "static" | "refit" | "aug" | "div" | "adv" => {
                if rest.trim().is_empty() {
                    return Err(PolicyError::Parse(format!("{head_name} needs a learner, e.g. {head_name}:forest")));
                }
                let (l, kv) = learner_and_params(rest)?;
                let learner = parse_learner(&l)?;
                let kind = match head_name {
                    "static" => PolicyKind::Static { learner },
                    "refit" => PolicyKind::Refit { learner, period: 10 },
                    "aug" => PolicyKind::AugmentedRefit { learner, period: 10 },
                    "adv" => PolicyKind::Adversarial { learner, period: 10 },
                    _ => PolicyKind::Diversity {
                        learner,
                        lambda: 0.3,
                        kernel: SimilarityKernel::Rbf { sigma0: 5.0 },
                        mode: DiversityMode::ClosedForm,
                        period: 10,
                    },
                };
                (kind, kv)
            }
            other => return Err(PolicyError::Parse(format!("unknown policy {other:?}"))),
        };
        let mut cfg = PolicyConfig::new(kind);
        for (k, v) in kv {
            match (&mut cfg.kind, k.as_str()) {
                (_, "nonnulls") => cfg.use_revealed_nonnulls = num(&k, &v)?,
                (
                    PolicyKind::Refit { period, .. }
                    | PolicyKind::AugmentedRefit { period, .. }
                    | PolicyKind::Adversarial { period, .. }
                    | PolicyKind::ModelSelect { period, .. }
                    | PolicyKind::Diversity { period, .. },
                    "L",
                ) => *period = num(&k, &v)?,
                (PolicyKind::ModelSelect { folds, .. }, "K") => *folds = num(&k, &v)?,
                (PolicyKind::Diversity { lambda, .. }, "lambda") => *lambda = num(&k, &v)?,
                (PolicyKind::Diversity { kernel, .. }, "kernel") => *kernel = v.parse().map_err(PolicyError::Parse)?,
                (PolicyKind::Diversity { mode, .. }, "mode") => {
                    *mode = match v.as_str() {
                        "cf" | "closed_form" => DiversityMode::ClosedForm,
                        "qp" => DiversityMode::Qp,
                        _ => return Err(PolicyError::Parse(format!("mode={v}"))),
                    }
                }
                _ => return Err(PolicyError::Parse(format!("unknown key {k:?} for {head_name}"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl Serialize for PolicyConfig {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for PolicyConfig {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A labeled unit visible in a view.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledUnit {
    pub x: Arc<[f64]>,
    pub y: f64,
    pub property: PropertySet,
}

impl LabeledUnit {
    pub fn example(&self, mode: Mode) -> TrainingExample {
        TrainingExample { x: self.x.clone(), target: training_target(mode, self.y, &self.property) }
    }

    pub fn is_null(&self) -> bool {
        self.property.contains(self.y)
    }
}

/// Labeled units of a view: screened labeled units in screening order, then
/// (optionally) revealed screened test units and the unscreened non-null
/// labeled units.
pub fn labeled_units(view: &FiltrationView, augmented: bool, nonnulls: bool) -> Vec<LabeledUnit> {
    let mut out: Vec<LabeledUnit> = view
        .screened
        .iter()
        .filter(|r| r.membership == Membership::Labeled || augmented)
        .filter_map(|r| r.y.map(|y| LabeledUnit { x: r.x.clone(), y, property: r.property }))
        .collect();
    if nonnulls {
        out.extend(view.revealed_nonnull_labeled.iter().map(|r| LabeledUnit { x: r.x.clone(), y: r.y, property: r.property }));
    }
    out
}

/// [`labeled_units`] as training examples for a learner in `mode`.
pub fn training_set(view: &FiltrationView, mode: Mode, augmented: bool, nonnulls: bool) -> Vec<TrainingExample> {
    labeled_units(view, augmented, nonnulls).iter().map(|u| u.example(mode)).collect()
}

/// A live policy: its configuration plus the cached model and pool scores.
#[derive(Debug, Clone)]
pub struct Policy {
    config: PolicyConfig,
    predictor: Option<Predictor>,
    scores: BTreeMap<Handle, f64>,
    last_update: Option<usize>,
    members: Vec<Policy>,
    current_member: Option<usize>,
    audit: Vec<AuditEvent>,
    last_training: Vec<TrainingExample>,
}

impl Policy {
    pub fn config(&self) -> &PolicyConfig {
        &self.config
    }

    /// Current pool scores (lower is screened sooner).
    pub fn scores(&self) -> &BTreeMap<Handle, f64> {
        &self.scores
    }

    pub fn predictor(&self) -> Option<&Predictor> {
        self.predictor.as_ref()
    }

    /// Training set of the latest fit.
    pub fn last_training_set(&self) -> &[TrainingExample] {
        &self.last_training
    }

    fn period(&self) -> Option<usize> {
        match &self.config.kind {
            PolicyKind::Static { .. } | PolicyKind::Random | PolicyKind::Switch { .. } => None,
            PolicyKind::Refit { period, .. }
            | PolicyKind::AugmentedRefit { period, .. }
            | PolicyKind::ModelSelect { period, .. }
            | PolicyKind::Diversity { period, .. }
            | PolicyKind::Adversarial { period, .. } => Some(*period),
        }
    }

    fn needs_update(&self, view: &FiltrationView) -> bool {
        let Some(last) = self.last_update else { return true };
        if view.anonymous_pool.iter().any(|e| !self.scores.contains_key(&e.handle)) {
            return true;
        }
        self.period().is_some_and(|l| view.step >= last + l)
    }

    /// Recomputes the model and the pool scores from `view`.
    pub fn update(&mut self, view: &FiltrationView) -> Result<(), PolicyError> {
        let nonnulls = self.config.use_revealed_nonnulls;
        let (scores, detail) = match self.config.kind.clone() {
            PolicyKind::Static { learner } => self.refit(view, &learner, false, false)?,
            PolicyKind::Refit { learner, .. } => self.refit(view, &learner, false, nonnulls)?,
            PolicyKind::AugmentedRefit { learner, .. } => self.refit(view, &learner, true, nonnulls)?,
            PolicyKind::Adversarial { learner, .. } => {
                let (s, d) = self.refit(view, &learner, false, nonnulls)?;
                (s.into_iter().map(|v| -v).collect(), d)
            }
            PolicyKind::ModelSelect { candidates, folds, .. } => self.model_select(view, &candidates, folds)?,
            PolicyKind::Diversity { learner, lambda, kernel, mode, .. } => {
                let (delta, d) = self.refit(view, &learner, false, nonnulls)?;
                self.diversity(view, delta, lambda, &kernel, mode, d)?
            }
            PolicyKind::Random | PolicyKind::Switch { .. } => return Ok(()),
        };
        self.scores = view.anonymous_pool.iter().map(|e| e.handle).zip(scores).collect();
        self.last_update = Some(view.step);
        self.audit.push(AuditEvent::PolicyUpdate { policy: self.config.to_string(), detail });
        Ok(())
    }

    fn refit(&mut self, view: &FiltrationView, learner: &LearnerSpec, augmented: bool, nonnulls: bool) -> Result<(Vec<f64>, String), PolicyError> {
        let data = training_set(view, learner.mode, augmented, nonnulls);
        if data.is_empty() {
            return Err(PolicyError::NoTrainingData);
        }
        let p = learners::fit(learner, &data)?;
        let scores = view.anonymous_pool.iter().map(|e| promise(&p, &e.x)).collect::<Result<Vec<_>, _>>()?;
        let detail = format!("fit {} on {} examples", learner.name(), data.len());
        self.predictor = Some(p);
        self.last_training = data;
        Ok((scores, detail))
    }

    fn model_select(&mut self, view: &FiltrationView, candidates: &[LearnerSpec], folds: usize) -> Result<(Vec<f64>, String), PolicyError> {
        let nonnulls = self.config.use_revealed_nonnulls;
        let mut means = Vec::with_capacity(candidates.len());
        let data = labeled_units(view, false, nonnulls);
        for c in candidates {
            let sizes = cv_selection_sizes(view, &data, c, folds, self.config.seed)?;
            means.push(sizes.iter().sum::<f64>() / sizes.len() as f64);
        }
        let mut best = 0;
        for (i, &m) in means.iter().enumerate() {
            if m > means[best] {
                best = i;
            }
        }
        let (scores, fit) = self.refit(view, &candidates[best], false, nonnulls)?;
        let shown: Vec<String> = means.iter().map(|m| format!("{m:.3}")).collect();
        Ok((scores, format!("chose {} (mean sizes {}); {fit}", candidates[best], shown.join(", "))))
    }

    fn diversity(
        &mut self,
        view: &FiltrationView,
        raw: Vec<f64>,
        lambda: f64,
        kernel: &SimilarityKernel,
        mode: DiversityMode,
        detail: String,
    ) -> Result<(Vec<f64>, String), PolicyError> {
        let regression = self.predictor.as_ref().is_some_and(|p| p.mode() == Mode::Regression);
        let delta = if regression { divopt::softmax(&raw) } else { raw };
        if lambda == 0.0 || delta.len() < 2 {
            return Ok((delta, detail));
        }
        let points: Vec<KernelPoint> =
            view.anonymous_pool.iter().map(|e| KernelPoint { x: &e.x, fingerprint: e.fingerprint.as_ref() }).collect();
        let problem = divopt::build_theta(&delta, &points, kernel, view.alpha, None)?;
        let solved = match mode {
            DiversityMode::ClosedForm => divopt::closed_form_xi(&problem),
            DiversityMode::Qp => divopt::qp_xi(&problem, QpOptions::default()),
        };
        let xi = match solved {
            Ok(s) => s,
            Err(DivoptError::NotConverged { last, .. }) => {
                self.audit.push(AuditEvent::Note { message: "diversity QP hit its iteration cap; using last iterate".into() });
                last
            }
            Err(DivoptError::Factorization | DivoptError::Infeasible) => {
                self.audit.push(AuditEvent::Note { message: "diversity weights unavailable; ordering by predicted probability".into() });
                return Ok((delta, detail));
            }
            Err(e) => return Err(e.into()),
        };
        if xi.degenerate {
            self.audit.push(AuditEvent::Note { message: "degenerate diversity weights; ordering by predicted probability".into() });
            return Ok((delta, detail));
        }
        let scores = xi.xi_work.iter().zip(&delta).map(|(x, d)| lambda * x + (1.0 - lambda) * d).collect();
        Ok((scores, format!("{detail}; diversity weights over {} units", delta.len())))
    }

    /// Pool handles ordered by current score (first is screened next).
    pub fn ranking(&mut self, view: &FiltrationView) -> Result<Vec<(Handle, f64)>, PolicyError> {
        if self.needs_update(view) {
            self.update(view)?;
        }
        let mut ranked: Vec<(usize, Handle, f64)> =
            view.anonymous_pool.iter().enumerate().map(|(i, e)| (i, e.handle, self.scores[&e.handle])).collect();
        ranked.sort_by(|a, b| a.2.total_cmp(&b.2).then(a.0.cmp(&b.0)));
        Ok(ranked.into_iter().map(|(_, h, s)| (h, s)).collect())
    }
}

/// Selection sizes of conformal selection with each fold as calibration and
/// the pool as test set. Folds come from a seeded shuffle of `data`.
pub fn cv_selection_sizes(
    view: &FiltrationView,
    data: &[LabeledUnit],
    learner: &LearnerSpec,
    folds: usize,
    seed: u64,
) -> Result<Vec<f64>, PolicyError> {
    if data.len() < folds {
        return Err(PolicyError::FewerThanFolds { have: data.len(), folds });
    }
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.shuffle(&mut rng::stream(seed, &[0x666f_6c64, view.step as u64]));
    let mut fold_of = alloc::vec![0usize; data.len()];
    for (pos, &i) in idx.iter().enumerate() {
        fold_of[i] = pos % folds;
    }
    let mut sizes = Vec::with_capacity(folds);
    for f in 0..folds {
        let train: Vec<TrainingExample> = (0..data.len()).filter(|&i| fold_of[i] != f).map(|i| data[i].example(learner.mode)).collect();
        let p = learners::fit(learner, &train)?;
        let cal = (0..data.len())
            .filter(|&i| fold_of[i] == f)
            .map(|i| Ok(CalibrationRecord { score: promise(&p, &data[i].x)?, is_null: data[i].is_null() }))
            .collect::<Result<Vec<_>, LearnerError>>()?;
        let test = view.anonymous_pool.iter().map(|e| promise(&p, &e.x)).collect::<Result<Vec<_>, _>>()?;
        sizes.push(bh(&conformal_pvalues(&cal, &test), view.alpha).len() as f64);
    }
    Ok(sizes)
}

/// Baseline model choice by in-sample error on the training split itself:
/// Brier score for classification, MSE for regression. First minimizer wins.
pub fn naive_select(train: &[TrainingExample], candidates: &[LearnerSpec]) -> Result<usize, PolicyError> {
    if train.is_empty() || candidates.is_empty() {
        return Err(PolicyError::NoTrainingData);
    }
    let mut best = (0, f64::INFINITY);
    for (i, c) in candidates.iter().enumerate() {
        let p = learners::fit(c, train)?;
        let mut err = 0.0;
        for e in train {
            let d = p.score(&e.x)? - e.target;
            err += d * d;
        }
        err /= train.len() as f64;
        if err < best.1 {
            best = (i, err);
        }
    }
    Ok(best.0)
}

impl OrderingPolicy for Policy {
    fn choose_next(&mut self, view: &FiltrationView) -> Result<Handle, PolicyError> {
        if view.anonymous_pool.is_empty() {
            return Err(PolicyError::EmptyPool);
        }
        match self.config.kind {
            PolicyKind::Random => {
                let mut r = rng::stream(self.config.seed, &[view.step as u64]);
                Ok(view.anonymous_pool[r.random_range(0..view.anonymous_pool.len())].handle)
            }
            PolicyKind::Switch { .. } => {
                let mut r = rng::stream(self.config.seed, &[view.step as u64]);
                let pick = r.random_range(0..self.members.len());
                if self.current_member != Some(pick) {
                    let from = self.current_member.map_or_else(|| "none".to_string(), |i| self.members[i].config.to_string());
                    self.audit.push(AuditEvent::PolicyChange { from, to: self.members[pick].config.to_string() });
                    self.current_member = Some(pick);
                }
                let member = &mut self.members[pick];
                let choice = member.choose_next(view);
                self.audit.extend(member.audit.drain(..));
                choice
            }
            _ => {
                if self.needs_update(view) {
                    self.update(view)?;
                }
                let mut best: Option<(Handle, f64)> = None;
                for e in &view.anonymous_pool {
                    let s = self.scores[&e.handle];
                    if best.is_none_or(|(_, b)| s < b) {
                        best = Some((e.handle, s));
                    }
                }
                Ok(best.expect("pool is nonempty").0)
            }
        }
    }

    fn drain_audit(&mut self) -> Vec<AuditEvent> {
        core::mem::take(&mut self.audit)
    }

    fn describe(&self) -> String {
        self.config.to_string()
    }
}

/// Boxes a configured policy for the engine driver.
pub fn boxed(config: &PolicyConfig) -> Result<Box<dyn OrderingPolicy + Send>, PolicyError> {
    Ok(Box::new(config.build()?))
}
