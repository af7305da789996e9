//! Split conformal selection: p-values against null calibration scores, the
//! Benjamini-Hochberg step, and the equivalent screening walk.
//!
//! Both entry points share the engine's seed streams: the training split is
//! the engine's training reserve for `k = reserve_size(n, train_fraction)`
//! and the walk breaks score ties by the engine's table position, so a
//! static-policy run reproduces [`cs_screen`] exactly.

use alloc::format;
use alloc::vec::Vec;

use crate::data::{Dataset, PropertySet, Sample};
use crate::engine::{fdp_estimate, shuffled_table, training_reserve, Membership};
use crate::learners::{self, LearnerError, LearnerSpec, Mode, Predictor, TrainingExample};
use crate::result::{AuditEntry, AuditEvent, SelectionResult, TrajectoryPoint};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConformalError {
    #[error("split leaves {train} training and {cal} calibration samples; both must be >= 1")]
    DegenerateSplit { train: usize, cal: usize },
    #[error("train fraction must lie in (0, 1), got {0}")]
    BadFraction(f64),
    #[error("alpha must lie in [0, 1), got {0}")]
    BadAlpha(f64),
    #[error(transparent)]
    Learner(#[from] LearnerError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationRecord {
    pub score: f64,
    pub is_null: bool,
}

/// `p_j = (1 + #{null i: score_i >= t_j}) / (|cal| + 1)`: small when the test
/// score beats most null calibration scores.
pub fn conformal_pvalues(cal: &[CalibrationRecord], test_scores: &[f64]) -> Vec<f64> {
    let mut null: Vec<f64> = cal.iter().filter(|c| c.is_null).map(|c| c.score).collect();
    null.sort_by(f64::total_cmp);
    let denom = (cal.len() + 1) as f64;
    test_scores
        .iter()
        .map(|&t| {
            let below = null.partition_point(|&s| s < t);
            (1 + null.len() - below) as f64 / denom
        })
        .collect()
}

/// Benjamini-Hochberg at level `alpha`; rejected indices in ascending order.
pub fn bh(pvalues: &[f64], alpha: f64) -> Vec<usize> {
    let m = pvalues.len();
    let mut sorted: Vec<f64> = pvalues.to_vec();
    sorted.sort_by(f64::total_cmp);
    let Some(kstar) = (1..=m).rev().find(|&k| sorted[k - 1] <= k as f64 * alpha / m as f64) else {
        return Vec::new();
    };
    let cut = sorted[kstar - 1];
    (0..m).filter(|&j| pvalues[j] <= cut).collect()
}

/// Training reserve size for a split fraction: `round(f * n)`.
pub fn reserve_size(n: usize, train_fraction: f64) -> Result<usize, ConformalError> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(ConformalError::BadFraction(train_fraction));
    }
    let k = libm::round(train_fraction * n as f64) as usize;
    if k == 0 || k >= n {
        return Err(ConformalError::DegenerateSplit { train: k, cal: n.saturating_sub(k) });
    }
    Ok(k)
}

/// Learner target for a labeled sample: the interest indicator for
/// classification, the outcome itself for regression.
pub fn training_target(mode: Mode, y: f64, property: &PropertySet) -> f64 {
    match mode {
        Mode::Classification => {
            if property.contains(y) {
                0.0
            } else {
                1.0
            }
        }
        Mode::Regression => y,
    }
}

/// Promise score of a unit: the predicted probability of interest, or the
/// predicted outcome for a regression learner (larger is more promising, so
/// regression scoring suits upper-tail interest such as `Y > c`).
pub fn promise(predictor: &Predictor, x: &[f64]) -> Result<f64, LearnerError> {
    predictor.score(x)
}

/// Fits `spec` on labeled samples in the given order.
pub fn fit_on(spec: &LearnerSpec, samples: &[&Sample]) -> Result<Predictor, LearnerError> {
    let examples: Vec<TrainingExample> = samples
        .iter()
        .map(|s| {
            let y = s.y.expect("labeled samples carry outcomes");
            TrainingExample { x: s.x.clone(), target: training_target(spec.mode, y, &s.property) }
        })
        .collect();
    learners::fit(spec, &examples)
}

struct Split {
    k: usize,
    /// Calibration labeled ids, ascending.
    cal: Vec<usize>,
    predictor: Predictor,
}

fn split_and_fit(dataset: &Dataset, train_fraction: f64, spec: &LearnerSpec, alpha: f64, seed: u64) -> Result<Split, ConformalError> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(ConformalError::BadAlpha(alpha));
    }
    let n = dataset.n();
    let k = reserve_size(n, train_fraction)?;
    let reserve = training_reserve(n, k, seed);
    let train: Vec<&Sample> = reserve.iter().map(|&i| &dataset.labeled()[i]).collect();
    let predictor = fit_on(spec, &train)?;
    let mut in_reserve = alloc::vec![false; n];
    for &i in &reserve {
        in_reserve[i] = true;
    }
    let cal = (0..n).filter(|&i| !in_reserve[i]).collect();
    Ok(Split { k, cal, predictor })
}

fn scores_of<'a>(p: &Predictor, samples: impl Iterator<Item = &'a Sample>) -> Result<Vec<f64>, LearnerError> {
    samples.map(|s| promise(p, &s.x)).collect()
}

fn entry(step: usize, event: AuditEvent) -> AuditEntry {
    AuditEntry { step, event }
}

/// Conformal selection: fit on the training split, p-values for every test
/// unit against the null calibration units, then BH at `alpha`.
pub fn cs_select(
    dataset: &Dataset,
    train_fraction: f64,
    spec: &LearnerSpec,
    alpha: f64,
    seed: u64,
) -> Result<SelectionResult, ConformalError> {
    let split = split_and_fit(dataset, train_fraction, spec, alpha, seed)?;
    let cal_samples = split.cal.iter().map(|&i| &dataset.labeled()[i]);
    let cal_scores = scores_of(&split.predictor, cal_samples.clone())?;
    let cal: Vec<CalibrationRecord> = cal_samples
        .zip(cal_scores)
        .map(|(s, score)| CalibrationRecord { score, is_null: s.is_null() == Some(true) })
        .collect();
    let test_scores = scores_of(&split.predictor, dataset.test().iter())?;
    let pvalues = conformal_pvalues(&cal, &test_scores);
    let selected = bh(&pvalues, alpha);
    let audit = alloc::vec![
        entry(0, AuditEvent::Init { n: dataset.n(), m: dataset.m(), k: split.k, alpha }),
        entry(0, AuditEvent::Note { message: format!("cs_select learner {spec}") }),
        entry(0, AuditEvent::PValues { values: pvalues }),
    ];
    Ok(SelectionResult { selected, stopping_step: None, exhausted: false, alpha, seed, trajectory: Vec::new(), audit })
}

/// One unit in a screening order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WalkEntry {
    pub membership: Membership,
    /// Index within its partition.
    pub original: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScreenWalk {
    pub result: SelectionResult,
    /// Every unit in screening order, training reserve first.
    pub order: Vec<WalkEntry>,
}

/// Conformal selection as screening: ranks calibration and test units
/// ascending by score (ties by table position) and screens them one by one,
/// stopping at the first step whose FDP estimate is at most `alpha`.
/// Non-null calibration units never move the estimate and are left for the
/// end, as in the engine.
pub fn cs_screen(
    dataset: &Dataset,
    train_fraction: f64,
    spec: &LearnerSpec,
    alpha: f64,
    seed: u64,
) -> Result<SelectionResult, ConformalError> {
    cs_screen_walk(dataset, train_fraction, spec, alpha, seed).map(|w| w.result)
}

pub fn cs_screen_walk(
    dataset: &Dataset,
    train_fraction: f64,
    spec: &LearnerSpec,
    alpha: f64,
    seed: u64,
) -> Result<ScreenWalk, ConformalError> {
    let split = split_and_fit(dataset, train_fraction, spec, alpha, seed)?;
    let (n, m, k) = (dataset.n(), dataset.m(), split.k);
    let mut position = alloc::vec![0usize; n + m];
    for (pos, &id) in shuffled_table(n, m, seed).iter().enumerate() {
        position[id] = pos;
    }

    let mut order: Vec<WalkEntry> =
        training_reserve(n, k, seed).into_iter().map(|i| WalkEntry { membership: Membership::Labeled, original: i }).collect();
    // (score, table position, entry) for the screenable units
    let mut ranked = Vec::new();
    let mut nonnull_cal = Vec::new();
    let mut null_left = 0usize;
    for &i in &split.cal {
        let s = &dataset.labeled()[i];
        let e = WalkEntry { membership: Membership::Labeled, original: i };
        if s.is_null() == Some(true) {
            null_left += 1;
            ranked.push((promise(&split.predictor, &s.x)?, position[i], e));
        } else {
            nonnull_cal.push((position[i], e));
        }
    }
    for (j, s) in dataset.test().iter().enumerate() {
        let e = WalkEntry { membership: Membership::Test, original: j };
        ranked.push((promise(&split.predictor, &s.x)?, position[n + j], e));
    }
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

    let mut test_left = m;
    let mut trajectory = Vec::new();
    let mut audit = alloc::vec![
        entry(0, AuditEvent::Init { n, m, k, alpha }),
        entry(k, AuditEvent::Note { message: format!("cs_screen learner {spec}") }),
    ];
    let mut next = 0;
    let (stopped, selected) = loop {
        let step = order.len();
        let fdp = fdp_estimate(n, m, k, null_left, test_left);
        trajectory.push(TrajectoryPoint { step, fdp_estimate: fdp });
        if fdp <= alpha {
            audit.push(entry(step, AuditEvent::Stopped { fdp_estimate: fdp }));
            let mut sel: Vec<usize> = ranked[next..]
                .iter()
                .filter(|r| r.2.membership == Membership::Test)
                .map(|r| r.2.original)
                .collect();
            sel.sort_unstable();
            break (true, sel);
        }
        let Some(&(_, _, e)) = ranked.get(next) else {
            nonnull_cal.sort_unstable_by_key(|p| p.0);
            order.extend(nonnull_cal.iter().map(|p| p.1));
            audit.push(entry(order.len(), AuditEvent::Exhausted));
            break (false, Vec::new());
        };
        next += 1;
        match e.membership {
            Membership::Test => test_left -= 1,
            Membership::Labeled => null_left -= 1,
        }
        order.push(e);
    };
    let result = SelectionResult {
        selected,
        stopping_step: Some(order.len()),
        exhausted: !stopped,
        alpha,
        seed,
        trajectory,
        audit,
    };
    Ok(ScreenWalk { result, order })
}
