//! Monte Carlo harness: grids of simulation cells, replicated runs of each
//! arm on shared datasets, and metric estimation.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use acs_core::conformal::{cs_screen, cs_select, ConformalError};
use acs_core::data::{similarity, Dataset, KernelError, SimilarityKernel};
use acs_core::engine::{self, RunError, ScreenedUnit};
use acs_core::learners::{LearnerError, LearnerSpec};
use acs_core::policies::{PolicyConfig, PolicyError};
use acs_core::result::SelectionResult;
use acs_core::rng;
use acs_core::sim::{self, SimConfig, SimError};
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

const STREAM_DATA: u64 = 0x6461_7461;
const STREAM_RUN: u64 = 0x7275_6e73;
const STREAM_POLICY: u64 = 0x706f_6c69;

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("invalid grid: {0}")]
    Grid(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Conformal(#[from] ConformalError),
    #[error(transparent)]
    Run(#[from] RunError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("cannot parse grid file: {0}")]
    Toml(#[from] toml::de::Error),
}

/// How an arm selects.
#[derive(Debug, Clone, PartialEq)]
pub enum Method {
    /// Split conformal p-values with BH.
    Cs(LearnerSpec),
    /// The screening form of conformal selection.
    CsScreen(LearnerSpec),
    Acs(PolicyConfig),
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Cs(l) => write!(f, "cs:{l}"),
            Method::CsScreen(l) => write!(f, "cs_screen:{l}"),
            Method::Acs(p) => write!(f, "{p}"),
        }
    }
}

impl FromStr for Method {
    type Err = PolicyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let learner = |l: &str| l.parse::<LearnerSpec>().map_err(|e: LearnerError| PolicyError::Parse(e.to_string()));
        if let Some(l) = s.strip_prefix("cs_screen:") {
            Ok(Method::CsScreen(learner(l)?))
        } else if let Some(l) = s.strip_prefix("cs:") {
            Ok(Method::Cs(learner(l)?))
        } else {
            Ok(Method::Acs(s.strip_prefix("acs:").unwrap_or(s).parse()?))
        }
    }
}

impl Serialize for Method {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Method {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Arm {
    pub name: String,
    pub method: Method,
}

impl Arm {
    pub fn new(name: impl Into<String>, method: &str) -> Result<Self, PolicyError> {
        Ok(Self { name: name.into(), method: method.parse()? })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimTemplate {
    pub setting: u8,
    pub m: usize,
}

fn default_kernel() -> SimilarityKernel {
    SimilarityKernel::Rbf { sigma0: 5.0 }
}

fn default_train_fraction() -> f64 {
    0.5
}

/// A full experiment. Each (sigma, n) pair is a cell; every cell draws a
/// labeled pool of `2n` and `m` test units per replication, ACS arms use
/// `k = n` and CS arms `train_fraction`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentGrid {
    pub sim: SimTemplate,
    pub sigmas: Vec<f64>,
    pub ns: Vec<usize>,
    pub alpha: f64,
    pub reps: usize,
    pub arms: Vec<Arm>,
    /// Reveal the outcome of every screened test unit to ACS arms.
    #[serde(default)]
    pub reveal_labels: bool,
    #[serde(default = "default_kernel")]
    pub kernel: SimilarityKernel,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
}

impl ExperimentGrid {
    /// A single cell.
    pub fn single(setting: u8, n: usize, m: usize, sigma: f64, alpha: f64, reps: usize, arms: Vec<Arm>) -> Self {
        Self {
            sim: SimTemplate { setting, m },
            sigmas: vec![sigma],
            ns: vec![n],
            alpha,
            reps,
            arms,
            reveal_labels: false,
            kernel: default_kernel(),
            train_fraction: default_train_fraction(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, BenchError> {
        let g: Self = toml::from_str(text)?;
        g.validate()?;
        Ok(g)
    }

    pub fn load(path: &Path) -> Result<Self, BenchError> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        let bad = |m: String| Err(BenchError::Grid(m));
        if self.reps == 0 {
            return bad("reps must be at least 1".into());
        }
        if self.arms.is_empty() || self.sigmas.is_empty() || self.ns.is_empty() {
            return bad("arms, sigmas and ns must be non-empty".into());
        }
        for (i, a) in self.arms.iter().enumerate() {
            if self.arms[..i].iter().any(|b| b.name == a.name) {
                return bad(format!("duplicate arm name {:?}", a.name));
            }
            if let Method::Acs(p) = &a.method {
                p.validate().map_err(|e| BenchError::Grid(e.to_string()))?;
            }
        }
        if !(0.0..1.0).contains(&self.alpha) {
            return bad(format!("alpha must lie in [0, 1), got {}", self.alpha));
        }
        if self.ns.iter().any(|&n| n < 2) || self.sim.m == 0 {
            return bad("n must be at least 2 and m positive".into());
        }
        Ok(())
    }

    /// Cells in emission order: sigma-major, then n.
    pub fn cells(&self) -> Vec<(f64, usize)> {
        self.sigmas.iter().flat_map(|&s| self.ns.iter().map(move |&n| (s, n))).collect()
    }

    /// The dataset of replication `rep` in cell `cell`; shared by all arms.
    pub fn dataset(&self, cell: usize, rep: usize, seed: u64) -> Result<Dataset, SimError> {
        let (sigma, n) = self.cells()[cell];
        sim::generate(&SimConfig {
            setting: self.sim.setting,
            n: 2 * n,
            m: self.sim.m,
            sigma,
            seed: rng::derive_seed(seed, &[STREAM_DATA, cell as u64, rep as u64]),
        })
    }
}

/// Per-replication quantities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RepOutcome {
    pub power: f64,
    pub fdp: f64,
    /// Mean pairwise similarity of correct selections, when there are two.
    pub es: Option<f64>,
    pub stopping_step: Option<usize>,
    pub selected: usize,
}

impl RepOutcome {
    /// Scores `result` against the hidden test outcomes of `dataset`.
    pub fn evaluate(result: &SelectionResult, dataset: &Dataset, kernel: &SimilarityKernel) -> Result<Self, BenchError> {
        let test = dataset.test();
        let null = |i: usize| test[i].is_null().ok_or_else(|| BenchError::Grid("test outcomes are required".into()));
        let mut nonnull_total = 0;
        for i in 0..test.len() {
            if !null(i)? {
                nonnull_total += 1;
            }
        }
        let mut correct = Vec::new();
        for &i in &result.selected {
            if !null(i)? {
                correct.push(i);
            }
        }
        let false_sel = result.selected.len() - correct.len();
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let es = if correct.len() >= 2 {
            let mut total = 0.0;
            let mut pairs = 0usize;
            for (a, &i) in correct.iter().enumerate() {
                for &j in &correct[a + 1..] {
                    total += similarity(kernel, &test[i], &test[j])?;
                    pairs += 1;
                }
            }
            Some(total / pairs as f64)
        } else {
            None
        };
        Ok(Self {
            power: ratio(correct.len(), nonnull_total),
            fdp: ratio(false_sel, result.selected.len()),
            es,
            stopping_step: result.stopping_step,
            selected: result.selected.len(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub arm: String,
    pub sigma: f64,
    pub n: usize,
    pub power_hat: f64,
    pub fdr_hat: f64,
    pub es_hat: Option<f64>,
    pub n2_count: usize,
    #[serde(rename = "mean_T")]
    pub mean_t: Option<f64>,
    pub mean_selected: f64,
}

impl MetricRow {
    /// The row with every float cut to 6 significant digits.
    pub fn rounded(&self) -> Self {
        Self {
            sigma: sig6(self.sigma),
            power_hat: sig6(self.power_hat),
            fdr_hat: sig6(self.fdr_hat),
            es_hat: self.es_hat.map(sig6),
            mean_t: self.mean_t.map(sig6),
            mean_selected: sig6(self.mean_selected),
            ..self.clone()
        }
    }
}

/// Averages replications into a row. Power and FDP use 0/0 = 0 inside each
/// replication; ES averages only replications with two correct selections.
pub fn aggregate(arm: &str, sigma: f64, n: usize, reps: &[RepOutcome]) -> MetricRow {
    let r = reps.len().max(1) as f64;
    let es: Vec<f64> = reps.iter().filter_map(|o| o.es).collect();
    let ts: Vec<f64> = reps.iter().filter_map(|o| o.stopping_step.map(|t| t as f64)).collect();
    MetricRow {
        arm: arm.to_string(),
        sigma,
        n,
        power_hat: reps.iter().map(|o| o.power).sum::<f64>() / r,
        fdr_hat: reps.iter().map(|o| o.fdp).sum::<f64>() / r,
        es_hat: (!es.is_empty()).then(|| es.iter().sum::<f64>() / es.len() as f64),
        n2_count: es.len(),
        mean_t: (!ts.is_empty()).then(|| ts.iter().sum::<f64>() / ts.len() as f64),
        mean_selected: reps.iter().map(|o| o.selected as f64).sum::<f64>() / r,
    }
}

/// Evaluates then aggregates.
pub fn metrics(
    arm: &str,
    sigma: f64,
    n: usize,
    results: &[(SelectionResult, Dataset)],
    kernel: &SimilarityKernel,
) -> Result<MetricRow, BenchError> {
    let reps = results.iter().map(|(r, d)| RepOutcome::evaluate(r, d, kernel)).collect::<Result<Vec<_>, _>>()?;
    Ok(aggregate(arm, sigma, n, &reps))
}

/// Runs one arm on one dataset.
pub fn run_method(
    method: &Method,
    dataset: &Dataset,
    k: usize,
    train_fraction: f64,
    alpha: f64,
    run_seed: u64,
    policy_seed: u64,
    reveal_labels: bool,
) -> Result<SelectionResult, BenchError> {
    Ok(match method {
        Method::Cs(l) => cs_select(dataset, train_fraction, l, alpha, run_seed)?,
        Method::CsScreen(l) => cs_screen(dataset, train_fraction, l, alpha, run_seed)?,
        Method::Acs(p) => {
            let mut policy = p.clone().with_seed(policy_seed).build().map_err(RunError::from)?;
            let mut hook = |u: ScreenedUnit| dataset.test()[u.test_index].y;
            let reveal: Option<&mut dyn FnMut(ScreenedUnit) -> Option<f64>> = if reveal_labels { Some(&mut hook) } else { None };
            engine::run(dataset, k, alpha, run_seed, &mut policy, reveal)?
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    #[default]
    Serial,
    Parallel,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub execution: Execution,
    /// Writes each replication's `SelectionResult` as JSON here.
    pub trace_dir: Option<PathBuf>,
}

/// One replication of one arm.
pub fn replicate(grid: &ExperimentGrid, cell: usize, arm: usize, rep: usize, seed: u64) -> Result<(SelectionResult, Dataset), BenchError> {
    let (_, n) = grid.cells()[cell];
    let dataset = grid.dataset(cell, rep, seed)?;
    let run_seed = rng::derive_seed(seed, &[STREAM_RUN, cell as u64, rep as u64]);
    let policy_seed = rng::derive_seed(seed, &[STREAM_POLICY, cell as u64, arm as u64, rep as u64]);
    let result = run_method(&grid.arms[arm].method, &dataset, n, grid.train_fraction, grid.alpha, run_seed, policy_seed, grid.reveal_labels)?;
    Ok((result, dataset))
}

/// Runs every (cell, arm) for `grid.reps` replications. Rows come out
/// cell-major then in arm order, and do not depend on `execution`.
pub fn run_grid(grid: &ExperimentGrid, seed: u64, options: &RunOptions) -> Result<Vec<MetricRow>, BenchError> {
    grid.validate()?;
    let cells = grid.cells();
    if let Some(dir) = &options.trace_dir {
        fs::create_dir_all(dir)?;
    }
    let jobs: Vec<(usize, usize, usize)> =
        (0..cells.len()).flat_map(|c| (0..grid.arms.len()).flat_map(move |a| (0..grid.reps).map(move |r| (c, a, r)))).collect();
    let job = |&(c, a, r): &(usize, usize, usize)| -> Result<RepOutcome, BenchError> {
        let (result, dataset) = replicate(grid, c, a, r, seed)?;
        if let Some(dir) = &options.trace_dir {
            let path = dir.join(format!("cell{c}_{}_rep{r}.json", grid.arms[a].name));
            fs::write(path, serde_json::to_vec_pretty(&result)?)?;
        }
        RepOutcome::evaluate(&result, &dataset, &grid.kernel)
    };
    let started = Instant::now();
    let outcomes: Vec<RepOutcome> = match options.execution {
        Execution::Serial => jobs.iter().map(job).collect::<Result<_, _>>()?,
        Execution::Parallel => jobs.par_iter().map(job).collect::<Result<_, _>>()?,
    };
    let rows = outcomes
        .chunks(grid.reps)
        .enumerate()
        .map(|(i, reps)| {
            let (sigma, n) = cells[i / grid.arms.len()];
            aggregate(&grid.arms[i % grid.arms.len()].name, sigma, n, reps)
        })
        .collect();
    eprintln!("grid: {} replications in {:.1?}", jobs.len(), started.elapsed());
    Ok(rows)
}

/// Outcome of the exact hypergeometric check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HypergeomReport {
    pub cases: usize,
    pub violations: usize,
    /// Smallest `m/(1+n') - E` over all cases (zero means the bound is attained).
    pub min_slack: f64,
    /// Largest slack seen.
    pub max_slack: f64,
    /// Every `kappa = m + n'` case meets the bound with equality.
    pub tight_at_full_draw: bool,
}

/// `C(a, b)` as a float; exact for the sizes used here.
fn choose(a: usize, b: usize) -> f64 {
    if b > a {
        return 0.0;
    }
    let b = b.min(a - b);
    (0..b).fold(1.0, |acc, i| acc * (a - i) as f64 / (i + 1) as f64)
}

/// `E[X / (1 + kappa - X)]` for `X ~ Hypergeom(m + n', m, kappa)` by
/// summing the exact PMF.
pub fn hypergeom_ratio_expectation(m: usize, n_prime: usize, kappa: usize) -> f64 {
    let total = choose(m + n_prime, kappa);
    let lo = kappa.saturating_sub(n_prime);
    let hi = kappa.min(m);
    (lo..=hi)
        .map(|x| choose(m, x) * choose(n_prime, kappa - x) / total * x as f64 / (1 + kappa - x) as f64)
        .sum()
}

/// Checks `E[X/(1+kappa-X)] <= m/(1+n')` for all `m <= m_max`,
/// `n' <= n_max` and `kappa <= m + n'`.
pub fn hypergeom_bound_check(m_max: usize, n_max: usize) -> HypergeomReport {
    let mut report = HypergeomReport { cases: 0, violations: 0, min_slack: f64::INFINITY, max_slack: 0.0, tight_at_full_draw: true };
    for m in 1..=m_max {
        for np in 1..=n_max {
            let bound = m as f64 / (1 + np) as f64;
            for kappa in 0..=m + np {
                let e = hypergeom_ratio_expectation(m, np, kappa);
                let slack = bound - e;
                report.cases += 1;
                if slack < -1e-12 * bound {
                    report.violations += 1;
                }
                report.min_slack = report.min_slack.min(slack);
                report.max_slack = report.max_slack.max(slack);
                if kappa == m + np && slack.abs() > 1e-12 * bound {
                    report.tight_at_full_draw = false;
                }
            }
        }
    }
    report
}

/// Rounds to 6 significant digits.
pub fn sig6(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    format!("{x:.5e}").parse().unwrap_or(x)
}

fn fmt_float(x: f64) -> String {
    let x = sig6(x);
    format!("{x}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Json,
}

impl Format {
    /// From a file extension; CSV unless it ends in `.json`.
    pub fn for_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") => Format::Json,
            _ => Format::Csv,
        }
    }
}

pub const CSV_COLUMNS: [&str; 9] = ["arm", "sigma", "n", "power_hat", "fdr_hat", "es_hat", "n2_count", "mean_T", "mean_selected"];

/// Writes rows in long format.
pub fn emit_to(rows: &[MetricRow], out: impl Write, format: Format) -> Result<(), BenchError> {
    match format {
        Format::Csv => {
            let mut w = csv::Writer::from_writer(out);
            w.write_record(CSV_COLUMNS)?;
            let opt = |v: Option<f64>| v.map(fmt_float).unwrap_or_default();
            for r in rows {
                w.write_record([
                    r.arm.clone(),
                    fmt_float(r.sigma),
                    r.n.to_string(),
                    fmt_float(r.power_hat),
                    fmt_float(r.fdr_hat),
                    opt(r.es_hat),
                    r.n2_count.to_string(),
                    opt(r.mean_t),
                    fmt_float(r.mean_selected),
                ])?;
            }
            w.flush()?;
        }
        Format::Json => {
            let rounded: Vec<MetricRow> = rows.iter().map(MetricRow::rounded).collect();
            let mut out = out;
            serde_json::to_writer_pretty(&mut out, &rounded)?;
            out.write_all(b"\n")?;
        }
    }
    Ok(())
}

pub fn emit(rows: &[MetricRow], path: &Path, format: Format) -> Result<(), BenchError> {
    let mut buf = Vec::new();
    emit_to(rows, &mut buf, format)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_json(path: &Path) -> Result<Vec<MetricRow>, BenchError> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use acs_core::data::{PropertySet, Sample};
    use std::vec;

    fn toy_dataset(test_y: &[f64], xs: &[f64]) -> Dataset {
        let labeled = vec![Sample::new(vec![0.0], Some(1.0), PropertySet::at_most(0.0)); 2];
        let test = test_y.iter().zip(xs).map(|(&y, &x)| Sample::new(vec![x], Some(y), PropertySet::at_most(0.0))).collect();
        Dataset::new(labeled, test).unwrap()
    }

    fn result(selected: Vec<usize>) -> SelectionResult {
        SelectionResult { selected, stopping_step: Some(3), exhausted: false, alpha: 0.1, seed: 0, trajectory: vec![], audit: vec![] }
    }

    #[test]
    fn perfect_and_empty_selection() {
        let ds = toy_dataset(&[1.0, -1.0, 2.0], &[0.0, 0.0, 0.0]);
        let k = default_kernel();
        let o = RepOutcome::evaluate(&result(vec![0, 2]), &ds, &k).unwrap();
        assert_eq!((o.power, o.fdp), (1.0, 0.0));
        let o = RepOutcome::evaluate(&result(vec![]), &ds, &k).unwrap();
        assert_eq!((o.power, o.fdp, o.es), (0.0, 0.0, None));
        let o = RepOutcome::evaluate(&result(vec![0, 1]), &ds, &k).unwrap();
        assert_eq!((o.power, o.fdp), (0.5, 0.5));
    }

    #[test]
    fn single_pair_similarity() {
        // rbf(1) with squared distance ln 2 gives exactly 0.5
        let d = std::f64::consts::LN_2.sqrt();
        let ds = toy_dataset(&[1.0, 1.0], &[0.0, d]);
        let row = metrics("a", 0.1, 1, &[(result(vec![0, 1]), ds)], &SimilarityKernel::Rbf { sigma0: 1.0 }).unwrap();
        approx::assert_relative_eq!(row.es_hat.unwrap(), 0.5, epsilon = 1e-12);
        assert_eq!(row.n2_count, 1);
    }

    #[test]
    fn zero_nonnulls_count_as_zero_power() {
        let ds = toy_dataset(&[-1.0, -2.0], &[0.0, 0.0]);
        let o = RepOutcome::evaluate(&result(vec![0]), &ds, &default_kernel()).unwrap();
        assert_eq!((o.power, o.fdp), (0.0, 1.0));
    }

    #[test]
    fn hypergeometric_examples() {
        approx::assert_relative_eq!(hypergeom_ratio_expectation(2, 1, 1), 2.0 / 3.0, epsilon = 1e-15);
        assert_eq!(hypergeom_ratio_expectation(4, 3, 0), 0.0);
        approx::assert_relative_eq!(hypergeom_ratio_expectation(5, 3, 8), 5.0 / 4.0, epsilon = 1e-15);
        let r = hypergeom_bound_check(6, 6);
        assert_eq!(r.violations, 0);
        assert!(r.tight_at_full_draw);
    }

    #[test]
    fn sig6_rounding() {
        assert_eq!(sig6(0.123456789), 0.123457);
        assert_eq!(sig6(123456789.0), 123457000.0);
        assert_eq!(sig6(0.0), 0.0);
        assert_eq!(fmt_float(0.1), "0.1");
        assert_eq!(sig6(sig6(2.0 / 3.0)), sig6(2.0 / 3.0));
    }

    #[test]
    fn method_grammar() {
        for s in ["cs:forest", "cs_screen:knn[k=3,mode=reg]", "refit:forest[trees=10][L=5]", "random"] {
            let m: Method = s.parse().unwrap();
            assert_eq!(m, m.to_string().parse().unwrap());
        }
        assert_eq!("acs:static:knn".parse::<Method>().unwrap(), "static:knn".parse().unwrap());
        assert!("cs:svm".parse::<Method>().is_err());
    }

    #[test]
    fn grid_validation() {
        let arms = vec![Arm::new("a", "refit:logistic").unwrap(), Arm::new("a", "cs:logistic").unwrap()];
        assert!(ExperimentGrid::single(1, 10, 5, 0.1, 0.1, 1, arms).validate().is_err());
        let g = ExperimentGrid::single(1, 10, 5, 0.1, 0.1, 0, vec![Arm::new("a", "random").unwrap()]);
        assert!(g.validate().is_err());
    }
}
