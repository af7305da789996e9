//! Built-in learners. Classification learners estimate the probability that
//! a unit is interesting (`Y` outside its property set) and score in
//! `[0, 1]`; regression variants predict `Y` itself.
//!
//! Specs are written `name[key=value,...]`, e.g. `forest[trees=50,depth=4]`
//! or `knn[k=5,mode=reg]`.

mod logistic;
mod tree;

use alloc::string::{String, ToString};
use alloc::sync::Arc;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::rng;
use tree::{Tree, TreeParams};

pub use logistic::logistic_loss;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LearnerError {
    #[error("no training examples")]
    Empty,
    #[error("invalid hyperparameter: {0}")]
    Hyperparameter(String),
    #[error("feature vector has length {got}, model expects {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("classification targets must be 0 or 1, got {0}")]
    Target(f64),
    #[error("holdout needs both classes")]
    SingleClass,
    #[error("cannot parse learner spec {0:?}")]
    Parse(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Classification,
    Regression,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LearnerKind {
    /// Gradient descent on the mean log-loss.
    Logistic { lr: f64, iters: usize, tol: f64 },
    Knn { k: usize },
    /// Bagged depth-capped trees with per-node feature subsampling
    /// (`features = None` means all of them).
    Forest { trees: usize, depth: usize, features: Option<usize>, bootstrap: f64 },
    /// Additive depth-1 trees.
    Stumps { rounds: usize, lr: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LearnerSpec {
    pub kind: LearnerKind,
    pub mode: Mode,
    pub seed: u64,
}

impl LearnerSpec {
    pub fn logistic() -> Self {
        Self::new(LearnerKind::Logistic { lr: 0.1, iters: 500, tol: 1e-8 })
    }

    pub fn knn(k: usize) -> Self {
        Self::new(LearnerKind::Knn { k })
    }

    pub fn forest() -> Self {
        Self::new(LearnerKind::Forest { trees: 20, depth: 8, features: None, bootstrap: 1.0 })
    }

    pub fn stumps() -> Self {
        Self::new(LearnerKind::Stumps { rounds: 100, lr: 0.1 })
    }

    fn new(kind: LearnerKind) -> Self {
        Self { kind, mode: Mode::Classification, seed: 0 }
    }

    pub fn with_mode(mut self, mode: Mode) -> Self {
        self.mode = mode;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            LearnerKind::Logistic { .. } => "logistic",
            LearnerKind::Knn { .. } => "knn",
            LearnerKind::Forest { .. } => "forest",
            LearnerKind::Stumps { .. } => "stumps",
        }
    }

    fn validate(&self) -> Result<(), LearnerError> {
        let bad = |m: &str| Err(LearnerError::Hyperparameter(m.to_string()));
        match self.kind {
            LearnerKind::Logistic { lr, iters, tol } => {
                if self.mode == Mode::Regression {
                    return bad("logistic has no regression mode");
                }
                if !(lr > 0.0) || iters == 0 || !(tol >= 0.0) {
                    return bad("logistic needs lr > 0, iters >= 1, tol >= 0");
                }
            }
            LearnerKind::Knn { k } if k == 0 => return bad("knn needs k >= 1"),
            LearnerKind::Forest { trees, depth, features, bootstrap } => {
                if trees == 0 || depth == 0 || features == Some(0) || !(bootstrap > 0.0 && bootstrap <= 1.0) {
                    return bad("forest needs trees, depth, features >= 1 and bootstrap in (0, 1]");
                }
            }
            LearnerKind::Stumps { rounds, lr } => {
                if rounds == 0 || !(lr > 0.0) {
                    return bad("stumps need rounds >= 1 and lr > 0");
                }
            }
            LearnerKind::Knn { .. } => {}
        }
        Ok(())
    }
}

impl fmt::Display for LearnerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            LearnerKind::Logistic { lr, iters, tol } => write!(f, "logistic[lr={lr},iters={iters},tol={tol}")?,
            LearnerKind::Knn { k } => write!(f, "knn[k={k}")?,
            LearnerKind::Forest { trees, depth, features, bootstrap } => {
                write!(f, "forest[trees={trees},depth={depth},bootstrap={bootstrap}")?;
                if let Some(m) = features {
                    write!(f, ",features={m}")?;
                }
            }
            LearnerKind::Stumps { rounds, lr } => write!(f, "stumps[rounds={rounds},lr={lr}")?,
        }
        if self.mode == Mode::Regression {
            f.write_str(",mode=reg")?;
        }
        if self.seed != 0 {
            write!(f, ",seed={}", self.seed)?;
        }
        f.write_str("]")
    }
}

/// Splits `name[a=1,b=2]` into the name and its key/value pairs.
pub(crate) fn split_params(s: &str) -> Result<(&str, Vec<(&str, &str)>), String> {
    let s = s.trim();
    let Some(open) = s.find('[') else {
        return Ok((s, Vec::new()));
    };
    let body = s[open + 1..].strip_suffix(']').ok_or_else(|| alloc::format!("unbalanced brackets in {s:?}"))?;
    let mut kv = Vec::new();
    for part in split_top_level(body, ',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        let (k, v) = part.split_once('=').ok_or_else(|| alloc::format!("expected key=value, got {part:?}"))?;
        kv.push((k.trim(), v.trim()));
    }
    Ok((s[..open].trim(), kv))
}

/// Splits on `sep` outside of any (), [] nesting.
pub(crate) fn split_top_level(s: &str, sep: char) -> Vec<&str> {
    let mut out = Vec::new();
    let (mut depth, mut start) = (0i32, 0);
    for (i, c) in s.char_indices() {
        match c {
            '(' | '[' => depth += 1,
            ')' | ']' => depth -= 1,
            c if c == sep && depth == 0 => {
                out.push(&s[start..i]);
                start = i + c.len_utf8();
            }
            _ => {}
        }
    }
    out.push(&s[start..]);
    out
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T, LearnerError> {
    v.parse().map_err(|_| LearnerError::Parse(alloc::format!("{key}={v}")))
}

impl FromStr for LearnerSpec {
    type Err = LearnerError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (name, params) = split_params(s).map_err(LearnerError::Parse)?;
        let mut spec = match name {
            "logistic" => Self::logistic(),
            "knn" => Self::knn(5),
            "forest" => Self::forest(),
            "stumps" => Self::stumps(),
            other => return Err(LearnerError::Parse(alloc::format!("unknown learner {other:?}"))),
        };
        for (key, v) in params {
            match (&mut spec.kind, key) {
                (_, "mode") => {
                    spec.mode = match v {
                        "reg" | "regression" => Mode::Regression,
                        "clf" | "classification" => Mode::Classification,
                        _ => return Err(LearnerError::Parse(alloc::format!("mode={v}"))),
                    }
                }
                (_, "seed") => spec.seed = num(key, v)?,
                (LearnerKind::Logistic { lr, .. }, "lr") => *lr = num(key, v)?,
                (LearnerKind::Logistic { iters, .. }, "iters") => *iters = num(key, v)?,
                (LearnerKind::Logistic { tol, .. }, "tol") => *tol = num(key, v)?,
                (LearnerKind::Knn { k }, "k") => *k = num(key, v)?,
                (LearnerKind::Forest { trees, .. }, "trees") => *trees = num(key, v)?,
                (LearnerKind::Forest { depth, .. }, "depth") => *depth = num(key, v)?,
                (LearnerKind::Forest { features, .. }, "features") => *features = Some(num(key, v)?),
                (LearnerKind::Forest { bootstrap, .. }, "bootstrap") => *bootstrap = num(key, v)?,
                (LearnerKind::Stumps { rounds, .. }, "rounds") => *rounds = num(key, v)?,
                (LearnerKind::Stumps { lr, .. }, "lr") => *lr = num(key, v)?,
                _ => return Err(LearnerError::Parse(alloc::format!("unknown parameter {key:?} for {name}"))),
            }
        }
        spec.validate()?;
        Ok(spec)
    }
}

impl Serialize for LearnerSpec {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for LearnerSpec {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub x: Arc<[f64]>,
    pub target: f64,
}

impl TrainingExample {
    pub fn new(x: impl Into<Arc<[f64]>>, target: f64) -> Self {
        Self { x: x.into(), target }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Model {
    Constant(f64),
    Logistic { w: Vec<f64>, b: f64 },
    Knn { k: usize, xs: Vec<Arc<[f64]>>, ys: Vec<f64> },
    Forest(Vec<Tree>),
    Boost { base: f64, lr: f64, stumps: Vec<Tree>, logit: bool },
}

/// A fitted model. Immutable; scoring is pure.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictor {
    mode: Mode,
    dim: usize,
    model: Model,
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + libm::exp(-z))
}

/// Fits `spec` on `examples`. Deterministic in `(spec, examples)`.
/// Single-class classification data yields the constant `(count+1)/(total+2)`.
pub fn fit(spec: &LearnerSpec, examples: &[TrainingExample]) -> Result<Predictor, LearnerError> {
    spec.validate()?;
    let first = examples.first().ok_or(LearnerError::Empty)?;
    let dim = first.x.len();
    for e in examples {
        if e.x.len() != dim {
            return Err(LearnerError::Dimension { expected: dim, got: e.x.len() });
        }
        if spec.mode == Mode::Classification && e.target != 0.0 && e.target != 1.0 {
            return Err(LearnerError::Target(e.target));
        }
    }
    let xs: Vec<&[f64]> = examples.iter().map(|e| &e.x[..]).collect();
    let ys: Vec<f64> = examples.iter().map(|e| e.target).collect();
    let wrap = |model| Predictor { mode: spec.mode, dim, model };
    if spec.mode == Mode::Classification {
        let ones = ys.iter().filter(|&&y| y == 1.0).count();
        if ones == 0 || ones == ys.len() {
            return Ok(wrap(Model::Constant((ones + 1) as f64 / (ys.len() + 2) as f64)));
        }
    }
    let model = match spec.kind {
        LearnerKind::Logistic { lr, iters, tol } => {
            let fitted = logistic::train(&xs, &ys, lr, iters, tol);
            Model::Logistic { w: fitted.w, b: fitted.b }
        }
        LearnerKind::Knn { k } => Model::Knn { k, xs: examples.iter().map(|e| e.x.clone()).collect(), ys },
        LearnerKind::Forest { trees, depth, features, bootstrap } => {
            let params = TreeParams { max_depth: depth, features_per_node: features };
            let draws = (libm::round(bootstrap * ys.len() as f64) as usize).max(1);
            let forest = (0..trees)
                .map(|t| {
                    let mut rng = rng::stream(spec.seed, &[0x7472_6565, t as u64]);
                    let rows: Vec<usize> = (0..draws).map(|_| rng.random_range(0..ys.len())).collect();
                    Tree::fit(&xs, &ys, &rows, &params, &mut rng)
                })
                .collect();
            Model::Forest(forest)
        }
        LearnerKind::Stumps { rounds, lr } => boost(&xs, &ys, rounds, lr, spec.mode == Mode::Classification),
    };
    Ok(wrap(model))
}

fn boost(xs: &[&[f64]], ys: &[f64], rounds: usize, lr: f64, logit: bool) -> Model {
    let n = ys.len() as f64;
    let mean = ys.iter().sum::<f64>() / n;
    let base = if logit { libm::log(mean / (1.0 - mean)) } else { mean };
    let mut f = alloc::vec![base; ys.len()];
    let params = TreeParams { max_depth: 1, features_per_node: None };
    let mut rng = rng::stream(0, &[]);
    let mut stumps = Vec::with_capacity(rounds);
    for _ in 0..rounds {
        let resid: Vec<f64> = ys.iter().zip(&f).map(|(&y, &fi)| y - if logit { sigmoid(fi) } else { fi }).collect();
        let rows: Vec<usize> = (0..ys.len()).collect();
        let mut stump = Tree::fit(xs, &resid, &rows, &params, &mut rng);
        if logit {
            // Newton leaf values for the log-loss
            let mut num = alloc::vec![0.0; stump.node_count()];
            let mut den = alloc::vec![0.0; stump.node_count()];
            for (i, x) in xs.iter().enumerate() {
                let leaf = stump.leaf_of(x);
                let p = sigmoid(f[i]);
                num[leaf] += resid[i];
                den[leaf] += p * (1.0 - p);
            }
            stump.map_leaves(|leaf| if den[leaf] > 1e-12 { (num[leaf] / den[leaf]).clamp(-8.0, 8.0) } else { 0.0 });
        }
        for (fi, x) in f.iter_mut().zip(xs) {
            *fi += lr * stump.predict(x);
        }
        stumps.push(stump);
    }
    Model::Boost { base, lr, stumps, logit }
}

impl Predictor {
    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// A constant predictor, e.g. for plugging in a fixed prior.
    pub fn constant(mode: Mode, dim: usize, value: f64) -> Self {
        Self { mode, dim, model: Model::Constant(value) }
    }

    pub fn score(&self, x: &[f64]) -> Result<f64, LearnerError> {
        if x.len() != self.dim {
            return Err(LearnerError::Dimension { expected: self.dim, got: x.len() });
        }
        let raw = match &self.model {
            Model::Constant(v) => *v,
            Model::Logistic { w, b } => sigmoid(w.iter().zip(x).map(|(wi, xi)| wi * xi).sum::<f64>() + b),
            Model::Knn { k, xs, ys } => {
                let mut d: Vec<(f64, usize)> = xs
                    .iter()
                    .enumerate()
                    .map(|(i, p)| (p.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>(), i))
                    .collect();
                let k = (*k).min(d.len());
                d.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                d[..k].iter().map(|&(_, i)| ys[i]).sum::<f64>() / k as f64
            }
            Model::Forest(trees) => trees.iter().map(|t| t.predict(x)).sum::<f64>() / trees.len() as f64,
            Model::Boost { base, lr, stumps, logit } => {
                let f = base + lr * stumps.iter().map(|s| s.predict(x)).sum::<f64>();
                if *logit {
                    sigmoid(f)
                } else {
                    f
                }
            }
        };
        Ok(match self.mode {
            Mode::Classification => raw.clamp(0.0, 1.0),
            Mode::Regression => raw,
        })
    }

    pub fn roc_auc(&self, holdout: &[TrainingExample]) -> Result<f64, LearnerError> {
        let scores = holdout.iter().map(|e| self.score(&e.x)).collect::<Result<Vec<_>, _>>()?;
        let labels: Vec<bool> = holdout.iter().map(|e| e.target == 1.0).collect();
        roc_auc(&scores, &labels)
    }
}

/// Area under the ROC curve via the rank statistic; tied scores count half.
pub fn roc_auc(scores: &[f64], positive: &[bool]) -> Result<f64, LearnerError> {
    let n1 = positive.iter().filter(|&&p| p).count();
    let n0 = positive.len() - n1;
    if n1 == 0 || n0 == 0 {
        return Err(LearnerError::SingleClass);
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        // average 1-based rank of the tie block
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += idx[i..=j].iter().filter(|&&t| positive[t]).count() as f64 * avg;
        i = j + 1;
    }
    let n1f = n1 as f64;
    Ok((rank_sum - n1f * (n1f + 1.0) / 2.0) / (n1f * n0 as f64))
}
