//! Candidates, property sets, datasets and similarity kernels.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::sync::Arc;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DataError {
    #[error("property set lower bound {lo} exceeds upper bound {hi}")]
    InvertedInterval { lo: f64, hi: f64 },
    #[error("cannot parse property set {0:?}")]
    BadPropertySet(String),
    #[error("cannot parse fingerprint: {0}")]
    BadFingerprint(String),
    #[error("dataset needs at least one labeled and one test sample (got n={n}, m={m})")]
    EmptyPartition { n: usize, m: usize },
    #[error("sample has {got} covariates, expected {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("labeled sample {0} has no outcome")]
    MissingOutcome(usize),
    #[error("quantile level {0} must lie in (0, 1)")]
    BadQuantile(f64),
    #[error("sample has no group value")]
    MissingGroup,
    #[error("group {0:?} has no labeled members")]
    EmptyGroup(String),
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum KernelError {
    #[error("cosine similarity is undefined for a zero vector")]
    ZeroVector,
    #[error("tanimoto similarity needs fingerprints on both samples")]
    MissingFingerprint,
    #[error("fingerprint lengths differ ({0} vs {1})")]
    FingerprintLength(usize, usize),
    #[error("covariate lengths differ ({0} vs {1})")]
    Dimension(usize, usize),
    #[error("rbf bandwidth must be positive, got {0}")]
    Bandwidth(f64),
}

/// Closed interval `[lo, hi]` of outcome values deemed uninteresting.
/// Either end may be infinite; a point set `{v}` has `lo == hi == v`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PropertySet {
    lo: f64,
    hi: f64,
}

impl PropertySet {
    pub fn new(lo: f64, hi: f64) -> Result<Self, DataError> {
        if lo.is_nan() || hi.is_nan() || lo > hi {
            return Err(DataError::InvertedInterval { lo, hi });
        }
        Ok(Self { lo, hi })
    }

    /// `(-inf, c]`
    pub fn at_most(c: f64) -> Self {
        Self { lo: f64::NEG_INFINITY, hi: c }
    }

    pub fn point(v: f64) -> Self {
        Self { lo: v, hi: v }
    }

    pub fn lo(&self) -> f64 {
        self.lo
    }

    pub fn hi(&self) -> f64 {
        self.hi
    }

    pub fn contains(&self, y: f64) -> bool {
        self.lo <= y && y <= self.hi
    }
}

/// True when `y` lies in the property set, i.e. the unit is uninteresting.
pub fn is_null(y: f64, c: &PropertySet) -> bool {
    c.contains(y)
}

fn fmt_bound(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".to_string()
    } else if v == f64::NEG_INFINITY {
        "-inf".to_string()
    } else {
        alloc::format!("{v}")
    }
}

fn parse_bound(s: &str) -> Option<f64> {
    match s.trim() {
        "inf" | "+inf" | "Inf" | "+Inf" => Some(f64::INFINITY),
        "-inf" | "-Inf" => Some(f64::NEG_INFINITY),
        t => t.parse::<f64>().ok().filter(|v| !v.is_nan()),
    }
}

impl fmt::Display for PropertySet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.lo == self.hi {
            return write!(f, "{{{}}}", fmt_bound(self.lo));
        }
        let open = if self.lo.is_infinite() { '(' } else { '[' };
        let close = if self.hi.is_infinite() { ')' } else { ']' };
        write!(f, "{open}{},{}{close}", fmt_bound(self.lo), fmt_bound(self.hi))
    }
}

impl FromStr for PropertySet {
    type Err = DataError;

    /// Accepts `(-inf,0]`, `[a,b]`, `{v}` or a bare number (a point set).
    /// Brackets are informational only: every property set is closed.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || DataError::BadPropertySet(s.to_string());
        let t = s.trim();
        if let Some(inner) = t.strip_prefix('{').and_then(|r| r.strip_suffix('}')) {
            let v = parse_bound(inner).ok_or_else(bad)?;
            return Ok(Self::point(v));
        }
        let first = t.chars().next().ok_or_else(bad)?;
        let last = t.chars().last().ok_or_else(bad)?;
        if matches!(first, '(' | '[') && matches!(last, ')' | ']') {
            let inner = &t[1..t.len() - 1];
            let (a, b) = inner.split_once(',').ok_or_else(bad)?;
            let lo = parse_bound(a).ok_or_else(bad)?;
            let hi = parse_bound(b).ok_or_else(bad)?;
            return Self::new(lo, hi);
        }
        parse_bound(t).map(Self::point).ok_or_else(bad)
    }
}

impl Serialize for PropertySet {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for PropertySet {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Fixed-length bit vector, e.g. a molecular fingerprint.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Fingerprint {
    words: Vec<u64>,
    len: usize,
}

impl Fingerprint {
    pub fn from_bits(bits: &[bool]) -> Self {
        let mut words = alloc::vec![0u64; bits.len().div_ceil(64)];
        for (i, &b) in bits.iter().enumerate() {
            if b {
                words[i / 64] |= 1 << (i % 64);
            }
        }
        Self { words, len: bits.len() }
    }

    /// Parses a string of `0`/`1` characters.
    pub fn parse01(s: &str) -> Result<Self, DataError> {
        let bits = s
            .trim()
            .chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                other => Err(DataError::BadFingerprint(alloc::format!("unexpected character {other:?}"))),
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self::from_bits(&bits))
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn get(&self, i: usize) -> bool {
        i < self.len && (self.words[i / 64] >> (i % 64)) & 1 == 1
    }

    pub fn count_ones(&self) -> u32 {
        self.words.iter().map(|w| w.count_ones()).sum()
    }

    /// |A ∩ B| / |A ∪ B|; two all-zero fingerprints count as identical.
    pub fn tanimoto(&self, other: &Self) -> Result<f64, KernelError> {
        if self.len != other.len {
            return Err(KernelError::FingerprintLength(self.len, other.len));
        }
        let (mut inter, mut union) = (0u32, 0u32);
        for (a, b) in self.words.iter().zip(&other.words) {
            inter += (a & b).count_ones();
            union += (a | b).count_ones();
        }
        if union == 0 {
            return Ok(1.0);
        }
        Ok(f64::from(inter) / f64::from(union))
    }
}

impl fmt::Display for Fingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for i in 0..self.len {
            f.write_str(if self.get(i) { "1" } else { "0" })?;
        }
        Ok(())
    }
}

impl Serialize for Fingerprint {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Fingerprint {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Self::parse01(&s).map_err(serde::de::Error::custom)
    }
}

/// One candidate unit. Test samples may carry `y` only as hidden ground
/// truth for benchmarking; the engine never exposes it before screening.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub x: Arc<[f64]>,
    pub y: Option<f64>,
    pub property: PropertySet,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fingerprint: Option<Fingerprint>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<String>,
}

impl Sample {
    pub fn new(x: Vec<f64>, y: Option<f64>, property: PropertySet) -> Self {
        Self { x: x.into(), y, property, fingerprint: None, group: None }
    }

    pub fn with_fingerprint(mut self, fp: Fingerprint) -> Self {
        self.fingerprint = Some(fp);
        self
    }

    pub fn with_group(mut self, group: impl Into<String>) -> Self {
        self.group = Some(group.into());
        self
    }

    /// `Some(true)` when the outcome is known and lies in the property set.
    pub fn is_null(&self) -> Option<bool> {
        self.y.map(|y| self.property.contains(y))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    labeled: Vec<Sample>,
    test: Vec<Sample>,
    d: usize,
}

impl Dataset {
    pub fn new(labeled: Vec<Sample>, test: Vec<Sample>) -> Result<Self, DataError> {
        if labeled.is_empty() || test.is_empty() {
            return Err(DataError::EmptyPartition { n: labeled.len(), m: test.len() });
        }
        let d = labeled[0].x.len();
        for s in labeled.iter().chain(&test) {
            if s.x.len() != d {
                return Err(DataError::Dimension { expected: d, got: s.x.len() });
            }
        }
        if let Some(i) = labeled.iter().position(|s| s.y.is_none()) {
            return Err(DataError::MissingOutcome(i));
        }
        Ok(Self { labeled, test, d })
    }

    pub fn labeled(&self) -> &[Sample] {
        &self.labeled
    }

    pub fn test(&self) -> &[Sample] {
        &self.test
    }

    pub fn n(&self) -> usize {
        self.labeled.len()
    }

    pub fn m(&self) -> usize {
        self.test.len()
    }

    pub fn d(&self) -> usize {
        self.d
    }

    /// Replaces every property set with `(-inf, c_g]`, where `c_g` is the
    /// lower empirical `q`-quantile of labeled outcomes in the sample's group.
    pub fn quantile_thresholds(&self, q: f64) -> Result<Self, DataError> {
        if !(q > 0.0 && q < 1.0) {
            return Err(DataError::BadQuantile(q));
        }
        let mut by_group: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
        for s in &self.labeled {
            let g = s.group.as_deref().ok_or(DataError::MissingGroup)?;
            // outcome presence is a constructor invariant
            by_group.entry(g).or_default().push(s.y.unwrap_or(f64::NAN));
        }
        let cut: BTreeMap<&str, f64> = by_group
            .into_iter()
            .map(|(g, mut ys)| {
                ys.sort_by(f64::total_cmp);
                (g, lower_quantile(&ys, q))
            })
            .collect();
        let relabel = |s: &Sample| -> Result<Sample, DataError> {
            let g = s.group.as_deref().ok_or(DataError::MissingGroup)?;
            let c = *cut.get(g).ok_or_else(|| DataError::EmptyGroup(g.to_string()))?;
            let mut out = s.clone();
            out.property = PropertySet::at_most(c);
            Ok(out)
        };
        Ok(Self {
            labeled: self.labeled.iter().map(relabel).collect::<Result<_, _>>()?,
            test: self.test.iter().map(relabel).collect::<Result<_, _>>()?,
            d: self.d,
        })
    }
}

/// Smallest order statistic whose empirical CDF reaches `q`. `sorted` must
/// be non-empty and ascending.
pub fn lower_quantile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let rank = libm::ceil(q * n as f64 - 1e-9) as usize;
    sorted[rank.clamp(1, n) - 1]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SimilarityKernel {
    Rbf { sigma0: f64 },
    Cosine,
    Tanimoto,
    /// 1 for identical covariate vectors, 0 otherwise.
    Indicator,
}

impl SimilarityKernel {
    /// Kernel value on raw covariates and optional fingerprints.
    pub fn eval(
        &self,
        a: &[f64],
        fa: Option<&Fingerprint>,
        b: &[f64],
        fb: Option<&Fingerprint>,
    ) -> Result<f64, KernelError> {
        match *self {
            SimilarityKernel::Tanimoto => match (fa, fb) {
                (Some(x), Some(y)) => x.tanimoto(y),
                _ => Err(KernelError::MissingFingerprint),
            },
            _ if a.len() != b.len() => Err(KernelError::Dimension(a.len(), b.len())),
            SimilarityKernel::Rbf { sigma0 } => {
                if !(sigma0 > 0.0) {
                    return Err(KernelError::Bandwidth(sigma0));
                }
                let d2: f64 = a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum();
                Ok(libm::exp(-d2 / (sigma0 * sigma0)))
            }
            SimilarityKernel::Cosine => {
                let dot: f64 = a.iter().zip(b).map(|(u, v)| u * v).sum();
                let na = libm::sqrt(a.iter().map(|u| u * u).sum::<f64>());
                let nb = libm::sqrt(b.iter().map(|v| v * v).sum::<f64>());
                if na == 0.0 || nb == 0.0 {
                    return Err(KernelError::ZeroVector);
                }
                Ok(dot / (na * nb))
            }
            SimilarityKernel::Indicator => Ok(if a == b { 1.0 } else { 0.0 }),
        }
    }
}

impl fmt::Display for SimilarityKernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SimilarityKernel::Rbf { sigma0 } => write!(f, "rbf({sigma0})"),
            SimilarityKernel::Cosine => f.write_str("cosine"),
            SimilarityKernel::Tanimoto => f.write_str("tanimoto"),
            SimilarityKernel::Indicator => f.write_str("indicator"),
        }
    }
}

impl FromStr for SimilarityKernel {
    type Err = String;

    /// `rbf(5)`, `rbf`, `cosine`, `tanimoto`, `indicator`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim();
        match t {
            "cosine" => return Ok(Self::Cosine),
            "tanimoto" => return Ok(Self::Tanimoto),
            "indicator" => return Ok(Self::Indicator),
            "rbf" => return Ok(Self::Rbf { sigma0: 5.0 }),
            _ => {}
        }
        let arg = t
            .strip_prefix("rbf(")
            .and_then(|r| r.strip_suffix(')'))
            .ok_or_else(|| alloc::format!("unknown kernel {t:?}"))?;
        let sigma0: f64 = arg.trim().parse().map_err(|_| alloc::format!("bad rbf bandwidth {arg:?}"))?;
        if !(sigma0 > 0.0) {
            return Err(alloc::format!("rbf bandwidth must be positive, got {sigma0}"));
        }
        Ok(Self::Rbf { sigma0 })
    }
}

pub fn similarity(kernel: &SimilarityKernel, a: &Sample, b: &Sample) -> Result<f64, KernelError> {
    kernel.eval(&a.x, a.fingerprint.as_ref(), &b.x, b.fingerprint.as_ref())
}
