//! Diversity weights for the pool. `Θ_ij = δ_i δ_j θ(x_i, x_j)` couples the
//! predicted non-null probabilities `δ` with a similarity kernel; the weights
//! `ξ` minimize `ξᵀΘξ / (ξᵀδ)²` subject to the FDR proxy
//! `Σ ξ_i (1 - δ_i) = α Σ ξ_i` (closed form), or `ξᵀΘξ` subject to `ξ >= 0`,
//! `ξᵀδ = 1` with the FDR proxy dropped (QP).

use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::data::{Fingerprint, KernelError, SimilarityKernel};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DivoptError {
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error("predicted probabilities must lie in [0, 1]")]
    BadDelta,
    #[error("need at least {0} pool units")]
    TooSmall(usize),
    #[error("theta is not positive definite; increase the ridge")]
    Factorization,
    #[error("all predicted probabilities are zero; the QP is infeasible")]
    Infeasible,
    #[error("QP did not converge in {iterations} iterations")]
    NotConverged { iterations: usize, last: DiversityScores },
    #[error("alpha must lie in [0, 1), got {0}")]
    BadAlpha(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiversityProblem {
    pub delta: Vec<f64>,
    /// Includes the ridge on the diagonal.
    pub theta: DMatrix<f64>,
    pub alpha: f64,
    pub ridge: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiversityScores {
    pub xi_star: Vec<f64>,
    pub xi_work: Vec<f64>,
    pub degenerate: bool,
}

/// One pool unit as seen by the kernel.
#[derive(Debug, Clone, Copy)]
pub struct KernelPoint<'a> {
    pub x: &'a [f64],
    pub fingerprint: Option<&'a Fingerprint>,
}

/// Kernel value used inside Θ: cosine is mapped from [-1, 1] to [0, 1].
pub fn theta_kernel(kernel: &SimilarityKernel, a: KernelPoint<'_>, b: KernelPoint<'_>) -> Result<f64, KernelError> {
    let v = kernel.eval(a.x, a.fingerprint, b.x, b.fingerprint)?;
    Ok(match kernel {
        SimilarityKernel::Cosine => (v + 1.0) / 2.0,
        _ => v,
    })
}

/// Builds Θ plus `ridge·I`; `None` picks `1e-6·tr(Θ)/ñ` (or `1e-6` when the
/// trace vanishes).
pub fn build_theta(
    delta: &[f64],
    points: &[KernelPoint<'_>],
    kernel: &SimilarityKernel,
    alpha: f64,
    ridge: Option<f64>,
) -> Result<DiversityProblem, DivoptError> {
    let n = delta.len();
    if n < 2 || points.len() != n {
        return Err(DivoptError::TooSmall(2));
    }
    if delta.iter().any(|d| !(0.0..=1.0).contains(d)) {
        return Err(DivoptError::BadDelta);
    }
    if !(0.0..1.0).contains(&alpha) {
        return Err(DivoptError::BadAlpha(alpha));
    }
    let mut theta = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = delta[i] * delta[j] * theta_kernel(kernel, points[i], points[j])?;
            theta[(i, j)] = v;
            theta[(j, i)] = v;
        }
    }
    let ridge = ridge.unwrap_or_else(|| {
        let t = theta.trace() / n as f64;
        if t > 0.0 {
            1e-6 * t
        } else {
            1e-6
        }
    });
    for i in 0..n {
        theta[(i, i)] += ridge;
    }
    Ok(DiversityProblem { delta: delta.to_vec(), theta, alpha, ridge })
}

/// Clips at 0 and divides by the maximum; all zeros and `true` when the
/// maximum is not positive.
pub fn working_rule(xi_star: &[f64]) -> (Vec<f64>, bool) {
    let max = xi_star.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(max > 0.0) {
        return (alloc::vec![0.0; xi_star.len()], true);
    }
    (xi_star.iter().map(|&v| v.max(0.0) / max).collect(), false)
}

/// `scale` is the magnitude of the terms that produced `xi_star`, so that
/// cancellation to rounding noise counts as zero.
fn scores(xi_star: Vec<f64>, scale: f64) -> DiversityScores {
    let inf = xi_star.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let (xi_work, flat) = working_rule(&xi_star);
    if flat || inf <= 1e-7 * scale.max(1.0) {
        return DiversityScores { xi_work: alloc::vec![0.0; xi_star.len()], xi_star, degenerate: true };
    }
    DiversityScores { degenerate: false, xi_work, xi_star }
}

/// Closed-form minimizer. With `a = δᵀΘ⁻¹1`, `b = δᵀΘ⁻¹δ`, `c = 1ᵀΘ⁻¹1`:
/// `ξ0 = (b/(1-α) - a) Θ⁻¹1 - (a/(1-α) - c) Θ⁻¹δ`.
pub fn closed_form_xi(p: &DiversityProblem) -> Result<DiversityScores, DivoptError> {
    let n = p.delta.len();
    let chol = p.theta.clone().cholesky().ok_or(DivoptError::Factorization)?;
    let delta = DVector::from_column_slice(&p.delta);
    let ones = DVector::from_element(n, 1.0);
    let inv_one = chol.solve(&ones);
    let inv_delta = chol.solve(&delta);
    let a = delta.dot(&inv_one);
    let b = delta.dot(&inv_delta);
    let c = ones.dot(&inv_one);
    let s = 1.0 / (1.0 - p.alpha);
    let t1 = inv_one * (b * s - a);
    let t2 = inv_delta * (a * s - c);
    let scale = t1.amax().max(t2.amax());
    let xi = t1 - t2;
    if xi.iter().any(|v| !v.is_finite()) {
        return Err(DivoptError::Factorization);
    }
    Ok(scores(xi.iter().copied().collect(), scale))
}

/// `(ξᵀδ - (bc - a²), ξᵀ1 - (bc - a²)/(1-α))`, both zero at the closed form.
pub fn kkt_residuals(p: &DiversityProblem, xi: &[f64]) -> Result<(f64, f64), DivoptError> {
    let n = p.delta.len();
    let chol = p.theta.clone().cholesky().ok_or(DivoptError::Factorization)?;
    let delta = DVector::from_column_slice(&p.delta);
    let ones = DVector::from_element(n, 1.0);
    let inv_one = chol.solve(&ones);
    let inv_delta = chol.solve(&delta);
    let (a, b, c) = (delta.dot(&inv_one), delta.dot(&inv_delta), ones.dot(&inv_one));
    let det = b * c - a * a;
    let x = DVector::from_column_slice(xi);
    Ok((x.dot(&delta) - det, x.sum() - det / (1.0 - p.alpha)))
}

/// `Σ ξ_i (1 - δ_i) / Σ ξ_i`, the FDR proxy of a weight vector.
pub fn fdr_proxy(delta: &[f64], xi: &[f64]) -> f64 {
    let num: f64 = xi.iter().zip(delta).map(|(x, d)| x * (1.0 - d)).sum();
    num / xi.iter().sum::<f64>()
}

fn objective(theta: &DMatrix<f64>, xi: &DVector<f64>) -> f64 {
    xi.dot(&(theta * xi))
}

/// Euclidean projection onto `{ξ >= 0, ξᵀδ = 1}`: `ξ_i = max(0, v_i - τδ_i)`
/// with `τ` found from the sorted breakpoints `v_i / δ_i`.
pub fn project(v: &[f64], delta: &[f64]) -> Result<Vec<f64>, DivoptError> {
    let mut bps: Vec<(f64, usize)> = delta
        .iter()
        .enumerate()
        .filter(|(_, &d)| d > 0.0)
        .map(|(i, &d)| (v[i] / d, i))
        .collect();
    if bps.is_empty() {
        return Err(DivoptError::Infeasible);
    }
    bps.sort_by(|a, b| b.0.total_cmp(&a.0));
    // g(τ) = Σ_active δ_i (v_i - τ δ_i) is decreasing; walk breakpoints from the top
    let (mut sdv, mut sdd) = (0.0, 0.0);
    let mut tau = 0.0;
    for (j, &(bp, i)) in bps.iter().enumerate() {
        sdv += delta[i] * v[i];
        sdd += delta[i] * delta[i];
        tau = (sdv - 1.0) / sdd;
        let next = bps.get(j + 1).map_or(f64::NEG_INFINITY, |b| b.0);
        if tau < bp && tau >= next {
            break;
        }
    }
    Ok(v.iter().zip(delta).map(|(&vi, &d)| if d > 0.0 { (vi - tau * d).max(0.0) } else { vi.max(0.0) }).collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QpOptions {
    /// Stop once a step lowers the objective by at most `tol` times its value.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for QpOptions {
    fn default() -> Self {
        Self { tol: 1e-12, max_iter: 100_000 }
    }
}

/// Projected gradient for `min ξᵀΘξ` over `{ξ >= 0, ξᵀδ = 1}` with step
/// `1/L`, `L` a Gershgorin bound on the gradient's Lipschitz constant.
pub fn qp_xi(p: &DiversityProblem, opts: QpOptions) -> Result<DiversityScores, DivoptError> {
    qp_trace(p, opts).map(|(s, _)| s)
}

/// As [`qp_xi`], also returning the objective after every iteration.
pub fn qp_trace(p: &DiversityProblem, opts: QpOptions) -> Result<(DiversityScores, Vec<f64>), DivoptError> {
    let n = p.delta.len();
    let norm2: f64 = p.delta.iter().map(|d| d * d).sum();
    if !(norm2 > 0.0) {
        return Err(DivoptError::Infeasible);
    }
    let lip = 2.0 * (0..n).map(|i| p.theta.row(i).iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max);
    let step = 1.0 / lip.max(f64::MIN_POSITIVE);
    let mut xi = DVector::from_iterator(n, p.delta.iter().map(|d| d / norm2));
    let mut obj = objective(&p.theta, &xi);
    let mut history = alloc::vec![obj];
    for _ in 0..opts.max_iter {
        let grad = (&p.theta * &xi) * 2.0;
        let v: Vec<f64> = xi.iter().zip(grad.iter()).map(|(x, g)| x - step * g).collect();
        let next = DVector::from_vec(project(&v, &p.delta)?);
        let next_obj = objective(&p.theta, &next);
        let decrease = obj - next_obj;
        xi = next;
        obj = next_obj;
        history.push(obj);
        if decrease <= opts.tol * obj.abs() {
            return Ok((scores(xi.iter().copied().collect(), 1.0), history));
        }
    }
    Err(DivoptError::NotConverged { iterations: opts.max_iter, last: scores(xi.iter().copied().collect(), 1.0) })
}

/// Max-shifted softmax.
pub fn softmax(s: &[f64]) -> Vec<f64> {
    let max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = s.iter().map(|v| libm::exp(v - max)).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}
