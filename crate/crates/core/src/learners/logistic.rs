use alloc::vec::Vec;

pub(crate) struct Fitted {
    pub w: Vec<f64>,
    pub b: f64,
    /// Mean log-loss before each accepted step, then at the final weights.
    #[cfg_attr(not(test), allow(dead_code))]
    pub history: Vec<f64>,
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + libm::exp(-z))
}

/// log(1 + e^z), stable for large |z|.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + libm::log1p(libm::exp(-z))
    } else {
        libm::log1p(libm::exp(z))
    }
}

/// Mean log-loss of the linear logit `w.x + b` on 0/1 targets.
pub fn logistic_loss(w: &[f64], b: f64, xs: &[&[f64]], ys: &[f64]) -> f64 {
    let total: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, &y)| {
            let z = w.iter().zip(x.iter()).map(|(a, b)| a * b).sum::<f64>() + b;
            softplus(z) - y * z
        })
        .sum();
    total / ys.len() as f64
}

/// Full-batch gradient descent from zero. Stops when the loss improves by
/// less than `tol`; halves the step whenever a step would raise the loss.
pub(crate) fn train(xs: &[&[f64]], ys: &[f64], lr: f64, iters: usize, tol: f64) -> Fitted {
    let d = xs[0].len();
    let n = ys.len() as f64;
    let mut w = alloc::vec![0.0; d];
    let mut b = 0.0;
    let mut lr = lr;
    let mut loss = logistic_loss(&w, b, xs, ys);
    let mut history = Vec::with_capacity(iters + 1);
    history.push(loss);
    for _ in 0..iters {
        let mut gw = alloc::vec![0.0; d];
        let mut gb = 0.0;
        for (x, &y) in xs.iter().zip(ys) {
            let z = w.iter().zip(x.iter()).map(|(a, b)| a * b).sum::<f64>() + b;
            let r = sigmoid(z) - y;
            for (g, xi) in gw.iter_mut().zip(x.iter()) {
                *g += r * xi / n;
            }
            gb += r / n;
        }
        let (nw, nb, nloss) = loop {
            let nw: Vec<f64> = w.iter().zip(&gw).map(|(a, g)| a - lr * g).collect();
            let nb = b - lr * gb;
            let nloss = logistic_loss(&nw, nb, xs, ys);
            if nloss <= loss || lr < 1e-12 {
                break (nw, nb, nloss);
            }
            lr *= 0.5;
        };
        let improvement = loss - nloss;
        w = nw;
        b = nb;
        loss = nloss;
        history.push(loss);
        if improvement < tol {
            break;
        }
    }
    Fitted { w, b, history }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    /// Newton-Raphson on the same 1-D problem; independent of the descent code.
    fn newton_1d(xs: &[f64], ys: &[f64]) -> (f64, f64) {
        let (mut w, mut b) = (0.0, 0.0);
        for _ in 0..100 {
            let (mut g0, mut g1, mut h00, mut h01, mut h11) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for (&x, &y) in xs.iter().zip(ys) {
                let p = sigmoid(w * x + b);
                g0 += (p - y) * x;
                g1 += p - y;
                let v = p * (1.0 - p);
                h00 += v * x * x;
                h01 += v * x;
                h11 += v;
            }
            let det = h00 * h11 - h01 * h01;
            w -= (h11 * g0 - h01 * g1) / det;
            b -= (h00 * g1 - h01 * g0) / det;
        }
        (w, b)
    }

    #[test]
    fn converges_to_newton_optimum() {
        // non-separable so the optimum is finite
        let xs1 = [-2.0, -1.0, -0.5, 0.0, 0.5, 1.0, 2.0, 0.3, -0.3];
        let ys = [0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 1.0, 0.0, 1.0];
        let rows: Vec<Vec<f64>> = xs1.iter().map(|&x| vec![x]).collect();
        let xs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        let fitted = train(&xs, &ys, 1.0, 20_000, 0.0);
        let (w, b) = newton_1d(&xs1, &ys);
        approx::assert_relative_eq!(fitted.w[0], w, epsilon = 1e-5);
        approx::assert_relative_eq!(fitted.b, b, epsilon = 1e-5);
    }

    #[test]
    fn loss_is_monotone() {
        let rows: Vec<Vec<f64>> = (0..30).map(|i| vec![(i as f64) / 10.0 - 1.5, ((i * 7) % 5) as f64]).collect();
        let xs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        let ys: Vec<f64> = (0..30).map(|i| if (i * 13) % 7 > 2 { 1.0 } else { 0.0 }).collect();
        let fitted = train(&xs, &ys, 5.0, 300, 0.0);
        assert!(fitted.history.windows(2).all(|w| w[1] <= w[0]));
        assert!(fitted.history.last().unwrap() < &fitted.history[0]);
        approx::assert_relative_eq!(fitted.history[0], libm::log(2.0), epsilon = 1e-12);
    }
}
