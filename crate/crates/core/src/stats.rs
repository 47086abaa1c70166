//! Small deterministic summary statistics.

use ndarray::{Array2, ArrayView2};

/// Compensated (Neumaier) sum; the result depends only on the order of `xs`.
pub fn sum(xs: impl IntoIterator<Item = f64>) -> f64 {
    let mut s = 0.0f64;
    let mut c = 0.0f64;
    for x in xs {
        let t = s + x;
        if s.abs() >= x.abs() {
            c += (s - t) + x;
        } else {
            c += (x - t) + s;
        }
        s = t;
    }
    s + c
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    sum(xs.iter().copied()) / xs.len() as f64
}

/// Unbiased sample variance; `None` for fewer than two values.
pub fn variance(xs: &[f64]) -> Option<f64> {
    if xs.len() < 2 {
        return None;
    }
    let m = mean(xs);
    Some(sum(xs.iter().map(|x| (x - m) * (x - m))) / (xs.len() - 1) as f64)
}

/// Unbiased sample covariance of the columns of `x` (rows are samples).
pub fn covariance(x: ArrayView2<'_, f64>) -> Array2<f64> {
    let (n, k) = x.dim();
    let means: Vec<f64> = x.columns().into_iter().map(|c| mean(&c.to_vec())).collect();
    let mut cov = Array2::zeros((k, k));
    for a in 0..k {
        for b in a..k {
            let v = sum((0..n).map(|i| (x[[i, a]] - means[a]) * (x[[i, b]] - means[b])))
                / (n as f64 - 1.0);
            cov[[a, b]] = v;
            cov[[b, a]] = v;
        }
    }
    cov
}
