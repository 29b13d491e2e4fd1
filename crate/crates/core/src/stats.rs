//! Small statistics used by the benchmarks and tests.

/// Mean of squared differences. Returns `None` for empty input.
pub fn mse(estimates: &[f64], truth: &[f64]) -> Option<f64> {
    assert_eq!(estimates.len(), truth.len(), "mse: length mismatch");
    if estimates.is_empty() {
        return None;
    }
    let sum: f64 = estimates
        .iter()
        .zip(truth)
        .map(|(e, t)| (e - t) * (e - t))
        .sum();
    Some(sum / estimates.len() as f64)
}

/// Trailing moving average; the first `window - 1` outputs average what is
/// available so far.
pub fn moving_average(xs: &[f64], window: usize) -> Vec<f64> {
    assert!(window > 0, "moving_average: zero window");
    let mut out = Vec::with_capacity(xs.len());
    let mut acc = 0.0;
    for (k, &x) in xs.iter().enumerate() {
        acc += x;
        if k >= window {
            acc -= xs[k - window];
        }
        out.push(acc / (k + 1).min(window) as f64);
    }
    out
}

pub fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

pub fn median(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

/// Pearson correlation; `None` when either input has zero variance.
pub fn correlation(xs: &[f64], ys: &[f64]) -> Option<f64> {
    assert_eq!(xs.len(), ys.len());
    let mx = mean(xs)?;
    let my = mean(ys)?;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}
