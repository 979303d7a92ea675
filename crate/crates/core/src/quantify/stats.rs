use serde::{Deserialize, Serialize};

use super::QuantError;

/// Pearson's r by the raw-sum formula
/// `(NΣxy − ΣxΣy) / (√(NΣx² − (Σx)²) · √(NΣy² − (Σy)²))`.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64, QuantError> {
    if x.len() != y.len() {
        return Err(QuantError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(QuantError::TooFewValues { need: 2, got: x.len() });
    }
    if x.iter().any(|v| !v.is_finite()) || y.iter().any(|v| !v.is_finite()) {
        return Err(QuantError::NonFinite);
    }
    if x.iter().all(|&v| v == x[0]) || y.iter().all(|&v| v == y[0]) {
        return Err(QuantError::ZeroVariance);
    }
    let n = x.len() as f64;
    let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        sx += a;
        sy += b;
        sxx += a * a;
        syy += b * b;
        sxy += a * b;
    }
    let vx = n * sxx - sx * sx;
    let vy = n * syy - sy * sy;
    if !(vx > 0.0 && vy > 0.0) {
        return Err(QuantError::ZeroVariance);
    }
    let r = (n * sxy - sx * sy) / (vx.sqrt() * vy.sqrt());
    Ok(r.clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SummaryStats {
    pub mean: f64,
    /// Population standard deviation.
    pub sd: f64,
    pub median: f64,
    pub iqr25: f64,
    pub iqr75: f64,
    pub n: usize,
}

/// Type-7 quantile of sorted data: linear interpolation at `h = (n − 1)·p`.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn summary_stats(values: &[f64]) -> Result<SummaryStats, QuantError> {
    if values.is_empty() {
        return Err(QuantError::TooFewValues { need: 1, got: 0 });
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(QuantError::NonFinite);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(SummaryStats {
        mean,
        sd,
        median: quantile_sorted(&sorted, 0.5),
        iqr25: quantile_sorted(&sorted, 0.25),
        iqr75: quantile_sorted(&sorted, 0.75),
        n: values.len(),
    })
}
