use serde::Serialize;

use super::samples::PosteriorSamples;
use crate::error::{Error, Result};

/// Type-7 (linear interpolation) quantile of an ascending slice.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let h = (sorted.len() - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Type-7 quantiles of unsorted values.
pub fn quantiles(values: &[f64], probs: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    probs.iter().map(|&p| quantile_sorted(&v, p)).collect()
}

pub fn median(values: &[f64]) -> f64 {
    quantiles(values, &[0.5])[0]
}

/// Sample standard deviation (n - 1). Sums run over sorted values so the
/// result does not depend on input order.
pub fn sample_sd(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    sd_of_sorted(&v)
}

fn sd_of_sorted(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)).sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScalarSummary {
    pub param: String,
    pub index: Vec<usize>,
    pub median: f64,
    pub quantiles: Vec<f64>,
    pub sd: f64,
}

/// Per-scalar median, requested quantiles and SD, pooled over chains.
pub fn summarize_posterior(s: &PosteriorSamples, probs: &[f64]) -> Result<Vec<ScalarSummary>> {
    if s.is_empty() {
        return Err(Error::domain("posterior sample store is empty"));
    }
    if s.total_draws() < 2 {
        return Err(Error::domain("summaries need at least two draws"));
    }
    let mut out = Vec::new();
    for (name, p) in s.params() {
        for flat in 0..p.size() {
            let mut v = p.pooled(flat);
            v.sort_by(f64::total_cmp);
            out.push(ScalarSummary {
                param: name.clone(),
                index: p.unflatten(flat),
                median: quantile_sorted(&v, 0.5),
                quantiles: probs.iter().map(|&q| quantile_sorted(&v, q)).collect(),
                sd: sd_of_sorted(&v),
            });
        }
    }
    Ok(out)
}

/// Elementwise posterior median of a matrix-valued parameter.
pub fn median_matrix(s: &PosteriorSamples, name: &str) -> Result<ndarray::Array2<f64>> {
    let p = s.require(name)?;
    if p.spec.shape.len() != 2 {
        return Err(Error::shape(format!("{name} is not matrix-valued")));
    }
    let (r, c) = (p.spec.shape[0], p.spec.shape[1]);
    if s.total_draws() == 0 {
        return Err(Error::domain("posterior sample store is empty"));
    }
    Ok(ndarray::Array2::from_shape_fn((r, c), |(i, j)| median(&p.pooled(i * c + j))))
}

/// Elementwise posterior mean of a matrix-valued parameter.
pub fn mean_matrix(s: &PosteriorSamples, name: &str) -> Result<ndarray::Array2<f64>> {
    let p = s.require(name)?;
    if p.spec.shape.len() != 2 {
        return Err(Error::shape(format!("{name} is not matrix-valued")));
    }
    let (r, c) = (p.spec.shape[0], p.spec.shape[1]);
    let mut acc = ndarray::Array2::<f64>::zeros((r, c));
    let mut n = 0.0;
    for (ch, d) in p.positions() {
        for (a, v) in acc.iter_mut().zip(p.draw(ch, d)) {
            *a += v;
        }
        n += 1.0;
    }
    if n == 0.0 {
        return Err(Error::domain("posterior sample store is empty"));
    }
    Ok(acc / n)
}
