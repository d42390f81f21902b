//! Case-study summaries and plot-ready exports.
//!
//! Export schemas, one CSV per kind:
//!
//! - `theta_boxes`: `sample_id,time,topic,q025,q25,q50,q75,q975` on the g scale
//! - `beta_intervals`: `feature_id,family,phylo_index,topic,q025,q25,q50,q75,q975` on the g scale
//! - `mu_intervals`: `feature_id,time,q025,q25,q50,q75,q975` on the g scale
//! - `ppc_overlay`: `statistic,feature,time,kind,replicate_id,value,jitter`
//! - `representativeness`: `feature_id,topic,score,rank`
//!
//! Topics and ranks are 1-based in exported files only.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use serde::Serialize;

use crate::corpus::CountMatrix;
use crate::error::{Error, Result};
use crate::inference::{quantile_sorted, PosteriorSamples};
use crate::numeric::{g_transform, Rng};
use crate::ppc::PpcReport;

/// Quantile levels written by every interval export.
pub const EXPORT_QUANTILES: [f64; 5] = [0.025, 0.25, 0.5, 0.75, 0.975];

/// Width of the uniform jitter added to quantile-quantile points.
pub const QQ_JITTER: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RepresentativenessRow {
    pub feature_id: String,
    /// 0-based topic.
    pub topic: usize,
    pub score: f64,
    /// 1-based rank within the topic.
    pub rank: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RepresentativenessTable {
    pub rows: Vec<RepresentativenessRow>,
}

/// `r_kv = beta_vk - sum_{k' != k} beta_vk'` for every feature and topic, V×K.
pub fn representativeness_scores(beta: &Array2<f64>) -> Array2<f64> {
    let mut out = beta.clone();
    for (mut row, b) in out.rows_mut().into_iter().zip(beta.rows()) {
        let total: f64 = b.sum();
        row.iter_mut().zip(b.iter()).for_each(|(r, &x)| *r = x - (total - x));
    }
    out
}

/// The `top_m` features most representative of topic `k`, by descending
/// score with ties broken by feature id.
pub fn topic_representativeness(
    beta: &Array2<f64>,
    feature_ids: &[String],
    k: usize,
    top_m: usize,
) -> Result<RepresentativenessTable> {
    let (v, topics) = beta.dim();
    if feature_ids.len() != v {
        return Err(Error::shape(format!("{} feature ids for {v} rows", feature_ids.len())));
    }
    if k >= topics {
        return Err(Error::Bounds(format!("topic {k} of {topics}")));
    }
    if top_m > v {
        return Err(Error::Bounds(format!("top_m = {top_m} exceeds V = {v}")));
    }
    let scores = representativeness_scores(beta);
    let mut order: Vec<usize> = (0..v).collect();
    order.sort_by(|&a, &b| {
        scores[[b, k]]
            .total_cmp(&scores[[a, k]])
            .then_with(|| feature_ids[a].cmp(&feature_ids[b]))
    });
    Ok(RepresentativenessTable {
        rows: order
            .into_iter()
            .take(top_m)
            .enumerate()
            .map(|(rank, i)| RepresentativenessRow {
                feature_id: feature_ids[i].clone(),
                topic: k,
                score: scores[[i, k]],
                rank: rank + 1,
            })
            .collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FamilyScore {
    pub family: String,
    /// 0-based topic.
    pub topic: usize,
    pub mean_score: f64,
    pub size: usize,
}

/// Family label used for features without one.
pub const UNKNOWN_FAMILY: &str = "unknown";

/// Mean representativeness per (family, topic), families in name order.
pub fn family_representativeness(beta: &Array2<f64>, x: &CountMatrix) -> Result<Vec<FamilyScore>> {
    let taxonomy = x
        .taxonomy()
        .ok_or_else(|| Error::config("family summaries need a taxonomy"))?;
    if taxonomy.len() != beta.nrows() {
        return Err(Error::shape(format!("{} taxa for {} topic rows", taxonomy.len(), beta.nrows())));
    }
    let scores = representativeness_scores(beta);
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (v, t) in taxonomy.iter().enumerate() {
        groups.entry(t.family.as_deref().unwrap_or(UNKNOWN_FAMILY)).or_default().push(v);
    }
    let mut out = Vec::new();
    for (family, members) in groups {
        for k in 0..beta.ncols() {
            let total: f64 = members.iter().map(|&v| scores[[v, k]]).sum();
            out.push(FamilyScore {
                family: family.to_string(),
                topic: k,
                mean_score: total / members.len() as f64,
                size: members.len(),
            });
        }
    }
    Ok(out)
}

/// Inputs for one export.
pub enum PlotData<'a> {
    /// Posterior of `theta` (D×K); needs sample times.
    ThetaBoxes { samples: &'a PosteriorSamples, x: &'a CountMatrix },
    /// Posterior of `beta` (V×K), optionally only the `top` most abundant
    /// features, ordered by phylogenetic index when the taxonomy has one.
    BetaIntervals {
        samples: &'a PosteriorSamples,
        x: &'a CountMatrix,
        top: Option<usize>,
    },
    /// Posterior of the unigram `mu` (T×V).
    MuIntervals { samples: &'a PosteriorSamples, x: &'a CountMatrix },
    /// Predictive check reports; `qq` points get jitter from `seed`.
    PpcOverlay { reports: &'a [PpcReport], seed: u64 },
    Representativeness { table: &'a RepresentativenessTable },
}

impl PlotData<'_> {
    pub fn kind(&self) -> &'static str {
        match self {
            PlotData::ThetaBoxes { .. } => "theta_boxes",
            PlotData::BetaIntervals { .. } => "beta_intervals",
            PlotData::MuIntervals { .. } => "mu_intervals",
            PlotData::PpcOverlay { .. } => "ppc_overlay",
            PlotData::Representativeness { .. } => "representativeness",
        }
    }
}

pub fn export_plot_data(data: &PlotData<'_>, path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    match data {
        PlotData::ThetaBoxes { samples, x } => write_theta_boxes(&mut out, samples, x)?,
        PlotData::BetaIntervals { samples, x, top } => write_beta_intervals(&mut out, samples, x, *top)?,
        PlotData::MuIntervals { samples, x } => write_mu_intervals(&mut out, samples, x)?,
        PlotData::PpcOverlay { reports, seed } => write_ppc_overlay(&mut out, reports, *seed)?,
        PlotData::Representativeness { table } => {
            writeln!(out, "feature_id,topic,score,rank")?;
            for r in &table.rows {
                writeln!(out, "{},{},{},{}", r.feature_id, r.topic + 1, r.score, r.rank)?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

/// Draws of a matrix parameter, g-transformed along `axis` (0: down each
/// column, 1: across each row), as per-entry value lists, row-major.
fn g_draws(samples: &PosteriorSamples, name: &str, axis: usize) -> Result<(usize, usize, Vec<Vec<f64>>)> {
    let p = samples.require(name)?;
    if p.spec.shape.len() != 2 {
        return Err(Error::shape(format!("{name} is not matrix-valued")));
    }
    let (r, c) = (p.spec.shape[0], p.spec.shape[1]);
    let mut out = vec![Vec::with_capacity(samples.total_draws()); r * c];
    for (ch, d) in p.positions() {
        let m = p.matrix(ch, d)?;
        let lanes = if axis == 0 { m.columns() } else { m.rows() };
        for (j, lane) in lanes.into_iter().enumerate() {
            // Entries that underflowed to zero get the smallest positive value.
            let vals: Vec<f64> = lane.iter().map(|&x| x.max(f64::MIN_POSITIVE)).collect();
            for (i, g) in g_transform(&vals)?.into_iter().enumerate() {
                let (row, col) = if axis == 0 { (i, j) } else { (j, i) };
                out[row * c + col].push(g);
            }
        }
    }
    Ok((r, c, out))
}

fn quantile_cells(values: &mut [f64]) -> String {
    values.sort_by(f64::total_cmp);
    EXPORT_QUANTILES
        .iter()
        .map(|&q| quantile_sorted(values, q).to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn require_draws(samples: &PosteriorSamples) -> Result<()> {
    if samples.total_draws() == 0 {
        return Err(Error::domain("posterior sample store is empty"));
    }
    Ok(())
}

fn write_theta_boxes(out: &mut impl Write, samples: &PosteriorSamples, x: &CountMatrix) -> Result<()> {
    require_draws(samples)?;
    let times = x
        .times()
        .ok_or_else(|| Error::config("theta_boxes needs sample times"))?;
    let (d, k, mut cells) = g_draws(samples, "theta", 1)?;
    if d != x.samples() {
        return Err(Error::shape(format!("theta has {d} rows, data {} samples", x.samples())));
    }
    writeln!(out, "sample_id,time,topic,q025,q25,q50,q75,q975")?;
    for i in 0..d {
        for t in 0..k {
            let q = quantile_cells(&mut cells[i * k + t]);
            writeln!(out, "{},{},{},{}", x.sample_ids()[i], times[i], t + 1, q)?;
        }
    }
    Ok(())
}

fn write_beta_intervals(out: &mut impl Write, samples: &PosteriorSamples, x: &CountMatrix, top: Option<usize>) -> Result<()> {
    require_draws(samples)?;
    let (v, k, mut cells) = g_draws(samples, "beta", 0)?;
    if v != x.features() {
        return Err(Error::shape(format!("beta has {v} rows, data {} features", x.features())));
    }
    let mut keep: Vec<usize> = (0..v).collect();
    if let Some(m) = top {
        let totals: Vec<u64> = x.counts().columns().into_iter().map(|c| c.sum()).collect();
        keep.sort_by(|&a, &b| totals[b].cmp(&totals[a]).then(a.cmp(&b)));
        keep.truncate(m.min(v));
    }
    let taxonomy = x.taxonomy();
    let phylo = |i: usize| taxonomy.and_then(|t| t[i].phylo_index);
    keep.sort_by(|&a, &b| phylo(a).cmp(&phylo(b)).then(a.cmp(&b)));
    writeln!(out, "feature_id,family,phylo_index,topic,q025,q25,q50,q75,q975")?;
    for t in 0..k {
        for &i in &keep {
            let family = taxonomy.and_then(|tx| tx[i].family.clone()).unwrap_or_default();
            let idx = phylo(i).map(|p| p.to_string()).unwrap_or_default();
            let q = quantile_cells(&mut cells[i * k + t]);
            writeln!(out, "{},{},{},{},{}", x.feature_ids()[i], family, idx, t + 1, q)?;
        }
    }
    Ok(())
}

fn write_mu_intervals(out: &mut impl Write, samples: &PosteriorSamples, x: &CountMatrix) -> Result<()> {
    require_draws(samples)?;
    let times: Vec<f64> = match samples.meta.extra.get("times") {
        Some(t) => serde_json::from_value(t.clone())?,
        None => {
            x.time_index()
                .ok_or_else(|| Error::config("mu_intervals needs sample times"))?
                .times
        }
    };
    // g(S(mu_t)) is mu_t minus its mean, so centering each row suffices.
    let p = samples.require("mu")?;
    if p.spec.shape.len() != 2 || p.spec.shape[0] != times.len() || p.spec.shape[1] != x.features() {
        return Err(Error::shape(format!(
            "mu has shape {:?}, expected [{}, {}]",
            p.spec.shape,
            times.len(),
            x.features()
        )));
    }
    let (t_len, v) = (p.spec.shape[0], p.spec.shape[1]);
    let mut cells = vec![Vec::with_capacity(samples.total_draws()); t_len * v];
    for (ch, d) in p.positions() {
        let draw = p.draw(ch, d);
        for t in 0..t_len {
            let row = &draw[t * v..(t + 1) * v];
            let mean = row.iter().sum::<f64>() / v as f64;
            for w in 0..v {
                cells[t * v + w].push(row[w] - mean);
            }
        }
    }
    writeln!(out, "feature_id,time,q025,q25,q50,q75,q975")?;
    for w in 0..v {
        for t in 0..t_len {
            let q = quantile_cells(&mut cells[t * v + w]);
            writeln!(out, "{},{},{}", x.feature_ids()[w], times[t], q)?;
        }
    }
    Ok(())
}

fn write_ppc_overlay(out: &mut impl Write, reports: &[PpcReport], seed: u64) -> Result<()> {
    let mut rng = Rng::new(seed);
    let mut jitter = |statistic: &str| {
        if statistic == "qq" {
            QQ_JITTER * rng.uniform()
        } else {
            0.0
        }
    };
    writeln!(out, "statistic,feature,time,kind,replicate_id,value,jitter")?;
    for r in reports {
        for (i, (feature, time)) in r.keys.iter().enumerate() {
            let j = jitter(&r.statistic);
            writeln!(out, "{},{},{},observed,,{},{}", r.statistic, feature, time, r.observed[i], j)?;
            for (s, rep) in r.replicates.iter().enumerate() {
                let j = jitter(&r.statistic);
                writeln!(out, "{},{},{},replicate,{},{},{}", r.statistic, feature, time, s, rep[i], j)?;
            }
        }
    }
    Ok(())
}
