//! Posterior predictive simulation and the statistics compared between
//! observed and replicated data.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use nalgebra::DMatrix;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::corpus::{library_sizes, sample_variance, CountMatrix};
use crate::error::{Error, Result};
use crate::gap::{simulate_gap_counts, GapHyper, GapParams};
use crate::inference::{quantile_sorted, run_chains, PosteriorSamples};
use crate::numeric::{self, asinh_transform, Rng};

/// Replicates drawn when the caller does not say.
pub const DEFAULT_REPLICATES: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Lda,
    Dmm,
    Unigram,
    Gap,
    Zgap,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Lda => "lda",
            ModelKind::Dmm => "dmm",
            ModelKind::Unigram => "unigram",
            ModelKind::Gap => "gap",
            ModelKind::Zgap => "zgap",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "lda" => ModelKind::Lda,
            "dmm" => ModelKind::Dmm,
            "unigram" => ModelKind::Unigram,
            "gap" => ModelKind::Gap,
            "zgap" => ModelKind::Zgap,
            other => return Err(Error::config(format!("unknown model {other:?}"))),
        })
    }
}

/// Simulates `replicates` datasets, each from one posterior draw chosen
/// uniformly with replacement. LDA, DMM and unigram replicates keep the
/// observed library sizes; GaP replicates draw their own totals.
///
/// Replicate `r` uses stream `r` of `rng`, so the output depends only on the
/// seed and not on scheduling.
pub fn draw_posterior_predictive(
    observed: &CountMatrix,
    s: &PosteriorSamples,
    replicates: usize,
    rng: &Rng,
) -> Result<Vec<CountMatrix>> {
    if replicates == 0 {
        return Err(Error::config("need at least one predictive replicate"));
    }
    if s.is_empty() {
        return Err(Error::config("posterior sample store is empty"));
    }
    let model: ModelKind = s.meta.model.parse()?;
    let sim = Simulator::new(model, observed, s)?;
    let positions: Vec<(usize, usize)> = s.require(sim.anchor())?.positions().collect();
    run_chains(replicates, |r| {
        let mut rng = rng.split(r as u64);
        let pick = positions[(rng.uniform() * positions.len() as f64) as usize % positions.len()];
        let counts = sim.simulate(s, pick, &mut rng)?;
        observed.with_counts(counts)
    })
    .into_iter()
    .collect()
}

struct Simulator {
    model: ModelKind,
    totals: Vec<u64>,
    slots: Vec<usize>,
    d: usize,
    v: usize,
    p0: f64,
    hyper: GapHyper,
}

impl Simulator {
    fn new(model: ModelKind, x: &CountMatrix, s: &PosteriorSamples) -> Result<Self> {
        let (d, v) = x.counts().dim();
        let slots = if model == ModelKind::Unigram {
            x.time_index()
                .ok_or_else(|| Error::config("unigram replicates need sample times"))?
                .slot_of_sample
        } else {
            Vec::new()
        };
        let p0 = s.meta.extra.get("p0").and_then(|v| v.as_f64()).unwrap_or(0.0);
        let hyper = match s.meta.extra.get("hyper") {
            Some(h) => serde_json::from_value(h.clone())?,
            None => GapHyper::default(),
        };
        let sim = Simulator {
            model,
            totals: library_sizes(x),
            slots,
            d,
            v,
            p0,
            hyper,
        };
        sim.check_shapes(s)?;
        Ok(sim)
    }

    fn anchor(&self) -> &'static str {
        match self.model {
            ModelKind::Unigram => "mu",
            _ => "beta",
        }
    }

    fn check_shapes(&self, s: &PosteriorSamples) -> Result<()> {
        let expect = |name: &str, rows: usize, cols: Option<usize>| -> Result<()> {
            let shape = &s.require(name)?.spec.shape;
            let ok = shape.first() == Some(&rows) && cols.is_none_or(|c| shape.get(1) == Some(&c));
            if !ok {
                return Err(Error::shape(format!("{name} has shape {shape:?}, data are {}×{}", self.d, self.v)));
            }
            Ok(())
        };
        match self.model {
            ModelKind::Unigram => {
                let slots = self.slots.iter().max().map_or(0, |m| m + 1);
                let shape = &s.require("mu")?.spec.shape;
                if shape.len() != 2 || shape[1] != self.v || shape[0] < slots {
                    return Err(Error::shape(format!("mu has shape {shape:?}, data have {slots} slots and {} features", self.v)));
                }
                Ok(())
            }
            ModelKind::Dmm => {
                expect("beta", self.v, None)?;
                expect("z", self.d, None)
            }
            _ => {
                expect("beta", self.v, None)?;
                expect("theta", self.d, None)
            }
        }
    }

    fn simulate(&self, s: &PosteriorSamples, (c, i): (usize, usize), rng: &mut Rng) -> Result<Array2<u64>> {
        let mut counts = Array2::zeros((self.d, self.v));
        match self.model {
            ModelKind::Lda => {
                let theta = s.require("theta")?.matrix(c, i)?;
                let beta = s.require("beta")?.matrix(c, i)?;
                for d in 0..self.d {
                    let p = crate::lda::mixture(&beta, theta.row(d));
                    fill_row(&mut counts, d, self.totals[d], &p, rng);
                }
            }
            ModelKind::Dmm => {
                let z = s.require("z")?.draw(c, i);
                let beta = s.require("beta")?.matrix(c, i)?;
                for d in 0..self.d {
                    let p = beta.column(z[d] as usize).to_vec();
                    fill_row(&mut counts, d, self.totals[d], &p, rng);
                }
            }
            ModelKind::Unigram => {
                let mu = s.require("mu")?.matrix(c, i)?;
                let probs = crate::unigram::softmax_rows(&mu);
                for d in 0..self.d {
                    let p = probs.row(self.slots[d]).to_vec();
                    fill_row(&mut counts, d, self.totals[d], &p, rng);
                }
            }
            ModelKind::Gap | ModelKind::Zgap => {
                let params = GapParams {
                    theta: s.require("theta")?.matrix(c, i)?,
                    beta: s.require("beta")?.matrix(c, i)?,
                    hyper: self.hyper,
                    p0: self.p0,
                };
                counts = simulate_gap_counts(&params, rng).0;
            }
        }
        Ok(counts)
    }
}

fn fill_row(counts: &mut Array2<u64>, d: usize, n: u64, p: &[f64], rng: &mut Rng) {
    let x = numeric::multinomial(n, p, rng);
    counts.row_mut(d).iter_mut().zip(x).for_each(|(o, c)| *o = c);
}

/// One statistic evaluated on the observed data and on every replicate.
/// Entry `i` of `observed` and of each replicate share the key `keys[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PpcReport {
    pub statistic: String,
    /// `(feature, time)` per entry; either may be empty.
    pub keys: Vec<(String, String)>,
    pub observed: Vec<f64>,
    pub replicates: Vec<Vec<f64>>,
}

impl PpcReport {
    fn build<F>(statistic: &str, keys: Vec<(String, String)>, observed: &CountMatrix, replicates: &[CountMatrix], stat: F) -> Result<Self>
    where
        F: Fn(&CountMatrix) -> Vec<f64> + Sync,
    {
        for r in replicates {
            if r.counts().dim() != observed.counts().dim() {
                return Err(Error::shape(format!(
                    "replicate is {:?}, observed {:?}",
                    r.counts().dim(),
                    observed.counts().dim()
                )));
            }
        }
        let report = PpcReport {
            statistic: statistic.into(),
            keys,
            observed: stat(observed),
            replicates: run_chains(replicates.len(), |i| stat(&replicates[i])),
        };
        debug_assert!(report.replicates.iter().all(|r| r.len() == report.observed.len()));
        Ok(report)
    }

    pub fn replicate_count(&self) -> usize {
        self.replicates.len()
    }

    pub fn len(&self) -> usize {
        self.observed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observed.is_empty()
    }

    /// Replicate values of entry `i`.
    pub fn reference(&self, i: usize) -> Vec<f64> {
        self.replicates.iter().map(|r| r[i]).collect()
    }
}

/// Writes reports as `statistic,feature,time,kind,replicate_id,value`.
pub fn write_ppc_csv(reports: &[PpcReport], path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "statistic,feature,time,kind,replicate_id,value")?;
    for r in reports {
        for (i, (feature, time)) in r.keys.iter().enumerate() {
            writeln!(out, "{},{},{},observed,,{}", r.statistic, feature, time, r.observed[i])?;
            for (s, rep) in r.replicates.iter().enumerate() {
                writeln!(out, "{},{},{},replicate,{},{}", r.statistic, feature, time, s, rep[i])?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

/// Reads what [`write_ppc_csv`] wrote. Statistics and keys keep their
/// order of first appearance.
pub fn read_ppc_csv(path: &Path) -> Result<Vec<PpcReport>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut reports: Vec<PpcReport> = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let bad = |column: &str, message: String| Error::Parse {
            path: path.to_path_buf(),
            row: (line + 2).to_string(),
            column: column.into(),
            message,
        };
        if rec.len() != 6 {
            return Err(bad("", format!("expected 6 fields, found {}", rec.len())));
        }
        let value: f64 = rec[5].parse().map_err(|_| bad("value", format!("not a number: {:?}", &rec[5])))?;
        if reports.last().map(|r| r.statistic != rec[0]).unwrap_or(true) {
            reports.push(PpcReport {
                statistic: rec[0].to_string(),
                keys: Vec::new(),
                observed: Vec::new(),
                replicates: Vec::new(),
            });
        }
        let r = reports.last_mut().expect("pushed above");
        match &rec[3] {
            "observed" => {
                r.keys.push((rec[1].to_string(), rec[2].to_string()));
                r.observed.push(value);
            }
            "replicate" => {
                let id: usize = rec[4].parse().map_err(|_| bad("replicate_id", format!("not an index: {:?}", &rec[4])))?;
                let i = r.observed.len().checked_sub(1).ok_or_else(|| bad("kind", "replicate before observed".into()))?;
                if r.keys[i].0 != rec[1] || r.keys[i].1 != rec[2] {
                    return Err(bad("feature", "replicate key differs from its observed row".into()));
                }
                if i == 0 {
                    if id != r.replicates.len() {
                        return Err(bad("replicate_id", format!("expected {}, found {id}", r.replicates.len())));
                    }
                    r.replicates.push(vec![value]);
                } else {
                    let rep = r.replicates.get_mut(id).ok_or_else(|| bad("replicate_id", format!("unknown replicate {id}")))?;
                    if rep.len() != i {
                        return Err(bad("replicate_id", format!("replicate {id} out of order")));
                    }
                    rep.push(value);
                }
            }
            other => return Err(bad("kind", format!("unknown kind {other:?}"))),
        }
    }
    for r in &reports {
        if r.replicates.iter().any(|rep| rep.len() != r.observed.len()) {
            return Err(Error::shape(format!("{}: ragged replicates in {}", r.statistic, path.display())));
        }
    }
    Ok(reports)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dim {
    /// One value per sample (row).
    Sample,
    /// One value per feature (column).
    Feature,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalarStat {
    Mean(Dim),
    Variance(Dim),
    /// Counts of all entries per bin `[e_i, e_{i+1})`; the last bin also
    /// holds its right edge when finite.
    Histogram(Vec<f64>),
}

fn per_dim(x: &CountMatrix, dim: Dim, f: fn(&[f64]) -> f64) -> Vec<f64> {
    let counts = x.counts();
    let lanes = match dim {
        Dim::Sample => counts.rows(),
        Dim::Feature => counts.columns(),
    };
    lanes
        .into_iter()
        .map(|lane| f(&lane.iter().map(|&c| c as f64).collect::<Vec<_>>()))
        .collect()
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

fn histogram(values: impl Iterator<Item = f64>, edges: &[f64]) -> Vec<f64> {
    let bins = edges.len() - 1;
    let mut out = vec![0.0; bins];
    for x in values {
        let upper = edges.partition_point(|&e| e <= x);
        if upper == 0 {
            continue;
        }
        if upper <= bins {
            out[upper - 1] += 1.0;
        } else if x == edges[bins] {
            out[bins - 1] += 1.0;
        }
    }
    out
}

pub fn ppc_scalar_stats(observed: &CountMatrix, replicates: &[CountMatrix], spec: &ScalarStat) -> Result<PpcReport> {
    let key = |x: &CountMatrix, dim: Dim| -> Vec<(String, String)> {
        match dim {
            Dim::Sample => x.sample_ids().iter().map(|s| (s.clone(), String::new())).collect(),
            Dim::Feature => x.feature_ids().iter().map(|f| (f.clone(), String::new())).collect(),
        }
    };
    match spec {
        ScalarStat::Mean(dim) => {
            let dim = *dim;
            PpcReport::build("mean", key(observed, dim), observed, replicates, |x| per_dim(x, dim, mean))
        }
        ScalarStat::Variance(dim) => {
            let dim = *dim;
            PpcReport::build("variance", key(observed, dim), observed, replicates, |x| {
                per_dim(x, dim, sample_variance)
            })
        }
        ScalarStat::Histogram(edges) => {
            if edges.len() < 2 {
                return Err(Error::config("histogram needs at least two bin edges"));
            }
            if edges.windows(2).any(|w| !(w[0] < w[1])) {
                return Err(Error::config("histogram edges must be strictly increasing"));
            }
            let keys = edges
                .windows(2)
                .map(|w| (format!("[{};{})", w[0], w[1]), String::new()))
                .collect();
            PpcReport::build("histogram", keys, observed, replicates, |x| {
                histogram(x.counts().iter().map(|&c| c as f64), edges)
            })
        }
    }
}

/// Asinh-transformed trajectories of the chosen features, keyed by
/// `(feature, time)`, one entry per sample in time order.
pub fn ppc_timeseries(observed: &CountMatrix, replicates: &[CountMatrix], features: &[String]) -> Result<PpcReport> {
    let times = observed
        .times()
        .ok_or_else(|| Error::config("time series checks need sample times"))?;
    let cols = features
        .iter()
        .map(|f| {
            observed
                .feature_position(f)
                .ok_or_else(|| Error::Bounds(format!("unknown feature id {f:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut order: Vec<usize> = (0..observed.samples()).collect();
    order.sort_by(|&a, &b| times[a].total_cmp(&times[b]).then(a.cmp(&b)));
    let mut keys = Vec::with_capacity(cols.len() * order.len());
    for f in features {
        for &d in &order {
            keys.push((f.clone(), times[d].to_string()));
        }
    }
    PpcReport::build("timeseries", keys, observed, replicates, |x| {
        let c = x.counts();
        cols.iter()
            .flat_map(|&v| order.iter().map(move |&d| asinh_transform(c[[d, v]] as f64)))
            .collect()
    })
}

/// Principal components of a transformed, column-centered count matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct PcaSummary {
    /// `s_i^2 / (D - 1)`, nonincreasing.
    pub eigenvalues: Vec<f64>,
    /// Left singular vectors scaled by their singular values, D×r.
    pub scores: Array2<f64>,
    /// Unit-norm right singular vectors, m×r.
    pub loadings: Array2<f64>,
    /// Columns of the original matrix that entered the decomposition.
    pub features: Vec<usize>,
}

/// The `m` columns with the largest variance after the asinh transform,
/// ties broken by position, returned in ascending order.
pub fn top_variance_features(x: &CountMatrix, m: usize) -> Result<Vec<usize>> {
    if m == 0 || m > x.features() {
        return Err(Error::domain(format!("m = {m} must lie in 1..={}", x.features())));
    }
    let vars: Vec<f64> = x
        .counts()
        .columns()
        .into_iter()
        .map(|col| sample_variance(&col.iter().map(|&c| asinh_transform(c as f64)).collect::<Vec<_>>()))
        .collect();
    let mut order: Vec<usize> = (0..vars.len()).collect();
    order.sort_by(|&a, &b| vars[b].total_cmp(&vars[a]).then(a.cmp(&b)));
    let mut keep = order[..m].to_vec();
    keep.sort_unstable();
    Ok(keep)
}

/// Rank-`r` PCA of `asinh(x)` restricted to `features`.
pub fn pca_summary(x: &CountMatrix, features: &[usize], r: usize) -> Result<PcaSummary> {
    let d = x.samples();
    let m = features.len();
    if r == 0 || r > d.min(m) {
        return Err(Error::domain(format!("rank {r} must lie in 1..={}", d.min(m))));
    }
    if d < 2 {
        return Err(Error::domain("PCA needs at least two samples"));
    }
    if let Some(&bad) = features.iter().find(|&&f| f >= x.features()) {
        return Err(Error::Bounds(format!("feature {bad} of {}", x.features())));
    }
    let counts = x.counts();
    let mut a = DMatrix::from_fn(d, m, |i, j| asinh_transform(counts[[i, features[j]]] as f64));
    for mut col in a.column_iter_mut() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
    }
    let svd = a.svd(true, true);
    let (u, vt) = (svd.u.expect("requested"), svd.v_t.expect("requested"));
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]).then(i.cmp(&j)));
    let mut scores = Array2::zeros((d, r));
    let mut loadings = Array2::zeros((m, r));
    let mut eigenvalues = Vec::with_capacity(r);
    for (axis, &i) in order.iter().take(r).enumerate() {
        let s = svd.singular_values[i];
        eigenvalues.push(s * s / (d - 1) as f64);
        // Sign convention: the largest-magnitude loading is positive.
        let row = vt.row(i);
        let pivot = (0..m).fold(0, |best, j| if row[j].abs() > row[best].abs() { j } else { best });
        let sign = if row[pivot] < 0.0 { -1.0 } else { 1.0 };
        for j in 0..m {
            loadings[[j, axis]] = sign * row[j];
        }
        for k in 0..d {
            scores[[k, axis]] = sign * s * u[(k, i)];
        }
    }
    Ok(PcaSummary {
        eigenvalues,
        scores,
        loadings,
        features: features.to_vec(),
    })
}

/// PCA of the observed data and of each replicate, all on the `m`
/// highest-variance observed features.
pub fn ppc_pca(observed: &CountMatrix, replicates: &[CountMatrix], r: usize, m: usize) -> Result<(PcaSummary, Vec<PcaSummary>)> {
    let features = top_variance_features(observed, m)?;
    let obs = pca_summary(observed, &features, r)?;
    let reps = run_chains(replicates.len(), |i| pca_summary(&replicates[i], &features, r))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok((obs, reps))
}

/// Eigenvalues of the observed data and of each replicate as a report.
pub fn eigenvalue_report(observed: &PcaSummary, replicates: &[PcaSummary]) -> PpcReport {
    PpcReport {
        statistic: "eigenvalue".into(),
        keys: (0..observed.eigenvalues.len()).map(|i| (format!("lambda{}", i + 1), String::new())).collect(),
        observed: observed.eigenvalues.clone(),
        replicates: replicates.iter().map(|p| p.eigenvalues.clone()).collect(),
    }
}

/// The orthogonal `R` minimizing `|target R - reference|_F` over scores.
pub fn procrustes_rotation(reference: &Array2<f64>, target: &Array2<f64>) -> Result<Array2<f64>> {
    if reference.dim() != target.dim() {
        return Err(Error::shape(format!(
            "reference scores are {:?}, target {:?}",
            reference.dim(),
            target.dim()
        )));
    }
    let r = reference.ncols();
    let m = target.t().dot(reference);
    let svd = DMatrix::from_fn(r, r, |i, j| m[[i, j]]).svd(true, true);
    let rot = svd.u.expect("requested") * svd.v_t.expect("requested");
    Ok(Array2::from_shape_fn((r, r), |(i, j)| rot[(i, j)]))
}

/// Rotates `target`'s scores and loadings onto `reference`.
pub fn procrustes_align(reference: &PcaSummary, target: &PcaSummary) -> Result<PcaSummary> {
    if reference.loadings.dim() != target.loadings.dim() {
        return Err(Error::shape(format!(
            "reference loadings are {:?}, target {:?}",
            reference.loadings.dim(),
            target.loadings.dim()
        )));
    }
    let rot = procrustes_rotation(&reference.scores, &target.scores)?;
    Ok(PcaSummary {
        eigenvalues: target.eigenvalues.clone(),
        scores: target.scores.dot(&rot),
        loadings: target.loadings.dot(&rot),
        features: target.features.clone(),
    })
}

/// Type-7 quantiles of all entries pooled, observed against each replicate.
pub fn ppc_quantile_qq(observed: &CountMatrix, replicates: &[CountMatrix], grid: &[f64]) -> Result<PpcReport> {
    if let Some(p) = grid.iter().find(|p| !(**p > 0.0 && **p < 1.0)) {
        return Err(Error::domain(format!("quantile level {p} is outside (0, 1)")));
    }
    let keys = grid.iter().map(|p| (p.to_string(), String::new())).collect();
    PpcReport::build("qq", keys, observed, replicates, |x| {
        let mut v: Vec<f64> = x.counts().iter().map(|&c| c as f64).collect();
        v.sort_by(f64::total_cmp);
        grid.iter().map(|&p| if v.is_empty() { 0.0 } else { quantile_sorted(&v, p) }).collect()
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FeatureScore {
    pub feature: String,
    pub score: f64,
}

/// `mean_{d, s} |asinh x_dv - asinh x*_dv|` per feature, highest first,
/// ties by position.
pub fn species_discrepancy(observed: &CountMatrix, replicates: &[CountMatrix]) -> Result<Vec<FeatureScore>> {
    if replicates.is_empty() {
        return Err(Error::config("need at least one replicate"));
    }
    let (d, v) = observed.counts().dim();
    let obs = observed.counts().mapv(|c| asinh_transform(c as f64));
    let mut scores = vec![0.0; v];
    for r in replicates {
        if r.counts().dim() != (d, v) {
            return Err(Error::shape("replicate and observed shapes differ"));
        }
        for ((idx, &c), o) in r.counts().indexed_iter().zip(obs.iter()) {
            scores[idx.1] += (o - asinh_transform(c as f64)).abs();
        }
    }
    let n = (d * replicates.len()) as f64;
    let mut order: Vec<usize> = (0..v).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    Ok(order
        .into_iter()
        .map(|i| FeatureScore {
            feature: observed.feature_ids()[i].clone(),
            score: scores[i] / n,
        })
        .collect())
}
