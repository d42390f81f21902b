//! Count-matrix data model, CSV ingestion and feature filtering.

use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::asinh_transform;

/// Pseudocount added to raw proportions before taking logs for display.
pub const DISPLAY_PSEUDOCOUNT: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Taxon {
    pub family: Option<String>,
    pub phylo_index: Option<i64>,
}

/// D samples by V features of nonnegative integer counts.
#[derive(Clone, Debug, PartialEq)]
pub struct CountMatrix {
    counts: Array2<u64>,
    sample_ids: Vec<String>,
    feature_ids: Vec<String>,
    times: Option<Vec<f64>>,
    taxonomy: Option<Vec<Taxon>>,
}

/// Distinct observed times, sorted, and the slot each sample falls in.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeIndex {
    pub times: Vec<f64>,
    pub slot_of_sample: Vec<usize>,
}

impl TimeIndex {
    pub fn from_times(times: &[f64]) -> Self {
        let mut distinct = times.to_vec();
        distinct.sort_by(f64::total_cmp);
        distinct.dedup();
        let slot_of_sample = times
            .iter()
            .map(|t| distinct.iter().position(|u| u == t).expect("present"))
            .collect();
        TimeIndex {
            times: distinct,
            slot_of_sample,
        }
    }

    /// One sample per slot, slots in sample order.
    pub fn sequential(d: usize) -> Self {
        TimeIndex {
            times: (0..d).map(|t| t as f64).collect(),
            slot_of_sample: (0..d).collect(),
        }
    }

    pub fn slots(&self) -> usize {
        self.times.len()
    }

    pub fn validate(&self, samples: usize) -> Result<()> {
        if self.slot_of_sample.len() != samples {
            return Err(Error::domain(format!(
                "time index covers {} samples, data has {samples}",
                self.slot_of_sample.len()
            )));
        }
        if self.times.is_empty() {
            return Err(Error::domain("time index has no slots"));
        }
        if let Some(bad) = self.slot_of_sample.iter().find(|&&t| t >= self.times.len()) {
            return Err(Error::domain(format!(
                "sample mapped to slot {bad}, only {} slots",
                self.times.len()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterMode {
    TopAbundance,
    TopVariance,
}

fn check_unique(ids: &[String], what: &str) -> Result<()> {
    let mut seen = HashSet::new();
    for id in ids {
        if !seen.insert(id.as_str()) {
            return Err(Error::domain(format!("duplicate {what} id '{id}'")));
        }
    }
    Ok(())
}

impl CountMatrix {
    pub fn new(counts: Array2<u64>, sample_ids: Vec<String>, feature_ids: Vec<String>) -> Result<Self> {
        let (d, v) = counts.dim();
        if sample_ids.len() != d || feature_ids.len() != v {
            return Err(Error::shape(format!(
                "{d}x{v} counts with {} sample ids and {} feature ids",
                sample_ids.len(),
                feature_ids.len()
            )));
        }
        check_unique(&sample_ids, "sample")?;
        check_unique(&feature_ids, "feature")?;
        Ok(CountMatrix {
            counts,
            sample_ids,
            feature_ids,
            times: None,
            taxonomy: None,
        })
    }

    /// Matrix with generated ids `s1..sD`, `f1..fV`.
    pub fn from_counts(counts: Array2<u64>) -> Self {
        let (d, v) = counts.dim();
        let sample_ids = (1..=d).map(|i| format!("s{i}")).collect();
        let feature_ids = (1..=v).map(|i| format!("f{i}")).collect();
        CountMatrix::new(counts, sample_ids, feature_ids).expect("generated ids are unique")
    }

    pub fn with_times(mut self, times: Vec<f64>) -> Result<Self> {
        if times.len() != self.samples() {
            return Err(Error::shape(format!(
                "{} times for {} samples",
                times.len(),
                self.samples()
            )));
        }
        if times.iter().any(|t| !t.is_finite() || *t < 0.0) {
            return Err(Error::domain("sample times must be finite and nonnegative"));
        }
        self.times = Some(times);
        Ok(self)
    }

    pub fn with_taxonomy(mut self, taxonomy: Vec<Taxon>) -> Result<Self> {
        if taxonomy.len() != self.features() {
            return Err(Error::shape(format!(
                "{} taxonomy records for {} features",
                taxonomy.len(),
                self.features()
            )));
        }
        let mut seen = HashSet::new();
        for t in &taxonomy {
            if let Some(i) = t.phylo_index {
                if !seen.insert(i) {
                    return Err(Error::domain(format!("phylo_index {i} used twice")));
                }
            }
        }
        self.taxonomy = Some(taxonomy);
        Ok(self)
    }

    pub fn counts(&self) -> &Array2<u64> {
        &self.counts
    }

    pub fn samples(&self) -> usize {
        self.counts.nrows()
    }

    pub fn features(&self) -> usize {
        self.counts.ncols()
    }

    pub fn sample_ids(&self) -> &[String] {
        &self.sample_ids
    }

    pub fn feature_ids(&self) -> &[String] {
        &self.feature_ids
    }

    pub fn times(&self) -> Option<&[f64]> {
        self.times.as_deref()
    }

    pub fn taxonomy(&self) -> Option<&[Taxon]> {
        self.taxonomy.as_deref()
    }

    pub fn row(&self, d: usize) -> ArrayView1<'_, u64> {
        self.counts.row(d)
    }

    pub fn time_index(&self) -> Option<TimeIndex> {
        self.times.as_deref().map(TimeIndex::from_times)
    }

    pub fn total(&self) -> u64 {
        self.counts.sum()
    }

    pub fn feature_position(&self, id: &str) -> Option<usize> {
        self.feature_ids.iter().position(|f| f == id)
    }

    /// Same samples and metadata, different counts.
    pub fn with_counts(&self, counts: Array2<u64>) -> Result<Self> {
        if counts.dim() != self.counts.dim() {
            return Err(Error::shape(format!(
                "replacement counts {:?} differ from {:?}",
                counts.dim(),
                self.counts.dim()
            )));
        }
        let mut out = self.clone();
        out.counts = counts;
        Ok(out)
    }

    /// Keeps the given feature columns, in the given order.
    pub fn select_features(&self, keep: &[usize]) -> CountMatrix {
        CountMatrix {
            counts: self.counts.select(Axis(1), keep),
            sample_ids: self.sample_ids.clone(),
            feature_ids: keep.iter().map(|&j| self.feature_ids[j].clone()).collect(),
            times: self.times.clone(),
            taxonomy: self
                .taxonomy
                .as_ref()
                .map(|t| keep.iter().map(|&j| t[j].clone()).collect()),
        }
    }

    /// Row proportions after adding [`DISPLAY_PSEUDOCOUNT`] to every cell.
    pub fn display_proportions(&self, d: usize) -> Vec<f64> {
        let row = self.counts.row(d);
        let total = row.sum() as f64 + DISPLAY_PSEUDOCOUNT * row.len() as f64;
        row.iter()
            .map(|&x| (x as f64 + DISPLAY_PSEUDOCOUNT) / total)
            .collect()
    }
}

/// Total count per sample.
pub fn library_sizes(x: &CountMatrix) -> Vec<u64> {
    x.counts.rows().into_iter().map(|r| r.sum()).collect()
}

/// Keeps the `m` features with the largest total count or the largest variance
/// of asinh-transformed counts. Column order is preserved; ties go to the
/// lexicographically smaller feature id.
pub fn filter_features(x: &CountMatrix, mode: FilterMode, m: usize) -> Result<CountMatrix> {
    let v = x.features();
    if m == 0 || m > v {
        return Err(Error::Bounds(format!("cannot keep {m} of {v} features")));
    }
    let scores: Vec<f64> = match mode {
        FilterMode::TopAbundance => x
            .counts
            .columns()
            .into_iter()
            .map(|c| c.sum() as f64)
            .collect(),
        FilterMode::TopVariance => x
            .counts
            .columns()
            .into_iter()
            .map(|c| {
                let t: Vec<f64> = c.iter().map(|&n| asinh_transform(n as f64)).collect();
                sample_variance(&t)
            })
            .collect(),
    };
    let mut order: Vec<usize> = (0..v).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .total_cmp(&scores[a])
            .then_with(|| x.feature_ids[a].cmp(&x.feature_ids[b]))
    });
    let mut keep = order[..m].to_vec();
    keep.sort_unstable();
    Ok(x.select_features(&keep))
}

pub(crate) fn sample_variance(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
}

fn parse_error(path: &Path, row: impl Into<String>, column: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        row: row.into(),
        column: column.into(),
        message: message.into(),
    }
}

fn reader(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    Ok(csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)?)
}

fn expect_header(path: &Path, headers: &csv::StringRecord, expected: &[&str]) -> Result<()> {
    let got: Vec<&str> = headers.iter().collect();
    if got != expected {
        return Err(parse_error(
            path,
            "header",
            got.join(","),
            format!("expected header '{}'", expected.join(",")),
        ));
    }
    Ok(())
}

/// Reads a counts table plus optional sample metadata and taxonomy.
pub fn read_counts(
    counts_path: &Path,
    sample_meta_path: Option<&Path>,
    taxonomy_path: Option<&Path>,
) -> Result<CountMatrix> {
    let mut rdr = reader(counts_path)?;
    let headers = rdr.headers()?.clone();
    if headers.get(0) != Some("sample_id") {
        return Err(parse_error(
            counts_path,
            "header",
            headers.get(0).unwrap_or(""),
            "first column must be 'sample_id'",
        ));
    }
    let feature_ids: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
    if feature_ids.is_empty() {
        return Err(parse_error(counts_path, "header", "", "no feature columns"));
    }
    if let Err(Error::Domain(msg)) = check_unique(&feature_ids, "feature") {
        return Err(parse_error(counts_path, "header", "", msg));
    }
    let v = feature_ids.len();
    let mut sample_ids = Vec::new();
    let mut cells = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let record = record?;
        let sample = record.get(0).unwrap_or("").to_string();
        let row_label = if sample.is_empty() { format!("line {}", i + 2) } else { sample.clone() };
        if record.len() != v + 1 {
            return Err(parse_error(
                counts_path,
                row_label,
                "",
                format!("expected {} cells, found {}", v + 1, record.len()),
            ));
        }
        if sample.is_empty() {
            return Err(parse_error(counts_path, row_label, "sample_id", "empty sample id"));
        }
        for (j, cell) in record.iter().skip(1).enumerate() {
            let value: u64 = cell.parse().map_err(|_| {
                parse_error(
                    counts_path,
                    &sample,
                    &feature_ids[j],
                    format!("'{cell}' is not a nonnegative integer"),
                )
            })?;
            cells.push(value);
        }
        sample_ids.push(sample);
    }
    if let Err(Error::Domain(msg)) = check_unique(&sample_ids, "sample") {
        return Err(parse_error(counts_path, "", "sample_id", msg));
    }
    let d = sample_ids.len();
    let counts = Array2::from_shape_vec((d, v), cells).expect("rectangular by construction");
    let mut x = CountMatrix::new(counts, sample_ids, feature_ids)?;

    if let Some(path) = sample_meta_path {
        let times = read_sample_meta(path, &x.sample_ids)?;
        x = x.with_times(times)?;
    }
    if let Some(path) = taxonomy_path {
        let taxonomy = read_taxonomy(path, &x.feature_ids)?;
        x = x.with_taxonomy(taxonomy)?;
    }
    Ok(x)
}

fn read_sample_meta(path: &Path, sample_ids: &[String]) -> Result<Vec<f64>> {
    let mut rdr = reader(path)?;
    expect_header(path, rdr.headers()?, &["sample_id", "time"])?;
    let position: HashMap<&str, usize> = sample_ids
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i))
        .collect();
    let mut times = vec![None; sample_ids.len()];
    for record in rdr.records() {
        let record = record?;
        let id = record.get(0).unwrap_or("");
        let cell = record.get(1).unwrap_or("");
        let &i = position
            .get(id)
            .ok_or_else(|| parse_error(path, id, "sample_id", "sample not present in counts"))?;
        let t: f64 = cell
            .parse()
            .ok()
            .filter(|t: &f64| t.is_finite() && *t >= 0.0)
            .ok_or_else(|| parse_error(path, id, "time", format!("'{cell}' is not a nonnegative decimal")))?;
        if times[i].replace(t).is_some() {
            return Err(parse_error(path, id, "sample_id", "duplicate sample id"));
        }
    }
    times
        .into_iter()
        .zip(sample_ids)
        .map(|(t, id)| t.ok_or_else(|| parse_error(path, id.as_str(), "time", "sample missing from metadata")))
        .collect()
}

fn read_taxonomy(path: &Path, feature_ids: &[String]) -> Result<Vec<Taxon>> {
    let mut rdr = reader(path)?;
    expect_header(path, rdr.headers()?, &["feature_id", "family", "phylo_index"])?;
    let position: HashMap<&str, usize> = feature_ids
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i))
        .collect();
    let mut out: Vec<Option<Taxon>> = vec![None; feature_ids.len()];
    for record in rdr.records() {
        let record = record?;
        let id = record.get(0).unwrap_or("");
        let &j = position
            .get(id)
            .ok_or_else(|| parse_error(path, id, "feature_id", "feature not present in counts"))?;
        let family = record.get(1).filter(|f| !f.is_empty()).map(str::to_string);
        let phylo = record.get(2).unwrap_or("");
        let phylo_index = if phylo.is_empty() {
            None
        } else {
            Some(phylo.parse::<i64>().map_err(|_| {
                parse_error(path, id, "phylo_index", format!("'{phylo}' is not an integer"))
            })?)
        };
        if out[j].replace(Taxon { family, phylo_index }).is_some() {
            return Err(parse_error(path, id, "feature_id", "duplicate feature id"));
        }
    }
    Ok(out
        .into_iter()
        .map(|t| {
            t.unwrap_or(Taxon {
                family: None,
                phylo_index: None,
            })
        })
        .collect())
}

/// Writes the counts table, and the metadata tables when present, returning
/// the paths written.
pub fn write_counts(x: &CountMatrix, counts_path: &Path) -> Result<Vec<PathBuf>> {
    let mut written = vec![counts_path.to_path_buf()];
    let mut w = csv::WriterBuilder::new().from_path(counts_path)?;
    let mut header = vec!["sample_id".to_string()];
    header.extend(x.feature_ids.iter().cloned());
    w.write_record(&header)?;
    for (d, id) in x.sample_ids.iter().enumerate() {
        let mut rec = vec![id.clone()];
        rec.extend(x.counts.row(d).iter().map(|c| c.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    if x.times.is_some() {
        let path = counts_path.with_file_name(sibling_name(counts_path, "sample_meta"));
        write_sample_meta(x, &path)?;
        written.push(path);
    }
    if x.taxonomy.is_some() {
        let path = counts_path.with_file_name(sibling_name(counts_path, "taxonomy"));
        write_taxonomy(x, &path)?;
        written.push(path);
    }
    Ok(written)
}

fn sibling_name(counts_path: &Path, suffix: &str) -> String {
    let stem = counts_path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("counts");
    let base = stem.strip_suffix("counts").unwrap_or(stem);
    format!("{base}{suffix}.csv")
}

pub fn write_sample_meta(x: &CountMatrix, path: &Path) -> Result<()> {
    let times = x
        .times
        .as_ref()
        .ok_or_else(|| Error::domain("matrix has no sample times"))?;
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["sample_id", "time"])?;
    for (id, t) in x.sample_ids.iter().zip(times) {
        w.write_record([id.as_str(), &t.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_taxonomy(x: &CountMatrix, path: &Path) -> Result<()> {
    let taxonomy = x
        .taxonomy
        .as_ref()
        .ok_or_else(|| Error::domain("matrix has no taxonomy"))?;
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["feature_id", "family", "phylo_index"])?;
    for (id, t) in x.feature_ids.iter().zip(taxonomy) {
        w.write_record([
            id.clone(),
            t.family.clone().unwrap_or_default(),
            t.phylo_index.map(|i| i.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
