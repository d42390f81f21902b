use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How a parameter's indices relate to topic labels, so alignment knows what
/// to permute.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "axis")]
pub enum TopicRole {
    None,
    /// The given index axis runs over topics.
    Axis(usize),
    /// Values are topic labels (0-based).
    Labels,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub shape: Vec<usize>,
    pub topic: TopicRole,
}

impl ParamSpec {
    pub fn size(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Draws of one parameter: per chain, `draws * size` values, draw-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamArray {
    pub spec: ParamSpec,
    chains: Vec<Vec<f64>>,
}

impl ParamArray {
    pub fn size(&self) -> usize {
        self.spec.size()
    }

    pub fn chains(&self) -> usize {
        self.chains.len()
    }

    pub fn draws(&self) -> usize {
        match self.chains.first() {
            Some(c) if self.size() > 0 => c.len() / self.size(),
            _ => 0,
        }
    }

    pub fn draw(&self, chain: usize, draw: usize) -> &[f64] {
        let s = self.size();
        &self.chains[chain][draw * s..(draw + 1) * s]
    }

    pub fn draw_mut(&mut self, chain: usize, draw: usize) -> &mut [f64] {
        let s = self.size();
        &mut self.chains[chain][draw * s..(draw + 1) * s]
    }

    /// Trace of one scalar component within one chain.
    pub fn chain_series(&self, chain: usize, flat: usize) -> Vec<f64> {
        let s = self.size();
        self.chains[chain].iter().skip(flat).step_by(s).copied().collect()
    }

    /// All draws of one scalar component, chains concatenated in order.
    pub fn pooled(&self, flat: usize) -> Vec<f64> {
        (0..self.chains()).flat_map(|c| self.chain_series(c, flat)).collect()
    }

    /// A draw of a two-axis parameter as a matrix.
    pub fn matrix(&self, chain: usize, draw: usize) -> Result<Array2<f64>> {
        if self.spec.shape.len() != 2 {
            return Err(Error::shape(format!("parameter has shape {:?}, not a matrix", self.spec.shape)));
        }
        let (r, c) = (self.spec.shape[0], self.spec.shape[1]);
        Ok(Array2::from_shape_vec((r, c), self.draw(chain, draw).to_vec()).expect("sized"))
    }

    /// Iterator over (chain, draw) pairs in storage order.
    pub fn positions(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let draws = self.draws();
        (0..self.chains()).flat_map(move |c| (0..draws).map(move |d| (c, d)))
    }

    pub fn unflatten(&self, flat: usize) -> Vec<usize> {
        let mut out = vec![0; self.spec.shape.len()];
        let mut rem = flat;
        for (axis, &len) in self.spec.shape.iter().enumerate().rev() {
            out[axis] = rem % len;
            rem /= len;
        }
        out
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub model: String,
    pub method: String,
    pub seed: u64,
    pub warmup: usize,
    pub iters: usize,
    #[serde(default)]
    pub warnings: Vec<String>,
    /// Model-specific context (time slots, assumed p0, failure counts, ...).
    #[serde(default)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

/// Tagged store of parameter draws indexed by (name, index, chain, draw).
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorSamples {
    pub meta: SampleMeta,
    params: BTreeMap<String, ParamArray>,
}

/// Draws from one chain, accumulated one draw at a time.
#[derive(Clone, Debug, Default)]
pub struct Trace {
    specs: BTreeMap<String, ParamSpec>,
    values: BTreeMap<String, Vec<f64>>,
    draws: usize,
}

impl Trace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn declare(&mut self, name: &str, shape: Vec<usize>, topic: TopicRole) -> &mut Self {
        self.specs.insert(name.to_string(), ParamSpec { shape, topic });
        self.values.insert(name.to_string(), Vec::new());
        self
    }

    pub fn push(&mut self, name: &str, values: &[f64]) {
        let spec = &self.specs[name];
        debug_assert_eq!(spec.size(), values.len(), "parameter {name}");
        self.values.get_mut(name).expect("declared").extend_from_slice(values);
    }

    /// Marks the end of a draw; every declared parameter must have been pushed.
    pub fn end_draw(&mut self) {
        self.draws += 1;
        debug_assert!(self
            .specs
            .iter()
            .all(|(n, s)| self.values[n].len() == s.size() * self.draws));
    }

    pub fn draws(&self) -> usize {
        self.draws
    }
}

impl PosteriorSamples {
    /// Merges per-chain traces. All chains must declare the same parameters
    /// and hold the same number of draws.
    pub fn from_traces(meta: SampleMeta, traces: Vec<Trace>) -> Result<Self> {
        let first = traces
            .first()
            .ok_or_else(|| Error::shape("no chains to merge"))?;
        let mut params: BTreeMap<String, ParamArray> = first
            .specs
            .iter()
            .map(|(n, s)| {
                (
                    n.clone(),
                    ParamArray {
                        spec: s.clone(),
                        chains: Vec::new(),
                    },
                )
            })
            .collect();
        let draws = first.draws;
        for trace in traces {
            if trace.draws != draws || trace.specs.len() != params.len() {
                return Err(Error::shape("chains disagree on parameters or draw count"));
            }
            for (name, values) in trace.values {
                let p = params
                    .get_mut(&name)
                    .ok_or_else(|| Error::shape(format!("chain has unknown parameter {name}")))?;
                if p.spec != trace.specs[&name] {
                    return Err(Error::shape(format!("chains disagree on shape of {name}")));
                }
                p.chains.push(values);
            }
        }
        let s = PosteriorSamples { meta, params };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let mut dims = None;
        for (name, p) in &self.params {
            let here = (p.chains(), p.draws());
            if *dims.get_or_insert(here) != here {
                return Err(Error::shape(format!("{name} has (chain, draw) shape {here:?}, others {dims:?}")));
            }
            if p.chains.iter().flatten().any(|v| v.is_nan()) {
                return Err(Error::domain(format!("{name} contains NaN draws")));
            }
        }
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn param(&self, name: &str) -> Option<&ParamArray> {
        self.params.get(name)
    }

    pub fn require(&self, name: &str) -> Result<&ParamArray> {
        self.param(name)
            .ok_or_else(|| Error::config(format!("samples have no parameter '{name}'")))
    }

    pub(crate) fn params_mut(&mut self) -> impl Iterator<Item = (&String, &mut ParamArray)> {
        self.params.iter_mut()
    }

    pub fn params(&self) -> impl Iterator<Item = (&String, &ParamArray)> {
        self.params.iter()
    }

    pub fn chains(&self) -> usize {
        self.params.values().next().map_or(0, ParamArray::chains)
    }

    pub fn draws_per_chain(&self) -> usize {
        self.params.values().next().map_or(0, ParamArray::draws)
    }

    pub fn total_draws(&self) -> usize {
        self.chains() * self.draws_per_chain()
    }

    pub fn is_empty(&self) -> bool {
        self.total_draws() == 0
    }

    /// Keeps only the named parameters.
    pub fn retain(&mut self, keep: &[&str]) {
        self.params.retain(|k, _| keep.contains(&k.as_str()));
    }

    /// Long-format CSV `param,idx1,idx2,chain,draw,value` plus a JSON sidecar
    /// (same stem, `.json`) holding metadata and parameter shapes. Indices
    /// are 0-based; unused index columns are empty.
    pub fn write(&self, csv_path: &Path) -> Result<()> {
        let file = std::fs::File::create(csv_path)?;
        let mut w = std::io::BufWriter::new(file);
        writeln!(w, "param,idx1,idx2,chain,draw,value")?;
        for (name, p) in &self.params {
            for (c, d) in p.positions() {
                for (flat, v) in p.draw(c, d).iter().enumerate() {
                    let idx = p.unflatten(flat);
                    let i1 = idx.first().map(|i| i.to_string()).unwrap_or_default();
                    let i2 = idx.get(1).map(|i| i.to_string()).unwrap_or_default();
                    writeln!(w, "{name},{i1},{i2},{c},{d},{v}")?;
                }
            }
        }
        w.flush()?;
        let sidecar = Sidecar {
            meta: self.meta.clone(),
            params: self
                .params
                .iter()
                .map(|(n, p)| (n.clone(), p.spec.clone()))
                .collect(),
        };
        std::fs::write(csv_path.with_extension("json"), serde_json::to_string_pretty(&sidecar)?)?;
        Ok(())
    }

    pub fn read(csv_path: &Path) -> Result<Self> {
        let sidecar: Sidecar = serde_json::from_str(&std::fs::read_to_string(csv_path.with_extension("json"))?)?;
        let mut rdr = csv::Reader::from_path(csv_path)?;
        let mut raw: BTreeMap<String, BTreeMap<(usize, usize), Vec<(usize, f64)>>> = BTreeMap::new();
        for rec in rdr.records() {
            let rec = rec?;
            let name = rec.get(0).unwrap_or("").to_string();
            let spec = sidecar
                .params
                .get(&name)
                .ok_or_else(|| Error::shape(format!("sidecar lacks parameter '{name}'")))?;
            let idx: Vec<usize> = [rec.get(1), rec.get(2)]
                .into_iter()
                .flatten()
                .filter(|s| !s.is_empty())
                .map(|s| s.parse().map_err(|_| Error::shape(format!("bad index '{s}'"))))
                .collect::<Result<_>>()?;
            if idx.len() != spec.shape.len() {
                return Err(Error::shape(format!("{name}: index arity {} != {}", idx.len(), spec.shape.len())));
            }
            let flat = idx.iter().zip(&spec.shape).fold(0, |acc, (i, n)| acc * n + i);
            let num = |i: usize| -> Result<usize> {
                rec.get(i)
                    .unwrap_or("")
                    .parse()
                    .map_err(|_| Error::shape("bad chain/draw column"))
            };
            let value: f64 = rec
                .get(5)
                .unwrap_or("")
                .parse()
                .map_err(|_| Error::shape("bad value column"))?;
            raw.entry(name)
                .or_default()
                .entry((num(3)?, num(4)?))
                .or_default()
                .push((flat, value));
        }
        let mut params = BTreeMap::new();
        for (name, spec) in sidecar.params {
            let cells = raw.remove(&name).unwrap_or_default();
            let chains = cells.keys().map(|k| k.0 + 1).max().unwrap_or(0);
            let draws = cells.keys().map(|k| k.1 + 1).max().unwrap_or(0);
            let size = spec.size();
            let mut data = vec![vec![f64::NAN; draws * size]; chains];
            for ((c, d), entries) in cells {
                for (flat, v) in entries {
                    data[c][d * size + flat] = v;
                }
            }
            params.insert(name, ParamArray { spec, chains: data });
        }
        let s = PosteriorSamples {
            meta: sidecar.meta,
            params,
        };
        s.validate()?;
        Ok(s)
    }
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    meta: SampleMeta,
    params: BTreeMap<String, ParamSpec>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> PosteriorSamples {
        let mut traces = Vec::new();
        for c in 0..2 {
            let mut t = Trace::new();
            t.declare("beta", vec![3, 2], TopicRole::Axis(1))
                .declare("sigma2", vec![], TopicRole::None);
            for d in 0..4 {
                let base = (c * 10 + d) as f64;
                t.push("beta", &[base, base + 0.5, base + 1.0, base + 1.5, 0.1, 1e-300]);
                t.push("sigma2", &[base * 0.3333]);
                t.end_draw();
            }
            traces.push(t);
        }
        let meta = SampleMeta {
            model: "lda".into(),
            method: "gibbs".into(),
            seed: 3,
            ..Default::default()
        };
        PosteriorSamples::from_traces(meta, traces).unwrap()
    }

    #[test]
    fn shapes_and_accessors() {
        let s = toy();
        assert_eq!(s.chains(), 2);
        assert_eq!(s.draws_per_chain(), 4);
        let beta = s.param("beta").unwrap();
        assert_eq!(beta.unflatten(3), vec![1, 1]);
        assert_eq!(beta.chain_series(1, 1), vec![10.5, 11.5, 12.5, 13.5]);
        assert_eq!(beta.matrix(0, 2).unwrap()[[1, 0]], 3.0);
        assert_eq!(s.param("sigma2").unwrap().pooled(0).len(), 8);
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let s = toy();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("samples.csv");
        s.write(&path).unwrap();
        let back = PosteriorSamples::read(&path).unwrap();
        assert_eq!(back, s);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("param,idx1,idx2,chain,draw,value\n"));
        assert!(text.contains("\nsigma2,,,1,3,"));
    }

    #[test]
    fn mismatched_chains_are_rejected() {
        let mut a = Trace::new();
        a.declare("x", vec![1], TopicRole::None);
        a.push("x", &[1.0]);
        a.end_draw();
        let mut b = a.clone();
        b.push("x", &[2.0]);
        b.end_draw();
        assert!(PosteriorSamples::from_traces(SampleMeta::default(), vec![a, b]).is_err());
    }

    #[test]
    fn nan_draws_are_rejected() {
        let mut a = Trace::new();
        a.declare("x", vec![], TopicRole::None);
        a.push("x", &[f64::NAN]);
        a.end_draw();
        assert!(PosteriorSamples::from_traces(SampleMeta::default(), vec![a]).is_err());
    }
}
