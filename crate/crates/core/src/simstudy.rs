//! Simulation studies: simulate from a known truth, fit with several
//! methods, align, and summarize error and posterior spread per feature.

use std::path::Path;
use std::time::Instant;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::align::{align_each_draw, normalize_gap_samples, normalize_gap_scale};
use crate::corpus::{CountMatrix, TimeIndex};
use crate::error::{Error, Result};
use crate::gap::{bootstrap_gap, fit_gap_cavi, fit_gap_gibbs, hyperparams_for_expected_total, simulate_gap, GapHyper};
use crate::inference::{
    median_matrix, run_chains, sample_sd, BootstrapOptions, CaviOptions, GibbsOptions,
    PosteriorSamples, SampleMeta, TopicRole, Trace,
};
use crate::lda::{bootstrap_lda, fit_lda_cavi, fit_lda_gibbs, simulate_lda, Concentration, LdaParams};
use crate::numeric::Rng;
use crate::unigram::{fit_unigram_advi, fit_unigram_hmc, simulate_unigram, AdviOptions, HmcOptions, SigmaPrior};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StudyModel {
    Lda,
    Gap,
    Zgap,
    Unigram,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Gibbs,
    Hmc,
    Vb,
    Bootstrap,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Gibbs => "gibbs",
            Method::Hmc => "hmc",
            Method::Vb => "vb",
            Method::Bootstrap => "bootstrap",
        }
    }
}

/// Inference settings used by every cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyOptions {
    pub gibbs: GibbsOptions,
    pub cavi: CaviOptions,
    pub hmc: HmcOptions,
    pub advi: AdviOptions,
    pub bootstrap: BootstrapOptions,
    /// Draws taken from variational factors.
    pub vb_draws: usize,
    /// Write each cell's aligned draws next to the summary.
    pub save_draws: bool,
}

impl Default for StudyOptions {
    fn default() -> Self {
        StudyOptions {
            gibbs: GibbsOptions::default(),
            cavi: CaviOptions::default(),
            hmc: HmcOptions::default(),
            advi: AdviOptions::default(),
            bootstrap: BootstrapOptions::default(),
            vb_draws: 1000,
            save_draws: false,
        }
    }
}

/// The cross product of `d × v × n × p0`, each cell run once per seed with
/// every method. For GaP models `n` is the expected total per sample; for
/// the unigram model each sample is its own time slot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentGrid {
    pub model: StudyModel,
    pub d: Vec<usize>,
    pub v: Vec<usize>,
    pub n: Vec<u64>,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "one")]
    pub alpha: f64,
    #[serde(default = "one")]
    pub gamma: f64,
    #[serde(default = "zero_p0")]
    pub p0: Vec<f64>,
    #[serde(default = "one")]
    pub sigma0_sq: f64,
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub options: StudyOptions,
}

fn default_k() -> usize {
    2
}

fn one() -> f64 {
    1.0
}

fn zero_p0() -> Vec<f64> {
    vec![0.0]
}

/// One grid point.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Cell {
    pub d: usize,
    pub v: usize,
    pub n: u64,
    pub p0: f64,
}

impl ExperimentGrid {
    /// The reduced grid: D in {20, 100}, V in {50, 325}, N in {1625, 6500},
    /// five seeds and 50 bootstrap replicates.
    pub fn desk(model: StudyModel) -> Self {
        let methods = match model {
            StudyModel::Unigram => vec![Method::Hmc, Method::Vb],
            _ => vec![Method::Gibbs, Method::Vb, Method::Bootstrap],
        };
        ExperimentGrid {
            model,
            d: vec![20, 100],
            v: vec![50, 325],
            n: vec![1625, 6500],
            k: 2,
            alpha: 1.0,
            gamma: 1.0,
            p0: if model == StudyModel::Zgap { vec![0.0, 0.2] } else { vec![0.0] },
            sigma0_sq: 1.0,
            methods,
            seeds: (0..5).collect(),
            options: StudyOptions::default(),
        }
    }

    /// The full grid: V in {325, 650}, N in {1625, 3250, 6500}, 500
    /// bootstrap replicates.
    pub fn full(model: StudyModel) -> Self {
        let mut g = Self::desk(model);
        g.v = vec![325, 650];
        g.n = vec![1625, 3250, 6500];
        g.options.bootstrap.replicates = 500;
        g
    }

    pub fn validate(&self) -> Result<()> {
        if self.d.is_empty() || self.v.is_empty() || self.n.is_empty() || self.p0.is_empty() {
            return Err(Error::config("grid lists must be nonempty"));
        }
        if self.methods.is_empty() || self.seeds.is_empty() {
            return Err(Error::config("need at least one method and one seed"));
        }
        if self.k == 0 || self.d.contains(&0) || self.v.contains(&0) {
            return Err(Error::config("K, D and V must be positive"));
        }
        if !(self.alpha > 0.0 && self.gamma > 0.0 && self.sigma0_sq > 0.0) {
            return Err(Error::config("alpha, gamma and sigma0_sq must be positive"));
        }
        if let Some(p) = self.p0.iter().find(|p| !(0.0..1.0).contains(*p)) {
            return Err(Error::config(format!("p0 = {p} is outside [0, 1)")));
        }
        if self.model != StudyModel::Zgap && self.p0.iter().any(|&p| p > 0.0) {
            return Err(Error::config("p0 > 0 needs the zgap model"));
        }
        for m in &self.methods {
            let ok = match self.model {
                StudyModel::Unigram => matches!(m, Method::Hmc | Method::Vb),
                _ => matches!(m, Method::Gibbs | Method::Vb | Method::Bootstrap),
            };
            if !ok {
                return Err(Error::config(format!("method {} does not apply to this model", m.name())));
            }
        }
        let o = &self.options;
        o.gibbs.validate()?;
        o.cavi.validate()?;
        o.hmc.validate()?;
        o.advi.validate()?;
        o.bootstrap.validate()?;
        if o.vb_draws < 2 {
            return Err(Error::config("vb_draws must be at least 2"));
        }
        Ok(())
    }

    pub fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for &d in &self.d {
            for &v in &self.v {
                for &n in &self.n {
                    for &p0 in &self.p0 {
                        out.push(Cell { d, v, n, p0 });
                    }
                }
            }
        }
        out
    }
}

/// Per-feature error and spread for one parameter.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParamError {
    pub param: String,
    pub features: Vec<String>,
    pub rmse: Vec<f64>,
    pub sd: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CellResult {
    /// Fitted model label; GaP fits assuming `p0 = 0` are `gap` even on
    /// zero-inflated data.
    pub model: String,
    pub method: Method,
    pub cell: Cell,
    pub seed: u64,
    pub params: Vec<ParamError>,
    pub runtime_s: f64,
    pub flags: Vec<String>,
}

impl CellResult {
    pub fn failed(&self) -> bool {
        self.params.is_empty()
    }

    /// Mean over features of the RMSE for `param`.
    pub fn mean_rmse(&self, param: &str) -> Option<f64> {
        let p = self.params.iter().find(|p| p.param == param)?;
        Some(p.rmse.iter().sum::<f64>() / p.rmse.len() as f64)
    }
}

/// `sqrt(mean_k (sqrt(median) - sqrt(truth))^2)` per row of `name`, whose
/// draws must already be aligned to `truth`.
pub fn rmse_sqrt_medians(truth: &Array2<f64>, posterior: &PosteriorSamples, name: &str) -> Result<Vec<f64>> {
    let med = median_matrix(posterior, name)?;
    if med.dim() != truth.dim() {
        return Err(Error::shape(format!("{name} is {:?}, truth {:?}", med.dim(), truth.dim())));
    }
    Ok(med
        .rows()
        .into_iter()
        .zip(truth.rows())
        .map(|(m, t)| {
            let k = t.len() as f64;
            (m.iter().zip(t.iter()).map(|(a, b)| (a.sqrt() - b.sqrt()).powi(2)).sum::<f64>() / k).sqrt()
        })
        .collect())
}

/// Sample SD of `sqrt(x[v, 0])` over draws, per row `v` of `name`.
pub fn sd_along_first_topic(posterior: &PosteriorSamples, name: &str) -> Result<Vec<f64>> {
    let p = posterior.require(name)?;
    if p.spec.shape.len() != 2 {
        return Err(Error::shape(format!("{name} is not matrix-valued")));
    }
    if posterior.total_draws() < 2 {
        return Err(Error::domain("the SD needs at least two draws"));
    }
    let (rows, cols) = (p.spec.shape[0], p.spec.shape[1]);
    Ok((0..rows)
        .map(|v| sample_sd(&p.pooled(v * cols).into_iter().map(f64::sqrt).collect::<Vec<_>>()))
        .collect())
}

/// Runs every cell, seed and method. A failed fit becomes a result with no
/// parameters and the error in `flags`. With `out_dir`, writes
/// `summary.csv` there, and aligned draws under `draws/` when requested.
pub fn run_study(grid: &ExperimentGrid, out_dir: Option<&Path>) -> Result<Vec<CellResult>> {
    grid.validate()?;
    let cells = grid.cells();
    let units: Vec<(usize, u64)> = (0..cells.len())
        .flat_map(|c| grid.seeds.iter().map(move |&s| (c, s)))
        .collect();
    let outputs = run_chains(units.len(), |u| {
        let (c, seed) = units[u];
        run_unit(grid, c, &cells[c], seed)
    });
    let mut results = Vec::new();
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }
    for out in outputs {
        let out = out?;
        for (result, draws) in out {
            if let (Some(dir), Some(s), true) = (out_dir, draws.as_ref(), grid.options.save_draws) {
                let sub = dir.join("draws");
                std::fs::create_dir_all(&sub)?;
                let c = &result.cell;
                let name = format!(
                    "{}_{}_D{}_V{}_N{}_p0{}_seed{}.csv",
                    result.model,
                    result.method.name(),
                    c.d,
                    c.v,
                    c.n,
                    c.p0,
                    result.seed
                );
                s.write(&sub.join(name))?;
            }
            results.push(result);
        }
    }
    if let Some(dir) = out_dir {
        write_summary_csv(&results, &dir.join("summary.csv"))?;
    }
    Ok(results)
}

type UnitOutput = Vec<(CellResult, Option<PosteriorSamples>)>;

/// The fit a study method runs: a label and the assumed `p0` for GaP.
struct FitSpec {
    label: &'static str,
    p0: f64,
}

fn run_unit(grid: &ExperimentGrid, cell_index: usize, cell: &Cell, seed: u64) -> Result<UnitOutput> {
    let mut data_rng = Rng::new(seed).split(cell_index as u64);
    let truth = Truth::simulate(grid, cell, &mut data_rng)?;
    let fits: Vec<FitSpec> = match grid.model {
        StudyModel::Lda => vec![FitSpec { label: "lda", p0: 0.0 }],
        StudyModel::Unigram => vec![FitSpec { label: "unigram", p0: 0.0 }],
        StudyModel::Gap => vec![FitSpec { label: "gap", p0: 0.0 }],
        StudyModel::Zgap if cell.p0 > 0.0 => vec![
            FitSpec { label: "gap", p0: 0.0 },
            FitSpec { label: "zgap", p0: cell.p0 },
        ],
        StudyModel::Zgap => vec![FitSpec { label: "gap", p0: 0.0 }],
    };
    let mut out = Vec::new();
    for (f, fit) in fits.iter().enumerate() {
        for (m, &method) in grid.methods.iter().enumerate() {
            let fit_seed = Rng::new(seed).split(cell_index as u64).split((f * 16 + m + 1) as u64).next_seed();
            let start = Instant::now();
            let outcome = truth.fit(grid, method, fit.p0, fit_seed).and_then(|s| {
                let params = truth.score(&s)?;
                Ok((s, params))
            });
            let runtime_s = start.elapsed().as_secs_f64();
            let mut result = CellResult {
                model: fit.label.into(),
                method,
                cell: *cell,
                seed,
                params: Vec::new(),
                runtime_s,
                flags: Vec::new(),
            };
            match outcome {
                Ok((s, params)) => {
                    result.params = params;
                    result.flags = s.meta.warnings.clone();
                    out.push((result, Some(s)));
                }
                Err(e) => {
                    result.flags.push(format!("failed: {e}"));
                    out.push((result, None));
                }
            }
        }
    }
    Ok(out)
}

enum Truth {
    Lda { x: CountMatrix, params: LdaParams },
    Gap { x: CountMatrix, theta: Array2<f64>, beta: Array2<f64>, hyper: GapHyper },
    Unigram { x: CountMatrix, ti: TimeIndex, probs: Array2<f64> },
}

impl Truth {
    fn simulate(grid: &ExperimentGrid, c: &Cell, rng: &mut Rng) -> Result<Self> {
        let k = grid.k;
        Ok(match grid.model {
            StudyModel::Lda => {
                let (x, params) = simulate_lda(c.d, c.v, k, &vec![c.n; c.d], &grid.alpha.into(), &grid.gamma.into(), rng)?;
                Truth::Lda { x, params }
            }
            StudyModel::Gap | StudyModel::Zgap => {
                let hyper = hyperparams_for_expected_total(c.n as f64, k, c.v)?;
                let (x, params, _) = simulate_gap(c.d, c.v, k, &hyper, c.p0, rng)?;
                let (norm, _) = normalize_gap_scale(&params);
                Truth::Gap {
                    x,
                    theta: norm.theta,
                    beta: norm.beta,
                    hyper,
                }
            }
            StudyModel::Unigram => {
                let ti = TimeIndex::sequential(c.d);
                let (x, state) = simulate_unigram(c.d, c.v, &ti, &vec![c.n; c.d], grid.sigma0_sq, rng)?;
                Truth::Unigram {
                    x,
                    ti,
                    probs: state.probabilities().t().to_owned(),
                }
            }
        })
    }

    fn fit(&self, grid: &ExperimentGrid, method: Method, p0: f64, seed: u64) -> Result<PosteriorSamples> {
        let o = &grid.options;
        let k = grid.k;
        let gibbs = GibbsOptions { seed, ..o.gibbs.clone() };
        let cavi = CaviOptions { seed, ..o.cavi.clone() };
        let boot = BootstrapOptions { seed, ..o.bootstrap.clone() };
        match self {
            Truth::Lda { x, params } => {
                let (alpha, gamma): (Concentration, Concentration) = (grid.alpha.into(), grid.gamma.into());
                let s = match method {
                    Method::Gibbs => fit_lda_gibbs(x, k, &alpha, &gamma, &gibbs)?,
                    Method::Vb => fit_lda_cavi(x, k, &alpha, &gamma, &cavi)?.sample_posterior(o.vb_draws, seed)?,
                    Method::Bootstrap => bootstrap_lda(x, k, &alpha, &gamma, &cavi, &boot)?,
                    Method::Hmc => return Err(Error::config("hmc does not apply to LDA")),
                };
                align_each_draw(&s, &params.beta, "beta")
            }
            Truth::Gap { x, beta, hyper, .. } => {
                let s = match method {
                    Method::Gibbs => fit_gap_gibbs(x, k, hyper, p0, &gibbs)?,
                    Method::Vb => fit_gap_cavi(x, k, hyper, p0, &cavi)?.sample_posterior(o.vb_draws, seed)?,
                    Method::Bootstrap => bootstrap_gap(x, k, hyper, p0, &cavi, &boot)?,
                    Method::Hmc => return Err(Error::config("hmc does not apply to GaP")),
                };
                align_each_draw(&normalize_gap_samples(&s)?, beta, "beta")
            }
            Truth::Unigram { x, ti, .. } => {
                let s = match method {
                    Method::Hmc => fit_unigram_hmc(x, ti, SigmaPrior::default(), &HmcOptions { seed, ..o.hmc.clone() })?,
                    Method::Vb => fit_unigram_advi(x, ti, SigmaPrior::default(), &AdviOptions { seed, ..o.advi.clone() })?,
                    _ => return Err(Error::config("the unigram study runs hmc and vb")),
                };
                probability_draws(&s)
            }
        }
    }

    fn score(&self, s: &PosteriorSamples) -> Result<Vec<ParamError>> {
        let one = |name: &str, truth: &Array2<f64>, ids: &[String]| -> Result<ParamError> {
            Ok(ParamError {
                param: name.into(),
                features: ids.to_vec(),
                rmse: rmse_sqrt_medians(truth, s, name)?,
                sd: sd_along_first_topic(s, name)?,
            })
        };
        match self {
            Truth::Lda { x, params } => Ok(vec![
                one("beta", &params.beta, x.feature_ids())?,
                one("theta", &params.theta, x.sample_ids())?,
            ]),
            Truth::Gap { x, theta, beta, .. } => Ok(vec![
                one("beta", beta, x.feature_ids())?,
                one("theta", theta, x.sample_ids())?,
            ]),
            Truth::Unigram { x, probs, .. } => Ok(vec![one("p", probs, x.feature_ids())?]),
        }
    }
}

/// `S(mu_t)` per draw, stored V×T as `p` so rows index features.
fn probability_draws(s: &PosteriorSamples) -> Result<PosteriorSamples> {
    let mu = s.require("mu")?;
    let (t_len, v) = (mu.spec.shape[0], mu.spec.shape[1]);
    let mut traces = Vec::with_capacity(mu.chains());
    for c in 0..mu.chains() {
        let mut trace = Trace::new();
        trace.declare("p", vec![v, t_len], TopicRole::None);
        for d in 0..mu.draws() {
            let probs = crate::unigram::softmax_rows(&mu.matrix(c, d)?);
            let flipped: Vec<f64> = probs.t().iter().copied().collect();
            trace.push("p", &flipped);
            trace.end_draw();
        }
        traces.push(trace);
    }
    let meta = SampleMeta { ..s.meta.clone() };
    PosteriorSamples::from_traces(meta, traces)
}

/// Writes `model,method,D,V,N,p0,seed,param,feature,rmse,sd,runtime_s,flags`,
/// one row per feature, or one row with empty measurements for a failure.
pub fn write_summary_csv(results: &[CellResult], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["model", "method", "D", "V", "N", "p0", "seed", "param", "feature", "rmse", "sd", "runtime_s", "flags"])?;
    for r in results {
        let c = &r.cell;
        let head = [
            r.model.clone(),
            r.method.name().into(),
            c.d.to_string(),
            c.v.to_string(),
            c.n.to_string(),
            c.p0.to_string(),
            r.seed.to_string(),
        ];
        let flags = r.flags.join("; ");
        let runtime = format!("{:.3}", r.runtime_s);
        if r.failed() {
            let mut row = head.to_vec();
            row.extend([String::new(), String::new(), String::new(), String::new(), runtime.clone(), flags.clone()]);
            w.write_record(&row)?;
            continue;
        }
        for p in &r.params {
            for i in 0..p.features.len() {
                let mut row = head.to_vec();
                row.extend([
                    p.param.clone(),
                    p.features[i].clone(),
                    p.rmse[i].to_string(),
                    p.sd[i].to_string(),
                    runtime.clone(),
                    flags.clone(),
                ]);
                w.write_record(&row)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}
