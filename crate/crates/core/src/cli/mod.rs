//! Command-line front end. Each subcommand reads and writes files in
//! directories; stdout carries logs only. Every output directory gets a
//! `run.json` holding the command, resolved settings, seed and version.
//!
//! Directory layouts:
//!
//! * `simulate`: `counts.csv`, `sample_meta.csv`, `truth.csv` (+ `.json`)
//! * `fit`: `counts.csv` and its metadata tables, `samples.csv` (+ `.json`),
//!   `config.json`, and `diagnostics.csv` for multi-chain samplers
//! * `align`: a fit directory whose draws are aligned to the reference
//! * `ppc`: `ppc.csv`, `species_discrepancy.csv`
//! * `study`: `summary.csv`
//! * `report`: `<kind>.csv`

pub mod config;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use crate::align::align_fit;
use crate::corpus::{read_counts, write_counts, CountMatrix, TimeIndex};
use crate::error::{Error, Result};
use crate::gap::{bootstrap_gap, fit_gap_cavi, fit_gap_gibbs, hyperparams_for_expected_total, simulate_gap};
use crate::inference::{diagnostics, median_matrix, PosteriorSamples, SampleMeta, TopicRole, Trace};
use crate::lda::{bootstrap_lda, fit_dmm_gibbs, fit_lda_cavi, fit_lda_gibbs, simulate_dmm, simulate_lda, Concentration};
use crate::numeric::Rng;
use crate::ppc::{
    draw_posterior_predictive, eigenvalue_report, ppc_pca, ppc_quantile_qq, ppc_scalar_stats, ppc_timeseries,
    read_ppc_csv, species_discrepancy, top_variance_features, write_ppc_csv, Dim, ModelKind, ScalarStat,
    DEFAULT_REPLICATES,
};
use crate::report::{export_plot_data, family_representativeness, topic_representativeness, PlotData, RepresentativenessTable};
use crate::simstudy::{run_study, ExperimentGrid};
use crate::unigram::{fit_unigram, simulate_unigram, UnigramMethod};

pub use config::{parse_config, parse_override, FitMethod, RunConfig, SEED_ENV};

/// Exit status for invalid input or configuration.
pub const EXIT_INVALID: i32 = 1;
/// Exit status for a numerical failure during inference.
pub const EXIT_NUMERICAL: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "plvm", version, about = "Latent variable models for count matrices")]
pub struct Cli {
    /// Cap on worker threads.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a count matrix and its true parameters.
    Simulate(SimulateArgs),
    /// Fit a model to a count matrix.
    Fit(FitArgs),
    /// Align the topics of a fit to a reference fit or simulation.
    Align(AlignArgs),
    /// Posterior predictive checks for a fit.
    Ppc(PpcArgs),
    /// Run a simulation study over a grid.
    Study(StudyArgs),
    /// Export plot-ready tables from a fit.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub spec: SimSpec,
    #[arg(long)]
    pub out: PathBuf,
    /// Falls back to PLVM_SEED.
    #[arg(long)]
    pub seed: Option<u64>,
}

/// What `simulate` draws.
#[derive(Debug, Clone, Args, Serialize)]
pub struct SimSpec {
    #[arg(long)]
    pub model: ModelKind,
    /// Samples (time slots for the unigram model).
    #[arg(long, default_value_t = 20)]
    pub d: usize,
    #[arg(long, default_value_t = 50)]
    pub v: usize,
    #[arg(long, default_value_t = 2)]
    pub k: usize,
    /// Library size per sample; the expected one for gap and zgap.
    #[arg(long, default_value_t = 1000)]
    pub n: u64,
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f64,
    #[arg(long, default_value_t = 1.0)]
    pub gamma: f64,
    /// Zero-inflation probability (zgap only).
    #[arg(long, default_value_t = 0.0)]
    pub p0: f64,
    /// Random-walk step variance (unigram only).
    #[arg(long, default_value_t = 1.0)]
    pub sigma0_sq: f64,
}

impl SimSpec {
    pub fn new(model: ModelKind) -> Self {
        SimSpec {
            model,
            d: 20,
            v: 50,
            k: 2,
            n: 1000,
            alpha: 1.0,
            gamma: 1.0,
            p0: 0.0,
            sigma0_sq: 1.0,
        }
    }
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub counts: Option<PathBuf>,
    #[arg(long)]
    pub sample_meta: Option<PathBuf>,
    #[arg(long)]
    pub taxonomy: Option<PathBuf>,
    /// JSON configuration; flags take precedence over its keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub method: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Any configuration key, as `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Args)]
pub struct AlignArgs {
    /// A simulation directory (uses its true topics) or a fit directory
    /// (uses posterior medians).
    #[arg(long = "ref")]
    pub reference: PathBuf,
    /// The fit directory to align.
    #[arg(long)]
    pub est: PathBuf,
    /// Defaults to `<est>/aligned`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PpcArgs {
    #[arg(long)]
    pub fit: PathBuf,
    #[arg(long, default_value_t = DEFAULT_REPLICATES)]
    pub replicates: usize,
    /// Defaults to `<fit>/ppc`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Defaults to the fit's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Principal components compared.
    #[arg(long, default_value_t = 5)]
    pub components: usize,
    /// Highest-variance features kept for the PCA.
    #[arg(long, default_value_t = 100)]
    pub pca_features: usize,
    /// Features with a time-series check.
    #[arg(long, default_value_t = 4)]
    pub series: usize,
}

#[derive(Debug, Args)]
pub struct StudyArgs {
    #[arg(long)]
    pub grid: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportKind {
    ThetaBoxes,
    BetaIntervals,
    MuIntervals,
    PpcOverlay,
    Representativeness,
    FamilyRepresentativeness,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub fit: PathBuf,
    #[arg(long, value_enum)]
    pub kind: ReportKind,
    /// Defaults to `<fit>/report`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Predictive check directory for `ppc-overlay`; defaults to `<fit>/ppc`.
    #[arg(long)]
    pub ppc: Option<PathBuf>,
    /// Features kept by `beta-intervals` and per topic by `representativeness`.
    #[arg(long)]
    pub top: Option<usize>,
}

/// Parses `args`, runs the command and returns the process exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INVALID } else { 0 };
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    if e.is_numerical() {
        EXIT_NUMERICAL
    } else {
        EXIT_INVALID
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::config("--threads must be positive"));
        }
        // A second call in the same process keeps the first pool.
        if rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_err() {
            log::debug!("thread pool already initialized");
        }
    }
    match &cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Fit(a) => fit(a),
        Command::Align(a) => align(a),
        Command::Ppc(a) => ppc(a),
        Command::Study(a) => study(a),
        Command::Report(a) => report(a),
    }
}

fn seed_or_env(seed: Option<u64>) -> Result<u64> {
    if let Some(s) = seed {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(raw) => raw
            .trim()
            .parse()
            .map_err(|_| Error::config(format!("{SEED_ENV} is not a nonnegative integer: {raw:?}"))),
        Err(_) => Err(Error::config(format!("a seed is required: pass --seed or set {SEED_ENV}"))),
    }
}

fn write_run_json(dir: &Path, command: &str, seed: u64, settings: Value) -> Result<()> {
    let run = json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "created": chrono::Utc::now().to_rfc3339(),
        "seed": seed,
        "settings": settings,
    });
    std::fs::write(dir.join("run.json"), serde_json::to_string_pretty(&run)?)?;
    Ok(())
}

fn single_draw(meta: SampleMeta, params: Vec<(&str, Vec<usize>, TopicRole, Vec<f64>)>) -> Result<PosteriorSamples> {
    let mut trace = Trace::new();
    for (name, shape, role, _) in &params {
        trace.declare(name, shape.clone(), *role);
    }
    for (name, _, _, values) in &params {
        trace.push(name, values);
    }
    trace.end_draw();
    PosteriorSamples::from_traces(meta, vec![trace])
}

fn flat(a: &ndarray::Array2<f64>) -> Vec<f64> {
    a.iter().copied().collect()
}

/// Draws counts and the true parameters behind them. The truth is a
/// single-draw sample set so it can be aligned and scored like a fit.
pub fn simulate_dataset(a: &SimSpec, seed: u64) -> Result<(CountMatrix, PosteriorSamples)> {
    let mut rng = Rng::new(seed);
    let (d, v, k) = (a.d, a.v, a.k);
    if a.p0 != 0.0 && a.model != ModelKind::Zgap {
        return Err(Error::config("p0 needs the zgap model"));
    }
    let totals = vec![a.n; d];
    let mut meta = SampleMeta {
        model: a.model.name().into(),
        method: "truth".into(),
        seed,
        ..Default::default()
    };
    let sequential: Vec<f64> = (0..d).map(|t| t as f64).collect();
    let (x, truth) = match a.model {
        ModelKind::Lda => {
            let (x, p) = simulate_lda(d, v, k, &totals, &a.alpha.into(), &a.gamma.into(), &mut rng)?;
            let truth = single_draw(
                meta,
                vec![
                    ("theta", vec![d, k], TopicRole::Axis(1), flat(&p.theta)),
                    ("beta", vec![v, k], TopicRole::Axis(1), flat(&p.beta)),
                ],
            )?;
            (x.with_times(sequential)?, truth)
        }
        ModelKind::Dmm => {
            let theta = vec![1.0 / k as f64; k];
            let (x, p) = simulate_dmm(d, v, k, &totals, &theta, &a.gamma.into(), &mut rng)?;
            let truth = single_draw(
                meta,
                vec![
                    ("z", vec![d], TopicRole::Labels, p.z.iter().map(|&z| z as f64).collect()),
                    ("theta", vec![k], TopicRole::Axis(0), p.theta.as_slice().to_vec()),
                    ("beta", vec![v, k], TopicRole::Axis(1), flat(&p.beta)),
                ],
            )?;
            (x.with_times(sequential)?, truth)
        }
        ModelKind::Gap | ModelKind::Zgap => {
            let hyper = hyperparams_for_expected_total(a.n as f64, k, v)?;
            let (x, p, mask) = simulate_gap(d, v, k, &hyper, a.p0, &mut rng)?;
            meta.extra.insert("p0".into(), a.p0.into());
            meta.extra.insert("hyper".into(), serde_json::to_value(hyper)?);
            let truth = single_draw(
                meta,
                vec![
                    ("theta", vec![d, k], TopicRole::Axis(1), flat(&p.theta)),
                    ("beta", vec![v, k], TopicRole::Axis(1), flat(&p.beta)),
                    ("mask", vec![d, v], TopicRole::None, mask.0.iter().map(|&m| f64::from(u8::from(m))).collect()),
                ],
            )?;
            (x.with_times(sequential)?, truth)
        }
        ModelKind::Unigram => {
            let ti = TimeIndex::sequential(d);
            let (x, state) = simulate_unigram(d, v, &ti, &totals, a.sigma0_sq, &mut rng)?;
            let truth = single_draw(
                meta,
                vec![
                    ("mu", vec![d, v], TopicRole::None, flat(&state.mu)),
                    ("sigma2", vec![1], TopicRole::None, vec![state.sigma2]),
                ],
            )?;
            (x, truth)
        }
    };
    Ok((x, truth))
}

fn simulate(args: &SimulateArgs) -> Result<()> {
    let seed = seed_or_env(args.seed)?;
    let a = &args.spec;
    let (x, truth) = simulate_dataset(a, seed)?;
    std::fs::create_dir_all(&args.out)?;
    write_counts(&x, &args.out.join("counts.csv"))?;
    truth.write(&args.out.join("truth.csv"))?;
    write_run_json(&args.out, "simulate", seed, serde_json::to_value(a)?)?;
    log::info!("simulated {}x{} {} counts into {}", a.d, a.v, a.model, args.out.display());
    Ok(())
}

fn fit(a: &FitArgs) -> Result<()> {
    let mut overrides = Vec::new();
    if let Some(m) = &a.model {
        overrides.push(("model".to_string(), json!(m)));
    }
    if let Some(k) = a.k {
        overrides.push(("k".to_string(), json!(k)));
    }
    if let Some(m) = &a.method {
        overrides.push(("method".to_string(), json!(m)));
    }
    if let Some(s) = a.seed {
        overrides.push(("seed".to_string(), json!(s)));
    }
    for (key, path) in [("counts", &a.counts), ("sample_meta", &a.sample_meta), ("taxonomy", &a.taxonomy)] {
        if let Some(p) = path {
            overrides.push((key.to_string(), json!(p)));
        }
    }
    for s in &a.set {
        overrides.push(parse_override(s)?);
    }
    let cfg = parse_config(a.config.as_deref(), &overrides)?;
    let counts = cfg
        .counts
        .as_deref()
        .ok_or_else(|| Error::config("no counts table: pass --counts or set 'counts'"))?;
    let x = read_counts(counts, cfg.sample_meta.as_deref(), cfg.taxonomy.as_deref())?;
    log::info!(
        "fitting {} by {:?} to {} samples x {} features",
        cfg.model,
        cfg.method,
        x.samples(),
        x.features()
    );
    let samples = fit_config(&cfg, &x)?;
    for w in &samples.meta.warnings {
        log::warn!("{w}");
    }
    std::fs::create_dir_all(&a.out)?;
    write_counts(&x, &a.out.join("counts.csv"))?;
    samples.write(&a.out.join("samples.csv"))?;
    if samples.chains() >= 2 && samples.draws_per_chain() >= 4 {
        let mut w = csv::Writer::from_path(a.out.join("diagnostics.csv"))?;
        w.write_record(["param", "idx1", "idx2", "rhat", "ess"])?;
        for d in diagnostics(&samples)? {
            let idx = |i: usize| d.index.get(i).map(|v| v.to_string()).unwrap_or_default();
            w.write_record([d.param.clone(), idx(0), idx(1), d.rhat.to_string(), d.ess.to_string()])?;
        }
        w.flush()?;
    }
    let resolved = serde_json::to_value(&cfg)?;
    std::fs::write(a.out.join("config.json"), serde_json::to_string_pretty(&resolved)?)?;
    write_run_json(&a.out, "fit", cfg.seed, resolved)?;
    log::info!("wrote {} draws to {}", samples.total_draws(), a.out.display());
    Ok(())
}

/// Runs the engine named by `cfg` on `x`.
pub fn fit_config(cfg: &RunConfig, x: &CountMatrix) -> Result<PosteriorSamples> {
    let k = cfg.k;
    let conc = |c: &Option<Concentration>, key: &str| {
        c.clone()
            .ok_or_else(|| Error::config(format!("missing '{key}'")))
    };
    use FitMethod::*;
    match (cfg.model, cfg.method) {
        (ModelKind::Lda, Gibbs) => fit_lda_gibbs(x, k, &conc(&cfg.alpha, "alpha")?, &conc(&cfg.gamma, "gamma")?, &cfg.gibbs),
        (ModelKind::Lda, Vb) => fit_lda_cavi(x, k, &conc(&cfg.alpha, "alpha")?, &conc(&cfg.gamma, "gamma")?, &cfg.cavi)?
            .sample_posterior(cfg.draws, cfg.seed),
        (ModelKind::Lda, Bootstrap) => bootstrap_lda(
            x,
            k,
            &conc(&cfg.alpha, "alpha")?,
            &conc(&cfg.gamma, "gamma")?,
            &cfg.cavi,
            &cfg.bootstrap,
        ),
        (ModelKind::Dmm, Gibbs) => fit_dmm_gibbs(x, k, &conc(&cfg.gamma, "gamma")?, &cfg.gibbs),
        (ModelKind::Gap | ModelKind::Zgap, m) => {
            let hyper = cfg.gap_hyper(x.features())?;
            match m {
                Gibbs => fit_gap_gibbs(x, k, &hyper, cfg.p0, &cfg.gibbs),
                Vb => fit_gap_cavi(x, k, &hyper, cfg.p0, &cfg.cavi)?.sample_posterior(cfg.draws, cfg.seed),
                Bootstrap => bootstrap_gap(x, k, &hyper, cfg.p0, &cfg.cavi, &cfg.bootstrap),
                _ => Err(Error::config(format!("method {m:?} does not apply to {}", cfg.model))),
            }
        }
        (ModelKind::Unigram, Hmc) => fit_unigram(x, &UnigramMethod::Hmc(cfg.hmc.clone()), cfg.sigma_prior),
        (ModelKind::Unigram, Advi) => fit_unigram(x, &UnigramMethod::Advi(cfg.advi.clone()), cfg.sigma_prior),
        (model, m) => Err(Error::config(format!("method {m:?} does not apply to {model}"))),
    }
}

/// Reads the counts table (with whatever metadata tables sit next to it)
/// and the draws of a fit directory.
pub fn load_fit_dir(dir: &Path) -> Result<(CountMatrix, PosteriorSamples)> {
    let x = load_counts(dir)?;
    let samples_path = dir.join("samples.csv");
    if !samples_path.exists() {
        return Err(Error::config(format!("{} has no samples.csv", dir.display())));
    }
    Ok((x, PosteriorSamples::read(&samples_path)?))
}

fn load_counts(dir: &Path) -> Result<CountMatrix> {
    let optional = |name: &str| Some(dir.join(name)).filter(|p| p.exists());
    let meta = optional("sample_meta.csv");
    let tax = optional("taxonomy.csv");
    read_counts(&dir.join("counts.csv"), meta.as_deref(), tax.as_deref())
}

fn align(a: &AlignArgs) -> Result<()> {
    let truth_path = a.reference.join("truth.csv");
    let reference = if truth_path.exists() {
        PosteriorSamples::read(&truth_path)?
    } else {
        PosteriorSamples::read(&a.reference.join("samples.csv"))?
    };
    let (x, est) = load_fit_dir(&a.est)?;
    let aligned = align_fit(&reference, &est)?;
    let out = a.out.clone().unwrap_or_else(|| a.est.join("aligned"));
    std::fs::create_dir_all(&out)?;
    write_counts(&x, &out.join("counts.csv"))?;
    aligned.write(&out.join("samples.csv"))?;
    write_run_json(
        &out,
        "align",
        est.meta.seed,
        json!({"reference": a.reference, "estimate": a.est}),
    )?;
    log::info!("aligned {} draws into {}", aligned.total_draws(), out.display());
    Ok(())
}

/// The predictive checks `ppc` writes, for `replicates` drawn from `s`.
pub fn standard_checks(
    x: &CountMatrix,
    replicates: &[CountMatrix],
    components: usize,
    pca_features: usize,
    series: usize,
) -> Result<Vec<crate::ppc::PpcReport>> {
    let mut reports = vec![
        ppc_scalar_stats(x, replicates, &ScalarStat::Mean(Dim::Sample))?,
        ppc_scalar_stats(x, replicates, &ScalarStat::Variance(Dim::Feature))?,
        ppc_scalar_stats(x, replicates, &ScalarStat::Histogram(vec![0.0, 1.0, 2.0, 5.0, 10.0, 100.0, f64::INFINITY]))?,
        ppc_quantile_qq(x, replicates, &(1..20).map(|i| i as f64 / 20.0).collect::<Vec<_>>())?,
    ];
    let m = pca_features.min(x.features());
    let r = components.min(m).min(x.samples());
    if r >= 1 {
        let (obs, reps) = ppc_pca(x, replicates, r, m)?;
        reports.push(eigenvalue_report(&obs, &reps));
    }
    if x.times().is_some() && series > 0 {
        let ids: Vec<String> = top_variance_features(x, series.min(x.features()))?
            .into_iter()
            .map(|j| x.feature_ids()[j].clone())
            .collect();
        reports.push(ppc_timeseries(x, replicates, &ids)?);
    }
    Ok(reports)
}

fn ppc(a: &PpcArgs) -> Result<()> {
    let (x, samples) = load_fit_dir(&a.fit)?;
    let seed = a.seed.unwrap_or(samples.meta.seed);
    let replicates = draw_posterior_predictive(&x, &samples, a.replicates, &Rng::new(seed))?;
    let reports = standard_checks(&x, &replicates, a.components, a.pca_features, a.series)?;
    let out = a.out.clone().unwrap_or_else(|| a.fit.join("ppc"));
    std::fs::create_dir_all(&out)?;
    write_ppc_csv(&reports, &out.join("ppc.csv"))?;
    let mut w = csv::Writer::from_path(out.join("species_discrepancy.csv"))?;
    w.write_record(["feature", "score"])?;
    for s in species_discrepancy(&x, &replicates)? {
        w.write_record([s.feature, s.score.to_string()])?;
    }
    w.flush()?;
    write_run_json(
        &out,
        "ppc",
        seed,
        json!({"fit": a.fit, "replicates": a.replicates, "components": a.components,
               "pca_features": a.pca_features, "series": a.series}),
    )?;
    log::info!("wrote {} predictive checks to {}", reports.len(), out.display());
    Ok(())
}

fn study(a: &StudyArgs) -> Result<()> {
    let grid: ExperimentGrid = serde_json::from_str(&std::fs::read_to_string(&a.grid)?)
        .map_err(|e| Error::config(format!("{}: {e}", a.grid.display())))?;
    grid.validate()?;
    std::fs::create_dir_all(&a.out)?;
    let results = run_study(&grid, Some(&a.out))?;
    let failed = results.iter().filter(|r| r.failed()).count();
    if failed > 0 {
        log::warn!("{failed} of {} fits failed; see the flags column", results.len());
    }
    write_run_json(&a.out, "study", grid.seeds.first().copied().unwrap_or(0), serde_json::to_value(&grid)?)?;
    log::info!("wrote {} results to {}", results.len(), a.out.join("summary.csv").display());
    Ok(())
}

fn report(a: &ReportArgs) -> Result<()> {
    let out = a.out.clone().unwrap_or_else(|| a.fit.join("report"));
    std::fs::create_dir_all(&out)?;
    let name = match a.kind {
        ReportKind::ThetaBoxes => "theta_boxes",
        ReportKind::BetaIntervals => "beta_intervals",
        ReportKind::MuIntervals => "mu_intervals",
        ReportKind::PpcOverlay => "ppc_overlay",
        ReportKind::Representativeness => "representativeness",
        ReportKind::FamilyRepresentativeness => "family_representativeness",
    };
    let path = out.join(format!("{name}.csv"));
    let seed;
    match a.kind {
        ReportKind::PpcOverlay => {
            let dir = a.ppc.clone().unwrap_or_else(|| a.fit.join("ppc"));
            let reports = read_ppc_csv(&dir.join("ppc.csv"))?;
            let run: Value = serde_json::from_str(&std::fs::read_to_string(dir.join("run.json"))?)?;
            seed = run["seed"].as_u64().unwrap_or(0);
            export_plot_data(&PlotData::PpcOverlay { reports: &reports, seed }, &path)?;
        }
        kind => {
            let (x, samples) = load_fit_dir(&a.fit)?;
            seed = samples.meta.seed;
            match kind {
                ReportKind::ThetaBoxes => export_plot_data(&PlotData::ThetaBoxes { samples: &samples, x: &x }, &path)?,
                ReportKind::BetaIntervals => export_plot_data(
                    &PlotData::BetaIntervals {
                        samples: &samples,
                        x: &x,
                        top: a.top,
                    },
                    &path,
                )?,
                ReportKind::MuIntervals => export_plot_data(&PlotData::MuIntervals { samples: &samples, x: &x }, &path)?,
                ReportKind::Representativeness => {
                    let beta = median_matrix(&samples, "beta")?;
                    let top = a.top.unwrap_or(20).min(beta.nrows());
                    let mut table = RepresentativenessTable { rows: Vec::new() };
                    for k in 0..beta.ncols() {
                        table.rows.extend(topic_representativeness(&beta, x.feature_ids(), k, top)?.rows);
                    }
                    export_plot_data(&PlotData::Representativeness { table: &table }, &path)?;
                }
                ReportKind::FamilyRepresentativeness => {
                    let beta = median_matrix(&samples, "beta")?;
                    let mut w = csv::Writer::from_path(&path)?;
                    w.write_record(["family", "topic", "mean_score", "size"])?;
                    for f in family_representativeness(&beta, &x)? {
                        w.write_record([f.family, (f.topic + 1).to_string(), f.mean_score.to_string(), f.size.to_string()])?;
                    }
                    w.flush()?;
                }
                ReportKind::PpcOverlay => unreachable!("handled above"),
            }
        }
    }
    write_run_json(&out, "report", seed, json!({"fit": a.fit, "kind": a.kind, "top": a.top}))?;
    log::info!("wrote {}", path.display());
    Ok(())
}
