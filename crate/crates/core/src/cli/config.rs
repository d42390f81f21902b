//! Fit configuration: a flat JSON object, optionally overridden by flags.
//!
//! | key | models | meaning |
//! |---|---|---|
//! | `model` | all | `lda`, `dmm`, `unigram`, `gap` or `zgap` |
//! | `k` | all but unigram | number of topics |
//! | `method` | all | `gibbs`, `vb`, `bootstrap` (lda, gap, zgap); `gibbs` (dmm); `hmc`, `advi` or `vb` (unigram) |
//! | `seed` | all | falls back to `PLVM_SEED` |
//! | `alpha`, `gamma` | lda (both), dmm (`gamma`) | number or per-component array |
//! | `a0`, `b0`, `c0`, `d0` | gap, zgap | gamma shape and rate hyperparameters |
//! | `expected_total` | gap, zgap | instead of `a0..d0`: hyperparameters with this expected library size |
//! | `p0` | zgap | zero-inflation probability |
//! | `sigma_a`, `sigma_b` | unigram | inverse-gamma prior on the walk variance (default 1, 1) |
//! | `iters`, `warmup`, `thin`, `chains` | gibbs, hmc | sweeps; for hmc `iters - warmup` draws are kept |
//! | `leapfrog_steps`, `target_accept`, `metric` | hmc | integrator settings; metric `diagonal`, `dense` or `auto` |
//! | `max_iters`, `tol`, `restarts` | vb, bootstrap, advi | optimizer settings |
//! | `draws` | vb, advi | draws taken from the fitted factors |
//! | `grad_samples`, `eta` | advi | gradient draws and step size |
//! | `replicates`, `max_failure_rate` | bootstrap | refits and tolerated failures |
//! | `counts`, `sample_meta`, `taxonomy` | all | input paths |

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::gap::{hyperparams_for_expected_total, GapHyper};
use crate::inference::{BootstrapOptions, CaviOptions, GibbsOptions};
use crate::lda::Concentration;
use crate::ppc::ModelKind;
use crate::unigram::{AdviOptions, HmcOptions, Metric, SigmaPrior};

pub const SEED_ENV: &str = "PLVM_SEED";

const KEYS: &[&str] = &[
    "model",
    "k",
    "method",
    "seed",
    "alpha",
    "gamma",
    "a0",
    "b0",
    "c0",
    "d0",
    "expected_total",
    "p0",
    "sigma_a",
    "sigma_b",
    "iters",
    "warmup",
    "thin",
    "chains",
    "leapfrog_steps",
    "target_accept",
    "metric",
    "max_iters",
    "tol",
    "restarts",
    "draws",
    "grad_samples",
    "eta",
    "replicates",
    "max_failure_rate",
    "counts",
    "sample_meta",
    "taxonomy",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FitMethod {
    Gibbs,
    Vb,
    Bootstrap,
    Hmc,
    Advi,
}

impl FitMethod {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "gibbs" => FitMethod::Gibbs,
            "vb" => FitMethod::Vb,
            "bootstrap" => FitMethod::Bootstrap,
            "hmc" => FitMethod::Hmc,
            "advi" => FitMethod::Advi,
            _ => return None,
        })
    }

    fn allowed(self, model: ModelKind) -> bool {
        use FitMethod::*;
        match model {
            ModelKind::Lda | ModelKind::Gap | ModelKind::Zgap => matches!(self, Gibbs | Vb | Bootstrap),
            ModelKind::Dmm => self == Gibbs,
            ModelKind::Unigram => matches!(self, Hmc | Advi),
        }
    }
}

/// A fully resolved fit configuration. Engine settings not named in the
/// input keep their defaults; every engine's seed is `seed`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunConfig {
    pub model: ModelKind,
    pub k: usize,
    pub method: FitMethod,
    pub seed: u64,
    pub alpha: Option<Concentration>,
    pub gamma: Option<Concentration>,
    pub hyper: Option<GapHyper>,
    pub expected_total: Option<f64>,
    pub p0: f64,
    pub sigma_prior: SigmaPrior,
    pub gibbs: GibbsOptions,
    pub cavi: CaviOptions,
    pub hmc: HmcOptions,
    pub advi: AdviOptions,
    pub bootstrap: BootstrapOptions,
    pub draws: usize,
    pub counts: Option<PathBuf>,
    pub sample_meta: Option<PathBuf>,
    pub taxonomy: Option<PathBuf>,
}

/// Parses `key=value` from `--set`; the value is JSON when it parses as
/// such and a string otherwise.
pub fn parse_override(s: &str) -> Result<(String, Value)> {
    let (key, raw) = s
        .split_once('=')
        .ok_or_else(|| Error::config(format!("expected key=value, got {s:?}")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok((key.trim().to_string(), value))
}

/// Reads `file` (if any), applies `overrides` on top and resolves the
/// result, with `PLVM_SEED` as the seed of last resort.
pub fn parse_config(file: Option<&Path>, overrides: &[(String, Value)]) -> Result<RunConfig> {
    let mut map = match file {
        Some(path) => match serde_json::from_str(&std::fs::read_to_string(path)?)? {
            Value::Object(m) => m,
            _ => return Err(Error::config(format!("{} must hold a JSON object", path.display()))),
        },
        None => Map::new(),
    };
    for (key, value) in overrides {
        if let Some(old) = map.get(key) {
            if old != value {
                log::warn!("flag sets {key} = {value}, overriding {old} from the config file");
            }
        }
        map.insert(key.clone(), value.clone());
    }
    let env_seed = std::env::var(SEED_ENV).ok();
    resolve(&map, env_seed.as_deref())
}

struct Fields<'a> {
    map: &'a Map<String, Value>,
    problems: Vec<String>,
}

impl Fields<'_> {
    fn has(&self, key: &str) -> bool {
        self.map.contains_key(key)
    }

    fn f64(&mut self, key: &str) -> Option<f64> {
        let v = self.map.get(key)?;
        match v.as_f64() {
            Some(x) => Some(x),
            None => {
                self.problems.push(format!("{key}: expected a number, got {v}"));
                None
            }
        }
    }

    fn u64(&mut self, key: &str) -> Option<u64> {
        let v = self.map.get(key)?;
        match v.as_u64() {
            Some(x) => Some(x),
            None => {
                self.problems.push(format!("{key}: expected a nonnegative integer, got {v}"));
                None
            }
        }
    }

    fn usize(&mut self, key: &str) -> Option<usize> {
        self.u64(key).map(|x| x as usize)
    }

    fn string(&mut self, key: &str) -> Option<String> {
        let v = self.map.get(key)?;
        match v.as_str() {
            Some(s) => Some(s.to_string()),
            None => {
                self.problems.push(format!("{key}: expected a string, got {v}"));
                None
            }
        }
    }

    fn concentration(&mut self, key: &str) -> Option<Concentration> {
        let v = self.map.get(key)?;
        match serde_json::from_value::<Concentration>(v.clone()) {
            Ok(c) => Some(c),
            Err(_) => {
                self.problems.push(format!("{key}: expected a number or an array of numbers, got {v}"));
                None
            }
        }
    }

    fn require(&mut self, key: &str, why: &str) {
        if !self.has(key) {
            self.problems.push(format!("missing required field '{key}'{why}"));
        }
    }

    fn check(&mut self, r: Result<()>) {
        if let Err(e) = r {
            self.problems.push(match e {
                Error::Config(m) | Error::Domain(m) => m,
                other => other.to_string(),
            });
        }
    }
}

/// Resolves a merged key map; `env_seed` stands in for `PLVM_SEED`.
pub fn resolve(map: &Map<String, Value>, env_seed: Option<&str>) -> Result<RunConfig> {
    let mut f = Fields {
        map,
        problems: Vec::new(),
    };
    let mut unknown: Vec<&String> = map.keys().filter(|k| !KEYS.contains(&k.as_str())).collect();
    unknown.sort();
    for key in unknown {
        f.problems.push(format!("unknown key '{key}'"));
    }

    let model = match f.string("model") {
        Some(s) => match s.parse::<ModelKind>() {
            Ok(m) => Some(m),
            Err(_) => {
                f.problems.push(format!("model: unknown model {s:?}"));
                None
            }
        },
        None => {
            f.require("model", "");
            None
        }
    };
    let mut method = match f.string("method") {
        Some(s) => match FitMethod::parse(&s) {
            Some(m) => Some(m),
            None => {
                f.problems.push(format!("method: unknown method {s:?}"));
                None
            }
        },
        None => {
            f.require("method", "");
            None
        }
    };
    if model == Some(ModelKind::Unigram) && method == Some(FitMethod::Vb) {
        method = Some(FitMethod::Advi);
    }
    if let (Some(m), Some(meth)) = (model, method) {
        if !meth.allowed(m) {
            f.problems.push(format!("method {meth:?} does not apply to model {m}").to_lowercase());
        }
    }

    let seed = match f.u64("seed") {
        Some(s) => Some(s),
        None if f.has("seed") => None,
        None => match env_seed {
            Some(raw) => match raw.trim().parse::<u64>() {
                Ok(s) => Some(s),
                Err(_) => {
                    f.problems.push(format!("{SEED_ENV}: not a nonnegative integer: {raw:?}"));
                    None
                }
            },
            None => {
                f.require("seed", &format!(" (or set {SEED_ENV})"));
                None
            }
        },
    };

    let k = f.usize("k");
    if model.is_some_and(|m| m != ModelKind::Unigram) {
        match k {
            Some(0) => f.problems.push("k must be positive".into()),
            Some(_) => {}
            None => f.require("k", ""),
        }
    }

    let alpha = f.concentration("alpha");
    let gamma = f.concentration("gamma");
    match model {
        Some(ModelKind::Lda) => {
            f.require("alpha", " for lda");
            f.require("gamma", " for lda");
        }
        Some(ModelKind::Dmm) => f.require("gamma", " for dmm"),
        _ => {}
    }
    for c in [&alpha, &gamma].into_iter().flatten() {
        let values = match c {
            Concentration::Symmetric(a) => vec![*a],
            Concentration::Vector(v) => v.clone(),
        };
        if values.iter().any(|a| !(*a > 0.0) || !a.is_finite()) {
            f.problems.push(format!("concentrations must be positive and finite, got {c:?}"));
        }
    }

    let p0 = f.f64("p0");
    let mut hyper = None;
    let mut expected_total = None;
    if matches!(model, Some(ModelKind::Gap | ModelKind::Zgap)) {
        let named: Vec<Option<f64>> = ["a0", "b0", "c0", "d0"].iter().map(|k| f.f64(k)).collect();
        let given = ["a0", "b0", "c0", "d0"].iter().filter(|k| f.has(k)).count();
        expected_total = f.f64("expected_total");
        match (expected_total, given) {
            (Some(_), 1..) => f.problems.push("give either expected_total or a0, b0, c0, d0, not both".into()),
            (Some(t), 0) if !(t > 0.0) || !t.is_finite() => {
                f.problems.push(format!("expected_total must be positive, got {t}"))
            }
            (Some(_), 0) => {}
            (None, 4) => {
                if let [Some(a0), Some(b0), Some(c0), Some(d0)] = named[..] {
                    let h = GapHyper { a0, b0, c0, d0 };
                    f.check(h.validate());
                    hyper = Some(h);
                }
            }
            (None, _) if f.has("expected_total") => {}
            (None, _) => {
                for key in ["a0", "b0", "c0", "d0"] {
                    f.require(key, " for gap (or give expected_total)");
                }
            }
        }
        if model == Some(ModelKind::Zgap) {
            match p0 {
                Some(p) if !(p > 0.0 && p < 1.0) => f.problems.push(format!("p0 must lie in (0, 1) for zgap, got {p}")),
                Some(_) => {}
                None if f.has("p0") => {}
                None => f.require("p0", " for zgap"),
            }
        } else if p0.is_some_and(|p| p != 0.0) {
            f.problems.push("p0 > 0 needs model zgap".into());
        }
    }

    let mut sigma_prior = SigmaPrior::default();
    if let Some(a) = f.f64("sigma_a") {
        sigma_prior.a = a;
    }
    if let Some(b) = f.f64("sigma_b") {
        sigma_prior.b = b;
    }
    if !(sigma_prior.a > 0.0 && sigma_prior.b > 0.0) {
        f.problems.push("sigma_a and sigma_b must be positive".into());
    }

    let seed_value = seed.unwrap_or(0);
    let iters = f.usize("iters");
    let warmup = f.usize("warmup");
    let chains = f.usize("chains");
    let mut gibbs = GibbsOptions {
        seed: seed_value,
        ..Default::default()
    };
    if let Some(i) = iters {
        gibbs.iters = i;
    }
    if let Some(w) = warmup {
        gibbs.warmup = w;
    }
    if let Some(c) = chains {
        gibbs.chains = c;
    }
    if let Some(t) = f.usize("thin") {
        gibbs.thin = t;
    }

    let mut hmc = HmcOptions {
        seed: seed_value,
        ..Default::default()
    };
    if let Some(w) = warmup {
        hmc.warmup = w;
    }
    if let Some(i) = iters {
        match i.checked_sub(hmc.warmup) {
            Some(d) if d > 0 => hmc.draws = d,
            _ if method == Some(FitMethod::Hmc) => {
                f.problems.push(format!("iters ({i}) must exceed warmup ({})", hmc.warmup))
            }
            _ => {}
        }
    }
    if let Some(c) = chains {
        hmc.chains = c;
    }
    if let Some(l) = f.usize("leapfrog_steps") {
        hmc.leapfrog_steps = l;
    }
    if let Some(t) = f.f64("target_accept") {
        hmc.target_accept = t;
    }
    if let Some(m) = f.string("metric") {
        match serde_json::from_value::<Metric>(Value::String(m.clone())) {
            Ok(m) => hmc.metric = m,
            Err(_) => f.problems.push(format!("metric: unknown metric {m:?}")),
        }
    }

    let mut cavi = CaviOptions {
        seed: seed_value,
        ..Default::default()
    };
    let mut advi = AdviOptions {
        seed: seed_value,
        ..Default::default()
    };
    if let Some(m) = f.usize("max_iters") {
        cavi.max_iters = m;
        advi.iters = m;
    }
    if let Some(t) = f.f64("tol") {
        cavi.tol = t;
        advi.tol_rel_obj = t;
    }
    if let Some(r) = f.usize("restarts") {
        cavi.restarts = r;
    }
    let draws = f.usize("draws").unwrap_or(1000);
    advi.output_draws = draws;
    if let Some(g) = f.usize("grad_samples") {
        advi.grad_samples = g;
    }
    if let Some(e) = f.f64("eta") {
        advi.eta = e;
    }

    let mut bootstrap = BootstrapOptions {
        seed: seed_value,
        ..Default::default()
    };
    if let Some(r) = f.usize("replicates") {
        bootstrap.replicates = r;
    }
    if let Some(m) = f.f64("max_failure_rate") {
        bootstrap.max_failure_rate = m;
    }

    match method {
        Some(FitMethod::Gibbs) => f.check(gibbs.validate()),
        Some(FitMethod::Hmc) => f.check(hmc.validate()),
        Some(FitMethod::Advi) => f.check(advi.validate()),
        Some(FitMethod::Vb) => f.check(cavi.validate()),
        Some(FitMethod::Bootstrap) => {
            f.check(cavi.validate());
            f.check(bootstrap.validate());
        }
        None => {}
    }
    if method == Some(FitMethod::Vb) && draws < 2 {
        f.problems.push("draws must be at least 2".into());
    }

    let path = |f: &mut Fields, key: &str| f.string(key).map(PathBuf::from);
    let counts = path(&mut f, "counts");
    let sample_meta = path(&mut f, "sample_meta");
    let taxonomy = path(&mut f, "taxonomy");

    if !f.problems.is_empty() {
        return Err(Error::config(format!(
            "{} problem(s) in the configuration: {}",
            f.problems.len(),
            f.problems.join("; ")
        )));
    }
    Ok(RunConfig {
        model: model.expect("checked"),
        k: k.unwrap_or(0),
        method: method.expect("checked"),
        seed: seed.expect("checked"),
        alpha,
        gamma,
        hyper,
        expected_total,
        p0: p0.unwrap_or(0.0),
        sigma_prior,
        gibbs,
        cavi,
        hmc,
        advi,
        bootstrap,
        draws,
        counts,
        sample_meta,
        taxonomy,
    })
}

impl RunConfig {
    /// GaP hyperparameters for `v` features.
    pub fn gap_hyper(&self, v: usize) -> Result<GapHyper> {
        match (self.hyper, self.expected_total) {
            (Some(h), _) => Ok(h),
            (None, Some(t)) => hyperparams_for_expected_total(t, self.k, v),
            (None, None) => Err(Error::config("gap hyperparameters are missing")),
        }
    }
}
