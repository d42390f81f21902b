//! Gamma-Poisson factorization `X ~ Poi(theta beta^T)` with entrywise gamma
//! priors, and its zero-inflated variant where each entry is independently
//! sent to zero with a known probability `p0`.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{digamma, ln_gamma};

use crate::corpus::CountMatrix;
use crate::error::{Error, Result};
use crate::inference::{parametric_bootstrap, run_chains, BootstrapOptions, CaviOptions, GibbsOptions, PointEstimate, PosteriorSamples, SampleMeta, TopicRole, Trace};
use crate::numeric::{self, ln_factorial, ln_poisson_pmf, softmax_into, Rng};

/// Shape-rate gamma hyperparameters: `theta_dk ~ Gamma(a0, b0)`,
/// `beta_vk ~ Gamma(c0, d0)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapHyper {
    pub a0: f64,
    pub b0: f64,
    pub c0: f64,
    pub d0: f64,
}

impl Default for GapHyper {
    fn default() -> Self {
        GapHyper {
            a0: 1.0,
            b0: 1.0,
            c0: 1.0,
            d0: 1.0,
        }
    }
}

impl GapHyper {
    pub fn validate(&self) -> Result<()> {
        if [self.a0, self.b0, self.c0, self.d0].iter().any(|h| !(*h > 0.0) || !h.is_finite()) {
            return Err(Error::domain(format!("gamma hyperparameters must be positive: {self:?}")));
        }
        Ok(())
    }

    /// `E[N_d] = V K (a0 / b0) (c0 / d0)`.
    pub fn expected_total(&self, k: usize, v: usize) -> f64 {
        (v * k) as f64 * (self.a0 / self.b0) * (self.c0 / self.d0)
    }
}

/// `a0 = c0 = d0 = 1` and `b0 = V K / target`, so the expected library size
/// is exactly `target`.
pub fn hyperparams_for_expected_total(target: f64, k: usize, v: usize) -> Result<GapHyper> {
    if !(target > 0.0) || !target.is_finite() || k == 0 || v == 0 {
        return Err(Error::domain(format!("need target > 0, K, V >= 1 (got {target}, {k}, {v})")));
    }
    Ok(GapHyper {
        a0: 1.0,
        b0: (v * k) as f64 / target,
        c0: 1.0,
        d0: 1.0,
    })
}

fn check_p0(p0: f64) -> Result<()> {
    if !(0.0..1.0).contains(&p0) {
        return Err(Error::domain(format!("p0 must lie in [0, 1), got {p0}")));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct GapParams {
    /// D×K.
    pub theta: Array2<f64>,
    /// V×K.
    pub beta: Array2<f64>,
    pub hyper: GapHyper,
    pub p0: f64,
}

impl GapParams {
    /// Poisson rates `theta beta^T`, D×V.
    pub fn rates(&self) -> Array2<f64> {
        self.theta.dot(&self.beta.t())
    }

    pub fn validate(&self) -> Result<()> {
        self.hyper.validate()?;
        check_p0(self.p0)?;
        if self.theta.ncols() != self.beta.ncols() {
            return Err(Error::shape(format!(
                "theta has {} topics, beta {}",
                self.theta.ncols(),
                self.beta.ncols()
            )));
        }
        if self.theta.iter().chain(self.beta.iter()).any(|x| !(*x >= 0.0) || !x.is_finite()) {
            return Err(Error::domain("theta and beta must be finite and nonnegative"));
        }
        Ok(())
    }
}

/// Entries that were structurally zeroed, D×V.
#[derive(Clone, Debug, PartialEq)]
pub struct ZeroMask(pub Array2<bool>);

impl ZeroMask {
    pub fn fraction(&self) -> f64 {
        self.0.iter().filter(|&&m| m).count() as f64 / self.0.len().max(1) as f64
    }
}

/// Draws counts from given parameters: Poisson, then zeroing with `p0`.
pub fn simulate_gap_counts(params: &GapParams, rng: &mut Rng) -> (Array2<u64>, ZeroMask) {
    let rates = params.rates();
    let mut mask = Array2::from_elem(rates.dim(), false);
    let mut counts = Array2::zeros(rates.dim());
    for ((idx, &lambda), m) in rates.indexed_iter().zip(mask.iter_mut()) {
        let x = numeric::poisson(lambda, rng);
        if params.p0 > 0.0 && rng.uniform() < params.p0 {
            *m = true;
        } else {
            counts[idx] = x;
        }
    }
    (counts, ZeroMask(mask))
}

/// `theta_dk ~ Gamma(a0, b0)`, `beta_vk ~ Gamma(c0, d0)`,
/// `x_dv ~ Poi((theta beta^T)_dv)`, each entry zeroed with probability `p0`.
pub fn simulate_gap(
    d: usize,
    v: usize,
    k: usize,
    hyper: &GapHyper,
    p0: f64,
    rng: &mut Rng,
) -> Result<(CountMatrix, GapParams, ZeroMask)> {
    if d == 0 || v == 0 || k == 0 {
        return Err(Error::domain(format!("D, V, K must be positive (got {d}, {v}, {k})")));
    }
    hyper.validate()?;
    check_p0(p0)?;
    let theta = Array2::from_shape_simple_fn((d, k), || numeric::gamma(hyper.a0, hyper.b0, rng));
    let beta = Array2::from_shape_simple_fn((v, k), || numeric::gamma(hyper.c0, hyper.d0, rng));
    let params = GapParams {
        theta,
        beta,
        hyper: *hyper,
        p0,
    };
    let (counts, mask) = simulate_gap_counts(&params, rng);
    Ok((CountMatrix::from_counts(counts), params, mask))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// Plain Poisson likelihood; requires `p0 = 0`.
    None,
    /// Zero-inflated marginal with the parameters' `p0`.
    KnownP0,
}

/// Log likelihood of the counts, Poisson normalizers included. `-inf` when a positive count meets a zero rate.
pub fn gap_log_likelihood(x: &CountMatrix, params: &GapParams, mode: MaskMode) -> Result<f64> {
    let (d, v) = x.counts().dim();
    if params.theta.nrows() != d || params.beta.nrows() != v || params.theta.ncols() != params.beta.ncols() {
        return Err(Error::shape(format!(
            "data {d}x{v}, theta {:?}, beta {:?}",
            params.theta.dim(),
            params.beta.dim()
        )));
    }
    check_p0(params.p0)?;
    let p0 = params.p0;
    if mode == MaskMode::None && p0 > 0.0 {
        return Err(Error::config(format!(
            "p0 = {p0} needs the zero-inflated likelihood (mask mode known_p0)"
        )));
    }
    let rates = params.rates();
    let mut total = 0.0;
    for (&c, &lambda) in x.counts().iter().zip(rates.iter()) {
        total += match mode {
            MaskMode::None => ln_poisson_pmf(c, lambda),
            MaskMode::KnownP0 if c == 0 => (p0 + (1.0 - p0) * (-lambda).exp()).ln(),
            MaskMode::KnownP0 => (1.0 - p0).ln() + ln_poisson_pmf(c, lambda),
        };
    }
    Ok(total)
}

/// Probability that a zero entry with rate `lambda` is structural.
fn structural_prob(p0: f64, lambda: f64) -> f64 {
    if p0 <= 0.0 {
        return 0.0;
    }
    p0 / (p0 + (1.0 - p0) * (-lambda).exp())
}

/// Augmented Gibbs state. Each sweep resamples the structural-zero
/// indicators, the latent per-topic counts, `theta`, then `beta`.
#[derive(Clone, Debug)]
pub struct GapGibbs {
    hyper: GapHyper,
    p0: f64,
    cells: Vec<(usize, usize, u64)>,
    zeros: Vec<(usize, usize)>,
    theta: Array2<f64>,
    beta: Array2<f64>,
    /// Structural flag per entry, D×V; only zero entries can be set.
    structural: Array2<bool>,
    doc_stat: Array2<f64>,
    word_stat: Array2<f64>,
}

impl GapGibbs {
    /// Starts from a draw of the prior.
    pub fn new(x: &CountMatrix, k: usize, hyper: &GapHyper, p0: f64, rng: &mut Rng) -> Result<Self> {
        hyper.validate()?;
        check_p0(p0)?;
        if k == 0 {
            return Err(Error::config("K must be at least 1"));
        }
        let (d, v) = x.counts().dim();
        let mut cells = Vec::new();
        let mut zeros = Vec::new();
        for ((i, w), &c) in x.counts().indexed_iter() {
            if c > 0 {
                cells.push((i, w, c));
            } else {
                zeros.push((i, w));
            }
        }
        Ok(GapGibbs {
            hyper: *hyper,
            p0,
            cells,
            zeros,
            theta: Array2::from_shape_simple_fn((d, k), || numeric::gamma(hyper.a0, hyper.b0, rng)),
            beta: Array2::from_shape_simple_fn((v, k), || numeric::gamma(hyper.c0, hyper.d0, rng)),
            structural: Array2::from_elem((d, v), false),
            doc_stat: Array2::zeros((d, k)),
            word_stat: Array2::zeros((v, k)),
        })
    }

    pub fn theta(&self) -> &Array2<f64> {
        &self.theta
    }

    pub fn beta(&self) -> &Array2<f64> {
        &self.beta
    }

    pub fn set_beta(&mut self, beta: Array2<f64>) {
        assert_eq!(beta.dim(), self.beta.dim());
        self.beta = beta;
    }

    pub fn structural(&self) -> &Array2<bool> {
        &self.structural
    }

    pub fn update_indicators(&mut self, rng: &mut Rng) {
        if self.p0 <= 0.0 {
            return;
        }
        for &(i, w) in &self.zeros {
            let lambda = self.theta.row(i).dot(&self.beta.row(w));
            self.structural[[i, w]] = rng.uniform() < structural_prob(self.p0, lambda);
        }
    }

    /// Splits every positive count across topics in proportion to
    /// `theta_dk beta_vk`, accumulating per-sample and per-feature totals.
    pub fn update_latent(&mut self, rng: &mut Rng) {
        let k = self.theta.ncols();
        self.doc_stat.fill(0.0);
        self.word_stat.fill(0.0);
        let mut p = vec![0.0; k];
        let mut s = vec![0u64; k];
        for &(i, w, c) in &self.cells {
            for j in 0..k {
                p[j] = self.theta[[i, j]] * self.beta[[w, j]];
            }
            let total: f64 = p.iter().sum();
            if total > 0.0 {
                p.iter_mut().for_each(|x| *x /= total);
            } else {
                p.fill(1.0 / k as f64);
            }
            numeric::multinomial_into(c, &p, rng, &mut s);
            for j in 0..k {
                self.doc_stat[[i, j]] += s[j] as f64;
                self.word_stat[[w, j]] += s[j] as f64;
            }
        }
    }

    pub fn update_theta(&mut self, rng: &mut Rng) {
        let (d, k) = self.theta.dim();
        let beta_total: Vec<f64> = (0..k).map(|j| self.beta.column(j).sum()).collect();
        for i in 0..d {
            for j in 0..k {
                let mut rate = self.hyper.b0 + beta_total[j];
                if self.p0 > 0.0 {
                    for (w, &s) in self.structural.row(i).iter().enumerate() {
                        if s {
                            rate -= self.beta[[w, j]];
                        }
                    }
                }
                self.theta[[i, j]] = numeric::gamma(self.hyper.a0 + self.doc_stat[[i, j]], rate.max(self.hyper.b0), rng);
            }
        }
    }

    pub fn update_beta(&mut self, rng: &mut Rng) {
        let (v, k) = self.beta.dim();
        let theta_total: Vec<f64> = (0..k).map(|j| self.theta.column(j).sum()).collect();
        for w in 0..v {
            for j in 0..k {
                let mut rate = self.hyper.d0 + theta_total[j];
                if self.p0 > 0.0 {
                    for (i, &s) in self.structural.column(w).iter().enumerate() {
                        if s {
                            rate -= self.theta[[i, j]];
                        }
                    }
                }
                self.beta[[w, j]] = numeric::gamma(self.hyper.c0 + self.word_stat[[w, j]], rate.max(self.hyper.d0), rng);
            }
        }
    }

    pub fn sweep(&mut self, rng: &mut Rng) {
        self.update_indicators(rng);
        self.update_latent(rng);
        self.update_theta(rng);
        self.update_beta(rng);
    }
}

fn gap_meta(method: &str, seed: u64, p0: f64, hyper: &GapHyper) -> SampleMeta {
    let mut meta = SampleMeta {
        model: if p0 > 0.0 { "zgap" } else { "gap" }.into(),
        method: method.into(),
        seed,
        ..Default::default()
    };
    meta.extra.insert("p0".into(), p0.into());
    meta.extra
        .insert("hyper".into(), serde_json::to_value(hyper).expect("plain struct"));
    meta
}

/// Augmented Gibbs sampler. `p0` is treated as known; with `p0 > 0` the
/// structural zeros are sampled and left out of the gamma statistics.
pub fn fit_gap_gibbs(x: &CountMatrix, k: usize, hyper: &GapHyper, p0: f64, opts: &GibbsOptions) -> Result<PosteriorSamples> {
    opts.validate()?;
    let tokens = x.total();
    if k as u64 > tokens {
        return Err(Error::config(format!("K = {k} exceeds the {tokens} tokens in the data")));
    }
    let (d, v) = x.counts().dim();
    let root = Rng::new(opts.seed);
    let traces = run_chains(opts.chains, |chain| -> Result<Trace> {
        let mut rng = root.split(chain as u64);
        let mut state = GapGibbs::new(x, k, hyper, p0, &mut rng)?;
        let mut trace = Trace::new();
        trace
            .declare("theta", vec![d, k], TopicRole::Axis(1))
            .declare("beta", vec![v, k], TopicRole::Axis(1));
        for iter in 0..opts.iters {
            state.sweep(&mut rng);
            if opts.keeps(iter) {
                trace.push("theta", state.theta.as_slice().expect("standard layout"));
                trace.push("beta", state.beta.as_slice().expect("standard layout"));
                trace.end_draw();
            }
        }
        Ok(trace)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let mut meta = gap_meta("gibbs", opts.seed, p0, hyper);
    meta.warmup = opts.warmup;
    meta.iters = opts.iters;
    PosteriorSamples::from_traces(meta, traces)
}

/// Mean-field variational posterior for GaP: gamma factors for `theta` and
/// `beta`, multinomial factors for the latent per-topic counts, and
/// Bernoulli factors for structural zeros.
#[derive(Clone, Debug, PartialEq)]
pub struct GapFit {
    pub theta_shape: Array2<f64>,
    pub theta_rate: Array2<f64>,
    pub beta_shape: Array2<f64>,
    pub beta_rate: Array2<f64>,
    /// Probability that each entry is a structural zero, D×V (0 at positive entries).
    pub structural: Array2<f64>,
    pub elbo_trace: Vec<f64>,
    pub converged: bool,
    pub restart: usize,
    pub hyper: GapHyper,
    pub p0: f64,
}

struct GapProblem<'a> {
    x: &'a CountMatrix,
    k: usize,
    hyper: GapHyper,
    p0: f64,
    cells: Vec<(usize, usize, u64)>,
    zeros: Vec<(usize, usize)>,
    /// `sum ln x!` over positive entries.
    log_fact: f64,
}

struct GapState {
    theta_shape: Array2<f64>,
    theta_rate: Array2<f64>,
    beta_shape: Array2<f64>,
    beta_rate: Array2<f64>,
    /// K per positive cell.
    resp: Vec<f64>,
    structural: Array2<f64>,
}

fn gamma_mean(shape: &Array2<f64>, rate: &Array2<f64>) -> Array2<f64> {
    shape / rate
}

fn gamma_elog(shape: &Array2<f64>, rate: &Array2<f64>) -> Array2<f64> {
    ndarray::Zip::from(shape).and(rate).map_collect(|&a, &b| digamma(a) - b.ln())
}

/// `E_q[log Gamma(x; a, b)] - E_q[log Gamma(x; shape, rate)]`.
fn gamma_kl_terms(a: f64, b: f64, shape: &Array2<f64>, rate: &Array2<f64>, elog: &Array2<f64>, mean: &Array2<f64>) -> f64 {
    let prior_norm = a * b.ln() - ln_gamma(a);
    let mut acc = 0.0;
    for (((&s, &r), &el), &m) in shape.iter().zip(rate.iter()).zip(elog.iter()).zip(mean.iter()) {
        acc += prior_norm + (a - 1.0) * el - b * m;
        acc -= s * r.ln() - ln_gamma(s) + (s - 1.0) * el - r * m;
    }
    acc
}

fn bernoulli_entropy(p: f64) -> f64 {
    let mut h = 0.0;
    if p > 0.0 {
        h -= p * p.ln();
    }
    if p < 1.0 {
        h -= (1.0 - p) * (1.0 - p).ln();
    }
    h
}

impl GapProblem<'_> {
    fn update_theta(&self, s: &mut GapState) {
        let eb = gamma_mean(&s.beta_shape, &s.beta_rate);
        let k = self.k;
        s.theta_shape.fill(self.hyper.a0);
        let beta_total: Vec<f64> = (0..k).map(|j| eb.column(j).sum()).collect();
        for (i, mut row) in s.theta_rate.rows_mut().into_iter().enumerate() {
            for (j, r) in row.iter_mut().enumerate() {
                *r = self.hyper.b0 + beta_total[j];
            }
            if self.p0 > 0.0 {
                for (w, &p) in s.structural.row(i).iter().enumerate() {
                    if p > 0.0 {
                        for j in 0..k {
                            row[j] -= p * eb[[w, j]];
                        }
                    }
                }
            }
        }
        for (c, &(i, _, n)) in self.cells.iter().enumerate() {
            for j in 0..k {
                s.theta_shape[[i, j]] += n as f64 * s.resp[c * k + j];
            }
        }
    }

    fn update_beta(&self, s: &mut GapState) {
        let et = gamma_mean(&s.theta_shape, &s.theta_rate);
        let k = self.k;
        s.beta_shape.fill(self.hyper.c0);
        let theta_total: Vec<f64> = (0..k).map(|j| et.column(j).sum()).collect();
        for (w, mut row) in s.beta_rate.rows_mut().into_iter().enumerate() {
            for (j, r) in row.iter_mut().enumerate() {
                *r = self.hyper.d0 + theta_total[j];
            }
            if self.p0 > 0.0 {
                for (i, &p) in s.structural.column(w).iter().enumerate() {
                    if p > 0.0 {
                        for j in 0..k {
                            row[j] -= p * et[[i, j]];
                        }
                    }
                }
            }
        }
        for (c, &(_, w, n)) in self.cells.iter().enumerate() {
            for j in 0..k {
                s.beta_shape[[w, j]] += n as f64 * s.resp[c * k + j];
            }
        }
    }

    fn update_structural(&self, s: &mut GapState) {
        if self.p0 <= 0.0 {
            return;
        }
        let rates = gamma_mean(&s.theta_shape, &s.theta_rate).dot(&gamma_mean(&s.beta_shape, &s.beta_rate).t());
        for &(i, w) in &self.zeros {
            s.structural[[i, w]] = structural_prob(self.p0, rates[[i, w]]);
        }
    }

    fn update_resp(&self, s: &mut GapState) {
        let lt = gamma_elog(&s.theta_shape, &s.theta_rate);
        let lb = gamma_elog(&s.beta_shape, &s.beta_rate);
        let k = self.k;
        let mut logits = vec![0.0; k];
        for (c, &(i, w, _)) in self.cells.iter().enumerate() {
            for j in 0..k {
                logits[j] = lt[[i, j]] + lb[[w, j]];
            }
            softmax_into(&logits, &mut s.resp[c * k..(c + 1) * k]);
        }
    }

    fn elbo(&self, s: &GapState) -> f64 {
        let k = self.k;
        let et = gamma_mean(&s.theta_shape, &s.theta_rate);
        let eb = gamma_mean(&s.beta_shape, &s.beta_rate);
        let lt = gamma_elog(&s.theta_shape, &s.theta_rate);
        let lb = gamma_elog(&s.beta_shape, &s.beta_rate);
        let rates = et.dot(&eb.t());
        let log_keep = (1.0 - self.p0).ln();
        let mut total = -self.log_fact;
        for (c, &(i, w, n)) in self.cells.iter().enumerate() {
            let mut cell = 0.0;
            for j in 0..k {
                let r = s.resp[c * k + j];
                if r > 0.0 {
                    cell += r * (lt[[i, j]] + lb[[w, j]] - r.ln());
                }
            }
            total += n as f64 * cell - rates[[i, w]] + log_keep;
        }
        for &(i, w) in &self.zeros {
            let p = s.structural[[i, w]];
            total -= (1.0 - p) * rates[[i, w]];
            if self.p0 > 0.0 {
                total += p * self.p0.ln() + (1.0 - p) * log_keep + bernoulli_entropy(p);
            }
        }
        total += gamma_kl_terms(self.hyper.a0, self.hyper.b0, &s.theta_shape, &s.theta_rate, &lt, &et);
        total += gamma_kl_terms(self.hyper.c0, self.hyper.d0, &s.beta_shape, &s.beta_rate, &lb, &eb);
        total
    }

    fn run(&self, opts: &CaviOptions, restart: usize, rng: &mut Rng) -> Result<GapFit> {
        let (d, v) = self.x.counts().dim();
        let k = self.k;
        let mut s = GapState {
            theta_shape: Array2::from_elem((d, k), self.hyper.a0),
            theta_rate: Array2::from_elem((d, k), self.hyper.b0),
            beta_shape: Array2::from_elem((v, k), self.hyper.c0),
            beta_rate: Array2::from_elem((v, k), self.hyper.d0),
            resp: vec![0.0; self.cells.len() * k],
            structural: Array2::zeros((d, v)),
        };
        let mut noise = vec![0.0; k];
        for c in 0..self.cells.len() {
            noise.iter_mut().for_each(|z| *z = INIT_NOISE_SD * rng.standard_normal());
            softmax_into(&noise, &mut s.resp[c * k..(c + 1) * k]);
        }
        if self.p0 > 0.0 {
            for &(i, w) in &self.zeros {
                s.structural[[i, w]] = self.p0;
            }
        }
        self.update_theta(&mut s);
        let mut trace = vec![self.elbo(&s)];
        check_finite(trace[0], 0)?;
        let mut converged = false;
        for iter in 1..=opts.max_iters {
            self.update_beta(&mut s);
            self.update_structural(&mut s);
            self.update_resp(&mut s);
            self.update_theta(&mut s);
            let e = self.elbo(&s);
            check_finite(e, iter)?;
            let prev = *trace.last().expect("nonempty");
            trace.push(e);
            if ((e - prev) / prev.abs().max(1e-300)).abs() < opts.tol {
                converged = true;
                break;
            }
        }
        Ok(GapFit {
            theta_shape: s.theta_shape,
            theta_rate: s.theta_rate,
            beta_shape: s.beta_shape,
            beta_rate: s.beta_rate,
            structural: s.structural,
            elbo_trace: trace,
            converged,
            restart,
            hyper: self.hyper,
            p0: self.p0,
        })
    }
}

/// Standard deviation of the logits used to seed responsibilities.
const INIT_NOISE_SD: f64 = 0.5;

fn check_finite(e: f64, iteration: usize) -> Result<()> {
    if e.is_finite() {
        Ok(())
    } else {
        Err(Error::Numerical {
            iteration,
            message: format!("ELBO is {e}"),
        })
    }
}

/// Coordinate-ascent variational inference for GaP with known `p0`.
pub fn fit_gap_cavi(x: &CountMatrix, k: usize, hyper: &GapHyper, p0: f64, opts: &CaviOptions) -> Result<GapFit> {
    opts.validate()?;
    hyper.validate()?;
    check_p0(p0)?;
    if k == 0 {
        return Err(Error::config("K must be at least 1"));
    }
    let mut cells = Vec::new();
    let mut zeros = Vec::new();
    for ((i, w), &c) in x.counts().indexed_iter() {
        if c > 0 {
            cells.push((i, w, c));
        } else {
            zeros.push((i, w));
        }
    }
    let problem = GapProblem {
        x,
        k,
        hyper: *hyper,
        p0,
        log_fact: cells.iter().map(|&(_, _, c)| ln_factorial(c)).sum(),
        cells,
        zeros,
    };
    let root = Rng::new(opts.seed);
    let fits = run_chains(opts.restarts, |r| problem.run(opts, r, &mut root.split(r as u64)));
    let mut best: Option<GapFit> = None;
    for fit in fits {
        let fit = fit?;
        if best.as_ref().is_none_or(|b| fit.elbo() > b.elbo()) {
            best = Some(fit);
        }
    }
    Ok(best.expect("at least one restart"))
}

impl GapFit {
    pub fn elbo(&self) -> f64 {
        *self.elbo_trace.last().expect("trace starts at initialization")
    }

    pub fn iterations(&self) -> usize {
        self.elbo_trace.len() - 1
    }

    /// Variational posterior means.
    pub fn point_params(&self) -> GapParams {
        GapParams {
            theta: gamma_mean(&self.theta_shape, &self.theta_rate),
            beta: gamma_mean(&self.beta_shape, &self.beta_rate),
            hyper: self.hyper,
            p0: self.p0,
        }
    }

    /// Independent draws from the gamma factors.
    pub fn sample_posterior(&self, draws: usize, seed: u64) -> Result<PosteriorSamples> {
        let (d, k) = self.theta_shape.dim();
        let v = self.beta_shape.nrows();
        let mut rng = Rng::new(seed);
        let mut trace = Trace::new();
        trace
            .declare("theta", vec![d, k], TopicRole::Axis(1))
            .declare("beta", vec![v, k], TopicRole::Axis(1));
        for _ in 0..draws {
            let theta: Vec<f64> = self
                .theta_shape
                .iter()
                .zip(self.theta_rate.iter())
                .map(|(&a, &b)| numeric::gamma(a, b, &mut rng))
                .collect();
            let beta: Vec<f64> = self
                .beta_shape
                .iter()
                .zip(self.beta_rate.iter())
                .map(|(&a, &b)| numeric::gamma(a, b, &mut rng))
                .collect();
            trace.push("theta", &theta);
            trace.push("beta", &beta);
            trace.end_draw();
        }
        let mut meta = gap_meta("vb", seed, self.p0, &self.hyper);
        meta.iters = self.iterations();
        meta.extra.insert("elbo".into(), self.elbo().into());
        meta.extra.insert("converged".into(), self.converged.into());
        if !self.converged {
            meta.warnings
                .push(format!("CAVI stopped after {} iterations without converging", self.iterations()));
        }
        PosteriorSamples::from_traces(meta, vec![trace])
    }
}

impl PointEstimate for GapFit {
    fn theta(&self) -> Array2<f64> {
        gamma_mean(&self.theta_shape, &self.theta_rate)
    }

    fn beta(&self) -> Array2<f64> {
        gamma_mean(&self.beta_shape, &self.beta_rate)
    }

    fn model(&self) -> &'static str {
        if self.p0 > 0.0 {
            "zgap"
        } else {
            "gap"
        }
    }
}

/// Parametric bootstrap around a variational fit; replicates are simulated
/// from its point estimates, zero mask included.
pub fn bootstrap_gap(
    x: &CountMatrix,
    k: usize,
    hyper: &GapHyper,
    p0: f64,
    cavi: &CaviOptions,
    opts: &BootstrapOptions,
) -> Result<PosteriorSamples> {
    let fit = fit_gap_cavi(x, k, hyper, p0, cavi)?;
    let point = fit.point_params();
    let mut s = parametric_bootstrap(
        &fit,
        |_, rng| x.with_counts(simulate_gap_counts(&point, rng).0),
        |data, seed| fit_gap_cavi(data, k, hyper, p0, &CaviOptions { seed, ..cavi.clone() }),
        opts,
    )?;
    let base = gap_meta("bootstrap", opts.seed, p0, hyper);
    s.meta.extra.extend(base.extra);
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::ELBO_SLACK;
    use ndarray::array;

    fn params(theta: Array2<f64>, beta: Array2<f64>, p0: f64) -> GapParams {
        GapParams {
            theta,
            beta,
            hyper: GapHyper::default(),
            p0,
        }
    }

    #[test]
    fn hyperparameters_hit_the_target() {
        let h = hyperparams_for_expected_total(1625.0, 2, 325).unwrap();
        assert_eq!((h.a0 / h.b0) * (h.c0 / h.d0), 2.5);
        assert_eq!(h.expected_total(2, 325), 1625.0);
        let doubled = hyperparams_for_expected_total(3250.0, 2, 325).unwrap();
        assert_eq!(doubled.b0, h.b0 / 2.0);
        assert!(hyperparams_for_expected_total(0.0, 2, 325).is_err());
    }

    #[test]
    fn simulated_library_sizes_have_target_mean() {
        // Each sample needs fresh theta and beta for independent totals.
        let h = hyperparams_for_expected_total(50.0, 2, 5).unwrap();
        let mut rng = Rng::new(12);
        let reps = 10_000;
        let mut totals = Vec::with_capacity(reps);
        for _ in 0..reps {
            let (x, _, _) = simulate_gap(1, 5, 2, &h, 0.0, &mut rng).unwrap();
            totals.push(x.total() as f64);
        }
        let mean = totals.iter().sum::<f64>() / reps as f64;
        let sd = crate::inference::sample_sd(&totals);
        assert!((mean - 50.0).abs() < 3.0 * sd / (reps as f64).sqrt(), "{mean}");
    }

    #[test]
    fn mask_rates() {
        let mut rng = Rng::new(1);
        let h = GapHyper::default();
        let (_, _, mask) = simulate_gap(10, 20, 2, &h, 0.0, &mut rng).unwrap();
        assert!(mask.0.iter().all(|&m| !m));
        let (x, _, mask) = simulate_gap(100, 325, 2, &h, 0.2, &mut rng).unwrap();
        for (m, &c) in mask.0.iter().zip(x.counts().iter()) {
            assert!(!m || c == 0);
        }
        let n = 100.0 * 325.0;
        let half = 2.5758 * (0.2f64 * 0.8 / n).sqrt();
        assert!((mask.fraction() - 0.2).abs() < half, "{}", mask.fraction());
    }

    #[test]
    fn row_means_follow_beta_for_one_topic() {
        let mut rng = Rng::new(6);
        let p = params(Array2::ones((4000, 1)), array![[1.0], [3.0], [0.5]], 0.0);
        let (counts, _) = simulate_gap_counts(&p, &mut rng);
        for w in 0..3 {
            let col: Vec<f64> = counts.column(w).iter().map(|&c| c as f64).collect();
            let mean = col.iter().sum::<f64>() / col.len() as f64;
            let se = (p.beta[[w, 0]] / col.len() as f64).sqrt();
            assert!((mean - p.beta[[w, 0]]).abs() < 3.0 * se, "{w}: {mean}");
        }
    }

    #[test]
    fn likelihood_examples() {
        let p = params(array![[1.0, 0.5], [0.2, 2.0]], array![[1.0, 0.1], [0.3, 0.7]], 0.0);
        let x = CountMatrix::from_counts(Array2::zeros((2, 2)));
        let want = -p.rates().sum();
        assert!((gap_log_likelihood(&x, &p, MaskMode::None).unwrap() - want).abs() < 1e-14);
        let zi = params(p.theta.clone(), p.beta.clone(), 0.999_999_999);
        assert!(gap_log_likelihood(&x, &zi, MaskMode::KnownP0).unwrap().abs() < 1e-8);
        assert!(gap_log_likelihood(&x, &zi, MaskMode::None).unwrap_err().to_string().contains("p0"));
        assert_eq!(
            gap_log_likelihood(&x, &p, MaskMode::None).unwrap(),
            gap_log_likelihood(&x, &p, MaskMode::KnownP0).unwrap()
        );
    }

    #[test]
    fn likelihood_matches_high_precision_oracle() {
        let theta = array![[0.5, 1.2], [2.0, 0.1], [0.7, 0.7]];
        let beta = array![[1.0, 0.3], [0.2, 2.5], [0.9, 0.0], [0.4, 1.1]];
        let x = CountMatrix::from_counts(array![[1, 0, 2, 0], [3, 1, 0, 0], [0, 4, 1, 2]]);
        // mpmath, 40 digits.
        let plain = gap_log_likelihood(&x, &params(theta.clone(), beta.clone(), 0.0), MaskMode::None).unwrap();
        assert!((plain - (-20.028_769_294_768_875)).abs() < 1e-9, "{plain}");
        let zi = gap_log_likelihood(&x, &params(theta, beta, 0.2), MaskMode::KnownP0).unwrap();
        assert!((zi - (-18.177_442_908_588_127)).abs() < 1e-9, "{zi}");
    }

    #[test]
    fn zero_rate_with_positive_count() {
        let p = params(array![[1.0]], array![[0.0]], 0.0);
        let x = CountMatrix::from_counts(array![[2]]);
        assert_eq!(gap_log_likelihood(&x, &p, MaskMode::None).unwrap(), f64::NEG_INFINITY);
    }

    #[test]
    fn scale_is_not_identified() {
        let mut rng = Rng::new(2);
        let (x, p, _) = simulate_gap(6, 9, 3, &GapHyper::default(), 0.0, &mut rng).unwrap();
        let base = gap_log_likelihood(&x, &p, MaskMode::None).unwrap();
        for c in [0.25, 2.0, 8.0] {
            let mut q = p.clone();
            q.theta.column_mut(1).mapv_inplace(|t| t * c);
            q.beta.column_mut(1).mapv_inplace(|b| b / c);
            assert_eq!(gap_log_likelihood(&x, &q, MaskMode::None).unwrap(), base);
        }
    }

    #[test]
    fn all_zero_theta_conditional_is_closed_form() {
        let x = CountMatrix::from_counts(Array2::zeros((1, 3)));
        let h = GapHyper {
            a0: 2.0,
            b0: 1.5,
            c0: 1.0,
            d0: 1.0,
        };
        let mut rng = Rng::new(8);
        let mut state = GapGibbs::new(&x, 1, &h, 0.0, &mut rng).unwrap();
        state.set_beta(array![[0.5], [1.0], [2.0]]);
        state.update_latent(&mut rng);
        let reps = 100_000;
        let mut draws = Vec::with_capacity(reps);
        for _ in 0..reps {
            state.update_theta(&mut rng);
            draws.push(state.theta()[[0, 0]]);
        }
        let (shape, rate) = (2.0, 1.5 + 3.5);
        let mean = draws.iter().sum::<f64>() / reps as f64;
        let se = (shape / (rate * rate) / reps as f64).sqrt();
        assert!((mean - shape / rate).abs() < 3.0 * se, "{mean}");
    }

    #[test]
    fn one_cell_posterior_matches_quadrature() {
        // E[theta], E[beta] and their SDs under x = 3, Gamma(2, 1) and Gamma(3, 2)
        // priors, by 1-D quadrature in mpmath after integrating beta out.
        let x = CountMatrix::from_counts(array![[3]]);
        let h = GapHyper {
            a0: 2.0,
            b0: 1.0,
            c0: 3.0,
            d0: 2.0,
        };
        let opts = GibbsOptions {
            iters: 60_000,
            warmup: 1_000,
            chains: 2,
            seed: 17,
            ..Default::default()
        };
        let s = fit_gap_gibbs(&x, 1, &h, 0.0, &opts).unwrap();
        let check = |name: &str, want_mean: f64, want_sd: f64| {
            let draws = s.require(name).unwrap().pooled(0);
            let chains: Vec<Vec<f64>> = (0..2).map(|c| s.require(name).unwrap().chain_series(c, 0)).collect();
            let ess = crate::inference::effective_sample_size(&chains);
            let mean = draws.iter().sum::<f64>() / draws.len() as f64;
            assert!((mean - want_mean).abs() < 3.0 * want_sd / ess.sqrt(), "{name}: {mean} (ess {ess})");
        };
        check("theta", 2.114_973_067_444_740_7, 1.138_833_960_283_018);
        check("beta", 1.557_486_533_722_370_4, 0.757_783_410_529_338_3);
    }

    #[test]
    fn gibbs_is_reproducible_and_nonnegative() {
        let mut rng = Rng::new(3);
        let (x, _, _) = simulate_gap(5, 8, 2, &GapHyper::default(), 0.2, &mut rng).unwrap();
        let opts = GibbsOptions {
            iters: 40,
            warmup: 10,
            chains: 2,
            seed: 3,
            ..Default::default()
        };
        let a = fit_gap_gibbs(&x, 2, &GapHyper::default(), 0.2, &opts).unwrap();
        assert_eq!(a, fit_gap_gibbs(&x, 2, &GapHyper::default(), 0.2, &opts).unwrap());
        assert_eq!(a.meta.model, "zgap");
        for (_, p) in a.params() {
            assert!((0..p.size()).all(|f| p.pooled(f).iter().all(|&v| v >= 0.0)));
        }
    }

    #[test]
    fn cavi_all_zero_single_topic_is_conjugate() {
        let x = CountMatrix::from_counts(Array2::zeros((2, 3)));
        let h = GapHyper::default();
        let opts = CaviOptions {
            restarts: 1,
            ..Default::default()
        };
        let fit = fit_gap_cavi(&x, 1, &h, 0.0, &opts).unwrap();
        // q(theta_d) is Gamma(a0, b0 + sum_v E[beta_v]) at the fixed point.
        let eb: f64 = (&fit.beta_shape / &fit.beta_rate).sum();
        for d in 0..2 {
            assert_eq!(fit.theta_shape[[d, 0]], h.a0);
            assert!((fit.theta_rate[[d, 0]] - (h.b0 + eb)).abs() < 1e-9);
        }
    }

    #[test]
    fn cavi_elbo_never_decreases() {
        for seed in 0..20u64 {
            let mut rng = Rng::new(500 + seed);
            let d = 3 + seed as usize % 4;
            let v = 4 + seed as usize % 6;
            let k = 1 + seed as usize % 3;
            let p0 = if seed % 2 == 0 { 0.0 } else { 0.2 };
            let h = hyperparams_for_expected_total(30.0, k, v).unwrap();
            let (x, _, _) = simulate_gap(d, v, k, &h, p0, &mut rng).unwrap();
            let opts = CaviOptions {
                max_iters: 200,
                tol: 0.0,
                seed,
                restarts: 1,
            };
            let fit = fit_gap_cavi(&x, k, &h, p0, &opts).unwrap();
            for w in fit.elbo_trace.windows(2) {
                assert!(w[1] - w[0] >= -ELBO_SLACK, "seed {seed}: {} -> {}", w[0], w[1]);
            }
        }
    }

    #[test]
    fn cavi_is_reproducible() {
        let mut rng = Rng::new(9);
        let (x, _, _) = simulate_gap(6, 7, 2, &GapHyper::default(), 0.0, &mut rng).unwrap();
        let opts = CaviOptions {
            seed: 2,
            ..Default::default()
        };
        let a = fit_gap_cavi(&x, 2, &GapHyper::default(), 0.0, &opts).unwrap();
        assert_eq!(a, fit_gap_cavi(&x, 2, &GapHyper::default(), 0.0, &opts).unwrap());
        assert_eq!(a.sample_posterior(5, 1).unwrap().total_draws(), 5);
    }

    #[test]
    fn augmentation_recovers_poisson() {
        // Splitting Poi(l1 + l2) multinomially gives independent Poi(l1), Poi(l2).
        let mut rng = Rng::new(77);
        let (l1, l2) = (1.5, 0.5);
        let reps = 20_000;
        let mut via = [0usize; 6];
        let mut direct = [0usize; 6];
        for _ in 0..reps {
            let total = numeric::poisson(l1 + l2, &mut rng);
            let s = numeric::multinomial(total, &[l1 / (l1 + l2), l2 / (l1 + l2)], &mut rng);
            via[(s[0] as usize).min(5)] += 1;
            direct[(numeric::poisson(l1, &mut rng) as usize).min(5)] += 1;
        }
        // Two-sample chi-square on 6 bins, 5 df, critical value at 0.01 is 15.086.
        let chi2: f64 = via
            .iter()
            .zip(&direct)
            .filter(|(a, b)| **a + **b > 0)
            .map(|(&a, &b)| (a as f64 - b as f64).powi(2) / (a + b) as f64)
            .sum();
        assert!(chi2 < 15.086, "chi2 {chi2}");
    }
}
