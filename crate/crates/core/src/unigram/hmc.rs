//! Fixed-length Hamiltonian Monte Carlo with dual-averaging step size and
//! windowed metric adaptation.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{initial_point, SigmaPrior, UnigramTarget};
use crate::corpus::{CountMatrix, TimeIndex};
use crate::error::{Error, Result};
use crate::inference::{run_chains, PosteriorSamples, SampleMeta, TopicRole, Trace};
use crate::numeric::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Diagonal,
    Dense,
    /// Dense up to 500 dimensions, diagonal beyond.
    Auto,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HmcOptions {
    pub warmup: usize,
    pub draws: usize,
    pub chains: usize,
    pub leapfrog_steps: usize,
    pub target_accept: f64,
    /// Divergent fraction above which a warning is recorded.
    pub divergence_threshold: f64,
    pub metric: Metric,
    pub seed: u64,
}

impl Default for HmcOptions {
    fn default() -> Self {
        HmcOptions {
            warmup: 1000,
            draws: 1000,
            chains: 4,
            leapfrog_steps: 32,
            target_accept: 0.8,
            divergence_threshold: 0.05,
            metric: Metric::Auto,
            seed: 0,
        }
    }
}

impl HmcOptions {
    pub fn validate(&self) -> Result<()> {
        if self.draws == 0 || self.chains == 0 || self.leapfrog_steps == 0 {
            return Err(Error::config("draws, chains and leapfrog_steps must be positive"));
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return Err(Error::config("target_accept must lie in (0, 1)"));
        }
        Ok(())
    }
}

const MAX_ENERGY_ERROR: f64 = 1000.0;

/// Inverse metric `Sigma`.
#[derive(Clone, Debug)]
enum InvMetric {
    Diagonal(Vec<f64>),
    /// `Sigma` row-major, with the transpose of its Cholesky factor.
    Dense { sigma: Vec<f64>, upper: DMatrix<f64> },
}

impl InvMetric {
    /// Momentum `p ~ N(0, Sigma^{-1})`.
    fn sample_momentum(&self, rng: &mut Rng, p: &mut [f64]) {
        match self {
            InvMetric::Diagonal(var) => {
                for (pi, v) in p.iter_mut().zip(var) {
                    *pi = rng.standard_normal() / v.sqrt();
                }
            }
            InvMetric::Dense { upper, .. } => {
                let z = DVector::from_fn(p.len(), |_, _| rng.standard_normal());
                let x = upper.solve_upper_triangular(&z).expect("positive diagonal");
                p.copy_from_slice(x.as_slice());
            }
        }
    }

    /// `Sigma p`, the velocity.
    fn velocity(&self, p: &[f64], out: &mut [f64]) {
        match self {
            InvMetric::Diagonal(var) => {
                for ((o, pi), v) in out.iter_mut().zip(p).zip(var) {
                    *o = pi * v;
                }
            }
            InvMetric::Dense { sigma, .. } => {
                for (o, row) in out.iter_mut().zip(sigma.chunks_exact(p.len())) {
                    *o = row.iter().zip(p).map(|(a, b)| a * b).sum();
                }
            }
        }
    }

    fn kinetic(&self, p: &[f64]) -> f64 {
        let mut v = vec![0.0; p.len()];
        self.velocity(p, &mut v);
        0.5 * p.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>()
    }

    fn from_window(window: &[Vec<f64>], dense: bool) -> Option<InvMetric> {
        let n = window.len();
        let dim = window[0].len();
        let nf = n as f64;
        let mean: Vec<f64> = (0..dim).map(|i| window.iter().map(|q| q[i]).sum::<f64>() / nf).collect();
        // Shrink toward a small multiple of the identity, as Stan does.
        let w = nf / (nf + 5.0);
        let ridge = 1e-3 * 5.0 / (nf + 5.0);
        if dense {
            let mut cov = DMatrix::zeros(dim, dim);
            for q in window {
                let c = DVector::from_iterator(dim, q.iter().zip(&mean).map(|(a, m)| a - m));
                cov.ger(1.0, &c, &c, 1.0);
            }
            cov *= w / (nf - 1.0);
            for i in 0..dim {
                cov[(i, i)] += ridge;
            }
            let sigma = cov.transpose().as_slice().to_vec();
            cov.cholesky().map(|c| InvMetric::Dense {
                sigma,
                upper: c.unpack().transpose(),
            })
        } else {
            let var = (0..dim)
                .map(|i| {
                    let s = window.iter().map(|q| (q[i] - mean[i]).powi(2)).sum::<f64>() / (nf - 1.0);
                    w * s + ridge
                })
                .collect();
            Some(InvMetric::Diagonal(var))
        }
    }
}

/// Nesterov dual averaging on `log eps`.
#[derive(Clone, Debug)]
struct DualAveraging {
    mu: f64,
    h_bar: f64,
    log_eps: f64,
    log_eps_bar: f64,
    count: f64,
    delta: f64,
}

impl DualAveraging {
    const GAMMA: f64 = 0.05;
    const T0: f64 = 10.0;
    const KAPPA: f64 = 0.75;

    fn new(eps: f64, delta: f64) -> Self {
        DualAveraging {
            mu: (10.0 * eps).ln(),
            h_bar: 0.0,
            log_eps: eps.ln(),
            log_eps_bar: 0.0,
            count: 0.0,
            delta,
        }
    }

    fn update(&mut self, accept: f64) {
        self.count += 1.0;
        let eta = 1.0 / (self.count + Self::T0);
        self.h_bar = (1.0 - eta) * self.h_bar + eta * (self.delta - accept);
        self.log_eps = self.mu - self.count.sqrt() / Self::GAMMA * self.h_bar;
        let w = self.count.powf(-Self::KAPPA);
        self.log_eps_bar = w * self.log_eps + (1.0 - w) * self.log_eps_bar;
    }

    fn eps(&self) -> f64 {
        self.log_eps.exp()
    }

    fn final_eps(&self) -> f64 {
        self.log_eps_bar.exp()
    }
}

struct Chain<'a> {
    target: &'a UnigramTarget,
    metric: InvMetric,
    q: Vec<f64>,
    grad: Vec<f64>,
    logp: f64,
    steps: usize,
}

struct Transition {
    accept: f64,
    divergent: bool,
}

impl Chain<'_> {
    fn new(target: &UnigramTarget, q: Vec<f64>, metric: InvMetric, steps: usize) -> Chain<'_> {
        let mut grad = vec![0.0; q.len()];
        let logp = target.log_density_grad(&q, &mut grad);
        Chain {
            target,
            metric,
            q,
            grad,
            logp,
            steps,
        }
    }

    /// One trajectory of `steps` leapfrog steps followed by a Metropolis test.
    fn transition(&mut self, eps: f64, steps: usize, rng: &mut Rng) -> Transition {
        let dim = self.q.len();
        let mut p = vec![0.0; dim];
        self.metric.sample_momentum(rng, &mut p);
        let h0 = -self.logp + self.metric.kinetic(&p);
        let mut q = self.q.clone();
        let mut grad = self.grad.clone();
        let mut vel = vec![0.0; dim];
        let mut logp = self.logp;
        for _ in 0..steps {
            for i in 0..dim {
                p[i] += 0.5 * eps * grad[i];
            }
            self.metric.velocity(&p, &mut vel);
            for i in 0..dim {
                q[i] += eps * vel[i];
            }
            logp = self.target.log_density_grad(&q, &mut grad);
            if !logp.is_finite() {
                break;
            }
            for i in 0..dim {
                p[i] += 0.5 * eps * grad[i];
            }
        }
        let h1 = -logp + self.metric.kinetic(&p);
        let delta = h1 - h0;
        if !delta.is_finite() || delta > MAX_ENERGY_ERROR {
            return Transition {
                accept: 0.0,
                divergent: true,
            };
        }
        let accept = (-delta).exp().min(1.0);
        if rng.uniform() < accept {
            self.q = q;
            self.grad = grad;
            self.logp = logp;
        }
        Transition {
            accept,
            divergent: false,
        }
    }

    /// Doubles or halves a unit-trajectory step size until the acceptance
    /// probability crosses one half.
    fn initial_step_size(&mut self, rng: &mut Rng) -> f64 {
        let mut eps = 1.0;
        let saved = (self.q.clone(), self.grad.clone(), self.logp);
        let probe = |chain: &mut Self, eps: f64, rng: &mut Rng| {
            let t = chain.transition(eps, 1, rng);
            (chain.q, chain.grad, chain.logp) = saved.clone();
            t.accept
        };
        let up = probe(self, eps, rng) > 0.5;
        for _ in 0..60 {
            eps = if up { eps * 2.0 } else { eps / 2.0 };
            let a = probe(self, eps, rng);
            if (up && a < 0.5) || (!up && a > 0.5) {
                break;
            }
        }
        eps
    }
}

/// Warmup windows: an initial buffer, doubling metric windows, and a terminal
/// buffer, following Stan's layout. Returns the iteration indices at which
/// each metric window ends.
fn window_ends(warmup: usize) -> Vec<usize> {
    let (init, term, base) = (75, 50, 25);
    if warmup < init + term + base {
        return Vec::new();
    }
    let last = warmup - term;
    let mut ends = Vec::new();
    let mut start = init;
    let mut size = base;
    loop {
        let end = start + size;
        // Fold a too-short final window into its predecessor.
        if end + 2 * size > last {
            ends.push(last);
            break;
        }
        ends.push(end);
        start = end;
        size *= 2;
    }
    ends
}

struct ChainOutput {
    draws: Vec<Vec<f64>>,
    divergent: usize,
    step_size: f64,
    accept: f64,
}

fn run_chain(target: &UnigramTarget, opts: &HmcOptions, dense: bool, mut rng: Rng) -> Result<ChainOutput> {
    let q0 = initial_point(target, 0.1, &mut rng);
    let mut chain = Chain::new(target, q0.clone(), InvMetric::Diagonal(curvature_variance(target, &q0)), opts.leapfrog_steps);
    if !chain.logp.is_finite() {
        return Err(Error::Numerical {
            iteration: 0,
            message: "non-finite log density at the initial point".into(),
        });
    }
    let mut da = DualAveraging::new(chain.initial_step_size(&mut rng), opts.target_accept);
    let ends = window_ends(opts.warmup);
    let mut window: Vec<Vec<f64>> = Vec::new();
    let mut window_start = 75;
    for it in 0..opts.warmup {
        let t = chain.transition(da.eps(), chain.steps, &mut rng);
        da.update(t.accept);
        if it >= window_start {
            window.push(chain.q.clone());
        }
        if ends.contains(&(it + 1)) {
            if let Some(m) = InvMetric::from_window(&window, dense) {
                chain.metric = m;
            }
            window.clear();
            window_start = it + 1;
            da = DualAveraging::new(chain.initial_step_size(&mut rng), opts.target_accept);
        }
    }
    let eps = if opts.warmup > 0 { da.final_eps() } else { da.eps() };
    let mut out = ChainOutput {
        draws: Vec::with_capacity(opts.draws),
        divergent: 0,
        step_size: eps,
        accept: 0.0,
    };
    for _ in 0..opts.draws {
        let t = chain.transition(eps, chain.steps, &mut rng);
        out.divergent += t.divergent as usize;
        out.accept += t.accept / opts.draws as f64;
        out.draws.push(chain.q.clone());
    }
    Ok(out)
}

/// Rough posterior variances from the diagonal of the negative Hessian.
fn curvature_variance(target: &UnigramTarget, q: &[f64]) -> Vec<f64> {
    let (t_len, v) = (target.slots, target.features);
    let inv = (-q[t_len * v]).exp();
    let mut var = Vec::with_capacity(q.len());
    let mut probs = vec![0.0; v];
    for t in 0..t_len {
        crate::numeric::softmax_into(&q[t * v..(t + 1) * v], &mut probs);
        let walk = if t + 1 < t_len { 2.0 } else { 1.0 } * inv;
        var.extend(probs.iter().map(|p| 1.0 / (target.totals[t] * p * (1.0 - p) + walk)));
    }
    var.push(2.0 / (q.len() as f64 + 2.0));
    var
}

/// Samples the posterior of `(mu, log sigma2)` with `opts.chains` parallel chains.
pub fn fit_unigram_hmc(
    x: &CountMatrix,
    time_index: &TimeIndex,
    prior: SigmaPrior,
    opts: &HmcOptions,
) -> Result<PosteriorSamples> {
    opts.validate()?;
    let target = UnigramTarget::new(x, time_index, prior)?;
    let dense = match opts.metric {
        Metric::Dense => true,
        Metric::Diagonal => false,
        Metric::Auto => target.dim() <= 500,
    };
    let root = Rng::new(opts.seed);
    let results = run_chains(opts.chains, |c| run_chain(&target, opts, dense, root.split(c as u64)));
    let (t_len, v) = (target.slots(), target.features());
    let n = t_len * v;
    let mut traces = Vec::with_capacity(opts.chains);
    let mut meta = SampleMeta {
        model: "unigram".into(),
        method: "hmc".into(),
        seed: opts.seed,
        warmup: opts.warmup,
        iters: opts.warmup + opts.draws,
        ..Default::default()
    };
    let mut divergent = 0;
    let mut step_sizes = Vec::new();
    let mut accept = Vec::new();
    for r in results {
        let out = r?;
        let mut trace = Trace::new();
        trace
            .declare("mu", vec![t_len, v], TopicRole::None)
            .declare("sigma2", vec![1], TopicRole::None);
        for q in &out.draws {
            trace.push("mu", &q[..n]);
            trace.push("sigma2", &[q[n].exp()]);
            trace.end_draw();
        }
        traces.push(trace);
        divergent += out.divergent;
        step_sizes.push(out.step_size);
        accept.push(out.accept);
    }
    let frac = divergent as f64 / (opts.draws * opts.chains) as f64;
    if frac > opts.divergence_threshold {
        meta.warnings.push(format!(
            "{divergent} divergent transitions ({:.1}% of draws)",
            100.0 * frac
        ));
    }
    meta.extra.insert("divergent".into(), divergent.into());
    meta.extra.insert("step_size".into(), step_sizes.into());
    meta.extra.insert("mean_accept".into(), accept.into());
    meta.extra.insert("times".into(), time_index.times.clone().into());
    meta.extra.insert("metric".into(), if dense { "dense" } else { "diagonal" }.into());
    PosteriorSamples::from_traces(meta, traces)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::effective_sample_size;
    use ndarray::Array2;

    fn empty(t: usize, v: usize) -> (CountMatrix, TimeIndex) {
        (CountMatrix::from_counts(Array2::zeros((t, v))), TimeIndex::sequential(t))
    }

    fn within_3se(draws: &[Vec<f64>], expected: f64, what: &str) {
        let pooled: Vec<f64> = draws.concat();
        let n = pooled.len() as f64;
        let mean = pooled.iter().sum::<f64>() / n;
        let sd = (pooled.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        let ess = effective_sample_size(draws).max(10.0);
        let se = sd / ess.sqrt();
        assert!((mean - expected).abs() < 3.0 * se, "{what}: {mean} vs {expected} (se {se}, ess {ess})");
    }

    fn series(s: &PosteriorSamples, name: &str, flat: usize, f: impl Fn(f64) -> f64) -> Vec<Vec<f64>> {
        let p = s.require(name).unwrap();
        (0..p.chains()).map(|c| p.chain_series(c, flat).into_iter().map(&f).collect()).collect()
    }

    #[test]
    fn windows_cover_the_adaptation_phase() {
        assert_eq!(window_ends(1000), vec![100, 150, 250, 450, 950]);
        assert!(window_ends(100).is_empty());
    }

    #[test]
    fn matches_exact_moments_without_data() {
        // V = 1, T = 2 with an IG(3, 2) prior: sigma2 ~ IG(3, 2) exactly,
        // mu_0 | sigma2 ~ N(0, sigma2) and mu_1 | mu_0 ~ N(mu_0, sigma2), so
        // E[log sigma2] = ln 2 - digamma(3), E[mu_0^2] = E[sigma2] = 1 and
        // E[mu_1^2] = 2.
        let (x, ti) = empty(2, 1);
        let prior = SigmaPrior { a: 3.0, b: 2.0 };
        let opts = HmcOptions {
            warmup: 500,
            draws: 2000,
            seed: 4,
            ..Default::default()
        };
        let s = fit_unigram_hmc(&x, &ti, prior, &opts).unwrap();
        let log_s2 = series(&s, "sigma2", 0, f64::ln);
        within_3se(&log_s2, 2.0f64.ln() - (1.5 - 0.577_215_664_901_532_9), "log sigma2");
        within_3se(&series(&s, "mu", 0, |m| m * m), 1.0, "mu_0^2");
        within_3se(&series(&s, "mu", 1, |m| m * m), 2.0, "mu_1^2");
        within_3se(&series(&s, "mu", 1, |m| m), 0.0, "mu_1");
    }

    #[test]
    fn recovers_the_prior_without_data() {
        // T = 1, V = 2, default IG(1, 1) prior: each mu is Student t with two
        // degrees of freedom, whose quartiles are +-sqrt(2/3).
        let (x, ti) = empty(1, 2);
        let opts = HmcOptions {
            warmup: 500,
            draws: 2000,
            seed: 9,
            ..Default::default()
        };
        let s = fit_unigram_hmc(&x, &ti, SigmaPrior::default(), &opts).unwrap();
        let q = (2.0f64 / 3.0).sqrt();
        let inside = series(&s, "mu", 0, |m| (m.abs() < q) as u8 as f64);
        within_3se(&inside, 0.5, "central half");
        // log sigma2 = -log Gamma(1, 1): mean is Euler's constant.
        within_3se(&series(&s, "sigma2", 0, f64::ln), 0.577_215_664_901_532_9, "log sigma2");
        assert!(s.require("sigma2").unwrap().pooled(0).iter().all(|&v| v > 0.0));
    }

    #[test]
    fn shift_leaves_probabilities_unchanged() {
        let mut rng = Rng::new(1);
        let ti = TimeIndex::sequential(3);
        let (x, _) = super::super::simulate_unigram(3, 4, &ti, &[100; 3], 1.0, &mut rng).unwrap();
        let opts = HmcOptions {
            warmup: 200,
            draws: 20,
            chains: 1,
            ..Default::default()
        };
        let s = fit_unigram_hmc(&x, &ti, SigmaPrior::default(), &opts).unwrap();
        let mu = s.require("mu").unwrap().matrix(0, 5).unwrap();
        let a = super::super::softmax_rows(&mu);
        let b = super::super::softmax_rows(&mu.mapv(|m| m + 3.25));
        assert!(a.iter().zip(b.iter()).all(|(x, y)| (x - y).abs() < 1e-14));
    }

    #[test]
    fn seeded_runs_are_reproducible() {
        let (x, ti) = empty(2, 2);
        let opts = HmcOptions {
            warmup: 100,
            draws: 10,
            chains: 2,
            ..Default::default()
        };
        let a = fit_unigram_hmc(&x, &ti, SigmaPrior::default(), &opts).unwrap();
        let b = fit_unigram_hmc(&x, &ti, SigmaPrior::default(), &opts).unwrap();
        assert_eq!(a, b);
    }
}
