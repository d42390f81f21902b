//! Dynamic unigram model: a Gaussian random walk on the logits of one
//! multinomial per time slot.
//!
//! Slot 0 holds the initial state `mu_0 ~ N(0, sigma2 I)`; slot `t > 0`
//! follows `mu_t ~ N(mu_{t-1}, sigma2 I)`. There is one slot per distinct
//! observed time, and several samples may share a slot.

mod advi;
mod hmc;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

pub use advi::{fit_unigram_advi, AdviOptions};
pub use hmc::{fit_unigram_hmc, HmcOptions, Metric};

use crate::corpus::{library_sizes, CountMatrix, TimeIndex};
use crate::error::{Error, Result};
use crate::inference::PosteriorSamples;
use crate::numeric::{self, ln_factorial, log_sum_exp, Rng};

#[derive(Clone, Debug, PartialEq)]
pub struct UnigramState {
    /// T×V logits.
    pub mu: Array2<f64>,
    pub sigma2: f64,
    pub time_index: TimeIndex,
}

impl UnigramState {
    /// `S(mu_t)` for every slot, T×V.
    pub fn probabilities(&self) -> Array2<f64> {
        softmax_rows(&self.mu)
    }
}

pub(crate) fn softmax_rows(mu: &Array2<f64>) -> Array2<f64> {
    let mut out = mu.clone();
    for mut row in out.rows_mut() {
        let src = row.to_vec();
        numeric::softmax_into(&src, row.as_slice_mut().expect("standard layout"));
    }
    out
}

/// Inverse-gamma prior on the walk variance, shape `a`, scale `b`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SigmaPrior {
    pub a: f64,
    pub b: f64,
}

impl Default for SigmaPrior {
    fn default() -> Self {
        SigmaPrior { a: 1.0, b: 1.0 }
    }
}

impl SigmaPrior {
    fn validate(&self) -> Result<()> {
        if !(self.a > 0.0 && self.b > 0.0) || !self.a.is_finite() || !self.b.is_finite() {
            return Err(Error::domain(format!("inverse-gamma prior needs a, b > 0, got {self:?}")));
        }
        Ok(())
    }
}

/// Simulates the walk with step variance `sigma0_sq` and one multinomial
/// sample per entry of `time_index.slot_of_sample`.
pub fn simulate_unigram(
    t: usize,
    v: usize,
    time_index: &TimeIndex,
    totals: &[u64],
    sigma0_sq: f64,
    rng: &mut Rng,
) -> Result<(CountMatrix, UnigramState)> {
    if !(sigma0_sq > 0.0) || !sigma0_sq.is_finite() {
        return Err(Error::domain(format!("sigma0^2 must be positive, got {sigma0_sq}")));
    }
    if v == 0 {
        return Err(Error::domain("V must be positive"));
    }
    time_index.validate(totals.len())?;
    if time_index.slots() != t {
        return Err(Error::domain(format!("time index has {} slots, T = {t}", time_index.slots())));
    }
    let sd = sigma0_sq.sqrt();
    let mut mu = Array2::zeros((t, v));
    for s in 0..t {
        for w in 0..v {
            let prev = if s == 0 { 0.0 } else { mu[[s - 1, w]] };
            mu[[s, w]] = numeric::normal(prev, sd, rng);
        }
    }
    let probs = softmax_rows(&mu);
    let d = totals.len();
    let mut counts = Array2::zeros((d, v));
    for (i, &slot) in time_index.slot_of_sample.iter().enumerate() {
        let p: Vec<f64> = probs.row(slot).to_vec();
        let x = numeric::multinomial(totals[i], &p, rng);
        counts.row_mut(i).iter_mut().zip(x).for_each(|(o, c)| *o = c);
    }
    let times = time_index.slot_of_sample.iter().map(|&s| time_index.times[s]).collect();
    let x = CountMatrix::from_counts(counts).with_times(times)?;
    Ok((
        x,
        UnigramState {
            mu,
            sigma2: sigma0_sq,
            time_index: time_index.clone(),
        },
    ))
}

/// The log posterior with the data reduced to per-slot sufficient statistics.
#[derive(Clone, Debug)]
pub struct UnigramTarget {
    slots: usize,
    features: usize,
    /// Summed counts per slot, T×V.
    counts: Array2<f64>,
    /// Summed library sizes per slot.
    totals: Vec<f64>,
    /// `sum_d [log N_d! - sum_v log x_dv!]`.
    log_coef: f64,
    prior: SigmaPrior,
}

impl UnigramTarget {
    pub fn new(x: &CountMatrix, time_index: &TimeIndex, prior: SigmaPrior) -> Result<Self> {
        prior.validate()?;
        time_index.validate(x.samples())?;
        let (t, v) = (time_index.slots(), x.features());
        let mut counts = Array2::zeros((t, v));
        let mut totals = vec![0.0; t];
        let lib = library_sizes(x);
        let mut log_coef = 0.0;
        for (i, &slot) in time_index.slot_of_sample.iter().enumerate() {
            for (w, &c) in x.row(i).iter().enumerate() {
                counts[[slot, w]] += c as f64;
                log_coef -= ln_factorial(c);
            }
            totals[slot] += lib[i] as f64;
            log_coef += ln_factorial(lib[i]);
        }
        Ok(UnigramTarget {
            slots: t,
            features: v,
            counts,
            totals,
            log_coef,
            prior,
        })
    }

    pub fn slots(&self) -> usize {
        self.slots
    }

    pub fn features(&self) -> usize {
        self.features
    }

    /// Length of the unconstrained parameter vector `(mu, log sigma2)`.
    pub fn dim(&self) -> usize {
        self.slots * self.features + 1
    }

    fn check(&self, mu: &Array2<f64>) -> Result<()> {
        if mu.dim() != (self.slots, self.features) {
            return Err(Error::shape(format!(
                "mu is {:?}, expected ({}, {})",
                mu.dim(),
                self.slots,
                self.features
            )));
        }
        Ok(())
    }

    /// Multinomial log likelihood, coefficients included.
    fn log_likelihood(&self, mu: &[f64]) -> f64 {
        let v = self.features;
        let mut total = self.log_coef;
        for t in 0..self.slots {
            if self.totals[t] == 0.0 {
                continue;
            }
            let row = &mu[t * v..(t + 1) * v];
            let lse = log_sum_exp(row);
            for w in 0..v {
                let c = self.counts[[t, w]];
                if c > 0.0 {
                    total += c * (row[w] - lse);
                }
            }
        }
        total
    }

    /// Sum of squared walk increments, including `mu_0` against zero.
    fn walk_sq(&self, mu: &[f64]) -> f64 {
        let v = self.features;
        let mut q = mu[..v].iter().map(|m| m * m).sum::<f64>();
        for t in 1..self.slots {
            for w in 0..v {
                let d = mu[t * v + w] - mu[(t - 1) * v + w];
                q += d * d;
            }
        }
        q
    }

    fn log_posterior_flat(&self, mu: &[f64], sigma2: f64) -> f64 {
        let n = (self.slots * self.features) as f64;
        let walk = -0.5 * n * (2.0 * std::f64::consts::PI * sigma2).ln() - self.walk_sq(mu) / (2.0 * sigma2);
        let (a, b) = (self.prior.a, self.prior.b);
        let prior = a * b.ln() - ln_gamma(a) - (a + 1.0) * sigma2.ln() - b / sigma2;
        self.log_likelihood(mu) + walk + prior
    }

    /// Log posterior density of `(mu, sigma2)`.
    pub fn log_posterior(&self, mu: &Array2<f64>, sigma2: f64) -> Result<f64> {
        self.check(mu)?;
        if !(sigma2 > 0.0) {
            return Err(Error::domain(format!("sigma2 must be positive, got {sigma2}")));
        }
        let flat = mu.as_standard_layout();
        Ok(self.log_posterior_flat(flat.as_slice().expect("standard layout"), sigma2))
    }

    /// Log density of the unconstrained vector `q = (mu, omega = log sigma2)`,
    /// including the Jacobian `+omega`.
    pub fn log_density(&self, q: &[f64]) -> f64 {
        let n = self.slots * self.features;
        let omega = q[n];
        self.log_posterior_flat(&q[..n], omega.exp()) + omega
    }

    /// Gradient of the multinomial log likelihood in `mu`, T×V flattened.
    pub fn likelihood_grad(&self, mu: &[f64], grad: &mut [f64]) {
        let v = self.features;
        let mut probs = vec![0.0; v];
        for t in 0..self.slots {
            numeric::softmax_into(&mu[t * v..(t + 1) * v], &mut probs);
            for w in 0..v {
                grad[t * v + w] = self.counts[[t, w]] - self.totals[t] * probs[w];
            }
        }
    }

    /// Log density and its gradient with respect to `q`, written into `grad`.
    pub fn log_density_grad(&self, q: &[f64], grad: &mut [f64]) -> f64 {
        let (t_len, v) = (self.slots, self.features);
        let n = t_len * v;
        let omega = q[n];
        let inv = (-omega).exp();
        let mu = &q[..n];
        self.likelihood_grad(mu, grad);
        for t in 0..t_len {
            for w in 0..v {
                let i = t * v + w;
                let prev = if t == 0 { 0.0 } else { mu[i - v] };
                grad[i] -= (mu[i] - prev) * inv;
                if t + 1 < t_len {
                    grad[i] += (mu[i + v] - mu[i]) * inv;
                }
            }
        }
        let q_sq = self.walk_sq(mu);
        grad[n] = -0.5 * n as f64 + 0.5 * q_sq * inv - self.prior.a + self.prior.b * inv;
        self.log_density(q)
    }
}

/// `log p(mu, sigma2 | x)` up to the evidence: multinomial likelihood with
/// coefficients, Gaussian walk terms and the inverse-gamma prior.
pub fn unigram_log_posterior(
    mu: &Array2<f64>,
    sigma2: f64,
    x: &CountMatrix,
    time_index: &TimeIndex,
    prior: SigmaPrior,
) -> Result<f64> {
    UnigramTarget::new(x, time_index, prior)?.log_posterior(mu, sigma2)
}

/// Gradient of the unconstrained log density in `(mu, log sigma2)`.
pub fn unigram_grad(
    mu: &Array2<f64>,
    log_sigma2: f64,
    x: &CountMatrix,
    time_index: &TimeIndex,
    prior: SigmaPrior,
) -> Result<(Array2<f64>, f64)> {
    let target = UnigramTarget::new(x, time_index, prior)?;
    target.check(mu)?;
    let mut q: Vec<f64> = mu.iter().copied().collect();
    q.push(log_sigma2);
    let mut grad = vec![0.0; q.len()];
    target.log_density_grad(&q, &mut grad);
    let omega_grad = grad.pop().expect("nonempty");
    Ok((Array2::from_shape_vec(mu.dim(), grad).expect("sized"), omega_grad))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "method")]
pub enum UnigramMethod {
    Hmc(HmcOptions),
    Advi(AdviOptions),
}

/// Fits the model to a count matrix with sample times.
pub fn fit_unigram(x: &CountMatrix, method: &UnigramMethod, prior: SigmaPrior) -> Result<PosteriorSamples> {
    let ti = x
        .time_index()
        .ok_or_else(|| Error::config("the unigram model needs sample times"))?;
    match method {
        UnigramMethod::Hmc(o) => fit_unigram_hmc(x, &ti, prior, o),
        UnigramMethod::Advi(o) => fit_unigram_advi(x, &ti, prior, o),
    }
}

/// A starting point near the data: centered log proportions per slot
/// (pseudocount 0.5), jittered, and `sigma2 = 1`.
pub(crate) fn initial_point(target: &UnigramTarget, jitter: f64, rng: &mut Rng) -> Vec<f64> {
    let (t_len, v) = (target.slots, target.features);
    let mut q = Vec::with_capacity(target.dim());
    for t in 0..t_len {
        let logs: Vec<f64> = (0..v).map(|w| (target.counts[[t, w]] + 0.5).ln()).collect();
        let mean = logs.iter().sum::<f64>() / v as f64;
        q.extend(logs.iter().map(|l| l - mean + jitter * rng.standard_normal()));
    }
    q.push(jitter * rng.standard_normal());
    q
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn small(seed: u64, t: usize, v: usize) -> (CountMatrix, TimeIndex, UnigramState) {
        let mut rng = Rng::new(seed);
        let ti = TimeIndex::sequential(t);
        let (x, state) = simulate_unigram(t, v, &ti, &vec![40; t], 1.0, &mut rng).unwrap();
        (x, ti, state)
    }

    #[test]
    fn single_category_is_deterministic() {
        let mut rng = Rng::new(1);
        let ti = TimeIndex::sequential(4);
        let (x, _) = simulate_unigram(4, 1, &ti, &[3, 0, 7, 2], 1.0, &mut rng).unwrap();
        assert_eq!(x.counts().column(0).to_vec(), vec![3, 0, 7, 2]);
    }

    #[test]
    fn invalid_inputs() {
        let mut rng = Rng::new(1);
        let ti = TimeIndex::sequential(3);
        assert!(simulate_unigram(3, 2, &ti, &[1, 1, 1], 0.0, &mut rng).is_err());
        assert!(simulate_unigram(2, 2, &ti, &[1, 1, 1], 1.0, &mut rng).is_err());
        let bad = TimeIndex {
            times: vec![0.0],
            slot_of_sample: vec![0, 3],
        };
        assert!(simulate_unigram(1, 2, &bad, &[1, 1], 1.0, &mut rng).is_err());
    }

    #[test]
    fn increments_have_the_walk_variance() {
        let mut rng = Rng::new(8);
        let ti = TimeIndex::sequential(3);
        let reps = 10_000;
        let mut inc = Vec::with_capacity(reps);
        for _ in 0..reps {
            let (_, s) = simulate_unigram(3, 2, &ti, &[0, 0, 0], 2.0, &mut rng).unwrap();
            inc.push(s.mu[[2, 1]] - s.mu[[1, 1]]);
        }
        let n = reps as f64;
        let mean = inc.iter().sum::<f64>() / n;
        let var = inc.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() < 3.0 * (2.0 / n).sqrt(), "{mean}");
        // SE of the sample variance of a normal is var * sqrt(2 / (n - 1)).
        assert!((var - 2.0).abs() < 3.0 * 2.0 * (2.0 / (n - 1.0)).sqrt(), "{var}");
    }

    #[test]
    fn one_slot_one_feature_is_prior_only() {
        let x = CountMatrix::from_counts(array![[9]]);
        let ti = TimeIndex::sequential(1);
        let mu = array![[0.7]];
        let got = unigram_log_posterior(&mu, 2.0, &x, &ti, SigmaPrior::default()).unwrap();
        let walk = -0.5 * (2.0 * std::f64::consts::PI * 2.0f64).ln() - 0.49 / 4.0;
        let prior = -2.0 * 2.0f64.ln() - 0.5;
        assert!((got - (walk + prior)).abs() < 1e-12);
        assert!(unigram_log_posterior(&mu, 0.0, &x, &ti, SigmaPrior::default()).is_err());
    }

    #[test]
    fn shift_changes_only_the_initial_walk_term() {
        let (x, ti, s) = small(3, 4, 5);
        let target = UnigramTarget::new(&x, &ti, SigmaPrior::default()).unwrap();
        let flat: Vec<f64> = s.mu.iter().copied().collect();
        let shifted: Vec<f64> = flat.iter().map(|m| m + 1.5).collect();
        let (a, b) = (target.log_likelihood(&flat), target.log_likelihood(&shifted));
        assert!((a - b).abs() < 1e-9 * a.abs());
        let row0 = |m: &[f64]| m[..5].iter().map(|x| x * x).sum::<f64>();
        let diff = target.walk_sq(&shifted) - target.walk_sq(&flat);
        assert!((diff - (row0(&shifted) - row0(&flat))).abs() < 1e-9);
    }

    #[test]
    fn log_posterior_matches_high_precision_oracle() {
        // Term-by-term evaluation with mpmath at 40 digits.
        let x = CountMatrix::from_counts(array![[3, 0, 2], [1, 4, 1], [0, 2, 5]])
            .with_times(vec![0.0, 0.0, 5.0])
            .unwrap();
        let ti = x.time_index().unwrap();
        let mu = array![[0.3, -1.2, 0.5], [1.1, 0.2, -0.4]];
        let got = unigram_log_posterior(&mu, 0.8, &x, &ti, SigmaPrior { a: 1.0, b: 1.0 }).unwrap();
        assert!((got - (-28.094_524_159_677_841)).abs() < 1e-9, "{got}");
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for seed in 0..20u64 {
            let mut rng = Rng::new(100 + seed);
            let t = 1 + (seed as usize % 10);
            let v = 2 + (seed as usize * 7 % 19);
            let ti = TimeIndex::sequential(t);
            let (x, _) = simulate_unigram(t, v, &ti, &vec![50; t], 1.0, &mut rng).unwrap();
            let target = UnigramTarget::new(&x, &ti, SigmaPrior::default()).unwrap();
            let q: Vec<f64> = (0..target.dim()).map(|_| 0.8 * rng.standard_normal()).collect();
            let mut grad = vec![0.0; q.len()];
            target.log_density_grad(&q, &mut grad);
            let h = 1e-5;
            for i in 0..q.len() {
                let (mut up, mut down) = (q.clone(), q.clone());
                up[i] += h;
                down[i] -= h;
                let fd = (target.log_density(&up) - target.log_density(&down)) / (2.0 * h);
                let rel = (grad[i] - fd).abs() / (1.0 + grad[i].abs());
                assert!(rel < 1e-5, "seed {seed} coord {i}: {} vs {fd}", grad[i]);
            }
        }
    }

    #[test]
    fn gradient_vanishes_at_a_stationary_point_with_one_feature() {
        // V = 1: the likelihood is flat, and mu = 0 is stationary for the walk.
        let x = CountMatrix::from_counts(array![[5], [8]]);
        let ti = TimeIndex::sequential(2);
        let (g, _) = unigram_grad(&Array2::zeros((2, 1)), 0.3, &x, &ti, SigmaPrior::default()).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn doubling_counts_doubles_the_likelihood_gradient() {
        let (x, ti, s) = small(5, 3, 4);
        let doubled = x.with_counts(x.counts().mapv(|c| 2 * c)).unwrap();
        let mu: Vec<f64> = s.mu.iter().copied().collect();
        let grad = |x: &CountMatrix| {
            let target = UnigramTarget::new(x, &ti, SigmaPrior::default()).unwrap();
            let mut g = vec![0.0; mu.len()];
            target.likelihood_grad(&mu, &mut g);
            g
        };
        let (g1, g2) = (grad(&x), grad(&doubled));
        for (a, b) in g1.iter().zip(&g2) {
            assert_eq!(*b, 2.0 * a);
        }
    }
}
