//! Deterministic transforms and seeded random primitives shared by every model.
//!
//! Gamma variates use the shape-rate convention throughout the crate: a
//! `Gamma(shape, rate)` draw has mean `shape / rate`.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Binomial, Distribution, Gamma, Normal, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

/// Splittable, reproducible random stream.
///
/// A `(seed, stream)` pair fully determines the draw sequence. Child streams
/// are derived with [`Rng::split`] so that parallel chains, restarts and
/// bootstrap replicates each get their own independent generator.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    stream: u64,
    inner: ChaCha20Rng,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha20Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Rng {
            seed,
            stream,
            inner,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Child generator number `child`. Depends only on `(seed, stream, child)`,
    /// never on how many draws the parent has made.
    pub fn split(&self, child: u64) -> Rng {
        let stream = splitmix64(self.stream ^ splitmix64(child.wrapping_add(1)));
        Rng::with_stream(self.seed, stream)
    }

    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// A fresh seed for a downstream component.
    pub fn next_seed(&mut self) -> u64 {
        self.inner.next_u64()
    }
}

impl RngCore for Rng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

/// Nonnegative vector summing to one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ProbVector(Vec<f64>);

pub const SIMPLEX_TOL: f64 = 1e-12;

impl ProbVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::domain("probability vector is empty"));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::domain("probability vector has a negative or non-finite entry"));
        }
        let total: f64 = values.iter().sum();
        if (total - 1.0).abs() > SIMPLEX_TOL * values.len().max(1) as f64 {
            return Err(Error::domain(format!(
                "probability vector sums to {total}, not 1"
            )));
        }
        Ok(ProbVector(values))
    }

    /// Normalizes a nonnegative vector with positive total.
    pub fn normalized(mut values: Vec<f64>) -> Result<Self> {
        let total: f64 = values.iter().sum();
        if !(total > 0.0) || !total.is_finite() {
            return Err(Error::domain("cannot normalize a vector with zero or non-finite total"));
        }
        values.iter_mut().for_each(|v| *v /= total);
        ProbVector::new(values)
    }

    pub fn uniform(len: usize) -> Self {
        ProbVector(vec![1.0 / len as f64; len])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl TryFrom<Vec<f64>> for ProbVector {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        ProbVector::new(values)
    }
}

impl From<ProbVector> for Vec<f64> {
    fn from(p: ProbVector) -> Self {
        p.0
    }
}

impl std::ops::Index<usize> for ProbVector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY || max == f64::INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Multilogit link. Max-subtracted, so large logits do not overflow.
pub fn softmax(mu: &[f64]) -> Result<ProbVector> {
    if mu.is_empty() {
        return Err(Error::domain("softmax of an empty vector"));
    }
    if mu.iter().any(|v| !v.is_finite()) {
        return Err(Error::domain("softmax input has a non-finite entry"));
    }
    let mut out = vec![0.0; mu.len()];
    softmax_into(mu, &mut out);
    Ok(ProbVector(out))
}

/// Unchecked softmax for hot loops; `mu` must be finite.
pub(crate) fn softmax_into(mu: &[f64], out: &mut [f64]) {
    let max = mu.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, m) in out.iter_mut().zip(mu) {
        *o = (m - max).exp();
        total += *o;
    }
    out.iter_mut().for_each(|o| *o /= total);
}

/// Centered log transform: `log p_i - mean_j log p_j`.
///
/// Accepts any strictly positive vector; the result does not depend on the
/// vector's scale.
pub fn g_transform(p: &[f64]) -> Result<Vec<f64>> {
    if p.is_empty() {
        return Err(Error::domain("g-transform of an empty vector"));
    }
    if p.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(Error::domain(
            "g-transform needs strictly positive finite entries; add a pseudocount first",
        ));
    }
    let logs: Vec<f64> = p.iter().map(|v| v.ln()).collect();
    let mean = logs.iter().sum::<f64>() / logs.len() as f64;
    Ok(logs.into_iter().map(|l| l - mean).collect())
}

/// Variance-stabilizing transform for counts, defined at zero.
pub fn asinh_transform(x: f64) -> f64 {
    x.asinh()
}

pub fn ln_factorial(n: u64) -> f64 {
    if n < 2 {
        return 0.0;
    }
    ln_gamma(n as f64 + 1.0)
}

/// `log Mult(x | sum(x), p)` including the multinomial coefficient.
/// Returns `-inf` when a positive count meets a zero probability.
pub fn ln_multinomial_pmf(x: &[u64], p: &[f64]) -> f64 {
    let n: u64 = x.iter().sum();
    let mut acc = ln_factorial(n);
    for (&xv, &pv) in x.iter().zip(p) {
        if xv == 0 {
            continue;
        }
        if pv <= 0.0 {
            return f64::NEG_INFINITY;
        }
        acc += xv as f64 * pv.ln() - ln_factorial(xv);
    }
    acc
}

/// `log Poi(x | lambda)`, with `lambda = 0, x = 0` giving 0.
pub fn ln_poisson_pmf(x: u64, lambda: f64) -> f64 {
    if x == 0 {
        return -lambda;
    }
    if lambda <= 0.0 {
        return f64::NEG_INFINITY;
    }
    x as f64 * lambda.ln() - lambda - ln_factorial(x)
}

/// Distributions the models draw from.
#[derive(Clone, Debug, PartialEq)]
pub enum Dist {
    Dirichlet(Vec<f64>),
    Multinomial { n: u64, p: Vec<f64> },
    /// Shape-rate parameterization, mean `shape / rate`.
    Gamma { shape: f64, rate: f64 },
    /// Reciprocal of a `Gamma(shape, rate = scale)` variate.
    InvGamma { shape: f64, scale: f64 },
    Normal { mean: f64, var: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub enum Draw {
    Scalar(f64),
    Vector(Vec<f64>),
    Counts(Vec<u64>),
}

impl Draw {
    pub fn scalar(&self) -> Option<f64> {
        match self {
            Draw::Scalar(v) => Some(*v),
            _ => None,
        }
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::domain(format!("{name} must be positive and finite, got {v}")))
    }
}

/// Checked entry point to the samplers.
pub fn sample_primitive(dist: &Dist, rng: &mut Rng) -> Result<Draw> {
    match dist {
        Dist::Dirichlet(alpha) => {
            if alpha.is_empty() {
                return Err(Error::domain("Dirichlet needs at least one concentration"));
            }
            for a in alpha {
                positive("Dirichlet concentration", *a)?;
            }
            Ok(Draw::Vector(dirichlet(alpha, rng)))
        }
        Dist::Multinomial { n, p } => {
            ProbVector::new(p.clone())?;
            Ok(Draw::Counts(multinomial(*n, p, rng)))
        }
        Dist::Gamma { shape, rate } => {
            positive("gamma shape", *shape)?;
            positive("gamma rate", *rate)?;
            Ok(Draw::Scalar(gamma(*shape, *rate, rng)))
        }
        Dist::InvGamma { shape, scale } => {
            positive("inverse-gamma shape", *shape)?;
            positive("inverse-gamma scale", *scale)?;
            Ok(Draw::Scalar(1.0 / gamma(*shape, *scale, rng)))
        }
        Dist::Normal { mean, var } => {
            if !mean.is_finite() {
                return Err(Error::domain("normal mean must be finite"));
            }
            positive("normal variance", *var)?;
            Ok(Draw::Scalar(normal(*mean, var.sqrt(), rng)))
        }
    }
}

/// Gamma(shape, rate) variate. Parameters must already be validated.
pub(crate) fn gamma(shape: f64, rate: f64, rng: &mut Rng) -> f64 {
    Gamma::new(shape, 1.0 / rate)
        .expect("validated gamma parameters")
        .sample(rng)
}

/// Log of a Gamma(shape, 1) variate, accurate for shapes well below one
/// where the variate itself underflows.
fn ln_gamma_variate(shape: f64, rng: &mut Rng) -> f64 {
    if shape >= 1.0 {
        return gamma(shape, 1.0, rng).ln();
    }
    let boosted = gamma(shape + 1.0, 1.0, rng).ln();
    let u: f64 = 1.0 - rng.uniform();
    boosted + u.ln() / shape
}

/// Dirichlet draw by normalized gamma variates.
pub(crate) fn dirichlet(alpha: &[f64], rng: &mut Rng) -> Vec<f64> {
    let mut out = vec![0.0; alpha.len()];
    dirichlet_into(alpha, rng, &mut out);
    out
}

pub(crate) fn dirichlet_into(alpha: &[f64], rng: &mut Rng, out: &mut [f64]) {
    if alpha.iter().all(|&a| a >= 1.0) {
        let mut total = 0.0;
        for (o, &a) in out.iter_mut().zip(alpha) {
            *o = gamma(a, 1.0, rng);
            total += *o;
        }
        out.iter_mut().for_each(|o| *o /= total);
    } else {
        for (o, &a) in out.iter_mut().zip(alpha) {
            *o = ln_gamma_variate(a, rng);
        }
        let logs = out.to_vec();
        softmax_into(&logs, out);
    }
}

/// Multinomial draw by sequential binomial conditioning.
pub(crate) fn multinomial(n: u64, p: &[f64], rng: &mut Rng) -> Vec<u64> {
    let mut out = vec![0u64; p.len()];
    multinomial_into(n, p, rng, &mut out);
    out
}

pub(crate) fn multinomial_into(n: u64, p: &[f64], rng: &mut Rng, out: &mut [u64]) {
    out.iter_mut().for_each(|o| *o = 0);
    let mut remaining = n;
    let mut mass: f64 = p.iter().sum();
    let last = p.len() - 1;
    for (i, &pi) in p.iter().enumerate() {
        if remaining == 0 {
            break;
        }
        if i == last {
            out[i] = remaining;
            break;
        }
        let q = if mass > 0.0 { (pi / mass).clamp(0.0, 1.0) } else { 0.0 };
        let k = if q >= 1.0 {
            remaining
        } else if q <= 0.0 {
            0
        } else {
            Binomial::new(remaining, q).expect("valid binomial").sample(rng)
        };
        out[i] = k;
        remaining -= k;
        mass -= pi;
    }
}

pub(crate) fn poisson(lambda: f64, rng: &mut Rng) -> u64 {
    if lambda <= 0.0 {
        return 0;
    }
    Poisson::new(lambda).expect("valid poisson rate").sample(rng) as u64
}

pub(crate) fn normal(mean: f64, sd: f64, rng: &mut Rng) -> f64 {
    Normal::new(mean, sd).expect("valid normal").sample(rng)
}

/// Index drawn proportionally to nonnegative `weights`.
pub(crate) fn categorical(weights: &[f64], rng: &mut Rng) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.uniform() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(weights.len() - 1)
}
