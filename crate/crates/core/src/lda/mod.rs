//! Latent Dirichlet allocation and its single-membership special case, the
//! Dirichlet-multinomial mixture.
//!
//! Samples are rows, features are columns. `theta` is D×K with rows on the
//! simplex, `beta` is V×K with columns on the simplex.

mod cavi;
pub mod dmm;
mod gibbs;

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

pub use cavi::{bootstrap_lda, fit_lda_cavi, LdaFit};
pub use dmm::{fit_dmm_gibbs, simulate_dmm, DmmParams};
pub use gibbs::{fit_lda_gibbs, LdaGibbs};

use crate::corpus::CountMatrix;
use crate::error::{Error, Result};
use crate::numeric::{self, ln_multinomial_pmf, Rng, SIMPLEX_TOL};

/// Dirichlet concentration, either shared across components or per component.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Concentration {
    Symmetric(f64),
    Vector(Vec<f64>),
}

impl Concentration {
    pub fn expand(&self, len: usize) -> Result<Vec<f64>> {
        let out = match self {
            Concentration::Symmetric(a) => vec![*a; len],
            Concentration::Vector(v) if v.len() == len => v.clone(),
            Concentration::Vector(v) => {
                return Err(Error::domain(format!(
                    "concentration has {} entries, expected {len}",
                    v.len()
                )))
            }
        };
        if out.iter().any(|a| !(*a > 0.0) || !a.is_finite()) {
            return Err(Error::domain("Dirichlet concentrations must be positive"));
        }
        Ok(out)
    }
}

impl From<f64> for Concentration {
    fn from(a: f64) -> Self {
        Concentration::Symmetric(a)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LdaParams {
    pub theta: Array2<f64>,
    pub beta: Array2<f64>,
    pub alpha: Concentration,
    pub gamma: Concentration,
}

impl LdaParams {
    pub fn topics(&self) -> usize {
        self.beta.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.beta.ncols();
        if k == 0 || self.theta.ncols() != k {
            return Err(Error::shape(format!(
                "theta has {} topics, beta {}",
                self.theta.ncols(),
                k
            )));
        }
        self.alpha.expand(k)?;
        self.gamma.expand(self.beta.nrows())?;
        for row in self.theta.rows() {
            check_simplex(row)?;
        }
        for col in self.beta.columns() {
            check_simplex(col)?;
        }
        Ok(())
    }

    /// Mixture probabilities `B theta_d` for sample `d`.
    pub fn mixture(&self, d: usize) -> Vec<f64> {
        mixture(&self.beta, self.theta.row(d))
    }
}

pub(crate) fn check_simplex(v: ArrayView1<'_, f64>) -> Result<()> {
    let total: f64 = v.sum();
    if v.iter().any(|x| *x < 0.0 || !x.is_finite()) || (total - 1.0).abs() > SIMPLEX_TOL * v.len() as f64 {
        return Err(Error::domain(format!("vector off the simplex (sum {total})")));
    }
    Ok(())
}

/// `B theta_d`. Each entry sums its K products in sorted order, so the
/// result does not depend on how topics are labeled.
pub(crate) fn mixture(beta: &Array2<f64>, theta_d: ArrayView1<'_, f64>) -> Vec<f64> {
    let mut terms = vec![0.0; theta_d.len()];
    beta.rows()
        .into_iter()
        .map(|row| {
            terms.iter_mut().zip(row.iter().zip(theta_d.iter())).for_each(|(t, (b, th))| *t = b * th);
            terms.sort_by(f64::total_cmp);
            terms.iter().sum()
        })
        .collect()
}

fn check_dims(d: usize, v: usize, k: usize) -> Result<()> {
    if d == 0 || v == 0 || k == 0 {
        return Err(Error::domain(format!("D, V, K must be positive (got {d}, {v}, {k})")));
    }
    Ok(())
}

/// Topics `beta_k ~ Dir(gamma)` as columns of a V×K matrix.
pub(crate) fn draw_topics(v: usize, k: usize, gamma: &[f64], rng: &mut Rng) -> Array2<f64> {
    let mut beta = Array2::zeros((v, k));
    for mut col in beta.columns_mut() {
        let draw = numeric::dirichlet(gamma, rng);
        col.iter_mut().zip(draw).for_each(|(c, b)| *c = b);
    }
    beta
}

/// Simulates data and ground truth: `beta_k ~ Dir(gamma)`, `theta_d ~ Dir(alpha)`,
/// `x_d ~ Mult(N_d, B theta_d)`.
pub fn simulate_lda(
    d: usize,
    v: usize,
    k: usize,
    totals: &[u64],
    alpha: &Concentration,
    gamma: &Concentration,
    rng: &mut Rng,
) -> Result<(CountMatrix, LdaParams)> {
    check_dims(d, v, k)?;
    if totals.len() != d {
        return Err(Error::shape(format!("{} totals for {d} samples", totals.len())));
    }
    let a = alpha.expand(k)?;
    let g = gamma.expand(v)?;
    let beta = draw_topics(v, k, &g, rng);
    let mut theta = Array2::zeros((d, k));
    let mut counts = Array2::zeros((d, v));
    for i in 0..d {
        let t = numeric::dirichlet(&a, rng);
        theta.row_mut(i).iter_mut().zip(&t).for_each(|(o, x)| *o = *x);
        let p = mixture(&beta, theta.row(i));
        let x = numeric::multinomial(totals[i], &p, rng);
        counts.row_mut(i).iter_mut().zip(x).for_each(|(o, x)| *o = x);
    }
    let params = LdaParams {
        theta,
        beta,
        alpha: alpha.clone(),
        gamma: gamma.clone(),
    };
    Ok((CountMatrix::from_counts(counts), params))
}

/// Marginal log likelihood `sum_d log Mult(x_d | N_d, B theta_d)`, including
/// multinomial coefficients. `-inf` when a positive count meets a zero
/// mixture probability.
pub fn lda_log_likelihood(x: &CountMatrix, params: &LdaParams) -> Result<f64> {
    let (d, v) = x.counts().dim();
    if params.theta.nrows() != d || params.beta.nrows() != v || params.theta.ncols() != params.beta.ncols() {
        return Err(Error::shape(format!(
            "data {d}x{v}, theta {:?}, beta {:?}",
            params.theta.dim(),
            params.beta.dim()
        )));
    }
    let mut total = 0.0;
    for i in 0..d {
        let p = params.mixture(i);
        let row: Vec<u64> = x.row(i).to_vec();
        total += ln_multinomial_pmf(&row, &p);
        if total == f64::NEG_INFINITY {
            break;
        }
    }
    Ok(total)
}

/// Nonzero cells `(d, v, count)` in row-major order.
pub(crate) fn nonzero_cells(x: &CountMatrix) -> Vec<(usize, usize, u64)> {
    x.counts()
        .indexed_iter()
        .filter(|(_, &c)| c > 0)
        .map(|((d, v), &c)| (d, v, c))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::library_sizes;
    use ndarray::array;

    fn params(theta: Array2<f64>, beta: Array2<f64>) -> LdaParams {
        LdaParams {
            theta,
            beta,
            alpha: 1.0.into(),
            gamma: 1.0.into(),
        }
    }

    #[test]
    fn single_topic_simulation_has_unit_theta() {
        let mut rng = Rng::new(1);
        let (x, p) = simulate_lda(5, 4, 1, &[10; 5], &1.0.into(), &1.0.into(), &mut rng).unwrap();
        assert!(p.theta.iter().all(|&t| t == 1.0));
        assert_eq!(library_sizes(&x), vec![10; 5]);
        p.validate().unwrap();
    }

    #[test]
    fn simulation_grid_cell_is_valid() {
        let mut rng = Rng::new(2);
        let (x, p) = simulate_lda(20, 325, 2, &[1625; 20], &1.0.into(), &1.0.into(), &mut rng).unwrap();
        assert_eq!(x.counts().dim(), (20, 325));
        assert!(library_sizes(&x).iter().all(|&n| n == 1625));
        p.validate().unwrap();
    }

    #[test]
    fn simulation_is_deterministic() {
        let run = || simulate_lda(6, 9, 3, &[50; 6], &0.5.into(), &0.3.into(), &mut Rng::new(77)).unwrap();
        assert_eq!(run(), run());
    }

    #[test]
    fn invalid_hyperparameters() {
        let mut rng = Rng::new(1);
        assert!(simulate_lda(2, 2, 2, &[1, 1], &0.0.into(), &1.0.into(), &mut rng).is_err());
        assert!(simulate_lda(2, 2, 2, &[1, 1], &1.0.into(), &Concentration::Vector(vec![1.0]), &mut rng).is_err());
    }

    #[test]
    fn likelihood_examples() {
        let x = CountMatrix::from_counts(Array2::zeros((2, 3)));
        let p = params(array![[0.5, 0.5], [0.2, 0.8]], array![[0.2, 0.3], [0.3, 0.3], [0.5, 0.4]]);
        assert_eq!(lda_log_likelihood(&x, &p).unwrap(), 0.0);

        let x = CountMatrix::from_counts(array![[1, 0]]);
        let p = params(array![[1.0]], array![[0.7], [0.3]]);
        assert!((lda_log_likelihood(&x, &p).unwrap() - 0.7f64.ln()).abs() < 1e-15);

        let x = CountMatrix::from_counts(array![[0, 2]]);
        let p = params(array![[1.0]], array![[1.0], [0.0]]);
        assert_eq!(lda_log_likelihood(&x, &p).unwrap(), f64::NEG_INFINITY);
    }

    #[test]
    fn likelihood_matches_high_precision_pmf() {
        // log of 7!/(2!4!1!) * 0.3^2 * 0.45^4 * 0.25 + 5!/(0!3!2!) * 0.6^3 * 0.1^2,
        // evaluated with mpmath at 40 digits.
        let x = CountMatrix::from_counts(array![[2, 4, 1], [0, 3, 2]]);
        let p = params(
            array![[1.0, 0.0], [0.0, 1.0]],
            array![[0.3, 0.3], [0.45, 0.6], [0.25, 0.1]],
        );
        let got = lda_log_likelihood(&x, &p).unwrap();
        assert!((got - (-6.169_372_368_777_343)).abs() < 1e-9, "{got}");
    }

    #[test]
    fn single_topic_mean_matches_expectation() {
        // E[x_dv] = N E[beta_v] = N / V under a symmetric prior.
        let mut rng = Rng::new(4);
        let reps = 4000;
        let mut acc = [0.0; 3];
        let mut sq = [0.0; 3];
        for _ in 0..reps {
            let (x, _) = simulate_lda(1, 3, 1, &[30], &1.0.into(), &1.0.into(), &mut rng).unwrap();
            for v in 0..3 {
                let c = x.counts()[[0, v]] as f64;
                acc[v] += c;
                sq[v] += c * c;
            }
        }
        for v in 0..3 {
            let mean = acc[v] / reps as f64;
            let sd = (sq[v] / reps as f64 - mean * mean).sqrt();
            assert!((mean - 10.0).abs() < 3.0 * sd / (reps as f64).sqrt(), "v{v}: {mean}");
        }
    }
}
