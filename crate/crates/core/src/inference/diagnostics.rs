use serde::Serialize;

use super::samples::PosteriorSamples;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Diagnostic {
    pub param: String,
    pub index: Vec<usize>,
    /// Split potential scale reduction; `inf` when chains sit at distinct
    /// constants.
    pub rhat: f64,
    pub ess: f64,
    /// Zero variance within and between chains.
    pub degenerate: bool,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn var(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() as f64 - 1.0)
}

/// Halves every chain, dropping the middle draw of odd-length chains.
fn split(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = chains[0].len() / 2;
    chains
        .iter()
        .flat_map(|c| [c[..n].to_vec(), c[c.len() - n..].to_vec()])
        .collect()
}

/// Split-R-hat of one scalar from per-chain draws. Returns `(rhat, degenerate)`.
pub fn split_rhat(chains: &[Vec<f64>]) -> (f64, bool) {
    let halves = split(chains);
    let n = halves[0].len() as f64;
    let m = halves.len() as f64;
    let means: Vec<f64> = halves.iter().map(|c| mean(c)).collect();
    let grand = mean(&means);
    let between = n / (m - 1.0) * means.iter().map(|x| (x - grand).powi(2)).sum::<f64>();
    let within = halves.iter().map(|c| var(c)).sum::<f64>() / m;
    if within <= 0.0 {
        return if between <= 0.0 { (1.0, true) } else { (f64::INFINITY, false) };
    }
    let var_plus = (n - 1.0) / n * within + between / n;
    ((var_plus / within).sqrt(), false)
}

/// Multi-chain effective sample size with Geyer's initial positive sequence:
/// autocorrelation pairs are summed until the first negative pair sum.
pub fn effective_sample_size(chains: &[Vec<f64>]) -> f64 {
    let halves = split(chains);
    let n = halves[0].len();
    let m = halves.len() as f64;
    let total = m * n as f64;
    let means: Vec<f64> = halves.iter().map(|c| mean(c)).collect();
    let within = halves.iter().map(|c| var(c)).sum::<f64>() / m;
    let grand = mean(&means);
    let between = n as f64 / (m - 1.0) * means.iter().map(|x| (x - grand).powi(2)).sum::<f64>();
    let nf = n as f64;
    let var_plus = (nf - 1.0) / nf * within + between / nf;
    if var_plus <= 0.0 || within <= 0.0 {
        return total;
    }
    let acov = |lag: usize| -> f64 {
        halves
            .iter()
            .zip(&means)
            .map(|(c, mu)| {
                (0..n - lag).map(|i| (c[i] - mu) * (c[i + lag] - mu)).sum::<f64>() / nf
            })
            .sum::<f64>()
            / m
    };
    let rho = |lag: usize| 1.0 - (within - acov(lag)) / var_plus;
    let mut tau = -1.0;
    let mut prev_pair = f64::INFINITY;
    let mut lag = 0;
    while lag + 1 < n {
        let pair = rho(lag) + rho(lag + 1);
        if pair < 0.0 {
            break;
        }
        // Monotone initial sequence.
        let pair = pair.min(prev_pair);
        tau += 2.0 * pair;
        prev_pair = pair;
        lag += 2;
    }
    total / tau.max(1.0 / total.ln().max(1.0))
}

/// Split-R-hat and ESS for every scalar in the store.
pub fn diagnostics(s: &PosteriorSamples) -> Result<Vec<Diagnostic>> {
    if s.chains() < 2 || s.draws_per_chain() < 4 {
        return Err(Error::domain(format!(
            "diagnostics need at least 2 chains of 4 draws, have {} of {}",
            s.chains(),
            s.draws_per_chain()
        )));
    }
    let mut out = Vec::new();
    for (name, p) in s.params() {
        for flat in 0..p.size() {
            let chains: Vec<Vec<f64>> = (0..p.chains()).map(|c| p.chain_series(c, flat)).collect();
            let (rhat, degenerate) = split_rhat(&chains);
            let ess = if degenerate { s.total_draws() as f64 } else { effective_sample_size(&chains) };
            out.push(Diagnostic {
                param: name.clone(),
                index: p.unflatten(flat),
                rhat,
                ess,
                degenerate,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::Rng;

    #[test]
    fn iid_chains_have_rhat_near_one() {
        let mut rng = Rng::new(8);
        let chains: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..1000).map(|_| rng.standard_normal()).collect())
            .collect();
        let (rhat, degenerate) = split_rhat(&chains);
        assert!(!degenerate);
        assert!((0.99..=1.02).contains(&rhat), "rhat {rhat}");
        let ess = effective_sample_size(&chains);
        assert!(ess > 3000.0 && ess < 5000.0, "ess {ess}");
    }

    #[test]
    fn disjoint_constant_chains() {
        let (rhat, degenerate) = split_rhat(&[vec![1.0; 10], vec![2.0; 10]]);
        assert!(rhat.is_infinite() && !degenerate);
        let (rhat, degenerate) = split_rhat(&[vec![1.0; 10], vec![1.0; 10]]);
        assert_eq!(rhat, 1.0);
        assert!(degenerate);
    }

    #[test]
    fn ar1_ess_matches_analytic() {
        let mut rng = Rng::new(21);
        let rho = 0.9;
        let n = 5000;
        let chains: Vec<Vec<f64>> = (0..4)
            .map(|_| {
                let mut x = rng.standard_normal() / (1.0f64 - rho * rho).sqrt();
                (0..n)
                    .map(|_| {
                        x = rho * x + rng.standard_normal();
                        x
                    })
                    .collect()
            })
            .collect();
        let ess = effective_sample_size(&chains);
        let analytic = 4.0 * n as f64 * (1.0 - rho) / (1.0 + rho);
        assert!(ess < 0.2 * 4.0 * n as f64);
        assert!(ess > analytic / 2.0 && ess < analytic * 2.0, "ess {ess} vs {analytic}");
    }
}
