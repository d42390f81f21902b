//! Mean-field Gaussian variational inference with reparameterized
//! stochastic gradients.

use serde::{Deserialize, Serialize};

use super::{initial_point, SigmaPrior, UnigramTarget};
use crate::corpus::{CountMatrix, TimeIndex};
use crate::error::{Error, Result};
use crate::inference::{median, PosteriorSamples, SampleMeta, TopicRole, Trace};
use crate::numeric::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdviOptions {
    pub iters: usize,
    /// Monte Carlo draws per gradient estimate.
    pub grad_samples: usize,
    /// Base step size of the decaying adaptive schedule.
    pub eta: f64,
    /// Draws returned from the fitted factors.
    pub output_draws: usize,
    /// Relative ELBO change below which optimization stops.
    pub tol_rel_obj: f64,
    /// Iterations between ELBO estimates.
    pub eval_every: usize,
    pub elbo_samples: usize,
    pub seed: u64,
}

impl Default for AdviOptions {
    fn default() -> Self {
        AdviOptions {
            iters: 10_000,
            grad_samples: 8,
            eta: 0.05,
            output_draws: 1000,
            tol_rel_obj: 0.01,
            eval_every: 100,
            elbo_samples: 100,
            seed: 0,
        }
    }
}

impl AdviOptions {
    pub fn validate(&self) -> Result<()> {
        if self.iters == 0 || self.grad_samples == 0 || self.output_draws == 0 {
            return Err(Error::config("iters, grad_samples and output_draws must be positive"));
        }
        if self.eval_every == 0 || self.elbo_samples == 0 {
            return Err(Error::config("eval_every and elbo_samples must be positive"));
        }
        if !(self.eta > 0.0) || !(self.tol_rel_obj >= 0.0) {
            return Err(Error::config("eta must be positive and tol_rel_obj nonnegative"));
        }
        Ok(())
    }
}

/// Fitted factors: means and log standard deviations of `(mu, log sigma2)`.
#[derive(Clone, Debug)]
struct Factors {
    mean: Vec<f64>,
    log_sd: Vec<f64>,
}

impl Factors {
    fn draw(&self, rng: &mut Rng, eps: &mut [f64], z: &mut [f64]) {
        for i in 0..z.len() {
            eps[i] = rng.standard_normal();
            z[i] = self.mean[i] + self.log_sd[i].exp() * eps[i];
        }
    }

    /// Monte Carlo ELBO: expected log density plus the Gaussian entropy.
    fn elbo(&self, target: &UnigramTarget, samples: usize, rng: &mut Rng) -> f64 {
        let dim = self.mean.len();
        let (mut eps, mut z) = (vec![0.0; dim], vec![0.0; dim]);
        let mut total = 0.0;
        for _ in 0..samples {
            self.draw(rng, &mut eps, &mut z);
            total += target.log_density(&z);
        }
        let entropy = self.log_sd.iter().sum::<f64>() + 0.5 * dim as f64 * (1.0 + (2.0 * std::f64::consts::PI).ln());
        total / samples as f64 + entropy
    }
}

/// Fits a fully factorized Gaussian over `(mu, log sigma2)` and returns
/// `opts.output_draws` draws from it as a single chain.
pub fn fit_unigram_advi(
    x: &CountMatrix,
    time_index: &TimeIndex,
    prior: SigmaPrior,
    opts: &AdviOptions,
) -> Result<PosteriorSamples> {
    opts.validate()?;
    let target = UnigramTarget::new(x, time_index, prior)?;
    let mut rng = Rng::new(opts.seed);
    let dim = target.dim();
    let start = initial_point(&target, 0.0, &mut rng);
    let mut f = Factors {
        log_sd: vec![-1.0; dim],
        mean: start,
    };
    let (mut eps, mut z, mut g) = (vec![0.0; dim], vec![0.0; dim], vec![0.0; dim]);
    let (mut gm, mut gs) = (vec![0.0; dim], vec![0.0; dim]);
    let (mut sm, mut ss) = (vec![0.0; dim], vec![0.0; dim]);
    let mut elbo_trace = Vec::new();
    let mut rel_changes: Vec<f64> = Vec::new();
    let mut converged = false;
    let mut iters_run = 0;
    let window = (opts.iters / opts.eval_every / 10).max(2);
    for it in 1..=opts.iters {
        iters_run = it;
        gm.iter_mut().for_each(|v| *v = 0.0);
        gs.iter_mut().for_each(|v| *v = 0.0);
        let w = 1.0 / opts.grad_samples as f64;
        for _ in 0..opts.grad_samples {
            f.draw(&mut rng, &mut eps, &mut z);
            let lp = target.log_density_grad(&z, &mut g);
            if !lp.is_finite() {
                continue;
            }
            for i in 0..dim {
                gm[i] += w * g[i];
                gs[i] += w * g[i] * eps[i] * f.log_sd[i].exp();
            }
        }
        gs.iter_mut().for_each(|v| *v += 1.0);
        // Adaptive step: exponentially weighted squared gradients and a
        // decaying base rate.
        let decay = (it as f64).powf(-0.5 + 1e-16);
        for i in 0..dim {
            if it == 1 {
                sm[i] = gm[i] * gm[i];
                ss[i] = gs[i] * gs[i];
            } else {
                sm[i] = 0.1 * gm[i] * gm[i] + 0.9 * sm[i];
                ss[i] = 0.1 * gs[i] * gs[i] + 0.9 * ss[i];
            }
            f.mean[i] += opts.eta * decay / (1.0 + sm[i].sqrt()) * gm[i];
            f.log_sd[i] += opts.eta * decay / (1.0 + ss[i].sqrt()) * gs[i];
        }
        if it % opts.eval_every == 0 {
            let elbo = f.elbo(&target, opts.elbo_samples, &mut rng);
            if !elbo.is_finite() {
                return Err(Error::Numerical {
                    iteration: it,
                    message: "non-finite ELBO".into(),
                });
            }
            if let Some(&prev) = elbo_trace.last() {
                let prev: f64 = prev;
                rel_changes.push(((elbo - prev) / elbo).abs());
            }
            elbo_trace.push(elbo);
            let recent = &rel_changes[rel_changes.len().saturating_sub(window)..];
            if recent.len() >= 2 {
                let mean = recent.iter().sum::<f64>() / recent.len() as f64;
                if mean < opts.tol_rel_obj || median(recent) < opts.tol_rel_obj {
                    converged = true;
                    break;
                }
            }
        }
    }
    let (t_len, v) = (target.slots(), target.features());
    let n = t_len * v;
    let mut trace = Trace::new();
    trace
        .declare("mu", vec![t_len, v], TopicRole::None)
        .declare("sigma2", vec![1], TopicRole::None);
    for _ in 0..opts.output_draws {
        f.draw(&mut rng, &mut eps, &mut z);
        trace.push("mu", &z[..n]);
        trace.push("sigma2", &[z[n].exp()]);
        trace.end_draw();
    }
    let mut meta = SampleMeta {
        model: "unigram".into(),
        method: "advi".into(),
        seed: opts.seed,
        iters: iters_run,
        ..Default::default()
    };
    if !converged {
        meta.warnings.push(format!("ELBO did not converge in {} iterations", opts.iters));
    }
    meta.extra.insert("elbo".into(), elbo_trace.into());
    meta.extra.insert("converged".into(), converged.into());
    meta.extra.insert("times".into(), time_index.times.clone().into());
    PosteriorSamples::from_traces(meta, vec![trace])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::mean_matrix;
    use crate::unigram::simulate_unigram;

    #[test]
    fn converges_and_tracks_the_truth() {
        let mut rng = Rng::new(3);
        let ti = TimeIndex::sequential(5);
        let (x, truth) = simulate_unigram(5, 8, &ti, &[1000; 5], 1.0, &mut rng).unwrap();
        let s = fit_unigram_advi(&x, &ti, SigmaPrior::default(), &AdviOptions::default()).unwrap();
        assert_eq!(s.meta.extra["converged"], true);
        let est = crate::unigram::softmax_rows(&mean_matrix(&s, "mu").unwrap());
        let p = truth.probabilities();
        let err = est.iter().zip(p.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 0.05, "{err}");
        assert!(s.require("sigma2").unwrap().pooled(0).iter().all(|&v| v > 0.0));
    }

    #[test]
    fn rejects_bad_options() {
        let x = CountMatrix::from_counts(ndarray::array![[1, 2]]);
        let ti = TimeIndex::sequential(1);
        let opts = AdviOptions {
            grad_samples: 0,
            ..Default::default()
        };
        assert!(fit_unigram_advi(&x, &ti, SigmaPrior::default(), &opts).is_err());
    }
}
