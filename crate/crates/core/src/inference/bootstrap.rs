use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{run_chains, PosteriorSamples, SampleMeta, TopicRole, Trace};
use crate::align::{align_topics, apply_alignment};
use crate::corpus::CountMatrix;
use crate::error::{Error, Result};
use crate::numeric::Rng;

/// A fitted model that exposes point estimates of `theta` (D×K) and `beta` (V×K).
pub trait PointEstimate {
    fn theta(&self) -> Array2<f64>;
    fn beta(&self) -> Array2<f64>;
    fn model(&self) -> &'static str;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BootstrapOptions {
    pub replicates: usize,
    pub seed: u64,
    /// Largest tolerated fraction of failed refits.
    pub max_failure_rate: f64,
}

impl Default for BootstrapOptions {
    fn default() -> Self {
        BootstrapOptions {
            replicates: 50,
            seed: 0,
            max_failure_rate: 0.2,
        }
    }
}

impl BootstrapOptions {
    pub fn validate(&self) -> Result<()> {
        if self.replicates == 0 {
            return Err(Error::config("bootstrap needs at least one replicate"));
        }
        if !(0.0..=1.0).contains(&self.max_failure_rate) {
            return Err(Error::config("max_failure_rate must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Refits the estimator to datasets simulated from `fit`.
///
/// Replicate `b` simulates with stream `b` of `opts.seed` and passes a seed
/// derived from the same stream to `refit`. Each refit is aligned to `fit`
/// by its topic matrix before being stored as one draw of `theta` and `beta`.
/// Failed refits are skipped and counted in `meta.extra["failures"]`.
pub fn parametric_bootstrap<F, E, S, R>(fit: &F, simulate: S, refit: R, opts: &BootstrapOptions) -> Result<PosteriorSamples>
where
    F: PointEstimate + Sync,
    E: PointEstimate,
    S: Fn(&F, &mut Rng) -> Result<CountMatrix> + Sync + Send,
    R: Fn(&CountMatrix, u64) -> Result<E> + Sync + Send,
{
    opts.validate()?;
    let reference = fit.beta();
    let root = Rng::new(opts.seed);
    let results = run_chains(opts.replicates, |b| -> Result<(Array2<f64>, Array2<f64>)> {
        let mut rng = root.split(b as u64);
        let data = simulate(fit, &mut rng)?;
        let est = refit(&data, rng.next_seed())?;
        let perm = align_topics(&reference, &est.beta())?;
        Ok((apply_alignment(&est.theta(), &perm)?, apply_alignment(&est.beta(), &perm)?))
    });
    let mut trace = Trace::new();
    let (d, k) = fit.theta().dim();
    let v = reference.nrows();
    trace
        .declare("theta", vec![d, k], TopicRole::Axis(1))
        .declare("beta", vec![v, k], TopicRole::Axis(1));
    let mut failures = Vec::new();
    for (b, r) in results.into_iter().enumerate() {
        match r {
            Ok((theta, beta)) if theta.dim() == (d, k) && beta.dim() == (v, k) => {
                trace.push("theta", &theta.iter().copied().collect::<Vec<_>>());
                trace.push("beta", &beta.iter().copied().collect::<Vec<_>>());
                trace.end_draw();
            }
            Ok(_) => failures.push(format!("replicate {b}: refit has the wrong shape")),
            Err(e) => failures.push(format!("replicate {b}: {e}")),
        }
    }
    let rate = failures.len() as f64 / opts.replicates as f64;
    if rate > opts.max_failure_rate {
        return Err(Error::Numerical {
            iteration: failures.len(),
            message: format!(
                "{} of {} bootstrap refits failed; first: {}",
                failures.len(),
                opts.replicates,
                failures[0]
            ),
        });
    }
    let mut meta = SampleMeta {
        model: fit.model().into(),
        method: "bootstrap".into(),
        seed: opts.seed,
        iters: opts.replicates,
        warnings: failures.clone(),
        ..Default::default()
    };
    meta.extra.insert("failures".into(), failures.len().into());
    PosteriorSamples::from_traces(meta, vec![trace])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::align::topic_correlations;
    use crate::inference::{summarize_posterior, CaviOptions};
    use crate::lda::{fit_lda_cavi, simulate_lda, LdaFit};
    use ndarray::array;

    struct Fixed(Array2<f64>, Array2<f64>);

    impl PointEstimate for Fixed {
        fn theta(&self) -> Array2<f64> {
            self.0.clone()
        }
        fn beta(&self) -> Array2<f64> {
            self.1.clone()
        }
        fn model(&self) -> &'static str {
            "lda"
        }
    }

    fn separated() -> CountMatrix {
        let mut counts = Array2::zeros((10, 8));
        for d in 0..10 {
            for v in 0..4 {
                let col = if d < 5 { v } else { v + 4 };
                counts[[d, col]] = 20 + (d * 7 + v * 3) as u64 % 11;
            }
        }
        CountMatrix::from_counts(counts)
    }

    fn vb(x: &CountMatrix, seed: u64) -> Result<LdaFit> {
        let opts = CaviOptions {
            seed,
            ..Default::default()
        };
        fit_lda_cavi(x, 2, &1.0.into(), &1.0.into(), &opts)
    }

    #[test]
    fn identity_simulation_reproduces_the_fit() {
        let x = separated();
        let fit = vb(&x, 1).unwrap();
        let opts = BootstrapOptions {
            replicates: 1,
            ..Default::default()
        };
        let s = parametric_bootstrap(
            &fit,
            |_, _| Ok(x.clone()),
            vb,
            &opts,
        )
        .unwrap();
        let beta = s.require("beta").unwrap().matrix(0, 0).unwrap();
        let corr = topic_correlations(&fit.beta(), &beta).unwrap();
        assert!(corr[[0, 0]] > 0.99 && corr[[1, 1]] > 0.99, "{corr:?}");
    }

    #[test]
    fn failures_are_counted_and_bounded() {
        let fit = Fixed(array![[0.5, 0.5]], array![[0.2, 0.7], [0.8, 0.3]]);
        let sim = |_: &Fixed, _: &mut Rng| Ok(CountMatrix::from_counts(array![[1, 1]]));
        let refit_every = |every: u64| {
            move |_: &CountMatrix, seed: u64| -> Result<Fixed> {
                if seed % every == 0 {
                    Err(Error::config("refit failed"))
                } else {
                    Ok(Fixed(array![[0.5, 0.5]], array![[0.2, 0.7], [0.8, 0.3]]))
                }
            }
        };
        let opts = BootstrapOptions {
            replicates: 40,
            ..Default::default()
        };
        // Seeds are pseudo-random, so roughly one replicate in `every` fails.
        let s = parametric_bootstrap(&fit, sim, refit_every(8), &opts).unwrap();
        let failures = s.meta.extra["failures"].as_u64().unwrap() as usize;
        assert_eq!(s.total_draws() + failures, 40);
        assert!(s.total_draws() >= 32);
        assert!(parametric_bootstrap(&fit, sim, refit_every(1), &opts).is_err());
    }

    #[test]
    fn replicate_streams_are_exchangeable() {
        // Two disjoint sets of replicate streams give statistically
        // indistinguishable bootstrap draws (two-sample KS at 0.01).
        let mut rng = Rng::new(2);
        let (x, _) = simulate_lda(15, 20, 2, &[200; 15], &1.0.into(), &1.0.into(), &mut rng).unwrap();
        let fit = vb(&x, 0).unwrap();
        let params = fit.point_params();
        let run = |seed: u64| {
            let opts = BootstrapOptions {
                replicates: 60,
                seed,
                ..Default::default()
            };
            parametric_bootstrap(
                &fit,
                |_, rng| {
                    let mut counts = Array2::zeros((15, 20));
                    for d in 0..15 {
                        let p = params.mixture(d);
                        let row = crate::numeric::multinomial(200, &p, rng);
                        counts.row_mut(d).iter_mut().zip(row).for_each(|(o, c)| *o = c);
                    }
                    Ok(CountMatrix::from_counts(counts))
                },
                |data, seed| {
                    let opts = CaviOptions {
                        seed,
                        restarts: 1,
                        ..Default::default()
                    };
                    fit_lda_cavi(data, 2, &1.0.into(), &1.0.into(), &opts)
                },
                &opts,
            )
            .unwrap()
        };
        let (a, b) = (run(10), run(11));
        let sa = a.require("beta").unwrap().pooled(0);
        let sb = b.require("beta").unwrap().pooled(0);
        let ks = ks_statistic(&sa, &sb);
        let n = (sa.len() * sb.len()) as f64 / (sa.len() + sb.len()) as f64;
        assert!(ks < 1.628 / n.sqrt(), "KS {ks}");
        assert!(summarize_posterior(&a, &[0.5]).is_ok());
    }

    fn ks_statistic(a: &[f64], b: &[f64]) -> f64 {
        let mut a = a.to_vec();
        let mut b = b.to_vec();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        let (mut i, mut j, mut best) = (0, 0, 0.0f64);
        while i < a.len() && j < b.len() {
            let x = a[i].min(b[j]);
            while i < a.len() && a[i] <= x {
                i += 1;
            }
            while j < b.len() && b[j] <= x {
                j += 1;
            }
            best = best.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
        }
        best
    }
}
