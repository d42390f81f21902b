use ndarray::Array2;
use statrs::function::gamma::{digamma, ln_gamma};

use super::{nonzero_cells, Concentration, LdaParams};
use crate::corpus::{library_sizes, CountMatrix};
use crate::error::{Error, Result};
use crate::inference::{parametric_bootstrap, run_chains, BootstrapOptions, CaviOptions, PointEstimate, PosteriorSamples, SampleMeta, TopicRole, Trace};
use crate::numeric::{self, ln_factorial, softmax_into, Rng};

/// Mean-field variational posterior for LDA: a Dirichlet factor per sample
/// (`theta_conc`, D×K), a Dirichlet factor per topic (`beta_conc`, V×K, one
/// column per topic) and per-cell topic responsibilities.
#[derive(Clone, Debug, PartialEq)]
pub struct LdaFit {
    pub theta_conc: Array2<f64>,
    pub beta_conc: Array2<f64>,
    /// K responsibilities per nonzero cell, cells in row-major order.
    pub resp: Vec<f64>,
    pub cells: Vec<(usize, usize, u64)>,
    /// ELBO after initialization, then after every iteration.
    pub elbo_trace: Vec<f64>,
    pub converged: bool,
    pub restart: usize,
    pub alpha: Concentration,
    pub gamma: Concentration,
}

struct Problem<'a> {
    x: &'a CountMatrix,
    k: usize,
    alpha: Vec<f64>,
    gamma: Vec<f64>,
    cells: Vec<(usize, usize, u64)>,
    /// `sum_d [log N_d! - sum_v log x_dv!]`
    log_coef: f64,
}

fn dirichlet_expect_log(conc: &[f64], out: &mut [f64]) {
    let total = digamma(conc.iter().sum());
    for (o, &c) in out.iter_mut().zip(conc) {
        *o = digamma(c) - total;
    }
}

/// `E_q[log Dir(p; prior)] - E_q[log Dir(p; post)]` given `E_q[log p]`.
fn dirichlet_kl_terms(prior: &[f64], post: &[f64], elog: &[f64]) -> f64 {
    let lnb = |a: &[f64]| ln_gamma(a.iter().sum()) - a.iter().map(|&x| ln_gamma(x)).sum::<f64>();
    let mut acc = lnb(prior) - lnb(post);
    for ((&a, &b), &e) in prior.iter().zip(post).zip(elog) {
        acc += (a - b) * e;
    }
    acc
}

struct State {
    theta_conc: Array2<f64>,
    beta_conc: Array2<f64>,
    resp: Vec<f64>,
    elog_theta: Array2<f64>,
    elog_beta: Array2<f64>,
}

impl Problem<'_> {
    fn refresh_expectations(&self, s: &mut State) {
        let k = self.k;
        let mut buf = vec![0.0; k];
        for (i, row) in s.theta_conc.rows().into_iter().enumerate() {
            dirichlet_expect_log(row.as_slice().expect("contiguous"), &mut buf);
            s.elog_theta.row_mut(i).iter_mut().zip(&buf).for_each(|(o, b)| *o = *b);
        }
        let v = self.x.features();
        let mut col = vec![0.0; v];
        let mut out = vec![0.0; v];
        for j in 0..k {
            col.iter_mut().zip(s.beta_conc.column(j)).for_each(|(c, b)| *c = *b);
            dirichlet_expect_log(&col, &mut out);
            s.elog_beta.column_mut(j).iter_mut().zip(&out).for_each(|(o, b)| *o = *b);
        }
    }

    fn update_resp(&self, s: &mut State) {
        let k = self.k;
        let mut logits = vec![0.0; k];
        for (c, &(d, v, _)) in self.cells.iter().enumerate() {
            for j in 0..k {
                logits[j] = s.elog_theta[[d, j]] + s.elog_beta[[v, j]];
            }
            softmax_into(&logits, &mut s.resp[c * k..(c + 1) * k]);
        }
    }

    fn update_globals(&self, s: &mut State) {
        let k = self.k;
        for (i, mut row) in s.theta_conc.rows_mut().into_iter().enumerate() {
            let _ = i;
            row.iter_mut().zip(&self.alpha).for_each(|(o, a)| *o = *a);
        }
        for (w, mut row) in s.beta_conc.rows_mut().into_iter().enumerate() {
            row.fill(self.gamma[w]);
        }
        for (c, &(d, v, n)) in self.cells.iter().enumerate() {
            for j in 0..k {
                let m = n as f64 * s.resp[c * k + j];
                s.theta_conc[[d, j]] += m;
                s.beta_conc[[v, j]] += m;
            }
        }
    }

    fn elbo(&self, s: &State) -> f64 {
        let k = self.k;
        let mut total = self.log_coef;
        for (c, &(d, v, n)) in self.cells.iter().enumerate() {
            let mut cell = 0.0;
            for j in 0..k {
                let r = s.resp[c * k + j];
                if r > 0.0 {
                    cell += r * (s.elog_theta[[d, j]] + s.elog_beta[[v, j]] - r.ln());
                }
            }
            total += n as f64 * cell;
        }
        for (i, row) in s.theta_conc.rows().into_iter().enumerate() {
            let elog: Vec<f64> = s.elog_theta.row(i).to_vec();
            total += dirichlet_kl_terms(&self.alpha, row.as_slice().expect("contiguous"), &elog);
        }
        for j in 0..k {
            let post: Vec<f64> = s.beta_conc.column(j).to_vec();
            let elog: Vec<f64> = s.elog_beta.column(j).to_vec();
            total += dirichlet_kl_terms(&self.gamma, &post, &elog);
        }
        total
    }

    fn run(&self, opts: &CaviOptions, restart: usize, rng: &mut Rng) -> Result<LdaFit> {
        let (d, v) = self.x.counts().dim();
        let k = self.k;
        let mut s = State {
            theta_conc: Array2::zeros((d, k)),
            beta_conc: Array2::zeros((v, k)),
            resp: vec![0.0; self.cells.len() * k],
            elog_theta: Array2::zeros((d, k)),
            elog_beta: Array2::zeros((v, k)),
        };
        let mut noise = vec![0.0; k];
        for c in 0..self.cells.len() {
            noise.iter_mut().for_each(|z| *z = INIT_NOISE_SD * rng.standard_normal());
            softmax_into(&noise, &mut s.resp[c * k..(c + 1) * k]);
        }
        self.update_globals(&mut s);
        self.refresh_expectations(&mut s);
        let mut trace = vec![self.elbo(&s)];
        check_finite(trace[0], 0)?;
        let mut converged = false;
        for iter in 1..=opts.max_iters {
            self.update_resp(&mut s);
            self.update_globals(&mut s);
            self.refresh_expectations(&mut s);
            let e = self.elbo(&s);
            check_finite(e, iter)?;
            let prev = *trace.last().expect("nonempty");
            trace.push(e);
            if ((e - prev) / prev.abs().max(1e-300)).abs() < opts.tol {
                converged = true;
                break;
            }
        }
        Ok(LdaFit {
            theta_conc: s.theta_conc,
            beta_conc: s.beta_conc,
            resp: s.resp,
            cells: self.cells.clone(),
            elbo_trace: trace,
            converged,
            restart,
            alpha: Concentration::Vector(self.alpha.clone()),
            gamma: Concentration::Vector(self.gamma.clone()),
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

/// Coordinate-ascent variational inference for LDA. Restarts run in
/// parallel; the restart with the highest final ELBO is returned.
pub fn fit_lda_cavi(
    x: &CountMatrix,
    k: usize,
    alpha: &Concentration,
    gamma: &Concentration,
    opts: &CaviOptions,
) -> Result<LdaFit> {
    opts.validate()?;
    if k == 0 {
        return Err(Error::config("K must be at least 1"));
    }
    let tokens = x.total();
    if k as u64 > tokens {
        return Err(Error::config(format!("K = {k} exceeds the {tokens} tokens in the data")));
    }
    let log_coef = library_sizes(x)
        .iter()
        .map(|&n| ln_factorial(n))
        .sum::<f64>()
        - x.counts().iter().map(|&c| ln_factorial(c)).sum::<f64>();
    let problem = Problem {
        x,
        k,
        alpha: alpha.expand(k)?,
        gamma: gamma.expand(x.features())?,
        cells: nonzero_cells(x),
        log_coef,
    };
    let root = Rng::new(opts.seed);
    let fits = run_chains(opts.restarts, |r| problem.run(opts, r, &mut root.split(r as u64)));
    let mut best: Option<LdaFit> = None;
    for fit in fits {
        let fit = fit?;
        if best.as_ref().is_none_or(|b| fit.elbo() > b.elbo()) {
            best = Some(fit);
        }
    }
    Ok(best.expect("at least one restart"))
}

impl LdaFit {
    pub fn elbo(&self) -> f64 {
        *self.elbo_trace.last().expect("trace starts at initialization")
    }

    pub fn iterations(&self) -> usize {
        self.elbo_trace.len() - 1
    }

    pub fn topics(&self) -> usize {
        self.beta_conc.ncols()
    }

    /// Variational posterior means.
    pub fn point_params(&self) -> LdaParams {
        let mut theta = self.theta_conc.clone();
        for mut row in theta.rows_mut() {
            let s = row.sum();
            row.mapv_inplace(|x| x / s);
        }
        let mut beta = self.beta_conc.clone();
        for mut col in beta.columns_mut() {
            let s = col.sum();
            col.mapv_inplace(|x| x / s);
        }
        LdaParams {
            theta,
            beta,
            alpha: self.alpha.clone(),
            gamma: self.gamma.clone(),
        }
    }

    /// Independent draws of `(theta, beta)` from the variational factors.
    pub fn sample_posterior(&self, draws: usize, seed: u64) -> Result<PosteriorSamples> {
        let (d, k) = self.theta_conc.dim();
        let v = self.beta_conc.nrows();
        let mut rng = Rng::new(seed);
        let mut trace = Trace::new();
        trace
            .declare("theta", vec![d, k], TopicRole::Axis(1))
            .declare("beta", vec![v, k], TopicRole::Axis(1));
        let mut theta = vec![0.0; d * k];
        let mut beta = vec![0.0; v * k];
        let mut col = vec![0.0; v];
        let mut out = vec![0.0; v];
        for _ in 0..draws {
            for i in 0..d {
                let conc: Vec<f64> = self.theta_conc.row(i).to_vec();
                numeric::dirichlet_into(&conc, &mut rng, &mut theta[i * k..(i + 1) * k]);
            }
            for j in 0..k {
                col.iter_mut().zip(self.beta_conc.column(j)).for_each(|(c, b)| *c = *b);
                numeric::dirichlet_into(&col, &mut rng, &mut out);
                for w in 0..v {
                    beta[w * k + j] = out[w];
                }
            }
            trace.push("theta", &theta);
            trace.push("beta", &beta);
            trace.end_draw();
        }
        let mut meta = SampleMeta {
            model: "lda".into(),
            method: "vb".into(),
            seed,
            iters: self.iterations(),
            ..Default::default()
        };
        meta.extra.insert("elbo".into(), self.elbo().into());
        meta.extra.insert("converged".into(), self.converged.into());
        if !self.converged {
            meta.warnings.push(format!("CAVI stopped after {} iterations without converging", self.iterations()));
        }
        PosteriorSamples::from_traces(meta, vec![trace])
    }
}

impl PointEstimate for LdaFit {
    fn theta(&self) -> Array2<f64> {
        self.point_params().theta
    }

    fn beta(&self) -> Array2<f64> {
        self.point_params().beta
    }

    fn model(&self) -> &'static str {
        "lda"
    }
}

/// Parametric bootstrap around a variational fit: replicates keep the
/// observed library sizes and are refit with the same settings.
pub fn bootstrap_lda(
    x: &CountMatrix,
    k: usize,
    alpha: &Concentration,
    gamma: &Concentration,
    cavi: &CaviOptions,
    opts: &BootstrapOptions,
) -> Result<PosteriorSamples> {
    let fit = fit_lda_cavi(x, k, alpha, gamma, cavi)?;
    let point = fit.point_params();
    let totals = library_sizes(x);
    parametric_bootstrap(
        &fit,
        |_, rng| {
            let mut counts = Array2::zeros(x.counts().dim());
            for (d, &n) in totals.iter().enumerate() {
                let row = numeric::multinomial(n, &point.mixture(d), rng);
                counts.row_mut(d).iter_mut().zip(row).for_each(|(o, c)| *o = c);
            }
            x.with_counts(counts)
        },
        |data, seed| fit_lda_cavi(data, k, alpha, gamma, &CaviOptions { seed, ..cavi.clone() }),
        opts,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::ELBO_SLACK;
    use crate::lda::simulate_lda;
    use ndarray::array;

    #[test]
    fn single_topic_is_exact_after_one_iteration() {
        let x = CountMatrix::from_counts(array![[4, 1, 0], [2, 2, 6]]);
        let opts = CaviOptions {
            max_iters: 1,
            restarts: 1,
            ..Default::default()
        };
        let fit = fit_lda_cavi(&x, 1, &1.0.into(), &0.5.into(), &opts).unwrap();
        assert_eq!(fit.beta_conc.column(0).to_vec(), vec![6.5, 3.5, 6.5]);
        assert_eq!(fit.theta_conc.column(0).to_vec(), vec![6.0, 11.0]);
    }

    #[test]
    fn elbo_never_decreases() {
        for seed in 0..20u64 {
            let mut rng = Rng::new(1000 + seed);
            let d = 3 + (seed as usize % 5);
            let v = 4 + (seed as usize % 7);
            let k = 2 + (seed as usize % 3);
            let (x, _) = simulate_lda(d, v, k, &vec![40; d], &0.5.into(), &0.5.into(), &mut rng).unwrap();
            let opts = CaviOptions {
                max_iters: 200,
                tol: 0.0,
                seed,
                restarts: 1,
            };
            let fit = fit_lda_cavi(&x, k, &0.5.into(), &0.5.into(), &opts).unwrap();
            for w in fit.elbo_trace.windows(2) {
                assert!(w[1] - w[0] >= -ELBO_SLACK, "seed {seed}: {} -> {}", w[0], w[1]);
            }
            assert!(fit.elbo() >= fit.elbo_trace[0]);
        }
    }

    #[test]
    fn elbo_bounds_the_evidence_for_one_topic() {
        // With K = 1 the evidence is a Dirichlet-multinomial and the bound is tight.
        let x = CountMatrix::from_counts(array![[3, 1]]);
        let fit = fit_lda_cavi(&x, 1, &1.0.into(), &1.0.into(), &CaviOptions::default()).unwrap();
        // log [ 4!/(3!1!) * B(4, 2) / B(1, 1) ] = log(4 * 1/20)
        assert!((fit.elbo() - (0.2f64).ln()).abs() < 1e-12, "{}", fit.elbo());
    }

    #[test]
    fn restarts_are_reproducible() {
        let mut rng = Rng::new(5);
        let (x, _) = simulate_lda(10, 20, 2, &[100; 10], &1.0.into(), &1.0.into(), &mut rng).unwrap();
        let opts = CaviOptions {
            seed: 4,
            ..Default::default()
        };
        let a = fit_lda_cavi(&x, 2, &1.0.into(), &1.0.into(), &opts).unwrap();
        let b = fit_lda_cavi(&x, 2, &1.0.into(), &1.0.into(), &opts).unwrap();
        assert_eq!(a, b);
        let s = a.sample_posterior(20, 1).unwrap();
        assert_eq!(s.total_draws(), 20);
        assert_eq!(s.meta.method, "vb");
    }
}
