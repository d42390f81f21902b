//! Dirichlet-multinomial mixture: every sample draws all of its counts from
//! a single topic.

use ndarray::Array2;
use statrs::function::gamma::ln_gamma;

use super::{check_dims, draw_topics, Concentration};
use crate::corpus::{library_sizes, CountMatrix};
use crate::error::{Error, Result};
use crate::inference::{run_chains, GibbsOptions, PosteriorSamples, SampleMeta, TopicRole, Trace};
use crate::numeric::{self, ProbVector, Rng};

#[derive(Clone, Debug, PartialEq)]
pub struct DmmParams {
    /// Topic label of each sample, 0-based.
    pub z: Vec<usize>,
    pub theta: ProbVector,
    pub beta: Array2<f64>,
    pub gamma: Concentration,
}

/// `beta_k ~ Dir(gamma)`, `z_d ~ Cat(theta)`, `x_d ~ Mult(N_d, beta_{z_d})`.
pub fn simulate_dmm(
    d: usize,
    v: usize,
    k: usize,
    totals: &[u64],
    theta: &[f64],
    gamma: &Concentration,
    rng: &mut Rng,
) -> Result<(CountMatrix, DmmParams)> {
    check_dims(d, v, k)?;
    let theta = ProbVector::new(theta.to_vec())?;
    if theta.len() != k {
        return Err(Error::domain(format!("theta has {} entries, expected {k}", theta.len())));
    }
    if totals.len() != d {
        return Err(Error::shape(format!("{} totals for {d} samples", totals.len())));
    }
    let g = gamma.expand(v)?;
    let beta = draw_topics(v, k, &g, rng);
    let mut z = Vec::with_capacity(d);
    let mut counts = Array2::zeros((d, v));
    let mut p = vec![0.0; v];
    for i in 0..d {
        let label = numeric::categorical(theta.as_slice(), rng);
        p.iter_mut().zip(beta.column(label)).for_each(|(o, b)| *o = *b);
        let x = numeric::multinomial(totals[i], &p, rng);
        counts.row_mut(i).iter_mut().zip(x).for_each(|(o, c)| *o = c);
        z.push(label);
    }
    let params = DmmParams {
        z,
        theta,
        beta,
        gamma: gamma.clone(),
    };
    Ok((CountMatrix::from_counts(counts), params))
}

/// Collapsed state: labels plus the counts they induce.
struct DmmState<'a> {
    x: &'a CountMatrix,
    totals: Vec<u64>,
    /// Nonzero (v, count) pairs per sample.
    rows: Vec<Vec<(usize, u64)>>,
    gamma: Vec<f64>,
    gamma_sum: f64,
    z: Vec<usize>,
    members: Vec<u64>,
    word_topic: Array2<u64>,
    topic_total: Vec<u64>,
    /// Conditional label probabilities from the latest sweep, D×K.
    membership: Array2<f64>,
}

impl<'a> DmmState<'a> {
    fn new(x: &'a CountMatrix, k: usize, gamma: Vec<f64>, rng: &mut Rng) -> Self {
        let (d, v) = x.counts().dim();
        let rows = (0..d)
            .map(|i| {
                x.row(i)
                    .iter()
                    .enumerate()
                    .filter(|(_, &c)| c > 0)
                    .map(|(w, &c)| (w, c))
                    .collect()
            })
            .collect();
        let mut s = DmmState {
            x,
            totals: library_sizes(x),
            rows,
            gamma_sum: gamma.iter().sum(),
            gamma,
            z: vec![0; d],
            members: vec![0; k],
            word_topic: Array2::zeros((v, k)),
            topic_total: vec![0; k],
            membership: Array2::zeros((d, k)),
        };
        let uniform = vec![1.0; k];
        for i in 0..d {
            let label = numeric::categorical(&uniform, rng);
            s.z[i] = label;
            s.add(i, label);
        }
        s
    }

    fn add(&mut self, i: usize, k: usize) {
        self.members[k] += 1;
        self.topic_total[k] += self.totals[i];
        for &(w, c) in &self.rows[i] {
            self.word_topic[[w, k]] += c;
        }
    }

    fn remove(&mut self, i: usize, k: usize) {
        self.members[k] -= 1;
        self.topic_total[k] -= self.totals[i];
        for &(w, c) in &self.rows[i] {
            self.word_topic[[w, k]] -= c;
        }
    }

    fn sweep(&mut self, rng: &mut Rng) {
        let k = self.members.len();
        let mut logw = vec![0.0; k];
        let mut probs = vec![0.0; k];
        for i in 0..self.z.len() {
            self.remove(i, self.z[i]);
            let n_d = self.totals[i] as f64;
            for (j, lw) in logw.iter_mut().enumerate() {
                let n_k = self.topic_total[j] as f64;
                let mut acc = (self.members[j] as f64 + 1.0).ln() + ln_gamma(n_k + self.gamma_sum)
                    - ln_gamma(n_k + n_d + self.gamma_sum);
                for &(w, c) in &self.rows[i] {
                    let base = self.word_topic[[w, j]] as f64 + self.gamma[w];
                    acc += ln_gamma(base + c as f64) - ln_gamma(base);
                }
                *lw = acc;
            }
            numeric::softmax_into(&logw, &mut probs);
            self.membership.row_mut(i).iter_mut().zip(&probs).for_each(|(o, p)| *o = *p);
            let label = numeric::categorical(&probs, rng);
            self.z[i] = label;
            self.add(i, label);
        }
    }

    fn sample_params(&self, rng: &mut Rng) -> (Vec<f64>, Array2<f64>) {
        let k = self.members.len();
        let conc: Vec<f64> = self.members.iter().map(|&m| m as f64 + 1.0).collect();
        let theta = numeric::dirichlet(&conc, rng);
        let v = self.x.features();
        let mut beta = Array2::zeros((v, k));
        let mut conc = vec![0.0; v];
        for j in 0..k {
            for w in 0..v {
                conc[w] = self.gamma[w] + self.word_topic[[w, j]] as f64;
            }
            let draw = numeric::dirichlet(&conc, rng);
            beta.column_mut(j).iter_mut().zip(draw).for_each(|(o, b)| *o = b);
        }
        (theta, beta)
    }
}

/// Collapsed Gibbs for the mixture, with `theta ~ Dir(1)` and `beta_k ~ Dir(gamma)`
/// integrated out. Each retained sweep stores `z` (labels), `theta`, `beta` and
/// `membership`, the label probabilities each sample was drawn from.
pub fn fit_dmm_gibbs(x: &CountMatrix, k: usize, gamma: &Concentration, opts: &GibbsOptions) -> Result<PosteriorSamples> {
    opts.validate()?;
    if k == 0 {
        return Err(Error::config("K must be at least 1"));
    }
    let tokens = x.total();
    if k as u64 > tokens {
        return Err(Error::config(format!("K = {k} exceeds the {tokens} tokens in the data")));
    }
    let g = gamma.expand(x.features())?;
    let (d, v) = x.counts().dim();
    let root = Rng::new(opts.seed);
    let traces = run_chains(opts.chains, |chain| {
        let mut rng = root.split(chain as u64);
        let mut state = DmmState::new(x, k, g.clone(), &mut rng);
        let mut trace = Trace::new();
        trace
            .declare("z", vec![d], TopicRole::Labels)
            .declare("theta", vec![k], TopicRole::Axis(0))
            .declare("beta", vec![v, k], TopicRole::Axis(1))
            .declare("membership", vec![d, k], TopicRole::Axis(1));
        let mut labels = vec![0.0; d];
        for iter in 0..opts.iters {
            state.sweep(&mut rng);
            if opts.keeps(iter) {
                let (theta, beta) = state.sample_params(&mut rng);
                labels.iter_mut().zip(&state.z).for_each(|(o, &z)| *o = z as f64);
                trace.push("z", &labels);
                trace.push("theta", &theta);
                trace.push("beta", beta.as_slice().expect("standard layout"));
                trace.push("membership", state.membership.as_slice().expect("standard layout"));
                trace.end_draw();
            }
        }
        trace
    });
    let meta = SampleMeta {
        model: "dmm".into(),
        method: "gibbs".into(),
        seed: opts.seed,
        warmup: opts.warmup,
        iters: opts.iters,
        ..Default::default()
    };
    PosteriorSamples::from_traces(meta, traces)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::mean_matrix;
    use ndarray::array;

    fn opts(iters: usize, warmup: usize, seed: u64) -> GibbsOptions {
        GibbsOptions {
            iters,
            warmup,
            thin: 1,
            chains: 2,
            seed,
        }
    }

    /// Exact posterior over all K^D label vectors.
    fn exact_posterior(x: &Array2<u64>, k: usize, gamma: f64) -> Vec<(Vec<usize>, f64)> {
        let (d, v) = x.dim();
        let configs = k.pow(d as u32);
        let mut out = Vec::with_capacity(configs);
        for code in 0..configs {
            let z: Vec<usize> = (0..d).map(|i| code / k.pow(i as u32) % k).collect();
            let mut lp = 0.0;
            for j in 0..k {
                let m = z.iter().filter(|&&l| l == j).count() as f64;
                lp += ln_gamma(m + 1.0);
                let mut n_k = 0.0;
                for w in 0..v {
                    let n: u64 = (0..d).filter(|&i| z[i] == j).map(|i| x[[i, w]]).sum();
                    lp += ln_gamma(n as f64 + gamma) - ln_gamma(gamma);
                    n_k += n as f64;
                }
                lp += ln_gamma(v as f64 * gamma) - ln_gamma(n_k + v as f64 * gamma);
            }
            out.push((z, lp));
        }
        let logs: Vec<f64> = out.iter().map(|(_, lp)| *lp).collect();
        let norm = numeric::log_sum_exp(&logs);
        out.into_iter().map(|(z, lp)| (z, (lp - norm).exp())).collect()
    }

    fn exact_membership(x: &Array2<u64>, k: usize, gamma: f64) -> Array2<f64> {
        let mut out = Array2::zeros((x.nrows(), k));
        for (z, p) in exact_posterior(x, k, gamma) {
            for (i, &l) in z.iter().enumerate() {
                out[[i, l]] += p;
            }
        }
        out
    }

    fn exact_together(x: &Array2<u64>, k: usize, a: usize, b: usize) -> f64 {
        exact_posterior(x, k, 1.0)
            .iter()
            .filter(|(z, _)| z[a] == z[b])
            .map(|(_, p)| p)
            .sum()
    }

    fn sampled_together(s: &PosteriorSamples, a: usize, b: usize) -> f64 {
        let z = s.require("z").unwrap();
        let (za, zb) = (z.pooled(a), z.pooled(b));
        za.iter().zip(&zb).filter(|(p, q)| p == q).count() as f64 / za.len() as f64
    }

    #[test]
    fn point_mass_theta_gives_one_label() {
        let mut rng = Rng::new(3);
        let (_, p) = simulate_dmm(30, 5, 2, &[10; 30], &[1.0, 0.0], &1.0.into(), &mut rng).unwrap();
        assert!(p.z.iter().all(|&z| z == 0));
    }

    #[test]
    fn invalid_theta() {
        let mut rng = Rng::new(3);
        assert!(simulate_dmm(3, 5, 2, &[10; 3], &[0.7, 0.7], &1.0.into(), &mut rng).is_err());
        assert!(simulate_dmm(3, 5, 2, &[10; 3], &[1.0], &1.0.into(), &mut rng).is_err());
    }

    #[test]
    fn label_frequencies_match_theta() {
        let mut rng = Rng::new(11);
        let theta = [0.2, 0.5, 0.3];
        let n = 10_000;
        let (_, p) = simulate_dmm(n, 2, 3, &vec![0; n], &theta, &1.0.into(), &mut rng).unwrap();
        for (j, &t) in theta.iter().enumerate() {
            let freq = p.z.iter().filter(|&&z| z == j).count() as f64 / n as f64;
            let se = (t * (1.0 - t) / n as f64).sqrt();
            assert!((freq - t).abs() < 3.0 * se, "label {j}: {freq}");
        }
    }

    #[test]
    fn single_topic_memberships_are_one() {
        let x = CountMatrix::from_counts(array![[2, 1], [0, 4], [3, 3]]);
        let s = fit_dmm_gibbs(&x, 1, &1.0.into(), &opts(20, 10, 1)).unwrap();
        let m = s.require("membership").unwrap();
        assert!((0..m.size()).all(|f| m.pooled(f).iter().all(|&p| p == 1.0)));
    }

    #[test]
    fn two_sample_membership_matches_enumeration() {
        let x = array![[2, 0], [0, 2]];
        let exact = exact_membership(&x, 2, 1.0);
        let s = fit_dmm_gibbs(&CountMatrix::from_counts(x.clone()), 2, &1.0.into(), &opts(20_000, 1000, 5)).unwrap();
        let est = mean_matrix(&s, "membership").unwrap();
        for (e, g) in exact.iter().zip(est.iter()) {
            assert!((e - g).abs() < 0.02, "{exact:?} vs {est:?}");
        }
        // Marginals are 1/2 by label symmetry; co-membership is the informative check.
        let (got, want) = (sampled_together(&s, 0, 1), exact_together(&x, 2, 0, 1));
        assert!((got - want).abs() < 0.02, "{got} vs {want}");
    }

    #[test]
    fn separated_blocks_are_recovered() {
        let x = array![[6, 4, 0, 0], [5, 5, 0, 0], [0, 0, 7, 3], [0, 0, 4, 6]];
        assert!(exact_together(&x, 2, 0, 1) > 0.99 && exact_together(&x, 2, 2, 3) > 0.99);
        assert!(exact_together(&x, 2, 0, 2) < 0.01);
        let s = fit_dmm_gibbs(&CountMatrix::from_counts(x), 2, &1.0.into(), &opts(2000, 200, 9)).unwrap();
        assert!(sampled_together(&s, 0, 1) > 0.99 && sampled_together(&s, 2, 3) > 0.99);
        assert!(sampled_together(&s, 0, 2) < 0.01 && sampled_together(&s, 1, 3) < 0.01);
        // Within a draw, each sample's membership is decisive.
        let mem = s.require("membership").unwrap();
        for (c, d) in mem.positions() {
            let m = mem.draw(c, d);
            for i in 0..4 {
                assert!(m[i * 2].max(m[i * 2 + 1]) > 0.99, "{m:?}");
            }
        }
    }

    #[test]
    fn gibbs_is_reproducible() {
        let x = CountMatrix::from_counts(array![[3, 1, 0], [0, 2, 2], [1, 1, 1]]);
        let a = fit_dmm_gibbs(&x, 2, &0.5.into(), &opts(50, 10, 3)).unwrap();
        let b = fit_dmm_gibbs(&x, 2, &0.5.into(), &opts(50, 10, 3)).unwrap();
        assert_eq!(a, b);
        let z = a.require("z").unwrap();
        assert_ne!(z.chain_series(0, 0), z.chain_series(1, 0));
    }
}
