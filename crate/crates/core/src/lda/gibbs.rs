use ndarray::Array2;

use super::{nonzero_cells, Concentration};
use crate::corpus::CountMatrix;
use crate::error::{Error, Result};
use crate::inference::{run_chains, GibbsOptions, PosteriorSamples, SampleMeta, TopicRole, Trace};
use crate::numeric::{self, Rng};

/// Collapsed Gibbs state for LDA.
///
/// Token labels are held as one length-K count vector per nonzero (d, v)
/// cell rather than one label per token. A sweep makes as many updates in
/// each cell as it has tokens; each update takes out a token chosen uniformly
/// at random, relabels it from the collapsed conditional and puts it back.
#[derive(Clone, Debug)]
pub struct LdaGibbs {
    k: usize,
    alpha: Vec<f64>,
    gamma: Vec<f64>,
    gamma_sum: f64,
    cells: Vec<(usize, usize, u64)>,
    labels: Vec<u64>,
    doc_topic: Array2<u64>,
    word_topic: Array2<u64>,
    topic_total: Vec<u64>,
}

impl LdaGibbs {
    /// Starts from labels drawn uniformly at random.
    pub fn new(x: &CountMatrix, k: usize, alpha: &Concentration, gamma: &Concentration, rng: &mut Rng) -> Result<Self> {
        if k == 0 {
            return Err(Error::config("K must be at least 1"));
        }
        let tokens = x.total();
        if k as u64 > tokens {
            return Err(Error::config(format!("K = {k} exceeds the {tokens} tokens in the data")));
        }
        let alpha = alpha.expand(k)?;
        let gamma = gamma.expand(x.features())?;
        let cells = nonzero_cells(x);
        let mut labels = vec![0u64; cells.len() * k];
        let mut doc_topic = Array2::zeros((x.samples(), k));
        let mut word_topic = Array2::zeros((x.features(), k));
        let mut topic_total = vec![0u64; k];
        let uniform = vec![1.0 / k as f64; k];
        for (c, &(d, v, n)) in cells.iter().enumerate() {
            let split = numeric::multinomial(n, &uniform, rng);
            for (j, &m) in split.iter().enumerate() {
                labels[c * k + j] = m;
                doc_topic[[d, j]] += m;
                word_topic[[v, j]] += m;
                topic_total[j] += m;
            }
        }
        Ok(LdaGibbs {
            k,
            gamma_sum: gamma.iter().sum(),
            alpha,
            gamma,
            cells,
            labels,
            doc_topic,
            word_topic,
            topic_total,
        })
    }

    pub fn topics(&self) -> usize {
        self.k
    }

    /// Nonzero cells `(d, v, count)`, in the order used by [`Self::cell_labels`].
    pub fn cells(&self) -> &[(usize, usize, u64)] {
        &self.cells
    }

    /// Label counts, K per nonzero cell.
    pub fn cell_labels(&self) -> &[u64] {
        &self.labels
    }

    pub fn doc_topic(&self) -> &Array2<u64> {
        &self.doc_topic
    }

    pub fn word_topic(&self) -> &Array2<u64> {
        &self.word_topic
    }

    pub fn sweep(&mut self, rng: &mut Rng) {
        let k = self.k;
        let mut weights = vec![0.0; k];
        for c in 0..self.cells.len() {
            let (d, v, n) = self.cells[c];
            for _ in 0..n {
                // A token chosen uniformly from the cell: its label is drawn
                // in proportion to the current label counts.
                let mut pick = (rng.uniform() * n as f64) as u64;
                let mut old = 0;
                while pick >= self.labels[c * k + old] {
                    pick -= self.labels[c * k + old];
                    old += 1;
                }
                self.labels[c * k + old] -= 1;
                self.doc_topic[[d, old]] -= 1;
                self.word_topic[[v, old]] -= 1;
                self.topic_total[old] -= 1;
                for (j, w) in weights.iter_mut().enumerate() {
                    *w = (self.doc_topic[[d, j]] as f64 + self.alpha[j])
                        * (self.word_topic[[v, j]] as f64 + self.gamma[v])
                        / (self.topic_total[j] as f64 + self.gamma_sum);
                }
                let new = numeric::categorical(&weights, rng);
                self.labels[c * k + new] += 1;
                self.doc_topic[[d, new]] += 1;
                self.word_topic[[v, new]] += 1;
                self.topic_total[new] += 1;
            }
        }
    }

    /// Draws `(theta, beta)` from their Dirichlet conditionals given the
    /// current label counts.
    pub fn sample_params(&self, rng: &mut Rng) -> (Array2<f64>, Array2<f64>) {
        let (d, v) = (self.doc_topic.nrows(), self.word_topic.nrows());
        let k = self.k;
        let mut theta = Array2::zeros((d, k));
        let mut conc = vec![0.0; k];
        for i in 0..d {
            for j in 0..k {
                conc[j] = self.alpha[j] + self.doc_topic[[i, j]] as f64;
            }
            let draw = numeric::dirichlet(&conc, rng);
            theta.row_mut(i).iter_mut().zip(draw).for_each(|(o, x)| *o = x);
        }
        let mut beta = Array2::zeros((v, k));
        let mut conc = vec![0.0; v];
        for j in 0..k {
            for w in 0..v {
                conc[w] = self.gamma[w] + self.word_topic[[w, j]] as f64;
            }
            let draw = numeric::dirichlet(&conc, rng);
            beta.column_mut(j).iter_mut().zip(draw).for_each(|(o, x)| *o = x);
        }
        (theta, beta)
    }
}

/// Collapsed Gibbs sampling for LDA; chains run in parallel on split streams.
pub fn fit_lda_gibbs(
    x: &CountMatrix,
    k: usize,
    alpha: &Concentration,
    gamma: &Concentration,
    opts: &GibbsOptions,
) -> Result<PosteriorSamples> {
    opts.validate()?;
    let root = Rng::new(opts.seed);
    let (d, v) = x.counts().dim();
    let traces = run_chains(opts.chains, |chain| -> Result<Trace> {
        let mut rng = root.split(chain as u64);
        let mut state = LdaGibbs::new(x, k, alpha, gamma, &mut rng)?;
        let mut trace = Trace::new();
        trace
            .declare("theta", vec![d, k], TopicRole::Axis(1))
            .declare("beta", vec![v, k], TopicRole::Axis(1));
        for iter in 0..opts.iters {
            state.sweep(&mut rng);
            if opts.keeps(iter) {
                let (theta, beta) = state.sample_params(&mut rng);
                trace.push("theta", theta.as_slice().expect("standard layout"));
                trace.push("beta", beta.as_slice().expect("standard layout"));
                trace.end_draw();
            }
        }
        Ok(trace)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let meta = SampleMeta {
        model: "lda".into(),
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
    use ndarray::array;
    use statrs::function::gamma::ln_gamma;
    use std::collections::HashMap;

    /// Exact collapsed posterior over per-token labels, aggregated to
    /// per-cell label counts. Tokens are enumerated one by one.
    fn exact_cell_label_posterior(x: &Array2<u64>, k: usize, alpha: f64, gamma: f64) -> HashMap<Vec<u64>, f64> {
        let (d, v) = x.dim();
        let mut tokens = Vec::new();
        for i in 0..d {
            for w in 0..v {
                for _ in 0..x[[i, w]] {
                    tokens.push((i, w));
                }
            }
        }
        let cells: Vec<(usize, usize)> = {
            let mut c: Vec<_> = tokens.clone();
            c.dedup();
            c
        };
        let n = tokens.len();
        let mut out: HashMap<Vec<u64>, f64> = HashMap::new();
        let mut total = 0.0;
        for code in 0..k.pow(n as u32) {
            let mut z = vec![0; n];
            let mut rest = code;
            for zi in z.iter_mut() {
                *zi = rest % k;
                rest /= k;
            }
            let mut ndk = vec![vec![0.0; k]; d];
            let mut nvk = vec![vec![0.0; k]; v];
            let mut nk = vec![0.0; k];
            for (&(i, w), &j) in tokens.iter().zip(&z) {
                ndk[i][j] += 1.0;
                nvk[w][j] += 1.0;
                nk[j] += 1.0;
            }
            let mut lp = 0.0;
            for row in &ndk {
                let nd: f64 = row.iter().sum();
                lp += ln_gamma(k as f64 * alpha) - ln_gamma(k as f64 * alpha + nd);
                for &c in row {
                    lp += ln_gamma(alpha + c) - ln_gamma(alpha);
                }
            }
            for j in 0..k {
                lp += ln_gamma(v as f64 * gamma) - ln_gamma(v as f64 * gamma + nk[j]);
                for row in &nvk {
                    lp += ln_gamma(gamma + row[j]) - ln_gamma(gamma);
                }
            }
            let p = lp.exp();
            total += p;
            let mut key = vec![0u64; cells.len() * k];
            for (&(i, w), &j) in tokens.iter().zip(&z) {
                let c = cells.iter().position(|&cw| cw == (i, w)).unwrap();
                key[c * k + j] += 1;
            }
            *out.entry(key).or_default() += p;
        }
        out.values_mut().for_each(|p| *p /= total);
        out
    }

    fn gibbs_tv(x: Array2<u64>, sweeps: usize, seed: u64) -> f64 {
        let exact = exact_cell_label_posterior(&x, 2, 1.0, 1.0);
        let cm = CountMatrix::from_counts(x);
        let mut rng = Rng::new(seed);
        let mut s = LdaGibbs::new(&cm, 2, &1.0.into(), &1.0.into(), &mut rng).unwrap();
        let mut freq: HashMap<Vec<u64>, f64> = HashMap::new();
        for _ in 0..100 {
            s.sweep(&mut rng);
        }
        for _ in 0..sweeps {
            s.sweep(&mut rng);
            *freq.entry(s.cell_labels().to_vec()).or_default() += 1.0 / sweeps as f64;
        }
        let keys: std::collections::HashSet<_> = exact.keys().chain(freq.keys()).cloned().collect();
        0.5 * keys
            .iter()
            .map(|k| (exact.get(k).copied().unwrap_or(0.0) - freq.get(k).copied().unwrap_or(0.0)).abs())
            .sum::<f64>()
    }

    #[test]
    fn three_tokens_match_enumeration() {
        let tv = gibbs_tv(array![[3, 0]], 100_000, 5);
        assert!(tv < 0.02, "tv {tv}");
    }

    #[test]
    fn single_topic_posterior_is_conjugate() {
        let x = CountMatrix::from_counts(array![[4, 1, 0], [2, 2, 6]]);
        let opts = GibbsOptions {
            iters: 4000,
            warmup: 10,
            chains: 1,
            seed: 3,
            ..Default::default()
        };
        let s = fit_lda_gibbs(&x, 1, &1.0.into(), &1.0.into(), &opts).unwrap();
        let beta = s.param("beta").unwrap();
        // Dir(1 + (6, 3, 6)): mean a_v / 18, var a_v (18 - a_v) / (18^2 * 19)
        for (v, a) in [7.0f64, 4.0, 7.0].into_iter().enumerate() {
            let draws = beta.pooled(v);
            let mean = draws.iter().sum::<f64>() / draws.len() as f64;
            let sd = (a * (18.0 - a) / (18.0 * 18.0 * 19.0)).sqrt();
            assert!((mean - a / 18.0).abs() < 3.0 * sd / (draws.len() as f64).sqrt(), "v{v} {mean}");
        }
    }

    #[test]
    fn chains_differ_but_reruns_match() {
        let x = CountMatrix::from_counts(array![[4, 1, 0], [0, 2, 6]]);
        let opts = GibbsOptions {
            iters: 30,
            warmup: 10,
            chains: 2,
            seed: 9,
            ..Default::default()
        };
        let a = fit_lda_gibbs(&x, 2, &1.0.into(), &1.0.into(), &opts).unwrap();
        let b = fit_lda_gibbs(&x, 2, &1.0.into(), &1.0.into(), &opts).unwrap();
        assert_eq!(a, b);
        let beta = a.param("beta").unwrap();
        assert_ne!(beta.draw(0, 0), beta.draw(1, 0));
    }

    #[test]
    fn draws_stay_on_simplex() {
        let x = CountMatrix::from_counts(array![[4, 1, 0, 3], [0, 2, 6, 1], [9, 0, 0, 1]]);
        let opts = GibbsOptions {
            iters: 50,
            warmup: 10,
            chains: 1,
            ..Default::default()
        };
        let s = fit_lda_gibbs(&x, 3, &0.5.into(), &0.1.into(), &opts).unwrap();
        for (c, d) in s.param("theta").unwrap().positions() {
            let theta = s.param("theta").unwrap().matrix(c, d).unwrap();
            for row in theta.rows() {
                assert!((row.sum() - 1.0).abs() < 1e-12);
            }
            let beta = s.param("beta").unwrap().matrix(c, d).unwrap();
            for col in beta.columns() {
                assert!((col.sum() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn too_many_topics() {
        let x = CountMatrix::from_counts(array![[1, 1]]);
        let err = fit_lda_gibbs(&x, 3, &1.0.into(), &1.0.into(), &GibbsOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        let bad = GibbsOptions {
            iters: 5,
            warmup: 5,
            ..Default::default()
        };
        assert!(fit_lda_gibbs(&x, 1, &1.0.into(), &1.0.into(), &bad).is_err());
    }
}
