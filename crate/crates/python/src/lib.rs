//! Python bindings: count matrices, posterior samples and the
//! simulate / fit / align / predictive-check operations.

use pyo3::prelude::*;

#[pymodule]
pub mod plvm_py {
    use std::path::PathBuf;

    use ndarray::Array2;
    use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
    use pyo3::prelude::*;

    use plvm::cli::config::resolve;
    use plvm::cli::{fit_config, simulate_dataset, SimSpec, SEED_ENV};
    use plvm::corpus::{read_counts, write_counts};
    use plvm::inference::{diagnostics, median_matrix};
    use plvm::numeric::Rng;
    use plvm::ppc::{draw_posterior_predictive, ModelKind};
    use plvm::Error;

    fn py_err(e: Error) -> PyErr {
        match e {
            Error::Io(_) => PyIOError::new_err(e.to_string()),
            e if e.is_numerical() => PyRuntimeError::new_err(e.to_string()),
            e => PyValueError::new_err(e.to_string()),
        }
    }

    /// Samples by features table of nonnegative counts.
    #[pyclass(frozen, skip_from_py_object, module = "plvm_py")]
    #[derive(Clone)]
    pub struct CountMatrix {
        pub inner: plvm::corpus::CountMatrix,
    }

    #[pymethods]
    impl CountMatrix {
        #[new]
        #[pyo3(signature = (counts, sample_ids=None, feature_ids=None, times=None))]
        fn new(
            counts: Vec<Vec<u64>>,
            sample_ids: Option<Vec<String>>,
            feature_ids: Option<Vec<String>>,
            times: Option<Vec<f64>>,
        ) -> PyResult<Self> {
            let d = counts.len();
            let v = counts.first().map_or(0, Vec::len);
            if counts.iter().any(|r| r.len() != v) {
                return Err(PyValueError::new_err("rows have different lengths"));
            }
            let flat: Vec<u64> = counts.into_iter().flatten().collect();
            let a = Array2::from_shape_vec((d, v), flat).map_err(|e| PyValueError::new_err(e.to_string()))?;
            let mut x = match (sample_ids, feature_ids) {
                (None, None) => plvm::corpus::CountMatrix::from_counts(a),
                (s, f) => {
                    let s = s.unwrap_or_else(|| (0..d).map(|i| format!("s{i}")).collect());
                    let f = f.unwrap_or_else(|| (0..v).map(|j| format!("f{j}")).collect());
                    plvm::corpus::CountMatrix::new(a, s, f).map_err(py_err)?
                }
            };
            if let Some(t) = times {
                x = x.with_times(t).map_err(py_err)?;
            }
            Ok(CountMatrix { inner: x })
        }

        #[staticmethod]
        #[pyo3(signature = (path, sample_meta=None, taxonomy=None))]
        fn read_csv(path: PathBuf, sample_meta: Option<PathBuf>, taxonomy: Option<PathBuf>) -> PyResult<Self> {
            let inner = read_counts(&path, sample_meta.as_deref(), taxonomy.as_deref()).map_err(py_err)?;
            Ok(CountMatrix { inner })
        }

        /// Writes the counts and any metadata tables; returns the paths.
        fn write_csv(&self, path: PathBuf) -> PyResult<Vec<PathBuf>> {
            write_counts(&self.inner, &path).map_err(py_err)
        }

        #[getter]
        fn shape(&self) -> (usize, usize) {
            self.inner.counts().dim()
        }

        #[getter]
        fn counts(&self) -> Vec<Vec<u64>> {
            self.inner.counts().rows().into_iter().map(|r| r.to_vec()).collect()
        }

        #[getter]
        fn sample_ids(&self) -> Vec<String> {
            self.inner.sample_ids().to_vec()
        }

        #[getter]
        fn feature_ids(&self) -> Vec<String> {
            self.inner.feature_ids().to_vec()
        }

        #[getter]
        fn times(&self) -> Option<Vec<f64>> {
            self.inner.times().map(<[f64]>::to_vec)
        }

        fn total(&self) -> u64 {
            self.inner.total()
        }

        fn __repr__(&self) -> String {
            let (d, v) = self.shape();
            format!("CountMatrix({d} samples x {v} features)")
        }
    }

    /// Draws of every model parameter, per chain.
    #[pyclass(frozen, skip_from_py_object, module = "plvm_py")]
    #[derive(Clone)]
    pub struct PosteriorSamples {
        pub inner: plvm::inference::PosteriorSamples,
    }

    #[pymethods]
    impl PosteriorSamples {
        #[staticmethod]
        fn read(path: PathBuf) -> PyResult<Self> {
            let inner = plvm::inference::PosteriorSamples::read(&path).map_err(py_err)?;
            Ok(PosteriorSamples { inner })
        }

        fn write(&self, path: PathBuf) -> PyResult<()> {
            self.inner.write(&path).map_err(py_err)
        }

        fn names(&self) -> Vec<String> {
            self.inner.names().map(str::to_string).collect()
        }

        fn shape(&self, name: &str) -> PyResult<Vec<usize>> {
            Ok(self.inner.require(name).map_err(py_err)?.spec.shape.clone())
        }

        /// Every draw of `name`, chains concatenated, each flattened in
        /// row-major order.
        fn draws(&self, name: &str) -> PyResult<Vec<Vec<f64>>> {
            let p = self.inner.require(name).map_err(py_err)?;
            Ok(p.positions().map(|(c, i)| p.draw(c, i).to_vec()).collect())
        }

        /// Elementwise posterior median of a matrix parameter.
        fn median(&self, name: &str) -> PyResult<Vec<Vec<f64>>> {
            let m = median_matrix(&self.inner, name).map_err(py_err)?;
            Ok(m.rows().into_iter().map(|r| r.to_vec()).collect())
        }

        /// `(param, index, rhat, ess, degenerate)` for every scalar.
        fn diagnostics(&self) -> PyResult<Vec<(String, Vec<usize>, f64, f64, bool)>> {
            let d = diagnostics(&self.inner).map_err(py_err)?;
            Ok(d.into_iter().map(|d| (d.param, d.index, d.rhat, d.ess, d.degenerate)).collect())
        }

        #[getter]
        fn chains(&self) -> usize {
            self.inner.chains()
        }

        #[getter]
        fn total_draws(&self) -> usize {
            self.inner.total_draws()
        }

        #[getter]
        fn model(&self) -> String {
            self.inner.meta.model.clone()
        }

        /// Run metadata as a JSON string.
        #[getter]
        fn meta(&self) -> PyResult<String> {
            serde_json::to_string(&self.inner.meta).map_err(|e| PyValueError::new_err(e.to_string()))
        }

        fn __repr__(&self) -> String {
            format!(
                "PosteriorSamples(model={}, method={}, chains={}, draws={})",
                self.inner.meta.model,
                self.inner.meta.method,
                self.inner.chains(),
                self.inner.total_draws()
            )
        }
    }

    /// Simulates counts; returns them with the true parameters.
    #[pyfunction]
    #[pyo3(signature = (model, seed, d=20, v=50, k=2, n=1000, alpha=1.0, gamma=1.0, p0=0.0, sigma0_sq=1.0))]
    #[allow(clippy::too_many_arguments)]
    fn simulate(
        model: &str,
        seed: u64,
        d: usize,
        v: usize,
        k: usize,
        n: u64,
        alpha: f64,
        gamma: f64,
        p0: f64,
        sigma0_sq: f64,
    ) -> PyResult<(CountMatrix, PosteriorSamples)> {
        let model: ModelKind = model.parse().map_err(py_err)?;
        let spec = SimSpec {
            d,
            v,
            k,
            n,
            alpha,
            gamma,
            p0,
            sigma0_sq,
            ..SimSpec::new(model)
        };
        let (x, truth) = simulate_dataset(&spec, seed).map_err(py_err)?;
        Ok((CountMatrix { inner: x }, PosteriorSamples { inner: truth }))
    }

    /// Fits a model. `config` is a JSON object with the same keys as a
    /// `plvm fit` config file; the seed falls back to PLVM_SEED.
    #[pyfunction]
    fn fit(py: Python<'_>, counts: &CountMatrix, config: &str) -> PyResult<PosteriorSamples> {
        let map: serde_json::Map<String, serde_json::Value> =
            serde_json::from_str(config).map_err(|e| PyValueError::new_err(format!("config is not a JSON object: {e}")))?;
        let env_seed = std::env::var(SEED_ENV).ok();
        let cfg = resolve(&map, env_seed.as_deref()).map_err(py_err)?;
        let x = &counts.inner;
        let inner = py.detach(|| fit_config(&cfg, x)).map_err(py_err)?;
        Ok(PosteriorSamples { inner })
    }

    /// Replicate datasets from the posterior predictive distribution.
    #[pyfunction]
    fn posterior_predictive(
        py: Python<'_>,
        counts: &CountMatrix,
        posterior: &PosteriorSamples,
        replicates: usize,
        seed: u64,
    ) -> PyResult<Vec<CountMatrix>> {
        let reps = py
            .detach(|| draw_posterior_predictive(&counts.inner, &posterior.inner, replicates, &Rng::new(seed)))
            .map_err(py_err)?;
        Ok(reps.into_iter().map(|inner| CountMatrix { inner }).collect())
    }

    /// Standard checks (means, variances, histogram, quantiles, PCA
    /// eigenvalues, time series) as `(statistic, keys, observed, replicates)`.
    #[pyfunction]
    #[pyo3(signature = (counts, posterior, replicates, seed, components=5, pca_features=100, series=4))]
    #[allow(clippy::type_complexity, clippy::too_many_arguments)]
    fn ppc(
        py: Python<'_>,
        counts: &CountMatrix,
        posterior: &PosteriorSamples,
        replicates: usize,
        seed: u64,
        components: usize,
        pca_features: usize,
        series: usize,
    ) -> PyResult<Vec<(String, Vec<(String, String)>, Vec<f64>, Vec<Vec<f64>>)>> {
        let reports = py
            .detach(|| {
                let reps = draw_posterior_predictive(&counts.inner, &posterior.inner, replicates, &Rng::new(seed))?;
                plvm::cli::standard_checks(&counts.inner, &reps, components, pca_features, series)
            })
            .map_err(py_err)?;
        Ok(reports
            .into_iter()
            .map(|r| (r.statistic, r.keys, r.observed, r.replicates))
            .collect())
    }

    /// Aligns each draw's topics to the median topics of `reference`.
    #[pyfunction]
    fn align(posterior: &PosteriorSamples, reference: &PosteriorSamples) -> PyResult<PosteriorSamples> {
        let inner = plvm::align::align_fit(&reference.inner, &posterior.inner).map_err(py_err)?;
        Ok(PosteriorSamples { inner })
    }

    #[pyfunction]
    fn log_sum_exp(values: Vec<f64>) -> f64 {
        plvm::numeric::log_sum_exp(&values)
    }

    #[pyfunction]
    fn softmax(values: Vec<f64>) -> PyResult<Vec<f64>> {
        Ok(plvm::numeric::softmax(&values).map_err(py_err)?.into())
    }
}
