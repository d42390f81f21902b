//! Posterior sample store, summaries, convergence diagnostics and the
//! parametric bootstrap.

mod bootstrap;
mod diagnostics;
mod samples;
mod summary;

use serde::{Deserialize, Serialize};

pub use bootstrap::{parametric_bootstrap, BootstrapOptions, PointEstimate};
pub use diagnostics::{diagnostics, effective_sample_size, split_rhat, Diagnostic};
pub use samples::{ParamArray, ParamSpec, PosteriorSamples, SampleMeta, TopicRole, Trace};
pub use summary::{
    mean_matrix, median, median_matrix, quantile_sorted, quantiles, sample_sd, summarize_posterior,
    ScalarSummary,
};

use crate::error::{Error, Result};

/// Settings shared by the Gibbs samplers. `iters` counts every sweep,
/// warmup included.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GibbsOptions {
    pub iters: usize,
    pub warmup: usize,
    pub thin: usize,
    pub chains: usize,
    pub seed: u64,
}

impl Default for GibbsOptions {
    fn default() -> Self {
        GibbsOptions {
            iters: 2000,
            warmup: 1000,
            thin: 1,
            chains: 4,
            seed: 0,
        }
    }
}

impl GibbsOptions {
    pub fn validate(&self) -> Result<()> {
        if self.iters <= self.warmup {
            return Err(Error::config(format!(
                "iters ({}) must exceed warmup ({})",
                self.iters, self.warmup
            )));
        }
        if self.thin == 0 || self.chains == 0 {
            return Err(Error::config("thin and chains must be positive"));
        }
        Ok(())
    }

    /// Whether sweep `iter` (0-based) emits a draw.
    pub fn keeps(&self, iter: usize) -> bool {
        iter >= self.warmup && (iter - self.warmup) % self.thin == 0
    }
}

/// Settings shared by the coordinate-ascent variational fits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CaviOptions {
    pub max_iters: usize,
    /// Stop once the relative ELBO change falls below this.
    pub tol: f64,
    pub seed: u64,
    pub restarts: usize,
}

impl Default for CaviOptions {
    fn default() -> Self {
        CaviOptions {
            max_iters: 500,
            tol: 1e-6,
            seed: 0,
            restarts: 3,
        }
    }
}

impl CaviOptions {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 || self.restarts == 0 {
            return Err(Error::config("max_iters and restarts must be positive"));
        }
        if !(self.tol >= 0.0) {
            return Err(Error::config("tol must be nonnegative"));
        }
        Ok(())
    }
}

/// Tolerance for the per-iteration ELBO monotonicity check.
pub const ELBO_SLACK: f64 = 1e-8;

/// Runs `f` once per chain index, in parallel, returning results in index order.
pub(crate) fn run_chains<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}
