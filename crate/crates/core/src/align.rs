//! Label switching and GaP scale: mapping estimates onto a reference.

use ndarray::{Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gap::GapParams;
use crate::inference::{median_matrix, ParamArray, PosteriorSamples, TopicRole};
use crate::lda::LdaParams;

/// `perm[r]` is the estimated topic matched to reference topic `r`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopicPermutation {
    pub perm: Vec<usize>,
    /// Correlation of each matched pair at the time it was selected.
    pub scores: Vec<f64>,
    /// Reference topics matched without a defined correlation (a constant column).
    #[serde(default)]
    pub flagged: Vec<usize>,
}

impl TopicPermutation {
    pub fn identity(k: usize) -> Self {
        TopicPermutation {
            perm: (0..k).collect(),
            scores: vec![1.0; k],
            flagged: Vec::new(),
        }
    }

    /// Validates that `perm` is a bijection on `0..K`.
    pub fn from_perm(perm: Vec<usize>) -> Result<Self> {
        let k = perm.len();
        let mut seen = vec![false; k];
        for &p in &perm {
            if p >= k || std::mem::replace(&mut seen[p], true) {
                return Err(Error::domain(format!("{perm:?} is not a permutation")));
            }
        }
        Ok(TopicPermutation {
            scores: vec![f64::NAN; k],
            perm,
            flagged: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.perm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perm.is_empty()
    }

    pub fn inverse(&self) -> TopicPermutation {
        let mut inv = vec![0; self.perm.len()];
        let mut scores = vec![0.0; self.perm.len()];
        for (r, &e) in self.perm.iter().enumerate() {
            inv[e] = r;
            scores[e] = self.scores[r];
        }
        TopicPermutation {
            perm: inv,
            scores,
            flagged: self.flagged.iter().map(|&r| self.perm[r]).collect(),
        }
    }

    pub fn is_identity(&self) -> bool {
        self.perm.iter().enumerate().all(|(i, &p)| i == p)
    }
}

fn sqrt_column(col: ArrayView1<'_, f64>) -> Vec<f64> {
    col.iter().map(|x| x.max(0.0).sqrt()).collect()
}

/// Pearson correlation, `None` when either input is constant.
fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return None;
    }
    Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Correlations between sqrt-transformed columns, reference by estimate.
/// Undefined correlations are `-inf`.
pub fn topic_correlations(reference: &Array2<f64>, estimated: &Array2<f64>) -> Result<Array2<f64>> {
    if reference.dim() != estimated.dim() {
        return Err(Error::shape(format!(
            "reference is {:?}, estimate {:?}",
            reference.dim(),
            estimated.dim()
        )));
    }
    let k = reference.ncols();
    let r: Vec<Vec<f64>> = reference.columns().into_iter().map(sqrt_column).collect();
    let e: Vec<Vec<f64>> = estimated.columns().into_iter().map(sqrt_column).collect();
    Ok(Array2::from_shape_fn((k, k), |(i, j)| {
        pearson(&r[i], &e[j]).unwrap_or(f64::NEG_INFINITY)
    }))
}

/// Greedy matching: repeatedly take the unmatched (reference, estimate) pair
/// with the highest correlation of sqrt-transformed columns. Ties go to the
/// smallest reference index, then the smallest estimate index.
pub fn align_topics(reference: &Array2<f64>, estimated: &Array2<f64>) -> Result<TopicPermutation> {
    let corr = topic_correlations(reference, estimated)?;
    let k = corr.nrows();
    let mut perm = vec![usize::MAX; k];
    let mut scores = vec![f64::NEG_INFINITY; k];
    let mut used = vec![false; k];
    for _ in 0..k {
        let mut best: Option<(usize, usize, f64)> = None;
        for r in (0..k).filter(|&r| perm[r] == usize::MAX) {
            for e in (0..k).filter(|&e| !used[e]) {
                let c = corr[[r, e]];
                if best.is_none_or(|(_, _, b)| c > b) {
                    best = Some((r, e, c));
                }
            }
        }
        let (r, e, c) = best.expect("an unmatched pair remains");
        perm[r] = e;
        scores[r] = c;
        used[e] = true;
    }
    let flagged = (0..k).filter(|&r| scores[r] == f64::NEG_INFINITY).collect();
    Ok(TopicPermutation { perm, scores, flagged })
}

/// Values whose topic-indexed axes can be reordered.
pub trait Alignable: Sized {
    /// Returns a copy with topic `r` taken from topic `perm.perm[r]`.
    fn aligned(&self, perm: &TopicPermutation) -> Result<Self>;
}

pub fn apply_alignment<T: Alignable>(x: &T, perm: &TopicPermutation) -> Result<T> {
    x.aligned(perm)
}

fn check_len(axis_len: usize, perm: &TopicPermutation) -> Result<()> {
    if axis_len != perm.len() {
        return Err(Error::shape(format!(
            "topic axis has length {axis_len}, permutation {}",
            perm.len()
        )));
    }
    Ok(())
}

impl Alignable for Array2<f64> {
    /// Reorders columns.
    fn aligned(&self, perm: &TopicPermutation) -> Result<Self> {
        check_len(self.ncols(), perm)?;
        Ok(self.select(Axis(1), &perm.perm))
    }
}

impl Alignable for LdaParams {
    fn aligned(&self, perm: &TopicPermutation) -> Result<Self> {
        let alpha = match &self.alpha {
            crate::lda::Concentration::Vector(a) => {
                check_len(a.len(), perm)?;
                crate::lda::Concentration::Vector(perm.perm.iter().map(|&e| a[e]).collect())
            }
            sym => sym.clone(),
        };
        Ok(LdaParams {
            theta: self.theta.aligned(perm)?,
            beta: self.beta.aligned(perm)?,
            alpha,
            gamma: self.gamma.clone(),
        })
    }
}

impl Alignable for GapParams {
    fn aligned(&self, perm: &TopicPermutation) -> Result<Self> {
        Ok(GapParams {
            theta: self.theta.aligned(perm)?,
            beta: self.beta.aligned(perm)?,
            ..self.clone()
        })
    }
}

impl Alignable for PosteriorSamples {
    fn aligned(&self, perm: &TopicPermutation) -> Result<Self> {
        let inverse = perm.inverse();
        let mut out = self.clone();
        for (name, p) in out.params_mut() {
            match p.spec.topic {
                TopicRole::None => {}
                TopicRole::Labels => {
                    let positions: Vec<_> = p.positions().collect();
                    for (c, d) in positions {
                        for v in p.draw_mut(c, d) {
                            let label = *v as usize;
                            if *v < 0.0 || label >= perm.len() {
                                return Err(Error::shape(format!("{name}: label {v} outside 0..{}", perm.len())));
                            }
                            *v = inverse.perm[label] as f64;
                        }
                    }
                }
                TopicRole::Axis(axis) => {
                    check_len(p.spec.shape[axis], perm).map_err(|e| Error::shape(format!("{name}: {e}")))?;
                    let positions: Vec<_> = p.positions().collect();
                    for (c, d) in positions {
                        permute_axis(p, (c, d), axis, perm);
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Reorders the topic axis of one draw in place.
fn permute_axis(p: &mut ParamArray, (c, d): (usize, usize), axis: usize, perm: &TopicPermutation) {
    let shape = p.spec.shape.clone();
    let inner: usize = shape[axis + 1..].iter().product();
    let k = shape[axis];
    let mut buf = vec![0.0; p.size()];
    let draw = p.draw_mut(c, d);
    for (flat, b) in buf.iter_mut().enumerate() {
        let outer = flat / (k * inner);
        let r = flat / inner % k;
        let rest = flat % inner;
        *b = draw[(outer * k + perm.perm[r]) * inner + rest];
    }
    draw.copy_from_slice(&buf);
}

/// Aligns every draw separately: the permutation for a draw matches that
/// draw's `anchor` matrix (V×K) to `reference`, and is applied to every
/// parameter with a topic axis. Label-valued parameters are not supported.
pub fn align_each_draw(s: &PosteriorSamples, reference: &Array2<f64>, anchor: &str) -> Result<PosteriorSamples> {
    let a = s.require(anchor)?;
    let perms = a
        .positions()
        .map(|(c, d)| align_topics(reference, &a.matrix(c, d)?))
        .collect::<Result<Vec<_>>>()?;
    let mut out = s.clone();
    for (name, p) in out.params_mut() {
        match p.spec.topic {
            TopicRole::None => {}
            TopicRole::Labels => {
                return Err(Error::config(format!("{name}: per-draw alignment of labels is not supported")));
            }
            TopicRole::Axis(axis) => {
                check_len(p.spec.shape[axis], &perms[0]).map_err(|e| Error::shape(format!("{name}: {e}")))?;
                let positions: Vec<_> = p.positions().collect();
                for (i, pos) in positions.into_iter().enumerate() {
                    permute_axis(p, pos, axis, &perms[i]);
                }
            }
        }
    }
    Ok(out)
}

/// Rescales every column of `beta` to sum to one and multiplies the matching
/// column of `theta` by the old column sum, so `theta beta^T` is unchanged.
/// All-zero columns are left as they are and returned in the second slot.
pub fn normalize_gap_scale(params: &GapParams) -> (GapParams, Vec<usize>) {
    let mut out = params.clone();
    let mut flagged = Vec::new();
    for k in 0..out.beta.ncols() {
        let s: f64 = out.beta.column(k).sum();
        if s > 0.0 && s.is_finite() {
            out.beta.column_mut(k).mapv_inplace(|b| b / s);
            out.theta.column_mut(k).mapv_inplace(|t| t * s);
        } else {
            flagged.push(k);
        }
    }
    (out, flagged)
}

/// [`normalize_gap_scale`] applied to every draw of `theta` and `beta`.
pub fn normalize_gap_samples(s: &PosteriorSamples) -> Result<PosteriorSamples> {
    let beta = s.require("beta")?;
    let (v, k) = (beta.spec.shape[0], beta.spec.shape[1]);
    let scales: Vec<Vec<f64>> = beta
        .positions()
        .map(|(c, d)| {
            let b = beta.draw(c, d);
            (0..k).map(|j| (0..v).map(|w| b[w * k + j]).sum()).collect()
        })
        .collect();
    let mut out = s.clone();
    for (name, p) in out.params_mut() {
        let divide = match name.as_str() {
            "beta" => true,
            "theta" => false,
            _ => continue,
        };
        let positions: Vec<_> = p.positions().collect();
        for (i, (c, d)) in positions.into_iter().enumerate() {
            for (flat, x) in p.draw_mut(c, d).iter_mut().enumerate() {
                let s = scales[i][flat % k];
                if s > 0.0 && s.is_finite() {
                    *x = if divide { *x / s } else { *x * s };
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gap::GapHyper;
    use crate::inference::{SampleMeta, Trace};
    use crate::lda::{lda_log_likelihood, simulate_lda};
    use crate::numeric;
    use crate::numeric::Rng;
    use ndarray::array;
    use proptest::prelude::*;

    fn permutations(k: usize) -> Vec<Vec<usize>> {
        if k == 0 {
            return vec![Vec::new()];
        }
        let mut out = Vec::new();
        for p in permutations(k - 1) {
            for pos in 0..=p.len() {
                let mut q = p.clone();
                q.insert(pos, k - 1);
                out.push(q);
            }
        }
        out
    }

    fn best_assignment(corr: &Array2<f64>) -> (Vec<usize>, f64, f64) {
        let k = corr.nrows();
        let mut scored: Vec<(Vec<usize>, f64)> = permutations(k)
            .into_iter()
            .map(|p| {
                let s = p.iter().enumerate().map(|(r, &e)| corr[[r, e]]).sum();
                (p, s)
            })
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1));
        let runner_up = scored.get(1).map_or(f64::NEG_INFINITY, |s| s.1);
        (scored[0].0.clone(), scored[0].1, runner_up)
    }

    fn random_topics(v: usize, k: usize, rng: &mut Rng) -> Array2<f64> {
        crate::lda::draw_topics(v, k, &vec![1.0; v], rng)
    }

    #[test]
    fn swapped_columns() {
        let b = array![[0.1, 0.6], [0.3, 0.3], [0.6, 0.1]];
        let swapped = b.select(Axis(1), &[1, 0]);
        let p = align_topics(&b, &swapped).unwrap();
        assert_eq!(p.perm, vec![1, 0]);
        assert!(p.scores.iter().all(|&s| (s - 1.0).abs() < 1e-12));
        assert!(align_topics(&b, &b).unwrap().is_identity());
    }

    #[test]
    fn constant_column_is_flagged_and_matched_last() {
        let r = array![[0.2, 0.5], [0.3, 0.5], [0.5, 0.0]];
        let e = array![[1.0 / 3.0, 0.2], [1.0 / 3.0, 0.3], [1.0 / 3.0, 0.5]];
        let p = align_topics(&r, &e).unwrap();
        assert_eq!(p.perm, vec![1, 0]);
        assert_eq!(p.flagged, vec![1]);
    }

    #[test]
    fn shape_mismatch() {
        assert!(align_topics(&Array2::zeros((3, 2)), &Array2::zeros((3, 3))).is_err());
    }

    #[test]
    fn recovers_noisy_permutations_like_exhaustive_search() {
        let mut rng = Rng::new(31);
        for trial in 0..50 {
            let b = random_topics(40, 3, &mut rng);
            let truth = permutations(3)[trial % 6].clone();
            let mut est = b.select(Axis(1), &truth);
            est.mapv_inplace(|x| (x + 0.002 * rng.standard_normal()).abs());
            let p = align_topics(&b, &est).unwrap();
            let corr = topic_correlations(&b, &est).unwrap();
            assert_eq!(p.perm, best_assignment(&corr).0);
            // est column perm[r] is reference column r
            for (r, &e) in p.perm.iter().enumerate() {
                assert_eq!(truth[e], r);
            }
        }
    }

    #[test]
    fn aligned_likelihood_is_unchanged() {
        let mut rng = Rng::new(4);
        let (x, params) = simulate_lda(8, 12, 3, &[30; 8], &1.0.into(), &1.0.into(), &mut rng).unwrap();
        let perm = TopicPermutation::from_perm(vec![2, 0, 1]).unwrap();
        let moved = apply_alignment(&params, &perm).unwrap();
        assert_eq!(
            lda_log_likelihood(&x, &params).unwrap(),
            lda_log_likelihood(&x, &moved).unwrap()
        );
        assert_eq!(apply_alignment(&moved, &perm.inverse()).unwrap(), params);
    }

    #[test]
    fn samples_round_trip_and_labels() {
        let mut trace = Trace::new();
        trace
            .declare("beta", vec![2, 3], TopicRole::Axis(1))
            .declare("w", vec![3], TopicRole::Axis(0))
            .declare("z", vec![2], TopicRole::Labels)
            .declare("s", vec![1], TopicRole::None);
        trace.push("beta", &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        trace.push("w", &[0.1, 0.2, 0.7]);
        trace.push("z", &[2.0, 0.0]);
        trace.push("s", &[9.0]);
        trace.end_draw();
        let s = PosteriorSamples::from_traces(SampleMeta::default(), vec![trace]).unwrap();
        let perm = TopicPermutation::from_perm(vec![2, 0, 1]).unwrap();
        let a = apply_alignment(&s, &perm).unwrap();
        assert_eq!(a.require("beta").unwrap().draw(0, 0), &[3.0, 1.0, 2.0, 6.0, 4.0, 5.0]);
        assert_eq!(a.require("w").unwrap().draw(0, 0), &[0.7, 0.1, 0.2]);
        // Old label 2 is new topic 0; old label 0 is new topic 1.
        assert_eq!(a.require("z").unwrap().draw(0, 0), &[0.0, 1.0]);
        assert_eq!(a.require("s").unwrap().draw(0, 0), &[9.0]);
        assert_eq!(apply_alignment(&a, &perm.inverse()).unwrap(), s);
        assert!(apply_alignment(&s, &TopicPermutation::identity(2)).is_err());
    }

    #[test]
    fn each_draw_gets_its_own_permutation() {
        let reference = array![[0.9, 0.1], [0.1, 0.9], [0.5, 0.5]];
        let mut trace = Trace::new();
        trace
            .declare("beta", vec![3, 2], TopicRole::Axis(1))
            .declare("theta", vec![1, 2], TopicRole::Axis(1));
        trace.push("beta", &[0.8, 0.2, 0.1, 0.7, 0.5, 0.4]);
        trace.push("theta", &[0.3, 0.7]);
        trace.end_draw();
        trace.push("beta", &[0.2, 0.8, 0.7, 0.1, 0.4, 0.5]);
        trace.push("theta", &[0.7, 0.3]);
        trace.end_draw();
        let s = PosteriorSamples::from_traces(SampleMeta::default(), vec![trace]).unwrap();
        let a = align_each_draw(&s, &reference, "beta").unwrap();
        let beta = a.require("beta").unwrap();
        assert_eq!(beta.draw(0, 0), beta.draw(0, 1));
        assert_eq!(a.require("theta").unwrap().draw(0, 1), &[0.3, 0.7]);
        assert!(align_each_draw(&s, &reference, "nope").is_err());
    }

    fn gap(theta: Array2<f64>, beta: Array2<f64>) -> GapParams {
        GapParams {
            theta,
            beta,
            hyper: GapHyper::default(),
            p0: 0.0,
        }
    }

    #[test]
    fn normalize_example() {
        let p = gap(array![[1.0], [3.0]], array![[2.0], [2.0]]);
        let (n, flagged) = normalize_gap_scale(&p);
        assert!(flagged.is_empty());
        assert_eq!(n.beta, array![[0.5], [0.5]]);
        assert_eq!(n.theta, array![[4.0], [12.0]]);
        let (again, _) = normalize_gap_scale(&n);
        assert_eq!(again, n);
        let (z, flagged) = normalize_gap_scale(&gap(array![[1.0]], array![[0.0], [0.0]]));
        assert_eq!(flagged, vec![0]);
        assert_eq!(z.beta, array![[0.0], [0.0]]);
    }

    proptest! {
        #[test]
        fn normalize_preserves_rate(seed in any::<u64>()) {
            let mut rng = Rng::new(seed);
            let theta = Array2::from_shape_fn((5, 3), |_| numeric::gamma(1.0, 0.5, &mut rng));
            let beta = Array2::from_shape_fn((7, 3), |_| numeric::gamma(1.0, 2.0, &mut rng));
            let p = gap(theta, beta);
            let (n, _) = normalize_gap_scale(&p);
            let before = p.theta.dot(&p.beta.t());
            let after = n.theta.dot(&n.beta.t());
            for (a, b) in before.iter().zip(after.iter()) {
                prop_assert!((a - b).abs() <= 1e-12 * a.abs());
            }
            let (twice, _) = normalize_gap_scale(&n);
            for (a, b) in twice.beta.iter().zip(n.beta.iter()) {
                prop_assert!((a - b).abs() <= 1e-15);
            }
        }

        #[test]
        fn greedy_is_optimal_under_a_dominant_assignment(seed in any::<u64>(), k in 2usize..=4) {
            let mut rng = Rng::new(seed);
            let r = random_topics(30, k, &mut rng);
            let scale = 1.0 / 30.0;
            let e = r.mapv(|x| (x + 0.5 * scale * rng.standard_normal()).abs());
            let corr = topic_correlations(&r, &e).unwrap();
            let (best, top, runner_up) = best_assignment(&corr);
            // Strict dominance: the best assignment also takes the largest
            // entry in every row and column it uses.
            let dominant = best.iter().enumerate().all(|(i, &j)| {
                (0..k).all(|m| m == j || corr[[i, m]] < corr[[i, j]])
                    && (0..k).all(|m| m == i || corr[[m, j]] < corr[[i, j]])
            });
            prop_assume!(dominant && top > runner_up);
            prop_assert_eq!(align_topics(&r, &e).unwrap().perm, best);
        }

        #[test]
        fn alignment_is_an_involution(seed in any::<u64>()) {
            let mut rng = Rng::new(seed);
            let b = random_topics(6, 4, &mut rng);
            let mut p: Vec<usize> = (0..4).collect();
            for i in (1..4).rev() {
                p.swap(i, (rng.uniform() * (i + 1) as f64) as usize);
            }
            let perm = TopicPermutation::from_perm(p).unwrap();
            let back = apply_alignment(&apply_alignment(&b, &perm).unwrap(), &perm.inverse()).unwrap();
            prop_assert_eq!(back, b);
        }
    }
}

fn is_gap(s: &PosteriorSamples) -> bool {
    matches!(s.meta.model.as_str(), "gap" | "zgap")
}

/// Aligns every draw of a fit to the posterior median topics of
/// `reference` (a fit or a simulated truth). GaP draws are normalized
/// first, and so is a GaP reference.
pub fn align_fit(reference: &PosteriorSamples, est: &PosteriorSamples) -> Result<PosteriorSamples> {
    if est.param("beta").is_none() {
        return Err(Error::config(format!("{} model has no topics to align", est.meta.model)));
    }
    let (reference, est) = if is_gap(est) {
        let r = if is_gap(reference) { normalize_gap_samples(reference)? } else { reference.clone() };
        (r, normalize_gap_samples(est)?)
    } else {
        (reference.clone(), est.clone())
    };
    let ref_beta = median_matrix(&reference, "beta")?;
    align_each_draw(&est, &ref_beta, "beta")
}
