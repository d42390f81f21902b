use ndarray::Array2;
use proptest::prelude::*;

use plvm::align::{align_topics, apply_alignment, TopicPermutation};
use plvm::corpus::TimeIndex;
use plvm::gap::{hyperparams_for_expected_total, simulate_gap};
use plvm::inference::{summarize_posterior, PosteriorSamples, SampleMeta, TopicRole, Trace};
use plvm::lda::{lda_log_likelihood, simulate_dmm, simulate_lda, Concentration};
use plvm::numeric::Rng;
use plvm::simstudy::rmse_sqrt_medians;
use plvm::unigram::simulate_unigram;

fn simplex_columns(a: &Array2<f64>) -> bool {
    a.iter().all(|&x| x >= 0.0) && a.columns().into_iter().all(|c| (c.sum() - 1.0).abs() < 1e-12)
}

fn simplex_rows(a: &Array2<f64>) -> bool {
    a.iter().all(|&x| x >= 0.0) && a.rows().into_iter().all(|r| (r.sum() - 1.0).abs() < 1e-12)
}

fn samples(chains: &[Vec<Vec<f64>>], shape: Vec<usize>) -> PosteriorSamples {
    let traces = chains
        .iter()
        .map(|draws| {
            let mut t = Trace::new();
            t.declare("beta", shape.clone(), TopicRole::Axis(1));
            for d in draws {
                t.push("beta", d);
                t.end_draw();
            }
            t
        })
        .collect();
    PosteriorSamples::from_traces(SampleMeta::default(), traces).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn lda_simulation_respects_simplices(
        seed in 0u64..1000, d in 1usize..8, v in 1usize..12, k in 1usize..5,
        alpha in 0.05f64..5.0, gamma in 0.05f64..5.0, n in 0u64..500,
    ) {
        let totals = vec![n; d];
        let (x, p) = simulate_lda(d, v, k, &totals, &Concentration::Symmetric(alpha),
            &Concentration::Symmetric(gamma), &mut Rng::new(seed)).unwrap();
        prop_assert!(simplex_rows(&p.theta));
        prop_assert!(simplex_columns(&p.beta));
        prop_assert!(x.counts().rows().into_iter().all(|r| r.sum() == n));
    }

    #[test]
    fn dmm_labels_in_range(seed in 0u64..1000, d in 1usize..10, v in 1usize..10, k in 1usize..5) {
        let theta = vec![1.0 / k as f64; k];
        let (_, p) = simulate_dmm(d, v, k, &vec![50; d], &theta, &Concentration::Symmetric(0.5),
            &mut Rng::new(seed)).unwrap();
        prop_assert!(p.z.iter().all(|&z| z < k));
        prop_assert!(simplex_columns(&p.beta));
    }

    #[test]
    fn gap_masked_entries_are_zero(seed in 0u64..1000, d in 1usize..10, v in 1usize..15, k in 1usize..4, p0 in 0.0f64..0.9) {
        let hyper = hyperparams_for_expected_total(200.0, k, v).unwrap();
        let (x, params, mask) = simulate_gap(d, v, k, &hyper, p0, &mut Rng::new(seed)).unwrap();
        prop_assert!(params.theta.iter().chain(params.beta.iter()).all(|&t| t >= 0.0));
        for (c, m) in x.counts().iter().zip(mask.0.iter()) {
            prop_assert!(!*m || *c == 0);
        }
    }

    #[test]
    fn unigram_state_is_valid(seed in 0u64..1000, t in 1usize..8, v in 2usize..10, s2 in 0.01f64..4.0) {
        let ti = TimeIndex::sequential(t);
        let (x, state) = simulate_unigram(t, v, &ti, &vec![100; t], s2, &mut Rng::new(seed)).unwrap();
        prop_assert!(state.sigma2 > 0.0);
        prop_assert_eq!(state.mu.dim(), (t, v));
        prop_assert!(x.counts().rows().into_iter().all(|r| r.sum() == 100));
    }

    #[test]
    fn lda_likelihood_ignores_topic_order(seed in 0u64..1000, k in 2usize..5, rot in 1usize..4) {
        let (x, p) = simulate_lda(6, 9, k, &[40; 6], &Concentration::Symmetric(1.0),
            &Concentration::Symmetric(1.0), &mut Rng::new(seed)).unwrap();
        let perm = TopicPermutation::from_perm((0..k).map(|i| (i + rot) % k).collect()).unwrap();
        let q = apply_alignment(&p, &perm).unwrap();
        let (a, b) = (lda_log_likelihood(&x, &p).unwrap(), lda_log_likelihood(&x, &q).unwrap());
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        let back = align_topics(&p.beta, &q.beta).unwrap();
        prop_assert_eq!(apply_alignment(&q.beta, &back).unwrap(), p.beta.clone());
    }

    #[test]
    fn sd_ignores_chain_order(values in prop::collection::vec(-100.0f64..100.0, 24)) {
        let chains: Vec<Vec<Vec<f64>>> = values
            .chunks(8)
            .map(|c| c.chunks(2).map(|d| d.to_vec()).collect())
            .collect();
        let mut reversed = chains.clone();
        reversed.reverse();
        let a = summarize_posterior(&samples(&chains, vec![2, 1]), &[0.25, 0.75]).unwrap();
        let b = summarize_posterior(&samples(&reversed, vec![2, 1]), &[0.25, 0.75]).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x.sd - y.sd).abs() <= 1e-9 * x.sd.max(1.0));
            prop_assert_eq!(x.median, y.median);
            prop_assert_eq!(&x.quantiles, &y.quantiles);
        }
    }

    #[test]
    fn rmse_is_nonnegative(truth in prop::collection::vec(0.0f64..1.0, 6), draws in prop::collection::vec(0.0f64..1.0, 18)) {
        let truth = Array2::from_shape_vec((3, 2), truth).unwrap();
        let s = samples(&[draws.chunks(6).map(|d| d.to_vec()).collect()], vec![3, 2]);
        let rmse = rmse_sqrt_medians(&truth, &s, "beta").unwrap();
        prop_assert_eq!(rmse.len(), 3);
        prop_assert!(rmse.iter().all(|&r| r >= 0.0 && r.is_finite()));
    }
}
