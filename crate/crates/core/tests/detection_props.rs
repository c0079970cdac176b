mod common;

use nalgebra::DMatrix;
use opinion_ueba::detection::{as_column, score_step, ScoreState};
use opinion_ueba::{
    bayes_update, drift_likelihood, inject_cross_influence, scaled_mean_variance, InjectionEdge,
    PriorMode, ScoreConfig,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn chain(ls: &[f64], prior: f64, mode: PriorMode) -> Vec<f64> {
    let mut p = prior;
    ls.iter()
        .map(|&l| {
            let post = bayes_update(l, if mode == PriorMode::Online { p } else { prior });
            p = post;
            post
        })
        .collect()
}

proptest! {
    #[test]
    fn posterior_is_a_probability(l in 0.0f64..=1.0, prior in 0.0f64..=1.0) {
        let p = bayes_update(l, prior);
        prop_assert!((0.0..=1.0).contains(&p));
    }

    #[test]
    fn posterior_is_monotone_in_likelihood(a in 0.0f64..=1.0, b in 0.0f64..=1.0, prior in 0.001f64..0.999) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(bayes_update(lo, prior) <= bayes_update(hi, prior) + 1e-15);
    }

    #[test]
    fn posterior_is_monotone_in_prior(l in 0.001f64..0.999, a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(bayes_update(l, lo) <= bayes_update(l, hi) + 1e-15);
    }

    #[test]
    fn online_dominates_static_while_evidence_favours_anomaly(
        ls in proptest::collection::vec(0.5f64..1.0, 1..20), prior in 0.01f64..0.5,
    ) {
        let stat = chain(&ls, prior, PriorMode::Static);
        let online = chain(&ls, prior, PriorMode::Online);
        for (k, (s, o)) in stat.iter().zip(&online).enumerate() {
            prop_assert!(o + 1e-15 >= *s);
            if k >= 1 && ls[..=k].iter().all(|&l| l > 0.5) {
                prop_assert!(o > s);
            }
        }
    }

    #[test]
    fn likelihood_is_bounded_and_monotone(v_prev in 0.0f64..10.0, a in 0.0f64..10.0, b in 0.0f64..10.0, alpha in 0.01f64..10.0) {
        let (d1, l1) = drift_likelihood(a, v_prev, alpha);
        let (d2, l2) = drift_likelihood(b, v_prev, alpha);
        prop_assert!(d1 >= 0.0 && (0.0..=1.0).contains(&l1));
        if a <= b {
            prop_assert!(d1 <= d2 && l1 <= l2);
        }
    }

    #[test]
    fn variance_scales_with_the_square_of_the_scale(
        xs in proptest::collection::vec(-1.0f64..1.0, 2..30), s in 0.1f64..20.0,
    ) {
        let x = as_column(&xs);
        let (_, v1) = scaled_mean_variance(&x, 1.0);
        let (_, vs) = scaled_mean_variance(&x, s);
        prop_assert!((vs - s * s * v1).abs() <= 1e-9 * (1.0 + vs));
        prop_assert!(v1 >= 0.0);
    }

    #[test]
    fn identical_snapshots_score_nothing(seed in any::<u64>(), n in 1usize..8, m in 1usize..6) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, m, |_, _| rng.random_range(-1.0..1.0));
        for mode in [PriorMode::Static, PriorMode::Online] {
            let cfg = ScoreConfig::new(0.1, 3.0, 1.0, mode).unwrap();
            let (s, _) = score_step(&x, &x, &cfg, ScoreState::new(&cfg)).unwrap();
            prop_assert_eq!((s.delta_v, s.likelihood, s.posterior), (0.0, 0.0, 0.0));
        }
    }

    #[test]
    fn injection_keeps_rows_normalized_and_grows_with_weight(
        seed in any::<u64>(), m in 2usize..8, w1 in 0.0f64..50.0, w2 in 0.0f64..50.0,
    ) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = common::random_logic(&mut rng, m, 0.3, true, 0.1);
        let target = rng.random_range(0..m);
        let source = (target + 1 + rng.random_range(0..m - 1)) % m;
        let (lo, hi) = if w1 <= w2 { (w1, w2) } else { (w2, w1) };
        let a = inject_cross_influence(&base, &[InjectionEdge::new(target, source, lo).unwrap()]).unwrap();
        let b = inject_cross_influence(&base, &[InjectionEdge::new(target, source, hi).unwrap()]).unwrap();
        prop_assert!(a.get(target, source).abs() <= b.get(target, source).abs() + 1e-12);
        for c in [&a, &b] {
            for p in 0..m {
                let s: f64 = c.row(p).iter().map(|v| v.abs()).sum();
                prop_assert!((s - 1.0).abs() < 1e-9);
            }
            // untouched rows are copied
            for p in (0..m).filter(|&p| p != target) {
                prop_assert_eq!(c.row(p), base.row(p));
            }
        }
        let zero = inject_cross_influence(&base, &[InjectionEdge::new(target, source, 0.0).unwrap()]).unwrap();
        prop_assert_eq!(zero, base);
    }
}
